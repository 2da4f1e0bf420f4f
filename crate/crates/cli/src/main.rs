use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pacmlp::bound::{corollary2_bound_with, BoundParams, DGapParams};
use pacmlp::data::Split;
use pacmlp::experiments::config::{DatasetSpec, ExperimentKind, ExperimentSpec};
use pacmlp::experiments::plot::emit_plot;
use pacmlp::experiments::runs::load_dataset;
use pacmlp::experiments::{run_experiment, run_single, SweepOutcome};
use pacmlp::mlp::MlpParams;
use pacmlp::Error;

#[derive(Parser)]
#[command(name = "pacmlp", version, about = "Train MLPs and track Gibbs-measure bound diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write its history, plot and checkpoint.
    Train {
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "784-256-128-10")]
        arch: String,
        #[arg(long, default_value = "sgd")]
        opt: String,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Training subset size, or `all`.
        #[arg(long, default_value = "all")]
        subset: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one experiment kind, from its defaults or a config file.
    Sweep {
        #[arg(long)]
        kind: Option<ExperimentKind>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the bound report of a checkpoint on a dataset as JSON.
    Bound {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 10.0)]
        b: f64,
        /// Defaults to `ln(1/L)`.
        #[arg(long)]
        log_pyx: Option<f64>,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
    },
    /// Plot CSV columns against the first column as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        cols: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn report(outcome: &SweepOutcome) {
    for c in &outcome.checks {
        let seed = c.seed.map_or_else(|| "all".to_string(), |s| s.to_string());
        println!("{} {} seed={} {}", c.status(), c.name, seed, c.value);
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            dataset,
            data_dir,
            arch,
            opt,
            lr,
            epochs,
            batch,
            seed,
            subset,
            out,
        } => {
            let mut spec = ExperimentSpec::defaults(ExperimentKind::ArchSweep);
            spec.subset = None;
            let pairs = [
                ("dataset", Some(dataset)),
                ("archs", Some(arch)),
                ("optimizer", Some(opt)),
                ("lr", lr.map(|v| v.to_string())),
                ("epochs", Some(epochs.to_string())),
                ("batch", Some(batch.to_string())),
                ("seeds", Some(seed.to_string())),
                ("subset", Some(subset)),
            ];
            for (k, v) in pairs {
                if let Some(v) = v {
                    spec.apply(k, &v).with_context(|| format!("--{k}"))?;
                }
            }
            spec.data_dir = data_dir;
            spec.out_dir = out;
            let (outcome, _) = run_single(&spec, seed, &mut |l| progress(l))?;
            for f in &outcome.files {
                println!("{}", f.display());
            }
            Ok(true)
        }
        Command::Sweep {
            kind,
            config,
            overrides,
            out,
        } => {
            let mut spec = match (&config, kind) {
                (Some(path), _) => ExperimentSpec::from_file(path)?,
                (None, Some(k)) => ExperimentSpec::defaults(k),
                (None, None) => anyhow::bail!("one of --kind or --config is required"),
            };
            if let (Some(k), Some(_)) = (kind, &config) {
                anyhow::ensure!(k == spec.kind, "--kind {k} conflicts with the config's kind {}", spec.kind);
            }
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
                spec.apply(k.trim(), v.trim())?;
            }
            spec.out_dir = out;
            match run_experiment(&spec, &mut |l| progress(l)) {
                Ok(outcome) => {
                    report(&outcome);
                    Ok(outcome.all_pass())
                }
                Err(e @ Error::CheckFailed(_)) => {
                    eprintln!("error: {e}");
                    Ok(false)
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Bound {
            ckpt,
            dataset,
            data_dir,
            delta,
            b,
            log_pyx,
            epsilon,
        } => {
            let params = MlpParams::load(&ckpt)?;
            let ds: DatasetSpec = dataset.parse()?;
            let mut spec = ExperimentSpec::defaults(ExperimentKind::ArchSweep);
            spec.data_dir = data_dir;
            let data = load_dataset(&ds, &spec, Split::Train, 1)?;
            let classes = params.config.l;
            let log_pyx = log_pyx.unwrap_or(-(classes as f64).ln());
            let p = BoundParams::new(delta, 0.0, b, log_pyx)?;
            let r = corollary2_bound_with(&params, &data, &p, DGapParams::new(epsilon))?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(true)
        }
        Command::Plot { csv, cols, out } => {
            emit_plot(&csv, &cols, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
