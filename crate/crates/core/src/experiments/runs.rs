//! The seven experiment kinds. Each writes its CSVs, SVGs and a
//! `summary.csv` of PASS/FAIL checks into the spec's output directory.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bound::{evaluate, BoundReport};
use crate::data::{
    load_idx, load_idx_dir, randomize_labels, separable_toy, subsample, synthetic_diagonal,
    LabelMode, LabeledDataset, Source, Split,
};
use crate::error::{Error, Result};
use crate::experiments::config::{DatasetSpec, ExperimentKind, ExperimentSpec};
use crate::experiments::csv::{format_history, format_summary, Check, EpochRecord, Table};
use crate::experiments::plot::render_svg;
use crate::experiments::probe::{
    probe_images, relu_gibbs, representatives, write_filter_images, TABLE1_IMG0_G1, TABLE1_IMG0_Q,
};
use crate::experiments::write_atomic;
use crate::mlp::{init_params, MlpConfig, MlpParams};
use crate::optim::{train, Optimizer, TrainConfig};
use crate::rng::mix64;

/// One training run's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub arch: String,
    pub optimizer: Optimizer,
    pub label_mode: LabelMode,
    pub train_n: usize,
    pub history: Vec<EpochRecord>,
    pub reached_zero_error: bool,
    /// Bound report of the final parameters on the training set.
    pub bound: BoundReport,
}

impl RunSummary {
    pub fn last(&self) -> &EpochRecord {
        self.history.last().expect("runs record at least one epoch")
    }

    /// First record at or after `epoch`, else the last one.
    pub fn at_epoch(&self, epoch: usize) -> &EpochRecord {
        self.history
            .iter()
            .find(|r| r.epoch >= epoch)
            .unwrap_or_else(|| self.last())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutcome {
    pub runs: Vec<RunSummary>,
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
}

impl SweepOutcome {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str, seed: Option<u64>) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name && c.seed == seed)
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_atomic(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }
}

/// Progress messages, one per finished run.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

fn default_dir(spec: &ExperimentSpec, fallback: &str) -> PathBuf {
    spec.data_dir.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn fresh_seed(seed: u64) -> u64 {
    mix64(seed ^ 0x7e57_5e7d)
}

/// Loads one dataset selector; generated sets are drawn from `seed`.
pub fn load_dataset(
    ds: &DatasetSpec,
    spec: &ExperimentSpec,
    split: Split,
    seed: u64,
) -> Result<LabeledDataset> {
    match ds {
        DatasetSpec::Mnist => load_idx_dir(&default_dir(spec, "data/mnist"), split, Source::Mnist),
        DatasetSpec::Fashion => {
            load_idx_dir(&default_dir(spec, "data/fashion"), split, Source::FashionMnist)
        }
        DatasetSpec::Synth { n, side } => match split {
            Split::Train => synthetic_diagonal(*n, *side, seed),
            Split::Test => synthetic_diagonal(256, *side, fresh_seed(seed)),
        },
        DatasetSpec::Toy { n, m } => match split {
            Split::Train => separable_toy(*n, *m, seed),
            Split::Test => separable_toy(*n, *m, fresh_seed(seed)),
        },
        DatasetSpec::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Training and test sets for a run seed, with the configured subset.
pub fn load_split_pair(spec: &ExperimentSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train_set = load_dataset(&spec.dataset, spec, Split::Train, seed)?;
    let mut test_set = match &spec.test_dataset {
        Some(t) => load_dataset(t, spec, Split::Test, seed)?,
        None => match spec.dataset {
            DatasetSpec::Idx { .. } => train_set.clone(),
            _ => load_dataset(&spec.dataset, spec, Split::Test, seed)?,
        },
    };
    if let Some(n) = spec.subset {
        if n < train_set.len() {
            train_set = subsample(&train_set, n, spec.balanced, spec.subset_seed)?;
        }
    }
    let classes = train_set.num_classes().max(test_set.num_classes());
    train_set = train_set.with_num_classes(classes)?;
    test_set = test_set.with_num_classes(classes)?;
    Ok((train_set, test_set))
}

fn check_arch(arch: &MlpConfig, data: &LabeledDataset) -> Result<()> {
    if arch.m != data.dim() || arch.l < data.num_classes() {
        return Err(Error::shape(
            format!("architecture {arch}"),
            format!("dataset with {} features and {} classes", data.dim(), data.num_classes()),
        ));
    }
    Ok(())
}

struct RunCtx<'a> {
    spec: &'a ExperimentSpec,
    arch: MlpConfig,
    tc: TrainConfig,
    seed: u64,
    label: String,
}

fn record(epoch: usize, params: &MlpParams, train_stats: &crate::bound::DatasetStats, test: &LabeledDataset, spec: &ExperimentSpec) -> Result<EpochRecord> {
    let test_stats = evaluate(params, test)?;
    Ok(EpochRecord {
        epoch,
        train_loss: train_stats.empirical_risk(),
        train_error: train_stats.error_rate(),
        test_error: test_stats.error_rate(),
        bound_proxy: train_stats.mean_energy(),
        mean_log_z: train_stats.mean_log_z(),
        mean_d_gap: train_stats.mean_d_gap(spec.dgap()),
    })
}

/// Trains one network and returns its history and final parameters.
fn run_one(
    ctx: &RunCtx<'_>,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
) -> Result<(RunSummary, MlpParams)> {
    check_arch(&ctx.arch, train_set)?;
    let spec = ctx.spec;
    let mut params = init_params(ctx.arch, ctx.seed);
    if spec.zero_head {
        params = params.with_zero_head();
    }
    let mut history = Vec::new();
    if spec.record_initial {
        let s = evaluate(&params, train_set)?;
        history.push(record(0, &params, &s, test_set, spec)?);
    }
    let mut failure = None;
    let (params, _) = train(params, train_set, &ctx.tc, |c| {
        match record(c.metrics.epoch, c.params, c.train, test_set, spec) {
            Ok(r) => history.push(r),
            Err(e) => {
                failure = Some(e);
                return ControlFlow::Break(());
            }
        }
        if spec.stop_at_zero_error && c.train.errors == 0 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let reached_zero_error = history.last().is_some_and(|r| r.train_error == 0.0);
    let bound = evaluate(&params, train_set)?
        .bound_report(&spec.bound_params(train_set.num_classes()), spec.dgap())?;
    Ok((
        RunSummary {
            label: ctx.label.clone(),
            seed: ctx.seed,
            arch: ctx.arch.to_string(),
            optimizer: ctx.tc.optimizer,
            label_mode: train_set.meta.label_mode,
            train_n: train_set.len(),
            history,
            reached_zero_error,
            bound,
        },
        params,
    ))
}

fn base_meta(spec: &ExperimentSpec) -> Vec<(String, String)> {
    vec![
        ("spec_sha256".into(), spec.hash()),
        ("kind".into(), spec.kind.to_string()),
    ]
}

fn run_meta(spec: &ExperimentSpec, run: &RunSummary, tc: &TrainConfig, test_n: usize) -> Vec<(String, String)> {
    let mut m = base_meta(spec);
    m.extend([
        ("run".into(), run.label.clone()),
        ("seed".into(), run.seed.to_string()),
        ("arch".into(), run.arch.clone()),
        ("optimizer".into(), tc.optimizer.to_string()),
        ("lr".into(), tc.lr.to_string()),
        ("label_mode".into(), run.label_mode.as_str().into()),
        ("train_n".into(), run.train_n.to_string()),
        ("test_n".into(), test_n.to_string()),
        ("config".into(), spec.canonical_text()),
    ]);
    m
}

/// Writes a run's history CSV and its SVG plot.
fn write_run(
    out: &mut SweepOutcome,
    spec: &ExperimentSpec,
    run: &RunSummary,
    tc: &TrainConfig,
    test_n: usize,
) -> Result<()> {
    let csv = format_history(&run_meta(spec, run, tc, test_n), &run.history);
    let table = Table::parse(&csv)?;
    let svg = render_svg(&table, &spec.plot_cols)?;
    out.write(spec.out_dir.join(format!("{}.csv", run.label)), csv.as_bytes())?;
    out.write(spec.out_dir.join(format!("{}.svg", run.label)), svg.as_bytes())?;
    let mut json = serde_json::to_string_pretty(&run.bound).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    json.push('\n');
    out.write(spec.out_dir.join(format!("{}_bound.json", run.label)), json.as_bytes())?;
    Ok(())
}

/// Adds a check that passes when at least two thirds of the per-seed
/// checks named `name` pass.
fn majority(out: &mut SweepOutcome, name: &str, aggregate: &str) {
    let per: Vec<bool> = out
        .checks
        .iter()
        .filter(|c| c.name == name && c.seed.is_some())
        .map(|c| c.pass)
        .collect();
    let passed = per.iter().filter(|&&p| p).count();
    let needed = (2 * per.len()).div_ceil(3);
    out.checks.push(Check::new(
        aggregate,
        None,
        format!("{passed}/{} seeds", per.len()),
        !per.is_empty() && passed >= needed,
    ));
}

fn finish(out: &mut SweepOutcome, spec: &ExperimentSpec) -> Result<()> {
    let mut meta = base_meta(spec);
    meta.push(("config".into(), spec.canonical_text()));
    let text = format_summary(&meta, &out.checks);
    out.write(spec.out_dir.join("summary.csv"), text.as_bytes())
}

pub fn run_experiment(spec: &ExperimentSpec, progress: Progress<'_>) -> Result<SweepOutcome> {
    spec.validate()?;
    match spec.kind {
        ExperimentKind::ArchSweep => run_arch_sweep(spec, progress),
        ExperimentKind::OptimizerSweep => run_optimizer_sweep(spec, progress),
        ExperimentKind::SampleSizeSweep => run_sample_size_sweep(spec, progress),
        ExperimentKind::RandomLabels => run_random_labels(spec, progress),
        ExperimentKind::SynthProbe => run_synth_probe(spec, progress),
        ExperimentKind::DGapTrace => run_d_gap_trace(spec, progress),
        ExperimentKind::EnergyPartitionTrace => run_energy_partition_trace(spec, progress),
    }
}

fn fmt_cmp(a: f64, op: &str, b: f64) -> String {
    format!("{a} {op} {b}")
}

fn note(progress: &mut dyn FnMut(&str), run: &RunSummary) {
    let r = run.last();
    progress(&format!(
        "{}: epoch {} train_loss {:.5} train_error {:.4} test_error {:.4} bound_proxy {:.4}",
        run.label, r.epoch, r.train_loss, r.train_error, r.test_error, r.bound_proxy
    ));
}

/// Architectures are compared in order of parameter count.
pub fn run_arch_sweep(spec: &ExperimentSpec, progress: Progress<'_>) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    let mut archs = spec.archs.clone();
    archs.sort_by_key(|a| a.param_count());
    let per_seed_data = !matches!(spec.dataset, DatasetSpec::Mnist | DatasetSpec::Fashion | DatasetSpec::Idx { .. });
    let mut cached = None;
    for &seed in &spec.seeds {
        if per_seed_data || cached.is_none() {
            cached = Some(load_split_pair(spec, seed)?);
        }
        let (train_set, test_set) = cached.as_ref().expect("loaded");
        let tc = spec.train_config(spec.optimizers[0], seed);
        let mut finals = Vec::new();
        for &arch in &archs {
            let ctx = RunCtx {
                spec,
                arch,
                tc,
                seed,
                label: format!("arch_{arch}_seed{seed}"),
            };
            let (run, _) = run_one(&ctx, train_set, test_set)?;
            write_run(&mut out, spec, &run, &tc, test_set.len())?;
            note(progress, &run);
            finals.push(*run.last());
            out.runs.push(run);
        }
        let proxy_ok = finals.windows(2).all(|w| w[1].bound_proxy <= w[0].bound_proxy);
        let test_ok = finals.windows(2).all(|w| w[1].test_error <= w[0].test_error);
        let listing = |f: fn(&EpochRecord) -> f64| {
            finals.iter().map(|r| f(r).to_string()).collect::<Vec<_>>().join(" >= ")
        };
        out.checks.push(Check::new("wider_bound_proxy_not_larger", Some(seed), listing(|r| r.bound_proxy), proxy_ok));
        out.checks.push(Check::new("wider_test_error_not_larger", Some(seed), listing(|r| r.test_error), test_ok));
        out.checks.push(Check::new(
            "wider_both_not_larger",
            Some(seed),
            format!("proxy {proxy_ok} test {test_ok}"),
            proxy_ok && test_ok,
        ));
        let rank = |f: fn(&EpochRecord) -> f64| {
            let mut idx: Vec<usize> = (0..finals.len()).collect();
            idx.sort_by(|&a, &b| f(&finals[a]).total_cmp(&f(&finals[b])));
            idx
        };
        let (rp, rt) = (rank(|r| r.bound_proxy), rank(|r| r.test_error));
        out.checks.push(Check::new(
            "proxy_ranking_matches_test_error_ranking",
            Some(seed),
            format!("{rp:?} vs {rt:?}"),
            rp == rt,
        ));
    }
    majority(&mut out, "wider_both_not_larger", "arch_trend_majority");
    finish(&mut out, spec)?;
    Ok(out)
}

pub fn run_optimizer_sweep(spec: &ExperimentSpec, progress: Progress<'_>) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    let arch = spec.archs[0];
    let per_seed_data = !matches!(spec.dataset, DatasetSpec::Mnist | DatasetSpec::Fashion | DatasetSpec::Idx { .. });
    let mut cached = None;
    let probe_epoch = 30.min(spec.train.epochs);
    for &seed in &spec.seeds {
        if per_seed_data || cached.is_none() {
            cached = Some(load_split_pair(spec, seed)?);
        }
        let (train_set, test_set) = cached.as_ref().expect("loaded");
        let mut results = Vec::new();
        for &opt in &spec.optimizers {
            let tc = spec.train_config(opt, seed);
            let ctx = RunCtx {
                spec,
                arch,
                tc,
                seed,
                label: format!("opt_{opt}_seed{seed}"),
            };
            let (run, _) = run_one(&ctx, train_set, test_set)?;
            write_run(&mut out, spec, &run, &tc, test_set.len())?;
            note(progress, &run);
            results.push((opt, run.at_epoch(probe_epoch).train_loss, *run.last()));
            out.runs.push(run);
        }
        if let Some(&(_, sgd_loss, _)) = results.iter().find(|r| r.0 == Optimizer::Sgd) {
            let adaptive: Vec<_> = results.iter().filter(|r| r.0 != Optimizer::Sgd).collect();
            if !adaptive.is_empty() {
                let ok = adaptive.iter().all(|r| r.1 < sgd_loss);
                let value = adaptive
                    .iter()
                    .map(|r| format!("{} {}", r.0, r.1))
                    .chain([format!("sgd {sgd_loss}")])
                    .collect::<Vec<_>>()
                    .join(" ");
                out.checks.push(Check::new(
                    format!("adaptive_lower_train_loss_epoch{probe_epoch}"),
                    Some(seed),
                    value,
                    ok,
                ));
            }
        }
        let order = |f: fn(&EpochRecord) -> f64| {
            let mut v: Vec<_> = results.iter().map(|r| (f(&r.2), r.0)).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            v.into_iter().map(|x| x.1.to_string()).collect::<Vec<_>>()
        };
        let (by_test, by_proxy) = (order(|r| r.test_error), order(|r| r.bound_proxy));
        out.checks.push(Check::new(
            "proxy_ranking_matches_test_error_ranking",
            Some(seed),
            format!("test {} proxy {}", by_test.join("<"), by_proxy.join("<")),
            by_test == by_proxy,
        ));
    }
    let name = format!("adaptive_lower_train_loss_epoch{probe_epoch}");
    if out.checks.iter().any(|c| c.name == name) {
        majority(&mut out, &name, "adaptive_trend_majority");
    }
    finish(&mut out, spec)?;
    Ok(out)
}

pub fn run_sample_size_sweep(spec: &ExperimentSpec, progress: Progress<'_>) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    let arch = spec.archs[0];
    let mut sizes = spec.sizes.clone();
    sizes.sort_unstable();
    let per_seed_data = !matches!(spec.dataset, DatasetSpec::Mnist | DatasetSpec::Fashion | DatasetSpec::Idx { .. });
    let mut cached = None;
    let mut size_spec = spec.clone();
    size_spec.subset = None;
    for &seed in &spec.seeds {
        if per_seed_data || cached.is_none() {
            cached = Some(load_split_pair(&size_spec, seed)?);
        }
        let (full, test_set) = cached.as_ref().expect("loaded");
        let tc = spec.train_config(spec.optimizers[0], seed);
        let mut table = Table::new(&[
            "n",
            "final_train_error",
            "final_test_error",
            "final_bound_proxy",
            "final_train_loss",
            "epochs_run",
            "reached_zero_error",
        ]);
        let mut finals = Vec::new();
        for &n in &sizes {
            let train_set = if n == full.len() {
                full.clone()
            } else {
                subsample(full, n, spec.balanced, spec.subset_seed)?
            };
            let ctx = RunCtx {
                spec,
                arch,
                tc,
                seed,
                label: format!("size_n{n}_seed{seed}"),
            };
            let (run, _) = run_one(&ctx, &train_set, test_set)?;
            write_run(&mut out, spec, &run, &tc, test_set.len())?;
            note(progress, &run);
            let r = *run.last();
            table.rows.push(vec![
                n as f64,
                r.train_error,
                r.test_error,
                r.bound_proxy,
                r.train_loss,
                r.epoch as f64,
                if run.reached_zero_error { 1.0 } else { 0.0 },
            ]);
            finals.push((n, r, run.reached_zero_error));
            out.runs.push(run);
        }
        let mut meta = base_meta(spec);
        meta.extend([
            ("seed".into(), seed.to_string()),
            ("arch".into(), arch.to_string()),
            ("optimizer".into(), tc.optimizer.to_string()),
            ("balanced".into(), spec.balanced.to_string()),
            ("subset_seed".into(), spec.subset_seed.to_string()),
            ("config".into(), spec.canonical_text()),
        ]);
        let csv = table.to_csv(&meta);
        let svg = render_svg(&Table::parse(&csv)?, &["final_test_error".into(), "final_bound_proxy".into()])?;
        out.write(spec.out_dir.join(format!("size_seed{seed}.csv")), csv.as_bytes())?;
        out.write(spec.out_dir.join(format!("size_seed{seed}.svg")), svg.as_bytes())?;

        let (first, last) = (finals[0], finals[finals.len() - 1]);
        let decreases = first.1.bound_proxy > last.1.bound_proxy;
        out.checks.push(Check::new(
            "bound_proxy_decreases_smallest_to_largest_n",
            Some(seed),
            format!("n={} {} > n={} {}", first.0, first.1.bound_proxy, last.0, last.1.bound_proxy),
            decreases,
        ));
        let all_zero = finals.iter().all(|f| f.2);
        out.checks.push(Check::new(
            "all_sizes_reached_zero_train_error",
            Some(seed),
            finals
                .iter()
                .map(|f| format!("n={}:{}", f.0, f.1.train_error))
                .collect::<Vec<_>>()
                .join(" "),
            all_zero,
        ));
        out.checks.push(Check::new(
            "size_trend_at_zero_train_error",
            Some(seed),
            format!("decreases {decreases} zero_error {all_zero}"),
            decreases && all_zero,
        ));
    }
    majority(&mut out, "size_trend_at_zero_train_error", "size_trend_majority");
    finish(&mut out, spec)?;
    Ok(out)
}

pub fn run_random_labels(spec: &ExperimentSpec, progress: Progress<'_>) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    let arch = spec.archs[0];
    let per_seed_data = !matches!(spec.dataset, DatasetSpec::Mnist | DatasetSpec::Fashion | DatasetSpec::Idx { .. });
    let mut cached = None;
    for &seed in &spec.seeds {
        if per_seed_data || cached.is_none() {
            cached = Some(load_split_pair(spec, seed)?);
        }
        let (train_set, test_set) = cached.as_ref().expect("loaded");
        let tc = spec.train_config(spec.optimizers[0], seed);
        let random_set = randomize_labels(train_set, fresh_seed(seed));
        let mut pair = Vec::new();
        for (mode, data) in [("real", train_set), ("random", &random_set)] {
            let ctx = RunCtx {
                spec,
                arch,
                tc,
                seed,
                label: format!("random_{mode}_seed{seed}"),
            };
            let (run, _) = run_one(&ctx, data, test_set)?;
            write_run(&mut out, spec, &run, &tc, test_set.len())?;
            note(progress, &run);
            pair.push(run);
        }
        let (real, rand) = (pair[0].last(), pair[1].last());
        let proxy_ok = rand.bound_proxy > real.bound_proxy;
        let test_ok = rand.test_error > real.test_error;
        out.checks.push(Check::new("random_bound_proxy_higher", Some(seed), fmt_cmp(rand.bound_proxy, ">", real.bound_proxy), proxy_ok));
        out.checks.push(Check::new("random_test_error_higher", Some(seed), fmt_cmp(rand.test_error, ">", real.test_error), test_ok));
        out.checks.push(Check::new(
            "random_both_higher",
            Some(seed),
            format!("proxy {proxy_ok} test {test_ok}"),
            proxy_ok && test_ok,
        ));
        let chance = 1.0 - 1.0 / test_set.num_classes() as f64;
        let worst = pair[1]
            .history
            .iter()
            .map(|r| (r.test_error - chance).abs())
            .fold(0.0f64, f64::max);
        out.checks.push(Check::new("random_test_error_near_chance", Some(seed), format!("max |err - {chance}| = {worst}"), worst <= 0.05));
        out.checks.push(Check::new("real_train_error_below_0.05", Some(seed), real.train_error.to_string(), real.train_error < 0.05));
        let first = pair[1].history.iter().find(|r| r.epoch >= 1).expect("epoch 1");
        out.checks.push(Check::new(
            "random_train_error_descends",
            Some(seed),
            fmt_cmp(rand.train_error, "<", first.train_error),
            rand.train_error < first.train_error,
        ));
        let below = pair[0]
            .history
            .iter()
            .zip(&pair[1].history)
            .filter(|(a, b)| a.epoch >= 1 && b.bound_proxy <= a.bound_proxy)
            .map(|(a, _)| a.epoch)
            .collect::<Vec<_>>();
        out.checks.push(Check::new(
            "random_bound_proxy_stays_above",
            Some(seed),
            format!("epochs at or below real: {below:?}"),
            below.is_empty(),
        ));
        out.runs.extend(pair);
    }
    majority(&mut out, "random_both_higher", "random_trend_majority");
    finish(&mut out, spec)?;
    Ok(out)
}

/// Fails with `CheckFailed` after writing its outputs when some seed does
/// not reach 100% training accuracy.
pub fn run_synth_probe(spec: &ExperimentSpec, progress: Progress<'_>) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    let arch = spec.archs[0];
    let side = match spec.dataset {
        DatasetSpec::Synth { side, .. } => side,
        _ => (arch.m as f64).sqrt().round() as usize,
    };

    let q = relu_gibbs(&TABLE1_IMG0_G1)?;
    let worst = TABLE1_IMG0_Q
        .iter()
        .map(|&(t, v)| (q[t] - v).abs())
        .fold(0.0f64, f64::max);
    out.checks.push(Check::new("reference_row_replay", None, format!("max deviation {worst}"), worst <= 1e-3));

    let mut failed = Vec::new();
    for &seed in &spec.seeds {
        let (train_set, test_set) = load_split_pair(spec, seed)?;
        let tc = spec.train_config(spec.optimizers[0], seed);
        let ctx = RunCtx {
            spec,
            arch,
            tc,
            seed,
            label: format!("probe_history_seed{seed}"),
        };
        let (run, params) = run_one(&ctx, &train_set, &test_set)?;
        write_run(&mut out, spec, &run, &tc, test_set.len())?;
        note(progress, &run);

        let reps = representatives(&train_set);
        let (rows, modes) = probe_images(&params, &train_set, &reps)?;
        let mut table = Table::new(&["image", "class", "filter", "g1", "f1", "exp_f1", "q"]);
        for r in &rows {
            table.rows.push(vec![r.image as f64, r.class as f64, r.filter as f64, r.g1, r.f1, r.exp_f1, r.q]);
        }
        let mut meta = base_meta(spec);
        meta.extend([
            ("seed".into(), seed.to_string()),
            ("arch".into(), arch.to_string()),
            ("config".into(), spec.canonical_text()),
        ]);
        out.write(spec.out_dir.join(format!("probe_seed{seed}.csv")), table.to_csv(&meta).as_bytes())?;
        if side * side == arch.m {
            let stem = format!("probe_seed{seed}");
            out.files.extend(write_filter_images(&params.w1, side, &spec.out_dir, &stem)?);
        }

        let mut sum_dev = 0.0f64;
        let mut exp_dev = 0.0f64;
        for &img in &reps {
            let s: f64 = rows.iter().filter(|r| r.image == img).map(|r| r.q).sum();
            sum_dev = sum_dev.max((s - 1.0).abs());
        }
        for r in &rows {
            exp_dev = exp_dev.max(((r.exp_f1 - r.f1.exp()) / r.f1.exp()).abs());
        }
        let mut distinct = modes.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let accurate = run.reached_zero_error;
        out.checks.push(Check::new("train_accuracy_100", Some(seed), format!("train_error {} after {} epochs", run.last().train_error, run.last().epoch), accurate));
        out.checks.push(Check::new("probe_q_sums_to_one", Some(seed), format!("max deviation {sum_dev}"), sum_dev <= 1e-9));
        out.checks.push(Check::new("probe_exp_row_matches", Some(seed), format!("max relative deviation {exp_dev}"), exp_dev <= 1e-15));
        out.checks.push(Check::new(
            "probe_argmax_filters_distinct",
            Some(seed),
            format!("{modes:?}"),
            distinct.len() == modes.len(),
        ));
        if !accurate {
            failed.push(seed);
        }
        out.runs.push(run);
    }
    finish(&mut out, spec)?;
    if !failed.is_empty() {
        return Err(Error::CheckFailed(format!(
            "synthetic probe did not reach 100% training accuracy for seeds {failed:?}"
        )));
    }
    Ok(out)
}

pub fn run_d_gap_trace(spec: &ExperimentSpec, progress: Progress<'_>) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    let arch = spec.archs[0];
    for &seed in &spec.seeds {
        let (train_set, test_set) = load_split_pair(spec, seed)?;
        let tc = spec.train_config(spec.optimizers[0], seed);
        let ctx = RunCtx {
            spec,
            arch,
            tc,
            seed,
            label: format!("dgap_seed{seed}"),
        };
        let (run, params) = run_one(&ctx, &train_set, &test_set)?;
        write_run(&mut out, spec, &run, &tc, test_set.len())?;
        note(progress, &run);
        let first = run.history.iter().find(|r| r.epoch == 1).expect("epoch 1");
        let last = run.last();
        let finite = first.mean_d_gap.is_finite();
        out.checks.push(Check::new("epoch1_d_gap_finite", Some(seed), first.mean_d_gap.to_string(), finite));
        let shrinks = last.mean_d_gap.abs() < first.mean_d_gap.abs();
        out.checks.push(Check::new("d_gap_shrinks", Some(seed), fmt_cmp(last.mean_d_gap.abs(), "<", first.mean_d_gap.abs()), shrinks));
        let converged = last.train_loss < 0.01;
        out.checks.push(Check::new("loss_below_0.01", Some(seed), last.train_loss.to_string(), converged));
        out.checks.push(Check::new(
            "final_d_gap_below_0.1",
            Some(seed),
            last.mean_d_gap.abs().to_string(),
            converged && last.mean_d_gap.abs() < 0.1,
        ));
        let stats = evaluate(&params, &train_set)?;
        let alt = stats.mean_d_gap(crate::bound::DGapParams::new(spec.epsilon_alt));
        let diff = (alt - stats.mean_d_gap(spec.dgap())).abs();
        out.checks.push(Check::new(
            "d_gap_epsilon_sensitivity_below_0.01",
            Some(seed),
            format!("|d({}) - d({})| = {diff}", spec.epsilon, spec.epsilon_alt),
            diff < 0.01,
        ));
        out.runs.push(run);
    }
    finish(&mut out, spec)?;
    Ok(out)
}

pub fn run_energy_partition_trace(spec: &ExperimentSpec, progress: Progress<'_>) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    let arch = spec.archs[0];
    let per_seed_data = !matches!(spec.dataset, DatasetSpec::Mnist | DatasetSpec::Fashion | DatasetSpec::Idx { .. });
    let mut cached = None;
    for &seed in &spec.seeds {
        if per_seed_data || cached.is_none() {
            cached = Some(load_split_pair(spec, seed)?);
        }
        let (train_set, test_set) = cached.as_ref().expect("loaded");
        let tc = spec.train_config(spec.optimizers[0], seed);
        let ctx = RunCtx {
            spec,
            arch,
            tc,
            seed,
            label: format!("energytrace_seed{seed}"),
        };
        let (run, _) = run_one(&ctx, train_set, test_set)?;
        write_run(&mut out, spec, &run, &tc, test_set.len())?;
        note(progress, &run);
        out.checks.extend(energy_checks(&run, arch.l, spec.zero_head && spec.record_initial));
        out.runs.push(run);
    }
    finish(&mut out, spec)?;
    Ok(out)
}

/// Per-epoch energy/partition identity and the trend of both terms.
pub fn energy_checks(run: &RunSummary, classes: usize, zero_head_start: bool) -> Vec<Check> {
    let seed = Some(run.seed);
    let worst = run
        .history
        .iter()
        .map(|r| (r.bound_proxy + r.mean_log_z - r.train_loss).abs())
        .fold(0.0f64, f64::max);
    let mut checks = vec![Check::new(
        "energy_plus_log_z_equals_loss",
        seed,
        format!("max deviation {worst}"),
        worst < 1e-10,
    )];
    let (first, last) = (&run.history[0], run.last());
    if zero_head_start {
        let ln_l = (classes as f64).ln();
        checks.push(Check::new(
            "initial_log_z_is_ln_l",
            seed,
            fmt_cmp(first.mean_log_z, "==", ln_l),
            first.epoch == 0 && first.mean_log_z == ln_l,
        ));
    }
    checks.push(Check::new("sum_decreases", seed, fmt_cmp(last.train_loss, "<", first.train_loss), last.train_loss < first.train_loss));
    checks.push(Check::new("mean_log_z_increases", seed, fmt_cmp(last.mean_log_z, ">", first.mean_log_z), last.mean_log_z > first.mean_log_z));
    checks.push(Check::new("mean_energy_decreases", seed, fmt_cmp(last.bound_proxy, "<", first.bound_proxy), last.bound_proxy < first.bound_proxy));
    checks
}

/// Output path helper for callers that want a run's CSV.
pub fn run_csv_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!("{label}.csv"))
}

/// Trains the spec's first architecture with its first optimizer and writes
/// `train_seed<seed>.csv`, its plot and a checkpoint `train_seed<seed>.ckpt`.
pub fn run_single(spec: &ExperimentSpec, seed: u64, progress: Progress<'_>) -> Result<(SweepOutcome, MlpParams)> {
    spec.validate()?;
    let mut out = SweepOutcome::default();
    let (train_set, test_set) = load_split_pair(spec, seed)?;
    let tc = spec.train_config(spec.optimizers[0], seed);
    let ctx = RunCtx {
        spec,
        arch: spec.archs[0],
        tc,
        seed,
        label: format!("train_seed{seed}"),
    };
    let (run, params) = run_one(&ctx, &train_set, &test_set)?;
    write_run(&mut out, spec, &run, &tc, test_set.len())?;
    let ckpt = spec.out_dir.join(format!("train_seed{seed}.ckpt"));
    params.save(&ckpt)?;
    out.files.push(ckpt);
    note(progress, &run);
    out.runs.push(run);
    Ok((out, params))
}
