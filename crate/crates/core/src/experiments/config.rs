//! Experiment specifications and their flat `key = value` config format.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique and
//! unknown keys are rejected. Every key has a per-kind default, so a config
//! may contain only `kind = ...`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::bound::{BoundParams, DGapParams};
use crate::error::{Error, Result};
use crate::mlp::MlpConfig;
use crate::optim::{Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    ArchSweep,
    OptimizerSweep,
    SampleSizeSweep,
    RandomLabels,
    SynthProbe,
    DGapTrace,
    EnergyPartitionTrace,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::ArchSweep,
        ExperimentKind::OptimizerSweep,
        ExperimentKind::SampleSizeSweep,
        ExperimentKind::RandomLabels,
        ExperimentKind::SynthProbe,
        ExperimentKind::DGapTrace,
        ExperimentKind::EnergyPartitionTrace,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::ArchSweep => "arch",
            ExperimentKind::OptimizerSweep => "opt",
            ExperimentKind::SampleSizeSweep => "size",
            ExperimentKind::RandomLabels => "random",
            ExperimentKind::SynthProbe => "synthprobe",
            ExperimentKind::DGapTrace => "dgap",
            ExperimentKind::EnergyPartitionTrace => "energytrace",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown experiment kind `{s}` (arch, opt, size, random, synthprobe, dgap, energytrace)"
                ))
            })
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Mnist,
    Fashion,
    /// Diagonal-sorted normal images, `n` of `side × side`.
    Synth { n: usize, side: usize },
    /// Separable two-class points, `n` in `m` dimensions.
    Toy { n: usize, m: usize },
    Idx { images: PathBuf, labels: PathBuf },
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Mnist => f.write_str("mnist"),
            DatasetSpec::Fashion => f.write_str("fashion"),
            DatasetSpec::Synth { n, side } => write!(f, "synth:{n}x{side}"),
            DatasetSpec::Toy { n, m } => write!(f, "toy:{n}x{m}"),
            DatasetSpec::Idx { images, labels } => {
                write!(f, "idx:{},{}", images.display(), labels.display())
            }
        }
    }
}

fn parse_pair(s: &str, what: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidParameter(format!("bad {what} size `{s}`, expected NxM"));
    let (a, b) = s.split_once('x').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

impl FromStr for DatasetSpec {
    type Err = Error;

    /// `mnist`, `fashion`, `synth[:NxSIDE]`, `toy[:NxM]` or
    /// `idx:<images>,<labels>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        match (head, rest) {
            ("mnist", None) => Ok(DatasetSpec::Mnist),
            ("fashion", None) => Ok(DatasetSpec::Fashion),
            ("synth", None) => Ok(DatasetSpec::Synth { n: 256, side: 32 }),
            ("synth", Some(r)) => {
                let (n, side) = parse_pair(r, "synthetic")?;
                Ok(DatasetSpec::Synth { n, side })
            }
            ("toy", None) => Ok(DatasetSpec::Toy { n: 50, m: 4 }),
            ("toy", Some(r)) => {
                let (n, m) = parse_pair(r, "toy")?;
                Ok(DatasetSpec::Toy { n, m })
            }
            ("idx", Some(r)) => {
                let (img, lbl) = r.split_once(',').ok_or_else(|| {
                    Error::InvalidParameter(format!("`{s}` must be idx:<images>,<labels>"))
                })?;
                Ok(DatasetSpec::Idx {
                    images: PathBuf::from(img.trim()),
                    labels: PathBuf::from(lbl.trim()),
                })
            }
            _ => Err(Error::InvalidParameter(format!(
                "unknown dataset `{s}` (mnist, fashion, synth[:NxSIDE], toy[:NxM], idx:<img>,<lbl>)"
            ))),
        }
    }
}

/// The fully resolved description of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub dataset: DatasetSpec,
    /// Held-out set; defaults to the official test split, a fresh draw for
    /// generated data, or the training set for `idx:` files.
    pub test_dataset: Option<DatasetSpec>,
    /// Directory of the IDX files for `mnist`/`fashion`.
    pub data_dir: Option<PathBuf>,
    pub archs: Vec<MlpConfig>,
    pub optimizers: Vec<Optimizer>,
    /// Per-optimizer default when absent.
    pub lr: Option<f64>,
    pub train: TrainConfig,
    pub bound: BoundParams,
    /// `ln(1/L)` when absent.
    pub log_pyx: Option<f64>,
    pub epsilon: f64,
    /// Second `ε` for the d-gap sensitivity check.
    pub epsilon_alt: f64,
    pub seeds: Vec<u64>,
    pub subset: Option<usize>,
    pub subset_seed: u64,
    pub balanced: bool,
    pub sizes: Vec<usize>,
    pub zero_head: bool,
    pub record_initial: bool,
    pub stop_at_zero_error: bool,
    pub plot_cols: Vec<String>,
    /// Not part of the spec hash.
    pub out_dir: PathBuf,
}

/// Sample sizes for the sample-size sweep.
pub const SIZE_LADDER: [usize; 13] = [
    250, 400, 650, 1000, 1600, 2500, 4000, 6300, 10000, 16000, 25000, 40000, 60000,
];

fn arch(s: &str) -> MlpConfig {
    s.parse().expect("built-in architecture")
}

impl ExperimentSpec {
    /// Defaults for `kind`; epoch counts follow the figures being mirrored.
    pub fn defaults(kind: ExperimentKind) -> Self {
        use ExperimentKind::*;
        let mut train = TrainConfig::new(Optimizer::Sgd);
        train.epochs = match kind {
            OptimizerSweep | DGapTrace => 200,
            _ => 100,
        };
        let (dataset, archs, subset) = match kind {
            ArchSweep => (
                DatasetSpec::Mnist,
                vec![arch("784-64-32-10"), arch("784-256-128-10"), arch("784-1024-512-10")],
                Some(10_000),
            ),
            OptimizerSweep | EnergyPartitionTrace => {
                (DatasetSpec::Mnist, vec![arch("784-256-128-10")], Some(10_000))
            }
            SampleSizeSweep => (DatasetSpec::Mnist, vec![arch("784-256-128-10")], None),
            RandomLabels => (DatasetSpec::Mnist, vec![arch("784-1024-512-10")], Some(10_000)),
            SynthProbe => (
                DatasetSpec::Synth { n: 256, side: 32 },
                vec![arch("1024-8-6-4")],
                None,
            ),
            DGapTrace => (DatasetSpec::Toy { n: 50, m: 4 }, vec![arch("4-8-8-2")], None),
        };
        let optimizer = match kind {
            SampleSizeSweep | SynthProbe | DGapTrace => Optimizer::Adam,
            _ => Optimizer::Sgd,
        };
        train.optimizer = optimizer;
        train.lr = TrainConfig::default_lr(optimizer);
        if kind == DGapTrace {
            train.batch_size = 10;
        }
        Self {
            kind,
            dataset,
            test_dataset: None,
            data_dir: None,
            archs,
            optimizers: match kind {
                OptimizerSweep => Optimizer::ALL.to_vec(),
                _ => vec![optimizer],
            },
            lr: (kind == DGapTrace).then_some(0.01),
            train,
            bound: BoundParams::for_classes(10),
            log_pyx: None,
            epsilon: DGapParams::default().epsilon,
            epsilon_alt: 1e-4,
            seeds: vec![1, 2, 3],
            subset,
            subset_seed: 0,
            balanced: true,
            sizes: if kind == SampleSizeSweep {
                SIZE_LADDER.to_vec()
            } else {
                Vec::new()
            },
            zero_head: kind == EnergyPartitionTrace,
            record_initial: kind == EnergyPartitionTrace,
            stop_at_zero_error: matches!(kind, SampleSizeSweep | SynthProbe),
            plot_cols: vec![
                "train_error".into(),
                "test_error".into(),
                "bound_proxy".into(),
            ],
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected key = value, got `{line}`"),
            })?;
            let key = k.trim().to_string();
            if entries.iter().any(|(_, existing, _)| *existing == key) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
            entries.push((line_no, key, v.trim().to_string()));
        }
        let kind_value = entries
            .iter()
            .find(|(_, k, _)| k == "kind")
            .ok_or(Error::Config {
                line: 0,
                message: "missing required key `kind`".into(),
            })?;
        let kind: ExperimentKind = kind_value.2.parse().map_err(|e: Error| Error::Config {
            line: kind_value.0,
            message: e.to_string(),
        })?;
        let mut spec = Self::defaults(kind);
        for (line, key, value) in &entries {
            spec.apply(key, value).map_err(|e| Error::Config {
                line: *line,
                message: match e {
                    Error::Config { message, .. } => message,
                    other => other.to_string(),
                },
            })?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one config key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config {
                line: 0,
                message: format!("`{key}`: cannot parse `{v}`"),
            })
        }
        fn list<T: FromStr>(key: &str, v: &str, sep: char) -> Result<Vec<T>> {
            v.split(sep)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config {
                    line: 0,
                    message: format!("`{key}`: expected true or false, got `{v}`"),
                }),
            }
        }
        match key {
            "kind" => self.kind = value.parse()?,
            "dataset" => self.dataset = value.parse()?,
            "test_dataset" => {
                self.test_dataset = if value == "default" {
                    None
                } else {
                    Some(value.parse()?)
                }
            }
            "data_dir" => {
                self.data_dir = if value == "default" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "archs" => {
                self.archs = value
                    .split([';', ','])
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "optimizer" | "optimizers" => {
                self.optimizers = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?;
                if let Some(&first) = self.optimizers.first() {
                    self.train.optimizer = first;
                }
            }
            "lr" => self.lr = if value == "default" { None } else { Some(num(key, value)?) },
            "momentum" => self.train.momentum_coef = num(key, value)?,
            "beta1" => self.train.adam_beta1 = num(key, value)?,
            "beta2" => self.train.adam_beta2 = num(key, value)?,
            "adam_eps" => self.train.adam_eps = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch" => self.train.batch_size = num(key, value)?,
            "seeds" | "seed" => self.seeds = list(key, value, ',')?,
            "delta" => self.bound.delta = num(key, value)?,
            "b" => self.bound.b = num(key, value)?,
            "log_pyx" => {
                self.log_pyx = if value == "default" { None } else { Some(num(key, value)?) }
            }
            "epsilon" => self.epsilon = num(key, value)?,
            "epsilon_alt" => self.epsilon_alt = num(key, value)?,
            "subset" => {
                self.subset = if value == "all" { None } else { Some(num(key, value)?) }
            }
            "subset_seed" => self.subset_seed = num(key, value)?,
            "balanced" => self.balanced = flag(key, value)?,
            "sizes" => self.sizes = list(key, value, ',')?,
            "zero_head" => self.zero_head = flag(key, value)?,
            "record_initial" => self.record_initial = flag(key, value)?,
            "stop_at_zero_error" => self.stop_at_zero_error = flag(key, value)?,
            "plot_cols" => {
                self.plot_cols = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            other => {
                return Err(Error::Config {
                    line: 0,
                    message: format!("unknown key `{other}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidParameter(m));
        if self.archs.is_empty() {
            return fail("at least one architecture is required".into());
        }
        if self.optimizers.is_empty() {
            return fail("at least one optimizer is required".into());
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.train.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        for &opt in &self.optimizers {
            self.train_config(opt, self.seeds[0]).validate()?;
        }
        let bound = BoundParams {
            log_pyx: self.log_pyx.unwrap_or(0.0),
            ..self.bound
        };
        if self.bound.a != 0.0 {
            return fail("bound lower limit must be 0".into());
        }
        bound.validate()?;
        for eps in [self.epsilon, self.epsilon_alt] {
            for a in &self.archs {
                DGapParams::new(eps).validate(a.l)?;
            }
        }
        if self.kind == ExperimentKind::SampleSizeSweep {
            if self.sizes.is_empty() {
                return fail("sample-size sweep needs a nonempty `sizes` ladder".into());
            }
            let mut sorted = self.sizes.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return fail(format!("duplicate sample size in ladder {:?}", self.sizes));
            }
            if sorted[0] == 0 {
                return fail("sample sizes must be >= 1".into());
            }
        }
        if self.plot_cols.is_empty() {
            return fail("plot_cols must name at least one column".into());
        }
        Ok(())
    }

    /// Training configuration of one run.
    pub fn train_config(&self, optimizer: Optimizer, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer,
            lr: self.lr.unwrap_or_else(|| TrainConfig::default_lr(optimizer)),
            shuffle_seed: seed,
            ..self.train
        }
    }

    pub fn dgap(&self) -> DGapParams {
        DGapParams::new(self.epsilon)
    }

    pub fn bound_params(&self, classes: usize) -> BoundParams {
        BoundParams {
            log_pyx: self
                .log_pyx
                .unwrap_or_else(|| BoundParams::for_classes(classes).log_pyx),
            ..self.bound
        }
    }

    /// A config file that parses back to this spec, one key per line in a
    /// fixed order.
    pub fn canonical_text(&self) -> String {
        let join = |v: Vec<String>, sep: &str| v.join(sep);
        let opt_or = |v: Option<String>, d: &str| v.unwrap_or_else(|| d.to_string());
        let t = &self.train;
        let lines = [
            ("kind", self.kind.to_string()),
            ("dataset", self.dataset.to_string()),
            (
                "test_dataset",
                opt_or(self.test_dataset.as_ref().map(|d| d.to_string()), "default"),
            ),
            (
                "data_dir",
                opt_or(self.data_dir.as_ref().map(|d| d.display().to_string()), "default"),
            ),
            ("archs", join(self.archs.iter().map(|a| a.to_string()).collect(), ";")),
            (
                "optimizers",
                join(self.optimizers.iter().map(|o| o.to_string()).collect(), ","),
            ),
            ("lr", opt_or(self.lr.map(|v| v.to_string()), "default")),
            ("momentum", t.momentum_coef.to_string()),
            ("beta1", t.adam_beta1.to_string()),
            ("beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch", t.batch_size.to_string()),
            ("seeds", join(self.seeds.iter().map(|s| s.to_string()).collect(), ",")),
            ("delta", self.bound.delta.to_string()),
            ("b", self.bound.b.to_string()),
            ("log_pyx", opt_or(self.log_pyx.map(|v| v.to_string()), "default")),
            ("epsilon", self.epsilon.to_string()),
            ("epsilon_alt", self.epsilon_alt.to_string()),
            ("subset", opt_or(self.subset.map(|v| v.to_string()), "all")),
            ("subset_seed", self.subset_seed.to_string()),
            ("balanced", self.balanced.to_string()),
            ("sizes", join(self.sizes.iter().map(|s| s.to_string()).collect(), ",")),
            ("zero_head", self.zero_head.to_string()),
            ("record_initial", self.record_initial.to_string()),
            ("stop_at_zero_error", self.stop_at_zero_error.to_string()),
            ("plot_cols", self.plot_cols.join(",")),
        ];
        lines
            .iter()
            .filter(|(k, v)| !(v.is_empty() && *k == "sizes"))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of `canonical_text`, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let s = ExperimentSpec::parse("kind = arch\n").unwrap();
        assert_eq!(s.archs.len(), 3);
        assert_eq!(s.seeds, vec![1, 2, 3]);
        assert_eq!(s, ExperimentSpec::defaults(ExperimentKind::ArchSweep));
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "kind = size\n# comment\nsizes = 10, 20,30\nlr = 0.005\narchs = 4-3-3-2\ndataset = toy:40x4\n";
        let s = ExperimentSpec::parse(text).unwrap();
        let again = ExperimentSpec::parse(&s.canonical_text()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.hash(), again.hash());
        assert_eq!(s.hash().len(), 64);
    }

    #[test]
    fn rejects_bad_configs() {
        for (text, line) in [
            ("kind = arch\nbogus = 1\n", 2),
            ("kind = arch\nepochs = 1\nepochs = 2\n", 3),
            ("kind = arch\nnot a pair\n", 2),
            ("kind = arch\nepochs = many\n", 2),
        ] {
            match ExperimentSpec::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(ExperimentSpec::parse("epochs = 3\n").is_err());
        assert!(ExperimentSpec::parse("kind = size\nsizes = 250,400,250\n").is_err());
        assert!(ExperimentSpec::parse("kind = arch\nplot_cols = \n").is_err());
    }

    #[test]
    fn dataset_selectors() {
        for s in ["mnist", "fashion", "synth:16x4", "toy:20x2", "idx:a.idx,b.idx"] {
            assert_eq!(s.parse::<DatasetSpec>().unwrap().to_string(), s);
        }
        assert!("idx:only".parse::<DatasetSpec>().is_err());
        assert!("cifar".parse::<DatasetSpec>().is_err());
    }
}
