//! Labeled datasets: IDX files, synthetic diagonal images, label
//! corruption and subsampling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Mnist,
    FashionMnist,
    Synthetic,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMode {
    Real,
    Random,
}

impl LabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::Real => "real",
            LabelMode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: Source,
    pub label_mode: LabelMode,
    pub subset_seed: Option<u64>,
}

impl DatasetMeta {
    pub fn new(source: Source) -> Self {
        Self {
            source,
            label_mode: LabelMode::Real,
            subset_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if num_classes == 0 {
            return Err(Error::InvalidParameter("num_classes must be >= 1".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Widens the label space, e.g. when a subset misses a class.
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        Self::new(self.features, self.labels, num_classes, self.meta)
    }

    /// Rows `indices` as a feature batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.batch(indices);
        Self {
            features,
            labels,
            num_classes: self.num_classes,
            meta: self.meta,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn need(path: &Path, bytes: &[u8], needed: usize) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    need(path, bytes, 4)?;
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an IDX image blob into `(n, rows, cols, pixels / 255)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    check_magic(path, bytes, IMAGE_MAGIC)?;
    need(path, bytes, 16)?;
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let len = n * rows * cols;
    need(path, bytes, 16 + len)?;
    let pixels = bytes[16..16 + len]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(path, bytes, LABEL_MAGIC)?;
    need(path, bytes, 8)?;
    let n = be_u32(bytes, 4) as usize;
    need(path, bytes, 8 + n)?;
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images_path, &read(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    LabeledDataset::new(
        Matrix::from_raw(n, rows * cols, pixels),
        labels,
        num_classes,
        DatasetMeta::new(Source::File),
    )
}

/// Serializes features (in `[0, 1]`) and labels as an IDX pair with images
/// of `rows × cols`.
pub fn write_idx(
    data: &LabeledDataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if rows * cols != data.dim() {
        return Err(Error::shape(
            format!("{rows}x{cols} images"),
            format!("{} features", data.dim()),
        ));
    }
    if data.labels.iter().any(|&l| l > 255) {
        return Err(Error::InvalidParameter("IDX labels must fit in a byte".into()));
    }
    let mut img = Vec::with_capacity(16 + data.features.as_slice().len());
    for v in [IMAGE_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for &v in data.features.as_slice() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidParameter(format!(
                "pixel {v} outside [0, 1]"
            )));
        }
        img.push((v * 255.0).round() as u8);
    }
    let mut lbl = Vec::with_capacity(8 + data.len());
    for v in [LABEL_MAGIC, data.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(data.labels.iter().map(|&l| l as u8));
    crate::experiments::write_atomic(images_path, &img)?;
    crate::experiments::write_atomic(labels_path, &lbl)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads a split from a directory holding the four standard IDX files
/// (`train-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`, ...).
pub fn load_idx_dir(dir: &Path, split: Split, source: Source) -> Result<LabeledDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let mut data = load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    data.meta.source = source;
    if source != Source::File && data.num_classes < 10 {
        data = data.with_num_classes(10)?;
    }
    Ok(data)
}

/// Grid positions of a `side × side` image in diagonal-major order:
/// anti-diagonals from the top-left corner (or the top-right one when
/// `secondary`), each walked top to bottom.
pub fn diagonal_traversal(side: usize, secondary: bool) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(side * side);
    for s in 0..(2 * side).saturating_sub(1) {
        let r_lo = s.saturating_sub(side - 1);
        let r_hi = s.min(side - 1);
        for r in r_lo..=r_hi {
            let c = s - r;
            order.push((r, if secondary { side - 1 - c } else { c }));
        }
    }
    order
}

/// Places `sorted` into a grid for class `class` of the diagonal task;
/// classes 1 and 3 take the values in reverse.
pub fn arrange_diagonal(sorted: &[f64], side: usize, class: usize) -> Vec<f64> {
    debug_assert_eq!(sorted.len(), side * side);
    let mut grid = vec![0.0; side * side];
    let order = diagonal_traversal(side, class >= 2);
    let descending = class % 2 == 1;
    for (j, &(r, c)) in order.iter().enumerate() {
        let v = if descending {
            sorted[sorted.len() - 1 - j]
        } else {
            sorted[j]
        };
        grid[r * side + c] = v;
    }
    grid
}

/// `n` images of `side × side` standard-normal values sorted along one of
/// two diagonal directions, ascending or descending. Image `i` has class
/// `i % 4`; draws come from one stream in image order.
pub fn synthetic_diagonal(n: usize, side: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || n % 4 != 0 {
        return Err(Error::InvalidParameter(format!(
            "synthetic sample count must be a positive multiple of 4, got {n}"
        )));
    }
    if side < 2 {
        return Err(Error::InvalidParameter(format!(
            "synthetic image side must be >= 2, got {side}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let m = side * side;
    let mut features = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut draw: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        draw.sort_by(f64::total_cmp);
        let class = i % 4;
        features.extend(arrange_diagonal(&draw, side, class));
        labels.push(class);
    }
    let mut meta = DatasetMeta::new(Source::Synthetic);
    meta.subset_seed = Some(seed);
    LabeledDataset::new(Matrix::from_raw(n, m, features), labels, 4, meta)
}

/// Two-class points in `[-1, 1]^m` labeled by the sign of their coordinate
/// sum, with points closer than `0.1` to the separating hyperplane redrawn.
pub fn separable_toy(n: usize, m: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidParameter(format!(
            "toy set needs n >= 1 and m >= 1, got n={n} m={m}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let scale = 1.0 / (m as f64).sqrt();
    let mut features = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let want = i % 2;
        loop {
            let x: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let margin = x.iter().sum::<f64>() * scale;
            if margin.abs() < 0.1 || usize::from(margin > 0.0) != want {
                continue;
            }
            features.extend(x);
            labels.push(want);
            break;
        }
    }
    let mut meta = DatasetMeta::new(Source::Synthetic);
    meta.subset_seed = Some(seed);
    LabeledDataset::new(Matrix::from_raw(n, m, features), labels, 2, meta)
}

/// Replaces every label with a uniform draw over the classes.
pub fn randomize_labels(data: &LabeledDataset, seed: u64) -> LabeledDataset {
    let mut rng = SplitMix64::new(seed);
    let labels = (0..data.len())
        .map(|_| rng.below(data.num_classes))
        .collect();
    let mut meta = data.meta;
    meta.label_mode = LabelMode::Random;
    LabeledDataset {
        features: data.features.clone(),
        labels,
        num_classes: data.num_classes,
        meta,
    }
}

/// Deterministic subset of `n` samples. Unbalanced mode takes the first
/// `n` entries of a seeded permutation; balanced mode takes `n / L` seeded
/// picks per class and keeps the original sample order.
pub fn subsample(
    data: &LabeledDataset,
    n: usize,
    balanced: bool,
    seed: u64,
) -> Result<LabeledDataset> {
    if n > data.len() {
        return Err(Error::InvalidParameter(format!(
            "subset of {n} requested from {} samples",
            data.len()
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let indices = if balanced {
        let classes = data.num_classes;
        if n % classes != 0 {
            return Err(Error::InvalidParameter(format!(
                "balanced subset size {n} not divisible by {classes} classes"
            )));
        }
        let per = n / classes;
        let mut chosen = Vec::with_capacity(n);
        for class in 0..classes {
            let mut members: Vec<usize> =
                (0..data.len()).filter(|&i| data.labels[i] == class).collect();
            if members.len() < per {
                return Err(Error::InvalidParameter(format!(
                    "class {class} has {} samples, {per} needed",
                    members.len()
                )));
            }
            rng.shuffle(&mut members);
            chosen.extend_from_slice(&members[..per]);
        }
        chosen.sort_unstable();
        chosen
    } else {
        let mut perm = rng.permutation(data.len());
        perm.truncate(n);
        perm
    };
    let mut out = data.select(&indices);
    out.meta.subset_seed = Some(seed);
    Ok(out)
}
