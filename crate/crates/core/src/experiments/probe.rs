//! First-layer Gibbs probe of the synthetic diagonal task.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::Result;
use crate::experiments::write_atomic;
use crate::gibbs::layer_gibbs;
use crate::mlp::{forward, MlpParams};
use crate::numerics::{argmax, Matrix, Vector};

/// First-layer values of the first synthetic image in the reference probe
/// table, before the ReLU.
pub const TABLE1_IMG0_G1: [f64; 8] = [27.53, 8.98, -14.04, 6.89, 14.07, -22.24, 25.85, -27.13];
/// Its two largest Gibbs probabilities (filters 0 and 6).
pub const TABLE1_IMG0_Q: [(usize, f64); 2] = [(0, 0.843), (6, 0.157)];

/// One filter's row of the probe for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub image: usize,
    pub class: usize,
    pub filter: usize,
    pub g1: f64,
    pub f1: f64,
    pub exp_f1: f64,
    pub q: f64,
}

/// ReLU then Gibbs normalization of fixed first-layer values.
pub fn relu_gibbs(g1: &[f64]) -> Result<Vector> {
    let f1: Vec<f64> = g1.iter().map(|&g| g.max(0.0)).collect();
    Ok(layer_gibbs(&f1.into())?.probs)
}

/// Probe rows for the given images, plus each image's most probable filter.
pub fn probe_images(
    params: &MlpParams,
    data: &LabeledDataset,
    images: &[usize],
) -> Result<(Vec<ProbeRow>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut modes = Vec::new();
    for &i in images {
        let tr = forward(params, &data.features().row(i).into())?;
        let g = layer_gibbs(&tr.f1)?;
        for t in 0..tr.f1.len() {
            rows.push(ProbeRow {
                image: i,
                class: data.labels()[i],
                filter: t,
                g1: tr.g1[t],
                f1: tr.f1[t],
                exp_f1: tr.f1[t].exp(),
                q: g.probs[t],
            });
        }
        modes.push(argmax(g.probs.as_slice()));
    }
    Ok((rows, modes))
}

/// First occurrence of each class in `data`.
pub fn representatives(data: &LabeledDataset) -> Vec<usize> {
    (0..data.num_classes())
        .filter_map(|c| data.labels().iter().position(|&l| l == c))
        .collect()
}

/// Binary PGM of `values` (row-major `rows × cols`), min-max scaled.
pub fn pgm_bytes(values: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .map(|&v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Writes column `t` of `w1` as a `side × side` image for every filter.
pub fn write_filter_images(w1: &Matrix, side: usize, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for t in 0..w1.cols() {
        let path = dir.join(format!("{stem}_filter{t}.pgm"));
        write_atomic(&path, &pgm_bytes(&w1.column(t), side, side))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_replay() {
        let q = relu_gibbs(&TABLE1_IMG0_G1).unwrap();
        for (t, expected) in TABLE1_IMG0_Q {
            assert!((q[t] - expected).abs() < 1e-3);
        }
    }

    #[test]
    fn pgm_layout() {
        let b = pgm_bytes(&[0.0, 1.0, 0.5, 0.25], 2, 2);
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 255, 128, 64]);
    }
}
