use std::path::Path;

use pacmlp::data::{
    diagonal_traversal, load_idx, load_idx_dir, randomize_labels, subsample, synthetic_diagonal,
    write_idx, DatasetMeta, LabelMode, LabeledDataset, Source, Split,
};
use pacmlp::rng::SplitMix64;
use pacmlp::{Error, Matrix};
use proptest::prelude::*;

fn byte_dataset(n: usize, rows: usize, cols: usize, classes: usize, seed: u64) -> LabeledDataset {
    let mut rng = SplitMix64::new(seed);
    let px: Vec<f64> = (0..n * rows * cols).map(|_| rng.below(256) as f64 / 255.0).collect();
    let labels = (0..n).map(|_| rng.below(classes)).collect();
    LabeledDataset::new(
        Matrix::new(n, rows * cols, px).unwrap(),
        labels,
        classes,
        DatasetMeta::new(Source::File),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn idx_round_trip(n in 1usize..20, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let data = byte_dataset(n, rows, cols, 10, seed);
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx(&data, rows, cols, &img, &lbl).unwrap();
        let back = load_idx(&img, &lbl).unwrap();
        prop_assert_eq!(back.features(), data.features());
        prop_assert_eq!(back.labels(), data.labels());
    }

    #[test]
    fn diagonal_images_are_monotone(side in 2usize..9, seed in any::<u64>()) {
        let data = synthetic_diagonal(8, side, seed).unwrap();
        for i in 0..data.len() {
            let class = data.labels()[i];
            let row = data.features().row(i);
            let vals: Vec<f64> = diagonal_traversal(side, class >= 2)
                .iter()
                .map(|&(r, c)| row[r * side + c])
                .collect();
            let ok = vals.windows(2).all(|w| if class % 2 == 0 { w[0] <= w[1] } else { w[0] >= w[1] });
            prop_assert!(ok, "class {} not monotone", class);
        }
    }

    #[test]
    fn random_labels_keep_features(seed in any::<u64>(), classes in 1usize..12) {
        let data = byte_dataset(40, 3, 3, classes, seed);
        let r = randomize_labels(&data, seed ^ 1);
        let bits = |d: &LabeledDataset| d.features().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&r), bits(&data));
        prop_assert_eq!(r.meta.label_mode, LabelMode::Random);
        prop_assert!(r.labels().iter().all(|&l| l < classes));
        let again = randomize_labels(&data, seed ^ 1);
        prop_assert_eq!(r.labels(), again.labels());
    }
}

#[test]
fn random_label_frequencies_are_uniform() {
    let n = 100_000;
    let data = LabeledDataset::new(
        Matrix::zeros(n, 1),
        vec![0; n],
        10,
        DatasetMeta::new(Source::Synthetic),
    )
    .unwrap();
    let counts = randomize_labels(&data, 2024).class_counts();
    let sigma = (n as f64 * 0.1 * 0.9).sqrt();
    for c in counts {
        assert!((c as f64 - 1e4).abs() <= 3.0 * sigma, "{c}");
    }
}

#[test]
fn class_one_is_reversed_class_zero() {
    let side = 5;
    let sorted: Vec<f64> = (0..25).map(|i| i as f64 * 0.5 - 3.0).collect();
    let reversed: Vec<f64> = sorted.iter().rev().copied().collect();
    let one = pacmlp::data::arrange_diagonal(&sorted, side, 1);
    assert_eq!(one, pacmlp::data::arrange_diagonal(&reversed, side, 0));
    assert_ne!(one, pacmlp::data::arrange_diagonal(&sorted, side, 0));
}

#[test]
fn balanced_subsets_count_exactly() {
    let data = byte_dataset(200, 2, 2, 10, 5);
    let min = *data.class_counts().iter().min().unwrap();
    let n = 10 * min.min(2);
    let s = subsample(&data, n, true, 3).unwrap();
    assert!(s.class_counts().iter().all(|&c| c == n / 10));
    assert_eq!(s, subsample(&data, n, true, 3).unwrap());
    assert!(subsample(&data, 201, false, 3).is_err());
    assert!(subsample(&data, 15, true, 3).is_err());
    let full = subsample(&data, 200, false, 3).unwrap();
    let mut a = full.labels().to_vec();
    let mut b = data.labels().to_vec();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
}

#[test]
fn truncated_and_mismatched_files_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = byte_dataset(3, 2, 2, 4, 1);
    let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
    write_idx(&data, 2, 2, &img, &lbl).unwrap();
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_idx(&img, &lbl), Err(Error::Truncated { .. })));
    std::fs::write(&img, &bytes).unwrap();
    let two = data.select(&[0, 1]);
    write_idx(&two, 2, 2, &dir.path().join("i2"), &lbl).unwrap();
    assert!(matches!(
        load_idx(&img, &lbl),
        Err(Error::CountMismatch { images: 3, labels: 2 })
    ));
    assert!(matches!(load_idx(&lbl, &lbl), Err(Error::BadMagic { .. })));
}

#[test]
fn mnist_files_when_present() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    if !dir.join("train-images-idx3-ubyte").exists() {
        eprintln!("skipping: no MNIST files in {}", dir.display());
        return;
    }
    let train = load_idx_dir(&dir, Split::Train, Source::Mnist).unwrap();
    assert_eq!((train.len(), train.dim(), train.num_classes()), (60_000, 784, 10));
    assert!(train.labels().iter().all(|&l| l < 10));
    let test = load_idx_dir(&dir, Split::Test, Source::Mnist).unwrap();
    assert_eq!(test.len(), 10_000);
}
