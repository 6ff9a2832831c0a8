use std::path::{Path, PathBuf};

use submia::data::formats::{read_maybe_gz, parse_cifar_records, parse_idx_images, parse_idx_labels, parse_mat_v5, parse_svhn_mat};
use submia::data::{load_dataset, make_splits, DatasetName, Origin, SplitConfig};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn gunzip(path: &Path) -> Vec<u8> {
    // read_maybe_gz falls back to `<path>.gz`
    let plain = path.with_extension("");
    read_maybe_gz(&plain).unwrap()
}

#[test]
fn idx_fixture_parses() {
    let ip = fixture("tiny-images-idx3-ubyte.gz");
    let lp = fixture("tiny-labels-idx1-ubyte.gz");
    let (n, r, c, px) = parse_idx_images(&gunzip(&ip), &ip).unwrap();
    assert_eq!((n, r, c), (2, 2, 3));
    assert_eq!(px, (0..12).collect::<Vec<u8>>());
    assert_eq!(parse_idx_labels(&gunzip(&lp), &lp).unwrap(), vec![4, 9]);
    assert!(parse_idx_labels(&gunzip(&ip), &ip).is_err());
}

#[test]
fn cifar100_uses_fine_label() {
    let p = fixture("cifar100_train.bin");
    let (px, labels) = parse_cifar_records(&std::fs::read(&p).unwrap(), 2, &p).unwrap();
    assert_eq!(labels, vec![90, 91]);
    assert_eq!(px.len(), 2 * 3072);
    assert_eq!(px[3072], 1);
    assert!(parse_cifar_records(&[0u8; 100], 1, &p).is_err());
}

#[test]
fn svhn_mat_plain_and_compressed_agree() {
    let expect: Vec<u8> = std::fs::read_to_string(fixture("svhn_expect.txt"))
        .unwrap()
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    let mut decoded = Vec::new();
    for name in ["svhn_plain.mat", "svhn_zlib.mat"] {
        let p = fixture(name);
        let (px, labels) = parse_svhn_mat(&std::fs::read(&p).unwrap(), &p).unwrap();
        assert_eq!(labels, vec![0, 3, 7], "{name}");
        // sample 1, channel 2, row 5, col 9
        assert_eq!(px[3072 + 2 * 1024 + 5 * 32 + 9], expect[0]);
        // sample 2, channel 0, row 0, col 31
        assert_eq!(px[2 * 3072 + 31], expect[1]);
        decoded.push(px);
    }
    assert_eq!(decoded[0], decoded[1]);
    let p = fixture("svhn_plain.mat");
    let arrays = parse_mat_v5(&std::fs::read(&p).unwrap(), &p).unwrap();
    let x = arrays.iter().find(|a| a.name == "X").unwrap();
    assert_eq!(x.dims, vec![32, 32, 3, 3]);
}

/// Runs against the real benchmark files when `scripts/fetch_data.sh` has
/// populated the data root.
#[test]
fn real_mnist_when_available() {
    let root = std::env::var_os("MIA_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    if !root.join("mnist").exists() {
        eprintln!("skipping: no mnist under {}", root.display());
        return;
    }
    let raw = load_dataset("mnist", &root).unwrap();
    assert_eq!(raw.train.len(), 60000);
    assert_eq!(raw.test.len(), 10000);
    assert_eq!(raw.num_classes(), 10);
    assert_eq!(raw.train.shape, DatasetName::Mnist.image_shape());
    let bundle = make_splits(raw, &SplitConfig { seed: 7, victim_fraction: 0.5, cap: None }).unwrap();
    assert_eq!(bundle.splits.victim_train.len(), 30000);
    assert!(bundle.splits.test.iter().all(|id| id.origin == Origin::Test));
}
