//! Benchmark ingestion and the victim / attacker / test partition.

pub mod formats;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::Shape3;
use crate::scalar::Scalar;
use formats::{parse_cifar_records, parse_idx_images, parse_idx_labels, parse_svhn_mat, read_maybe_gz};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset `{0}` (expected mnist, fmnist, svhn, cifar10 or cifar100)")]
    UnknownDataset(String),
    #[error("dataset file {0} is missing")]
    Missing(PathBuf),
    #[error("corrupt dataset file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("victim fraction must lie strictly between 0 and 1, got {0}")]
    FractionOutOfRange(f64),
    #[error("split {0} would be empty")]
    EmptySplit(&'static str),
    #[error("{0} has no extra partition")]
    NoExtra(DatasetName),
    #[error("sample {0} is not part of this bundle")]
    UnknownSample(SampleId),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn corrupt(path: &Path, reason: impl Into<String>) -> Self {
        Self::Corrupt { path: path.to_path_buf(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Fmnist,
    Svhn,
    Cifar10,
    Cifar100,
}

impl DatasetName {
    pub const ALL: [DatasetName; 5] = [Self::Mnist, Self::Fmnist, Self::Svhn, Self::Cifar10, Self::Cifar100];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::Fmnist => "fmnist",
            Self::Svhn => "svhn",
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
        }
    }

    pub fn image_shape(self) -> Shape3 {
        match self {
            Self::Mnist | Self::Fmnist => Shape3::new(1, 28, 28),
            _ => Shape3::new(3, 32, 32),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::Cifar100 => 100,
            _ => 10,
        }
    }

    /// Grayscale MLP benchmarks are scaled to `[0, 1]`; colour benchmarks are
    /// standardized per channel.
    pub fn standardizes(self) -> bool {
        !matches!(self, Self::Mnist | Self::Fmnist)
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DataError::UnknownDataset(s.to_string()))
    }
}

/// Benchmark partition a sample originally came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Train,
    Test,
    Extra,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Train => "train",
            Origin::Test => "test",
            Origin::Extra => "extra",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub origin: Origin,
    pub index: usize,
}

impl SampleId {
    pub const fn new(origin: Origin, index: usize) -> Self {
        Self { origin, index }
    }

    pub const fn train(index: usize) -> Self {
        Self::new(Origin::Train, index)
    }

    pub const fn test(index: usize) -> Self {
        Self::new(Origin::Test, index)
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.origin.as_str(), self.index)
    }
}

impl FromStr for SampleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (o, i) = s.split_once(':').ok_or_else(|| format!("bad sample id `{s}`"))?;
        let origin = match o {
            "train" => Origin::Train,
            "test" => Origin::Test,
            "extra" => Origin::Extra,
            _ => return Err(format!("bad origin in `{s}`")),
        };
        let index = i.parse().map_err(|_| format!("bad index in `{s}`"))?;
        Ok(Self { origin, index })
    }
}

/// Raw `u8` images of one benchmark partition, channel-major per sample.
#[derive(Debug, Clone)]
pub struct RawSplit {
    pub origin: Origin,
    pub shape: Shape3,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl RawSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let n = self.shape.len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        (0..self.len()).map(|i| SampleId::new(self.origin, i))
    }
}

/// Full original train and test sets of one benchmark.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub name: DatasetName,
    pub train: RawSplit,
    pub test: RawSplit,
}

impl RawDataset {
    pub fn num_classes(&self) -> usize {
        self.name.num_classes()
    }
}

fn idx_pair(dir: &Path, stem: &str, origin: Origin) -> Result<RawSplit, DataError> {
    let ip = dir.join(format!("{stem}-images-idx3-ubyte"));
    let lp = dir.join(format!("{stem}-labels-idx1-ubyte"));
    let (n, r, c, pixels) = parse_idx_images(&read_maybe_gz(&ip)?, &ip)?;
    let labels = parse_idx_labels(&read_maybe_gz(&lp)?, &lp)?;
    if labels.len() != n {
        return Err(DataError::corrupt(&lp, "label and image counts differ"));
    }
    Ok(RawSplit { origin, shape: Shape3::new(1, r, c), pixels, labels })
}

fn first_existing(candidates: &[PathBuf]) -> PathBuf {
    candidates
        .iter()
        .find(|p| p.exists() || PathBuf::from(format!("{}.gz", p.display())).exists())
        .cloned()
        .unwrap_or_else(|| candidates[0].clone())
}

fn cifar_split(files: &[PathBuf], label_bytes: usize, origin: Origin) -> Result<RawSplit, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = parse_cifar_records(&read_maybe_gz(f)?, label_bytes, f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok(RawSplit { origin, shape: Shape3::new(3, 32, 32), pixels, labels })
}

fn svhn_split(root: &Path, part: &str, origin: Origin) -> Result<RawSplit, DataError> {
    let path = root.join("svhn").join(format!("{part}_32x32.mat"));
    let (pixels, labels) = parse_svhn_mat(&read_maybe_gz(&path)?, &path)?;
    Ok(RawSplit { origin, shape: Shape3::new(3, 32, 32), pixels, labels })
}

/// Loads the original train and test partitions from `root`.
///
/// Expected layout under `root`:
/// `mnist/` and `fmnist/` with the four IDX files (optionally gzipped);
/// `cifar10/[cifar-10-batches-bin/]{data_batch_1..5,test_batch}.bin`;
/// `cifar100/[cifar-100-binary/]{train,test}.bin`;
/// `svhn/{train,test,extra}_32x32.mat`.
pub fn load_dataset(name: &str, root: &Path) -> Result<RawDataset, DataError> {
    let name: DatasetName = name.parse()?;
    let (train, test) = match name {
        DatasetName::Mnist | DatasetName::Fmnist => {
            let dir = root.join(name.as_str());
            (idx_pair(&dir, "train", Origin::Train)?, idx_pair(&dir, "t10k", Origin::Test)?)
        }
        DatasetName::Cifar10 => {
            let base = first_existing(&[root.join("cifar10/cifar-10-batches-bin"), root.join("cifar10")]);
            let train: Vec<_> = (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect();
            (
                cifar_split(&train, 1, Origin::Train)?,
                cifar_split(&[base.join("test_batch.bin")], 1, Origin::Test)?,
            )
        }
        DatasetName::Cifar100 => {
            let base = first_existing(&[root.join("cifar100/cifar-100-binary"), root.join("cifar100")]);
            (
                cifar_split(&[base.join("train.bin")], 2, Origin::Train)?,
                cifar_split(&[base.join("test.bin")], 2, Origin::Test)?,
            )
        }
        DatasetName::Svhn => (svhn_split(root, "train", Origin::Train)?, svhn_split(root, "test", Origin::Test)?),
    };
    let classes = name.num_classes();
    for split in [&train, &test] {
        if let Some(bad) = split.labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Corrupt {
                path: root.join(name.as_str()),
                reason: format!("label {bad} outside 0..{classes}"),
            });
        }
    }
    Ok(RawDataset { name, train, test })
}

/// The SVHN `extra` partition, used only as a natural-subpopulation pool.
pub fn load_svhn_extra(root: &Path) -> Result<RawSplit, DataError> {
    svhn_split(root, "extra", Origin::Extra)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preprocessing {
    /// `x / 255`
    UnitScale,
    /// `(x / 255 - mean[c]) / std[c]`
    Standardize { mean: Vec<f64>, std: Vec<f64> },
}

impl Preprocessing {
    /// Per-channel statistics over the full original train set.
    pub fn for_dataset(raw: &RawDataset) -> Self {
        if !raw.name.standardizes() {
            return Self::UnitScale;
        }
        let shape = raw.train.shape;
        let plane = shape.plane();
        let mut sum = vec![0.0f64; shape.c];
        let mut sq = vec![0.0f64; shape.c];
        for img in raw.train.pixels.chunks_exact(shape.len()) {
            for (c, chunk) in img.chunks_exact(plane).enumerate() {
                for &p in chunk {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (raw.train.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(1e-12).sqrt()).collect();
        Self::Standardize { mean, std }
    }

    /// `(scale, shift)` per channel mapping `[0,1]` pixels to model inputs.
    pub fn affine(&self, channels: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::UnitScale => (vec![1.0; channels], vec![0.0; channels]),
            Self::Standardize { mean, std } => (
                std.iter().map(|s| 1.0 / s).collect(),
                mean.iter().zip(std).map(|(m, s)| -m / s).collect(),
            ),
        }
    }

    /// Range of valid model inputs per channel.
    pub fn bounds(&self, channels: usize) -> Vec<(f64, f64)> {
        let (scale, shift) = self.affine(channels);
        scale.iter().zip(&shift).map(|(s, t)| (*t, s + t)).collect()
    }
}

/// Split bookkeeping persisted as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: DatasetName,
    pub seed: u64,
    pub victim_fraction: f64,
    /// Per-split cap applied after partitioning (desk-scale profiles).
    pub cap: Option<usize>,
    pub preprocessing: Preprocessing,
    pub counts: BTreeMap<String, usize>,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub victim_fraction: f64,
    pub cap: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, victim_fraction: 0.5, cap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub victim_train: Vec<SampleId>,
    pub attacker: Vec<SampleId>,
    pub test: Vec<SampleId>,
}

pub fn id_checksum(ids: &[SampleId]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.to_string().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Images, labels and the immutable three-way partition.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: DatasetName,
    pub shape: Shape3,
    pub num_classes: usize,
    pub preprocessing: Preprocessing,
    pub splits: Splits,
    pub manifest: SplitManifest,
    train: RawSplit,
    test: RawSplit,
    extra: Option<RawSplit>,
}

/// Partitions the original train set into disjoint victim and attacker halves
/// (by `victim_fraction`) and keeps the original test set as the test split.
pub fn make_splits(raw: RawDataset, config: &SplitConfig) -> Result<DatasetBundle, DataError> {
    let f = config.victim_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(DataError::FractionOutOfRange(f));
    }
    let n = raw.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_victim = ((n as f64) * f).round() as usize;
    let (v, a) = order.split_at(n_victim);
    let take = |ids: &[usize]| {
        let mut out: Vec<SampleId> =
            ids.iter().take(config.cap.unwrap_or(usize::MAX)).map(|&i| SampleId::train(i)).collect();
        out.sort();
        out
    };
    let splits = Splits {
        victim_train: take(v),
        attacker: take(a),
        test: raw.test.ids().collect(),
    };
    if splits.victim_train.is_empty() {
        return Err(DataError::EmptySplit("victim_train"));
    }
    if splits.attacker.is_empty() {
        return Err(DataError::EmptySplit("attacker"));
    }
    let preprocessing = Preprocessing::for_dataset(&raw);
    let mut counts = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    for (k, ids) in [("victim_train", &splits.victim_train), ("attacker", &splits.attacker), ("test", &splits.test)] {
        counts.insert(k.to_string(), ids.len());
        checksums.insert(k.to_string(), id_checksum(ids));
    }
    let manifest = SplitManifest {
        dataset: raw.name,
        seed: config.seed,
        victim_fraction: f,
        cap: config.cap,
        preprocessing: preprocessing.clone(),
        counts,
        checksums,
    };
    Ok(DatasetBundle {
        name: raw.name,
        shape: raw.train.shape,
        num_classes: raw.num_classes(),
        preprocessing,
        splits,
        manifest,
        train: raw.train,
        test: raw.test,
        extra: None,
    })
}

impl DatasetBundle {
    pub fn attach_extra(&mut self, extra: RawSplit) {
        debug_assert_eq!(extra.origin, Origin::Extra);
        self.extra = Some(extra);
    }

    pub fn extra_ids(&self) -> Vec<SampleId> {
        self.extra.as_ref().map(|e| e.ids().collect()).unwrap_or_default()
    }

    fn source(&self, origin: Origin) -> Result<&RawSplit, DataError> {
        match origin {
            Origin::Train => Ok(&self.train),
            Origin::Test => Ok(&self.test),
            Origin::Extra => self.extra.as_ref().ok_or(DataError::NoExtra(self.name)),
        }
    }

    fn raw(&self, id: SampleId) -> Result<(&[u8], usize), DataError> {
        let src = self.source(id.origin)?;
        if id.index >= src.len() {
            return Err(DataError::UnknownSample(id));
        }
        Ok((src.image(id.index), src.labels[id.index]))
    }

    pub fn label(&self, id: SampleId) -> Result<usize, DataError> {
        Ok(self.raw(id)?.1)
    }

    pub fn labels(&self, ids: &[SampleId]) -> Result<Vec<usize>, DataError> {
        ids.iter().map(|&id| self.label(id)).collect()
    }

    /// Preprocessed images as a `(len, C·H·W)` matrix.
    pub fn images<F: Scalar>(&self, ids: &[SampleId]) -> Result<Array2<F>, DataError> {
        let (scale, shift) = self.preprocessing.affine(self.shape.c);
        let plane = self.shape.plane();
        let mut out = Array2::<F>::zeros((ids.len(), self.shape.len()));
        let os = out.as_slice_mut().unwrap();
        for (row, &id) in ids.iter().enumerate() {
            let (img, _) = self.raw(id)?;
            let dst = &mut os[row * self.shape.len()..(row + 1) * self.shape.len()];
            for (i, (&p, d)) in img.iter().zip(dst.iter_mut()).enumerate() {
                let c = i / plane;
                *d = F::of(p as f64 / 255.0 * scale[c] + shift[c]);
            }
        }
        Ok(out)
    }

    pub fn split_checksum(&self) -> String {
        let json = serde_json::to_string(&self.manifest).expect("manifest serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    pub(crate) fn synthetic(n_train: usize, n_test: usize) -> RawDataset {
        let shape = Shape3::new(1, 2, 2);
        let split = |n: usize, origin| RawSplit {
            origin,
            shape,
            pixels: (0..n * 4).map(|i| (i % 256) as u8).collect(),
            labels: (0..n).map(|i| i % 10).collect(),
        };
        RawDataset { name: DatasetName::Mnist, train: split(n_train, Origin::Train), test: split(n_test, Origin::Test) }
    }

    #[test]
    fn unknown_dataset_is_rejected() {
        let err = load_dataset("imagenet", Path::new("/nonexistent")).unwrap_err();
        assert!(matches!(err, DataError::UnknownDataset(ref s) if s == "imagenet"));
    }

    #[test]
    fn missing_files_are_reported() {
        let err = load_dataset("mnist", Path::new("/nonexistent")).unwrap_err();
        assert!(matches!(err, DataError::Missing(_)));
    }

    #[test]
    fn even_split_is_disjoint_and_covering() {
        let b = make_splits(synthetic(60000, 10), &SplitConfig { seed: 7, victim_fraction: 0.5, cap: None }).unwrap();
        assert_eq!(b.splits.victim_train.len(), 30000);
        assert_eq!(b.splits.attacker.len(), 30000);
        let v: HashSet<_> = b.splits.victim_train.iter().collect();
        let a: HashSet<_> = b.splits.attacker.iter().collect();
        assert!(v.is_disjoint(&a));
        let all: HashSet<_> = v.union(&a).map(|id| id.index).collect();
        assert_eq!(all.len(), 60000);
        assert!(b.splits.test.iter().all(|id| id.origin == Origin::Test));
        assert_eq!(b.splits.test.len(), 10);
    }

    #[test]
    fn splits_are_reproducible() {
        let cfg = SplitConfig { seed: 7, victim_fraction: 0.5, cap: None };
        let a = make_splits(synthetic(500, 10), &cfg).unwrap();
        let b = make_splits(synthetic(500, 10), &cfg).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(
            serde_json::to_string(&a.manifest).unwrap(),
            serde_json::to_string(&b.manifest).unwrap()
        );
        let c = make_splits(synthetic(500, 10), &SplitConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.manifest.checksums, c.manifest.checksums);
    }

    #[test]
    fn fraction_bounds() {
        for f in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            let r = make_splits(synthetic(10, 2), &SplitConfig { seed: 0, victim_fraction: f, cap: None });
            assert!(matches!(r, Err(DataError::FractionOutOfRange(_))), "{f}");
        }
    }

    #[test]
    fn cap_limits_each_split() {
        let b = make_splits(synthetic(1000, 10), &SplitConfig { seed: 1, victim_fraction: 0.5, cap: Some(100) }).unwrap();
        assert_eq!(b.splits.victim_train.len(), 100);
        assert_eq!(b.splits.attacker.len(), 100);
        assert_eq!(b.manifest.cap, Some(100));
    }

    #[test]
    fn unit_scale_images() {
        let b = make_splits(synthetic(4, 2), &SplitConfig { seed: 1, ..Default::default() }).unwrap();
        let x: Array2<f64> = b.images(&[SampleId::train(1)]).unwrap();
        assert_eq!(x.row(0).to_vec(), vec![4.0 / 255.0, 5.0 / 255.0, 6.0 / 255.0, 7.0 / 255.0]);
        assert!(b.images::<f32>(&[SampleId::train(99)]).is_err());
        assert!(matches!(b.label(SampleId::new(Origin::Extra, 0)), Err(DataError::NoExtra(_))));
    }

    #[test]
    fn standardization_bounds() {
        let p = Preprocessing::Standardize { mean: vec![0.5], std: vec![0.25] };
        assert_eq!(p.bounds(1), vec![(-2.0, 2.0)]);
        assert_eq!(Preprocessing::UnitScale.bounds(1), vec![(0.0, 1.0)]);
    }

    #[test]
    fn sample_id_text_round_trip() {
        let id = SampleId::new(Origin::Extra, 42);
        assert_eq!(id.to_string(), "extra:42");
        assert_eq!("extra:42".parse::<SampleId>().unwrap(), id);
        assert!("nope:1".parse::<SampleId>().is_err());
    }
}
