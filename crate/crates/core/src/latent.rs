//! Latent-space services: encoded pools, natural subpopulations and noisy
//! latent sampling.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DatasetBundle, SampleId};
use crate::models::infer_chunked;
use crate::nn::{Parameterized, Sequential};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("latent store was built with encoder {expected}, got {found}")]
    StaleStore { expected: String, found: String },
    #[error("k = {k} but the pool holds {pool} candidates")]
    KTooLarge { k: usize, pool: usize },
    #[error("empty latent store")]
    EmptyStore,
    #[error("latent has {found} dims, store has {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
    #[error("a subpopulation needs at least one member")]
    EmptySubpopulation,
    #[error("unknown metric `{0}` (expected cosine or l2)")]
    UnknownMetric(String),
    #[error("malformed matrix file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    L2,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        })
    }
}

impl FromStr for Metric {
    type Err = LatentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(LatentError::UnknownMetric(other.into())),
        }
    }
}

impl Metric {
    /// Higher is closer: cosine similarity, or negated Euclidean distance.
    pub fn similarity(self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match self {
            Metric::Cosine => crate::nn::loss::cosine(a.iter().copied(), b.iter().copied()),
            Metric::L2 => -a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

/// Encoded sample pool tagged with the encoder that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStore {
    pub ids: Vec<SampleId>,
    pub latents: Array2<f64>,
    pub encoder_checksum: String,
}

#[derive(Serialize, Deserialize)]
struct StoreSidecar {
    ids: Vec<SampleId>,
    encoder_checksum: String,
    latent_dim: usize,
    default_metric: Metric,
}

/// Encodes `x` (rows aligned with `ids`) with `encoder`.
pub fn build_latent_store<F: Scalar>(encoder: &Sequential<F>, ids: &[SampleId], x: &Array2<F>) -> LatentStore {
    assert_eq!(ids.len(), x.nrows(), "ids and images must align");
    let z = if x.nrows() == 0 {
        Array2::zeros((0, encoder.out_shape().len()))
    } else {
        infer_chunked(encoder, x).mapv(|v| v.f64())
    };
    LatentStore { ids: ids.to_vec(), latents: z, encoder_checksum: encoder.checksum() }
}

impl LatentStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.latents.ncols()
    }

    /// Fails unless `encoder` is the one the store was built with.
    pub fn verify<F: Scalar>(&self, encoder: &Sequential<F>) -> Result<(), LatentError> {
        let found = encoder.checksum();
        if found != self.encoder_checksum {
            return Err(LatentError::StaleStore { expected: self.encoder_checksum.clone(), found });
        }
        Ok(())
    }

    pub fn position(&self, id: SampleId) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    /// Writes `path` (binary matrix) and `path.json` (ids, encoder identity).
    pub fn save(&self, path: &Path) -> Result<(), LatentError> {
        let side = StoreSidecar {
            ids: self.ids.clone(),
            encoder_checksum: self.encoder_checksum.clone(),
            latent_dim: self.dim(),
            default_metric: Metric::Cosine,
        };
        write_matrix(path, &self.latents)?;
        fs::write(sidecar(path), serde_json::to_vec_pretty(&side).expect("plain data"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LatentError> {
        let latents = read_matrix::<f64>(path)?;
        let side_path = sidecar(path);
        let side: StoreSidecar = serde_json::from_slice(&fs::read(&side_path)?)
            .map_err(|e| LatentError::Malformed { path: side_path.clone(), reason: e.to_string() })?;
        if side.ids.len() != latents.nrows() || side.latent_dim != latents.ncols() {
            return Err(LatentError::Malformed { path: side_path, reason: "sidecar disagrees with matrix".into() });
        }
        Ok(Self { ids: side.ids, latents, encoder_checksum: side.encoder_checksum })
    }
}

fn sidecar(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", path.display()))
}

const MATRIX_MAGIC: &[u8; 8] = b"SUBMIAMX";

/// Row-major matrix: magic, dtype byte (4 or 8), rows and cols as `u64`,
/// then little-endian values of that width.
pub fn write_matrix<F: Scalar>(path: &Path, m: &Array2<F>) -> Result<(), LatentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let width: u8 = if F::DTYPE == "f32" { 4 } else { 8 };
    let mut buf = Vec::with_capacity(25 + m.len() * width as usize);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.push(width);
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        if width == 4 {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_matrix<F: Scalar>(path: &Path) -> Result<Array2<F>, LatentError> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| LatentError::Malformed { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < 25 || &bytes[..8] != MATRIX_MAGIC {
        return Err(bad("bad header"));
    }
    let width = bytes[8] as usize;
    let rows = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[17..25].try_into().unwrap()) as usize;
    let body = &bytes[25..];
    if !(width == 4 || width == 8) || body.len() != rows * cols * width {
        return Err(bad("size mismatch"));
    }
    let values: Vec<F> = body
        .chunks_exact(width)
        .map(|c| {
            let v = if width == 4 { f32::from_le_bytes(c.try_into().unwrap()) as f64 } else { f64::from_le_bytes(c.try_into().unwrap()) };
            F::of(v)
        })
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("size checked"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: SampleId,
    pub similarity: f64,
}

fn ranked(store: &LatentStore, target: &[f64], metric: Metric, exclude: Option<SampleId>) -> Result<Vec<Neighbor>, LatentError> {
    if store.is_empty() {
        return Err(LatentError::EmptyStore);
    }
    if target.len() != store.dim() {
        return Err(LatentError::DimMismatch { expected: store.dim(), found: target.len() });
    }
    let t = ArrayView1::from(target);
    let mut all: Vec<Neighbor> = store
        .ids
        .iter()
        .zip(store.latents.rows())
        .filter(|(id, _)| Some(**id) != exclude)
        .map(|(&id, row)| Neighbor { id, similarity: metric.similarity(row, t) })
        .collect();
    all.sort_by(|a, b| b.similarity.partial_cmp(&a.similarity).unwrap_or(Ordering::Equal).then(a.id.cmp(&b.id)));
    Ok(all)
}

/// The `k` pool samples closest to `target`, most similar first with ties
/// broken by ascending id. `exclude` drops one exact id from the pool.
pub fn nearest_subpopulation(
    store: &LatentStore,
    target: &[f64],
    k: usize,
    metric: Metric,
    exclude: Option<SampleId>,
) -> Result<Vec<Neighbor>, LatentError> {
    let mut all = ranked(store, target, metric, exclude)?;
    if k == 0 || k > all.len() {
        return Err(LatentError::KTooLarge { k, pool: all.len() });
    }
    all.truncate(k);
    Ok(all)
}

/// Every pool sample whose distance to `target` is below `radius`, in the same
/// order as [`nearest_subpopulation`]. Cosine distance is `1 − similarity`.
pub fn radius_subpopulation(
    store: &LatentStore,
    target: &[f64],
    radius: f64,
    metric: Metric,
    exclude: Option<SampleId>,
) -> Result<Vec<Neighbor>, LatentError> {
    let all = ranked(store, target, metric, exclude)?;
    let dist = |n: &Neighbor| match metric {
        Metric::Cosine => 1.0 - n.similarity,
        Metric::L2 => -n.similarity,
    };
    Ok(all.into_iter().take_while(|n| dist(n) < radius).collect())
}

/// Multiplicative Gaussian latent noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub draws: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, draws: usize, seed: u64) -> Result<Self, LatentError> {
        let s = Self { sigma, draws, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(LatentError::InvalidNoise(format!("sigma {}", self.sigma)));
        }
        if self.draws == 0 {
            return Err(LatentError::InvalidNoise("draw count 0".into()));
        }
        Ok(())
    }

    /// Per-target seed so a target's draws do not depend on processing order.
    pub fn seed_for(&self, target: SampleId) -> u64 {
        let origin = target.origin as u64;
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (origin << 56) ^ target.index as u64
    }
}

/// `L'ᵢ = Lᵢ + |Lᵢ|·εᵢ` for explicit `ε`, one row per draw.
pub fn perturb_latent(l: &[f64], eps: &Array2<f64>) -> Array2<f64> {
    assert_eq!(eps.ncols(), l.len());
    let mut out = eps.clone();
    for mut row in out.rows_mut() {
        for (v, &li) in row.iter_mut().zip(l) {
            *v = li + li.abs() * *v;
        }
    }
    out
}

/// `spec.draws` noisy copies of `l` with `εᵢ ~ N(0, σ²)` per coordinate.
pub fn noisy_latents<R: Rng + ?Sized>(l: &[f64], spec: &NoiseSpec, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, spec.sigma).expect("validated sigma");
    let eps = Array2::from_shape_fn((spec.draws, l.len()), |_| normal.sample(rng));
    perturb_latent(l, &eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Natural,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub source: Source,
    /// Pool id for natural members.
    pub id: Option<SampleId>,
    /// Latent similarity to the target (cosine unless stated otherwise).
    pub similarity: f64,
}

/// Samples standing in for a target's neighbourhood. Every member is scored
/// with the target's label.
#[derive(Debug, Clone, PartialEq)]
pub struct SubpopulationSet<F: Scalar> {
    pub target: SampleId,
    pub label: usize,
    pub members: Vec<Member>,
    /// One preprocessed image per member.
    pub images: Array2<F>,
}

impl<F: Scalar> SubpopulationSet<F> {
    pub fn new(target: SampleId, label: usize, members: Vec<Member>, images: Array2<F>) -> Result<Self, LatentError> {
        if members.is_empty() {
            return Err(LatentError::EmptySubpopulation);
        }
        assert_eq!(members.len(), images.nrows(), "one image per member");
        Ok(Self { target, label, members, images })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mean_similarity(&self) -> f64 {
        self.members.iter().map(|m| m.similarity).sum::<f64>() / self.len() as f64
    }
}

/// Natural subpopulation of `target` drawn from `store`'s pool. The target's
/// own id is excluded when `exclude_self` is set.
#[allow(clippy::too_many_arguments)]
pub fn natural_subpopulation<F: Scalar>(
    store: &LatentStore,
    bundle: &DatasetBundle,
    target: SampleId,
    target_latent: &[f64],
    label: usize,
    k: usize,
    metric: Metric,
    exclude_self: bool,
) -> Result<SubpopulationSet<F>, LatentError> {
    let near = nearest_subpopulation(store, target_latent, k, metric, exclude_self.then_some(target))?;
    let ids: Vec<SampleId> = near.iter().map(|n| n.id).collect();
    let images = bundle.images::<F>(&ids)?;
    let members = near.iter().map(|n| Member { source: Source::Natural, id: Some(n.id), similarity: n.similarity }).collect();
    SubpopulationSet::new(target, label, members, images)
}

#[derive(Serialize, Deserialize)]
struct SetsSidecar {
    targets: Vec<(SampleId, usize, Vec<Member>)>,
}

/// Persists subpopulations as one stacked image matrix plus a JSON sidecar.
pub fn save_subpopulations<F: Scalar>(sets: &[SubpopulationSet<F>], path: &Path) -> Result<(), LatentError> {
    let width = sets.first().map_or(0, |s| s.images.ncols());
    let views: Vec<_> = sets.iter().map(|s| s.images.view()).collect();
    let stacked = if views.is_empty() {
        Array2::zeros((0, width))
    } else {
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| LatentError::Malformed { path: path.into(), reason: e.to_string() })?
    };
    write_matrix(path, &stacked)?;
    let side = SetsSidecar { targets: sets.iter().map(|s| (s.target, s.label, s.members.clone())).collect() };
    fs::write(sidecar(path), serde_json::to_vec(&side).expect("plain data"))?;
    Ok(())
}

pub fn load_subpopulations<F: Scalar>(path: &Path) -> Result<Vec<SubpopulationSet<F>>, LatentError> {
    let images = read_matrix::<F>(path)?;
    let side_path = sidecar(path);
    let side: SetsSidecar = serde_json::from_slice(&fs::read(&side_path)?)
        .map_err(|e| LatentError::Malformed { path: side_path.clone(), reason: e.to_string() })?;
    let mut at = 0;
    let mut out = Vec::with_capacity(side.targets.len());
    for (target, label, members) in side.targets {
        let n = members.len();
        if at + n > images.nrows() {
            return Err(LatentError::Malformed { path: side_path, reason: "fewer images than members".into() });
        }
        let imgs = images.slice(ndarray::s![at..at + n, ..]).to_owned();
        at += n;
        out.push(SubpopulationSet::new(target, label, members, imgs)?);
    }
    Ok(out)
}

/// Mean of a matrix's rows.
pub fn row_mean(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(m.ncols()))
}
