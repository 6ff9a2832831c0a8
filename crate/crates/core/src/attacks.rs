//! Membership score functions.
//!
//! Every score follows one convention: higher means more member-like. The
//! loss-based base score is `s = −CE(victim(x), y)`. Calibrated attacks report
//! `final = base − calibration`; uncalibrated ones report `final = base`.
//!
//! Each attack has a pure core over precomputed losses or softmax rows and a
//! wrapper that queries the victim.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleId;
use crate::latent::{Metric, SubpopulationSet};
use crate::models::{cross_entropy_loss, Classifier, ModelError, PROB_FLOOR};
use crate::scalar::Scalar;
use crate::shadows::{running_mean, ShadowError, ShadowOutputs};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("empty subpopulation for target {0}")]
    EmptySubpopulation(SampleId),
    #[error("no IN population for {0}; per-target IN models are required for this attack")]
    SablayrollesUnavailable(SampleId),
    #[error("no OUT shadow for sample {0}")]
    NoOutShadows(SampleId),
    #[error("inputs are misaligned: {0}")]
    Misaligned(String),
    #[error("subpopulation of {target} carries label {found}, target label is {expected}")]
    LabelMismatch { target: SampleId, expected: usize, found: usize },
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("no shadow training examples for the attack classifier")]
    NoTrainingExamples,
    #[error("unknown attack `{0}`")]
    UnknownAttack(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// The attacks reported side by side, in report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Yeom,
    Shokri,
    Jayaraman,
    Watson,
    Sablayrolles,
    Ours,
    OursBlackBox,
    OursNatural,
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        AttackKind::Yeom,
        AttackKind::Shokri,
        AttackKind::Jayaraman,
        AttackKind::Watson,
        AttackKind::Sablayrolles,
        AttackKind::Ours,
        AttackKind::OursBlackBox,
        AttackKind::OursNatural,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Yeom => "yeom",
            AttackKind::Shokri => "shokri",
            AttackKind::Jayaraman => "jayaraman",
            AttackKind::Watson => "watson",
            AttackKind::Sablayrolles => "sablayrolles",
            AttackKind::Ours => "ours",
            AttackKind::OursBlackBox => "ours_black_box",
            AttackKind::OursNatural => "ours_natural",
        }
    }

    /// Row label in reports.
    pub fn title(self) -> &'static str {
        match self {
            AttackKind::Yeom => "Yeom et al.",
            AttackKind::Shokri => "Shokri et al.",
            AttackKind::Jayaraman => "Jayaraman et al.",
            AttackKind::Watson => "Watson et al.",
            AttackKind::Sablayrolles => "Sablayrolles et al.",
            AttackKind::Ours => "Ours",
            AttackKind::OursBlackBox => "Ours (Black-box)",
            AttackKind::OursNatural => "Ours with natural subpopulation",
        }
    }

    pub fn is_calibrated(self) -> bool {
        !matches!(self, AttackKind::Yeom | AttackKind::Shokri | AttackKind::Jayaraman)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == key)
            .ok_or_else(|| AttackError::UnknownAttack(s.to_string()))
    }
}

/// How a base score was derived from the victim's output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BaseScore {
    /// `−CE`; construct with [`BaseScore::from_loss`].
    NegLoss(f64),
    Confidence(f64),
}

impl BaseScore {
    pub fn from_loss(loss: f64) -> Self {
        BaseScore::NegLoss(-loss)
    }

    pub fn value(self) -> f64 {
        match self {
            BaseScore::NegLoss(v) | BaseScore::Confidence(v) => v,
        }
    }
}

/// One scored sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub attack: AttackKind,
    #[serde(with = "id_text")]
    pub sample_id: SampleId,
    pub base: f64,
    pub calibration: f64,
    #[serde(rename = "final")]
    pub final_score: f64,
    /// Ground truth, filled in by evaluation only.
    pub is_member: Option<bool>,
}

impl ScoreRecord {
    pub fn uncalibrated(attack: AttackKind, sample_id: SampleId, base: f64) -> Self {
        Self { attack, sample_id, base, calibration: 0.0, final_score: base, is_member: None }
    }

    pub fn calibrated(attack: AttackKind, sample_id: SampleId, base: f64, calibration: f64) -> Self {
        Self { attack, sample_id, base, calibration, final_score: base - calibration, is_member: None }
    }
}

mod id_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::data::SampleId;

    pub fn serialize<S: Serializer>(id: &SampleId, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(id)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SampleId, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

pub fn write_records(records: &[ScoreRecord], path: &Path) -> Result<(), AttackError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ScoreRecord>, AttackError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Per-attack hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Resampled shadows shared by Shokri, Watson and Sablayrolles.
    pub shadow_count: usize,
    pub shadow_fraction: f64,
    /// IN models trained per fresh target batch.
    pub in_models: usize,
    pub in_fraction: f64,
    pub jayaraman_t: usize,
    pub jayaraman_sigma: f64,
    /// Extra random σ draws tried after `jayaraman_sigma`; the best AUC wins.
    pub jayaraman_search: usize,
    pub jayaraman_sigma_range: (f64, f64),
    pub subpop_k: usize,
    pub subpop_draws: usize,
    /// Latent noise scale for generated subpopulations.
    pub noise_sigma: f64,
    /// Latent similarity for natural subpopulations.
    pub metric: Metric,
    pub yeom_threshold: ThresholdSource,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            shadow_count: 30,
            shadow_fraction: 0.5,
            in_models: 15,
            in_fraction: 0.5,
            jayaraman_t: 100,
            jayaraman_sigma: 0.01,
            jayaraman_search: 10,
            jayaraman_sigma_range: (1e-3, 0.5),
            subpop_k: 30,
            subpop_draws: 30,
            noise_sigma: 0.05,
            metric: Metric::Cosine,
            yeom_threshold: ThresholdSource::VictimTrainLoss,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        if self.jayaraman_t == 0 {
            return bad("jayaraman_t must be ≥ 1".into());
        }
        if !(self.jayaraman_sigma > 0.0 && self.jayaraman_sigma.is_finite()) {
            return bad(format!("jayaraman_sigma {} must be > 0", self.jayaraman_sigma));
        }
        let (lo, hi) = self.jayaraman_sigma_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("jayaraman_sigma_range ({lo}, {hi})"));
        }
        for (name, f) in [("shadow_fraction", self.shadow_fraction), ("in_fraction", self.in_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} {f} must lie in (0, 1)"));
            }
        }
        if self.shadow_count == 0 {
            return bad("shadow_count must be ≥ 1".into());
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be > 0", self.noise_sigma));
        }
        if self.subpop_k == 0 || self.subpop_draws == 0 {
            return bad("subpopulation size must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Where Yeom's threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    /// Mean training loss of the victim, assumed known to the attacker.
    VictimTrainLoss,
    Fixed(f64),
}

/// Victim cross-entropy per sample.
pub fn victim_losses<F: Scalar>(victim: &Classifier<F>, x: &Array2<F>, labels: &[usize]) -> Result<Vec<f64>, AttackError> {
    if x.nrows() == 0 {
        return Ok(Vec::new());
    }
    let p = victim.predict(x)?.mapv(|v| v.f64());
    Ok(cross_entropy_loss(&p, labels)?)
}

fn check_len(what: &str, a: usize, b: usize) -> Result<(), AttackError> {
    if a != b {
        return Err(AttackError::Misaligned(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Yeom scores plus the decision threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct YeomScores {
    pub records: Vec<ScoreRecord>,
    /// `−avg_train_loss`; predicted member iff `final ≥ threshold`.
    pub threshold: f64,
}

impl YeomScores {
    pub fn predict(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.final_score >= self.threshold).collect()
    }
}

pub fn yeom_from_losses(ids: &[SampleId], losses: &[f64], avg_train_loss: f64) -> Result<YeomScores, AttackError> {
    check_len("ids/losses", ids.len(), losses.len())?;
    let records = ids
        .iter()
        .zip(losses)
        .map(|(&id, &l)| ScoreRecord::uncalibrated(AttackKind::Yeom, id, BaseScore::from_loss(l).value()))
        .collect();
    Ok(YeomScores { records, threshold: -avg_train_loss })
}

pub fn score_yeom<F: Scalar>(
    victim: &Classifier<F>,
    ids: &[SampleId],
    x: &Array2<F>,
    labels: &[usize],
    avg_train_loss: f64,
) -> Result<YeomScores, AttackError> {
    yeom_from_losses(ids, &victim_losses(victim, x, labels)?, avg_train_loss)
}

fn require_aligned(ids: &[SampleId], losses: &[f64], outputs: &ShadowOutputs) -> Result<(), AttackError> {
    check_len("ids/losses", ids.len(), losses.len())?;
    if outputs.ids != ids {
        return Err(AttackError::Misaligned("shadow outputs cover different samples".into()));
    }
    Ok(())
}

/// `final = s_v − mean_OUT s`.
pub fn watson_from_losses(ids: &[SampleId], losses: &[f64], outputs: &ShadowOutputs) -> Result<Vec<ScoreRecord>, AttackError> {
    require_aligned(ids, losses, outputs)?;
    ids.iter()
        .zip(losses)
        .enumerate()
        .map(|(j, (&id, &l))| {
            let (out_mean, _) = outputs.out_mean(j).map_err(|e| match e {
                ShadowError::NoOutShadows(id) => AttackError::NoOutShadows(id),
                e => e.into(),
            })?;
            Ok(ScoreRecord::calibrated(AttackKind::Watson, id, -l, out_mean))
        })
        .collect()
}

/// `final = s_v − (mean_IN s + mean_OUT s)/2`.
pub fn sablayrolles_from_losses(
    ids: &[SampleId],
    losses: &[f64],
    outputs: &ShadowOutputs,
) -> Result<Vec<ScoreRecord>, AttackError> {
    require_aligned(ids, losses, outputs)?;
    ids.iter()
        .zip(losses)
        .enumerate()
        .map(|(j, (&id, &l))| {
            let m = outputs.in_out_means(j).map_err(|e| match e {
                ShadowError::NoInShadows(id) => AttackError::SablayrollesUnavailable(id),
                ShadowError::NoOutShadows(id) => AttackError::NoOutShadows(id),
                e => e.into(),
            })?;
            Ok(ScoreRecord::calibrated(AttackKind::Sablayrolles, id, -l, 0.5 * (m.in_mean + m.out_mean)))
        })
        .collect()
}

/// `outputs` must be queried on exactly `ids`, in order.
pub fn score_watson<F: Scalar>(
    victim: &Classifier<F>,
    x: &Array2<F>,
    outputs: &ShadowOutputs,
) -> Result<Vec<ScoreRecord>, AttackError> {
    let losses = victim_losses(victim, x, &outputs.labels)?;
    watson_from_losses(&outputs.ids, &losses, outputs)
}

/// `outputs` must hold both IN and OUT shadows for every sample; fresh
/// targets get their IN side by merging per-target model outputs.
pub fn score_sablayrolles<F: Scalar>(
    victim: &Classifier<F>,
    x: &Array2<F>,
    outputs: &ShadowOutputs,
) -> Result<Vec<ScoreRecord>, AttackError> {
    let losses = victim_losses(victim, x, &outputs.labels)?;
    sablayrolles_from_losses(&outputs.ids, &losses, outputs)
}

/// `final = s_v(x, y) − mean_{x'} s_v(x', y)` from precomputed member losses.
pub fn subpop_from_losses(
    attack: AttackKind,
    ids: &[SampleId],
    losses: &[f64],
    member_losses: &[Vec<f64>],
) -> Result<Vec<ScoreRecord>, AttackError> {
    check_len("ids/losses", ids.len(), losses.len())?;
    check_len("ids/subpopulations", ids.len(), member_losses.len())?;
    ids.iter()
        .zip(losses)
        .zip(member_losses)
        .map(|((&id, &l), m)| {
            if m.is_empty() {
                return Err(AttackError::EmptySubpopulation(id));
            }
            let cal = -running_mean(m);
            Ok(ScoreRecord::calibrated(attack, id, -l, cal))
        })
        .collect()
}

/// Targets processed per batched victim query.
const SUBPOP_BATCH: usize = 32;

/// Scores each target against its subpopulation. `sets[i]` belongs to
/// `ids[i]`; every member is scored with the target's label.
pub fn score_subpop<F: Scalar>(
    attack: AttackKind,
    victim: &Classifier<F>,
    ids: &[SampleId],
    x: &Array2<F>,
    labels: &[usize],
    sets: &[SubpopulationSet<F>],
) -> Result<Vec<ScoreRecord>, AttackError> {
    check_len("ids/subpopulations", ids.len(), sets.len())?;
    for ((&id, &y), set) in ids.iter().zip(labels).zip(sets) {
        if set.target != id {
            return Err(AttackError::Misaligned(format!("subpopulation for {} found at {id}", set.target)));
        }
        if set.label != y {
            return Err(AttackError::LabelMismatch { target: id, expected: y, found: set.label });
        }
        if set.is_empty() {
            return Err(AttackError::EmptySubpopulation(id));
        }
    }
    let losses = victim_losses(victim, x, labels)?;
    let mut member_losses = Vec::with_capacity(sets.len());
    for chunk in sets.chunks(SUBPOP_BATCH) {
        let views: Vec<_> = chunk.iter().map(|s| s.images.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| AttackError::Misaligned(e.to_string()))?;
        let y: Vec<usize> = chunk.iter().flat_map(|s| std::iter::repeat_n(s.label, s.len())).collect();
        let l = victim_losses(victim, &stacked, &y)?;
        let mut at = 0;
        for s in chunk {
            member_losses.push(l[at..at + s.len()].to_vec());
            at += s.len();
        }
    }
    subpop_from_losses(attack, ids, &losses, &member_losses)
}

/// Fraction of perturbed losses above the clean loss, ties counted half.
pub fn perturbation_fraction(clean: f64, perturbed: &[f64]) -> f64 {
    let score: f64 = perturbed
        .iter()
        .map(|&p| {
            if p > clean {
                1.0
            } else if p == clean {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    score / perturbed.len() as f64
}

fn sample_seed(seed: u64, id: SampleId) -> u64 {
    seed.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ ((id.origin as u64) << 56) ^ id.index as u64
}

/// Rows of input per victim query.
const JAYARAMAN_ROWS: usize = 2048;

/// Input-space perturbation attack: `T` draws `x + η`, `η ~ N(0, σ²I)` in the
/// model's input space, seeded per sample.
pub fn score_jayaraman<F: Scalar>(
    victim: &Classifier<F>,
    ids: &[SampleId],
    x: &Array2<F>,
    labels: &[usize],
    t: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<ScoreRecord>, AttackError> {
    if t == 0 {
        return Err(AttackError::InvalidConfig("T must be ≥ 1".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(AttackError::InvalidConfig(format!("sigma {sigma} must be > 0")));
    }
    check_len("ids/images", ids.len(), x.nrows())?;
    check_len("ids/labels", ids.len(), labels.len())?;
    let clean = victim_losses(victim, x, labels)?;
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let per_batch = (JAYARAMAN_ROWS / t).max(1);
    let d = x.ncols();
    let mut out = Vec::with_capacity(ids.len());
    for start in (0..ids.len()).step_by(per_batch) {
        let end = (start + per_batch).min(ids.len());
        let mut batch = Array2::<F>::zeros(((end - start) * t, d));
        let mut y = Vec::with_capacity(batch.nrows());
        for j in start..end {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, ids[j]));
            let base = x.row(j);
            for k in 0..t {
                let mut row = batch.row_mut((j - start) * t + k);
                for (v, &b) in row.iter_mut().zip(base.iter()) {
                    *v = b + F::of(normal.sample(&mut rng));
                }
                y.push(labels[j]);
            }
        }
        let l = victim_losses(victim, &batch, &y)?;
        for j in start..end {
            let p = &l[(j - start) * t..(j - start + 1) * t];
            out.push(ScoreRecord::uncalibrated(AttackKind::Jayaraman, ids[j], perturbation_fraction(clean[j], p)));
        }
    }
    Ok(out)
}

/// Candidate σ values: `first`, then `draws` log-uniform samples in `range`.
pub fn sigma_candidates(first: f64, draws: usize, range: (f64, f64), seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let (lo, hi) = (range.0.ln(), range.1.ln());
    std::iter::once(first)
        .chain((0..draws).map(|_| (lo + (hi - lo) * rand::Rng::random::<f64>(&mut rng)).exp()))
        .collect()
}

/// Number of confidence features for `classes` outputs.
pub fn shokri_feature_dim(classes: usize) -> usize {
    classes + 2
}

/// Sorted softmax (descending), `p_y`, `ln p_y`.
pub fn shokri_features(p: ArrayView1<f64>, y: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = p.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let py = p[y];
    sorted.push(py);
    sorted.push(if py.is_nan() { py } else { py.max(PROB_FLOOR).ln() });
    sorted
}

/// Standardized-feature logistic regression fit by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticRegression {
    const ITERS: usize = 500;
    const LR: f64 = 0.5;
    const L2: f64 = 1e-4;

    pub fn fit(x: &Array2<f64>, y: &[bool]) -> Self {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let scale: Vec<f64> = x
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        let mut z = x.clone();
        for mut row in z.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&scale) {
                *v = (*v - m) / s;
            }
        }
        let t = Array1::from_iter(y.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        let mut w = Array1::<f64>::zeros(x.ncols());
        let mut b = 0.0;
        for _ in 0..Self::ITERS {
            let p = (z.dot(&w) + b).mapv(sigmoid);
            let r = &p - &t;
            let gw = z.t().dot(&r) / n + &w * Self::L2;
            let gb = r.sum() / n;
            w.scaled_add(-Self::LR, &gw);
            b -= Self::LR * gb;
        }
        Self { mean, scale, weights: w.to_vec(), bias: b }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        let logit: f64 = features
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum::<f64>()
            + self.bias;
        sigmoid(logit)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Balanced member/nonmember examples for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedSet {
    pub features: Array2<f64>,
    pub is_in: Vec<bool>,
}

impl BalancedSet {
    pub fn counts(&self) -> (usize, usize) {
        let ins = self.is_in.iter().filter(|&&b| b).count();
        (ins, self.is_in.len() - ins)
    }
}

/// Per-class attack classifiers with a pooled fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShokriModel {
    pub per_class: Vec<Option<LogisticRegression>>,
    pub global: LogisticRegression,
    /// Balanced `(in, out)` counts per class after downsampling.
    pub class_counts: Vec<(usize, usize)>,
}

/// Assembles the balanced per-class training sets from shadow outputs.
pub fn shokri_training_sets(outputs: &ShadowOutputs, classes: usize, seed: u64) -> Vec<BalancedSet> {
    let dim = shokri_feature_dim(classes);
    let mut ins: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
    let mut outs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
    for (s, p) in outputs.softmax.iter().enumerate() {
        for (j, &y) in outputs.labels.iter().enumerate() {
            let f = shokri_features(p.row(j), y);
            if outputs.membership[[s, j]] {
                ins[y].push(f);
            } else {
                outs[y].push(f);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ins.into_iter()
        .zip(outs)
        .map(|(mut a, mut b)| {
            let n = a.len().min(b.len());
            a.shuffle(&mut rng);
            b.shuffle(&mut rng);
            a.truncate(n);
            b.truncate(n);
            let rows: Vec<f64> = a.iter().chain(&b).flatten().copied().collect();
            BalancedSet {
                features: Array2::from_shape_vec((2 * n, dim), rows).expect("feature width"),
                is_in: std::iter::repeat_n(true, n).chain(std::iter::repeat_n(false, n)).collect(),
            }
        })
        .collect()
}

impl ShokriModel {
    /// Classes whose balanced set is empty fall back to the pooled classifier.
    pub fn fit(outputs: &ShadowOutputs, classes: usize, seed: u64) -> Result<Self, AttackError> {
        let sets = shokri_training_sets(outputs, classes, seed);
        let class_counts: Vec<_> = sets.iter().map(BalancedSet::counts).collect();
        let views: Vec<_> = sets.iter().map(|s| s.features.view()).collect();
        let pooled = ndarray::concatenate(Axis(0), &views).expect("same width");
        if pooled.nrows() == 0 {
            return Err(AttackError::NoTrainingExamples);
        }
        let pooled_y: Vec<bool> = sets.iter().flat_map(|s| s.is_in.iter().copied()).collect();
        let global = LogisticRegression::fit(&pooled, &pooled_y);
        let per_class = sets
            .iter()
            .map(|s| (!s.is_in.is_empty()).then(|| LogisticRegression::fit(&s.features, &s.is_in)))
            .collect();
        Ok(Self { per_class, global, class_counts })
    }

    pub fn member_probability(&self, p: ArrayView1<f64>, y: usize) -> f64 {
        let f = shokri_features(p, y);
        match self.per_class.get(y) {
            Some(Some(m)) => m.predict(&f),
            _ => self.global.predict(&f),
        }
    }

    /// Balanced accuracy on `outputs` at probability threshold 0.5.
    pub fn balanced_accuracy(&self, outputs: &ShadowOutputs) -> f64 {
        let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
        for (s, p) in outputs.softmax.iter().enumerate() {
            for (j, &y) in outputs.labels.iter().enumerate() {
                let guess = self.member_probability(p.row(j), y) >= 0.5;
                if outputs.membership[[s, j]] {
                    pos += 1;
                    tp += guess as usize;
                } else {
                    neg += 1;
                    tn += !guess as usize;
                }
            }
        }
        let rate = |a: usize, b: usize| if b == 0 { 0.5 } else { a as f64 / b as f64 };
        0.5 * (rate(tp, pos) + rate(tn, neg))
    }
}

pub fn shokri_from_softmax(
    model: &ShokriModel,
    ids: &[SampleId],
    probs: &Array2<f64>,
    labels: &[usize],
) -> Result<Vec<ScoreRecord>, AttackError> {
    check_len("ids/softmax rows", ids.len(), probs.nrows())?;
    check_len("ids/labels", ids.len(), labels.len())?;
    Ok(ids
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(j, (&id, &y))| {
            let v = BaseScore::Confidence(model.member_probability(probs.row(j), y)).value();
            ScoreRecord::uncalibrated(AttackKind::Shokri, id, v)
        })
        .collect())
}

pub fn score_shokri<F: Scalar>(
    victim: &Classifier<F>,
    model: &ShokriModel,
    ids: &[SampleId],
    x: &Array2<F>,
    labels: &[usize],
) -> Result<Vec<ScoreRecord>, AttackError> {
    let probs = if x.nrows() == 0 {
        Array2::zeros((0, victim.spec().num_classes))
    } else {
        victim.predict(x)?.mapv(|v| v.f64())
    };
    shokri_from_softmax(model, ids, &probs, labels)
}

/// Picks the records of one attack in `ids` order.
pub fn finals_for(records: &[ScoreRecord], ids: &[SampleId]) -> Option<Vec<f64>> {
    let by_id: std::collections::HashMap<_, _> = records.iter().map(|r| (r.sample_id, r.final_score)).collect();
    ids.iter().map(|id| by_id.get(id).copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<SampleId> {
        (0..n).map(SampleId::train).collect()
    }

    #[test]
    fn yeom_threshold_and_ties() {
        let y = yeom_from_losses(&ids(3), &[0.0, 0.5, 0.5], 0.5).unwrap();
        assert_eq!(y.records[0].final_score, 0.0);
        assert_eq!(y.records[1].final_score, y.records[2].final_score);
        assert_eq!(y.threshold, -0.5);
        assert_eq!(y.predict(), vec![true, true, true]);
        let y = yeom_from_losses(&ids(1), &[0.6], 0.5).unwrap();
        assert_eq!(y.predict(), vec![false]);
    }

    fn outputs(losses: Vec<Vec<f64>>, membership: Vec<Vec<bool>>) -> ShadowOutputs {
        let (s, n) = (losses.len(), losses[0].len());
        ShadowOutputs {
            ids: ids(n),
            labels: vec![0; n],
            softmax: vec![Array2::zeros((n, 2)); s],
            losses: Array2::from_shape_vec((s, n), losses.concat()).unwrap(),
            membership: Array2::from_shape_vec((s, n), membership.concat()).unwrap(),
        }
    }

    #[test]
    fn watson_arithmetic() {
        let o = outputs(vec![vec![2.3], vec![2.3], vec![0.0]], vec![vec![false], vec![false], vec![true]]);
        let r = watson_from_losses(&ids(1), &[0.01], &o).unwrap();
        assert!((r[0].final_score - 2.29).abs() < 1e-12);
        let o = outputs(vec![vec![0.01]], vec![vec![false]]);
        assert_eq!(watson_from_losses(&ids(1), &[0.01], &o).unwrap()[0].final_score, 0.0);
        let o = outputs(vec![vec![0.01]], vec![vec![true]]);
        assert!(matches!(watson_from_losses(&ids(1), &[0.01], &o), Err(AttackError::NoOutShadows(_))));
    }

    #[test]
    fn sablayrolles_arithmetic_and_unavailable() {
        let o = outputs(vec![vec![0.02], vec![2.0]], vec![vec![true], vec![false]]);
        let r = sablayrolles_from_losses(&ids(1), &[0.05], &o).unwrap();
        assert!((r[0].final_score - 0.96).abs() < 1e-12);
        let o = outputs(vec![vec![2.0]], vec![vec![false]]);
        assert!(matches!(
            sablayrolles_from_losses(&ids(1), &[0.05], &o),
            Err(AttackError::SablayrollesUnavailable(_))
        ));
    }

    #[test]
    fn subpop_arithmetic_and_errors() {
        let r = subpop_from_losses(AttackKind::Ours, &ids(1), &[0.02], &[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!((r[0].final_score - 1.98).abs() < 1e-12);
        let r = subpop_from_losses(AttackKind::Ours, &ids(1), &[0.7], &[vec![0.7]]).unwrap();
        assert_eq!(r[0].final_score, 0.0);
        assert!(matches!(
            subpop_from_losses(AttackKind::Ours, &ids(1), &[0.7], &[vec![]]),
            Err(AttackError::EmptySubpopulation(_))
        ));
    }

    #[test]
    fn perturbation_fraction_ties() {
        assert_eq!(perturbation_fraction(1.0, &[1.0; 100]), 0.5);
        for p in [0.5, 1.0, 1.5] {
            assert!([0.0, 0.5, 1.0].contains(&perturbation_fraction(1.0, &[p])));
        }
    }

    #[test]
    fn attack_names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(k.as_str().parse::<AttackKind>().unwrap(), k);
        }
        assert!("nope".parse::<AttackKind>().is_err());
        assert_eq!("ours-black-box".parse::<AttackKind>().unwrap(), AttackKind::OursBlackBox);
    }

    #[test]
    fn records_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let mut recs = vec![
            ScoreRecord::calibrated(AttackKind::Watson, SampleId::train(3), -0.5, -2.0),
            ScoreRecord::uncalibrated(AttackKind::Yeom, SampleId::test(1), -1.0),
        ];
        recs[0].is_member = Some(true);
        write_records(&recs, &path).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
    }

    #[test]
    fn sigma_candidates_start_with_default() {
        let c = sigma_candidates(0.01, 10, (1e-3, 0.5), 4);
        assert_eq!(c.len(), 11);
        assert_eq!(c[0], 0.01);
        assert!(c[1..].iter().all(|&s| (1e-3..=0.5).contains(&s)));
        assert_eq!(c, sigma_candidates(0.01, 10, (1e-3, 0.5), 4));
    }

    #[test]
    fn logistic_regression_separates() {
        let x = Array2::from_shape_fn((200, 2), |(i, j)| if j == 0 { (i % 2) as f64 * 2.0 - 1.0 } else { (i % 7) as f64 });
        let y: Vec<bool> = (0..200).map(|i| i % 2 == 1).collect();
        let m = LogisticRegression::fit(&x, &y);
        assert!(m.predict(&[1.0, 3.0]) > 0.9);
        assert!(m.predict(&[-1.0, 3.0]) < 0.1);
    }
}
