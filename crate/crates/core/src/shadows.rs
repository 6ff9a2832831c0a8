//! Shadow-model populations and their per-sample IN/OUT bookkeeping.

use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{id_checksum, DataError, DatasetBundle, SampleId};
use crate::models::{
    build_classifier, cross_entropy_loss, train_classifier, Classifier, ClassifierSpec, Labeled, ModelError,
    TrainConfig, TrainedClassifier,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ShadowError {
    #[error("insufficient attacker data: {0}")]
    Insufficient(String),
    #[error("shadow pool is empty")]
    EmptyPool,
    #[error("target {0} belongs to the attacker split; per-target models are for fresh targets")]
    TargetNotFresh(SampleId),
    #[error("sample index {index} out of range for {len} queried samples")]
    UnknownSample { index: usize, len: usize },
    #[error("no IN shadow for sample {0}")]
    NoInShadows(SampleId),
    #[error("no OUT shadow for sample {0}")]
    NoOutShadows(SampleId),
    #[error("outputs cover different samples and cannot be merged")]
    Misaligned,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed shadow outputs: {0}")]
    Malformed(String),
    #[error("shadow {shadow} produced a non-finite output on sample {sample}; its training diverged")]
    NonFinite { shadow: usize, sample: SampleId },
}

/// How a pool was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Random subsets of the attacker split.
    Resampled,
    /// Attacker subsets joined with a batch of fresh targets.
    PerTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowRecord {
    pub index: usize,
    pub seed: u64,
    pub train_count: usize,
    pub ids_checksum: String,
    pub seconds: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowManifest {
    pub kind: PoolKind,
    pub spec: ClassifierSpec,
    pub config: TrainConfig,
    pub fraction: f64,
    pub universe_checksum: String,
    pub shadows: Vec<ShadowRecord>,
}

impl ShadowManifest {
    pub fn total_seconds(&self) -> f64 {
        self.shadows.iter().map(|s| s.seconds).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), ShadowError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self).expect("plain data"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ShadowError> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| ShadowError::Malformed(e.to_string()))
    }
}

/// Trained shadows together with the exact ids each one saw.
#[derive(Debug, Clone)]
pub struct ShadowPool<F: Scalar> {
    pub models: Vec<Classifier<F>>,
    pub training_ids: Vec<Vec<SampleId>>,
    /// Column labels of the membership matrix: the attacker split, plus the
    /// fresh targets for per-target pools.
    pub universe: Vec<SampleId>,
    pub manifest: ShadowManifest,
    sets: Vec<HashSet<SampleId>>,
}

impl<F: Scalar> ShadowPool<F> {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn contains(&self, shadow: usize, id: SampleId) -> bool {
        self.sets[shadow].contains(&id)
    }

    /// `M[i][j]`: universe sample `j` is in shadow `i`'s training set.
    pub fn membership_matrix(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.len(), self.universe.len()), |(i, j)| self.contains(i, self.universe[j]))
    }

    /// Writes one checkpoint per shadow into `dir`.
    pub fn save_checkpoints(&self, dir: &Path) -> Result<(), ShadowError> {
        for (i, m) in self.models.iter().enumerate() {
            let t = TrainedClassifier { model: m.clone(), history: Vec::new(), train_acc: self.manifest.shadows[i].train_acc, test_acc: None };
            t.save(&dir.join(format!("shadow_{i:03}.ckpt")))?;
        }
        Ok(())
    }
}

/// Parallel-training knobs shared by both pool builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolOptions {
    pub workers: usize,
    pub seed: u64,
}

impl Default for PoolOptions {
    fn default() -> Self {
        Self { workers: 1, seed: 0 }
    }
}

struct Job {
    index: usize,
    seed: u64,
    rows: Vec<usize>,
}

struct Done<F: Scalar> {
    index: usize,
    seed: u64,
    rows: Vec<usize>,
    model: TrainedClassifier<F>,
    seconds: f64,
}

fn subset_size(n: usize, fraction: f64) -> Result<usize, ShadowError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ShadowError::Insufficient(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k < 2 {
        return Err(ShadowError::Insufficient(format!("{n} attacker samples give {k}-sample shadow sets")));
    }
    Ok(k)
}

fn shadow_seed(base: u64, kind: PoolKind, index: usize) -> u64 {
    let salt = match kind {
        PoolKind::Resampled => 0x5ad0_0000,
        PoolKind::PerTarget => 0x1a7e_0000,
    };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt + index as u64)
}

/// Trains every job, fanning out over `workers` threads; results funnel
/// through one channel so bookkeeping has a single writer.
fn run_jobs<F: Scalar>(
    spec: &ClassifierSpec,
    config: &TrainConfig,
    x: &Array2<F>,
    y: &[usize],
    jobs: Vec<Job>,
    workers: usize,
) -> Result<Vec<Done<F>>, ShadowError> {
    let total = jobs.len();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Result<Done<F>, ModelError>>();
    let mut out: Vec<Option<Done<F>>> = (0..total).map(|_| None).collect();
    let mut first_err = None;
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, total.max(1)) {
            let tx = tx.clone();
            let (jobs, next) = (&jobs, &next);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let start = Instant::now();
                let xs = x.select(Axis(0), &job.rows);
                let ys: Vec<usize> = job.rows.iter().map(|&r| y[r]).collect();
                let cfg = TrainConfig { seed: job.seed, ..config.clone() };
                let result = train_classifier(build_classifier::<F>(spec, job.seed), Labeled::new(&xs, &ys), &cfg, None)
                    .map(|model| Done {
                        index: job.index,
                        seed: job.seed,
                        rows: job.rows.clone(),
                        model,
                        seconds: start.elapsed().as_secs_f64(),
                    });
                if tx.send(result).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for r in rx {
            match r {
                Ok(d) => {
                    log::info!("shadow {}/{} trained in {:.1}s (train acc {:.4})", d.index + 1, total, d.seconds, d.model.train_acc);
                    let i = d.index;
                    out[i] = Some(d);
                }
                Err(e) => {
                    // stop handing out work; in-flight jobs finish
                    next.store(total, Ordering::Relaxed);
                    first_err.get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e.into());
    }
    Ok(out.into_iter().map(|d| d.expect("every job reports")).collect())
}

fn assemble<F: Scalar>(
    kind: PoolKind,
    spec: &ClassifierSpec,
    config: &TrainConfig,
    fraction: f64,
    universe: Vec<SampleId>,
    done: Vec<Done<F>>,
) -> ShadowPool<F> {
    let mut models = Vec::with_capacity(done.len());
    let mut training_ids = Vec::with_capacity(done.len());
    let mut records = Vec::with_capacity(done.len());
    for d in done {
        let mut ids: Vec<SampleId> = d.rows.iter().map(|&r| universe[r]).collect();
        ids.sort();
        records.push(ShadowRecord {
            index: d.index,
            seed: d.seed,
            train_count: ids.len(),
            ids_checksum: id_checksum(&ids),
            seconds: d.seconds,
            train_acc: d.model.train_acc,
        });
        models.push(d.model.model);
        training_ids.push(ids);
    }
    let sets = training_ids.iter().map(|ids| ids.iter().copied().collect()).collect();
    let manifest = ShadowManifest {
        kind,
        spec: *spec,
        config: config.clone(),
        fraction,
        universe_checksum: id_checksum(&universe),
        shadows: records,
    };
    ShadowPool { models, training_ids, universe, manifest, sets }
}

/// Trains `count` shadows, each on an independent uniform `fraction` subset
/// of the attacker split.
pub fn train_shadow_pool<F: Scalar>(
    bundle: &DatasetBundle,
    spec: &ClassifierSpec,
    count: usize,
    fraction: f64,
    config: &TrainConfig,
    opts: PoolOptions,
) -> Result<ShadowPool<F>, ShadowError> {
    if count == 0 {
        return Err(ShadowError::Insufficient("shadow count must be at least 1".into()));
    }
    let universe = bundle.splits.attacker.clone();
    let k = subset_size(universe.len(), fraction)?;
    let x = bundle.images::<F>(&universe)?;
    let y = bundle.labels(&universe)?;
    let jobs = (0..count)
        .map(|index| {
            let seed = shadow_seed(opts.seed, PoolKind::Resampled, index);
            let mut rows: Vec<usize> = (0..universe.len()).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            rows.truncate(k);
            rows.sort_unstable();
            Job { index, seed, rows }
        })
        .collect();
    let done = run_jobs(spec, config, &x, &y, jobs, opts.workers)?;
    Ok(assemble(PoolKind::Resampled, spec, config, fraction, universe, done))
}

/// Trains `count` IN models for a batch of fresh targets: each sees a random
/// `fraction` subset of the attacker split plus every target.
pub fn train_per_target_in_models<F: Scalar>(
    bundle: &DatasetBundle,
    spec: &ClassifierSpec,
    targets: &[SampleId],
    count: usize,
    fraction: f64,
    config: &TrainConfig,
    opts: PoolOptions,
) -> Result<ShadowPool<F>, ShadowError> {
    let attacker: HashSet<SampleId> = bundle.splits.attacker.iter().copied().collect();
    if let Some(&t) = targets.iter().find(|t| attacker.contains(t)) {
        return Err(ShadowError::TargetNotFresh(t));
    }
    let n_att = bundle.splits.attacker.len();
    let mut universe = bundle.splits.attacker.clone();
    universe.extend_from_slice(targets);
    if count == 0 {
        return Ok(assemble(PoolKind::PerTarget, spec, config, fraction, universe, Vec::new()));
    }
    let k = subset_size(n_att, fraction)?;
    let x = bundle.images::<F>(&universe)?;
    let y = bundle.labels(&universe)?;
    let jobs = (0..count)
        .map(|index| {
            let seed = shadow_seed(opts.seed, PoolKind::PerTarget, index);
            let mut rows: Vec<usize> = (0..n_att).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            rows.truncate(k);
            rows.extend(n_att..universe.len());
            rows.sort_unstable();
            Job { index, seed, rows }
        })
        .collect();
    let done = run_jobs(spec, config, &x, &y, jobs, opts.workers)?;
    Ok(assemble(PoolKind::PerTarget, spec, config, fraction, universe, done))
}

/// Dense `(shadow × sample)` outputs with membership flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowOutputs {
    pub ids: Vec<SampleId>,
    pub labels: Vec<usize>,
    /// One `(samples × classes)` softmax matrix per shadow.
    pub softmax: Vec<Array2<f64>>,
    /// Cross-entropy loss, `(shadows × samples)`.
    pub losses: Array2<f64>,
    /// Sample was in the shadow's training set, `(shadows × samples)`.
    pub membership: Array2<bool>,
}

/// Queries every shadow on the given samples.
pub fn query_shadows<F: Scalar>(
    pool: &ShadowPool<F>,
    ids: &[SampleId],
    x: &Array2<F>,
    labels: &[usize],
) -> Result<ShadowOutputs, ShadowError> {
    if pool.is_empty() {
        return Err(ShadowError::EmptyPool);
    }
    if x.nrows() != ids.len() || labels.len() != ids.len() {
        return Err(ModelError::LengthMismatch { images: x.nrows(), labels: labels.len() }.into());
    }
    let (s, n) = (pool.len(), ids.len());
    let mut softmax = Vec::with_capacity(s);
    let mut losses = Array2::zeros((s, n));
    for (i, m) in pool.models.iter().enumerate() {
        let p = if n == 0 {
            Array2::zeros((0, m.spec().num_classes))
        } else {
            m.predict(x)?.mapv(|v| v.f64())
        };
        let l = cross_entropy_loss(&p, labels)?;
        if let Some(j) = l.iter().position(|v| !v.is_finite()) {
            return Err(ShadowError::NonFinite { shadow: i, sample: ids[j] });
        }
        losses.row_mut(i).assign(&ndarray::Array1::from(l));
        softmax.push(p);
    }
    let membership = Array2::from_shape_fn((s, n), |(i, j)| pool.contains(i, ids[j]));
    Ok(ShadowOutputs { ids: ids.to_vec(), labels: labels.to_vec(), softmax, losses, membership })
}

/// Arithmetic means of the base score `s = −loss` over IN and OUT shadows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InOutMeans {
    pub in_mean: f64,
    pub out_mean: f64,
    pub in_count: usize,
    pub out_count: usize,
}

impl ShadowOutputs {
    pub fn num_shadows(&self) -> usize {
        self.losses.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.ids.len()
    }

    fn column(&self, sample: usize) -> Result<(Vec<f64>, Vec<f64>), ShadowError> {
        if sample >= self.num_samples() {
            return Err(ShadowError::UnknownSample { index: sample, len: self.num_samples() });
        }
        let (mut ins, mut outs) = (Vec::new(), Vec::new());
        for i in 0..self.num_shadows() {
            let score = -self.losses[[i, sample]];
            if self.membership[[i, sample]] {
                ins.push(score);
            } else {
                outs.push(score);
            }
        }
        Ok((ins, outs))
    }

    pub fn in_out_means(&self, sample: usize) -> Result<InOutMeans, ShadowError> {
        let (ins, outs) = self.column(sample)?;
        if ins.is_empty() {
            return Err(ShadowError::NoInShadows(self.ids[sample]));
        }
        if outs.is_empty() {
            return Err(ShadowError::NoOutShadows(self.ids[sample]));
        }
        Ok(InOutMeans { in_mean: running_mean(&ins), out_mean: running_mean(&outs), in_count: ins.len(), out_count: outs.len() })
    }

    /// OUT mean and count alone; needs no IN population.
    pub fn out_mean(&self, sample: usize) -> Result<(f64, usize), ShadowError> {
        let (_, outs) = self.column(sample)?;
        if outs.is_empty() {
            return Err(ShadowError::NoOutShadows(self.ids[sample]));
        }
        Ok((running_mean(&outs), outs.len()))
    }

    /// Stacks the shadows of two outputs over the same samples.
    pub fn merge(&self, other: &ShadowOutputs) -> Result<ShadowOutputs, ShadowError> {
        if self.ids != other.ids || self.labels != other.labels {
            return Err(ShadowError::Misaligned);
        }
        let cat = |a: &Array2<f64>, b: &Array2<f64>| ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width");
        Ok(ShadowOutputs {
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            softmax: self.softmax.iter().chain(&other.softmax).cloned().collect(),
            losses: cat(&self.losses, &other.losses),
            membership: ndarray::concatenate(Axis(0), &[self.membership.view(), other.membership.view()]).expect("same width"),
        })
    }

    /// Long-format CSV: `shadow, sample_id, label, is_in, loss, p0..pK`.
    pub fn save_csv(&self, path: &Path) -> Result<(), ShadowError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let classes = self.softmax.first().map_or(0, |p| p.ncols());
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = ["shadow", "sample_id", "label", "is_in", "loss"].map(String::from).to_vec();
        header.extend((0..classes).map(|c| format!("p{c}")));
        w.write_record(&header)?;
        for (i, p) in self.softmax.iter().enumerate() {
            for (j, id) in self.ids.iter().enumerate() {
                let mut row = vec![
                    i.to_string(),
                    id.to_string(),
                    self.labels[j].to_string(),
                    u8::from(self.membership[[i, j]]).to_string(),
                    format!("{:e}", self.losses[[i, j]]),
                ];
                row.extend(p.row(j).iter().map(|v| format!("{v:e}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<ShadowOutputs, ShadowError> {
        let bad = |m: &str| ShadowError::Malformed(format!("{}: {m}", path.display()));
        let mut r = csv::Reader::from_path(path)?;
        let classes = r.headers()?.len().checked_sub(5).ok_or_else(|| bad("too few columns"))?;
        let mut rows: Vec<(usize, SampleId, usize, bool, f64, Vec<f64>)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |k: usize| rec.get(k).ok_or_else(|| bad("short row"));
            let f = |k: usize| num(k)?.parse::<f64>().map_err(|_| bad("bad number"));
            let u = |k: usize| num(k)?.parse::<usize>().map_err(|_| bad("bad integer"));
            let probs = (5..5 + classes).map(f).collect::<Result<Vec<_>, _>>()?;
            let id: SampleId = num(1)?.parse().map_err(|_| bad("bad sample id"))?;
            rows.push((u(0)?, id, u(2)?, u(3)? == 1, f(4)?, probs));
        }
        let shadows = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let n = if shadows == 0 { 0 } else { rows.len() / shadows };
        if n * shadows != rows.len() {
            return Err(bad("ragged shadow blocks"));
        }
        let ids: Vec<SampleId> = rows.iter().take(n).map(|r| r.1).collect();
        let labels: Vec<usize> = rows.iter().take(n).map(|r| r.2).collect();
        let mut softmax = vec![Array2::zeros((n, classes)); shadows];
        let mut losses = Array2::zeros((shadows, n));
        let mut membership = Array2::from_elem((shadows, n), false);
        for (k, (s, id, _, is_in, loss, probs)) in rows.into_iter().enumerate() {
            let j = k % n;
            if s != k / n || id != ids[j] {
                return Err(bad("rows not in shadow-major order"));
            }
            softmax[s].row_mut(j).assign(&ndarray::Array1::from(probs));
            losses[[s, j]] = loss;
            membership[[s, j]] = is_in;
        }
        Ok(ShadowOutputs { ids, labels, softmax, losses, membership })
    }
}

/// Incremental mean; exact when all values are equal.
pub fn running_mean(v: &[f64]) -> f64 {
    v.iter().enumerate().fold(0.0, |m, (k, &x)| m + (x - m) / (k + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Origin;

    fn id(i: usize) -> SampleId {
        SampleId { origin: Origin::Train, index: i }
    }

    fn outputs(losses: &[f64], member: &[bool]) -> ShadowOutputs {
        let s = losses.len();
        ShadowOutputs {
            ids: vec![id(0)],
            labels: vec![0],
            softmax: (0..s).map(|i| ndarray::array![[(-losses[i]).exp(), 1.0 - (-losses[i]).exp()]]).collect(),
            losses: Array2::from_shape_vec((s, 1), losses.to_vec()).unwrap(),
            membership: Array2::from_shape_vec((s, 1), member.to_vec()).unwrap(),
        }
    }

    #[test]
    fn in_out_arithmetic() {
        let o = outputs(&[0.1, 0.3, 2.0], &[true, true, false]);
        let m = o.in_out_means(0).unwrap();
        assert!((m.in_mean + 0.2).abs() < 1e-12);
        assert!((m.out_mean + 2.0).abs() < 1e-12);
        assert_eq!((m.in_count, m.out_count), (2, 1));

        let all_out = outputs(&[0.1, 0.3], &[false, false]);
        assert!(matches!(all_out.in_out_means(0), Err(ShadowError::NoInShadows(_))));
        assert!((all_out.out_mean(0).unwrap().0 + 0.2).abs() < 1e-12);

        let single = outputs(&[0.7, 1.0], &[true, false]);
        assert!((single.in_out_means(0).unwrap().in_mean + 0.7).abs() < 1e-12);
        assert!(matches!(single.in_out_means(3), Err(ShadowError::UnknownSample { .. })));
    }

    #[test]
    fn csv_round_trip_and_merge() {
        let dir = tempfile::tempdir().unwrap();
        let o = outputs(&[0.1, 0.3, 2.0], &[true, false, false]);
        let p = dir.path().join("out.csv");
        o.save_csv(&p).unwrap();
        let back = ShadowOutputs::load_csv(&p).unwrap();
        assert_eq!(back.membership, o.membership);
        assert_eq!(back.ids, o.ids);
        assert!((&back.losses - &o.losses).iter().all(|d| d.abs() < 1e-12));
        let m = o.merge(&back).unwrap();
        assert_eq!(m.num_shadows(), 6);
        assert_eq!(m.in_out_means(0).unwrap().in_count, 2);
    }
}
