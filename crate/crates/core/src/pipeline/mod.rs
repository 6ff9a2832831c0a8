//! Staged experiment runner with checksum-keyed artifact caching.
//!
//! Every stage writes its artifacts under the output directory and a stamp
//! holding a key (stage config slice plus upstream output checksums) and the
//! checksums of its outputs. A stage is up to date when its stamp key matches
//! the current config and its outputs still hash to the recorded values.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{load_config, parse_config, preset, ExperimentConfig, NaturalPool, Profile, PRESETS};

use crate::attacks::{
    finals_for, read_records, score_jayaraman, score_sablayrolles, score_shokri, score_subpop, score_watson,
    score_yeom, sigma_candidates, victim_losses, write_records, AttackError, AttackKind, ScoreRecord, ShokriModel,
    ThresholdSource,
};
use crate::data::synthetic::prototypes;
use crate::data::{load_dataset, load_svhn_extra, make_splits, DataError, DatasetBundle, DatasetName, SampleId};
use crate::eval::{
    auc, cost_report, evaluate_attack, label_records, make_report, AttackResult, CostLedger, CostPhase, EvalError,
    EvalSplit, RunLabel, VictimRow,
};
use crate::latent::{
    load_subpopulations, natural_subpopulation, save_subpopulations, LatentError, LatentStore,
    NoiseSpec, SubpopulationSet,
};
use crate::models::{
    build_classifier, infer_chunked, train_classifier, ClassifierSpec, Labeled, ModelError, TrainedClassifier,
};
use crate::nn::{Parameterized, Sequential};
use crate::shadows::{
    query_shadows, train_per_target_in_models, train_shadow_pool, PoolOptions, ShadowError, ShadowOutputs,
};
use crate::subpop_gan::{train_bigan, write_grid, BiGanConfig, EncoderSource, GanError, GanMode, SubpopGenerator};

type F = f32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stale artifact in stage `{stage}`: {reason}; re-run with --force to rebuild")]
    Stale { stage: Stage, reason: String },
    #[error("stage `{stage}` needs `{needed}`, which has not been run; run it first or pass --force")]
    MissingUpstream { stage: Stage, needed: Stage },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
}

impl PipelineError {
    /// 2 for configuration errors, 3 for stale or missing artifacts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stale { .. } | PipelineError::MissingUpstream { .. } => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Victim,
    Shadows,
    InModels,
    Bigan,
    Craft,
    Attack,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Data,
        Stage::Victim,
        Stage::Shadows,
        Stage::InModels,
        Stage::Bigan,
        Stage::Craft,
        Stage::Attack,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Victim => "victim",
            Stage::Shadows => "shadows",
            Stage::InModels => "in_models",
            Stage::Bigan => "bigan",
            Stage::Craft => "craft",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A training cost incurred by a stage, attributed to one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub attack: AttackKind,
    pub phase: CostPhase,
    pub models: usize,
    pub seconds: f64,
    pub targets: usize,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: Stage,
    pub key: String,
    /// Output path relative to the run directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
    pub costs: Vec<StageCost>,
    pub completed_at: u64,
}

impl StageStamp {
    pub fn output_checksum(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(&self.outputs).expect("plain map")))
    }
}

/// Outcome of one stage in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
    NotRequired,
}

pub fn file_checksum(path: &Path) -> Result<String, PipelineError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value).expect("plain data")).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Artifact { path: path.to_path_buf(), reason: e.to_string() })
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Victim facts needed downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimSummary {
    pub train_acc: f64,
    pub test_acc: f64,
    pub avg_train_loss: f64,
    pub epochs: usize,
    pub seconds: f64,
}

/// BiGAN training facts per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanSummary {
    pub mode: GanMode,
    pub epochs: usize,
    pub stopped_at: Option<usize>,
    pub first_diagnostic: f64,
    pub last_diagnostic: f64,
    pub seconds: f64,
}

/// Crafted-set similarity statistics per subpopulation kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftSummary {
    pub attack: AttackKind,
    pub targets: usize,
    pub mean_similarity: f64,
    /// Targets whose mean member similarity is at least 0.8.
    pub fraction_above_0_8: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JayaramanTrial {
    pub sigma: f64,
    pub auc: f64,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
    bundle: Option<DatasetBundle>,
    status: Vec<(Stage, StageStatus)>,
}

const GENERATED: [AttackKind; 2] = [AttackKind::Ours, AttackKind::OursBlackBox];
const SUBPOP: [AttackKind; 3] = [AttackKind::Ours, AttackKind::OursBlackBox, AttackKind::OursNatural];
const POOL_USERS: [AttackKind; 3] = [AttackKind::Shokri, AttackKind::Watson, AttackKind::Sablayrolles];

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        Ok(Self { cfg, out, force, bundle: None, status: Vec::new() })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    /// Status of each stage touched so far, in execution order.
    pub fn status(&self) -> &[(Stage, StageStatus)] {
        &self.status
    }

    pub fn required(&self, stage: Stage) -> bool {
        match stage {
            Stage::Data | Stage::Victim | Stage::Attack | Stage::Evaluate => true,
            Stage::Shadows => self.cfg.wants_any(&POOL_USERS),
            Stage::InModels => self.cfg.wants(AttackKind::Sablayrolles),
            Stage::Bigan => self.cfg.wants_any(&GENERATED),
            Stage::Craft => self.cfg.wants_any(&SUBPOP),
        }
    }

    pub fn dependencies(&self, stage: Stage) -> Vec<Stage> {
        let base: &[Stage] = match stage {
            Stage::Data => &[],
            Stage::Victim | Stage::Shadows | Stage::InModels => &[Stage::Data],
            Stage::Bigan => &[Stage::Data, Stage::Victim],
            Stage::Craft => &[Stage::Data, Stage::Victim, Stage::Bigan],
            Stage::Attack => &[Stage::Data, Stage::Victim, Stage::Shadows, Stage::InModels, Stage::Craft],
            Stage::Evaluate => &[
                Stage::Data,
                Stage::Victim,
                Stage::Shadows,
                Stage::InModels,
                Stage::Bigan,
                Stage::Craft,
                Stage::Attack,
            ],
        };
        base.iter().copied().filter(|&s| self.required(s)).collect()
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.out.join("stamps").join(format!("{stage}.json"))
    }

    fn load_stamp(&self, stage: Stage) -> Result<Option<StageStamp>, PipelineError> {
        let p = self.stamp_path(stage);
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    fn config_slice(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        let a = &c.attack;
        match stage {
            Stage::Data => json!({
                "dataset": c.dataset, "synthetic": c.synthetic, "split": c.split, "eval": c.eval,
                "extra": self.needs_extra(),
            }),
            Stage::Victim => json!({ "architecture": c.architecture, "train": c.victim }),
            Stage::Shadows => json!({
                "architecture": c.architecture, "train": c.shadow_training,
                "count": a.shadow_count, "fraction": a.shadow_fraction,
            }),
            Stage::InModels => json!({
                "architecture": c.architecture, "train": c.shadow_training,
                "count": a.in_models, "fraction": a.in_fraction,
            }),
            Stage::Bigan => json!({ "bigan": c.bigan, "modes": self.gan_modes() }),
            Stage::Craft => json!({
                "k": a.subpop_k, "draws": a.subpop_draws, "sigma": a.noise_sigma, "metric": a.metric,
                "pool": c.natural_pool, "seed": a.seed,
                "kinds": SUBPOP.iter().filter(|k| c.wants(**k)).collect::<Vec<_>>(),
            }),
            Stage::Attack => json!({ "attacks": c.attacks, "params": a }),
            Stage::Evaluate => json!({ "name": c.name, "dataset": c.dataset, "architecture": c.architecture }),
        }
    }

    fn gan_modes(&self) -> Vec<GanMode> {
        let mut m = Vec::new();
        if self.cfg.wants(AttackKind::Ours) {
            m.push(GanMode::WhiteBox);
        }
        if self.cfg.wants(AttackKind::OursBlackBox) {
            m.push(GanMode::BlackBox);
        }
        m
    }

    fn needs_extra(&self) -> bool {
        self.cfg.wants(AttackKind::OursNatural)
            && self.cfg.natural_pool == NaturalPool::AttackerAndExtra
            && self.cfg.dataset == DatasetName::Svhn
            && self.cfg.synthetic.is_none()
    }

    /// Key from the stage's config slice and its upstream output checksums.
    fn stage_key(&self, stage: Stage) -> Result<String, PipelineError> {
        let mut upstream = BTreeMap::new();
        for dep in self.dependencies(stage) {
            let stamp = self.load_stamp(dep)?.ok_or(PipelineError::MissingUpstream { stage, needed: dep })?;
            upstream.insert(dep.as_str(), stamp.output_checksum());
        }
        let doc = json!({ "stage": stage, "config": self.config_slice(stage), "upstream": upstream });
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&doc).expect("plain data"))))
    }

    /// `Ok(None)` when up to date, otherwise the reason it is not.
    fn staleness(&self, stage: Stage) -> Result<Option<String>, PipelineError> {
        let Some(stamp) = self.load_stamp(stage)? else {
            return Ok(Some("no artifact".into()));
        };
        if stamp.key != self.stage_key(stage)? {
            return Ok(Some("configuration or upstream artifacts changed".into()));
        }
        for (rel, sum) in &stamp.outputs {
            let p = self.out.join(rel);
            if !p.exists() {
                return Ok(Some(format!("{rel} is missing")));
            }
            if &file_checksum(&p)? != sum {
                return Ok(Some(format!("{rel} was modified")));
            }
        }
        Ok(None)
    }

    /// Checks (or with `force`, rebuilds) everything `stage` reads.
    fn ensure_upstream(&mut self, stage: Stage) -> Result<(), PipelineError> {
        for dep in self.dependencies(stage) {
            self.ensure_upstream(dep)?;
            if self.status.iter().any(|(s, _)| *s == dep) {
                continue;
            }
            match self.load_stamp(dep)? {
                None if !self.force => return Err(PipelineError::MissingUpstream { stage, needed: dep }),
                _ => {}
            }
            if let Some(reason) = self.staleness(dep)? {
                if !self.force {
                    return Err(PipelineError::Stale { stage: dep, reason });
                }
                self.execute(dep)?;
            } else {
                self.status.push((dep, StageStatus::Cached));
            }
        }
        Ok(())
    }

    /// Runs one stage after verifying its inputs. Skips it when its artifacts
    /// are current, unless forced.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageStatus, PipelineError> {
        if !self.required(stage) {
            self.status.push((stage, StageStatus::NotRequired));
            return Ok(StageStatus::NotRequired);
        }
        self.ensure_upstream(stage)?;
        if !self.force && self.staleness(stage)?.is_none() {
            log::info!("{stage}: up to date");
            self.status.push((stage, StageStatus::Cached));
            return Ok(StageStatus::Cached);
        }
        self.execute(stage)?;
        Ok(StageStatus::Ran)
    }

    /// Every required stage in order, rebuilding whatever is out of date.
    pub fn run_all(&mut self) -> Result<(), PipelineError> {
        for stage in Stage::ALL {
            if !self.required(stage) {
                self.status.push((stage, StageStatus::NotRequired));
                continue;
            }
            if self.status.iter().any(|(s, _)| *s == stage) {
                continue;
            }
            if !self.force && self.staleness(stage)?.is_none() {
                log::info!("{stage}: up to date");
                self.status.push((stage, StageStatus::Cached));
            } else {
                self.execute(stage)?;
            }
        }
        Ok(())
    }

    fn execute(&mut self, stage: Stage) -> Result<(), PipelineError> {
        log::info!("{stage}: running");
        std::fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        let cfg_path = self.out.join("config.toml");
        std::fs::write(&cfg_path, self.cfg.to_toml()).map_err(io_err(&cfg_path))?;
        let key = self.stage_key(stage)?;
        let t0 = Instant::now();
        let (files, costs) = match stage {
            Stage::Data => self.stage_data()?,
            Stage::Victim => self.stage_victim()?,
            Stage::Shadows => self.stage_shadows()?,
            Stage::InModels => self.stage_in_models()?,
            Stage::Bigan => self.stage_bigan()?,
            Stage::Craft => self.stage_craft()?,
            Stage::Attack => self.stage_attack()?,
            Stage::Evaluate => self.stage_evaluate()?,
        };
        let mut outputs = BTreeMap::new();
        for rel in files {
            let sum = file_checksum(&self.out.join(&rel))?;
            outputs.insert(rel, sum);
        }
        let stamp = StageStamp { stage, key, outputs, seconds: t0.elapsed().as_secs_f64(), costs, completed_at: now() };
        write_json(&self.stamp_path(stage), &stamp)?;
        log::info!("{stage}: done in {:.1}s", stamp.seconds);
        self.status.push((stage, StageStatus::Ran));
        Ok(())
    }

    fn bundle(&mut self) -> Result<&DatasetBundle, PipelineError> {
        if self.bundle.is_none() {
            let raw = match &self.cfg.synthetic {
                Some(s) => prototypes(self.cfg.dataset, s.n_train, s.n_test, s.noise, self.cfg.split.seed ^ 0x5eed),
                None => load_dataset(self.cfg.dataset.as_str(), &self.cfg.resolved_data_root())?,
            };
            let mut b = make_splits(raw, &self.cfg.split)?;
            if self.needs_extra() {
                b.attach_extra(load_svhn_extra(&self.cfg.resolved_data_root())?);
            }
            self.bundle = Some(b);
        }
        Ok(self.bundle.as_ref().expect("just loaded"))
    }

    fn spec(&self) -> Result<ClassifierSpec, PipelineError> {
        Ok(ClassifierSpec::new(self.cfg.architecture, self.cfg.dataset.image_shape(), self.cfg.dataset.num_classes())?)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn eval_split(&self) -> Result<EvalSplit, PipelineError> {
        Ok(EvalSplit::load(&self.path("data/eval_split.json"))?)
    }

    pub fn victim(&self) -> Result<TrainedClassifier<F>, PipelineError> {
        Ok(TrainedClassifier::load(&self.path("victim/victim.ckpt"))?)
    }

    pub fn victim_summary(&self) -> Result<VictimSummary, PipelineError> {
        read_json(&self.path("victim/summary.json"))
    }

    pub fn gan_summaries(&self) -> Result<Vec<GanSummary>, PipelineError> {
        read_json(&self.path("bigan/summary.json"))
    }

    pub fn craft_summaries(&self) -> Result<Vec<CraftSummary>, PipelineError> {
        read_json(&self.path("craft/summary.json"))
    }

    pub fn results(&self) -> Result<Vec<AttackResult>, PipelineError> {
        self.cfg
            .attacks
            .iter()
            .map(|a| Ok(AttackResult::load(&self.path(&format!("results/{a}.json")))?))
            .collect()
    }

    pub fn cost_ledger(&self) -> Result<CostLedger, PipelineError> {
        Ok(CostLedger::load(&self.path("cost_ledger.csv"))?)
    }

    pub fn stamp(&self, stage: Stage) -> Result<Option<StageStamp>, PipelineError> {
        self.load_stamp(stage)
    }

    fn eval_data(&mut self) -> Result<(Vec<SampleId>, Array2<F>, Vec<usize>), PipelineError> {
        let ids = self.eval_split()?.ids();
        let b = self.bundle()?;
        Ok((ids.clone(), b.images::<F>(&ids)?, b.labels(&ids)?))
    }

    fn stage_data(&mut self) -> Result<(Vec<String>, Vec<StageCost>), PipelineError> {
        let cap = self.cfg.eval.cap;
        let seed = self.cfg.eval.seed;
        let b = self.bundle()?;
        let split = EvalSplit::balanced(&b.splits.victim_train, &b.splits.test, cap, seed)?;
        let manifest = b.manifest.clone();
        write_json(&self.path("data/manifest.json"), &manifest)?;
        split.save(&self.path("data/eval_split.json"))?;
        Ok((vec!["data/manifest.json".into(), "data/eval_split.json".into()], Vec::new()))
    }

    fn stage_victim(&mut self) -> Result<(Vec<String>, Vec<StageCost>), PipelineError> {
        let spec = self.spec()?;
        let cfg = self.cfg.victim.clone();
        let b = self.bundle()?;
        let x = b.images::<F>(&b.splits.victim_train)?;
        let y = b.labels(&b.splits.victim_train)?;
        let tx = b.images::<F>(&b.splits.test)?;
        let ty = b.labels(&b.splits.test)?;
        let t0 = Instant::now();
        let trained = train_classifier(build_classifier::<F>(&spec, cfg.seed), Labeled::new(&x, &y), &cfg, Some(Labeled::new(&tx, &ty)))?;
        let seconds = t0.elapsed().as_secs_f64();
        let losses = victim_losses(&trained.model, &x, &y)?;
        let summary = VictimSummary {
            train_acc: trained.model.accuracy(&x, &y)?,
            test_acc: trained.model.accuracy(&tx, &ty)?,
            avg_train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            epochs: cfg.epochs,
            seconds,
        };
        log::info!("victim: train acc {:.4}, test acc {:.4}", summary.train_acc, summary.test_acc);
        trained.save(&self.path("victim/victim.ckpt"))?;
        trained.write_history(&self.path("victim/history.csv"))?;
        write_json(&self.path("victim/summary.json"), &summary)?;
        Ok((
            vec!["victim/victim.ckpt".into(), "victim/history.csv".into(), "victim/summary.json".into()],
            Vec::new(),
        ))
    }

    fn pool_options(&self, salt: u64) -> PoolOptions {
        PoolOptions { workers: self.cfg.workers, seed: self.cfg.shadow_training.seed ^ salt }
    }

    fn stage_shadows(&mut self) -> Result<(Vec<String>, Vec<StageCost>), PipelineError> {
        let spec = self.spec()?;
        let (count, fraction) = (self.cfg.attack.shadow_count, self.cfg.attack.shadow_fraction);
        let cfg = self.cfg.shadow_training.clone();
        let opts = self.pool_options(0x5a);
        let (eval_ids, ex, ey) = self.eval_data()?;
        let b = self.bundle()?;
        let t0 = Instant::now();
        let pool = train_shadow_pool::<F>(b, &spec, count, fraction, &cfg, opts)?;
        let seconds = t0.elapsed().as_secs_f64();
        let attacker = b.splits.attacker.clone();
        let ax = b.images::<F>(&attacker)?;
        let ay = b.labels(&attacker)?;
        query_shadows(&pool, &attacker, &ax, &ay)?.save_csv(&self.path("shadows/attacker_outputs.csv"))?;
        query_shadows(&pool, &eval_ids, &ex, &ey)?.save_csv(&self.path("shadows/eval_outputs.csv"))?;
        pool.manifest.save(&self.path("shadows/manifest.json"))?;
        pool.save_checkpoints(&self.path("shadows/models"))?;
        let costs = POOL_USERS
            .iter()
            .map(|&attack| StageCost {
                attack,
                phase: CostPhase::OneTime,
                models: count,
                seconds,
                targets: 0,
                note: "resampled shadow pool".into(),
            })
            .collect();
        Ok((
            vec!["shadows/attacker_outputs.csv".into(), "shadows/eval_outputs.csv".into(), "shadows/manifest.json".into()],
            costs,
        ))
    }

    fn stage_in_models(&mut self) -> Result<(Vec<String>, Vec<StageCost>), PipelineError> {
        let spec = self.spec()?;
        let (count, fraction) = (self.cfg.attack.in_models, self.cfg.attack.in_fraction);
        let cfg = self.cfg.shadow_training.clone();
        let opts = self.pool_options(0x1b);
        let (eval_ids, ex, ey) = self.eval_data()?;
        let b = self.bundle()?;
        let t0 = Instant::now();
        let pool = train_per_target_in_models::<F>(b, &spec, &eval_ids, count, fraction, &cfg, opts)?;
        let seconds = t0.elapsed().as_secs_f64();
        query_shadows(&pool, &eval_ids, &ex, &ey)?.save_csv(&self.path("in_models/eval_outputs.csv"))?;
        pool.manifest.save(&self.path("in_models/manifest.json"))?;
        let cost = StageCost {
            attack: AttackKind::Sablayrolles,
            phase: CostPhase::PerTarget,
            models: count,
            seconds,
            targets: eval_ids.len(),
            note: "IN models for one fresh target batch".into(),
        };
        Ok((vec!["in_models/eval_outputs.csv".into(), "in_models/manifest.json".into()], vec![cost]))
    }

    fn victim_encoder(&self) -> Result<Sequential<F>, PipelineError> {
        Ok(self.victim()?.model.into_encoder())
    }

    fn gan_config(&self, mode: GanMode) -> BiGanConfig {
        let salt = if mode == GanMode::BlackBox { 0xb1 } else { 0 };
        BiGanConfig { mode, seed: self.cfg.bigan.seed ^ salt, ..self.cfg.bigan.clone() }
    }

    fn gan_path(&self, mode: GanMode) -> PathBuf {
        self.path(match mode {
            GanMode::WhiteBox => "bigan/white_box.ckpt",
            GanMode::BlackBox => "bigan/black_box.ckpt",
        })
    }

    /// Architecture template for a black-box encoder.
    fn encoder_template(&self) -> Result<Sequential<F>, PipelineError> {
        Ok(build_classifier::<F>(&self.spec()?, self.cfg.bigan.seed ^ 0xe7).into_encoder())
    }

    fn stage_bigan(&mut self) -> Result<(Vec<String>, Vec<StageCost>), PipelineError> {
        let spec = self.spec()?;
        let victim_enc = self.victim_encoder()?;
        let mut files = Vec::new();
        let mut costs = Vec::new();
        let mut summaries = Vec::new();
        for mode in self.gan_modes() {
            let cfg = self.gan_config(mode);
            let source = match mode {
                GanMode::WhiteBox => EncoderSource::Frozen(&victim_enc),
                GanMode::BlackBox => EncoderSource::Trainable(self.encoder_template()?),
            };
            let b = self.bundle()?;
            let t0 = Instant::now();
            let g = train_bigan::<F>(b, &spec, source, &cfg)?;
            let seconds = t0.elapsed().as_secs_f64();
            let path = self.gan_path(mode);
            g.save(&path)?;
            let tag = if mode == GanMode::WhiteBox { "white_box" } else { "black_box" };
            g.write_diagnostics(&self.path(&format!("bigan/{tag}_diagnostics.csv")))?;
            files.push(format!("bigan/{tag}.ckpt"));
            if mode == GanMode::BlackBox {
                files.push(format!("bigan/{tag}.ckpt.encoder"));
            }
            summaries.push(GanSummary {
                mode,
                epochs: g.history.len(),
                stopped_at: g.stopped_at,
                first_diagnostic: g.history.first().map_or(f64::NAN, |h| h.diagnostic),
                last_diagnostic: g.history.last().map_or(f64::NAN, |h| h.diagnostic),
                seconds,
            });
            costs.push(StageCost {
                attack: if mode == GanMode::WhiteBox { AttackKind::Ours } else { AttackKind::OursBlackBox },
                phase: CostPhase::OneTime,
                models: 1,
                seconds,
                targets: 0,
                note: format!("{tag} BiGAN"),
            });
        }
        write_json(&self.path("bigan/summary.json"), &summaries)?;
        files.push("bigan/summary.json".into());
        Ok((files, costs))
    }

    fn noise(&self) -> Result<NoiseSpec, PipelineError> {
        let a = &self.cfg.attack;
        Ok(NoiseSpec::new(a.noise_sigma, a.subpop_draws, a.seed ^ 0x401)?)
    }

    fn natural_store(&mut self, encoder: &Sequential<F>) -> Result<LatentStore, PipelineError> {
        let with_extra = self.cfg.natural_pool == NaturalPool::AttackerAndExtra;
        let b = self.bundle()?;
        let mut ids = b.splits.attacker.clone();
        if with_extra {
            ids.extend(b.extra_ids());
        }
        // encoded in chunks so large pools never materialize as one image matrix
        let mut parts = Vec::new();
        for chunk in ids.chunks(4096) {
            let x = b.images::<F>(chunk)?;
            parts.push(infer_chunked(encoder, &x).mapv(|v| v as f64));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let latents = ndarray::concatenate(Axis(0), &views).map_err(|e| PipelineError::Artifact {
            path: self.out.clone(),
            reason: e.to_string(),
        })?;
        Ok(LatentStore { ids, latents, encoder_checksum: encoder.checksum() })
    }

    fn stage_craft(&mut self) -> Result<(Vec<String>, Vec<StageCost>), PipelineError> {
        let victim_enc = self.victim_encoder()?;
        let (ids, x, y) = self.eval_data()?;
        let noise = self.noise()?;
        let mut files = Vec::new();
        let mut costs = Vec::new();
        let mut summaries = Vec::new();
        let kinds: Vec<AttackKind> = SUBPOP.into_iter().filter(|k| self.cfg.wants(*k)).collect();
        for kind in kinds {
            let t0 = Instant::now();
            let sets: Vec<SubpopulationSet<F>> = match kind {
                AttackKind::Ours | AttackKind::OursBlackBox => {
                    let mode = if kind == AttackKind::Ours { GanMode::WhiteBox } else { GanMode::BlackBox };
                    let g = SubpopGenerator::<F>::load(&self.gan_path(mode), &self.encoder_template()?)?;
                    let enc = g.encoder(&victim_enc);
                    g.crafter(enc)?.craft_batch(&ids, &x, &y, &noise)?
                }
                _ => {
                    let store = self.natural_store(&victim_enc)?;
                    let latents = infer_chunked(&victim_enc, &x).mapv(|v| v as f64);
                    let (k, metric) = (self.cfg.attack.subpop_k, self.cfg.attack.metric);
                    let b = self.bundle()?;
                    ids.iter()
                        .enumerate()
                        .map(|(i, &t)| {
                            let l = latents.row(i).to_vec();
                            natural_subpopulation::<F>(&store, b, t, &l, y[i], k, metric, true)
                        })
                        .collect::<Result<_, _>>()?
                }
            };
            let seconds = t0.elapsed().as_secs_f64();
            if kind == AttackKind::OursNatural {
                costs.push(StageCost {
                    attack: kind,
                    phase: CostPhase::OneTime,
                    models: 0,
                    seconds,
                    targets: 0,
                    note: "latent store of the natural pool".into(),
                });
            }
            let sims: Vec<f64> = sets.iter().map(|s| s.mean_similarity()).collect();
            summaries.push(CraftSummary {
                attack: kind,
                targets: sets.len(),
                mean_similarity: sims.iter().sum::<f64>() / sims.len().max(1) as f64,
                fraction_above_0_8: sims.iter().filter(|&&s| s >= 0.8).count() as f64 / sims.len().max(1) as f64,
            });
            let rel = format!("craft/{kind}.bin");
            save_subpopulations(&sets, &self.path(&rel))?;
            files.push(rel.clone());
            files.push(format!("{rel}.json"));
            let n = sets.len().min(8);
            let shape = self.cfg.dataset.image_shape();
            let pre = self.bundle()?.preprocessing.clone();
            write_grid(&self.path(&format!("craft/{kind}_grid.png")), &x.slice(ndarray::s![..n, ..]).to_owned(), &sets[..n], shape, &pre, 10)?;
        }
        write_json(&self.path("craft/summary.json"), &summaries)?;
        files.push("craft/summary.json".into());
        Ok((files, costs))
    }

    fn stage_attack(&mut self) -> Result<(Vec<String>, Vec<StageCost>), PipelineError> {
        let victim = self.victim()?.model;
        let split = self.eval_split()?;
        let (ids, x, y) = self.eval_data()?;
        let params = self.cfg.attack.clone();
        let classes = self.cfg.dataset.num_classes();
        let mut files = Vec::new();
        let mut save = |name: AttackKind, mut recs: Vec<ScoreRecord>, out: &Path| -> Result<(), PipelineError> {
            label_records(&mut recs, &split);
            let rel = format!("scores/{name}.csv");
            write_records(&recs, &out.join(&rel))?;
            files.push(rel);
            Ok(())
        };
        let out = self.out.clone();
        for &kind in &self.cfg.attacks.clone() {
            log::info!("attack: scoring {kind}");
            match kind {
                AttackKind::Yeom => {
                    let avg = match params.yeom_threshold {
                        ThresholdSource::VictimTrainLoss => self.victim_summary()?.avg_train_loss,
                        ThresholdSource::Fixed(v) => v,
                    };
                    let s = score_yeom(&victim, &ids, &x, &y, avg)?;
                    write_json(&out.join("scores/yeom_threshold.json"), &s.threshold)?;
                    save(kind, s.records, &out)?;
                }
                AttackKind::Shokri => {
                    let o = ShadowOutputs::load_csv(&out.join("shadows/attacker_outputs.csv"))?;
                    let model = ShokriModel::fit(&o, classes, params.seed)?;
                    let acc = model.balanced_accuracy(&o);
                    write_json(&out.join("scores/shokri_model.json"), &json!({ "training_balanced_accuracy": acc, "class_counts": model.class_counts }))?;
                    save(kind, score_shokri(&victim, &model, &ids, &x, &y)?, &out)?;
                }
                AttackKind::Jayaraman => {
                    let mut trials = Vec::new();
                    let mut best: Option<(f64, Vec<ScoreRecord>)> = None;
                    for sigma in sigma_candidates(params.jayaraman_sigma, params.jayaraman_search, params.jayaraman_sigma_range, params.seed) {
                        let recs = score_jayaraman(&victim, &ids, &x, &y, params.jayaraman_t, sigma, params.seed)?;
                        let a = split_auc(&recs, &split)?;
                        log::info!("attack: jayaraman sigma {sigma:.4} auc {a:.4}");
                        trials.push(JayaramanTrial { sigma, auc: a });
                        if best.as_ref().is_none_or(|(b, _)| a > *b) {
                            best = Some((a, recs));
                        }
                    }
                    write_json(&out.join("scores/jayaraman_search.json"), &trials)?;
                    save(kind, best.expect("at least one candidate").1, &out)?;
                }
                AttackKind::Watson => {
                    let o = ShadowOutputs::load_csv(&out.join("shadows/eval_outputs.csv"))?;
                    check_ids(&o, &ids, &out)?;
                    save(kind, score_watson(&victim, &x, &o)?, &out)?;
                }
                AttackKind::Sablayrolles => {
                    let pool = ShadowOutputs::load_csv(&out.join("shadows/eval_outputs.csv"))?;
                    let ins = ShadowOutputs::load_csv(&out.join("in_models/eval_outputs.csv"))?;
                    let merged = pool.merge(&ins)?;
                    check_ids(&merged, &ids, &out)?;
                    save(kind, score_sablayrolles(&victim, &x, &merged)?, &out)?;
                }
                AttackKind::Ours | AttackKind::OursBlackBox | AttackKind::OursNatural => {
                    let sets = load_subpopulations::<F>(&out.join(format!("craft/{kind}.bin")))?;
                    save(kind, score_subpop(kind, &victim, &ids, &x, &y, &sets)?, &out)?;
                }
            }
        }
        if self.cfg.wants(AttackKind::Yeom) {
            files.push("scores/yeom_threshold.json".into());
        }
        if self.cfg.wants(AttackKind::Jayaraman) {
            files.push("scores/jayaraman_search.json".into());
        }
        Ok((files, Vec::new()))
    }

    fn stage_evaluate(&mut self) -> Result<(Vec<String>, Vec<StageCost>), PipelineError> {
        let split = self.eval_split()?;
        let label = RunLabel {
            dataset: self.cfg.dataset.as_str(),
            model: self.cfg.architecture.as_str(),
            seed: self.cfg.seed,
        };
        let mut files = Vec::new();
        let mut results = Vec::new();
        for &kind in &self.cfg.attacks {
            let recs = read_records(&self.path(&format!("scores/{kind}.csv")))?;
            let threshold = if kind == AttackKind::Yeom {
                Some(read_json::<f64>(&self.path("scores/yeom_threshold.json"))?)
            } else {
                None
            };
            let r = evaluate_attack(&recs, &split, &label, threshold)?;
            log::info!("evaluate: {kind} auc {:.4}", r.auc);
            let rel = format!("results/{kind}.json");
            r.save(&self.path(&rel))?;
            files.push(rel);
            results.push(r);
        }
        let v = self.victim_summary()?;
        let victims = [VictimRow {
            dataset: label.dataset.to_string(),
            model: label.model.to_string(),
            train_acc: v.train_acc,
            test_acc: v.test_acc,
        }];
        make_report(&results, &victims, &self.out)?;
        files.extend(["results.md".to_string(), "results.csv".to_string()]);

        let mut ledger = CostLedger::new(CostLedger::local_host());
        for stage in Stage::ALL {
            if let Some(stamp) = self.load_stamp(stage)?.filter(|_| self.required(stage)) {
                for c in stamp.costs.iter().filter(|c| self.cfg.wants(c.attack)) {
                    ledger.record(c.attack, c.phase, c.models, c.seconds, c.targets, &c.note);
                }
            }
        }
        ledger.save(&self.path("cost_ledger.csv"))?;
        let report = cost_report(&ledger, &self.cfg.attacks);
        let violations = report.structural_violations();
        for v in &violations {
            log::warn!("cost structure: {v}");
        }
        let mut md = report.to_markdown();
        if !violations.is_empty() {
            md.push_str(&format!("\nStructural violations:\n\n- {}\n", violations.join("\n- ")));
        }
        std::fs::write(self.path("cost_report.md"), md).map_err(io_err(&self.path("cost_report.md")))?;
        files.extend(["cost_ledger.csv".to_string(), "cost_report.md".to_string()]);
        Ok((files, Vec::new()))
    }
}

fn split_auc(records: &[ScoreRecord], split: &EvalSplit) -> Result<f64, PipelineError> {
    let m = finals_for(records, &split.members);
    let n = finals_for(records, &split.nonmembers);
    match (m, n) {
        (Some(m), Some(n)) => Ok(auc(&m, &n)?),
        _ => Err(PipelineError::Artifact { path: PathBuf::from("scores"), reason: "records miss eval ids".into() }),
    }
}

fn check_ids(o: &ShadowOutputs, ids: &[SampleId], out: &Path) -> Result<(), PipelineError> {
    if o.ids != ids {
        return Err(PipelineError::Artifact {
            path: out.to_path_buf(),
            reason: "shadow outputs do not cover the evaluation split in order".into(),
        });
    }
    Ok(())
}
