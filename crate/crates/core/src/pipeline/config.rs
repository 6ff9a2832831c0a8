//! Experiment configuration, presets and profiles.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::attacks::{AttackConfig, AttackKind};
use crate::data::{DatasetName, SplitConfig};
use crate::models::{Architecture, TrainConfig};
use crate::subpop_gan::BiGanConfig;

/// Environment variable overriding `data_root`.
pub const DATA_ROOT_ENV: &str = "MIA_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Capped splits and shortened schedules for a single CPU.
    Small,
    /// Paper-scale settings.
    Full,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Small => "small",
            Profile::Full => "full",
        })
    }
}

impl FromStr for Profile {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(Profile::Small),
            "full" => Ok(Profile::Full),
            _ => Err(PipelineError::Config(format!("unknown profile `{s}` (expected small or full)"))),
        }
    }
}

/// Where natural subpopulations are searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaturalPool {
    Attacker,
    /// Attacker split plus the benchmark's extra partition when present.
    AttackerAndExtra,
}

/// Prototype-noise images in place of benchmark files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Per-side cap of the balanced evaluation split.
    pub cap: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetName,
    pub architecture: Architecture,
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    pub workers: usize,
    pub attacks: Vec<AttackKind>,
    pub natural_pool: NaturalPool,
    pub split: SplitConfig,
    pub victim: TrainConfig,
    pub shadow_training: TrainConfig,
    pub attack: AttackConfig,
    pub bigan: BiGanConfig,
    pub eval: EvalSettings,
}

/// Names of the shipped presets, one per results-table column.
pub const PRESETS: [&str; 7] = [
    "mnist-mlp",
    "fmnist-mlp",
    "svhn-lenet",
    "cifar10-lenet",
    "cifar100-lenet",
    "cifar10-resnet20",
    "cifar100-resnet20",
];

const STANDARD_ATTACKS: [AttackKind; 7] = [
    AttackKind::Yeom,
    AttackKind::Shokri,
    AttackKind::Jayaraman,
    AttackKind::Watson,
    AttackKind::Sablayrolles,
    AttackKind::Ours,
    AttackKind::OursBlackBox,
];

pub fn preset(name: &str, profile: Profile) -> Result<ExperimentConfig, PipelineError> {
    let (dataset, architecture) = match name {
        "mnist-mlp" => (DatasetName::Mnist, Architecture::Mlp5),
        "fmnist-mlp" => (DatasetName::Fmnist, Architecture::Mlp5),
        "svhn-lenet" => (DatasetName::Svhn, Architecture::Lenet),
        "cifar10-lenet" => (DatasetName::Cifar10, Architecture::Lenet),
        "cifar100-lenet" => (DatasetName::Cifar100, Architecture::Lenet),
        "cifar10-resnet20" => (DatasetName::Cifar10, Architecture::Resnet20),
        "cifar100-resnet20" => (DatasetName::Cifar100, Architecture::Resnet20),
        other => {
            return Err(PipelineError::Config(format!(
                "unknown preset `{other}`; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    let mut attacks = STANDARD_ATTACKS.to_vec();
    if dataset == DatasetName::Svhn {
        attacks.push(AttackKind::OursNatural);
    }
    let grayscale = matches!(dataset, DatasetName::Mnist | DatasetName::Fmnist);
    let attack = AttackConfig { noise_sigma: if grayscale { 0.05 } else { 0.5 }, ..AttackConfig::default() };
    let mut cfg = ExperimentConfig {
        name: name.to_string(),
        dataset,
        architecture,
        profile,
        seed: 0,
        output_dir: PathBuf::from(format!("runs/{name}-{profile}")),
        data_root: PathBuf::from("data"),
        synthetic: None,
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        attacks,
        natural_pool: NaturalPool::AttackerAndExtra,
        split: SplitConfig::default(),
        victim: TrainConfig::default(),
        shadow_training: TrainConfig::default(),
        attack,
        bigan: BiGanConfig::default(),
        eval: EvalSettings { cap: 5000, seed: 0 },
    };
    if profile == Profile::Small {
        cfg.split.cap = Some(5000);
        cfg.victim = cfg.victim.with_epochs(30);
        cfg.shadow_training = cfg.shadow_training.with_epochs(30);
        cfg.eval.cap = 500;
        cfg.bigan.max_epochs = 60;
    }
    cfg.set_seed(0);
    Ok(cfg)
}

impl ExperimentConfig {
    /// Derives every stage seed from `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        let derive = |k: u64| seed.wrapping_mul(1_000_003).wrapping_add(k);
        self.seed = seed;
        self.split.seed = derive(1);
        self.victim.seed = derive(2);
        self.shadow_training.seed = derive(3);
        self.bigan.seed = derive(4);
        self.attack.seed = derive(5);
        self.eval.seed = derive(6);
    }

    pub fn wants(&self, attack: AttackKind) -> bool {
        self.attacks.contains(&attack)
    }

    pub fn wants_any(&self, attacks: &[AttackKind]) -> bool {
        attacks.iter().any(|a| self.wants(*a))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.attacks.is_empty() {
            return bad("attack list is empty".into());
        }
        if !(self.split.victim_fraction > 0.0 && self.split.victim_fraction < 1.0) {
            return bad(format!("split.victim_fraction {} must lie in (0, 1)", self.split.victim_fraction));
        }
        if self.eval.cap == 0 {
            return bad("eval.cap must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if let Some(s) = &self.synthetic {
            if s.n_train < 4 || s.n_test == 0 {
                return bad("synthetic data needs n_train ≥ 4 and n_test ≥ 1".into());
            }
        }
        let cfg_err = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.victim.validate().map_err(|e| cfg_err(&e))?;
        self.shadow_training.validate().map_err(|e| cfg_err(&e))?;
        self.attack.validate().map_err(|e| cfg_err(&e))?;
        self.bigan.validate().map_err(|e| cfg_err(&e))?;
        crate::models::ClassifierSpec::new(self.architecture, self.dataset.image_shape(), self.dataset.num_classes())
            .map_err(|e| cfg_err(&e))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the data-root environment override.
    pub fn resolved_data_root(&self) -> PathBuf {
        std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.data_root.clone())
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a config document. A `preset` key starts from that preset (at the
/// document's or `profile_override`'s profile) and overlays the remaining
/// keys; without it the document must be complete.
pub fn parse_config(text: &str, profile_override: Option<Profile>) -> Result<ExperimentConfig, PipelineError> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
    let profile = match (profile_override, doc.get("profile")) {
        (Some(p), _) => Some(p),
        (None, Some(v)) => Some(
            v.as_str()
                .ok_or_else(|| PipelineError::Config("profile must be a string".into()))?
                .parse()?,
        ),
        (None, None) => None,
    };
    if let Some(p) = profile {
        doc.insert("profile".into(), toml::Value::String(p.to_string()));
    }
    let seed = doc.get("seed").and_then(|v| v.as_integer());
    let cfg: ExperimentConfig = match doc.remove("preset") {
        Some(name) => {
            let name = name.as_str().ok_or_else(|| PipelineError::Config("preset must be a string".into()))?;
            let base_cfg = preset(name, profile.unwrap_or(Profile::Small))?;
            let mut base = toml::Value::try_from(&base_cfg).expect("config serializes");
            // an explicit top-level seed re-derives the stage seeds before overlays
            if let Some(s) = seed {
                let mut seeded = base_cfg.clone();
                seeded.set_seed(s as u64);
                base = toml::Value::try_from(&seeded).expect("config serializes");
            }
            merge(&mut base, toml::Value::Table(doc));
            base.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?
        }
        None => toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `source` as a file, or as a preset name when no such file exists.
pub fn load_config(source: &str, profile_override: Option<Profile>) -> Result<ExperimentConfig, PipelineError> {
    let path = Path::new(source);
    if path.exists() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        parse_config(&text, profile_override)
    } else if PRESETS.contains(&source) {
        parse_config(&format!("preset = \"{source}\""), profile_override)
    } else {
        Err(PipelineError::Config(format!("no config file or preset named `{source}`")))
    }
}
