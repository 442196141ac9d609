//! Declarative run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{SimAugConfig, StAugConfig};
use crate::data::{synth_domain_pair, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{EmaConfig, ModelConfig};
use crate::optim::OptimConfig;
use crate::schedule::ScheduleConfig;

/// Where the two domains come from: manifest files, or an in-memory
/// synthetic pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Labeled manifest for evaluation; defaults to the target test split.
    pub eval: Option<PathBuf>,
    pub synthetic: Option<SynthConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub st: StAugConfig,
    pub sim: SimAugConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    /// Confidence threshold of the pseudo-label quality.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 1.0, gamma: 1.0, tau: 0.999 }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { beta: self.beta, gamma: self.gamma }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Refresh the `latest` checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, batch_source: 6, batch_target: 6, eval_every: 0, checkpoint_every: 0, eval_batch: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub run: RunConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            location: "config".into(),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a TOML file; relative manifest paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            reason: e.message().to_string(),
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative manifest paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.source, &mut self.data.target, &mut self.data.eval].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.synthetic, &d.source, &d.target) {
            (Some(s), None, None) => s.validate()?,
            (None, Some(_), Some(_)) => {}
            (Some(_), _, _) => return Err(Error::Config("data: give either synthetic or source/target manifests".into())),
            _ => return Err(Error::Config("data: both source and target manifests are required".into())),
        }
        self.model.validate()?;
        self.augment.st.validate()?;
        self.augment.sim.validate()?;
        self.loss.weights().validate()?;
        if !(self.loss.tau > 0.0 && self.loss.tau < 1.0) {
            return Err(Error::Config(format!("loss.tau must lie in (0, 1), got {}", self.loss.tau)));
        }
        self.optim.validate()?;
        self.schedule.validate()?;
        if self.run.batch_source == 0 || self.run.batch_target == 0 || self.run.eval_batch == 0 {
            return Err(Error::Config("run: batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn ema(&self) -> EmaConfig {
        EmaConfig { alpha: self.optim.ema_alpha }
    }

    /// Short digest identifying the run; resuming requires a match.
    pub fn hash(&self) -> String {
        digest(self)
    }
}

/// First 8 bytes of the SHA-256 of the JSON encoding, as hex.
pub fn digest<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_string(value).expect("value serializes");
    Sha256::digest(json.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Training and evaluation datasets of one run.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source: Dataset,
    pub target: Dataset,
    pub eval: Option<Dataset>,
}

pub fn resolve_datasets(cfg: &DataConfig) -> Result<Datasets> {
    if let Some(s) = &cfg.synthetic {
        let (src, tgt) = synth_domain_pair(s)?;
        let eval = match &cfg.eval {
            Some(p) => Some(Dataset::open(p)?),
            None => Some(tgt.dataset().split(Split::Test)),
        };
        return Ok(Datasets {
            source: src.dataset().split(Split::Train),
            target: tgt.dataset().split(Split::Train),
            eval: eval.filter(|d| !d.is_empty()),
        });
    }
    let (Some(sp), Some(tp)) = (&cfg.source, &cfg.target) else {
        return Err(Error::Config("data: both source and target manifests are required".into()));
    };
    let source = Dataset::open(sp)?;
    let target = Dataset::open(tp)?;
    if source.manifest.shape != target.manifest.shape {
        return Err(Error::Shape(format!(
            "source shape {:?} differs from target shape {:?}",
            source.manifest.shape, target.manifest.shape
        )));
    }
    let eval = match &cfg.eval {
        Some(p) => Some(Dataset::open(p)?),
        None => Some(target.split(Split::Test)),
    };
    Ok(Datasets {
        source: source.split(Split::Train),
        target: target.split(Split::Train),
        eval: eval.filter(|d| !d.is_empty()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> TrainConfig {
        TrainConfig {
            data: DataConfig { synthetic: Some(SynthConfig::default()), ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn defaults_follow_the_published_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.schedule.total_iters, 40_000);
        assert_eq!(c.schedule.warmup_iters, 1500);
        assert_eq!((c.run.batch_source, c.run.batch_target), (6, 6));
        assert_eq!(c.optim.lr_backbone, 6e-4);
        assert_eq!(c.optim.lr_heads, 6e-5);
        assert_eq!(c.optim.betas, [0.9, 0.999]);
        assert_eq!(c.optim.weight_decay, 0.01);
        assert_eq!(c.optim.ema_alpha, 0.99);
        assert_eq!(c.loss.tau, 0.999);
    }

    #[test]
    fn toml_round_trip() {
        let c = synthetic();
        let text = c.to_toml_string().unwrap();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml_str("[data.synthetic]\n[optim]\nlr_bakbone = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("lr_bakbone"), "{err}");
    }

    #[test]
    fn data_sources_are_exclusive() {
        let mut c = synthetic();
        c.data.source = Some("a".into());
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_err());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = synthetic();
        let mut b = a.clone();
        b.loss.gamma = 0.0;
        assert_ne!(a.hash(), b.hash());
    }
}
