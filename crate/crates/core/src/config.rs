//! Model, training and evaluation settings.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::EpisodeShape;
use crate::distances::{DistanceWeights, SeqDisConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionStrategy, GateSource, SfOptions};
use crate::hsmr::ConsistencyTarget;
use crate::spm::ConstraintMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Standard deviation of the initial weights.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { depth: 1, heads: 8, ffn_mult: 4, init_std: 0.02 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub hsmr: bool,
    pub spm: bool,
    pub padm: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self { hsmr: true, spm: true, padm: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Episodes whose gradients are averaged into one step.
    pub accumulation: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-5, accumulation: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { init: 0, train: 1, eval: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per video.
    pub frames: usize,
    /// Embedding width.
    pub channels: usize,
    /// Prompt templates per class.
    pub templates: usize,
    pub episode: EpisodeShape,
    pub encoder: EncoderConfig,
    pub mfe_reduction: usize,
    pub pg_depth: usize,
    pub seq_dis: SeqDisConfig,
    pub distance: DistanceWeights,
    /// Weight of the motion consistency loss.
    pub lambda3: f64,
    /// Weight of the prompt consistency loss.
    pub lambda4: f64,
    pub components: Components,
    pub fusion: SfOptions,
    pub constraint: ConstraintMode,
    pub hsmr_target: ConsistencyTarget,
    pub transductive: bool,
    /// Parameter-free layer normalization of features right before every
    /// sequence distance.
    pub distance_norm: bool,
    pub optimizer: OptimConfig,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub seeds: Seeds,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 512,
            templates: 16,
            episode: EpisodeShape::default(),
            encoder: EncoderConfig::default(),
            mfe_reduction: 4,
            pg_depth: 2,
            seq_dis: SeqDisConfig::default(),
            distance: DistanceWeights::default(),
            lambda3: 0.001,
            lambda4: 0.001,
            components: Components::default(),
            fusion: SfOptions { strategy: FusionStrategy::ConcatSumGate, gate_source: GateSource::Encoded },
            constraint: ConstraintMode::Both,
            hsmr_target: ConsistencyTarget::PostFusion,
            transductive: true,
            distance_norm: true,
            optimizer: OptimConfig::default(),
            train_episodes: 2000,
            eval_episodes: 500,
            seeds: Seeds::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 2 {
            return bad(format!("frames = {} but at least 2 are needed", self.frames));
        }
        if self.channels == 0 || self.templates == 0 {
            return bad("channels and templates must be positive".into());
        }
        let e = &self.episode;
        if e.way == 0 || e.shot == 0 || e.queries == 0 {
            return bad(format!("episode.way/shot/queries must be positive, got {}/{}/{}", e.way, e.shot, e.queries));
        }
        if self.encoder.depth == 0 || self.encoder.ffn_mult == 0 {
            return bad("encoder.depth and encoder.ffn_mult must be positive".into());
        }
        if self.encoder.heads == 0 || self.channels % self.encoder.heads != 0 {
            return bad(format!("encoder.heads = {} must divide channels = {}", self.encoder.heads, self.channels));
        }
        if self.mfe_reduction == 0 || self.channels % self.mfe_reduction != 0 {
            return bad(format!("mfe_reduction = {} must divide channels = {}", self.mfe_reduction, self.channels));
        }
        if self.pg_depth == 0 {
            return bad("pg_depth must be positive".into());
        }
        if !(self.seq_dis.gamma > 0.0 && self.seq_dis.gamma.is_finite()) {
            return bad(format!("seq_dis.gamma must be positive, got {}", self.seq_dis.gamma));
        }
        for (k, v) in [
            ("distance.lambda1", self.distance.lambda1),
            ("distance.lambda2", self.distance.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("optimizer.weight_decay", self.optimizer.weight_decay),
            ("encoder.init_std", self.encoder.init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be finite and non-negative, got {v}"));
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optimizer needs lr > 0, eps > 0 and betas in [0, 1)".into());
        }
        if o.accumulation == 0 {
            return bad("optimizer.accumulation must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets a dotted key such as `optimizer.lr` or `components.hsmr`. The
    /// value is read as JSON, falling back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let cfg: Self =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }
}
