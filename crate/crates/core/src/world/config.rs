//! TOML world configuration: dimensions, architecture, pool strategy, gate
//! defaults, sampler defaults, and vocabulary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSite;
use crate::error::{Error, Result};
use crate::generator::ArchConfig;
use crate::subspace::BasisStrategy;
use crate::trainer::{GateConfig, TrainingConfig};

/// Snapshot payload precision. f64 replays a world exactly; f32 halves the
/// payload at the cost of quantizing trained parameters on save.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub seed: u64,
    pub precision: Precision,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self { seed: 7, precision: Precision::F64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimsSection {
    pub d: usize,
    pub r: usize,
    pub r1: usize,
}

impl Default for DimsSection {
    fn default() -> Self {
        Self { d: 32, r: 8, r1: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub blocks: usize,
    pub d_text: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub timesteps: usize,
    pub upscale: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchConfig::default();
        Self {
            blocks: a.blocks,
            d_text: a.d_text,
            grid_h: a.grid_h,
            grid_w: a.grid_w,
            timesteps: a.timesteps,
            upscale: a.upscale,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub strategy: BasisStrategy,
    /// One pool per layer instead of one shared pool per layer width.
    pub per_layer: bool,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self { strategy: BasisStrategy::Sequential, per_layer: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSection {
    pub sites: Vec<AdapterSite>,
}

impl Default for PlacementSection {
    fn default() -> Self {
        Self { sites: AdapterSite::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_embed: f64,
    pub lr_adapter: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { lr_embed: 1e-3, lr_adapter: 5e-4, steps: 200, batch_size: 2, samples: 8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    pub k: usize,
    pub tau: f64,
    pub max_attempts: usize,
    pub f_min: f64,
    pub eval_steps: usize,
}

impl Default for GateSection {
    fn default() -> Self {
        Self { k: 5, tau: 3.0, max_attempts: 5, f_min: 0.05, eval_steps: 12 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub t_theta: usize,
    pub steps: usize,
    pub sigma_max: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { t_theta: 700, steps: 30, sigma_max: 0.4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub words: Vec<String>,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { words: default_vocab_words() }
    }
}

/// Words the default world understands; covers the synthetic dataset
/// prompts and the mock judge's evaluation templates.
pub fn default_vocab_words() -> Vec<String> {
    [
        "a", "the", "in", "on", "by", "under", "beside", "at", "near", "snow", "snowy",
        "quiet", "tall", "busy", "old", "bright", "forest", "sea", "trees", "campfire",
        "mountain", "trail", "market", "castle", "river", "meadow", "lantern", "stars",
        "rain", "bridge", "garden", "tower", "harbor", "shore", "woods", "valley",
        "storm", "sunset", "night", "morning", "dusk", "scene", "standing", "walking",
        "resting",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// Narrative events; stored as story metadata, not consumed by the engine.
    pub events: Vec<String>,
    /// Static attribute strings per character id.
    pub attributes: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub world: WorldSection,
    pub dims: DimsSection,
    pub arch: ArchSection,
    pub pool: PoolSection,
    pub placement: PlacementSection,
    pub train: TrainSection,
    pub gate: GateSection,
    pub sampler: SamplerSection,
    pub vocab: VocabSection,
    pub graph: GraphSection,
}

impl WorldConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: WorldConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let DimsSection { d, r, r1 } = self.dims;
        if d < 1 || r < 1 || r1 < 1 {
            return Err(Error::Config("dims.d, dims.r, dims.r1 must all be >= 1".into()));
        }
        if r1 > d {
            return Err(Error::Config(format!("dims.r1 ({r1}) must be <= dims.d ({d})")));
        }
        self.arch_config().validate()?;
        if self.placement.sites.is_empty() {
            return Err(Error::Config("placement.sites must not be empty".into()));
        }
        if self.train.lr_embed <= 0.0 || self.train.lr_adapter <= 0.0 {
            return Err(Error::Config("train learning rates must be > 0".into()));
        }
        if self.train.steps < 1 || self.train.batch_size < 1 || self.train.samples < 1 {
            return Err(Error::Config(
                "train.steps, train.batch_size, train.samples must be >= 1".into(),
            ));
        }
        let g = &self.gate;
        if g.k < 1 {
            return Err(Error::Config("gate.k must be >= 1".into()));
        }
        if !(0.0..=4.0).contains(&g.tau) {
            return Err(Error::Config("gate.tau must be within [0, 4]".into()));
        }
        if g.max_attempts < 1 {
            return Err(Error::Config("gate.max_attempts must be >= 1".into()));
        }
        if !(g.f_min > 0.0 && g.f_min <= 1.0) {
            return Err(Error::Config("gate.f_min must be in (0, 1]".into()));
        }
        if g.eval_steps < 1 {
            return Err(Error::Config("gate.eval_steps must be >= 1".into()));
        }
        let s = &self.sampler;
        if s.steps < 1 {
            return Err(Error::Config("sampler.steps must be >= 1".into()));
        }
        if s.t_theta > self.arch.timesteps {
            return Err(Error::Config(format!(
                "sampler.t_theta ({}) must be <= arch.timesteps ({})",
                s.t_theta, self.arch.timesteps
            )));
        }
        if s.sigma_max <= 0.0 {
            return Err(Error::Config("sampler.sigma_max must be > 0".into()));
        }
        Ok(())
    }

    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig {
            blocks: self.arch.blocks,
            d: self.dims.d,
            d_text: self.arch.d_text,
            grid_h: self.arch.grid_h,
            grid_w: self.arch.grid_w,
            timesteps: self.arch.timesteps,
            upscale: self.arch.upscale,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            lr_embed: self.train.lr_embed,
            lr_adapter: self.train.lr_adapter,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            ..TrainingConfig::default()
        }
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            gate_k: self.gate.k,
            tau: self.gate.tau,
            max_attempts: self.gate.max_attempts,
            f_min: self.gate.f_min,
            eval_steps: self.gate.eval_steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = WorldConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = WorldConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn r1_larger_than_d_rejected() {
        let mut cfg = WorldConfig::default();
        cfg.dims.r1 = cfg.dims.d + 1;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("r1"));
    }

    #[test]
    fn malformed_toml_reports_position() {
        let err = WorldConfig::from_toml_str("[dims]\nd = \"many\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line") || msg.contains("invalid"), "{msg}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = WorldConfig::from_toml_str("[dims]\nbogus = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn t_theta_bounded_by_timesteps() {
        let mut cfg = WorldConfig::default();
        cfg.sampler.t_theta = cfg.arch.timesteps + 1;
        assert!(cfg.validate().is_err());
    }
}
