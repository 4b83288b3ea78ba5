use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserTrainConfig, SamplingConfig};
use crate::error::{Error, Result};
use crate::tpe::{EnvConfig, PpoConfig};
use crate::toyworld::WorldConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Extract everything, then transmit, then denoise.
    Conventional,
    /// Parallel pipeline with a uniformly random valid transmission order.
    PgscRandom,
    /// Parallel pipeline with the learned order.
    TpePgsc,
    /// Random order plus the semantic-difference correction.
    ScdPgsc,
    /// Learned order plus the semantic-difference correction.
    FastGsc,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Conventional, Mode::PgscRandom, Mode::TpePgsc, Mode::ScdPgsc, Mode::FastGsc];

    pub fn uses_policy(self) -> bool {
        matches!(self, Mode::TpePgsc | Mode::FastGsc)
    }

    pub fn uses_scd(self) -> bool {
        matches!(self, Mode::ScdPgsc | Mode::FastGsc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Conventional => "conventional",
            Mode::PgscRandom => "pgsc_random",
            Mode::TpePgsc => "tpe_pgsc",
            Mode::ScdPgsc => "scd_pgsc",
            Mode::FastGsc => "fast_gsc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown mode {s:?}")))
    }
}

/// Everything an experiment depends on. `M` and `segment` of the sampler always follow
/// the latency model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world_seed: u64,
    pub world: WorldConfig,
    pub env: EnvConfig,
    pub sampling: SamplingConfig,
    pub denoiser: DenoiserTrainConfig,
    pub ppo: PpoConfig,
    pub mode: Mode,
    pub replicates: usize,
    pub episodes_per_replicate: usize,
    /// Seed of the evaluation episodes (requests and initial latents).
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/denoiser.ckpt`.
    pub denoiser_checkpoint: Option<PathBuf>,
    /// Directory with `policy.ckpt` and `critic.ckpt`; defaults to `<output_dir>/policy`.
    pub policy_dir: Option<PathBuf>,
    /// Train missing artifacts instead of failing.
    pub train_if_missing: bool,
    /// Evaluate the learned policy by its most likely action instead of sampling.
    pub greedy_policy: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world_seed: 7,
            world: WorldConfig::default(),
            env: EnvConfig::default(),
            sampling: SamplingConfig { alpha: 4.0, ..Default::default() },
            denoiser: DenoiserTrainConfig::default(),
            ppo: PpoConfig::default(),
            mode: Mode::PgscRandom,
            replicates: 5,
            episodes_per_replicate: 200,
            seed: 2024,
            output_dir: PathBuf::from("runs/default"),
            denoiser_checkpoint: None,
            policy_dir: None,
            train_if_missing: false,
            greedy_policy: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the latency model's `M` and segment into the sampler settings.
    pub fn normalize(&mut self) {
        self.sampling.m_steps = self.env.latency.m_steps;
        self.sampling.segment = self.env.latency.segment;
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate(&self.sampling)?;
        self.ppo.validate()?;
        if self.replicates == 0 || self.episodes_per_replicate == 0 {
            return Err(Error::ConfigInvalid("replicates and episodes_per_replicate must be positive".into()));
        }
        if self.env.max_units > self.world.table.categories.len() {
            return Err(Error::ConfigInvalid("max_units exceeds the unit table size".into()));
        }
        if self.mode.uses_scd() && !(self.sampling.alpha >= 0.0) {
            return Err(Error::ConfigInvalid("alpha must be non-negative".into()));
        }
        Ok(())
    }

    /// Sampler settings for this mode: the correction is off unless the mode uses it.
    pub fn mode_sampling(&self) -> SamplingConfig {
        let mut s = self.sampling.clone();
        if !self.mode.uses_scd() {
            s.alpha = 0.0;
        }
        s
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.denoiser_checkpoint.clone().unwrap_or_else(|| self.output_dir.join("denoiser.ckpt"))
    }

    pub fn policy_path(&self) -> PathBuf {
        self.policy_dir.clone().unwrap_or_else(|| self.output_dir.join("policy"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let c = ExperimentConfig::default();
        let s = serde_json::to_string_pretty(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"modee": "conventional"}"#).is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"mode": "fast_gsc", "replicates": 2}"#).unwrap();
        assert_eq!((partial.mode, partial.replicates), (Mode::FastGsc, 2));
    }

    #[test]
    fn alpha_only_applies_to_scd_modes() {
        let mut c = ExperimentConfig::default();
        c.mode = Mode::TpePgsc;
        assert_eq!(c.mode_sampling().alpha, 0.0);
        c.mode = Mode::FastGsc;
        assert_eq!(c.mode_sampling().alpha, 4.0);
    }

    #[test]
    fn mismatched_segment_is_a_config_error() {
        let mut c = ExperimentConfig::default();
        c.env.latency.segment = 7;
        c.normalize();
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
        assert_eq!(Mode::parse("scd_pgsc").unwrap(), Mode::ScdPgsc);
        assert!(Mode::parse("nope").is_err());
    }
}
