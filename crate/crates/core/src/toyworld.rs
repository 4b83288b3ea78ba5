//! Synthetic conditional world and the score oracle used in place of an image/text
//! similarity model.
//!
//! A prompt is a set of unit ids. Its clean samples are
//! `x_0 = Σ_{k∈P} o_k + Σ_{k∉P} b_k o_k + σ z` with `b_k ~ Bernoulli(p)` and `z ~ N(0, I)`:
//! every requested unit is present, an unrequested unit shows up with background
//! probability `p`. With `p = 0` the conditional law is `N(Σ_{k∈P} o_k, σ² I)`.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semunits::{prompt_embedding, SemanticUnit, TableConfig, UnitTable};
use crate::vecmath::{axpy, dot, norm};

/// Generation parameters of a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    #[serde(flatten)]
    pub table: TableConfig,
    /// Spread of `x_0` around its conditional mean, in multiples of `world_scale`.
    pub relative_noise_sigma: f64,
    pub background_presence: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            table: TableConfig::default(),
            relative_noise_sigma: 0.25,
            background_presence: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(flatten)]
    pub table: UnitTable,
    /// Absolute standard deviation of `x_0` around its conditional mean.
    pub base_noise_sigma: f64,
    pub background_presence: f64,
    pub seed: u64,
}

impl WorldSpec {
    pub fn generate(seed: u64, cfg: &WorldConfig) -> Result<Self> {
        if !(cfg.relative_noise_sigma > 0.0) {
            return Err(Error::ConfigInvalid("relative_noise_sigma must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.background_presence) {
            return Err(Error::ConfigInvalid("background_presence must lie in [0, 1)".into()));
        }
        Ok(Self {
            table: UnitTable::generate(seed, &cfg.table)?,
            base_noise_sigma: cfg.relative_noise_sigma * cfg.table.world_scale,
            background_presence: cfg.background_presence,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn k_max(&self) -> usize {
        self.table.k_max
    }

    pub fn validate(&self) -> Result<()> {
        self.table.validate()?;
        if !(self.base_noise_sigma > 0.0) || !(0.0..1.0).contains(&self.background_presence) {
            return Err(Error::ConfigInvalid("world noise/presence parameters out of range".into()));
        }
        Ok(())
    }

    /// Probability that unit `k` is present in a training sample whose prompt is
    /// drawn uniformly among the non-empty subsets.
    pub fn marginal_presence(&self) -> f64 {
        let k = self.k_max() as i32;
        let total = 2f64.powi(k) - 1.0;
        let in_prompt = 2f64.powi(k - 1) / total;
        in_prompt + (1.0 - in_prompt) * self.background_presence
    }

    /// `E‖x_0‖² / D` under the training distribution.
    pub fn data_second_moment(&self) -> f64 {
        let q = self.marginal_presence();
        let signal: f64 = self.table.units.iter().map(|u| q * u.magnitude_class.powi(2)).sum();
        (signal + self.dim() as f64 * self.base_noise_sigma.powi(2)) / self.dim() as f64
    }

    /// Clean sample for a prompt given as unit ids.
    pub fn sample_clean<R: Rng>(&self, prompt: &BTreeSet<usize>, rng: &mut R) -> Vec<f64> {
        let mut x: Vec<f64> = (0..self.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.base_noise_sigma * z
            })
            .collect();
        for u in &self.table.units {
            let present = prompt.contains(&u.id) || rng.gen::<f64>() < self.background_presence;
            if present {
                axpy(&mut x, 1.0, &u.offset);
            }
        }
        x
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

/// One training example: a uniformly random non-empty prompt and a clean sample for it.
pub fn sample_training_pair<R: Rng>(spec: &WorldSpec, rng: &mut R) -> (Vec<f64>, BTreeSet<usize>) {
    let k = spec.k_max();
    let mask: u64 = rng.gen_range(1..(1u64 << k));
    let prompt: BTreeSet<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
    let x = spec.sample_clean(&prompt, rng);
    (x, prompt)
}

/// `max(cos(h, v), 0)` with `h` the prompt embedding of the requested units.
pub fn clip_analogue_score(sample: &[f64], requested: &[&SemanticUnit]) -> Result<f64> {
    let h = prompt_embedding(requested.iter().copied())?;
    let n = norm(sample);
    if n < 1e-12 {
        return Err(Error::ZeroSample);
    }
    Ok((dot(&h, sample) / n).max(0.0))
}

/// Score against requested table ids.
pub fn score_ids(table: &UnitTable, sample: &[f64], requested: &[usize]) -> Result<f64> {
    let units: Vec<&SemanticUnit> = requested.iter().map(|&id| table.unit(id)).collect();
    clip_analogue_score(sample, &units)
}

/// `⟨sample, offset⟩ / ‖offset‖²`: how much of the unit's offset is present.
pub fn incorporation_ratio(sample: &[f64], unit: &SemanticUnit) -> f64 {
    dot(sample, &unit.offset) / unit.magnitude_class.powi(2)
}
