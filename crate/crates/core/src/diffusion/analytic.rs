//! Bayes-optimal noise predictor for the toy world, computed by enumerating every
//! presence configuration of the unit table. Serves as a reference the trained network
//! is compared against.

use super::model::NoisePredictor;
use super::schedule::NoiseSchedule;
use crate::toyworld::WorldSpec;
use crate::vecmath::{axpy, dot};

pub struct AnalyticDenoiser {
    pub world: WorldSpec,
    pub schedule: NoiseSchedule,
}

impl AnalyticDenoiser {
    pub fn new(world: WorldSpec, schedule: NoiseSchedule) -> Self {
        assert!(world.k_max() <= 16, "configuration enumeration is exponential in K");
        Self { world, schedule }
    }

    /// Units whose offset is present in a condition embedding; `None` for the null condition.
    fn decode(&self, cond: &[f64]) -> Option<u32> {
        let mut mask = 0u32;
        for u in &self.world.table.units {
            if dot(cond, &u.offset) / u.magnitude_class.powi(2) > 0.5 {
                mask |= 1 << u.id;
            }
        }
        (mask != 0).then_some(mask)
    }

    /// Log prior of each presence configuration `b` (bit `k` set = unit `k` present).
    fn log_prior(&self, cond: Option<u32>) -> Vec<f64> {
        let k = self.world.k_max();
        let p = self.world.background_presence;
        (0u32..1 << k)
            .map(|b| {
                let n = b.count_ones() as i32;
                match cond {
                    Some(s) if b & s != s => f64::NEG_INFINITY,
                    Some(s) => {
                        let extra = (b & !s).count_ones() as i32;
                        let absent = k as i32 - n;
                        extra as f64 * p.ln() + absent as f64 * (1.0 - p).ln()
                    }
                    // prompt uniform over non-empty sets, then background draws
                    None => (k as i32 - n) as f64 * (1.0 - p).ln() + ((1.0 + p).powi(n) - p.powi(n)).ln(),
                }
            })
            .map(|l| if l.is_nan() { f64::NEG_INFINITY } else { l })
            .collect()
    }

    /// Posterior presence probability of each unit given `x_t`.
    pub fn presence_posterior(&self, x: &[f64], cond: &[f64], t: usize) -> Vec<f64> {
        let ab = self.schedule.alpha_bar_at(t);
        let s2 = ab * self.world.base_noise_sigma.powi(2) + 1.0 - ab;
        let gain: Vec<f64> = self
            .world
            .table
            .units
            .iter()
            .map(|u| (ab.sqrt() * dot(x, &u.offset) - 0.5 * ab * u.magnitude_class.powi(2)) / s2)
            .collect();
        let prior = self.log_prior(self.decode(cond));
        let logw: Vec<f64> = prior
            .iter()
            .enumerate()
            .map(|(b, lp)| lp + (0..gain.len()).filter(|k| b >> k & 1 == 1).map(|k| gain[k]).sum::<f64>())
            .collect();
        let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        (0..gain.len())
            .map(|k| w.iter().enumerate().filter(|(b, _)| b >> k & 1 == 1).map(|(_, v)| v).sum::<f64>() / z)
            .collect()
    }

    /// `E[x_0 | x_t, y]`.
    pub fn posterior_mean(&self, x: &[f64], cond: &[f64], t: usize) -> Vec<f64> {
        let ab = self.schedule.alpha_bar_at(t);
        let sig2 = self.world.base_noise_sigma.powi(2);
        let s2 = ab * sig2 + 1.0 - ab;
        let pi = self.presence_posterior(x, cond, t);
        let mut m: Vec<f64> = x.iter().map(|v| ab.sqrt() * sig2 / s2 * v).collect();
        for (u, p) in self.world.table.units.iter().zip(&pi) {
            axpy(&mut m, (1.0 - ab) / s2 * p, &u.offset);
        }
        m
    }
}

impl NoisePredictor for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, xs: &[f64], conds: &[f64], t: usize) -> Vec<f64> {
        let d = self.dim();
        let ab = self.schedule.alpha_bar_at(t);
        let mut out = Vec::with_capacity(xs.len());
        for r in 0..xs.len() / d {
            let x = &xs[r * d..(r + 1) * d];
            let m = self.posterior_mean(x, &conds[r * d..(r + 1) * d], t);
            out.extend(x.iter().zip(&m).map(|(xv, mv)| (xv - ab.sqrt() * mv) / (1.0 - ab).sqrt()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{sample_training_pair, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn null_prior_matches_enumerated_prompt_mixture() {
        let w = WorldSpec::generate(2, &WorldConfig::default()).unwrap();
        let a = AnalyticDenoiser::new(w.clone(), NoiseSchedule::linear_default());
        let k = w.k_max();
        let p = w.background_presence;
        let lp = a.log_prior(None);
        let mut brute = vec![0.0; 1 << k];
        for prompt in 1u32..1 << k {
            for b in 0u32..1 << k {
                if b & prompt != prompt {
                    continue;
                }
                let extra = (b & !prompt).count_ones() as i32;
                let absent = k as i32 - b.count_ones() as i32;
                brute[b as usize] += p.powi(extra) * (1.0 - p).powi(absent);
            }
        }
        let z: f64 = brute.iter().sum();
        let zl: f64 = lp.iter().map(|l| l.exp()).sum();
        for b in 0..1 << k {
            assert!((brute[b] / z - lp[b].exp() / zl).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_beats_conditional_mean_predictor() {
        // On fresh training data the Bayes predictor's loss must be below that of the
        // predictor which ignores x_t's information about background units.
        let w = WorldSpec::generate(4, &WorldConfig::default()).unwrap();
        let a = AnalyticDenoiser::new(w.clone(), NoiseSchedule::linear_default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut loss = 0.0;
        let n = 400;
        for i in 0..n {
            let (x0, prompt) = sample_training_pair(&w, &mut rng);
            let t = 1 + (i * 997) % 1000;
            let ab = a.schedule.alpha_bar_at(t);
            let eps: Vec<f64> = (0..w.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let xt: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
            let pred = a.predict(&xt, &w.table.embedding_of(&prompt), t);
            loss += pred.iter().zip(&eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / w.dim() as f64;
        }
        let mean = loss / n as f64;
        assert!(mean < 0.6, "{mean}");
    }

    #[test]
    fn conditional_units_are_certainly_present() {
        let w = WorldSpec::generate(4, &WorldConfig::default()).unwrap();
        let a = AnalyticDenoiser::new(w.clone(), NoiseSchedule::linear_default());
        let cond = w.table.embedding_of(&[1usize, 5]);
        let pi = a.presence_posterior(&vec![0.0; w.dim()], &cond, 900);
        assert!((pi[1] - 1.0).abs() < 1e-12 && (pi[5] - 1.0).abs() < 1e-12);
        // a zero latent is evidence against the optional units
        assert!(pi[0] > 0.0 && pi[0] < w.background_presence);
    }
}
