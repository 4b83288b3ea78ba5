use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable description of a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear variance schedule. Index `t` runs over `1..=T`; `alpha_bar_at(0) == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub spec: ScheduleSpec,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec { t_max, beta_start, beta_end } = spec;
        if t_max < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::ConfigInvalid(format!("invalid noise schedule {spec:?}")));
        }
        let beta: Vec<f64> = (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { spec, beta, alpha, alpha_bar })
    }

    pub fn linear_default() -> Self {
        Self::new(ScheduleSpec::default()).expect("default schedule is valid")
    }

    pub fn t_max(&self) -> usize {
        self.spec.t_max
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            Err(Error::StepOutOfRange { t, max: self.t_max() })
        } else {
            Ok(())
        }
    }

    /// Evenly spaced timesteps `T = t_0 > t_1 > ... > t_M = 0` for an `M`-step sampler.
    pub fn sampling_timesteps(&self, m_steps: usize) -> Vec<usize> {
        let t = self.t_max();
        (0..=m_steps).map(|i| (t * (m_steps - i) + m_steps / 2) / m_steps).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_is_the_running_product() {
        let s = NoiseSchedule::linear_default();
        assert_eq!(s.beta.len(), 1000);
        assert!((s.beta[0] - 1e-4).abs() < 1e-18 && (s.beta[999] - 0.02).abs() < 1e-15);
        for t in 2..=1000 {
            let (prev, cur) = (s.alpha_bar_at(t - 1), s.alpha_bar_at(t));
            assert!(cur < prev && cur > 0.0 && cur < 1.0);
            assert!((cur - prev * s.alpha[t - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_timesteps_are_strictly_decreasing() {
        let s = NoiseSchedule::linear_default();
        let ts = s.sampling_timesteps(60);
        assert_eq!(ts.len(), 61);
        assert_eq!((ts[0], ts[60]), (1000, 0));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn step_range_is_checked() {
        let s = NoiseSchedule::linear_default();
        assert!(s.check_step(0).is_err() && s.check_step(1001).is_err());
        assert!(s.check_step(1).is_ok() && s.check_step(1000).is_ok());
    }
}
