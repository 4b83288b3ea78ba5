use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::SamplingConfig;
use crate::error::{Error, Result};
use crate::semunits::{encode_request, OneHotMatrix, TaskRequest, TransmissionState};
use crate::timeline::{pgsc_timeline, ArrivalSchedule, LatencyConfig, LatencyReport, PhaseDispatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub latency: LatencyConfig,
    pub min_units: usize,
    pub max_units: usize,
    /// Multiplier on the latency penalties in the reward.
    pub latency_weight: f64,
    /// Multiplier on the terminal score in the reward.
    pub score_weight: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            latency: LatencyConfig::default(),
            min_units: 4,
            max_units: 8,
            latency_weight: 1.0,
            score_weight: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self, sampling: &SamplingConfig) -> Result<()> {
        self.latency.validate()?;
        if sampling.m_steps != self.latency.m_steps || sampling.segment != self.latency.segment {
            return Err(Error::ConfigInvalid("sampler and latency model disagree on M or segment".into()));
        }
        if self.min_units == 0 || self.min_units > self.max_units {
            return Err(Error::ConfigInvalid("request length range is empty".into()));
        }
        Ok(())
    }
}

/// Observation `s_t = [E, c, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpState {
    pub e: OneHotMatrix,
    pub c: Vec<bool>,
    /// Denoising step from which this phase's units would guide the sampler.
    pub d: usize,
    pub m_steps: usize,
    /// Whether no unit has reached the receiver yet.
    pub first_phase: bool,
}

impl MdpState {
    pub fn k_max(&self) -> usize {
        self.c.len()
    }

    /// `E` row-major, then `c`, then `d / M`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.e.data.clone();
        v.extend(self.c.iter().map(|&p| if p { 1.0 } else { 0.0 }));
        v.push(self.d as f64 / self.m_steps as f64);
        v
    }

    pub fn pending_mask(&self) -> usize {
        self.c.iter().enumerate().filter(|(_, &p)| p).map(|(k, _)| 1 << k).sum()
    }
}

pub fn state_dim(k_max: usize, n_e: usize) -> usize {
    k_max * n_e + k_max + 1
}

/// Joint action over the `K_max` slots; bit `k` selects slot `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction {
    pub index: usize,
}

impl JointAction {
    pub fn from_bits(bits: &[bool]) -> Self {
        Self {
            index: bits.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| 1 << k).sum(),
        }
    }

    pub fn bits(&self, k_max: usize) -> Vec<bool> {
        (0..k_max).map(|k| self.index >> k & 1 == 1).collect()
    }

    pub fn count(&self) -> usize {
        self.index.count_ones() as usize
    }
}

/// `mask[a]` is true iff action `a` selects only pending slots; the empty action is
/// invalid while nothing has reached the receiver.
pub fn action_mask(state: &MdpState) -> Result<Vec<bool>> {
    let pending = state.pending_mask();
    let mask: Vec<bool> = (0..1usize << state.k_max())
        .map(|a| a & !pending == 0 && !(a == 0 && state.first_phase))
        .collect();
    if mask.iter().any(|&m| m) {
        Ok(mask)
    } else {
        Err(Error::NoValidAction)
    }
}

/// Softmax restricted to unmasked entries; masked entries are exactly zero.
pub fn masked_policy_distribution(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let mx = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut p: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &m)| if m { (l - mx).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

/// Inverse-CDF draw; never returns an index with zero probability.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Latency part of the phase reward; the score is added once the episode ends.
    pub reward: f64,
    pub done: bool,
}

/// Transmitter-side episode. The policy never observes the latent, so the episode can be
/// played to the end first and the sampler run afterwards on the resulting schedule.
#[derive(Clone, Debug)]
pub struct Episode {
    pub request: TaskRequest,
    pub tx: TransmissionState,
    cfg: EnvConfig,
    /// Index of the next phase (0 until something reaches the receiver).
    pub phase: usize,
    pub stalls: usize,
    pub stall_cost: f64,
    pub dispatches: Vec<PhaseDispatch>,
    /// Set when phase 0 stalled `K_max` times without delivering anything. The stall cost
    /// then includes sending the whole request conventionally.
    pub failed: bool,
    pub done: bool,
    masked: bool,
}

/// Everything the receiver side needs once the episode is over.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub report: LatencyReport,
    pub schedule: Option<ArrivalSchedule>,
}

impl Episode {
    pub fn new(request: TaskRequest, cfg: &EnvConfig, masked: bool) -> Self {
        Self {
            tx: TransmissionState::new(&request),
            request,
            cfg: cfg.clone(),
            phase: 0,
            stalls: 0,
            stall_cost: 0.0,
            dispatches: Vec::new(),
            failed: false,
            done: false,
            masked,
        }
    }

    pub fn state(&self) -> MdpState {
        MdpState {
            e: encode_request(&self.request),
            c: self.tx.pending.clone(),
            d: self.cfg.latency.arrival_step(self.phase),
            m_steps: self.cfg.latency.m_steps,
            first_phase: self.phase == 0,
        }
    }

    /// The mask the agent acts under: the real one, or all-ones for the unmasked baseline.
    pub fn mask(&self) -> Result<Vec<bool>> {
        if self.masked {
            action_mask(&self.state())
        } else {
            Ok(vec![true; 1 << self.request.k_max])
        }
    }

    pub fn step(&mut self, action: JointAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let k_max = self.request.k_max;
        if action.index >= 1 << k_max || (self.masked && !self.mask()?[action.index]) {
            return Err(Error::InvalidAction(action.index));
        }
        let bits = action.bits(k_max);
        let useful: Vec<usize> = (0..k_max).filter(|&k| bits[k] && self.tx.pending[k]).collect();
        let wasted = action.count() - useful.len();
        let lat = &self.cfg.latency;
        if self.phase == 0 && useful.is_empty() {
            // nothing reached the receiver, so denoising still has not started; even an
            // empty selection occupies one extraction slot
            let mut cost = lat.tau_e * action.count().max(1) as f64;
            self.stalls += 1;
            if self.stalls >= k_max {
                // the request falls back to conventional transmission and gets no score
                cost += self.fallback_cost();
                self.failed = true;
                self.done = true;
            }
            self.stall_cost += cost;
            return Ok(StepOutcome { reward: -self.cfg.latency_weight * cost, done: self.done });
        }
        let dispatch = PhaseDispatch {
            unit_ids: useful.iter().map(|&k| self.request.units[k].id).collect(),
            wasted,
        };
        let (penalty, in_time) = lat.phase_overshoot(self.phase, dispatch.extracted());
        let arrive = if in_time { lat.arrival_step(self.phase) } else { lat.m_steps };
        for &k in &useful {
            self.tx.mark_sent(k, arrive);
        }
        self.dispatches.push(dispatch);
        self.phase += 1;
        self.done = self.phase == lat.phases() || self.tx.pending_count() == 0;
        Ok(StepOutcome { reward: -self.cfg.latency_weight * penalty, done: self.done })
    }

    fn fallback_cost(&self) -> f64 {
        self.cfg.latency.tau_e * self.request.len() as f64
    }

    pub fn outcome(&self) -> Result<EpisodeOutcome> {
        if !self.done {
            return Err(Error::InvalidRequest("episode is still running".into()));
        }
        let lat = &self.cfg.latency;
        if self.failed {
            return Ok(EpisodeOutcome {
                report: LatencyReport {
                    total_latency: self.stall_cost + lat.m_steps as f64 * lat.tau_m,
                    residual_latency: self.stall_cost,
                    per_phase_overshoot: vec![],
                },
                schedule: None,
            });
        }
        let (mut report, schedule) = pgsc_timeline(&self.dispatches, lat)?;
        report.residual_latency += self.stall_cost;
        report.total_latency += self.stall_cost;
        Ok(EpisodeOutcome { report, schedule: Some(schedule) })
    }

    /// Units never transmitted plus units transmitted too late, by table id.
    pub fn discarded(&self) -> Vec<usize> {
        (0..self.request.len())
            .filter(|&k| self.tx.pending[k] || self.tx.sent_at_step[k] == Some(self.cfg.latency.m_steps))
            .map(|k| self.request.units[k].id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semunits::{TableConfig, UnitTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> UnitTable {
        UnitTable::generate(1, &TableConfig::default()).unwrap()
    }

    fn state_with(c: Vec<bool>, first: bool) -> MdpState {
        let t = table();
        let mut s = Episode::new(TaskRequest::full(&t), &EnvConfig::default(), true).state();
        s.c = c;
        s.first_phase = first;
        s
    }

    #[test]
    fn mask_examples() {
        let mut c = vec![false; 8];
        c[0] = true;
        c[1] = true;
        let m = action_mask(&state_with(c.clone(), false)).unwrap();
        let valid: Vec<usize> = (0..256).filter(|&a| m[a]).collect();
        assert_eq!(valid, vec![0, 1, 2, 3]);
        assert_eq!(action_mask(&state_with(c, true)).unwrap().iter().filter(|&&v| v).count(), 3);
        assert!(action_mask(&state_with(vec![true; 8], false)).unwrap().iter().all(|&v| v));
        let none = action_mask(&state_with(vec![false; 8], false)).unwrap();
        assert!(none[0] && none.iter().filter(|&&v| v).count() == 1);
        assert!(matches!(action_mask(&state_with(vec![false; 8], true)), Err(Error::NoValidAction)));
    }

    #[test]
    fn distribution_examples() {
        let mask = [true, false, true, true];
        let p = masked_policy_distribution(&[0.0; 4], &mask).unwrap();
        assert_eq!(p[1], 0.0);
        for i in [0, 2, 3] {
            assert!((p[i] - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = masked_policy_distribution(&[1.0, 2.0, 3.0], &[false, true, false]).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
        let p = masked_policy_distribution(&[1e6, 0.0], &[false, true]).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
        assert!(matches!(masked_policy_distribution(&[0.0], &[false]), Err(Error::AllMasked)));
    }

    #[test]
    fn random_valid_draws_are_uniform() {
        let mask = [false, true, true, false, true];
        let p = masked_policy_distribution(&[0.0; 5], &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_index(&p, &mut rng)] += 1;
        }
        let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for i in [1, 2, 4] {
            assert!((counts[i] as f64 - n as f64 / 3.0).abs() < 3.0 * sd, "{counts:?}");
        }
        assert_eq!(counts[0] + counts[3], 0);
    }

    #[test]
    fn reward_examples() {
        let t = table();
        let cfg = EnvConfig::default();
        let mut ep = Episode::new(TaskRequest::full(&t), &cfg, true);
        assert_eq!(ep.step(JointAction { index: 0b11 }).unwrap().reward, -10.0);
        assert_eq!(ep.step(JointAction { index: 0b1100 }).unwrap().reward, 0.0);
        assert_eq!(ep.step(JointAction { index: 0b111_0000 }).unwrap().reward, -5.0);
        assert!(matches!(ep.step(JointAction { index: 0b1 }), Err(Error::InvalidAction(1))));
        // phases 3 and 4 send nothing, the final phase sends one unit too many
        ep.step(JointAction { index: 0 }).unwrap();
        ep.step(JointAction { index: 0 }).unwrap();
        let last = ep.step(JointAction { index: 0b1000_0000 }).unwrap();
        assert_eq!(last, StepOutcome { reward: 0.0, done: true });
        let out = ep.outcome().unwrap();
        assert_eq!(out.report.residual_latency, 15.0);
        assert!(out.schedule.unwrap().arrivals.contains_key(&50));
        assert!(ep.discarded().is_empty());

        let mut late = Episode::new(TaskRequest::full(&t), &cfg, true);
        late.step(JointAction { index: 1 }).unwrap();
        for _ in 0..4 {
            late.step(JointAction { index: 0 }).unwrap();
        }
        let last = late.step(JointAction { index: 0b1110 }).unwrap();
        assert_eq!(last, StepOutcome { reward: 0.0, done: true });
        assert_eq!(late.discarded(), vec![1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(late.outcome().unwrap().schedule.unwrap().dropped.len(), 3);
    }

    #[test]
    fn everything_in_phase_zero_costs_the_conventional_residual() {
        let t = table();
        let mut ep = Episode::new(TaskRequest::full(&t), &EnvConfig::default(), true);
        let r = ep.step(JointAction { index: 255 }).unwrap();
        assert_eq!(r, StepOutcome { reward: -40.0, done: true });
        assert_eq!(ep.outcome().unwrap().report.residual_latency, 40.0);
    }

    #[test]
    fn unmasked_wasted_selections_are_charged_but_not_delivered() {
        let t = table();
        let req = TaskRequest::from_ids(&t, &[0, 1, 2]).unwrap();
        let mut ep = Episode::new(req, &EnvConfig::default(), false);
        // an empty slot only: a stall
        assert_eq!(ep.step(JointAction { index: 0b1000 }).unwrap().reward, -5.0);
        assert_eq!((ep.phase, ep.stalls), (0, 1));
        ep.step(JointAction { index: 0b1 }).unwrap();
        // re-send slot 0 together with slot 1: both charged, one delivered
        let r = ep.step(JointAction { index: 0b11 }).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(ep.dispatches[1], PhaseDispatch { unit_ids: vec![1], wasted: 1 });
        let r = ep.step(JointAction { index: 0b111 }).unwrap();
        assert_eq!(r.reward, -5.0);
        assert!(r.done);
        let s = ep.outcome().unwrap().schedule.unwrap();
        assert_eq!(s.delivered(), [0, 1, 2].into());
        assert_eq!(ep.outcome().unwrap().report.residual_latency, 5.0 + 5.0 + 5.0);
    }

    #[test]
    fn repeated_stalls_end_the_episode() {
        let t = table();
        let mut ep = Episode::new(TaskRequest::from_ids(&t, &[0]).unwrap(), &EnvConfig::default(), false);
        let mut total = 0.0;
        for i in 0..8 {
            let r = ep.step(JointAction { index: 0 }).unwrap();
            assert_eq!(r.done, i == 7);
            total += r.reward;
        }
        // eight empty slots plus the conventional fallback for the single unit
        assert_eq!(total, -(8.0 * 5.0 + 5.0));
        assert!(ep.failed && ep.outcome().unwrap().schedule.is_none());
        assert_eq!(ep.outcome().unwrap().report.residual_latency, 45.0);
        assert!(matches!(ep.step(JointAction { index: 1 }), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn flattened_state_layout() {
        let t = table();
        let req = TaskRequest::from_ids(&t, &[0, 6]).unwrap();
        let s = Episode::new(req, &EnvConfig::default(), true).state();
        let v = s.flatten();
        assert_eq!(v.len(), state_dim(8, 5));
        assert_eq!(&v[..5], &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&v[5..10], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(&v[40..48], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(v[48], 0.0);
        assert_eq!(JointAction::from_bits(&[true, false, true]).index, 5);
    }
}
