//! Latency accounting for conventional (extract-then-infer) and parallel pipelines.
//!
//! Time is measured in denoising-step units (`tau_m = 1` by default). Phase 0 runs
//! before denoising starts; phase `t >= 1` extracts while segment `t` is being denoised
//! and its units arrive at step `t * segment`. A middle phase whose extraction outlasts
//! its segment stalls the denoiser for the overshoot. The final phase never stalls the
//! denoiser: units that do not fit in its segment are dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the transmitter does with units that cannot reach the receiver before step `M`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatePolicy {
    /// Extract and transmit anyway; the receiver never uses them.
    #[default]
    ExtractThenDrop,
    /// Skip extraction of units that would arrive too late.
    SelfCensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    /// Extraction latency of one unit.
    pub tau_e: f64,
    /// Duration of one denoising step.
    pub tau_m: f64,
    /// Total denoising steps.
    #[serde(rename = "M")]
    pub m_steps: usize,
    /// Denoising steps per phase.
    pub segment: usize,
    pub tau_trans: f64,
    #[serde(default)]
    pub late_policy: LatePolicy,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            tau_e: 5.0,
            tau_m: 1.0,
            m_steps: 60,
            segment: 10,
            tau_trans: 0.0,
            late_policy: LatePolicy::ExtractThenDrop,
        }
    }
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_e > 0.0) {
            return Err(Error::ConfigInvalid("tau_e must be positive".into()));
        }
        if !(self.tau_m > 0.0) {
            return Err(Error::ConfigInvalid("tau_m must be positive".into()));
        }
        if self.segment == 0 || self.m_steps == 0 || !self.m_steps.is_multiple_of(self.segment) {
            return Err(Error::ConfigInvalid(format!(
                "M ({}) must be a positive multiple of segment ({})",
                self.m_steps, self.segment
            )));
        }
        if !(self.tau_trans >= 0.0) {
            return Err(Error::ConfigInvalid("tau_trans must be non-negative".into()));
        }
        Ok(())
    }

    /// Duration of one segment of denoising.
    pub fn tau_s(&self) -> f64 {
        self.segment as f64 * self.tau_m
    }

    /// Number of decision phases in an episode: the pre-denoising phase plus one per
    /// segment boundary strictly before `M`.
    pub fn phases(&self) -> usize {
        self.m_steps / self.segment
    }

    /// Denoising step from which units chosen in `phase` guide the sampler.
    pub fn arrival_step(&self, phase: usize) -> usize {
        phase * self.segment
    }

    /// Latency penalty of phase `phase` (before sign flip) when `n` units are extracted,
    /// and whether the extracted units reach the receiver in time.
    pub fn phase_overshoot(&self, phase: usize, n: usize) -> (f64, bool) {
        let work = self.tau_e * n as f64;
        if phase == 0 {
            return (work + self.tau_trans, true);
        }
        let trans = if n > 0 { self.tau_trans } else { 0.0 };
        let over = work + trans - self.tau_s();
        if phase + 1 < self.phases() {
            (over.max(0.0), true)
        } else if over <= 0.0 {
            (0.0, true)
        } else {
            // final phase: the units miss the last boundary and the denoiser does not wait
            (0.0, false)
        }
    }
}

/// Which units reach the receiver at which denoising step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrivalSchedule {
    pub arrivals: BTreeMap<usize, BTreeSet<usize>>,
    pub dropped: BTreeSet<usize>,
}

impl ArrivalSchedule {
    pub fn all_at_start(ids: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = ids.into_iter().collect();
        let mut arrivals = BTreeMap::new();
        if !set.is_empty() {
            arrivals.insert(0, set);
        }
        Self {
            arrivals,
            dropped: BTreeSet::new(),
        }
    }

    /// Adds units arriving at `step`.
    pub fn deliver(&mut self, step: usize, ids: impl IntoIterator<Item = usize>) {
        let entry = self.arrivals.entry(step).or_default();
        entry.extend(ids);
        if entry.is_empty() {
            self.arrivals.remove(&step);
        }
    }

    pub fn delivered(&self) -> BTreeSet<usize> {
        self.arrivals.values().flatten().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.values().all(|s| s.is_empty())
    }

    /// Checks keys are segment multiples in `[0, M)` and that no unit appears twice.
    pub fn validate(&self, m_steps: usize, segment: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (&step, ids) in &self.arrivals {
            if step >= m_steps || step % segment != 0 {
                return Err(Error::InvalidSchedule(format!(
                    "arrival step {step} is not a segment boundary before {m_steps}"
                )));
            }
            for &id in ids {
                if !seen.insert(id) || self.dropped.contains(&id) {
                    return Err(Error::InvalidSchedule(format!("unit {id} scheduled twice")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub total_latency: f64,
    pub residual_latency: f64,
    pub per_phase_overshoot: Vec<f64>,
}

/// One phase of a parallel pipeline: the units delivered by it plus any extraction work
/// that delivers nothing (re-sent or empty slots chosen by an unmasked policy).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseDispatch {
    pub unit_ids: Vec<usize>,
    #[serde(default)]
    pub wasted: usize,
}

impl PhaseDispatch {
    pub fn new(unit_ids: Vec<usize>) -> Self {
        Self { unit_ids, wasted: 0 }
    }

    /// Units extracted in this phase, useful or not.
    pub fn extracted(&self) -> usize {
        self.unit_ids.len() + self.wasted
    }
}

/// All units are extracted first, then transmitted, then denoised for `M` steps.
pub fn conventional_timeline(n_units: usize, cfg: &LatencyConfig) -> Result<(LatencyReport, ArrivalSchedule)> {
    cfg.validate()?;
    if n_units == 0 {
        return Err(Error::EmptyFirstPhase);
    }
    let residual = n_units as f64 * cfg.tau_e + cfg.tau_trans;
    let report = LatencyReport {
        total_latency: residual + cfg.m_steps as f64 * cfg.tau_m,
        residual_latency: residual,
        per_phase_overshoot: vec![residual],
    };
    Ok((report, ArrivalSchedule::all_at_start(0..n_units)))
}

/// Parallel pipeline: `phases[t]` is what the transmitter extracts during phase `t`.
pub fn pgsc_timeline(phases: &[PhaseDispatch], cfg: &LatencyConfig) -> Result<(LatencyReport, ArrivalSchedule)> {
    cfg.validate()?;
    let first = phases.first().ok_or(Error::EmptyFirstPhase)?;
    if first.unit_ids.is_empty() {
        return Err(Error::EmptyFirstPhase);
    }
    if phases.len() > cfg.phases() {
        return Err(Error::ConfigInvalid(format!(
            "{} phases given but an episode has at most {}",
            phases.len(),
            cfg.phases()
        )));
    }
    let mut schedule = ArrivalSchedule::default();
    let mut overshoot = Vec::with_capacity(phases.len());
    for (t, p) in phases.iter().enumerate() {
        let (penalty, in_time) = cfg.phase_overshoot(t, p.extracted());
        overshoot.push(penalty);
        if in_time {
            schedule.deliver(cfg.arrival_step(t), p.unit_ids.iter().copied());
            continue;
        }
        match cfg.late_policy {
            LatePolicy::ExtractThenDrop => schedule.dropped.extend(p.unit_ids.iter().copied()),
            LatePolicy::SelfCensor => {
                // the rest is never extracted, so it is neither delivered nor dropped
                let fit = ((cfg.tau_s() - cfg.tau_trans) / cfg.tau_e).floor().max(0.0) as usize;
                schedule.deliver(cfg.arrival_step(t), p.unit_ids.iter().copied().take(fit));
            }
        }
    }
    schedule.validate(cfg.m_steps, cfg.segment)?;
    let residual: f64 = overshoot.iter().sum();
    let report = LatencyReport {
        total_latency: residual + cfg.m_steps as f64 * cfg.tau_m,
        residual_latency: residual,
        per_phase_overshoot: overshoot,
    };
    Ok((report, schedule))
}

/// Writes a per-phase timeline as CSV: `phase,n_t,overshoot,arrivals`.
pub fn write_timeline_csv<W: Write>(
    out: W,
    phases: &[PhaseDispatch],
    report: &LatencyReport,
    schedule: &ArrivalSchedule,
    cfg: &LatencyConfig,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phase", "n_t", "overshoot", "arrivals"])?;
    for (t, p) in phases.iter().enumerate() {
        let arrivals = schedule
            .arrivals
            .get(&cfg.arrival_step(t))
            .map(|s| s.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        w.write_record([
            t.to_string(),
            p.extracted().to_string(),
            report.per_phase_overshoot.get(t).copied().unwrap_or(0.0).to_string(),
            arrivals,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dispatch(counts: &[usize]) -> Vec<PhaseDispatch> {
        let mut next = 0;
        counts
            .iter()
            .map(|&n| {
                let ids = (next..next + n).collect();
                next += n;
                PhaseDispatch::new(ids)
            })
            .collect()
    }

    #[test]
    fn conventional_examples() {
        let cfg = LatencyConfig::default();
        let (r, s) = conventional_timeline(8, &cfg).unwrap();
        assert_eq!(r.total_latency, 100.0);
        assert_eq!(r.residual_latency, 40.0);
        assert_eq!(s.arrivals[&0].len(), 8);
        assert_eq!(conventional_timeline(1, &cfg).unwrap().0.residual_latency, 5.0);
        assert_eq!(cfg.tau_trans, 0.0);
    }

    #[test]
    fn pgsc_examples() {
        let cfg = LatencyConfig::default();
        let (r, s) = pgsc_timeline(&dispatch(&[2, 2, 2, 2]), &cfg).unwrap();
        assert_eq!(r.residual_latency, 10.0);
        assert_eq!(r.per_phase_overshoot, vec![10.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.delivered().len(), 8);
        assert!(s.dropped.is_empty());
        assert_eq!(s.arrivals.keys().copied().collect::<Vec<_>>(), vec![0, 10, 20, 30]);

        let (r, _) = pgsc_timeline(&dispatch(&[1, 3]), &cfg).unwrap();
        assert_eq!(r.residual_latency, 10.0);

        let (r, _) = pgsc_timeline(&dispatch(&[8]), &cfg).unwrap();
        assert_eq!(r.residual_latency, 40.0);
    }

    #[test]
    fn first_phase_must_deliver() {
        let cfg = LatencyConfig::default();
        assert!(matches!(pgsc_timeline(&dispatch(&[0, 2]), &cfg), Err(Error::EmptyFirstPhase)));
        assert!(matches!(pgsc_timeline(&[], &cfg), Err(Error::EmptyFirstPhase)));
    }

    #[test]
    fn final_phase_overflow_is_dropped_without_penalty() {
        let cfg = LatencyConfig::default();
        // phases 0..=5; the last one extracts 3 units (15 > 10)
        let (r, s) = pgsc_timeline(&dispatch(&[1, 0, 0, 0, 0, 3]), &cfg).unwrap();
        assert_eq!(r.residual_latency, 5.0);
        assert_eq!(s.dropped.len(), 3);
        // a middle phase with the same load is charged and delivered
        let (r, s) = pgsc_timeline(&dispatch(&[1, 0, 3]), &cfg).unwrap();
        assert_eq!(r.residual_latency, 10.0);
        assert!(s.dropped.is_empty());
    }

    #[test]
    fn self_censor_extracts_only_what_fits() {
        let cfg = LatencyConfig {
            late_policy: LatePolicy::SelfCensor,
            ..LatencyConfig::default()
        };
        let (r, s) = pgsc_timeline(&dispatch(&[1, 0, 0, 0, 0, 3]), &cfg).unwrap();
        assert_eq!(r.residual_latency, 5.0);
        assert!(s.dropped.is_empty());
        assert_eq!(s.arrivals[&50].len(), 2);
    }

    #[test]
    fn wasted_extraction_is_charged() {
        let cfg = LatencyConfig::default();
        let phases = vec![
            PhaseDispatch { unit_ids: vec![0], wasted: 1 },
            PhaseDispatch { unit_ids: vec![1], wasted: 2 },
        ];
        let (r, s) = pgsc_timeline(&phases, &cfg).unwrap();
        assert_eq!(r.residual_latency, 10.0 + 5.0);
        assert_eq!(s.delivered().len(), 2);
    }

    #[test]
    fn timeline_csv_has_fixed_columns() {
        let cfg = LatencyConfig::default();
        let phases = dispatch(&[1, 3]);
        let (r, s) = pgsc_timeline(&phases, &cfg).unwrap();
        let mut buf = Vec::new();
        write_timeline_csv(&mut buf, &phases, &r, &s, &cfg).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "phase,n_t,overshoot,arrivals\n0,1,5,0\n1,3,5,1 2 3\n");
    }

    #[test]
    fn config_validation() {
        let bad = LatencyConfig { segment: 7, ..LatencyConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LatencyConfig { tau_e: 0.0, ..LatencyConfig::default() };
        assert!(bad.validate().is_err());
    }
}
