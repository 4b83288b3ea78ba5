use std::collections::BTreeSet;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::NoisePredictor;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::semunits::UnitTable;
use crate::timeline::ArrivalSchedule;
use crate::toyworld::score_ids;

/// How long the semantic-difference correction stays on after an arrival.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScdSpan {
    /// Every step of the segment that starts at the arrival.
    Segment,
    /// Only the first step of that segment.
    FirstStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    #[serde(rename = "M")]
    pub m_steps: usize,
    pub segment: usize,
    pub guidance: f64,
    /// Intervention factor of the semantic-difference correction; 0 disables it.
    pub alpha: f64,
    pub scd_span: ScdSpan,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            m_steps: 60,
            segment: 10,
            guidance: 2.0,
            alpha: 0.0,
            scd_span: ScdSpan::Segment,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.m_steps == 0 || self.segment == 0 || !self.m_steps.is_multiple_of(self.segment) {
            return Err(Error::ConfigInvalid(format!(
                "M = {} must be a positive multiple of segment = {}",
                self.m_steps, self.segment
            )));
        }
        if self.m_steps > sched.t_max() {
            return Err(Error::ConfigInvalid("more sampling steps than diffusion steps".into()));
        }
        if !self.guidance.is_finite() || !self.alpha.is_finite() {
            return Err(Error::ConfigInvalid("guidance and alpha must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Cfg,
    Scd,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::Scd => "scd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub x: Vec<f64>,
    /// Position in the sampling sub-sequence.
    pub step_index: usize,
    pub t: usize,
    pub received: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub t: usize,
    pub arrivals: Vec<usize>,
    pub condition: Vec<usize>,
    pub guidance_mode: GuidanceMode,
    pub score_of_x0hat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingOutcome {
    pub x0: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

/// `x_t = √ᾱ_t x_0 + √(1-ᾱ_t) noise`.
pub fn forward_noise(x0: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar_at(t);
    Ok(x0.iter().zip(noise).map(|(x, n)| ab.sqrt() * x + (1.0 - ab).sqrt() * n).collect())
}

/// `ε_c + w (ε_c - ε_u)`.
pub fn combine_cfg(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Vec<f64> {
    if w == 0.0 {
        return eps_cond.to_vec();
    }
    eps_cond.iter().zip(eps_uncond).map(|(c, u)| c + w * (c - u)).collect()
}

/// `ε̃ + α (ε_new - ε_prev)`.
pub fn combine_scd(eps_guided: &[f64], eps_new: &[f64], eps_prev: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return eps_guided.to_vec();
    }
    eps_guided
        .iter()
        .zip(eps_new.iter().zip(eps_prev))
        .map(|(g, (n, p))| g + alpha * (n - p))
        .collect()
}

pub fn cfg_noise(model: &dyn NoisePredictor, x: &[f64], cond: &[f64], t: usize, w: f64) -> Vec<f64> {
    let d = model.dim();
    if w == 0.0 {
        return model.predict(x, cond, t);
    }
    let xs = [x, x].concat();
    let cs = [cond, &vec![0.0; d][..]].concat();
    let e = model.predict(&xs, &cs, t);
    combine_cfg(&e[..d], &e[d..], w)
}

#[allow(clippy::too_many_arguments)]
pub fn scd_noise(
    model: &dyn NoisePredictor,
    table: &UnitTable,
    x: &[f64],
    combined: &BTreeSet<usize>,
    new: &BTreeSet<usize>,
    previous: &BTreeSet<usize>,
    t: usize,
    w: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    if previous.union(new).copied().collect::<BTreeSet<_>>() != *combined {
        return Err(Error::InconsistentConditionSets);
    }
    let guided = cfg_noise(model, x, &table.embedding_of(combined), t, w);
    if alpha == 0.0 {
        return Ok(guided);
    }
    let d = model.dim();
    let xs = [x, x].concat();
    let cs = [table.embedding_of(new), table.embedding_of(previous)].concat();
    let e = model.predict(&xs, &cs, t);
    Ok(combine_scd(&guided, &e[..d], &e[d..], alpha))
}

/// Clean-sample estimate implied by `ε̂` at `ᾱ`.
pub fn predict_x0(x: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    x.iter().zip(eps).map(|(x, e)| (x - (1.0 - alpha_bar).sqrt() * e) / alpha_bar.sqrt()).collect()
}

/// Deterministic DDIM move from `ᾱ_from` to `ᾱ_to`.
pub fn ddim_update(x: &[f64], eps: &[f64], ab_from: f64, ab_to: f64) -> Vec<f64> {
    if ab_from == ab_to {
        return x.to_vec();
    }
    predict_x0(x, eps, ab_from)
        .iter()
        .zip(eps)
        .map(|(x0, e)| ab_to.sqrt() * x0 + (1.0 - ab_to).sqrt() * e)
        .collect()
}

pub fn ddim_step(state: &SamplerState, eps: &[f64], sched: &NoiseSchedule, from_t: usize, to_t: usize) -> Result<SamplerState> {
    if to_t >= from_t {
        return Err(Error::StepOrderViolation { from: from_t, to: to_t });
    }
    sched.check_step(from_t)?;
    let x = ddim_update(&state.x, eps, sched.alpha_bar_at(from_t), sched.alpha_bar_at(to_t));
    Ok(SamplerState {
        x,
        step_index: state.step_index + 1,
        t: to_t,
        received: state.received.clone(),
    })
}

/// Standard normal starting latent for a seed.
pub fn initial_noise(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Clone, Debug)]
pub struct SamplingJob<'a> {
    pub arrivals: &'a ArrivalSchedule,
    pub x_init: Vec<f64>,
    /// Ids the trace scores intermediate estimates against; defaults to all delivered units.
    pub requested: Option<Vec<usize>>,
}

struct Correction {
    new: Vec<f64>,
    prev: Vec<f64>,
    start: usize,
}

struct JobState {
    x: Vec<f64>,
    received: BTreeSet<usize>,
    cond: Vec<f64>,
    correction: Option<Correction>,
    /// Arrival batches before step M, in step order.
    batches: Vec<(usize, BTreeSet<usize>)>,
    next_batch: usize,
    requested: Vec<usize>,
    trace: Vec<TraceRow>,
}

fn arrival_batches(s: &ArrivalSchedule, cfg: &SamplingConfig) -> Result<Vec<(usize, BTreeSet<usize>)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (&step, ids) in &s.arrivals {
        if ids.is_empty() || step >= cfg.m_steps {
            continue;
        }
        if step % cfg.segment != 0 {
            return Err(Error::InvalidSchedule(format!("arrival at step {step} is not a segment boundary")));
        }
        if ids.iter().any(|id| !seen.insert(*id)) {
            return Err(Error::InvalidSchedule("a unit arrives twice".into()));
        }
        out.push((step, ids.clone()));
    }
    match out.first() {
        None => Err(Error::EmptySchedule),
        Some((s, _)) if *s != 0 => Err(Error::InvalidSchedule(format!(
            "denoising starts with the first arrival, which must be at step 0 (found {s})"
        ))),
        _ => Ok(out),
    }
}

/// Runs every job through the segmented sampler with one batched model call per step.
/// Each job's result equals what it would produce alone.
pub fn sample_batch(
    model: &dyn NoisePredictor,
    table: &UnitTable,
    jobs: &[SamplingJob<'_>],
    cfg: &SamplingConfig,
    with_trace: bool,
) -> Result<Vec<SamplingOutcome>> {
    let sched = model.schedule();
    cfg.validate(sched)?;
    let d = model.dim();
    let ts = sched.sampling_timesteps(cfg.m_steps);
    let mut states = Vec::with_capacity(jobs.len());
    for job in jobs {
        if job.x_init.len() != d {
            return Err(Error::InvalidRequest("initial latent has the wrong dimension".into()));
        }
        let batches = arrival_batches(job.arrivals, cfg)?;
        let requested = job.requested.clone().unwrap_or_else(|| batches.iter().flat_map(|(_, s)| s.iter().copied()).collect());
        states.push(JobState {
            x: job.x_init.clone(),
            received: BTreeSet::new(),
            cond: vec![0.0; d],
            correction: None,
            batches,
            next_batch: 0,
            requested,
            trace: Vec::new(),
        });
    }
    let zeros = vec![0.0; d];
    let use_uncond = cfg.guidance != 0.0;
    for i in 0..cfg.m_steps {
        let (t_from, t_to) = (ts[i], ts[i + 1]);
        let mut xs = Vec::new();
        let mut cs = Vec::new();
        let mut arrivals_now = Vec::with_capacity(states.len());
        let mut active = Vec::with_capacity(states.len());
        for st in states.iter_mut() {
            let mut arrived = Vec::new();
            if let Some((step, ids)) = st.batches.get(st.next_batch) {
                if *step == i {
                    let prev = st.received.clone();
                    st.received.extend(ids.iter().copied());
                    st.cond = table.embedding_of(&st.received);
                    st.correction = (cfg.alpha != 0.0 && !prev.is_empty()).then(|| Correction {
                        new: table.embedding_of(ids),
                        prev: table.embedding_of(&prev),
                        start: i,
                    });
                    arrived = ids.iter().copied().collect();
                    st.next_batch += 1;
                }
            }
            let on = match &st.correction {
                Some(c) => match cfg.scd_span {
                    ScdSpan::Segment => i < c.start + cfg.segment,
                    ScdSpan::FirstStep => i == c.start,
                },
                None => false,
            };
            xs.extend_from_slice(&st.x);
            cs.extend_from_slice(&st.cond);
            if use_uncond {
                xs.extend_from_slice(&st.x);
                cs.extend_from_slice(&zeros);
            }
            if on {
                let c = st.correction.as_ref().unwrap();
                xs.extend_from_slice(&st.x);
                cs.extend_from_slice(&c.new);
                xs.extend_from_slice(&st.x);
                cs.extend_from_slice(&c.prev);
            }
            arrivals_now.push(arrived);
            active.push(on);
        }
        let eps_all = model.predict(&xs, &cs, t_from);
        let (ab_from, ab_to) = (sched.alpha_bar_at(t_from), sched.alpha_bar_at(t_to));
        let mut off = 0;
        for ((st, on), arrived) in states.iter_mut().zip(active).zip(arrivals_now) {
            let mut take = || {
                let s = &eps_all[off * d..(off + 1) * d];
                off += 1;
                s
            };
            let ec = take();
            let guided = if use_uncond { combine_cfg(ec, take(), cfg.guidance) } else { ec.to_vec() };
            let eps = if on {
                let en = take();
                let ep = take();
                combine_scd(&guided, en, ep, cfg.alpha)
            } else {
                guided
            };
            if with_trace {
                let x0hat = predict_x0(&st.x, &eps, ab_from);
                st.trace.push(TraceRow {
                    step: i,
                    t: t_from,
                    arrivals: arrived,
                    condition: st.received.iter().copied().collect(),
                    guidance_mode: if on { GuidanceMode::Scd } else { GuidanceMode::Cfg },
                    score_of_x0hat: score_ids(table, &x0hat, &st.requested).ok(),
                });
            }
            st.x = ddim_update(&st.x, &eps, ab_from, ab_to);
        }
    }
    Ok(states
        .into_iter()
        .map(|s| SamplingOutcome { x0: s.x, trace: s.trace })
        .collect())
}

/// Parallel version of [`sample_batch`] over fixed-size chunks of jobs.
pub fn sample_many(
    model: &dyn NoisePredictor,
    table: &UnitTable,
    jobs: &[SamplingJob<'_>],
    cfg: &SamplingConfig,
) -> Result<Vec<Vec<f64>>> {
    let parts: Vec<Result<Vec<SamplingOutcome>>> = jobs
        .par_chunks(64)
        .map(|c| sample_batch(model, table, c, cfg, false))
        .collect();
    let mut out = Vec::with_capacity(jobs.len());
    for p in parts {
        out.extend(p?.into_iter().map(|o| o.x0));
    }
    Ok(out)
}

pub fn run_segmented_sampling(
    model: &dyn NoisePredictor,
    table: &UnitTable,
    schedule: &ArrivalSchedule,
    cfg: &SamplingConfig,
    x_init: Vec<f64>,
    requested: Option<Vec<usize>>,
) -> Result<SamplingOutcome> {
    let job = SamplingJob { arrivals: schedule, x_init, requested };
    Ok(sample_batch(model, table, &[job], cfg, true)?.remove(0))
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// CSV with columns `step,arrivals,guidance_mode,score_of_x0hat`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "arrivals", "guidance_mode", "score_of_x0hat"])?;
    for r in trace {
        w.write_record([
            r.step.to_string(),
            join_ids(&r.arrivals),
            r.guidance_mode.as_str().to_string(),
            r.score_of_x0hat.map(|s| format!("{s:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
