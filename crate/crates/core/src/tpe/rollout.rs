use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::{action_mask, masked_policy_distribution, sample_index, EnvConfig, Episode, JointAction};
use crate::diffusion::{initial_noise, sample_many, NoisePredictor, SamplingConfig, SamplingJob};
use crate::error::Result;
use crate::nn::Mlp;
use crate::semunits::{Category, TaskRequest};
use crate::toyworld::{score_ids, WorldSpec};

/// Who picks the actions during a rollout.
#[derive(Clone, Copy, Debug)]
pub enum Actor<'a> {
    /// A policy network; `masked` selects the masked or the plain softmax.
    Learned { policy: &'a Mlp, critic: Option<&'a Mlp>, masked: bool, greedy: bool },
    /// Uniform over the valid actions.
    RandomValid,
    /// Uniform over all `2^K` actions, with unmasked semantics.
    RandomRaw,
    /// Every pending unit in the first phase: the conventional pipeline.
    AllAtOnce,
}

impl Actor<'_> {
    fn masked(&self) -> bool {
        !matches!(self, Actor::RandomRaw | Actor::Learned { masked: false, .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub episode: Episode,
    pub transitions: Vec<Transition>,
    pub score: f64,
    pub residual_latency: f64,
}

impl EpisodeRecord {
    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    /// `Σ_t γ^t r_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut g = 0.0;
        for t in self.transitions.iter().rev() {
            g = t.reward + gamma * g;
        }
        g
    }
}

/// Well-mixed 64-bit seed from a list of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn play<R: Rng>(actor: &Actor<'_>, request: TaskRequest, cfg: &EnvConfig, rng: &mut R) -> Result<(Episode, Vec<Transition>)> {
    let mut ep = Episode::new(request, cfg, actor.masked());
    let mut transitions = Vec::new();
    while !ep.done {
        let state = ep.state();
        let flat = state.flatten();
        let mask = ep.mask()?;
        let (action, log_prob, value, ent) = match actor {
            Actor::Learned { policy, critic, greedy, .. } => {
                let p = masked_policy_distribution(&policy.forward(&flat, 1), &mask)?;
                let a = if *greedy {
                    // first maximum, for determinism
                    (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best })
                } else {
                    sample_index(&p, rng)
                };
                let v = critic.map(|c| c.forward(&flat, 1)[0]).unwrap_or(0.0);
                (a, p[a].ln(), v, entropy(&p))
            }
            Actor::RandomValid | Actor::RandomRaw => {
                let valid: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
                let a = valid[rng.gen_range(0..valid.len())];
                let lp = -(valid.len() as f64).ln();
                (a, lp, 0.0, -lp)
            }
            Actor::AllAtOnce => {
                action_mask(&state)?;
                (state.pending_mask(), 0.0, 0.0, 0.0)
            }
        };
        let out = ep.step(JointAction { index: action })?;
        transitions.push(Transition {
            state: flat,
            mask,
            action,
            log_prob,
            value,
            reward: out.reward,
            entropy: ent,
        });
    }
    Ok((ep, transitions))
}

/// Plays `n` episodes on fresh requests and scores them with one batched sampler pass.
/// Episode `i` draws everything from the stream `derive_seed([seed, i])`, so results do
/// not depend on thread count.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    actor: &Actor<'_>,
    model: &dyn NoisePredictor,
    world: &WorldSpec,
    env: &EnvConfig,
    sampling: &SamplingConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    env.validate(sampling)?;
    let played: Vec<Result<(Episode, Vec<Transition>, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
            let req = TaskRequest::sample(&world.table, env.min_units, env.max_units, &mut rng)?;
            let x_init = initial_noise(rng.gen(), world.dim());
            let (ep, tr) = play(actor, req, env, &mut rng)?;
            Ok((ep, tr, x_init))
        })
        .collect();
    let mut played = played.into_iter().collect::<Result<Vec<_>>>()?;
    let outcomes = played.iter().map(|(ep, _, _)| ep.outcome()).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<SamplingJob> = played
        .iter()
        .zip(&outcomes)
        .filter_map(|((ep, _, x), o)| {
            o.schedule.as_ref().map(|s| SamplingJob {
                arrivals: s,
                x_init: x.clone(),
                requested: Some(ep.request.ids()),
            })
        })
        .collect();
    let mut samples = sample_many(model, &world.table, &jobs, sampling)?.into_iter();
    let mut records = Vec::with_capacity(n);
    for ((ep, mut tr, _), o) in played.drain(..).zip(outcomes) {
        let score = match o.schedule {
            Some(_) => score_ids(&world.table, &samples.next().expect("one sample per schedule"), &ep.request.ids())?,
            None => 0.0,
        };
        tr.last_mut().expect("episodes take at least one step").reward += env.score_weight * score;
        records.push(EpisodeRecord {
            episode: ep,
            transitions: tr,
            score,
            residual_latency: o.report.residual_latency,
        });
    }
    Ok(records)
}

/// Aggregate view of a set of episodes, mirroring what was transmitted when.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_score: f64,
    pub se_score: f64,
    pub mean_residual_latency: f64,
    /// Per category, how many units were delivered in each round (round = phase + 1).
    pub category_round_histogram: BTreeMap<String, Vec<usize>>,
    pub mean_round_by_category: BTreeMap<String, f64>,
    /// Per category, units never delivered in time.
    pub discard_composition: BTreeMap<String, usize>,
    /// `units_per_round_histogram[r][n]`: episodes that delivered `n` units in round `r + 1`.
    pub units_per_round_histogram: Vec<Vec<usize>>,
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn summarize(records: &[EpisodeRecord], gamma: f64, phases: usize, k_max: usize) -> EvalSummary {
    let mut hist: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut discard: BTreeMap<String, usize> = BTreeMap::new();
    for c in Category::ALL {
        hist.insert(c.name().into(), vec![0; phases]);
        discard.insert(c.name().into(), 0);
    }
    let mut per_round = vec![vec![0usize; k_max + 1]; phases];
    for r in records {
        let ep = &r.episode;
        let mut delivered_in = vec![0usize; phases];
        if let Ok(o) = ep.outcome() {
            if let Some(s) = o.schedule {
                for (phase, d) in ep.dispatches.iter().enumerate() {
                    for id in &d.unit_ids {
                        if s.delivered().contains(id) {
                            let cat = ep.request.units.iter().find(|u| u.id == *id).unwrap().category;
                            hist.get_mut(cat.name()).unwrap()[phase] += 1;
                            delivered_in[phase] += 1;
                        }
                    }
                }
            }
        }
        for (phase, n) in delivered_in.iter().enumerate() {
            per_round[phase][*n] += 1;
        }
        for id in ep.discarded() {
            let cat = ep.request.units.iter().find(|u| u.id == id).unwrap().category;
            *discard.get_mut(cat.name()).unwrap() += 1;
        }
    }
    let mean_round = hist
        .iter()
        .filter_map(|(k, v)| {
            let n: usize = v.iter().sum();
            (n > 0).then(|| (k.clone(), v.iter().enumerate().map(|(i, c)| (i + 1) as f64 * *c as f64).sum::<f64>() / n as f64))
        })
        .collect();
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let (mean_score, se_score) = mean_se(&scores);
    EvalSummary {
        episodes: records.len(),
        mean_return: mean_se(&records.iter().map(|r| r.discounted_return(gamma)).collect::<Vec<_>>()).0,
        mean_score,
        se_score,
        mean_residual_latency: mean_se(&records.iter().map(|r| r.residual_latency).collect::<Vec<_>>()).0,
        category_round_histogram: hist,
        mean_round_by_category: mean_round,
        discard_composition: discard,
        units_per_round_histogram: per_round,
    }
}
