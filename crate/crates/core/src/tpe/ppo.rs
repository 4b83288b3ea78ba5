use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{masked_policy_distribution, state_dim, EnvConfig};
use super::rollout::{derive_seed, mean_se, rollout, Actor, EpisodeRecord};
use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use crate::diffusion::{NoisePredictor, SamplingConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::toyworld::WorldSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Clip range η of the probability ratio.
    pub clip: f64,
    /// Entropy coefficient ξ.
    pub entropy_coef: f64,
    pub episodes_per_batch: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub iterations: usize,
    pub hidden: usize,
    pub max_grad_norm: f64,
    pub masked: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 0.009,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            episodes_per_batch: 32,
            epochs: 4,
            minibatch: 64,
            iterations: 150,
            hidden: 64,
            max_grad_norm: 0.5,
            masked: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.lambda)
            && self.clip > 0.0
            && self.entropy_coef >= 0.0
            && self.episodes_per_batch > 0
            && self.epochs > 0
            && self.minibatch > 0
            && self.hidden > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("invalid PPO settings {self:?}")))
        }
    }
}

/// Current policy π_φ, the rollout-time snapshot π_φ′, and the critic V_ϕ.
#[derive(Clone, Debug)]
pub struct PolicyCritic {
    pub policy: Mlp,
    pub old_policy: Mlp,
    pub critic: Mlp,
}

impl PolicyCritic {
    pub fn new(k_max: usize, n_e: usize, hidden: usize, seed: u64) -> Self {
        let s = state_dim(k_max, n_e);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = Mlp::new(&[s, hidden, hidden, 1 << k_max], Activation::Tanh, 0.01, &mut rng);
        let critic = Mlp::new(&[s, hidden, hidden, 1], Activation::Tanh, 1.0, &mut rng);
        Self { old_policy: policy.clone(), policy, critic }
    }

    pub fn snapshot(&mut self) {
        self.old_policy = self.policy.clone();
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, net) in [("policy", &self.policy), ("critic", &self.critic)] {
            let h = CheckpointHeader {
                format_version: 1,
                kind: name.into(),
                layers: net.sizes.clone(),
                activation: net.activation,
                n_params: net.num_params(),
                seed: 0,
                extra: extra.clone(),
            };
            write_checkpoint(&dir.join(format!("{name}.ckpt")), &h, &net.params)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let mut nets = Vec::new();
        let mut extra = serde_json::Value::Null;
        for name in ["policy", "critic"] {
            let (h, params) = read_checkpoint(&dir.join(format!("{name}.ckpt")))?;
            if h.kind != name || Mlp::count_params(&h.layers) != params.len() {
                return Err(Error::Checkpoint(format!("{name}.ckpt does not hold a {name} network")));
            }
            extra = h.extra;
            nets.push(Mlp { sizes: h.layers, activation: h.activation, params });
        }
        let critic = nets.pop().unwrap();
        let policy = nets.pop().unwrap();
        Ok((Self { old_policy: policy.clone(), policy, critic }, extra))
    }
}

/// `Â_t = Σ_l (γλ)^l δ_{t+l}` with `δ_t = r_t + γ V(s_{t+1}) - V(s_t)` and `V(s_L) = 0`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    adv
}

pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + gamma * g;
        out[t] = g;
    }
    out
}

/// One training example for the update.
#[derive(Clone, Debug)]
pub struct PpoSample {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PpoGrads {
    /// `-(clipped surrogate + ξ·entropy)`, averaged over the batch.
    pub policy_loss: f64,
    pub policy_grad: Vec<f64>,
    pub value_loss: f64,
    pub value_grad: Vec<f64>,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Losses and parameter gradients of the clipped PPO objective (with entropy bonus over
/// the unmasked actions) and of the critic's squared return error.
pub fn ppo_losses(policy: &Mlp, critic: &Mlp, batch: &[&PpoSample], clip: f64, entropy_coef: f64) -> Result<PpoGrads> {
    let b = batch.len();
    let sd = policy.input_dim();
    let na = policy.output_dim();
    let states: Vec<f64> = batch.iter().flat_map(|s| s.state.iter().copied()).collect();
    let pc = policy.forward_cached(&states, b);
    let vc = critic.forward_cached(&states, b);
    debug_assert_eq!(states.len(), b * sd);
    let mut g_logits = vec![0.0; b * na];
    let mut g_values = vec![0.0; b];
    let mut out = PpoGrads::default();
    for (i, s) in batch.iter().enumerate() {
        let p = masked_policy_distribution(&pc.output[i * na..(i + 1) * na], &s.mask)?;
        let logp = p[s.action].ln();
        let ratio = (logp - s.old_log_prob).exp();
        let a = s.advantage;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
        let surr = (ratio * a).min(clipped * a);
        // the unclipped branch carries the gradient unless the clip is binding
        let active = if a >= 0.0 { ratio <= 1.0 + clip } else { ratio >= 1.0 - clip };
        if !active {
            out.clip_fraction += 1.0;
        }
        let g_surr = if active { ratio * a } else { 0.0 };
        let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        out.policy_loss -= (surr + entropy_coef * h) / b as f64;
        out.entropy += h / b as f64;
        let g = &mut g_logits[i * na..(i + 1) * na];
        for j in 0..na {
            if p[j] == 0.0 {
                continue;
            }
            let dlogp = if j == s.action { 1.0 } else { 0.0 } - p[j];
            let dh = -p[j] * (p[j].ln() + h);
            g[j] = -(g_surr * dlogp + entropy_coef * dh) / b as f64;
        }
        let v = vc.output[i];
        out.value_loss += (v - s.ret).powi(2) / b as f64;
        g_values[i] = 2.0 * (v - s.ret) / b as f64;
    }
    out.clip_fraction /= b as f64;
    if !out.policy_loss.is_finite() || !out.value_loss.is_finite() {
        return Err(Error::NonFiniteLoss(if out.policy_loss.is_finite() { out.value_loss } else { out.policy_loss }));
    }
    out.policy_grad = policy.backward(&pc, &g_logits);
    out.value_grad = critic.backward(&vc, &g_values);
    Ok(out)
}

/// Builds update samples from finished episodes: GAE advantages (normalized over the
/// batch) and Monte-Carlo discounted returns as critic targets.
pub fn build_samples(records: &[EpisodeRecord], gamma: f64, lambda: f64) -> Vec<PpoSample> {
    let mut samples = Vec::new();
    for r in records {
        let rewards = r.rewards();
        let values: Vec<f64> = r.transitions.iter().map(|t| t.value).collect();
        let adv = gae_advantages(&rewards, &values, gamma, lambda);
        let ret = discounted_returns(&rewards, gamma);
        for (k, t) in r.transitions.iter().enumerate() {
            samples.push(PpoSample {
                state: t.state.clone(),
                mask: t.mask.clone(),
                action: t.action,
                old_log_prob: t.log_prob,
                advantage: adv[k],
                ret: ret[k],
            });
        }
    }
    let (m, _) = mean_se(&samples.iter().map(|s| s.advantage).collect::<Vec<_>>());
    let sd = (samples.iter().map(|s| (s.advantage - m).powi(2)).sum::<f64>() / samples.len().max(1) as f64).sqrt();
    for s in samples.iter_mut() {
        s.advantage = (s.advantage - m) / (sd + 1e-8);
    }
    samples
}

pub struct PpoOptimizers {
    pub policy: Adam,
    pub critic: Adam,
}

impl PpoOptimizers {
    pub fn new(pc: &PolicyCritic, lr: f64) -> Self {
        Self {
            policy: Adam::new(pc.policy.num_params(), lr),
            critic: Adam::new(pc.critic.num_params(), lr),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Several epochs of minibatch updates on one batch of episodes.
pub fn ppo_update(
    pc: &mut PolicyCritic,
    opt: &mut PpoOptimizers,
    records: &[EpisodeRecord],
    cfg: &PpoConfig,
    seed: u64,
) -> Result<UpdateStats> {
    if records.is_empty() {
        return Err(Error::InvalidRequest("no episodes to learn from".into()));
    }
    let samples = build_samples(records, cfg.gamma, cfg.lambda);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<&PpoSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let g = ppo_losses(&pc.policy, &pc.critic, &batch, cfg.clip, cfg.entropy_coef)?;
            opt.policy.step(&mut pc.policy.params, &g.policy_grad, Some(cfg.max_grad_norm));
            opt.critic.step(&mut pc.critic.params, &g.value_grad, Some(cfg.max_grad_norm));
            stats.policy_loss += g.policy_loss;
            stats.value_loss += g.value_loss;
            stats.entropy += g.entropy;
            stats.clip_fraction += g.clip_fraction;
            count += 1.0;
        }
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.entropy /= count;
    stats.clip_fraction /= count;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub mean_return: f64,
    pub mean_score: f64,
    pub mean_residual_latency: f64,
    pub entropy: f64,
}

pub fn write_curve_csv<W: std::io::Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a policy and critic with PPO; returns them with the per-iteration curve.
pub fn train_policy(
    model: &dyn NoisePredictor,
    world: &WorldSpec,
    env: &EnvConfig,
    sampling: &SamplingConfig,
    cfg: &PpoConfig,
    mut on_iter: impl FnMut(&CurveRow),
) -> Result<(PolicyCritic, Vec<CurveRow>)> {
    cfg.validate()?;
    env.validate(sampling)?;
    let mut pc = PolicyCritic::new(world.k_max(), world.table.n_e, cfg.hidden, derive_seed(&[cfg.seed, 0]));
    let mut opt = PpoOptimizers::new(&pc, cfg.lr);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        pc.snapshot();
        let actor = Actor::Learned {
            policy: &pc.old_policy,
            critic: Some(&pc.critic),
            masked: cfg.masked,
            greedy: false,
        };
        let records = rollout(&actor, model, world, env, sampling, cfg.episodes_per_batch, derive_seed(&[cfg.seed, 1, it as u64]))?;
        let n = records.len() as f64;
        let steps: usize = records.iter().map(|r| r.transitions.len()).sum();
        let row = CurveRow {
            iteration: it,
            mean_return: records.iter().map(|r| r.discounted_return(cfg.gamma)).sum::<f64>() / n,
            mean_score: records.iter().map(|r| r.score).sum::<f64>() / n,
            mean_residual_latency: records.iter().map(|r| r.residual_latency).sum::<f64>() / n,
            entropy: records.iter().flat_map(|r| r.transitions.iter().map(|t| t.entropy)).sum::<f64>() / steps as f64,
        };
        on_iter(&row);
        curve.push(row);
        ppo_update(&mut pc, &mut opt, &records, cfg, derive_seed(&[cfg.seed, 2, it as u64]))?;
    }
    Ok((pc, curve))
}
