use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleSpec};
use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::toyworld::{sample_training_pair, WorldSpec};

/// Anything that predicts the noise in a batch of latents at one timestep.
///
/// `xs` and `conds` are `batch x dim` row-major; the null condition is the zero row.
/// Implementations must treat rows independently so batching never changes a result.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;
    fn predict(&self, xs: &[f64], conds: &[f64], t: usize) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub dim: usize,
    pub time_dim: usize,
    /// `E‖x_0‖²/D` of the training data, used for input preconditioning.
    pub data_moment: f64,
    /// Condition embeddings are divided by this before entering the network.
    pub cond_scale: f64,
    pub schedule: ScheduleSpec,
    pub world_seed: u64,
}

/// ε-predictor `ε_θ(x_t, t, y)`: an MLP on `[x_t / c_in(t), y / cond_scale, emb(t)]`.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub net: Mlp,
    pub meta: DenoiserMeta,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step; cosine decay in between.
    pub lr_final: f64,
    pub hidden: usize,
    pub time_dim: usize,
    pub p_uncond: f64,
    pub max_grad_norm: f64,
    pub heldout_size: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            lr: 1e-3,
            lr_final: 5e-5,
            hidden: 128,
            time_dim: 16,
            p_uncond: 0.1,
            max_grad_norm: 1.0,
            heldout_size: 2048,
            log_every: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

/// A fixed set of noised examples.
pub struct NoisedBatch {
    pub x0: Vec<f64>,
    pub cond: Vec<f64>,
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
}

impl NoisedBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Draws `n` training examples, nulling each condition with probability `p_uncond`.
    pub fn draw<R: Rng>(world: &WorldSpec, n: usize, t_max: usize, p_uncond: f64, rng: &mut R) -> Self {
        let pairs: Vec<_> = (0..n).map(|_| sample_training_pair(world, rng)).collect();
        Self::from_pairs(world, &pairs, t_max, p_uncond, rng)
    }

    pub fn from_pairs<R: Rng>(
        world: &WorldSpec,
        pairs: &[(Vec<f64>, BTreeSet<usize>)],
        t_max: usize,
        p_uncond: f64,
        rng: &mut R,
    ) -> Self {
        let d = world.dim();
        let mut b = Self {
            x0: Vec::with_capacity(pairs.len() * d),
            cond: Vec::with_capacity(pairs.len() * d),
            t: Vec::with_capacity(pairs.len()),
            eps: Vec::with_capacity(pairs.len() * d),
        };
        for (x0, prompt) in pairs {
            b.x0.extend_from_slice(x0);
            if rng.gen::<f64>() < p_uncond {
                b.cond.extend(std::iter::repeat_n(0.0, d));
            } else {
                b.cond.extend(world.table.embedding_of(prompt));
            }
            b.t.push(rng.gen_range(1..=t_max));
            for _ in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                b.eps.push(z);
            }
        }
        b
    }
}

pub fn time_embedding(t: usize, time_dim: usize) -> impl Iterator<Item = f64> {
    let half = time_dim / 2;
    (0..half).flat_map(move |j| {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let a = t as f64 * freq;
        [a.sin(), a.cos()]
    })
}

impl DenoiserModel {
    pub fn new(world: &WorldSpec, schedule: NoiseSchedule, hidden: usize, time_dim: usize, seed: u64) -> Self {
        let d = world.dim();
        let meta = DenoiserMeta {
            dim: d,
            time_dim,
            data_moment: world.data_second_moment(),
            cond_scale: world.table.max_magnitude(),
            schedule: schedule.spec,
            world_seed: world.seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[2 * d + time_dim, hidden, hidden, d], Activation::Silu, 0.1, &mut rng);
        Self { net, meta, schedule, seed }
    }

    fn c_in(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar_at(t);
        (ab * self.meta.data_moment + 1.0 - ab).sqrt()
    }

    fn features(&self, xs: &[f64], conds: &[f64], ts: &[usize]) -> Vec<f64> {
        let d = self.meta.dim;
        let mut out = Vec::with_capacity(ts.len() * self.net.input_dim());
        for (r, &t) in ts.iter().enumerate() {
            let c = self.c_in(t);
            out.extend(xs[r * d..(r + 1) * d].iter().map(|x| x / c));
            out.extend(conds[r * d..(r + 1) * d].iter().map(|y| y / self.meta.cond_scale));
            out.extend(time_embedding(t, self.meta.time_dim));
        }
        out
    }

    fn noised_inputs(&self, b: &NoisedBatch) -> Vec<f64> {
        let d = self.meta.dim;
        let mut xt = Vec::with_capacity(b.x0.len());
        for (r, &t) in b.t.iter().enumerate() {
            let ab = self.schedule.alpha_bar_at(t);
            let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            for i in r * d..(r + 1) * d {
                xt.push(s * b.x0[i] + n * b.eps[i]);
            }
        }
        xt
    }

    /// Mean squared ε-error per coordinate, without gradients.
    pub fn loss(&self, b: &NoisedBatch) -> f64 {
        let xt = self.noised_inputs(b);
        let pred = self.net.forward(&self.features(&xt, &b.cond, &b.t), b.len());
        pred.iter().zip(&b.eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / b.eps.len() as f64
    }

    /// Loss and its gradient with respect to the flat parameter vector.
    pub fn loss_and_grad(&self, b: &NoisedBatch) -> (f64, Vec<f64>) {
        let xt = self.noised_inputs(b);
        let cache = self.net.forward_cached(&self.features(&xt, &b.cond, &b.t), b.len());
        let n = b.eps.len() as f64;
        let mut loss = 0.0;
        let grad_out: Vec<f64> = cache
            .output
            .iter()
            .zip(&b.eps)
            .map(|(p, e)| {
                loss += (p - e).powi(2);
                2.0 * (p - e) / n
            })
            .collect();
        (loss / n, self.net.backward(&cache, &grad_out))
    }

    fn loss_and_grad_chunked(&self, b: &NoisedBatch, chunk: usize) -> (f64, Vec<f64>) {
        let d = self.meta.dim;
        let n = b.len();
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();
        let parts: Vec<(f64, Vec<f64>, usize)> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + chunk).min(n);
                let sub = NoisedBatch {
                    x0: b.x0[s * d..e * d].to_vec(),
                    cond: b.cond[s * d..e * d].to_vec(),
                    t: b.t[s..e].to_vec(),
                    eps: b.eps[s * d..e * d].to_vec(),
                };
                let (l, g) = self.loss_and_grad(&sub);
                (l, g, e - s)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.net.num_params()];
        for (l, g, rows) in parts {
            let w = rows as f64 / n as f64;
            loss += l * w;
            grad.iter_mut().zip(&g).for_each(|(a, x)| *a += w * x);
        }
        (loss, grad)
    }

    /// One optimizer step on a batch of `(x_0, prompt)` pairs; returns the batch loss.
    pub fn train_step<R: Rng>(
        &mut self,
        opt: &mut Adam,
        world: &WorldSpec,
        pairs: &[(Vec<f64>, BTreeSet<usize>)],
        p_uncond: f64,
        max_grad_norm: Option<f64>,
        rng: &mut R,
    ) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::InvalidRequest("empty training batch".into()));
        }
        let batch = NoisedBatch::from_pairs(world, pairs, self.schedule.t_max(), p_uncond, rng);
        let (loss, grad) = self.loss_and_grad_chunked(&batch, 32);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        opt.step(&mut self.net.params, &grad, max_grad_norm);
        Ok(loss)
    }

    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: 1,
            kind: "denoiser".into(),
            layers: self.net.sizes.clone(),
            activation: self.net.activation,
            n_params: self.net.num_params(),
            seed: self.seed,
            extra: serde_json::to_value(&self.meta).expect("meta serializes"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.checkpoint_header(), &self.net.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = read_checkpoint(path)?;
        if h.kind != "denoiser" {
            return Err(Error::Checkpoint(format!("expected a denoiser checkpoint, found {}", h.kind)));
        }
        let meta: DenoiserMeta = serde_json::from_value(h.extra)?;
        if h.layers.len() < 2 || h.layers[0] != 2 * meta.dim + meta.time_dim || *h.layers.last().unwrap() != meta.dim {
            return Err(Error::Checkpoint("layer shapes do not match the denoiser metadata".into()));
        }
        if Mlp::count_params(&h.layers) != params.len() {
            return Err(Error::Checkpoint("parameter count does not match layer shapes".into()));
        }
        let schedule = NoiseSchedule::new(meta.schedule)?;
        let net = Mlp {
            sizes: h.layers,
            activation: h.activation,
            params,
        };
        Ok(Self { net, meta, schedule, seed: h.seed })
    }
}

impl NoisePredictor for DenoiserModel {
    fn dim(&self) -> usize {
        self.meta.dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, xs: &[f64], conds: &[f64], t: usize) -> Vec<f64> {
        let batch = xs.len() / self.meta.dim;
        let ts = vec![t; batch];
        self.net.forward(&self.features(xs, conds, &ts), batch)
    }
}

/// Trains a fresh denoiser on the world. Parameters are rounded to `f32` at the end so
/// the in-memory model equals what a checkpoint round trip yields.
pub fn train_denoiser(
    world: &WorldSpec,
    schedule: NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    mut on_log: impl FnMut(&LossPoint),
) -> Result<(DenoiserModel, Vec<LossPoint>)> {
    if cfg.steps == 0 || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.p_uncond) {
        return Err(Error::ConfigInvalid("denoiser training needs steps, a batch size and p_uncond in [0,1)".into()));
    }
    let mut model = DenoiserModel::new(world, schedule, cfg.hidden, cfg.time_dim, cfg.seed);
    let mut opt = Adam::new(model.net.num_params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut held_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    held_rng.set_stream(2);
    let heldout = NoisedBatch::draw(world, cfg.heldout_size, model.schedule.t_max(), cfg.p_uncond, &mut held_rng);

    let mut curve = Vec::new();
    let (mut run_loss, mut run_n) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let progress = (step - 1) as f64 / cfg.steps.max(2).saturating_sub(1) as f64;
        opt.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos());
        let pairs: Vec<_> = (0..cfg.batch_size).map(|_| sample_training_pair(world, &mut rng)).collect();
        let loss = model.train_step(&mut opt, world, &pairs, cfg.p_uncond, Some(cfg.max_grad_norm), &mut rng)?;
        run_loss += loss;
        run_n += 1;
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            let point = LossPoint {
                step,
                train_loss: run_loss / run_n as f64,
                heldout_loss: model.loss(&heldout),
            };
            on_log(&point);
            curve.push(point);
            run_loss = 0.0;
            run_n = 0;
        }
    }
    model.net.round_to_f32();
    Ok((model, curve))
}
