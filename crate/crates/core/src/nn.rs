//! Fully connected networks with hand-derived backpropagation.
//!
//! Parameters of all layers live in one flat vector (per layer: weights `out x in`
//! row-major, then biases) so optimizers and checkpoints handle them uniformly.
//! Every batched routine processes rows independently with a fixed summation order,
//! so a row's output does not depend on which batch it was evaluated in.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths, input first.
    pub sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(skip)]
    pub params: Vec<f64>,
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
pub struct ForwardCache {
    batch: usize,
    /// Layer inputs: `inputs[0]` is the network input, `inputs[l]` the activation after layer `l-1`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        s[0] += a[i] * b[i];
        s[1] += a[i + 1] * b[i + 1];
        s[2] += a[i + 2] * b[i + 2];
        s[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

impl Mlp {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero; the last layer is scaled by `out_gain`.
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, out_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least an input and an output width");
        let mut params = Vec::with_capacity(Self::count_params(sizes));
        let n_layers = sizes.len() - 1;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let std = (1.0 / fan_in as f64).sqrt() * if l + 1 == n_layers { out_gain } else { 1.0 };
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(rng);
                params.push(z * std);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            sizes: sizes.to_vec(),
            activation,
            params,
        }
    }

    pub fn count_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let w_off: usize = Self::count_params(&self.sizes[..=l]);
        (w_off, w_off + self.sizes[l] * self.sizes[l + 1])
    }

    fn linear(&self, l: usize, input: &[f64], batch: usize) -> Vec<f64> {
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let (w_off, b_off) = self.layer_offsets(l);
        let w = &self.params[w_off..b_off];
        let b = &self.params[b_off..b_off + fo];
        let mut out = vec![0.0; batch * fo];
        for r in 0..batch {
            let x = &input[r * fi..(r + 1) * fi];
            let o = &mut out[r * fo..(r + 1) * fo];
            for j in 0..fo {
                o[j] = dot4(x, &w[j * fi..(j + 1) * fi]) + b[j];
            }
        }
        out
    }

    /// Batched forward pass; `input` is `batch x input_dim` row-major.
    pub fn forward(&self, input: &[f64], batch: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), batch * self.input_dim());
        let n_layers = self.sizes.len() - 1;
        let mut h = self.linear(0, input, batch);
        for l in 1..n_layers {
            h.iter_mut().for_each(|z| *z = self.activation.apply(*z));
            h = self.linear(l, &h, batch);
        }
        h
    }

    pub fn forward_cached(&self, input: &[f64], batch: usize) -> ForwardCache {
        debug_assert_eq!(input.len(), batch * self.input_dim());
        let n_layers = self.sizes.len() - 1;
        let mut inputs = vec![input.to_vec()];
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut z = self.linear(0, input, batch);
        for l in 1..n_layers {
            let a: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
            pre.push(z);
            z = self.linear(l, &a, batch);
            inputs.push(a);
        }
        ForwardCache {
            batch,
            inputs,
            pre,
            output: z,
        }
    }

    /// Gradient of a scalar loss with respect to all parameters, given `dL/d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> Vec<f64> {
        let batch = cache.batch;
        let n_layers = self.sizes.len() - 1;
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = grad_output.to_vec();
        for l in (0..n_layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let x = &cache.inputs[l];
            {
                let (gw, gb) = grad[w_off..b_off + fo].split_at_mut(b_off - w_off);
                for r in 0..batch {
                    let d = &delta[r * fo..(r + 1) * fo];
                    let xr = &x[r * fi..(r + 1) * fi];
                    for j in 0..fo {
                        let dj = d[j];
                        if dj == 0.0 {
                            continue;
                        }
                        gb[j] += dj;
                        let row = &mut gw[j * fi..(j + 1) * fi];
                        for (g, &xi) in row.iter_mut().zip(xr) {
                            *g += dj * xi;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[w_off..b_off];
            let z = &cache.pre[l - 1];
            let mut next = vec![0.0; batch * fi];
            for r in 0..batch {
                let d = &delta[r * fo..(r + 1) * fo];
                let nr = &mut next[r * fi..(r + 1) * fi];
                for j in 0..fo {
                    let dj = d[j];
                    if dj == 0.0 {
                        continue;
                    }
                    for (n, &wv) in nr.iter_mut().zip(&w[j * fi..(j + 1) * fi]) {
                        *n += dj * wv;
                    }
                }
                for (n, &zv) in nr.iter_mut().zip(&z[r * fi..(r + 1) * fi]) {
                    *n *= self.activation.derivative(zv);
                }
            }
            delta = next;
        }
        grad
    }

    /// Rounds every parameter to the nearest `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        self.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step along `grad`, optionally clipping the global gradient norm first.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], max_grad_norm: Option<f64>) {
        let scale = match max_grad_norm {
            Some(c) => {
                let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &[f64], batch: usize, target: &[f64]) -> f64 {
        let y = net.forward(x, batch);
        0.5 * y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Silu] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let net = Mlp::new(&[3, 5, 4, 2], act, 1.0, &mut rng);
            let x: Vec<f64> = (0..9).map(|_| StandardNormal.sample(&mut rng)).collect();
            let target: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let cache = net.forward_cached(&x, 3);
            let g_out: Vec<f64> = cache.output.iter().zip(&target).map(|(a, b)| a - b).collect();
            let g = net.backward(&cache, &g_out);
            let h = 1e-6;
            for i in 0..net.num_params() {
                let mut p = net.clone();
                p.params[i] += h;
                let lp = loss(&p, &x, 3, &target);
                p.params[i] -= 2.0 * h;
                let lm = loss(&p, &x, 3, &target);
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(g[i].abs()).max(1e-8);
                assert!((fd - g[i]).abs() / denom < 1e-5, "{act:?} param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn rows_are_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[7, 16, 16, 3], Activation::Silu, 1.0, &mut rng);
        let x: Vec<f64> = (0..7 * 5).map(|_| StandardNormal.sample(&mut rng)).collect();
        let all = net.forward(&x, 5);
        for r in 0..5 {
            let one = net.forward(&x[r * 7..(r + 1) * 7], 1);
            assert_eq!(&all[r * 3..(r + 1) * 3], one.as_slice());
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = p.clone();
            opt.step(&mut p, &g, None);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }
}
