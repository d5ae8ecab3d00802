//! Shared-representation network with a random-feature Gaussian-process
//! output layer, and its hand-written gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::Features;

/// Fully connected layer, `w` row-major `n_out x n_in`. `u` is the
/// persistent left singular vector estimate used for spectral
/// normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

impl Dense {
    fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (2.0 / n_in as f64).sqrt();
        let w = (0..n_in * n_out).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
        let mut u: Vec<f64> = (0..n_out).map(|_| StandardNormal.sample(rng)).collect();
        normalize(&mut u);
        Dense { n_in, n_out, w, b: vec![0.0; n_out], u }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.w.chunks_exact(self.n_in).zip(&self.b)) {
            *o = b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    /// Top singular value by `iters` power iterations warm-started from `u`.
    pub fn spectral_norm(&mut self, iters: usize) -> f64 {
        let mut v = vec![0.0; self.n_in];
        let mut sigma = 0.0;
        for _ in 0..iters.max(1) {
            v.iter_mut().for_each(|x| *x = 0.0);
            for (row, u) in self.w.chunks_exact(self.n_in).zip(&self.u) {
                for (acc, w) in v.iter_mut().zip(row) {
                    *acc += w * u;
                }
            }
            normalize(&mut v);
            for (u, row) in self.u.iter_mut().zip(self.w.chunks_exact(self.n_in)) {
                *u = row.iter().zip(&v).map(|(w, v)| w * v).sum();
            }
            sigma = normalize(&mut self.u);
        }
        sigma
    }

    /// Rescales the weights so the spectral norm estimate is at most
    /// `bound`; returns the estimate after rescaling.
    pub fn constrain(&mut self, bound: f64, iters: usize) -> f64 {
        let sigma = self.spectral_norm(iters);
        if sigma > bound {
            let s = bound / sigma;
            self.w.iter_mut().for_each(|w| *w *= s);
            bound
        } else {
            sigma
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub rows: usize,
    pub dim: usize,
    pub table: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub dense_inputs: usize,
    /// `(rows, dim)` per embedded slot.
    pub embeddings: Vec<(usize, usize)>,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    /// Identity skip connections around hidden layers after the first.
    pub residual: bool,
    pub rff_dim: usize,
    pub length_scale: f64,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub shape: NetworkShape,
    pub embeddings: Vec<Embedding>,
    pub layers: Vec<Dense>,
    /// Fixed random projection, row-major `rff_dim x hidden_units`.
    pub rff_w: Vec<f64>,
    pub rff_b: Vec<f64>,
    /// Output weights, row-major `heads x rff_dim`.
    pub beta: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `hs[0]` is the input; `hs[l + 1]` the output of hidden layer `l`.
    pub hs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub rff_pre: Vec<f64>,
    pub phi: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradients laid out like [`Network::params_mut`].
pub type Grads = Vec<Vec<f64>>;

impl Network {
    pub fn new(shape: NetworkShape, rng: &mut impl Rng) -> Self {
        let embeddings = shape
            .embeddings
            .iter()
            .map(|&(rows, dim)| Embedding {
                rows,
                dim,
                table: (0..rows * dim).map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, rng)).collect(),
            })
            .collect();
        let input = shape.dense_inputs + shape.embeddings.iter().map(|e| e.1).sum::<usize>();
        let mut layers = Vec::new();
        let mut n_in = input;
        for _ in 0..shape.hidden_layers {
            layers.push(Dense::new(n_in, shape.hidden_units, rng));
            n_in = shape.hidden_units;
        }
        let rff_w = (0..shape.rff_dim * n_in)
            .map(|_| Distribution::<f64>::sample(&StandardNormal, rng) / shape.length_scale)
            .collect();
        let rff_b = (0..shape.rff_dim).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
        let beta = vec![0.0; shape.heads * shape.rff_dim];
        Network { shape, embeddings, layers, rff_w, rff_b, beta }
    }

    pub fn input_dim(&self) -> usize {
        self.shape.dense_inputs + self.embeddings.iter().map(|e| e.dim).sum::<usize>()
    }

    fn skip(&self, l: usize) -> bool {
        self.shape.residual && l > 0 && self.layers[l].n_in == self.layers[l].n_out
    }

    pub fn forward(&self, f: &Features) -> Trace {
        let mut x = f.dense.clone();
        for (e, &t) in self.embeddings.iter().zip(&f.tokens) {
            x.extend_from_slice(&e.table[t * e.dim..(t + 1) * e.dim]);
        }
        let mut hs = vec![x];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = vec![0.0; layer.n_out];
            layer.apply(&hs[l], &mut a);
            let mut h: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
            if self.skip(l) {
                for (h, prev) in h.iter_mut().zip(&hs[l]) {
                    *h += prev;
                }
            }
            pre.push(a);
            hs.push(h);
        }
        let rep = hs.last().expect("input layer");
        let d = rep.len();
        let scale = (2.0 / self.shape.rff_dim as f64).sqrt();
        let rff_pre: Vec<f64> = self
            .rff_w
            .chunks_exact(d)
            .zip(&self.rff_b)
            .map(|(row, b)| b + row.iter().zip(rep).map(|(w, h)| w * h).sum::<f64>())
            .collect();
        let phi: Vec<f64> = rff_pre.iter().map(|p| scale * p.cos()).collect();
        let logits = self.beta.chunks_exact(self.shape.rff_dim).map(|b| b.iter().zip(&phi).map(|(b, p)| b * p).sum()).collect();
        Trace { hs, pre, rff_pre, phi, logits }
    }

    /// Trainable parameters: embedding tables, then each layer's weights and
    /// biases, then the output weights.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for e in &mut self.embeddings {
            v.push(&mut e.table);
        }
        for l in &mut self.layers {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        v.push(&mut self.beta);
        v
    }

    pub fn zero_grads(&self) -> Grads {
        let mut g: Grads = self.embeddings.iter().map(|e| vec![0.0; e.table.len()]).collect();
        for l in &self.layers {
            g.push(vec![0.0; l.w.len()]);
            g.push(vec![0.0; l.b.len()]);
        }
        g.push(vec![0.0; self.beta.len()]);
        g
    }

    /// Accumulates into `g` the gradient of `sum_k dz[k] * logits[k]`.
    pub fn backward(&self, f: &Features, t: &Trace, dz: &[f64], g: &mut Grads) {
        let r = self.shape.rff_dim;
        let n_emb = self.embeddings.len();
        let beta_g = g.last_mut().expect("beta gradient");
        let mut dphi = vec![0.0; r];
        for (k, &dzk) in dz.iter().enumerate() {
            if dzk == 0.0 {
                continue;
            }
            let row = &self.beta[k * r..(k + 1) * r];
            for j in 0..r {
                beta_g[k * r + j] += dzk * t.phi[j];
                dphi[j] += dzk * row[j];
            }
        }
        let scale = (2.0 / r as f64).sqrt();
        let d = t.hs.last().expect("representation").len();
        let mut dh = vec![0.0; d];
        for (j, row) in self.rff_w.chunks_exact(d).enumerate() {
            let dp = -dphi[j] * scale * t.rff_pre[j].sin();
            if dp != 0.0 {
                for (acc, w) in dh.iter_mut().zip(row) {
                    *acc += dp * w;
                }
            }
        }
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let da: Vec<f64> = dh.iter().zip(&t.pre[l]).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect();
            let (gw, rest) = g[n_emb + 2 * l..].split_at_mut(1);
            let gw = &mut gw[0];
            let gb = &mut rest[0];
            let x = &t.hs[l];
            let mut dx = if self.skip(l) { dh.clone() } else { vec![0.0; layer.n_in] };
            for (o, &dao) in da.iter().enumerate() {
                if dao == 0.0 {
                    continue;
                }
                gb[o] += dao;
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                let grow = &mut gw[o * layer.n_in..(o + 1) * layer.n_in];
                for i in 0..layer.n_in {
                    grow[i] += dao * x[i];
                    dx[i] += dao * row[i];
                }
            }
            dh = dx;
        }
        let mut off = self.shape.dense_inputs;
        for (e, (&tok, ge)) in self.embeddings.iter().zip(f.tokens.iter().zip(g.iter_mut())) {
            for j in 0..e.dim {
                ge[tok * e.dim + j] += dh[off + j];
            }
            off += e.dim;
        }
    }

    /// Rescales every hidden layer to spectral norm at most `bound`.
    pub fn constrain(&mut self, bound: f64, iters: usize) -> Vec<f64> {
        self.layers.iter_mut().map(|l| l.constrain(bound, iters)).collect()
    }
}

/// Numerically stable `log(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy of one example summed over heads, and its
/// derivative with respect to each logit.
pub fn weighted_bce(logits: &[f64], labels: &[bool], weights: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut dz = Vec::with_capacity(logits.len());
    for ((&z, &y), &w) in logits.iter().zip(labels).zip(weights) {
        let y = if y { 1.0 } else { 0.0 };
        loss += w * (softplus(z) - y * z);
        dz.push(w * (sigmoid(z) - y));
    }
    (loss, dz)
}

/// Adam with the usual defaults.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(lr: f64, shapes: &Grads) -> Self {
        let zeros: Grads = shapes.iter().map(|g| vec![0.0; g.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}
