//! Patch embedding network, triplet training and an open-set classifier head.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::candidates::{CornerType, Patch, RooflineKind, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::scene::{LabeledPatch, NEGATIVE_LABEL};

pub const EMBEDDING_DIM: usize = 128;

const IN: usize = PATCH_SIZE;
const K: usize = 5;
const C1: usize = 6;
const C2: usize = 16;
const S1: usize = IN - K + 1; // 24
const P1: usize = S1 / 2; // 12
const S2: usize = P1 - K + 1; // 8
const P2: usize = S2 / 2; // 4
const FLAT: usize = C2 * P2 * P2; // 256
const H1: usize = 120;

const C1W: usize = 0;
const C1B: usize = C1W + C1 * K * K;
const C2W: usize = C1B + C1;
const C2B: usize = C2W + C2 * C1 * K * K;
const F1W: usize = C2B + C2;
const F1B: usize = F1W + H1 * FLAT;
const F2W: usize = F1B + H1;
const F2B: usize = F2W + EMBEDDING_DIM * H1;
pub const PARAM_COUNT: usize = F2B + EMBEDDING_DIM;

/// Shapes of the parameter blocks in storage order.
const BLOCKS: [(usize, &[usize]); 8] = [
    (C1W, &[C1, 1, K, K]),
    (C1B, &[C1]),
    (C2W, &[C2, C1, K, K]),
    (C2B, &[C2]),
    (F1W, &[H1, FLAT]),
    (F1B, &[H1]),
    (F2W, &[EMBEDDING_DIM, H1]),
    (F2B, &[EMBEDDING_DIM]),
];

/// Two conv/pool stages, two dense layers, ReLU activations, unit-norm output.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    pub params: Vec<f64>,
}

struct Cache {
    x: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    p1_idx: Vec<usize>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    p2_idx: Vec<usize>,
    r1: Vec<f64>,
    norm: f64,
    e: Vec<f64>,
}

fn max_pool(input: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / 2;
    let mut out = vec![0.0; channels * half * half];
    let mut idx = vec![0; channels * half * half];
    for c in 0..channels {
        for py in 0..half {
            for px in 0..half {
                let mut best = usize::MAX;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = c * side * side + (2 * py + dy) * side + 2 * px + dx;
                    if best == usize::MAX || input[i] > input[best] {
                        best = i;
                    }
                }
                let o = c * half * half + py * half + px;
                out[o] = input[best];
                idx[o] = best;
            }
        }
    }
    (out, idx)
}

fn conv_valid(
    params: &[f64],
    w_off: usize,
    b_off: usize,
    input: &[f64],
    in_c: usize,
    in_side: usize,
    out_c: usize,
) -> Vec<f64> {
    let out_side = in_side - K + 1;
    let mut out = vec![0.0; out_c * out_side * out_side];
    for oc in 0..out_c {
        let bias = params[b_off + oc];
        for y in 0..out_side {
            for x in 0..out_side {
                let mut s = bias;
                for ic in 0..in_c {
                    let w = &params[w_off + (oc * in_c + ic) * K * K..][..K * K];
                    let base = ic * in_side * in_side;
                    for ky in 0..K {
                        let row = &input[base + (y + ky) * in_side + x..][..K];
                        for kx in 0..K {
                            s += w[ky * K + kx] * row[kx];
                        }
                    }
                }
                out[oc * out_side * out_side + y * out_side + x] = s.max(0.0);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    params: &[f64],
    grad: &mut [f64],
    w_off: usize,
    b_off: usize,
    input: &[f64],
    in_c: usize,
    in_side: usize,
    out_c: usize,
    g_out: &[f64],
    mut g_in: Option<&mut [f64]>,
) {
    let out_side = in_side - K + 1;
    for oc in 0..out_c {
        for y in 0..out_side {
            for x in 0..out_side {
                let g = g_out[oc * out_side * out_side + y * out_side + x];
                if g == 0.0 {
                    continue;
                }
                grad[b_off + oc] += g;
                for ic in 0..in_c {
                    let w_base = w_off + (oc * in_c + ic) * K * K;
                    let base = ic * in_side * in_side;
                    for ky in 0..K {
                        let row = base + (y + ky) * in_side + x;
                        for kx in 0..K {
                            grad[w_base + ky * K + kx] += g * input[row + kx];
                        }
                        if let Some(gi) = g_in.as_deref_mut() {
                            for kx in 0..K {
                                gi[row + kx] += g * params[w_base + ky * K + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn unit(dim: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[0] = 1.0;
    e
}

impl EmbeddingNet {
    /// Seeded He-normal initialization with zero biases.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; PARAM_COUNT];
        let fan_ins = [(C1W, C1B, K * K), (C2W, C2B, C1 * K * K), (F1W, F1B, FLAT), (F2W, F2B, H1)];
        for (start, end, fan_in) in fan_ins {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for p in &mut params[start..end] {
                *p = normal.sample(&mut rng);
            }
        }
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::DimensionMismatch(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { params })
    }

    fn forward(&self, x: &[f64]) -> Cache {
        let p = &self.params;
        let a1 = conv_valid(p, C1W, C1B, x, 1, IN, C1);
        let (p1, p1_idx) = max_pool(&a1, C1, S1);
        let a2 = conv_valid(p, C2W, C2B, &p1, C1, P1, C2);
        let (p2, p2_idx) = max_pool(&a2, C2, S2);
        let mut r1 = vec![0.0; H1];
        for (i, r) in r1.iter_mut().enumerate() {
            let w = &p[F1W + i * FLAT..][..FLAT];
            let s: f64 = p[F1B + i] + w.iter().zip(&p2).map(|(a, b)| a * b).sum::<f64>();
            *r = s.max(0.0);
        }
        let mut z = vec![0.0; EMBEDDING_DIM];
        for (k, zk) in z.iter_mut().enumerate() {
            let w = &p[F2W + k * H1..][..H1];
            *zk = p[F2B + k] + w.iter().zip(&r1).map(|(a, b)| a * b).sum::<f64>();
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = if norm > 1e-12 { z.iter().map(|v| v / norm).collect() } else { unit(EMBEDDING_DIM) };
        Cache {
            x: x.to_vec(),
            a1,
            p1,
            p1_idx,
            a2,
            p2,
            p2_idx,
            r1,
            norm,
            e,
        }
    }

    fn backward(&self, cache: &Cache, g_e: &[f64], grad: &mut [f64]) {
        if cache.norm <= 1e-12 {
            return;
        }
        let p = &self.params;
        let dot: f64 = cache.e.iter().zip(g_e).map(|(a, b)| a * b).sum();
        let g_z: Vec<f64> = g_e
            .iter()
            .zip(&cache.e)
            .map(|(g, e)| (g - e * dot) / cache.norm)
            .collect();
        let mut g_r1 = vec![0.0; H1];
        for (k, &g) in g_z.iter().enumerate() {
            grad[F2B + k] += g;
            for i in 0..H1 {
                grad[F2W + k * H1 + i] += g * cache.r1[i];
                g_r1[i] += g * p[F2W + k * H1 + i];
            }
        }
        let mut g_p2 = vec![0.0; FLAT];
        for i in 0..H1 {
            if cache.r1[i] <= 0.0 {
                continue;
            }
            let g = g_r1[i];
            grad[F1B + i] += g;
            for j in 0..FLAT {
                grad[F1W + i * FLAT + j] += g * cache.p2[j];
                g_p2[j] += g * p[F1W + i * FLAT + j];
            }
        }
        let mut g_a2 = vec![0.0; cache.a2.len()];
        for (j, &g) in g_p2.iter().enumerate() {
            let i = cache.p2_idx[j];
            if cache.a2[i] > 0.0 {
                g_a2[i] += g;
            }
        }
        let mut g_p1 = vec![0.0; cache.p1.len()];
        conv_backward(p, grad, C2W, C2B, &cache.p1, C1, P1, C2, &g_a2, Some(&mut g_p1));
        let mut g_a1 = vec![0.0; cache.a1.len()];
        for (j, &g) in g_p1.iter().enumerate() {
            let i = cache.p1_idx[j];
            if cache.a1[i] > 0.0 {
                g_a1[i] += g;
            }
        }
        conv_backward(p, grad, C1W, C1B, &cache.x, 1, IN, C1, &g_a1, None);
    }

    /// Unit-norm embedding of a 28x28 input scaled to [0, 1].
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != IN * IN {
            return Err(Error::DimensionMismatch(format!("expected {} inputs, got {}", IN * IN, input.len())));
        }
        Ok(self.forward(input).e)
    }

    pub fn embed_patch(&self, patch: &Patch) -> Vec<f64> {
        self.forward(&patch.to_input()).e
    }

    /// Upper bound on how far the embedding can move per unit of input change.
    pub fn lipschitz_factor(&self, input: &[f64]) -> f64 {
        let fro = |a: usize, b: usize| self.params[a..b].iter().map(|v| v * v).sum::<f64>().sqrt();
        let k = K as f64;
        let layers = k * fro(C1W, C1B) * k * fro(C2W, C2B) * fro(F1W, F1B) * fro(F2W, F2B);
        let norm = self.forward(input).norm;
        2.0 * layers / norm
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `alpha * d(t,p) + (1 - alpha) * d(t,p) / d(t,n)` with squared distances.
pub fn triplet_relative_loss(e_t: &[f64], e_p: &[f64], e_n: &[f64], alpha: f64) -> Result<f64> {
    let a = sq_dist(e_t, e_p);
    let b = sq_dist(e_t, e_n);
    if b < 1e-12 {
        return Err(Error::DegenerateDenominator(b));
    }
    Ok(alpha * a + (1.0 - alpha) * a / b)
}

/// Loss and its gradients with respect to the three embeddings.
pub fn triplet_loss_gradients(
    e_t: &[f64],
    e_p: &[f64],
    e_n: &[f64],
    alpha: f64,
) -> Result<(f64, [Vec<f64>; 3])> {
    let loss = triplet_relative_loss(e_t, e_p, e_n, alpha)?;
    let a = sq_dist(e_t, e_p);
    let b = sq_dist(e_t, e_n);
    let ca = alpha + (1.0 - alpha) / b;
    let cb = -(1.0 - alpha) * a / (b * b);
    let dim = e_t.len();
    let mut g = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
    for i in 0..dim {
        let tp = 2.0 * (e_t[i] - e_p[i]);
        let tn = 2.0 * (e_t[i] - e_n[i]);
        g[0][i] = ca * tp + cb * tn;
        g[1][i] = -ca * tp;
        g[2][i] = -cb * tn;
    }
    Ok((loss, g))
}

/// Which negatives the sampler favours.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerSign {
    /// Weight grows with distance from the target.
    #[default]
    Printed,
    /// Weight grows as negatives approach the target.
    Inverted,
}

/// Softmax over target-to-negative squared distances, shifted by the
/// smallest margin over the positive.
pub fn hard_triplet_probabilities_with(e_t: &[f64], e_p: &[f64], negatives: &[Vec<f64>], sign: SamplerSign) -> Vec<f64> {
    if negatives.is_empty() {
        return Vec::new();
    }
    let dp = sq_dist(e_t, e_p);
    let s = match sign {
        SamplerSign::Printed => 1.0,
        SamplerSign::Inverted => -1.0,
    };
    let d: Vec<f64> = negatives.iter().map(|n| s * sq_dist(e_t, n)).collect();
    let m = d.iter().map(|v| v - s * dp).fold(f64::INFINITY, f64::min);
    // Shift by the largest exponent as well; the ratio is unchanged.
    let top = d.iter().map(|v| v - m).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = d.iter().map(|v| (v - m - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

pub fn hard_triplet_probabilities(e_t: &[f64], e_p: &[f64], negatives: &[Vec<f64>]) -> Vec<f64> {
    hard_triplet_probabilities_with(e_t, e_p, negatives, SamplerSign::Printed)
}

/// Draws an index from a probability vector.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len().saturating_sub(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate every `decay_every` iterations.
    pub decay: f64,
    pub decay_every: usize,
    pub batch_per_class: usize,
    pub iterations: usize,
    pub seed: u64,
    pub sampler: SamplerSign,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            learning_rate: 0.1,
            decay: 0.95,
            decay_every: 1000,
            batch_per_class: 8,
            iterations: 2000,
            seed: 0,
            sampler: SamplerSign::Printed,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.batch_per_class < 2 || self.decay_every == 0 {
            return Err(Error::InsufficientData("batch needs at least 2 samples per class".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub net: EmbeddingNet,
    /// Mean triplet loss per iteration.
    pub loss_trace: Vec<f64>,
}

/// Loss of one triplet and the gradient with respect to every parameter.
pub fn triplet_parameter_gradient(
    net: &EmbeddingNet,
    x_t: &[f64],
    x_p: &[f64],
    x_n: &[f64],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let caches = [net.forward(x_t), net.forward(x_p), net.forward(x_n)];
    let (loss, g) = triplet_loss_gradients(&caches[0].e, &caches[1].e, &caches[2].e, alpha)?;
    let mut grad = vec![0.0; PARAM_COUNT];
    for (c, ge) in caches.iter().zip(&g) {
        net.backward(c, ge, &mut grad);
    }
    Ok((loss, grad))
}

/// Mini-batch SGD on the relative triplet loss. Unlabeled inputs only ever
/// serve as negatives.
pub fn train(cfg: &TrainingConfig, inputs: &[Vec<f64>], labels: &[usize], unlabeled: &[Vec<f64>]) -> Result<Trained> {
    cfg.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch("inputs and labels differ in length".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let by_class: Vec<Vec<usize>> = (0..n_classes)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .filter(|v: &Vec<usize>| !v.is_empty())
        .collect();
    if by_class.len() < 2 || by_class.iter().any(|v| v.len() < 2) {
        return Err(Error::InsufficientData("need at least 2 classes with 2 samples each".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = EmbeddingNet::new(cfg.seed ^ 0x6e65_745f_696e_6974);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        // (input, class) with None for unlabeled.
        let mut batch: Vec<(&[f64], Option<usize>)> = Vec::new();
        for members in &by_class {
            for _ in 0..cfg.batch_per_class {
                let i = members[rng.random_range(0..members.len())];
                batch.push((&inputs[i], Some(labels[i])));
            }
        }
        if !unlabeled.is_empty() {
            for _ in 0..cfg.batch_per_class {
                batch.push((&unlabeled[rng.random_range(0..unlabeled.len())], None));
            }
        }
        let caches: Vec<Cache> = batch.iter().map(|(x, _)| net.forward(x)).collect();
        let mut g_e = vec![vec![0.0; EMBEDDING_DIM]; batch.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for t in 0..batch.len() {
            let Some(class) = batch[t].1 else { continue };
            let positives: Vec<usize> = (0..batch.len()).filter(|&j| j != t && batch[j].1 == Some(class)).collect();
            let negatives: Vec<usize> = (0..batch.len()).filter(|&j| batch[j].1 != Some(class)).collect();
            if positives.is_empty() || negatives.is_empty() {
                continue;
            }
            let p = positives[rng.random_range(0..positives.len())];
            let neg_e: Vec<Vec<f64>> = negatives.iter().map(|&j| caches[j].e.clone()).collect();
            let probs = hard_triplet_probabilities_with(&caches[t].e, &caches[p].e, &neg_e, cfg.sampler);
            let n = negatives[sample_index(&probs, &mut rng)];
            let Ok((loss, g)) = triplet_loss_gradients(&caches[t].e, &caches[p].e, &caches[n].e, cfg.alpha) else {
                continue;
            };
            total += loss;
            count += 1;
            for (slot, gv) in [t, p, n].into_iter().zip(&g) {
                for (a, b) in g_e[slot].iter_mut().zip(gv) {
                    *a += b;
                }
            }
        }
        if count == 0 {
            trace.push(0.0);
            continue;
        }
        let mut grad = vec![0.0; PARAM_COUNT];
        for (c, g) in caches.iter().zip(&g_e) {
            if g.iter().any(|v| *v != 0.0) {
                net.backward(c, g, &mut grad);
            }
        }
        let lr = cfg.learning_rate * cfg.decay.powi((iter / cfg.decay_every) as i32);
        let scale = lr / count as f64;
        for (p, g) in net.params.iter_mut().zip(&grad) {
            *p -= scale * g;
        }
        trace.push(total / count as f64);
    }
    Ok(Trained { net, loss_trace: trace })
}

/// Outcome of open-set classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Known(usize),
    Reject,
}

/// One-vs-rest linear classifier over embeddings with two rejection gates.
/// An optional background column absorbs known-unknown samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpenSetHead {
    pub known: usize,
    pub background: bool,
    /// One row per column, the last entry is the bias.
    pub weights: Vec<Vec<f64>>,
    pub centroids: Vec<Vec<f64>>,
    /// Minimum decision value of the winning class.
    pub theta_reject: f64,
    /// Maximum distance to the winning class centroid.
    pub theta_dist: f64,
}

fn score(w: &[f64], e: &[f64]) -> f64 {
    w[..e.len()].iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + w[e.len()]
}

/// Pegasos hinge-loss SGD with positives and negatives drawn equally often.
fn pegasos(xs: &[&[f64]], ys: &[f64], lambda: f64, epochs: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = xs[0].len();
    let mut w = vec![0.0; dim + 1];
    let pos: Vec<usize> = (0..xs.len()).filter(|&i| ys[i] > 0.0).collect();
    let neg: Vec<usize> = (0..xs.len()).filter(|&i| ys[i] <= 0.0).collect();
    if pos.is_empty() || neg.is_empty() {
        w[dim] = if pos.is_empty() { -1.0 } else { 1.0 };
        return w;
    }
    for t in 1..=epochs * xs.len() {
        let pool = if t % 2 == 0 { &pos } else { &neg };
        let i = pool[rng.random_range(0..pool.len())];
        let eta = 1.0 / (lambda * t as f64);
        let margin = ys[i] * score(&w, xs[i]);
        for v in w.iter_mut() {
            *v *= 1.0 - eta * lambda;
        }
        if margin < 1.0 {
            for (v, x) in w.iter_mut().zip(xs[i].iter().chain(std::iter::once(&1.0))) {
                *v += eta * ys[i] * x;
            }
        }
    }
    w
}

fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = (q * (values.len() - 1) as f64).round() as usize;
    values[pos.min(values.len() - 1)]
}

pub const REJECT_QUANTILE: f64 = 0.02;
pub const DIST_QUANTILE: f64 = 0.98;

/// Fits the head on labeled embeddings. A seeded fifth of the labeled data is
/// held out to set both rejection thresholds.
pub fn fit_head(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    known: usize,
    background: &[Vec<f64>],
    seed: u64,
) -> Result<OpenSetHead> {
    if embeddings.is_empty() || embeddings.len() != labels.len() || known == 0 {
        return Err(Error::InsufficientData("head needs labeled embeddings".into()));
    }
    if labels.iter().any(|&l| l >= known) {
        return Err(Error::DimensionMismatch("label exceeds class count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_val = if embeddings.len() >= 5 * known { embeddings.len() / 5 } else { 0 };
    let (val, fit) = order.split_at(n_val);
    let fit: Vec<usize> = fit.to_vec();
    let val: Vec<usize> = if val.is_empty() { fit.clone() } else { val.to_vec() };

    let dim = embeddings[0].len();
    let mut centroids = vec![vec![0.0; dim]; known];
    let mut counts = vec![0usize; known];
    for &i in &fit {
        counts[labels[i]] += 1;
        for (c, v) in centroids[labels[i]].iter_mut().zip(&embeddings[i]) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }

    let mut xs: Vec<&[f64]> = fit.iter().map(|&i| embeddings[i].as_slice()).collect();
    let mut cls: Vec<usize> = fit.iter().map(|&i| labels[i]).collect();
    let has_bg = !background.is_empty();
    for b in background {
        xs.push(b);
        cls.push(known);
    }
    let columns = known + usize::from(has_bg);
    let weights: Vec<Vec<f64>> = (0..columns)
        .map(|c| {
            let ys: Vec<f64> = cls.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            pegasos(&xs, &ys, 1e-3, 20, &mut rng)
        })
        .collect();

    let mut head = OpenSetHead {
        known,
        background: has_bg,
        weights,
        centroids,
        theta_reject: f64::NEG_INFINITY,
        theta_dist: f64::INFINITY,
    };
    let mut margins = Vec::new();
    let mut dists = Vec::new();
    for &i in &val {
        let (col, s) = head.top(&embeddings[i]);
        if col == labels[i] {
            margins.push(s);
            dists.push(sq_dist(&embeddings[i], &head.centroids[col]).sqrt());
        }
    }
    if !margins.is_empty() {
        head.theta_reject = quantile(&mut margins, REJECT_QUANTILE);
        head.theta_dist = quantile(&mut dists, DIST_QUANTILE);
    }
    Ok(head)
}

impl OpenSetHead {
    fn top(&self, e: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, w) in self.weights.iter().enumerate() {
            let s = score(w, e);
            if s > best.1 {
                best = (c, s);
            }
        }
        best
    }

    pub fn is_trained(&self) -> bool {
        self.known > 0 && self.weights.len() >= self.known
    }

    /// Best known class ignoring both gates and the background column.
    pub fn predict_closed(&self, e: &[f64]) -> Result<usize> {
        if !self.is_trained() {
            return Err(Error::UntrainedHead);
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (c, w) in self.weights.iter().take(self.known).enumerate() {
            let s = score(w, e);
            if s > best.1 {
                best = (c, s);
            }
        }
        Ok(best.0)
    }

    pub fn classify_open_set(&self, e: &[f64]) -> Result<Decision> {
        if !self.is_trained() {
            return Err(Error::UntrainedHead);
        }
        let (col, s) = self.top(e);
        if col >= self.known || s < self.theta_reject {
            return Ok(Decision::Reject);
        }
        if sq_dist(e, &self.centroids[col]).sqrt() > self.theta_dist {
            return Ok(Decision::Reject);
        }
        Ok(Decision::Known(col))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Corner,
    Roofline,
}

impl Task {
    pub fn labels(&self) -> Vec<&'static str> {
        match self {
            Task::Corner => CornerType::ALL.iter().map(|c| c.label()).collect(),
            Task::Roofline => RooflineKind::ALL.iter().map(|c| c.label()).collect(),
        }
    }

    pub fn class_of(&self, label: &str) -> Option<usize> {
        match self {
            Task::Corner => CornerType::from_label(label).map(|c| c.class_index()),
            Task::Roofline => RooflineKind::from_label(label).map(|c| c.class_index()),
        }
    }

    fn code(&self) -> u32 {
        match self {
            Task::Corner => 0,
            Task::Roofline => 1,
        }
    }
}

/// Labeled inputs, class indices and negative inputs.
pub type SplitData = (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>);

pub fn split_patches(task: Task, patches: &[LabeledPatch]) -> Result<SplitData> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut negatives = Vec::new();
    for p in patches {
        if p.label == NEGATIVE_LABEL {
            negatives.push(p.patch.to_input());
        } else {
            let c = task
                .class_of(&p.label)
                .ok_or_else(|| Error::Format(format!("unknown label '{}'", p.label)))?;
            inputs.push(p.patch.to_input());
            labels.push(c);
        }
    }
    Ok((inputs, labels, negatives))
}

/// Embedding net plus head; the unit that `train` writes and `estimate` reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub task: Task,
    pub net: EmbeddingNet,
    pub head: OpenSetHead,
}

impl Model {
    pub fn classify(&self, patch: &Patch) -> Result<Decision> {
        self.head.classify_open_set(&self.net.embed_patch(patch))
    }

    pub fn predict_closed(&self, patch: &Patch) -> Result<usize> {
        self.head.predict_closed(&self.net.embed_patch(patch))
    }

    /// Little-endian: 16-byte header, then per block `ndim, dims..., f32 data`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut layers: Vec<(Vec<usize>, Vec<f64>)> = BLOCKS
            .iter()
            .map(|(off, shape)| {
                let n: usize = shape.iter().product();
                (shape.to_vec(), self.net.params[*off..off + n].to_vec())
            })
            .collect();
        let cols = self.head.weights.len();
        let dim = self.head.weights.first().map_or(0, |w| w.len());
        layers.push((vec![cols, dim], self.head.weights.concat()));
        let cdim = self.head.centroids.first().map_or(0, |c| c.len());
        layers.push((vec![self.head.centroids.len(), cdim], self.head.centroids.concat()));
        layers.push((
            vec![4],
            vec![
                self.head.theta_reject,
                self.head.theta_dist,
                self.head.known as f64,
                f64::from(u8::from(self.head.background)),
            ],
        ));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, layers.len() as u32, self.task.code()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (shape, data) in layers {
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad model magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let count = r.u32()? as usize;
        let task = match r.u32()? {
            0 => Task::Corner,
            1 => Task::Roofline,
            t => return Err(Error::Format(format!("unknown task code {t}"))),
        };
        if count != BLOCKS.len() + 3 {
            return Err(Error::Format(format!("expected {} layers, found {count}", BLOCKS.len() + 3)));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
            layers.push((shape, data));
        }
        let mut params = Vec::with_capacity(PARAM_COUNT);
        for ((_, expected), (shape, data)) in BLOCKS.iter().zip(&layers) {
            if shape.as_slice() != *expected {
                return Err(Error::Format(format!("layer shape {shape:?}, expected {expected:?}")));
            }
            params.extend_from_slice(data);
        }
        let rows = |(shape, data): &(Vec<usize>, Vec<f64>)| -> Vec<Vec<f64>> {
            if shape.len() != 2 || shape[1] == 0 {
                return Vec::new();
            }
            data.chunks(shape[1]).map(|c| c.to_vec()).collect()
        };
        let meta = &layers[BLOCKS.len() + 2].1;
        if meta.len() != 4 {
            return Err(Error::Format("bad head metadata".into()));
        }
        Ok(Self {
            task,
            net: EmbeddingNet::from_params(params)?,
            head: OpenSetHead {
                known: meta[2] as usize,
                background: meta[3] != 0.0,
                weights: rows(&layers[BLOCKS.len()]),
                centroids: rows(&layers[BLOCKS.len() + 1]),
                theta_reject: meta[0],
                theta_dist: meta[1],
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rounds parameters through the file format.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(&self.to_bytes()).expect("own encoding decodes")
    }
}

const MAGIC: &[u8; 4] = b"BHNT";
const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated model file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Trains the net, then the head with negatives as background.
pub fn train_model(task: Task, patches: &[LabeledPatch], cfg: &TrainingConfig) -> Result<(Model, Vec<f64>)> {
    let (inputs, labels, negatives) = split_patches(task, patches)?;
    let trained = train(cfg, &inputs, &labels, &negatives)?;
    let net = trained.net;
    let emb: Vec<Vec<f64>> = inputs.iter().map(|x| net.forward(x).e).collect();
    let bg: Vec<Vec<f64>> = negatives.iter().map(|x| net.forward(x).e).collect();
    let head = fit_head(&emb, &labels, task.labels().len(), &bg, cfg.seed)?;
    let model = Model { task, net, head }.quantized();
    Ok((model, trained.loss_trace))
}

/// Test-split scores. Negatives count as correct when rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Best-known-class accuracy on labeled samples, gates disabled.
    pub closed_set_accuracy: f64,
    /// Share of negatives rejected.
    pub rejection_rate: f64,
}

pub fn evaluate(model: &Model, patches: &[LabeledPatch]) -> Result<ClassifierMetrics> {
    let k = model.head.known;
    let mut correct = 0usize;
    let mut closed_ok = 0usize;
    let mut labeled = 0usize;
    let mut negatives = 0usize;
    let mut rejected = 0usize;
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut actual = vec![0usize; k];
    for p in patches {
        let e = model.net.embed_patch(&p.patch);
        let decision = model.head.classify_open_set(&e)?;
        let truth = if p.label == NEGATIVE_LABEL {
            None
        } else {
            Some(
                model
                    .task
                    .class_of(&p.label)
                    .ok_or_else(|| Error::Format(format!("unknown label '{}'", p.label)))?,
            )
        };
        if let Decision::Known(c) = decision {
            predicted[c] += 1;
        }
        match truth {
            Some(t) => {
                labeled += 1;
                actual[t] += 1;
                if model.head.predict_closed(&e)? == t {
                    closed_ok += 1;
                }
                if decision == Decision::Known(t) {
                    correct += 1;
                    tp[t] += 1;
                }
            }
            None => {
                negatives += 1;
                if decision == Decision::Reject {
                    correct += 1;
                    rejected += 1;
                }
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = (0..k).map(|c| ratio(tp[c], predicted[c])).sum::<f64>() / k.max(1) as f64;
    let recall = (0..k).map(|c| ratio(tp[c], actual[c])).sum::<f64>() / k.max(1) as f64;
    let f1 = (0..k)
        .map(|c| {
            let (p, r) = (ratio(tp[c], predicted[c]), ratio(tp[c], actual[c]));
            if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 }
        })
        .sum::<f64>()
        / k.max(1) as f64;
    Ok(ClassifierMetrics {
        accuracy: ratio(correct, patches.len()),
        precision,
        recall,
        f1,
        closed_set_accuracy: ratio(closed_ok, labeled),
        rejection_rate: ratio(rejected, negatives),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_input(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..IN * IN).map(|_| rng.random::<f64>()).collect()
    }

    fn basis(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn embedding_is_unit_and_deterministic() {
        let net = EmbeddingNet::new(1);
        let x = random_input(2);
        let a = net.embed(&x).unwrap();
        assert_eq!(a.len(), EMBEDDING_DIM);
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(a, net.embed(&x).unwrap());
        assert!(net.embed(&[0.0; 10]).is_err());
    }

    #[test]
    fn one_pixel_change_is_bounded() {
        let net = EmbeddingNet::new(3);
        let x = random_input(4);
        let mut y = x.clone();
        y[14 * 28 + 14] = 1.0 - y[14 * 28 + 14];
        let dx = (x[406] - y[406]).abs();
        let moved = sq_dist(&net.embed(&x).unwrap(), &net.embed(&y).unwrap()).sqrt();
        assert!(moved <= net.lipschitz_factor(&x) * dx);
    }

    #[test]
    fn loss_examples() {
        let d = 4;
        let t = basis(0, d);
        let p = basis(1, d);
        let n: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_eq!(triplet_relative_loss(&t, &t, &n, 0.5).unwrap(), 0.0);
        assert!((triplet_relative_loss(&t, &p, &n, 0.5).unwrap() - 1.25).abs() < 1e-15);
        assert_eq!(triplet_relative_loss(&t, &p, &n, 1.0).unwrap(), sq_dist(&t, &p));
        assert!(matches!(triplet_relative_loss(&t, &p, &t, 0.5), Err(Error::DegenerateDenominator(_))));
    }

    #[test]
    fn sampler_examples() {
        // Negatives at squared distance 1 and 2, positive at 0.5.
        let t = vec![0.0, 0.0];
        let p = vec![0.5f64.sqrt(), 0.0];
        let negs = vec![vec![1.0, 0.0], vec![0.0, 2.0f64.sqrt()]];
        let pr = hard_triplet_probabilities(&t, &p, &negs);
        let e = std::f64::consts::E;
        assert!((pr[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((pr[1] - e / (1.0 + e)).abs() < 1e-12);
        let inv = hard_triplet_probabilities_with(&t, &p, &negs, SamplerSign::Inverted);
        assert!(inv[0] > inv[1]);
        assert_eq!(hard_triplet_probabilities(&t, &p, &negs[..1]), vec![1.0]);
        let eq = hard_triplet_probabilities(&t, &p, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        assert!(eq.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = EmbeddingNet::new(11);
        let (xt, xp, xn) = (random_input(1), random_input(2), random_input(3));
        let (_, grad) = triplet_parameter_gradient(&net, &xt, &xp, &xn, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..30 {
            let i = rng.random_range(0..PARAM_COUNT);
            let mut plus = net.clone();
            plus.params[i] += h;
            let mut minus = net.clone();
            minus.params[i] -= h;
            let f = |n: &EmbeddingNet| {
                triplet_relative_loss(&n.embed(&xt).unwrap(), &n.embed(&xp).unwrap(), &n.embed(&xn).unwrap(), 0.5)
                    .unwrap()
            };
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {i}: analytic {} numeric {numeric}", grad[i]);
        }
    }

    #[test]
    fn training_needs_data() {
        let cfg = TrainingConfig::default();
        assert!(matches!(train(&cfg, &[], &[], &[]), Err(Error::InsufficientData(_))));
        let bad = TrainingConfig { alpha: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn bar_patch(vertical: bool, offset: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = vec![0.0; IN * IN];
        for i in 4..24 {
            let (r, c) = if vertical { (i, offset) } else { (offset, i) };
            x[r * IN + c] = 0.8 + 0.2 * rng.random::<f64>();
        }
        x
    }

    #[test]
    fn training_separates_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for k in 0..40 {
            inputs.push(bar_patch(true, 10 + k % 8, &mut rng));
            labels.push(0);
            inputs.push(bar_patch(false, 10 + k % 8, &mut rng));
            labels.push(1);
        }
        let cfg = TrainingConfig { iterations: 150, batch_per_class: 4, ..Default::default() };
        let before = EmbeddingNet::new(cfg.seed ^ 0x6e65_745f_696e_6974);
        let trained = train(&cfg, &inputs, &labels, &[]).unwrap();
        let stats = |net: &EmbeddingNet| {
            let e: Vec<_> = inputs.iter().map(|x| net.embed(x).unwrap()).collect();
            let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0, 0);
            for i in 0..e.len() {
                for j in i + 1..e.len() {
                    let d = sq_dist(&e[i], &e[j]);
                    if labels[i] == labels[j] {
                        intra += d;
                        ni += 1;
                    } else {
                        inter += d;
                        nx += 1;
                    }
                }
            }
            (intra / ni as f64, inter / nx as f64)
        };
        let (intra0, _) = stats(&before);
        let (intra, inter) = stats(&trained.net);
        assert!(intra < inter);
        assert!(intra < intra0);
        assert_eq!(trained.loss_trace.len(), 150);
    }

    fn clustered(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.03).unwrap();
        let mut e = Vec::new();
        let mut l = Vec::new();
        for c in 0..4 {
            for _ in 0..50 {
                let mut v = basis(c, 16);
                v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                e.push(v.into_iter().map(|x| x / n).collect());
                l.push(c);
            }
        }
        (e, l)
    }

    #[test]
    fn head_classifies_and_rejects() {
        let (e, l) = clustered(1);
        assert!(matches!(OpenSetHead::default().classify_open_set(&e[0]), Err(Error::UntrainedHead)));
        let head = fit_head(&e, &l, 4, &[], 3).unwrap();
        for c in 0..4 {
            assert_eq!(head.classify_open_set(&head.centroids[c]).unwrap(), Decision::Known(c));
        }
        assert_eq!(head.classify_open_set(&basis(10, 16)).unwrap(), Decision::Reject);
        let acc = e
            .iter()
            .zip(&l)
            .filter(|(v, &c)| head.predict_closed(v).unwrap() == c)
            .count() as f64
            / e.len() as f64;
        assert!(acc >= 0.95);
    }

    #[test]
    fn model_round_trip() {
        let (e, l) = clustered(2);
        let head = fit_head(&e, &l, 4, &[basis(9, 16)], 3).unwrap();
        let model = Model { task: Task::Roofline, net: EmbeddingNet::new(4), head }.quantized();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..4], b"BHNT");
        assert_eq!(Model::from_bytes(&bytes).unwrap(), model);
        assert!(Model::from_bytes(&bytes[..100]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
    }

    fn unit_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 6).prop_filter_map("nonzero", |v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (n > 1e-3).then(|| v.into_iter().map(|x| x / n).collect())
        })
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one_and_ignore_shifts(t in unit_vec(), p in unit_vec(),
                                                       negs in prop::collection::vec(unit_vec(), 1..10)) {
            let pr = hard_triplet_probabilities(&t, &p, &negs);
            prop_assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // A common shift of squared distances: append a constant coordinate to negatives.
            let pad = |v: &Vec<f64>, c: f64| { let mut w = v.clone(); w.push(c); w };
            let t2 = pad(&t, 0.0);
            let p2 = pad(&p, 0.0);
            let negs2: Vec<_> = negs.iter().map(|n| pad(n, 0.7)).collect();
            let shifted = hard_triplet_probabilities(&t2, &p2, &negs2);
            for (a, b) in pr.iter().zip(&shifted) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn loss_is_rotation_invariant(t in unit_vec(), p in unit_vec(), n in unit_vec(), angle in 0.0f64..6.2) {
            prop_assume!(sq_dist(&t, &n) > 1e-6);
            let rot = |v: &Vec<f64>| {
                let mut w = v.clone();
                let (c, s) = (angle.cos(), angle.sin());
                w[0] = c * v[0] - s * v[3];
                w[3] = s * v[0] + c * v[3];
                w
            };
            let a = triplet_relative_loss(&t, &p, &n, 0.3).unwrap();
            let b = triplet_relative_loss(&rot(&t), &rot(&p), &rot(&n), 0.3).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }

        #[test]
        fn embedding_norm_is_one(seed in 0u64..1000) {
            let net = EmbeddingNet::new(seed);
            let e = net.embed(&random_input(seed + 1)).unwrap();
            prop_assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
