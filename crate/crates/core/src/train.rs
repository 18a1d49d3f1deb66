//! Conditional generator matching: a small tanh MLP with hand-written
//! reverse-mode gradients, Bregman losses, Adam, and the training loop.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{marginal_velocity, AtomSet, GaussianMixture};
use crate::data::{generate, DatasetSpec};
use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, stream_rng, StreamRng};
use crate::sampler::{heads_from_velocity, heads_from_x_hat, FieldSource, Heads};
use crate::schedule::{NoiseSchedule, ScheduleSpec, DEFAULT_DELTA};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMLB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Samples per independently seeded chunk of a training batch.
pub const CHUNK: usize = 32;

/// Loss above which training is aborted as divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Extra inputs beyond `x`: `(t, sin 2πt, cos 2πt)`.
pub const TIME_FEATURES: usize = 3;

const INIT_STREAM: u64 = 0;
const EVAL_STREAM: u64 = u64::MAX;

/// Network input for `(x, t)`.
pub fn features(x: &[f64], t: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(x.len() + TIME_FEATURES);
    f.extend_from_slice(x);
    f.extend([t, (2.0 * PI * t).sin(), (2.0 * PI * t).cos()]);
    f
}

/// Fully connected network, tanh on hidden layers, linear output.
///
/// Parameters are stored flat, layer by layer: weights row-major
/// `[out][in]`, then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

struct Cache {
    /// Layer inputs `a₀ … a_{L−1}` followed by the output.
    activations: Vec<Array2<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Validation(format!("invalid layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(Self::count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    /// Network mapping `(x, t)` features in `d` dimensions to `ℝᵈ`.
    pub fn for_dimension(d: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![d + TIME_FEATURES];
        sizes.extend_from_slice(hidden);
        sizes.push(d);
        Self::new(&sizes, &mut stream_rng(seed, INIT_STREAM))
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) || params.len() != Self::count(&sizes) {
            return Err(Error::Validation("layer sizes do not match the parameter count".into()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("parameters must be finite".into()));
        }
        Ok(Self { sizes, params })
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let off: usize = self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let w = ArrayView2::from_shape((o, i), &self.params[off..off + o * i]).expect("layer shape");
        let b = ArrayView1::from(&self.params[off + o * i..off + o * i + o]);
        (w, b)
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn forward_cached(&self, inputs: &Array2<f64>) -> Cache {
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(inputs.clone());
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut z = activations[l].dot(&w.t());
            z += &b;
            if l + 1 < self.n_layers() {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Cache { activations }
    }

    /// Outputs for a batch of feature rows.
    pub fn forward(&self, inputs: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(inputs).activations.pop().expect("output layer")
    }

    /// Output at a single `(x, t)`.
    pub fn predict(&self, x: &[f64], t: f64) -> Vec<f64> {
        let f = Array2::from_shape_vec((1, self.input_dim()), features(x, t)).expect("feature row");
        self.forward(&f).into_raw_vec_and_offset().0
    }

    /// Parameter gradient given `∂L/∂output` for each batch row.
    fn backward(&self, cache: &Cache, d_out: Array2<f64>) -> Vec<f64> {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.n_layers()];
        let mut delta = d_out;
        for l in (0..self.n_layers()).rev() {
            let a_prev = &cache.activations[l];
            let gw = delta.t().dot(a_prev);
            let gb = delta.sum_axis(Axis(0));
            let mut g = gw.into_raw_vec_and_offset().0;
            g.extend(gb.iter());
            grads[l] = g;
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut next = delta.dot(&w);
                next.zip_mut_with(a_prev, |d, a| *d *= 1.0 - a * a);
                delta = next;
            }
        }
        grads.concat()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.sizes.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for s in &self.sizes {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Validation(format!("checkpoint: {msg}"));
        let mut r = bytes;
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        if &word != CHECKPOINT_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let mut read_u32 = |r: &mut &[u8]| -> Result<u32> {
            r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let sizes = (0..n).map(|_| read_u32(&mut r).map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(bad("invalid layer sizes"));
        }
        let expected = Self::count(&sizes);
        if r.len() != 8 * expected {
            return Err(bad(&format!("expected {expected} parameters, found {} bytes", r.len())));
        }
        let params = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_parts(sizes, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `D(a, b) = φ(a) − φ(b) − ⟨a − b, ∇φ(b)⟩` for a built-in `φ`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BregmanDivergence {
    /// `φ(x) = ‖x‖²`, giving `D(a, b) = ‖a − b‖²`.
    #[default]
    SquaredEuclidean,
    /// `φ(x) = Σ exp(xᵢ)`.
    ExpSum,
}

impl BregmanDivergence {
    pub fn phi(&self, x: &[f64]) -> f64 {
        match self {
            Self::SquaredEuclidean => x.iter().map(|v| v * v).sum(),
            Self::ExpSum => x.iter().map(|v| v.exp()).sum(),
        }
    }

    pub fn grad_phi(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::SquaredEuclidean => x.iter().map(|v| 2.0 * v).collect(),
            Self::ExpSum => x.iter().map(|v| v.exp()).collect(),
        }
    }

    /// `∇²φ(b) v`; both built-ins have diagonal Hessians.
    pub fn hessian_vec(&self, b: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            Self::SquaredEuclidean => v.iter().map(|vi| 2.0 * vi).collect(),
            Self::ExpSum => b.iter().zip(v).map(|(bi, vi)| bi.exp() * vi).collect(),
        }
    }

    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        let g = self.grad_phi(b);
        let lin: f64 = a.iter().zip(b).zip(&g).map(|((ai, bi), gi)| (ai - bi) * gi).sum();
        self.phi(a) - self.phi(b) - lin
    }

    /// `∂D(a, b)/∂b = −∇²φ(b)(a − b)`.
    pub fn grad_b(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let diff: Vec<f64> = a.iter().zip(b).map(|(ai, bi)| ai - bi).collect();
        self.hessian_vec(b, &diff).into_iter().map(|v| -v).collect()
    }
}

/// `bregman(d, a, b)`.
pub fn bregman(d: BregmanDivergence, a: &[f64], b: &[f64]) -> f64 {
    d.value(a, b)
}

/// Which field the network predicts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetHead {
    /// Conditional velocity `α̇ z + σ̇ ε`.
    #[default]
    Velocity,
    /// Clean sample `z`.
    XPrediction,
}

impl TargetHead {
    /// Conditional target for data point `z` and noise `eps`.
    pub fn target(&self, ns: &NoiseSchedule, z: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
        match self {
            Self::Velocity => {
                let (ad, sd) = (ns.alpha_dot(t), ns.sigma_dot(t));
                z.iter().zip(eps).map(|(zi, ei)| ad * zi + sd * ei).collect()
            }
            Self::XPrediction => z.to_vec(),
        }
    }
}

/// A fixed set of network inputs with their regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

/// Source of clean samples for the conditional objective.
#[derive(Debug, Clone)]
pub enum TrainingData {
    Mixture(GaussianMixture),
    Samples(Array2<f64>),
}

impl TrainingData {
    pub fn dim(&self) -> usize {
        match self {
            Self::Mixture(m) => m.dim(),
            Self::Samples(s) => s.ncols(),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Self::Mixture(m) => m.sample_one(rng),
            Self::Samples(s) => s.row(rng.random_range(0..s.nrows())).to_vec(),
        }
    }
}

/// Draws `n` triples `(t, z, ε)` with `t ∼ U[δ, 1 − δ]` and forms
/// `x = α_t z + σ_t ε` with its conditional target.
pub fn draw_batch(data: &TrainingData, ns: &NoiseSchedule, head: TargetHead, n: usize, rng: &mut StreamRng) -> Batch {
    let d = data.dim();
    let mut inputs = Array2::zeros((n, d + TIME_FEATURES));
    let mut targets = Array2::zeros((n, d));
    for i in 0..n {
        let t = rng.random_range(DEFAULT_DELTA..1.0 - DEFAULT_DELTA);
        let z = data.draw(rng);
        let eps = standard_normal_vec(rng, d);
        let (a, s) = (ns.alpha(t), ns.sigma(t));
        let x: Vec<f64> = z.iter().zip(&eps).map(|(zi, ei)| a * zi + s * ei).collect();
        for (dst, v) in inputs.row_mut(i).iter_mut().zip(features(&x, t)) {
            *dst = v;
        }
        for (dst, v) in targets.row_mut(i).iter_mut().zip(head.target(ns, &z, &eps, t)) {
            *dst = v;
        }
    }
    Batch { inputs, targets }
}

/// Sum (not mean) of divergences over the batch.
fn batch_sum(model: &Mlp, div: BregmanDivergence, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let cache = model.forward_cached(&batch.inputs);
    let out = cache.activations.last().expect("output layer");
    let mut d_out = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for (i, (o, y)) in out.rows().into_iter().zip(batch.targets.rows()).enumerate() {
        let (o, y) = (o.to_vec(), y.to_vec());
        let l = div.value(&y, &o);
        if !l.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at sample {i}")));
        }
        loss += l;
        for (dst, g) in d_out.row_mut(i).iter_mut().zip(div.grad_b(&y, &o)) {
            *dst = g;
        }
    }
    Ok((loss, model.backward(&cache, d_out)))
}

/// Mean divergence and its parameter gradient on a fixed batch.
pub fn batch_loss_grad(model: &Mlp, div: BregmanDivergence, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let n = batch.inputs.nrows() as f64;
    let (l, g) = batch_sum(model, div, batch)?;
    Ok((l / n, g.into_iter().map(|v| v / n).collect()))
}

/// Mean divergence on a fixed batch.
pub fn batch_loss(model: &Mlp, div: BregmanDivergence, batch: &Batch) -> Result<f64> {
    let out = model.forward(&batch.inputs);
    let mut loss = 0.0;
    for (i, (o, y)) in out.rows().into_iter().zip(batch.targets.rows()).enumerate() {
        let l = div.value(&y.to_vec(), &o.to_vec());
        if !l.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at sample {i}")));
        }
        loss += l;
    }
    Ok(loss / batch.inputs.nrows() as f64)
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Pairwise tree sum of per-chunk `(loss, gradient)`; the order depends only
/// on the number of parts.
fn tree_reduce(mut parts: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some((la, mut ga)) = it.next() {
            if let Some((lb, gb)) = it.next() {
                add_into(&mut ga, &gb);
                next.push((la + lb, ga));
            } else {
                next.push((la, ga));
            }
        }
        parts = next;
    }
    parts.pop().expect("at least one part")
}

/// Monte Carlo CGM loss and gradient on a fresh batch.
///
/// The batch is cut into [`CHUNK`]-sized pieces, piece `c` drawing from stream
/// `first_stream + c` of `seed`; pieces are evaluated on the rayon pool and
/// combined by a fixed pairwise tree, so the result is independent of the
/// thread count.
#[allow(clippy::too_many_arguments)]
pub fn cgm_loss_batch(
    model: &Mlp,
    div: BregmanDivergence,
    data: &TrainingData,
    ns: &NoiseSchedule,
    head: TargetHead,
    batch_size: usize,
    seed: u64,
    first_stream: u64,
) -> Result<(f64, Vec<f64>)> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let chunks = batch_size.div_ceil(CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = CHUNK.min(batch_size - c * CHUNK);
            let mut rng = stream_rng(seed, first_stream + c as u64);
            let batch = draw_batch(data, ns, head, n, &mut rng);
            batch_sum(model, div, &batch).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("{msg} of chunk {c}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (l, g) = tree_reduce(parts);
    let n = batch_size as f64;
    Ok((l / n, g.into_iter().map(|v| v / n).collect()))
}

/// Central finite differences (step `h`) of the mean loss on `batch` at the
/// given parameter indices, against the reverse-mode gradient; returns the
/// largest relative error `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn finite_difference_check(
    model: &Mlp,
    div: BregmanDivergence,
    batch: &Batch,
    indices: &[usize],
    h: f64,
) -> Result<f64> {
    let (_, grad) = batch_loss_grad(model, div, batch)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let p = model.params[i];
        probe.params[i] = p + h;
        let up = batch_loss(&probe, div, batch)?;
        probe.params[i] = p - h;
        let down = batch_loss(&probe, div, batch)?;
        probe.params[i] = p;
        let fd = (up - down) / (2.0 * h);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Conditional targets `F^z_t(x)` for every atom.
fn atom_targets(atoms: &AtomSet, ns: &NoiseSchedule, head: TargetHead, x: &[f64], t: f64) -> Vec<Vec<f64>> {
    (0..atoms.atoms().len())
        .map(|k| match head {
            TargetHead::Velocity => atoms.conditional_velocity(ns, k, x, t),
            TargetHead::XPrediction => atoms.atoms()[k].clone(),
        })
        .collect()
}

/// Exact gradients of the marginal objective `Σ_x D(F_t(x), F^θ_t(x))` and of
/// the conditional objective `Σ_x Σ_z w_z(x) D(F^z_t(x), F^θ_t(x))` on a finite
/// atom set; returns `max |g_GM − g_CGM| / max |g_GM|`.
pub fn gm_vs_cgm_gradient_check(
    model: &Mlp,
    div: BregmanDivergence,
    atoms: &AtomSet,
    ns: &NoiseSchedule,
    head: TargetHead,
    t_fixed: f64,
    x_grid: &[Vec<f64>],
) -> Result<f64> {
    let d = atoms.dim();
    let mut inputs = Array2::zeros((x_grid.len(), d + TIME_FEATURES));
    for (mut row, x) in inputs.rows_mut().into_iter().zip(x_grid) {
        for (dst, v) in row.iter_mut().zip(features(x, t_fixed)) {
            *dst = v;
        }
    }
    let cache = model.forward_cached(&inputs);
    let out = cache.activations.last().expect("output layer");
    let mut d_gm = Array2::zeros(out.raw_dim());
    let mut d_cgm = Array2::zeros(out.raw_dim());
    for (i, x) in x_grid.iter().enumerate() {
        let o = out.row(i).to_vec();
        let w = atoms.posterior(ns, x, t_fixed)?;
        let targets = atom_targets(atoms, ns, head, x, t_fixed);
        let mut marginal = vec![0.0; d];
        for (wk, f) in w.iter().zip(&targets) {
            for (m, v) in marginal.iter_mut().zip(f) {
                *m += wk * v;
            }
        }
        for (dst, g) in d_gm.row_mut(i).iter_mut().zip(div.grad_b(&marginal, &o)) {
            *dst = g;
        }
        let mut row = vec![0.0; d];
        for (wk, f) in w.iter().zip(&targets) {
            for (r, g) in row.iter_mut().zip(div.grad_b(f, &o)) {
                *r += wk * g;
            }
        }
        for (dst, g) in d_cgm.row_mut(i).iter_mut().zip(row) {
            *dst = g;
        }
    }
    let g_gm = model.backward(&cache, d_gm);
    let g_cgm = model.backward(&cache, d_cgm);
    let scale = g_gm.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let diff = g_gm.iter().zip(&g_cgm).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// Adaptive moment estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_eval_batch() -> usize {
    4096
}

fn default_eval_points() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub head: TargetHead,
    #[serde(default)]
    pub divergence: BregmanDivergence,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Size of the fixed batch behind the loss curve.
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Number of loss-curve points after the initial one.
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 || self.eval_points == 0 {
            return Err(Error::Config("batch sizes and eval_points must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::Config("Adam needs β₁, β₂ ∈ [0, 1) and ε > 0".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss on a fixed evaluation batch, recorded at evenly spaced iterations.
    pub loss_curve: Vec<LossPoint>,
    /// Density-weighted relative L2 velocity error on the probe grid, when
    /// the data is an analytic mixture in one or two dimensions.
    pub relative_field_error: Option<f64>,
    /// Set when training stopped early.
    pub aborted: Option<String>,
    pub iterations_run: usize,
    pub n_params: usize,
    pub config: TrainConfig,
    /// Excluded from serialization so reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Trained network with the schedule and head it was trained for.
#[derive(Debug, Clone)]
pub struct ModelField {
    pub model: Mlp,
    pub schedule: NoiseSchedule,
    pub head: TargetHead,
}

impl ModelField {
    /// Velocity implied by the network at `(x, t)`.
    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        match self.head {
            TargetHead::Velocity => Ok(self.model.predict(x, t)),
            TargetHead::XPrediction => Ok(heads_from_x_hat(&self.schedule, x, self.model.predict(x, t), t)?.velocity),
        }
    }
}

impl FieldSource for ModelField {
    fn dim(&self) -> usize {
        self.model.output_dim()
    }

    fn heads(&self, z: &[f64], t: f64) -> Result<Heads> {
        let out = self.model.predict(z, t);
        match self.head {
            TargetHead::Velocity => heads_from_velocity(&self.schedule, z, out, t),
            TargetHead::XPrediction => heads_from_x_hat(&self.schedule, z, out, t),
        }
    }
}

/// Points of the probe grid: 161 nodes on `[−4, 4]` in 1-D, 41 × 41 in 2-D.
pub fn probe_grid(d: usize) -> Option<Vec<Vec<f64>>> {
    match d {
        1 => Some((0..161).map(|i| vec![-4.0 + 0.05 * i as f64]).collect()),
        2 => Some(
            (0..41)
                .flat_map(|i| (0..41).map(move |j| vec![-4.0 + 0.2 * i as f64, -4.0 + 0.2 * j as f64]))
                .collect(),
        ),
        _ => None,
    }
}

/// `√(Σ p_t(x) ‖v(x) − u(x)‖² / Σ p_t(x) ‖u(x)‖²)` over the probe grid and
/// `t ∈ {0.1, …, 0.9}`, with `u` the analytic marginal velocity.
pub fn relative_field_error(field: &ModelField, mixture: &GaussianMixture) -> Result<Option<f64>> {
    let Some(grid) = probe_grid(mixture.dim()) else {
        return Ok(None);
    };
    let ns = &field.schedule;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 1..=9 {
        let t = k as f64 / 10.0;
        let law = mixture.marginal_law(ns, t);
        for x in &grid {
            let w = law.density(x);
            let u = marginal_velocity(mixture, ns, x, t)?;
            let v = field.velocity(x, t)?;
            num += w * u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            den += w * u.iter().map(|a| a * a).sum::<f64>();
        }
    }
    Ok(Some((num / den).sqrt()))
}

/// Runs Adam on the CGM objective. Deterministic given the config: the
/// initial weights, data, evaluation batch and every training chunk use
/// distinct streams of `cfg.seed`.
pub fn train(cfg: &TrainConfig) -> Result<(ModelField, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let schedule = cfg.schedule.build()?;
    let samples = generate(&cfg.dataset)?;
    let data = TrainingData::Samples(samples);
    let d = data.dim();
    let mut model = Mlp::for_dimension(d, &cfg.hidden, cfg.seed)?;
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate, cfg.adam);
    let eval = draw_batch(&data, &schedule, cfg.head, cfg.eval_batch, &mut stream_rng(cfg.seed, EVAL_STREAM));
    let chunks = cfg.batch_size.div_ceil(CHUNK) as u64;

    let every = cfg.iterations.div_ceil(cfg.eval_points).max(1);
    let mut loss_curve = vec![LossPoint {
        iteration: 0,
        loss: batch_loss(&model, cfg.divergence, &eval)?,
    }];
    let mut aborted = None;
    let mut iterations_run = 0;
    for it in 0..cfg.iterations {
        let first = 1 + it as u64 * chunks;
        let (loss, grad) = cgm_loss_batch(&model, cfg.divergence, &data, &schedule, cfg.head, cfg.batch_size, cfg.seed, first)?;
        if !(loss <= DIVERGENCE_LOSS) {
            aborted = Some(format!("loss {loss} at iteration {it} exceeds {DIVERGENCE_LOSS}"));
            break;
        }
        adam.update(model.params_mut(), &grad);
        iterations_run = it + 1;
        if iterations_run % every == 0 || iterations_run == cfg.iterations {
            loss_curve.push(LossPoint {
                iteration: iterations_run,
                loss: batch_loss(&model, cfg.divergence, &eval)?,
            });
        }
    }

    let field = ModelField {
        model,
        schedule,
        head: cfg.head,
    };
    let relative_field_error = match cfg.dataset.mixture()? {
        Some(m) => relative_field_error(&field, &m)?,
        None => None,
    };
    let report = TrainReport {
        loss_curve,
        relative_field_error,
        aborted,
        iterations_run,
        n_params: field.model.n_params(),
        config: cfg.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((field, report))
}

/// Trailing moving averages of width `w`.
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || values.len() < w {
        return Vec::new();
    }
    values.windows(w).map(|win| win.iter().sum::<f64>() / w as f64).collect()
}

/// Mean loss of the closed-form marginal field, a lower bound for any model
/// under the squared Euclidean divergence.
pub fn loss_floor(batch: &Batch, mixture: &GaussianMixture, ns: &NoiseSchedule) -> Result<f64> {
    let d = mixture.dim();
    let mut total = 0.0;
    for (x, y) in batch.inputs.rows().into_iter().zip(batch.targets.rows()) {
        let t = x[d];
        let u = marginal_velocity(mixture, ns, &x.to_vec()[..d], t)?;
        total += u.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / batch.inputs.nrows() as f64)
}
