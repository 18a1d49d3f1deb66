//! Jump processes on finite state spaces: rate matrices, mixture paths
//! `p_t(·|z) = (1 − κ_t) p₀ + κ_t δ_z`, master equation and CTMC simulation.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::schedule::DEFAULT_DELTA;

/// Row sums of a rate matrix must vanish to this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Probability vectors must sum to one to this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// `κ_t` at or above `1 − SINGULAR_TOL` makes the mixture rates blow up.
pub const SINGULAR_TOL: f64 = 1e-9;

/// Margin applied to the probed exit-rate bound used for thinning.
pub const BOUND_MARGIN: f64 = 1.25;

/// `rates[x][y]` is the rate of jumping from `x` to `y`; the diagonal holds
/// minus the total exit rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    n: usize,
    rates: Vec<f64>,
}

impl RateMatrix {
    /// Validates a full row-major `n × n` matrix.
    pub fn new(n: usize, rates: Vec<f64>) -> Result<Self> {
        if n == 0 || rates.len() != n * n {
            return Err(Error::Validation(format!("rate matrix needs {n}×{n} entries")));
        }
        for x in 0..n {
            let mut sum = 0.0;
            for y in 0..n {
                let r = rates[x * n + y];
                if !r.is_finite() || (x != y && r < 0.0) {
                    return Err(Error::Validation(format!("rate {r} from {x} to {y}")));
                }
                sum += r;
            }
            if sum.abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!("row {x} sums to {sum}")));
            }
        }
        Ok(Self { n, rates })
    }

    /// Builds the matrix from off-diagonal rates `off(x, y)`; the diagonal is
    /// filled in so rows sum to zero.
    pub fn from_off_diagonal(n: usize, off: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut rates = vec![0.0; n * n];
        for x in 0..n {
            let mut exit = 0.0;
            for y in (0..n).filter(|&y| y != x) {
                let r = off(x, y);
                rates[x * n + y] = r;
                exit += r;
            }
            rates[x * n + x] = -exit;
        }
        Self::new(n, rates)
    }

    pub fn zero(n: usize) -> Self {
        Self {
            n,
            rates: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Rate of jumping from `x` to `y` (the diagonal for `x == y`).
    pub fn rate(&self, x: usize, y: usize) -> f64 {
        self.rates[x * self.n + y]
    }

    pub fn exit_rate(&self, x: usize) -> f64 {
        -self.rate(x, x)
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.n).map(|x| self.exit_rate(x)).fold(0.0, f64::max)
    }

    /// `Qᵀ p`.
    pub fn transpose_apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (x, px) in p.iter().enumerate() {
            for (y, o) in out.iter_mut().enumerate() {
                *o += self.rate(x, y) * px;
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            rates: self.rates.iter().map(|r| c * r).collect(),
        }
    }
}

/// `Σ_{y≠x} Q(y; x) (f(y) − f(x))`.
pub fn apply_jump_generator(q: &RateMatrix, f: &[f64], x: usize) -> f64 {
    (0..q.n())
        .filter(|&y| y != x)
        .map(|y| q.rate(x, y) * (f[y] - f[x]))
        .sum()
}

/// A probability vector over `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Validation("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Validation(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn point(n: usize, x: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[x] = 1.0;
        Self { probs }
    }

    /// Normalized empirical frequencies of `counts`.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Validation("histogram is empty".into()));
        }
        Ok(Self {
            probs: counts.iter().map(|c| *c as f64 / total as f64).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n(&self) -> usize {
        self.probs.len()
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        categorical(&self.probs, 1.0, rng)
    }
}

fn categorical<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Interpolation weight `κ_t` with `κ₀ = 0`, `κ₁ = 1`, nondecreasing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kappa {
    /// `κ_t = t`.
    #[default]
    Linear,
    /// `κ_t = (1 − cos πt)/2`.
    Cosine,
    /// `κ_t = t` outside `[start, end]`, held at `start` on it, then rising
    /// linearly from `start` to one over `[end, 1]`.
    Plateau { start: f64, end: f64 },
}

impl Kappa {
    pub fn validate(&self) -> Result<()> {
        if let Kappa::Plateau { start, end } = *self {
            if !(0.0 <= start && start <= end && end < 1.0) {
                return Err(Error::Validation(format!(
                    "plateau needs 0 ≤ start ≤ end < 1, got [{start}, {end}]"
                )));
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Kappa::Linear => t,
            Kappa::Cosine => 0.5 * (1.0 - (PI * t).cos()),
            Kappa::Plateau { start, end } => {
                if t < start {
                    t
                } else if t <= end {
                    start
                } else {
                    start + (1.0 - start) * (t - end) / (1.0 - end)
                }
            }
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            Kappa::Linear => 1.0,
            Kappa::Cosine => 0.5 * PI * (PI * t).sin(),
            Kappa::Plateau { start, end } => {
                if t < start {
                    1.0
                } else if t <= end {
                    0.0
                } else {
                    (1.0 - start) / (1.0 - end)
                }
            }
        }
    }

    /// `κ̇_t / (1 − κ_t)`, the jump rate toward the target.
    pub fn jump_rate(&self, t: f64) -> Result<f64> {
        let k = self.value(t);
        if k >= 1.0 - SINGULAR_TOL {
            return Err(Error::Singularity(format!(
                "κ_t = {k} at t = {t}; mixture rates diverge (keep t ≤ {})",
                1.0 - DEFAULT_DELTA
            )));
        }
        Ok(self.derivative(t) / (1.0 - k))
    }
}

/// `p_t(·|z) = (1 − κ_t) p₀ + κ_t δ_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePath {
    pub kappa: Kappa,
    pub p0: DiscreteDistribution,
    pub z: usize,
}

impl MixturePath {
    pub fn new(kappa: Kappa, p0: DiscreteDistribution, z: usize) -> Result<Self> {
        kappa.validate()?;
        if z >= p0.n() {
            return Err(Error::Validation(format!("target {z} outside {} states", p0.n())));
        }
        Ok(Self { kappa, p0, z })
    }

    pub fn n(&self) -> usize {
        self.p0.n()
    }

    pub fn marginal(&self, t: f64) -> DiscreteDistribution {
        let k = self.kappa.value(t);
        let mut probs: Vec<f64> = self.p0.probs().iter().map(|p| (1.0 - k) * p).collect();
        probs[self.z] += k;
        DiscreteDistribution { probs }
    }

    /// `κ̇_t (δ_z − p₀)`.
    pub fn marginal_derivative(&self, t: f64) -> Vec<f64> {
        let kd = self.kappa.derivative(t);
        let mut out: Vec<f64> = self.p0.probs().iter().map(|p| -kd * p).collect();
        out[self.z] += kd;
        out
    }
}

/// Jumps from every `x ≠ z` to `z` at rate `κ̇_t/(1 − κ_t)`.
pub fn conditional_rates(path: &MixturePath, t: f64) -> Result<RateMatrix> {
    let r = path.kappa.jump_rate(t)?;
    let z = path.z;
    RateMatrix::from_off_diagonal(path.n(), |_, y| if y == z { r } else { 0.0 })
}

/// Max componentwise `|d/dt p_t − Qᵀ p_t|` with the analytic derivative.
pub fn discrete_kfe_residual(path: &MixturePath, t: f64) -> Result<f64> {
    let q = conditional_rates(path, t)?;
    let lhs = path.marginal_derivative(t);
    let rhs = q.transpose_apply(path.marginal(t).probs());
    Ok(lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Mixture paths sharing `κ` and `p₀` with targets drawn from `target`:
/// `p_t = (1 − κ_t) p₀ + κ_t q`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedTargetPath {
    pub kappa: Kappa,
    pub p0: DiscreteDistribution,
    pub target: DiscreteDistribution,
}

impl MixedTargetPath {
    pub fn new(kappa: Kappa, p0: DiscreteDistribution, target: DiscreteDistribution) -> Result<Self> {
        kappa.validate()?;
        if p0.n() != target.n() {
            return Err(Error::Validation("p0 and target live on different state spaces".into()));
        }
        Ok(Self { kappa, p0, target })
    }

    pub fn marginal(&self, t: f64) -> DiscreteDistribution {
        let k = self.kappa.value(t);
        DiscreteDistribution {
            probs: self
                .p0
                .probs()
                .iter()
                .zip(self.target.probs())
                .map(|(p, q)| (1.0 - k) * p + k * q)
                .collect(),
        }
    }

    /// Posterior-weighted superposition `Σ_z P(z | x, t) Q^z_t` of the
    /// conditional generators; its off-diagonal rate from `x` to `y` is
    /// `κ̇/(1 − κ) · q(y) p_t(x|y) / p_t(x)`.
    pub fn marginal_rates(&self, t: f64) -> Result<RateMatrix> {
        let r = self.kappa.jump_rate(t)?;
        let k = self.kappa.value(t);
        let p = self.marginal(t);
        let (p0, q) = (self.p0.probs(), self.target.probs());
        RateMatrix::from_off_diagonal(p0.len(), |x, y| {
            if p.probs[x] <= 0.0 {
                return 0.0;
            }
            // p_t(x | y) for x ≠ y
            let cond = (1.0 - k) * p0[x];
            r * q[y] * cond / p.probs[x]
        })
    }
}

/// Result of integrating the master equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterSolution {
    pub distribution: DiscreteDistribution,
    /// `|Σp − 1|` removed by the final renormalization.
    pub renormalization_drift: f64,
}

/// Explicit Euler for `dp/dt = Q_tᵀ p` on a uniform grid of `n_steps`.
pub fn master_equation_solve(
    q_of_t: &dyn Fn(f64) -> Result<RateMatrix>,
    p0: &DiscreteDistribution,
    t0: f64,
    t1: f64,
    n_steps: usize,
) -> Result<MasterSolution> {
    if n_steps == 0 || !(t1 >= t0) {
        return Err(Error::Config("master equation needs n_steps ≥ 1 and t1 ≥ t0".into()));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut p = p0.probs().to_vec();
    for k in 0..n_steps {
        let t = t0 + k as f64 * h;
        let q = q_of_t(t)?;
        if q.n() != p.len() {
            return Err(Error::Validation("rate matrix and distribution sizes differ".into()));
        }
        let stiff = h * q.max_exit_rate();
        if stiff >= 0.5 {
            let need = (n_steps as f64 * stiff / 0.45).ceil() as usize;
            return Err(Error::Config(format!(
                "h·max exit rate = {stiff} at t = {t} is not below 0.5; use at least {need} steps"
            )));
        }
        let dp = q.transpose_apply(&p);
        for (pi, di) in p.iter_mut().zip(dp) {
            *pi += h * di;
        }
    }
    if p.iter().any(|v| !v.is_finite() || *v < -1e-12) {
        return Err(Error::Numerical("master equation produced an invalid distribution".into()));
    }
    let total: f64 = p.iter().sum();
    let probs = p.iter().map(|v| v.max(0.0) / total).collect();
    Ok(MasterSolution {
        distribution: DiscreteDistribution::new(probs)?,
        renormalization_drift: (total - 1.0).abs(),
    })
}

/// How a CTMC run advances time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheme {
    /// Thinning against a uniform exit-rate bound; exact in law.
    ExactClock,
    /// Jump to `y` with probability `h Q(y; x)` per step of length `h`.
    EulerH { h: f64 },
}

/// A time-dependent rate field on `[t0, t1]` with a precomputed thinning bound.
pub struct CtmcSimulator<'a> {
    q_of_t: &'a (dyn Fn(f64) -> Result<RateMatrix> + Sync),
    t0: f64,
    t1: f64,
    scheme: Scheme,
    bound: f64,
}

impl<'a> CtmcSimulator<'a> {
    /// Probes the maximal exit rate on 257 times and pads it by
    /// [`BOUND_MARGIN`]; thinning fails loudly if the bound is ever exceeded.
    pub fn new(q_of_t: &'a (dyn Fn(f64) -> Result<RateMatrix> + Sync), t0: f64, t1: f64, scheme: Scheme) -> Result<Self> {
        if !(t1 >= t0) {
            return Err(Error::Config(format!("CTMC horizon needs t1 ≥ t0, got [{t0}, {t1}]")));
        }
        if let Scheme::EulerH { h } = scheme {
            if !(h > 0.0) {
                return Err(Error::Config(format!("Euler step must be positive, got {h}")));
            }
        }
        let mut bound: f64 = 0.0;
        for k in 0..=256 {
            let t = t0 + (t1 - t0) * k as f64 / 256.0;
            bound = bound.max(q_of_t(t)?.max_exit_rate());
        }
        if !bound.is_finite() {
            return Err(Error::Config(format!("rates are unbounded on [{t0}, {t1}]")));
        }
        Ok(Self {
            q_of_t,
            t0,
            t1,
            scheme,
            bound: BOUND_MARGIN * bound,
        })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Terminal state of one run started in `x0`.
    pub fn simulate<R: Rng + ?Sized>(&self, x0: usize, rng: &mut R) -> Result<usize> {
        match self.scheme {
            Scheme::ExactClock => self.thinning(x0, rng),
            Scheme::EulerH { h } => self.euler(x0, h, rng),
        }
    }

    fn thinning<R: Rng + ?Sized>(&self, x0: usize, rng: &mut R) -> Result<usize> {
        let mut x = x0;
        if self.bound == 0.0 {
            return Ok(x);
        }
        let clock = Exp::new(self.bound).expect("bound is positive and finite");
        let mut t = self.t0;
        loop {
            t += clock.sample(rng);
            if t >= self.t1 {
                return Ok(x);
            }
            let q = (self.q_of_t)(t)?;
            let exit = q.exit_rate(x);
            if exit > self.bound {
                return Err(Error::Numerical(format!(
                    "exit rate {exit} at t = {t} exceeds the thinning bound {}",
                    self.bound
                )));
            }
            if rng.random::<f64>() * self.bound < exit {
                let row: Vec<f64> = (0..q.n()).map(|y| if y == x { 0.0 } else { q.rate(x, y) }).collect();
                x = categorical(&row, exit, rng);
            }
        }
    }

    fn euler<R: Rng + ?Sized>(&self, x0: usize, h: f64, rng: &mut R) -> Result<usize> {
        let mut x = x0;
        let steps = ((self.t1 - self.t0) / h).ceil() as usize;
        let h = if steps == 0 { 0.0 } else { (self.t1 - self.t0) / steps as f64 };
        for k in 0..steps {
            let q = (self.q_of_t)(self.t0 + k as f64 * h)?;
            let stay = 1.0 - h * q.exit_rate(x);
            if stay < 0.0 {
                return Err(Error::Config(format!("Euler step {h} is too large for exit rate {}", q.exit_rate(x))));
            }
            let weights: Vec<f64> = (0..q.n()).map(|y| if y == x { stay } else { h * q.rate(x, y) }).collect();
            x = categorical(&weights, 1.0, rng);
        }
        Ok(x)
    }

    /// `(initial, terminal)` states of `runs` trajectories, run `i` using
    /// stream `i` of `seed`; initial states are drawn from `p0` on the same
    /// stream.
    pub fn runs(&self, p0: &DiscreteDistribution, runs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
        (0..runs as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, i);
                let x0 = p0.sample(&mut rng);
                Ok((x0, self.simulate(x0, &mut rng)?))
            })
            .collect()
    }

    /// Terminal-state counts of [`Self::runs`].
    pub fn histogram(&self, p0: &DiscreteDistribution, runs: usize, seed: u64) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; p0.n()];
        for (_, x) in self.runs(p0, runs, seed)? {
            counts[x] += 1;
        }
        Ok(counts)
    }
}

/// Terminal state of a single run (convenience over [`CtmcSimulator`]).
pub fn ctmc_simulate<R: Rng + ?Sized>(
    q_of_t: &(dyn Fn(f64) -> Result<RateMatrix> + Sync),
    x0: usize,
    t0: f64,
    t1: f64,
    rng: &mut R,
    scheme: Scheme,
) -> Result<usize> {
    CtmcSimulator::new(q_of_t, t0, t1, scheme)?.simulate(x0, rng)
}
