//! Reverse-time samplers: DDIM, flow Euler, reverse SDE with churn,
//! probability-flow ODE and the interpolant SDE, plus a seeded trajectory
//! driver.
//!
//! Every step takes the current time `t` and an earlier target time `r < t`
//! and integrates the reverse dynamics over `h = t − r`; Brownian increments
//! scale with `√h`.

use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{posterior_mean, GaussianPath};
use crate::error::{Error, Result};
use crate::generator::ContinuousGenerator;
use crate::rng::{standard_normal_vec, stream_rng, StreamRng};
use crate::schedule::{diffusion_from_interpolation, DiffusionSchedule, NoiseSchedule, StochasticityLevel};

/// The four interchangeable views of a denoising model at `(z, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub x_hat: Vec<f64>,
    pub eps_hat: Vec<f64>,
    pub velocity: Vec<f64>,
    pub score: Vec<f64>,
}

/// Derives `ε̂ = (z − α x̂)/σ`, `v̂ = α̇ x̂ + σ̇ ε̂` and `score = −ε̂/σ` from a
/// clean-sample prediction.
pub fn heads_from_x_hat(ns: &NoiseSchedule, z: &[f64], x_hat: Vec<f64>, t: f64) -> Result<Heads> {
    let (a, s, ad, sd) = (ns.alpha(t), ns.sigma(t), ns.alpha_dot(t), ns.sigma_dot(t));
    if !(s > 0.0) {
        return Err(Error::Domain(format!("head conversion needs σ_t > 0 (t = {t})")));
    }
    let eps_hat: Vec<f64> = z.iter().zip(&x_hat).map(|(zi, xi)| (zi - a * xi) / s).collect();
    let velocity = x_hat.iter().zip(&eps_hat).map(|(xi, ei)| ad * xi + sd * ei).collect();
    let score = eps_hat.iter().map(|e| -e / s).collect();
    Ok(Heads {
        x_hat,
        eps_hat,
        velocity,
        score,
    })
}

/// Inverts `v = α̇ x̂ + σ̇ (z − α x̂)/σ` for `x̂`, then derives the other heads.
pub fn heads_from_velocity(ns: &NoiseSchedule, z: &[f64], velocity: Vec<f64>, t: f64) -> Result<Heads> {
    let (a, s, ad, sd) = (ns.alpha(t), ns.sigma(t), ns.alpha_dot(t), ns.sigma_dot(t));
    let denom = s * ad - a * sd;
    if !(s > 0.0) || denom == 0.0 {
        return Err(Error::Domain(format!("velocity head is not invertible at t = {t}")));
    }
    let x_hat = velocity.iter().zip(z).map(|(v, zi)| (s * v - sd * zi) / denom).collect();
    let mut heads = heads_from_x_hat(ns, z, x_hat, t)?;
    heads.velocity = velocity;
    Ok(heads)
}

/// Something that predicts the denoising heads, exactly (oracle) or
/// approximately (trained model). Must be safe for concurrent reads.
pub trait FieldSource: Sync {
    fn dim(&self) -> usize;

    fn heads(&self, z: &[f64], t: f64) -> Result<Heads>;

    /// Draw of the starting state at `t`. Defaults to `N(0, (α_t² + σ_t²) I)`,
    /// the marginal of unit-variance centred data.
    fn initial_sample(&self, ns: &NoiseSchedule, t: f64, rng: &mut StreamRng) -> Vec<f64> {
        let scale = (ns.alpha(t).powi(2) + ns.sigma(t).powi(2)).sqrt();
        standard_normal_vec(rng, self.dim()).into_iter().map(|e| scale * e).collect()
    }
}

/// Exact heads of a Gaussian-mixture path.
#[derive(Debug, Clone)]
pub struct OracleField {
    pub path: GaussianPath,
}

impl OracleField {
    pub fn new(path: GaussianPath) -> Self {
        Self { path }
    }
}

impl FieldSource for OracleField {
    fn dim(&self) -> usize {
        self.path.dim()
    }

    fn heads(&self, z: &[f64], t: f64) -> Result<Heads> {
        let x_hat = posterior_mean(&self.path.mixture, &self.path.schedule, z, t)?;
        heads_from_x_hat(&self.path.schedule, z, x_hat, t)
    }

    fn initial_sample(&self, _ns: &NoiseSchedule, t: f64, rng: &mut StreamRng) -> Vec<f64> {
        self.path.law(t).sample_one(rng)
    }
}

/// Wraps a field and adds `magnitude · exp(−‖z − c‖²/(2w²)) · direction` to its
/// clean-sample prediction; the other heads follow by conversion.
pub struct PerturbedField<'a> {
    pub inner: &'a dyn FieldSource,
    pub schedule: NoiseSchedule,
    pub center: Vec<f64>,
    pub width: f64,
    pub direction: Vec<f64>,
    pub magnitude: f64,
}

impl FieldSource for PerturbedField<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn heads(&self, z: &[f64], t: f64) -> Result<Heads> {
        let base = self.inner.heads(z, t)?;
        if self.magnitude == 0.0 {
            return Ok(base);
        }
        let r2: f64 = z.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        let bump = self.magnitude * (-0.5 * r2 / (self.width * self.width)).exp();
        let x_hat = base.x_hat.iter().zip(&self.direction).map(|(x, d)| x + bump * d).collect();
        heads_from_x_hat(&self.schedule, z, x_hat, t)
    }

    fn initial_sample(&self, ns: &NoiseSchedule, t: f64, rng: &mut StreamRng) -> Vec<f64> {
        self.inner.initial_sample(ns, t, rng)
    }
}

fn check_step(t: f64, r: f64) -> Result<f64> {
    let h = t - r;
    if !(h > 0.0) {
        return Err(Error::Validation(format!("reverse step needs r < t, got t = {t}, r = {r}")));
    }
    Ok(h)
}

fn finite(z: Vec<f64>) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("sampler state became non-finite".into()));
    }
    Ok(z)
}

/// `z_r = α_r x̂ + σ_r (z_t − α_t x̂)/σ_t`.
pub fn ddim_step(z_t: &[f64], x_hat: &[f64], t: f64, r: f64, ns: &NoiseSchedule) -> Result<Vec<f64>> {
    if r > t {
        return Err(Error::Validation(format!("DDIM step needs r ≤ t, got t = {t}, r = {r}")));
    }
    let s_t = ns.sigma(t);
    if s_t == 0.0 {
        return Err(Error::Numerical(format!("DDIM step divides by σ_t = 0 at t = {t}")));
    }
    if r == t {
        return Ok(z_t.to_vec());
    }
    let (a_t, a_r, s_r) = (ns.alpha(t), ns.alpha(r), ns.sigma(r));
    finite(
        z_t.iter()
            .zip(x_hat)
            .map(|(z, x)| a_r * x + s_r * ((z - a_t * x) / s_t))
            .collect(),
    )
}

/// `z_r = z_t + (r − t) v̂`.
pub fn flow_euler_step(z_t: &[f64], v_hat: &[f64], t: f64, r: f64) -> Vec<f64> {
    z_t.iter().zip(v_hat).map(|(z, v)| z + (r - t) * v).collect()
}

/// Euler–Maruyama step of the reverse diffusion SDE
/// `dz = (f z − ½(1 + η²) g² ∇log p) dt + η g dW`, run backwards over `h = t − r`.
pub fn reverse_sde_step<R: Rng + ?Sized>(
    z_t: &[f64],
    ds: &DiffusionSchedule,
    score_val: &[f64],
    t: f64,
    r: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let h = check_step(t, r)?;
    let (f, g, eta) = ds.coefficients(t)?;
    let coef = 0.5 * (1.0 + eta * eta) * g * g;
    let mut out: Vec<f64> = z_t
        .iter()
        .zip(score_val)
        .map(|(z, s)| z - h * (f * z - coef * s))
        .collect();
    let noise = h.sqrt() * eta * g;
    if noise != 0.0 {
        for (o, xi) in out.iter_mut().zip(standard_normal_vec(rng, z_t.len())) {
            *o += noise * xi;
        }
    }
    finite(out)
}

/// Euler step of the probability-flow ODE `dz = (b − ½ε² ∇log p) dt`, run
/// backwards, where `b` is the forward drift of a process with noise level `ε`.
///
/// With `b = f_t z` and `ε = g_t` this is the deterministic counterpart of the
/// diffusion SDE; with `b = u + ½ε²∇log p` it reduces to the flow velocity `u`.
pub fn pf_ode_step(z_t: &[f64], drift: &[f64], score_val: &[f64], t: f64, r: f64, eps_t: f64) -> Result<Vec<f64>> {
    let h = check_step(t, r)?;
    let coef = 0.5 * eps_t * eps_t;
    finite(
        z_t.iter()
            .zip(drift)
            .zip(score_val)
            .map(|((z, b), s)| z - h * (b - coef * s))
            .collect(),
    )
}

/// Euler–Maruyama step of `dz = (u − ½ε² ∇log p) dt + ε dW`, run backwards.
pub fn interpolant_sde_step<R: Rng + ?Sized>(
    z_t: &[f64],
    u_val: &[f64],
    score_val: &[f64],
    eps_t: f64,
    t: f64,
    r: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let h = check_step(t, r)?;
    let coef = 0.5 * eps_t * eps_t;
    let mut out: Vec<f64> = z_t
        .iter()
        .zip(u_val)
        .zip(score_val)
        .map(|((z, u), s)| z - h * (u - coef * s))
        .collect();
    let noise = h.sqrt() * eps_t;
    if noise != 0.0 {
        for (o, xi) in out.iter_mut().zip(standard_normal_vec(rng, z_t.len())) {
            *o += noise * xi;
        }
    }
    finite(out)
}

/// Reverse-time step of the process generated by `gen` (forward drift `b`,
/// coefficient `σ(x)`): `dz = (b − σ²∇log p − ∇σ²) dt + σ dW`, run backwards.
///
/// For a pure flow this is the flow Euler step; for `b = u + ½ε²∇log p`,
/// `σ = ε` it is the interpolant SDE step.
pub fn generator_reverse_step<R: Rng + ?Sized>(
    z_t: &[f64],
    gen: &ContinuousGenerator,
    score_val: &[f64],
    t: f64,
    r: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let h = check_step(t, r)?;
    let b = gen.velocity_at(z_t, t)?;
    let sigma = gen.diffusion_at(z_t, t)?;
    let grad = gen.diffusion_sq_gradient_at(z_t, t)?;
    let s2 = sigma * sigma;
    let mut out: Vec<f64> = z_t
        .iter()
        .zip(&b)
        .zip(score_val.iter().zip(&grad))
        .map(|((z, bi), (s, gi))| z - h * (bi - s2 * s - gi))
        .collect();
    if gen.has_diffusion() {
        let noise = h.sqrt() * sigma;
        for (o, xi) in out.iter_mut().zip(standard_normal_vec(rng, z_t.len())) {
            *o += noise * xi;
        }
    }
    finite(out)
}

/// Which reverse-time recursion a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Ddim,
    FlowEuler,
    ReverseSde,
    PfOde,
    InterpolantSde,
}

impl StepKind {
    pub const ALL: [StepKind; 5] = [
        StepKind::Ddim,
        StepKind::FlowEuler,
        StepKind::ReverseSde,
        StepKind::PfOde,
        StepKind::InterpolantSde,
    ];

    pub fn is_stochastic(self) -> bool {
        matches!(self, StepKind::ReverseSde | StepKind::InterpolantSde)
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StepKind::Ddim => "ddim",
            StepKind::FlowEuler => "flow_euler",
            StepKind::ReverseSde => "reverse_sde",
            StepKind::PfOde => "pf_ode",
            StepKind::InterpolantSde => "interpolant_sde",
        };
        f.write_str(s)
    }
}

fn default_churn() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    1.0
}

/// Sampler settings. `churn` is `η` for the reverse SDE; `epsilon` is `ε`
/// for the probability-flow ODE and the interpolant SDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub seed: u64,
    pub step_kind: StepKind,
    #[serde(default = "default_churn")]
    pub churn: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl SamplerConfig {
    pub fn new(step_kind: StepKind, steps: usize, seed: u64) -> Self {
        Self {
            steps,
            t_start: 1.0,
            t_end: 0.0,
            seed,
            step_kind,
            churn: default_churn(),
            epsilon: default_epsilon(),
        }
    }

    /// Uniform grid from `t_start` to `t_end` with `t_start` clamped to the
    /// schedule's `t_max`.
    pub fn time_grid(&self, ns: &NoiseSchedule) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(Error::Validation("sampler needs at least one step".into()));
        }
        if !(self.t_start <= 1.0) || !(self.t_end >= 0.0) {
            return Err(Error::Validation(format!(
                "sampler times must lie in [0, 1]: t_start = {}, t_end = {}",
                self.t_start, self.t_end
            )));
        }
        let t_start = self.t_start.min(ns.t_max());
        if !(self.t_end < t_start) {
            return Err(Error::Validation(format!(
                "sampler needs t_end < t_start ≤ {}, got t_end = {}",
                ns.t_max(),
                self.t_end
            )));
        }
        if !(self.churn >= 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::Validation("churn and epsilon must be nonnegative".into()));
        }
        let n = self.steps;
        Ok((0..=n)
            .map(|k| {
                if k == n {
                    self.t_end
                } else {
                    t_start + (self.t_end - t_start) * (k as f64 / n as f64)
                }
            })
            .collect())
    }
}

/// Recorded states along one reverse-time run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }
}

/// A validated configuration bound to a schedule.
#[derive(Debug, Clone)]
pub struct Sampler {
    schedule: NoiseSchedule,
    diffusion: Option<DiffusionSchedule>,
    config: SamplerConfig,
    grid: Vec<f64>,
}

impl Sampler {
    pub fn new(schedule: NoiseSchedule, config: SamplerConfig) -> Result<Self> {
        let grid = config.time_grid(&schedule)?;
        let diffusion = if config.step_kind == StepKind::ReverseSde {
            let churn = config.churn;
            Some(
                diffusion_from_interpolation(&schedule, &StochasticityLevel::constant(0.0))?
                    .with_churn(std::sync::Arc::new(move |_| churn))?,
            )
        } else {
            None
        };
        Ok(Self {
            schedule,
            diffusion,
            config,
            grid,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn step(&self, source: &dyn FieldSource, z: &[f64], t: f64, r: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let heads = source.heads(z, t)?;
        let ns = &self.schedule;
        match self.config.step_kind {
            StepKind::Ddim => ddim_step(z, &heads.x_hat, t, r, ns),
            StepKind::FlowEuler => finite(flow_euler_step(z, &heads.velocity, t, r)),
            StepKind::ReverseSde => {
                let ds = self.diffusion.as_ref().expect("built for reverse SDE runs");
                reverse_sde_step(z, ds, &heads.score, t, r, rng)
            }
            StepKind::PfOde => {
                let eps = self.config.epsilon;
                let drift: Vec<f64> = heads
                    .velocity
                    .iter()
                    .zip(&heads.score)
                    .map(|(u, s)| u + 0.5 * eps * eps * s)
                    .collect();
                pf_ode_step(z, &drift, &heads.score, t, r, eps)
            }
            StepKind::InterpolantSde => {
                interpolant_sde_step(z, &heads.velocity, &heads.score, self.config.epsilon, t, r, rng)
            }
        }
    }

    fn run(
        &self,
        source: &dyn FieldSource,
        initial: Option<&[f64]>,
        index: u64,
        mut record: impl FnMut(f64, &[f64]),
    ) -> Result<Vec<f64>> {
        let mut rng = stream_rng(self.config.seed, index);
        let mut z = match initial {
            Some(p) => p.to_vec(),
            None => source.initial_sample(&self.schedule, self.grid[0], &mut rng),
        };
        if z.len() != source.dim() {
            return Err(Error::Validation("initial state has the wrong dimension".into()));
        }
        record(self.grid[0], &z);
        for w in self.grid.windows(2) {
            z = self.step(source, &z, w[0], w[1], &mut rng)?;
            record(w[1], &z);
        }
        Ok(z)
    }

    /// Full trajectory for stream `index`; `initial` overrides the drawn start.
    pub fn trajectory(&self, source: &dyn FieldSource, initial: Option<&[f64]>, index: u64) -> Result<Trajectory> {
        let mut times = Vec::with_capacity(self.grid.len());
        let mut states = Vec::with_capacity(self.grid.len());
        self.run(source, initial, index, |t, z| {
            times.push(t);
            states.push(z.to_vec());
        })?;
        Ok(Trajectory {
            times,
            states,
            seed: self.config.seed,
        })
    }

    /// Terminal states of trajectories `0..n` as an `n × d` matrix.
    ///
    /// Runs on the current rayon pool; stream `i` always feeds row `i`, so the
    /// result does not depend on the thread count.
    pub fn terminal_samples(&self, source: &dyn FieldSource, n: usize) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = (0..n as u64)
            .into_par_iter()
            .map(|i| self.run(source, None, i, |_, _| {}))
            .collect::<Result<_>>()?;
        let d = source.dim();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec((n, d), flat).expect("rows have the source dimension"))
    }
}

/// Trajectory for stream `index` under `cfg` (convenience over [`Sampler`]).
pub fn sample_trajectory(
    source: &dyn FieldSource,
    ns: &NoiseSchedule,
    cfg: &SamplerConfig,
    initial: Option<&[f64]>,
    index: u64,
) -> Result<Trajectory> {
    Sampler::new(ns.clone(), cfg.clone())?.trajectory(source, initial, index)
}

/// Runs the reverse-time process of a generator from `t_start` to `t_end`
/// using the path's exact score; the starting state is drawn from the path.
pub fn sample_generator_terminal(
    gen: &ContinuousGenerator,
    path: &GaussianPath,
    grid: &[f64],
    seed: u64,
    n: usize,
) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let mut z = path.law(grid[0]).sample_one(&mut rng);
            for w in grid.windows(2) {
                let s = path.score(&z, w[0])?;
                z = generator_reverse_step(&z, gen, &s, w[0], w[1], &mut rng)?;
            }
            Ok(z)
        })
        .collect::<Result<_>>()?;
    let d = path.dim();
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rows have the path dimension"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianMixture;
    use std::sync::Arc;

    fn fm() -> NoiseSchedule {
        NoiseSchedule::flow_matching()
    }

    fn standard_oracle() -> OracleField {
        OracleField::new(GaussianPath::new(GaussianMixture::gaussian(vec![0.0], 1.0).unwrap(), fm()))
    }

    #[test]
    fn ddim_examples() {
        let ns = fm();
        let z = [0.3, -1.0];
        let x = [0.1, 0.4];
        assert_eq!(ddim_step(&z, &x, 0.6, 0.6, &ns).unwrap(), z.to_vec());
        let pure: Vec<f64> = z.iter().map(|v| v / ns.alpha(0.6)).collect();
        let out = ddim_step(&z, &pure, 0.6, 0.2, &ns).unwrap();
        for (o, zi) in out.iter().zip(&z) {
            assert!((o - ns.alpha(0.2) * zi / ns.alpha(0.6)).abs() < 1e-15);
        }
        assert!(matches!(ddim_step(&z, &x, 0.0, 0.0, &ns), Err(Error::Numerical(_))));
    }

    #[test]
    fn flow_euler_examples() {
        assert_eq!(flow_euler_step(&[1.0], &[-2.0], 0.6, 0.6), vec![1.0]);
        assert_eq!(flow_euler_step(&[1.0], &[0.0], 0.6, 0.5), vec![1.0]);
        let z = flow_euler_step(&[1.0], &[-2.0], 0.6, 0.5);
        assert!((z[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn frozen_reverse_sde() {
        let ds = DiffusionSchedule::constant(0.0, 0.0, 0.0).unwrap();
        let mut rng = stream_rng(1, 0);
        assert_eq!(reverse_sde_step(&[0.7], &ds, &[3.0], 0.5, 0.4, &mut rng).unwrap(), vec![0.7]);
        assert!(reverse_sde_step(&[0.7], &ds, &[3.0], 0.5, 0.5, &mut rng).is_err());
    }

    #[test]
    fn zero_churn_reverse_sde_is_the_probability_flow_ode() {
        let ns = NoiseSchedule::variance_preserving(2.0);
        let ds = diffusion_from_interpolation(&ns, &StochasticityLevel::constant(0.0)).unwrap();
        let mut rng = stream_rng(3, 0);
        for k in 1..50 {
            let t = k as f64 / 50.0;
            let z = [1.3 - 0.05 * k as f64, 0.2];
            let s = [-0.4, 0.9 * t];
            let a = reverse_sde_step(&z, &ds, &s, t, t - 0.01, &mut rng).unwrap();
            let f = ds.f(t);
            let drift: Vec<f64> = z.iter().map(|v| f * v).collect();
            let b = pf_ode_step(&z, &drift, &s, t, t - 0.01, ds.g(t)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pf_ode_and_interpolant_edge_cases() {
        let mut rng = stream_rng(0, 0);
        assert_eq!(pf_ode_step(&[1.0], &[0.0], &[0.0], 0.5, 0.4, 1.0).unwrap(), vec![1.0]);
        let u = [0.8];
        let flow = flow_euler_step(&[1.0], &u, 0.5, 0.4);
        assert_eq!(pf_ode_step(&[1.0], &u, &[5.0], 0.5, 0.4, 0.0).unwrap(), flow);
        assert_eq!(interpolant_sde_step(&[1.0], &u, &[5.0], 0.0, 0.5, 0.4, &mut rng).unwrap(), flow);
    }

    #[test]
    fn interpolant_noise_injection_variance() {
        let mut rng = stream_rng(11, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| interpolant_sde_step(&[0.0], &[0.0], &[0.0], 1.0, 0.5, 0.49, &mut rng).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // target 0.01; sd of the sample variance is 0.01·√(2/n)
        assert!((var - 0.01).abs() < 3.0 * 0.01 * (2.0 / n as f64).sqrt(), "{var}");
    }

    #[test]
    fn ddim_matches_flow_euler_on_linear_path() {
        let ns = fm();
        let mut rng = stream_rng(5, 0);
        for _ in 0..1000 {
            let t: f64 = rng.random_range(0.01..0.999);
            let r: f64 = rng.random_range(0.0..t);
            let z = standard_normal_vec(&mut rng, 3);
            let x_hat = standard_normal_vec(&mut rng, 3);
            let a = ddim_step(&z, &x_hat, t, r, &ns).unwrap();
            let heads = heads_from_x_hat(&ns, &z, x_hat, t).unwrap();
            let v: Vec<f64> = heads.eps_hat.iter().zip(&heads.x_hat).map(|(e, x)| e - x).collect();
            let b = flow_euler_step(&z, &v, t, r);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_conversions_round_trip() {
        let ns = NoiseSchedule::variance_preserving(2.0);
        let z = [0.4, -1.1];
        let h1 = heads_from_x_hat(&ns, &z, vec![0.2, 0.3], 0.4).unwrap();
        let h2 = heads_from_velocity(&ns, &z, h1.velocity.clone(), 0.4).unwrap();
        for (a, b) in h1.x_hat.iter().zip(&h2.x_hat) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in h1.score.iter().zip(&h2.score) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_heads_agree_with_analytic_module() {
        let gm = GaussianMixture::symmetric_pair(vec![2.0, 0.0], 0.1).unwrap();
        let path = GaussianPath::new(gm, fm());
        let oracle = OracleField::new(path.clone());
        let x = [0.5, -0.3];
        let heads = oracle.heads(&x, 0.45).unwrap();
        let u = path.velocity(&x, 0.45).unwrap();
        let s = path.score(&x, 0.45).unwrap();
        for i in 0..2 {
            assert!((heads.velocity[i] - u[i]).abs() < 1e-12);
            assert!((heads.score[i] - s[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_ddim_is_one_jump() {
        let oracle = standard_oracle();
        let ns = fm();
        let mut cfg = SamplerConfig::new(StepKind::Ddim, 1, 9);
        cfg.t_start = 0.8;
        cfg.t_end = 0.3;
        let traj = sample_trajectory(&oracle, &ns, &cfg, Some(&[1.5]), 0).unwrap();
        assert_eq!(traj.states.len(), 2);
        let heads = oracle.heads(&[1.5], 0.8).unwrap();
        let expected = ns.alpha(0.3) * heads.x_hat[0] + ns.sigma(0.3) * heads.eps_hat[0];
        assert!((traj.terminal()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn reruns_are_identical() {
        let oracle = standard_oracle();
        for kind in StepKind::ALL {
            let mut cfg = SamplerConfig::new(kind, 20, 42);
            cfg.t_start = 0.99;
            let a = sample_trajectory(&oracle, &fm(), &cfg, None, 3).unwrap();
            let b = sample_trajectory(&oracle, &fm(), &cfg, None, 3).unwrap();
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn config_validation() {
        let ns = fm();
        let cfg = SamplerConfig::new(StepKind::Ddim, 0, 1);
        assert!(cfg.time_grid(&ns).is_err());
        let mut cfg = SamplerConfig::new(StepKind::Ddim, 10, 1);
        cfg.t_end = 0.5;
        cfg.t_start = 0.4;
        assert!(cfg.time_grid(&ns).is_err());
        let cfg = SamplerConfig::new(StepKind::Ddim, 4, 1);
        let grid = cfg.time_grid(&ns).unwrap();
        assert_eq!(grid[0], ns.t_max());
        assert_eq!(*grid.last().unwrap(), 0.0);
        assert_eq!(grid.len(), 5);
    }

    #[test]
    fn generator_reverse_step_reduces_to_known_steps() {
        let mut rng = stream_rng(2, 0);
        let flow = ContinuousGenerator::flow(Arc::new(|x: &[f64], _| vec![2.0 * x[0]]));
        let z = generator_reverse_step(&[1.0], &flow, &[0.5], 0.5, 0.4, &mut rng).unwrap();
        assert_eq!(z, flow_euler_step(&[1.0], &[2.0], 0.5, 0.4));

        let eps = 0.7;
        let langevin = ContinuousGenerator::flow_diffusion(
            Arc::new(move |x: &[f64], _| vec![2.0 * x[0] + 0.5 * eps * eps * 0.5]),
            Arc::new(move |_, _| eps),
        );
        let mut r1 = stream_rng(8, 1);
        let mut r2 = stream_rng(8, 1);
        let a = generator_reverse_step(&[1.0], &langevin, &[0.5], 0.5, 0.4, &mut r1).unwrap();
        let b = interpolant_sde_step(&[1.0], &[2.0], &[0.5], eps, 0.5, 0.4, &mut r2).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-14);
    }
}
