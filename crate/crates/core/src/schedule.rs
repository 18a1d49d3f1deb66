//! Noise schedules in both parameterizations and the conversions between them.
//!
//! Time runs from clean data at `t = 0` to noise at `t = 1`. A [`NoiseSchedule`]
//! describes the corruption `z_t = α_t x + σ_t ε` directly; a
//! [`DiffusionSchedule`] describes the same process through the linear SDE
//! `dz = f_t z dt + g_t dW` together with an inference-time churn `η_t`.
//!
//! The forward direction integrates the drift:
//!
//! ```text
//! α_t = exp(∫₀ᵗ f_r dr)
//! σ_t² = ∫₀ᵗ g_r² exp(-2 ∫₀ʳ f_u du) dr
//! ε_t = η_t g_t
//! ```
//!
//! and the inverse differentiates it: `f = α̇/α`, `g² = 2(σσ̇ − f σ²)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{five_point_derivative, integrate, MonotoneCubic, QUAD_ABS_TOL};

/// Shared scalar function of time.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Distance kept from `t = 1` wherever a schedule degenerates there.
pub const DEFAULT_DELTA: f64 = 1e-3;

/// Step used when derivatives are filled in by finite differences.
pub const FD_STEP: f64 = 1e-4;

/// Radicands above `-NEGATIVE_TOL` are treated as round-off and clamped to zero.
pub const NEGATIVE_TOL: f64 = 1e-12;

const CONSISTENCY_GRID: usize = 1025;

fn scalar<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> ScalarFn {
    Arc::new(f)
}

/// The `(α_t, σ_t)` interpolation parameterization, with time derivatives.
#[derive(Clone)]
pub struct NoiseSchedule {
    name: String,
    alpha: ScalarFn,
    sigma: ScalarFn,
    alpha_dot: ScalarFn,
    sigma_dot: ScalarFn,
    // σ σ̇ in closed form, for schedules whose σ̇ is unbounded at t = 0
    sigma_sigma_dot: Option<ScalarFn>,
    t_max: f64,
}

impl fmt::Debug for NoiseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NoiseSchedule")
            .field("name", &self.name)
            .field("t_max", &self.t_max)
            .finish_non_exhaustive()
    }
}

impl NoiseSchedule {
    /// Schedule from closed-form functions and their derivatives.
    pub fn from_functions(
        name: impl Into<String>,
        alpha: ScalarFn,
        sigma: ScalarFn,
        alpha_dot: ScalarFn,
        sigma_dot: ScalarFn,
        t_max: f64,
    ) -> Self {
        Self {
            name: name.into(),
            alpha,
            sigma,
            alpha_dot,
            sigma_dot,
            sigma_sigma_dot: None,
            t_max,
        }
    }

    /// Schedule from `α` and `σ` only; derivatives come from five-point
    /// central differences with step [`FD_STEP`].
    pub fn from_alpha_sigma(name: impl Into<String>, alpha: ScalarFn, sigma: ScalarFn, t_max: f64) -> Self {
        let a = alpha.clone();
        let s = sigma.clone();
        let alpha_dot = scalar(move |t| five_point_derivative(&|u| a(u), t, FD_STEP, 0.0, 1.0));
        let sigma_dot = scalar(move |t| five_point_derivative(&|u| s(u), t, FD_STEP, 0.0, 1.0));
        Self::from_functions(name, alpha, sigma, alpha_dot, sigma_dot, t_max)
    }

    /// Linear interpolation path `α = 1 − t`, `σ = t`.
    pub fn flow_matching() -> Self {
        Self::from_functions(
            "flow_matching",
            scalar(|t| 1.0 - t),
            scalar(|t| t),
            scalar(|_| -1.0),
            scalar(|_| 1.0),
            1.0 - DEFAULT_DELTA,
        )
    }

    /// Variance-preserving schedule with constant rate `β`:
    /// `α = exp(−βt/2)`, `σ = √(1 − α²)`.
    pub fn variance_preserving(beta: f64) -> Self {
        let mut ns = Self::from_functions(
            "variance_preserving",
            scalar(move |t| (-0.5 * beta * t).exp()),
            scalar(move |t| (-(-beta * t).exp_m1()).max(0.0).sqrt()),
            scalar(move |t| -0.5 * beta * (-0.5 * beta * t).exp()),
            scalar(move |t| {
                let var = -(-beta * t).exp_m1();
                0.5 * beta * (-beta * t).exp() / var.sqrt()
            }),
            1.0,
        );
        ns.sigma_sigma_dot = Some(scalar(move |t| 0.5 * beta * (-beta * t).exp()));
        ns
    }

    /// Variance-exploding schedule `α = 1`, `σ = σ_max · t`.
    pub fn variance_exploding(sigma_max: f64) -> Self {
        Self::from_functions(
            "variance_exploding",
            scalar(|_| 1.0),
            scalar(move |t| sigma_max * t),
            scalar(|_| 0.0),
            scalar(move |_| sigma_max),
            1.0,
        )
    }

    /// No corruption at all: `α = 1`, `σ = 0`.
    pub fn identity() -> Self {
        Self::from_functions(
            "identity",
            scalar(|_| 1.0),
            scalar(|_| 0.0),
            scalar(|_| 0.0),
            scalar(|_| 0.0),
            1.0,
        )
    }

    /// Schedule interpolated from `(t, α, σ)` triples with monotone cubics.
    pub fn tabulated(points: &[[f64; 3]]) -> Result<Self> {
        let ts: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let alpha = MonotoneCubic::new(ts.clone(), points.iter().map(|p| p[1]).collect())?;
        let sigma = MonotoneCubic::new(ts, points.iter().map(|p| p[2]).collect())?;
        let (lo, hi) = alpha.domain();
        if lo != 0.0 {
            return Err(Error::Validation("tabulated schedule must start at t = 0".into()));
        }
        let alpha = Arc::new(alpha);
        let sigma = Arc::new(sigma);
        let (a, ad, s, sd) = (alpha.clone(), alpha, sigma.clone(), sigma);
        Ok(Self::from_functions(
            "custom_tabulated",
            scalar(move |t| a.eval(t)),
            scalar(move |t| s.eval(t)),
            scalar(move |t| ad.derivative(t)),
            scalar(move |t| sd.derivative(t)),
            hi.min(1.0),
        ))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Largest time at which conversions and samplers may query the schedule.
    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn alpha(&self, t: f64) -> f64 {
        (self.alpha)(t)
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (self.sigma)(t)
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        (self.alpha_dot)(t)
    }

    pub fn sigma_dot(&self, t: f64) -> f64 {
        (self.sigma_dot)(t)
    }

    /// `σ_t σ̇_t`, i.e. half the growth rate of the noise variance.
    pub fn sigma_sigma_dot(&self, t: f64) -> f64 {
        match &self.sigma_sigma_dot {
            Some(f) => f(t),
            None => self.sigma(t) * self.sigma_dot(t),
        }
    }

    /// Errors unless `0 ≤ t ≤ t_max`.
    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::Domain(format!(
                "t = {t} outside [0, {}] for schedule {}",
                self.t_max, self.name
            )));
        }
        Ok(())
    }
}

/// The `(f_t, g_t, η_t)` SDE parameterization.
#[derive(Clone)]
pub struct DiffusionSchedule {
    f: ScalarFn,
    g: ScalarFn,
    eta: ScalarFn,
    t_max: f64,
}

impl fmt::Debug for DiffusionSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSchedule")
            .field("t_max", &self.t_max)
            .finish_non_exhaustive()
    }
}

impl DiffusionSchedule {
    /// Checks `g ≥ 0` and `η ≥ 0` on a uniform grid over `[0, t_max]`.
    pub fn new(f: ScalarFn, g: ScalarFn, eta: ScalarFn, t_max: f64) -> Result<Self> {
        for i in 0..=256 {
            let t = t_max * i as f64 / 256.0;
            let (gv, ev) = (g(t), eta(t));
            if !(gv >= 0.0) || !(ev >= 0.0) {
                return Err(Error::Validation(format!(
                    "diffusion schedule needs g ≥ 0 and η ≥ 0; got g({t}) = {gv}, η({t}) = {ev}"
                )));
            }
        }
        Ok(Self { f, g, eta, t_max })
    }

    /// Schedule with constant coefficients.
    pub fn constant(f: f64, g: f64, eta: f64) -> Result<Self> {
        Self::new(scalar(move |_| f), scalar(move |_| g), scalar(move |_| eta), 1.0)
    }

    /// Same drift and noise, different churn.
    pub fn with_churn(&self, eta: ScalarFn) -> Result<Self> {
        Self::new(self.f.clone(), self.g.clone(), eta, self.t_max)
    }

    pub fn f(&self, t: f64) -> f64 {
        (self.f)(t)
    }

    pub fn g(&self, t: f64) -> f64 {
        (self.g)(t)
    }

    pub fn eta(&self, t: f64) -> f64 {
        (self.eta)(t)
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn drift_fn(&self) -> ScalarFn {
        self.f.clone()
    }

    pub fn noise_fn(&self) -> ScalarFn {
        self.g.clone()
    }

    /// `(f, g, η)` at `t`, with a domain error beyond `t_max`.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64, f64)> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, {}]", self.t_max)));
        }
        Ok((self.f(t), self.g(t), self.eta(t)))
    }
}

/// Flow-side stochasticity `ε_t`.
#[derive(Clone)]
pub struct StochasticityLevel {
    epsilon: ScalarFn,
}

impl fmt::Debug for StochasticityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("StochasticityLevel")
    }
}

impl StochasticityLevel {
    pub fn new(epsilon: ScalarFn) -> Self {
        Self { epsilon }
    }

    pub fn constant(eps: f64) -> Self {
        Self::new(scalar(move |_| eps))
    }

    /// `ε_t = η_t g_t`.
    pub fn from_churn(ds: &DiffusionSchedule) -> Self {
        let ds = ds.clone();
        Self::new(scalar(move |t| ds.eta(t) * ds.g(t)))
    }

    pub fn epsilon(&self, t: f64) -> f64 {
        (self.epsilon)(t)
    }
}

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// `α_t = exp(∫₀ᵗ f_r dr)`.
pub fn alpha_from_drift(f: &dyn Fn(f64) -> f64, t: f64) -> Result<f64> {
    check_unit_time(t)?;
    let integral = integrate(f, 0.0, t, QUAD_ABS_TOL)?;
    Ok(integral.exp())
}

/// Standard deviation of the noise accumulated by `dz = f z dt + g dW` on `[0, t]`:
/// `σ_t = α_t (∫₀ᵗ g_r² exp(−2∫₀ʳ f_u du) dr)^{1/2}`, by nested adaptive quadrature.
///
/// The integral alone is the noise level in the frame rescaled by `α_t`; the
/// leading `α_t` maps it back to the scale of `z_t`.
pub fn sigma_from_diffusion(f: &dyn Fn(f64) -> f64, g: &dyn Fn(f64) -> f64, t: f64) -> Result<f64> {
    check_unit_time(t)?;
    let big_f_t = integrate(f, 0.0, t, QUAD_ABS_TOL)?;
    let inner_err = std::cell::RefCell::new(None);
    let outer = integrate(
        |r| {
            let gr = g(r);
            if gr == 0.0 {
                return 0.0;
            }
            match integrate(f, 0.0, r, QUAD_ABS_TOL) {
                Ok(big_f) => gr * gr * (2.0 * (big_f_t - big_f)).exp(),
                Err(e) => {
                    inner_err.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            }
        },
        0.0,
        t,
        QUAD_ABS_TOL,
    );
    if let Some(e) = inner_err.into_inner() {
        return Err(e);
    }
    let variance = outer?;
    if variance < 0.0 {
        if variance > -NEGATIVE_TOL {
            return Ok(0.0);
        }
        return Err(Error::Numerical(format!("negative variance {variance:e} at t = {t}")));
    }
    Ok(variance.sqrt())
}

/// `ε_t = η_t g_t`.
pub fn epsilon_from_churn(ds: &DiffusionSchedule, t: f64) -> Result<f64> {
    let eps = ds.eta(t) * ds.g(t);
    if !eps.is_finite() {
        return Err(Error::Evaluation(format!("non-finite ε at t = {t}")));
    }
    Ok(eps)
}

/// Inverse conversion: recovers `(f, g, η)` from `(α, σ)` and `ε`.
///
/// `f = α̇/α`, `g = √max(0, 2(σσ̇ − fσ²))`, `η = ε/g` where `g > 0` and 0 elsewhere.
/// The result is defined on `[0, ns.t_max()]`.
pub fn diffusion_from_interpolation(ns: &NoiseSchedule, eps: &StochasticityLevel) -> Result<DiffusionSchedule> {
    let t_max = ns.t_max();
    for i in 0..CONSISTENCY_GRID {
        let t = t_max * i as f64 / (CONSISTENCY_GRID - 1) as f64;
        let a = ns.alpha(t);
        if !(a > 0.0) {
            return Err(Error::Domain(format!("α({t}) = {a} is not positive")));
        }
        let f = ns.alpha_dot(t) / a;
        let g2 = 2.0 * (ns.sigma_sigma_dot(t) - f * ns.sigma(t).powi(2));
        if !(g2 >= -NEGATIVE_TOL) {
            return Err(Error::ScheduleInconsistency(format!(
                "g²({t}) = {g2:e} is negative; σ grows slower than the drift allows"
            )));
        }
    }

    let drift = {
        let ns = ns.clone();
        scalar(move |t| ns.alpha_dot(t) / ns.alpha(t))
    };
    let noise = {
        let ns = ns.clone();
        scalar(move |t| {
            let f = ns.alpha_dot(t) / ns.alpha(t);
            let sigma = ns.sigma(t);
            (2.0 * (ns.sigma_sigma_dot(t) - f * sigma * sigma)).max(0.0).sqrt()
        })
    };
    let churn = {
        let noise = noise.clone();
        let eps = eps.clone();
        scalar(move |t| {
            let g = noise(t);
            if g > 0.0 {
                eps.epsilon(t) / g
            } else {
                0.0
            }
        })
    };
    DiffusionSchedule::new(drift, noise, churn, t_max)
}

/// Converts `ns` to its diffusion form and back by quadrature; returns
/// `max_t |α − α̂| + |σ − σ̂|` over `t_grid`.
pub fn round_trip_check(ns: &NoiseSchedule, t_grid: &[f64]) -> Result<f64> {
    let ds = diffusion_from_interpolation(ns, &StochasticityLevel::constant(0.0))?;
    let f = ds.drift_fn();
    let g = ds.noise_fn();
    let mut worst = 0.0_f64;
    for &t in t_grid {
        ns.check_time(t)?;
        let alpha_hat = alpha_from_drift(&*f, t)?;
        let sigma_hat = sigma_from_diffusion(&*f, &*g, t)?;
        let err = (ns.alpha(t) - alpha_hat).abs() + (ns.sigma(t) - sigma_hat).abs();
        worst = worst.max(err);
    }
    Ok(worst)
}

/// JSON description of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    FlowMatching {},
    VariancePreserving {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    VarianceExploding {
        #[serde(default = "default_sigma_max")]
        sigma_max: f64,
    },
    Identity {},
    CustomTabulated {
        /// `(t, α, σ)` triples.
        points: Vec<[f64; 3]>,
    },
}

fn default_beta() -> f64 {
    2.0
}

fn default_sigma_max() -> f64 {
    3.0
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self {
            Self::FlowMatching {} => Ok(NoiseSchedule::flow_matching()),
            Self::VariancePreserving { beta } => {
                if !(*beta > 0.0) {
                    return Err(Error::Config(format!("beta must be positive, got {beta}")));
                }
                Ok(NoiseSchedule::variance_preserving(*beta))
            }
            Self::VarianceExploding { sigma_max } => {
                if !(*sigma_max > 0.0) {
                    return Err(Error::Config(format!("sigma_max must be positive, got {sigma_max}")));
                }
                Ok(NoiseSchedule::variance_exploding(*sigma_max))
            }
            Self::Identity {} => Ok(NoiseSchedule::identity()),
            Self::CustomTabulated { points } => NoiseSchedule::tabulated(points),
        }
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::FlowMatching {}
    }
}
