//! Kolmogorov forward equation checks: `∂⟨p_t, f⟩ = ⟨p_t, 𝓛_t f⟩` for
//! analytic paths, plus a 1-D finite-volume Fokker–Planck solver.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{GaussianPath, MarginalLaw};
use crate::error::{Error, Result};
use crate::generator::{superpose, ContinuousGenerator, Generator, TestFunction, VectorField};
use crate::schedule::{diffusion_from_interpolation, StochasticityLevel, DEFAULT_DELTA};

/// Step of the central difference for `d/dt ⟨p_t, f⟩`.
pub const TIME_STEP: f64 = 1e-4;

/// Largest node spacing, in physical units, of the Gaussian-component rule.
pub const QUAD_SPACING: f64 = 0.1;

/// Largest node spacing in standard deviations, and the half-width of the
/// rule in standard deviations.
const STD_SPACING: f64 = 0.2;
const STD_RANGE: f64 = 8.0;

/// CFL safety factor of the explicit solver.
pub const CFL_FACTOR: f64 = 0.4;

/// Grids whose trapezoidal mass is further than this from one are rejected.
pub const MASS_TOL: f64 = 1e-2;

pub const DEFAULT_LO: f64 = -8.0;
pub const DEFAULT_HI: f64 = 8.0;
pub const DEFAULT_NODES: usize = 801;

/// Trapezoid nodes and normalized weights for `N(0, 1)` in standard units,
/// fine enough that the physical spacing is at most [`QUAD_SPACING`].
fn standard_rule(std: f64) -> Vec<(f64, f64)> {
    let h = STD_SPACING.min(QUAD_SPACING / std.max(f64::MIN_POSITIVE));
    let half = (STD_RANGE / h).ceil() as usize;
    let mut rule: Vec<(f64, f64)> = (0..=2 * half)
        .map(|k| {
            let y = (k as f64 - half as f64) * h;
            (y, (-0.5 * y * y).exp())
        })
        .collect();
    let total: f64 = rule.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut rule {
        *w /= total;
    }
    rule
}

/// `E[g(X)]`, `X ~ N(mean, variance · I)`, on the tensor-product trapezoid
/// grid. The Gaussian-weighted integrand is smooth and decays fast, so the
/// rule converges spectrally once features are resolved.
fn gaussian_expect(mean: &[f64], variance: f64, g: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let std = variance.max(0.0).sqrt();
    if std == 0.0 {
        return g(mean);
    }
    let rule = standard_rule(std);
    let (d, n) = (mean.len(), rule.len());
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0; d];
    let mut acc = 0.0;
    loop {
        let mut w = 1.0;
        for k in 0..d {
            let (y, wk) = rule[idx[k]];
            point[k] = mean[k] + std * y;
            w *= wk;
        }
        acc += w * g(&point);
        let mut k = 0;
        loop {
            if k == d {
                return acc;
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Node values of a 1-D density on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub values: Vec<f64>,
    pub t: f64,
}

impl DensityGrid {
    pub fn new(lo: f64, hi: f64, values: Vec<f64>, t: f64) -> Result<Self> {
        if values.len() < 3 || !(hi > lo) {
            return Err(Error::Validation("density grid needs hi > lo and at least 3 nodes".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!("density value {v} is negative or non-finite")));
        }
        Ok(Self {
            lo,
            hi,
            n: values.len(),
            values,
            t,
        })
    }

    /// Samples `density` at the `n` nodes.
    pub fn from_fn(lo: f64, hi: f64, n: usize, t: f64, density: impl Fn(f64) -> f64) -> Result<Self> {
        let hx = (hi - lo) / (n.max(2) - 1) as f64;
        Self::new(lo, hi, (0..n).map(|i| density(lo + i as f64 * hx)).collect(), t)
    }

    /// The 1-D law at time `t` sampled on a grid.
    pub fn from_law(law: &MarginalLaw, lo: f64, hi: f64, n: usize, t: f64) -> Result<Self> {
        if law.dim() != 1 {
            return Err(Error::Validation("density grids are one-dimensional".into()));
        }
        Self::from_fn(lo, hi, n, t, |x| law.density(&[x]))
    }

    pub fn hx(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.hx()
    }

    /// Trapezoidal integral of `g · p`.
    pub fn integrate(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        let hx = self.hx();
        let last = self.n - 1;
        self.values
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let w = if i == 0 || i == last { 0.5 } else { 1.0 };
                w * p * g(self.x(i))
            })
            .sum::<f64>()
            * hx
    }

    pub fn mass(&self) -> f64 {
        self.integrate(|_| 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.integrate(|x| x) / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.integrate(|x| (x - m) * (x - m)) / self.mass()
    }

    /// Trapezoidal `∫ |p − q|` against a density function.
    pub fn l1_distance(&self, q: impl Fn(f64) -> f64) -> f64 {
        let hx = self.hx();
        let last = self.n - 1;
        self.values
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let w = if i == 0 || i == last { 0.5 } else { 1.0 };
                w * (p - q(self.x(i))).abs()
            })
            .sum::<f64>()
            * hx
    }
}

/// A law that test functions can be integrated against.
pub trait Pairable {
    fn dim(&self) -> usize;

    /// `E[g(X)]`; the first error raised by `g` is propagated.
    fn expect(&self, g: &mut dyn FnMut(&[f64]) -> Result<f64>) -> Result<f64>;
}

impl Pairable for DensityGrid {
    fn dim(&self) -> usize {
        1
    }

    fn expect(&self, g: &mut dyn FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
        let mass = self.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Validation(format!("density grid has mass {mass}")));
        }
        let mut err = None;
        let v = self.integrate(|x| match g(&[x]) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        });
        err.map_or(Ok(v), Err)
    }
}

impl Pairable for MarginalLaw {
    fn dim(&self) -> usize {
        MarginalLaw::dim(self)
    }

    /// Trapezoid quadrature per mixture component.
    fn expect(&self, g: &mut dyn FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
        let mut err = None;
        let mut acc = 0.0;
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            acc += w * gaussian_expect(m, *v, &mut |x| match g(x) {
                Ok(v) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            });
        }
        err.map_or(Ok(acc), Err)
    }
}

/// `⟨p, f⟩ = E_{x∼p}[f(x)]`.
pub fn pairing<P: Pairable + ?Sized>(p: &P, f: &TestFunction) -> Result<f64> {
    p.expect(&mut |x| Ok(f.eval(x)))
}

/// `⟨p, 𝓛 f⟩` at time `t`.
pub fn generator_pairing<P: Pairable + ?Sized>(p: &P, gen: &dyn Generator, f: &TestFunction, t: f64) -> Result<f64> {
    p.expect(&mut |x| gen.apply(f, x, t))
}

fn check_interior(t: f64) -> Result<()> {
    if !(t > DEFAULT_DELTA && t < 1.0 - DEFAULT_DELTA) {
        return Err(Error::Domain(format!(
            "KFE residual needs t in ({DEFAULT_DELTA}, {}), got {t}",
            1.0 - DEFAULT_DELTA
        )));
    }
    Ok(())
}

/// `d/dt ⟨p_t, f⟩ − ⟨p_t, 𝓛_t f⟩`, with the time derivative by central
/// difference at [`TIME_STEP`].
pub fn kfe_signed_residual(path: &GaussianPath, gen: &dyn Generator, f: &TestFunction, t: f64) -> Result<f64> {
    check_interior(t)?;
    let dt = (pairing(&path.law(t + TIME_STEP), f)? - pairing(&path.law(t - TIME_STEP), f)?) / (2.0 * TIME_STEP);
    let lf = generator_pairing(&path.law(t), gen, f, t)?;
    let r = dt - lf;
    if !r.is_finite() {
        return Err(Error::Numerical(format!("KFE residual is non-finite at t = {t}")));
    }
    Ok(r)
}

/// `|d/dt ⟨p_t, f⟩ − ⟨p_t, 𝓛_t f⟩|`.
pub fn kfe_residual(path: &GaussianPath, gen: &dyn Generator, f: &TestFunction, t: f64) -> Result<f64> {
    kfe_signed_residual(path, gen, f, t).map(f64::abs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfeEntry {
    pub function: String,
    pub t: f64,
    pub residual: f64,
}

/// Whether each part of a superposition passed on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionReport {
    pub tolerance: f64,
    pub part_max_residuals: Vec<f64>,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfeReport {
    pub entries: Vec<KfeEntry>,
    pub max_residual: f64,
    pub time_step: f64,
    pub quadrature_spacing: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precondition: Option<PreconditionReport>,
}

impl KfeReport {
    /// `function,t,residual` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("function,t,residual\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{:e}\n", e.function, e.t, e.residual));
        }
        out
    }
}

/// Residuals over every `(f, t)` pair.
pub fn verify_kfe(
    path: &GaussianPath,
    gen: &dyn Generator,
    battery: &[TestFunction],
    t_grid: &[f64],
) -> Result<KfeReport> {
    let pairs: Vec<(&TestFunction, f64)> = battery.iter().flat_map(|f| t_grid.iter().map(move |&t| (f, t))).collect();
    let entries: Vec<KfeEntry> = pairs
        .into_par_iter()
        .map(|(f, t)| {
            Ok(KfeEntry {
                function: f.name().to_string(),
                t,
                residual: kfe_residual(path, gen, f, t)?,
            })
        })
        .collect::<Result<_>>()?;
    let max_residual = entries.iter().map(|e| e.residual).fold(0.0, f64::max);
    Ok(KfeReport {
        entries,
        max_residual,
        time_step: TIME_STEP,
        quadrature_spacing: QUAD_SPACING,
        precondition: None,
    })
}

/// The `{0.1, 0.2, …, 0.9}` evaluation grid.
pub fn default_time_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Residuals of `a·𝓛_A + b·𝓛_B`; the individual residuals of both parts are
/// recorded against `tol` but never raise.
#[allow(clippy::too_many_arguments)]
pub fn superposition_marginal_check(
    gen_a: &ContinuousGenerator,
    gen_b: &ContinuousGenerator,
    a: f64,
    b: f64,
    path: &GaussianPath,
    battery: &[TestFunction],
    t_grid: &[f64],
    tol: f64,
) -> Result<KfeReport> {
    let part_a = verify_kfe(path, gen_a, battery, t_grid)?.max_residual;
    let part_b = verify_kfe(path, gen_b, battery, t_grid)?.max_residual;
    let mixed = superpose(vec![(a, gen_a.clone()), (b, gen_b.clone())])?;
    let mut report = verify_kfe(path, &mixed, battery, t_grid)?;
    report.precondition = Some(PreconditionReport {
        tolerance: tol,
        part_max_residuals: vec![part_a, part_b],
        satisfied: part_a < tol && part_b < tol,
    });
    Ok(report)
}

fn nan_on_error(r: Result<Vec<f64>>, d: usize) -> Vec<f64> {
    r.unwrap_or_else(|_| vec![f64::NAN; d])
}

/// Pure flow with the analytic marginal velocity `u_t`.
pub fn matched_flow(path: &GaussianPath) -> ContinuousGenerator {
    scaled_flow(path, 1.0)
}

/// Flow with velocity `factor · u_t`; any factor other than one breaks the KFE.
pub fn scaled_flow(path: &GaussianPath, factor: f64) -> ContinuousGenerator {
    let p = path.clone();
    ContinuousGenerator::flow(Arc::new(move |x: &[f64], t| {
        nan_on_error(p.velocity(x, t), x.len()).into_iter().map(|v| factor * v).collect()
    }))
}

/// Velocity `u_t + ½ε² ∇log p_t` with diffusion `ε`.
pub fn matched_flow_with_score(path: &GaussianPath, eps: f64) -> ContinuousGenerator {
    let p = path.clone();
    ContinuousGenerator::flow_diffusion(
        Arc::new(move |x: &[f64], t| {
            let (u, s) = match (p.velocity(x, t), p.score(x, t)) {
                (Ok(u), Ok(s)) => (u, s),
                _ => return vec![f64::NAN; x.len()],
            };
            u.iter().zip(&s).map(|(u, s)| u + 0.5 * eps * eps * s).collect()
        }),
        Arc::new(move |_, _| eps),
    )
}

/// The forward SDE `dx = f_t x dt + g_t dW` of the path's schedule.
pub fn matched_diffusion(path: &GaussianPath) -> Result<ContinuousGenerator> {
    let ds = diffusion_from_interpolation(&path.schedule, &StochasticityLevel::constant(0.0))?;
    let (f, g) = (ds.drift_fn(), ds.noise_fn());
    Ok(ContinuousGenerator::flow_diffusion(
        Arc::new(move |x: &[f64], t| x.iter().map(|v| f(t) * v).collect()),
        Arc::new(move |_, t| g(t)),
    ))
}

/// State-dependent `σ(x) = s · exp(−‖x − c‖²/(2w²))` with the drift
/// `u + ½(σ² ∇log p + ∇σ²)` that keeps the marginals on the path.
pub fn matched_state_dependent(path: &GaussianPath, scale: f64, center: Vec<f64>, width: f64) -> ContinuousGenerator {
    let w2 = width * width;
    let c1 = center.clone();
    let sigma_sq = Arc::new(move |x: &[f64]| {
        let r2: f64 = x.iter().zip(&c1).map(|(a, b)| (a - b) * (a - b)).sum();
        scale * scale * (-r2 / w2).exp()
    });
    let c2 = center;
    let s2 = sigma_sq.clone();
    let grad: VectorField = Arc::new(move |x: &[f64], _| {
        let v = s2(x);
        x.iter().zip(&c2).map(|(a, b)| -2.0 * (a - b) / w2 * v).collect()
    });
    let p = path.clone();
    let s3 = sigma_sq.clone();
    let g2 = grad.clone();
    let velocity: VectorField = Arc::new(move |x: &[f64], t| {
        let (u, s) = match (p.velocity(x, t), p.score(x, t)) {
            (Ok(u), Ok(s)) => (u, s),
            _ => return vec![f64::NAN; x.len()],
        };
        let d = s3(x);
        let gr = g2(x, t);
        u.iter()
            .zip(&s)
            .zip(&gr)
            .map(|((u, s), g)| u + 0.5 * (d * s + g))
            .collect()
    });
    ContinuousGenerator::flow_diffusion(velocity, Arc::new(move |x, _| sigma_sq(x).sqrt())).with_diffusion_sq_gradient(grad)
}

/// Result of an explicit Fokker–Planck run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FokkerPlanckOutcome {
    pub density: DensityGrid,
    /// Total mass removed by clamping negative node values.
    pub clamped_mass: f64,
    /// Final minus initial trapezoidal mass.
    pub mass_drift: f64,
    pub n_steps: usize,
}

fn face_coefficients(p: &DensityGrid, gen: &ContinuousGenerator, t: f64, u: &mut [f64], d: &mut [f64]) -> Result<()> {
    let hx = p.hx();
    for (i, ui) in u.iter_mut().enumerate() {
        *ui = gen.velocity_at(&[p.x(i) + 0.5 * hx], t)?[0];
    }
    for (i, di) in d.iter_mut().enumerate() {
        *di = gen.diffusion_at(&[p.x(i)], t)?.powi(2);
    }
    Ok(())
}

fn max_stable_step(hx: f64, u: &[f64], d: &[f64]) -> f64 {
    let umax = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let dmax = d.iter().fold(0.0_f64, |m, v| m.max(*v));
    let mut h = f64::INFINITY;
    if umax > 0.0 {
        h = h.min(CFL_FACTOR * hx / umax);
    }
    if dmax > 0.0 {
        h = h.min(CFL_FACTOR * hx * hx / dmax);
    }
    h
}

/// Explicit finite-volume evolution of `∂p = −∂ₓ(u p) + ½ ∂ₓₓ(σ² p)` from `t0`
/// to `t1` with zero-flux boundaries.
///
/// Advection is upwinded at cell faces; the diffusion flux is a central
/// difference of `σ² p`. The step is checked against the CFL bounds every
/// step, and a violation is reported as a configuration error that names a
/// sufficient step count.
pub fn fokker_planck_evolve(
    p0: &DensityGrid,
    gen: &ContinuousGenerator,
    t0: f64,
    t1: f64,
    n_steps: usize,
) -> Result<FokkerPlanckOutcome> {
    if n_steps == 0 || !(t1 >= t0) {
        return Err(Error::Config("Fokker–Planck run needs n_steps ≥ 1 and t1 ≥ t0".into()));
    }
    let n = p0.n;
    let hx = p0.hx();
    let ht = (t1 - t0) / n_steps as f64;
    let mut p = p0.values.clone();
    let mut next = vec![0.0; n];
    let mut flux = vec![0.0; n - 1];
    let mut u = vec![0.0; n - 1];
    let mut d = vec![0.0; n];
    let mut clamped = 0.0;
    for k in 0..n_steps {
        let t = t0 + k as f64 * ht;
        face_coefficients(p0, gen, t, &mut u, &mut d)?;
        let bound = max_stable_step(hx, &u, &d);
        if ht > bound {
            let suggested = ((t1 - t0) / bound).ceil() as usize + 1;
            return Err(Error::Config(format!(
                "time step {ht:e} exceeds the CFL bound {bound:e} at t = {t}; use at least {suggested} steps"
            )));
        }
        for i in 0..n - 1 {
            let adv = if u[i] >= 0.0 { u[i] * p[i] } else { u[i] * p[i + 1] };
            let dif = -0.5 * (d[i + 1] * p[i + 1] - d[i] * p[i]) / hx;
            flux[i] = adv + dif;
        }
        for i in 0..n {
            let left = if i == 0 { 0.0 } else { flux[i - 1] };
            let right = if i == n - 1 { 0.0 } else { flux[i] };
            let v = p[i] - ht * (right - left) / hx;
            if v < 0.0 {
                clamped += -v * hx;
                next[i] = 0.0;
            } else {
                next[i] = v;
            }
        }
        std::mem::swap(&mut p, &mut next);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("Fokker–Planck state became non-finite at t = {t}")));
        }
    }
    let density = DensityGrid::new(p0.lo, p0.hi, p, t1)?;
    let mass_drift = density.mass() - p0.mass();
    Ok(FokkerPlanckOutcome {
        density,
        clamped_mass: clamped,
        mass_drift,
        n_steps,
    })
}

/// A step count satisfying the CFL bounds, probed on 65 times in `[t0, t1]`
/// with a 25% margin.
pub fn stable_step_count(p: &DensityGrid, gen: &ContinuousGenerator, t0: f64, t1: f64) -> Result<usize> {
    let hx = p.hx();
    let mut u = vec![0.0; p.n - 1];
    let mut d = vec![0.0; p.n];
    let mut bound = f64::INFINITY;
    for k in 0..=64 {
        let t = t0 + (t1 - t0) * k as f64 / 64.0;
        face_coefficients(p, gen, t, &mut u, &mut d)?;
        bound = bound.min(max_stable_step(hx, &u, &d));
    }
    if bound.is_infinite() {
        return Ok(1);
    }
    Ok((1.25 * (t1 - t0) / bound).ceil().max(1.0) as usize)
}

/// `L1` errors against the analytic marginal at `t1` when evolving the path's
/// density from `t0` on grids of each node count.
pub fn convergence_study(
    path: &GaussianPath,
    gen: &ContinuousGenerator,
    t0: f64,
    t1: f64,
    node_counts: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let target = path.law(t1);
    node_counts
        .iter()
        .map(|&n| {
            let p0 = DensityGrid::from_law(&path.law(t0), DEFAULT_LO, DEFAULT_HI, n, t0)?;
            let steps = stable_step_count(&p0, gen, t0, t1)?;
            let out = fokker_planck_evolve(&p0, gen, t0, t1, steps)?;
            Ok((n, out.density.l1_distance(|x| target.density(&[x]))))
        })
        .collect()
}

/// Smallest `log₂(e_k / e_{k+1})` over successive refinements by a factor of two.
pub fn observed_order(errors: &[(usize, f64)]) -> f64 {
    errors
        .windows(2)
        .map(|w| (w[0].1 / w[1].1).ln() / ((w[1].0 - 1) as f64 / (w[0].0 - 1) as f64).ln())
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianMixture;
    use crate::generator::test_battery;
    use crate::schedule::NoiseSchedule;

    fn gaussian_path() -> GaussianPath {
        GaussianPath::new(GaussianMixture::gaussian(vec![0.0], 1.0).unwrap(), NoiseSchedule::flow_matching())
    }

    fn standard_law() -> MarginalLaw {
        GaussianMixture::gaussian(vec![0.0], 1.0)
            .unwrap()
            .marginal_law(&NoiseSchedule::identity(), 0.5)
    }

    #[test]
    fn pairing_moments() {
        let law = standard_law();
        let one = TestFunction::affine(vec![0.0], 1.0);
        let x = TestFunction::affine(vec![1.0], 0.0);
        let x2 = TestFunction::quadratic(vec![0.0], 1.0);
        assert!((pairing(&law, &one).unwrap() - 1.0).abs() < 1e-12);
        assert!(pairing(&law, &x).unwrap().abs() < 1e-12);
        let q = pairing(&law, &x2).unwrap();
        let grid = DensityGrid::from_law(&law, -8.0, 8.0, 801, 0.5).unwrap();
        let qg = pairing(&grid, &x2).unwrap();
        assert!((pairing(&grid, &one).unwrap() - 1.0).abs() < 1e-3);
        assert!(pairing(&grid, &x).unwrap().abs() < 1e-6);
        assert!((q - qg).abs() < 1e-4, "{q} {qg}");
    }

    #[test]
    fn unnormalized_grid_is_rejected() {
        let grid = DensityGrid::from_fn(-1.0, 1.0, 101, 0.0, |_| 1.0).unwrap();
        assert!(matches!(
            pairing(&grid, &TestFunction::affine(vec![0.0], 1.0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn frozen_path_zero_generator() {
        let path = GaussianPath::new(GaussianMixture::gaussian(vec![0.3], 0.5).unwrap(), NoiseSchedule::identity());
        let zero = ContinuousGenerator::zero(1);
        for f in test_battery(1) {
            assert!(kfe_residual(&path, &zero, &f, 0.4).unwrap() < 1e-8);
        }
    }

    #[test]
    fn matched_generators_pass_and_corruption_is_detected() {
        let path = gaussian_path();
        let grid = default_time_grid();
        let battery = test_battery(1);
        for gen in [
            matched_flow(&path),
            matched_flow_with_score(&path, 1.0),
            matched_diffusion(&path).unwrap(),
            matched_state_dependent(&path, 0.8, vec![0.5], 1.0),
        ] {
            let rep = verify_kfe(&path, &gen, &battery, &grid).unwrap();
            assert!(rep.max_residual < 1e-3, "{}", rep.max_residual);
        }
        let bad = verify_kfe(&path, &scaled_flow(&path, 2.0), &battery, &grid).unwrap();
        assert!(bad.max_residual > 1e-2);
    }

    #[test]
    fn residual_domain() {
        let path = gaussian_path();
        let f = TestFunction::affine(vec![1.0], 0.0);
        assert!(kfe_residual(&path, &matched_flow(&path), &f, 0.0).is_err());
        assert!(kfe_residual(&path, &matched_flow(&path), &f, 1.0).is_err());
    }

    #[test]
    fn superposition_weights() {
        let path = gaussian_path();
        let battery = test_battery(1);
        let grid = [0.3, 0.7];
        let a = matched_flow(&path);
        let b = scaled_flow(&path, 2.0);
        let solo = verify_kfe(&path, &a, &battery, &grid).unwrap();
        let one = superposition_marginal_check(&a, &b, 1.0, 0.0, &path, &battery, &grid, 1e-3).unwrap();
        assert_eq!(solo.entries, one.entries);
        assert!(!one.precondition.unwrap().satisfied);

        let bad = verify_kfe(&path, &b, &battery, &grid).unwrap();
        let half = superposition_marginal_check(&a, &b, 0.5, 0.5, &path, &battery, &grid, 1e-3).unwrap();
        for (h, full) in half.entries.iter().zip(&bad.entries) {
            assert!((h.residual - 0.5 * full.residual).abs() < 1e-6 * (1.0 + full.residual));
        }
    }

    #[test]
    fn zero_generator_leaves_grid() {
        let law = standard_law();
        let p0 = DensityGrid::from_law(&law, -8.0, 8.0, 201, 0.0).unwrap();
        let out = fokker_planck_evolve(&p0, &ContinuousGenerator::zero(1), 0.0, 1.0, 10).unwrap();
        assert_eq!(out.density.values, p0.values);
        assert_eq!(out.clamped_mass, 0.0);
    }

    #[test]
    fn heat_equation_variance_growth() {
        let law = GaussianMixture::gaussian(vec![0.0], 0.5)
            .unwrap()
            .marginal_law(&NoiseSchedule::identity(), 0.0);
        let p0 = DensityGrid::from_law(&law, DEFAULT_LO, DEFAULT_HI, DEFAULT_NODES, 0.0).unwrap();
        let gen = ContinuousGenerator::diffusion(Arc::new(|_, _| 2f64.sqrt()));
        let steps = stable_step_count(&p0, &gen, 0.0, 0.1).unwrap();
        let out = fokker_planck_evolve(&p0, &gen, 0.0, 0.1, steps).unwrap();
        let rate = (out.density.variance() - p0.variance()) / 0.1;
        assert!((rate - 2.0).abs() < 0.04, "{rate}");
        assert!(out.mass_drift.abs() < 1e-7);
    }

    #[test]
    fn cfl_violation_suggests_steps() {
        let law = standard_law();
        let p0 = DensityGrid::from_law(&law, DEFAULT_LO, DEFAULT_HI, DEFAULT_NODES, 0.0).unwrap();
        let gen = ContinuousGenerator::diffusion(Arc::new(|_, _| 1.0));
        match fokker_planck_evolve(&p0, &gen, 0.0, 0.1, 10) {
            Err(Error::Config(msg)) => assert!(msg.contains("use at least")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn score_corrected_flow_tracks_the_path() {
        let path = GaussianPath::new(GaussianMixture::gaussian(vec![1.0], 0.25).unwrap(), NoiseSchedule::flow_matching());
        let gen = matched_flow_with_score(&path, 1.0);
        let errs = convergence_study(&path, &gen, 0.2, 0.6, &[DEFAULT_NODES]).unwrap();
        assert!(errs[0].1 < 0.02, "{errs:?}");
    }
}
