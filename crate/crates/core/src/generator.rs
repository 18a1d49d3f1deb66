//! Markov generators on `ℝᵈ`: flow and diffusion components acting on test
//! functions, convex superposition, and conditional-to-marginal assembly.
//!
//! A continuous generator acts as
//!
//! ```text
//! (𝓛_t f)(x) = ∇f(x)·u_t(x) + ½ σ_t(x)² Δf(x)
//! ```
//!
//! with an isotropic, possibly state-dependent scalar coefficient `σ_t(x)`.
//! The jump part lives in [`crate::discrete`].

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Time-dependent vector field `(x, t) ↦ ℝᵈ`.
pub type VectorField = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;

/// Time-dependent scalar field `(x, t) ↦ ℝ`.
pub type ScalarField = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

type Eval = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type Grad = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Tolerance on superposition weights summing to one.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Tolerance on posterior weights summing to one.
pub const POSTERIOR_SUM_TOL: f64 = 1e-9;

/// A smooth observable with analytic gradient and Hessian.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    eval: Eval,
    grad: Grad,
    // row-major d×d
    hessian: Grad,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).finish_non_exhaustive()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TestFunction {
    pub fn new(name: impl Into<String>, eval: Eval, grad: Grad, hessian: Grad) -> Self {
        Self {
            name: name.into(),
            eval,
            grad,
            hessian,
        }
    }

    /// `f(x) = aᵀx + b`.
    pub fn affine(a: Vec<f64>, b: f64) -> Self {
        let d = a.len();
        let ga = a.clone();
        Self::new(
            "affine",
            Arc::new(move |x| dot(&a, x) + b),
            Arc::new(move |_| ga.clone()),
            Arc::new(move |_| vec![0.0; d * d]),
        )
    }

    /// `f(x) = s‖x − c‖²`.
    pub fn quadratic(center: Vec<f64>, scale: f64) -> Self {
        let d = center.len();
        let (c1, c2) = (center.clone(), center);
        Self::new(
            "quadratic",
            Arc::new(move |x| scale * x.iter().zip(&c1).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()),
            Arc::new(move |x| x.iter().zip(&c2).map(|(a, c)| 2.0 * scale * (a - c)).collect()),
            Arc::new(move |_| {
                let mut h = vec![0.0; d * d];
                for i in 0..d {
                    h[i * d + i] = 2.0 * scale;
                }
                h
            }),
        )
    }

    /// `f(x) = cos(kᵀx + φ)`.
    pub fn cosine(k: Vec<f64>, phase: f64) -> Self {
        let d = k.len();
        let (k1, k2, k3) = (k.clone(), k.clone(), k);
        Self::new(
            "cosine",
            Arc::new(move |x| (dot(&k1, x) + phase).cos()),
            Arc::new(move |x| {
                let s = -(dot(&k2, x) + phase).sin();
                k2.iter().map(|ki| s * ki).collect()
            }),
            Arc::new(move |x| {
                let c = -(dot(&k3, x) + phase).cos();
                let mut h = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        h[i * d + j] = c * k3[i] * k3[j];
                    }
                }
                h
            }),
        )
    }

    /// `f(x) = exp(−‖x − c‖² / (2w²))`.
    pub fn gaussian_bump(center: Vec<f64>, width: f64) -> Self {
        let d = center.len();
        let inv = 1.0 / (width * width);
        let bump = move |x: &[f64], c: &[f64]| {
            let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            (-0.5 * r2 * inv).exp()
        };
        let (c1, c2, c3) = (center.clone(), center.clone(), center);
        Self::new(
            "gaussian_bump",
            Arc::new(move |x| bump(x, &c1)),
            Arc::new(move |x| {
                let v = bump(x, &c2);
                x.iter().zip(&c2).map(|(a, c)| -v * (a - c) * inv).collect()
            }),
            Arc::new(move |x| {
                let v = bump(x, &c3);
                let diff: Vec<f64> = x.iter().zip(&c3).map(|(a, c)| a - c).collect();
                let mut h = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        let delta = if i == j { inv } else { 0.0 };
                        h[i * d + j] = v * (diff[i] * diff[j] * inv * inv - delta);
                    }
                }
                h
            }),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }

    /// Dense row-major Hessian.
    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        (self.hessian)(x)
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let h = self.hessian(x);
        (0..d).map(|i| h[i * d + i]).sum()
    }
}

/// The fixed battery of observables used by the KFE checks in dimension `d`:
/// affine, quadratic, two cosines and two Gaussian bumps.
pub fn test_battery(d: usize) -> Vec<TestFunction> {
    let ramp = |scale: f64, offset: f64| -> Vec<f64> { (0..d).map(|i| scale * (1.0 - offset * i as f64)).collect() };
    let mut battery = vec![
        TestFunction::affine(ramp(1.0, 0.5), 0.3),
        TestFunction::quadratic(ramp(0.5, 1.5), 1.0),
        TestFunction::cosine(ramp(1.0, 1.7), 0.2),
        TestFunction::cosine(ramp(0.5, -0.6), 1.1),
        TestFunction::gaussian_bump(vec![0.0; d], 1.0),
        TestFunction::gaussian_bump(ramp(1.5, 1.0), 0.7),
    ];
    let names = ["affine", "quadratic", "cos_k1", "cos_k2", "bump_origin", "bump_offset"];
    for (f, n) in battery.iter_mut().zip(names) {
        f.name = n.to_string();
    }
    battery
}

/// Anything that acts on test functions like a Markov generator.
pub trait Generator: Send + Sync {
    fn apply(&self, f: &TestFunction, x: &[f64], t: f64) -> Result<f64>;
}

/// Flow and/or diffusion generator on `ℝᵈ`.
#[derive(Clone)]
pub struct ContinuousGenerator {
    velocity: Option<VectorField>,
    diffusion: Option<ScalarField>,
    // ∇σ²; only needed to run the reversed process when σ depends on x
    diffusion_sq_grad: Option<VectorField>,
}

impl fmt::Debug for ContinuousGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContinuousGenerator")
            .field("velocity", &self.velocity.is_some())
            .field("diffusion", &self.diffusion.is_some())
            .finish()
    }
}

impl ContinuousGenerator {
    pub fn new(velocity: Option<VectorField>, diffusion: Option<ScalarField>) -> Result<Self> {
        if velocity.is_none() && diffusion.is_none() {
            return Err(Error::Validation("a generator needs a velocity or a diffusion component".into()));
        }
        Ok(Self {
            velocity,
            diffusion,
            diffusion_sq_grad: None,
        })
    }

    pub fn flow(velocity: VectorField) -> Self {
        Self {
            velocity: Some(velocity),
            diffusion: None,
            diffusion_sq_grad: None,
        }
    }

    pub fn diffusion(sigma: ScalarField) -> Self {
        Self {
            velocity: None,
            diffusion: Some(sigma),
            diffusion_sq_grad: None,
        }
    }

    pub fn flow_diffusion(velocity: VectorField, sigma: ScalarField) -> Self {
        Self {
            velocity: Some(velocity),
            diffusion: Some(sigma),
            diffusion_sq_grad: None,
        }
    }

    /// The generator of the constant process.
    pub fn zero(d: usize) -> Self {
        Self::flow(Arc::new(move |_, _| vec![0.0; d]))
    }

    /// Attaches `∇_x σ_t(x)²` for state-dependent coefficients.
    pub fn with_diffusion_sq_gradient(mut self, grad: VectorField) -> Self {
        self.diffusion_sq_grad = Some(grad);
        self
    }

    pub fn has_velocity(&self) -> bool {
        self.velocity.is_some()
    }

    pub fn has_diffusion(&self) -> bool {
        self.diffusion.is_some()
    }

    /// Velocity at `(x, t)`; zeros when the component is absent.
    pub fn velocity_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        match &self.velocity {
            Some(u) => {
                let v = u(x, t);
                if v.len() != x.len() || v.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Evaluation(format!("velocity at t = {t} is non-finite or misshapen")));
                }
                Ok(v)
            }
            None => Ok(vec![0.0; x.len()]),
        }
    }

    /// Diffusion coefficient `σ_t(x) ≥ 0`; zero when the component is absent.
    pub fn diffusion_at(&self, x: &[f64], t: f64) -> Result<f64> {
        match &self.diffusion {
            Some(s) => {
                let v = s(x, t);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Evaluation(format!("diffusion coefficient {v} at t = {t}")));
                }
                Ok(v)
            }
            None => Ok(0.0),
        }
    }

    /// `∇_x σ_t(x)²`; zeros unless a gradient was attached.
    pub fn diffusion_sq_gradient_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        match &self.diffusion_sq_grad {
            Some(g) => {
                let v = g(x, t);
                if v.len() != x.len() || v.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Evaluation(format!("∇σ² at t = {t} is non-finite or misshapen")));
                }
                Ok(v)
            }
            None => Ok(vec![0.0; x.len()]),
        }
    }
}

/// `∇f(x)ᵀu_t(x) + ½ Δf(x) σ_t(x)²` over the components present in `gen`.
pub fn apply_generator(gen: &ContinuousGenerator, f: &TestFunction, x: &[f64], t: f64) -> Result<f64> {
    if x.iter().any(|c| !c.is_finite()) {
        return Err(Error::Evaluation("non-finite evaluation point".into()));
    }
    let mut acc = 0.0;
    if gen.velocity.is_some() {
        let u = gen.velocity_at(x, t)?;
        acc += dot(&f.grad(x), &u);
    }
    if gen.diffusion.is_some() {
        let s = gen.diffusion_at(x, t)?;
        acc += 0.5 * f.laplacian(x) * s * s;
    }
    if !acc.is_finite() {
        return Err(Error::Evaluation(format!("generator action is non-finite at t = {t}")));
    }
    Ok(acc)
}

impl Generator for ContinuousGenerator {
    fn apply(&self, f: &TestFunction, x: &[f64], t: f64) -> Result<f64> {
        apply_generator(self, f, x, t)
    }
}

/// Convex combination `Σ wᵢ 𝓛ᵢ` of continuous generators.
#[derive(Clone, Debug)]
pub struct SuperposedGenerator {
    parts: Vec<(f64, ContinuousGenerator)>,
}

/// Validates weights (nonnegative, summing to one within [`WEIGHT_SUM_TOL`]).
pub fn superpose(parts: Vec<(f64, ContinuousGenerator)>) -> Result<SuperposedGenerator> {
    if parts.is_empty() {
        return Err(Error::Validation("superposition needs at least one part".into()));
    }
    if let Some((w, _)) = parts.iter().find(|(w, _)| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Validation(format!("superposition weight {w} is negative or non-finite")));
    }
    let total: f64 = parts.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Validation(format!("superposition weights sum to {total}, not 1")));
    }
    Ok(SuperposedGenerator { parts })
}

impl SuperposedGenerator {
    pub fn parts(&self) -> &[(f64, ContinuousGenerator)] {
        &self.parts
    }

    /// A single generator with the same action: velocities and squared
    /// diffusion coefficients are averaged with the superposition weights.
    pub fn collapse(&self) -> ContinuousGenerator {
        let any_velocity = self.parts.iter().any(|(_, g)| g.has_velocity());
        let any_diffusion = self.parts.iter().any(|(_, g)| g.has_diffusion());
        let any_grad = self.parts.iter().any(|(_, g)| g.diffusion_sq_grad.is_some());

        let velocity: Option<VectorField> = any_velocity.then(|| {
            let parts = self.parts.clone();
            Arc::new(move |x: &[f64], t: f64| {
                let mut acc = vec![0.0; x.len()];
                for (w, g) in &parts {
                    if let Some(u) = &g.velocity {
                        for (a, v) in acc.iter_mut().zip(u(x, t)) {
                            *a += w * v;
                        }
                    }
                }
                acc
            }) as VectorField
        });
        let diffusion: Option<ScalarField> = any_diffusion.then(|| {
            let parts = self.parts.clone();
            Arc::new(move |x: &[f64], t: f64| {
                parts
                    .iter()
                    .filter_map(|(w, g)| g.diffusion.as_ref().map(|s| w * s(x, t).powi(2)))
                    .sum::<f64>()
                    .sqrt()
            }) as ScalarField
        });
        let grad: Option<VectorField> = any_grad.then(|| {
            let parts = self.parts.clone();
            Arc::new(move |x: &[f64], t: f64| {
                let mut acc = vec![0.0; x.len()];
                for (w, g) in &parts {
                    if let Some(gr) = &g.diffusion_sq_grad {
                        for (a, v) in acc.iter_mut().zip(gr(x, t)) {
                            *a += w * v;
                        }
                    }
                }
                acc
            }) as VectorField
        });
        ContinuousGenerator {
            velocity,
            diffusion,
            diffusion_sq_grad: grad,
        }
    }
}

impl Generator for SuperposedGenerator {
    fn apply(&self, f: &TestFunction, x: &[f64], t: f64) -> Result<f64> {
        let mut acc = 0.0;
        for (w, g) in &self.parts {
            acc += w * apply_generator(g, f, x, t)?;
        }
        Ok(acc)
    }
}

/// Posterior-weighted average of conditional velocities:
/// `u_t(x) = Σ_z w_z(x, t) u_t(x | z)`.
///
/// `posterior` returns the weights over the finite set of conditioning atoms;
/// they must sum to one within [`POSTERIOR_SUM_TOL`].
pub fn marginal_from_conditional(
    cond_velocity: &dyn Fn(&[f64], f64, usize) -> Vec<f64>,
    posterior: &dyn Fn(&[f64], f64) -> Result<Vec<f64>>,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let weights = posterior(x, t)?;
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > POSTERIOR_SUM_TOL || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Validation(format!("posterior weights sum to {total}")));
    }
    let mut out = vec![0.0; x.len()];
    for (z, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let u = cond_velocity(x, t, z);
        for (o, v) in out.iter_mut().zip(u) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GaussHermite;

    fn constant_velocity(c: f64) -> VectorField {
        Arc::new(move |x: &[f64], _| vec![c; x.len()])
    }

    fn constant_sigma(s: f64) -> ScalarField {
        Arc::new(move |_, _| s)
    }

    #[test]
    fn zero_generator_annihilates_battery() {
        let g = ContinuousGenerator::zero(2);
        for f in test_battery(2) {
            assert_eq!(apply_generator(&g, &f, &[0.3, -1.2], 0.4).unwrap(), 0.0);
        }
    }

    #[test]
    fn linear_velocity_on_identity() {
        let g = ContinuousGenerator::flow(Arc::new(|x: &[f64], _| vec![3.0 * x[0]]));
        let f = TestFunction::affine(vec![1.0], 0.0);
        assert_eq!(apply_generator(&g, &f, &[2.0], 0.5).unwrap(), 6.0);
    }

    #[test]
    fn flow_plus_diffusion_on_square() {
        let g = ContinuousGenerator::flow_diffusion(
            Arc::new(|x: &[f64], _| vec![x[0]]),
            constant_sigma(2.0_f64.sqrt()),
        );
        let f = TestFunction::quadratic(vec![0.0], 1.0);
        let v = apply_generator(&g, &f, &[1.0], 0.0).unwrap();
        assert!((v - 4.0).abs() < 1e-14);
    }

    // Independent route: (E[f(X_{t+h}) | X_t = x] − f(x)) / h for one
    // Euler–Maruyama step, expectation over the Gaussian increment by
    // Gauss–Hermite, extrapolated to h → 0.
    fn kernel_difference_quotient(u: f64, sigma: f64, f: &TestFunction, x: f64) -> f64 {
        let gh = GaussHermite::new(30);
        let quotient = |h: f64| {
            let mean = x + h * u;
            let e = gh.expect(&[mean], h * sigma * sigma, |y| f.eval(y));
            (e - f.eval(&[x])) / h
        };
        2.0 * quotient(1e-4) - quotient(2e-4)
    }

    #[test]
    fn generator_matches_transition_kernel_derivative() {
        let cases = [
            (TestFunction::quadratic(vec![0.0], 1.0), 1.0, 2.0_f64.sqrt(), 1.0),
            (TestFunction::cosine(vec![1.3], 0.4), -0.7, 0.9, 0.2),
            (TestFunction::gaussian_bump(vec![0.5], 0.8), 0.3, 1.5, -0.4),
        ];
        for (f, u, s, x) in cases {
            let g = ContinuousGenerator::flow_diffusion(constant_velocity(u), constant_sigma(s));
            let exact = apply_generator(&g, &f, &[x], 0.0).unwrap();
            let fd = kernel_difference_quotient(u, s, &f, x);
            assert!((exact - fd).abs() < 1e-6, "{}: {exact} vs {fd}", f.name());
        }
    }

    #[test]
    fn battery_derivatives_match_finite_differences() {
        let probes = [[0.3, -0.8], [1.1, 0.4], [-1.5, 2.0]];
        let h = 1e-5;
        for f in test_battery(2) {
            for x in &probes {
                let g = f.grad(x);
                let hess = f.hessian(x);
                for i in 0..2 {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (f.eval(&xp) - f.eval(&xm)) / (2.0 * h);
                    assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3), "{} grad", f.name());
                    let (gp, gm) = (f.grad(&xp), f.grad(&xm));
                    for j in 0..2 {
                        let fd = (gp[j] - gm[j]) / (2.0 * h);
                        let an = hess[j * 2 + i];
                        assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{} hess", f.name());
                    }
                }
            }
        }
    }

    #[test]
    fn affine_functions_see_no_diffusion() {
        let f = TestFunction::affine(vec![0.4, -2.0], 1.0);
        let g = ContinuousGenerator::diffusion(constant_sigma(5.0));
        assert_eq!(apply_generator(&g, &f, &[1.0, 1.0], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn generator_rejects_bad_components() {
        assert!(ContinuousGenerator::new(None, None).is_err());
        let g = ContinuousGenerator::diffusion(constant_sigma(-1.0));
        let f = TestFunction::quadratic(vec![0.0], 1.0);
        assert!(matches!(apply_generator(&g, &f, &[0.0], 0.0), Err(Error::Evaluation(_))));
        let g = ContinuousGenerator::flow(constant_velocity(f64::NAN));
        assert!(matches!(apply_generator(&g, &f, &[0.0], 0.0), Err(Error::Evaluation(_))));
    }

    #[test]
    fn superposition_examples() {
        let f = TestFunction::quadratic(vec![0.0], 1.0);
        let flow = ContinuousGenerator::flow(constant_velocity(1.0));
        let diff = ContinuousGenerator::diffusion(constant_sigma(2.0_f64.sqrt()));

        let single = superpose(vec![(1.0, flow.clone())]).unwrap();
        assert_eq!(
            single.apply(&f, &[1.0], 0.0).unwrap(),
            apply_generator(&flow, &f, &[1.0], 0.0).unwrap()
        );

        let twice = superpose(vec![(0.5, flow.clone()), (0.5, flow.clone())]).unwrap();
        assert_eq!(twice.apply(&f, &[1.0], 0.0).unwrap(), 2.0);

        let mix = superpose(vec![(0.3, flow), (0.7, diff)]).unwrap();
        assert!((mix.apply(&f, &[1.0], 0.0).unwrap() - 2.0).abs() < 1e-14);
        assert!((apply_generator(&mix.collapse(), &f, &[1.0], 0.0).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn superposition_validation() {
        let g = ContinuousGenerator::zero(1);
        assert!(superpose(vec![(0.6, g.clone()), (0.6, g.clone())]).is_err());
        assert!(superpose(vec![(1.5, g.clone()), (-0.5, g.clone())]).is_err());
        assert!(superpose(vec![]).is_err());
        assert!(superpose(vec![(0.25, g.clone()), (0.75, g)]).is_ok());
    }

    #[test]
    fn marginal_from_degenerate_posteriors() {
        let cond = |x: &[f64], t: f64, z: usize| vec![x[0] * t + z as f64];
        let one = |_: &[f64], _: f64| Ok(vec![1.0]);
        assert_eq!(marginal_from_conditional(&cond, &one, &[2.0], 0.5).unwrap(), vec![1.0]);
        let first = |_: &[f64], _: f64| Ok(vec![1.0, 0.0]);
        assert_eq!(marginal_from_conditional(&cond, &first, &[2.0], 0.5).unwrap(), vec![1.0]);
        let bad = |_: &[f64], _: f64| Ok(vec![0.7, 0.7]);
        assert!(marginal_from_conditional(&cond, &bad, &[2.0], 0.5).is_err());
    }
}
