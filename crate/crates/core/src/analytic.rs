//! Closed-form oracle for isotropic Gaussian-mixture data pushed through the
//! interpolation path `z_t = α_t x + σ_t ε`.
//!
//! Under the path, component `i` with mean `μᵢ` and variance `vᵢ` becomes
//! `N(α_t μᵢ, (α_t² vᵢ + σ_t²) I)`, so densities, scores, responsibilities and
//! the marginal velocity are all available exactly. Everything else in the
//! crate is checked against these.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal_vec;
use crate::schedule::NoiseSchedule;

/// Densities below this are reported as underflow rather than producing
/// meaningless scores.
pub const DENSITY_FLOOR: f64 = 1e-300;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One component in a JSON mixture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::Validation("mixture needs matching, non-empty weights/means/variances".into()));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d || m.iter().any(|c| !c.is_finite())) {
            return Err(Error::Validation("mixture means must share a positive dimension and be finite".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Validation("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("mixture weights sum to {total}")));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Validation("mixture variances must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Single isotropic Gaussian.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    /// Two equally weighted components at `±mean`.
    pub fn symmetric_pair(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let neg = mean.iter().map(|c| -c).collect();
        Self::new(vec![0.5, 0.5], vec![mean, neg], vec![variance, variance])
    }

    pub fn from_components(components: &[MixtureComponent]) -> Result<Self> {
        Self::new(
            components.iter().map(|c| c.weight).collect(),
            components.iter().map(|c| c.mean.clone()).collect(),
            components.iter().map(|c| c.variance).collect(),
        )
    }

    pub fn components(&self) -> Vec<MixtureComponent> {
        (0..self.len())
            .map(|i| MixtureComponent {
                weight: self.weights[i],
                mean: self.means[i].clone(),
                variance: self.variances[i],
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Overall mean `Σ wᵢ μᵢ`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// Index of the component drawn by a uniform variate `u ∈ [0, 1)`.
    fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.len() - 1
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let i = self.pick(rng.random::<f64>());
        let std = self.variances[i].sqrt();
        standard_normal_vec(rng, self.dim())
            .into_iter()
            .zip(&self.means[i])
            .map(|(e, m)| m + std * e)
            .collect()
    }

    /// `n × d` matrix of independent draws.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            for (dst, v) in row.iter_mut().zip(self.sample_one(rng)) {
                *dst = v;
            }
        }
        out
    }

    /// Law of `z_t` under `ns`.
    pub fn marginal_law(&self, ns: &NoiseSchedule, t: f64) -> MarginalLaw {
        let (a, s) = (ns.alpha(t), ns.sigma(t));
        MarginalLaw {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().map(|c| a * c).collect()).collect(),
            variances: self.variances.iter().map(|v| a * a * v + s * s).collect(),
        }
    }
}

/// The mixture at time `t`: unchanged weights, means `α_t μᵢ`, variances `α_t² vᵢ + σ_t²`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalLaw {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl MarginalLaw {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `log wᵢ + log N(x; mᵢ, cᵢ I)` per component.
    fn log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), c)| {
                let r2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * (d * (LN_2PI + c.ln()) + r2 / c)
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(x))
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    fn guarded_terms(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let terms = self.log_terms(x);
        let lse = log_sum_exp(&terms);
        if !(lse >= DENSITY_FLOOR.ln()) {
            return Err(Error::Evaluation(format!(
                "marginal density underflows at {x:?} (log density {lse}); move the probe closer to the data"
            )));
        }
        Ok((terms, lse))
    }

    /// Responsibilities `wᵢ N(x; mᵢ, cᵢ) / p(x)`, computed in log space.
    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (terms, lse) = self.guarded_terms(x)?;
        Ok(terms.iter().map(|v| (v - lse).exp()).collect())
    }

    /// `∇ log p(x) = −Σ rᵢ (x − mᵢ) / cᵢ`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let post = self.posterior(x)?;
        let mut s = vec![0.0; x.len()];
        for ((r, m), c) in post.iter().zip(&self.means).zip(&self.variances) {
            for ((o, xi), mi) in s.iter_mut().zip(x).zip(m) {
                *o -= r * (xi - mi) / c;
            }
        }
        Ok(s)
    }

    /// Draw from the law.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let std = self.variances[idx].sqrt();
        standard_normal_vec(rng, self.dim())
            .into_iter()
            .zip(&self.means[idx])
            .map(|(e, m)| m + std * e)
            .collect()
    }
}

/// Density of `z_t` at `x`.
pub fn marginal_density(gm: &GaussianMixture, ns: &NoiseSchedule, x: &[f64], t: f64) -> f64 {
    gm.marginal_law(ns, t).density(x)
}

/// `∇_x log p_t(x)`.
pub fn score(gm: &GaussianMixture, ns: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    gm.marginal_law(ns, t).score(x)
}

/// Posterior over mixture components given `z_t = x`.
pub fn posterior_weights(gm: &GaussianMixture, ns: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    gm.marginal_law(ns, t).posterior(x)
}

/// `(E[x₀ | z_t = x, i], E[ε | z_t = x, i])` for component `i`.
fn component_posterior_means(gm: &GaussianMixture, ns: &NoiseSchedule, i: usize, x: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let (a, s) = (ns.alpha(t), ns.sigma(t));
    let v = gm.variances[i];
    let c = a * a * v + s * s;
    let mu = &gm.means[i];
    let x0 = x.iter().zip(mu).map(|(xi, m)| m + a * v / c * (xi - a * m)).collect();
    let eps = x.iter().zip(mu).map(|(xi, m)| s / c * (xi - a * m)).collect();
    (x0, eps)
}

/// Velocity of the path conditioned on component `i`:
/// `α̇ E[x₀ | x, i] + σ̇ E[ε | x, i]`.
pub fn component_velocity(gm: &GaussianMixture, ns: &NoiseSchedule, i: usize, x: &[f64], t: f64) -> Vec<f64> {
    let (x0, eps) = component_posterior_means(gm, ns, i, x, t);
    let (ad, sd) = (ns.alpha_dot(t), ns.sigma_dot(t));
    x0.iter().zip(&eps).map(|(a, e)| ad * a + sd * e).collect()
}

/// Posterior mean `E[x₀ | z_t = x]` (the ideal denoiser).
pub fn posterior_mean(gm: &GaussianMixture, ns: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let post = posterior_weights(gm, ns, x, t)?;
    let mut out = vec![0.0; x.len()];
    for (i, w) in post.iter().enumerate() {
        let (x0, _) = component_posterior_means(gm, ns, i, x, t);
        for (o, v) in out.iter_mut().zip(x0) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Marginal velocity `u_t(x) = α̇_t E[x₀ | z_t = x] + σ̇_t E[ε | z_t = x]`.
pub fn marginal_velocity(gm: &GaussianMixture, ns: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let post = posterior_weights(gm, ns, x, t)?;
    let mut out = vec![0.0; x.len()];
    for (i, w) in post.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(component_velocity(gm, ns, i, x, t)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// The same velocity through the score:
/// `u_t(x) = (α̇/α) x + (α̇σ²/α − σ̇σ) ∇log p_t(x)`. Needs `α_t > 0`.
pub fn velocity_from_score(ns: &NoiseSchedule, x: &[f64], score: &[f64], t: f64) -> Vec<f64> {
    let (a, s, ad, sd) = (ns.alpha(t), ns.sigma(t), ns.alpha_dot(t), ns.sigma_dot(t));
    let lin = ad / a;
    let coef = ad * s * s / a - sd * s;
    x.iter().zip(score).map(|(xi, si)| lin * xi + coef * si).collect()
}

/// A mixture pushed along a schedule: the analytic marginal path `t ↦ p_t`.
#[derive(Debug, Clone)]
pub struct GaussianPath {
    pub mixture: GaussianMixture,
    pub schedule: NoiseSchedule,
}

impl GaussianPath {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { mixture, schedule }
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn law(&self, t: f64) -> MarginalLaw {
        self.mixture.marginal_law(&self.schedule, t)
    }

    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.law(t).score(x)
    }

    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        marginal_velocity(&self.mixture, &self.schedule, x, t)
    }
}

/// Finitely many data points (Dirac atoms) with weights, under the path.
///
/// The conditional path of atom `z` is `N(α_t z, σ_t² I)`, so for `σ_t > 0`
/// the posterior over atoms and the conditional targets are exact.
#[derive(Debug, Clone)]
pub struct AtomSet {
    weights: Vec<f64>,
    atoms: Vec<Vec<f64>>,
}

impl AtomSet {
    pub fn new(weights: Vec<f64>, atoms: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != atoms.len() {
            return Err(Error::Validation("atom set needs matching, non-empty weights and atoms".into()));
        }
        let d = atoms[0].len();
        if atoms.iter().any(|a| a.len() != d) || d == 0 {
            return Err(Error::Validation("atoms must share a positive dimension".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation("atom weights must be positive and sum to 1".into()));
        }
        Ok(Self { weights, atoms })
    }

    pub fn uniform(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let n = atoms.len();
        Self::new(vec![1.0 / n as f64; n], atoms)
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    /// `p(z | z_t = x) ∝ w_z N(x; α_t z, σ_t² I)`.
    pub fn posterior(&self, ns: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (a, s) = (ns.alpha(t), ns.sigma(t));
        if !(s > 0.0) {
            return Err(Error::Domain(format!("atom posterior needs σ_t > 0 (t = {t})")));
        }
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.atoms)
            .map(|(w, z)| {
                let r2: f64 = x.iter().zip(z).map(|(xi, zi)| (xi - a * zi).powi(2)).sum();
                w.ln() - 0.5 * r2 / (s * s)
            })
            .collect();
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().map(|v| (v - lse).exp()).collect())
    }

    /// Conditional velocity `α̇ z + σ̇ (x − α z)/σ` of atom `k`.
    pub fn conditional_velocity(&self, ns: &NoiseSchedule, k: usize, x: &[f64], t: f64) -> Vec<f64> {
        let (a, s, ad, sd) = (ns.alpha(t), ns.sigma(t), ns.alpha_dot(t), ns.sigma_dot(t));
        x.iter()
            .zip(&self.atoms[k])
            .map(|(xi, zi)| ad * zi + sd * (xi - a * zi) / s)
            .collect()
    }
}
