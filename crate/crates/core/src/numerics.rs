//! Numerical building blocks shared by the schedule, KFE and oracle code:
//! adaptive Gauss–Kronrod quadrature, Gauss–Hermite rules, monotone cubic
//! interpolation and five-point finite differences.

use std::collections::BinaryHeap;
use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Default absolute tolerance for adaptive quadrature.
pub const QUAD_ABS_TOL: f64 = 1e-9;

const MAX_PANELS: usize = 4000;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

// Gauss weights for the 7-point rule sharing nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<Panel> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    if !fc.is_finite() {
        return Err(Error::Integration(format!("non-finite integrand at {center}")));
    }
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        if !f1.is_finite() || !f2.is_finite() {
            return Err(Error::Integration(format!(
                "non-finite integrand near {}",
                if f1.is_finite() { center + dx } else { center - dx }
            )));
        }
        kronrod += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    Ok(Panel {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    })
}

/// Integrates `f` over `[a, b]` with globally adaptive G7–K15 panels.
///
/// The integral is accepted once the summed error estimate drops below
/// `abs_tol`. Integrals with `b < a` are returned with the sign flipped.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Integration("non-finite integration bounds".into()));
    }
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return integrate(f, b, a, abs_tol).map(|v| -v);
    }
    let first = gk15(&f, a, b)?;
    let mut total_err = first.error;
    let mut heap = BinaryHeap::new();
    heap.push(first);
    while total_err > abs_tol {
        if heap.len() >= MAX_PANELS {
            return Err(Error::Integration(format!(
                "panel budget exhausted on [{a}, {b}] with error estimate {total_err:e}"
            )));
        }
        let worst = heap.pop().expect("heap is never empty here");
        let mid = 0.5 * (worst.a + worst.b);
        let left = gk15(&f, worst.a, mid)?;
        let right = gk15(&f, mid, worst.b)?;
        total_err += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
    }
    // Re-sum so cancellation in the running total does not leak into the result.
    Ok(heap.iter().map(|p| p.value).sum())
}

/// Gauss–Hermite rule for expectations under a normal law.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds the `n`-point rule for the weight `exp(-x²)` by Newton iteration
    /// on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let mut z = 0.0_f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights rescaled for `E[g(X)]`, `X ~ N(0, 1)`.
    pub fn standard_normal(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (std::f64::consts::SQRT_2 * x, w * inv_sqrt_pi))
    }

    /// `E[g(X)]` for `X ~ N(mean, variance · I)` in `mean.len()` dimensions,
    /// evaluated on the tensor-product grid.
    pub fn expect<G: FnMut(&[f64]) -> f64>(&self, mean: &[f64], variance: f64, mut g: G) -> f64 {
        let d = mean.len();
        let std = variance.max(0.0).sqrt();
        let rule: Vec<(f64, f64)> = self.standard_normal().collect();
        let n = rule.len();
        let mut idx = vec![0usize; d];
        let mut point = vec![0.0; d];
        let mut acc = 0.0;
        loop {
            let mut w = 1.0;
            for k in 0..d {
                let (node, weight) = rule[idx[k]];
                point[k] = mean[k] + std * node;
                w *= weight;
            }
            acc += w * g(&point);
            // odometer increment
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
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Validation("abscissae and ordinates differ in length".into()));
        }
        if xs.len() < 2 {
            return Err(Error::Validation("need at least two interpolation nodes".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("interpolation nodes must be strictly increasing".into()));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::Validation("interpolation table contains non-finite values".into()));
        }
        let n = xs.len();
        let secants: Vec<f64> = (0..n - 1)
            .map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]))
            .collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = secants[0];
        slopes[n - 1] = secants[n - 2];
        for i in 1..n - 1 {
            let (s0, s1) = (secants[i - 1], secants[i]);
            if s0 * s1 <= 0.0 {
                slopes[i] = 0.0;
            } else {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                slopes[i] = (w1 + w2) / (w1 / s0 + w2 / s1);
            }
        }
        Ok(Self { xs, ys, slopes })
    }

    fn locate(&self, x: f64) -> usize {
        let n = self.xs.len();
        match self.xs.partition_point(|&v| v <= x) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    /// Value at `x`; outside the table the end cubic is extended.
    pub fn eval(&self, x: f64) -> f64 {
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let s = (x - self.xs[i]) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }

    /// Derivative of the interpolant at `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let s = (x - self.xs[i]) / h;
        let d00 = 6.0 * s * s - 6.0 * s;
        let d10 = 3.0 * s * s - 4.0 * s + 1.0;
        let d01 = -6.0 * s * s + 6.0 * s;
        let d11 = 3.0 * s * s - 2.0 * s;
        (d00 * self.ys[i] + d01 * self.ys[i + 1]) / h + d10 * self.slopes[i] + d11 * self.slopes[i + 1]
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }
}

/// Five-point finite-difference derivative of `f` at `t`, kept inside `[lo, hi]`.
///
/// Central stencil in the interior, one-sided fourth-order stencils near the ends.
pub fn five_point_derivative<F: Fn(f64) -> f64>(f: &F, t: f64, h: f64, lo: f64, hi: f64) -> f64 {
    if t - 2.0 * h >= lo && t + 2.0 * h <= hi {
        (f(t - 2.0 * h) - 8.0 * f(t - h) + 8.0 * f(t + h) - f(t + 2.0 * h)) / (12.0 * h)
    } else if t - 2.0 * h < lo {
        (-25.0 * f(t) + 48.0 * f(t + h) - 36.0 * f(t + 2.0 * h) + 16.0 * f(t + 3.0 * h)
            - 3.0 * f(t + 4.0 * h))
            / (12.0 * h)
    } else {
        (25.0 * f(t) - 48.0 * f(t - h) + 36.0 * f(t - 2.0 * h) - 16.0 * f(t - 3.0 * h)
            + 3.0 * f(t - 4.0 * h))
            / (12.0 * h)
    }
}
