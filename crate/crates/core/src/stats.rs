//! Sample statistics used by the experiments: moments, energy distance and
//! rank correlation.

use ndarray::{Array2, Axis};

/// Column means.
pub fn mean(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}

/// Unbiased column variances.
pub fn variance(x: &Array2<f64>) -> Vec<f64> {
    x.var_axis(Axis(0), 1.0).to_vec()
}

fn dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

fn mean_cross_distance(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for a in x.rows() {
        for b in y.rows() {
            total += dist(a, b);
        }
    }
    total / (x.nrows() * y.nrows()) as f64
}

/// V-statistic energy distance `2E‖X − Y‖ − E‖X − X'‖ − E‖Y − Y'‖`; zero for
/// identical samples, nonnegative otherwise.
pub fn energy_distance(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let v = 2.0 * mean_cross_distance(x, y) - mean_cross_distance(x, x) - mean_cross_distance(y, y);
    v.max(0.0)
}

/// Ranks starting at one, ties sharing their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `NaN` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
