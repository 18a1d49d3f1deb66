//! Shared fixtures for the benchmarks.

use gmlab_core::analytic::{GaussianMixture, GaussianPath, MixtureComponent};
use gmlab_core::NoiseSchedule;

/// Two well-separated modes in `d` dimensions on the flow-matching schedule.
pub fn two_mode_path(d: usize) -> GaussianPath {
    let mode = |sign: f64| MixtureComponent {
        weight: 0.5,
        mean: (0..d).map(|k| if k == 0 { sign * 1.5 } else { 0.0 }).collect(),
        variance: 0.25,
    };
    let mixture = GaussianMixture::from_components(&[mode(1.0), mode(-1.0)]).expect("valid mixture");
    GaussianPath::new(mixture, NoiseSchedule::flow_matching())
}
