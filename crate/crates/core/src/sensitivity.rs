//! Error amplification: how far terminal samples move when the denoiser is
//! perturbed by a smooth bump, for flow-like and diffusion-like samplers.
//!
//! Perturbed and reference runs share the seed (common random numbers), so
//! the deviation reflects the perturbation rather than sampling noise. The
//! noise floor is the deviation between two unperturbed runs with different
//! seeds.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analytic::GaussianPath;
use crate::error::{Error, Result};
use crate::sampler::{FieldSource, OracleField, PerturbedField, Sampler, SamplerConfig, StepKind};
use crate::stats::{energy_distance, spearman};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySampler {
    pub label: String,
    pub step_kind: StepKind,
    #[serde(default)]
    pub churn: f64,
    #[serde(default)]
    pub epsilon: f64,
}

fn default_magnitudes() -> Vec<f64> {
    vec![0.0, 0.01, 0.03, 0.1, 0.3]
}

fn default_samples() -> usize {
    2000
}

fn default_steps() -> usize {
    200
}

fn default_width() -> f64 {
    1.0
}

/// Pure flow (probability-flow ODE with `ε = 0`) against the reverse SDE
/// with `η = 1`.
pub fn default_samplers() -> Vec<SensitivitySampler> {
    vec![
        SensitivitySampler {
            label: "flow".into(),
            step_kind: StepKind::PfOde,
            churn: 0.0,
            epsilon: 0.0,
        },
        SensitivitySampler {
            label: "diffusion".into(),
            step_kind: StepKind::ReverseSde,
            churn: 1.0,
            epsilon: 0.0,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    #[serde(default = "default_magnitudes")]
    pub magnitudes: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Bump centre; the origin when absent.
    #[serde(default)]
    pub bump_center: Option<Vec<f64>>,
    #[serde(default = "default_width")]
    pub bump_width: f64,
    /// Direction of the added displacement; the first axis when absent.
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    #[serde(default = "default_samplers")]
    pub samplers: Vec<SensitivitySampler>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            magnitudes: default_magnitudes(),
            samples: default_samples(),
            steps: default_steps(),
            bump_center: None,
            bump_width: default_width(),
            direction: None,
            samplers: default_samplers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub magnitude: f64,
    pub energy_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSensitivity {
    pub label: String,
    pub step_kind: StepKind,
    pub noise_floor: f64,
    pub deviations: Vec<Deviation>,
    /// Rank correlation between magnitude and deviation.
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub samples: usize,
    pub steps: usize,
    pub seed: u64,
    pub samplers: Vec<SamplerSensitivity>,
}

fn terminal(source: &dyn FieldSource, path: &GaussianPath, s: &SensitivitySampler, steps: usize, seed: u64, n: usize) -> Result<Array2<f64>> {
    let mut cfg = SamplerConfig::new(s.step_kind, steps, seed);
    cfg.churn = s.churn;
    cfg.epsilon = s.epsilon;
    Sampler::new(path.schedule.clone(), cfg)?.terminal_samples(source, n)
}

pub fn run_sensitivity(path: &GaussianPath, cfg: &SensitivityConfig, seed: u64) -> Result<SensitivityReport> {
    let d = path.dim();
    if cfg.samples < 2 || cfg.magnitudes.is_empty() || cfg.samplers.is_empty() {
        return Err(Error::Config("sensitivity needs ≥ 2 samples, magnitudes and samplers".into()));
    }
    if !(cfg.bump_width > 0.0) || cfg.magnitudes.iter().any(|m| !m.is_finite()) {
        return Err(Error::Config("bump width must be positive and magnitudes finite".into()));
    }
    let center = cfg.bump_center.clone().unwrap_or_else(|| vec![0.0; d]);
    let direction = cfg.direction.clone().unwrap_or_else(|| {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    });
    if center.len() != d || direction.len() != d {
        return Err(Error::Config(format!("bump centre and direction must have dimension {d}")));
    }
    let oracle = OracleField::new(path.clone());
    let mut samplers = Vec::with_capacity(cfg.samplers.len());
    for s in &cfg.samplers {
        let reference = terminal(&oracle, path, s, cfg.steps, seed, cfg.samples)?;
        let other = terminal(&oracle, path, s, cfg.steps, seed.wrapping_add(1), cfg.samples)?;
        let noise_floor = energy_distance(&reference, &other);
        let mut deviations = Vec::with_capacity(cfg.magnitudes.len());
        for &m in &cfg.magnitudes {
            let field = PerturbedField {
                inner: &oracle,
                schedule: path.schedule.clone(),
                center: center.clone(),
                width: cfg.bump_width,
                direction: direction.clone(),
                magnitude: m,
            };
            let x = terminal(&field, path, s, cfg.steps, seed, cfg.samples)?;
            deviations.push(Deviation {
                magnitude: m,
                energy_distance: energy_distance(&x, &reference),
            });
        }
        let mags: Vec<f64> = deviations.iter().map(|d| d.magnitude).collect();
        let devs: Vec<f64> = deviations.iter().map(|d| d.energy_distance).collect();
        samplers.push(SamplerSensitivity {
            label: s.label.clone(),
            step_kind: s.step_kind,
            noise_floor,
            deviations,
            spearman: spearman(&mags, &devs),
        });
    }
    Ok(SensitivityReport {
        samples: cfg.samples,
        steps: cfg.steps,
        seed,
        samplers,
    })
}
