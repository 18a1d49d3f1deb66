//! The JSON experiment document shared by every subcommand. Each subcommand
//! reads the sections it needs; unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use gmlab_core::analytic::{GaussianMixture, GaussianPath, MixtureComponent};
use gmlab_core::discrete::{Kappa, Scheme};
use gmlab_core::kfe;
use gmlab_core::sensitivity::SensitivityConfig;
use gmlab_core::train::TargetHead;
use gmlab_core::{ContinuousGenerator, DatasetSpec, ScheduleSpec, StepKind};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    /// Oracle data law; falls back to a Gaussian-mixture dataset source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<Vec<MixtureComponent>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convert: Option<ConvertSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerSection>,
    /// Training hyperparameters: every field of the training configuration
    /// except `dataset`, `schedule` and `seed`, which live at the top level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kfe: Option<KfeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superpose: Option<SuperposeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrete: Option<DiscreteSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn oracle_mixture(&self) -> Result<GaussianMixture> {
        if let Some(components) = &self.mixture {
            return Ok(GaussianMixture::from_components(components)?);
        }
        if let Some(m) = self.dataset.as_ref().map(|d| d.mixture()).transpose()?.flatten() {
            return Ok(m);
        }
        Err(gmlab_core::Error::Config("missing \"mixture\" section (or a gaussian_mixture dataset)".into()).into())
    }

    pub fn oracle_path(&self) -> Result<GaussianPath> {
        Ok(GaussianPath::new(self.oracle_mixture()?, self.schedule.build()?))
    }
}

/// A section that the running subcommand cannot do without.
pub fn required<'a, T>(name: &str, section: &'a Option<T>) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| gmlab_core::Error::Config(format!("missing \"{name}\" section")).into())
}

fn default_churn() -> f64 {
    1.0
}

fn default_one() -> f64 {
    1.0
}

fn default_t_start() -> f64 {
    1.0
}

fn default_samples() -> usize {
    10_000
}

fn default_steps() -> usize {
    200
}

fn default_moment_tolerance() -> f64 {
    0.05
}

fn default_kfe_tolerance() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertSection {
    /// Evaluation times; `0.1, …, 0.9` when absent.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    /// Churn `η`, giving `ε = η g`.
    #[serde(default = "default_churn")]
    pub churn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub step_kind: StepKind,
    pub steps: usize,
    #[serde(default = "default_t_start")]
    pub t_start: f64,
    #[serde(default)]
    pub t_end: f64,
    #[serde(default = "default_churn")]
    pub churn: f64,
    #[serde(default = "default_one")]
    pub epsilon: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// How many full trajectories to record.
    #[serde(default)]
    pub trajectories: usize,
    /// A trained model; the oracle mixture is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub head: TargetHead,
    /// Largest accepted error of the terminal mean and variance against the
    /// oracle law.
    #[serde(default = "default_moment_tolerance")]
    pub moment_tolerance: f64,
}

/// A generator built from the oracle path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// The marginal velocity of the path.
    Flow {},
    /// The marginal velocity multiplied by `factor`.
    ScaledFlow { factor: f64 },
    /// `u + ½ε² ∇log p` with diffusion `ε`.
    FlowScore {
        #[serde(default = "default_one")]
        epsilon: f64,
    },
    /// The forward SDE of the schedule.
    Diffusion {},
    /// Diffusion `s · exp(−‖x − c‖²/(2w²))` with the matching drift.
    StateDependent {
        scale: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default = "default_one")]
        width: f64,
    },
    Zero {},
}

impl GeneratorSpec {
    pub fn build(&self, path: &GaussianPath) -> Result<ContinuousGenerator> {
        let d = path.dim();
        Ok(match self {
            GeneratorSpec::Flow {} => kfe::matched_flow(path),
            GeneratorSpec::ScaledFlow { factor } => kfe::scaled_flow(path, *factor),
            GeneratorSpec::FlowScore { epsilon } => kfe::matched_flow_with_score(path, *epsilon),
            GeneratorSpec::Diffusion {} => kfe::matched_diffusion(path)?,
            GeneratorSpec::StateDependent { scale, center, width } => {
                let center = center.clone().unwrap_or_else(|| vec![0.0; d]);
                if center.len() != d || !(*width > 0.0) {
                    return Err(gmlab_core::Error::Config(format!(
                        "state-dependent diffusion needs a {d}-dimensional centre and positive width"
                    ))
                    .into());
                }
                kfe::matched_state_dependent(path, *scale, center, *width)
            }
            GeneratorSpec::Zero {} => ContinuousGenerator::zero(d),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfeSection {
    pub generator: GeneratorSpec,
    #[serde(default = "kfe::default_time_grid")]
    pub times: Vec<f64>,
    #[serde(default = "default_kfe_tolerance")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperposePart {
    pub weight: f64,
    pub generator: GeneratorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperposeSection {
    pub parts: Vec<SuperposePart>,
    #[serde(default = "kfe::default_time_grid")]
    pub times: Vec<f64>,
    #[serde(default = "default_kfe_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_t_start")]
    pub t_start: f64,
    #[serde(default)]
    pub t_end: f64,
    #[serde(default = "default_moment_tolerance")]
    pub moment_tolerance: f64,
}

/// The discrete target: one state or a distribution over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DiscreteTarget {
    State(usize),
    Distribution(Vec<f64>),
}

fn default_t1() -> f64 {
    0.99
}

fn default_runs() -> usize {
    10_000
}

fn default_master_steps() -> usize {
    20_000
}

fn default_tv_tolerance() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteSection {
    pub states: usize,
    /// Source distribution; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<f64>>,
    pub target: DiscreteTarget,
    #[serde(default)]
    pub kappa: Kappa,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_t1")]
    pub t1: f64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_master_steps")]
    pub master_steps: usize,
    /// Largest accepted total variation between simulation and master equation.
    #[serde(default = "default_tv_tolerance")]
    pub tolerance: f64,
}

fn default_scheme() -> Scheme {
    Scheme::ExactClock
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seed": 1}"#).is_ok());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"kfe": {"generator": {"kind": "flow"}, "tol": 1}}"#).is_err());
    }

    #[test]
    fn discrete_target_forms() {
        let s: DiscreteSection = serde_json::from_str(r#"{"states": 4, "target": 2}"#).unwrap();
        assert_eq!(s.target, DiscreteTarget::State(2));
        let s: DiscreteSection = serde_json::from_str(r#"{"states": 2, "target": [0.5, 0.5]}"#).unwrap();
        assert_eq!(s.target, DiscreteTarget::Distribution(vec![0.5, 0.5]));
        assert_eq!(s.scheme, Scheme::ExactClock);
    }

    #[test]
    fn oracle_falls_back_to_the_dataset() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset": {"source": {"kind": "gaussian_mixture",
                "components": [{"weight": 1.0, "mean": [0.0], "variance": 1.0}]}, "n": 10}}"#,
        )
        .unwrap();
        assert_eq!(cfg.oracle_mixture().unwrap().dim(), 1);
        let empty: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(empty.oracle_mixture().unwrap_err().exit_code(), 1);
    }
}
