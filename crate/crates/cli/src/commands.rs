//! One function per subcommand. Each writes its outputs into the run
//! directory and reports a threshold violation as [`Error::Violated`] only
//! after everything has been written.

use std::fmt::Write as _;

use gmlab_core::analytic::GaussianMixture;
use gmlab_core::discrete::{
    conditional_rates, master_equation_solve, CtmcSimulator, DiscreteDistribution, MixedTargetPath, MixturePath,
    RateMatrix,
};
use gmlab_core::generator::{superpose, test_battery};
use gmlab_core::kfe::{verify_kfe, PreconditionReport};
use gmlab_core::sampler::{sample_generator_terminal, FieldSource, OracleField};
use gmlab_core::schedule::{diffusion_from_interpolation, round_trip_check, StochasticityLevel, DEFAULT_DELTA};
use gmlab_core::sensitivity::run_sensitivity;
use gmlab_core::train::{train, Mlp, ModelField, TrainConfig};
use gmlab_core::{data, stats, Error as CoreError, Sampler, SamplerConfig, StepKind};
use serde::Serialize;
use serde_json::Value;

use crate::config::{required, DiscreteTarget, ExperimentConfig};
use crate::error::{Error, Result};
use crate::output::RunDir;

/// What a subcommand needs besides its config.
pub struct Context<'a> {
    pub config: &'a ExperimentConfig,
    pub seed: u64,
    pub out: &'a mut RunDir,
}

fn config_error(msg: impl Into<String>) -> Error {
    CoreError::Config(msg.into()).into()
}

/// One row of the conversion table.
#[derive(Debug, Serialize)]
pub struct ConversionRow {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub f: f64,
    pub g: f64,
    pub epsilon: f64,
}

#[derive(Debug, Serialize)]
struct ConversionTable<'a> {
    schedule: &'a str,
    churn: f64,
    /// Worst `|α − α̂| + |σ − σ̂|` after converting to the diffusion form and back.
    round_trip_max_error: Option<f64>,
    rows: Vec<ConversionRow>,
}

pub fn cmd_convert(ctx: Context<'_>) -> Result<()> {
    let ns = ctx.config.schedule.build()?;
    let section = ctx.config.convert.clone().unwrap_or(crate::config::ConvertSection {
        times: None,
        churn: 1.0,
    });
    let times = section.times.unwrap_or_else(gmlab_core::kfe::default_time_grid);
    if !(section.churn >= 0.0) {
        return Err(config_error("churn must be nonnegative"));
    }
    for &t in &times {
        ns.check_time(t)?;
    }
    let eta = section.churn;
    let ds = diffusion_from_interpolation(&ns, &StochasticityLevel::constant(0.0))?.with_churn(std::sync::Arc::new(move |_| eta))?;
    let mut rows = Vec::with_capacity(times.len());
    let mut csv = String::from("t,alpha,sigma,f,g,epsilon\n");
    for &t in &times {
        let (f, g, eta) = ds.coefficients(t)?;
        let row = ConversionRow {
            t,
            alpha: ns.alpha(t),
            sigma: ns.sigma(t),
            f,
            g,
            epsilon: eta * g,
        };
        writeln!(csv, "{},{},{},{},{},{}", row.t, row.alpha, row.sigma, row.f, row.g, row.epsilon).expect("string write");
        rows.push(row);
    }
    let round_trip: Vec<f64> = times.iter().copied().filter(|t| *t <= 0.99).collect();
    let table = ConversionTable {
        schedule: ns.name(),
        churn: section.churn,
        round_trip_max_error: if round_trip.is_empty() {
            None
        } else {
            Some(round_trip_check(&ns, &round_trip)?)
        },
        rows,
    };
    ctx.out.write_text("conversion.csv", &csv)?;
    ctx.out.write_json("conversion.json", &table)?;
    Ok(())
}

/// Per-coordinate mean and variance of a mixture.
pub fn mixture_moments(m: &GaussianMixture) -> (Vec<f64>, Vec<f64>) {
    let mean = m.mean();
    let mut second = vec![0.0; m.dim()];
    for ((w, mu), v) in m.weights().iter().zip(m.means()).zip(m.variances()) {
        for (s, x) in second.iter_mut().zip(mu) {
            *s += w * (v + x * x);
        }
    }
    let var = second.iter().zip(&mean).map(|(s, m)| s - m * m).collect();
    (mean, var)
}

#[derive(Debug, Serialize)]
pub struct MomentCheck {
    pub data_mean: Vec<f64>,
    pub data_variance: Vec<f64>,
    pub max_mean_error: f64,
    pub max_variance_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl MomentCheck {
    pub fn new(m: &GaussianMixture, mean: &[f64], var: &[f64], tolerance: f64) -> Self {
        let (data_mean, data_variance) = mixture_moments(m);
        let err = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let max_mean_error = err(mean, &data_mean);
        let max_variance_error = err(var, &data_variance);
        Self {
            passed: max_mean_error < tolerance && max_variance_error < tolerance,
            data_mean,
            data_variance,
            max_mean_error,
            max_variance_error,
            tolerance,
        }
    }
}

#[derive(Debug, Serialize)]
struct SampleSummary {
    source: &'static str,
    step_kind: Option<StepKind>,
    steps: usize,
    samples: usize,
    mean: Vec<f64>,
    variance: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    moment_check: Option<MomentCheck>,
}

fn violated_moments(check: &Option<MomentCheck>) -> Result<()> {
    match check {
        Some(c) if !c.passed => Err(Error::Violated(format!(
            "terminal moments off by {:.4} (mean) and {:.4} (variance), tolerance {}",
            c.max_mean_error, c.max_variance_error, c.tolerance
        ))),
        _ => Ok(()),
    }
}

fn trajectory_header(d: usize) -> String {
    let mut h = String::from("traj_id,step,t");
    for k in 0..d {
        write!(h, ",x_{k}").expect("string write");
    }
    h.push('\n');
    h
}

pub fn cmd_sample(ctx: Context<'_>) -> Result<()> {
    let section = required("sampler", &ctx.config.sampler)?;
    let ns = ctx.config.schedule.build()?;
    let cfg = SamplerConfig {
        steps: section.steps,
        t_start: section.t_start,
        t_end: section.t_end,
        seed: ctx.seed,
        step_kind: section.step_kind,
        churn: section.churn,
        epsilon: section.epsilon,
    };
    if section.samples == 0 {
        return Err(config_error("sampler needs at least one sample"));
    }
    let (source, oracle): (Box<dyn FieldSource>, Option<GaussianMixture>) = match &section.checkpoint {
        Some(path) => {
            let model = Mlp::load(path)?;
            let field = ModelField {
                model,
                schedule: ns.clone(),
                head: section.head,
            };
            (Box::new(field), None)
        }
        None => {
            let path = ctx.config.oracle_path()?;
            let m = path.mixture.clone();
            (Box::new(OracleField::new(path)), Some(m))
        }
    };
    let sampler = Sampler::new(ns, cfg)?;
    let x = sampler.terminal_samples(source.as_ref(), section.samples)?;
    ctx.out.write_text("samples.csv", &data::to_csv(&x))?;

    if section.trajectories > 0 {
        let mut csv = trajectory_header(source.dim());
        for i in 0..section.trajectories.min(section.samples) {
            let tr = sampler.trajectory(source.as_ref(), None, i as u64)?;
            for (k, (t, z)) in tr.times.iter().zip(&tr.states).enumerate() {
                write!(csv, "{i},{k},{t}").expect("string write");
                for v in z {
                    write!(csv, ",{v}").expect("string write");
                }
                csv.push('\n');
            }
        }
        ctx.out.write_text("trajectories.csv", &csv)?;
    }

    let mean = stats::mean(&x);
    let variance = stats::variance(&x);
    let moment_check = oracle.map(|m| MomentCheck::new(&m, &mean, &variance, section.moment_tolerance));
    let summary = SampleSummary {
        source: if section.checkpoint.is_some() { "checkpoint" } else { "oracle" },
        step_kind: Some(section.step_kind),
        steps: section.steps,
        samples: section.samples,
        mean,
        variance,
        moment_check,
    };
    ctx.out.write_json("summary.json", &summary)?;
    violated_moments(&summary.moment_check)
}

pub fn cmd_train(ctx: Context<'_>) -> Result<()> {
    let dataset = required("dataset", &ctx.config.dataset)?;
    let mut section = ctx.config.train.clone().unwrap_or_default();
    for key in ["dataset", "schedule", "seed"] {
        if section.contains_key(key) {
            return Err(config_error(format!("\"{key}\" belongs at the top level, not in \"train\"")));
        }
    }
    section.insert("dataset".into(), serde_json::to_value(dataset)?);
    section.insert("schedule".into(), serde_json::to_value(&ctx.config.schedule)?);
    section.insert("seed".into(), Value::from(ctx.seed));
    let cfg: TrainConfig = serde_json::from_value(Value::Object(section))?;
    let (field, report) = train(&cfg)?;
    ctx.out.write_bytes("model.gmlb", &field.model.to_bytes())?;
    ctx.out.write_json("report.json", &report)?;
    let mut csv = String::from("iteration,loss\n");
    for p in &report.loss_curve {
        writeln!(csv, "{},{}", p.iteration, p.loss).expect("string write");
    }
    ctx.out.write_text("loss_curve.csv", &csv)?;
    match &report.aborted {
        Some(msg) => Err(CoreError::Numerical(format!("training diverged: {msg}")).into()),
        None => Ok(()),
    }
}

pub fn cmd_verify_kfe(ctx: Context<'_>) -> Result<()> {
    let section = required("kfe", &ctx.config.kfe)?;
    let path = ctx.config.oracle_path()?;
    let gen = section.generator.build(&path)?;
    let report = verify_kfe(&path, &gen, &test_battery(path.dim()), &section.times)?;
    ctx.out.write_json("kfe_report.json", &report)?;
    ctx.out.write_text("kfe_residuals.csv", &report.to_csv())?;
    if !(report.max_residual < section.tolerance) {
        return Err(Error::Violated(format!(
            "max KFE residual {:e} is not below {:e}",
            report.max_residual, section.tolerance
        )));
    }
    Ok(())
}

pub fn cmd_superpose(ctx: Context<'_>) -> Result<()> {
    let section = required("superpose", &ctx.config.superpose)?;
    let path = ctx.config.oracle_path()?;
    let battery = test_battery(path.dim());
    let mut parts = Vec::with_capacity(section.parts.len());
    let mut part_max = Vec::with_capacity(section.parts.len());
    for p in &section.parts {
        let g = p.generator.build(&path)?;
        part_max.push(verify_kfe(&path, &g, &battery, &section.times)?.max_residual);
        parts.push((p.weight, g));
    }
    let mixed = superpose(parts)?;
    let mut report = verify_kfe(&path, &mixed, &battery, &section.times)?;
    report.precondition = Some(PreconditionReport {
        tolerance: section.tolerance,
        satisfied: part_max.iter().all(|r| *r < section.tolerance),
        part_max_residuals: part_max,
    });
    ctx.out.write_json("kfe_report.json", &report)?;
    ctx.out.write_text("kfe_residuals.csv", &report.to_csv())?;

    if section.samples == 0 {
        return Err(config_error("superpose needs at least one sample"));
    }
    let grid_cfg = SamplerConfig {
        t_start: section.t_start,
        t_end: section.t_end,
        ..SamplerConfig::new(StepKind::FlowEuler, section.steps, ctx.seed)
    };
    let grid = grid_cfg.time_grid(&path.schedule)?;
    let x = sample_generator_terminal(&mixed.collapse(), &path, &grid, ctx.seed, section.samples)?;
    ctx.out.write_text("samples.csv", &data::to_csv(&x))?;
    let mean = stats::mean(&x);
    let variance = stats::variance(&x);
    let check = MomentCheck::new(&path.mixture, &mean, &variance, section.moment_tolerance);
    let summary = SampleSummary {
        source: "superposition",
        step_kind: None,
        steps: section.steps,
        samples: section.samples,
        mean,
        variance,
        moment_check: Some(check),
    };
    ctx.out.write_json("summary.json", &summary)?;
    if !(report.max_residual < section.tolerance) {
        return Err(Error::Violated(format!(
            "max KFE residual of the superposition {:e} is not below {:e}",
            report.max_residual, section.tolerance
        )));
    }
    violated_moments(&summary.moment_check)
}

#[derive(Debug, Serialize)]
struct DiscreteReport {
    states: usize,
    t0: f64,
    t1: f64,
    runs: usize,
    thinning_bound: f64,
    empirical: Vec<f64>,
    master: Vec<f64>,
    exact: Vec<f64>,
    tv_empirical_vs_master: f64,
    tv_master_vs_exact: f64,
    renormalization_drift: f64,
    /// Fraction of runs whose terminal state differs from the initial one.
    moved_fraction: f64,
    tolerance: f64,
    passed: bool,
    warnings: Vec<String>,
}

pub fn cmd_discrete(ctx: Context<'_>, warn: &mut dyn FnMut(&str)) -> Result<()> {
    let s = required("discrete", &ctx.config.discrete)?;
    let n = s.states;
    if n < 2 || s.runs == 0 {
        return Err(config_error("discrete demo needs at least two states and one run"));
    }
    let p0 = match &s.p0 {
        Some(p) => DiscreteDistribution::new(p.clone())?,
        None => DiscreteDistribution::uniform(n),
    };
    if p0.n() != n {
        return Err(config_error(format!("p0 has {} entries for {n} states", p0.n())));
    }
    let mut warnings = Vec::new();
    let t_limit = 1.0 - DEFAULT_DELTA;
    let mut t1 = s.t1;
    if t1 > t_limit {
        let msg = format!("t1 = {t1} clamped to {t_limit} where the mixture rates stay finite");
        warn(&msg);
        warnings.push(msg);
        t1 = t_limit;
    }
    if !(s.t0 >= 0.0 && s.t0 <= t1) {
        return Err(config_error(format!("need 0 ≤ t0 ≤ t1, got t0 = {}, t1 = {t1}", s.t0)));
    }

    type RateFn = Box<dyn Fn(f64) -> gmlab_core::Result<RateMatrix> + Sync>;
    let (q_of_t, exact): (RateFn, DiscreteDistribution) = match &s.target {
        DiscreteTarget::State(z) => {
            let path = MixturePath::new(s.kappa, p0.clone(), *z)?;
            let exact = path.marginal(t1);
            (Box::new(move |t| conditional_rates(&path, t)), exact)
        }
        DiscreteTarget::Distribution(target) => {
            let path = MixedTargetPath::new(s.kappa, p0.clone(), DiscreteDistribution::new(target.clone())?)?;
            let exact = path.marginal(t1);
            (Box::new(move |t| path.marginal_rates(t)), exact)
        }
    };
    if exact.n() != n {
        return Err(config_error("target does not match the number of states"));
    }
    let sim = CtmcSimulator::new(&*q_of_t, s.t0, t1, s.scheme)?;
    let runs = sim.runs(&p0, s.runs, ctx.seed)?;
    let mut counts = vec![0u64; n];
    let mut moved = 0usize;
    for &(a, b) in &runs {
        counts[b] += 1;
        moved += usize::from(a != b);
    }
    let empirical = DiscreteDistribution::from_counts(&counts)?;
    let master = master_equation_solve(&*q_of_t, &p0, s.t0, t1, s.master_steps)?;

    let mut csv = String::from("state,count,empirical,master,exact\n");
    for x in 0..n {
        writeln!(
            csv,
            "{x},{},{},{},{}",
            counts[x],
            empirical.probs()[x],
            master.distribution.probs()[x],
            exact.probs()[x]
        )
        .expect("string write");
    }
    ctx.out.write_text("histogram.csv", &csv)?;
    let tv = empirical.total_variation(&master.distribution);
    let report = DiscreteReport {
        states: n,
        t0: s.t0,
        t1,
        runs: s.runs,
        thinning_bound: sim.bound(),
        empirical: empirical.probs().to_vec(),
        master: master.distribution.probs().to_vec(),
        exact: exact.probs().to_vec(),
        tv_empirical_vs_master: tv,
        tv_master_vs_exact: master.distribution.total_variation(&exact),
        renormalization_drift: master.renormalization_drift,
        moved_fraction: moved as f64 / s.runs as f64,
        tolerance: s.tolerance,
        passed: tv < s.tolerance,
        warnings,
    };
    ctx.out.write_json("discrete_report.json", &report)?;
    if !report.passed {
        return Err(Error::Violated(format!(
            "simulation vs master equation TV {tv} is not below {}",
            s.tolerance
        )));
    }
    Ok(())
}

pub fn cmd_sensitivity(ctx: Context<'_>) -> Result<()> {
    let cfg = ctx.config.sensitivity.clone().unwrap_or_default();
    let path = ctx.config.oracle_path()?;
    let report = run_sensitivity(&path, &cfg, ctx.seed)?;
    ctx.out.write_json("sensitivity.json", &report)?;
    let mut csv = String::from("sampler,magnitude,energy_distance,noise_floor\n");
    for s in &report.samplers {
        for d in &s.deviations {
            writeln!(csv, "{},{},{},{}", s.label, d.magnitude, d.energy_distance, s.noise_floor).expect("string write");
        }
    }
    ctx.out.write_text("sensitivity.csv", &csv)?;
    Ok(())
}
