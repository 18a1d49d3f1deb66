//! Acceptance suite: one PASS/FAIL line per criterion at the fixed
//! tolerances. Runs without the libtest harness so the lines are always
//! printed; exits nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use gmlab_core::analytic::{AtomSet, GaussianMixture, GaussianPath, MixtureComponent};
use gmlab_core::discrete::{
    conditional_rates, discrete_kfe_residual, master_equation_solve, CtmcSimulator, DiscreteDistribution, Kappa,
    MixturePath, Scheme,
};
use gmlab_core::generator::{superpose, test_battery};
use gmlab_core::kfe::{
    convergence_study, default_time_grid, fokker_planck_evolve, kfe_signed_residual, matched_diffusion, matched_flow,
    matched_flow_with_score, observed_order, scaled_flow, stable_step_count, superposition_marginal_check, verify_kfe,
    DensityGrid,
};
use gmlab_core::rng::{standard_normal_vec, stream_rng};
use gmlab_core::sampler::{
    ddim_step, flow_euler_step, heads_from_x_hat, pf_ode_step, reverse_sde_step, OracleField, Sampler, SamplerConfig,
    StepKind,
};
use gmlab_core::schedule::{diffusion_from_interpolation, round_trip_check, StochasticityLevel};
use gmlab_core::sensitivity::{run_sensitivity, SensitivityConfig};
use gmlab_core::train::{
    draw_batch, finite_difference_check, gm_vs_cgm_gradient_check, moving_average, train, AdamConfig,
    BregmanDivergence, Mlp, TargetHead, TrainConfig, TrainingData,
};
use gmlab_core::{ContinuousGenerator, DataSource, DatasetSpec, NoiseSchedule, ScheduleSpec};
use rand::Rng;

type Check = std::result::Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn mixture(components: &[(f64, &[f64], f64)]) -> GaussianMixture {
    GaussianMixture::from_components(
        &components
            .iter()
            .map(|(w, m, v)| MixtureComponent {
                weight: *w,
                mean: m.to_vec(),
                variance: *v,
            })
            .collect::<Vec<_>>(),
    )
    .expect("valid mixture")
}

// ---------------------------------------------------------------------------
// 1. Schedule round trip
// ---------------------------------------------------------------------------

fn schedule_round_trip() -> Check {
    let grid: Vec<f64> = (0..=99).map(|k| k as f64 / 100.0).collect();
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for ns in [
        NoiseSchedule::flow_matching(),
        NoiseSchedule::variance_preserving(2.0),
        NoiseSchedule::variance_exploding(3.0),
    ] {
        let err = round_trip_check(&ns, &grid).map_err(e)?;
        parts.push(format!("{} {err:.1e}", ns.name()));
        worst = worst.max(err);
    }
    verdict(worst < 1e-6, format!("max abs error {worst:.2e} < 1e-6 ({})", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 2. DDIM and flow-Euler identity
// ---------------------------------------------------------------------------

fn ddim_flow_euler_identity() -> Check {
    let ns = NoiseSchedule::flow_matching();
    let mut rng = stream_rng(2024, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t: f64 = rng.random_range(0.001..ns.t_max());
        let r: f64 = rng.random_range(0.0..t);
        let z = standard_normal_vec(&mut rng, 2);
        let x_hat = standard_normal_vec(&mut rng, 2);
        let a = ddim_step(&z, &x_hat, t, r, &ns).map_err(e)?;
        let v = heads_from_x_hat(&ns, &z, x_hat, t).map_err(e)?.velocity;
        let b = flow_euler_step(&z, &v, t, r);
        for (p, q) in a.iter().zip(&b) {
            worst = worst.max((p - q).abs());
        }
    }
    verdict(worst < 1e-12, format!("max deviation {worst:.2e} < 1e-12 over 1000 draws"))
}

// ---------------------------------------------------------------------------
// 3. Churn-zero collapse
// ---------------------------------------------------------------------------

fn churn_zero_collapse() -> Check {
    let mut rng = stream_rng(7, 0);
    let mut bitwise = 0;
    let mut total = 0;
    let mut worst: f64 = 0.0;
    for ns in [NoiseSchedule::flow_matching(), NoiseSchedule::variance_preserving(2.0)] {
        let ds = diffusion_from_interpolation(&ns, &StochasticityLevel::constant(0.0)).map_err(e)?;
        for _ in 0..500 {
            let t: f64 = rng.random_range(0.01..0.99);
            let r: f64 = rng.random_range(0.0..t);
            let z = standard_normal_vec(&mut rng, 3);
            let s = standard_normal_vec(&mut rng, 3);
            let a = reverse_sde_step(&z, &ds, &s, t, r, &mut rng).map_err(e)?;
            let f = ds.f(t);
            let drift: Vec<f64> = z.iter().map(|v| f * v).collect();
            let b = pf_ode_step(&z, &drift, &s, t, r, ds.g(t)).map_err(e)?;
            total += 1;
            if a == b {
                bitwise += 1;
            }
            for (p, q) in a.iter().zip(&b) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    verdict(
        bitwise == total || worst < 1e-15,
        format!("{bitwise}/{total} steps bitwise identical, max deviation {worst:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Oracle sampling correctness
// ---------------------------------------------------------------------------

fn oracle_sampling() -> Check {
    let n = 10_000;
    // 3σ Monte Carlo bands: 3/√n for the mean, 3√(2/n) for the variance
    let mean_band = 3.0 / (n as f64).sqrt();
    let var_band = 3.0 * (2.0 / n as f64).sqrt();
    let ns = NoiseSchedule::flow_matching();
    let oracle = OracleField::new(GaussianPath::new(mixture(&[(1.0, &[0.0], 1.0)]), ns.clone()));
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in StepKind::ALL {
        let x = Sampler::new(ns.clone(), SamplerConfig::new(kind, 200, 11))
            .and_then(|s| s.terminal_samples(&oracle, n))
            .map_err(e)?;
        let c = x.column(0);
        let mean = c.mean().unwrap_or(f64::NAN);
        let var = c.var(1.0);
        ok &= mean.abs() < 0.05 && (var - 1.0).abs() < 0.05;
        parts.push(format!("{kind} {mean:+.3}/{var:.3}"));
    }
    verdict(
        ok,
        format!(
            "mean/variance within ±0.05 (3σ bands {mean_band:.3}/{var_band:.3}): {}",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. KFE verification
// ---------------------------------------------------------------------------

fn kfe_paths() -> Vec<GaussianPath> {
    vec![
        GaussianPath::new(
            mixture(&[(0.3, &[1.0, -0.5], 0.2), (0.7, &[-1.0, 0.5], 0.4)]),
            NoiseSchedule::flow_matching(),
        ),
        GaussianPath::new(
            mixture(&[(0.5, &[1.5], 0.3), (0.5, &[-1.0], 0.6)]),
            NoiseSchedule::variance_preserving(2.0),
        ),
        GaussianPath::new(
            mixture(&[(0.4, &[0.8], 0.5), (0.6, &[-0.8], 0.2)]),
            NoiseSchedule::variance_exploding(3.0),
        ),
    ]
}

fn kfe_verification() -> Check {
    let grid = default_time_grid();
    let mut matched: f64 = 0.0;
    let mut corrupted = f64::INFINITY;
    let mut parts = Vec::new();
    for path in kfe_paths() {
        let battery = test_battery(path.dim());
        let gens: Vec<(&str, ContinuousGenerator)> = vec![
            ("flow", matched_flow(&path)),
            ("flow+score", matched_flow_with_score(&path, 1.0)),
            ("diffusion", matched_diffusion(&path).map_err(e)?),
        ];
        for (name, g) in &gens {
            let r = verify_kfe(&path, g, &battery, &grid).map_err(e)?.max_residual;
            matched = matched.max(r);
            parts.push(format!("{}/{name} {r:.1e}", path.schedule.name()));
        }
        let bad = verify_kfe(&path, &scaled_flow(&path, 2.0), &battery, &grid).map_err(e)?.max_residual;
        corrupted = corrupted.min(bad);
    }
    verdict(
        matched < 1e-3 && corrupted > 1e-2,
        format!(
            "matched max residual {matched:.2e} < 1e-3, corrupted 2u min residual {corrupted:.2e} > 1e-2 ({})",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Superposition
// ---------------------------------------------------------------------------

fn superposition() -> Check {
    let path = &kfe_paths()[0];
    let grid = default_time_grid();
    let battery = test_battery(path.dim());
    let a = matched_flow(path);
    let b = matched_flow_with_score(path, 1.0);
    let report = superposition_marginal_check(&a, &b, 0.5, 0.5, path, &battery, &grid, 1e-3).map_err(e)?;
    let pre = report.precondition.clone().expect("precondition is recorded");

    // linearity is checked on generators with large residuals
    let path1 = &kfe_paths()[1];
    let battery1 = test_battery(1);
    let ga = scaled_flow(path1, 2.0);
    let gb = scaled_flow(path1, -0.5);
    let mixed = superpose(vec![(0.5, ga.clone()), (0.5, gb.clone())]).map_err(e)?;
    let mut worst: f64 = 0.0;
    for f in &battery1 {
        for &t in &grid {
            let ra = kfe_signed_residual(path1, &ga, f, t).map_err(e)?;
            let rb = kfe_signed_residual(path1, &gb, f, t).map_err(e)?;
            let rm = kfe_signed_residual(path1, &mixed, f, t).map_err(e)?;
            let scale = (0.5 * ra).abs() + (0.5 * rb).abs();
            if scale > 0.0 {
                worst = worst.max((rm - 0.5 * ra - 0.5 * rb).abs() / scale);
            }
        }
    }
    verdict(
        report.max_residual < 1e-3 && pre.satisfied && worst < 1e-10,
        format!(
            "0.5/0.5 mix residual {:.2e} < 1e-3 (parts {:.1e}, {:.1e}); linearity relative error {worst:.1e} < 1e-10",
            report.max_residual, pre.part_max_residuals[0], pre.part_max_residuals[1]
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Discrete KFE exactness
// ---------------------------------------------------------------------------

fn discrete_kfe() -> Check {
    let p0 = DiscreteDistribution::new(vec![0.4, 0.3, 0.2, 0.1]).map_err(e)?;
    let path = MixturePath::new(Kappa::Linear, p0.clone(), 2).map_err(e)?;
    let mut worst: f64 = 0.0;
    for k in 0..=99 {
        let t = k as f64 / 100.0;
        worst = worst.max(discrete_kfe_residual(&path, t).map_err(e)?);
    }
    let q = |t: f64| conditional_rates(&path, t);
    let t1 = 0.99;
    let sim = CtmcSimulator::new(&q, 0.0, t1, Scheme::ExactClock).map_err(e)?;
    let counts = sim.histogram(&p0, 10_000, 99).map_err(e)?;
    let empirical = DiscreteDistribution::from_counts(&counts).map_err(e)?;
    let master = master_equation_solve(&q, &p0, 0.0, t1, 20_000).map_err(e)?;
    let tv = empirical.total_variation(&master.distribution);
    verdict(
        worst < 1e-8 && tv < 0.05,
        format!("KFE residual {worst:.1e} < 1e-8 on t ∈ [0, 0.99]; CTMC vs master TV {tv:.4} < 0.05 at t = 0.99"),
    )
}

// ---------------------------------------------------------------------------
// 8. Bregman and GM/CGM gradient identity
// ---------------------------------------------------------------------------

fn bregman_identity() -> Check {
    let ns = NoiseSchedule::flow_matching();
    let mut gm_worst: f64 = 0.0;
    let mut parts = Vec::new();
    let atom_sets = [
        AtomSet::uniform(vec![vec![1.0], vec![-0.5]]).map_err(e)?,
        AtomSet::new(
            vec![0.1, 0.2, 0.3, 0.15, 0.05, 0.1, 0.05, 0.05],
            (0..8).map(|k| vec![k as f64 * 0.4 - 1.4, (k % 3) as f64 - 1.0]).collect(),
        )
        .map_err(e)?,
    ];
    for atoms in &atom_sets {
        let d = atoms.dim();
        let model = Mlp::for_dimension(d, &[16, 16], 5).map_err(e)?;
        let x_grid: Vec<Vec<f64>> = (0..25)
            .map(|i| (0..d).map(|k| -2.0 + 4.0 * ((i * (k + 3)) % 25) as f64 / 24.0).collect())
            .collect();
        for div in [BregmanDivergence::SquaredEuclidean, BregmanDivergence::ExpSum] {
            for head in [TargetHead::Velocity, TargetHead::XPrediction] {
                let dev = gm_vs_cgm_gradient_check(&model, div, atoms, &ns, head, 0.4, &x_grid).map_err(e)?;
                gm_worst = gm_worst.max(dev);
            }
        }
        parts.push(format!("{} atoms in d={d}", atoms.atoms().len()));
    }

    let data = TrainingData::Mixture(mixture(&[(0.5, &[1.0, 0.0], 0.3), (0.5, &[-1.0, 0.5], 0.3)]));
    let model = Mlp::for_dimension(2, &[64, 64, 64], 9).map_err(e)?;
    let mut rng = stream_rng(9, 1);
    let mut indices: Vec<usize> = (0..18).map(|_| rng.random_range(0..model.n_params())).collect();
    indices.extend([0, model.n_params() - 1]);
    let mut fd_worst: f64 = 0.0;
    for div in [BregmanDivergence::SquaredEuclidean, BregmanDivergence::ExpSum] {
        let batch = draw_batch(&data, &ns, TargetHead::Velocity, 64, &mut rng);
        fd_worst = fd_worst.max(finite_difference_check(&model, div, &batch, &indices, 1e-5).map_err(e)?);
    }
    verdict(
        gm_worst < 1e-6 && fd_worst < 1e-4,
        format!(
            "GM vs CGM gradient deviation {gm_worst:.1e} < 1e-6 ({}; quadratic and exp-based); \
             autodiff vs finite differences {fd_worst:.1e} < 1e-4 over 20 parameters",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. CGM training
// ---------------------------------------------------------------------------

fn training_config() -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        iterations: 20_000,
        learning_rate: 1e-3,
        adam: AdamConfig::default(),
        seed: 1,
        dataset: DatasetSpec {
            source: DataSource::GaussianMixture {
                components: vec![
                    MixtureComponent {
                        weight: 0.5,
                        mean: vec![2.0, 0.0],
                        variance: 0.1,
                    },
                    MixtureComponent {
                        weight: 0.5,
                        mean: vec![-2.0, 0.0],
                        variance: 0.1,
                    },
                ],
            },
            n: 100_000,
            seed: 1,
        },
        schedule: ScheduleSpec::FlowMatching {},
        head: TargetHead::Velocity,
        divergence: BregmanDivergence::SquaredEuclidean,
        hidden: vec![64, 64, 64],
        eval_batch: 4096,
        eval_points: 100,
    }
}

/// Loss-curve moving-average increases, reported next to criterion 9.
static MA_NOTE: std::sync::Mutex<Option<(bool, String)>> = std::sync::Mutex::new(None);

fn cgm_training() -> Check {
    let cfg = training_config();
    let (field, report) = train(&cfg).map_err(e)?;
    let err = report.relative_field_error.ok_or("no field error in report")?;
    let sampler = Sampler::new(NoiseSchedule::flow_matching(), SamplerConfig::new(StepKind::FlowEuler, 200, 3)).map_err(e)?;
    let x = sampler.terminal_samples(&field, 10_000).map_err(e)?;
    let right = x.column(0).iter().filter(|v| **v > 0.0).count() as f64 / 1e4;
    let left = 1.0 - right;
    let (again, _) = train(&cfg).map_err(e)?;
    let identical = again.model.params() == field.model.params();

    let losses: Vec<f64> = report.loss_curve.iter().map(|p| p.loss).collect();
    let ma = moving_average(&losses, 10);
    let rises: Vec<f64> = ma.windows(2).filter(|w| w[1] > w[0]).map(|w| w[1] - w[0]).collect();
    let largest = rises.iter().fold(0.0_f64, |m, v| m.max(*v));
    *MA_NOTE.lock().expect("note lock") = Some((
        rises.is_empty(),
        format!(
            "10-point moving average of the loss rises in {}/{} windows (largest rise {largest:.1e}, final loss {:.4})",
            rises.len(),
            ma.len().saturating_sub(1),
            losses.last().copied().unwrap_or(f64::NAN)
        ),
    ));
    let in_band = |f: f64| (0.45..=0.55).contains(&f);
    verdict(
        err < 0.15 && in_band(left) && in_band(right) && identical,
        format!(
            "field error {err:.4} < 0.15; mode fractions {left:.4}/{right:.4} in [0.45, 0.55]; \
             rerun bit-identical: {identical}; {:.0} s per run",
            report.wall_clock_seconds
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Fokker-Planck solver
// ---------------------------------------------------------------------------

fn fokker_planck() -> Check {
    let law = mixture(&[(1.0, &[0.0], 0.5)]).marginal_law(&NoiseSchedule::identity(), 0.0);
    let p0 = DensityGrid::from_law(&law, -8.0, 8.0, 801, 0.0).map_err(e)?;
    let sigma2: f64 = 2.0;
    let heat = ContinuousGenerator::diffusion(std::sync::Arc::new(move |_, _| sigma2.sqrt()));
    let steps = stable_step_count(&p0, &heat, 0.0, 0.1).map_err(e)?;
    let out = fokker_planck_evolve(&p0, &heat, 0.0, 0.1, steps).map_err(e)?;
    let rate = (out.density.variance() - p0.variance()) / 0.1;
    let rate_err = (rate - sigma2).abs() / sigma2;
    let mut mass_rate = out.mass_drift.abs() / 0.1;

    let path = GaussianPath::new(mixture(&[(1.0, &[1.0], 0.25)]), NoiseSchedule::flow_matching());
    let gen = matched_flow(&path);
    let errors = convergence_study(&path, &gen, 0.2, 0.6, &[201, 401, 801]).map_err(e)?;
    let order = observed_order(&errors);
    let p = DensityGrid::from_law(&path.law(0.2), -8.0, 8.0, 801, 0.2).map_err(e)?;
    let n = stable_step_count(&p, &gen, 0.2, 0.6).map_err(e)?;
    let flow = fokker_planck_evolve(&p, &gen, 0.2, 0.6, n).map_err(e)?;
    mass_rate = mass_rate.max(flow.mass_drift.abs() / 0.4);
    verdict(
        rate_err < 0.02 && mass_rate < 1e-6 && order >= 0.8,
        format!(
            "variance rate {rate:.4} vs σ² = {sigma2} ({:.2}% off, < 2%); mass drift {mass_rate:.1e}/unit time < 1e-6; \
             spatial order {order:.3} ≥ 0.8 (L1 {:.2e} → {:.2e})",
            100.0 * rate_err,
            errors[0].1,
            errors[errors.len() - 1].1
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Sensitivity experiment
// ---------------------------------------------------------------------------

fn sensitivity() -> Check {
    let path = GaussianPath::new(
        mixture(&[(0.5, &[1.5], 0.25), (0.5, &[-1.5], 0.25)]),
        NoiseSchedule::flow_matching(),
    );
    let report = run_sensitivity(&path, &SensitivityConfig::default(), 5).map_err(e)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for s in &report.samplers {
        let zero = s
            .deviations
            .iter()
            .find(|d| d.magnitude == 0.0)
            .map(|d| d.energy_distance)
            .ok_or("no m = 0 entry")?;
        let last = s.deviations.last().map(|d| d.energy_distance).unwrap_or(f64::NAN);
        ok &= zero < s.noise_floor && s.spearman > 0.9 && last.is_finite();
        parts.push(format!(
            "{}: m=0 {zero:.1e} < floor {:.1e}, ρ = {:.2}, m=0.3 {last:.3}",
            s.label, s.noise_floor, s.spearman
        ));
    }
    let mut order: Vec<(&str, f64)> = report
        .samplers
        .iter()
        .map(|s| (s.label.as_str(), s.deviations.last().map(|d| d.energy_distance).unwrap_or(f64::NAN)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    let ordering: Vec<&str> = order.iter().map(|o| o.0).collect();
    parts.push(format!("least to most sensitive: {}", ordering.join(" < ")));
    verdict(ok, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 12. CLI reproducibility
// ---------------------------------------------------------------------------

const CLI_CONFIGS: [(&str, &str); 7] = [
    ("convert", r#"{"schedule": {"kind": "variance_preserving", "beta": 2.0}}"#),
    (
        "sample",
        r#"{"schedule": {"kind": "variance_preserving"},
            "mixture": [{"weight": 0.5, "mean": [1.0, 0.0], "variance": 0.2}, {"weight": 0.5, "mean": [-1.0, 0.0], "variance": 0.2}],
            "sampler": {"step_kind": "reverse_sde", "steps": 100, "samples": 2000, "trajectories": 4}}"#,
    ),
    (
        "train",
        r#"{"dataset": {"source": {"kind": "two_moons", "noise": 0.05}, "n": 2000, "seed": 4},
            "train": {"batch_size": 96, "iterations": 150, "hidden": [16, 16], "eval_batch": 256, "eval_points": 10}}"#,
    ),
    (
        "verify-kfe",
        r#"{"mixture": [{"weight": 1.0, "mean": [0.5], "variance": 0.5}], "kfe": {"generator": {"kind": "flow_score"}}}"#,
    ),
    (
        "sensitivity",
        r#"{"schedule": {"kind": "variance_preserving"}, "mixture": [{"weight": 1.0, "mean": [0.0], "variance": 1.0}],
            "sensitivity": {"samples": 300, "steps": 100}}"#,
    ),
    (
        "superpose",
        r#"{"mixture": [{"weight": 0.5, "mean": [1.0], "variance": 0.5}, {"weight": 0.5, "mean": [-1.0], "variance": 0.5}],
            "superpose": {"parts": [{"weight": 0.5, "generator": {"kind": "flow"}},
                                    {"weight": 0.5, "generator": {"kind": "state_dependent", "scale": 1.0}}],
                          "times": [0.3, 0.7], "samples": 1000, "steps": 100, "moment_tolerance": 0.5}}"#,
    ),
    ("discrete", r#"{"discrete": {"states": 4, "target": 3, "runs": 3000}}"#),
];

fn run_cli(sub: &str, config: &Path, out: &Path, threads: &str) -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
    let res = Command::new(env!("CARGO_BIN_EXE_gmlab"))
        .args([sub, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--seed", "17", "--threads", threads])
        .output()
        .map_err(e)?;
    if !res.status.success() {
        return Err(format!("{sub} exited with {:?}: {}", res.status.code(), String::from_utf8_lossy(&res.stderr)));
    }
    let info: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run.json")).map_err(e)?).map_err(e)?;
    let mut files = Vec::new();
    for name in info["outputs"].as_array().ok_or("run.json lists no outputs")? {
        let name = name.as_str().ok_or("bad output name")?.to_string();
        let bytes = std::fs::read(out.join(&name)).map_err(e)?;
        files.push((name, bytes));
    }
    Ok(files)
}

fn cli_reproducibility() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for (sub, json) in CLI_CONFIGS {
        let config: PathBuf = dir.path().join(format!("{sub}.json"));
        std::fs::write(&config, json).map_err(e)?;
        let reference = run_cli(sub, &config, &dir.path().join(format!("{sub}-1a")), "1")?;
        for (tag, threads) in [("1b", "1"), ("4", "4")] {
            let other = run_cli(sub, &config, &dir.path().join(format!("{sub}-{tag}")), threads)?;
            if other != reference {
                mismatches.push(format!("{sub} at --threads {threads}"));
            }
        }
        compared += reference.len();
    }
    verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("7 subcommands, {compared} primary files byte-identical across two --threads 1 runs and a --threads 4 run")
        } else {
            format!("differences: {}", mismatches.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("schedule round trip", schedule_round_trip),
        ("DDIM equals flow Euler", ddim_flow_euler_identity),
        ("churn-zero collapse", churn_zero_collapse),
        ("oracle sampling correctness", oracle_sampling),
        ("KFE verification", kfe_verification),
        ("superposition", superposition),
        ("discrete KFE exactness", discrete_kfe),
        ("Bregman / GM-CGM identity", bregman_identity),
        ("CGM training", cgm_training),
        ("Fokker-Planck solver", fokker_planck),
        ("sensitivity experiment", sensitivity),
        ("CLI reproducibility", cli_reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("{:02}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{status}] {id} {name}: {detail} [{:.1} s]", start.elapsed().as_secs_f64());
        if let Some((ok, note)) = MA_NOTE.lock().expect("note lock").take() {
            let status = if ok { "PASS" } else { "FAIL" };
            println!("[{status}] 09+ loss moving average non-increasing (invariant, not one of the 12): {note}");
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
