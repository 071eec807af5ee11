//! The five experiment pipelines. Each one runs its computation, writes
//! plot-ready CSV tables plus a `report.json` into the output directory,
//! and returns the evaluated tolerance gates.

use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use serde_json::json;

use mckv::coeffs::CoefficientField;
use mckv::fpe::{fpe_residual, standard_battery, summarize_scenarios};
use mckv::grid::SpatialGrid;
use mckv::measure::{wasserstein1_1d, EmpiricalMeasure, MeasureView};
use mckv::mfc::{markovianize_and_compare, CompareConfig, ControlGenerator, ControlProblem};
use mckv::mimic::{
    run_mimicking_experiment, MimickingConfig, ProjectedCoefficients, RandomizedSystem,
};
use mckv::mollify::{
    contraction_pairings, cutoff_projection, smooth_coefficients, CutoffMap, MollifierKernel,
};
use mckv::particle::{picard_solve, simulate_mckv, SimulationConfig};
use mckv::rng::StreamRng;
use mckv::scenario::Scenario;
use mckv::spde::{solve_spde, weak_residual, GridInitial, SpdeConfig};
use mckv::testfn::TestBasis;

use crate::config::{ExperimentConfig, ExperimentKind, InitialSection};
use crate::manifest::Gate;
use crate::table::write_table;

/// Labels for the six functionals returned by the measure-level battery,
/// in order: two linear pairings, a squared pairing, a product of pairings,
/// a cubic pairing, and a transcendental mix.
const BATTERY_LABELS: [&str; 6] = [
    "pairing_1",
    "pairing_3",
    "square",
    "product",
    "cubic",
    "exponential",
];

pub struct RunOutput {
    pub gates: Vec<Gate>,
    pub artifacts: Vec<String>,
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunOutput> {
    match cfg.kind {
        ExperimentKind::HierarchyCheck => run_hierarchy(cfg, out),
        ExperimentKind::Mimicking => run_mimicking(cfg, out),
        ExperimentKind::MfcCompare => run_mfc_compare(cfg, out),
        ExperimentKind::MollifySuite => run_mollify_suite(cfg, out),
        ExperimentKind::Picard => run_picard(cfg, out),
    }
}

fn write_report(out: &Path, report: &serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(out.join("report.json"), text).context("writing report.json")?;
    Ok(())
}

fn grid_initial(initial: &InitialSection) -> GridInitial {
    match *initial {
        InitialSection::Gaussian { mean, std_dev } => GridInitial::Gaussian { mean, std_dev },
        InitialSection::Point { center } => GridInitial::PointMass { center },
    }
}

/// Particle ensemble vs grid density on matched scenarios, weak-form
/// residual of each grid flow, and the measure-level residual battery.
fn run_hierarchy(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunOutput> {
    let sim = &cfg.simulation;
    let space_cfg = cfg.space.as_ref().expect("validated");
    let field = cfg.system.as_ref().expect("validated").build();
    let grid = cfg.time_grid();
    let law = cfg.initial.as_ref().expect("validated").law();
    let space = SpatialGrid::new(space_cfg.x_lo, space_cfg.x_hi, space_cfg.n_cells)?;
    let basis = TestBasis::dyadic_lattice(
        space_cfg.basis_lo,
        space_cfg.basis_hi,
        space_cfg.basis_count,
    )?;
    let initial = grid_initial(cfg.initial.as_ref().expect("validated"));
    let config = SimulationConfig::new(sim.n_particles, grid, law);

    let mut artifacts = Vec::new();
    let mut w1_rows = Vec::new();
    let mut resid_rows = Vec::new();
    let mut worst_w1 = f64::NEG_INFINITY;
    let mut worst_resid = f64::NEG_INFINITY;
    let last = grid.n_steps();
    for s in 0..sim.n_scenarios as u64 {
        let index = sim.first_scenario + s;
        let scenario = Scenario::generate(sim.master_seed, index, grid, 1)?;
        let name = format!("scenario_{index:04}.csv");
        scenario.save(&out.join(&name))?;
        artifacts.push(name);

        let ens = simulate_mckv(&field, &scenario, sim.master_seed, &config)?;
        let flow = solve_spde(
            &field,
            &scenario,
            &SpdeConfig {
                space,
                initial: initial.clone(),
            },
        )?;
        let w1 = wasserstein1_1d(&ens.measure_at(last), &flow.measure_at(last), 2048)?;
        worst_w1 = worst_w1.max(w1);
        w1_rows.push(vec![index as f64, w1]);

        let rr = weak_residual(&flow, &scenario, &field, &basis)?;
        worst_resid = worst_resid.max(rr.max_abs);
        for (j, r) in rr.per_function.iter().enumerate() {
            resid_rows.push(vec![index as f64, j as f64, *r]);
        }

        if s == 0 {
            let rows: Vec<Vec<f64>> = (0..space.n_cells())
                .map(|j| vec![space.cell_center(j), flow.density_at(last)[j]])
                .collect();
            write_table(&out.join("density_terminal.csv"), &["x", "density"], &rows)?;
            artifacts.push("density_terminal.csv".into());
        }
    }
    write_table(&out.join("w1.csv"), &["scenario", "w1"], &w1_rows)?;
    artifacts.push("w1.csv".into());
    write_table(
        &out.join("weak_residual.csv"),
        &["scenario", "test_function", "residual"],
        &resid_rows,
    )?;
    artifacts.push("weak_residual.csv".into());

    // Measure-level residual battery over fresh matched scenarios.
    let (battery_basis, funcs) = standard_battery(space_cfg.basis_lo, space_cfg.basis_hi)?;
    let summary = summarize_scenarios(
        &field,
        sim.master_seed,
        sim.first_scenario,
        sim.n_scenarios,
        &config,
        &battery_basis,
        1.0,
    )?;
    let mut battery_rows = Vec::new();
    let mut battery_json = Vec::new();
    let mut gates = vec![
        Gate::le("terminal_w1", worst_w1, cfg.tolerances.w1_max),
        Gate::le("weak_residual", worst_resid, cfg.tolerances.weak_residual_max),
    ];
    for (i, func) in funcs.iter().enumerate() {
        let stats = fpe_residual(&summary, func)?;
        battery_rows.push(vec![
            i as f64,
            stats.mean,
            stats.standard_error,
            stats.z_score,
        ]);
        battery_json.push(json!({
            "label": BATTERY_LABELS[i],
            "mean": stats.mean,
            "standard_error": stats.standard_error,
            "z": stats.z_score,
        }));
        gates.push(Gate::le(
            format!("measure_residual_{}", BATTERY_LABELS[i]),
            stats.mean.abs(),
            cfg.tolerances.fpe_z_max * stats.standard_error,
        ));
    }
    write_table(
        &out.join("measure_battery.csv"),
        &["functional", "mean", "standard_error", "z"],
        &battery_rows,
    )?;
    artifacts.push("measure_battery.csv".into());

    let report = json!({
        "per_scenario_w1": w1_rows.iter().map(|r| r[1]).collect::<Vec<_>>(),
        "worst_w1": worst_w1,
        "worst_weak_residual": worst_resid,
        "measure_battery": battery_json,
    });
    write_report(out, &report)?;
    artifacts.push("report.json".into());
    Ok(RunOutput { gates, artifacts })
}

/// Project a randomized system onto Markovian coefficients and compare
/// marginals between the original and re-simulated runs.
fn run_mimicking(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunOutput> {
    let sim = &cfg.simulation;
    let mim = &cfg.mimicking;
    let system = RandomizedSystem {
        base: cfg.system.as_ref().expect("validated").build(),
        drift_noise: mim.drift_noise,
        own_noise_volatility: mim.own_noise_volatility,
        initial: cfg.initial.as_ref().expect("validated").law(),
    };
    let grid = cfg.time_grid();
    let mut config = MimickingConfig::new(sim.n_particles, sim.n_scenarios, grid);
    config.master_seed = sim.master_seed;
    config.first_scenario = sim.first_scenario;
    config.max_samples_per_slice = mim.max_samples_per_slice;
    config.regression.bandwidth_scale = mim.bandwidth_scale;
    let mut nodes: Vec<usize> = mim
        .compare_fractions
        .iter()
        .map(|f| ((f * grid.n_steps() as f64).round() as usize).clamp(1, grid.n_steps()))
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    config.compare_nodes = nodes;

    let (report, coeffs) = run_mimicking_experiment(&system, &config)?;

    let mut artifacts = Vec::new();
    let gap_rows: Vec<Vec<f64>> = report
        .functional_gaps
        .iter()
        .enumerate()
        .map(|(i, g)| {
            vec![
                i as f64,
                g.time,
                g.original,
                g.mimicked,
                g.combined_se,
                g.z,
            ]
        })
        .collect();
    write_table(
        &out.join("functional_gaps.csv"),
        &["row", "t", "original", "mimicked", "combined_se", "z"],
        &gap_rows,
    )?;
    artifacts.push("functional_gaps.csv".into());

    let marginal_rows: Vec<Vec<f64>> = report
        .compare_times
        .iter()
        .enumerate()
        .map(|(j, t)| vec![*t, report.pooled_w1[j], report.per_scenario_w1[j]])
        .collect();
    write_table(
        &out.join("marginals_w1.csv"),
        &["t", "pooled_w1", "per_scenario_w1"],
        &marginal_rows,
    )?;
    artifacts.push("marginals_w1.csv".into());

    // Fitted coefficient surface, sampled for plotting; skipped when a
    // slice served only by fallback makes the table undefined.
    if let Some(rows) = sample_surface(&coeffs, 41) {
        let mut header = vec!["t".to_string(), "x".to_string()];
        for f in 0..coeffs.n_features {
            header.push(format!("feat_{}", f + 1));
        }
        header.push("bhat_1".into());
        header.push("ahat_11".into());
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_table(&out.join("projected_surface.csv"), &header_refs, &rows)?;
        artifacts.push("projected_surface.csv".into());
    }

    let mut gates = Vec::new();
    for g in &report.functional_gaps {
        gates.push(Gate::le(
            format!("battery_{}_t{}", g.name, g.time),
            (g.original - g.mimicked).abs(),
            cfg.tolerances.functional_z_max * g.combined_se,
        ));
    }
    for (j, t) in report.compare_times.iter().enumerate() {
        gates.push(Gate::le(
            format!("pooled_w1_t{t}"),
            report.pooled_w1[j],
            cfg.tolerances.pooled_w1_max,
        ));
    }

    write_report(out, &serde_json::to_value(&report)?)?;
    artifacts.push("report.json".into());
    Ok(RunOutput { gates, artifacts })
}

/// Sample the fitted drift/volatility surface at `n_x` evenly spaced states
/// per time node, features pinned at each node's training means. Rows are
/// `t, x, feat.., drift, sigma_sq`; `None` when some slice was never fitted.
fn sample_surface(coeffs: &ProjectedCoefficients, n_x: usize) -> Option<Vec<Vec<f64>>> {
    let surface = coeffs.surface();
    let mut rows = Vec::with_capacity((coeffs.grid.n_steps() + 1) * n_x);
    let mut pair = [0.0; 2];
    for k in 0..=coeffs.grid.n_steps() {
        let (lo, hi) = surface.slice_range(k)?;
        let feats = surface.slice_feature_means(k)?;
        let t = coeffs.grid.node(k);
        for j in 0..n_x {
            let x = if n_x == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * j as f64 / (n_x - 1) as f64
            };
            surface
                .evaluate_batch(k, std::slice::from_ref(&x), &feats, &mut pair)
                .ok()?;
            let mut row = Vec::with_capacity(4 + feats.len());
            row.push(t);
            row.push(x);
            row.extend_from_slice(&feats);
            row.push(pair[0]);
            row.push(pair[1]);
            rows.push(row);
        }
    }
    Some(rows)
}

/// Convert a randomized open-loop control to Markovian feedback and
/// compare costs and marginals.
fn run_mfc_compare(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunOutput> {
    let sim = &cfg.simulation;
    let ctl = cfg.control.as_ref().expect("validated");
    let grid = cfg.time_grid();
    let problem = ControlProblem::linear_quadratic(
        ctl.action_lo,
        ctl.action_hi,
        ctl.sigma,
        ctl.gamma,
        ctl.initial_std,
        grid,
    );
    let gain = ctl.feedback_gain;
    let generator = ControlGenerator::FeedbackPlusNoise {
        feedback: Arc::new(move |_t, x| gain * x),
        noise_scale: ctl.noise_scale,
    };
    let mut config = CompareConfig::new(sim.n_particles, sim.n_scenarios, &grid);
    config.master_seed = sim.master_seed;
    config.first_scenario = sim.first_scenario;
    let report = markovianize_and_compare(&problem, &generator, &config)?;

    let mut artifacts = Vec::new();
    let marginal_rows: Vec<Vec<f64>> = report
        .gaps
        .iter()
        .enumerate()
        .map(|(i, g)| {
            vec![
                i as f64,
                g.time,
                g.open_loop,
                g.markovian,
                g.combined_se,
                g.z,
            ]
        })
        .collect();
    write_table(
        &out.join("marginals.csv"),
        &["row", "t", "open_loop", "markovian", "combined_se", "z"],
        &marginal_rows,
    )?;
    artifacts.push("marginals.csv".into());

    let mut gates = vec![
        Gate::le(
            "cost_not_increased",
            report.j_markov - report.j_open,
            cfg.tolerances.gap_z_max * report.gap_se,
        ),
        Gate::le(
            "marginal_battery_z",
            report.max_marginal_z,
            cfg.tolerances.marginal_z_max,
        ),
        Gate::ge(
            "feasible_fraction",
            report.feasible_fraction,
            cfg.tolerances.feasible_min,
        ),
    ];
    if ctl.feedback_gain == 0.0 {
        // Pure randomization: the conversion removes exactly the
        // randomization variance from the quadratic running cost.
        let want = ctl.noise_scale * ctl.noise_scale * grid.t_end();
        gates.push(Gate::le(
            "closed_form_cost_gap",
            (report.gap - want).abs(),
            cfg.tolerances.gap_z_max * report.gap_se,
        ));
    }

    write_report(out, &serde_json::to_value(&report)?)?;
    artifacts.push("report.json".into());
    Ok(RunOutput { gates, artifacts })
}

fn random_polysine_field(rng: &mut StreamRng) -> CoefficientField {
    use mckv::coeffs::CoeffInput;
    let (b0, b1, b2) = (
        rng.next_uniform_in(-1.0, 1.0),
        rng.next_uniform_in(-1.0, 1.0),
        rng.next_uniform_in(-0.5, 0.5),
    );
    let (s0, s1) = (rng.next_uniform_in(0.2, 1.0), rng.next_uniform_in(-0.3, 0.3));
    let (g0, g1) = (rng.next_uniform_in(-0.8, 0.8), rng.next_uniform_in(-0.4, 0.4));
    CoefficientField::custom_1d(
        move |inp: &CoeffInput| {
            let x = inp.x[0];
            b0 + b1 * x + b2 * x * x
        },
        move |inp: &CoeffInput| s0 + s1 * inp.x[0].sin(),
        move |inp: &CoeffInput| g0 + g1 * inp.x[0].cos(),
    )
}

fn random_weighted_atoms(rng: &mut StreamRng, n: usize, lo: f64, hi: f64) -> EmpiricalMeasure {
    let atoms: Vec<f64> = (0..n).map(|_| rng.next_uniform_in(lo, hi)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.next_uniform()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    EmpiricalMeasure::new(atoms, 1, Some(weights)).expect("valid atoms")
}

/// Randomized invariant suite for the smoothing and compactification
/// constructions: power-mean contraction, covariance positivity, and the
/// per-bin power-mean inequality of the compactified drift.
fn run_mollify_suite(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunOutput> {
    let mol = &cfg.mollify;
    let seed = cfg.simulation.master_seed;
    let grid = SpatialGrid::new(-5.0, 5.0, 200)?;

    let mut contraction_rows = Vec::new();
    let mut smooth_rows = Vec::new();
    let mut worst_slack = f64::NEG_INFINITY;
    let mut worst_smooth_defect = f64::INFINITY;
    let mut rng = StreamRng::new(seed);
    for draw in 0..mol.n_draws {
        let mu = random_weighted_atoms(&mut rng, mol.atoms, -2.0, 2.0);
        let field = random_polysine_field(&mut rng);
        let scale = [4u32, 16, 64][draw % 3];
        let p = [1.5f64, 2.0, 3.0][draw % 3];
        let kernel = MollifierKernel::new(scale)?;
        let view = mu.view();
        let pair = contraction_pairings(&field, 0.0, &view, &kernel, p)?;
        worst_slack = worst_slack.max(pair.worst_slack());
        contraction_rows.push(vec![draw as f64, scale as f64, p, pair.worst_slack()]);

        let tables = smooth_coefficients(&field, 0.0, &view, &kernel, &grid)?;
        let defect = tables.psd_defect()?;
        worst_smooth_defect = worst_smooth_defect.min(defect);
        smooth_rows.push(vec![draw as f64, defect]);
    }

    let mut cutoff_rows = Vec::new();
    let mut worst_cutoff_defect = f64::INFINITY;
    let mut worst_bin_excess = f64::NEG_INFINITY;
    let mut rng = StreamRng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    for draw in 0..mol.n_draws {
        let mu = random_weighted_atoms(&mut rng, mol.cutoff_atoms, -3.0, 3.0);
        let field = random_polysine_field(&mut rng);
        let r = rng.next_uniform_in(0.8, 2.0);
        let dx = 0.1;
        let tables = cutoff_projection(&field, 0.0, &mu.view(), r, dx)?;
        let defect = tables.psd_defect()?;
        worst_cutoff_defect = worst_cutoff_defect.min(defect);
        cutoff_rows.push(vec![draw as f64, r, defect]);

        // Per-bin power-mean inequality for the compactified drift.
        let p = [1.5f64, 2.0, 3.0][draw % 3];
        let map = CutoffMap::new(r)?;
        let view = mu.view();
        let prepared = field.prepare(0.0, &view, None);
        let n_bins = tables.bin_centers.len();
        let lo = tables.bin_centers[0] - 0.5 * dx;
        let mut num = vec![0.0f64; n_bins];
        let mut den = vec![0.0f64; n_bins];
        if let MeasureView::Empirical { atoms, weights, .. } = view {
            for (i, &y) in atoms.iter().enumerate() {
                let w = weights.map_or(1.0 / atoms.len() as f64, |ws| ws[i]);
                let (b, s, gam) = prepared.eval_1d(y);
                let a = s * s + gam * gam;
                let obs = map.jacobian(y) * b + 0.5 * a * map.second_deriv(y);
                let j = (((map.project(y) - lo) / dx) as usize).min(n_bins - 1);
                num[j] += w * obs.abs().powf(p);
                den[j] += w;
            }
        }
        for j in 0..n_bins {
            if !tables.invalid[j] && den[j] > 0.0 {
                worst_bin_excess =
                    worst_bin_excess.max(tables.b[j].abs().powf(p) - num[j] / den[j]);
            }
        }
    }

    let mut artifacts = Vec::new();
    write_table(
        &out.join("contraction.csv"),
        &["draw", "kernel_scale", "p", "slack"],
        &contraction_rows,
    )?;
    artifacts.push("contraction.csv".into());
    write_table(&out.join("smoothed_psd.csv"), &["draw", "defect"], &smooth_rows)?;
    artifacts.push("smoothed_psd.csv".into());
    write_table(
        &out.join("cutoff_psd.csv"),
        &["draw", "radius", "defect"],
        &cutoff_rows,
    )?;
    artifacts.push("cutoff_psd.csv".into());

    let gates = vec![
        Gate::le(
            "contraction_slack",
            worst_slack,
            cfg.tolerances.contraction_slack_max,
        ),
        Gate::ge(
            "smoothed_psd_defect",
            worst_smooth_defect,
            cfg.tolerances.psd_defect_min,
        ),
        Gate::ge(
            "cutoff_psd_defect",
            worst_cutoff_defect,
            cfg.tolerances.psd_defect_min,
        ),
        Gate::le(
            "cutoff_bin_power_mean",
            worst_bin_excess,
            cfg.tolerances.contraction_slack_max,
        ),
    ];
    let report = json!({
        "draws": mol.n_draws,
        "worst_contraction_slack": worst_slack,
        "worst_smoothed_psd_defect": worst_smooth_defect,
        "worst_cutoff_psd_defect": worst_cutoff_defect,
        "worst_bin_power_mean_excess": worst_bin_excess,
    });
    write_report(out, &report)?;
    artifacts.push("report.json".into());
    Ok(RunOutput { gates, artifacts })
}

/// Frozen-measure fixed-point iteration on one scenario.
fn run_picard(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunOutput> {
    let sim = &cfg.simulation;
    let field = cfg.system.as_ref().expect("validated").build();
    let grid = cfg.time_grid();
    let law = cfg.initial.as_ref().expect("validated").law();
    let scenario = Scenario::generate(sim.master_seed, sim.first_scenario, grid, 1)?;
    let name = format!("scenario_{:04}.csv", sim.first_scenario);
    scenario.save(&out.join(&name))?;

    let config = SimulationConfig::new(sim.n_particles, grid, law);
    let (_, report) = picard_solve(
        &field,
        &scenario,
        sim.master_seed,
        &config,
        cfg.picard.max_iterations,
        cfg.picard.tolerance,
    )?;

    let rows: Vec<Vec<f64>> = report
        .deltas
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let ratio = if i == 0 {
                f64::NAN
            } else {
                report.ratios.get(i - 1).copied().unwrap_or(f64::NAN)
            };
            vec![i as f64, *d, ratio]
        })
        .collect();
    write_table(&out.join("iterations.csv"), &["sweep", "delta", "ratio"], &rows)?;

    let worst_ratio = report.ratios.iter().copied().fold(0.0f64, f64::max);
    let gates = vec![
        Gate::ge("converged", if report.converged { 1.0 } else { 0.0 }, 1.0),
        Gate::le("contraction_ratio", worst_ratio, cfg.tolerances.ratio_max),
    ];
    let report_json = json!({
        "deltas": report.deltas,
        "ratios": report.ratios,
        "iterations": report.iterations,
        "converged": report.converged,
    });
    write_report(out, &report_json)?;
    Ok(RunOutput {
        gates,
        artifacts: vec![name, "iterations.csv".into(), "report.json".into()],
    })
}
