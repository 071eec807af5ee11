//! Interacting particle systems driven by idiosyncratic and common noise.
//!
//! The engine advances N coupled Euler–Maruyama recursions
//!
//! ```text
//! X^i_{k+1} = X^i_k + b(t_k, mu_k, X^i_k) dt
//!             + sigma(t_k, mu_k, X^i_k) dW^i_k + gamma(t_k, mu_k, X^i_k) dB_k
//! ```
//!
//! where `mu_k` is either the live empirical measure of the ensemble
//! (self-consistent interaction), a frozen measure flow from a previous run
//! (fixed-point iteration), or a constant measure. All `dW^i` are particle-
//! specific streams; `dB` is the shared scenario path. Every random draw is
//! reproducible from `(master_seed, scenario_index, stream)` alone, which is
//! what makes the replay-based checks in [`independence_diagnostics`] and the
//! bitwise determinism guarantees possible.

use rayon::prelude::*;

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::{EmpiricalMeasure, MeasureView};
use crate::numerics::{correlation, mean, two_sided_p_value};
use crate::rng::{auxiliary_stream, particle_stream, StreamRng};
use crate::scenario::Scenario;

/// Initial distribution of the particle states.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum InitialLaw {
    /// All particles start at the same point.
    Point { position: Vec<f64> },
    /// Independent Gaussian coordinates.
    Gaussian { mean: Vec<f64>, std_dev: Vec<f64> },
    /// Independent uniform coordinates.
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    /// Finite mixture of the above.
    Mixture {
        weights: Vec<f64>,
        components: Vec<InitialLaw>,
    },
}

impl InitialLaw {
    /// State dimension implied by the parameters.
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point { position } => position.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Uniform { lo, .. } => lo.len(),
            InitialLaw::Mixture { components, .. } => {
                components.first().map_or(0, |c| c.dim())
            }
        }
    }

    /// Basic shape/finiteness validation.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::invalid("initial law has dimension zero"));
        }
        match self {
            InitialLaw::Point { position } => {
                if !position.iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid("initial point is not finite"));
                }
            }
            InitialLaw::Gaussian { mean, std_dev } => {
                if mean.len() != std_dev.len() {
                    return Err(Error::DimensionMismatch {
                        context: "gaussian initial law",
                        expected: mean.len(),
                        got: std_dev.len(),
                    });
                }
                if !mean.iter().chain(std_dev.iter()).all(|v| v.is_finite())
                    || std_dev.iter().any(|&s| s < 0.0)
                {
                    return Err(Error::invalid("gaussian initial law parameters invalid"));
                }
            }
            InitialLaw::Uniform { lo, hi } => {
                if lo.len() != hi.len() {
                    return Err(Error::DimensionMismatch {
                        context: "uniform initial law",
                        expected: lo.len(),
                        got: hi.len(),
                    });
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a <= b) || !b.is_finite()) {
                    return Err(Error::invalid("uniform initial law requires lo <= hi"));
                }
            }
            InitialLaw::Mixture {
                weights,
                components,
            } => {
                if components.is_empty() || weights.len() != components.len() {
                    return Err(Error::invalid("mixture weights/components mismatch"));
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("mixture weights must be a distribution"));
                }
                for c in components {
                    c.validate()?;
                    if c.dim() != d {
                        return Err(Error::DimensionMismatch {
                            context: "mixture component dimension",
                            expected: d,
                            got: c.dim(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Draw one sample into `out` using `rng`.
    pub fn sample(&self, rng: &mut StreamRng, out: &mut [f64]) {
        match self {
            InitialLaw::Point { position } => out.copy_from_slice(position),
            InitialLaw::Gaussian { mean, std_dev } => {
                for j in 0..mean.len() {
                    out[j] = rng.next_normal(mean[j], std_dev[j]);
                }
            }
            InitialLaw::Uniform { lo, hi } => {
                for j in 0..lo.len() {
                    out[j] = rng.next_uniform_in(lo[j], hi[j]);
                }
            }
            InitialLaw::Mixture {
                weights,
                components,
            } => {
                let u = rng.next_uniform();
                let mut acc = 0.0;
                let mut chosen = components.len() - 1;
                for (idx, &w) in weights.iter().enumerate() {
                    acc += w;
                    if u <= acc {
                        chosen = idx;
                        break;
                    }
                }
                components[chosen].sample(rng, out);
            }
        }
    }

    /// Standard normal in one dimension.
    pub fn standard_normal_1d() -> Self {
        InitialLaw::Gaussian {
            mean: vec![0.0],
            std_dev: vec![1.0],
        }
    }

    /// Point mass at a scalar position.
    pub fn point_1d(x: f64) -> Self {
        InitialLaw::Point { position: vec![x] }
    }
}

/// How the measure argument of the coefficients is supplied during a run.
#[derive(Clone, Copy)]
pub enum MeasureFlow<'a> {
    /// Live empirical measure of the ensemble being simulated.
    SelfConsistent,
    /// Node-by-node measures of a previously simulated ensemble.
    Frozen(&'a ParticleEnsemble),
    /// The same fixed measure at every node.
    Constant(&'a EmpiricalMeasure),
}

/// Source of the per-particle noise increments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// Honest independent streams, one per particle.
    Independent,
    /// Deliberately broken: every particle reuses the common increments as
    /// its own. Exists so the diagnostics can demonstrate detection.
    ReuseCommon,
}

/// Run parameters for one particle-system solve.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub n_particles: usize,
    pub grid: TimeGrid,
    pub initial: InitialLaw,
    /// Salt mixed into the per-particle stream ids; change it to redraw the
    /// idiosyncratic noise while keeping the same scenario.
    pub w_salt: u32,
    /// Keep the realized per-particle increments on the ensemble (needed by
    /// the independence diagnostics).
    pub record_noise: bool,
}

impl SimulationConfig {
    pub fn new(n_particles: usize, grid: TimeGrid, initial: InitialLaw) -> Self {
        SimulationConfig {
            n_particles,
            grid,
            initial,
            w_salt: 1,
            record_noise: false,
        }
    }

    pub fn with_salt(mut self, w_salt: u32) -> Self {
        self.w_salt = w_salt;
        self
    }

    pub fn recording_noise(mut self) -> Self {
        self.record_noise = true;
        self
    }
}

/// Simulated particle paths for one common-noise scenario.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub d: usize,
    pub n_particles: usize,
    pub grid: TimeGrid,
    pub scenario: Scenario,
    pub master_seed: u64,
    pub w_salt: u32,
    /// states[k] is the flat `n_particles * d` state vector at node k.
    states: Vec<Vec<f64>>,
    /// Realized idiosyncratic increments per step (flat `n_particles * d`),
    /// present when the run recorded them.
    noise_record: Option<Vec<Vec<f64>>>,
}

impl ParticleEnsemble {
    /// Empirical measure of the ensemble at node `k` (borrowed view).
    pub fn measure_at(&self, k: usize) -> MeasureView<'_> {
        MeasureView::Empirical {
            atoms: &self.states[k],
            d: self.d,
            weights: None,
        }
    }

    /// Owned copy of the empirical measure at node `k`.
    pub fn to_measure(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_states(&self.states[k], self.d)
            .expect("simulated states form a valid measure")
    }

    /// State of particle `i` at node `k`.
    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        &self.states[k][i * self.d..(i + 1) * self.d]
    }

    /// Flat state vector at node `k`.
    pub fn states_at(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    /// Scalar terminal positions (d = 1).
    pub fn terminal_points_1d(&self) -> Result<Vec<f64>> {
        if self.d != 1 {
            return Err(Error::ScalarOnly("terminal_points_1d"));
        }
        Ok(self.states[self.grid.n_steps()].clone())
    }

    /// Recorded idiosyncratic increments at step `k`, if the run kept them.
    pub fn recorded_noise(&self, k: usize) -> Option<&[f64]> {
        self.noise_record.as_ref().map(|r| r[k].as_slice())
    }

    /// Mean over particles of the pathwise sup-norm distance to `other`.
    ///
    /// This is the discrete analogue of `E[sup_t |X_t - Y_t|]` for two
    /// ensembles driven by identical noise.
    pub fn sup_gap(&self, other: &ParticleEnsemble) -> Result<f64> {
        if self.d != other.d
            || self.n_particles != other.n_particles
            || self.states.len() != other.states.len()
        {
            return Err(Error::ScenarioMismatch(
                "ensembles have different shapes".into(),
            ));
        }
        let mut total = 0.0;
        for i in 0..self.n_particles {
            let mut sup = 0.0_f64;
            for k in 0..self.states.len() {
                let mut dist2 = 0.0;
                for j in 0..self.d {
                    let diff = self.states[k][i * self.d + j] - other.states[k][i * self.d + j];
                    dist2 += diff * diff;
                }
                sup = sup.max(dist2.sqrt());
            }
            total += sup;
        }
        Ok(total / self.n_particles as f64)
    }
}

/// Sample the initial particle states exactly as the engine would.
///
/// Useful for setting up a constant measure flow that agrees with the
/// engine's own time-zero states.
pub fn sample_initial_states(
    master_seed: u64,
    scenario_index: u64,
    config: &SimulationConfig,
) -> Result<EmpiricalMeasure> {
    config.initial.validate()?;
    let d = config.initial.dim();
    let mut states = vec![0.0; config.n_particles * d];
    for i in 0..config.n_particles {
        let mut rng = StreamRng::for_stream(
            master_seed,
            scenario_index,
            auxiliary_stream(config.w_salt, i),
        );
        config
            .initial
            .sample(&mut rng, &mut states[i * d..(i + 1) * d]);
    }
    EmpiricalMeasure::new(states, d, None)
}

/// Regenerate the idiosyncratic increments of one particle.
///
/// Returns `n_steps * d` values; entry `k * d + j` is the increment applied
/// in step `k`, coordinate `j`, distributed N(0, dt). This reproduces the
/// engine's draws bit for bit.
pub fn idiosyncratic_increments(
    master_seed: u64,
    scenario_index: u64,
    w_salt: u32,
    particle: usize,
    grid: TimeGrid,
    d: usize,
) -> Vec<f64> {
    let mut rng = StreamRng::for_stream(
        master_seed,
        scenario_index,
        particle_stream(w_salt, particle),
    );
    let sqrt_dt = grid.dt().sqrt();
    (0..grid.n_steps() * d)
        .map(|_| rng.next_normal(0.0, sqrt_dt))
        .collect()
}

/// Core Euler–Maruyama engine over one scenario.
pub fn simulate(
    field: &CoefficientField,
    scenario: &Scenario,
    master_seed: u64,
    config: &SimulationConfig,
    flow: MeasureFlow<'_>,
    noise: NoiseMode,
) -> Result<ParticleEnsemble> {
    config.initial.validate()?;
    let d = field.dim();
    if config.initial.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "initial law vs coefficient dimension",
            expected: d,
            got: config.initial.dim(),
        });
    }
    if scenario.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "scenario vs coefficient dimension",
            expected: d,
            got: scenario.dim(),
        });
    }
    if *scenario.grid() != config.grid {
        return Err(Error::ScenarioMismatch(
            "scenario time grid differs from simulation grid".into(),
        ));
    }
    if config.n_particles == 0 {
        return Err(Error::EmptyInput("n_particles must be positive".into()));
    }
    if let MeasureFlow::Frozen(prev) = flow {
        if prev.grid != config.grid || prev.d != d {
            return Err(Error::ScenarioMismatch(
                "frozen flow has incompatible grid or dimension".into(),
            ));
        }
    }

    let n = config.n_particles;
    let grid = config.grid;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    // Initial states from the auxiliary streams, increments from the
    // particle streams; keeping them separate makes increment replay exact.
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(n_steps + 1);
    let mut init = vec![0.0; n * d];
    for i in 0..n {
        let mut rng = StreamRng::for_stream(
            master_seed,
            scenario.scenario_index(),
            auxiliary_stream(config.w_salt, i),
        );
        config.initial.sample(&mut rng, &mut init[i * d..(i + 1) * d]);
    }
    states.push(init);

    let mut particle_rngs: Vec<StreamRng> = (0..n)
        .map(|i| {
            StreamRng::for_stream(
                master_seed,
                scenario.scenario_index(),
                particle_stream(config.w_salt, i),
            )
        })
        .collect();

    let mut noise_record: Option<Vec<Vec<f64>>> = if config.record_noise {
        Some(Vec::with_capacity(n_steps))
    } else {
        None
    };

    let mut b = vec![0.0; d];
    let mut sig = vec![0.0; d * d];
    let mut gam = vec![0.0; d * d];
    let mut dw = vec![0.0; d];

    for k in 0..n_steps {
        let t = grid.node(k);
        let db = scenario.increment(k);
        let frozen_view;
        let constant_view;
        let live_view;
        let measure: &MeasureView<'_> = match flow {
            MeasureFlow::SelfConsistent => {
                live_view = MeasureView::Empirical {
                    atoms: &states[k],
                    d,
                    weights: None,
                };
                &live_view
            }
            MeasureFlow::Frozen(prev) => {
                frozen_view = prev.measure_at(k);
                &frozen_view
            }
            MeasureFlow::Constant(m) => {
                constant_view = m.view();
                &constant_view
            }
        };
        let prepared = field.prepare(t, measure, Some((scenario, k)));

        let mut next = vec![0.0; n * d];
        let mut step_noise = if noise_record.is_some() {
            vec![0.0; n * d]
        } else {
            Vec::new()
        };
        for i in 0..n {
            let x = &states[k][i * d..(i + 1) * d];
            prepared.drift(x, &mut b);
            prepared.sigma(x, &mut sig);
            prepared.gamma(x, &mut gam);
            match noise {
                NoiseMode::Independent => {
                    for v in dw.iter_mut() {
                        *v = particle_rngs[i].next_normal(0.0, sqrt_dt);
                    }
                }
                NoiseMode::ReuseCommon => dw.copy_from_slice(db),
            }
            if let Some(rec) = noise_record.as_mut() {
                step_noise[i * d..(i + 1) * d].copy_from_slice(&dw);
                let _ = rec; // filled after the particle loop
            }
            for j in 0..d {
                let mut v = x[j] + b[j] * dt;
                for l in 0..d {
                    v += sig[j * d + l] * dw[l] + gam[j * d + l] * db[l];
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        source_kind: "particle state",
                        step: k,
                        t,
                        particle: i,
                    });
                }
                next[i * d + j] = v;
            }
        }
        if let Some(rec) = noise_record.as_mut() {
            rec.push(step_noise);
        }
        states.push(next);
    }

    Ok(ParticleEnsemble {
        d,
        n_particles: n,
        grid,
        scenario: scenario.clone(),
        master_seed,
        w_salt: config.w_salt,
        states,
        noise_record,
    })
}

/// Self-consistent interacting system: the coefficients see the live
/// empirical measure of the ensemble at each step.
pub fn simulate_mckv(
    field: &CoefficientField,
    scenario: &Scenario,
    master_seed: u64,
    config: &SimulationConfig,
) -> Result<ParticleEnsemble> {
    simulate(
        field,
        scenario,
        master_seed,
        config,
        MeasureFlow::SelfConsistent,
        NoiseMode::Independent,
    )
}

/// System with coefficients that read the realized common-noise history
/// instead of (or in addition to) the measure. Same engine; provided for
/// call-site clarity when the measure interaction is absent.
pub fn simulate_random_coeff(
    field: &CoefficientField,
    scenario: &Scenario,
    master_seed: u64,
    config: &SimulationConfig,
) -> Result<ParticleEnsemble> {
    simulate(
        field,
        scenario,
        master_seed,
        config,
        MeasureFlow::SelfConsistent,
        NoiseMode::Independent,
    )
}

/// Simulate many scenarios in parallel, preserving scenario order.
pub fn simulate_scenario_batch(
    field: &CoefficientField,
    master_seed: u64,
    first_scenario: u64,
    count: usize,
    config: &SimulationConfig,
) -> Result<Vec<ParticleEnsemble>> {
    (0..count as u64)
        .into_par_iter()
        .map(|offset| {
            let scenario = Scenario::generate(
                master_seed,
                first_scenario + offset,
                config.grid,
                field.dim(),
            )?;
            simulate_mckv(field, &scenario, master_seed, config)
        })
        .collect()
}

/// Convergence record of the measure-flow fixed-point iteration.
#[derive(Debug, Clone)]
pub struct PicardReport {
    /// `deltas[n]` is the mean pathwise sup-distance between iterates
    /// n+1 and n+2 (the first delta needs two solves).
    pub deltas: Vec<f64>,
    /// Successive ratios `deltas[n+1] / deltas[n]` where the denominator is
    /// nonzero.
    pub ratios: Vec<f64>,
    /// Number of solves performed.
    pub iterations: usize,
    /// True when the last delta fell below the tolerance.
    pub converged: bool,
}

/// Fixed-point iteration on the measure flow.
///
/// Iterate 1 solves the system against the constant time-zero measure;
/// iterate n+1 solves against the frozen empirical flow of iterate n. All
/// iterates share the same scenario and the same idiosyncratic draws, so the
/// deltas measure only the contraction of the measure-to-flow map.
pub fn picard_solve(
    field: &CoefficientField,
    scenario: &Scenario,
    master_seed: u64,
    config: &SimulationConfig,
    max_iterations: usize,
    tol: f64,
) -> Result<(ParticleEnsemble, PicardReport)> {
    if max_iterations < 2 {
        return Err(Error::InvalidParameter(
            "fixed-point iteration needs at least two solves".into(),
        ));
    }
    let init_measure = sample_initial_states(master_seed, scenario.scenario_index(), config)?;
    let mut current = simulate(
        field,
        scenario,
        master_seed,
        config,
        MeasureFlow::Constant(&init_measure),
        NoiseMode::Independent,
    )?;
    let mut deltas = Vec::new();
    let mut iterations = 1;
    let mut converged = false;
    for _ in 1..max_iterations {
        let next = simulate(
            field,
            scenario,
            master_seed,
            config,
            MeasureFlow::Frozen(&current),
            NoiseMode::Independent,
        )?;
        iterations += 1;
        let delta = next.sup_gap(&current)?;
        deltas.push(delta);
        current = next;
        if delta <= tol {
            converged = true;
            break;
        }
    }
    let ratios = deltas
        .windows(2)
        .filter(|w| w[0] > 1e-300)
        .map(|w| w[1] / w[0])
        .collect();
    Ok((
        current,
        PicardReport {
            deltas,
            ratios,
            iterations,
            converged,
        },
    ))
}

/// Outcome of the noise-independence and adaptedness battery.
#[derive(Debug, Clone)]
pub struct IndependenceDiagnostics {
    /// Two-sided p-values, one per test.
    pub p_values: Vec<f64>,
    /// Fraction of tests with p < 0.01.
    pub fraction_small: f64,
    /// Smallest p-value across the battery.
    pub min_p_value: f64,
    /// Monte Carlo estimate of `E[sup_k |X_k|^2]`.
    pub sup_square_moment: f64,
    /// Monte Carlo estimate of `E[|X_T|^4]`.
    pub terminal_fourth_moment: f64,
    /// True when the battery rejects independence/adaptedness.
    pub flagged: bool,
}

/// Fraction of small p-values above which the battery flags the run.
/// Under the null the expected fraction at the 0.01 level is 0.01.
pub const DIAGNOSTIC_FRACTION_GATE: f64 = 0.03;
/// Single-test p-value below which the battery flags the run outright
/// (Bonferroni-safe for a few hundred tests).
pub const DIAGNOSTIC_MIN_P_GATE: f64 = 1e-6;

/// Statistical battery against two failure modes of the noise handling:
///
/// 1. per-particle correlation between the recorded idiosyncratic
///    increments and the common increments (catches a driver that reuses
///    the common noise as particle noise), and
/// 2. per-node correlation across particles between the state and the
///    increment applied in the following step (catches a scheme that lets
///    states peek at future noise).
///
/// Under a correct driver every test statistic is asymptotically standard
/// normal. Requires a run with `record_noise` enabled.
pub fn independence_diagnostics(ens: &ParticleEnsemble) -> Result<IndependenceDiagnostics> {
    let record = ens.noise_record.as_ref().ok_or_else(|| {
        Error::invalid("diagnostics need an ensemble simulated with record_noise")
    })?;
    let n_steps = ens.grid.n_steps();
    if n_steps < 16 || ens.n_particles < 16 {
        return Err(Error::InvalidParameter(
            "diagnostics need at least 16 steps and 16 particles".into(),
        ));
    }
    let mut p_values = Vec::new();

    // Battery 1: particle increments vs common increments over time.
    let n_particle_tests = ens.n_particles.min(100);
    let db_path: Vec<f64> = (0..n_steps).map(|k| ens.scenario.increment(k)[0]).collect();
    for i in 0..n_particle_tests {
        let dw_path: Vec<f64> = (0..n_steps).map(|k| record[k][i * ens.d]).collect();
        let r = correlation(&dw_path, &db_path);
        let z = r * (n_steps as f64).sqrt();
        p_values.push(two_sided_p_value(z));
    }

    // Battery 2: current state vs the next idiosyncratic increment across
    // particles, at up to 100 nodes.
    let n_node_tests = n_steps.min(100);
    let mut xs = vec![0.0; ens.n_particles];
    let mut dws = vec![0.0; ens.n_particles];
    for s in 0..n_node_tests {
        let k = s * n_steps / n_node_tests;
        for i in 0..ens.n_particles {
            xs[i] = ens.states[k][i * ens.d];
            dws[i] = record[k][i * ens.d];
        }
        let r = correlation(&xs, &dws);
        let z = r * (ens.n_particles as f64).sqrt();
        p_values.push(two_sided_p_value(z));
    }

    let n_tests = p_values.len();
    let small = p_values.iter().filter(|&&p| p < 0.01).count();
    let fraction_small = small as f64 / n_tests as f64;
    let min_p_value = p_values.iter().cloned().fold(1.0, f64::min);

    let last = n_steps;
    let sup_sq: Vec<f64> = (0..ens.n_particles)
        .map(|i| {
            (0..=last)
                .map(|k| {
                    (0..ens.d)
                        .map(|j| ens.states[k][i * ens.d + j].powi(2))
                        .sum::<f64>()
                })
                .fold(0.0_f64, f64::max)
        })
        .collect();
    let fourth: Vec<f64> = (0..ens.n_particles)
        .map(|i| {
            let norm2: f64 = (0..ens.d)
                .map(|j| ens.states[last][i * ens.d + j].powi(2))
                .sum();
            norm2 * norm2
        })
        .collect();

    let flagged =
        fraction_small > DIAGNOSTIC_FRACTION_GATE || min_p_value < DIAGNOSTIC_MIN_P_GATE;
    Ok(IndependenceDiagnostics {
        p_values,
        fraction_small,
        min_p_value,
        sup_square_moment: mean(&sup_sq),
        terminal_fourth_moment: mean(&fourth),
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_variance;

    fn ou_config(n: usize, steps: usize, t_end: f64) -> SimulationConfig {
        SimulationConfig::new(
            n,
            TimeGrid::new(t_end, steps).unwrap(),
            InitialLaw::standard_normal_1d(),
        )
    }

    #[test]
    fn runs_are_reproducible_and_salt_sensitive() {
        let field = CoefficientField::ou_1d(1.0, 0.5, 0.4, 0.3);
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let scenario = Scenario::generate(7, 2, grid, 1).unwrap();
        let config = ou_config(50, 32, 1.0);
        let a = simulate_mckv(&field, &scenario, 7, &config).unwrap();
        let b = simulate_mckv(&field, &scenario, 7, &config).unwrap();
        assert_eq!(a.states_at(32), b.states_at(32));
        let c = simulate_mckv(&field, &scenario, 7, &config.clone().with_salt(2)).unwrap();
        assert_ne!(a.states_at(32), c.states_at(32));
        // Different salt redraws W but keeps the same B and initial streams
        // distinct; time-zero states change too because the salt enters the
        // auxiliary streams.
        assert!(a.scenario.same_world(&c.scenario));
    }

    #[test]
    fn zero_coefficients_keep_particles_still() {
        let field = CoefficientField::constant_1d(0.0, 0.0, 0.0);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let scenario = Scenario::generate(1, 0, grid, 1).unwrap();
        let config = ou_config(20, 16, 1.0);
        let ens = simulate_mckv(&field, &scenario, 1, &config).unwrap();
        assert_eq!(ens.states_at(0), ens.states_at(16));
    }

    #[test]
    fn pure_common_noise_translates_every_particle() {
        let field = CoefficientField::constant_1d(0.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let scenario = Scenario::generate(11, 4, grid, 1).unwrap();
        let config = ou_config(30, 64, 1.0);
        let ens = simulate_mckv(&field, &scenario, 11, &config).unwrap();
        for k in 0..=64 {
            let shift = scenario.value(k)[0];
            for i in 0..30 {
                let expected = ens.state(0, i)[0] + shift;
                assert!((ens.state(k, i)[0] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conditional_moments_track_the_exact_discrete_recursion() {
        // dX = -theta X dt + sigma dW + gamma dB. Conditionally on B the
        // cross-particle mean follows m_{k+1} = (1 - theta dt) m_k +
        // gamma dB_k up to an O(sigma sqrt(T/N)) martingale, and the
        // cross-sectional variance follows the deterministic recursion
        // v_{k+1} = (1 - theta dt)^2 v_k + sigma^2 dt.
        let (theta, sigma, gamma) = (1.0, 0.7, 0.5);
        let field = CoefficientField::ou_1d(theta, 0.0, sigma, gamma);
        let n = 4000;
        let steps = 250;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let scenario = Scenario::generate(42, 0, grid, 1).unwrap();
        let config = ou_config(n, steps, 1.0);
        let ens = simulate_mckv(&field, &scenario, 42, &config).unwrap();

        let dt = grid.dt();
        let mut m = mean(ens.states_at(0));
        let mut v = sample_variance(ens.states_at(0));
        for k in 0..steps {
            m = (1.0 - theta * dt) * m + gamma * scenario.increment(k)[0];
            v = (1.0 - theta * dt).powi(2) * v + sigma * sigma * dt;
        }
        let m_hat = mean(ens.states_at(steps));
        let v_hat = sample_variance(ens.states_at(steps));
        // Martingale term has std sigma * sqrt(T/N) at most (discounted by
        // the mean reversion); allow 4 of those.
        let mean_tol = 4.0 * sigma * (1.0_f64 / n as f64).sqrt();
        assert!(
            (m_hat - m).abs() < mean_tol,
            "mean {m_hat} vs {m}, tol {mean_tol}"
        );
        // Sample variance of ~N(0, v): std about v * sqrt(2/N).
        let var_tol = 5.0 * v * (2.0 / n as f64).sqrt();
        assert!(
            (v_hat - v).abs() < var_tol,
            "variance {v_hat} vs {v}, tol {var_tol}"
        );
    }

    #[test]
    fn recorded_noise_matches_replayed_increments() {
        let field = CoefficientField::ou_1d(0.5, 0.3, 0.6, 0.4);
        let grid = TimeGrid::new(0.5, 40).unwrap();
        let scenario = Scenario::generate(5, 9, grid, 1).unwrap();
        let config = ou_config(25, 40, 0.5).recording_noise();
        let ens = simulate_mckv(&field, &scenario, 5, &config).unwrap();
        for i in [0usize, 7, 24] {
            let replay = idiosyncratic_increments(5, 9, config.w_salt, i, grid, 1);
            for k in 0..40 {
                assert_eq!(ens.recorded_noise(k).unwrap()[i], replay[k]);
            }
        }
    }

    #[test]
    fn non_finite_drift_aborts_with_location() {
        let field = CoefficientField::custom_1d(
            |inp| if inp.t > 0.24 { f64::NAN } else { 0.0 },
            |_| 0.0,
            |_| 0.0,
        );
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let scenario = Scenario::generate(1, 0, grid, 1).unwrap();
        let config = ou_config(3, 4, 1.0);
        let err = simulate_mckv(&field, &scenario, 1, &config).unwrap_err();
        match err {
            Error::NonFinite { step, particle, .. } => {
                assert_eq!(step, 1);
                assert_eq!(particle, 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn diagnostics_pass_honest_runs_and_flag_reused_noise() {
        let field = CoefficientField::ou_1d(1.0, 0.0, 0.5, 0.5);
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let scenario = Scenario::generate(13, 3, grid, 1).unwrap();
        let config = SimulationConfig::new(
            200,
            grid,
            InitialLaw::standard_normal_1d(),
        )
        .recording_noise();

        let honest = simulate_mckv(&field, &scenario, 13, &config).unwrap();
        let diag = independence_diagnostics(&honest).unwrap();
        assert!(
            !diag.flagged,
            "honest run flagged: min p {} fraction {}",
            diag.min_p_value, diag.fraction_small
        );
        assert!(diag.sup_square_moment.is_finite());
        assert!(diag.terminal_fourth_moment.is_finite());

        let broken = simulate(
            &field,
            &scenario,
            13,
            &config,
            MeasureFlow::SelfConsistent,
            NoiseMode::ReuseCommon,
        )
        .unwrap();
        let diag = independence_diagnostics(&broken).unwrap();
        assert!(diag.flagged);
        assert!(diag.min_p_value < 1e-12);
    }

    #[test]
    fn fixed_point_iteration_contracts_for_mean_field_coupling() {
        // Strong mean coupling over a short horizon: the flow map is a
        // contraction with factor well under one.
        let field = CoefficientField::ou_1d(1.0, 1.0, 0.1, 0.2);
        let grid = TimeGrid::new(0.5, 64).unwrap();
        let scenario = Scenario::generate(21, 0, grid, 1).unwrap();
        let config = SimulationConfig::new(
            800,
            grid,
            InitialLaw::Gaussian {
                mean: vec![1.0],
                std_dev: vec![1.0],
            },
        );
        let (_, report) = picard_solve(&field, &scenario, 21, &config, 8, 1e-10).unwrap();
        assert!(report.deltas.len() >= 2, "expected several iterations");
        for r in &report.ratios {
            assert!(*r < 0.6, "ratio {r} not contracting");
        }
    }

    #[test]
    fn fixed_point_iteration_is_exact_without_measure_dependence() {
        let field = CoefficientField::ou_1d(1.0, 0.0, 0.4, 0.3);
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let scenario = Scenario::generate(2, 1, grid, 1).unwrap();
        let config = ou_config(100, 32, 1.0);
        let (_, report) = picard_solve(&field, &scenario, 2, &config, 5, 1e-12).unwrap();
        assert_eq!(report.deltas[0], 0.0);
        assert!(report.converged);
        assert_eq!(report.iterations, 2);
    }

    #[test]
    fn frozen_flow_matches_live_flow_when_measure_is_ignored() {
        let field = CoefficientField::ou_1d(0.8, 0.0, 0.5, 0.5);
        let grid = TimeGrid::new(1.0, 24).unwrap();
        let scenario = Scenario::generate(4, 6, grid, 1).unwrap();
        let config = ou_config(60, 24, 1.0);
        let live = simulate_mckv(&field, &scenario, 4, &config).unwrap();
        let frozen = simulate(
            &field,
            &scenario,
            4,
            &config,
            MeasureFlow::Frozen(&live),
            NoiseMode::Independent,
        )
        .unwrap();
        for k in 0..=24 {
            assert_eq!(live.states_at(k), frozen.states_at(k));
        }
    }

    #[test]
    fn scenario_batch_preserves_order_and_reproduces_serial_runs() {
        let field = CoefficientField::ou_1d(1.0, 0.5, 0.3, 0.4);
        let config = ou_config(40, 16, 1.0);
        let batch = simulate_scenario_batch(&field, 99, 10, 4, &config).unwrap();
        assert_eq!(batch.len(), 4);
        for (offset, ens) in batch.iter().enumerate() {
            let scenario =
                Scenario::generate(99, 10 + offset as u64, config.grid, 1).unwrap();
            let serial = simulate_mckv(&field, &scenario, 99, &config).unwrap();
            assert_eq!(ens.scenario.scenario_index(), 10 + offset as u64);
            assert_eq!(ens.states_at(16), serial.states_at(16));
        }
    }
}
