//! Mean-field control with common noise: weak (randomized, open-loop)
//! controls, cost evaluation, a sampling check of the convexity condition
//! that makes Markovian reduction possible, projection of controls onto
//! Markovian feedback form, and the end-to-end cost comparison showing the
//! projected control never costs more.
//!
//! A weak control may randomize: the action process only needs to be
//! adapted, not a function of the current state. Projecting the controlled
//! coefficient targets `E[b|X, features(mu)]`, `E[sigma sigma^T|...]`,
//! `E[f|...]` and re-solving for an action that realizes them pointwise
//! (the measurable-selection step, done here as a deterministic feasibility
//! search) produces a Markovian control whose state-measure marginals match
//! and whose cost is no larger — randomization only ever adds cost when
//! the running cost is convex in the action.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::{wasserstein1_1d, MeasureView};
use crate::mimic::{ConditioningMode, FeatureMap};
use crate::numerics::{kahan_sum, mean, standard_error, NeumaierSum};
use crate::particle::InitialLaw;
use crate::regression::{KernelSurface, RegressionConfig, SliceData};
use crate::rng::{auxiliary_stream, particle_stream, StreamRng};
use crate::scenario::Scenario;

/// Stream-id bit for per-particle control randomization (the same family as
/// other auxiliary per-particle randomness, distinct from the driving-noise
/// and initial-draw streams).
const CONTROL_STREAM_BIT: u64 = 1 << 62;

/// Default relative feasibility tolerance of the action solve.
const FEASIBILITY_TOL: f64 = 1e-4;

/// Admissible actions.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    /// Closed interval of scalar actions.
    Interval { lo: f64, hi: f64 },
    /// Finite menu of scalar actions.
    Finite(Vec<f64>),
    /// Relaxed controls: probability mixtures over a finite base menu,
    /// represented by their barycenter. Coefficient and cost maps must be
    /// affine in the action for the representation to be exact.
    Simplex { base: Vec<f64> },
}

impl ActionSpace {
    pub fn validate(&self) -> Result<()> {
        match self {
            ActionSpace::Interval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidParameter(
                        "action interval must be finite and non-degenerate".into(),
                    ));
                }
            }
            ActionSpace::Finite(actions) | ActionSpace::Simplex { base: actions } => {
                if actions.is_empty() || actions.iter().any(|a| !a.is_finite()) {
                    return Err(Error::InvalidParameter(
                        "action menu must be non-empty and finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Clamp / snap a proposed action into the admissible set.
    pub fn admit(&self, a: f64) -> f64 {
        match self {
            ActionSpace::Interval { lo, hi } => a.clamp(*lo, *hi),
            ActionSpace::Finite(actions) => {
                let mut best = actions[0];
                for &c in actions {
                    if (c - a).abs() < (best - a).abs() {
                        best = c;
                    }
                }
                best
            }
            // Mixtures realize every barycenter in the convex hull.
            ActionSpace::Simplex { base } => {
                let lo = base.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                a.clamp(lo, hi)
            }
        }
    }

    pub fn contains(&self, a: f64) -> bool {
        match self {
            ActionSpace::Interval { lo, hi } => (*lo..=*hi).contains(&a),
            ActionSpace::Finite(actions) => actions.iter().any(|&c| c == a),
            ActionSpace::Simplex { base } => {
                let lo = base.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo..=hi).contains(&a)
            }
        }
    }
}

/// Light per-node summary of the particle cloud handed to the coefficient
/// and cost maps.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeasureSummary {
    pub mean: f64,
    pub second_moment: f64,
}

impl MeasureSummary {
    pub fn of(states: &[f64]) -> Self {
        let n = states.len().max(1) as f64;
        MeasureSummary {
            mean: kahan_sum(states.iter().copied()) / n,
            second_moment: kahan_sum(states.iter().map(|&x| x * x)) / n,
        }
    }
}

type ControlledMap = Arc<dyn Fn(f64, f64, &MeasureSummary, f64) -> f64 + Send + Sync>;
type UncontrolledMap = Arc<dyn Fn(f64, f64, &MeasureSummary) -> f64 + Send + Sync>;
type TerminalMap = Arc<dyn Fn(f64, &MeasureSummary) -> f64 + Send + Sync>;

/// A scalar mean-field control problem: controlled drift, volatility and
/// running cost, uncontrolled common-noise loading, terminal cost, initial
/// law and horizon.
#[derive(Clone)]
pub struct ControlProblem {
    pub action_space: ActionSpace,
    /// `b(t, x, m, a)`.
    pub drift: ControlledMap,
    /// `sigma(t, x, m, a)`.
    pub sigma: ControlledMap,
    /// `gamma(t, x, m)` — the common-noise loading is uncontrolled.
    pub gamma: UncontrolledMap,
    /// Running cost `f(t, x, m, a)`.
    pub running_cost: ControlledMap,
    /// Terminal cost `g(x, m)`.
    pub terminal_cost: TerminalMap,
    pub initial: InitialLaw,
    pub grid: TimeGrid,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ControlProblem(space={:?}, horizon={})",
            self.action_space,
            self.grid.t_end()
        )
    }
}

impl ControlProblem {
    pub fn validate(&self) -> Result<()> {
        self.action_space.validate()?;
        self.initial.validate()?;
        if self.initial.dim() != 1 {
            return Err(Error::ScalarOnly("control problems"));
        }
        Ok(())
    }

    /// The linear-quadratic benchmark: `dX = a dt + sigma dW + gamma dB`,
    /// `f = a^2 + x^2`, `g = 0`, centered Gaussian initial law.
    pub fn linear_quadratic(
        action_lo: f64,
        action_hi: f64,
        sigma: f64,
        gamma: f64,
        initial_std: f64,
        grid: TimeGrid,
    ) -> Self {
        ControlProblem {
            action_space: ActionSpace::Interval {
                lo: action_lo,
                hi: action_hi,
            },
            drift: Arc::new(|_, _, _, a| a),
            sigma: Arc::new(move |_, _, _, _| sigma),
            gamma: Arc::new(move |_, _, _| gamma),
            running_cost: Arc::new(|_, x, _, a| a * a + x * x),
            terminal_cost: Arc::new(|_, _| 0.0),
            initial: InitialLaw::Gaussian {
                mean: vec![0.0],
                std_dev: vec![initial_std],
            },
            grid,
        }
    }
}

/// How the open-loop (weak) control chooses actions.
#[derive(Clone)]
pub enum ControlGenerator {
    /// Deterministic schedule `a = schedule(t)`.
    Schedule(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    /// Feedback plus fresh independent noise per particle per node:
    /// `a = feedback(t, x) + noise_scale * xi`, admitted into the action
    /// space.
    FeedbackPlusNoise {
        feedback: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
        noise_scale: f64,
    },
    /// Relaxed randomization: every particle, at every node, draws an
    /// action from the menu with the given probabilities.
    Relaxed { actions: Vec<f64>, weights: Vec<f64> },
}

impl fmt::Debug for ControlGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlGenerator::Schedule(_) => write!(f, "ControlGenerator::Schedule"),
            ControlGenerator::FeedbackPlusNoise { noise_scale, .. } => {
                write!(f, "ControlGenerator::FeedbackPlusNoise(noise={noise_scale})")
            }
            ControlGenerator::Relaxed { actions, weights } => {
                write!(f, "ControlGenerator::Relaxed({actions:?}, {weights:?})")
            }
        }
    }
}

impl ControlGenerator {
    fn validate(&self, space: &ActionSpace) -> Result<()> {
        match self {
            ControlGenerator::Schedule(_) => Ok(()),
            ControlGenerator::FeedbackPlusNoise { noise_scale, .. } => {
                if !(noise_scale.is_finite() && *noise_scale >= 0.0) {
                    return Err(Error::InvalidParameter(
                        "control noise scale must be finite and >= 0".into(),
                    ));
                }
                Ok(())
            }
            ControlGenerator::Relaxed { actions, weights } => {
                if actions.len() != weights.len() || actions.is_empty() {
                    return Err(Error::InvalidParameter(
                        "relaxed generator needs matching non-empty actions/weights".into(),
                    ));
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|&w| !(w.is_finite() && w >= 0.0))
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(Error::InvalidParameter(
                        "relaxed weights must be a probability vector".into(),
                    ));
                }
                if actions.iter().any(|&a| !space.contains(space.admit(a))) {
                    return Err(Error::InvalidParameter(
                        "relaxed actions outside the action space".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Whether the generator needs a per-particle randomization stream.
    fn randomized(&self) -> bool {
        match self {
            ControlGenerator::Schedule(_) => false,
            ControlGenerator::FeedbackPlusNoise { noise_scale, .. } => *noise_scale > 0.0,
            ControlGenerator::Relaxed { .. } => true,
        }
    }

    fn draw(&self, t: f64, x: f64, rng: Option<&mut StreamRng>, space: &ActionSpace) -> f64 {
        match self {
            ControlGenerator::Schedule(s) => space.admit(s(t)),
            ControlGenerator::FeedbackPlusNoise {
                feedback,
                noise_scale,
            } => {
                let mut a = feedback(t, x);
                if *noise_scale > 0.0 {
                    a += noise_scale * rng.expect("randomized stream").next_standard_normal();
                }
                space.admit(a)
            }
            ControlGenerator::Relaxed { actions, weights } => {
                let u = rng.expect("randomized stream").next_uniform();
                let mut acc = 0.0;
                for (a, w) in actions.iter().zip(weights) {
                    acc += w;
                    if u <= acc {
                        return *a;
                    }
                }
                *actions.last().unwrap()
            }
        }
    }
}

/// One simulated scenario of a controlled particle system: states and the
/// realized action of every particle at every node.
#[derive(Debug, Clone)]
pub struct ControlledEnsemble {
    pub scenario_index: u64,
    /// `states[k][i]`: particle `i` at node `k`.
    pub states: Vec<Vec<f64>>,
    /// `controls[k][i]`: action applied by particle `i` at node `k`.
    pub controls: Vec<Vec<f64>>,
}

/// A weak control realized on a particle system across scenarios.
#[derive(Debug)]
pub struct WeakControlRun {
    pub grid: TimeGrid,
    pub generator: ControlGenerator,
    pub ensembles: Vec<ControlledEnsemble>,
}

/// Simulate the problem under an open-loop/weak control generator.
pub fn run_weak_control(
    problem: &ControlProblem,
    generator: &ControlGenerator,
    n_particles: usize,
    n_scenarios: usize,
    master_seed: u64,
    first_scenario: u64,
    w_salt: u32,
) -> Result<WeakControlRun> {
    problem.validate()?;
    generator.validate(&problem.action_space)?;
    if n_particles == 0 || n_scenarios == 0 {
        return Err(Error::invalid("need at least one particle and scenario"));
    }
    let ensembles: Result<Vec<ControlledEnsemble>> = (0..n_scenarios as u64)
        .into_par_iter()
        .map(|offset| {
            let scenario =
                Scenario::generate(master_seed, first_scenario + offset, problem.grid, 1)?;
            simulate_controlled(problem, generator, &scenario, master_seed, w_salt, n_particles)
        })
        .collect();
    Ok(WeakControlRun {
        grid: problem.grid,
        generator: generator.clone(),
        ensembles: ensembles?,
    })
}

fn simulate_controlled(
    problem: &ControlProblem,
    generator: &ControlGenerator,
    scenario: &Scenario,
    master_seed: u64,
    w_salt: u32,
    n_particles: usize,
) -> Result<ControlledEnsemble> {
    let grid = problem.grid;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let sidx = scenario.scenario_index();

    let mut cur = vec![0.0; n_particles];
    for (i, x) in cur.iter_mut().enumerate() {
        let mut rng = StreamRng::for_stream(master_seed, sidx, auxiliary_stream(w_salt, i));
        problem.initial.sample(&mut rng, std::slice::from_mut(x));
    }
    let mut w_rngs: Vec<StreamRng> = (0..n_particles)
        .map(|i| StreamRng::for_stream(master_seed, sidx, particle_stream(w_salt, i)))
        .collect();
    let mut a_rngs: Vec<StreamRng> = if generator.randomized() {
        (0..n_particles)
            .map(|i| {
                StreamRng::for_stream(
                    master_seed,
                    sidx,
                    CONTROL_STREAM_BIT | particle_stream(w_salt, i),
                )
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut states = Vec::with_capacity(n_steps + 1);
    let mut controls = Vec::with_capacity(n_steps + 1);
    let mut next = vec![0.0; n_particles];
    for k in 0..=n_steps {
        let t = grid.node(k);
        let summary = MeasureSummary::of(&cur);
        let mut alphas = vec![0.0; n_particles];
        for i in 0..n_particles {
            let rng = if generator.randomized() {
                Some(&mut a_rngs[i])
            } else {
                None
            };
            alphas[i] = generator.draw(t, cur[i], rng, &problem.action_space);
        }
        if k < n_steps {
            let db = scenario.increment(k)[0];
            for i in 0..n_particles {
                let (x, a) = (cur[i], alphas[i]);
                let b = (problem.drift)(t, x, &summary, a);
                let s = (problem.sigma)(t, x, &summary, a);
                let g = (problem.gamma)(t, x, &summary);
                let x_new = x + b * dt + s * sqrt_dt * w_rngs[i].next_standard_normal() + g * db;
                if !x_new.is_finite() {
                    return Err(Error::NonFinite {
                        source_kind: "controlled state",
                        step: k,
                        t,
                        particle: i,
                    });
                }
                next[i] = x_new;
            }
        }
        states.push(cur.clone());
        controls.push(alphas);
        if k < n_steps {
            std::mem::swap(&mut cur, &mut next);
        }
    }
    Ok(ControlledEnsemble {
        scenario_index: sidx,
        states,
        controls,
    })
}

/// Monte-Carlo cost of a weak control.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    /// Cost estimate `E[integral of f dt + g(X_T, mu_T)]`.
    pub j: f64,
    /// CLT standard error (across scenarios when more than one, otherwise
    /// across particles).
    pub standard_error: f64,
    /// Per-scenario cost means.
    pub per_scenario: Vec<f64>,
    /// Largest |f| seen — the integrability witness.
    pub max_running_cost: f64,
    /// Largest |g| seen.
    pub max_terminal_cost: f64,
}

/// Evaluate the cost functional on a simulated run: trapezoidal running
/// cost integral per particle plus terminal cost, averaged per scenario,
/// then across scenarios.
pub fn evaluate_cost(run: &WeakControlRun, problem: &ControlProblem) -> Result<CostReport> {
    let grid = run.grid;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let mut per_scenario = Vec::with_capacity(run.ensembles.len());
    let mut max_f = 0.0_f64;
    let mut max_g = 0.0_f64;
    let mut per_particle_costs: Vec<f64> = Vec::new();
    for ens in &run.ensembles {
        let n = ens.states[0].len();
        let mut costs = vec![NeumaierSum::new(); n];
        for k in 0..=n_steps {
            let t = grid.node(k);
            let summary = MeasureSummary::of(&ens.states[k]);
            let weight = if k == 0 || k == n_steps { 0.5 } else { 1.0 };
            for i in 0..n {
                let f = (problem.running_cost)(t, ens.states[k][i], &summary, ens.controls[k][i]);
                if !f.is_finite() {
                    return Err(Error::NonFinite {
                        source_kind: "running cost",
                        step: k,
                        t,
                        particle: i,
                    });
                }
                max_f = max_f.max(f.abs());
                costs[i].add(weight * f * dt);
            }
            if k == n_steps {
                for i in 0..n {
                    let g = (problem.terminal_cost)(ens.states[k][i], &summary);
                    if !g.is_finite() {
                        return Err(Error::NonFinite {
                            source_kind: "terminal cost",
                            step: k,
                            t,
                            particle: i,
                        });
                    }
                    max_g = max_g.max(g.abs());
                    costs[i].add(g);
                }
            }
        }
        let totals: Vec<f64> = costs.iter().map(|c| c.total()).collect();
        per_scenario.push(mean(&totals));
        if run.ensembles.len() == 1 {
            per_particle_costs = totals;
        }
    }
    let j = mean(&per_scenario);
    let standard_error = if per_scenario.len() > 1 {
        standard_error(&per_scenario)
    } else {
        standard_error(&per_particle_costs)
    };
    Ok(CostReport {
        j,
        standard_error,
        per_scenario,
        max_running_cost: max_f,
        max_terminal_cost: max_g,
    })
}

/// One sampled point of the convexity (Roxin-type) check.
#[derive(Debug, Clone, Serialize)]
pub struct RoxinPointReport {
    pub t: f64,
    pub x: f64,
    pub pairs_checked: usize,
    pub violations: usize,
    /// Largest relative infeasibility of a midpoint witness search.
    pub worst_gap: f64,
}

/// Sampling evidence for the convexity of the controlled coefficient-cost
/// image. A pass is evidence, not a proof.
#[derive(Debug, Clone, Serialize)]
pub struct RoxinReport {
    pub points: Vec<RoxinPointReport>,
    pub total_violations: usize,
}

impl RoxinReport {
    pub fn passed(&self) -> bool {
        self.total_violations == 0
    }
}

/// Golden-section minimizer on `[lo, hi]`.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

/// Outcome of one action-feasibility solve.
struct SolvedAction {
    action: f64,
    b_residual: f64,
    feasible: bool,
}

/// Find an admissible action realizing the drift/volatility targets within
/// tolerance while minimizing the running cost; deterministic smallest-
/// action tie-breaking. Infeasible targets return the best drift match.
fn solve_action(
    space: &ActionSpace,
    b_of: &dyn Fn(f64) -> f64,
    s_of: &dyn Fn(f64) -> f64,
    f_of: &dyn Fn(f64) -> f64,
    b_target: f64,
    s_target: f64,
    tol: f64,
) -> SolvedAction {
    let b_scale = 1.0 + b_target.abs();
    let s_scale = 1.0 + s_target.abs();
    let infeas = |a: f64| -> f64 {
        ((b_of(a) - b_target).abs() / b_scale).max((s_of(a) - s_target).abs() / s_scale)
    };
    match space {
        ActionSpace::Interval { lo, hi } => {
            // Coarse grid, then golden refinement of the infeasibility.
            let n_grid = 48;
            let mut best_a = *lo;
            let mut best_v = f64::INFINITY;
            for j in 0..=n_grid {
                let a = lo + (hi - lo) * j as f64 / n_grid as f64;
                let v = infeas(a);
                if v < best_v {
                    best_v = v;
                    best_a = a;
                }
            }
            let cell = (hi - lo) / n_grid as f64;
            let refined = golden_min(
                &infeas,
                (best_a - cell).max(*lo),
                (best_a + cell).min(*hi),
                36,
            );
            let (anchor, anchor_v) = if infeas(refined) < best_v {
                (refined, infeas(refined))
            } else {
                (best_a, best_v)
            };
            if anchor_v > tol {
                return SolvedAction {
                    action: anchor,
                    b_residual: (b_of(anchor) - b_target).abs(),
                    feasible: false,
                };
            }
            // Connected feasible bracket around the anchor, then minimize f
            // inside it with smallest-action tie-breaking.
            let mut bracket_lo = anchor;
            while bracket_lo - cell >= *lo && infeas(bracket_lo - cell) <= tol {
                bracket_lo -= cell;
            }
            let mut bracket_hi = anchor;
            while bracket_hi + cell <= *hi && infeas(bracket_hi + cell) <= tol {
                bracket_hi += cell;
            }
            let mut pick = anchor;
            let mut pick_f = f_of(anchor);
            let m = 16;
            for j in 0..=m {
                let a = bracket_lo + (bracket_hi - bracket_lo) * j as f64 / m as f64;
                if infeas(a) > tol {
                    continue;
                }
                let fa = f_of(a);
                if fa < pick_f - 1e-12 * (1.0 + pick_f.abs())
                    || (fa <= pick_f + 1e-12 * (1.0 + pick_f.abs()) && a < pick)
                {
                    pick = a;
                    pick_f = fa;
                }
            }
            SolvedAction {
                action: pick,
                b_residual: (b_of(pick) - b_target).abs(),
                feasible: true,
            }
        }
        ActionSpace::Finite(actions) => {
            let mut feas: Option<(f64, f64)> = None; // (action, f)
            let mut fallback = (actions[0], f64::INFINITY);
            for &a in actions {
                let v = infeas(a);
                if v < fallback.1 {
                    fallback = (a, v);
                }
                if v <= tol {
                    let fa = f_of(a);
                    feas = match feas {
                        None => Some((a, fa)),
                        Some((pa, pf)) => {
                            if fa < pf - 1e-12 || (fa <= pf + 1e-12 && a < pa) {
                                Some((a, fa))
                            } else {
                                Some((pa, pf))
                            }
                        }
                    };
                }
            }
            match feas {
                Some((a, _)) => SolvedAction {
                    action: a,
                    b_residual: (b_of(a) - b_target).abs(),
                    feasible: true,
                },
                None => SolvedAction {
                    action: fallback.0,
                    b_residual: (b_of(fallback.0) - b_target).abs(),
                    feasible: false,
                },
            }
        }
        ActionSpace::Simplex { base } => {
            // Mixtures of at most two menu actions realize every achievable
            // (affine) target; enumerate singletons and pairs.
            let mut feas: Option<(f64, f64)> = None;
            let mut fallback = (base[0], f64::INFINITY);
            let mut consider = |bary: f64, v: f64, fval: f64| {
                if v < fallback.1 {
                    fallback = (bary, v);
                }
                if v <= tol {
                    feas = match feas.take() {
                        None => Some((bary, fval)),
                        Some((pa, pf)) => {
                            if fval < pf - 1e-12 || (fval <= pf + 1e-12 && bary < pa) {
                                Some((bary, fval))
                            } else {
                                Some((pa, pf))
                            }
                        }
                    };
                }
            };
            for (i, &ai) in base.iter().enumerate() {
                let (bi, si, fi) = (b_of(ai), s_of(ai), f_of(ai));
                let v = ((bi - b_target).abs() / b_scale).max((si - s_target).abs() / s_scale);
                consider(ai, v, fi);
                for &aj in base.iter().skip(i + 1) {
                    let (bj, sj, fj) = (b_of(aj), s_of(aj), f_of(aj));
                    if (bj - bi).abs() < 1e-14 {
                        continue;
                    }
                    let q = (b_target - bi) / (bj - bi);
                    if !(0.0..=1.0).contains(&q) {
                        continue;
                    }
                    let s_mix = (1.0 - q) * si + q * sj;
                    let f_mix = (1.0 - q) * fi + q * fj;
                    let bary = (1.0 - q) * ai + q * aj;
                    let v = (s_mix - s_target).abs() / s_scale;
                    consider(bary, v, f_mix);
                }
            }
            match feas {
                Some((bary, _)) => SolvedAction {
                    action: bary,
                    b_residual: 0.0,
                    feasible: true,
                },
                None => SolvedAction {
                    action: fallback.0,
                    b_residual: (b_of(fallback.0) - b_target).abs(),
                    feasible: false,
                },
            }
        }
    }
}

/// Sample-and-search check of the convexity condition: for random action
/// pairs at each sampled `(t, x, m)` point, the midpoint of their
/// (drift, covariance, cost) images must be realizable by a single action
/// with no greater cost.
pub fn check_roxin(
    problem: &ControlProblem,
    sample_points: &[(f64, f64, MeasureSummary)],
    n_a_samples: usize,
) -> Result<RoxinReport> {
    problem.validate()?;
    if sample_points.is_empty() || n_a_samples == 0 {
        return Err(Error::EmptyInput("convexity check needs points and action samples".into()));
    }
    let mut rng = StreamRng::new(0x70c5);
    let mut points = Vec::with_capacity(sample_points.len());
    let mut total_violations = 0;
    for &(t, x, m) in sample_points {
        let b_of = |a: f64| (problem.drift)(t, x, &m, a);
        let s_of = |a: f64| {
            let s = (problem.sigma)(t, x, &m, a);
            s * s
        };
        let f_of = |a: f64| (problem.running_cost)(t, x, &m, a);
        let draw_action = |rng: &mut StreamRng| -> f64 {
            match &problem.action_space {
                ActionSpace::Interval { lo, hi } => rng.next_uniform_in(*lo, *hi),
                ActionSpace::Finite(actions) | ActionSpace::Simplex { base: actions } => {
                    actions[rng.next_index(actions.len())]
                }
            }
        };
        let mut violations = 0;
        let mut worst_gap = 0.0_f64;
        for _ in 0..n_a_samples {
            let a1 = draw_action(&mut rng);
            let a2 = draw_action(&mut rng);
            let b_mid = 0.5 * (b_of(a1) + b_of(a2));
            let s_mid = 0.5 * (s_of(a1) + s_of(a2));
            let f_mid = 0.5 * (f_of(a1) + f_of(a2));
            let solved = solve_action(
                &problem.action_space,
                &b_of,
                &s_of,
                &f_of,
                b_mid,
                s_mid,
                FEASIBILITY_TOL,
            );
            let cost_ok = solved.feasible
                && f_of(solved.action) <= f_mid + FEASIBILITY_TOL * (1.0 + f_mid.abs());
            if !cost_ok {
                violations += 1;
                let gap = if solved.feasible {
                    (f_of(solved.action) - f_mid) / (1.0 + f_mid.abs())
                } else {
                    solved.b_residual / (1.0 + b_mid.abs())
                };
                worst_gap = worst_gap.max(gap);
            }
        }
        total_violations += violations;
        points.push(RoxinPointReport {
            t,
            x,
            pairs_checked: n_a_samples,
            violations,
            worst_gap,
        });
    }
    Ok(RoxinReport {
        points,
        total_violations,
    })
}

/// Configuration of the control projection and comparison pipeline.
#[derive(Debug, Clone)]
pub struct ProjectionConfig {
    pub mode: ConditioningMode,
    pub feature_map: FeatureMap,
    pub regression: RegressionConfig,
    /// Relative feasibility tolerance of the action solve.
    pub feasibility_tol: f64,
    /// Cap on pooled training samples per node.
    pub max_samples_per_slice: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            mode: ConditioningMode::Classical,
            feature_map: FeatureMap::moments(2),
            regression: RegressionConfig::default(),
            feasibility_tol: FEASIBILITY_TOL,
            max_samples_per_slice: 16_384,
        }
    }
}

/// Markovian control surface: per-node regressions of the controlled
/// drift, squared volatility and running cost, plus the feasibility solve
/// that turns targets back into actions.
pub struct MarkovianControl {
    surface: KernelSurface,
    pub grid: TimeGrid,
    pub mode: ConditioningMode,
    pub n_features: usize,
    pub feasibility_tol: f64,
    incidents: AtomicU64,
    queries: AtomicU64,
    feasible: AtomicU64,
}

impl fmt::Debug for MarkovianControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MarkovianControl(nodes={}, incidents={})",
            self.grid.n_steps() + 1,
            self.incidents.load(Ordering::Relaxed)
        )
    }
}

impl MarkovianControl {
    /// Estimated `(b, sigma^2, f)` targets at a query.
    pub fn targets(&self, node: usize, x: f64, features: &[f64]) -> Result<(f64, f64, f64)> {
        let v = self.surface.evaluate(node, x, features)?;
        Ok((v[0], v[1], v[2]))
    }

    /// The Markovian action at `(node, x)` given the measure summary and
    /// feature vector: solve for an admissible action matching the
    /// regressed drift/volatility targets, minimizing the running cost.
    /// Infeasible targets are counted as Roxin-gap incidents and answered
    /// with the best drift match.
    pub fn action(
        &self,
        problem: &ControlProblem,
        node: usize,
        x: f64,
        m: &MeasureSummary,
        features: &[f64],
    ) -> Result<f64> {
        let (b_t, s_t, _) = self.targets(node, x, features)?;
        let t = self.grid.node(node);
        let b_of = |a: f64| (problem.drift)(t, x, m, a);
        let s_of = |a: f64| {
            let s = (problem.sigma)(t, x, m, a);
            s * s
        };
        let f_of = |a: f64| (problem.running_cost)(t, x, m, a);
        let solved = solve_action(
            &problem.action_space,
            &b_of,
            &s_of,
            &f_of,
            b_t,
            s_t,
            self.feasibility_tol,
        );
        self.queries.fetch_add(1, Ordering::Relaxed);
        if solved.feasible {
            self.feasible.fetch_add(1, Ordering::Relaxed);
        } else {
            self.incidents.fetch_add(1, Ordering::Relaxed);
        }
        Ok(solved.action)
    }

    /// Roxin-gap incidents recorded so far.
    pub fn incidents(&self) -> u64 {
        self.incidents.load(Ordering::Relaxed)
    }

    /// Fraction of action queries whose targets were feasible.
    pub fn feasible_fraction(&self) -> f64 {
        let q = self.queries.load(Ordering::Relaxed);
        if q == 0 {
            1.0
        } else {
            self.feasible.load(Ordering::Relaxed) as f64 / q as f64
        }
    }

    pub fn surface(&self) -> &KernelSurface {
        &self.surface
    }
}

/// Regress the controlled coefficient and cost targets of a weak-control
/// run onto `(x, features)` per time node.
pub fn project_control(
    run: &WeakControlRun,
    problem: &ControlProblem,
    config: &ProjectionConfig,
) -> Result<MarkovianControl> {
    problem.validate()?;
    let grid = run.grid;
    let n_nodes = grid.n_steps() + 1;
    let n_features = match config.mode {
        ConditioningMode::Classical => 0,
        ConditioningMode::Conditional => config.feature_map.len(),
    };
    let total: usize = run
        .ensembles
        .iter()
        .map(|e| e.states[0].len())
        .sum::<usize>();
    let stride = (total + config.max_samples_per_slice - 1)
        / config.max_samples_per_slice.max(1);
    let stride = stride.max(1);
    let mut slices = vec![SliceData::default(); n_nodes];
    let mut feats = vec![0.0; config.feature_map.len()];
    for ens in &run.ensembles {
        for k in 0..n_nodes {
            let t = grid.node(k);
            let states = &ens.states[k];
            let summary = MeasureSummary::of(states);
            if config.mode == ConditioningMode::Conditional {
                config.feature_map.eval_states(states, &mut feats);
            }
            let slice = &mut slices[k];
            for i in (0..states.len()).step_by(stride) {
                let (x, a) = (states[i], ens.controls[k][i]);
                let s = (problem.sigma)(t, x, &summary, a);
                slice.x.push(x);
                slice.responses.push((problem.drift)(t, x, &summary, a));
                slice.responses.push(s * s);
                slice
                    .responses
                    .push((problem.running_cost)(t, x, &summary, a));
                if config.mode == ConditioningMode::Conditional {
                    slice.features.extend_from_slice(&feats);
                }
            }
        }
    }
    for (k, slice) in slices.iter().enumerate() {
        let count = slice.n_samples();
        if count > 0 && count < 100 {
            return Err(Error::invalid(format!(
                "node {k} has only {count} control samples; populated nodes need at least 100"
            )));
        }
    }
    let surface = KernelSurface::fit(&slices, n_features, 3, &config.regression)?;
    Ok(MarkovianControl {
        surface,
        grid,
        mode: config.mode,
        n_features,
        feasibility_tol: config.feasibility_tol,
        incidents: AtomicU64::new(0),
        queries: AtomicU64::new(0),
        feasible: AtomicU64::new(0),
    })
}

/// Simulate the problem under the projected Markovian control.
pub fn run_markovian_control(
    problem: &ControlProblem,
    control: &MarkovianControl,
    feature_map: &FeatureMap,
    n_particles: usize,
    n_scenarios: usize,
    master_seed: u64,
    first_scenario: u64,
    w_salt: u32,
) -> Result<WeakControlRun> {
    problem.validate()?;
    if n_particles == 0 || n_scenarios == 0 {
        return Err(Error::invalid("need at least one particle and scenario"));
    }
    let grid = problem.grid;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let ensembles: Result<Vec<ControlledEnsemble>> = (0..n_scenarios as u64)
        .into_par_iter()
        .map(|offset| {
            let scenario =
                Scenario::generate(master_seed, first_scenario + offset, grid, 1)?;
            let sidx = scenario.scenario_index();
            let mut cur = vec![0.0; n_particles];
            for (i, x) in cur.iter_mut().enumerate() {
                let mut rng =
                    StreamRng::for_stream(master_seed, sidx, auxiliary_stream(w_salt, i));
                problem.initial.sample(&mut rng, std::slice::from_mut(x));
            }
            let mut w_rngs: Vec<StreamRng> = (0..n_particles)
                .map(|i| StreamRng::for_stream(master_seed, sidx, particle_stream(w_salt, i)))
                .collect();
            let mut states = Vec::with_capacity(n_steps + 1);
            let mut controls = Vec::with_capacity(n_steps + 1);
            let mut next = vec![0.0; n_particles];
            let mut feats = vec![0.0; feature_map.len()];
            for k in 0..=n_steps {
                let t = grid.node(k);
                let summary = MeasureSummary::of(&cur);
                let query_feats: &[f64] = match control.mode {
                    ConditioningMode::Classical => &[],
                    ConditioningMode::Conditional => {
                        feature_map.eval_states(&cur, &mut feats);
                        &feats
                    }
                };
                let mut alphas = vec![0.0; n_particles];
                for i in 0..n_particles {
                    alphas[i] = control.action(problem, k, cur[i], &summary, query_feats)?;
                }
                if k < n_steps {
                    let db = scenario.increment(k)[0];
                    for i in 0..n_particles {
                        let (x, a) = (cur[i], alphas[i]);
                        let b = (problem.drift)(t, x, &summary, a);
                        let s = (problem.sigma)(t, x, &summary, a);
                        let g = (problem.gamma)(t, x, &summary);
                        let x_new = x
                            + b * dt
                            + s * sqrt_dt * w_rngs[i].next_standard_normal()
                            + g * db;
                        if !x_new.is_finite() {
                            return Err(Error::NonFinite {
                                source_kind: "markovian-control state",
                                step: k,
                                t,
                                particle: i,
                            });
                        }
                        next[i] = x_new;
                    }
                }
                states.push(cur.clone());
                controls.push(alphas);
                if k < n_steps {
                    std::mem::swap(&mut cur, &mut next);
                }
            }
            Ok(ControlledEnsemble {
                scenario_index: sidx,
                states,
                controls,
            })
        })
        .collect();
    Ok(WeakControlRun {
        grid,
        generator: ControlGenerator::Schedule(Arc::new(|_| 0.0)),
        ensembles: ensembles?,
    })
}

/// One marginal functional compared between the open-loop and Markovian
/// runs.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalGap {
    pub time: f64,
    pub name: String,
    pub open_loop: f64,
    pub markovian: f64,
    pub combined_se: f64,
    pub z: f64,
}

/// Output of the full open-loop-to-Markovian comparison.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    #[serde(rename = "J_open")]
    pub j_open: f64,
    pub se_open: f64,
    #[serde(rename = "J_markov")]
    pub j_markov: f64,
    pub se_markov: f64,
    /// Paired per-scenario estimate of `J_open - J_markov` and its SE.
    pub gap: f64,
    pub gap_se: f64,
    pub gaps: Vec<MarginalGap>,
    pub max_marginal_z: f64,
    /// 1-Wasserstein distance between pooled marginals per compare time.
    pub pooled_w1: Vec<f64>,
    pub compare_times: Vec<f64>,
    pub feasible_fraction: f64,
    pub incidents: u64,
    pub roxin: RoxinReport,
}

/// Comparison pipeline settings.
#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub n_particles: usize,
    pub n_scenarios: usize,
    pub master_seed: u64,
    pub first_scenario: u64,
    pub projection: ProjectionConfig,
    /// Nodes at which marginal functionals are compared.
    pub compare_nodes: Vec<usize>,
}

impl CompareConfig {
    pub fn new(n_particles: usize, n_scenarios: usize, grid: &TimeGrid) -> Self {
        let n = grid.n_steps();
        CompareConfig {
            n_particles,
            n_scenarios,
            master_seed: 31_415,
            first_scenario: 0,
            projection: ProjectionConfig::default(),
            compare_nodes: vec![n / 2, n],
        }
    }
}

fn marginal_values(states: &[f64]) -> [f64; 3] {
    let n = states.len() as f64;
    let m = kahan_sum(states.iter().copied()) / n;
    let m2 = kahan_sum(states.iter().map(|&x| x * x)) / n;
    [m, m2, m * m]
}

/// Full pipeline: simulate the open-loop control, check the convexity
/// battery, project to a Markovian control, re-simulate on the same
/// scenarios with fresh idiosyncratic noise, and compare costs and
/// marginals. The cost gap is estimated scenario-paired, cancelling the
/// common-noise variance.
pub fn markovianize_and_compare(
    problem: &ControlProblem,
    open_loop: &ControlGenerator,
    config: &CompareConfig,
) -> Result<CompareReport> {
    problem.validate()?;
    if config
        .compare_nodes
        .iter()
        .any(|&k| k > problem.grid.n_steps())
    {
        return Err(Error::invalid("compare nodes out of range"));
    }
    // Default convexity battery over time, space and a nominal summary.
    let t_end = problem.grid.t_end();
    let mut battery = Vec::new();
    for &t in &[0.0, 0.5 * t_end, t_end] {
        for &x in &[-1.0, 0.0, 1.0] {
            battery.push((
                t,
                x,
                MeasureSummary {
                    mean: 0.0,
                    second_moment: 1.0,
                },
            ));
        }
    }
    let roxin = check_roxin(problem, &battery, 24)?;
    if !roxin.passed() {
        return Err(Error::InvalidParameter(format!(
            "convexity battery reported {} violations; Markovian reduction is not justified",
            roxin.total_violations
        )));
    }

    let open_run = run_weak_control(
        problem,
        open_loop,
        config.n_particles,
        config.n_scenarios,
        config.master_seed,
        config.first_scenario,
        0,
    )?;
    let control = project_control(&open_run, problem, &config.projection)?;
    let markov_run = run_markovian_control(
        problem,
        &control,
        &config.projection.feature_map,
        config.n_particles,
        config.n_scenarios,
        config.master_seed,
        config.first_scenario,
        1,
    )?;
    let open_cost = evaluate_cost(&open_run, problem)?;
    let markov_cost = evaluate_cost(&markov_run, problem)?;
    let diffs: Vec<f64> = open_cost
        .per_scenario
        .iter()
        .zip(&markov_cost.per_scenario)
        .map(|(a, b)| a - b)
        .collect();
    let gap = mean(&diffs);
    let gap_se = if diffs.len() > 1 {
        standard_error(&diffs)
    } else {
        (open_cost.standard_error.powi(2) + markov_cost.standard_error.powi(2)).sqrt()
    };

    let names = ["E[X]", "E[X^2]", "E[X*mean]"];
    let mut gaps = Vec::new();
    let mut max_z = 0.0_f64;
    let mut pooled_w1 = Vec::new();
    for &k in &config.compare_nodes {
        let t = problem.grid.node(k);
        let open_vals: Vec<[f64; 3]> = open_run
            .ensembles
            .iter()
            .map(|e| marginal_values(&e.states[k]))
            .collect();
        let markov_vals: Vec<[f64; 3]> = markov_run
            .ensembles
            .iter()
            .map(|e| marginal_values(&e.states[k]))
            .collect();
        for (fi, name) in names.iter().enumerate() {
            let a: Vec<f64> = open_vals.iter().map(|v| v[fi]).collect();
            let b: Vec<f64> = markov_vals.iter().map(|v| v[fi]).collect();
            let (ma, mb) = (mean(&a), mean(&b));
            // Paired across scenarios: the common noise is shared.
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let se = if d.len() > 1 {
                standard_error(&d)
            } else {
                0.0
            };
            let z = if se > 0.0 { (ma - mb) / se } else { 0.0 };
            max_z = max_z.max(z.abs());
            gaps.push(MarginalGap {
                time: t,
                name: (*name).to_string(),
                open_loop: ma,
                markovian: mb,
                combined_se: se,
                z,
            });
        }
        let mut open_pool = Vec::new();
        let mut markov_pool = Vec::new();
        for e in &open_run.ensembles {
            open_pool.extend_from_slice(&e.states[k]);
        }
        for e in &markov_run.ensembles {
            markov_pool.extend_from_slice(&e.states[k]);
        }
        pooled_w1.push(wasserstein1_1d(
            &MeasureView::Empirical {
                atoms: &open_pool,
                d: 1,
                weights: None,
            },
            &MeasureView::Empirical {
                atoms: &markov_pool,
                d: 1,
                weights: None,
            },
            1024,
        )?);
    }

    Ok(CompareReport {
        j_open: open_cost.j,
        se_open: open_cost.standard_error,
        j_markov: markov_cost.j,
        se_markov: markov_cost.standard_error,
        gap,
        gap_se,
        gaps,
        max_marginal_z: max_z,
        pooled_w1,
        compare_times: config
            .compare_nodes
            .iter()
            .map(|&k| problem.grid.node(k))
            .collect(),
        feasible_fraction: control.feasible_fraction(),
        incidents: control.incidents(),
        roxin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(value: f64) -> ControlGenerator {
        ControlGenerator::Schedule(Arc::new(move |_| value))
    }

    fn constant_cost_problem(
        f: f64,
        g: f64,
        grid: TimeGrid,
    ) -> ControlProblem {
        ControlProblem {
            action_space: ActionSpace::Interval { lo: -1.0, hi: 1.0 },
            drift: Arc::new(|_, _, _, a| a),
            sigma: Arc::new(|_, _, _, _| 1.0),
            gamma: Arc::new(|_, _, _| 0.5),
            running_cost: Arc::new(move |_, _, _, _| f),
            terminal_cost: Arc::new(move |_, _| g),
            initial: InitialLaw::standard_normal_1d(),
            grid,
        }
    }

    #[test]
    fn trivial_costs_are_recovered_exactly() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let run = run_weak_control(
            &constant_cost_problem(0.0, 1.0, grid),
            &schedule(0.0),
            200,
            4,
            11,
            0,
            0,
        )
        .unwrap();
        let report = evaluate_cost(&run, &constant_cost_problem(0.0, 1.0, grid)).unwrap();
        assert_eq!(report.j, 1.0);
        assert!(report.standard_error >= 0.0);

        let report = evaluate_cost(&run, &constant_cost_problem(1.0, 0.0, grid)).unwrap();
        assert!((report.j - 1.0).abs() < 1e-12, "J = {}", report.j);
        assert_eq!(report.max_terminal_cost, 0.0);
    }

    #[test]
    fn non_finite_costs_abort_with_location() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut problem = constant_cost_problem(0.0, 0.0, grid);
        problem.terminal_cost = Arc::new(|x, _| 1.0 / (x - x));
        let run = run_weak_control(&problem, &schedule(0.0), 50, 2, 12, 0, 0).unwrap();
        match evaluate_cost(&run, &problem) {
            Err(Error::NonFinite {
                source_kind, step, ..
            }) => {
                assert_eq!(source_kind, "terminal cost");
                assert_eq!(step, 10);
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn lq_uncontrolled_cost_matches_the_closed_form() {
        // dX = 0 dt + dW + dB, f = x^2, X0 ~ N(0,1):
        // Var(X_t) = 1 + 2t, J = int_0^1 (1 + 2t) dt = 2.
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let problem = ControlProblem::linear_quadratic(-4.0, 4.0, 1.0, 1.0, 1.0, grid);
        let run = run_weak_control(&problem, &schedule(0.0), 2000, 32, 13, 0, 0).unwrap();
        let report = evaluate_cost(&run, &problem).unwrap();
        assert!(
            (report.j - 2.0).abs() < 3.0 * report.standard_error + 0.03,
            "J = {} +- {}",
            report.j,
            report.standard_error
        );
        // Controls recorded and admissible.
        for ens in &run.ensembles {
            for row in &ens.controls {
                assert!(row.iter().all(|&a| a == 0.0));
            }
        }
    }

    #[test]
    fn feedback_noise_controls_are_admitted_into_the_space() {
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let mut problem = constant_cost_problem(0.0, 0.0, grid);
        problem.action_space = ActionSpace::Interval { lo: -0.5, hi: 0.5 };
        let generator = ControlGenerator::FeedbackPlusNoise {
            feedback: Arc::new(|_, x| -0.2 * x),
            noise_scale: 1.0,
        };
        let run = run_weak_control(&problem, &generator, 300, 3, 14, 0, 0).unwrap();
        let mut saturated = 0usize;
        for ens in &run.ensembles {
            for row in &ens.controls {
                for &a in row {
                    assert!((-0.5..=0.5).contains(&a));
                    if a == -0.5 || a == 0.5 {
                        saturated += 1;
                    }
                }
            }
        }
        // Unit noise against a +-0.5 interval saturates often.
        assert!(saturated > 100, "only {saturated} saturated draws");
    }

    #[test]
    fn convexity_check_passes_linear_and_flags_two_point_menus() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let battery = vec![
            (0.0, 0.0, MeasureSummary::default()),
            (0.5, -1.0, MeasureSummary::default()),
            (1.0, 2.0, MeasureSummary::default()),
        ];
        // Linear drift, uncontrolled sigma, convex cost: passes.
        let lq = ControlProblem::linear_quadratic(-2.0, 2.0, 1.0, 0.5, 1.0, grid);
        let report = check_roxin(&lq, &battery, 40).unwrap();
        assert!(report.passed(), "violations: {:?}", report.points);

        // Two-point action menu with b(a) = a: the midpoint drift 0 is not
        // realizable, so convexity fails.
        let mut two_point = ControlProblem::linear_quadratic(-1.0, 1.0, 1.0, 0.5, 1.0, grid);
        two_point.action_space = ActionSpace::Finite(vec![-1.0, 1.0]);
        two_point.running_cost = Arc::new(|_, _, _, _| 0.0);
        let report = check_roxin(&two_point, &battery, 40).unwrap();
        assert!(!report.passed());
        for p in &report.points {
            assert!(p.violations > 0, "point ({}, {}) saw none", p.t, p.x);
        }

        // The relaxed lift of the same menu mixes the two actions and
        // passes.
        let mut relaxed = two_point.clone();
        relaxed.action_space = ActionSpace::Simplex {
            base: vec![-1.0, 1.0],
        };
        let report = check_roxin(&relaxed, &battery, 40).unwrap();
        assert!(report.passed(), "violations: {:?}", report.points);
    }

    #[test]
    fn markovian_feedback_is_reproduced_by_the_projection() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let problem = ControlProblem::linear_quadratic(-3.0, 3.0, 0.8, 0.3, 1.0, grid);
        let generator = ControlGenerator::FeedbackPlusNoise {
            feedback: Arc::new(|_, x| 0.5 - 0.3 * x),
            noise_scale: 0.0,
        };
        let run = run_weak_control(&problem, &generator, 3000, 8, 15, 0, 0).unwrap();
        let control = project_control(&run, &problem, &ProjectionConfig::default()).unwrap();
        let summary = MeasureSummary::default();
        for x in [-1.2, -0.4, 0.0, 0.7, 1.3] {
            let a = control.action(&problem, 10, x, &summary, &[]).unwrap();
            let want = 0.5 - 0.3 * x;
            assert!((a - want).abs() < 0.05, "action({x}) = {a}, want {want}");
        }
        assert_eq!(control.incidents(), 0);
    }

    #[test]
    fn pure_randomization_projects_to_the_conditional_mean() {
        // alpha = xi ~ N(0,1) independent of the state; b(a) = a, so the
        // drift target at every x is E[xi] = 0 and the solved action is 0
        // up to kernel noise.
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let problem = ControlProblem::linear_quadratic(-4.0, 4.0, 1.0, 0.5, 1.0, grid);
        let generator = ControlGenerator::FeedbackPlusNoise {
            feedback: Arc::new(|_, _| 0.0),
            noise_scale: 1.0,
        };
        let run = run_weak_control(&problem, &generator, 4000, 8, 16, 0, 0).unwrap();
        let mut config = ProjectionConfig::default();
        config.max_samples_per_slice = 32_768;
        let control = project_control(&run, &problem, &config).unwrap();
        let summary = MeasureSummary::default();
        // Kernel-local CLT scale at the state spread of this run.
        let sd = 0.06;
        for x in [-1.0, 0.0, 1.0] {
            let a = control.action(&problem, 5, x, &summary, &[]).unwrap();
            assert!(a.abs() < 3.5 * sd, "action({x}) = {a}");
        }
    }

    #[test]
    fn relaxed_mixture_projects_to_its_barycenter() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut problem = ControlProblem::linear_quadratic(-1.0, 1.0, 1.0, 0.4, 1.0, grid);
        problem.action_space = ActionSpace::Simplex {
            base: vec![-1.0, 1.0],
        };
        let q = 0.7;
        let generator = ControlGenerator::Relaxed {
            actions: vec![-1.0, 1.0],
            weights: vec![1.0 - q, q],
        };
        let run = run_weak_control(&problem, &generator, 3000, 8, 17, 0, 0).unwrap();
        let control = project_control(&run, &problem, &ProjectionConfig::default()).unwrap();
        let summary = MeasureSummary::default();
        let want = 2.0 * q - 1.0;
        for x in [-0.8, 0.0, 0.8] {
            let a = control.action(&problem, 5, x, &summary, &[]).unwrap();
            assert!(
                (a - want).abs() < 0.08,
                "barycenter at {x}: {a}, want {want}"
            );
        }
    }

    #[test]
    fn randomized_lq_gap_equals_the_randomization_variance() {
        // alpha_t = xi fresh N(0,1) per step, b(a) = a, f = a^2 + x^2:
        // the Markovian projection drops the randomization (alpha_hat = 0),
        // marginals match, and J_open - J_markov = T * Var(xi) = 1.
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let problem = ControlProblem::linear_quadratic(-5.0, 5.0, 1.0, 1.0, 1.0, grid);
        let open_loop = ControlGenerator::FeedbackPlusNoise {
            feedback: Arc::new(|_, _| 0.0),
            noise_scale: 1.0,
        };
        let mut config = CompareConfig::new(800, 16, &grid);
        config.compare_nodes = vec![12, 25];
        let report = markovianize_and_compare(&problem, &open_loop, &config).unwrap();

        assert!(
            (report.gap - 1.0).abs() < 3.0 * report.gap_se + 0.02,
            "gap {} +- {}",
            report.gap,
            report.gap_se
        );
        // Cost monotonicity.
        assert!(
            report.j_markov <= report.j_open + 3.0 * report.gap_se,
            "J_markov {} vs J_open {}",
            report.j_markov,
            report.j_open
        );
        assert!(
            report.max_marginal_z < 3.5,
            "marginal z {}",
            report.max_marginal_z
        );
        assert!(
            report.feasible_fraction >= 0.99,
            "feasible fraction {}",
            report.feasible_fraction
        );
        assert!(report.roxin.passed());
    }

    #[test]
    fn markovian_input_comparison_is_idempotent() {
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let problem = ControlProblem::linear_quadratic(-3.0, 3.0, 0.8, 0.0, 1.0, grid);
        let open_loop = ControlGenerator::FeedbackPlusNoise {
            feedback: Arc::new(|_, x| -0.4 * x),
            noise_scale: 0.0,
        };
        let mut config = CompareConfig::new(800, 16, &grid);
        config.projection.regression.bandwidth_scale = 0.4;
        let report = markovianize_and_compare(&problem, &open_loop, &config).unwrap();
        let combined = (report.se_open.powi(2) + report.se_markov.powi(2)).sqrt();
        assert!(
            (report.j_open - report.j_markov).abs() <= 2.0 * combined + 0.01,
            "J_open {} vs J_markov {} (combined SE {})",
            report.j_open,
            report.j_markov,
            combined
        );
        for w1 in &report.pooled_w1 {
            assert!(w1 < &0.03, "pooled W1 {w1}");
        }
    }

    #[test]
    fn comparison_rejects_nonconvex_problems() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut problem = ControlProblem::linear_quadratic(-1.0, 1.0, 1.0, 0.5, 1.0, grid);
        problem.action_space = ActionSpace::Finite(vec![-1.0, 1.0]);
        problem.running_cost = Arc::new(|_, _, _, _| 0.0);
        let open_loop = ControlGenerator::Relaxed {
            actions: vec![-1.0, 1.0],
            weights: vec![0.5, 0.5],
        };
        let config = CompareConfig::new(100, 2, &grid);
        match markovianize_and_compare(&problem, &open_loop, &config) {
            Err(Error::InvalidParameter(msg)) => {
                assert!(msg.contains("violations"), "message: {msg}")
            }
            other => panic!("expected convexity rejection, got {other:?}"),
        }
    }
}
