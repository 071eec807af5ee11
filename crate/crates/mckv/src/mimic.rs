//! Markovian projection of randomized dynamics.
//!
//! A scalar diffusion whose drift and volatility are extra-random — adapted
//! processes carrying information beyond the current state, such as fresh
//! randomization noise or the particle's own driving Brownian path — can be
//! replaced by a Markovian system with the same time-marginals: condition
//! the observed drift and the observed squared volatility on the state (and
//! optionally on a finite feature vector of the cross-particle measure),
//! then re-simulate with the conditional expectations as coefficients.
//!
//! This module provides the sample container and harvesting, the kernel
//! regression fit (through [`crate::regression`]), the positive
//! semidefinite square root used to turn covariance estimates back into
//! volatility loadings, and [`run_mimicking_experiment`] — an end-to-end
//! pipeline that simulates an original randomized system, projects it,
//! re-simulates the projection on fresh and on matched common-noise
//! scenarios, and quantifies how well the marginal laws are reproduced.
//!
//! The common-noise loading is not regressed: it must already be a function
//! of `(t, measure, x)` and is passed through to the re-simulation as is.

use rayon::prelude::*;
use serde::Serialize;

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::{wasserstein1_1d, MeasureView};
use crate::numerics::{kahan_sum, mean, standard_error, symmetric_eigen};
use crate::particle::InitialLaw;
use crate::regression::{KernelSurface, RegressionConfig, SliceData};
use crate::rng::{auxiliary_stream, particle_stream, StreamRng};
use crate::scenario::Scenario;
use crate::testfn::{TestBasis, TestFunction};

/// Stream-id bit for per-particle randomization noise, distinct from the
/// idiosyncratic-increment streams (no high bits) and the initial-state
/// streams (bit 63).
const RANDOMIZATION_STREAM_BIT: u64 = 1 << 62;

/// Symmetry tolerance for covariance observations and [`psd_sqrt`] inputs.
const SYMMETRY_TOL: f64 = 1e-10;

/// One observation of the randomized coefficients at a time node.
#[derive(Debug, Clone)]
pub struct ProjectionSample {
    /// Time node the observation belongs to.
    pub t: f64,
    /// State, length `d`.
    pub x: Vec<f64>,
    /// Finite feature vector of the cross-particle measure at `t` (empty in
    /// classical conditioning).
    pub features: Vec<f64>,
    /// Observed drift value, length `d`.
    pub drift: Vec<f64>,
    /// Observed idiosyncratic covariance (sigma sigma^T), row-major `d*d`.
    pub sigma_sq: Vec<f64>,
    /// Scenario the observation came from.
    pub scenario_index: u64,
}

impl ProjectionSample {
    /// Validating constructor; the covariance observation must be symmetric
    /// and positive semidefinite.
    pub fn new(
        t: f64,
        x: Vec<f64>,
        features: Vec<f64>,
        drift: Vec<f64>,
        sigma_sq: Vec<f64>,
        scenario_index: u64,
    ) -> Result<Self> {
        let d = x.len();
        if drift.len() != d {
            return Err(Error::DimensionMismatch {
                context: "projection sample drift",
                expected: d,
                got: drift.len(),
            });
        }
        if sigma_sq.len() != d * d {
            return Err(Error::DimensionMismatch {
                context: "projection sample covariance",
                expected: d * d,
                got: sigma_sq.len(),
            });
        }
        let defect = symmetry_defect(&sigma_sq, d);
        if defect > SYMMETRY_TOL {
            return Err(Error::NotSymmetric {
                defect,
                tol: SYMMETRY_TOL,
            });
        }
        let (eigs, _) = symmetric_eigen(&sigma_sq, d);
        if eigs.iter().any(|&e| e < -SYMMETRY_TOL) {
            return Err(Error::invalid(
                "projection sample covariance is not positive semidefinite",
            ));
        }
        if !t.is_finite()
            || x.iter()
                .chain(&features)
                .chain(&drift)
                .chain(&sigma_sq)
                .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("projection sample has non-finite entries"));
        }
        Ok(ProjectionSample {
            t,
            x,
            features,
            drift,
            sigma_sq,
            scenario_index,
        })
    }
}

/// What the regression conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConditioningMode {
    /// Condition on the state alone; measure features are ignored.
    Classical,
    /// Condition on the state and on the measure feature vector.
    Conditional,
}

/// Finite feature map of a (scalar) measure: leading raw moments plus
/// optional pairings against a fixed test basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n_moments: usize,
    pub pairings: Option<TestBasis>,
}

impl FeatureMap {
    /// The default conditioning map: first four raw moments.
    pub fn moments(n: usize) -> Self {
        FeatureMap {
            n_moments: n,
            pairings: None,
        }
    }

    pub fn len(&self) -> usize {
        self.n_moments
            + self
                .pairings
                .as_ref()
                .map_or(0, |b| b.functions().len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Evaluate the map on a uniform particle cloud.
    pub fn eval_states(&self, states: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        let n = states.len().max(1) as f64;
        for p in 0..self.n_moments {
            out[p] = kahan_sum(states.iter().map(|&x| x.powi(p as i32 + 1))) / n;
        }
        if let Some(basis) = &self.pairings {
            for (j, phi) in basis.functions().iter().enumerate() {
                out[self.n_moments + j] = kahan_sum(
                    states
                        .iter()
                        .map(|&x| phi.value(std::slice::from_ref(&x))),
                ) / n;
            }
        }
    }
}

/// Fitted conditional-expectation surfaces for drift and squared
/// volatility, one regressor per time node.
#[derive(Debug)]
pub struct ProjectedCoefficients {
    surface: KernelSurface,
    pub grid: TimeGrid,
    pub mode: ConditioningMode,
    pub n_features: usize,
    /// Training sample count per node (0 marks an empty, fallback-served node).
    pub slice_counts: Vec<usize>,
}

impl ProjectedCoefficients {
    /// Estimated `(drift, sigma^2)` per query, written as consecutive pairs
    /// into `out` (`2 * queries.len()` values). `features` is the shared
    /// measure feature vector of the batch (empty in classical mode).
    pub fn drift_and_sigma_sq_batch(
        &self,
        node: usize,
        queries: &[f64],
        features: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        self.surface.evaluate_batch(node, queries, features, out)
    }

    /// Single-query convenience for [`Self::drift_and_sigma_sq_batch`].
    pub fn drift_and_sigma_sq(&self, node: usize, x: f64, features: &[f64]) -> Result<(f64, f64)> {
        let v = self.surface.evaluate(node, x, features)?;
        Ok((v[0], v[1]))
    }

    pub fn surface(&self) -> &KernelSurface {
        &self.surface
    }

    /// Plot-ready lookup table: each fitted node sampled at `n_x` evenly
    /// spaced states across its training range, features pinned at the
    /// node's training means. Columns:
    /// `t,x,feat_1..feat_F,bhat_1,ahat_11`.
    pub fn lookup_table_csv(&self, n_x: usize) -> Result<String> {
        let mut out = String::from("t,x");
        for f in 0..self.n_features {
            out.push_str(&format!(",feat_{}", f + 1));
        }
        out.push_str(",bhat_1,ahat_11\n");
        let mut row = vec![0.0; 2];
        for k in 0..=self.grid.n_steps() {
            let (lo, hi) = self
                .surface
                .slice_range(k)
                .ok_or_else(|| Error::invalid("unfitted slice in lookup table"))?;
            let feats = self
                .surface
                .slice_feature_means(k)
                .ok_or_else(|| Error::invalid("unfitted slice in lookup table"))?;
            let t = self.grid.node(k);
            for j in 0..n_x {
                let x = if n_x == 1 {
                    0.5 * (lo + hi)
                } else {
                    lo + (hi - lo) * j as f64 / (n_x - 1) as f64
                };
                self.surface.evaluate_batch(
                    k,
                    std::slice::from_ref(&x),
                    &feats,
                    &mut row,
                )?;
                out.push_str(&format!("{t},{x}"));
                for f in &feats {
                    out.push_str(&format!(",{f}"));
                }
                out.push_str(&format!(",{},{}\n", row[0], row[1]));
            }
        }
        Ok(out)
    }
}

/// Fit per-node kernel regressions of drift and squared volatility on
/// `(x, features)` (conditional mode) or on `x` alone (classical mode).
///
/// Every populated node needs at least 100 samples; nodes with no samples
/// at all are served by the nearest populated node and recorded as fit
/// warnings on the surface.
pub fn markovian_projection(
    samples: &[ProjectionSample],
    grid: &TimeGrid,
    mode: ConditioningMode,
    regression: &RegressionConfig,
) -> Result<ProjectedCoefficients> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no projection samples".into()));
    }
    let d = samples[0].x.len();
    if d != 1 {
        return Err(Error::ScalarOnly("markovian_projection"));
    }
    let n_feat_in = samples[0].features.len();
    let n_features = match mode {
        ConditioningMode::Classical => 0,
        ConditioningMode::Conditional => n_feat_in,
    };
    let dt = grid.dt();
    let n_nodes = grid.n_steps() + 1;
    let mut slices = vec![SliceData::default(); n_nodes];
    for s in samples {
        if s.x.len() != d || s.drift.len() != d || s.sigma_sq.len() != d * d {
            return Err(Error::invalid("inconsistent sample dimensions"));
        }
        if s.features.len() != n_feat_in {
            return Err(Error::invalid("inconsistent sample feature lengths"));
        }
        if s.sigma_sq[0] < -SYMMETRY_TOL {
            return Err(Error::invalid(
                "negative squared-volatility observation",
            ));
        }
        let k = (s.t / dt).round() as usize;
        if k >= n_nodes || (s.t - grid.node(k)).abs() > 1e-9 * grid.t_end().max(1.0) {
            return Err(Error::invalid(format!(
                "sample time {} is not a grid node",
                s.t
            )));
        }
        let slice = &mut slices[k];
        slice.x.push(s.x[0]);
        slice.responses.push(s.drift[0]);
        slice.responses.push(s.sigma_sq[0].max(0.0));
        if mode == ConditioningMode::Conditional {
            slice.features.extend_from_slice(&s.features);
        }
    }
    let slice_counts: Vec<usize> = slices.iter().map(|s| s.n_samples()).collect();
    for (k, &count) in slice_counts.iter().enumerate() {
        if count > 0 && count < 100 {
            return Err(Error::invalid(format!(
                "node {k} has only {count} samples; populated nodes need at least 100"
            )));
        }
    }
    let surface = KernelSurface::fit(&slices, n_features, 2, regression)?;
    Ok(ProjectedCoefficients {
        surface,
        grid: *grid,
        mode,
        n_features,
        slice_counts,
    })
}

/// Symmetric positive semidefinite square root with clip accounting.
#[derive(Debug, Clone)]
pub struct PsdSqrtOutcome {
    /// Row-major symmetric PSD square root.
    pub root: Vec<f64>,
    /// Total magnitude of negative eigenvalues clipped to zero.
    pub clipped: f64,
}

/// Symmetric square root of a symmetric matrix, clipping negative
/// eigenvalues to zero and reporting the clipped magnitude. Rejects inputs
/// whose asymmetry exceeds `1e-10` (scaled by the matrix magnitude).
pub fn psd_sqrt(a: &[f64], d: usize) -> Result<PsdSqrtOutcome> {
    if a.len() != d * d || d == 0 {
        return Err(Error::DimensionMismatch {
            context: "psd_sqrt input",
            expected: d * d,
            got: a.len(),
        });
    }
    let scale = a.iter().fold(0.0_f64, |m, &v| m.max(v.abs())).max(1.0);
    let defect = symmetry_defect(a, d);
    let tol = SYMMETRY_TOL * scale;
    if defect > tol {
        return Err(Error::NotSymmetric { defect, tol });
    }
    // Work on the exactly symmetric part.
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (a[i * d + j] + a[j * d + i]);
        }
    }
    let (eigs, vecs) = symmetric_eigen(&sym, d);
    let mut clipped = 0.0;
    let roots: Vec<f64> = eigs
        .iter()
        .map(|&e| {
            if e < 0.0 {
                clipped += -e;
                0.0
            } else {
                e.sqrt()
            }
        })
        .collect();
    // root = V diag(sqrt(e)) V^T, eigenvectors column-major in `vecs`.
    let mut root = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut v = 0.0;
            for l in 0..d {
                v += vecs[i + d * l] * roots[l] * vecs[j + d * l];
            }
            root[i * d + j] = v;
            root[j * d + i] = v;
        }
    }
    Ok(PsdSqrtOutcome { root, clipped })
}

fn symmetry_defect(a: &[f64], d: usize) -> f64 {
    let mut defect = 0.0_f64;
    for i in 0..d {
        for j in (i + 1)..d {
            defect = defect.max((a[i * d + j] - a[j * d + i]).abs());
        }
    }
    defect
}

/// A scalar system whose coefficients may carry randomness beyond the
/// state: fresh per-step drift noise and/or volatility read off the
/// particle's own accumulated idiosyncratic Brownian path. The base field
/// supplies the Markovian parts, including the common-noise loading (which
/// is never randomized here).
#[derive(Debug, Clone)]
pub struct RandomizedSystem {
    pub base: CoefficientField,
    /// Adds `drift_noise * xi` to the drift, `xi` a fresh standard normal
    /// per particle per node.
    pub drift_noise: f64,
    /// Replace the base volatility with `|W^i_t|`, the absolute value of
    /// the particle's own accumulated idiosyncratic noise.
    pub own_noise_volatility: bool,
    pub initial: InitialLaw,
}

impl RandomizedSystem {
    /// A system with no extra randomness (the projection should act as the
    /// identity on it, up to regression error).
    pub fn markovian(base: CoefficientField, initial: InitialLaw) -> Self {
        RandomizedSystem {
            base,
            drift_noise: 0.0,
            own_noise_volatility: false,
            initial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.dim() != 1 {
            return Err(Error::ScalarOnly("randomized system simulation"));
        }
        self.initial.validate()?;
        if self.initial.dim() != 1 {
            return Err(Error::DimensionMismatch {
                context: "randomized system initial law",
                expected: 1,
                got: self.initial.dim(),
            });
        }
        if !(self.drift_noise.is_finite() && self.drift_noise >= 0.0) {
            return Err(Error::invalid("drift_noise must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Everything [`run_mimicking_experiment`] needs besides the system.
#[derive(Debug, Clone)]
pub struct MimickingConfig {
    pub n_particles: usize,
    pub n_scenarios: usize,
    pub grid: TimeGrid,
    pub master_seed: u64,
    pub first_scenario: u64,
    pub mode: ConditioningMode,
    pub feature_map: FeatureMap,
    /// Nodes at which marginals are compared.
    pub compare_nodes: Vec<usize>,
    /// Cap on pooled training samples per node (subsampled evenly across
    /// particles within every scenario).
    pub max_samples_per_slice: usize,
    pub regression: RegressionConfig,
    /// Also fit an enriched feature map and report how much the drift
    /// surface moves — a sensitivity check on the finite feature map.
    pub enrichment_probe: bool,
}

impl MimickingConfig {
    pub fn new(n_particles: usize, n_scenarios: usize, grid: TimeGrid) -> Self {
        let n = grid.n_steps();
        MimickingConfig {
            n_particles,
            n_scenarios,
            grid,
            master_seed: 2718,
            first_scenario: 0,
            mode: ConditioningMode::Conditional,
            feature_map: FeatureMap::moments(4),
            compare_nodes: vec![n / 4, n / 2, n],
            max_samples_per_slice: 16_384,
            regression: RegressionConfig::default(),
            enrichment_probe: false,
        }
    }
}

/// One functional of the battery compared between original and mimicked runs.
#[derive(Debug, Clone, Serialize)]
pub struct FunctionalGap {
    pub time: f64,
    pub name: String,
    pub original: f64,
    pub mimicked: f64,
    pub combined_se: f64,
    pub z: f64,
}

/// Outcome of the end-to-end mimicking comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub compare_times: Vec<f64>,
    /// Per compare node: 1-Wasserstein distance between the original and
    /// freshly re-simulated marginals, pooled across scenarios.
    pub pooled_w1: Vec<f64>,
    /// Per compare node: mean over matched scenarios of the per-scenario
    /// conditional-marginal 1-Wasserstein distance.
    pub per_scenario_w1: Vec<f64>,
    pub functional_gaps: Vec<FunctionalGap>,
    pub max_functional_z: f64,
    /// Queries outside the training state range during re-simulation.
    pub extrapolations: u64,
    pub fit_warnings: Vec<String>,
    /// Total negative squared-volatility mass clipped during re-simulation.
    pub sigma_clip_total: f64,
    /// Per compare node: z-score of the mean drift regression residual at
    /// the training points (should be statistically zero).
    pub tower_z: Vec<f64>,
    /// Max drift-surface movement when the feature map is enriched
    /// (`None` unless the probe was requested).
    pub enrichment_sensitivity: Option<f64>,
}

/// Per-scenario output of the original system: strided training samples at
/// every node, full snapshots at compare nodes.
struct OriginalScenarioData {
    node_x: Vec<Vec<f64>>,
    node_drift: Vec<Vec<f64>>,
    node_sigma_sq: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
    probe_features: Option<Vec<Vec<f64>>>,
    compare_states: Vec<Vec<f64>>,
}

fn simulate_original(
    system: &RandomizedSystem,
    scenario: &Scenario,
    master_seed: u64,
    w_salt: u32,
    n_particles: usize,
    harvest_stride: usize,
    feature_map: &FeatureMap,
    probe_map: Option<&FeatureMap>,
    compare_nodes: &[usize],
) -> Result<OriginalScenarioData> {
    let grid = *scenario.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let sidx = scenario.scenario_index();

    let mut cur = vec![0.0; n_particles];
    for (i, x) in cur.iter_mut().enumerate() {
        let mut rng = StreamRng::for_stream(master_seed, sidx, auxiliary_stream(w_salt, i));
        system.initial.sample(&mut rng, std::slice::from_mut(x));
    }
    let mut w_rngs: Vec<StreamRng> = (0..n_particles)
        .map(|i| StreamRng::for_stream(master_seed, sidx, particle_stream(w_salt, i)))
        .collect();
    let mut xi_rngs: Vec<StreamRng> = if system.drift_noise > 0.0 {
        (0..n_particles)
            .map(|i| {
                StreamRng::for_stream(
                    master_seed,
                    sidx,
                    RANDOMIZATION_STREAM_BIT | particle_stream(w_salt, i),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut own_w = vec![0.0_f64; n_particles];
    let mut next = vec![0.0; n_particles];

    let mut data = OriginalScenarioData {
        node_x: Vec::with_capacity(n_steps + 1),
        node_drift: Vec::with_capacity(n_steps + 1),
        node_sigma_sq: Vec::with_capacity(n_steps + 1),
        features: Vec::with_capacity(n_steps + 1),
        probe_features: probe_map.map(|_| Vec::with_capacity(n_steps + 1)),
        compare_states: vec![Vec::new(); compare_nodes.len()],
    };

    for k in 0..=n_steps {
        let t = grid.node(k);
        let mut feats = vec![0.0; feature_map.len()];
        feature_map.eval_states(&cur, &mut feats);
        if let (Some(map), Some(store)) = (probe_map, data.probe_features.as_mut()) {
            let mut pf = vec![0.0; map.len()];
            map.eval_states(&cur, &mut pf);
            store.push(pf);
        }
        data.features.push(feats);

        let n_kept = (n_particles + harvest_stride - 1) / harvest_stride;
        let mut xs = Vec::with_capacity(n_kept);
        let mut bs = Vec::with_capacity(n_kept);
        let mut ss = Vec::with_capacity(n_kept);

        let view = MeasureView::Empirical {
            atoms: &cur,
            d: 1,
            weights: None,
        };
        let prepared = system.base.prepare(t, &view, Some((scenario, k)));
        let db = if k < n_steps {
            scenario.increment(k)[0]
        } else {
            0.0
        };
        for i in 0..n_particles {
            let x = cur[i];
            let (b0, s0, g0) = prepared.eval_1d(x);
            let b = if system.drift_noise > 0.0 {
                b0 + system.drift_noise * xi_rngs[i].next_standard_normal()
            } else {
                b0
            };
            let s = if system.own_noise_volatility {
                own_w[i].abs()
            } else {
                s0
            };
            if i % harvest_stride == 0 {
                xs.push(x);
                bs.push(b);
                ss.push(s * s);
            }
            if k < n_steps {
                let dw = sqrt_dt * w_rngs[i].next_standard_normal();
                let x_new = x + b * dt + s * dw + g0 * db;
                if !x_new.is_finite() {
                    return Err(Error::NonFinite {
                        source_kind: "randomized-system state",
                        step: k,
                        t,
                        particle: i,
                    });
                }
                next[i] = x_new;
                own_w[i] += dw;
            }
        }
        drop(prepared);
        data.node_x.push(xs);
        data.node_drift.push(bs);
        data.node_sigma_sq.push(ss);
        if let Some(pos) = compare_nodes.iter().position(|&c| c == k) {
            data.compare_states[pos] = cur.clone();
        }
        if k < n_steps {
            std::mem::swap(&mut cur, &mut next);
        }
    }
    Ok(data)
}

/// Per-scenario output of the mimicked system.
struct MimickedScenarioData {
    compare_states: Vec<Vec<f64>>,
    sigma_clip: f64,
}

fn simulate_mimicked(
    projected: &ProjectedCoefficients,
    gamma_source: &CoefficientField,
    initial: &InitialLaw,
    scenario: &Scenario,
    master_seed: u64,
    w_salt: u32,
    n_particles: usize,
    feature_map: &FeatureMap,
    compare_nodes: &[usize],
) -> Result<MimickedScenarioData> {
    let grid = *scenario.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let sidx = scenario.scenario_index();

    let mut cur = vec![0.0; n_particles];
    for (i, x) in cur.iter_mut().enumerate() {
        let mut rng = StreamRng::for_stream(master_seed, sidx, auxiliary_stream(w_salt, i));
        initial.sample(&mut rng, std::slice::from_mut(x));
    }
    let mut w_rngs: Vec<StreamRng> = (0..n_particles)
        .map(|i| StreamRng::for_stream(master_seed, sidx, particle_stream(w_salt, i)))
        .collect();
    let mut next = vec![0.0; n_particles];
    let mut coeffs = vec![0.0; 2 * n_particles];
    let mut sigma_clip = 0.0;
    let mut data = MimickedScenarioData {
        compare_states: vec![Vec::new(); compare_nodes.len()],
        sigma_clip: 0.0,
    };

    for k in 0..=n_steps {
        if let Some(pos) = compare_nodes.iter().position(|&c| c == k) {
            data.compare_states[pos] = cur.clone();
        }
        if k == n_steps {
            break;
        }
        let t = grid.node(k);
        let feats = match projected.mode {
            ConditioningMode::Classical => Vec::new(),
            ConditioningMode::Conditional => {
                let mut f = vec![0.0; feature_map.len()];
                feature_map.eval_states(&cur, &mut f);
                f
            }
        };
        projected.drift_and_sigma_sq_batch(k, &cur, &feats, &mut coeffs)?;
        let view = MeasureView::Empirical {
            atoms: &cur,
            d: 1,
            weights: None,
        };
        let prepared = gamma_source.prepare(t, &view, Some((scenario, k)));
        let db = scenario.increment(k)[0];
        for i in 0..n_particles {
            let x = cur[i];
            let b = coeffs[2 * i];
            let mut s2 = coeffs[2 * i + 1];
            if s2 < 0.0 {
                sigma_clip += -s2;
                s2 = 0.0;
            }
            let (_, _, g) = prepared.eval_1d(x);
            let x_new =
                x + b * dt + s2.sqrt() * sqrt_dt * w_rngs[i].next_standard_normal() + g * db;
            if !x_new.is_finite() {
                return Err(Error::NonFinite {
                    source_kind: "mimicked state",
                    step: k,
                    t,
                    particle: i,
                });
            }
            next[i] = x_new;
        }
        drop(prepared);
        std::mem::swap(&mut cur, &mut next);
    }
    data.sigma_clip = sigma_clip;
    Ok(data)
}

fn battery_names() -> [&'static str; 6] {
    [
        "E[X]",
        "E[X^2]",
        "E[bump(X)]",
        "E[X*mean]",
        "E[X^2*mean]",
        "E[bump(X)*mean]",
    ]
}

fn battery_values(states: &[f64], bump: &TestFunction) -> [f64; 6] {
    let n = states.len() as f64;
    let m = kahan_sum(states.iter().copied()) / n;
    let m2 = kahan_sum(states.iter().map(|&x| x * x)) / n;
    let mb = kahan_sum(
        states
            .iter()
            .map(|&x| bump.value(std::slice::from_ref(&x))),
    ) / n;
    [m, m2, mb, m * m, m2 * m, mb * m]
}

/// End-to-end projection pipeline: simulate the randomized original across
/// scenarios, fit the projection, re-simulate the Markovian system on fresh
/// scenarios (for law comparison) and on the original scenarios with fresh
/// idiosyncratic noise (for conditional-marginal comparison), and report
/// marginal 1-Wasserstein gaps, a joint functional battery, and regression
/// diagnostics.
pub fn run_mimicking_experiment(
    system: &RandomizedSystem,
    config: &MimickingConfig,
) -> Result<(ComparisonReport, ProjectedCoefficients)> {
    system.validate()?;
    if config.n_particles == 0 || config.n_scenarios == 0 {
        return Err(Error::invalid("need at least one particle and scenario"));
    }
    if config.compare_nodes.is_empty()
        || config
            .compare_nodes
            .iter()
            .any(|&k| k > config.grid.n_steps())
    {
        return Err(Error::invalid("compare nodes out of range or empty"));
    }
    let total = config.n_particles * config.n_scenarios;
    let harvest_stride = (total + config.max_samples_per_slice - 1)
        / config.max_samples_per_slice.max(1);
    let harvest_stride = harvest_stride.max(1);

    let probe_map = if config.enrichment_probe {
        let basis = TestBasis::new(vec![
            TestFunction::smooth_bump(vec![-1.0], 1.5)?,
            TestFunction::smooth_bump(vec![0.0], 2.0)?,
            TestFunction::smooth_bump(vec![1.0], 1.5)?,
        ])?;
        Some(FeatureMap {
            n_moments: config.feature_map.n_moments,
            pairings: Some(basis),
        })
    } else {
        None
    };

    // 1. Original runs, parallel across scenarios, assembled in index order.
    let originals: Result<Vec<OriginalScenarioData>> = (0..config.n_scenarios as u64)
        .into_par_iter()
        .map(|offset| {
            let scenario = Scenario::generate(
                config.master_seed,
                config.first_scenario + offset,
                config.grid,
                1,
            )?;
            simulate_original(
                system,
                &scenario,
                config.master_seed,
                0,
                config.n_particles,
                harvest_stride,
                &config.feature_map,
                probe_map.as_ref(),
                &config.compare_nodes,
            )
        })
        .collect();
    let originals = originals?;

    // 2. Fit the projection.
    let n_nodes = config.grid.n_steps() + 1;
    let assemble = |use_probe: bool| -> Vec<SliceData> {
        let mut slices = vec![SliceData::default(); n_nodes];
        for orig in &originals {
            for k in 0..n_nodes {
                let slice = &mut slices[k];
                slice.x.extend_from_slice(&orig.node_x[k]);
                for (b, s2) in orig.node_drift[k].iter().zip(&orig.node_sigma_sq[k]) {
                    slice.responses.push(*b);
                    slice.responses.push(*s2);
                }
                if config.mode == ConditioningMode::Conditional {
                    let feats = if use_probe {
                        &orig.probe_features.as_ref().expect("probe harvested")[k]
                    } else {
                        &orig.features[k]
                    };
                    for _ in 0..orig.node_x[k].len() {
                        slice.features.extend_from_slice(feats);
                    }
                }
            }
        }
        slices
    };
    let n_features = match config.mode {
        ConditioningMode::Classical => 0,
        ConditioningMode::Conditional => config.feature_map.len(),
    };
    let surface = KernelSurface::fit(&assemble(false), n_features, 2, &config.regression)?;
    let fit_warnings = surface.warnings().to_vec();
    let slice_counts = (0..n_nodes)
        .map(|k| surface.slice_sample_count(k).unwrap_or(0))
        .collect();
    let projected = ProjectedCoefficients {
        surface,
        grid: config.grid,
        mode: config.mode,
        n_features,
        slice_counts,
    };

    // 3. Tower diagnostic: mean drift residual at training points, per
    // compare node, grouped per scenario so each batch shares features.
    let mut tower_z = Vec::with_capacity(config.compare_nodes.len());
    for &k in &config.compare_nodes {
        let mut residuals = Vec::new();
        let mut buf: Vec<f64> = Vec::new();
        for orig in &originals {
            let xs = &orig.node_x[k];
            if xs.is_empty() {
                continue;
            }
            buf.resize(2 * xs.len(), 0.0);
            let feats: &[f64] = match config.mode {
                ConditioningMode::Classical => &[],
                ConditioningMode::Conditional => &orig.features[k],
            };
            projected.drift_and_sigma_sq_batch(k, xs, feats, &mut buf)?;
            for (i, b_obs) in orig.node_drift[k].iter().enumerate() {
                residuals.push(b_obs - buf[2 * i]);
            }
        }
        let se = standard_error(&residuals);
        tower_z.push(if se > 0.0 { mean(&residuals) / se } else { 0.0 });
    }

    // 4. Enrichment probe: refit with extra pairing features and measure
    // how far the drift surface moves on a state grid.
    let enrichment_sensitivity = if let Some(ref pmap) = probe_map {
        let probe_surface =
            KernelSurface::fit(&assemble(true), pmap.len(), 2, &config.regression)?;
        let mut worst = 0.0_f64;
        let mut main_out = vec![0.0; 2];
        let mut probe_out = vec![0.0; 2];
        for &k in &config.compare_nodes {
            let (lo, hi) = projected
                .surface
                .slice_range(k)
                .ok_or_else(|| Error::invalid("unfitted compare node"))?;
            let main_feats = projected
                .surface
                .slice_feature_means(k)
                .unwrap_or_default();
            let probe_feats = probe_surface.slice_feature_means(k).unwrap_or_default();
            for j in 0..21 {
                let x = lo + (hi - lo) * j as f64 / 20.0;
                projected.surface.evaluate_batch(
                    k,
                    std::slice::from_ref(&x),
                    &main_feats,
                    &mut main_out,
                )?;
                probe_surface.evaluate_batch(
                    k,
                    std::slice::from_ref(&x),
                    &probe_feats,
                    &mut probe_out,
                )?;
                worst = worst.max((main_out[0] - probe_out[0]).abs());
            }
        }
        Some(worst)
    } else {
        None
    };

    // 5. Re-simulations: matched scenarios (same common noise, fresh
    // idiosyncratic noise) and fresh scenarios.
    projected.surface.reset_extrapolation_count();
    let matched: Result<Vec<MimickedScenarioData>> = (0..config.n_scenarios as u64)
        .into_par_iter()
        .map(|offset| {
            let scenario = Scenario::generate(
                config.master_seed,
                config.first_scenario + offset,
                config.grid,
                1,
            )?;
            simulate_mimicked(
                &projected,
                &system.base,
                &system.initial,
                &scenario,
                config.master_seed,
                1,
                config.n_particles,
                &config.feature_map,
                &config.compare_nodes,
            )
        })
        .collect();
    let matched = matched?;
    let fresh: Result<Vec<MimickedScenarioData>> = (0..config.n_scenarios as u64)
        .into_par_iter()
        .map(|offset| {
            let scenario = Scenario::generate(
                config.master_seed,
                config.first_scenario + config.n_scenarios as u64 + offset,
                config.grid,
                1,
            )?;
            simulate_mimicked(
                &projected,
                &system.base,
                &system.initial,
                &scenario,
                config.master_seed,
                2,
                config.n_particles,
                &config.feature_map,
                &config.compare_nodes,
            )
        })
        .collect();
    let fresh = fresh?;

    // 6. Comparisons.
    let bump = TestFunction::smooth_bump(vec![0.0], 2.0)?;
    let mut pooled_w1 = Vec::new();
    let mut per_scenario_w1 = Vec::new();
    let mut functional_gaps = Vec::new();
    let mut max_z = 0.0_f64;
    for (j, &k) in config.compare_nodes.iter().enumerate() {
        let t = config.grid.node(k);
        let mut orig_pool = Vec::with_capacity(total);
        let mut fresh_pool = Vec::with_capacity(total);
        for orig in &originals {
            orig_pool.extend_from_slice(&orig.compare_states[j]);
        }
        for run in &fresh {
            fresh_pool.extend_from_slice(&run.compare_states[j]);
        }
        pooled_w1.push(wasserstein1_1d(
            &MeasureView::Empirical {
                atoms: &orig_pool,
                d: 1,
                weights: None,
            },
            &MeasureView::Empirical {
                atoms: &fresh_pool,
                d: 1,
                weights: None,
            },
            2048,
        )?);
        let per_scenario: Vec<f64> = originals
            .iter()
            .zip(&matched)
            .map(|(o, m)| {
                wasserstein1_1d(
                    &MeasureView::Empirical {
                        atoms: &o.compare_states[j],
                        d: 1,
                        weights: None,
                    },
                    &MeasureView::Empirical {
                        atoms: &m.compare_states[j],
                        d: 1,
                        weights: None,
                    },
                    512,
                )
            })
            .collect::<Result<Vec<f64>>>()?;
        per_scenario_w1.push(mean(&per_scenario));

        let orig_vals: Vec<[f64; 6]> = originals
            .iter()
            .map(|o| battery_values(&o.compare_states[j], &bump))
            .collect();
        let fresh_vals: Vec<[f64; 6]> = fresh
            .iter()
            .map(|f| battery_values(&f.compare_states[j], &bump))
            .collect();
        for (fi, name) in battery_names().iter().enumerate() {
            let a: Vec<f64> = orig_vals.iter().map(|v| v[fi]).collect();
            let b: Vec<f64> = fresh_vals.iter().map(|v| v[fi]).collect();
            let (ma, mb) = (mean(&a), mean(&b));
            let se = (standard_error(&a).powi(2) + standard_error(&b).powi(2)).sqrt();
            let z = if se > 0.0 { (ma - mb) / se } else { 0.0 };
            max_z = max_z.max(z.abs());
            functional_gaps.push(FunctionalGap {
                time: t,
                name: (*name).to_string(),
                original: ma,
                mimicked: mb,
                combined_se: se,
                z,
            });
        }
    }

    let sigma_clip_total = kahan_sum(
        matched
            .iter()
            .map(|m| m.sigma_clip)
            .chain(fresh.iter().map(|f| f.sigma_clip)),
    );
    let report = ComparisonReport {
        compare_times: config
            .compare_nodes
            .iter()
            .map(|&k| config.grid.node(k))
            .collect(),
        pooled_w1,
        per_scenario_w1,
        functional_gaps,
        max_functional_z: max_z,
        extrapolations: projected.surface.extrapolation_count(),
        fit_warnings,
        sigma_clip_total,
        tower_z,
        enrichment_sensitivity,
    };
    Ok((report, projected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_sqrt_identity_and_diagonal() {
        let id = psd_sqrt(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        for (got, want) in id.root.iter().zip(&[1.0, 0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(id.clipped, 0.0);
        let diag = psd_sqrt(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
        assert!((diag.root[0] - 2.0).abs() < 1e-12);
        assert!((diag.root[3] - 3.0).abs() < 1e-12);
        assert!(diag.root[1].abs() < 1e-12 && diag.root[2].abs() < 1e-12);
    }

    #[test]
    fn psd_sqrt_squares_back_to_random_spd_inputs() {
        let mut rng = StreamRng::new(31);
        for _ in 0..100 {
            let d = 3;
            let q: Vec<f64> = (0..d * d).map(|_| rng.next_standard_normal()).collect();
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut v = 0.0;
                    for l in 0..d {
                        v += q[l * d + i] * q[l * d + j];
                    }
                    m[i * d + j] = v;
                }
            }
            let out = psd_sqrt(&m, d).unwrap();
            assert_eq!(out.clipped, 0.0);
            let mut sq = vec![0.0; d * d];
            crate::numerics::mat_mul(&out.root, &out.root, d, &mut sq);
            let frob: f64 = sq
                .iter()
                .zip(&m)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(frob < 1e-10, "frobenius gap {frob}");
        }
    }

    #[test]
    fn psd_sqrt_clips_negative_eigenvalues_and_rejects_asymmetry() {
        // Symmetric with eigenvalues {1, -0.1}.
        let (c, s) = (0.8, 0.6);
        let (l1, l2) = (1.0, -0.1);
        let a = [
            c * c * l1 + s * s * l2,
            c * s * (l1 - l2),
            c * s * (l1 - l2),
            s * s * l1 + c * c * l2,
        ];
        let out = psd_sqrt(&a, 2).unwrap();
        assert!((out.clipped - 0.1).abs() < 1e-12, "clipped {}", out.clipped);
        let (eigs, _) = symmetric_eigen(&out.root, 2);
        assert!(eigs.iter().all(|&e| e >= -1e-12));

        let bad = [1.0, 0.5, 0.5 + 1e-6, 1.0];
        match psd_sqrt(&bad, 2) {
            Err(Error::NotSymmetric { .. }) => {}
            other => panic!("expected symmetry rejection, got {other:?}"),
        }
    }

    /// Build samples on one node from a closure; states uniform on [-2, 2].
    fn synthetic_samples(
        n: usize,
        t: f64,
        seed: u64,
        mut f: impl FnMut(&mut StreamRng, f64) -> (Vec<f64>, f64, f64),
    ) -> Vec<ProjectionSample> {
        let mut rng = StreamRng::new(seed);
        (0..n)
            .map(|i| {
                let x = rng.next_uniform_in(-2.0, 2.0);
                let (features, b, s2) = f(&mut rng, x);
                ProjectionSample::new(t, vec![x], features, vec![b], vec![s2], i as u64)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn projection_reproduces_measurable_drift_of_state_and_feature() {
        // b = 2x + 0.5*feature with a live feature; no extra noise.
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let mut samples = synthetic_samples(4000, 0.0, 41, |rng, x| {
            let feat = rng.next_uniform_in(-1.0, 1.0);
            (vec![feat], 2.0 * x + 0.5 * feat, 1.0)
        });
        samples.extend(synthetic_samples(4000, 1.0, 42, |rng, x| {
            let feat = rng.next_uniform_in(-1.0, 1.0);
            (vec![feat], 2.0 * x + 0.5 * feat, 1.0)
        }));
        let projected = markovian_projection(
            &samples,
            &grid,
            ConditioningMode::Conditional,
            &RegressionConfig::default(),
        )
        .unwrap();
        for (x, feat) in [(-1.0, 0.5), (0.0, -0.5), (1.2, 0.0), (0.4, 0.8)] {
            let (b, s2) = projected.drift_and_sigma_sq(0, x, &[feat]).unwrap();
            let want = 2.0 * x + 0.5 * feat;
            assert!(
                (b - want).abs() < 0.05 * want.abs().max(1.0),
                "b({x},{feat}) = {b}, want {want}"
            );
            assert!((s2 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_of_independent_drift_noise_is_the_constant() {
        // b = c + xi with xi ~ N(0,1) independent of x: the conditional
        // mean is c; the estimate fluctuates at the kernel-local CLT scale.
        let c = 2.0;
        let n = 5000;
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let samples = synthetic_samples(n, 0.0, 43, |rng, _| {
            (Vec::new(), c + rng.next_standard_normal(), 1.0)
        });
        let projected = markovian_projection(
            &samples,
            &grid,
            ConditioningMode::Classical,
            &RegressionConfig::default(),
        )
        .unwrap();
        // Kernel-local CLT: var ~ R(K) / (n h f(x)), R(K) = 1/(2 sqrt(pi)),
        // f uniform on [-2,2] = 0.25, Silverman h on std 1.155.
        let h = 1.06 * (4.0 / 12.0f64).sqrt() * (n as f64).powf(-0.2);
        let sd = (0.2821 / (n as f64 * h * 0.25)).sqrt();
        for x in [-1.5, -0.7, 0.0, 0.7, 1.5] {
            let (b, _) = projected.drift_and_sigma_sq(0, x, &[]).unwrap();
            assert!(
                (b - c).abs() < 4.0 * sd,
                "b({x}) = {b}, want {c} +- {}",
                4.0 * sd
            );
        }
    }

    #[test]
    fn classical_mode_and_constant_features_agree_bitwise() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let make = |constant_feature: bool| {
            synthetic_samples(1500, 0.0, 44, |rng, x| {
                let noise = rng.next_standard_normal();
                let feats = if constant_feature {
                    vec![3.25, -1.0]
                } else {
                    Vec::new()
                };
                (feats, -x + 0.3 * noise, 0.5 + 0.1 * x * x)
            })
        };
        let classical = markovian_projection(
            &make(false),
            &grid,
            ConditioningMode::Classical,
            &RegressionConfig::default(),
        )
        .unwrap();
        let conditional = markovian_projection(
            &make(true),
            &grid,
            ConditioningMode::Conditional,
            &RegressionConfig::default(),
        )
        .unwrap();
        for j in 0..41 {
            let x = -2.0 + 4.0 * j as f64 / 40.0;
            let (b1, s1) = classical.drift_and_sigma_sq(0, x, &[]).unwrap();
            let (b2, s2) = conditional
                .drift_and_sigma_sq(0, x, &[3.25, -1.0])
                .unwrap();
            assert_eq!(b1, b2, "drift at {x}");
            assert_eq!(s1, s2, "sigma^2 at {x}");
        }
    }

    #[test]
    fn drift_estimates_stay_within_training_response_range() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let samples = synthetic_samples(800, 0.0, 45, |rng, x| {
            (Vec::new(), x.sin() + 0.2 * rng.next_standard_normal(), 0.3)
        });
        let (lo, hi) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.drift[0]), hi.max(s.drift[0]))
            });
        let projected = markovian_projection(
            &samples,
            &grid,
            ConditioningMode::Classical,
            &RegressionConfig::default(),
        )
        .unwrap();
        let mut rng = StreamRng::new(46);
        for _ in 0..500 {
            let x = rng.next_uniform_in(-4.0, 4.0); // includes extrapolation
            let (b, _) = projected.drift_and_sigma_sq(0, x, &[]).unwrap();
            assert!(
                (lo..=hi).contains(&b),
                "estimate {b} outside training range [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn sparse_populated_slices_are_rejected_and_empty_ones_fall_back() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        // Node 0 populated, node 1 has too few, node 2 empty.
        let mut samples = synthetic_samples(200, 0.0, 47, |_, x| (Vec::new(), x, 1.0));
        samples.extend(synthetic_samples(50, 0.5, 48, |_, x| (Vec::new(), x, 1.0)));
        match markovian_projection(
            &samples,
            &grid,
            ConditioningMode::Classical,
            &RegressionConfig::default(),
        ) {
            Err(Error::InvalidParameter(msg)) => assert!(msg.contains("at least 100")),
            other => panic!("expected sparse-slice rejection, got {other:?}"),
        }
        let samples = synthetic_samples(200, 0.0, 47, |_, x| (Vec::new(), x, 1.0));
        let projected = markovian_projection(
            &samples,
            &grid,
            ConditioningMode::Classical,
            &RegressionConfig::default(),
        )
        .unwrap();
        assert_eq!(projected.slice_counts, vec![200, 0, 0]);
        assert_eq!(projected.surface().warnings().len(), 2);
        let a = projected.drift_and_sigma_sq(0, 0.3, &[]).unwrap();
        let b = projected.drift_and_sigma_sq(2, 0.3, &[]).unwrap();
        assert_eq!(a, b);
    }

    fn linear_randomized_system(drift_noise: f64) -> RandomizedSystem {
        RandomizedSystem {
            base: CoefficientField::ou_1d(1.0, 0.0, 1.0, 1.0),
            drift_noise,
            own_noise_volatility: false,
            initial: InitialLaw::standard_normal_1d(),
        }
    }

    #[test]
    fn randomized_drift_benchmark_matches_marginals_and_battery() {
        // dX = (-X + xi) dt + dW + dB with fresh xi every step: the
        // projection should recover drift -x and the mimicked system should
        // reproduce the marginal laws of the original.
        let system = linear_randomized_system(1.0);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let n_scenarios = 32;
        let mut config = MimickingConfig::new(2000, n_scenarios, grid);
        config.compare_nodes = vec![12, 25, 50];
        config.max_samples_per_slice = 32_768;
        // Silverman bandwidths on this spread attenuate a unit slope
        // noticeably; tighten them for the surface check.
        config.regression.bandwidth_scale = 0.35;
        let (report, projected) = run_mimicking_experiment(&system, &config).unwrap();

        // Drift surface: b_hat(x) close to -x at interior points, features
        // pinned at their training means.
        let feats = projected.surface().slice_feature_means(25).unwrap();
        for x in [-1.0, 0.0, 1.0] {
            let (b, _) = projected.drift_and_sigma_sq(25, x, &feats).unwrap();
            assert!((b + x).abs() < 0.2, "b_hat({x}) = {b}");
        }
        // Pooled marginals: with a unit common-noise loading the dominant
        // fluctuation is the average of M scenario means, of spread
        // sqrt(2 var_m / M) per pool pair; gate three of those plus the
        // finite-sample floor.
        for (j, w1) in report.pooled_w1.iter().enumerate() {
            let t = report.compare_times[j];
            let var_m = 0.5 * (1.0 - (-2.0 * t).exp());
            let floor = 0.06 + 3.0 * (2.0 * var_m / n_scenarios as f64).sqrt();
            assert!(*w1 < floor, "pooled W1 at node {j}: {w1} (floor {floor})");
        }
        assert!(
            report.max_functional_z < 3.5,
            "battery z {}",
            report.max_functional_z
        );
        for z in &report.tower_z {
            assert!(z.abs() < 3.5, "tower z {z}");
        }
        // Matched scenarios share the common noise, so conditional marginals
        // must agree far more tightly than the cross-scenario spread (~gamma).
        for w1 in &report.per_scenario_w1 {
            assert!(w1 < &0.12, "matched per-scenario W1 {w1}");
        }
        assert_eq!(report.sigma_clip_total, 0.0);
    }

    #[test]
    fn markovian_input_projection_is_idempotent() {
        // Mean-coupled diffusion with no extra randomness: the projection is
        // the identity up to regression error, so pooled marginals match
        // tightly. The common-noise loading is zero here so the comparison
        // is not drowned by the across-scenario spread of conditional means.
        let system = RandomizedSystem::markovian(
            CoefficientField::ou_1d(1.0, 0.5, 0.8, 0.0),
            InitialLaw::Gaussian {
                mean: vec![0.3],
                std_dev: vec![0.7],
            },
        );
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let mut config = MimickingConfig::new(2000, 16, grid);
        config.compare_nodes = vec![25, 50];
        config.regression.bandwidth_scale = 0.3;
        config.enrichment_probe = true;
        let (report, projected) = run_mimicking_experiment(&system, &config).unwrap();
        for w1 in &report.pooled_w1 {
            assert!(w1 < &0.02, "idempotence pooled W1 {w1}");
        }
        // The constant volatility is recovered exactly: estimates are convex
        // combinations of the constant squared observations.
        let (_, s2) = projected.drift_and_sigma_sq(25, 0.1, &projected
            .surface()
            .slice_feature_means(25)
            .unwrap())
            .unwrap();
        assert!((s2 - 0.64).abs() < 1e-9, "constant sigma^2 {s2}");
        let sens = report.enrichment_sensitivity.unwrap();
        assert!(
            sens < 0.3,
            "enriched features moved a Markovian drift surface by {sens}"
        );
    }

    #[test]
    fn own_noise_volatility_surface_matches_binned_oracle() {
        // sigma_t = |W_t|: the squared-volatility surface at t must equal
        // the direct binned conditional average of W_t^2 given X_t, and sit
        // near E[W_t^2] = t at representative interior points.
        let system = RandomizedSystem {
            base: CoefficientField::ou_1d(1.0, 0.0, 0.0, 0.0),
            drift_noise: 0.0,
            own_noise_volatility: true,
            initial: InitialLaw::standard_normal_1d(),
        };
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let n_particles = 4000;
        let n_scenarios = 25;
        let mut config = MimickingConfig::new(n_particles, n_scenarios, grid);
        config.mode = ConditioningMode::Classical;
        config.compare_nodes = vec![40];
        config.max_samples_per_slice = 100_000;
        let (_, projected) = run_mimicking_experiment(&system, &config).unwrap();

        // Independent oracle: re-simulate the terminal pairs (X_T, W_T^2)
        // with the same streams and bin them by state.
        let mut xs = Vec::new();
        let mut w2 = Vec::new();
        for s in 0..n_scenarios as u64 {
            let scenario = Scenario::generate(config.master_seed, s, grid, 1).unwrap();
            let dt = grid.dt();
            for i in 0..n_particles {
                let mut rng = StreamRng::for_stream(
                    config.master_seed,
                    s,
                    auxiliary_stream(0, i),
                );
                let mut x = 0.0;
                system.initial.sample(&mut rng, std::slice::from_mut(&mut x));
                let mut w_rng = StreamRng::for_stream(
                    config.master_seed,
                    s,
                    particle_stream(0, i),
                );
                let mut w = 0.0_f64;
                for k in 0..grid.n_steps() {
                    let dw = dt.sqrt() * w_rng.next_standard_normal();
                    x += -x * dt + w.abs() * dw;
                    let _ = scenario.increment(k);
                    w += dw;
                }
                xs.push(x);
                w2.push(w * w);
            }
        }
        let n_bins = 24;
        let (lo, hi) = (-1.8, 1.8);
        let mut sums = vec![0.0; n_bins];
        let mut counts = vec![0usize; n_bins];
        for (x, v) in xs.iter().zip(&w2) {
            if *x < lo || *x >= hi {
                continue;
            }
            let b = ((x - lo) / (hi - lo) * n_bins as f64) as usize;
            sums[b] += v;
            counts[b] += 1;
        }
        let mut checked = 0;
        for b in 0..n_bins {
            if counts[b] < 2000 {
                continue;
            }
            let center = lo + (hi - lo) * (b as f64 + 0.5) / n_bins as f64;
            let oracle = sums[b] / counts[b] as f64;
            let (_, s2) = projected.drift_and_sigma_sq(40, center, &[]).unwrap();
            assert!(
                (s2 - oracle).abs() < 0.10 * oracle.max(0.2),
                "bin {b} (x = {center:.2}): surface {s2} vs binned oracle {oracle}"
            );
            checked += 1;
        }
        assert!(checked >= 8, "only {checked} bins had enough samples");
        // Aggregate anchor: averaging the conditional second moment over
        // the state law recovers the unconditional one, E[W_T^2] = T = 1,
        // exactly (tower property). Pointwise the surface is genuinely
        // state-dependent, so only the aggregate pins a closed-form value.
        let mut est = vec![0.0; 2 * xs.len()];
        projected
            .drift_and_sigma_sq_batch(40, &xs, &[], &mut est)
            .unwrap();
        let avg = kahan_sum(est.iter().skip(1).step_by(2).copied()) / xs.len() as f64;
        assert!(
            (avg - 1.0).abs() < 0.05,
            "state-averaged conditional W^2: {avg}, anchor 1.0"
        );
    }

    #[test]
    fn lookup_table_round_trips_through_csv_text() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let mut samples = synthetic_samples(300, 0.0, 51, |rng, x| {
            (vec![0.5], -x + 0.1 * rng.next_standard_normal(), 0.8)
        });
        samples.extend(synthetic_samples(300, 1.0, 52, |rng, x| {
            (vec![0.7], -x + 0.1 * rng.next_standard_normal(), 0.8)
        }));
        let projected = markovian_projection(
            &samples,
            &grid,
            ConditioningMode::Conditional,
            &RegressionConfig::default(),
        )
        .unwrap();
        let csv = projected.lookup_table_csv(5).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x,feat_1,bhat_1,ahat_11");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 10);
        for row in rows {
            let fields: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(fields.len(), 5);
            let (t, x, feat) = (fields[0], fields[1], fields[2]);
            let node = if t == 0.0 { 0 } else { 1 };
            let (b, s2) = projected.drift_and_sigma_sq(node, x, &[feat]).unwrap();
            assert_eq!(fields[3], b, "drift round trip at t={t} x={x}");
            assert_eq!(fields[4], s2, "covariance round trip at t={t} x={x}");
        }
    }
}
