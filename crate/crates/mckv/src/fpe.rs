//! The equation satisfied by functions of the conditional law.
//!
//! The conditional law `mu_t` of the system given the common noise is itself
//! a Markov process on the space of probability measures. Its generator on a
//! cylindrical functional `F(mu) = f(<mu,phi_1>, ..., <mu,phi_m>)` is
//!
//! ```text
//! M F(mu) = sum_i  d_i f(z) <mu, L phi_i>
//!         + 1/2 sum_ij d_ij f(z) <mu, grad(phi_i)^T gamma> . <mu, grad(phi_j)^T gamma>
//! ```
//!
//! with `L phi = b . grad(phi) + 1/2 (sigma sigma^T + gamma gamma^T) : hess(phi)`
//! and `z_i = <mu, phi_i>`. The second line is the Lions second-derivative
//! term produced by the common noise; it couples two copies of the measure
//! and is the part that distinguishes this equation from a plain
//! Fokker–Planck hierarchy.
//!
//! This module provides the functional/derivative machinery, two
//! independent evaluation routes for `M F` (a factorized one and a literal
//! double sum over atom pairs) that must agree to near machine precision,
//! and ensemble residual checks of the associated backward identity
//! `E[F(mu_T)] - E[F(mu_0)] - E[int M F(mu_t) dt] = 0` across common-noise
//! scenarios.

use std::sync::Arc;

use rayon::prelude::*;

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::MeasureView;
use crate::numerics::{mean, standard_error, NeumaierSum};
use crate::particle::{simulate_mckv, SimulationConfig};
use crate::rng::StreamRng;
use crate::scenario::Scenario;
use crate::testfn::{TestBasis, TestFunction};

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VecFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// The outer map `f` of a cylindrical functional, with analytic derivatives.
#[derive(Clone)]
pub enum ScalarMap {
    /// `f(z) = c + l . z + 1/2 z^T Q z` with symmetric `Q` (row-major m*m).
    Quadratic {
        constant: f64,
        linear: Vec<f64>,
        quadratic: Vec<f64>,
    },
    /// Arbitrary smooth map with caller-supplied gradient and Hessian.
    Custom {
        value: ScalarFn,
        gradient: VecFn,
        hessian: VecFn,
    },
}

impl ScalarMap {
    /// Linear map `f(z) = z_i`.
    pub fn coordinate(m: usize, i: usize) -> Self {
        let mut linear = vec![0.0; m];
        linear[i] = 1.0;
        ScalarMap::Quadratic {
            constant: 0.0,
            linear,
            quadratic: vec![0.0; m * m],
        }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        match self {
            ScalarMap::Quadratic {
                constant,
                linear,
                quadratic,
            } => {
                let m = linear.len();
                let mut v = *constant;
                for i in 0..m {
                    v += linear[i] * z[i];
                    for j in 0..m {
                        v += 0.5 * quadratic[i * m + j] * z[i] * z[j];
                    }
                }
                v
            }
            ScalarMap::Custom { value, .. } => value(z),
        }
    }

    pub fn gradient(&self, z: &[f64], out: &mut [f64]) {
        match self {
            ScalarMap::Quadratic {
                linear, quadratic, ..
            } => {
                let m = linear.len();
                for i in 0..m {
                    let mut v = linear[i];
                    for j in 0..m {
                        v += 0.5 * (quadratic[i * m + j] + quadratic[j * m + i]) * z[j];
                    }
                    out[i] = v;
                }
            }
            ScalarMap::Custom { gradient, .. } => gradient(z, out),
        }
    }

    pub fn hessian(&self, z: &[f64], out: &mut [f64]) {
        match self {
            ScalarMap::Quadratic { quadratic, .. } => {
                let m = (quadratic.len() as f64).sqrt() as usize;
                for i in 0..m {
                    for j in 0..m {
                        out[i * m + j] = 0.5 * (quadratic[i * m + j] + quadratic[j * m + i]);
                    }
                }
            }
            ScalarMap::Custom { hessian, .. } => hessian(z, out),
        }
    }
}

/// `F(mu) = f(<mu,phi_1>, ..., <mu,phi_m>)`.
#[derive(Clone)]
pub struct CylindricalFunctional {
    pub basis: TestBasis,
    pub map: ScalarMap,
}

impl CylindricalFunctional {
    pub fn new(basis: TestBasis, map: ScalarMap) -> Self {
        CylindricalFunctional { basis, map }
    }

    /// Number of inner test functions.
    pub fn m(&self) -> usize {
        self.basis.functions().len()
    }

    /// Pairing vector `z_i = <mu, phi_i>`.
    pub fn coordinates(&self, mu: &MeasureView) -> Vec<f64> {
        self.basis
            .functions()
            .iter()
            .map(|phi| mu.pair(phi))
            .collect()
    }

    /// Functional value at `mu`.
    pub fn value(&self, mu: &MeasureView) -> f64 {
        self.map.value(&self.coordinates(mu))
    }

    /// Flat (linear functional) derivative `x -> dF/dm(mu)(x)`, defined up
    /// to an additive constant: `sum_i d_i f(z) phi_i(x)`.
    pub fn flat_derivative(&self, mu: &MeasureView, x: &[f64]) -> f64 {
        let z = self.coordinates(mu);
        let mut grad = vec![0.0; self.m()];
        self.map.gradient(&z, &mut grad);
        self.basis
            .functions()
            .iter()
            .zip(&grad)
            .map(|(phi, g)| g * phi.value(x))
            .sum()
    }

    /// Measure derivative `x -> (grad_x dF/dm)(mu)(x)`, the gradient of the
    /// flat derivative in the state variable.
    pub fn lions_derivative(&self, mu: &MeasureView, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let z = self.coordinates(mu);
        let mut fgrad = vec![0.0; self.m()];
        self.map.gradient(&z, &mut fgrad);
        out.fill(0.0);
        let mut phi_grad = vec![0.0; d];
        let mut phi_hess = vec![0.0; d * d];
        for (phi, g) in self.basis.functions().iter().zip(&fgrad) {
            if *g == 0.0 || !phi.supported_at(x) {
                continue;
            }
            phi.eval(x, &mut phi_grad, &mut phi_hess);
            for j in 0..d {
                out[j] += g * phi_grad[j];
            }
        }
    }
}

/// Per-atom quantities entering the generator at one evaluation point.
struct AtomTerms {
    /// `L phi_i` value for each inner function.
    l_phi: Vec<f64>,
    /// `gamma(x)^T grad(phi_i)(x)`, flattened `i * d + l`.
    g_phi: Vec<f64>,
    /// Atom weight.
    weight: f64,
}

/// Evaluate the per-atom ingredients shared by both generator routes.
fn atom_terms(
    func: &CylindricalFunctional,
    field: &CoefficientField,
    t: f64,
    mu: &MeasureView,
    scenario: Option<(&Scenario, usize)>,
) -> Vec<AtomTerms> {
    let d = field.dim();
    let m = func.m();
    let prepared = field.prepare(t, mu, scenario);
    let mut rows = Vec::new();
    let mut b = vec![0.0; d];
    let mut gam = vec![0.0; d * d];
    let mut cov = vec![0.0; d * d];
    let mut sig = vec![0.0; d * d];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    mu.for_each_atom(|weight, x| {
        prepared.drift(x, &mut b);
        prepared.sigma(x, &mut sig);
        prepared.gamma(x, &mut gam);
        for i in 0..d {
            for j in 0..d {
                let mut v = 0.0;
                for l in 0..d {
                    v += sig[i * d + l] * sig[j * d + l] + gam[i * d + l] * gam[j * d + l];
                }
                cov[i * d + j] = v;
            }
        }
        let mut l_phi = vec![0.0; m];
        let mut g_phi = vec![0.0; m * d];
        for (i, phi) in func.basis.functions().iter().enumerate() {
            if !phi.supported_at(x) {
                continue;
            }
            phi.eval(x, &mut grad, &mut hess);
            let mut l = 0.0;
            for j in 0..d {
                l += b[j] * grad[j];
                for k in 0..d {
                    l += 0.5 * cov[j * d + k] * hess[j * d + k];
                }
            }
            l_phi[i] = l;
            for l_idx in 0..d {
                let mut v = 0.0;
                for j in 0..d {
                    v += gam[j * d + l_idx] * grad[j];
                }
                g_phi[i * d + l_idx] = v;
            }
        }
        rows.push(AtomTerms {
            l_phi,
            g_phi,
            weight,
        });
    });
    rows
}

/// Generator `M F(mu)` by the factorized route: the common-noise term is
/// the quadratic form of the Hessian of `f` on the vector of pairings
/// `<mu, grad(phi_i)^T gamma>`.
pub fn generator_m_cylindrical(
    func: &CylindricalFunctional,
    field: &CoefficientField,
    t: f64,
    mu: &MeasureView,
    scenario: Option<(&Scenario, usize)>,
) -> Result<f64> {
    let d = field.dim();
    let m = func.m();
    if mu.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "generator measure dimension",
            expected: d,
            got: mu.dim(),
        });
    }
    let z = func.coordinates(mu);
    let mut fgrad = vec![0.0; m];
    let mut fhess = vec![0.0; m * m];
    func.map.gradient(&z, &mut fgrad);
    func.map.hessian(&z, &mut fhess);

    let rows = atom_terms(func, field, t, mu, scenario);
    // <mu, L phi_i> and v_i = <mu, gamma^T grad phi_i>, compensated.
    let mut l_pair = vec![NeumaierSum::new(); m];
    let mut v_pair = vec![NeumaierSum::new(); m * d];
    for row in &rows {
        for i in 0..m {
            l_pair[i].add(row.weight * row.l_phi[i]);
            for l in 0..d {
                v_pair[i * d + l].add(row.weight * row.g_phi[i * d + l]);
            }
        }
    }
    let mut total = NeumaierSum::new();
    for i in 0..m {
        total.add(fgrad[i] * l_pair[i].total());
    }
    for i in 0..m {
        for j in 0..m {
            let mut dot = 0.0;
            for l in 0..d {
                dot += v_pair[i * d + l].total() * v_pair[j * d + l].total();
            }
            total.add(0.5 * fhess[i * m + j] * dot);
        }
    }
    Ok(total.total())
}

/// Generator `M F(mu)` by the literal pairwise route: the common-noise term
/// is a double sum over atom pairs of
/// `1/2 sum_ij d_ij f(z) [gamma^T grad phi_i](x_a) . [gamma^T grad phi_j](x_b)`.
///
/// Algebraically identical to [`generator_m_cylindrical`]; numerically an
/// independent O(N^2) evaluation used to cross-check it.
pub fn generator_m_pairwise(
    func: &CylindricalFunctional,
    field: &CoefficientField,
    t: f64,
    mu: &MeasureView,
    scenario: Option<(&Scenario, usize)>,
) -> Result<f64> {
    let d = field.dim();
    let m = func.m();
    if mu.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "generator measure dimension",
            expected: d,
            got: mu.dim(),
        });
    }
    let z = func.coordinates(mu);
    let mut fgrad = vec![0.0; m];
    let mut fhess = vec![0.0; m * m];
    func.map.gradient(&z, &mut fgrad);
    func.map.hessian(&z, &mut fhess);

    let rows = atom_terms(func, field, t, mu, scenario);
    let mut total = NeumaierSum::new();
    for row in &rows {
        let mut first = 0.0;
        for i in 0..m {
            first += fgrad[i] * row.l_phi[i];
        }
        total.add(row.weight * first);
    }
    // H-contracted left factors, one per atom: y_a[j*d+l] = sum_i H_ji g_phi_a[i*d+l].
    let contracted: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            let mut y = vec![0.0; m * d];
            for j in 0..m {
                for l in 0..d {
                    let mut v = 0.0;
                    for i in 0..m {
                        v += fhess[j * m + i] * row.g_phi[i * d + l];
                    }
                    y[j * d + l] = v;
                }
            }
            y
        })
        .collect();
    for row_a in &rows {
        for (b, row_b) in rows.iter().enumerate() {
            let mut k = 0.0;
            for idx in 0..m * d {
                k += row_a.g_phi[idx] * contracted[b][idx];
            }
            total.add(0.5 * row_a.weight * row_b.weight * k);
        }
    }
    Ok(total.total())
}

/// Relative agreement gate for the two generator routes.
pub const DUAL_ROUTE_TOL: f64 = 1e-12;

/// Compare the two generator routes at one measure; returns
/// `(factorized, pairwise, relative_gap)`.
pub fn dual_route_gap(
    func: &CylindricalFunctional,
    field: &CoefficientField,
    t: f64,
    mu: &MeasureView,
    scenario: Option<(&Scenario, usize)>,
) -> Result<(f64, f64, f64)> {
    let a = generator_m_cylindrical(func, field, t, mu, scenario)?;
    let b = generator_m_pairwise(func, field, t, mu, scenario)?;
    let scale = a.abs().max(b.abs()).max(1e-30);
    Ok((a, b, (a - b).abs() / scale))
}

/// Per-scenario pairing paths harvested from a particle run.
#[derive(Debug, Clone)]
pub struct ScenarioStats {
    /// `z_i` at every node, node-major `k * m + i`.
    pub z: Vec<f64>,
    /// `<mu_k, b phi_i' + 1/2 sigma^2 phi_i''>` per step, `k * m + i`.
    pub drift: Vec<f64>,
    /// `<mu_k, 1/2 gamma^2 phi_i''>` per step (weights the realized
    /// quadratic variation).
    pub qv: Vec<f64>,
    /// `<mu_k, gamma phi_i'>` per step.
    pub gphi: Vec<f64>,
    /// Common-noise increments per step.
    pub db: Vec<f64>,
}

/// Pairing summaries for an ensemble of scenarios, the raw material for the
/// measure-level residual checks. Scalar state only.
#[derive(Debug, Clone)]
pub struct ScenarioEnsembleSummary {
    pub basis: TestBasis,
    pub grid: TimeGrid,
    pub n_particles: usize,
    /// Fault-injection multiplier applied to the recorded common-noise
    /// pairings (`gphi` scales linearly, `qv` quadratically). 1.0 means
    /// honest summaries; anything else deliberately misreports the
    /// common-noise loading so detection tests have a target.
    pub gamma_factor: f64,
    pub scenarios: Vec<ScenarioStats>,
}

/// Simulate `count` scenarios of the interacting system and harvest the
/// pairing paths of `basis` from each. Parallel across scenarios with
/// deterministic per-scenario content and ordering.
pub fn summarize_scenarios(
    field: &CoefficientField,
    master_seed: u64,
    first_scenario: u64,
    count: usize,
    config: &SimulationConfig,
    basis: &TestBasis,
    gamma_factor: f64,
) -> Result<ScenarioEnsembleSummary> {
    if field.dim() != 1 {
        return Err(Error::ScalarOnly("summarize_scenarios"));
    }
    if !(gamma_factor.is_finite() && gamma_factor > 0.0) {
        return Err(Error::InvalidParameter(
            "gamma_factor must be positive".into(),
        ));
    }
    let m = basis.functions().len();
    let n_steps = config.grid.n_steps();
    let scenarios: Result<Vec<ScenarioStats>> = (0..count as u64)
        .into_par_iter()
        .map(|offset| {
            let scenario =
                Scenario::generate(master_seed, first_scenario + offset, config.grid, 1)?;
            let ens = simulate_mckv(field, &scenario, master_seed, config)?;
            let mut z = vec![0.0; (n_steps + 1) * m];
            let mut drift = vec![0.0; n_steps * m];
            let mut qv = vec![0.0; n_steps * m];
            let mut gphi = vec![0.0; n_steps * m];
            let mut db = vec![0.0; n_steps];
            for k in 0..=n_steps {
                let mu = ens.measure_at(k);
                let t = config.grid.node(k);
                let prepared = field.prepare(t, &mu, Some((&scenario, k)));
                let mut z_acc = vec![NeumaierSum::new(); m];
                let mut drift_acc = vec![NeumaierSum::new(); m];
                let mut qv_acc = vec![NeumaierSum::new(); m];
                let mut gphi_acc = vec![NeumaierSum::new(); m];
                let states = ens.states_at(k);
                let w = 1.0 / ens.n_particles as f64;
                for &x in states {
                    let (b, s, g) = prepared.eval_1d(x);
                    for (i, phi) in basis.functions().iter().enumerate() {
                        if !phi.supported_at(std::slice::from_ref(&x)) {
                            continue;
                        }
                        let (v, d1, d2) = phi.eval1(x);
                        z_acc[i].add(w * v);
                        drift_acc[i].add(w * (b * d1 + 0.5 * s * s * d2));
                        qv_acc[i].add(w * 0.5 * g * g * d2);
                        gphi_acc[i].add(w * g * d1);
                    }
                }
                for i in 0..m {
                    z[k * m + i] = z_acc[i].total();
                    if k < n_steps {
                        drift[k * m + i] = drift_acc[i].total();
                        qv[k * m + i] = qv_acc[i].total() * gamma_factor * gamma_factor;
                        gphi[k * m + i] = gphi_acc[i].total() * gamma_factor;
                    }
                }
                if k < n_steps {
                    db[k] = scenario.increment(k)[0];
                }
            }
            Ok(ScenarioStats {
                z,
                drift,
                qv,
                gphi,
                db,
            })
        })
        .collect();
    Ok(ScenarioEnsembleSummary {
        basis: basis.clone(),
        grid: config.grid,
        n_particles: config.n_particles,
        gamma_factor,
        scenarios: scenarios?,
    })
}

/// Monte Carlo statistics of a residual across scenarios.
#[derive(Debug, Clone)]
pub struct ResidualStats {
    pub per_scenario: Vec<f64>,
    pub mean: f64,
    pub standard_error: f64,
    /// `mean / standard_error`.
    pub z_score: f64,
}

impl ResidualStats {
    fn from_values(per_scenario: Vec<f64>) -> Self {
        let mean_v = mean(&per_scenario);
        let se = standard_error(&per_scenario);
        ResidualStats {
            mean: mean_v,
            standard_error: se,
            z_score: if se > 0.0 { mean_v / se } else { 0.0 },
            per_scenario,
        }
    }
}

/// Residual of the backward identity for one functional over the ensemble:
/// per scenario,
///
/// ```text
/// R = f(z_T) - f(z_0)
///     - sum_k [ sum_i d_i f(z_k) (drift_ik dt + qv_ik dB_k^2)
///               + 1/2 sum_ij d_ij f(z_k) gphi_ik gphi_jk dB_k^2 ] .
/// ```
///
/// `E[R] = 0` for the true dynamics; the returned statistics quantify the
/// Monte Carlo evidence. The functional must be built on the same basis the
/// summary harvested.
pub fn fpe_residual(
    summary: &ScenarioEnsembleSummary,
    func: &CylindricalFunctional,
) -> Result<ResidualStats> {
    if func.basis != summary.basis {
        return Err(Error::ScenarioMismatch(
            "functional basis differs from harvested basis".into(),
        ));
    }
    let m = func.m();
    let n_steps = summary.grid.n_steps();
    let dt = summary.grid.dt();
    let mut per_scenario = Vec::with_capacity(summary.scenarios.len());
    let mut fgrad = vec![0.0; m];
    let mut fhess = vec![0.0; m * m];
    for sc in &summary.scenarios {
        let mut integral = NeumaierSum::new();
        for k in 0..n_steps {
            let z_k = &sc.z[k * m..(k + 1) * m];
            func.map.gradient(z_k, &mut fgrad);
            func.map.hessian(z_k, &mut fhess);
            let db2 = sc.db[k] * sc.db[k];
            for i in 0..m {
                integral.add(fgrad[i] * (sc.drift[k * m + i] * dt + sc.qv[k * m + i] * db2));
                for j in 0..m {
                    integral.add(
                        0.5 * fhess[i * m + j]
                            * sc.gphi[k * m + i]
                            * sc.gphi[k * m + j]
                            * db2,
                    );
                }
            }
        }
        let start = func.map.value(&sc.z[0..m]);
        let end = func.map.value(&sc.z[n_steps * m..(n_steps + 1) * m]);
        per_scenario.push(end - start - integral.total());
    }
    Ok(ResidualStats::from_values(per_scenario))
}

/// Pathwise residual of the scalar equation satisfied by one pairing
/// `z_i = <mu_t, phi_i>` along the common noise: per scenario,
///
/// ```text
/// R = z_T - z_0 - sum_k (drift dt + qv dB^2) - sum_k gphi dB .
/// ```
///
/// Unlike [`fpe_residual`] this subtracts the stochastic integral, so `R`
/// is small pathwise (idiosyncratic-noise averaging O(N^{-1/2}) plus O(dt)),
/// not just in expectation.
pub fn lifted_sde_residual(
    summary: &ScenarioEnsembleSummary,
    basis_index: usize,
) -> Result<ResidualStats> {
    let m = summary.basis.functions().len();
    if basis_index >= m {
        return Err(Error::InvalidParameter(format!(
            "basis index {basis_index} out of range (m = {m})"
        )));
    }
    let n_steps = summary.grid.n_steps();
    let dt = summary.grid.dt();
    let mut per_scenario = Vec::with_capacity(summary.scenarios.len());
    for sc in &summary.scenarios {
        let mut acc = NeumaierSum::new();
        for k in 0..n_steps {
            let db = sc.db[k];
            acc.add(sc.drift[k * m + basis_index] * dt);
            acc.add(sc.qv[k * m + basis_index] * db * db);
            acc.add(sc.gphi[k * m + basis_index] * db);
        }
        let z0 = sc.z[basis_index];
        let zt = sc.z[n_steps * m + basis_index];
        per_scenario.push(zt - z0 - acc.total());
    }
    Ok(ResidualStats::from_values(per_scenario))
}

/// Result of the integral-interchange check.
#[derive(Debug, Clone)]
pub struct FubiniReport {
    /// Largest over scenarios of the gap between "integrate the particle
    /// average" and "average the particle integrals" against the common
    /// noise. Pure floating-point reassociation; must sit at rounding level.
    pub common_gap: f64,
    /// Mean over scenarios of the particle-averaged idiosyncratic
    /// stochastic integral (expectation zero).
    pub idio_mean: f64,
    pub idio_se: f64,
    pub scenarios: usize,
}

/// Exchange-of-integrals check on simulated ensembles.
///
/// Against the common noise the interchange
/// `sum_k [mean_i psi(X^i_k)] dB_k  =  mean_i [sum_k psi(X^i_k) dB_k]`
/// is an exact identity, so the two evaluation orders may differ only by
/// rounding. Against the idiosyncratic noise the analogous conditional
/// expectation `E[mean_i int psi(X^i) dW^i | B]` vanishes, which is a
/// statistical statement tested across scenarios. The ensembles must have
/// recorded their noise.
pub fn stochastic_fubini_check(
    ensembles: &[crate::particle::ParticleEnsemble],
    psi: &TestFunction,
) -> Result<FubiniReport> {
    if ensembles.is_empty() {
        return Err(Error::EmptyInput("no ensembles given".into()));
    }
    let mut common_gap = 0.0_f64;
    let mut idio = Vec::with_capacity(ensembles.len());
    for ens in ensembles {
        let n_steps = ens.grid.n_steps();
        let n = ens.n_particles;
        let w = 1.0 / n as f64;
        // Route 1: integrate the cross-particle average.
        let mut route_time = NeumaierSum::new();
        for k in 0..n_steps {
            let db = ens.scenario.increment(k)[0];
            let mut avg = NeumaierSum::new();
            for i in 0..n {
                avg.add(w * psi.value(ens.state(k, i)));
            }
            route_time.add(avg.total() * db);
        }
        // Route 2: average the per-particle integrals.
        let mut route_particle = NeumaierSum::new();
        for i in 0..n {
            let mut path_integral = NeumaierSum::new();
            for k in 0..n_steps {
                path_integral.add(psi.value(ens.state(k, i)) * ens.scenario.increment(k)[0]);
            }
            route_particle.add(w * path_integral.total());
        }
        common_gap = common_gap.max((route_time.total() - route_particle.total()).abs());

        let mut idio_acc = NeumaierSum::new();
        for k in 0..n_steps {
            let rec = ens.recorded_noise(k).ok_or_else(|| {
                Error::invalid("fubini check needs ensembles with recorded noise")
            })?;
            for i in 0..n {
                idio_acc.add(w * psi.value(ens.state(k, i)) * rec[i]);
            }
        }
        idio.push(idio_acc.total());
    }
    Ok(FubiniReport {
        common_gap,
        idio_mean: mean(&idio),
        idio_se: standard_error(&idio),
        scenarios: ensembles.len(),
    })
}

/// A fixed battery of six functionals over a three-bump basis, exercising
/// linear, quadratic, product, and genuinely nonlinear outer maps.
pub fn standard_battery(x_lo: f64, x_hi: f64) -> Result<(TestBasis, Vec<CylindricalFunctional>)> {
    let span = x_hi - x_lo;
    let mid = 0.5 * (x_lo + x_hi);
    let basis = TestBasis::new(vec![
        TestFunction::smooth_bump(vec![mid - 0.15 * span], 0.45 * span)?,
        TestFunction::smooth_bump(vec![mid + 0.2 * span], 0.3 * span)?,
        TestFunction::polynomial_bump(vec![mid], 0.48 * span, vec![0.0, 1.0])?,
    ])?;
    let m = 3;
    let mut funcs = Vec::new();
    // 1-2: coordinates (linear in the measure).
    funcs.push(CylindricalFunctional::new(
        basis.clone(),
        ScalarMap::coordinate(m, 0),
    ));
    funcs.push(CylindricalFunctional::new(
        basis.clone(),
        ScalarMap::coordinate(m, 2),
    ));
    // 3: square of a pairing.
    let mut q = vec![0.0; m * m];
    q[0] = 2.0;
    funcs.push(CylindricalFunctional::new(
        basis.clone(),
        ScalarMap::Quadratic {
            constant: 0.0,
            linear: vec![0.0; m],
            quadratic: q,
        },
    ));
    // 4: product of two pairings.
    let mut q = vec![0.0; m * m];
    q[m] = 1.0; // z2 z1 entry
    q[1] = 1.0; // z1 z2 entry
    funcs.push(CylindricalFunctional::new(
        basis.clone(),
        ScalarMap::Quadratic {
            constant: 0.0,
            linear: vec![0.0; m],
            quadratic: q,
        },
    ));
    // 5: cubic in one pairing.
    funcs.push(CylindricalFunctional::new(
        basis.clone(),
        ScalarMap::Custom {
            value: Arc::new(|z| z[0] * z[0] * z[0]),
            gradient: Arc::new(|z, out| {
                out.fill(0.0);
                out[0] = 3.0 * z[0] * z[0];
            }),
            hessian: Arc::new(|z, out| {
                out.fill(0.0);
                out[0] = 6.0 * z[0];
            }),
        },
    ));
    // 6: smooth transcendental mix.
    funcs.push(CylindricalFunctional::new(
        basis.clone(),
        ScalarMap::Custom {
            value: Arc::new(|z| (z[0] + 0.5 * z[1]).exp()),
            gradient: Arc::new(|z, out| {
                let v = (z[0] + 0.5 * z[1]).exp();
                out.fill(0.0);
                out[0] = v;
                out[1] = 0.5 * v;
            }),
            hessian: Arc::new(|z, out| {
                let v = (z[0] + 0.5 * z[1]).exp();
                out.fill(0.0);
                out[0] = v;
                out[1] = 0.5 * v;
                out[3] = 0.5 * v;
                out[4] = 0.25 * v;
            }),
        },
    ));
    Ok((basis, funcs))
}

/// Uniformly weighted random measure with `n` atoms spread over an
/// interval; used by agreement and invariance tests.
pub fn random_measure_1d(rng: &mut StreamRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.next_uniform_in(lo, hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::EmpiricalMeasure;
    use crate::particle::{simulate, InitialLaw, MeasureFlow, NoiseMode};

    fn battery_field() -> CoefficientField {
        CoefficientField::ou_1d(1.0, 0.5, 0.45, 0.35)
    }

    #[test]
    fn flat_and_lions_derivatives_have_cylindrical_form() {
        let (basis, funcs) = standard_battery(-2.0, 2.0).unwrap();
        let func = &funcs[2]; // z1^2
        let atoms = vec![-0.5, 0.3, 0.9];
        let mu = EmpiricalMeasure::from_points_1d(atoms).unwrap();
        let view = mu.view();
        let z1 = view.pair(&basis.functions()[0]);
        let x = [0.4];
        let phi0 = basis.functions()[0].value(&x);
        // dF/dm = 2 z1 phi_1(x).
        let flat = func.flat_derivative(&view, &x);
        assert!((flat - 2.0 * z1 * phi0).abs() < 1e-13);
        let mut lions = [0.0];
        func.lions_derivative(&view, &x, &mut lions);
        let mut g = [0.0];
        let mut h = [0.0];
        basis.functions()[0].eval(&x, &mut g, &mut h);
        assert!((lions[0] - 2.0 * z1 * g[0]).abs() < 1e-13);
    }

    #[test]
    fn functional_value_is_a_function_of_the_measure_only() {
        let (_, funcs) = standard_battery(-2.0, 2.0).unwrap();
        let func = &funcs[5];
        let atoms = vec![0.1, -0.7, 1.3, 0.4];
        let mu = EmpiricalMeasure::from_points_1d(atoms.clone()).unwrap();
        let v = func.value(&mu.view());
        // Permutation invariance.
        let mut shuffled = atoms.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        let mu_p = EmpiricalMeasure::from_points_1d(shuffled).unwrap();
        assert_eq!(v, func.value(&mu_p.view()));
        // Splitting one atom into two half-weight copies leaves the
        // measure, hence the value, unchanged.
        let split = EmpiricalMeasure::new(
            vec![0.1, 0.1, -0.7, 1.3, 0.4],
            1,
            Some(vec![0.125, 0.125, 0.25, 0.25, 0.25]),
        )
        .unwrap();
        assert!((v - func.value(&split.view())).abs() < 1e-14);
    }

    #[test]
    fn generator_matches_hand_computation_for_quadratic_functional() {
        // F(mu) = <mu,phi>^2 with constant coefficients: M F =
        // 2 z <mu, L phi> + <mu, gamma phi'>^2.
        let basis = TestBasis::new(vec![TestFunction::smooth_bump(vec![0.0], 2.0).unwrap()])
            .unwrap();
        let mut q = vec![0.0];
        q[0] = 2.0;
        let func = CylindricalFunctional::new(
            basis.clone(),
            ScalarMap::Quadratic {
                constant: 0.0,
                linear: vec![0.0],
                quadratic: q,
            },
        );
        let (b0, s0, g0) = (0.3, 0.6, 0.4);
        let field = CoefficientField::constant_1d(b0, s0, g0);
        let mu = EmpiricalMeasure::from_points_1d(vec![-0.4, 0.2, 0.7]).unwrap();
        let view = mu.view();
        let phi = &basis.functions()[0];
        let z = view.pair(phi);
        let mut l_pair = 0.0;
        let mut g_pair = 0.0;
        for &x in &[-0.4, 0.2, 0.7] {
            let (_, d1, d2) = phi.eval1(x);
            l_pair += (b0 * d1 + 0.5 * (s0 * s0 + g0 * g0) * d2) / 3.0;
            g_pair += g0 * d1 / 3.0;
        }
        let expected = 2.0 * z * l_pair + g_pair * g_pair;
        let got = generator_m_cylindrical(&func, &field, 0.0, &view, None).unwrap();
        assert!((got - expected).abs() < 1e-13, "{got} vs {expected}");
    }

    #[test]
    fn dual_routes_agree_to_machine_precision() {
        let (_, funcs) = standard_battery(-2.5, 2.5).unwrap();
        let field = battery_field();
        let mut rng = StreamRng::new(2024);
        for trial in 0..60 {
            let n = 16 + (trial % 5) * 48;
            let atoms = random_measure_1d(&mut rng, n, -2.5, 2.5);
            let mu = EmpiricalMeasure::from_points_1d(atoms).unwrap();
            let view = mu.view();
            for func in &funcs {
                let (a, b, gap) = dual_route_gap(func, &field, 0.1, &view, None).unwrap();
                assert!(
                    gap <= DUAL_ROUTE_TOL,
                    "trial {trial}: {a} vs {b} gap {gap}"
                );
            }
        }
    }

    fn small_summary(gamma_factor: f64) -> (ScenarioEnsembleSummary, Vec<CylindricalFunctional>) {
        let field = battery_field();
        let (basis, funcs) = standard_battery(-2.5, 2.5).unwrap();
        let config = SimulationConfig::new(
            400,
            TimeGrid::new(0.5, 100).unwrap(),
            InitialLaw::Gaussian {
                mean: vec![0.2],
                std_dev: vec![0.6],
            },
        );
        let summary =
            summarize_scenarios(&field, 77, 0, 128, &config, &basis, gamma_factor).unwrap();
        (summary, funcs)
    }

    #[test]
    fn backward_identity_holds_across_the_battery() {
        let (summary, funcs) = small_summary(1.0);
        let dt = summary.grid.dt();
        let n_half = 1.0 / (summary.n_particles as f64).sqrt();
        for (idx, func) in funcs.iter().enumerate() {
            let stats = fpe_residual(&summary, func).unwrap();
            // Statistical gate plus a discretization allowance: the Euler
            // scheme and the particle approximation bias the identity at
            // O(dt) + O(1/sqrt(N)).
            let gate = 3.0 * stats.standard_error + 0.5 * (dt + n_half);
            assert!(
                stats.mean.abs() <= gate,
                "functional {idx}: mean {} se {} gate {gate}",
                stats.mean,
                stats.standard_error
            );
        }
    }

    #[test]
    fn misreported_gamma_is_detected_loudly() {
        let (honest, funcs) = small_summary(1.0);
        let (sabotaged, _) = small_summary(2.0);
        let mut best_honest = 0.0_f64;
        let mut best_sabotaged = 0.0_f64;
        for func in &funcs {
            let h = fpe_residual(&honest, func).unwrap();
            let s = fpe_residual(&sabotaged, func).unwrap();
            best_honest = best_honest.max(h.z_score.abs());
            best_sabotaged = best_sabotaged.max(s.z_score.abs());
        }
        assert!(best_sabotaged > 10.0, "sabotage z {best_sabotaged}");
        assert!(best_sabotaged > 3.0 * best_honest);
    }

    #[test]
    fn lifted_pairing_equation_holds_pathwise() {
        let (summary, _) = small_summary(1.0);
        let n_half = 1.0 / (summary.n_particles as f64).sqrt();
        for i in 0..summary.basis.functions().len() {
            let stats = lifted_sde_residual(&summary, i).unwrap();
            let worst = stats
                .per_scenario
                .iter()
                .fold(0.0_f64, |m, r| m.max(r.abs()));
            // Pathwise scale: idiosyncratic averaging O(N^{-1/2}) plus
            // O(dt) scheme bias.
            assert!(
                worst < 5.0 * n_half,
                "basis {i}: worst pathwise residual {worst}"
            );
            assert!(stats.mean.abs() < 3.5 * stats.standard_error + 0.01);
        }
    }

    #[test]
    fn integral_interchange_is_exact_and_idiosyncratic_mean_vanishes() {
        let field = battery_field();
        let config = SimulationConfig::new(
            300,
            TimeGrid::new(0.5, 80).unwrap(),
            InitialLaw::standard_normal_1d(),
        )
        .recording_noise();
        let ensembles: Vec<_> = (0..24)
            .map(|idx| {
                let scenario =
                    Scenario::generate(55, idx, config.grid, 1).unwrap();
                simulate(
                    &field,
                    &scenario,
                    55,
                    &config,
                    MeasureFlow::SelfConsistent,
                    NoiseMode::Independent,
                )
                .unwrap()
            })
            .collect();
        let psi = TestFunction::smooth_bump(vec![0.0], 2.0).unwrap();
        let report = stochastic_fubini_check(&ensembles, &psi).unwrap();
        assert!(report.common_gap < 1e-12, "gap {}", report.common_gap);
        assert!(
            report.idio_mean.abs() <= 3.5 * report.idio_se,
            "idio mean {} se {}",
            report.idio_mean,
            report.idio_se
        );
    }
}
