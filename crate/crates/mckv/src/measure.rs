//! Probability measures: particle clouds and grid densities under one view.
//!
//! Coefficients, generators and diagnostics never care whether a measure is
//! an empirical cloud of particles or a density table on a spatial grid; they
//! pair it against functions, take moments, evaluate a kernel density, or
//! extract quantiles. [`MeasureView`] is the borrowed, allocation-free common
//! interface; [`EmpiricalMeasure`] is the owned particle-cloud form.

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::numerics;
use crate::testfn::TestFunction;

/// Tolerance for "weights sum to one".
const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A weighted cloud of atoms in R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    d: usize,
    /// Atom coordinates, atom-major: `atoms[i*d + j]`.
    atoms: Vec<f64>,
    /// Uniform weights when `None`.
    weights: Option<Vec<f64>>,
}

impl EmpiricalMeasure {
    /// Uniformly weighted measure on the given flat atom table.
    pub fn from_states(atoms: &[f64], d: usize) -> Result<Self> {
        Self::new(atoms.to_vec(), d, None)
    }

    /// Uniformly weighted measure on scalar atoms.
    pub fn from_points_1d(points: Vec<f64>) -> Result<Self> {
        Self::new(points, 1, None)
    }

    /// General constructor; `weights`, when given, must be nonnegative and
    /// sum to 1 within 1e-12.
    pub fn new(atoms: Vec<f64>, d: usize, weights: Option<Vec<f64>>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidMeasure("dimension must be >= 1".into()));
        }
        if atoms.is_empty() || atoms.len() % d != 0 {
            return Err(Error::InvalidMeasure(format!(
                "atom table length {} is not a positive multiple of d = {d}",
                atoms.len()
            )));
        }
        if !atoms.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidMeasure("atoms must be finite".into()));
        }
        let n = atoms.len() / d;
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "empirical measure weights",
                    expected: n,
                    got: w.len(),
                });
            }
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::InvalidMeasure(
                    "weights must be finite and nonnegative".into(),
                ));
            }
            let sum = numerics::kahan_sum(w.iter().copied());
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::InvalidMeasure(format!(
                    "weights sum to {sum}, not 1 within {WEIGHT_SUM_TOL:.0e}"
                )));
            }
        }
        Ok(EmpiricalMeasure { d, atoms, weights })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len() / self.d
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.d..(i + 1) * self.d]
    }

    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.n_atoms() as f64,
        }
    }

    /// Borrowed view usable wherever a measure is consumed.
    pub fn view(&self) -> MeasureView<'_> {
        MeasureView::Empirical {
            atoms: &self.atoms,
            d: self.d,
            weights: self.weights.as_deref(),
        }
    }
}

/// Borrowed view of a probability measure.
#[derive(Debug, Clone, Copy)]
pub enum MeasureView<'a> {
    /// Particle cloud; `weights = None` means uniform.
    Empirical {
        atoms: &'a [f64],
        d: usize,
        weights: Option<&'a [f64]>,
    },
    /// Cell-centered density table on a 1-d grid (values are densities, not
    /// masses; cell mass is `values[j] * dx`).
    Grid {
        grid: &'a SpatialGrid,
        values: &'a [f64],
    },
}

impl<'a> MeasureView<'a> {
    pub fn dim(&self) -> usize {
        match self {
            MeasureView::Empirical { d, .. } => *d,
            MeasureView::Grid { .. } => 1,
        }
    }

    /// Total mass (1 for valid inputs; grids report their quadrature mass).
    pub fn mass(&self) -> f64 {
        match self {
            MeasureView::Empirical { atoms, d, weights } => match weights {
                Some(w) => numerics::kahan_sum(w.iter().copied()),
                None => {
                    if atoms.is_empty() {
                        0.0
                    } else {
                        let _ = d;
                        1.0
                    }
                }
            },
            MeasureView::Grid { grid, values } => {
                numerics::kahan_sum(values.iter().copied()) * grid.dx()
            }
        }
    }

    /// Visit every atom / cell as `(weight, coordinates)`.
    ///
    /// Iteration order is fixed (atom index / cell index), so accumulations
    /// over a view are deterministic.
    pub fn for_each_atom(&self, mut f: impl FnMut(f64, &[f64])) {
        match self {
            MeasureView::Empirical { atoms, d, weights } => {
                let n = atoms.len() / d;
                let uniform = 1.0 / n as f64;
                for i in 0..n {
                    let w = weights.map_or(uniform, |w| w[i]);
                    f(w, &atoms[i * d..(i + 1) * d]);
                }
            }
            MeasureView::Grid { grid, values } => {
                let dx = grid.dx();
                for (j, &rho) in values.iter().enumerate() {
                    f(rho * dx, &[grid.cell_center(j)]);
                }
            }
        }
    }

    /// Pairing `<m, phi>` against a test function, exploiting its compact
    /// support on grid views.
    pub fn pair(&self, phi: &TestFunction) -> f64 {
        match self {
            MeasureView::Empirical { atoms, d, weights } => {
                debug_assert_eq!(phi.dim(), *d);
                let n = atoms.len() / d;
                let mut acc = 0.0;
                match weights {
                    Some(w) => {
                        for i in 0..n {
                            acc += w[i] * phi.value(&atoms[i * d..(i + 1) * d]);
                        }
                    }
                    None => {
                        for i in 0..n {
                            acc += phi.value(&atoms[i * d..(i + 1) * d]);
                        }
                        acc /= n as f64;
                    }
                }
                acc
            }
            MeasureView::Grid { grid, values } => {
                debug_assert_eq!(phi.dim(), 1);
                let dx = grid.dx();
                let c = phi.center()[0];
                let r = phi.radius();
                let j_lo = (((c - r - grid.x_min()) / dx).floor().max(0.0)) as usize;
                let j_hi = ((((c + r - grid.x_min()) / dx).ceil()) as usize).min(grid.n_cells());
                let mut acc = 0.0;
                for j in j_lo..j_hi {
                    acc += values[j] * phi.value(&[grid.cell_center(j)]);
                }
                acc * dx
            }
        }
    }

    /// Pairing against an arbitrary function of the state.
    pub fn pair_fn(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_atom(|w, x| acc += w * f(x));
        acc
    }

    /// Raw moment of order `k` per coordinate: `E[x_j^k]` for each `j`.
    pub fn moment(&self, k: u32) -> Vec<f64> {
        let d = self.dim();
        let mut acc = vec![0.0; d];
        self.for_each_atom(|w, x| {
            for j in 0..d {
                acc[j] += w * x[j].powi(k as i32);
            }
        });
        acc
    }

    /// Mean vector.
    pub fn mean(&self) -> Vec<f64> {
        self.moment(1)
    }

    /// Variance of the first coordinate (convenience for the d = 1 benches).
    pub fn variance_1d(&self) -> f64 {
        let m1 = self.mean()[0];
        let m2 = self.moment(2)[0];
        (m2 - m1 * m1).max(0.0)
    }

    /// Gaussian kernel density estimate at `x` with bandwidth `bandwidth`
    /// (isotropic product kernel). Always nonnegative.
    pub fn kde(&self, x: &[f64], bandwidth: f64) -> f64 {
        debug_assert!(bandwidth > 0.0);
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let norm = 1.0 / (bandwidth * (std::f64::consts::TAU).sqrt()).powi(d as i32);
        let mut acc = 0.0;
        self.for_each_atom(|w, y| {
            let mut q = 0.0;
            for j in 0..d {
                let z = (x[j] - y[j]) / bandwidth;
                q += z * z;
            }
            if q < 1600.0 {
                acc += w * (-0.5 * q).exp();
            }
        });
        acc * norm
    }

    /// Smallest and largest value of the first coordinate.
    pub fn range_1d(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        self.for_each_atom(|w, x| {
            if w > 0.0 {
                lo = lo.min(x[0]);
                hi = hi.max(x[0]);
            }
        });
        (lo, hi)
    }

    /// Midpoint quantiles `F^{-1}((k + 1/2) / n)` of a scalar measure.
    pub fn quantiles(&self, n: usize) -> Result<Vec<f64>> {
        if self.dim() != 1 {
            return Err(Error::ScalarOnly("quantile extraction"));
        }
        if n == 0 {
            return Err(Error::EmptyInput("quantile count".into()));
        }
        match self {
            MeasureView::Empirical { atoms, weights, .. } => {
                let mut idx: Vec<usize> = (0..atoms.len()).collect();
                idx.sort_by(|&a, &b| atoms[a].partial_cmp(&atoms[b]).unwrap());
                let uniform = 1.0 / atoms.len() as f64;
                let mut out = Vec::with_capacity(n);
                let mut cum = 0.0;
                let mut pos = 0usize;
                for k in 0..n {
                    let q = (k as f64 + 0.5) / n as f64;
                    while pos < idx.len() - 1 {
                        let w = weights.map_or(uniform, |w| w[idx[pos]]);
                        if cum + w >= q {
                            break;
                        }
                        cum += w;
                        pos += 1;
                    }
                    out.push(atoms[idx[pos]]);
                }
                Ok(out)
            }
            MeasureView::Grid { grid, values } => {
                let dx = grid.dx();
                let total = numerics::kahan_sum(values.iter().copied()) * dx;
                if !(total > 0.0) {
                    return Err(Error::InvalidMeasure(
                        "grid density has no mass; cannot take quantiles".into(),
                    ));
                }
                let mut out = Vec::with_capacity(n);
                let mut j = 0usize;
                let mut cum = 0.0;
                for k in 0..n {
                    let q = (k as f64 + 0.5) / n as f64 * total;
                    while j < values.len() && cum + values[j] * dx < q {
                        cum += values[j] * dx;
                        j += 1;
                    }
                    if j >= values.len() {
                        out.push(grid.x_max());
                        continue;
                    }
                    let cell_mass = values[j] * dx;
                    let frac = if cell_mass > 0.0 {
                        ((q - cum) / cell_mass).clamp(0.0, 1.0)
                    } else {
                        0.5
                    };
                    out.push(grid.x_min() + (j as f64 + frac) * dx);
                }
                Ok(out)
            }
        }
    }
}

/// First Wasserstein distance between scalar measures via the quantile
/// representation `W_1 = \int_0^1 |F^{-1}(q) - G^{-1}(q)| dq`, discretized at
/// `n_quantiles` midpoints. Discretization error is O(range / n_quantiles).
pub fn wasserstein1_1d(a: &MeasureView, b: &MeasureView, n_quantiles: usize) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::ScalarOnly("wasserstein1_1d"));
    }
    let qa = a.quantiles(n_quantiles)?;
    let qb = b.quantiles(n_quantiles)?;
    let mut acc = 0.0;
    for k in 0..n_quantiles {
        acc += (qa[k] - qb[k]).abs();
    }
    Ok(acc / n_quantiles as f64)
}
