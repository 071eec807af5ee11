//! Coefficient fields `b`, `sigma`, `gamma` for measure-dependent diffusions.
//!
//! A coefficient field evaluates the drift vector `b(t, m, x)`, the
//! idiosyncratic diffusion matrix `sigma(t, m, x)` and the common-noise
//! loading `gamma(t, m, x)` given the time, a measure view `m` (empirical or
//! grid) and the state `x`. Random coefficients additionally read the
//! realized common-noise path up to the current node through
//! [`CoeffInput::scenario`]. The full diffusion matrix is
//! `a = sigma sigma^T + gamma gamma^T`.

use std::fmt;
use std::sync::Arc;

use crate::measure::MeasureView;
use crate::scenario::Scenario;

/// Evaluation context handed to coefficient closures.
#[derive(Clone, Copy)]
pub struct CoeffInput<'a> {
    /// Current time.
    pub t: f64,
    /// Current state of the particle / grid point, length d.
    pub x: &'a [f64],
    /// Conditional-law approximation at the current time.
    pub measure: &'a MeasureView<'a>,
    /// Realized common-noise path and the index of the current node;
    /// evaluators must only read nodes `0 ..= node` (no peeking ahead).
    pub scenario: Option<(&'a Scenario, usize)>,
}

impl<'a> CoeffInput<'a> {
    /// Value of the common-noise path at the current node (0 when absent).
    pub fn common_noise(&self, component: usize) -> f64 {
        match self.scenario {
            Some((s, node)) => s.value(node)[component],
            None => 0.0,
        }
    }
}

type VecField = Arc<dyn Fn(&CoeffInput, &mut [f64]) + Send + Sync>;

/// Drift / diffusion / common-noise loading of one system.
#[derive(Clone)]
pub enum CoefficientField {
    /// `b(t,m,x) = b0 + Bx x + Bm mean(m)`, constant `sigma`, `gamma`.
    ///
    /// Matrices are row-major d-by-d. This family covers the
    /// Ornstein–Uhlenbeck and linear-quadratic benchmarks.
    AffineMeanField {
        d: usize,
        b0: Vec<f64>,
        b_x: Vec<f64>,
        b_mean: Vec<f64>,
        sigma: Vec<f64>,
        gamma: Vec<f64>,
    },
    /// Drift proportional to the kernel density estimate of `m` at the own
    /// state: `b_i = scale_i * m.kde(x)`, constant `sigma`, `gamma`.
    LocalDensity {
        d: usize,
        scale: Vec<f64>,
        bandwidth: f64,
        sigma: Vec<f64>,
        gamma: Vec<f64>,
    },
    /// Coefficients reading the realized common-noise history: the drift is
    /// `b(t, omega, x) = drift_base + path_weight * B_t`, with constant
    /// `sigma`, `gamma`.
    ScenarioRandom {
        d: usize,
        drift_base: Vec<f64>,
        path_weight: f64,
        sigma: Vec<f64>,
        gamma: Vec<f64>,
    },
    /// Arbitrary closures; used to compose benchmark systems in tests and
    /// experiments.
    Custom {
        d: usize,
        drift: VecField,
        sigma: VecField,
        gamma: VecField,
    },
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefficientField::AffineMeanField { d, .. } => {
                write!(f, "CoefficientField::AffineMeanField(d={d})")
            }
            CoefficientField::LocalDensity { d, .. } => {
                write!(f, "CoefficientField::LocalDensity(d={d})")
            }
            CoefficientField::ScenarioRandom { d, .. } => {
                write!(f, "CoefficientField::ScenarioRandom(d={d})")
            }
            CoefficientField::Custom { d, .. } => write!(f, "CoefficientField::Custom(d={d})"),
        }
    }
}

impl CoefficientField {
    /// State dimension.
    pub fn dim(&self) -> usize {
        match self {
            CoefficientField::AffineMeanField { d, .. }
            | CoefficientField::LocalDensity { d, .. }
            | CoefficientField::ScenarioRandom { d, .. }
            | CoefficientField::Custom { d, .. } => *d,
        }
    }

    /// Constant-coefficient field (`b`, `sigma`, `gamma` all state- and
    /// measure-independent). Matrices are diagonal with the given scalars.
    pub fn constant_1d(b: f64, sigma: f64, gamma: f64) -> Self {
        CoefficientField::AffineMeanField {
            d: 1,
            b0: vec![b],
            b_x: vec![0.0],
            b_mean: vec![0.0],
            sigma: vec![sigma],
            gamma: vec![gamma],
        }
    }

    /// Scalar mean-reverting benchmark: `b = rate * (x_bar_weight * mean(m) - x)`,
    /// constant `sigma`, `gamma`. With `x_bar_weight = 0` this is the
    /// conditional Ornstein–Uhlenbeck system.
    pub fn ou_1d(rate: f64, mean_weight: f64, sigma: f64, gamma: f64) -> Self {
        CoefficientField::AffineMeanField {
            d: 1,
            b0: vec![0.0],
            b_x: vec![-rate],
            b_mean: vec![rate * mean_weight],
            sigma: vec![sigma],
            gamma: vec![gamma],
        }
    }

    /// Custom scalar field from three closures on (t, m, x, B_t).
    pub fn custom_1d(
        drift: impl Fn(&CoeffInput) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(&CoeffInput) -> f64 + Send + Sync + 'static,
        gamma: impl Fn(&CoeffInput) -> f64 + Send + Sync + 'static,
    ) -> Self {
        CoefficientField::Custom {
            d: 1,
            drift: Arc::new(move |inp, out| out[0] = drift(inp)),
            sigma: Arc::new(move |inp, out| out[0] = sigma(inp)),
            gamma: Arc::new(move |inp, out| out[0] = gamma(inp)),
        }
    }

    /// Drift vector into `out` (length d).
    pub fn drift(&self, input: &CoeffInput, out: &mut [f64]) {
        let d = self.dim();
        debug_assert_eq!(out.len(), d);
        match self {
            CoefficientField::AffineMeanField {
                b0, b_x, b_mean, ..
            } => {
                let mean = input.measure.mean();
                for i in 0..d {
                    let mut v = b0[i];
                    for j in 0..d {
                        v += b_x[i * d + j] * input.x[j] + b_mean[i * d + j] * mean[j];
                    }
                    out[i] = v;
                }
            }
            CoefficientField::LocalDensity {
                scale, bandwidth, ..
            } => {
                let rho = input.measure.kde(input.x, *bandwidth);
                for i in 0..d {
                    out[i] = scale[i] * rho;
                }
            }
            CoefficientField::ScenarioRandom {
                drift_base,
                path_weight,
                ..
            } => {
                for i in 0..d {
                    out[i] = drift_base[i] + path_weight * input.common_noise(i);
                }
            }
            CoefficientField::Custom { drift, .. } => drift(input, out),
        }
    }

    /// Idiosyncratic diffusion matrix into `out` (row-major d*d).
    pub fn sigma(&self, input: &CoeffInput, out: &mut [f64]) {
        let d = self.dim();
        debug_assert_eq!(out.len(), d * d);
        match self {
            CoefficientField::AffineMeanField { sigma, .. }
            | CoefficientField::LocalDensity { sigma, .. }
            | CoefficientField::ScenarioRandom { sigma, .. } => {
                write_diag_or_full(sigma, d, out)
            }
            CoefficientField::Custom { sigma, .. } => sigma(input, out),
        }
    }

    /// Common-noise loading matrix into `out` (row-major d*d).
    pub fn gamma(&self, input: &CoeffInput, out: &mut [f64]) {
        let d = self.dim();
        debug_assert_eq!(out.len(), d * d);
        match self {
            CoefficientField::AffineMeanField { gamma, .. }
            | CoefficientField::LocalDensity { gamma, .. }
            | CoefficientField::ScenarioRandom { gamma, .. } => {
                write_diag_or_full(gamma, d, out)
            }
            CoefficientField::Custom { gamma, .. } => gamma(input, out),
        }
    }

    /// Full diffusion matrix `a = sigma sigma^T + gamma gamma^T` into `out`.
    pub fn covariance(&self, input: &CoeffInput, out: &mut [f64]) {
        let d = self.dim();
        let mut s = vec![0.0; d * d];
        let mut g = vec![0.0; d * d];
        self.sigma(input, &mut s);
        self.gamma(input, &mut g);
        for i in 0..d {
            for j in 0..d {
                let mut v = 0.0;
                for k in 0..d {
                    v += s[i * d + k] * s[j * d + k] + g[i * d + k] * g[j * d + k];
                }
                out[i * d + j] = v;
            }
        }
    }

    /// Scalar fast path: `(b, sigma, gamma)` at a d = 1 input.
    pub fn eval_1d(&self, input: &CoeffInput) -> (f64, f64, f64) {
        debug_assert_eq!(self.dim(), 1);
        let mut b = [0.0];
        let mut s = [0.0];
        let mut g = [0.0];
        self.drift(input, &mut b);
        self.sigma(input, &mut s);
        self.gamma(input, &mut g);
        (b[0], s[0], g[0])
    }
}

/// Per-step evaluator that hoists measure statistics out of the particle
/// loop.
///
/// Evaluating `mean(m)` inside the drift for every particle would make an
/// affine mean-field step O(N^2); preparing once per step keeps it O(N).
pub struct PreparedCoeffs<'a> {
    field: &'a CoefficientField,
    t: f64,
    measure: &'a MeasureView<'a>,
    scenario: Option<(&'a Scenario, usize)>,
    cached_mean: Option<Vec<f64>>,
    cached_drift: Option<Vec<f64>>,
}

impl CoefficientField {
    /// Bind the field to one (time, measure, scenario-node) triple.
    pub fn prepare<'a>(
        &'a self,
        t: f64,
        measure: &'a MeasureView<'a>,
        scenario: Option<(&'a Scenario, usize)>,
    ) -> PreparedCoeffs<'a> {
        let cached_mean = match self {
            CoefficientField::AffineMeanField { .. } => Some(measure.mean()),
            _ => None,
        };
        let cached_drift = match self {
            CoefficientField::ScenarioRandom {
                d,
                drift_base,
                path_weight,
                ..
            } => {
                let probe = CoeffInput {
                    t,
                    x: &[],
                    measure,
                    scenario,
                };
                Some(
                    (0..*d)
                        .map(|i| drift_base[i] + path_weight * probe.common_noise(i))
                        .collect(),
                )
            }
            _ => None,
        };
        PreparedCoeffs {
            field: self,
            t,
            measure,
            scenario,
            cached_mean,
            cached_drift,
        }
    }
}

impl PreparedCoeffs<'_> {
    fn input<'b>(&'b self, x: &'b [f64]) -> CoeffInput<'b> {
        CoeffInput {
            t: self.t,
            x,
            measure: self.measure,
            scenario: self.scenario,
        }
    }

    /// Drift vector at state `x` into `out`.
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        match self.field {
            CoefficientField::AffineMeanField {
                d, b0, b_x, b_mean, ..
            } => {
                let mean = self.cached_mean.as_ref().expect("prepared mean");
                let d = *d;
                for i in 0..d {
                    let mut v = b0[i];
                    for j in 0..d {
                        v += b_x[i * d + j] * x[j] + b_mean[i * d + j] * mean[j];
                    }
                    out[i] = v;
                }
            }
            CoefficientField::ScenarioRandom { .. } => {
                out.copy_from_slice(self.cached_drift.as_ref().expect("prepared drift"));
            }
            _ => self.field.drift(&self.input(x), out),
        }
    }

    /// Idiosyncratic diffusion matrix at state `x` into `out` (row-major).
    pub fn sigma(&self, x: &[f64], out: &mut [f64]) {
        self.field.sigma(&self.input(x), out)
    }

    /// Common-noise loading matrix at state `x` into `out` (row-major).
    pub fn gamma(&self, x: &[f64], out: &mut [f64]) {
        self.field.gamma(&self.input(x), out)
    }

    /// Scalar fast path.
    pub fn eval_1d(&self, x: f64) -> (f64, f64, f64) {
        let xs = [x];
        let mut b = [0.0];
        let mut s = [0.0];
        let mut g = [0.0];
        self.drift(&xs, &mut b);
        self.sigma(&xs, &mut s);
        self.gamma(&xs, &mut g);
        (b[0], s[0], g[0])
    }
}

/// Accept either a d-vector (interpreted as a diagonal) or a full d*d matrix.
fn write_diag_or_full(stored: &[f64], d: usize, out: &mut [f64]) {
    if stored.len() == d * d {
        out.copy_from_slice(stored);
    } else {
        debug_assert_eq!(stored.len(), d);
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = stored[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::EmpiricalMeasure;

    #[test]
    fn affine_field_evaluates_mean_coupling() {
        let field = CoefficientField::AffineMeanField {
            d: 1,
            b0: vec![0.5],
            b_x: vec![-2.0],
            b_mean: vec![1.0],
            sigma: vec![0.3],
            gamma: vec![0.7],
        };
        let m = EmpiricalMeasure::from_points_1d(vec![1.0, 3.0]).unwrap();
        let view = m.view();
        let input = CoeffInput {
            t: 0.0,
            x: &[1.5],
            measure: &view,
            scenario: None,
        };
        let (b, s, g) = field.eval_1d(&input);
        assert!((b - (0.5 - 3.0 + 2.0)).abs() < 1e-14);
        assert_eq!(s, 0.3);
        assert_eq!(g, 0.7);
        let mut a = [0.0];
        field.covariance(&input, &mut a);
        assert!((a[0] - (0.09 + 0.49)).abs() < 1e-14);
    }

    #[test]
    fn scenario_random_field_reads_history() {
        use crate::grid::TimeGrid;
        let field = CoefficientField::ScenarioRandom {
            d: 1,
            drift_base: vec![0.0],
            path_weight: 1.0,
            sigma: vec![1.0],
            gamma: vec![0.0],
        };
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let scenario = Scenario::generate(3, 0, grid, 1).unwrap();
        let m = EmpiricalMeasure::from_points_1d(vec![0.0]).unwrap();
        let view = m.view();
        for node in 0..=8 {
            let input = CoeffInput {
                t: grid.node(node),
                x: &[0.0],
                measure: &view,
                scenario: Some((&scenario, node)),
            };
            let (b, _, _) = field.eval_1d(&input);
            assert_eq!(b, scenario.value(node)[0]);
        }
    }

    #[test]
    fn prepared_evaluator_matches_direct_evaluation() {
        let field = CoefficientField::ou_1d(1.7, 0.6, 0.4, 0.9);
        let m = EmpiricalMeasure::from_points_1d(vec![-1.0, 0.5, 2.5]).unwrap();
        let view = m.view();
        let prepared = field.prepare(0.3, &view, None);
        for &x in &[-2.0, 0.0, 1.25] {
            let input = CoeffInput {
                t: 0.3,
                x: &[x],
                measure: &view,
                scenario: None,
            };
            let direct = field.eval_1d(&input);
            let fast = prepared.eval_1d(x);
            assert_eq!(direct, fast);
        }
    }

    #[test]
    fn custom_field_closures_receive_context() {
        let field = CoefficientField::custom_1d(
            |inp| inp.t + inp.x[0],
            |_| 1.0,
            |inp| inp.measure.mean()[0],
        );
        let m = EmpiricalMeasure::from_points_1d(vec![2.0, 4.0]).unwrap();
        let view = m.view();
        let input = CoeffInput {
            t: 0.25,
            x: &[1.0],
            measure: &view,
            scenario: None,
        };
        let (b, s, g) = field.eval_1d(&input);
        assert!((b - 1.25).abs() < 1e-15);
        assert_eq!(s, 1.0);
        assert!((g - 3.0).abs() < 1e-15);
    }
}
