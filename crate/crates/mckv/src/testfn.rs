//! Compactly supported twice-differentiable test functions.
//!
//! Weak-form residuals, cylindrical functionals and lifted coordinates all
//! pair measures against test functions `phi` for which the value, gradient
//! and Hessian must be available in closed form and vanish identically
//! outside a ball. Two profiles are provided:
//!
//! * [`BumpProfile::Smooth`] — the classical mollifier-style bump
//!   `exp(1 - 1/(1 - s))` with `s = |x - c|^2 / r^2`, infinitely
//!   differentiable, value 1 at the center;
//! * [`BumpProfile::Polynomial`] — `P(u) * w(s)` where `P` is a univariate
//!   polynomial in the normalized coordinate `u = (x - c) . e / r` along a
//!   unit direction `e` and `w` is a C^2 plateau equal to 1 on an inner ball
//!   and descending to 0 via a quintic smoothstep. This gives bumps that are
//!   exactly polynomial (e.g. linear or odd) on a neighborhood of the center,
//!   which several benchmark identities need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a bump on the unit ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BumpProfile {
    /// `exp(1 - 1/(1 - s))`, `s = |x-c|^2/r^2`; smooth, value 1 at center.
    Smooth,
    /// `P(u) * plateau(s)` with `P(u) = sum_k coeffs[k] u^k`.
    Polynomial {
        /// Polynomial coefficients in the normalized directional coordinate.
        coeffs: Vec<f64>,
        /// `s`-fraction below which the plateau is exactly 1 (in `(0, 1)`).
        plateau_fraction: f64,
        /// Unit direction for the coordinate `u` (length d).
        direction: Vec<f64>,
    },
}

/// A compactly supported C^2 function on R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    center: Vec<f64>,
    radius: f64,
    amplitude: f64,
    profile: BumpProfile,
}

impl TestFunction {
    /// Smooth bump of amplitude 1 supported on `|x - center| < radius`.
    pub fn smooth_bump(center: Vec<f64>, radius: f64) -> Result<Self> {
        Self::validate(&center, radius)?;
        Ok(TestFunction {
            center,
            radius,
            amplitude: 1.0,
            profile: BumpProfile::Smooth,
        })
    }

    /// Smooth bump with an explicit amplitude.
    pub fn scaled_smooth_bump(center: Vec<f64>, radius: f64, amplitude: f64) -> Result<Self> {
        if !amplitude.is_finite() {
            return Err(Error::invalid("bump amplitude must be finite"));
        }
        let mut f = Self::smooth_bump(center, radius)?;
        f.amplitude = amplitude;
        Ok(f)
    }

    /// Polynomial bump along the first coordinate axis with plateau 0.5.
    pub fn polynomial_bump(center: Vec<f64>, radius: f64, coeffs: Vec<f64>) -> Result<Self> {
        let d = center.len();
        let mut direction = vec![0.0; d];
        direction[0] = 1.0;
        Self::polynomial_bump_along(center, radius, coeffs, direction, 0.5)
    }

    /// Polynomial bump with explicit direction and plateau fraction.
    pub fn polynomial_bump_along(
        center: Vec<f64>,
        radius: f64,
        coeffs: Vec<f64>,
        direction: Vec<f64>,
        plateau_fraction: f64,
    ) -> Result<Self> {
        Self::validate(&center, radius)?;
        if coeffs.is_empty() {
            return Err(Error::invalid("polynomial bump needs at least one coefficient"));
        }
        if direction.len() != center.len() {
            return Err(Error::DimensionMismatch {
                context: "polynomial bump direction",
                expected: center.len(),
                got: direction.len(),
            });
        }
        let norm: f64 = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::invalid("bump direction must be a nonzero vector"));
        }
        let direction = direction.iter().map(|v| v / norm).collect();
        if !(plateau_fraction > 0.0 && plateau_fraction < 1.0) {
            return Err(Error::invalid("plateau fraction must lie in (0, 1)"));
        }
        Ok(TestFunction {
            center,
            radius,
            amplitude: 1.0,
            profile: BumpProfile::Polynomial {
                coeffs,
                plateau_fraction,
                direction,
            },
        })
    }

    fn validate(center: &[f64], radius: f64) -> Result<()> {
        if center.is_empty() {
            return Err(Error::invalid("bump center must have dimension >= 1"));
        }
        if !center.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("bump center must be finite"));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::invalid("bump radius must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// True when `x` lies strictly inside the support ball.
    pub fn supported_at(&self, x: &[f64]) -> bool {
        let mut s = 0.0;
        for j in 0..self.center.len() {
            let dj = x[j] - self.center[j];
            s += dj * dj;
        }
        s < self.radius * self.radius
    }

    /// Value only.
    pub fn value(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let mut s = 0.0;
        for j in 0..d {
            let dj = x[j] - self.center[j];
            s += dj * dj;
        }
        s /= self.radius * self.radius;
        if s >= 1.0 {
            return 0.0;
        }
        match &self.profile {
            BumpProfile::Smooth => {
                let (h, _, _) = smooth_profile(s);
                self.amplitude * h
            }
            BumpProfile::Polynomial {
                coeffs,
                plateau_fraction,
                direction,
            } => {
                let mut u = 0.0;
                for j in 0..d {
                    u += (x[j] - self.center[j]) * direction[j];
                }
                u /= self.radius;
                let (p, _, _) = horner(coeffs, u);
                let (w, _, _) = plateau_profile(s, *plateau_fraction);
                self.amplitude * p * w
            }
        }
    }

    /// Value, gradient and Hessian at `x`. `grad` has length d and `hess` is
    /// a row-major d-by-d buffer; both are fully overwritten.
    pub fn eval(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        debug_assert_eq!(grad.len(), d);
        debug_assert_eq!(hess.len(), d * d);

        let r2 = self.radius * self.radius;
        let mut s = 0.0;
        for j in 0..d {
            let dj = x[j] - self.center[j];
            s += dj * dj;
        }
        s /= r2;
        if s >= 1.0 {
            grad.fill(0.0);
            hess.fill(0.0);
            return 0.0;
        }
        // ds/dx = 2 (x - c) / r^2,  d2s/dx2 = (2 / r^2) I.
        let mut ds = vec![0.0; d];
        for j in 0..d {
            ds[j] = 2.0 * (x[j] - self.center[j]) / r2;
        }
        match &self.profile {
            BumpProfile::Smooth => {
                let (h, dh, d2h) = smooth_profile(s);
                let a = self.amplitude;
                for i in 0..d {
                    grad[i] = a * dh * ds[i];
                    for j in 0..d {
                        let mut v = a * d2h * ds[i] * ds[j];
                        if i == j {
                            v += a * dh * 2.0 / r2;
                        }
                        hess[i * d + j] = v;
                    }
                }
                a * h
            }
            BumpProfile::Polynomial {
                coeffs,
                plateau_fraction,
                direction,
            } => {
                let mut u = 0.0;
                for j in 0..d {
                    u += (x[j] - self.center[j]) * direction[j];
                }
                u /= self.radius;
                let (p, dp, d2p) = horner(coeffs, u);
                let (w, dw, d2w) = plateau_profile(s, *plateau_fraction);
                let a = self.amplitude;
                // du/dx = e / r.
                for i in 0..d {
                    grad[i] = a * (dp * w * direction[i] / self.radius + p * dw * ds[i]);
                }
                for i in 0..d {
                    for j in 0..d {
                        let mut v = a * d2p * w * direction[i] * direction[j] / r2;
                        v += a * dp * dw * (direction[i] * ds[j] + ds[i] * direction[j])
                            / self.radius;
                        v += a * p * d2w * ds[i] * ds[j];
                        if i == j {
                            v += a * p * dw * 2.0 / r2;
                        }
                        hess[i * d + j] = v;
                    }
                }
                a * p * w
            }
        }
    }

    /// Scalar fast path for d = 1: returns `(phi, phi', phi'')`.
    pub fn eval1(&self, x: f64) -> (f64, f64, f64) {
        debug_assert_eq!(self.dim(), 1);
        let mut grad = [0.0];
        let mut hess = [0.0];
        let v = self.eval(&[x], &mut grad, &mut hess);
        (v, grad[0], hess[0])
    }
}

/// `h(s) = exp(1 - 1/(1-s))` with first and second derivatives in `s`.
fn smooth_profile(s: f64) -> (f64, f64, f64) {
    debug_assert!((0.0..1.0).contains(&s));
    let one_minus = 1.0 - s;
    let h = (1.0 - 1.0 / one_minus).exp();
    if h == 0.0 {
        // Deep in the boundary layer everything underflows together.
        return (0.0, 0.0, 0.0);
    }
    let inv2 = 1.0 / (one_minus * one_minus);
    let dh = -h * inv2;
    let d2h = h * (inv2 * inv2 - 2.0 * inv2 / one_minus);
    (h, dh, d2h)
}

/// C^2 plateau in `s`: 1 on `[0, theta]`, quintic smoothstep down to 0 at 1.
fn plateau_profile(s: f64, theta: f64) -> (f64, f64, f64) {
    if s <= theta {
        return (1.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let width = 1.0 - theta;
    let v = (s - theta) / width;
    // Quintic smoothstep: zero first and second derivatives at both ends.
    let step = v * v * v * (10.0 + v * (-15.0 + 6.0 * v));
    let dstep = 30.0 * v * v * (1.0 + v * (-2.0 + v));
    let d2step = 60.0 * v * (1.0 + v * (-3.0 + 2.0 * v));
    (1.0 - step, -dstep / width, -d2step / (width * width))
}

/// Evaluate `P(u)`, `P'(u)`, `P''(u)` by Horner's rule.
fn horner(coeffs: &[f64], u: f64) -> (f64, f64, f64) {
    let mut p = 0.0;
    let mut dp = 0.0;
    let mut d2p = 0.0;
    for &c in coeffs.iter().rev() {
        d2p = d2p * u + 2.0 * dp;
        dp = dp * u + p;
        p = p * u + c;
    }
    (p, dp, d2p)
}

/// An ordered family of pairwise-distinct test functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBasis {
    functions: Vec<TestFunction>,
}

impl TestBasis {
    pub fn new(functions: Vec<TestFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::EmptyInput("test basis".into()));
        }
        let d = functions[0].dim();
        for (i, f) in functions.iter().enumerate() {
            if f.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: "test basis",
                    expected: d,
                    got: f.dim(),
                });
            }
            for g in &functions[..i] {
                if f == g {
                    return Err(Error::invalid(format!(
                        "test basis contains duplicate function at position {i}"
                    )));
                }
            }
        }
        Ok(TestBasis { functions })
    }

    /// A lattice of smooth bumps covering `[x_lo, x_hi]` (d = 1) with dyadic
    /// radii: level l uses radius `(x_hi - x_lo) / 2^l` and centers spaced by
    /// one radius. Levels are appended until `count` functions exist.
    pub fn dyadic_lattice(x_lo: f64, x_hi: f64, count: usize) -> Result<Self> {
        if !(x_hi > x_lo) {
            return Err(Error::invalid("dyadic lattice needs x_lo < x_hi"));
        }
        if count == 0 {
            return Err(Error::EmptyInput("test basis".into()));
        }
        let span = x_hi - x_lo;
        let mut functions = Vec::with_capacity(count);
        let mut level = 1u32;
        'outer: loop {
            let r = span / f64::from(1u32 << level);
            let mut c = x_lo + r;
            while c <= x_hi - r + 1e-12 {
                functions.push(TestFunction::smooth_bump(vec![c], r)?);
                if functions.len() == count {
                    break 'outer;
                }
                c += r;
            }
            level += 1;
            if level > 24 {
                return Err(Error::invalid(
                    "dyadic lattice exhausted refinement levels before reaching count",
                ));
            }
        }
        Self::new(functions)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.functions[0].dim()
    }

    pub fn function(&self, i: usize) -> &TestFunction {
        &self.functions[i]
    }

    pub fn functions(&self) -> &[TestFunction] {
        &self.functions
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    /// Central finite differences of the value function.
    fn fd_gradient(f: &TestFunction, x: &[f64], h: f64) -> Vec<f64> {
        let d = x.len();
        let mut g = vec![0.0; d];
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            g[j] = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
        }
        g
    }

    fn fd_hessian(f: &TestFunction, x: &[f64], h: f64) -> Vec<f64> {
        let d = x.len();
        let mut hess = vec![0.0; d * d];
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let gp = fd_gradient(f, &xp, h);
            let gm = fd_gradient(f, &xm, h);
            for i in 0..d {
                hess[i * d + j] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        hess
    }

    fn check_derivatives(f: &TestFunction, points: &[Vec<f64>], tol: f64) {
        let d = f.dim();
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for x in points {
            let v = f.eval(x, &mut grad, &mut hess);
            assert!((v - f.value(x)).abs() <= 1e-14 * (1.0 + v.abs()));
            let g_fd = fd_gradient(f, x, 1e-5);
            for j in 0..d {
                let scale = grad[j].abs().max(1e-3);
                assert!(
                    (grad[j] - g_fd[j]).abs() <= tol * scale,
                    "gradient mismatch at {x:?}: {} vs {}",
                    grad[j],
                    g_fd[j]
                );
            }
            let h_fd = fd_hessian(f, x, 1e-4);
            for j in 0..d * d {
                let scale = hess[j].abs().max(1e-2);
                assert!(
                    (hess[j] - h_fd[j]).abs() <= 200.0 * tol * scale,
                    "hessian mismatch at {x:?}: {} vs {}",
                    hess[j],
                    h_fd[j]
                );
            }
        }
    }

    fn interior_points(f: &TestFunction, n: usize, max_s: f64) -> Vec<Vec<f64>> {
        let d = f.dim();
        let mut rng = StreamRng::for_stream(17, 0, 1);
        let mut pts = Vec::new();
        while pts.len() < n {
            let x: Vec<f64> = (0..d)
                .map(|j| f.center()[j] + f.radius() * rng.next_uniform_in(-1.0, 1.0))
                .collect();
            let s: f64 = (0..d)
                .map(|j| (x[j] - f.center()[j]).powi(2))
                .sum::<f64>()
                / (f.radius() * f.radius());
            if s < max_s {
                pts.push(x);
            }
        }
        pts
    }

    #[test]
    fn smooth_bump_matches_finite_differences() {
        let f = TestFunction::smooth_bump(vec![0.3, -0.2], 1.5).unwrap();
        let pts = interior_points(&f, 100, 0.6);
        check_derivatives(&f, &pts, 1e-6);
    }

    #[test]
    fn polynomial_bump_matches_finite_differences() {
        let f = TestFunction::polynomial_bump(vec![0.0], 2.0, vec![0.5, 1.0, -0.25, 2.0]).unwrap();
        let pts = interior_points(&f, 100, 0.9);
        check_derivatives(&f, &pts, 1e-6);
    }

    #[test]
    fn values_vanish_outside_support() {
        let f = TestFunction::smooth_bump(vec![1.0], 0.5).unwrap();
        let mut grad = [0.0];
        let mut hess = [0.0];
        for x in [0.49, 1.51, 3.0, -2.0, 1.5] {
            assert_eq!(f.value(&[x]), 0.0);
            assert_eq!(f.eval(&[x], &mut grad, &mut hess), 0.0);
            assert_eq!(grad[0], 0.0);
            assert_eq!(hess[0], 0.0);
        }
    }

    #[test]
    fn smooth_bump_center_value_and_gradient() {
        let f = TestFunction::smooth_bump(vec![0.0, 0.0, 0.0], 2.0).unwrap();
        let mut grad = [0.0; 3];
        let mut hess = [0.0; 9];
        let v = f.eval(&[0.0, 0.0, 0.0], &mut grad, &mut hess);
        assert!((v - 1.0).abs() < 1e-15);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn polynomial_bump_is_exactly_polynomial_on_plateau() {
        // phi(x) = x on the inner half of the ball.
        let f = TestFunction::polynomial_bump(vec![0.0], 2.0, vec![0.0, 2.0]).unwrap();
        for x in [-1.2, -0.5, 0.0, 0.7, 1.3] {
            // s = x^2/4 <= 0.5 iff |x| <= sqrt(2).
            let (v, dv, d2v) = f.eval1(x);
            assert!((v - x).abs() < 1e-14, "value at {x}");
            assert!((dv - 1.0).abs() < 1e-14);
            assert!(d2v.abs() < 1e-13);
        }
    }

    #[test]
    fn continuity_across_support_boundary() {
        let f = TestFunction::polynomial_bump(vec![0.0], 1.0, vec![1.0, 1.0]).unwrap();
        let (v, dv, d2v) = f.eval1(1.0 - 1e-8);
        assert!(v.abs() < 1e-14);
        assert!(dv.abs() < 1e-6);
        assert!(d2v.abs() < 1e-2);
    }

    #[test]
    fn basis_rejects_duplicates_and_builds_lattice() {
        let f = TestFunction::smooth_bump(vec![0.0], 1.0).unwrap();
        assert!(TestBasis::new(vec![f.clone(), f.clone()]).is_err());
        let basis = TestBasis::dyadic_lattice(-4.0, 4.0, 16).unwrap();
        assert_eq!(basis.len(), 16);
        // Functions live inside the interval and are pairwise distinct.
        for f in basis.functions() {
            assert!(f.center()[0] - f.radius() >= -4.0 - 1e-9);
            assert!(f.center()[0] + f.radius() <= 4.0 + 1e-9);
        }
    }
}
