//! Nonparametric conditional-expectation estimation on time slices.
//!
//! Given per-time-node samples `(x_i, f_i, y_i)` — a scalar conditioning
//! state, optional extra conditioning features, and one or more response
//! columns — [`KernelSurface`] fits a Nadaraya–Watson regressor per slice
//! and answers queries `E[y | x, f]`. This is the workhorse behind the
//! Markovian projection: the responses are drift and squared-volatility
//! samples harvested from a non-Markovian system, and the fitted surface
//! becomes the coefficient field of the mimicking diffusion.
//!
//! Evaluation is binned for speed: samples are deposited onto a uniform
//! grid of bins by linear splitting, numerator and denominator arrays are
//! convolved with a discrete Gaussian of the slice bandwidth, and queries
//! interpolate the two arrays linearly before dividing. Extra features are
//! handled by per-batch sample weights: a batch of queries sharing one
//! feature vector re-weights the deposit pass with Gaussian factors per
//! live feature dimension. Feature dimensions that are constant across the
//! slice's samples are degenerate — they carry no information — and are
//! skipped entirely, so a fit with constant extra features reproduces the
//! plain fit bit for bit.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{kahan_sum, mean};

/// Gaussian kernel truncation radius in bandwidths. Beyond this the kernel
/// is treated as zero both in the blur stencil and in the bin padding.
const KERNEL_SUPPORT: f64 = 4.0;

/// A feature dimension whose sample standard deviation falls below this is
/// degenerate: it receives weight exactly 1 regardless of the query.
const DEGENERATE_STD: f64 = 1e-12;

/// Denominators below this (relative to the slice total weight) mark bins
/// with no effective sample support.
const EMPTY_DEN_REL: f64 = 1e-12;

/// Samples observed at one time node.
#[derive(Debug, Clone, Default)]
pub struct SliceData {
    /// Conditioning state, length `n`.
    pub x: Vec<f64>,
    /// Extra conditioning features, row-major `n * n_features`.
    pub features: Vec<f64>,
    /// Response columns, row-major `n * n_responses`.
    pub responses: Vec<f64>,
}

impl SliceData {
    pub fn n_samples(&self) -> usize {
        self.x.len()
    }
}

/// Tuning knobs for [`KernelSurface::fit`].
#[derive(Debug, Clone)]
pub struct RegressionConfig {
    /// Number of bins per slice.
    pub n_bins: usize,
    /// Multiplier on the rule-of-thumb state bandwidth.
    pub bandwidth_scale: f64,
    /// Multiplier on the rule-of-thumb feature bandwidths.
    pub feature_bandwidth_scale: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            n_bins: 256,
            bandwidth_scale: 1.0,
            feature_bandwidth_scale: 1.0,
        }
    }
}

/// Precomputed binned numerator/denominator arrays for unit sample weights.
#[derive(Debug, Clone)]
struct BinnedArrays {
    /// `n_bins` blurred weights.
    den: Vec<f64>,
    /// `n_responses * n_bins`, response-major, blurred weighted responses.
    num: Vec<f64>,
}

#[derive(Debug, Clone)]
struct FittedSlice {
    /// Retained samples (needed for per-batch re-weighting).
    data: SliceData,
    /// Sample range of the state (clamp targets for queries).
    x_lo: f64,
    x_hi: f64,
    /// Bin geometry: padded origin and spacing.
    bin_lo: f64,
    bin_dx: f64,
    /// State bandwidth.
    h_x: f64,
    /// Per-feature bandwidths; 0.0 marks a degenerate dimension.
    feature_h: Vec<f64>,
    /// Normalized discrete Gaussian stencil (half-width implied by length).
    stencil: Vec<f64>,
    /// All state values coincide: estimates reduce to weighted means.
    constant_x: bool,
    /// Cached arrays for the unit-weight case, reused whenever a query
    /// batch activates no live feature.
    plain: BinnedArrays,
    /// Mean response per column, the ultimate fallback.
    mean_response: Vec<f64>,
}

/// One fitted regressor per time node, with shared response layout.
#[derive(Debug)]
pub struct KernelSurface {
    n_features: usize,
    n_responses: usize,
    n_bins: usize,
    /// For every node, the index of the fitted slice that serves it (the
    /// node itself when it had samples, else the nearest populated node).
    serving: Vec<usize>,
    slices: Vec<Option<FittedSlice>>,
    warnings: Vec<String>,
    extrapolations: AtomicU64,
}

impl KernelSurface {
    /// Fit one regressor per entry of `slices`. Empty slices are allowed
    /// and are served by the nearest populated slice (with a warning);
    /// at least one slice must be populated.
    pub fn fit(
        slices: &[SliceData],
        n_features: usize,
        n_responses: usize,
        config: &RegressionConfig,
    ) -> Result<KernelSurface> {
        if slices.is_empty() {
            return Err(Error::EmptyInput("no slices to fit".into()));
        }
        if n_responses == 0 {
            return Err(Error::invalid("need at least one response column"));
        }
        if config.n_bins < 8 {
            return Err(Error::invalid("n_bins must be at least 8"));
        }
        if !(config.bandwidth_scale > 0.0 && config.feature_bandwidth_scale > 0.0) {
            return Err(Error::invalid("bandwidth scales must be positive"));
        }
        let mut fitted: Vec<Option<FittedSlice>> = Vec::with_capacity(slices.len());
        let mut warnings = Vec::new();
        for (k, data) in slices.iter().enumerate() {
            let n = data.n_samples();
            if data.features.len() != n * n_features {
                return Err(Error::DimensionMismatch {
                    context: "slice feature matrix",
                    expected: n * n_features,
                    got: data.features.len(),
                });
            }
            if data.responses.len() != n * n_responses {
                return Err(Error::DimensionMismatch {
                    context: "slice response matrix",
                    expected: n * n_responses,
                    got: data.responses.len(),
                });
            }
            if n == 0 {
                fitted.push(None);
                continue;
            }
            if data
                .x
                .iter()
                .chain(&data.features)
                .chain(&data.responses)
                .any(|v| !v.is_finite())
            {
                return Err(Error::invalid(format!(
                    "slice {k} contains non-finite samples"
                )));
            }
            fitted.push(Some(fit_slice(data, n_features, n_responses, config)?));
        }
        let populated: Vec<usize> = fitted
            .iter()
            .enumerate()
            .filter_map(|(k, s)| s.as_ref().map(|_| k))
            .collect();
        if populated.is_empty() {
            return Err(Error::EmptyInput("every slice is empty".into()));
        }
        let serving: Vec<usize> = (0..fitted.len())
            .map(|k| {
                if fitted[k].is_some() {
                    k
                } else {
                    *populated
                        .iter()
                        .min_by_key(|&&p| (p as i64 - k as i64).unsigned_abs())
                        .expect("populated is non-empty")
                }
            })
            .collect();
        for k in 0..fitted.len() {
            if serving[k] != k {
                warnings.push(format!(
                    "slice {k} has no samples; serving queries from slice {}",
                    serving[k]
                ));
            }
        }
        Ok(KernelSurface {
            n_features,
            n_responses,
            n_bins: config.n_bins,
            serving,
            slices: fitted,
            warnings,
            extrapolations: AtomicU64::new(0),
        })
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Fit-time diagnostics (empty-slice substitutions and the like).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Number of queries so far that fell outside the fitted state range
    /// and were answered by the clamped edge value.
    pub fn extrapolation_count(&self) -> u64 {
        self.extrapolations.load(Ordering::Relaxed)
    }

    pub fn reset_extrapolation_count(&self) {
        self.extrapolations.store(0, Ordering::Relaxed);
    }

    /// Estimate all responses at `(x, features)` on `slice`.
    pub fn evaluate(&self, slice: usize, x: f64, features: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_responses];
        self.evaluate_batch(slice, std::slice::from_ref(&x), features, &mut out)?;
        Ok(out)
    }

    /// Estimate all responses for a batch of state queries sharing one
    /// feature vector. `out` is row-major `queries.len() * n_responses`.
    ///
    /// The shared feature vector is what makes the binned pass reusable:
    /// per-sample weights depend on the features only, so one deposit and
    /// blur serves every query in the batch.
    pub fn evaluate_batch(
        &self,
        slice: usize,
        queries: &[f64],
        features: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        if features.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                context: "query feature vector",
                expected: self.n_features,
                got: features.len(),
            });
        }
        if out.len() != queries.len() * self.n_responses {
            return Err(Error::DimensionMismatch {
                context: "regression output buffer",
                expected: queries.len() * self.n_responses,
                got: out.len(),
            });
        }
        if slice >= self.slices.len() {
            return Err(Error::invalid(format!(
                "slice index {slice} out of range ({} slices)",
                self.slices.len()
            )));
        }
        let fitted = self.slices[self.serving[slice]]
            .as_ref()
            .expect("serving slice is populated");

        // Per-sample feature weights; `None` means all weights are exactly 1
        // and the cached plain arrays apply unchanged.
        let weights = self.effective_feature_weights(fitted, features, queries.len() as u64);

        if fitted.constant_x {
            let est = match &weights {
                None => fitted.mean_response.clone(),
                Some(w) => weighted_mean_response(fitted, w, self.n_responses),
            };
            for (q, &x) in queries.iter().enumerate() {
                self.count_extrapolation(fitted, x);
                out[q * self.n_responses..(q + 1) * self.n_responses].copy_from_slice(&est);
            }
            return Ok(());
        }

        let rebuilt;
        let arrays = match &weights {
            None => &fitted.plain,
            Some(w) => {
                rebuilt = bin_and_blur(fitted, Some(w), self.n_bins, self.n_responses);
                &rebuilt
            }
        };
        let total_weight = kahan_sum(arrays.den.iter().copied());
        let empty_floor = total_weight * EMPTY_DEN_REL;
        for (q, &x) in queries.iter().enumerate() {
            self.count_extrapolation(fitted, x);
            let xq = x.clamp(fitted.x_lo, fitted.x_hi);
            let pos = (xq - fitted.bin_lo) / fitted.bin_dx;
            let j = (pos.floor() as usize).min(self.n_bins - 2);
            let theta = (pos - j as f64).clamp(0.0, 1.0);
            let den = (1.0 - theta) * arrays.den[j] + theta * arrays.den[j + 1];
            let row = &mut out[q * self.n_responses..(q + 1) * self.n_responses];
            if den > empty_floor {
                for r in 0..self.n_responses {
                    let base = r * self.n_bins;
                    let num = (1.0 - theta) * arrays.num[base + j] + theta * arrays.num[base + j + 1];
                    row[r] = num / den;
                }
            } else {
                // No effective support at the query: walk to the nearest
                // supported bin, falling back to the global mean response.
                match nearest_supported_bin(&arrays.den, pos, empty_floor) {
                    Some(jn) => {
                        for r in 0..self.n_responses {
                            row[r] = arrays.num[r * self.n_bins + jn] / arrays.den[jn];
                        }
                    }
                    None => row.copy_from_slice(&fitted.mean_response),
                }
            }
        }
        Ok(())
    }

    /// Training state range `(min, max)` of the slice serving `slice`.
    pub fn slice_range(&self, slice: usize) -> Option<(f64, f64)> {
        let serving = *self.serving.get(slice)?;
        self.slices[serving].as_ref().map(|s| (s.x_lo, s.x_hi))
    }

    /// Number of training samples in the slice serving `slice`.
    pub fn slice_sample_count(&self, slice: usize) -> Option<usize> {
        let serving = *self.serving.get(slice)?;
        self.slices[serving].as_ref().map(|s| s.data.n_samples())
    }

    /// Mean feature vector of the training samples serving `slice`.
    pub fn slice_feature_means(&self, slice: usize) -> Option<Vec<f64>> {
        let serving = *self.serving.get(slice)?;
        let s = self.slices[serving].as_ref()?;
        if self.n_features == 0 {
            return Some(Vec::new());
        }
        let n = s.data.n_samples();
        Some(
            (0..self.n_features)
                .map(|f| {
                    kahan_sum(
                        s.data
                            .features
                            .iter()
                            .skip(f)
                            .step_by(self.n_features)
                            .copied(),
                    ) / n as f64
                })
                .collect(),
        )
    }

    /// Direct O(n) Nadaraya–Watson evaluation, bypassing the bins. Exists
    /// to cross-check the binned route and to serve one-off queries with
    /// per-query features.
    pub fn evaluate_exact(&self, slice: usize, x: f64, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                context: "query feature vector",
                expected: self.n_features,
                got: features.len(),
            });
        }
        if slice >= self.slices.len() {
            return Err(Error::invalid(format!(
                "slice index {slice} out of range ({} slices)",
                self.slices.len()
            )));
        }
        let fitted = self.slices[self.serving[slice]]
            .as_ref()
            .expect("serving slice is populated");
        self.count_extrapolation(fitted, x);
        let xq = x.clamp(fitted.x_lo, fitted.x_hi);
        let n = fitted.data.n_samples();
        let weights = self.effective_feature_weights(fitted, features, 0);
        let mut den = 0.0;
        let mut num = vec![0.0; self.n_responses];
        if !fitted.constant_x {
            for i in 0..n {
                let u = weights.as_ref().map_or(1.0, |w| w[i]);
                let t = (xq - fitted.data.x[i]) / fitted.h_x;
                if t.abs() >= KERNEL_SUPPORT {
                    continue;
                }
                let w = u * (-0.5 * t * t).exp();
                den += w;
                for r in 0..self.n_responses {
                    num[r] += w * fitted.data.responses[i * self.n_responses + r];
                }
            }
        }
        if den > 0.0 && den.is_finite() {
            for r in 0..self.n_responses {
                num[r] /= den;
            }
            Ok(num)
        } else {
            Ok(match &weights {
                None => fitted.mean_response.clone(),
                Some(w) => weighted_mean_response(fitted, w, self.n_responses),
            })
        }
    }

    fn count_extrapolation(&self, fitted: &FittedSlice, x: f64) {
        if x < fitted.x_lo || x > fitted.x_hi {
            self.extrapolations.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Feature weights for a query, with the no-support case resolved: a
    /// query whose features lie outside the kernel support of every
    /// training sample carries no conditioning information, so the feature
    /// weighting is dropped (plain state regression applies) and the
    /// affected queries are counted as extrapolating.
    fn effective_feature_weights(
        &self,
        fitted: &FittedSlice,
        features: &[f64],
        n_queries: u64,
    ) -> Option<Vec<f64>> {
        let w = feature_weights(fitted, features)?;
        let total = kahan_sum(w.iter().copied());
        if total > 0.0 && total.is_finite() {
            Some(w)
        } else {
            self.extrapolations.fetch_add(n_queries, Ordering::Relaxed);
            None
        }
    }
}

/// Rule-of-thumb bandwidth `1.06 sigma n^(-1/(4+d))` where `d` counts the
/// live conditioning dimensions.
fn silverman(std: f64, n: usize, d_eff: usize) -> f64 {
    1.06 * std * (n as f64).powf(-1.0 / (4.0 + d_eff as f64))
}

fn sample_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let m = kahan_sum(values.clone()) / n as f64;
    let ss = kahan_sum(values.map(|v| (v - m) * (v - m)));
    (ss / (n as f64 - 1.0)).sqrt()
}

fn fit_slice(
    data: &SliceData,
    n_features: usize,
    n_responses: usize,
    config: &RegressionConfig,
) -> Result<FittedSlice> {
    let n = data.n_samples();
    let x_std = sample_std(data.x.iter().copied(), n);
    let feature_std: Vec<f64> = (0..n_features)
        .map(|f| {
            sample_std(
                data.features
                    .iter()
                    .skip(f)
                    .step_by(n_features.max(1))
                    .copied(),
                n,
            )
        })
        .collect();
    // Degenerate dimensions carry no information and are excluded from the
    // effective dimension count, so a constant extra feature changes
    // nothing — including the remaining bandwidths.
    let live_features = feature_std.iter().filter(|&&s| s > DEGENERATE_STD).count();
    let constant_x = x_std <= DEGENERATE_STD;
    let d_eff = 1 + live_features;
    let h_x = silverman(x_std, n, d_eff) * config.bandwidth_scale;
    let feature_h: Vec<f64> = feature_std
        .iter()
        .map(|&s| {
            if s > DEGENERATE_STD {
                silverman(s, n, d_eff) * config.feature_bandwidth_scale
            } else {
                0.0
            }
        })
        .collect();

    let x_lo = data.x.iter().copied().fold(f64::INFINITY, f64::min);
    let x_hi = data.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_response: Vec<f64> = (0..n_responses)
        .map(|r| {
            mean(
                &data
                    .responses
                    .iter()
                    .skip(r)
                    .step_by(n_responses)
                    .copied()
                    .collect::<Vec<f64>>(),
            )
        })
        .collect();

    let (bin_lo, bin_dx, stencil) = if constant_x {
        (x_lo - 0.5, 1.0 / (config.n_bins - 1) as f64, vec![1.0])
    } else {
        let pad = KERNEL_SUPPORT * h_x;
        let lo = x_lo - pad;
        let hi = x_hi + pad;
        let dx = (hi - lo) / (config.n_bins - 1) as f64;
        let half = ((KERNEL_SUPPORT * h_x) / dx).ceil() as usize;
        let mut stencil = Vec::with_capacity(2 * half + 1);
        for j in -(half as i64)..=(half as i64) {
            let u = j as f64 * dx / h_x;
            stencil.push((-0.5 * u * u).exp());
        }
        let total = kahan_sum(stencil.iter().copied());
        for w in &mut stencil {
            *w /= total;
        }
        (lo, dx, stencil)
    };

    let mut slice = FittedSlice {
        data: data.clone(),
        x_lo,
        x_hi,
        bin_lo,
        bin_dx,
        h_x,
        feature_h,
        stencil,
        constant_x,
        plain: BinnedArrays {
            den: Vec::new(),
            num: Vec::new(),
        },
        mean_response,
    };
    if !constant_x {
        slice.plain = bin_and_blur(&slice, None, config.n_bins, n_responses);
    }
    Ok(slice)
}

/// Per-sample weights for a query feature vector, or `None` when every live
/// dimension is absent (weights identically 1).
fn feature_weights(fitted: &FittedSlice, features: &[f64]) -> Option<Vec<f64>> {
    let n_features = fitted.feature_h.len();
    if fitted.feature_h.iter().all(|&h| h == 0.0) {
        return None;
    }
    let n = fitted.data.n_samples();
    let mut weights = vec![1.0; n];
    for f in 0..n_features {
        let h = fitted.feature_h[f];
        if h == 0.0 {
            continue;
        }
        for i in 0..n {
            let t = (features[f] - fitted.data.features[i * n_features + f]) / h;
            weights[i] *= if t.abs() >= KERNEL_SUPPORT {
                0.0
            } else {
                (-0.5 * t * t).exp()
            };
        }
    }
    Some(weights)
}

fn weighted_mean_response(fitted: &FittedSlice, weights: &[f64], n_responses: usize) -> Vec<f64> {
    let den = kahan_sum(weights.iter().copied());
    if den <= 0.0 {
        return fitted.mean_response.clone();
    }
    (0..n_responses)
        .map(|r| {
            kahan_sum(
                weights
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| w * fitted.data.responses[i * n_responses + r]),
            ) / den
        })
        .collect()
}

/// Deposit (weighted) samples onto the bins by linear splitting, then blur
/// numerators and denominator with the slice's Gaussian stencil.
fn bin_and_blur(
    fitted: &FittedSlice,
    weights: Option<&[f64]>,
    n_bins: usize,
    n_responses: usize,
) -> BinnedArrays {
    let n = fitted.data.n_samples();
    let mut raw_den = vec![0.0; n_bins];
    let mut raw_num = vec![0.0; n_responses * n_bins];
    for i in 0..n {
        let u = weights.map_or(1.0, |w| w[i]);
        if u == 0.0 {
            continue;
        }
        let pos = (fitted.data.x[i] - fitted.bin_lo) / fitted.bin_dx;
        let j = (pos.floor() as usize).min(n_bins - 2);
        let theta = (pos - j as f64).clamp(0.0, 1.0);
        let (w0, w1) = (u * (1.0 - theta), u * theta);
        raw_den[j] += w0;
        raw_den[j + 1] += w1;
        for r in 0..n_responses {
            let y = fitted.data.responses[i * n_responses + r];
            raw_num[r * n_bins + j] += w0 * y;
            raw_num[r * n_bins + j + 1] += w1 * y;
        }
    }
    let mut den = vec![0.0; n_bins];
    convolve(&raw_den, &fitted.stencil, &mut den);
    let mut num = vec![0.0; n_responses * n_bins];
    for r in 0..n_responses {
        convolve(
            &raw_num[r * n_bins..(r + 1) * n_bins],
            &fitted.stencil,
            &mut num[r * n_bins..(r + 1) * n_bins],
        );
    }
    BinnedArrays { den, num }
}

/// Truncated discrete convolution; mass outside the array is dropped,
/// which the bin padding keeps away from any clamped query.
fn convolve(input: &[f64], stencil: &[f64], out: &mut [f64]) {
    let n = input.len();
    let half = (stencil.len() - 1) / 2;
    out.fill(0.0);
    for (j, &v) in input.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let lo = j.saturating_sub(half);
        let hi = (j + half).min(n - 1);
        for t in lo..=hi {
            out[t] += v * stencil[t + half - j];
        }
    }
}

fn nearest_supported_bin(den: &[f64], pos: f64, floor: f64) -> Option<usize> {
    let n = den.len();
    let center = (pos.round() as i64).clamp(0, n as i64 - 1);
    (0..n as i64)
        .filter(|&j| den[j as usize] > floor)
        .min_by_key(|&j| (j - center).unsigned_abs())
        .map(|j| j as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn noisy_line_slice(rng: &mut StreamRng, n: usize, slope: f64, noise: f64) -> SliceData {
        let mut x = Vec::with_capacity(n);
        let mut responses = Vec::with_capacity(n);
        for _ in 0..n {
            let xi = rng.next_uniform_in(-2.0, 2.0);
            x.push(xi);
            responses.push(slope * xi + noise * rng.next_standard_normal());
        }
        SliceData {
            x,
            features: Vec::new(),
            responses,
        }
    }

    #[test]
    fn recovers_linear_conditional_mean() {
        let mut rng = StreamRng::new(11);
        let slice = noisy_line_slice(&mut rng, 20000, 2.0, 0.3);
        let surface =
            KernelSurface::fit(&[slice], 0, 1, &RegressionConfig::default()).unwrap();
        let queries: Vec<f64> = (0..41).map(|i| -1.0 + i as f64 * 0.05).collect();
        let mut out = vec![0.0; queries.len()];
        surface.evaluate_batch(0, &queries, &[], &mut out).unwrap();
        for (q, est) in queries.iter().zip(&out) {
            assert!(
                (est - 2.0 * q).abs() < 0.05,
                "x = {q}: estimate {est} vs {}",
                2.0 * q
            );
        }
        assert_eq!(surface.extrapolation_count(), 0);
    }

    #[test]
    fn binned_route_matches_direct_sums() {
        let mut rng = StreamRng::new(12);
        let n = 3000;
        let mut slice = noisy_line_slice(&mut rng, n, 1.0, 0.5);
        // Add a live feature correlated with the response.
        let mut features = Vec::with_capacity(n);
        let mut responses = Vec::with_capacity(2 * n);
        for i in 0..n {
            let f = rng.next_standard_normal();
            features.push(f);
            let y = slice.responses[i] + 0.7 * f;
            responses.push(y);
            responses.push(y * y);
        }
        slice.features = features;
        slice.responses = responses;
        let surface =
            KernelSurface::fit(&[slice], 1, 2, &RegressionConfig::default()).unwrap();
        for (x, f) in [(-1.2, 0.4), (0.0, -0.9), (0.8, 0.0), (1.5, 1.3)] {
            let exact = surface.evaluate_exact(0, x, &[f]).unwrap();
            let binned = surface.evaluate(0, x, &[f]).unwrap();
            for r in 0..2 {
                let scale = exact[r].abs().max(0.1);
                assert!(
                    (exact[r] - binned[r]).abs() / scale < 2e-2,
                    "x={x} f={f} r={r}: exact {} binned {}",
                    exact[r],
                    binned[r]
                );
            }
        }
    }

    #[test]
    fn constant_features_reproduce_plain_fit_bitwise() {
        let mut rng = StreamRng::new(13);
        let plain = noisy_line_slice(&mut rng, 500, -1.5, 0.2);
        let mut enriched = plain.clone();
        enriched.features = vec![7.25; 500 * 2]; // two constant columns
        let s_plain = KernelSurface::fit(&[plain], 0, 1, &RegressionConfig::default()).unwrap();
        let s_enriched =
            KernelSurface::fit(&[enriched], 2, 1, &RegressionConfig::default()).unwrap();
        let queries: Vec<f64> = (0..101).map(|i| -2.2 + i as f64 * 0.044).collect();
        let mut a = vec![0.0; queries.len()];
        let mut b = vec![0.0; queries.len()];
        s_plain.evaluate_batch(0, &queries, &[], &mut a).unwrap();
        s_enriched
            .evaluate_batch(0, &queries, &[7.25, 7.25], &mut b)
            .unwrap();
        assert_eq!(a, b, "estimates must agree bit for bit");
        // Even querying a *different* value of the constant feature changes
        // nothing: the dimension is degenerate.
        s_enriched
            .evaluate_batch(0, &queries, &[0.0, -3.0], &mut b)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn live_feature_separates_conditionally_distinct_populations() {
        // Same x-distribution in both groups; response is the group sign.
        // Plain regression sees the mixture (mean near 0); conditioning on
        // the group feature recovers each group's response.
        let mut rng = StreamRng::new(14);
        let n = 4000;
        let mut x = Vec::new();
        let mut features = Vec::new();
        let mut responses = Vec::new();
        for i in 0..n {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            x.push(rng.next_uniform_in(-1.0, 1.0));
            features.push(sign);
            responses.push(sign);
        }
        let slice = SliceData {
            x,
            features,
            responses,
        };
        let enriched =
            KernelSurface::fit(&[slice.clone()], 1, 1, &RegressionConfig::default()).unwrap();
        let plain_slice = SliceData {
            features: Vec::new(),
            ..slice
        };
        let plain = KernelSurface::fit(&[plain_slice], 0, 1, &RegressionConfig::default()).unwrap();
        let mixture = plain.evaluate(0, 0.3, &[]).unwrap()[0];
        let plus = enriched.evaluate(0, 0.3, &[1.0]).unwrap()[0];
        let minus = enriched.evaluate(0, 0.3, &[-1.0]).unwrap()[0];
        assert!(mixture.abs() < 0.1, "mixture estimate {mixture}");
        assert!((plus - 1.0).abs() < 1e-6, "plus-group estimate {plus}");
        assert!((minus + 1.0).abs() < 1e-6, "minus-group estimate {minus}");
    }

    #[test]
    fn empty_slices_fall_back_to_nearest_populated() {
        let mut rng = StreamRng::new(15);
        let a = noisy_line_slice(&mut rng, 400, 1.0, 0.1);
        let c = noisy_line_slice(&mut rng, 400, -1.0, 0.1);
        let surface = KernelSurface::fit(
            &[a, SliceData::default(), SliceData::default(), c],
            0,
            1,
            &RegressionConfig::default(),
        )
        .unwrap();
        assert_eq!(surface.warnings().len(), 2);
        // Slice 1 served by 0, slice 2 served by 3.
        let from_1 = surface.evaluate(1, 0.5, &[]).unwrap()[0];
        let from_0 = surface.evaluate(0, 0.5, &[]).unwrap()[0];
        assert_eq!(from_1, from_0);
        let from_2 = surface.evaluate(2, 0.5, &[]).unwrap()[0];
        let from_3 = surface.evaluate(3, 0.5, &[]).unwrap()[0];
        assert_eq!(from_2, from_3);
        assert!((from_0 - 0.5).abs() < 0.1);
        assert!((from_3 + 0.5).abs() < 0.1);
    }

    #[test]
    fn extrapolating_queries_are_counted_and_clamped() {
        let mut rng = StreamRng::new(16);
        let slice = noisy_line_slice(&mut rng, 1000, 1.0, 0.05);
        let surface =
            KernelSurface::fit(&[slice], 0, 1, &RegressionConfig::default()).unwrap();
        let inside = surface.evaluate(0, 0.0, &[]).unwrap()[0];
        assert!(inside.is_finite());
        assert_eq!(surface.extrapolation_count(), 0);
        let far = surface.evaluate(0, 50.0, &[]).unwrap()[0];
        assert_eq!(surface.extrapolation_count(), 1);
        let edge = surface.evaluate(0, 1.9999, &[]).unwrap()[0];
        assert!((far - edge).abs() < 0.2, "clamped {far} vs edge {edge}");
        surface.reset_extrapolation_count();
        assert_eq!(surface.extrapolation_count(), 0);
    }

    #[test]
    fn constant_state_slice_returns_weighted_mean() {
        let slice = SliceData {
            x: vec![1.0; 6],
            features: vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            responses: vec![2.0, 2.0, 2.0, 4.0, 4.0, 4.0],
        };
        let surface =
            KernelSurface::fit(&[slice], 1, 1, &RegressionConfig::default()).unwrap();
        // Plain weighting (degenerate? no: the feature is live with std ~0.5)
        // at feature 0 leans to the 2.0 group, at feature 1 to the 4.0 group.
        let at0 = surface.evaluate(0, 1.0, &[0.0]).unwrap()[0];
        let at1 = surface.evaluate(0, 1.0, &[1.0]).unwrap()[0];
        assert!(at0 < 3.0 && at0 >= 2.0, "estimate at feature 0: {at0}");
        assert!(at1 > 3.0 && at1 <= 4.0, "estimate at feature 1: {at1}");
    }

    #[test]
    fn response_columns_scale_exactly() {
        // The estimator is linear in the responses; a column that is an
        // exact power-of-two multiple of another must come out as exactly
        // that multiple.
        let mut rng = StreamRng::new(17);
        let base = noisy_line_slice(&mut rng, 800, 1.0, 0.4);
        let doubled = SliceData {
            x: base.x.clone(),
            features: Vec::new(),
            responses: base
                .responses
                .iter()
                .flat_map(|&y| [y, 2.0 * y])
                .collect(),
        };
        let surface =
            KernelSurface::fit(&[doubled], 0, 2, &RegressionConfig::default()).unwrap();
        for x in [-1.5, -0.3, 0.0, 0.9, 1.7] {
            let est = surface.evaluate(0, x, &[]).unwrap();
            assert_eq!(est[1], 2.0 * est[0], "at x = {x}");
        }
    }
}
