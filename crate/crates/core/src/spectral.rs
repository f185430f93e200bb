//! Spectral stability of the interaction operator and rolling early-warning
//! statistics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{component, linear_fit, StateVector};
use crate::graph::InteractionMatrix;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport<T> {
    /// 1/s
    pub lambda_max: T,
    /// St = -lambda_max
    pub stability_margin: T,
    /// 1/|St|; `None` when |St| vanishes (infinite relaxation time)
    pub relaxation_time: Option<T>,
    /// unit-norm dominant eigenvector, sign chosen so its sum is nonnegative
    pub dominant_mode: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// power iteration failed and the dense eigensolver supplied the result
    pub dense_fallback: bool,
}

impl<T: Real> SpectralReport<T> {
    /// Agent indices ordered by decreasing |mode| component.
    pub fn mode_ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.dominant_mode.len()).collect();
        idx.sort_by(|a, b| {
            self.dominant_mode[*b]
                .abs()
                .partial_cmp(&self.dominant_mode[*a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        idx
    }
}

pub const DEFAULT_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 2000;

/// 1/|St|, or `None` when |St| <= 1e-12.
pub fn relaxation_time<T: Real>(stability_margin: T) -> Option<T> {
    let a = stability_margin.abs();
    (a > T::lit(1e-12)).then(|| T::one() / a)
}

fn normalize<T: Real>(v: &mut [T]) -> T {
    let norm = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
    if norm > T::zero() {
        v.iter_mut().for_each(|x| *x = *x / norm);
    }
    norm
}

fn orient_sign<T: Real>(v: &mut [T]) {
    if v.iter().copied().sum::<T>() < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenpair of W by power iteration from the uniform vector.
///
/// Converges when successive Rayleigh quotients differ by less than `tol` and
/// the iterate moves by less than `sqrt(tol)`. If that does not happen within
/// `max_iter` steps (e.g. a complex or sign-alternating dominant pair) the
/// dense eigensolver path is used and `dense_fallback` is set.
pub fn power_iteration<T: Real>(w: &InteractionMatrix<T>, tol: T, max_iter: usize) -> SpectralReport<T> {
    let n = w.n;
    let mut x = vec![T::one() / T::from_count(n).sqrt(); n];
    let mut y = vec![T::zero(); n];
    let mut lambda = T::zero();
    let step_tol = tol.sqrt();
    for it in 1..=max_iter {
        w.mul_vec(&x, &mut y);
        let rq: T = x.iter().zip(&y).map(|(a, b)| *a * *b).sum();
        let norm = normalize(&mut y);
        if norm == T::zero() {
            // W x = 0: x spans (part of) the null space, dominant eigenvalue is 0
            return finish(T::zero(), x, it, true, false);
        }
        let moved = x.iter().zip(&y).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>().sqrt();
        let delta = (rq - lambda).abs();
        lambda = rq;
        std::mem::swap(&mut x, &mut y);
        if it > 1 && delta < tol * T::one().max(lambda.abs()) && moved < step_tol {
            // one more Rayleigh quotient on the converged vector
            w.mul_vec(&x, &mut y);
            let rq: T = x.iter().zip(&y).map(|(a, b)| *a * *b).sum();
            return finish(rq, x, it, true, false);
        }
    }
    let (lambda, mode) = dense_dominant(w);
    finish(lambda, mode, max_iter, false, true)
}

fn finish<T: Real>(lambda: T, mut mode: Vec<T>, iterations: usize, converged: bool, dense: bool) -> SpectralReport<T> {
    orient_sign(&mut mode);
    let st = -lambda;
    SpectralReport {
        lambda_max: lambda,
        stability_margin: st,
        relaxation_time: relaxation_time(st),
        dominant_mode: mode,
        iterations,
        converged,
        dense_fallback: dense,
    }
}

fn to_dmatrix<T: Real>(w: &InteractionMatrix<T>) -> DMatrix<f64> {
    DMatrix::from_fn(w.n, w.n, |i, j| w.get(i, j).as_f64())
}

/// Eigenvalue with the largest real part and, when it is real, its eigenvector
/// (null vector of W - lambda I). For a complex dominant pair the real part of
/// the eigenvalue is returned with the uniform vector as a placeholder mode.
pub fn dense_dominant<T: Real>(w: &InteractionMatrix<T>) -> (T, Vec<T>) {
    let n = w.n;
    let m = to_dmatrix(w);
    let eig = m.clone().complex_eigenvalues();
    let best = eig
        .iter()
        .copied()
        .max_by(|a, b| a.re.partial_cmp(&b.re).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or_default();
    let uniform = vec![T::one() / T::from_count(n).sqrt(); n];
    if best.im.abs() > 1e-9 * (1.0 + best.re.abs()) {
        return (T::lit(best.re), uniform);
    }
    let shifted = m - DMatrix::identity(n, n) * best.re;
    let svd = shifted.svd(false, true);
    let Some(vt) = svd.v_t else {
        return (T::lit(best.re), uniform);
    };
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let mut v: Vec<T> = vt.row(k).iter().map(|x| T::lit(*x)).collect();
    normalize(&mut v);
    (T::lit(best.re), v)
}

/// St from a Jacobian of fitted dynamics (row-major m x m): `-max Re(eig)`.
pub fn stability_from_jacobian(jacobian: &[f64], m: usize) -> f64 {
    assert_eq!(jacobian.len(), m * m);
    let j = DMatrix::from_row_slice(m, m, jacobian);
    -j.complex_eigenvalues().iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EwsError {
    #[error("early-warning window needs at least {required} samples, got {available}")]
    InsufficientSamples { available: usize, required: usize },
    #[error("lag of {lag} samples does not fit a window of {window}")]
    LagTooLong { lag: usize, window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Rising,
    Falling,
    Flat,
    Undefined,
}

impl Trend {
    fn from_slope<T: Real>(slope: Option<T>) -> Self {
        match slope {
            None => Trend::Undefined,
            Some(s) if s > T::zero() => Trend::Rising,
            Some(s) if s < T::zero() => Trend::Falling,
            Some(_) => Trend::Flat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwsReport<T> {
    pub samples: usize,
    pub lag_samples: usize,
    /// per-component variance of the detrended window
    pub variance: [T; component::COUNT],
    /// per-component lag autocorrelation; `None` for constant components
    pub autocorrelation: [Option<T>; component::COUNT],
    pub variance_trend: [Trend; component::COUNT],
    pub autocorrelation_trend: [Trend; component::COUNT],
}

impl<T: Real> EwsReport<T> {
    /// Both variance and autocorrelation rising for a component.
    pub fn warning(&self, k: usize) -> bool {
        self.variance_trend[k] == Trend::Rising && self.autocorrelation_trend[k] == Trend::Rising
    }
}

pub const EWS_MIN_SAMPLES: usize = 16;

/// Variance and lag autocorrelation of a detrended series; the
/// autocorrelation is `None` when the series is constant after detrending.
pub fn window_stats<T: Real>(ts: &[T], ys: &[T], lag: usize) -> (T, Option<T>) {
    let (slope, intercept) = linear_fit(ts, ys);
    let r: Vec<T> = ts.iter().zip(ys).map(|(t, y)| *y - (intercept + slope * *t)).collect();
    let n = r.len();
    let var = r.iter().map(|v| *v * *v).sum::<T>() / T::from_count(n.saturating_sub(1).max(1));
    let scale = ys.iter().fold(T::zero(), |m, v| m.max(v.abs())).max(T::one());
    if var.sqrt() <= T::lit(1e-12) * scale || lag >= n {
        return (var, None);
    }
    let a = &r[..n - lag];
    let b = &r[lag..];
    let m = T::from_count(a.len());
    let ma = a.iter().copied().sum::<T>() / m;
    let mb = b.iter().copied().sum::<T>() / m;
    let mut sab = T::zero();
    let mut saa = T::zero();
    let mut sbb = T::zero();
    for (x, y) in a.iter().zip(b) {
        sab = sab + (*x - ma) * (*y - mb);
        saa = saa + (*x - ma) * (*x - ma);
        sbb = sbb + (*y - mb) * (*y - mb);
    }
    let den = (saa * sbb).sqrt();
    if !(den > T::zero()) {
        return (var, None);
    }
    (var, Some((sab / den).max(-T::one()).min(T::one())))
}

/// Rolling early-warning statistics over `history` (oldest first).
///
/// Trend flags are the sign of the least-squares slope of each statistic
/// computed over trailing half-window sub-windows ending in the last half of
/// the window.
pub fn rolling_ews<T: Real>(history: &[StateVector<T>], lag_samples: usize) -> Result<EwsReport<T>, EwsError> {
    let n = history.len();
    if n < EWS_MIN_SAMPLES {
        return Err(EwsError::InsufficientSamples { available: n, required: EWS_MIN_SAMPLES });
    }
    let lag = lag_samples.max(1);
    let half = n / 2;
    if lag + 2 > half {
        return Err(EwsError::LagTooLong { lag, window: n });
    }
    let t0 = history[0].timestamp;
    let ts: Vec<T> = history.iter().map(|s| s.timestamp - t0).collect();
    let mut report = EwsReport {
        samples: n,
        lag_samples: lag,
        variance: [T::zero(); component::COUNT],
        autocorrelation: [None; component::COUNT],
        variance_trend: [Trend::Undefined; component::COUNT],
        autocorrelation_trend: [Trend::Undefined; component::COUNT],
    };
    let mut ys = Vec::with_capacity(n);
    for k in 0..component::COUNT {
        ys.clear();
        ys.extend(history.iter().map(|s| s.components[k]));
        let (var, rho) = window_stats(&ts, &ys, lag);
        report.variance[k] = var;
        report.autocorrelation[k] = rho;

        let mut ends = Vec::new();
        let mut vars = Vec::new();
        let mut rho_ends = Vec::new();
        let mut rhos = Vec::new();
        for end in half..=n {
            let (v, r) = window_stats(&ts[end - half..end], &ys[end - half..end], lag);
            let e = T::from_count(end);
            ends.push(e);
            vars.push(v);
            if let Some(r) = r {
                rho_ends.push(e);
                rhos.push(r);
            }
        }
        report.variance_trend[k] = Trend::from_slope(Some(linear_fit(&ends, &vars).0));
        report.autocorrelation_trend[k] =
            Trend::from_slope((rhos.len() >= 2).then(|| linear_fit(&rho_ends, &rhos).0));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentId;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn matrix(n: usize, w: Vec<f64>) -> InteractionMatrix<f64> {
        InteractionMatrix::from_dense(0.0, (0..n).map(|k| AgentId(k.to_string())).collect(), w)
    }

    #[test]
    fn swap_matrix() {
        let r = power_iteration(&matrix(2, vec![0.0, 1.0, 1.0, 0.0]), 1e-12, 100);
        assert!((r.lambda_max - 1.0).abs() < 1e-12);
        let s = 1.0 / 2f64.sqrt();
        assert!((r.dominant_mode[0] - s).abs() < 1e-9 && (r.dominant_mode[1] - s).abs() < 1e-9);
        assert!(r.converged && !r.dense_fallback);
    }

    #[test]
    fn zero_matrix() {
        let r = power_iteration(&matrix(3, vec![0.0; 9]), 1e-12, 100);
        assert_eq!(r.lambda_max, 0.0);
        assert_eq!(r.stability_margin, 0.0);
        assert_eq!(r.relaxation_time, None);
        let one = power_iteration(&matrix(1, vec![0.0]), 1e-12, 100);
        assert_eq!(one.lambda_max, 0.0);
    }

    #[test]
    fn sign_alternating_pair_falls_back_to_dense() {
        // eigenvalues +-sqrt(2): power iteration oscillates from the uniform start
        let r = power_iteration(&matrix(2, vec![0.0, 2.0, 1.0, 0.0]), 1e-12, 200);
        assert!(r.dense_fallback && !r.converged);
        assert!((r.lambda_max - 2f64.sqrt()).abs() < 1e-9);
        let norm: f64 = r.dominant_mode.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relaxation_examples() {
        assert!((relaxation_time(-2.526f64).unwrap() - 0.396).abs() < 1e-3);
        assert_eq!(relaxation_time(0.0f64), None);
        assert_eq!(relaxation_time(2.0f64), Some(0.5));
    }

    #[test]
    fn jacobian_margin() {
        // diag(-1, -3): St = 1
        assert!((stability_from_jacobian(&[-1.0, 0.0, 0.0, -3.0], 2) - 1.0).abs() < 1e-12);
    }

    fn dense_oracle(n: usize, w: &[f64]) -> f64 {
        DMatrix::from_row_slice(n, n, w).complex_eigenvalues().iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
    }

    fn arb_matrix() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1usize..=12).prop_flat_map(|n| (Just(n), prop::collection::vec(0.0..3.0f64, n * n)))
    }

    proptest! {
        #[test]
        fn matches_dense_oracle((n, w) in arb_matrix()) {
            let r = power_iteration(&matrix(n, w.clone()), 1e-13, 5000);
            let oracle = dense_oracle(n, &w);
            prop_assert!((r.lambda_max - oracle).abs() < 1e-6, "{} vs {}", r.lambda_max, oracle);
        }

        #[test]
        fn scale_equivariance((n, w) in arb_matrix(), s in 0.1..10.0f64) {
            let m = matrix(n, w);
            let a = power_iteration(&m, 1e-13, 5000);
            let b = power_iteration(&m.scaled(s), 1e-13, 5000);
            prop_assert!((b.lambda_max - s * a.lambda_max).abs() < 1e-6 * (1.0 + s * a.lambda_max));
            let dot: f64 = a.dominant_mode.iter().zip(&b.dominant_mode).map(|(x, y)| x * y).sum();
            prop_assert!(dot.abs() > 1.0 - 1e-5);
        }

        #[test]
        fn mode_is_unit((n, w) in arb_matrix()) {
            let r = power_iteration(&matrix(n, w), 1e-12, 5000);
            let norm: f64 = r.dominant_mode.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    fn stream(values: &[f64], dt: f64) -> Vec<StateVector<f64>> {
        values
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let mut c = [0.0; component::COUNT];
                c[component::TENSION] = *v;
                StateVector { timestamp: k as f64 * dt, components: c }
            })
            .collect()
    }

    #[test]
    fn white_noise_has_small_autocorrelation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..1024).map(|_| normal.sample(&mut rng)).collect();
        let r = rolling_ews(&stream(&xs, 0.25), 1).unwrap();
        let rho = r.autocorrelation[component::TENSION].unwrap();
        assert!(rho.abs() < 0.15, "{rho}");
        assert_eq!(r.autocorrelation[component::ATTENTION], None);
        assert_eq!(r.autocorrelation_trend[component::ATTENTION], Trend::Undefined);
    }

    #[test]
    fn ar1_autocorrelation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut x = 0.0;
        let xs: Vec<f64> = (0..4000)
            .map(|_| {
                x = 0.9 * x + normal.sample(&mut rng);
                x
            })
            .collect();
        let r = rolling_ews(&stream(&xs, 1.0), 1).unwrap();
        let rho = r.autocorrelation[component::TENSION].unwrap();
        assert!((rho - 0.9).abs() < 0.05, "{rho}");
    }

    #[test]
    fn ou_with_decaying_rate_raises_both_trends() {
        // mean reversion rate falls linearly: critical slowing down
        let dt = 0.25;
        let n = 480;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut hits = 0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = 0.0;
            let xs: Vec<f64> = (0..n)
                .map(|k| {
                    let rate = 2.0 - 1.9 * k as f64 / n as f64;
                    x += -rate * x * dt + 0.5 * dt.sqrt() * normal.sample(&mut rng);
                    x
                })
                .collect();
            let r = rolling_ews(&stream(&xs, dt), 1).unwrap();
            hits += r.warning(component::TENSION) as usize;
        }
        assert!(hits >= 8, "{hits}/10");
    }

    #[test]
    fn ews_preconditions() {
        assert!(matches!(rolling_ews(&stream(&[1.0; 10], 1.0), 1), Err(EwsError::InsufficientSamples { .. })));
        assert!(matches!(rolling_ews(&stream(&[1.0; 16], 1.0), 7), Err(EwsError::LagTooLong { .. })));
    }

    #[test]
    fn ou_variance_law() {
        // stationary OU variance sigma^2 / (2k)
        let (k, sigma, dt) = (0.8f64, 0.5f64, 0.01f64);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut x = 0.0;
        let mut sum2 = 0.0;
        let steps = 400_000;
        for _ in 0..steps {
            x += -k * x * dt + sigma * dt.sqrt() * normal.sample(&mut rng);
            sum2 += x * x;
        }
        let var = sum2 / steps as f64;
        let law = sigma * sigma / (2.0 * k);
        assert!((var - law).abs() < 0.1 * law, "{var} vs {law}");
    }
}
