//! The nine behavioral fields, the graph-to-scene smoothing operator and the
//! state vector.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::InteractionMatrix;
use crate::model::{AttentionAggregate, CalibrationProfile, NormalizedState, Scene, Vec2};
use crate::scalar::{wrap_angle, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("grid needs at least 2 cells per axis, got {nx} x {ny}")]
    DegenerateGrid { nx: usize, ny: usize },
}

/// Index of each component in [`StateVector::components`].
pub mod component {
    pub const ATTENTION: usize = 0;
    pub const TENSION: usize = 1;
    pub const SYNCHRONY: usize = 2;
    pub const INFLUENCE: usize = 3;
    pub const STABILITY: usize = 4;
    pub const ALIGNMENT: usize = 5;
    pub const MOMENTUM: usize = 6;
    pub const NOISE: usize = 7;
    pub const BOUNDARY: usize = 8;
    pub const COUNT: usize = 9;
    pub const NAMES: [&str; COUNT] = ["X_A", "X_T", "X_S", "X_I", "X_St", "X_L", "X_M", "X_N", "X_B"];
}

/// Scene raster; cell `(ix, iy)` is stored at `iy * nx + ix` and centred at
/// `origin + ((ix + 0.5) * resolution, (iy + 0.5) * resolution)`.
/// `None` marks no-data cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub origin: Vec2<T>,
    pub resolution: T,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<Option<T>>,
}

impl<T: Real> Grid<T> {
    pub fn empty(origin: Vec2<T>, resolution: T, nx: usize, ny: usize) -> Self {
        Grid { origin, resolution, nx, ny, values: vec![None; nx * ny] }
    }

    /// Grid covering the scene bounds at the scene resolution.
    pub fn for_scene(scene: &Scene<T>) -> Self {
        let res = scene.grid_resolution;
        let cells = |len: T| ((len / res) - T::lit(1e-9)).ceil().to_usize().unwrap_or(0).max(1);
        Self::empty(scene.bounds.min, res, cells(scene.bounds.width()), cells(scene.bounds.height()))
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> Option<T> {
        self.values[iy * self.nx + ix]
    }

    pub fn center(&self, ix: usize, iy: usize) -> Vec2<T> {
        let half = T::lit(0.5);
        Vec2::new(
            self.origin.x() + (T::from_count(ix) + half) * self.resolution,
            self.origin.y() + (T::from_count(iy) + half) * self.resolution,
        )
    }

    /// Cell containing a point, if inside the grid.
    pub fn cell_of(&self, p: &Vec2<T>) -> Option<(usize, usize)> {
        let fx = ((p.x() - self.origin.x()) / self.resolution).floor();
        let fy = ((p.y() - self.origin.y()) / self.resolution).floor();
        if fx < T::zero() || fy < T::zero() {
            return None;
        }
        let (ix, iy) = (fx.to_usize()?, fy.to_usize()?);
        (ix < self.nx && iy < self.ny).then_some((ix, iy))
    }

    pub fn max_value(&self) -> Option<T> {
        self.values.iter().flatten().copied().fold(None, |m, v| Some(m.map_or(v, |m: T| m.max(v))))
    }

    pub fn covered(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// All fields evaluated at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldFrame<T> {
    pub timestamp: T,
    pub attention: Vec<T>,
    pub tension: Vec<T>,
    pub tension_mean: T,
    /// sum_j W[i][j] T[j]: tension-weighted exposure of agent i
    pub influence: Vec<T>,
    /// sum_j W[j][i] T[i]: tension emitted by agent i onto the others
    pub influence_emission: Vec<T>,
    pub phases: Vec<Option<T>>,
    pub synchrony: Option<T>,
    pub alignment_dispersion: T,
    pub momentum: Option<T>,
    pub noise: Option<T>,
    pub tension_grid: Grid<T>,
    pub boundary_grid: Grid<T>,
    pub boundary_max: T,
    pub stability: T,
    pub flags: FieldFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldFlags {
    pub attention_degenerate: bool,
    pub synchrony_undefined: bool,
    pub momentum_cold_start: bool,
    pub noise_cold_start: bool,
    /// agents whose phase could not be extracted (constant carrier or short history)
    pub phase_excluded: Vec<usize>,
}

/// Aggregated system state; component order is fixed by [`component`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector<T> {
    pub timestamp: T,
    pub components: [T; component::COUNT],
}

impl<T: Real> StateVector<T> {
    pub fn zero(timestamp: T) -> Self {
        StateVector { timestamp, components: [T::zero(); component::COUNT] }
    }

    pub fn attention(&self) -> T {
        self.components[component::ATTENTION]
    }
    pub fn tension(&self) -> T {
        self.components[component::TENSION]
    }
    pub fn synchrony(&self) -> T {
        self.components[component::SYNCHRONY]
    }
    pub fn influence(&self) -> T {
        self.components[component::INFLUENCE]
    }
    pub fn stability(&self) -> T {
        self.components[component::STABILITY]
    }
    pub fn alignment(&self) -> T {
        self.components[component::ALIGNMENT]
    }
    pub fn momentum(&self) -> T {
        self.components[component::MOMENTUM]
    }
    pub fn noise(&self) -> T {
        self.components[component::NOISE]
    }
    pub fn boundary(&self) -> T {
        self.components[component::BOUNDARY]
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| c.is_finite())
    }
}

/// A_i = (sum_j W[j][i]) / sum W. Falls back to uniform (flag set) when W is all zero.
pub fn attention_field<T: Real>(w: &InteractionMatrix<T>) -> (Vec<T>, bool) {
    let total = w.grand_sum();
    if !(total > T::zero()) {
        let u = T::one() / T::from_count(w.n.max(1));
        return (vec![u; w.n], true);
    }
    ((0..w.n).map(|i| w.column_sum(i) / total).collect(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensionField<T> {
    pub values: Vec<T>,
    pub mean: T,
}

/// Quadratic kinematic intensity per agent.
pub fn tension_of<T: Real>(s: &NormalizedState<T>, cal: &CalibrationProfile<T>) -> T {
    cal.gamma_v * s.speed_z * s.speed_z + cal.gamma_e * s.gesture_z * s.gesture_z + cal.gamma_p * s.proxemic * s.proxemic
}

pub fn tension_field<T: Real>(norm: &[NormalizedState<T>], cal: &CalibrationProfile<T>) -> TensionField<T> {
    let values: Vec<T> = norm.iter().map(|s| tension_of(s, cal)).collect();
    let mean = if values.is_empty() {
        T::zero()
    } else {
        values.iter().copied().sum::<T>() / T::from_count(values.len())
    };
    TensionField { values, mean }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Influence<T> {
    pub exposure: Vec<T>,
    pub emission: Vec<T>,
}

pub fn influence_field<T: Real>(w: &InteractionMatrix<T>, tension: &[T]) -> Result<Influence<T>, FieldError> {
    if tension.len() != w.n {
        return Err(FieldError::DimensionMismatch { expected: w.n, got: tension.len() });
    }
    let mut exposure = vec![T::zero(); w.n];
    w.mul_vec(tension, &mut exposure);
    let emission = (0..w.n).map(|i| w.column_sum(i) * tension[i]).collect();
    Ok(Influence { exposure, emission })
}

fn detrend<T: Real>(xs: &[T], ys: &[T]) -> Vec<T> {
    let (slope, intercept) = linear_fit(xs, ys);
    xs.iter().zip(ys).map(|(x, y)| *y - (intercept + slope * *x)).collect()
}

/// Least-squares line `y = slope * x + intercept`.
pub fn linear_fit<T: Real>(xs: &[T], ys: &[T]) -> (T, T) {
    let n = T::from_count(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (x, y) in xs.iter().zip(ys) {
        sxy = sxy + (*x - mx) * (*y - my);
        sxx = sxx + (*x - mx) * (*x - mx);
    }
    let slope = if sxx > T::zero() { sxy / sxx } else { T::zero() };
    (slope, my - slope * mx)
}

thread_local! {
    static PLANNER: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
}

fn analytic_signal(x: &[f64]) -> Vec<Complex<f64>> {
    let n = x.len();
    let (fwd, inv): (Arc<dyn rustfft::Fft<f64>>, Arc<dyn rustfft::Fft<f64>>) =
        PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            (p.plan_fft_forward(n), p.plan_fft_inverse(n))
        });
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(*v, 0.0)).collect();
    fwd.process(&mut buf);
    // one-sided spectrum: keep DC and Nyquist, double positive frequencies
    for (k, c) in buf.iter_mut().enumerate() {
        let gain = if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *c *= gain / n as f64;
    }
    inv.process(&mut buf);
    buf
}

/// Phase estimate at the last sample of an equally spaced window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseEstimate<T> {
    /// radians in [-pi, pi]
    pub phase: T,
    /// radians per sample
    pub rate: T,
}

/// Instantaneous phase of the dominant oscillation in `samples`.
///
/// The window is detrended and Hann-tapered, its analytic signal is built with
/// a discrete Hilbert transform, and the unwrapped phase over the central half
/// of the window is fitted by a line that is evaluated at the last sample.
/// Returns `None` for fewer than 4 samples or a constant (after detrending) signal.
pub fn phase_extract<T: Real>(samples: &[T]) -> Option<PhaseEstimate<T>> {
    let n = samples.len();
    if n < 4 {
        return None;
    }
    let ys: Vec<f64> = samples.iter().map(|s| s.as_f64()).collect();
    let xs: Vec<f64> = (0..n).map(|k| k as f64).collect();
    let resid = detrend(&xs, &ys);
    let scale = ys.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let var = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    if var.sqrt() <= 1e-9 * scale.max(1.0) {
        return None;
    }
    let tapered: Vec<f64> = resid
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos();
            r * w
        })
        .collect();
    let z = analytic_signal(&tapered);
    let (lo, hi) = if n >= 8 { (n / 4, n - n / 4) } else { (0, n) };
    let mut unwrapped = Vec::with_capacity(hi - lo);
    let mut prev = z[lo].arg();
    unwrapped.push(prev);
    let mut offset = 0.0;
    for c in &z[lo + 1..hi] {
        let a = c.arg();
        let mut d = a - prev;
        if d > std::f64::consts::PI {
            offset -= 2.0 * std::f64::consts::PI;
            d -= 2.0 * std::f64::consts::PI;
        } else if d < -std::f64::consts::PI {
            offset += 2.0 * std::f64::consts::PI;
            d += 2.0 * std::f64::consts::PI;
        }
        let _ = d;
        unwrapped.push(a + offset);
        prev = a;
    }
    let idx: Vec<f64> = (lo..hi).map(|k| k as f64).collect();
    let (rate, intercept) = linear_fit(&idx, &unwrapped);
    let at_end = intercept + rate * (n - 1) as f64;
    Some(PhaseEstimate { phase: T::lit(wrap_angle(at_end)), rate: T::lit(rate) })
}

/// Kuramoto order parameter `|mean(exp(i phi))|`; `None` for no phases.
pub fn kuramoto_synchrony<T: Real>(phases: &[T]) -> Option<T> {
    if phases.is_empty() {
        return None;
    }
    let n = T::from_count(phases.len());
    let (s, c) = phases.iter().fold((T::zero(), T::zero()), |(s, c), p| (s + p.sin(), c + p.cos()));
    Some(((s / n).hypot(c / n)).min(T::one()))
}

/// Mean squared deviation of the agents' normalized channel vectors from their mean.
pub fn alignment_dispersion<T: Real>(norm: &[NormalizedState<T>]) -> T {
    if norm.is_empty() {
        return T::zero();
    }
    let n = T::from_count(norm.len());
    let mut mean = [T::zero(); 3];
    for s in norm {
        for (m, c) in mean.iter_mut().zip(s.channels()) {
            *m = *m + c / n;
        }
    }
    norm.iter()
        .map(|s| s.channels().iter().zip(&mean).map(|(c, m)| (*c - *m) * (*c - *m)).sum::<T>())
        .sum::<T>()
        / n
}

/// `||X(t) - X(t')|| / (t - t')` over every component except momentum and
/// noise. Noise is built from the residual variance of momentum, so including
/// it here closes a loop that diverges.
pub fn momentum<T: Real>(current: &StateVector<T>, previous: &StateVector<T>) -> Option<T> {
    let dt = current.timestamp - previous.timestamp;
    if dt == T::zero() || !dt.is_finite() {
        return None;
    }
    let sq = (0..component::COUNT)
        .filter(|k| *k != component::MOMENTUM && *k != component::NOISE)
        .map(|k| {
            let d = current.components[k] - previous.components[k];
            d * d
        })
        .sum::<T>();
    Some(sq.sqrt() / dt.abs())
}

/// Minimum history length for [`noise_level`].
pub const NOISE_MIN_SAMPLES: usize = 8;

/// Sum over components (noise excluded) of the residual variance after a
/// least-squares linear detrend in time. `None` below [`NOISE_MIN_SAMPLES`].
pub fn noise_level<T: Real>(history: &[StateVector<T>]) -> Option<T> {
    if history.len() < NOISE_MIN_SAMPLES {
        return None;
    }
    let t0 = history[0].timestamp;
    let ts: Vec<T> = history.iter().map(|s| s.timestamp - t0).collect();
    let dof = T::from_count(history.len() - 2);
    let mut total = T::zero();
    let mut col = Vec::with_capacity(history.len());
    for k in (0..component::COUNT).filter(|k| *k != component::NOISE) {
        col.clear();
        col.extend(history.iter().map(|s| s.components[k]));
        let resid = detrend(&ts, &col);
        total = total + resid.iter().map(|r| *r * *r).sum::<T>() / dof;
    }
    Some(total)
}

/// Nadaraya-Watson smoothing of per-agent values onto the scene grid with a
/// Gaussian kernel of bandwidth `h`. Cells further than `3h` from every agent
/// are left as no-data.
pub fn smooth_to_scene<T: Real>(values: &[T], positions: &[Vec2<T>], scene: &Scene<T>, h: T) -> Grid<T> {
    let mut grid = Grid::for_scene(scene);
    if values.is_empty() {
        return grid;
    }
    let (nx, ny) = (grid.nx, grid.ny);
    let cutoff2 = T::lit(9.0) * h * h;
    let inv2h2 = T::one() / (T::lit(2.0) * h * h);
    // The kernel factorizes over the axes: exp(-(dx^2 + dy^2)/2h^2) = ex * ey.
    let axis = |len: usize, coord: &dyn Fn(usize) -> T, p: &dyn Fn(&Vec2<T>) -> T| {
        let mut d2 = Vec::with_capacity(len * positions.len());
        for q in positions {
            d2.extend((0..len).map(|k| {
                let d = coord(k) - p(q);
                d * d
            }));
        }
        let e: Vec<T> = d2.iter().map(|v| (-*v * inv2h2).exp()).collect();
        (d2, e)
    };
    let (dx2, ex) = axis(nx, &|ix| grid.center(ix, 0).x(), &|q| q.x());
    let (dy2, ey) = axis(ny, &|iy| grid.center(0, iy).y(), &|q| q.y());
    let mut num = vec![T::zero(); nx];
    let mut den = vec![T::zero(); nx];
    let mut covered = vec![false; nx];
    for iy in 0..ny {
        num.fill(T::zero());
        den.fill(T::zero());
        covered.fill(false);
        for (k, v) in values.iter().enumerate() {
            let wy = ey[k * ny + iy];
            let ry = cutoff2 - dy2[k * ny + iy];
            let row = k * nx..(k + 1) * nx;
            for (ix, (e, d)) in ex[row.clone()].iter().zip(&dx2[row]).enumerate() {
                let w = *e * wy;
                num[ix] = num[ix] + w * *v;
                den[ix] = den[ix] + w;
                covered[ix] |= *d <= ry;
            }
        }
        for ix in 0..nx {
            if covered[ix] && den[ix] > T::zero() {
                grid.values[iy * nx + ix] = Some(num[ix] / den[ix]);
            }
        }
    }
    grid
}

/// Gradient magnitude of a scalar grid: central differences inside, one-sided
/// at edges and next to no-data cells. Returns the gradient grid and its maximum.
pub fn boundary_field<T: Real>(grid: &Grid<T>) -> Result<(Grid<T>, T), FieldError> {
    if grid.nx < 2 || grid.ny < 2 {
        return Err(FieldError::DegenerateGrid { nx: grid.nx, ny: grid.ny });
    }
    let mut out = Grid::empty(grid.origin, grid.resolution, grid.nx, grid.ny);
    let res = grid.resolution;
    let derivative = |here: T, minus: Option<T>, plus: Option<T>| -> Option<T> {
        match (minus, plus) {
            (Some(m), Some(p)) => Some((p - m) / (res + res)),
            (Some(m), None) => Some((here - m) / res),
            (None, Some(p)) => Some((p - here) / res),
            (None, None) => None,
        }
    };
    let mut max = T::zero();
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let Some(here) = grid.get(ix, iy) else { continue };
            let xm = (ix > 0).then(|| grid.get(ix - 1, iy)).flatten();
            let xp = (ix + 1 < grid.nx).then(|| grid.get(ix + 1, iy)).flatten();
            let ym = (iy > 0).then(|| grid.get(ix, iy - 1)).flatten();
            let yp = (iy + 1 < grid.ny).then(|| grid.get(ix, iy + 1)).flatten();
            if let (Some(gx), Some(gy)) = (derivative(here, xm, xp), derivative(here, ym, yp)) {
                let g = gx.hypot(gy);
                max = max.max(g);
                out.values[iy * grid.nx + ix] = Some(g);
            }
        }
    }
    Ok((out, max))
}

fn aggregate_attention<T: Real>(a: &[T], how: AttentionAggregate) -> T {
    if a.is_empty() {
        return T::zero();
    }
    let n = T::from_count(a.len());
    match how {
        AttentionAggregate::Max => a.iter().copied().fold(T::neg_infinity(), T::max),
        AttentionAggregate::Concentration => {
            if a.len() == 1 {
                return T::one();
            }
            let h = a.iter().filter(|p| **p > T::zero()).map(|p| -*p * p.ln()).sum::<T>();
            T::one() - h / n.ln()
        }
        AttentionAggregate::Variance => {
            let m = a.iter().copied().sum::<T>() / n;
            a.iter().map(|p| (*p - m) * (*p - m)).sum::<T>() / n
        }
    }
}

/// Collapse a field frame into the state vector: X_A per the chosen
/// aggregator (max by default), X_T the mean tension, X_I the largest
/// emitted influence, X_B the largest boundary gradient. Undefined
/// components (cold start) enter as zero and stay flagged on the field frame.
pub fn assemble_state_vector<T: Real>(ff: &FieldFrame<T>, how: AttentionAggregate) -> StateVector<T> {
    let max_of = |v: &[T]| v.iter().copied().fold(T::zero(), T::max);
    let mut c = [T::zero(); component::COUNT];
    c[component::ATTENTION] = aggregate_attention(&ff.attention, how);
    c[component::TENSION] = ff.tension_mean;
    c[component::SYNCHRONY] = ff.synchrony.unwrap_or(T::zero());
    c[component::INFLUENCE] = max_of(&ff.influence_emission);
    c[component::STABILITY] = ff.stability;
    c[component::ALIGNMENT] = ff.alignment_dispersion;
    c[component::MOMENTUM] = ff.momentum.unwrap_or(T::zero());
    c[component::NOISE] = ff.noise.unwrap_or(T::zero());
    c[component::BOUNDARY] = ff.boundary_max;
    StateVector { timestamp: ff.timestamp, components: c }
}

/// Pairwise Pearson correlations among state components over a run. Entries
/// involving a constant component are `None`. Diagnostic only.
pub fn field_correlations<T: Real>(history: &[StateVector<T>]) -> Vec<Vec<Option<T>>> {
    let n = history.len();
    let k = component::COUNT;
    let mut out = vec![vec![None; k]; k];
    if n < 3 {
        return out;
    }
    let nn = T::from_count(n);
    let cols: Vec<Vec<T>> = (0..k).map(|c| history.iter().map(|s| s.components[c]).collect()).collect();
    let stats: Vec<(T, T)> = cols
        .iter()
        .map(|col| {
            let m = col.iter().copied().sum::<T>() / nn;
            let v = col.iter().map(|x| (*x - m) * (*x - m)).sum::<T>();
            (m, v.sqrt())
        })
        .collect();
    for a in 0..k {
        for b in 0..k {
            let (ma, sa) = stats[a];
            let (mb, sb) = stats[b];
            if sa <= T::lit(1e-12) || sb <= T::lit(1e-12) {
                continue;
            }
            let cov = cols[a].iter().zip(&cols[b]).map(|(x, y)| (*x - ma) * (*y - mb)).sum::<T>();
            out[a][b] = Some((cov / (sa * sb)).max(-T::one()).min(T::one()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentId;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn ns(v: f64, e: f64) -> NormalizedState<f64> {
        NormalizedState { speed_z: v, gesture_z: e, proxemic: 0.0, confidence: 1.0 }
    }

    fn ids(n: usize) -> Vec<AgentId> {
        (0..n).map(|k| AgentId(k.to_string())).collect()
    }

    #[test]
    fn attention_examples() {
        let mut w = vec![1.0; 9];
        for d in [0, 4, 8] {
            w[d] = 0.0;
        }
        let m = InteractionMatrix::from_dense(0.0, ids(3), w);
        let (a, deg) = attention_field(&m);
        assert!(!deg);
        assert!(a.iter().all(|x| (x - 1.0f64 / 3.0).abs() < 1e-12));

        let m = InteractionMatrix::from_dense(0.0, ids(2), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(attention_field(&m).0, vec![0.0, 1.0]);

        let m = InteractionMatrix::from_dense(0.0, ids(2), vec![0.0; 4]);
        assert_eq!(attention_field(&m), (vec![0.5, 0.5], true));
    }

    #[test]
    fn tension_examples() {
        let cal = CalibrationProfile::<f64>::negotiation();
        assert!((tension_of(&ns(1.30, 7.86), &cal) - 34.49).abs() < 0.005);
        assert!((tension_of(&ns(-1.33, -1.14), &cal) - 1.25).abs() < 0.005);
        assert_eq!(tension_of(&ns(0.0, 0.0), &cal), 0.0);
    }

    #[test]
    fn influence_examples() {
        let m = InteractionMatrix::from_dense(0.0, ids(3), vec![0.0, 0.5, 0.2, 0.3, 0.0, 0.7, 0.1, 0.4, 0.0]);
        let z = influence_field(&m, &[0.0; 3]).unwrap();
        assert!(z.exposure.iter().chain(&z.emission).all(|v| *v == 0.0));
        let one = influence_field(&m, &[0.0, 0.0, 2.0]).unwrap();
        assert_eq!(one.exposure, vec![0.4, 1.4, 0.0]);
        assert!(influence_field(&m, &[1.0]).is_err());
    }

    fn sine(f: f64, fs: f64, n: usize, shift: f64) -> Vec<f64> {
        (0..n).map(|k| 1.0 + 0.4 * (2.0 * PI * f * (k as f64 / fs) + shift).sin()).collect()
    }

    #[test]
    fn phase_advances_at_signal_frequency() {
        let (f, fs) = (0.5, 4.0);
        let long = sine(f, fs, 200, 0.3);
        let mut prev: Option<f64> = None;
        let expected = 2.0 * PI * f / fs;
        for end in 40..80 {
            let p = phase_extract(&long[end - 32..end]).unwrap();
            assert!((p.rate - expected).abs() < 0.05 * expected, "rate {}", p.rate);
            if let Some(q) = prev {
                let step = wrap_angle(p.phase - q);
                assert!((step - expected).abs() < 0.05 * expected, "step {step}");
            }
            prev = Some(p.phase);
        }
    }

    #[test]
    fn phase_relations() {
        let a = sine(0.5, 4.0, 40, 0.0);
        let b = sine(0.5, 4.0, 40, 0.0);
        let c = sine(0.5, 4.0, 40, PI);
        let pa = phase_extract(&a).unwrap().phase;
        assert!(wrap_angle(pa - phase_extract(&b).unwrap().phase).abs() < 1e-9);
        let d = wrap_angle(pa - phase_extract(&c).unwrap().phase).abs();
        assert!((d - PI).abs() < 0.1, "{d}");
        assert!(phase_extract(&[1.0; 20]).is_none());
        assert!(phase_extract(&[1.0, 2.0, 3.0]).is_none());
        // pure ramp has no oscillation
        let ramp: Vec<f64> = (0..20).map(|k| k as f64 * 0.1).collect();
        assert!(phase_extract(&ramp).is_none());
    }

    #[test]
    fn kuramoto_examples() {
        assert!((kuramoto_synchrony(&[0.7f64; 5]).unwrap() - 1.0).abs() < 1e-12);
        assert!(kuramoto_synchrony(&[0.0, PI]).unwrap() < 1e-12);
        assert!(kuramoto_synchrony(&[0.0, PI / 2.0, PI, 3.0 * PI / 2.0]).unwrap() < 1e-12);
        assert_eq!(kuramoto_synchrony::<f64>(&[]), None);
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(alignment_dispersion(&[ns(1.0, 2.0), ns(1.0, 2.0)]), 0.0);
        assert!((alignment_dispersion(&[ns(1.0, 0.0), ns(-1.0, 0.0)]) - 1.0).abs() < 1e-12);
    }

    fn sv(t: f64, c: [f64; 9]) -> StateVector<f64> {
        StateVector { timestamp: t, components: c }
    }

    #[test]
    fn momentum_examples() {
        let a = sv(0.0, [1.0; 9]);
        assert_eq!(momentum(&sv(1.0, [1.0; 9]), &a), Some(0.0));
        let mut c = [1.0; 9];
        c[component::TENSION] = 3.0;
        assert_eq!(momentum(&sv(1.0, c), &a), Some(2.0));
        // momentum is excluded from its own derivative
        let mut c = [1.0; 9];
        c[component::MOMENTUM] = 50.0;
        assert_eq!(momentum(&sv(1.0, c), &a), Some(0.0));
        assert_eq!(momentum(&a, &a), None);
    }

    #[test]
    fn momentum_of_linear_drift_is_drift_norm() {
        let drift: [f64; 9] = [0.1, -0.3, 0.05, 2.0, 0.0, 0.4, 7.0, 0.0, -1.2];
        let norm = drift
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != component::MOMENTUM)
            .map(|(_, d)| d * d)
            .sum::<f64>()
            .sqrt();
        let at = |t: f64| sv(t, drift.map(|d| 3.0 + d * t));
        for k in 1..20 {
            let t = k as f64 * 0.25;
            let m = momentum(&at(t), &at(t - 0.25)).unwrap();
            assert!((m - norm).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_examples() {
        let constant: Vec<_> = (0..16).map(|k| sv(k as f64, [2.0; 9])).collect();
        assert!(noise_level(&constant).unwrap().abs() < 1e-20);
        let ramp: Vec<_> = (0..16).map(|k| sv(k as f64 * 0.5, [k as f64 * 0.3 - 1.0; 9])).collect();
        assert!(noise_level(&ramp).unwrap().abs() < 1e-20);
        assert_eq!(noise_level(&ramp[..7]), None);
    }

    #[test]
    fn noise_recovers_injected_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigma = 0.3;
        let normal = Normal::new(0.0, sigma).unwrap();
        let hist: Vec<_> = (0..2000)
            .map(|k| {
                let t = k as f64 * 0.25;
                let mut c = [0.0; 9];
                for (i, v) in c.iter_mut().enumerate() {
                    *v = 0.1 * i as f64 * t + normal.sample(&mut rng);
                }
                sv(t, c)
            })
            .collect();
        let n = noise_level(&hist).unwrap();
        let expected = sigma * sigma * 8.0;
        assert!((n - expected).abs() < 0.2 * expected, "{n} vs {expected}");
    }

    fn room() -> Scene<f64> {
        Scene::room("r", 8.0, 5.0, 0.25)
    }

    #[test]
    fn smoothing_examples() {
        let scene = room();
        let g = smooth_to_scene(&[4.2], &[Vec2::new(3.0, 2.0)], &scene, 1.0);
        assert!(g.covered() > 0 && g.covered() < g.nx * g.ny);
        assert!(g.values.iter().flatten().all(|v| (v - 4.2).abs() < 1e-12));

        let g = smooth_to_scene(&[2.0, 2.0], &[Vec2::new(2.0, 2.5), Vec2::new(6.0, 2.5)], &scene, 1.0);
        assert!(g.values.iter().flatten().all(|v| (v - 2.0).abs() < 1e-12));

        // values {0, 10} at distance 4h; the midpoint (4.125, 2.625) is a cell centre
        let h = 1.0;
        let g = smooth_to_scene(&[0.0, 10.0], &[Vec2::new(2.125, 2.625), Vec2::new(6.125, 2.625)], &scene, h);
        let (ix, iy) = g.cell_of(&Vec2::new(4.125, 2.625)).unwrap();
        assert!((g.get(ix, iy).unwrap() - 5.0).abs() < 0.1);

        let g = smooth_to_scene::<f64>(&[], &[], &scene, 1.0);
        assert_eq!(g.covered(), 0);
    }

    #[test]
    fn boundary_examples() {
        let mut g = Grid::<f64>::empty(Vec2::new(0.0, 0.0), 0.5, 6, 4);
        g.values.iter_mut().for_each(|v| *v = Some(3.0));
        let (b, max) = boundary_field(&g).unwrap();
        assert_eq!(max, 0.0);
        assert!(b.values.iter().all(|v| *v == Some(0.0)));

        let slope = 1.7;
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let c = g.center(ix, iy);
                g.values[iy * g.nx + ix] = Some(slope * (0.6 * c.x() + 0.8 * c.y()));
            }
        }
        let (b, max) = boundary_field(&g).unwrap();
        assert!(b.values.iter().flatten().all(|v| (v - slope).abs() < 1e-9));
        assert!((max - slope).abs() < 1e-9);

        g.values[0] = None;
        let (b, _) = boundary_field(&g).unwrap();
        assert_eq!(b.values[0], None);

        assert!(boundary_field(&Grid::<f64>::empty(Vec2::zero(), 1.0, 1, 5)).is_err());
    }

    #[test]
    fn state_vector_assembly() {
        let scene = room();
        let empty = Grid::for_scene(&scene);
        let ff = FieldFrame {
            timestamp: 0.0,
            attention: vec![1.0 / 3.0; 3],
            tension: vec![0.0; 3],
            tension_mean: 0.0,
            influence: vec![0.0; 3],
            influence_emission: vec![0.0; 3],
            phases: vec![None; 3],
            synchrony: None,
            alignment_dispersion: 0.0,
            momentum: None,
            noise: None,
            tension_grid: empty.clone(),
            boundary_grid: empty,
            boundary_max: 0.0,
            stability: 0.0,
            flags: FieldFlags::default(),
        };
        let x = assemble_state_vector(&ff, AttentionAggregate::Max);
        assert!((x.attention() - 1.0 / 3.0).abs() < 1e-12);
        assert!(x.components.iter().enumerate().all(|(k, v)| k == component::ATTENTION || *v == 0.0));
        let conc = assemble_state_vector(&ff, AttentionAggregate::Concentration);
        assert!(conc.attention().abs() < 1e-12);
    }

    #[test]
    fn correlations_diagnostic() {
        let hist: Vec<_> = (0..10)
            .map(|k| {
                let t = k as f64;
                let mut c = [1.0; 9];
                c[0] = t;
                c[1] = 2.0 * t + 1.0;
                c[2] = -t;
                sv(t, c)
            })
            .collect();
        let r = field_correlations(&hist);
        assert!((r[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert!((r[0][2].unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(r[0][3], None);
    }

    proptest! {
        #[test]
        fn attention_sums_to_one(w in prop::collection::vec(0.0..5.0f64, 16)) {
            let mut w = w;
            for d in [0, 5, 10, 15] { w[d] = 0.0; }
            let m = InteractionMatrix::from_dense(0.0, ids(4), w);
            let (a, deg) = attention_field(&m);
            if !deg {
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn tension_even_and_monotone(v in -6.0..6.0f64, e in -10.0..10.0f64, dv in 0.01..2.0f64) {
            let cal = CalibrationProfile::<f64>::negotiation();
            let t = tension_of(&ns(v, e), &cal);
            prop_assert!(t >= 0.0);
            prop_assert_eq!(t, tension_of(&ns(-v, -e), &cal));
            prop_assert_eq!(t, tension_of(&ns(-v, e), &cal));
            let bigger_v = v.signum() * (v.abs() + dv);
            let bigger_e = e.signum() * (e.abs() + dv);
            prop_assert!(tension_of(&ns(bigger_v, e), &cal) > t || v == 0.0 && tension_of(&ns(dv, e), &cal) > t);
            prop_assert!(tension_of(&ns(v, bigger_e), &cal) > t || e == 0.0 && tension_of(&ns(v, dv), &cal) > t);
        }

        #[test]
        fn tension_is_additive(states in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..10)) {
            let cal = CalibrationProfile::<f64>::negotiation();
            let norm: Vec<_> = states.iter().map(|(v, e)| ns(*v, *e)).collect();
            let f = tension_field(&norm, &cal);
            let sum: f64 = norm.iter().map(|s| tension_of(s, &cal)).sum();
            prop_assert!((f.mean * norm.len() as f64 - sum).abs() < 1e-9 * (1.0 + sum));
        }

        #[test]
        fn kuramoto_bounded(phases in prop::collection::vec(-10.0..10.0f64, 1..20)) {
            let s = kuramoto_synchrony(&phases).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn kuramoto_one_iff_equal(base in -PI..PI, k in prop::collection::vec(-3i32..3, 2..8), jitter in 0.05..3.0f64) {
            let equal: Vec<f64> = k.iter().map(|m| base + 2.0 * PI * *m as f64).collect();
            prop_assert!((kuramoto_synchrony(&equal).unwrap() - 1.0).abs() < 1e-9);
            let mut unequal = equal.clone();
            unequal[0] += jitter;
            prop_assert!(kuramoto_synchrony(&unequal).unwrap() < 1.0 - 1e-6);
        }

        #[test]
        fn smoothing_is_value_bounded(pts in prop::collection::vec((0.5..7.5f64, 0.5..4.5f64, -3.0..30.0f64), 1..6)) {
            let scene = room();
            let values: Vec<f64> = pts.iter().map(|p| p.2).collect();
            let pos: Vec<_> = pts.iter().map(|p| Vec2::new(p.0, p.1)).collect();
            let g = smooth_to_scene(&values, &pos, &scene, 0.8);
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in g.values.iter().flatten() {
                prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
            }
        }
    }
}
