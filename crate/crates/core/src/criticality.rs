//! Criticality function g, index R, zones, the dangerous set C and
//! time-to-threshold over forecast ensembles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::StateVector;
use crate::model::{CalibrationProfile, ModelError};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Any,
    All,
}

/// Predicate defining the dangerous set C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DangerSpec<T> {
    /// R_raw at or above this value
    pub r_crit: Option<T>,
    /// St below this value
    pub st_crit: Option<T>,
    /// mean tension above this value
    pub t_crit: Option<T>,
    #[serde(default)]
    pub combine: Combine,
}

impl<T: Real> DangerSpec<T> {
    pub fn r_threshold(r_crit: T) -> Self {
        DangerSpec { r_crit: Some(r_crit), st_crit: None, t_crit: None, combine: Combine::Any }
    }

    /// C = the whole state space.
    pub fn everything() -> Self {
        Self::r_threshold(T::min_value())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let active = [self.r_crit, self.st_crit, self.t_crit];
        if active.iter().all(Option::is_none) {
            return Err(ModelError::InvalidCalibration("danger set needs at least one criterion".into()));
        }
        if active.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidCalibration("danger thresholds must be finite".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> DangerSpec<U> {
        let c = |x: Option<T>| x.map(|v| U::lit(v.as_f64()));
        DangerSpec { r_crit: c(self.r_crit), st_crit: c(self.st_crit), t_crit: c(self.t_crit), combine: self.combine }
    }

    /// Membership test on (R_raw, St, mean tension).
    pub fn contains(&self, r_raw: T, st: T, t_mean: T) -> bool {
        let tests = [
            self.r_crit.map(|c| r_raw >= c),
            self.st_crit.map(|c| st < c),
            self.t_crit.map(|c| t_mean > c),
        ];
        let mut active = tests.iter().flatten();
        match self.combine {
            Combine::Any => active.any(|b| *b),
            Combine::All => active.all(|b| *b),
        }
    }
}

/// Projection from g to R.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum IndexMode<T> {
    /// clamp(g, 0, 1)
    #[default]
    Identity,
    /// 1 / (1 + exp(-k (g - g0)))
    Logistic { k: T, g0: T },
}

impl<T: Real> IndexMode<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            IndexMode::Identity => Ok(()),
            IndexMode::Logistic { k, g0 } if *k > T::zero() && k.is_finite() && g0.is_finite() => Ok(()),
            IndexMode::Logistic { .. } => {
                Err(ModelError::InvalidCalibration("logistic index needs finite k > 0 and finite g0".into()))
            }
        }
    }

    pub fn cast<U: Real>(&self) -> IndexMode<U> {
        match *self {
            IndexMode::Identity => IndexMode::Identity,
            IndexMode::Logistic { k, g0 } => IndexMode::Logistic { k: U::lit(k.as_f64()), g0: U::lit(g0.as_f64()) },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    Green,
    Amber,
    Red,
}

/// Per-term breakdown of g.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contributions<T> {
    pub stability: T,
    pub tension: T,
    pub noise: T,
    pub gradient: T,
}

impl<T: Real> Contributions<T> {
    pub fn total(&self) -> T {
        self.stability + self.tension + self.noise + self.gradient
    }
}

/// Normalized inputs of g.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GInputs<T> {
    pub st: T,
    pub t_norm: T,
    pub n_norm: T,
    pub b_norm: T,
}

impl<T: Real> GInputs<T> {
    /// Normalizes X with the profile's scales. A missing noise estimate counts as zero.
    pub fn from_state(x: &StateVector<T>, cal: &CalibrationProfile<T>) -> Self {
        let n = x.noise();
        GInputs {
            st: x.stability(),
            t_norm: x.tension() / cal.t_norm_scale,
            n_norm: if n.is_finite() { n / cal.n_norm_scale } else { T::zero() },
            b_norm: x.boundary() / cal.b_norm_scale,
        }
    }
}

/// g = a1/(|St|+eps) + a2 T_norm + a3 N_norm + a4 B_norm.
pub fn criticality_g<T: Real>(inputs: &GInputs<T>, cal: &CalibrationProfile<T>) -> (T, Contributions<T>) {
    let [a1, a2, a3, a4] = cal.r_weights.alpha;
    let c = Contributions {
        stability: a1 / (inputs.st.abs() + cal.r_weights.epsilon),
        tension: a2 * inputs.t_norm,
        noise: a3 * inputs.n_norm,
        gradient: a4 * inputs.b_norm,
    };
    (c.total(), c)
}

pub fn criticality_index<T: Real>(g: T, mode: &IndexMode<T>) -> T {
    match *mode {
        IndexMode::Identity => g.max(T::zero()).min(T::one()),
        IndexMode::Logistic { k, g0 } => T::one() / (T::one() + (-k * (g - g0)).exp()),
    }
}

pub fn classify_zone<T: Real>(r: T, cal: &CalibrationProfile<T>) -> Zone {
    if r < cal.zone_thresholds.green_max {
        Zone::Green
    } else if r < cal.zone_thresholds.amber_max {
        Zone::Amber
    } else {
        Zone::Red
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalityReport<T> {
    pub g_value: T,
    /// clamp(g, 0, 1), the quantity the danger set tests
    pub r_raw: T,
    /// projected index under the profile's mode
    pub r_index: T,
    pub zone: Zone,
    pub contributions: Contributions<T>,
    pub inputs: GInputs<T>,
    /// St below the profile's red-flag level, independent of the zone
    pub st_red_flag: bool,
    pub in_danger: bool,
    /// forecast time to enter C, filled in by scenario analysis
    pub tau: Option<T>,
    pub tau_bounds: Option<TauBounds<T>>,
}

/// Full criticality evaluation of one state vector.
pub fn evaluate<T: Real>(x: &StateVector<T>, cal: &CalibrationProfile<T>) -> CriticalityReport<T> {
    evaluate_inputs(&GInputs::from_state(x, cal), x.tension(), cal)
}

pub fn evaluate_inputs<T: Real>(inputs: &GInputs<T>, t_mean: T, cal: &CalibrationProfile<T>) -> CriticalityReport<T> {
    let (g, contributions) = criticality_g(inputs, cal);
    let r_raw = criticality_index(g, &IndexMode::Identity);
    let r_index = criticality_index(g, &cal.index_mode);
    CriticalityReport {
        g_value: g,
        r_raw,
        r_index,
        zone: classify_zone(r_index, cal),
        contributions,
        inputs: *inputs,
        st_red_flag: inputs.st < cal.st_red_flag,
        in_danger: cal.danger.contains(r_raw, inputs.st, t_mean),
        tau: None,
        tau_bounds: None,
    }
}

/// Percentile bounds on the time to threshold; `upper` is `None` when it is infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauBounds<T> {
    pub lower: Option<T>,
    pub upper: Option<T>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TauError {
    #[error("time to threshold needs at least one trajectory")]
    EmptyEnsemble,
    #[error("trajectory {0} is not time-ordered")]
    Unordered(usize),
}

/// One forecast sample: offset from the forecast origin and membership of C.
pub type DangerSample<T> = (T, bool);

/// First-entry times into C (`None` when a trajectory never enters).
pub fn first_entries<T: Real>(trajectories: &[Vec<DangerSample<T>>]) -> Result<Vec<Option<T>>, TauError> {
    if trajectories.is_empty() {
        return Err(TauError::EmptyEnsemble);
    }
    trajectories
        .iter()
        .enumerate()
        .map(|(k, tr)| {
            if tr.windows(2).any(|w| !(w[0].0 < w[1].0)) {
                return Err(TauError::Unordered(k));
            }
            Ok(tr.iter().find(|(_, inside)| *inside).map(|(t, _)| *t))
        })
        .collect()
}

/// Linear-interpolation percentile of sorted data, q in [0, 1].
pub fn percentile<T: Real>(sorted: &[T], q: f64) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    if frac == T::zero() {
        return sorted[lo];
    }
    if sorted[hi] == T::infinity() {
        return T::infinity();
    }
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// tau = median first-entry time over entering trajectories; the lower bound is
/// their 10th percentile; the upper bound is the 90th percentile over all
/// trajectories with non-entering ones counted as +inf.
pub fn time_to_threshold<T: Real>(
    trajectories: &[Vec<DangerSample<T>>],
) -> Result<(Option<T>, TauBounds<T>), TauError> {
    tau_from_entries(&first_entries(trajectories)?)
}

pub fn tau_from_entries<T: Real>(entries: &[Option<T>]) -> Result<(Option<T>, TauBounds<T>), TauError> {
    if entries.is_empty() {
        return Err(TauError::EmptyEnsemble);
    }
    let mut entering: Vec<T> = entries.iter().flatten().copied().collect();
    entering.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut all: Vec<T> = entries.iter().map(|e| e.unwrap_or(T::infinity())).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    if entering.is_empty() {
        return Ok((None, TauBounds { lower: None, upper: None }));
    }
    let tau = percentile(&entering, 0.5);
    let lower = percentile(&entering, 0.1);
    let upper = percentile(&all, 0.9);
    let upper = upper.is_finite().then_some(upper);
    Ok((Some(tau), TauBounds { lower: Some(lower), upper }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type Cal = CalibrationProfile<f64>;

    fn inputs(st: f64, t: f64, n: f64, b: f64) -> GInputs<f64> {
        GInputs { st, t_norm: t, n_norm: n, b_norm: b }
    }

    #[test]
    fn reference_decomposition() {
        let cal = Cal::negotiation();
        let (g, c) = criticality_g(&inputs(-2.526, 0.138, 0.308, 0.0), &cal);
        assert!((c.stability - 0.152).abs() < 5e-4);
        assert!((c.tension - 0.048).abs() < 5e-4);
        assert!((c.noise - 0.077).abs() < 5e-4);
        assert!((g - 0.277).abs() < 2e-3);
        assert!((c.total() - g).abs() < 1e-12);
        assert_eq!(criticality_index(g, &IndexMode::Identity), g);
        assert_eq!(classify_zone(g, &cal), Zone::Green);
    }

    #[test]
    fn pole_and_deep_stability() {
        let cal = Cal::negotiation();
        let (g, _) = criticality_g(&inputs(0.0, 0.0, 0.0, 0.0), &cal);
        assert!((g - 4.0).abs() < 1e-12);
        let (g, _) = criticality_g(&inputs(-1e12, 0.0, 0.0, 0.0), &cal);
        assert!(g < 1e-11);
    }

    #[test]
    fn index_modes() {
        assert_eq!(criticality_index(1.7, &IndexMode::Identity), 1.0);
        assert_eq!(criticality_index(-0.2, &IndexMode::Identity), 0.0);
        let m = IndexMode::Logistic { k: 6.0, g0: 0.4 };
        assert!((criticality_index(0.4f64, &m) - 0.5).abs() < 1e-15);
        assert!(IndexMode::Logistic { k: -1.0, g0: 0.0 }.validate().is_err());
    }

    #[test]
    fn zone_boundaries() {
        let cal = Cal::negotiation();
        assert_eq!(classify_zone(0.30, &cal), Zone::Amber);
        assert_eq!(classify_zone(0.5999, &cal), Zone::Amber);
        assert_eq!(classify_zone(0.60, &cal), Zone::Red);
        assert_eq!(classify_zone(0.95, &cal), Zone::Red);
    }

    #[test]
    fn danger_rules() {
        let d = DangerSpec { r_crit: Some(0.6), st_crit: Some(-3.0), t_crit: None, combine: Combine::All };
        assert!(d.contains(0.7, -3.5, 0.0));
        assert!(!d.contains(0.7, -2.0, 0.0));
        let any = DangerSpec { combine: Combine::Any, ..d };
        assert!(any.contains(0.1, -3.5, 0.0));
        assert!(DangerSpec::<f64> { r_crit: None, st_crit: None, t_crit: None, combine: Combine::Any }.validate().is_err());
        assert!(DangerSpec::r_threshold(f64::NAN).validate().is_err());
        assert!(DangerSpec::<f64>::everything().contains(0.0, 5.0, 0.0));
    }

    #[test]
    fn tau_examples() {
        // everything already inside at the first step
        let tr = vec![vec![(0.5, true), (1.0, true)]; 4];
        let (tau, b) = time_to_threshold(&tr).unwrap();
        assert_eq!(tau, Some(0.5));
        assert_eq!(b, TauBounds { lower: Some(0.5), upper: Some(0.5) });

        let never = vec![vec![(0.5, false), (1.0, false)]; 3];
        let (tau, b) = time_to_threshold(&never).unwrap();
        assert_eq!(tau, None);
        assert_eq!(b.upper, None);

        assert_eq!(time_to_threshold::<f64>(&[]), Err(TauError::EmptyEnsemble));
        assert_eq!(time_to_threshold(&[vec![(1.0, false), (0.5, true)]]), Err(TauError::Unordered(0)));
    }

    #[test]
    fn tau_linear_ramp() {
        // R ramps 0.08 + 0.01 * t, crossing 0.60 at t = 52
        let dt = 0.5;
        let tr: Vec<(f64, bool)> = (1..=180)
            .map(|k| {
                let t = k as f64 * dt;
                let r = (0.08 + 0.01 * t).min(1.0);
                (t, DangerSpec::r_threshold(0.60).contains(r, 0.0, 0.0))
            })
            .collect();
        let (tau, _) = time_to_threshold(&[tr]).unwrap();
        assert!((tau.unwrap() - 52.0).abs() <= dt);
    }

    #[test]
    fn tau_upper_infinite_with_non_entering() {
        let mut tr = vec![vec![(1.0, false), (2.0, true)]; 5];
        tr.extend(vec![vec![(1.0, false), (2.0, false)]; 5]);
        let (tau, b) = time_to_threshold(&tr).unwrap();
        assert_eq!(tau, Some(2.0));
        assert_eq!(b.lower, Some(2.0));
        assert_eq!(b.upper, None);
    }

    proptest! {
        #[test]
        fn monotone_projection(st in -10.0..10.0f64, t in 0.0..3.0f64, n in 0.0..3.0f64, b in 0.0..3.0f64, d in 0.001..2.0f64) {
            let mut cal = Cal::negotiation();
            cal.r_weights.alpha = [0.4, 0.35, 0.25, 0.1];
            let g = |x: GInputs<f64>| criticality_g(&x, &cal).0;
            let base = inputs(st, t, n, b);
            let deeper = inputs(st.signum() * (st.abs() + d), t, n, b);
            prop_assert!(g(deeper) <= g(base));
            prop_assert!(g(inputs(st, t + d, n, b)) >= g(base));
            prop_assert!(g(inputs(st, t, n + d, b)) >= g(base));
            prop_assert!(g(inputs(st, t, n, b + d)) >= g(base));
        }

        #[test]
        fn ordering_preserved(g1 in 0.0..1.0f64, dg in 1e-6..1.0f64, k in 0.5..20.0f64, g0 in 0.0..1.0f64) {
            let g2 = (g1 + dg).min(1.0 - 1e-9);
            prop_assume!(g2 > g1);
            prop_assert!(criticality_index(g1, &IndexMode::Identity) < criticality_index(g2, &IndexMode::Identity));
            let m = IndexMode::Logistic { k, g0 };
            prop_assert!(criticality_index(g1, &m) <= criticality_index(g2, &m));
        }

        #[test]
        fn contributions_sum(st in -10.0..10.0f64, t in 0.0..3.0f64, n in 0.0..3.0f64, b in 0.0..3.0f64) {
            let cal = Cal::crowd_safety();
            let (g, c) = criticality_g(&inputs(st, t, n, b), &cal);
            prop_assert!((c.total() - g).abs() < 1e-9);
        }

        #[test]
        fn tau_bounds_bracket(entries in prop::collection::vec(prop::option::of(0.0..100.0f64), 1..60)) {
            let (tau, b) = tau_from_entries(&entries).unwrap();
            if let Some(tau) = tau {
                prop_assert!(b.lower.unwrap() <= tau);
                if let Some(u) = b.upper { prop_assert!(tau <= u); }
            }
        }
    }
}
