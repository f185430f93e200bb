//! Domain types: agent micro-states, frames, scenes and calibration profiles.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criticality::{DangerSpec, IndexMode};
use crate::scalar::{wrap_angle, Real};

/// Opaque agent identifier. Accepts JSON strings or integers on input and
/// always serializes as a string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        AgentId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId(s.to_string())
    }
}

impl From<u32> for AgentId {
    fn from(n: u32) -> Self {
        AgentId(n.to_string())
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(i64),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Text(s) => AgentId(s),
            Raw::Int(n) => AgentId(n.to_string()),
        })
    }
}

/// Planar vector, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec2<T>(pub [T; 2]);

impl<T: Real> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Vec2([x, y])
    }

    pub fn zero() -> Self {
        Vec2([T::zero(), T::zero()])
    }

    #[inline]
    pub fn x(&self) -> T {
        self.0[0]
    }

    #[inline]
    pub fn y(&self) -> T {
        self.0[1]
    }

    pub fn norm(&self) -> T {
        self.x().hypot(self.y())
    }

    pub fn sub(&self, o: &Self) -> Self {
        Vec2([self.x() - o.x(), self.y() - o.y()])
    }

    pub fn add(&self, o: &Self) -> Self {
        Vec2([self.x() + o.x(), self.y() + o.y()])
    }

    pub fn scale(&self, s: T) -> Self {
        Vec2([self.x() * s, self.y() * s])
    }

    pub fn dist(&self, o: &Self) -> T {
        self.sub(o).norm()
    }

    /// Rotate counter-clockwise about the origin.
    pub fn rotate(&self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Vec2([c * self.x() - s * self.y(), s * self.x() + c * self.y()])
    }

    pub fn is_finite(&self) -> bool {
        self.x().is_finite() && self.y().is_finite()
    }

    pub fn cast<U: Real>(&self) -> Vec2<U> {
        Vec2([U::lit(self.x().as_f64()), U::lit(self.y().as_f64())])
    }
}

/// Observable kinematics of one agent at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct AgentMicroState<T> {
    pub agent_id: AgentId,
    /// meters
    pub position: Vec2<T>,
    /// m/s
    pub velocity: Vec2<T>,
    /// radians, [-pi, pi]
    pub orientation: T,
    /// gestural amplitude, rad/s
    pub gesture: T,
    /// proxemic index in [0, 1]
    #[serde(default)]
    pub proxemic: T,
    /// measurement confidence in [0, 1]
    pub confidence: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_label: Option<String>,
}

impl<T: Real> AgentMicroState<T> {
    pub fn speed(&self) -> T {
        self.velocity.norm()
    }
}

/// One timestamped snapshot of all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct MicroStateFrame<T> {
    /// seconds
    pub timestamp: T,
    pub agents: Vec<AgentMicroState<T>>,
    #[serde(default)]
    pub scene_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect<T> {
    pub min: Vec2<T>,
    pub max: Vec2<T>,
}

impl<T: Real> Rect<T> {
    pub fn new(x0: T, y0: T, x1: T, y1: T) -> Self {
        Rect {
            min: Vec2::new(x0, y0),
            max: Vec2::new(x1, y1),
        }
    }

    pub fn contains(&self, p: &Vec2<T>) -> bool {
        p.x() >= self.min.x() && p.x() <= self.max.x() && p.y() >= self.min.y() && p.y() <= self.max.y()
    }

    pub fn width(&self) -> T {
        self.max.x() - self.min.x()
    }

    pub fn height(&self) -> T {
        self.max.y() - self.min.y()
    }
}

/// Closed polygon; the last vertex connects back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon<T>(pub Vec<Vec2<T>>);

impl<T: Real> Polygon<T> {
    pub fn edges(&self) -> impl Iterator<Item = (Vec2<T>, Vec2<T>)> + '_ {
        let n = self.0.len();
        (0..n).map(move |k| (self.0[k], self.0[(k + 1) % n]))
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: &Vec2<T>) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y() > p.y()) != (b.y() > p.y()) {
                let x = a.x() + (p.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
                if p.x() < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// True when segment `p`-`q` crosses an edge of the polygon or lies inside it.
    pub fn blocks_segment(&self, p: &Vec2<T>, q: &Vec2<T>) -> bool {
        if self.0.len() < 3 {
            return false;
        }
        if self.edges().any(|(a, b)| segments_intersect(p, q, &a, &b)) {
            return true;
        }
        let mid = p.add(q).scale(T::lit(0.5));
        self.contains(&mid)
    }
}

fn orient<T: Real>(a: &Vec2<T>, b: &Vec2<T>, c: &Vec2<T>) -> T {
    (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x())
}

/// Proper or touching intersection of two closed segments.
pub fn segments_intersect<T: Real>(p: &Vec2<T>, q: &Vec2<T>, a: &Vec2<T>, b: &Vec2<T>) -> bool {
    let d1 = orient(a, b, p);
    let d2 = orient(a, b, q);
    let d3 = orient(p, q, a);
    let d4 = orient(p, q, b);
    let z = T::zero();
    if ((d1 > z && d2 < z) || (d1 < z && d2 > z)) && ((d3 > z && d4 < z) || (d3 < z && d4 > z)) {
        return true;
    }
    let on = |u: &Vec2<T>, v: &Vec2<T>, w: &Vec2<T>| {
        w.x() >= u.x().min(v.x()) && w.x() <= u.x().max(v.x()) && w.y() >= u.y().min(v.y()) && w.y() <= u.y().max(v.y())
    };
    (d1 == z && on(a, b, p)) || (d2 == z && on(a, b, q)) || (d3 == z && on(p, q, a)) || (d4 == z && on(p, q, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment<T> {
    pub a: Vec2<T>,
    pub b: Vec2<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone<T> {
    pub name: String,
    pub polygon: Polygon<T>,
}

/// Physical environment: bounds, obstacles, exits, named zones and the
/// raster resolution used for scene-domain fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene<T> {
    #[serde(default)]
    pub id: String,
    pub bounds: Rect<T>,
    #[serde(default)]
    pub obstacles: Vec<Polygon<T>>,
    #[serde(default)]
    pub exits: Vec<Segment<T>>,
    #[serde(default)]
    pub zones: Vec<Zone<T>>,
    /// meters per cell
    pub grid_resolution: T,
}

impl<T: Real> Scene<T> {
    /// Obstacle-free rectangular room with the origin at one corner.
    pub fn room(id: &str, width: T, height: T, grid_resolution: T) -> Self {
        Scene {
            id: id.to_string(),
            bounds: Rect::new(T::zero(), T::zero(), width, height),
            obstacles: Vec::new(),
            exits: Vec::new(),
            zones: Vec::new(),
            grid_resolution,
        }
    }

    /// The 8 x 5 m conference room of the reference negotiation recording.
    pub fn conference_room() -> Self {
        Self::room("conference-room", T::lit(8.0), T::lit(5.0), T::lit(0.25))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let b = &self.bounds;
        if !(b.width() > T::zero() && b.height() > T::zero()) {
            return Err(ModelError::InvalidScene("bounds are empty".into()));
        }
        if !(self.grid_resolution > T::zero()) {
            return Err(ModelError::InvalidScene("grid_resolution must be positive".into()));
        }
        let polys = self.obstacles.iter().chain(self.zones.iter().map(|z| &z.polygon));
        for poly in polys {
            if poly.0.iter().any(|p| !b.contains(p)) {
                return Err(ModelError::InvalidScene("polygon vertex outside bounds".into()));
            }
        }
        Ok(())
    }

    /// True if any obstacle blocks the line of sight between two points.
    pub fn occluded(&self, p: &Vec2<T>, q: &Vec2<T>) -> bool {
        self.obstacles.iter().any(|o| o.blocks_segment(p, q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RWeights<T> {
    /// weights of the stability, tension, noise and gradient terms
    pub alpha: [T; 4],
    /// pole guard for the stability term
    pub epsilon: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneThresholds<T> {
    pub green_max: T,
    pub amber_max: T,
}

/// Aggregator used for the attention component of the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAggregate {
    /// largest attention share
    #[default]
    Max,
    /// 1 - normalized Shannon entropy
    Concentration,
    /// variance of the shares
    Variance,
}

/// Observable used as the rhythmic carrier for phase extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhaseCarrier {
    #[default]
    Gesture,
    Speed,
}

/// Per-vertical calibration. Every tunable constant of the pipeline lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile<T> {
    pub vertical_name: String,
    /// speed baseline, m/s
    pub mu_v: T,
    pub sigma_v: T,
    /// gesture baseline, rad/s
    pub mu_e: T,
    pub sigma_e: T,
    pub gamma_v: T,
    pub gamma_e: T,
    pub gamma_p: T,
    /// interaction scale
    pub alpha_w: T,
    /// proximity bandwidth, m
    pub h_r: T,
    /// alignment bandwidth, rad
    pub h_theta: T,
    /// expressivity gain
    pub beta_e: T,
    /// m
    pub comfort_distance: T,
    pub r_weights: RWeights<T>,
    pub t_norm_scale: T,
    pub n_norm_scale: T,
    pub b_norm_scale: T,
    /// scene smoothing bandwidth, m
    pub smoothing_h: T,
    /// rolling window for noise, phases and early-warning statistics, s
    pub ews_window: T,
    /// autocorrelation lag in seconds; `None` means one frame interval
    #[serde(default)]
    pub ews_lag: Option<T>,
    pub zone_thresholds: ZoneThresholds<T>,
    #[serde(default)]
    pub index_mode: IndexMode<T>,
    pub danger: DangerSpec<T>,
    /// St below this value raises the stability red flag
    pub st_red_flag: T,
    /// cost weight of execution delay (fraction of horizon)
    pub w_delay: T,
    /// cost weight of structural cost
    pub w_struct: T,
    #[serde(default)]
    pub attention_aggregate: AttentionAggregate,
    #[serde(default)]
    pub phase_carrier: PhaseCarrier,
    /// zero W entries whose line of sight crosses an obstacle
    #[serde(default = "default_true")]
    pub occlusion: bool,
}

fn default_true() -> bool {
    true
}

impl<T: Real> Default for CalibrationProfile<T> {
    fn default() -> Self {
        Self::negotiation()
    }
}

impl<T: Real> CalibrationProfile<T> {
    /// Default negotiation vertical. Baselines reproduce the reference
    /// negotiation recording; kernel parameters invert its interaction
    /// arithmetic.
    pub fn negotiation() -> Self {
        let l = T::lit;
        CalibrationProfile {
            vertical_name: "negotiation".into(),
            mu_v: l(0.08),
            sigma_v: l(0.06),
            mu_e: l(0.449),
            sigma_e: l(0.35),
            gamma_v: l(0.30),
            gamma_e: l(0.55),
            gamma_p: l(0.15),
            alpha_w: l(1.0),
            h_r: l(2.50),
            h_theta: l(1.047),
            beta_e: l(0.5),
            comfort_distance: l(1.2),
            r_weights: RWeights {
                alpha: [l(0.40), l(0.35), l(0.25), l(0.0)],
                epsilon: l(0.10),
            },
            t_norm_scale: l(50.0),
            n_norm_scale: l(crate::scenario::DEFAULT_N_NORM_SCALE),
            b_norm_scale: l(20.0),
            smoothing_h: l(1.0),
            ews_window: l(20.0),
            ews_lag: None,
            zone_thresholds: ZoneThresholds {
                green_max: l(0.30),
                amber_max: l(0.60),
            },
            index_mode: IndexMode::Identity,
            danger: DangerSpec::r_threshold(l(0.60)),
            st_red_flag: l(0.0),
            w_delay: l(crate::scenario::DEFAULT_W_DELAY),
            w_struct: l(crate::scenario::DEFAULT_W_STRUCT),
            attention_aggregate: AttentionAggregate::Max,
            phase_carrier: PhaseCarrier::Gesture,
            occlusion: true,
        }
    }

    /// Crowd-safety vertical: gradient term active, wider kernels.
    pub fn crowd_safety() -> Self {
        let l = T::lit;
        CalibrationProfile {
            vertical_name: "crowd_safety".into(),
            mu_v: l(1.2),
            sigma_v: l(0.35),
            mu_e: l(0.3),
            sigma_e: l(0.3),
            h_r: l(1.5),
            comfort_distance: l(0.8),
            r_weights: RWeights {
                alpha: [l(0.30), l(0.20), l(0.25), l(0.25)],
                epsilon: l(0.10),
            },
            smoothing_h: l(2.0),
            ews_window: l(20.0),
            danger: DangerSpec::r_threshold(l(0.55)),
            ..Self::negotiation()
        }
    }

    pub fn education() -> Self {
        let l = T::lit;
        CalibrationProfile {
            vertical_name: "education".into(),
            h_r: l(4.0),
            r_weights: RWeights {
                alpha: [l(0.30), l(0.30), l(0.40), l(0.0)],
                epsilon: l(0.10),
            },
            ews_window: l(60.0),
            attention_aggregate: AttentionAggregate::Concentration,
            ..Self::negotiation()
        }
    }

    pub fn crisis_command() -> Self {
        let l = T::lit;
        CalibrationProfile {
            vertical_name: "crisis_command".into(),
            r_weights: RWeights {
                alpha: [l(0.45), l(0.25), l(0.30), l(0.0)],
                epsilon: l(0.10),
            },
            ews_window: l(20.0),
            ..Self::negotiation()
        }
    }

    pub fn clinical_groups() -> Self {
        let l = T::lit;
        CalibrationProfile {
            vertical_name: "clinical_groups".into(),
            r_weights: RWeights {
                alpha: [l(0.25), l(0.45), l(0.30), l(0.0)],
                epsilon: l(0.10),
            },
            ews_window: l(60.0),
            ..Self::negotiation()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "negotiation" => Some(Self::negotiation()),
            "crowd_safety" => Some(Self::crowd_safety()),
            "education" => Some(Self::education()),
            "crisis_command" => Some(Self::crisis_command()),
            "clinical_groups" => Some(Self::clinical_groups()),
            _ => None,
        }
    }

    pub const PRESET_NAMES: [&'static str; 5] =
        ["negotiation", "crowd_safety", "education", "crisis_command", "clinical_groups"];

    pub fn validate(&self) -> Result<(), ModelError> {
        let z = T::zero();
        let bad = |m: &str| Err(ModelError::InvalidCalibration(m.to_string()));
        let positive = [
            ("sigma_v", self.sigma_v),
            ("sigma_e", self.sigma_e),
            ("h_r", self.h_r),
            ("h_theta", self.h_theta),
            ("smoothing_h", self.smoothing_h),
            ("ews_window", self.ews_window),
            ("t_norm_scale", self.t_norm_scale),
            ("n_norm_scale", self.n_norm_scale),
            ("b_norm_scale", self.b_norm_scale),
            ("comfort_distance", self.comfort_distance),
        ];
        for (name, v) in positive {
            if !(v > z) || !v.is_finite() {
                return bad(&format!("{name} must be positive and finite"));
            }
        }
        let gammas = [self.gamma_v, self.gamma_e, self.gamma_p];
        if gammas.iter().any(|g| !(*g >= z)) || !(self.gamma_v + self.gamma_e + self.gamma_p > z) {
            return bad("tension weights must be nonnegative with a positive sum");
        }
        let zt = &self.zone_thresholds;
        if !(z < zt.green_max && zt.green_max < zt.amber_max && zt.amber_max < T::one()) {
            return bad("zone thresholds must satisfy 0 < green_max < amber_max < 1");
        }
        if !(self.r_weights.epsilon > z) {
            return bad("r_weights.epsilon must be positive");
        }
        if self.w_delay < z || self.w_struct < z {
            return bad("cost weights must be nonnegative");
        }
        if let Some(lag) = self.ews_lag {
            if !(lag > z && lag < self.ews_window) {
                return bad("ews_lag must lie in (0, ews_window)");
            }
        }
        self.danger.validate()?;
        self.index_mode.validate()?;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> CalibrationProfile<U> {
        let c = |x: T| U::lit(x.as_f64());
        CalibrationProfile {
            vertical_name: self.vertical_name.clone(),
            mu_v: c(self.mu_v),
            sigma_v: c(self.sigma_v),
            mu_e: c(self.mu_e),
            sigma_e: c(self.sigma_e),
            gamma_v: c(self.gamma_v),
            gamma_e: c(self.gamma_e),
            gamma_p: c(self.gamma_p),
            alpha_w: c(self.alpha_w),
            h_r: c(self.h_r),
            h_theta: c(self.h_theta),
            beta_e: c(self.beta_e),
            comfort_distance: c(self.comfort_distance),
            r_weights: RWeights {
                alpha: self.r_weights.alpha.map(c),
                epsilon: c(self.r_weights.epsilon),
            },
            t_norm_scale: c(self.t_norm_scale),
            n_norm_scale: c(self.n_norm_scale),
            b_norm_scale: c(self.b_norm_scale),
            smoothing_h: c(self.smoothing_h),
            ews_window: c(self.ews_window),
            ews_lag: self.ews_lag.map(c),
            zone_thresholds: ZoneThresholds {
                green_max: c(self.zone_thresholds.green_max),
                amber_max: c(self.zone_thresholds.amber_max),
            },
            index_mode: self.index_mode.cast(),
            danger: self.danger.cast(),
            st_red_flag: c(self.st_red_flag),
            w_delay: c(self.w_delay),
            w_struct: c(self.w_struct),
            attention_aggregate: self.attention_aggregate,
            phase_carrier: self.phase_carrier,
            occlusion: self.occlusion,
        }
    }
}

/// Z-scored channels of one agent plus the carried proxemic index and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedState<T> {
    pub speed_z: T,
    pub gesture_z: T,
    pub proxemic: T,
    pub confidence: T,
}

impl<T: Real> NormalizedState<T> {
    /// Channel vector used for dispersion: (speed z, gesture z, proxemic).
    pub fn channels(&self) -> [T; 3] {
        [self.speed_z, self.gesture_z, self.proxemic]
    }
}

/// Z-score an agent's speed and gesture against the profile baselines.
pub fn normalize_agent<T: Real>(a: &AgentMicroState<T>, cal: &CalibrationProfile<T>) -> NormalizedState<T> {
    NormalizedState {
        speed_z: (a.speed() - cal.mu_v) / cal.sigma_v,
        gesture_z: (a.gesture - cal.mu_e) / cal.sigma_e,
        proxemic: a.proxemic,
        confidence: a.confidence,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid calibration profile: {0}")]
    InvalidCalibration(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Non-fatal correction applied during validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameWarning {
    ConfidenceClamped { agent: AgentId, original: f64 },
    ProxemicClamped { agent: AgentId, original: f64 },
    GestureClamped { agent: AgentId, original: f64 },
    OrientationWrapped { agent: AgentId, original: f64 },
    OutOfScene { agent: AgentId },
}

/// Violation that makes a frame unusable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameViolation {
    DuplicateId { agent: AgentId },
    NonFinite { agent: Option<AgentId>, field: String },
    TimestampRegression { previous: f64, current: f64 },
    OutOfBounds { agent: AgentId },
}

impl fmt::Display for FrameViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameViolation::DuplicateId { agent } => write!(f, "duplicate agent_id {agent}"),
            FrameViolation::NonFinite { agent: Some(a), field } => write!(f, "non-finite {field} for agent {a}"),
            FrameViolation::NonFinite { agent: None, field } => write!(f, "non-finite {field}"),
            FrameViolation::TimestampRegression { previous, current } => {
                write!(f, "timestamp {current} does not follow {previous}")
            }
            FrameViolation::OutOfBounds { agent } => write!(f, "agent {agent} outside scene bounds"),
        }
    }
}

/// Rejection report listing every violation found in a frame.
#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("frame at t={timestamp} rejected: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct FrameRejection {
    pub timestamp: f64,
    pub violations: Vec<FrameViolation>,
}

/// A frame that passed validation. Only obtainable through [`validate_frame`]
/// (or by parsing a serialized validated frame, which re-checks it).
///
/// ```compile_fail
/// use groupfield_core::model::{MicroStateFrame, ValidatedFrame};
/// let f: MicroStateFrame<f64> = MicroStateFrame { timestamp: 0.0, agents: vec![], scene_ref: String::new() };
/// let v = ValidatedFrame { frame: f, warnings: vec![] };
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawValidated<T>", bound(deserialize = "T: Real"))]
pub struct ValidatedFrame<T> {
    frame: MicroStateFrame<T>,
    warnings: Vec<FrameWarning>,
}

#[derive(Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
struct RawValidated<T> {
    frame: MicroStateFrame<T>,
    #[serde(default)]
    warnings: Vec<FrameWarning>,
}

impl<T: Real> TryFrom<RawValidated<T>> for ValidatedFrame<T> {
    type Error = FrameRejection;

    fn try_from(raw: RawValidated<T>) -> Result<Self, Self::Error> {
        let (frame, mut fresh) = check_frame(raw.frame, None, None)?;
        let mut warnings = raw.warnings;
        for w in fresh.drain(..) {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        Ok(ValidatedFrame { frame, warnings })
    }
}

impl<T: Real> ValidatedFrame<T> {
    pub fn frame(&self) -> &MicroStateFrame<T> {
        &self.frame
    }

    pub fn agents(&self) -> &[AgentMicroState<T>] {
        &self.frame.agents
    }

    pub fn timestamp(&self) -> T {
        self.frame.timestamp
    }

    pub fn warnings(&self) -> &[FrameWarning] {
        &self.warnings
    }

    pub fn into_frame(self) -> MicroStateFrame<T> {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.frame.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame.agents.is_empty()
    }

    /// Replace the agent list, re-running the structural checks.
    pub fn with_agents(&self, agents: Vec<AgentMicroState<T>>) -> Result<Self, FrameRejection> {
        let frame = MicroStateFrame {
            timestamp: self.frame.timestamp,
            agents,
            scene_ref: self.frame.scene_ref.clone(),
        };
        let (frame, warnings) = check_frame(frame, None, None)?;
        Ok(ValidatedFrame { frame, warnings })
    }

    /// Same agents at a new timestamp (used by the forecast integrator).
    pub fn retimed(&self, timestamp: T) -> Self {
        let mut out = self.clone();
        out.frame.timestamp = timestamp;
        out
    }
}

/// Validate a frame against a scene and the previous stream timestamp.
///
/// Out-of-range confidence, proxemic index and gesture are clamped, angles
/// are wrapped and positions outside the scene are flagged; duplicate ids,
/// non-finite numbers and timestamp regressions reject the frame.
pub fn validate_frame<T: Real>(
    frame: &MicroStateFrame<T>,
    scene: &Scene<T>,
    previous_timestamp: Option<T>,
) -> Result<ValidatedFrame<T>, FrameRejection> {
    let (frame, warnings) = check_frame(frame.clone(), Some(scene), previous_timestamp)?;
    Ok(ValidatedFrame { frame, warnings })
}

fn check_frame<T: Real>(
    mut frame: MicroStateFrame<T>,
    scene: Option<&Scene<T>>,
    previous_timestamp: Option<T>,
) -> Result<(MicroStateFrame<T>, Vec<FrameWarning>), FrameRejection> {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let mut fatal = false;

    if !frame.timestamp.is_finite() {
        fatal = true;
        violations.push(FrameViolation::NonFinite { agent: None, field: "timestamp".into() });
    } else if let Some(prev) = previous_timestamp {
        if frame.timestamp <= prev {
            fatal = true;
            violations.push(FrameViolation::TimestampRegression {
                previous: prev.as_f64(),
                current: frame.timestamp.as_f64(),
            });
        }
    }

    let mut seen = BTreeSet::new();
    let mut dup_reported = BTreeSet::new();
    for a in &frame.agents {
        if !seen.insert(a.agent_id.clone()) && dup_reported.insert(a.agent_id.clone()) {
            fatal = true;
            violations.push(FrameViolation::DuplicateId { agent: a.agent_id.clone() });
        }
    }

    for a in frame.agents.iter_mut() {
        let id = &a.agent_id;
        let checks = [
            ("position", a.position.is_finite()),
            ("velocity", a.velocity.is_finite()),
            ("orientation", a.orientation.is_finite()),
            ("gesture", a.gesture.is_finite()),
            ("proxemic", a.proxemic.is_finite()),
            ("confidence", a.confidence.is_finite()),
        ];
        let mut agent_ok = true;
        for (field, ok) in checks {
            if !ok {
                fatal = true;
                agent_ok = false;
                violations.push(FrameViolation::NonFinite { agent: Some(id.clone()), field: field.into() });
            }
        }
        if !agent_ok {
            continue;
        }
        let (z, one) = (T::zero(), T::one());
        if a.confidence < z || a.confidence > one {
            warnings.push(FrameWarning::ConfidenceClamped { agent: id.clone(), original: a.confidence.as_f64() });
            a.confidence = a.confidence.max(z).min(one);
        }
        if a.proxemic < z || a.proxemic > one {
            warnings.push(FrameWarning::ProxemicClamped { agent: id.clone(), original: a.proxemic.as_f64() });
            a.proxemic = a.proxemic.max(z).min(one);
        }
        if a.gesture < z {
            warnings.push(FrameWarning::GestureClamped { agent: id.clone(), original: a.gesture.as_f64() });
            a.gesture = z;
        }
        if a.orientation < -T::PI() || a.orientation > T::PI() {
            warnings.push(FrameWarning::OrientationWrapped { agent: id.clone(), original: a.orientation.as_f64() });
            a.orientation = wrap_angle(a.orientation);
        }
        if let Some(scene) = scene {
            if !scene.bounds.contains(&a.position) {
                warnings.push(FrameWarning::OutOfScene { agent: id.clone() });
                violations.push(FrameViolation::OutOfBounds { agent: id.clone() });
            }
        }
    }

    if fatal {
        return Err(FrameRejection { timestamp: frame.timestamp.as_f64(), violations });
    }
    Ok((frame, warnings))
}
