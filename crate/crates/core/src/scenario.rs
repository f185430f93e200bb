//! Stochastic agent-level surrogate dynamics, ensemble what-if forecasts,
//! the intervention cost functional and intervention selection.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{causal_chain, CausalChain};
use crate::criticality::{evaluate_inputs, first_entries, tau_from_entries, CriticalityReport, GInputs, TauBounds};
use crate::fields::{component, FieldFrame, StateVector, NOISE_MIN_SAMPLES};
use crate::graph::InteractionMatrix;
use crate::model::{
    AgentId, AgentMicroState, CalibrationProfile, MicroStateFrame, Scene, ValidatedFrame, Vec2,
};
use crate::pipeline::{FrameBundle, Pipeline, PipelineError, PipelineOptions, SCHEMA_VERSION};
use crate::scalar::wrap_angle;
use crate::spectral::stability_from_jacobian;

/// Noise normalizer of the default negotiation profile.
pub const DEFAULT_N_NORM_SCALE: f64 = 200.0;
/// Cost weight of execution delay as a fraction of the horizon.
pub const DEFAULT_W_DELAY: f64 = 0.3;
/// Cost weight of structural cost.
pub const DEFAULT_W_STRUCT: f64 = 0.4;

/// Divergence guard on the latent z-scores.
pub const BLOW_UP_Z: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    GestureSetpoint,
    Orientation,
    Position,
    CouplingScale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectTarget {
    Global,
    Agent(AgentId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectValue {
    Scalar(f64),
    Point([f64; 2]),
    /// orientation toward another agent's current position
    FaceAgent(AgentId),
}

/// One timed parameter override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionEffect {
    pub target: EffectTarget,
    pub channel: Channel,
    pub value: EffectValue,
    /// linear ramp duration after the execution delay, s
    #[serde(default)]
    pub ramp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub effects: Vec<InterventionEffect>,
    /// s
    #[serde(default)]
    pub execution_delay: f64,
    #[serde(default)]
    pub structural_cost: f64,
}

/// One problem found while validating an intervention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecIssue {
    pub field: String,
    pub message: String,
}

impl InterventionSpec {
    pub const NOOP_ID: &'static str = "0";

    pub fn noop() -> Self {
        InterventionSpec {
            id: Self::NOOP_ID.into(),
            description: "no intervention".into(),
            effects: Vec::new(),
            execution_delay: 0.0,
            structural_cost: 0.0,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.effects.is_empty() && self.execution_delay == 0.0 && self.structural_cost == 0.0
    }

    /// The facilitator lowers gestural intensity: gesture setpoint to 0.40 rad/s
    /// after 5 s, ramped over 20 s.
    pub fn facilitator_pause(facilitator: AgentId) -> Self {
        InterventionSpec {
            id: "A".into(),
            description: "facilitator reduces gestural intensity".into(),
            effects: vec![InterventionEffect {
                target: EffectTarget::Agent(facilitator),
                channel: Channel::GestureSetpoint,
                value: EffectValue::Scalar(0.40),
                ramp: 20.0,
            }],
            execution_delay: 5.0,
            structural_cost: 0.05,
        }
    }

    /// The floor passes to `speaker`: after 20 s the speaker's and the
    /// facilitator's gesture setpoints move to 0.8 rad/s and everyone turns
    /// toward the speaker.
    pub fn floor_pass(speaker: AgentId, facilitator: AgentId) -> Self {
        InterventionSpec {
            id: "B".into(),
            description: "pass the floor".into(),
            effects: vec![
                InterventionEffect {
                    target: EffectTarget::Agent(speaker.clone()),
                    channel: Channel::GestureSetpoint,
                    value: EffectValue::Scalar(0.8),
                    ramp: 5.0,
                },
                InterventionEffect {
                    target: EffectTarget::Agent(facilitator),
                    channel: Channel::GestureSetpoint,
                    value: EffectValue::Scalar(0.8),
                    ramp: 5.0,
                },
                InterventionEffect {
                    target: EffectTarget::Global,
                    channel: Channel::Orientation,
                    value: EffectValue::FaceAgent(speaker),
                    ramp: 2.0,
                },
            ],
            execution_delay: 20.0,
            structural_cost: 0.25,
        }
    }

    /// Check ranges, channel/value compatibility and agent references.
    pub fn validate(&self, agents: &[AgentId]) -> Result<(), Vec<SpecIssue>> {
        let mut issues = Vec::new();
        let mut issue = |field: String, message: &str| issues.push(SpecIssue { field, message: message.into() });
        if self.id.trim().is_empty() {
            issue("id".into(), "must not be empty");
        }
        if !(self.execution_delay >= 0.0 && self.execution_delay.is_finite()) {
            issue("execution_delay".into(), "must be finite and >= 0");
        }
        if !(self.structural_cost >= 0.0 && self.structural_cost.is_finite()) {
            issue("structural_cost".into(), "must be finite and >= 0");
        }
        let known = |id: &AgentId| agents.contains(id);
        for (k, e) in self.effects.iter().enumerate() {
            let f = |name: &str| format!("effects[{k}].{name}");
            if !(e.ramp >= 0.0 && e.ramp.is_finite()) {
                issue(f("ramp"), "must be finite and >= 0");
            }
            if let EffectTarget::Agent(id) = &e.target {
                if !known(id) {
                    issue(f("target"), &format!("unknown agent {id}"));
                }
            }
            match (e.channel, &e.value) {
                (Channel::GestureSetpoint, EffectValue::Scalar(v)) | (Channel::CouplingScale, EffectValue::Scalar(v)) => {
                    if !(*v >= 0.0 && v.is_finite()) {
                        issue(f("value"), "must be finite and >= 0");
                    }
                }
                (Channel::Orientation, EffectValue::Scalar(v)) => {
                    if !v.is_finite() {
                        issue(f("value"), "must be finite");
                    }
                }
                (Channel::Orientation, EffectValue::FaceAgent(id)) => {
                    if !known(id) {
                        issue(f("value"), &format!("unknown agent {id}"));
                    }
                }
                (Channel::Position, EffectValue::Point(p)) => {
                    if !p.iter().all(|c| c.is_finite()) {
                        issue(f("value"), "must be finite");
                    }
                }
                _ => issue(f("value"), "value kind does not match channel"),
            }
            if e.channel == Channel::GestureSetpoint && e.target == EffectTarget::Global {
                issue(f("target"), "gesture_setpoint needs an agent target");
            }
            if e.channel == Channel::Position && e.target == EffectTarget::Global {
                issue(f("target"), "position needs an agent target");
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    /// Activation in [0, 1] of an effect at time `t` after the forecast origin.
    pub fn activation(&self, effect: &InterventionEffect, t: f64) -> f64 {
        let since = t - self.execution_delay;
        if since < 0.0 {
            0.0
        } else if effect.ramp <= 0.0 {
            1.0
        } else {
            (since / effect.ramp).min(1.0)
        }
    }
}

/// Per-channel rates or amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRates {
    pub gesture: f64,
    pub speed: f64,
    pub orientation: f64,
    pub position: f64,
}

/// Where each agent's own setpoint comes from before contagion is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// the agent's observed value at the forecast origin
    #[default]
    Observed,
    /// the calibration baseline (z = 0)
    Calibration,
}

/// Parameters of the surrogate dynamics and of the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    /// mean-reversion rates, 1/s
    pub kappa: ChannelRates,
    pub rho_contagion: f64,
    /// diffusion amplitudes in channel units per sqrt(s)
    pub sigma_noise: ChannelRates,
    /// s
    pub dt: f64,
    /// s
    pub horizon: f64,
    pub ensemble_size: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub baseline_mode: BaselineMode,
    /// report St from the surrogate Jacobian instead of the W proxy
    #[serde(default)]
    pub jacobian_stability: bool,
}

impl SurrogateParams {
    /// Defaults with diffusion at 0.2 of the profile's channel spreads.
    pub fn for_calibration(cal: &CalibrationProfile<f64>) -> Self {
        SurrogateParams {
            kappa: ChannelRates { gesture: 0.05, speed: 0.05, orientation: 1.0, position: 0.5 },
            rho_contagion: 0.9,
            sigma_noise: ChannelRates { gesture: 0.05 * cal.sigma_e, speed: 0.05 * cal.sigma_v, orientation: 0.16, position: 0.01 },
            dt: 0.5,
            horizon: 90.0,
            ensemble_size: 50,
            rng_seed: 7,
            baseline_mode: BaselineMode::Observed,
            jacobian_stability: false,
        }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), Vec<SpecIssue>> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, field: &str, message: &str| {
            if !ok {
                issues.push(SpecIssue { field: field.into(), message: message.into() });
            }
        };
        check(self.dt > 0.0 && self.dt.is_finite(), "dt", "must be positive");
        check(self.horizon >= 0.0 && self.horizon.is_finite(), "horizon", "must be >= 0");
        check(self.horizon == 0.0 || self.horizon >= self.dt, "horizon", "must be 0 or at least dt");
        let ratio = self.horizon / self.dt;
        check((ratio - ratio.round()).abs() < 1e-9, "horizon", "dt must divide the horizon");
        check(self.ensemble_size >= 1, "ensemble_size", "must be >= 1");
        let k = self.kappa;
        check(k.gesture > 0.0 && k.speed > 0.0 && k.orientation > 0.0 && k.position > 0.0, "kappa", "rates must be positive");
        let s = self.sigma_noise;
        check(
            [s.gesture, s.speed, s.orientation, s.position].iter().all(|v| *v >= 0.0 && v.is_finite()),
            "sigma_noise",
            "must be finite and >= 0",
        );
        check(self.rho_contagion >= 0.0 && self.rho_contagion.is_finite(), "rho_contagion", "must be finite and >= 0");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self::for_calibration(&CalibrationProfile::negotiation())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid intervention {id}: {issues:?}")]
    InvalidIntervention { id: String, issues: Vec<SpecIssue> },
    #[error("invalid surrogate parameters: {0:?}")]
    InvalidParams(Vec<SpecIssue>),
    #[error("ensemble for {id} invalid: {blowups} of {size} trajectories diverged")]
    EnsembleInvalid { id: String, blowups: usize, size: usize },
    #[error("every candidate ensemble was invalid")]
    AllInvalid,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// The frozen starting point of a forecast.
#[derive(Debug, Clone)]
pub struct ScenarioInput {
    pub frame: ValidatedFrame<f64>,
    pub scene: Scene<f64>,
    /// state vectors preceding the frame, oldest first
    pub history: Vec<StateVector<f64>>,
}

impl ScenarioInput {
    pub fn new(frame: ValidatedFrame<f64>, scene: Scene<f64>) -> Self {
        ScenarioInput { frame, scene, history: Vec::new() }
    }
}

#[derive(Debug, Clone)]
struct AgentState {
    z_e: f64,
    z_v: f64,
    theta: f64,
    pos: Vec2<f64>,
    dir: Vec2<f64>,
}

#[derive(Debug, Clone)]
struct Setpoints {
    z_e: f64,
    z_v: f64,
    theta: f64,
    pos: Vec2<f64>,
    coupling: f64,
}

/// Agent-level surrogate state. Gesture and speed z-scores follow
/// mean-reverting processes whose setpoint is the agent's own setpoint plus
/// rho times the row-normalized W-weighted mean of the others' z-scores.
#[derive(Clone)]
pub(crate) struct Surrogate {
    cal: CalibrationProfile<f64>,
    pub(crate) sp: SurrogateParams,
    u: InterventionSpec,
    /// offset at which `u`'s execution delay starts counting
    onset: f64,
    template: Vec<AgentMicroState<f64>>,
    index: BTreeMap<AgentId, usize>,
    base: Vec<Setpoints>,
    state: Vec<AgentState>,
    t0: f64,
    scene_ref: String,
}

impl Surrogate {
    pub(crate) fn new(frame: &ValidatedFrame<f64>, cal: &CalibrationProfile<f64>, sp: &SurrogateParams, u: &InterventionSpec) -> Self {
        let template = frame.agents().to_vec();
        let index = template.iter().enumerate().map(|(k, a)| (a.agent_id.clone(), k)).collect();
        let state: Vec<AgentState> = template
            .iter()
            .map(|a| {
                let speed = a.speed();
                let dir = if speed > 0.0 {
                    a.velocity.scale(1.0 / speed)
                } else {
                    Vec2::new(a.orientation.cos(), a.orientation.sin())
                };
                AgentState {
                    z_e: (a.gesture - cal.mu_e) / cal.sigma_e,
                    z_v: (speed - cal.mu_v) / cal.sigma_v,
                    theta: a.orientation,
                    pos: a.position,
                    dir,
                }
            })
            .collect();
        let base = state
            .iter()
            .map(|s| {
                let (z_e, z_v) = match sp.baseline_mode {
                    BaselineMode::Observed => (s.z_e, s.z_v),
                    BaselineMode::Calibration => (0.0, 0.0),
                };
                Setpoints { z_e, z_v, theta: s.theta, pos: s.pos, coupling: 1.0 }
            })
            .collect();
        Surrogate {
            cal: cal.clone(),
            sp: *sp,
            u: u.clone(),
            onset: 0.0,
            template,
            index,
            base,
            state,
            t0: frame.timestamp(),
            scene_ref: frame.frame().scene_ref.clone(),
        }
    }

    fn targets(&self, target: &EffectTarget) -> Vec<usize> {
        match target {
            EffectTarget::Global => (0..self.state.len()).collect(),
            EffectTarget::Agent(id) => self.index.get(id).copied().into_iter().collect(),
        }
    }

    /// Setpoints in force at offset `t`.
    fn setpoints(&self, t: f64) -> Vec<Setpoints> {
        let mut sp = self.base.clone();
        for e in &self.u.effects {
            let f = self.u.activation(e, t - self.onset);
            if f == 0.0 {
                continue;
            }
            for i in self.targets(&e.target) {
                match (e.channel, &e.value) {
                    (Channel::GestureSetpoint, EffectValue::Scalar(v)) => {
                        let z = (v - self.cal.mu_e) / self.cal.sigma_e;
                        sp[i].z_e += f * (z - sp[i].z_e);
                    }
                    (Channel::CouplingScale, EffectValue::Scalar(v)) => sp[i].coupling += f * (v - sp[i].coupling),
                    (Channel::Orientation, EffectValue::Scalar(a)) => {
                        sp[i].theta = wrap_angle(sp[i].theta + f * wrap_angle(a - sp[i].theta));
                    }
                    (Channel::Orientation, EffectValue::FaceAgent(id)) => {
                        let Some(&j) = self.index.get(id) else { continue };
                        if j == i {
                            continue;
                        }
                        let d = self.state[j].pos.sub(&self.state[i].pos);
                        if d.norm() == 0.0 {
                            continue;
                        }
                        let bearing = d.y().atan2(d.x());
                        sp[i].theta = wrap_angle(sp[i].theta + f * wrap_angle(bearing - sp[i].theta));
                    }
                    (Channel::Position, EffectValue::Point(p)) => {
                        let p = Vec2::new(p[0], p[1]);
                        sp[i].pos = sp[i].pos.add(&p.sub(&sp[i].pos).scale(f));
                    }
                    _ => {}
                }
            }
        }
        sp
    }

    pub(crate) fn agent_ids(&self) -> impl Iterator<Item = &AgentId> {
        self.template.iter().map(|a| &a.agent_id)
    }

    /// Replace the running intervention with `u`, counting its delay from
    /// offset `t`. Setpoints already reached under the previous one persist.
    pub(crate) fn apply(&mut self, u: &InterventionSpec, t: f64) {
        self.base = self.setpoints(t);
        self.u = u.clone();
        self.onset = t;
    }

    /// Move agent `i`'s gesture and its gesture setpoint to `gesture`.
    pub(crate) fn set_gesture(&mut self, i: usize, gesture: f64) {
        let z = (gesture - self.cal.mu_e) / self.cal.sigma_e;
        self.state[i].z_e = z;
        self.base[i].z_e = z;
    }

    pub(crate) fn frame(&self, t: f64) -> MicroStateFrame<f64> {
        let cal = &self.cal;
        let agents = self
            .template
            .iter()
            .zip(&self.state)
            .map(|(a, s)| {
                let speed = (cal.mu_v + cal.sigma_v * s.z_v).max(0.0);
                AgentMicroState {
                    position: s.pos,
                    velocity: s.dir.scale(speed),
                    orientation: wrap_angle(s.theta),
                    gesture: (cal.mu_e + cal.sigma_e * s.z_e).max(0.0),
                    ..a.clone()
                }
            })
            .collect();
        MicroStateFrame { timestamp: self.t0 + t, agents, scene_ref: self.scene_ref.clone() }
    }

    /// Row-normalized coupling derived from W.
    fn coupling(w: &InteractionMatrix<f64>) -> Vec<f64> {
        let n = w.n;
        let mut p = w.weights.clone();
        for i in 0..n {
            let s = w.row_sum(i);
            for j in 0..n {
                p[i * n + j] = if s > 0.0 { p[i * n + j] / s } else { 0.0 };
            }
        }
        p
    }

    /// One Euler-Maruyama step from offset `t`. Returns false on divergence.
    pub(crate) fn step(&mut self, t: f64, w: &InteractionMatrix<f64>, scene: &Scene<f64>, rng: &mut ChaCha8Rng) -> bool {
        self.advance(t, w, scene, Some(rng))
    }

    /// Noise-free one-step prediction from offset `t`.
    fn predict(&self, t: f64, w: &InteractionMatrix<f64>, scene: &Scene<f64>) -> Option<Self> {
        let mut next = self.clone();
        next.advance(t, w, scene, None).then_some(next)
    }

    fn advance(&mut self, t: f64, w: &InteractionMatrix<f64>, scene: &Scene<f64>, mut rng: Option<&mut ChaCha8Rng>) -> bool {
        let n = self.state.len();
        let dt = self.sp.dt;
        let sq = dt.sqrt();
        let k = self.sp.kappa;
        let s = self.sp.sigma_noise;
        let set = self.setpoints(t);
        let p = Self::coupling(w);
        let rho = self.sp.rho_contagion;
        let mut next = self.state.clone();
        let b = &scene.bounds;
        for i in 0..n {
            let (mut ce, mut cv) = (0.0, 0.0);
            for j in 0..n {
                let pij = p[i * n + j];
                ce += pij * self.state[j].z_e;
                cv += pij * self.state[j].z_v;
            }
            let gain = rho * set[i].coupling;
            let xi: [f64; 5] = match rng.as_deref_mut() {
                Some(r) => std::array::from_fn(|_| StandardNormal.sample(r)),
                None => [0.0; 5],
            };
            let a = &self.state[i];
            let o = &mut next[i];
            o.z_e = a.z_e + k.gesture * (set[i].z_e + gain * ce - a.z_e) * dt + s.gesture / self.cal.sigma_e * sq * xi[0];
            o.z_v = a.z_v + k.speed * (set[i].z_v + gain * cv - a.z_v) * dt + s.speed / self.cal.sigma_v * sq * xi[1];
            o.theta =
                wrap_angle(a.theta + k.orientation * wrap_angle(set[i].theta - a.theta) * dt + s.orientation * sq * xi[2]);
            let px = a.pos.x() + k.position * (set[i].pos.x() - a.pos.x()) * dt + s.position * sq * xi[3];
            let py = a.pos.y() + k.position * (set[i].pos.y() - a.pos.y()) * dt + s.position * sq * xi[4];
            o.pos = Vec2::new(px.clamp(b.min.x(), b.max.x()), py.clamp(b.min.y(), b.max.y()));
            if !(o.z_e.abs() <= BLOW_UP_Z && o.z_v.abs() <= BLOW_UP_Z) {
                return false;
            }
        }
        self.state = next;
        true
    }

    /// Linearized gesture dynamics kappa (rho C P - I) at the current coupling.
    fn jacobian(&self, w: &InteractionMatrix<f64>, t: f64) -> Vec<f64> {
        let n = w.n;
        let p = Self::coupling(w);
        let set = self.setpoints(t);
        let k = self.sp.kappa.gesture;
        let mut j = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let delta = if r == c { 1.0 } else { 0.0 };
                j[r * n + c] = k * (self.sp.rho_contagion * set[r].coupling * p[r * n + c] - delta);
            }
        }
        j
    }
}

/// One forecast step as seen by the field pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// offset from the forecast origin, s
    pub t: f64,
    pub frame: MicroStateFrame<f64>,
    pub fields: FieldFrame<f64>,
    pub state: StateVector<f64>,
    pub criticality: CriticalityReport<f64>,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub intervention_id: String,
    pub seed: u64,
    pub steps: Vec<TrajectoryStep>,
    /// offset at which the latent state diverged
    pub blow_up_at: Option<f64>,
}

/// Compact per-step record used for ensemble statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub t: f64,
    pub r: f64,
    pub st: f64,
    pub lambda_max: f64,
    pub in_danger: bool,
}

fn criticality_for(
    bundle: &FrameBundle<f64>,
    cal: &CalibrationProfile<f64>,
    st: Option<f64>,
    noise: Option<f64>,
) -> CriticalityReport<f64> {
    let base = bundle.criticality.inputs;
    let inputs = GInputs {
        st: st.unwrap_or(base.st),
        n_norm: noise.map_or(0.0, |n| n / cal.n_norm_scale),
        ..base
    };
    evaluate_inputs(&inputs, bundle.state.tension(), cal)
}

/// Innovation variance of the state vector against the surrogate's own
/// noise-free one-step predictions, summed over components, over the
/// trailing window.
#[derive(Default)]
struct InnovationWindow {
    samples: std::collections::VecDeque<(f64, f64)>,
}

impl InnovationWindow {
    fn push(&mut self, t: f64, actual: &StateVector<f64>, predicted: &StateVector<f64>, window: f64) {
        let sq = (0..component::COUNT)
            .filter(|k| *k != component::NOISE)
            .map(|k| (actual.components[k] - predicted.components[k]).powi(2))
            .sum::<f64>();
        self.samples.push_back((t, sq));
        while self.samples.front().is_some_and(|(t0, _)| t - t0 > window) {
            self.samples.pop_front();
        }
    }

    fn level(&self) -> Option<f64> {
        (self.samples.len() >= NOISE_MIN_SAMPLES)
            .then(|| self.samples.iter().map(|(_, s)| s).sum::<f64>() / self.samples.len() as f64)
    }
}

fn integrate(
    input: &ScenarioInput,
    cal: &CalibrationProfile<f64>,
    sp: &SurrogateParams,
    u: &InterventionSpec,
    seed: u64,
    mut observe: impl FnMut(f64, &FrameBundle<f64>, &CriticalityReport<f64>),
) -> Result<Option<f64>, ScenarioError> {
    let options = PipelineOptions { compute_ews: false, dropout_retention: false, ..PipelineOptions::default() };
    let mut pipeline = Pipeline::new(cal.clone(), input.scene.clone(), options)?;
    pipeline.seed_history(&input.history);
    let mut sim = Surrogate::new(&input.frame, cal, sp, u);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut innovations = InnovationWindow::default();
    let mut predicted: Option<StateVector<f64>> = None;
    let steps = sp.steps();
    for k in 0..=steps {
        let t = k as f64 * sp.dt;
        let mut bundle = if k == 0 {
            pipeline.process_validated(input.frame.clone())?
        } else {
            pipeline.process(&sim.frame(t))?
        };
        if let Some(pred) = predicted.take() {
            innovations.push(t, &bundle.state, &pred, cal.ews_window);
        }
        let noise = innovations.level();
        bundle.fields.noise = noise;
        bundle.state.components[component::NOISE] = noise.unwrap_or(0.0);
        let st = sp.jacobian_stability.then(|| stability_from_jacobian(&sim.jacobian(&bundle.matrix, t), bundle.matrix.n));
        let crit = criticality_for(&bundle, cal, st, noise);
        observe(t, &bundle, &crit);
        if k == steps {
            break;
        }
        if let Some(next) = sim.predict(t, &bundle.matrix, &input.scene) {
            predicted = pipeline.clone().process(&next.frame(t + sp.dt)).ok().map(|b| b.state);
        }
        if !sim.step(t, &bundle.matrix, &input.scene, &mut rng) {
            return Ok(Some(t + sp.dt));
        }
    }
    Ok(None)
}

/// Integrate the surrogate from `input.frame` under intervention `u`,
/// re-evaluating the full field pipeline at every step. Deterministic in `seed`.
pub fn simulate_trajectory(
    input: &ScenarioInput,
    cal: &CalibrationProfile<f64>,
    sp: &SurrogateParams,
    u: &InterventionSpec,
    seed: u64,
) -> Result<Trajectory, ScenarioError> {
    let mut steps = Vec::with_capacity(sp.steps() + 1);
    let blow_up_at = integrate(input, cal, sp, u, seed, |t, b, crit| {
        steps.push(TrajectoryStep {
            t,
            frame: b.frame.frame().clone(),
            fields: b.fields.clone(),
            state: b.state,
            criticality: crit.clone(),
            lambda_max: b.spectral.lambda_max,
        })
    })?;
    Ok(Trajectory { intervention_id: u.id.clone(), seed, steps, blow_up_at })
}

/// Compact path of one realization.
pub fn simulate_path(
    input: &ScenarioInput,
    cal: &CalibrationProfile<f64>,
    sp: &SurrogateParams,
    u: &InterventionSpec,
    seed: u64,
) -> Result<(Vec<PathPoint>, Option<f64>), ScenarioError> {
    let mut path = Vec::with_capacity(sp.steps() + 1);
    let blow = integrate(input, cal, sp, u, seed, |t, b, crit| {
        path.push(PathPoint {
            t,
            r: crit.r_index,
            st: crit.inputs.st,
            lambda_max: b.spectral.lambda_max,
            in_danger: crit.in_danger,
        })
    })?;
    Ok((path, blow))
}

/// Mean and 10/50/90 percentiles across realizations at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub t: f64,
    pub mean: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

fn band(t: f64, mut xs: Vec<f64>) -> Band {
    xs.sort_by(f64::total_cmp);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let q = |p| crate::criticality::percentile(&xs, p);
    Band { t, mean, p10: q(0.1), p50: q(0.5), p90: q(0.9) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub intervention_id: String,
    pub size: usize,
    pub blowups: usize,
    pub r_band: Vec<Band>,
    pub st_band: Vec<Band>,
    pub escalation_probability: f64,
    pub tau: Option<f64>,
    pub tau_bounds: TauBounds<f64>,
    pub r_horizon_mean: f64,
    pub st_horizon_mean: f64,
    pub lambda_horizon_mean: f64,
}

/// `ensemble_size` realizations with seeds `rng_seed + k`; realization k uses
/// the same seed for every intervention.
pub fn run_ensemble(
    input: &ScenarioInput,
    cal: &CalibrationProfile<f64>,
    sp: &SurrogateParams,
    u: &InterventionSpec,
) -> Result<EnsembleStats, ScenarioError> {
    sp.validate().map_err(ScenarioError::InvalidParams)?;
    let ids: Vec<AgentId> = input.frame.agents().iter().map(|a| a.agent_id.clone()).collect();
    u.validate(&ids).map_err(|issues| ScenarioError::InvalidIntervention { id: u.id.clone(), issues })?;
    let runs: Vec<Result<(Vec<PathPoint>, Option<f64>), ScenarioError>> = (0..sp.ensemble_size)
        .into_par_iter()
        .map(|k| simulate_path(input, cal, sp, u, sp.rng_seed.wrapping_add(k as u64)))
        .collect();
    let mut paths = Vec::with_capacity(runs.len());
    let mut blowups = 0;
    for r in runs {
        let (path, blow) = r?;
        if blow.is_some() {
            blowups += 1;
        } else {
            paths.push(path);
        }
    }
    if blowups * 5 >= sp.ensemble_size {
        return Err(ScenarioError::EnsembleInvalid { id: u.id.clone(), blowups, size: sp.ensemble_size });
    }
    let steps = paths[0].len();
    let r_band = (0..steps).map(|k| band(paths[0][k].t, paths.iter().map(|p| p[k].r).collect())).collect::<Vec<_>>();
    let st_band = (0..steps).map(|k| band(paths[0][k].t, paths.iter().map(|p| p[k].st).collect())).collect::<Vec<_>>();
    let danger: Vec<Vec<(f64, bool)>> = paths.iter().map(|p| p.iter().map(|x| (x.t, x.in_danger)).collect()).collect();
    let entries = first_entries(&danger).expect("ensemble is non-empty and time-ordered");
    let (tau, tau_bounds) = tau_from_entries(&entries).expect("ensemble is non-empty");
    let m = paths.len() as f64;
    let last = |f: fn(&PathPoint) -> f64| paths.iter().map(|p| f(&p[steps - 1])).sum::<f64>() / m;
    Ok(EnsembleStats {
        intervention_id: u.id.clone(),
        size: sp.ensemble_size,
        blowups,
        r_horizon_mean: last(|p| p.r),
        st_horizon_mean: last(|p| p.st),
        lambda_horizon_mean: last(|p| p.lambda_max),
        escalation_probability: entries.iter().filter(|e| e.is_some()).count() as f64 / m,
        tau,
        tau_bounds,
        r_band,
        st_band,
    })
}

/// J(u) = E[R at horizon] + w_delay * delay / horizon + w_struct * structural cost.
pub fn cost_j(stats: &EnsembleStats, u: &InterventionSpec, horizon: f64, cal: &CalibrationProfile<f64>) -> f64 {
    let delay = if horizon > 0.0 { u.execution_delay / horizon } else { 0.0 };
    stats.r_horizon_mean + cal.w_delay * delay + cal.w_struct * u.structural_cost
}

/// Costs closer than this are ties.
pub const COST_TIE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub spec: InterventionSpec,
    pub stats: EnsembleStats,
    pub cost_j: f64,
    pub rank: usize,
    pub recommended: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub schema_version: u32,
    pub origin_timestamp: f64,
    pub params: SurrogateParams,
    /// ordered by rank
    pub outcomes: Vec<InterventionOutcome>,
    pub recommended: String,
    pub follow_up: Option<String>,
    /// candidates whose ensembles were invalid
    pub rejected: Vec<String>,
    pub causal_chain: CausalChain,
}

impl ScenarioResult {
    pub fn outcome(&self, id: &str) -> Option<&InterventionOutcome> {
        self.outcomes.iter().find(|o| o.spec.id == id)
    }
}

/// Progress notification emitted as each candidate ensemble finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioProgress {
    pub intervention_id: String,
    pub completed: usize,
    pub total: usize,
}

/// Order by cost, then execution delay, then id.
pub fn rank_outcomes(outcomes: &mut [InterventionOutcome]) {
    outcomes.sort_by(|a, b| {
        let by_cost = if (a.cost_j - b.cost_j).abs() <= COST_TIE {
            std::cmp::Ordering::Equal
        } else {
            a.cost_j.total_cmp(&b.cost_j)
        };
        by_cost
            .then(a.spec.execution_delay.total_cmp(&b.spec.execution_delay))
            .then(a.spec.id.cmp(&b.spec.id))
    });
    for (k, o) in outcomes.iter_mut().enumerate() {
        o.rank = k + 1;
        o.recommended = k == 0;
    }
}

pub fn select_intervention(
    candidates: &[InterventionSpec],
    input: &ScenarioInput,
    cal: &CalibrationProfile<f64>,
    sp: &SurrogateParams,
) -> Result<ScenarioResult, ScenarioError> {
    select_intervention_with_progress(candidates, input, cal, sp, |_| {})
}

/// Runs every candidate (plus the implicit no-op) on common random numbers and
/// recommends the minimum-cost one; the runner-up is the follow-up.
pub fn select_intervention_with_progress(
    candidates: &[InterventionSpec],
    input: &ScenarioInput,
    cal: &CalibrationProfile<f64>,
    sp: &SurrogateParams,
    mut progress: impl FnMut(ScenarioProgress),
) -> Result<ScenarioResult, ScenarioError> {
    sp.validate().map_err(ScenarioError::InvalidParams)?;
    let ids: Vec<AgentId> = input.frame.agents().iter().map(|a| a.agent_id.clone()).collect();
    for c in candidates {
        c.validate(&ids).map_err(|issues| ScenarioError::InvalidIntervention { id: c.id.clone(), issues })?;
    }
    let mut all: Vec<InterventionSpec> = Vec::new();
    if !candidates.iter().any(InterventionSpec::is_noop) {
        all.push(InterventionSpec::noop());
    }
    all.extend(candidates.iter().cloned());

    let total = all.len();
    let mut outcomes = Vec::new();
    let mut rejected = Vec::new();
    for (k, u) in all.into_iter().enumerate() {
        match run_ensemble(input, cal, sp, &u) {
            Ok(stats) => {
                let cost = cost_j(&stats, &u, sp.horizon, cal);
                outcomes.push(InterventionOutcome { spec: u.clone(), stats, cost_j: cost, rank: 0, recommended: false });
            }
            Err(ScenarioError::EnsembleInvalid { id, .. }) => rejected.push(id),
            Err(e) => return Err(e),
        }
        progress(ScenarioProgress { intervention_id: u.id, completed: k + 1, total });
    }
    if outcomes.is_empty() {
        return Err(ScenarioError::AllInvalid);
    }
    rank_outcomes(&mut outcomes);
    let recommended = outcomes[0].spec.id.clone();
    let follow_up = outcomes.get(1).map(|o| o.spec.id.clone());

    let options = PipelineOptions { compute_ews: false, dropout_retention: false, ..PipelineOptions::default() };
    let mut pipeline = Pipeline::new(cal.clone(), input.scene.clone(), options)?;
    pipeline.seed_history(&input.history);
    let bundle = pipeline.process_validated(input.frame.clone())?;
    let noop = outcomes.iter().find(|o| o.spec.is_noop());
    let chain = causal_chain(&bundle, cal, Some((noop, &outcomes[0])));

    Ok(ScenarioResult {
        schema_version: SCHEMA_VERSION,
        origin_timestamp: input.frame.timestamp(),
        params: *sp,
        outcomes,
        recommended,
        follow_up,
        rejected,
        causal_chain: chain,
    })
}

/// The two reference interventions for a scene with a facilitator and a
/// designated next speaker.
pub fn reference_candidates(facilitator: AgentId, speaker: AgentId) -> Vec<InterventionSpec> {
    vec![InterventionSpec::facilitator_pause(facilitator.clone()), InterventionSpec::floor_pass(speaker, facilitator)]
}
