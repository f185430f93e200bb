//! Stateful per-frame runner: validation, dropout handling, W, fields,
//! spectral stability, state vector, early-warning statistics and criticality,
//! strictly in that order.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criticality::{evaluate, CriticalityReport, Zone};
use crate::fields::{
    alignment_dispersion, assemble_state_vector, attention_field, boundary_field, component, influence_field,
    kuramoto_synchrony, momentum, noise_level, phase_extract, smooth_to_scene, tension_field, FieldError,
    FieldFlags, FieldFrame, StateVector, NOISE_MIN_SAMPLES,
};
use crate::graph::{build_interaction_matrix, GraphError, InteractionMatrix};
use crate::model::{
    normalize_agent, validate_frame, AgentId, AgentMicroState, CalibrationProfile, FrameRejection, MicroStateFrame,
    ModelError, NormalizedState, PhaseCarrier, Scene, ValidatedFrame,
};
use crate::scalar::Real;
use crate::spectral::{power_iteration, rolling_ews, EwsReport, SpectralReport, EWS_MIN_SAMPLES};

/// Version of the per-frame bundle and report schemas.
pub const SCHEMA_VERSION: u32 = 1;

/// Half-life of the confidence of an agent that dropped out of tracking, s.
pub const DROPOUT_HALF_LIFE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Rejected(#[from] FrameRejection),
    #[error("interaction graph: {0}")]
    Graph(#[from] GraphError),
    #[error("fields: {0}")]
    Field(#[from] FieldError),
    #[error("configuration: {0}")]
    Config(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub compute_ews: bool,
    pub power_tolerance: f64,
    pub power_max_iter: usize,
    /// keep agents that vanish from tracking with decaying confidence
    pub dropout_retention: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            compute_ews: true,
            power_tolerance: crate::spectral::DEFAULT_TOLERANCE,
            power_max_iter: crate::spectral::DEFAULT_MAX_ITER,
            dropout_retention: true,
        }
    }
}

/// Everything computed for one frame. Serialized as the per-frame JSON bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct FrameBundle<T> {
    pub schema_version: u32,
    pub sequence: u64,
    pub timestamp: T,
    pub frame: ValidatedFrame<T>,
    /// agents carried over from earlier frames with decayed confidence
    pub retained: Vec<AgentId>,
    pub normalized: Vec<NormalizedState<T>>,
    pub matrix: InteractionMatrix<T>,
    pub fields: FieldFrame<T>,
    pub spectral: SpectralReport<T>,
    pub state: StateVector<T>,
    pub ews: Option<EwsReport<T>>,
    pub criticality: CriticalityReport<T>,
}

#[derive(Clone)]
struct Seen<T> {
    timestamp: T,
    state: AgentMicroState<T>,
}

/// Single-writer pipeline. Rolling windows only ever see accepted frames.
#[derive(Clone)]
pub struct Pipeline<T: Real> {
    cal: CalibrationProfile<T>,
    scene: Scene<T>,
    options: PipelineOptions,
    last_timestamp: Option<T>,
    sequence: u64,
    history: VecDeque<StateVector<T>>,
    carriers: BTreeMap<AgentId, VecDeque<(T, T)>>,
    seen: BTreeMap<AgentId, Seen<T>>,
}

impl<T: Real> Pipeline<T> {
    pub fn new(cal: CalibrationProfile<T>, scene: Scene<T>, options: PipelineOptions) -> Result<Self, PipelineError> {
        cal.validate()?;
        scene.validate()?;
        Ok(Pipeline {
            cal,
            scene,
            options,
            last_timestamp: None,
            sequence: 0,
            history: VecDeque::new(),
            carriers: BTreeMap::new(),
            seen: BTreeMap::new(),
        })
    }

    pub fn calibration(&self) -> &CalibrationProfile<T> {
        &self.cal
    }

    pub fn scene(&self) -> &Scene<T> {
        &self.scene
    }

    /// Accepted state vectors inside the rolling window, oldest first.
    pub fn history(&self) -> impl ExactSizeIterator<Item = &StateVector<T>> {
        self.history.iter()
    }

    /// Seed the rolling window with earlier state vectors (e.g. for a forecast
    /// started mid-stream).
    pub fn seed_history(&mut self, states: &[StateVector<T>]) {
        for s in states {
            self.history.push_back(*s);
        }
        if let Some(last) = states.last() {
            self.last_timestamp = Some(self.last_timestamp.map_or(last.timestamp, |t| t.max(last.timestamp)));
        }
    }

    pub fn process(&mut self, frame: &MicroStateFrame<T>) -> Result<FrameBundle<T>, PipelineError> {
        let validated = validate_frame(frame, &self.scene, self.last_timestamp)?;
        self.process_validated(validated)
    }

    /// Run every level on an already validated frame. The frame must still be
    /// newer than the last accepted one.
    pub fn process_validated(&mut self, validated: ValidatedFrame<T>) -> Result<FrameBundle<T>, PipelineError> {
        let t = validated.timestamp();
        if let Some(prev) = self.last_timestamp {
            if !(t > prev) {
                return Err(PipelineError::Rejected(FrameRejection {
                    timestamp: t.as_f64(),
                    violations: vec![crate::model::FrameViolation::TimestampRegression {
                        previous: prev.as_f64(),
                        current: t.as_f64(),
                    }],
                }));
            }
        }
        let (frame, retained) = self.with_dropouts(validated)?;
        let result = self.evaluate(&frame, &retained);
        if result.is_ok() {
            self.commit(&frame, &retained);
        }
        result.map(|(bundle, state)| {
            self.history.push_back(state);
            self.trim(t);
            bundle
        })
    }

    fn with_dropouts(&self, frame: ValidatedFrame<T>) -> Result<(ValidatedFrame<T>, Vec<AgentId>), PipelineError> {
        if !self.options.dropout_retention {
            return Ok((frame, Vec::new()));
        }
        let t = frame.timestamp();
        let present: std::collections::BTreeSet<&AgentId> = frame.agents().iter().map(|a| &a.agent_id).collect();
        let mut extra = Vec::new();
        let mut retained = Vec::new();
        for (id, seen) in &self.seen {
            if present.contains(id) || t - seen.timestamp > self.cal.ews_window {
                continue;
            }
            let mut a = seen.state.clone();
            let age = (t - seen.timestamp) / T::lit(DROPOUT_HALF_LIFE);
            a.confidence = a.confidence * T::lit(0.5).powf(age);
            extra.push(a);
            retained.push(id.clone());
        }
        if extra.is_empty() {
            return Ok((frame, retained));
        }
        let mut agents = frame.agents().to_vec();
        agents.extend(extra);
        Ok((frame.with_agents(agents)?, retained))
    }

    fn carrier(&self, a: &AgentMicroState<T>) -> T {
        match self.cal.phase_carrier {
            PhaseCarrier::Gesture => a.gesture,
            PhaseCarrier::Speed => a.speed(),
        }
    }

    fn evaluate(
        &self,
        frame: &ValidatedFrame<T>,
        retained: &[AgentId],
    ) -> Result<(FrameBundle<T>, StateVector<T>), PipelineError> {
        let cal = &self.cal;
        let t = frame.timestamp();
        let agents = frame.agents();

        let normalized: Vec<NormalizedState<T>> = agents.iter().map(|a| normalize_agent(a, cal)).collect();
        let matrix = build_interaction_matrix(frame, &self.scene, cal)?;

        let (attention, attention_degenerate) = attention_field(&matrix);
        let tension = tension_field(&normalized, cal);
        let influence = influence_field(&matrix, &tension.values)?;

        let mut phases = Vec::with_capacity(agents.len());
        let mut phase_excluded = Vec::new();
        for (k, a) in agents.iter().enumerate() {
            let phase = if retained.contains(&a.agent_id) {
                None
            } else {
                self.carriers.get(&a.agent_id).and_then(|past| {
                    if past.len() + 1 < NOISE_MIN_SAMPLES {
                        return None;
                    }
                    let mut xs: Vec<T> = past.iter().map(|(_, v)| *v).collect();
                    xs.push(self.carrier(a));
                    phase_extract(&xs).map(|p| p.phase)
                })
            };
            if phase.is_none() {
                phase_excluded.push(k);
            }
            phases.push(phase);
        }
        let defined: Vec<T> = phases.iter().flatten().copied().collect();
        let synchrony = if defined.len() >= 2 { kuramoto_synchrony(&defined) } else { None };

        let positions: Vec<_> = agents.iter().map(|a| a.position).collect();
        let tension_grid = smooth_to_scene(&tension.values, &positions, &self.scene, cal.smoothing_h);
        let (boundary_grid, boundary_max) = boundary_field(&tension_grid)?;

        let spectral = power_iteration(&matrix, T::lit(self.options.power_tolerance), self.options.power_max_iter);

        let mut fields = FieldFrame {
            timestamp: t,
            attention,
            tension: tension.values,
            tension_mean: tension.mean,
            influence: influence.exposure,
            influence_emission: influence.emission,
            phases,
            synchrony,
            alignment_dispersion: alignment_dispersion(&normalized),
            momentum: None,
            noise: None,
            tension_grid,
            boundary_grid,
            boundary_max,
            stability: spectral.stability_margin,
            flags: FieldFlags {
                attention_degenerate,
                synchrony_undefined: synchrony.is_none(),
                momentum_cold_start: false,
                noise_cold_start: false,
                phase_excluded,
            },
        };
        let mut state = assemble_state_vector(&fields, cal.attention_aggregate);
        fields.momentum = self.history.back().and_then(|prev| momentum(&state, prev));
        fields.flags.momentum_cold_start = fields.momentum.is_none();
        state.components[component::MOMENTUM] = fields.momentum.unwrap_or(T::zero());

        let mut window: Vec<StateVector<T>> = self
            .history
            .iter()
            .filter(|s| t - s.timestamp <= cal.ews_window)
            .copied()
            .chain(std::iter::once(state))
            .collect();
        fields.noise = noise_level(&window);
        fields.flags.noise_cold_start = fields.noise.is_none();
        state.components[component::NOISE] = fields.noise.unwrap_or(T::zero());
        if let Some(last) = window.last_mut() {
            *last = state;
        }

        let ews = if self.options.compute_ews && window.len() >= EWS_MIN_SAMPLES {
            rolling_ews(&window, self.lag_samples(&window)).ok()
        } else {
            None
        };

        let criticality = evaluate(&state, cal);
        let bundle = FrameBundle {
            schema_version: SCHEMA_VERSION,
            sequence: self.sequence,
            timestamp: t,
            frame: frame.clone(),
            retained: retained.to_vec(),
            normalized,
            matrix,
            fields,
            spectral,
            state,
            ews,
            criticality,
        };
        Ok((bundle, state))
    }

    fn lag_samples(&self, window: &[StateVector<T>]) -> usize {
        let Some(lag) = self.cal.ews_lag else { return 1 };
        let n = window.len();
        if n < 2 {
            return 1;
        }
        let dt = (window[n - 1].timestamp - window[0].timestamp) / T::from_count(n - 1);
        if !(dt > T::zero()) {
            return 1;
        }
        (lag / dt).round().to_usize().unwrap_or(1).max(1)
    }

    fn commit(&mut self, frame: &ValidatedFrame<T>, retained: &[AgentId]) {
        let t = frame.timestamp();
        self.last_timestamp = Some(t);
        self.sequence += 1;
        for a in frame.agents() {
            if retained.contains(&a.agent_id) {
                continue;
            }
            let v = self.carrier(a);
            self.carriers.entry(a.agent_id.clone()).or_default().push_back((t, v));
            self.seen.insert(a.agent_id.clone(), Seen { timestamp: t, state: a.clone() });
        }
    }

    fn trim(&mut self, t: T) {
        let w = self.cal.ews_window;
        while self.history.front().is_some_and(|s| t - s.timestamp > w) {
            self.history.pop_front();
        }
        for series in self.carriers.values_mut() {
            while series.front().is_some_and(|(ts, _)| t - *ts > w) {
                series.pop_front();
            }
        }
        self.carriers.retain(|_, s| !s.is_empty());
        self.seen.retain(|_, s| t - s.timestamp <= w);
    }
}

/// Interval of consecutive frames on which one component showed rising
/// variance and rising autocorrelation together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwsEpisode {
    pub component: String,
    pub start: f64,
    pub end: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZoneOccupancy {
    pub green: usize,
    pub amber: usize,
    pub red: usize,
}

impl ZoneOccupancy {
    pub fn total(&self) -> usize {
        self.green + self.amber + self.red
    }

    pub fn green_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.green as f64 / self.total() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub index: usize,
    pub timestamp: Option<f64>,
    pub error: String,
}

/// End-of-run aggregate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub frames_total: usize,
    pub frames_ok: usize,
    pub frames_failed: usize,
    pub zone_occupancy: ZoneOccupancy,
    pub st_min: Option<f64>,
    pub st_max: Option<f64>,
    pub st_red_flag_frames: usize,
    pub r_max: Option<f64>,
    pub ews_episodes: Vec<EwsEpisode>,
    pub failures: Vec<FrameFailure>,
}

/// Incremental builder for [`RunSummary`].
#[derive(Debug, Default)]
pub struct SummaryBuilder {
    summary: RunSummary,
    open: [Option<(f64, f64, usize)>; component::COUNT],
}

impl SummaryBuilder {
    pub fn new() -> Self {
        SummaryBuilder {
            summary: RunSummary { schema_version: SCHEMA_VERSION, ..Default::default() },
            open: [None; component::COUNT],
        }
    }

    pub fn record<T: Real>(&mut self, index: usize, outcome: &Result<FrameBundle<T>, PipelineError>) {
        let s = &mut self.summary;
        s.frames_total += 1;
        match outcome {
            Ok(b) => {
                s.frames_ok += 1;
                match b.criticality.zone {
                    Zone::Green => s.zone_occupancy.green += 1,
                    Zone::Amber => s.zone_occupancy.amber += 1,
                    Zone::Red => s.zone_occupancy.red += 1,
                }
                let st = b.spectral.stability_margin.as_f64();
                s.st_min = Some(s.st_min.map_or(st, |m| m.min(st)));
                s.st_max = Some(s.st_max.map_or(st, |m| m.max(st)));
                let r = b.criticality.r_index.as_f64();
                s.r_max = Some(s.r_max.map_or(r, |m| m.max(r)));
                s.st_red_flag_frames += b.criticality.st_red_flag as usize;
                let t = b.timestamp.as_f64();
                for k in 0..component::COUNT {
                    let warning = b.ews.as_ref().is_some_and(|e| e.warning(k));
                    match (&mut self.open[k], warning) {
                        (Some((_, end, frames)), true) => {
                            *end = t;
                            *frames += 1;
                        }
                        (slot @ None, true) => *slot = Some((t, t, 1)),
                        (slot @ Some(_), false) => {
                            let (start, end, frames) = slot.take().unwrap_or_default();
                            s.ews_episodes.push(EwsEpisode {
                                component: component::NAMES[k].to_string(),
                                start,
                                end,
                                frames,
                            });
                        }
                        (None, false) => {}
                    }
                }
            }
            Err(e) => {
                s.frames_failed += 1;
                let timestamp = match e {
                    PipelineError::Rejected(r) => Some(r.timestamp),
                    _ => None,
                };
                s.failures.push(FrameFailure { index, timestamp, error: e.to_string() });
            }
        }
    }

    pub fn finish(mut self) -> RunSummary {
        for (k, slot) in self.open.iter_mut().enumerate() {
            if let Some((start, end, frames)) = slot.take() {
                self.summary.ews_episodes.push(EwsEpisode {
                    component: component::NAMES[k].to_string(),
                    start,
                    end,
                    frames,
                });
            }
        }
        self.summary.ews_episodes.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.component.cmp(&b.component)));
        self.summary
    }
}

/// Batch run over a frame sequence. Failed frames are reported and skipped.
pub fn run_pipeline<T: Real>(
    frames: impl IntoIterator<Item = MicroStateFrame<T>>,
    cal: CalibrationProfile<T>,
    scene: Scene<T>,
    options: PipelineOptions,
) -> Result<(Vec<Result<FrameBundle<T>, PipelineError>>, RunSummary), PipelineError> {
    let mut pipeline = Pipeline::new(cal, scene, options)?;
    let mut summary = SummaryBuilder::new();
    let mut out = Vec::new();
    for (k, f) in frames.into_iter().enumerate() {
        let r = pipeline.process(&f);
        summary.record(k, &r);
        out.push(r);
    }
    Ok((out, summary.finish()))
}
