//! Request and response payloads. Every top-level payload carries `schema_version`.

use groupfield_core::criticality::CriticalityReport;
use groupfield_core::fields::StateVector;
use groupfield_core::model::{AgentId, CalibrationProfile, MicroStateFrame};
use groupfield_core::pipeline::FrameBundle;
use groupfield_core::scenario::{InterventionSpec, ScenarioProgress, ScenarioResult, SpecIssue, SurrogateParams};
use serde::{Deserialize, Serialize};

use crate::config::Config;

pub use groupfield_core::pipeline::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    Simulator,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub mode: Mode,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub paused: bool,
    /// frames processed since the source was loaded
    pub frames: u64,
    /// stream time of the next frame; `None` when the source is exhausted
    pub next_timestamp: Option<f64>,
}

impl Status {
    pub fn idle() -> Self {
        Status { mode: Mode::Idle, preset: None, seed: None, paused: false, frames: 0, next_timestamp: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateResponse {
    pub schema_version: u32,
    /// no frame has been processed yet
    pub cold_start: bool,
    pub bundle: Option<FrameBundle<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub sequence: u64,
    pub timestamp: f64,
    pub state: StateVector<f64>,
    pub lambda_max: f64,
    pub criticality: CriticalityReport<f64>,
}

impl HistoryEntry {
    pub fn of(b: &FrameBundle<f64>) -> Self {
        HistoryEntry {
            sequence: b.sequence,
            timestamp: b.timestamp,
            state: b.state,
            lambda_max: b.spectral.lambda_max,
            criticality: b.criticality.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryResponse {
    pub schema_version: u32,
    /// requested window, s; `None` returns everything retained
    pub window: Option<f64>,
    pub entries: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRequest {
    /// the no-op is always added
    #[serde(default)]
    pub candidates: Vec<InterventionSpec>,
    /// partial surrogate parameters merged over the configured ones
    #[serde(default)]
    pub overrides: Option<serde_json::Value>,
    /// forecast from this frame instead of the live one
    #[serde(default)]
    pub frame: Option<MicroStateFrame<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResponse {
    pub schema_version: u32,
    pub request_id: String,
    pub cached: bool,
    pub result: ScenarioResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlCommand {
    LoadPreset {
        preset: String,
        #[serde(default)]
        seed: u64,
        /// overrides the preset's group size
        #[serde(default)]
        agents: Option<usize>,
    },
    Pause,
    Resume,
    /// set an agent's gesture level and the level it relaxes to
    InjectPerturbation { agent: AgentId, gesture: f64 },
    ApplyIntervention { intervention: InterventionSpec },
}

impl ControlCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::LoadPreset { .. } => "load-preset",
            ControlCommand::Pause => "pause",
            ControlCommand::Resume => "resume",
            ControlCommand::InjectPerturbation { .. } => "inject-perturbation",
            ControlCommand::ApplyIntervention { .. } => "apply-intervention",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlAck {
    pub schema_version: u32,
    pub command: String,
    pub status: Status,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigResponse {
    pub schema_version: u32,
    pub config: Config,
    pub calibration: CalibrationProfile<f64>,
    pub surrogate: SurrogateParams,
    pub status: Status,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<SpecIssue>,
}

/// One message on the push stream.
#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamMessage<'a> {
    Frame { schema_version: u32, bundle: &'a FrameBundle<f64> },
    FrameFailed { schema_version: u32, index: u64, timestamp: f64, error: String },
    ScenarioProgress { schema_version: u32, request_id: &'a str, progress: &'a ScenarioProgress },
    ScenarioDone { schema_version: u32, request_id: &'a str, recommended: &'a str },
    SourceLoaded { schema_version: u32, status: &'a Status },
}
