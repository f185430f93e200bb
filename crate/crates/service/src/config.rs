//! Runtime configuration shared by the service and the command-line tool.

use std::path::{Path, PathBuf};

use groupfield_core::model::{CalibrationProfile, Scene};
use groupfield_core::pipeline::PipelineOptions;
use groupfield_core::scenario::SurrogateParams;
use serde::{Deserialize, Serialize};

/// Environment variable naming a config file.
pub const CONFIG_ENV: &str = "GROUPFIELD_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// built-in calibration profile, used when `calibration` is absent
    pub profile: String,
    pub calibration: Option<CalibrationProfile<f64>>,
    /// scene for recorded streams; simulator presets bring their own
    pub scene: Option<Scene<f64>>,
    pub pipeline: PipelineOptions,
    /// forecast parameters; derived from the calibration when absent
    pub surrogate: Option<SurrogateParams>,
    /// stream time between scenario analyses in batch runs, s
    pub scenario_cadence: f64,
    /// in-memory history kept by the service, s
    pub history_seconds: f64,
    /// per-subscriber buffer before latest-wins conflation, frames
    pub stream_buffer: usize,
    /// simulator pace relative to the wall clock
    pub sim_speed: f64,
    /// scenario worker threads; 0 means half the cores
    pub scenario_threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            profile: "negotiation".into(),
            calibration: None,
            scene: None,
            pipeline: PipelineOptions::default(),
            surrogate: None,
            scenario_cadence: 10.0,
            history_seconds: 600.0,
            stream_buffer: 32,
            sim_speed: 1.0,
            scenario_threads: 0,
        }
    }
}

impl Config {
    /// Read `path`, or the file named by [`CONFIG_ENV`], or fall back to defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let path = match path {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
        };
        let Some(path) = path else { return Ok(Config::default()) };
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read { path: path.clone(), source })?;
        let config: Config = serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path, source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.calibration()?;
        if let Some(scene) = &self.scene {
            scene.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(sp) = &self.surrogate {
            if let Err(issues) = sp.validate() {
                return bad(format!("surrogate: {issues:?}"));
            }
        }
        if !(self.scenario_cadence > 0.0) {
            return bad("scenario_cadence must be positive".into());
        }
        if !(self.history_seconds > 0.0) {
            return bad("history_seconds must be positive".into());
        }
        if self.stream_buffer == 0 {
            return bad("stream_buffer must be positive".into());
        }
        if !(self.sim_speed > 0.0 && self.sim_speed.is_finite()) {
            return bad("sim_speed must be positive".into());
        }
        Ok(())
    }

    pub fn calibration(&self) -> Result<CalibrationProfile<f64>, ConfigError> {
        let cal = match &self.calibration {
            Some(c) => c.clone(),
            None => CalibrationProfile::preset(&self.profile).ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "unknown profile {:?}; known: {}",
                    self.profile,
                    CalibrationProfile::<f64>::PRESET_NAMES.join(", ")
                ))
            })?,
        };
        cal.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cal)
    }

    pub fn scene(&self) -> Scene<f64> {
        self.scene.clone().unwrap_or_else(Scene::conference_room)
    }

    pub fn surrogate(&self, cal: &CalibrationProfile<f64>) -> SurrogateParams {
        self.surrogate.unwrap_or_else(|| SurrogateParams::for_calibration(cal))
    }

    pub fn scenario_threads(&self) -> usize {
        if self.scenario_threads > 0 {
            return self.scenario_threads;
        }
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        (cores / 2).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: Config = serde_json::from_str(r#"{"profile": "education", "pipeline": {"compute_ews": false}}"#).unwrap();
        assert_eq!(c.calibration().unwrap().vertical_name, "education");
        assert!(!c.pipeline.compute_ews);
        assert_eq!(c.pipeline.power_max_iter, PipelineOptions::default().power_max_iter);
        assert_eq!(c.stream_buffer, 32);
    }

    #[test]
    fn rejects_unknown_profile_and_fields() {
        let c = Config { profile: "poker".into(), ..Config::default() };
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<Config>(r#"{"colour": 1}"#).is_err());
    }
}
