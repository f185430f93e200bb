//! Live gateway over the behavioral-field pipeline.
//!
//! One producer thread owns the pipeline and the frame source (simulator,
//! recorded replay or nothing). Each finished bundle is published three ways:
//! as the latest snapshot, into a bounded history ring, and on the push stream.
//! HTTP handlers only read those, so no client can slow the producer down.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod messages;
mod producer;
mod routes;

use std::collections::{HashMap, VecDeque};
use std::sync::{mpsc, Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use axum::extract::ws::Utf8Bytes;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use groupfield_core::model::{CalibrationProfile, MicroStateFrame, Scene};
use groupfield_core::pipeline::FrameBundle;
use groupfield_core::scenario::{ScenarioResult, SpecIssue, SurrogateParams};
use tokio::sync::{broadcast, oneshot, watch};

pub use config::{Config, ConfigError, CONFIG_ENV};
pub use messages::*;

use producer::{Producer, Request};

/// Cached scenario results kept per service.
pub const SCENARIO_CACHE_SIZE: usize = 64;

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { error: error.into(), issues: Vec::new() } }
    }

    pub fn invalid(error: impl Into<String>, issues: Vec<SpecIssue>) -> Self {
        ApiError { status: StatusCode::UNPROCESSABLE_ENTITY, body: ErrorBody { error: error.into(), issues } }
    }

    pub fn conflict(error: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, error)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.status, self.body.error)?;
        for i in &self.body.issues {
            write!(f, "; {}: {}", i.field, i.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scenario pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("startup: {0}")]
    Startup(ApiError),
    #[error("replay speed must be finite and >= 0, got {0}")]
    Speed(f64),
}

/// What the producer starts with.
#[derive(Debug, Clone)]
pub enum Startup {
    Idle,
    Preset { name: String, seed: u64 },
    /// recorded frames paced by their timestamps divided by `speed`; 0 means as fast as possible
    Replay { frames: Vec<MicroStateFrame<f64>>, speed: f64 },
}

/// A finished bundle together with the scene it was computed in.
pub struct Snapshot {
    pub bundle: FrameBundle<f64>,
    pub scene: Arc<Scene<f64>>,
}

#[derive(Default)]
struct ScenarioCache {
    map: HashMap<u64, Arc<ScenarioResult>>,
    order: VecDeque<u64>,
}

impl ScenarioCache {
    fn get(&self, key: u64) -> Option<Arc<ScenarioResult>> {
        self.map.get(&key).cloned()
    }

    fn insert(&mut self, key: u64, result: Arc<ScenarioResult>) {
        if self.map.insert(key, result).is_none() {
            self.order.push_back(key);
        }
        while self.order.len() > SCENARIO_CACHE_SIZE {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            }
        }
    }
}

pub(crate) struct Shared {
    config: Config,
    cal: CalibrationProfile<f64>,
    surrogate: SurrogateParams,
    latest: watch::Sender<Option<Arc<Snapshot>>>,
    history: Mutex<VecDeque<HistoryEntry>>,
    status: Mutex<Status>,
    stream: broadcast::Sender<Utf8Bytes>,
    commands: mpsc::Sender<Request>,
    cache: Mutex<ScenarioCache>,
    pool: rayon::ThreadPool,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Shared {
    fn status(&self) -> Status {
        lock(&self.status).clone()
    }

    fn latest(&self) -> Option<Arc<Snapshot>> {
        self.latest.borrow().clone()
    }

    fn push(&self, message: &StreamMessage<'_>) {
        if self.stream.receiver_count() == 0 {
            return;
        }
        if let Ok(text) = serde_json::to_string(message) {
            let _ = self.stream.send(Utf8Bytes::from(text));
        }
    }

    fn publish(&self, bundle: FrameBundle<f64>, scene: Arc<Scene<f64>>) {
        let entry = HistoryEntry::of(&bundle);
        {
            let mut h = lock(&self.history);
            let horizon = entry.timestamp - self.config.history_seconds;
            h.push_back(entry);
            while h.front().is_some_and(|e| e.timestamp < horizon) {
                h.pop_front();
            }
        }
        self.push(&StreamMessage::Frame { schema_version: SCHEMA_VERSION, bundle: &bundle });
        self.latest.send_replace(Some(Arc::new(Snapshot { bundle, scene })));
    }

    fn reset(&self) {
        lock(&self.history).clear();
        self.latest.send_replace(None);
    }

    async fn control(&self, command: ControlCommand) -> Result<Status, ApiError> {
        let (tx, rx) = oneshot::channel();
        let stopped = || ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "producer stopped");
        self.commands.send(Request::Control(command, tx)).map_err(|_| stopped())?;
        rx.await.map_err(|_| stopped())?
    }
}

/// A running service. Dropping it stops the producer.
pub struct Service {
    shared: Arc<Shared>,
    producer: Option<JoinHandle<()>>,
}

impl Service {
    pub fn start(config: Config, startup: Startup) -> Result<Self, ServiceError> {
        config.validate()?;
        let cal = config.calibration()?;
        let surrogate = config.surrogate(&cal);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.scenario_threads())
            .thread_name(|k| format!("scenario-{k}"))
            .build()?;
        let (commands, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            stream: broadcast::channel(config.stream_buffer).0,
            latest: watch::channel(None).0,
            history: Mutex::new(VecDeque::new()),
            status: Mutex::new(Status::idle()),
            cache: Mutex::new(ScenarioCache::default()),
            commands,
            pool,
            cal,
            surrogate,
            config,
        });
        let mut producer = Producer::new(shared.clone());
        match startup {
            Startup::Idle => {}
            Startup::Preset { name, seed } => {
                producer
                    .control(ControlCommand::LoadPreset { preset: name, seed, agents: None })
                    .map_err(ServiceError::Startup)?;
            }
            Startup::Replay { frames, speed } => {
                if !(speed >= 0.0 && speed.is_finite()) {
                    return Err(ServiceError::Speed(speed));
                }
                producer.load_replay(frames, speed);
            }
        }
        let handle = std::thread::Builder::new()
            .name("pipeline".into())
            .spawn(move || producer.run(rx))
            .expect("spawn pipeline thread");
        Ok(Service { shared, producer: Some(handle) })
    }

    pub fn router(&self) -> Router {
        routes::router(self.shared.clone())
    }

    pub fn status(&self) -> Status {
        self.shared.status()
    }

    /// Latest bundle, if any frame has been processed.
    pub fn latest(&self) -> Option<Arc<Snapshot>> {
        self.shared.latest()
    }

    /// Raw push-stream messages, JSON text.
    pub fn subscribe(&self) -> broadcast::Receiver<Utf8Bytes> {
        self.shared.stream.subscribe()
    }

    pub async fn control(&self, command: ControlCommand) -> Result<Status, ApiError> {
        self.shared.control(command).await
    }

    /// Serve HTTP and WebSocket on `listener` until `shutdown` resolves.
    pub async fn serve(
        &self,
        listener: tokio::net::TcpListener,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> std::io::Result<()> {
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.shared.commands.send(Request::Shutdown);
        if let Some(h) = self.producer.take() {
            let _ = h.join();
        }
    }
}
