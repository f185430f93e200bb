//! The single writer: pulls frames from the active source, runs the pipeline
//! and publishes every result.

use std::collections::VecDeque;
use std::sync::mpsc::{Receiver, RecvTimeoutError, TryRecvError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use groupfield_core::model::{MicroStateFrame, Scene};
use groupfield_core::pipeline::Pipeline;
use groupfield_core::synthetic::{generate_stream, SceneStream, ScenePreset};
use tokio::sync::oneshot;

use crate::messages::{ControlCommand, Mode, Status, StreamMessage, SCHEMA_VERSION};
use crate::{lock, ApiError, Shared};

pub(crate) enum Request {
    Control(ControlCommand, oneshot::Sender<Result<Status, ApiError>>),
    Shutdown,
}

enum Source {
    Idle,
    Simulator { stream: Box<SceneStream>, period: Duration },
    Replay { frames: VecDeque<MicroStateFrame<f64>>, speed: f64 },
}

pub(crate) struct Producer {
    shared: Arc<Shared>,
    source: Source,
    pipeline: Option<Pipeline<f64>>,
    scene: Arc<Scene<f64>>,
    paused: bool,
    next_due: Instant,
    index: u64,
}

impl Producer {
    pub(crate) fn new(shared: Arc<Shared>) -> Self {
        let scene = Arc::new(shared.config.scene());
        Producer {
            shared,
            source: Source::Idle,
            pipeline: None,
            scene,
            paused: false,
            next_due: Instant::now(),
            index: 0,
        }
    }

    fn mode(&self) -> Mode {
        match self.source {
            Source::Idle => Mode::Idle,
            Source::Simulator { .. } => Mode::Simulator,
            Source::Replay { .. } => Mode::Replay,
        }
    }

    fn next_timestamp(&self) -> Option<f64> {
        match &self.source {
            Source::Idle => None,
            Source::Simulator { stream, .. } => stream.next_timestamp(),
            Source::Replay { frames, .. } => frames.front().map(|f| f.timestamp),
        }
    }

    fn sync_status(&self) -> Status {
        let mut s = lock(&self.shared.status);
        s.mode = self.mode();
        s.paused = self.paused;
        s.frames = self.index;
        s.next_timestamp = self.next_timestamp();
        s.clone()
    }

    fn new_session(&mut self, scene: Scene<f64>) -> Result<(), ApiError> {
        let s = &self.shared;
        let pipeline = Pipeline::new(s.cal.clone(), scene.clone(), s.config.pipeline)
            .map_err(|e| ApiError::invalid(e.to_string(), Vec::new()))?;
        self.pipeline = Some(pipeline);
        self.scene = Arc::new(scene);
        self.index = 0;
        self.paused = false;
        self.next_due = Instant::now();
        s.reset();
        Ok(())
    }

    pub(crate) fn load_replay(&mut self, frames: Vec<MicroStateFrame<f64>>, speed: f64) {
        let scene = self.shared.config.scene();
        if self.new_session(scene).is_ok() {
            self.source = Source::Replay { frames: frames.into(), speed };
            let mut st = lock(&self.shared.status);
            st.preset = None;
            st.seed = None;
        }
        let status = self.sync_status();
        self.shared.push(&StreamMessage::SourceLoaded { schema_version: SCHEMA_VERSION, status: &status });
    }

    fn simulator(&mut self) -> Result<&mut SceneStream, ApiError> {
        match &mut self.source {
            Source::Simulator { stream, .. } => Ok(stream),
            _ => Err(ApiError::conflict("command needs simulator mode")),
        }
    }

    pub(crate) fn control(&mut self, command: ControlCommand) -> Result<Status, ApiError> {
        match command {
            ControlCommand::LoadPreset { preset, seed, agents } => {
                if matches!(self.source, Source::Replay { .. }) {
                    return Err(ApiError::conflict("load-preset is not available while replaying"));
                }
                let mut p = ScenePreset::named(&preset, seed).ok_or_else(|| {
                    ApiError::invalid(
                        format!("unknown preset {preset:?}; known: {}", ScenePreset::NAMES.join(", ")),
                        Vec::new(),
                    )
                })?;
                if let Some(n) = agents {
                    p.n_agents = n;
                }
                let stream = generate_stream(&p, &self.shared.cal).map_err(|e| ApiError::invalid(e.to_string(), Vec::new()))?;
                let period = Duration::from_secs_f64(1.0 / (p.frame_rate * self.shared.config.sim_speed));
                self.new_session(stream.scene().clone())?;
                self.source = Source::Simulator { stream: Box::new(stream), period };
                {
                    let mut st = lock(&self.shared.status);
                    st.preset = Some(preset);
                    st.seed = Some(seed);
                }
                let status = self.sync_status();
                self.shared.push(&StreamMessage::SourceLoaded { schema_version: SCHEMA_VERSION, status: &status });
            }
            ControlCommand::Pause => self.paused = true,
            ControlCommand::Resume => {
                if self.paused {
                    self.paused = false;
                    self.next_due = Instant::now();
                }
            }
            ControlCommand::InjectPerturbation { agent, gesture } => {
                self.simulator()?
                    .perturb_gesture(&agent, gesture)
                    .map_err(|e| ApiError::invalid(e.to_string(), Vec::new()))?;
            }
            ControlCommand::ApplyIntervention { intervention } => {
                let id = intervention.id.clone();
                self.simulator()?
                    .apply_intervention(&intervention)
                    .map_err(|issues| ApiError::invalid(format!("invalid intervention {id}"), issues))?;
            }
        }
        Ok(self.sync_status())
    }

    pub(crate) fn run(mut self, rx: Receiver<Request>) {
        loop {
            let runnable = !self.paused && self.next_timestamp().is_some();
            let request = if runnable {
                let wait = self.next_due.saturating_duration_since(Instant::now());
                if wait.is_zero() {
                    rx.try_recv().map_err(|e| match e {
                        TryRecvError::Empty => RecvTimeoutError::Timeout,
                        TryRecvError::Disconnected => RecvTimeoutError::Disconnected,
                    })
                } else {
                    rx.recv_timeout(wait)
                }
            } else {
                rx.recv().map_err(|_| RecvTimeoutError::Disconnected)
            };
            match request {
                Ok(Request::Shutdown) | Err(RecvTimeoutError::Disconnected) => return,
                Ok(Request::Control(command, reply)) => {
                    let _ = reply.send(self.control(command));
                }
                Err(RecvTimeoutError::Timeout) => self.tick(),
            }
        }
    }

    fn tick(&mut self) {
        let started = Instant::now();
        let (frame, interval) = match &mut self.source {
            Source::Idle => return,
            Source::Simulator { stream, period } => match stream.next() {
                Some(f) => (f, *period),
                None => {
                    self.sync_status();
                    return;
                }
            },
            Source::Replay { frames, speed } => match frames.pop_front() {
                Some(f) => {
                    let gap = frames.front().map_or(0.0, |n| n.timestamp - f.timestamp);
                    let wait = if *speed > 0.0 { (gap / *speed).max(0.0) } else { 0.0 };
                    (f, Duration::from_secs_f64(wait))
                }
                None => return,
            },
        };
        if let Some(pipeline) = self.pipeline.as_mut() {
            match pipeline.process(&frame) {
                Ok(bundle) => self.shared.publish(bundle, self.scene.clone()),
                Err(e) => self.shared.push(&StreamMessage::FrameFailed {
                    schema_version: SCHEMA_VERSION,
                    index: self.index,
                    timestamp: frame.timestamp,
                    error: e.to_string(),
                }),
            }
        }
        self.index += 1;
        self.next_due = (self.next_due + interval).max(started);
        self.sync_status();
    }
}
