//! Reference fixture and synthetic micro-signal streams with scheduled regimes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::build_interaction_matrix;
use crate::model::{
    validate_frame, AgentId, AgentMicroState, CalibrationProfile, MicroStateFrame, Scene, ValidatedFrame, Vec2,
};
use crate::scalar::Real;
use crate::scenario::{BaselineMode, ChannelRates, InterventionSpec, SpecIssue, Surrogate, SurrogateParams};

/// The 7-agent negotiation frame (four-person team A with its facilitator,
/// three-person team B) in the 8 x 5 m conference room.
pub fn golden_frame<T: Real>() -> ValidatedFrame<T> {
    let rows: [(f64, f64, f64, f64, f64, f64, f64, &str); 7] = [
        (1.5, 2.5, 0.15, 0.05, 0.0, 3.20, 0.94, "Facilitator A1"),
        (4.0, 3.8, 0.20, -0.10, PI, 1.80, 0.96, "Team A lead A2"),
        (4.0, 2.5, 0.00, 0.00, PI, 0.30, 0.91, "Team A lawyer A3"),
        (5.5, 1.2, -0.05, 0.00, 3.0 * PI / 4.0, 0.15, 0.89, "Team A finance A4"),
        (4.0, 1.2, 0.10, 0.10, PI / 6.0, 0.60, 0.95, "Team B lead B1"),
        (5.5, 2.5, 0.08, -0.08, 2.80, 0.90, 0.92, "Team B analyst B2"),
        (6.5, 4.0, 0.00, 0.00, PI / 2.0, 0.05, 0.98, "Team B assistant B3"),
    ];
    let l = T::lit;
    let agents = rows
        .iter()
        .enumerate()
        .map(|(k, (x, y, vx, vy, th, e, c, role))| AgentMicroState {
            agent_id: AgentId::from(k as u32 + 1),
            position: Vec2::new(l(*x), l(*y)),
            velocity: Vec2::new(l(*vx), l(*vy)),
            orientation: l(*th),
            gesture: l(*e),
            proxemic: T::zero(),
            confidence: l(*c),
            role_label: Some(role.to_string()),
        })
        .collect();
    let frame = MicroStateFrame { timestamp: T::zero(), agents, scene_ref: "conference-room".into() };
    validate_frame(&frame, &Scene::conference_room(), None).expect("reference frame is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    SeatedCircle,
    TwoTeams,
    CrowdGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Stable,
    Escalation,
    Recovery,
    ForcedTransition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeSegment {
    /// s
    pub start: f64,
    pub regime: Regime,
    /// in [0, 1]
    pub intensity: f64,
}

/// Sinusoidal gesture rhythm; the two halves of the group oscillate in anti-phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rhythm {
    /// rad/s
    pub amplitude: f64,
    /// Hz
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePreset {
    pub name: String,
    pub n_agents: usize,
    pub layout: Layout,
    pub schedule: Vec<RegimeSegment>,
    /// s
    pub duration: f64,
    /// Hz
    pub frame_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub rhythm: Option<Rhythm>,
    /// start from the reference 7-agent frame instead of the layout
    #[serde(default)]
    pub inject_golden: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid scene preset: {0}")]
pub struct PresetError(pub String);

/// Contagion gain at which the row-normalized coupling becomes critical.
pub const CRITICAL_GAIN: f64 = 1.0;

const FORCED_GAIN: (f64, f64) = (0.0, 1.2);
const FORCED_KAPPA: f64 = 1.0;

impl ScenePreset {
    pub const NAMES: [&'static str; 5] = ["stable", "escalation", "recovery", "forced-transition", "golden"];

    pub fn named(name: &str, seed: u64) -> Option<Self> {
        let seg = |start, regime, intensity| RegimeSegment { start, regime, intensity };
        let base = |name: &str, schedule, duration| ScenePreset {
            name: name.into(),
            n_agents: 7,
            layout: Layout::TwoTeams,
            schedule,
            duration,
            frame_rate: 4.0,
            seed,
            rhythm: Some(Rhythm { amplitude: 0.15, frequency: 0.5 }),
            inject_golden: false,
        };
        Some(match name {
            "stable" => base(name, vec![seg(0.0, Regime::Stable, 0.5)], 120.0),
            "escalation" => base(name, vec![seg(0.0, Regime::Stable, 0.5), seg(20.0, Regime::Escalation, 1.0)], 120.0),
            "recovery" => base(name, vec![seg(0.0, Regime::Escalation, 1.0), seg(60.0, Regime::Recovery, 1.0)], 150.0),
            "forced-transition" => base(name, vec![seg(0.0, Regime::ForcedTransition, 1.0)], 120.0),
            "golden" => ScenePreset { inject_golden: true, ..base(name, vec![seg(0.0, Regime::Stable, 0.5)], 60.0) },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), PresetError> {
        let bad = |m: &str| Err(PresetError(m.into()));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad("frame_rate must be positive");
        }
        if self.n_agents == 0 {
            return bad("n_agents must be positive");
        }
        if self.schedule.is_empty() {
            return bad("schedule must not be empty");
        }
        if self.schedule.iter().any(|s| !(s.start >= 0.0 && s.start <= self.duration)) {
            return bad("schedule times must lie within the duration");
        }
        if self.schedule.windows(2).any(|w| w[1].start < w[0].start) {
            return bad("schedule must be ordered by start time");
        }
        if self.schedule.iter().any(|s| !(0.0..=1.0).contains(&s.intensity)) {
            return bad("intensity must lie in [0, 1]");
        }
        if self.inject_golden && self.n_agents != 7 {
            return bad("golden injection needs 7 agents");
        }
        Ok(())
    }

    /// Room sized for the layout.
    pub fn scene(&self) -> Scene<f64> {
        match self.layout {
            Layout::CrowdGrid => {
                let side = ((self.n_agents as f64).sqrt().ceil() + 1.0).max(4.0);
                Scene::room("crowd-grid", side, side, 0.5)
            }
            _ => Scene::conference_room(),
        }
    }

    /// Time at which a forced-transition segment crosses the critical gain.
    pub fn transition_time(&self) -> Option<f64> {
        let k = self.schedule.iter().position(|s| s.regime == Regime::ForcedTransition)?;
        let (start, end) = self.segment_bounds(k);
        let (g0, g1) = forced_range(self.schedule[k].intensity);
        (g1 > CRITICAL_GAIN).then(|| start + (CRITICAL_GAIN - g0) / (g1 - g0) * (end - start))
    }

    fn segment_bounds(&self, k: usize) -> (f64, f64) {
        let start = self.schedule[k].start;
        let end = self.schedule.get(k + 1).map_or(self.duration, |s| s.start);
        (start, end)
    }

    /// (kappa, rho) in force at time t.
    pub fn regime_params(&self, t: f64) -> (f64, f64) {
        let k = self.schedule.iter().rposition(|s| s.start <= t).unwrap_or(0);
        let seg = self.schedule[k];
        let (start, end) = self.segment_bounds(k);
        let p = if end > start { ((t - start) / (end - start)).clamp(0.0, 1.0) } else { 1.0 };
        let lerp = |a: f64, b: f64| a + (b - a) * p;
        let i = seg.intensity;
        match seg.regime {
            Regime::Stable => (0.4 + 0.4 * i, 0.2),
            Regime::Escalation => (0.2, lerp(0.3, 0.3 + 1.2 * i)),
            Regime::Recovery => (0.3, lerp(0.3 + 1.2 * i, 0.2)),
            Regime::ForcedTransition => {
                let (g0, g1) = forced_range(i);
                (FORCED_KAPPA, lerp(g0, g1))
            }
        }
    }

    fn initial_frame(&self, cal: &CalibrationProfile<f64>, rng: &mut ChaCha8Rng) -> ValidatedFrame<f64> {
        if self.inject_golden {
            return golden_frame();
        }
        let scene = self.scene();
        let (w, h) = (scene.bounds.width(), scene.bounds.height());
        let n = self.n_agents;
        let place = |k: usize, rng: &mut ChaCha8Rng| -> (Vec2<f64>, f64) {
            match self.layout {
                Layout::SeatedCircle => {
                    let a = 2.0 * PI * k as f64 / n as f64;
                    let r = w.min(h) / 3.0;
                    let p = Vec2::new(w / 2.0 + r * a.cos(), h / 2.0 + r * a.sin());
                    (p, a + PI)
                }
                Layout::TwoTeams => {
                    let half = n.div_ceil(2);
                    let (row, idx, count) = if k < half { (0, k, half) } else { (1, k - half, n - half) };
                    let x = w * (0.25 + 0.5 * (idx as f64 + 0.5) / count as f64);
                    if row == 0 {
                        (Vec2::new(x, 0.7 * h), -PI / 2.0)
                    } else {
                        (Vec2::new(x, 0.3 * h), PI / 2.0)
                    }
                }
                Layout::CrowdGrid => {
                    let cols = (n as f64).sqrt().ceil() as usize;
                    let p = Vec2::new(1.0 + (k % cols) as f64, 1.0 + (k / cols) as f64);
                    (p, rng.random_range(-PI..PI))
                }
            }
        };
        let agents = (0..n)
            .map(|k| {
                let (position, orientation) = place(k, rng);
                AgentMicroState {
                    agent_id: AgentId::from(k as u32 + 1),
                    position,
                    velocity: Vec2::new(orientation.cos(), orientation.sin()).scale(cal.mu_v),
                    orientation: crate::scalar::wrap_angle(orientation),
                    gesture: cal.mu_e,
                    proxemic: 0.0,
                    confidence: 0.95,
                    role_label: None,
                }
            })
            .collect();
        let frame = MicroStateFrame { timestamp: 0.0, agents, scene_ref: scene.id.clone() };
        validate_frame(&frame, &scene, None).expect("layout stays inside the scene")
    }
}

fn forced_range(intensity: f64) -> (f64, f64) {
    (FORCED_GAIN.0, FORCED_GAIN.0 + (FORCED_GAIN.1 - FORCED_GAIN.0) * (0.5 + 0.5 * intensity))
}

/// Pull-based frame generator. Deterministic per preset and seed.
pub struct SceneStream {
    preset: ScenePreset,
    scene: Scene<f64>,
    cal: CalibrationProfile<f64>,
    sim: Surrogate,
    rng: ChaCha8Rng,
    phases: Vec<f64>,
    index: usize,
    total: usize,
    first: Option<MicroStateFrame<f64>>,
}

impl SceneStream {
    pub fn scene(&self) -> &Scene<f64> {
        &self.scene
    }

    pub fn preset(&self) -> &ScenePreset {
        &self.preset
    }

    fn dt(&self) -> f64 {
        1.0 / self.preset.frame_rate
    }

    /// Timestamp of the next frame, or `None` once the stream is exhausted.
    pub fn next_timestamp(&self) -> Option<f64> {
        (self.index < self.total).then(|| self.index as f64 * self.dt())
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.sim.agent_ids().cloned().collect()
    }

    /// Route `u` into the running dynamics from the next frame on. Its
    /// execution delay counts from the last emitted frame.
    pub fn apply_intervention(&mut self, u: &InterventionSpec) -> Result<(), Vec<SpecIssue>> {
        u.validate(&self.agent_ids())?;
        self.sim.apply(u, self.now());
        Ok(())
    }

    /// Set an agent's gesture level (and the level it relaxes to) from the next frame on.
    pub fn perturb_gesture(&mut self, agent: &AgentId, gesture: f64) -> Result<(), PresetError> {
        if !(gesture >= 0.0 && gesture.is_finite()) {
            return Err(PresetError(format!("gesture must be finite and nonnegative, got {gesture}")));
        }
        let i = self
            .sim
            .agent_ids()
            .position(|id| id == agent)
            .ok_or_else(|| PresetError(format!("unknown agent {agent}")))?;
        self.sim.set_gesture(i, gesture);
        if let Some(f) = self.first.as_mut() {
            f.agents[i].gesture = gesture;
        }
        Ok(())
    }

    fn now(&self) -> f64 {
        self.index.saturating_sub(1) as f64 * self.dt()
    }

    fn with_rhythm(&self, mut frame: MicroStateFrame<f64>, t: f64) -> MicroStateFrame<f64> {
        if let Some(r) = self.preset.rhythm {
            for (a, phi) in frame.agents.iter_mut().zip(&self.phases) {
                a.gesture = (a.gesture + r.amplitude * (2.0 * PI * r.frequency * t + phi).sin()).max(0.0);
            }
        }
        frame
    }
}

impl Iterator for SceneStream {
    type Item = MicroStateFrame<f64>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.index >= self.total {
            return None;
        }
        if let Some(first) = self.first.take() {
            self.index += 1;
            return Some(first);
        }
        let dt = self.dt();
        let t_prev = (self.index - 1) as f64 * dt;
        let frame = self.sim.frame(t_prev);
        let validated = validate_frame(&frame, &self.scene, None).ok()?;
        let w = build_interaction_matrix(&validated, &self.scene, &self.cal).ok()?;
        let (kappa, rho) = self.preset.regime_params(t_prev);
        self.sim.sp.kappa.gesture = kappa;
        self.sim.sp.kappa.speed = kappa;
        self.sim.sp.rho_contagion = rho;
        if !self.sim.step(t_prev, &w, &self.scene, &mut self.rng) {
            self.index = self.total;
            return None;
        }
        let t = self.index as f64 * dt;
        self.index += 1;
        Some(self.with_rhythm(self.sim.frame(t), t))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.index;
        (0, Some(left))
    }
}

/// Stream for `preset`, one frame every 1/frame_rate seconds up to the duration.
pub fn generate_stream(preset: &ScenePreset, cal: &CalibrationProfile<f64>) -> Result<SceneStream, PresetError> {
    preset.validate()?;
    cal.validate().map_err(|e| PresetError(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(preset.seed);
    let initial = preset.initial_frame(cal, &mut rng);
    let dt = 1.0 / preset.frame_rate;
    let (kappa, rho) = preset.regime_params(0.0);
    let sp = SurrogateParams {
        kappa: ChannelRates { gesture: kappa, speed: kappa, orientation: 0.5, position: 0.5 },
        rho_contagion: rho,
        sigma_noise: ChannelRates { gesture: 0.3 * cal.sigma_e, speed: 0.3 * cal.sigma_v, orientation: 0.05, position: 0.01 },
        dt,
        horizon: preset.duration,
        ensemble_size: 1,
        rng_seed: preset.seed,
        baseline_mode: BaselineMode::Calibration,
        jacobian_stability: false,
    };
    let sim = Surrogate::new(&initial, cal, &sp, &InterventionSpec::noop());
    let phases = (0..initial.len()).map(|k| if k % 2 == 0 { 0.0 } else { PI }).collect();
    let total = (preset.duration * preset.frame_rate).floor() as usize + 1;
    let mut stream = SceneStream {
        preset: preset.clone(),
        scene: preset.scene(),
        cal: cal.clone(),
        sim,
        rng,
        phases,
        index: 0,
        total,
        first: None,
    };
    let first = if preset.inject_golden { initial.into_frame() } else { stream.with_rhythm(initial.into_frame(), 0.0) };
    stream.first = Some(first);
    Ok(stream)
}
