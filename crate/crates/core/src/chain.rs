//! Seven-step causal explanation of a frame and its recommended intervention.

use serde::{Deserialize, Serialize};

use crate::criticality::TauBounds;
use crate::model::{AgentId, CalibrationProfile};
use crate::pipeline::FrameBundle;
use crate::scenario::{Channel, EffectTarget, EffectValue, InterventionOutcome};
use crate::spectral::dense_dominant;

/// |z| above which an observable is called out.
pub const OBSERVABLE_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Gesture,
    Speed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterChange {
    pub agent: AgentId,
    pub channel: Channel,
    pub from: f64,
    pub to: f64,
}

/// Expressivity factor (1 + beta e) of one column of W before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnFactor {
    pub agent: AgentId,
    pub from: f64,
    pub to: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum ChainStep {
    Observable { agent: AgentId, observable: Observable, value: f64, z_score: f64 },
    Physical { agent: AgentId, tension: f64, reference_agent: AgentId, reference_tension: f64, ratio: Option<f64> },
    Structural { receiver: AgentId, source: AgentId, weight: f64 },
    Spectral { lambda_max: f64, stability_margin: f64, relaxation_time: Option<f64>, amplifying: bool },
    Predictive { horizon: f64, escalation_probability: f64, tau: Option<f64>, tau_bounds: TauBounds<f64> },
    Mechanism {
        intervention: String,
        description: String,
        changes: Vec<ParameterChange>,
        column_factors: Vec<ColumnFactor>,
        lambda_max_now: f64,
        predicted_lambda_max: f64,
        st_at_horizon: f64,
    },
    Effect {
        intervention: String,
        r_now: f64,
        r_at_horizon: f64,
        escalation_from: f64,
        escalation_to: f64,
        tau_from: Option<f64>,
        tau_to: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalChain {
    pub steps: Vec<ChainStep>,
    /// nothing beyond the observable threshold: the chain collapses to a stable summary
    pub stable: bool,
    pub notes: Vec<String>,
    pub limitations: Vec<String>,
}

fn limitations(tau_bounds: Option<&TauBounds<f64>>) -> Vec<String> {
    let fmt = |v: Option<f64>| v.map_or("inf".to_string(), |t| format!("{t:.0}s"));
    let tau = match tau_bounds {
        Some(b) => format!("time-to-threshold confidence interval is [{}, {}]", fmt(b.lower), fmt(b.upper)),
        None => "no time-to-threshold forecast was run".to_string(),
    };
    vec![
        "content of the interaction is unknown; high activity may be contextually appropriate".into(),
        tau,
        "calibration assumes similarity to the baseline context".into(),
        "R measures proximity to the transition boundary, not what happens during escalation".into(),
    ]
}

/// Build the chain for `bundle`. `scenario` carries the no-op outcome (if it
/// was run) and the recommended outcome; without it the chain stops after the
/// spectral step.
pub fn causal_chain(
    bundle: &FrameBundle<f64>,
    cal: &CalibrationProfile<f64>,
    scenario: Option<(Option<&InterventionOutcome>, &InterventionOutcome)>,
) -> CausalChain {
    let agents = bundle.frame.agents();
    let mut steps = Vec::new();
    let mut notes = Vec::new();

    let extremal = bundle
        .normalized
        .iter()
        .enumerate()
        .flat_map(|(i, s)| [(i, Observable::Gesture, s.gesture_z), (i, Observable::Speed, s.speed_z)])
        .max_by(|a, b| a.2.abs().total_cmp(&b.2.abs()));
    let Some((i, obs, z)) = extremal.filter(|e| e.2.abs() > OBSERVABLE_SIGMA) else {
        notes.push(format!("no observable deviates beyond {OBSERVABLE_SIGMA} sigma: stable"));
        return CausalChain { steps, stable: true, notes, limitations: limitations(None) };
    };
    let value = match obs {
        Observable::Gesture => agents[i].gesture,
        Observable::Speed => agents[i].speed(),
    };
    steps.push(ChainStep::Observable { agent: agents[i].agent_id.clone(), observable: obs, value, z_score: z });

    let t = &bundle.fields.tension;
    let hot = (0..t.len()).max_by(|a, b| t[*a].total_cmp(&t[*b])).unwrap_or(0);
    let cold = (0..t.len()).min_by(|a, b| t[*a].total_cmp(&t[*b])).unwrap_or(0);
    steps.push(ChainStep::Physical {
        agent: agents[hot].agent_id.clone(),
        tension: t[hot],
        reference_agent: agents[cold].agent_id.clone(),
        reference_tension: t[cold],
        ratio: (t[cold] > 0.0).then(|| t[hot] / t[cold]),
    });

    if let Some((r, s, w)) = bundle.matrix.dominant_entry() {
        steps.push(ChainStep::Structural {
            receiver: bundle.matrix.agent_order[r].clone(),
            source: bundle.matrix.agent_order[s].clone(),
            weight: w,
        });
    }

    let sp = &bundle.spectral;
    steps.push(ChainStep::Spectral {
        lambda_max: sp.lambda_max,
        stability_margin: sp.stability_margin,
        relaxation_time: sp.relaxation_time,
        amplifying: sp.stability_margin < 0.0,
    });

    let Some((noop, best)) = scenario else {
        notes.push("no scenario forecast available: chain ends at the spectral step".into());
        return CausalChain { steps, stable: false, notes, limitations: limitations(None) };
    };

    let horizon = best.stats.r_band.last().map_or(0.0, |b| b.t);
    if let Some(noop) = noop {
        steps.push(ChainStep::Predictive {
            horizon,
            escalation_probability: noop.stats.escalation_probability,
            tau: noop.stats.tau,
            tau_bounds: noop.stats.tau_bounds,
        });
    }

    let mut changes = Vec::new();
    let mut factors = Vec::new();
    let mut damped = bundle.matrix.clone();
    for e in &best.spec.effects {
        let EffectTarget::Agent(id) = &e.target else { continue };
        let Some(k) = bundle.matrix.index_of(id) else { continue };
        if let (Channel::GestureSetpoint, EffectValue::Scalar(v)) = (e.channel, &e.value) {
            let from = agents[k].gesture;
            changes.push(ParameterChange { agent: id.clone(), channel: e.channel, from, to: *v });
            let f0 = 1.0 + cal.beta_e * from;
            let f1 = 1.0 + cal.beta_e * v;
            factors.push(ColumnFactor { agent: id.clone(), from: f0, to: f1, ratio: f0 / f1 });
            damped.scale_column(k, f1 / f0);
        }
    }
    let predicted = if factors.is_empty() { sp.lambda_max } else { dense_dominant(&damped).0 };
    steps.push(ChainStep::Mechanism {
        intervention: best.spec.id.clone(),
        description: best.spec.description.clone(),
        changes,
        column_factors: factors,
        lambda_max_now: sp.lambda_max,
        predicted_lambda_max: predicted,
        st_at_horizon: best.stats.st_horizon_mean,
    });

    steps.push(ChainStep::Effect {
        intervention: best.spec.id.clone(),
        r_now: bundle.criticality.r_index,
        r_at_horizon: best.stats.r_horizon_mean,
        escalation_from: noop.map_or(best.stats.escalation_probability, |n| n.stats.escalation_probability),
        escalation_to: best.stats.escalation_probability,
        tau_from: noop.and_then(|n| n.stats.tau),
        tau_to: best.stats.tau,
    });

    let bounds = noop.map(|n| &n.stats.tau_bounds);
    CausalChain { steps, stable: false, notes, limitations: limitations(bounds) }
}

impl CausalChain {
    /// Numbered human-readable lines followed by the limitations.
    pub fn render(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map_or("none".to_string(), |t| format!("{t:.1} s"));
        let mut out: Vec<String> = self
            .steps
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let body = match s {
                    ChainStep::Observable { agent, observable, value, z_score } => {
                        let unit = if *observable == Observable::Gesture { "rad/s" } else { "m/s" };
                        format!("Observable: agent {agent} {observable:?} = {value:.2} {unit} ({z_score:+.2} sigma from baseline)")
                    }
                    ChainStep::Physical { agent, tension, reference_agent, reference_tension, ratio } => match ratio {
                        Some(r) => format!(
                            "Physical: T({agent}) = {tension:.2}, {r:.0}x agent {reference_agent} (T = {reference_tension:.2})"
                        ),
                        None => format!("Physical: T({agent}) = {tension:.2}; agent {reference_agent} is at baseline"),
                    },
                    ChainStep::Structural { receiver, source, weight } => {
                        format!("Structural: W[{receiver}][{source}] = {weight:.3}, dominant channel ({source} -> {receiver})")
                    }
                    ChainStep::Spectral { lambda_max, stability_margin, relaxation_time, amplifying } => format!(
                        "Spectral: lambda_max = {lambda_max:.3}, St = {stability_margin:.3} ({}); tau_relax = {}",
                        if *amplifying { "perturbations amplify" } else { "perturbations decay" },
                        f(*relaxation_time)
                    ),
                    ChainStep::Predictive { horizon, escalation_probability, tau, .. } => format!(
                        "Predictive: P(escalation | u=0, {horizon:.0}s) = {escalation_probability:.2}; tau(u=0) = {}",
                        f(*tau)
                    ),
                    ChainStep::Mechanism { intervention, column_factors, lambda_max_now, predicted_lambda_max, st_at_horizon, .. } => {
                        let cols: Vec<String> = column_factors
                            .iter()
                            .map(|c| format!("W[.][{}] factor {:.2} -> {:.2} ({:.2}x)", c.agent, c.from, c.to, c.ratio))
                            .collect();
                        format!(
                            "Mechanism: u={intervention}: {}; lambda_max {lambda_max_now:.3} -> {predicted_lambda_max:.3}; St at horizon {st_at_horizon:.2}",
                            if cols.is_empty() { "no column damping".to_string() } else { cols.join(", ") }
                        )
                    }
                    ChainStep::Effect { intervention, r_now, r_at_horizon, escalation_from, escalation_to, tau_from, tau_to } => format!(
                        "Effect (u={intervention}): R {r_now:.3} -> {r_at_horizon:.3}; P(escalation) {escalation_from:.2} -> {escalation_to:.2}; tau {} -> {}",
                        f(*tau_from),
                        f(*tau_to)
                    ),
                };
                format!("{}. {body}", k + 1)
            })
            .collect();
        out.extend(self.notes.iter().map(|n| format!("Note: {n}")));
        out.push("Limitations:".into());
        out.extend(self.limitations.iter().enumerate().map(|(k, l)| format!("  ({}) {l}", (b'a' + k as u8) as char)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MicroStateFrame, Scene, Vec2};
    use crate::pipeline::{Pipeline, PipelineOptions};
    use crate::synthetic::golden_frame;

    fn bundle(frame: &MicroStateFrame<f64>) -> FrameBundle<f64> {
        let mut p =
            Pipeline::new(CalibrationProfile::negotiation(), Scene::conference_room(), PipelineOptions::default()).unwrap();
        p.process(frame).unwrap()
    }

    #[test]
    fn golden_chain_without_scenario() {
        let cal = CalibrationProfile::negotiation();
        let b = bundle(golden_frame::<f64>().frame());
        let c = causal_chain(&b, &cal, None);
        assert_eq!(c.steps.len(), 4);
        match &c.steps[0] {
            ChainStep::Observable { agent, observable, z_score, .. } => {
                assert_eq!(agent.as_str(), "1");
                assert_eq!(*observable, Observable::Gesture);
                assert!((z_score - 7.86).abs() < 0.01);
            }
            s => panic!("{s:?}"),
        }
        match &c.steps[1] {
            ChainStep::Physical { agent, reference_agent, ratio, tension, reference_tension } => {
                assert_eq!((agent.as_str(), reference_agent.as_str()), ("1", "5"));
                assert!((ratio.unwrap() - tension / reference_tension).abs() < 1e-12);
            }
            s => panic!("{s:?}"),
        }
        match &c.steps[2] {
            ChainStep::Structural { receiver, source, weight } => {
                // Agent 3 sits 2.5 m from the facilitator and faces it head on, so
                // W[3][1] = 0.607 * 1 * 2.60 * 0.94 outweighs the printed W[2][1] = 1.167.
                assert_eq!((receiver.as_str(), source.as_str()), ("3", "1"));
                assert!((weight - 1.48236).abs() < 1e-4);
                assert!((b.matrix.get(1, 0) - 1.167).abs() < 0.01);
            }
            s => panic!("{s:?}"),
        }
        assert_eq!(c.limitations.len(), 4);
        assert_eq!(c.render().len(), 4 + 1 + 1 + 4);
    }

    #[test]
    fn calm_frame_is_stable() {
        let cal = CalibrationProfile::negotiation();
        let mut f = golden_frame::<f64>().frame().clone();
        for a in f.agents.iter_mut() {
            a.gesture = cal.mu_e;
            a.velocity = Vec2::new(cal.mu_v, 0.0);
        }
        let c = causal_chain(&bundle(&f), &cal, None);
        assert!(c.stable && c.steps.is_empty());
    }
}
