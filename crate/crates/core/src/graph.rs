//! Scene-to-graph operator: the directed interaction matrix W(t).
//!
//! `W[i][j]` is the influence of agent `j` on agent `i`:
//!
//! ```text
//! W[i][j] = alpha * Kr(|x_i - x_j|) * Ktheta(gap(i -> j)) * (1 + beta_e * e_j) * c_j
//! ```
//!
//! where `gap(i -> j)` is the angle between `i`'s body orientation and the
//! bearing from `i` to `j`. The diagonal is zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, AgentMicroState, CalibrationProfile, Scene, ValidatedFrame};
use rayon::prelude::*;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("cannot build an interaction matrix for an empty frame")]
    Empty,
    #[error("dimension mismatch: matrix has {matrix} agents, input has {input}")]
    DimensionMismatch { matrix: usize, input: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Proximity,
    Alignment,
}

/// Gaussian kernel `exp(-x^2 / (2 h^2))`. Both kinds share the form; the
/// kind only documents which bandwidth is in play.
#[inline]
pub fn kernel_eval<T: Real>(_kind: KernelKind, x: T, bandwidth: T) -> T {
    (-(x * x) / (T::lit(2.0) * bandwidth * bandwidth)).exp()
}

/// Angle between `i`'s orientation and the bearing from `i` to `j`, in `[0, pi]`.
/// The flag is set when the positions coincide (the gap is then 0).
pub fn bearing_gap<T: Real>(i: &AgentMicroState<T>, j: &AgentMicroState<T>) -> (T, bool) {
    let d = j.position.sub(&i.position);
    if d.x() == T::zero() && d.y() == T::zero() {
        return (T::zero(), true);
    }
    (gap_from(i.orientation.cos(), i.orientation.sin(), d.x(), d.y()), false)
}

/// Angle between the unit heading `(c, s)` and the direction `(dx, dy)`.
#[inline]
fn gap_from<T: Real>(c: T, s: T, dx: T, dy: T) -> T {
    let dot = c * dx + s * dy;
    let cross = c * dy - s * dx;
    cross.abs().atan2(dot)
}

/// Matrices at least this large are filled and multiplied in parallel.
const PARALLEL_MIN: usize = 128;

/// Dot product with four independent accumulators.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| *x * *y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Dense directed interaction matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrix<T> {
    pub timestamp: T,
    pub n: usize,
    pub agent_order: Vec<AgentId>,
    /// row i, column j = influence of j on i
    pub weights: Vec<T>,
    #[serde(default)]
    pub degenerate_pairs: usize,
}

impl<T: Real> InteractionMatrix<T> {
    pub fn from_dense(timestamp: T, agent_order: Vec<AgentId>, weights: Vec<T>) -> Self {
        let n = agent_order.len();
        assert_eq!(weights.len(), n * n, "weights must be n x n");
        InteractionMatrix { timestamp, n, agent_order, weights, degenerate_pairs: 0 }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.weights[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.weights[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    pub fn index_of(&self, id: &AgentId) -> Option<usize> {
        self.agent_order.iter().position(|a| a == id)
    }

    /// `y = W x`
    pub fn mul_vec(&self, x: &[T], y: &mut [T]) {
        let n = self.n;
        let x = &x[..n];
        let y = &mut y[..n];
        if n >= PARALLEL_MIN {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = dot(self.row(i), x));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = dot(self.row(i), x);
            }
        }
    }

    pub fn grand_sum(&self) -> T {
        self.weights.iter().copied().sum()
    }

    pub fn column_sum(&self, j: usize) -> T {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }

    pub fn row_sum(&self, i: usize) -> T {
        self.row(i).iter().copied().sum()
    }

    /// Scale every entry of column `j` (all influence emitted by agent `j`).
    pub fn scale_column(&mut self, j: usize, factor: T) {
        for i in 0..self.n {
            let v = self.get(i, j) * factor;
            self.set(i, j, v);
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w = *w * factor);
        out
    }

    /// Largest off-diagonal entry as `(i, j, value)`.
    pub fn dominant_entry(&self) -> Option<(usize, usize, T)> {
        let mut best: Option<(usize, usize, T)> = None;
        for i in 0..self.n {
            for j in 0..self.n {
                if i == j {
                    continue;
                }
                let v = self.get(i, j);
                if best.is_none_or(|b| v > b.2) {
                    best = Some((i, j, v));
                }
            }
        }
        best
    }

    pub fn to_f64(&self) -> InteractionMatrix<f64> {
        InteractionMatrix {
            timestamp: self.timestamp.as_f64(),
            n: self.n,
            agent_order: self.agent_order.clone(),
            weights: self.weights.iter().map(|w| w.as_f64()).collect(),
            degenerate_pairs: self.degenerate_pairs,
        }
    }
}

/// Product-form weight of `j`'s influence on `i` (without occlusion).
pub fn pair_weight<T: Real>(i: &AgentMicroState<T>, j: &AgentMicroState<T>, cal: &CalibrationProfile<T>) -> (T, bool) {
    let r = i.position.dist(&j.position);
    let (gap, degenerate) = bearing_gap(i, j);
    let kr = kernel_eval(KernelKind::Proximity, r, cal.h_r);
    let kt = kernel_eval(KernelKind::Alignment, gap, cal.h_theta);
    let expressivity = T::one() + cal.beta_e * j.gesture;
    (cal.alpha_w * kr * kt * expressivity * j.confidence, degenerate)
}

/// Build W(t) for a validated frame. Line of sight through a scene obstacle
/// zeroes the pair when `cal.occlusion` is set.
pub fn build_interaction_matrix<T: Real>(
    frame: &ValidatedFrame<T>,
    scene: &Scene<T>,
    cal: &CalibrationProfile<T>,
) -> Result<InteractionMatrix<T>, GraphError> {
    let agents = frame.agents();
    let n = agents.len();
    if n == 0 {
        return Err(GraphError::Empty);
    }
    let check_occlusion = cal.occlusion && !scene.obstacles.is_empty();
    let heading: Vec<(T, T)> = agents.iter().map(|a| (a.orientation.cos(), a.orientation.sin())).collect();
    let emit: Vec<T> = agents.iter().map(|a| cal.alpha_w * (T::one() + cal.beta_e * a.gesture) * a.confidence).collect();
    let two = T::lit(2.0);
    let ar = T::one() / (two * cal.h_r * cal.h_r);
    let at = T::one() / (two * cal.h_theta * cal.h_theta);
    let fill = |i: usize, row: &mut [T]| -> usize {
        let ai = &agents[i];
        let (c, s) = heading[i];
        let mut degenerate = 0;
        for (j, aj) in agents.iter().enumerate() {
            if i == j {
                row[j] = T::zero();
                continue;
            }
            let dx = aj.position.x() - ai.position.x();
            let dy = aj.position.y() - ai.position.y();
            let gap = if dx == T::zero() && dy == T::zero() {
                degenerate += 1;
                T::zero()
            } else {
                gap_from(c, s, dx, dy)
            };
            let w = emit[j] * (-(dx * dx + dy * dy) * ar - gap * gap * at).exp();
            let visible = !check_occlusion || !scene.occluded(&ai.position, &aj.position);
            row[j] = if visible { w } else { T::zero() };
        }
        degenerate
    };
    let mut weights = vec![T::zero(); n * n];
    let degenerate = if n >= PARALLEL_MIN {
        weights.par_chunks_mut(n).enumerate().map(|(i, row)| fill(i, row)).sum()
    } else {
        weights.chunks_mut(n).enumerate().map(|(i, row)| fill(i, row)).sum()
    };
    Ok(InteractionMatrix {
        timestamp: frame.timestamp(),
        n,
        agent_order: agents.iter().map(|a| a.agent_id.clone()).collect(),
        weights,
        degenerate_pairs: degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummaries<T> {
    /// column sums: how strongly the others attend to each agent
    pub in_strength: Vec<T>,
    /// row sums: how strongly each agent attends to the others
    pub out_strength: Vec<T>,
    pub total: T,
}

pub fn graph_summaries<T: Real>(w: &InteractionMatrix<T>) -> GraphSummaries<T> {
    GraphSummaries {
        in_strength: (0..w.n).map(|j| w.column_sum(j)).collect(),
        out_strength: (0..w.n).map(|i| w.row_sum(i)).collect(),
        total: w.grand_sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_frame, MicroStateFrame, Vec2};
    use crate::synthetic::golden_frame;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn agent(id: u32, x: f64, y: f64, theta: f64, e: f64, c: f64) -> AgentMicroState<f64> {
        AgentMicroState {
            agent_id: id.into(),
            position: Vec2::new(x, y),
            velocity: Vec2::zero(),
            orientation: theta,
            gesture: e,
            proxemic: 0.0,
            confidence: c,
            role_label: None,
        }
    }

    fn build(agents: Vec<AgentMicroState<f64>>) -> InteractionMatrix<f64> {
        let scene = Scene::room("r", 100.0, 100.0, 1.0);
        let f = MicroStateFrame { timestamp: 0.0, agents, scene_ref: String::new() };
        let v = validate_frame(&f, &scene, None).unwrap();
        build_interaction_matrix(&v, &scene, &CalibrationProfile::negotiation()).unwrap()
    }

    #[test]
    fn bearing_gap_examples() {
        let a2 = agent(2, 4.0, 3.8, PI, 1.8, 0.96);
        let a1 = agent(1, 1.5, 2.5, 0.0, 3.2, 0.94);
        let a5 = agent(5, 4.0, 1.2, PI / 6.0, 0.6, 0.95);
        assert!((bearing_gap(&a2, &a1).0 - 0.4795).abs() < 1e-3);
        assert!((bearing_gap(&a2, &a5).0 - std::f64::consts::FRAC_PI_2).abs() < 1e-3);
        let facing = agent(9, 0.0, 0.0, 0.3, 0.0, 1.0);
        let target = agent(8, 0.3f64.cos(), 0.3f64.sin(), 0.0, 0.0, 1.0);
        assert!(bearing_gap(&facing, &target).0 < 1e-12);
        let same = agent(7, 0.0, 0.0, 1.0, 0.0, 1.0);
        assert_eq!(bearing_gap(&facing, &same), (0.0, true));
    }

    #[test]
    fn kernel_examples() {
        assert!((kernel_eval(KernelKind::Proximity, 2.82f64, 2.50) - 0.530).abs() < 1e-3);
        assert!((kernel_eval(KernelKind::Proximity, 2.6f64, 2.50) - 0.582).abs() < 5e-4);
        assert_eq!(kernel_eval(KernelKind::Alignment, 0.0, 0.3), 1.0);
        assert!((kernel_eval(KernelKind::Alignment, 1.571f64, 1.047) - 0.325).abs() < 1e-3);
    }

    #[test]
    fn kernel_bandwidths_invert_reference_factors() {
        // h = x / sqrt(2 ln(1/K)) for each printed (x, K) pair
        let invert = |x: f64, k: f64| x / (2.0 * (1.0 / k).ln()).sqrt();
        assert!((invert(2.82, 0.530) - 2.50).abs() < 0.01);
        assert!((invert(2.6, 0.582) - 2.50).abs() < 0.02);
        assert!((invert(0.47, 0.904) - 1.047).abs() < 0.005);
        assert!((invert(PI / 2.0, 0.325) - 1.047).abs() < 0.005);
    }

    #[test]
    fn golden_anchor_entries() {
        let w = build(golden_frame().agents().to_vec());
        assert!((w.get(1, 0) - 1.167).abs() < 0.01, "{}", w.get(1, 0));
        assert!((w.get(1, 4) - 0.234).abs() < 0.01, "{}", w.get(1, 4));
        assert!(w.get(4, 1) > w.get(1, 4));
        for i in 0..7 {
            assert_eq!(w.get(i, i), 0.0);
        }
    }

    #[test]
    fn single_agent_is_zero_matrix_and_empty_is_error() {
        let w = build(vec![agent(1, 1.0, 1.0, 0.0, 1.0, 1.0)]);
        assert_eq!(w.weights, vec![0.0]);
        let scene = Scene::room("r", 10.0, 10.0, 1.0);
        let f = MicroStateFrame::<f64> { timestamp: 0.0, agents: vec![], scene_ref: String::new() };
        let v = validate_frame(&f, &scene, None).unwrap();
        assert_eq!(build_interaction_matrix(&v, &scene, &CalibrationProfile::negotiation()), Err(GraphError::Empty));
    }

    #[test]
    fn mirrored_back_to_back_pair_is_symmetric() {
        let h = 2.5;
        let w = build(vec![agent(1, 0.0, 0.0, PI, 0.0, 1.0), agent(2, h, 0.0, 0.0, 0.0, 1.0)]);
        let expected = (-0.5f64).exp() * (-(PI * PI) / (2.0 * 1.047 * 1.047)).exp();
        assert!((w.get(0, 1) - expected).abs() < 1e-12);
        assert!((w.get(1, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn summaries() {
        let w = build(vec![agent(1, 1.0, 1.0, 0.0, 1.0, 1.0)]);
        let s = graph_summaries(&w);
        assert_eq!((s.in_strength[0], s.out_strength[0], s.total), (0.0, 0.0, 0.0));

        let mut ones = vec![1.0; 9];
        ones[0] = 0.0;
        ones[4] = 0.0;
        ones[8] = 0.0;
        let m = InteractionMatrix::from_dense(0.0, vec!["a".into(), "b".into(), "c".into()], ones);
        let s = graph_summaries(&m);
        assert!(s.in_strength.iter().chain(&s.out_strength).all(|v| *v == 2.0));
        assert_eq!(s.total, 6.0);
    }

    #[test]
    fn obstacle_blocks_influence() {
        let mut scene = Scene::room("r", 10.0, 10.0, 1.0);
        scene.obstacles.push(crate::model::Polygon(vec![
            Vec2::new(4.0, 0.0),
            Vec2::new(5.0, 0.0),
            Vec2::new(5.0, 10.0),
            Vec2::new(4.0, 10.0),
        ]));
        let f = MicroStateFrame {
            timestamp: 0.0,
            agents: vec![agent(1, 2.0, 5.0, 0.0, 1.0, 1.0), agent(2, 7.0, 5.0, PI, 1.0, 1.0), agent(3, 2.0, 7.0, 0.0, 1.0, 1.0)],
            scene_ref: String::new(),
        };
        let v = validate_frame(&f, &scene, None).unwrap();
        let mut cal = CalibrationProfile::negotiation();
        let w = build_interaction_matrix(&v, &scene, &cal).unwrap();
        assert_eq!(w.get(0, 1), 0.0);
        assert_eq!(w.get(1, 0), 0.0);
        assert!(w.get(0, 2) > 0.0);
        cal.occlusion = false;
        let w = build_interaction_matrix(&v, &scene, &cal).unwrap();
        assert!(w.get(0, 1) > 0.0);
    }

    fn arb_agents() -> impl Strategy<Value = Vec<AgentMicroState<f64>>> {
        prop::collection::vec((0.0..10.0, 0.0..10.0, -PI..PI, 0.0..4.0, 0.0..1.0), 2..7).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(k, (x, y, t, e, c))| agent(k as u32, x, y, t, e, c))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn weights_nonnegative_zero_diagonal(agents in arb_agents()) {
            let w = build(agents);
            for i in 0..w.n {
                prop_assert_eq!(w.get(i, i), 0.0);
                for j in 0..w.n { prop_assert!(w.get(i, j) >= 0.0); }
            }
        }

        #[test]
        fn distance_and_gesture_monotonicity(agents in arb_agents(), dx in 0.01..3.0f64, de in 0.01..2.0f64) {
            let w0 = build(agents.clone());
            // push agent 1 further away along the line from agent 0
            let mut far = agents.clone();
            let d = far[1].position.sub(&far[0].position);
            let len = d.norm();
            if len > 1e-6 {
                far[1].position = far[1].position.add(&d.scale(dx / len));
                let w1 = build(far);
                prop_assert!(w1.get(0, 1) <= w0.get(0, 1) + 1e-12);
            }
            let mut loud = agents.clone();
            loud[1].gesture += de;
            let w2 = build(loud);
            for i in 0..w0.n {
                if i != 1 { prop_assert!(w2.get(i, 1) >= w0.get(i, 1)); }
            }
        }

        #[test]
        fn confidence_scales_target_column(agents in arb_agents(), lambda in 0.0..1.0f64) {
            let w0 = build(agents.clone());
            let mut scaled = agents.clone();
            scaled[0].confidence *= lambda;
            let w1 = build(scaled.clone());
            for i in 1..w0.n {
                let expected = w0.get(i, 0) / agents[0].confidence * scaled[0].confidence;
                prop_assert!((w1.get(i, 0) - expected).abs() <= 1e-12 * (1.0 + expected));
            }
        }
    }
}
