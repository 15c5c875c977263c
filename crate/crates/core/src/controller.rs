//! Feedback policies steering the belief towards a target distribution with
//! repumping and depumping pulses.
//!
//! The objective is the Kolmogorov (total variation) distance between the
//! target and the belief after the pulse.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{BayesFilter, FilterConfig, PulseProbabilities};
use crate::simulator::{Controller, PulseSpec};
use crate::state::{BeliefVector, HiddenState, PulseDirection, N_STATES};

/// Distances closer than this count as ties.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    #[serde(rename = "simple")]
    SimpleThreshold,
    #[serde(rename = "optimal")]
    OptimalT,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPolicy {
    pub mode: PolicyMode,
    pub fixed_t_repump: f64,
    pub fixed_t_depump: f64,
    pub target: BeliefVector,
}

impl ControlPolicy {
    pub fn simple(fixed_t_repump: f64, fixed_t_depump: f64) -> Result<Self> {
        let policy = ControlPolicy {
            mode: PolicyMode::SimpleThreshold,
            fixed_t_repump,
            fixed_t_depump,
            target: BeliefVector::delta(HiddenState::ONE),
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn optimal() -> Self {
        ControlPolicy {
            mode: PolicyMode::OptimalT,
            fixed_t_repump: 0.5,
            fixed_t_depump: 0.5,
            target: BeliefVector::delta(HiddenState::ONE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in [self.fixed_t_repump, self.fixed_t_depump] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidPolicy(format!(
                    "fixed transition probability {t} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn pulse_probabilities(&self) -> PulseProbabilities {
        PulseProbabilities {
            repump: self.fixed_t_repump,
            depump: self.fixed_t_depump,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlAction {
    None,
    Repump(f64),
    Depump(f64),
}

impl ControlAction {
    pub fn pulse(&self) -> Option<PulseSpec> {
        match *self {
            ControlAction::None => None,
            ControlAction::Repump(t) => PulseSpec::new(PulseDirection::Repump, t).ok(),
            ControlAction::Depump(t) => PulseSpec::new(PulseDirection::Depump, t).ok(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDecision {
    pub action: ControlAction,
    pub predicted_belief: BeliefVector,
    pub distance_before: f64,
    pub distance_after: f64,
}

/// `½ Σ_α |p_α − q_α|`.
pub fn kolmogorov_distance(p: &BeliefVector, q: &BeliefVector) -> f64 {
    let (p, q) = (p.probs(), q.probs());
    let d = 0.5 * (0..N_STATES).map(|i| (p[i] - q[i]).abs()).sum::<f64>();
    d.min(1.0)
}

/// Belief transformation of one pulse with per-atom flip probability `t`.
///
/// Repump columns are `((1−T)², 2T(1−T), T²)`, `(0, 1−T, T)`, `(0, 0, 1)`;
/// depump is the index-reversed mirror.
pub fn pulse_matrix(t: f64, direction: PulseDirection) -> Result<Matrix3<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidPulse(format!(
            "transition probability {t} outside [0, 1]"
        )));
    }
    let s = 1.0 - t;
    let stay = s * s;
    let both = t * t;
    let one = 1.0 - stay - both;
    let m = match direction {
        PulseDirection::Repump => Matrix3::new(stay, 0.0, 0.0, one, s, 0.0, both, t, 1.0),
        PulseDirection::Depump => Matrix3::new(1.0, t, both, 0.0, s, one, 0.0, 0.0, stay),
    };
    Ok(m)
}

/// Coefficients `[c0, c1, c2]` of each component of `M_repump(T)·b` as a
/// polynomial in `T`.
fn repump_polynomials(b: [f64; N_STATES]) -> [[f64; 3]; N_STATES] {
    let [b0, b1, b2] = b;
    [
        [b0, -2.0 * b0, b0],
        [b1, 2.0 * b0 - b1, -2.0 * b0],
        [b2, b1, b0],
    ]
}

fn pulse_polynomials(belief: &BeliefVector, direction: PulseDirection) -> [[f64; 3]; N_STATES] {
    let b = belief.probs();
    match direction {
        PulseDirection::Repump => repump_polynomials(b),
        PulseDirection::Depump => {
            let mut q = repump_polynomials([b[2], b[1], b[0]]);
            q.reverse();
            q
        }
    }
}

fn eval(c: &[f64; 3], t: f64) -> f64 {
    c[0] + t * (c[1] + t * c[2])
}

/// Roots of `c0 + c1 t + c2 t²` strictly inside (0, 1).
fn roots_in_unit_interval(c: [f64; 3], out: &mut Vec<f64>) {
    let [c0, c1, c2] = c;
    let scale = c0.abs().max(c1.abs()).max(c2.abs());
    if scale == 0.0 {
        return;
    }
    let mut push = |r: f64| {
        if r > 0.0 && r < 1.0 {
            out.push(r);
        }
    };
    if c2.abs() <= 1e-14 * scale {
        if c1.abs() > 1e-14 * scale {
            push(-c0 / c1);
        }
        return;
    }
    let disc = c1 * c1 - 4.0 * c2 * c0;
    if disc < 0.0 {
        return;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (c1 + c1.signum() * sq);
    if q != 0.0 {
        push(q / c2);
        push(c0 / q);
    } else {
        push(0.0);
    }
}

fn distance_after(target: &[f64; N_STATES], poly: &[[f64; 3]; N_STATES], t: f64) -> f64 {
    let mut q = [0.0; N_STATES];
    for i in 0..N_STATES {
        q[i] = eval(&poly[i], t).max(0.0);
    }
    let total: f64 = q.iter().sum();
    0.5 * (0..N_STATES)
        .map(|i| (target[i] - q[i] / total).abs())
        .sum::<f64>()
}

/// Pulse probability in `[0, 1]` minimizing the distance from `target` after
/// one pulse, with the smallest minimizer on ties.
///
/// Each component of `M(T)·b` is quadratic in `T`, so the distance is
/// piecewise quadratic; it is minimized exactly over the breakpoints, the
/// interval ends and the vertex of every convex piece.
pub fn optimal_pulse_probability(
    belief: &BeliefVector,
    target: &BeliefVector,
    direction: PulseDirection,
) -> (f64, f64) {
    let poly = pulse_polynomials(belief, direction);
    let tgt = target.probs();
    let diffs: Vec<[f64; 3]> = (0..N_STATES)
        .map(|i| [tgt[i] - poly[i][0], -poly[i][1], -poly[i][2]])
        .collect();

    let mut knots = vec![0.0, 1.0];
    for d in &diffs {
        roots_in_unit_interval(*d, &mut knots);
    }
    knots.sort_by(f64::total_cmp);
    knots.dedup();

    let mut candidates = knots.clone();
    for w in knots.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let mut piece = [0.0; 3];
        for d in &diffs {
            let sign = if eval(d, mid) >= 0.0 { 0.5 } else { -0.5 };
            for k in 0..3 {
                piece[k] += sign * d[k];
            }
        }
        if piece[2] > 0.0 {
            let vertex = -piece[1] / (2.0 * piece[2]);
            if vertex > w[0] && vertex < w[1] {
                candidates.push(vertex);
            }
        }
    }
    candidates.sort_by(f64::total_cmp);

    let mut best = (0.0, f64::INFINITY);
    for t in candidates {
        let k = distance_after(&tgt, &poly, t);
        if k < best.1 - TIE_TOLERANCE {
            best = (t, k);
        }
    }
    best
}

fn predicted(belief: &BeliefVector, t: f64, direction: PulseDirection) -> BeliefVector {
    let m = pulse_matrix(t, direction).expect("probability in range");
    crate::dynamics::apply(&m, belief).expect("stochastic matrix keeps mass")
}

fn no_action(belief: &BeliefVector, distance: f64) -> ControlDecision {
    ControlDecision {
        action: ControlAction::None,
        predicted_belief: *belief,
        distance_before: distance,
        distance_after: distance,
    }
}

/// Threshold rule. With target state `a` (the strict maximum of the target
/// vector), repump when the belief's strictly dominant state lies below `a`
/// and depump when it lies above, with the policy's fixed probabilities. For
/// the target `(0, 1, 0)` this is: repump iff `p0 > p1, p2`, depump iff
/// `p2 > p0, p1`. Ties, a dominant target state and zero probabilities give no
/// pulse.
pub fn decide_action_simple(belief: &BeliefVector, policy: &ControlPolicy) -> ControlDecision {
    let before = kolmogorov_distance(&policy.target, belief);
    let (Some(state), Some(goal)) = (belief.dominant(), policy.target.dominant()) else {
        return no_action(belief, before);
    };
    let (direction, t) = match state.cmp(&goal) {
        std::cmp::Ordering::Less => (PulseDirection::Repump, policy.fixed_t_repump),
        std::cmp::Ordering::Greater => (PulseDirection::Depump, policy.fixed_t_depump),
        std::cmp::Ordering::Equal => return no_action(belief, before),
    };
    if t == 0.0 {
        return no_action(belief, before);
    }
    let after_belief = predicted(belief, t, direction);
    let action = match direction {
        PulseDirection::Repump => ControlAction::Repump(t),
        PulseDirection::Depump => ControlAction::Depump(t),
    };
    ControlDecision {
        action,
        predicted_belief: after_belief,
        distance_before: before,
        distance_after: kolmogorov_distance(&policy.target, &after_belief),
    }
}

/// Best of no pulse, the optimal repump and the optimal depump. Ties prefer
/// no pulse, then repump.
pub fn decide_action_optimal(belief: &BeliefVector, policy: &ControlPolicy) -> ControlDecision {
    let before = kolmogorov_distance(&policy.target, belief);
    let mut best = no_action(belief, before);
    for direction in [PulseDirection::Repump, PulseDirection::Depump] {
        let (t, _) = optimal_pulse_probability(belief, &policy.target, direction);
        if t == 0.0 {
            continue;
        }
        let after_belief = predicted(belief, t, direction);
        let after = kolmogorov_distance(&policy.target, &after_belief);
        if after < best.distance_after - TIE_TOLERANCE {
            best = ControlDecision {
                action: match direction {
                    PulseDirection::Repump => ControlAction::Repump(t),
                    PulseDirection::Depump => ControlAction::Depump(t),
                },
                predicted_belief: after_belief,
                distance_before: before,
                distance_after: after,
            };
        }
    }
    best
}

pub fn decide(belief: &BeliefVector, policy: &ControlPolicy) -> ControlDecision {
    match policy.mode {
        PolicyMode::SimpleThreshold => decide_action_simple(belief, policy),
        PolicyMode::OptimalT => decide_action_optimal(belief, policy),
    }
}

/// Closes the loop: filter each count, decide on the posterior, and fold the
/// chosen pulse into the belief carried to the next bin.
#[derive(Debug, Clone)]
pub struct FeedbackController {
    filter: BayesFilter,
    policy: ControlPolicy,
    posteriors: Vec<BeliefVector>,
    decisions: Vec<ControlDecision>,
    error: Option<Error>,
}

impl FeedbackController {
    pub fn new(filter: &FilterConfig, policy: ControlPolicy) -> Result<Self> {
        policy.validate()?;
        let mut filter = *filter;
        filter.pulses = policy.pulse_probabilities();
        Ok(FeedbackController {
            filter: BayesFilter::new(&filter)?,
            policy,
            posteriors: Vec::new(),
            decisions: Vec::new(),
            error: None,
        })
    }

    /// Posterior of every bin seen so far, before that bin's pulse.
    pub fn posteriors(&self) -> &[BeliefVector] {
        &self.posteriors
    }

    pub fn decisions(&self) -> &[ControlDecision] {
        &self.decisions
    }

    /// First filter error, if any; the controller stops pulsing after one.
    pub fn error(&self) -> Option<&Error> {
        self.error.as_ref()
    }

    pub fn into_parts(self) -> (Vec<BeliefVector>, Vec<ControlDecision>, Option<Error>) {
        (self.posteriors, self.decisions, self.error)
    }
}

impl Controller for FeedbackController {
    fn on_bin(&mut self, _bin_index: u64, photon_count: u64) -> Option<PulseSpec> {
        if self.error.is_some() {
            return None;
        }
        let posterior = match self.filter.step(photon_count) {
            Ok(p) => p,
            Err(e) => {
                self.error = Some(e);
                return None;
            }
        };
        let decision = decide(&posterior, &self.policy);
        self.posteriors.push(posterior);
        self.decisions.push(decision);
        let pulse = decision.action.pulse()?;
        let m = pulse_matrix(pulse.transition_probability, pulse.direction).ok()?;
        if let Err(e) = self.filter.apply_matrix(&m) {
            self.error = Some(e);
        }
        Some(pulse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(p: [f64; 3]) -> BeliefVector {
        BeliefVector::new(p).unwrap()
    }

    fn target() -> BeliefVector {
        BeliefVector::delta(HiddenState::ONE)
    }

    #[test]
    fn distance_examples() {
        let p = b([0.2, 0.3, 0.5]);
        assert_eq!(kolmogorov_distance(&p, &p), 0.0);
        assert_eq!(
            kolmogorov_distance(&b([1.0, 0.0, 0.0]), &b([0.0, 0.0, 1.0])),
            1.0
        );
        assert_eq!(
            kolmogorov_distance(&b([0.5, 0.5, 0.0]), &b([0.0, 0.5, 0.5])),
            0.5
        );
    }

    #[test]
    fn pulse_matrix_examples() {
        for dir in [PulseDirection::Repump, PulseDirection::Depump] {
            assert_eq!(pulse_matrix(0.0, dir).unwrap(), Matrix3::identity());
        }
        let full = pulse_matrix(1.0, PulseDirection::Repump).unwrap();
        for c in 0..3 {
            assert_eq!(
                full.column(c).iter().copied().collect::<Vec<_>>(),
                vec![0.0, 0.0, 1.0]
            );
        }
        let half = pulse_matrix(0.5, PulseDirection::Repump).unwrap();
        assert_eq!(
            half,
            Matrix3::new(0.25, 0.0, 0.0, 0.5, 0.5, 0.0, 0.25, 0.5, 1.0)
        );
        let mirror = pulse_matrix(0.3, PulseDirection::Depump).unwrap();
        let direct = pulse_matrix(0.3, PulseDirection::Repump).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(mirror[(r, c)], direct[(2 - r, 2 - c)]);
            }
        }
        assert!(pulse_matrix(-0.1, PulseDirection::Repump).is_err());
    }

    #[test]
    fn optimal_probability_examples() {
        let (t, k) = optimal_pulse_probability(&target(), &target(), PulseDirection::Repump);
        assert_eq!((t, k), (0.0, 0.0));

        // k(T) = 1 − 2T + 2T²
        let (t, k) =
            optimal_pulse_probability(&b([1.0, 0.0, 0.0]), &target(), PulseDirection::Repump);
        assert!((t - 0.5).abs() < 1e-6 && (k - 0.5).abs() < 1e-6, "{t} {k}");

        let (t, k) =
            optimal_pulse_probability(&b([0.0, 0.0, 1.0]), &target(), PulseDirection::Depump);
        assert!((t - 0.5).abs() < 1e-6 && (k - 0.5).abs() < 1e-6, "{t} {k}");
    }

    #[test]
    fn optimal_probability_matches_dense_scan() {
        let beliefs = [
            [0.6, 0.3, 0.1],
            [0.45, 0.1, 0.45],
            [0.9, 0.05, 0.05],
            [0.2, 0.7, 0.1],
            [0.34, 0.33, 0.33],
        ];
        for p in beliefs {
            for dir in [PulseDirection::Repump, PulseDirection::Depump] {
                let belief = b(p);
                let (t, k) = optimal_pulse_probability(&belief, &target(), dir);
                let scan = (0..=100_000)
                    .map(|i| {
                        let t = i as f64 / 100_000.0;
                        let m = pulse_matrix(t, dir).unwrap();
                        let q = crate::dynamics::apply(&m, &belief).unwrap();
                        kolmogorov_distance(&target(), &q)
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(k <= scan + 1e-12, "{p:?} {dir:?}: {k} vs scan {scan}");
                assert!(k >= scan - 1e-8, "{p:?} {dir:?}: {k} vs scan {scan}");
                assert!((0.0..=1.0).contains(&t));
            }
        }
    }

    #[test]
    fn simple_policy_examples() {
        let policy = ControlPolicy::simple(0.4, 0.4).unwrap();
        let d = decide_action_simple(&b([0.6, 0.3, 0.1]), &policy);
        assert_eq!(d.action, ControlAction::Repump(0.4));
        assert!(d.distance_after <= d.distance_before);
        assert_eq!(
            decide_action_simple(&b([0.1, 0.8, 0.1]), &policy).action,
            ControlAction::None
        );
        assert_eq!(
            decide_action_simple(&BeliefVector::uniform(), &policy).action,
            ControlAction::None
        );
        assert_eq!(
            decide_action_simple(&b([0.1, 0.2, 0.7]), &policy).action,
            ControlAction::Depump(0.4)
        );
    }

    #[test]
    fn simple_policy_follows_rule_even_when_pulse_hurts() {
        // 2(1 − T) p0 < p1: repumping lowers p1, but the rule only looks at dominance
        let policy = ControlPolicy::simple(0.9, 0.9).unwrap();
        let d = decide_action_simple(&b([0.5, 0.45, 0.05]), &policy);
        assert_eq!(d.action, ControlAction::Repump(0.9));
        assert!(d.distance_after > d.distance_before);
    }

    #[test]
    fn simple_policy_other_targets() {
        let mut policy = ControlPolicy::simple(0.7, 0.0).unwrap();
        policy.target = BeliefVector::delta(HiddenState::TWO);
        assert_eq!(
            decide_action_simple(&b([0.1, 0.8, 0.1]), &policy).action,
            ControlAction::Repump(0.7)
        );
        assert_eq!(
            decide_action_simple(&b([0.1, 0.1, 0.8]), &policy).action,
            ControlAction::None
        );
        policy.target = BeliefVector::uniform();
        assert_eq!(
            decide_action_simple(&b([0.8, 0.1, 0.1]), &policy).action,
            ControlAction::None
        );
    }

    #[test]
    fn zero_probability_means_no_pulse() {
        let policy = ControlPolicy::simple(0.0, 0.0).unwrap();
        assert_eq!(
            decide_action_simple(&b([0.8, 0.1, 0.1]), &policy).action,
            ControlAction::None
        );
    }

    #[test]
    fn optimal_policy_examples() {
        let policy = ControlPolicy::optimal();
        assert_eq!(
            decide_action_optimal(&target(), &policy).action,
            ControlAction::None
        );
        match decide_action_optimal(&b([1.0, 0.0, 0.0]), &policy).action {
            ControlAction::Repump(t) => assert!((t - 0.5).abs() < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
        let sym = b([0.45, 0.10, 0.45]);
        let (tr, kr) = optimal_pulse_probability(&sym, &target(), PulseDirection::Repump);
        let (td, kd) = optimal_pulse_probability(&sym, &target(), PulseDirection::Depump);
        assert!((kr - kd).abs() < 1e-12 && (tr - td).abs() < 1e-12);
        assert!(matches!(
            decide_action_optimal(&sym, &policy).action,
            ControlAction::Repump(_)
        ));
    }

    #[test]
    fn optimal_range_for_ground_state_mixtures() {
        // optimal T for ground-state dominated beliefs stays within [0.25, 0.5]
        for p0 in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
            let belief = normalize_test([p0, 1.0 - p0, 0.0]);
            let (t, _) = optimal_pulse_probability(&belief, &target(), PulseDirection::Repump);
            assert!((0.25 - 1e-9..=0.5 + 1e-9).contains(&t), "p0 {p0}: {t}");
        }
    }

    fn normalize_test(p: [f64; 3]) -> BeliefVector {
        crate::state::normalize(p).unwrap()
    }

    fn simplex() -> impl Strategy<Value = BeliefVector> {
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)
            .prop_filter("non-zero", |(a, b, c)| a + b + c > 1e-6)
            .prop_map(|(a, b, c)| crate::state::normalize([a, b, c]).unwrap())
    }

    proptest! {
        #[test]
        fn optimal_decisions_never_increase_distance(belief in simplex(), t in 0.0f64..1.0) {
            let simple = decide_action_simple(&belief, &ControlPolicy::simple(t, t).unwrap());
            let optimal = decide_action_optimal(&belief, &ControlPolicy::optimal());
            prop_assert!(optimal.distance_after <= optimal.distance_before + 1e-15);
            prop_assert!(optimal.distance_after <= simple.distance_after + 1e-9);
        }

        #[test]
        fn repump_dominates_stochastically(belief in simplex(), t in 0.0f64..=1.0) {
            let p = belief.probs();
            let up = crate::dynamics::apply(&pulse_matrix(t, PulseDirection::Repump).unwrap(), &belief).unwrap().probs();
            let down = crate::dynamics::apply(&pulse_matrix(t, PulseDirection::Depump).unwrap(), &belief).unwrap().probs();
            // CDF over α: repump lowers it everywhere, depump raises it
            prop_assert!(up[0] <= p[0] + 1e-15);
            prop_assert!(up[0] + up[1] <= p[0] + p[1] + 1e-15);
            prop_assert!(down[0] >= p[0] - 1e-15);
            prop_assert!(down[0] + down[1] >= p[0] + p[1] - 1e-15);
        }

        #[test]
        fn simple_policy_is_stateless(belief in simplex()) {
            let policy = ControlPolicy::simple(0.5, 0.5).unwrap();
            prop_assert_eq!(decide(&belief, &policy), decide(&belief, &policy));
        }
    }
}
