//! Per-bin belief update: rate-equation prior, Bayes posterior from the
//! photon count, and pulse-conditioned belief transformation.

use nalgebra::Matrix3;

use crate::controller::pulse_matrix;
use crate::dynamics::{self, check_column_stochastic, Propagation};
use crate::error::{Error, Result};
use crate::state::{
    normalize, BeliefVector, PhotonCountModel, PulseDirection, TraceRecord, TransitionRates,
    N_STATES,
};

/// Posterior components below this are flushed to zero.
pub const BELIEF_FLOOR: f64 = 1e-300;

/// Per-pulse flip probabilities assumed when a record carries a pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseProbabilities {
    pub repump: f64,
    pub depump: f64,
}

impl PulseProbabilities {
    pub fn get(&self, direction: PulseDirection) -> f64 {
        match direction {
            PulseDirection::Repump => self.repump,
            PulseDirection::Depump => self.depump,
        }
    }
}

impl Default for PulseProbabilities {
    fn default() -> Self {
        PulseProbabilities {
            repump: 0.5,
            depump: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub photon_model: PhotonCountModel,
    pub rates: TransitionRates,
    pub bin_time: f64,
    pub initial_belief: BeliefVector,
    pub propagation: Propagation,
    pub pulses: PulseProbabilities,
}

impl FilterConfig {
    /// Linearized propagation from the pumped start `(0, 0, 1)`.
    pub fn new(
        photon_model: PhotonCountModel,
        rates: TransitionRates,
        bin_time: f64,
    ) -> Result<Self> {
        let config = FilterConfig {
            photon_model,
            rates,
            bin_time,
            initial_belief: BeliefVector::default(),
            propagation: Propagation::Linearized,
            pulses: PulseProbabilities::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        if !(self.bin_time.is_finite() && self.bin_time > 0.0) {
            return Err(Error::InvalidSimConfig(format!(
                "bin time {} must be > 0",
                self.bin_time
            )));
        }
        for t in [self.pulses.repump, self.pulses.depump] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidPulse(format!(
                    "transition probability {t} outside [0, 1]"
                )));
            }
        }
        if self.propagation == Propagation::Linearized {
            dynamics::check_linearization_guard(&self.rates, self.bin_time)?;
        }
        Ok(())
    }

    pub fn transition(&self) -> Result<Matrix3<f64>> {
        dynamics::transition(&self.rates, self.bin_time, self.propagation)
    }
}

/// Likelihoods scaled by the largest one over states with prior support,
/// and the log of that scale.
pub(crate) fn scaled_likelihoods(
    log_lik: [f64; N_STATES],
    support: [bool; N_STATES],
) -> ([f64; N_STATES], f64) {
    let scale = (0..N_STATES)
        .filter(|&i| support[i])
        .map(|i| log_lik[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if !scale.is_finite() {
        return ([0.0; N_STATES], scale);
    }
    (log_lik.map(|l| (l - scale).exp()), scale)
}

/// Bayes update; also returns `ln Σ_α p(n|α) p_pri(α)`.
pub(crate) fn posterior_with_evidence(
    prior: &BeliefVector,
    n: u64,
    model: &PhotonCountModel,
) -> Result<(BeliefVector, f64)> {
    let p = prior.probs();
    let (lik, scale) = scaled_likelihoods(model.log_likelihoods(n), p.map(|x| x > 0.0));
    let w = [lik[0] * p[0], lik[1] * p[1], lik[2] * p[2]];
    let total: f64 = w.iter().sum();
    let post = normalize(w)?;
    let floored = post.probs().map(|x| if x < BELIEF_FLOOR { 0.0 } else { x });
    let post = if floored == post.probs() {
        post
    } else {
        normalize(floored)?
    };
    Ok((post, scale + total.ln()))
}

/// `p_post(α) ∝ p(n|α) p_pri(α)`.
pub fn posterior_update(
    prior: &BeliefVector,
    n: u64,
    model: &PhotonCountModel,
) -> Result<BeliefVector> {
    posterior_with_evidence(prior, n, model).map(|(b, _)| b)
}

/// First-order rate-equation step `(1 + dt·G) p`.
pub fn propagate_prior(
    posterior: &BeliefVector,
    rates: &TransitionRates,
    dt: f64,
) -> Result<BeliefVector> {
    let m = dynamics::linearized_transition(rates, dt)?;
    dynamics::apply(&m, posterior)
}

/// `exp(dt·G) p`, the reference for the linearized step.
pub fn propagate_exact(posterior: &BeliefVector, rates: &TransitionRates, dt: f64) -> BeliefVector {
    let m = dynamics::exact_transition(rates, dt);
    dynamics::apply(&m, posterior).expect("stochastic matrix keeps mass")
}

pub fn apply_pulse_to_belief(belief: &BeliefVector, matrix: &Matrix3<f64>) -> Result<BeliefVector> {
    check_column_stochastic(matrix, 1e-9)?;
    dynamics::apply(matrix, belief)
}

/// Streaming filter.
///
/// `step` advances the prior by one bin, folds in the count and returns the
/// posterior; a pulse applied afterwards transforms the belief carried into
/// the next bin.
#[derive(Debug, Clone)]
pub struct BayesFilter {
    model: PhotonCountModel,
    transition: Matrix3<f64>,
    pulses: PulseProbabilities,
    belief: BeliefVector,
    log_evidence: f64,
    steps: u64,
}

impl BayesFilter {
    pub fn new(config: &FilterConfig) -> Result<Self> {
        config.validate()?;
        Ok(BayesFilter {
            model: config.photon_model,
            transition: config.transition()?,
            pulses: config.pulses,
            belief: config.initial_belief,
            log_evidence: 0.0,
            steps: 0,
        })
    }

    pub fn step(&mut self, n: u64) -> Result<BeliefVector> {
        let prior = dynamics::apply(&self.transition, &self.belief)?;
        let (post, evidence) = posterior_with_evidence(&prior, n, &self.model)?;
        self.belief = post;
        self.log_evidence += evidence;
        self.steps += 1;
        Ok(post)
    }

    pub fn apply_matrix(&mut self, matrix: &Matrix3<f64>) -> Result<BeliefVector> {
        self.belief = apply_pulse_to_belief(&self.belief, matrix)?;
        Ok(self.belief)
    }

    /// Applies the pulse matrix for `direction` with the configured probability.
    pub fn apply_pulse(&mut self, direction: PulseDirection) -> Result<BeliefVector> {
        let m = pulse_matrix(self.pulses.get(direction), direction)?;
        self.apply_matrix(&m)
    }

    /// Belief carried into the next bin.
    pub fn belief(&self) -> BeliefVector {
        self.belief
    }

    /// Sum of per-bin log predictive likelihoods so far.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Posterior belief after each record's count (before that record's pulse).
pub fn run_filter(records: &[TraceRecord], config: &FilterConfig) -> Result<Vec<BeliefVector>> {
    let mut filter = BayesFilter::new(config)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        out.push(filter.step(r.photon_count)?);
        if let Some(direction) = r.pulse {
            filter.apply_pulse(direction)?;
        }
    }
    Ok(out)
}

/// Mean per-bin log predictive likelihood of `records` under `config`.
pub fn mean_log_likelihood(records: &[TraceRecord], config: &FilterConfig) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty);
    }
    let mut filter = BayesFilter::new(config)?;
    for r in records {
        filter.step(r.photon_count)?;
        if let Some(direction) = r.pulse {
            filter.apply_pulse(direction)?;
        }
    }
    Ok(filter.log_evidence() / records.len() as f64)
}
