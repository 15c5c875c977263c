//! Core domain types: the hidden two-atom state, belief vectors, transition
//! rates, and the per-bin photon count observation model.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const N_STATES: usize = 3;

/// Number of atoms in the spin-up state, one of 0, 1, 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HiddenState(u8);

impl HiddenState {
    pub const ZERO: HiddenState = HiddenState(0);
    pub const ONE: HiddenState = HiddenState(1);
    pub const TWO: HiddenState = HiddenState(2);
    pub const ALL: [HiddenState; N_STATES] = [Self::ZERO, Self::ONE, Self::TWO];

    pub fn new(alpha: i64) -> Result<Self> {
        match alpha {
            0..=2 => Ok(HiddenState(alpha as u8)),
            _ => Err(Error::InvalidState(alpha)),
        }
    }

    #[inline]
    pub fn alpha(self) -> u8 {
        self.0
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for HiddenState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Occupation probabilities `(p0, p1, p2)`.
///
/// Every constructor guarantees non-negative components summing to one
/// (within 1e-12 for values produced by this crate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefVector([f64; N_STATES]);

const BELIEF_INPUT_TOL: f64 = 1e-9;

impl BeliefVector {
    /// Accepts an already-normalized triple (tolerance 1e-9) and renormalizes it.
    pub fn new(p: [f64; N_STATES]) -> Result<Self> {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidBelief(p));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > BELIEF_INPUT_TOL {
            return Err(Error::InvalidBelief(p));
        }
        normalize(p)
    }

    pub fn delta(state: HiddenState) -> Self {
        let mut p = [0.0; N_STATES];
        p[state.index()] = 1.0;
        BeliefVector(p)
    }

    pub fn uniform() -> Self {
        BeliefVector([1.0 / 3.0; N_STATES])
    }

    #[inline]
    pub fn probs(&self) -> [f64; N_STATES] {
        self.0
    }

    #[inline]
    pub fn get(&self, state: HiddenState) -> f64 {
        self.0[state.index()]
    }

    /// The state whose probability strictly exceeds both others, if any.
    pub fn dominant(&self) -> Option<HiddenState> {
        let p = &self.0;
        HiddenState::ALL.into_iter().find(|s| {
            let i = s.index();
            (0..N_STATES).all(|j| j == i || p[i] > p[j])
        })
    }

    pub fn is_dominated_by(&self, state: HiddenState) -> bool {
        self.dominant() == Some(state)
    }

    pub(crate) fn from_raw_unchecked(p: [f64; N_STATES]) -> Self {
        BeliefVector(p)
    }
}

impl Default for BeliefVector {
    /// The optically pumped start, all mass on α = 2.
    fn default() -> Self {
        BeliefVector::delta(HiddenState::TWO)
    }
}

/// Scales a non-negative triple to unit sum.
///
/// Inputs already summing to one within a few ulps are returned unchanged, so
/// the operation is exactly idempotent.
pub fn normalize(v: [f64; N_STATES]) -> Result<BeliefVector> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidBelief(v));
    }
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 || !sum.is_normal() {
        return Err(Error::AllZero);
    }
    if (sum - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(BeliefVector(v));
    }
    let out = [v[0] / sum, v[1] / sum, v[2] / sum];
    Ok(BeliefVector(out))
}

/// Rates in s⁻¹ of the hidden chain.
///
/// `r21` and `r10` are the probe-induced decays α=2→1 and α=1→0; the pump
/// rates are per atom.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransitionRates {
    pub r21: f64,
    pub r10: f64,
    pub r_repump: f64,
    pub r_depump: f64,
}

impl TransitionRates {
    pub fn new(r21: f64, r10: f64, r_repump: f64, r_depump: f64) -> Result<Self> {
        let rates = TransitionRates {
            r21,
            r10,
            r_repump,
            r_depump,
        };
        rates.validate()?;
        Ok(rates)
    }

    /// Weak continuous repumping, the open-loop rate-estimation regime.
    pub fn measured() -> Self {
        TransitionRates {
            r21: 35.0,
            r10: 50.0,
            r_repump: 59.0,
            r_depump: 0.0,
        }
    }

    /// Probe-induced decay only; the closed-loop regime where pulses do the pumping.
    pub fn probe_only() -> Self {
        TransitionRates {
            r21: 35.0,
            r10: 50.0,
            r_repump: 0.0,
            r_depump: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("r21", self.r21),
            ("r10", self.r10),
            ("r_repump", self.r_repump),
            ("r_depump", self.r_depump),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidRates(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CountFamily {
    Poisson,
    /// Negative binomial with variance `fano × mean`.
    OverDispersed {
        fano: f64,
    },
}

/// Per-state photon count distributions `p(n|α)` for one bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonCountModel {
    mean_counts: [f64; N_STATES],
    family: CountFamily,
    bin_time: f64,
}

/// Empty-cavity count rate reduced by 0 %, 30 %, 60 % for α = 0, 1, 2.
pub const DEFAULT_COUNT_RATES_PER_S: [f64; N_STATES] = [40_000.0, 28_000.0, 16_000.0];

impl PhotonCountModel {
    /// Requires strictly decreasing means: more coupled atoms, less transmission.
    pub fn new(mean_counts: [f64; N_STATES], family: CountFamily, bin_time: f64) -> Result<Self> {
        let model = Self::new_unordered(mean_counts, family, bin_time)?;
        if !(mean_counts[0] > mean_counts[1] && mean_counts[1] > mean_counts[2]) {
            return Err(Error::InvalidPhotonModel(format!(
                "mean counts {mean_counts:?} must be strictly decreasing in alpha"
            )));
        }
        Ok(model)
    }

    /// Same as [`PhotonCountModel::new`] without the ordering requirement,
    /// e.g. for an uninformative model with equal means.
    pub fn new_unordered(
        mean_counts: [f64; N_STATES],
        family: CountFamily,
        bin_time: f64,
    ) -> Result<Self> {
        if mean_counts.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidPhotonModel(format!(
                "mean counts {mean_counts:?} must be finite and >= 0"
            )));
        }
        if !(bin_time.is_finite() && bin_time > 0.0) {
            return Err(Error::InvalidPhotonModel(format!(
                "bin time {bin_time} must be > 0"
            )));
        }
        if let CountFamily::OverDispersed { fano } = family {
            if !(fano.is_finite() && fano > 1.0) {
                return Err(Error::InvalidPhotonModel(format!(
                    "fano factor {fano} must be > 1"
                )));
            }
        }
        Ok(PhotonCountModel {
            mean_counts,
            family,
            bin_time,
        })
    }

    /// Model from per-state count rates in s⁻¹ scaled to `bin_time`.
    pub fn from_rates(
        rates_per_s: [f64; N_STATES],
        family: CountFamily,
        bin_time: f64,
    ) -> Result<Self> {
        let means = rates_per_s.map(|r| r * bin_time);
        Self::new(means, family, bin_time)
    }

    /// Default Poisson model (40, 28, 16 counts per ms).
    pub fn default_for_bin_time(bin_time: f64) -> Result<Self> {
        Self::from_rates(DEFAULT_COUNT_RATES_PER_S, CountFamily::Poisson, bin_time)
    }

    pub fn uninformative(mean: f64, bin_time: f64) -> Result<Self> {
        Self::new_unordered([mean; N_STATES], CountFamily::Poisson, bin_time)
    }

    /// Same per-second rates, different bin.
    pub fn rescaled(&self, bin_time: f64) -> Result<Self> {
        let k = bin_time / self.bin_time;
        Self::new_unordered(self.mean_counts.map(|m| m * k), self.family, bin_time)
    }

    pub fn mean_counts(&self) -> [f64; N_STATES] {
        self.mean_counts
    }

    pub fn family(&self) -> CountFamily {
        self.family
    }

    pub fn bin_time(&self) -> f64 {
        self.bin_time
    }

    pub fn fano(&self) -> f64 {
        match self.family {
            CountFamily::Poisson => 1.0,
            CountFamily::OverDispersed { fano } => fano,
        }
    }

    pub fn variance(&self, state: HiddenState) -> f64 {
        self.fano() * self.mean_counts[state.index()]
    }

    /// `ln p(n|α)`.
    pub fn log_likelihood(&self, n: u64, state: HiddenState) -> f64 {
        log_pmf(self.family, self.mean_counts[state.index()], n)
    }

    pub fn log_likelihoods(&self, n: u64) -> [f64; N_STATES] {
        HiddenState::ALL.map(|s| self.log_likelihood(n, s))
    }
}

/// `p(n|α)` under the configured count family.
pub fn likelihood(model: &PhotonCountModel, n: u64, state: HiddenState) -> f64 {
    model.log_likelihood(n, state).exp()
}

pub(crate) fn log_pmf(family: CountFamily, mean: f64, n: u64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let nf = n as f64;
    match family {
        CountFamily::Poisson => nf * mean.ln() - mean - ln_gamma(nf + 1.0),
        CountFamily::OverDispersed { fano } => {
            // NB(r, p) with r = mean / (fano - 1), p = 1 / fano
            let excess = fano - 1.0;
            let r = mean / excess;
            let ln_rising = if n <= 1024 {
                (0..n).map(|k| (r + k as f64).ln()).sum::<f64>()
            } else {
                ln_gamma(r + nf) - ln_gamma(r)
            };
            let ln_p = -excess.ln_1p();
            let ln_q = excess.ln() + ln_p;
            ln_rising - ln_gamma(nf + 1.0) + r * ln_p + nf * ln_q
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PulseDirection {
    Repump,
    Depump,
}

impl PulseDirection {
    /// Wire code in trace files: 1 = repump, 2 = depump.
    pub fn code(self) -> u8 {
        match self {
            PulseDirection::Repump => 1,
            PulseDirection::Depump => 2,
        }
    }
}

/// One bin of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub bin_index: u64,
    pub photon_count: u64,
    /// Pulse applied at the end of this bin.
    pub pulse: Option<PulseDirection>,
    /// Hidden state at the end of this bin, before any pulse.
    pub true_state: Option<HiddenState>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn poisson(means: [f64; 3]) -> PhotonCountModel {
        PhotonCountModel::new_unordered(means, CountFamily::Poisson, 1e-3).unwrap()
    }

    #[test]
    fn hidden_state_rejects_out_of_range() {
        assert!(HiddenState::new(3).is_err());
        assert!(HiddenState::new(-1).is_err());
        assert_eq!(HiddenState::new(2).unwrap(), HiddenState::TWO);
    }

    #[test]
    fn equal_means_give_equal_likelihoods() {
        let m = poisson([23.5; 3]);
        for n in 0..80 {
            let l = m.log_likelihoods(n);
            assert_eq!(l[0], l[1]);
            assert_eq!(l[1], l[2]);
        }
    }

    #[test]
    fn poisson_zero_count() {
        let m = poisson([40.0, 28.0, 16.0]);
        let l = likelihood(&m, 0, HiddenState::TWO);
        assert!((l - (-16.0f64).exp()).abs() < 1e-20);
    }

    #[test]
    fn poisson_mode_beats_tail() {
        // Pois_28(28) = 0.07503..., Pois_28(16) = 0.00791...
        let m = poisson([28.0, 28.0, 28.0]);
        let at_mode = likelihood(&m, 28, HiddenState::ZERO);
        let at_16 = likelihood(&m, 16, HiddenState::ZERO);
        assert!(at_mode > at_16);
        // direct product form, 28^n e^-28 / n!
        let direct = |n: u64| (1..=n).fold((-28.0f64).exp(), |acc, k| acc * 28.0 / k as f64);
        assert!((at_mode - direct(28)).abs() < 1e-14);
        assert!((at_16 - direct(16)).abs() < 1e-14);
    }

    #[test]
    fn pmf_sums_to_one() {
        for family in [
            CountFamily::Poisson,
            CountFamily::OverDispersed { fano: 2.5 },
        ] {
            let m = PhotonCountModel::new([40.0, 28.0, 16.0], family, 1e-3).unwrap();
            for s in HiddenState::ALL {
                let total: f64 = (0..600).map(|n| likelihood(&m, n, s)).sum();
                assert!((total - 1.0).abs() < 1e-9, "{family:?} {s}: {total}");
            }
        }
    }

    #[test]
    fn overdispersed_near_unit_fano_matches_poisson() {
        let p = poisson([40.0, 28.0, 16.0]);
        let nb = PhotonCountModel::new(
            [40.0, 28.0, 16.0],
            CountFamily::OverDispersed { fano: 1.0 + 1e-6 },
            1e-3,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for s in HiddenState::ALL {
            for n in 0..200 {
                worst = worst.max((likelihood(&p, n, s) - likelihood(&nb, n, s)).abs());
            }
        }
        assert!(worst < 1e-6, "max pmf difference {worst}");
    }

    #[test]
    fn overdispersed_moments() {
        let m = PhotonCountModel::new(
            [40.0, 28.0, 16.0],
            CountFamily::OverDispersed { fano: 2.0 },
            1e-3,
        )
        .unwrap();
        let (mut mean, mut second) = (0.0, 0.0);
        for n in 0..1000u64 {
            let p = likelihood(&m, n, HiddenState::ONE);
            mean += p * n as f64;
            second += p * (n * n) as f64;
        }
        assert!((mean - 28.0).abs() < 1e-8);
        assert!((second - mean * mean - 56.0).abs() < 1e-6);
    }

    #[test]
    fn zero_mean_is_degenerate() {
        let m = poisson([40.0, 28.0, 0.0]);
        assert_eq!(likelihood(&m, 0, HiddenState::TWO), 1.0);
        assert_eq!(likelihood(&m, 3, HiddenState::TWO), 0.0);
    }

    #[test]
    fn model_requires_decreasing_means() {
        assert!(PhotonCountModel::new([28.0, 40.0, 16.0], CountFamily::Poisson, 1e-3).is_err());
        assert!(PhotonCountModel::new(
            [40.0, 28.0, 16.0],
            CountFamily::OverDispersed { fano: 1.0 },
            1e-3
        )
        .is_err());
        assert!(PhotonCountModel::new([40.0, 28.0, 16.0], CountFamily::Poisson, 0.0).is_err());
    }

    #[test]
    fn rescale_keeps_rates() {
        let m = PhotonCountModel::default_for_bin_time(1e-3).unwrap();
        let r = m.rescaled(0.3e-3).unwrap();
        let got = r.mean_counts();
        for (g, want) in got.iter().zip([12.0, 8.4, 4.8]) {
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize([2.0, 2.0, 0.0]).unwrap().probs(), [0.5, 0.5, 0.0]);
        assert_eq!(normalize([0.0, 0.0, 5.0]).unwrap().probs(), [0.0, 0.0, 1.0]);
        let third = normalize([1.0, 1.0, 1.0]).unwrap().probs();
        for x in third {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(normalize([0.0, 0.0, 0.0]), Err(Error::AllZero));
        assert_eq!(normalize([1e-320, 0.0, 0.0]), Err(Error::AllZero));
    }

    #[test]
    fn dominance_requires_strict_maximum() {
        assert_eq!(BeliefVector::uniform().dominant(), None);
        let b = BeliefVector::new([0.2, 0.6, 0.2]).unwrap();
        assert_eq!(b.dominant(), Some(HiddenState::ONE));
        let tie = BeliefVector::new([0.4, 0.4, 0.2]).unwrap();
        assert_eq!(tie.dominant(), None);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(a in 0.0f64..1e6, b in 0.0f64..1e6, c in 1e-9f64..1e6) {
            let once = normalize([a, b, c]).unwrap();
            let twice = normalize(once.probs()).unwrap();
            prop_assert_eq!(once, twice);
            let sum: f64 = once.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn normalize_preserves_ratios(a in 1e-3f64..1e3, b in 1e-3f64..1e3, c in 1e-3f64..1e3) {
            let p = normalize([a, b, c]).unwrap().probs();
            prop_assert!((p[0] / p[1] - a / b).abs() <= 1e-12 * (a / b));
            prop_assert!((p[2] / p[1] - c / b).abs() <= 1e-12 * (c / b));
        }
    }
}
