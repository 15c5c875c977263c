//! Rate-equation generators and one-bin transition matrices.
//!
//! Matrices act on column vectors `(p0, p1, p2)`; every column of a
//! transition matrix sums to one.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{BeliefVector, TransitionRates};

/// Upper bound on `max exit rate × dt` for the first-order propagator.
pub const LINEARIZATION_LIMIT: f64 = 0.5;

/// How the prior is advanced across one bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    /// `1 + dt·G`, the first-order rate-equation step.
    #[default]
    Linearized,
    /// `exp(dt·G)`.
    Exact,
}

/// Generator of the filter's rate equations. Depumping is not included;
/// it acts through pulses only.
pub fn generator(rates: &TransitionRates) -> Matrix3<f64> {
    let TransitionRates {
        r21,
        r10,
        r_repump: rr,
        ..
    } = *rates;
    Matrix3::new(-2.0 * rr, r10, 0.0, 2.0 * rr, -r10 - rr, r21, 0.0, rr, -r21)
}

/// Generator of the full hidden chain including continuous depumping, which
/// acts per up-atom: 2→1 at `2·r_depump`, 1→0 at `r_depump`.
pub fn full_generator(rates: &TransitionRates) -> Matrix3<f64> {
    let rd = rates.r_depump;
    let mut g = generator(rates);
    g[(1, 2)] += 2.0 * rd;
    g[(2, 2)] -= 2.0 * rd;
    g[(0, 1)] += rd;
    g[(1, 1)] -= rd;
    g
}

/// Largest total exit rate among the three states of [`generator`].
pub fn max_exit_rate(rates: &TransitionRates) -> f64 {
    (2.0 * rates.r_repump)
        .max(rates.r10 + rates.r_repump)
        .max(rates.r21)
}

pub fn check_linearization_guard(rates: &TransitionRates, dt: f64) -> Result<()> {
    let max_rate = max_exit_rate(rates);
    let product = max_rate * dt;
    if product < LINEARIZATION_LIMIT {
        Ok(())
    } else {
        Err(Error::GuardViolated {
            max_rate,
            dt,
            product,
            limit: LINEARIZATION_LIMIT,
        })
    }
}

/// `1 + dt·G`.
pub fn linearized_transition(rates: &TransitionRates, dt: f64) -> Result<Matrix3<f64>> {
    check_linearization_guard(rates, dt)?;
    Ok(Matrix3::identity() + generator(rates) * dt)
}

/// `exp(dt·G)`.
pub fn exact_transition(rates: &TransitionRates, dt: f64) -> Matrix3<f64> {
    (generator(rates) * dt).exp()
}

pub fn transition(rates: &TransitionRates, dt: f64, mode: Propagation) -> Result<Matrix3<f64>> {
    match mode {
        Propagation::Linearized => linearized_transition(rates, dt),
        Propagation::Exact => Ok(exact_transition(rates, dt)),
    }
}

/// Checks non-negativity and unit column sums to `tol`.
pub fn check_column_stochastic(m: &Matrix3<f64>, tol: f64) -> Result<()> {
    for c in 0..3 {
        let col = m.column(c);
        let sum = col.sum();
        if col.iter().any(|x| !x.is_finite() || *x < -tol) || (sum - 1.0).abs() > tol {
            return Err(Error::NotStochastic { column: c, sum });
        }
    }
    Ok(())
}

/// `m · p`, with negative round-off clipped before renormalizing.
pub(crate) fn apply(m: &Matrix3<f64>, belief: &BeliefVector) -> Result<BeliefVector> {
    let v = m * Vector3::from(belief.probs());
    crate::state::normalize([v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)])
}

/// Stationary distribution of [`generator`] from detailed balance of the
/// birth-death ladder 0 ⇄ 1 ⇄ 2. `None` when it is not unique.
pub fn stationary_distribution(rates: &TransitionRates) -> Option<BeliefVector> {
    let up0 = 2.0 * rates.r_repump;
    let up1 = rates.r_repump;
    let (down1, down2) = (rates.r10, rates.r21);
    // π1/π0 = up0/down1, π2/π1 = up1/down2
    if up0 == 0.0 {
        return if down1 > 0.0 {
            Some(BeliefVector::delta(crate::HiddenState::ZERO))
        } else {
            None
        };
    }
    if down1 == 0.0 || down2 == 0.0 {
        return None;
    }
    let w1 = up0 / down1;
    let w2 = w1 * up1 / down2;
    crate::state::normalize([1.0, w1, w2]).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_columns_sum_to_zero() {
        let rates = TransitionRates::new(35.0, 50.0, 59.0, 7.0).unwrap();
        for g in [generator(&rates), full_generator(&rates)] {
            for c in 0..3 {
                assert!(g.column(c).sum().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linearized_entries() {
        let m = linearized_transition(&TransitionRates::measured(), 1e-3).unwrap();
        assert!((m[(1, 2)] - 0.035).abs() < 1e-15);
        assert!((m[(2, 2)] - 0.965).abs() < 1e-15);
        assert!((m[(0, 0)] - (1.0 - 0.118)).abs() < 1e-15);
        check_column_stochastic(&m, 1e-15).unwrap();
    }

    #[test]
    fn guard_rejects_coarse_bins() {
        let rates = TransitionRates::measured();
        // largest exit rate is 2·r_repump = 118 s^-1
        assert!(linearized_transition(&rates, 4.2e-3).is_ok());
        assert!(matches!(
            linearized_transition(&rates, 4.3e-3),
            Err(Error::GuardViolated { .. })
        ));
        assert!(exact_transition(&rates, 10e-3).iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn stationary_matches_detailed_balance() {
        let pi = stationary_distribution(&TransitionRates::measured()).unwrap();
        let g = generator(&TransitionRates::measured());
        let r = g * Vector3::from(pi.probs());
        assert!(r.amax() < 1e-12);
        assert!((pi.probs()[1] - 0.3216).abs() < 1e-3);
    }

    #[test]
    fn stationary_without_pumping_is_ground_state() {
        let pi = stationary_distribution(&TransitionRates::probe_only()).unwrap();
        assert_eq!(pi.probs(), [1.0, 0.0, 0.0]);
        assert!(stationary_distribution(&TransitionRates::default()).is_none());
    }
}
