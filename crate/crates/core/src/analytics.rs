//! Figures of merit: mean occupancies, the passive repump-rate sweep, dwell
//! times in the target state and recovery times after leaving it.

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, Propagation};
use crate::error::{Error, Result};
use crate::state::{normalize, BeliefVector, HiddenState, TraceRecord, TransitionRates, N_STATES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySummary {
    pub mean_p: BeliefVector,
    pub n_bins: usize,
    pub n_traces: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwellStats {
    /// Mean duration of completed dwell episodes, seconds.
    pub tau: f64,
    pub stderr: f64,
    pub n_episodes: usize,
    /// Episodes touching a trace boundary, excluded from `tau`.
    pub n_truncated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeToTarget {
    /// Mean time from losing target dominance (or trace start) to regaining it, seconds.
    pub mean: f64,
    pub n_episodes: usize,
}

/// Iterates the rate equations from `p0`; element `i` is the state at
/// `(i + 1)·dt`, one entry per bin.
pub fn integrate_rate_equations(
    p0: &BeliefVector,
    rates: &TransitionRates,
    duration: f64,
    dt: f64,
    mode: Propagation,
) -> Result<Vec<BeliefVector>> {
    if !(duration > 0.0 && dt > 0.0) {
        return Err(Error::InvalidSimConfig(format!(
            "duration {duration} and dt {dt} must be > 0"
        )));
    }
    let m = dynamics::transition(rates, dt, mode)?;
    let steps = (duration / dt).round() as usize;
    let mut p = *p0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        p = dynamics::apply(&m, &p)?;
        out.push(p);
    }
    Ok(out)
}

pub fn trajectory_mean(trajectory: &[BeliefVector]) -> Result<BeliefVector> {
    if trajectory.is_empty() {
        return Err(Error::Empty);
    }
    let mut acc = [0.0; N_STATES];
    for b in trajectory {
        for (a, p) in acc.iter_mut().zip(b.probs()) {
            *a += p;
        }
    }
    normalize(acc)
}

/// `p1 = 1 / (1 + r10/(2 r_repump) + r_repump/r21)`.
pub fn stationary_p1(rates: &TransitionRates) -> f64 {
    dynamics::stationary_distribution(rates)
        .map(|p| p.probs()[1])
        .unwrap_or(0.0)
}

/// Repump rate `sqrt(r10·r21/2)` maximizing the stationary `p1`, and that maximum.
pub fn optimal_stationary_repump(r10: f64, r21: f64) -> (f64, f64) {
    let r = (r10 * r21 / 2.0).sqrt();
    let p1 = 1.0 / (1.0 + r10 / (2.0 * r) + r / r21);
    (r, p1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub r_repump: f64,
    /// Mean `p1` over a finite trace started in α = 2.
    pub mean_p1: f64,
    pub stationary_p1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    /// Point with the largest finite-trace mean.
    pub best: SweepPoint,
    pub stationary_optimum_rate: f64,
    pub stationary_optimum_p1: f64,
}

/// Mean `p1` of the rate equations from `(0, 0, 1)` over `duration` for each
/// repump rate.
pub fn sweep_repump_rate(
    rates_base: &TransitionRates,
    r_values: &[f64],
    duration: f64,
    dt: f64,
) -> Result<SweepCurve> {
    if r_values.is_empty() {
        return Err(Error::Empty);
    }
    let start = BeliefVector::delta(HiddenState::TWO);
    let points = r_values
        .iter()
        .map(|&r| {
            let rates = TransitionRates {
                r_repump: r,
                ..*rates_base
            };
            rates.validate()?;
            let traj =
                integrate_rate_equations(&start, &rates, duration, dt, Propagation::Linearized)?;
            Ok(SweepPoint {
                r_repump: r,
                mean_p1: trajectory_mean(&traj)?.probs()[1],
                stationary_p1: stationary_p1(&rates),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = *points
        .iter()
        .max_by(|a, b| a.mean_p1.total_cmp(&b.mean_p1))
        .expect("non-empty");
    let (rate, p1) = optimal_stationary_repump(rates_base.r10, rates_base.r21);
    Ok(SweepCurve {
        points,
        best,
        stationary_optimum_rate: rate,
        stationary_optimum_p1: p1,
    })
}

/// Time and ensemble average, every bin weighted equally.
pub fn mean_occupancy<T: AsRef<[BeliefVector]>>(traces: &[T]) -> Result<OccupancySummary> {
    let mut acc = [0.0; N_STATES];
    let mut n_bins = 0;
    for t in traces {
        for b in t.as_ref() {
            for (a, p) in acc.iter_mut().zip(b.probs()) {
                *a += p;
            }
            n_bins += 1;
        }
    }
    if n_bins == 0 {
        return Err(Error::Empty);
    }
    Ok(OccupancySummary {
        mean_p: normalize(acc.map(|a| a / n_bins as f64))?,
        n_bins,
        n_traces: traces.len(),
    })
}

/// Maximal runs of bins in which `target` dominates the belief.
pub fn dwell_time<T: AsRef<[BeliefVector]>>(
    traces: &[T],
    target: HiddenState,
    bin_time: f64,
) -> Result<DwellStats> {
    if traces.is_empty() {
        return Err(Error::Empty);
    }
    let mut lengths = Vec::new();
    let mut truncated = 0;
    for t in traces {
        let t = t.as_ref();
        let mut i = 0;
        while i < t.len() {
            if !t[i].is_dominated_by(target) {
                i += 1;
                continue;
            }
            let start = i;
            while i < t.len() && t[i].is_dominated_by(target) {
                i += 1;
            }
            if start == 0 || i == t.len() {
                truncated += 1;
            } else {
                lengths.push((i - start) as f64 * bin_time);
            }
        }
    }
    if lengths.is_empty() {
        if truncated == 0 {
            return Err(Error::NoEpisodes);
        }
        return Ok(DwellStats {
            tau: 0.0,
            stderr: 0.0,
            n_episodes: 0,
            n_truncated: truncated,
        });
    }
    let (tau, stderr) = mean_and_stderr(&lengths);
    Ok(DwellStats {
        tau,
        stderr,
        n_episodes: lengths.len(),
        n_truncated: truncated,
    })
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Recovery times into target dominance.
///
/// An episode starts at the trace start or at the first bin whose belief is
/// not dominated by `target`, and ends at the next bin where it is; its
/// length is the number of bins between the two. Episodes open at the end of
/// a trace are dropped.
pub fn time_to_target<T: AsRef<[BeliefVector]>>(
    traces: &[T],
    target: HiddenState,
    bin_time: f64,
) -> Result<TimeToTarget> {
    if traces.is_empty() {
        return Err(Error::Empty);
    }
    let mut lengths = Vec::new();
    for (k, t) in traces.iter().enumerate() {
        let t = t.as_ref();
        let mut outside_since: Option<i64> = Some(-1);
        let mut reached = false;
        for (i, b) in t.iter().enumerate() {
            let i = i as i64;
            if b.is_dominated_by(target) {
                reached = true;
                if let Some(s) = outside_since.take() {
                    lengths.push((i - s) as f64 * bin_time);
                }
            } else if outside_since.is_none() {
                outside_since = Some(i);
            }
        }
        if !reached {
            return Err(Error::NeverReached { trace: k });
        }
    }
    let (mean, _) = mean_and_stderr(&lengths);
    Ok(TimeToTarget {
        mean,
        n_episodes: lengths.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample Kolmogorov-Smirnov test against an exponential with `mean`.
pub fn ks_exponential(samples: &[f64], mean: f64) -> Result<KsTest> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let cdf = 1.0 - (-x / mean).exp();
        d = d.max((i + 1) as f64 / n - cdf).max(cdf - i as f64 / n);
    }
    Ok(KsTest {
        statistic: d,
        p_value: kolmogorov_survival((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d),
        n: xs.len(),
    })
}

/// `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2k²λ²)`.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `hist[n]` = number of bins with `n` photons.
pub fn count_histogram<'a>(records: impl IntoIterator<Item = &'a TraceRecord>) -> Vec<u64> {
    let mut hist = Vec::new();
    for r in records {
        let n = r.photon_count as usize;
        if hist.len() <= n {
            hist.resize(n + 1, 0);
        }
        hist[n] += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(s: HiddenState) -> BeliefVector {
        BeliefVector::delta(s)
    }

    fn b(p: [f64; 3]) -> BeliefVector {
        BeliefVector::new(p).unwrap()
    }

    #[test]
    fn frozen_rates_constant_trajectory() {
        let start = b([0.2, 0.3, 0.5]);
        let traj = integrate_rate_equations(
            &start,
            &TransitionRates::default(),
            0.05,
            1e-3,
            Propagation::Linearized,
        )
        .unwrap();
        assert_eq!(traj.len(), 50);
        assert!(traj.iter().all(|p| *p == start));
    }

    #[test]
    fn long_run_reaches_stationary() {
        let traj = integrate_rate_equations(
            &delta(HiddenState::TWO),
            &TransitionRates::measured(),
            5.0,
            1e-3,
            Propagation::Linearized,
        )
        .unwrap();
        let last = traj.last().unwrap().probs();
        let pi = dynamics::stationary_distribution(&TransitionRates::measured())
            .unwrap()
            .probs();
        for k in 0..3 {
            assert!((last[k] - pi[k]).abs() < 1e-10);
        }
        assert!((last[1] - 0.322).abs() < 1e-3);
    }

    #[test]
    fn sweep_without_repumping_is_small() {
        let curve =
            sweep_repump_rate(&TransitionRates::measured(), &[0.0, 29.6], 0.3, 1e-3).unwrap();
        assert!(curve.points[0].mean_p1 < 0.25);
        assert!(curve.points[0].mean_p1 < curve.points[1].mean_p1);
        assert_eq!(curve.points[0].stationary_p1, 0.0);
    }

    #[test]
    fn stationary_optimum_closed_form() {
        let (r, p1) = optimal_stationary_repump(50.0, 35.0);
        assert!((r - 29.5804).abs() < 1e-4);
        // brute-force maximization of the stationary p1 over a fine rate scan
        let (mut best_r, mut best_p) = (0.0, 0.0);
        for i in 1..200_000 {
            let rr = i as f64 * 1e-3;
            let p = stationary_p1(&TransitionRates {
                r_repump: rr,
                ..TransitionRates::measured()
            });
            if p > best_p {
                best_r = rr;
                best_p = p;
            }
        }
        assert!((best_r - r).abs() < 2e-3);
        assert!((best_p - p1).abs() < 1e-9);
    }

    #[test]
    fn constant_trace_occupancy() {
        let traces = vec![vec![delta(HiddenState::ONE); 30]];
        let s = mean_occupancy(&traces).unwrap();
        assert_eq!(s.mean_p.probs(), [0.0, 1.0, 0.0]);
        assert_eq!((s.n_bins, s.n_traces), (30, 1));
        let empty: Vec<Vec<BeliefVector>> = vec![];
        assert_eq!(mean_occupancy(&empty).err(), Some(Error::Empty));
    }

    #[test]
    fn dwell_segmentation() {
        let one = delta(HiddenState::ONE);
        let zero = delta(HiddenState::ZERO);
        let always = vec![vec![one; 10]];
        let s = dwell_time(&always, HiddenState::ONE, 1e-3).unwrap();
        assert_eq!((s.n_episodes, s.n_truncated), (0, 1));

        let never = vec![vec![zero; 10]];
        assert_eq!(
            dwell_time(&never, HiddenState::ONE, 1e-3).err(),
            Some(Error::NoEpisodes)
        );

        // runs: [one x3 truncated] zero [one x2] zero zero [one x4] zero
        let mut t = vec![one, one, one, zero, one, one, zero, zero];
        t.extend([one; 4]);
        t.push(zero);
        let s = dwell_time(&[t], HiddenState::ONE, 1e-3).unwrap();
        assert_eq!((s.n_episodes, s.n_truncated), (2, 1));
        assert!((s.tau - 3e-3).abs() < 1e-15);
    }

    #[test]
    fn recovery_episodes() {
        let one = delta(HiddenState::ONE);
        let zero = delta(HiddenState::ZERO);
        let two = delta(HiddenState::TWO);
        let first = vec![vec![one, one]];
        let r = time_to_target(&first, HiddenState::ONE, 1e-3).unwrap();
        assert_eq!(r.n_episodes, 1);
        assert!((r.mean - 1e-3).abs() < 1e-15);

        // start (3 bins to reach) ... leave at bin 4, back at bin 5 (1 bin);
        // leave at 6, back at 9 (3 bins); open episode at the end is dropped
        let t = vec![two, two, one, one, zero, one, two, zero, zero, one, zero];
        let r = time_to_target(&[t], HiddenState::ONE, 1e-3).unwrap();
        assert_eq!(r.n_episodes, 3);
        assert!((r.mean - (3.0 + 1.0 + 3.0) / 3.0 * 1e-3).abs() < 1e-15);

        let stuck = vec![vec![one, one], vec![two, two]];
        assert_eq!(
            time_to_target(&stuck, HiddenState::ONE, 1e-3).err(),
            Some(Error::NeverReached { trace: 1 })
        );
    }

    #[test]
    fn ks_accepts_exponential_quantiles_and_rejects_uniform() {
        let n = 2000;
        let exp: Vec<f64> = (0..n)
            .map(|i| -0.02 * (1.0 - (i as f64 + 0.5) / n as f64).ln())
            .collect();
        let t = ks_exponential(&exp, 0.02).unwrap();
        assert!(t.statistic < 1e-3 && t.p_value > 0.99);
        let uni: Vec<f64> = (0..n).map(|i| 0.04 * i as f64 / n as f64).collect();
        assert!(ks_exponential(&uni, 0.02).unwrap().p_value < 1e-6);
    }

    #[test]
    fn kolmogorov_survival_reference_values() {
        // 1% and 5% critical values of the limiting distribution
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 2e-4);
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 2e-4);
    }

    #[test]
    fn histogram_counts() {
        let recs: Vec<TraceRecord> = [3u64, 0, 3, 1]
            .iter()
            .enumerate()
            .map(|(i, &n)| TraceRecord {
                bin_index: i as u64,
                photon_count: n,
                pulse: None,
                true_state: None,
            })
            .collect();
        assert_eq!(count_histogram(&recs), vec![1, 1, 0, 2]);
    }
}
