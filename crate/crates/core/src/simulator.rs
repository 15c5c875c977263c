//! Ground-truth telegraph traces.
//!
//! The hidden chain is simulated event by event with exponential waiting
//! times. Photon counts of a bin are drawn with the time-weighted mean of the
//! states visited during that bin. Pulses are instantaneous and act at bin
//! boundaries.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, Poisson};

use crate::dynamics::full_generator;
use crate::error::{Error, Result};
use crate::state::{
    CountFamily, HiddenState, PhotonCountModel, PulseDirection, TraceRecord, TransitionRates,
    N_STATES,
};

/// Random stream used for every simulation: ChaCha with 8 rounds, seeded
/// through `SeedableRng::seed_from_u64`.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of ensemble member `index`: SplitMix64 applied to
/// `base + (index + 1)·0x9E3779B97F4A7C15` (wrapping).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Typical experimental pulse length; pulses are modelled as instantaneous.
pub const NOMINAL_PULSE_DURATION: f64 = 1.5e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseSpec {
    pub direction: PulseDirection,
    /// Per-atom flip probability during one pulse.
    pub transition_probability: f64,
    pub nominal_duration: f64,
}

impl PulseSpec {
    pub fn new(direction: PulseDirection, transition_probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&transition_probability) {
            return Err(Error::InvalidPulse(format!(
                "transition probability {transition_probability} outside [0, 1]"
            )));
        }
        Ok(PulseSpec {
            direction,
            transition_probability,
            nominal_duration: NOMINAL_PULSE_DURATION,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub rates: TransitionRates,
    pub photon_model: PhotonCountModel,
    pub bin_time: f64,
    pub n_bins: usize,
    pub initial_state: HiddenState,
    pub rng_seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        if !(self.bin_time.is_finite() && self.bin_time > 0.0) {
            return Err(Error::InvalidSimConfig(format!(
                "bin time {} must be > 0",
                self.bin_time
            )));
        }
        if self.n_bins == 0 {
            return Err(Error::InvalidSimConfig("n_bins must be > 0".into()));
        }
        let model_bin = self.photon_model.bin_time();
        if (model_bin - self.bin_time).abs() > 1e-12 * self.bin_time.max(model_bin) {
            return Err(Error::InvalidSimConfig(format!(
                "photon model bin time {model_bin} differs from simulation bin time {}",
                self.bin_time
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

/// Receives each bin's photon count and may request a pulse at the end of
/// that bin.
pub trait Controller {
    fn on_bin(&mut self, bin_index: u64, photon_count: u64) -> Option<PulseSpec>;
}

impl<F> Controller for F
where
    F: FnMut(u64, u64) -> Option<PulseSpec>,
{
    fn on_bin(&mut self, bin_index: u64, photon_count: u64) -> Option<PulseSpec> {
        self(bin_index, photon_count)
    }
}

/// Maximal interval of constant hidden state, in seconds since trace start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub state: HiddenState,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HiddenPath {
    pub segments: Vec<Segment>,
    pub duration: f64,
}

impl HiddenPath {
    fn push(&mut self, state: HiddenState, at: f64) {
        if let Some(last) = self.segments.last_mut() {
            if last.state == state {
                return;
            }
            last.end = at;
        }
        self.segments.push(Segment {
            state,
            start: at,
            end: at,
        });
    }

    fn close(&mut self, at: f64) {
        if let Some(last) = self.segments.last_mut() {
            last.end = at;
        }
        self.duration = at;
    }

    /// Durations of completed visits to `state`; the visit still running at
    /// the end of the trace is excluded.
    pub fn completed_dwell_times(&self, state: HiddenState) -> Vec<f64> {
        self.segments
            .iter()
            .filter(|s| s.state == state && s.end < self.duration)
            .map(|s| s.end - s.start)
            .collect()
    }

    /// Total time spent in each state.
    pub fn occupancy(&self) -> [f64; N_STATES] {
        let mut occ = [0.0; N_STATES];
        for s in &self.segments {
            occ[s.state.index()] += s.end - s.start;
        }
        occ
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTrace {
    pub records: Vec<TraceRecord>,
    pub path: HiddenPath,
}

/// Off-diagonal jump rates `rate[from][to]` of the full hidden chain.
#[derive(Debug, Clone, Copy)]
struct JumpRates {
    rate: [[f64; N_STATES]; N_STATES],
    exit: [f64; N_STATES],
}

impl JumpRates {
    fn new(rates: &TransitionRates) -> Self {
        let g: Matrix3<f64> = full_generator(rates);
        let mut rate = [[0.0; N_STATES]; N_STATES];
        let mut exit = [0.0; N_STATES];
        for from in 0..N_STATES {
            for to in 0..N_STATES {
                if from != to {
                    rate[from][to] = g[(to, from)];
                    exit[from] += g[(to, from)];
                }
            }
        }
        JumpRates { rate, exit }
    }
}

/// Runs the chain for `dt`, reporting each jump as (time offset, new state).
/// Returns the final state and the time spent in each state.
fn evolve<R: Rng + ?Sized>(
    mut state: HiddenState,
    jumps: &JumpRates,
    dt: f64,
    rng: &mut R,
    mut on_jump: impl FnMut(f64, HiddenState),
) -> (HiddenState, [f64; N_STATES]) {
    let mut occupancy = [0.0; N_STATES];
    let mut t = 0.0;
    loop {
        let exit = jumps.exit[state.index()];
        if exit <= 0.0 {
            occupancy[state.index()] += dt - t;
            return (state, occupancy);
        }
        let wait: f64 = rng.sample::<f64, _>(Exp1) / exit;
        if t + wait >= dt {
            occupancy[state.index()] += dt - t;
            return (state, occupancy);
        }
        occupancy[state.index()] += wait;
        t += wait;
        let mut u = rng.random::<f64>() * exit;
        let row = &jumps.rate[state.index()];
        let mut next = state;
        for (to, r) in row.iter().enumerate() {
            if to == state.index() || *r <= 0.0 {
                continue;
            }
            next = HiddenState::ALL[to];
            if u < *r {
                break;
            }
            u -= r;
        }
        state = next;
        on_jump(t, state);
    }
}

/// Exact sample of the hidden chain after `dt`; several jumps may occur.
pub fn step_continuous<R: Rng + ?Sized>(
    state: HiddenState,
    rates: &TransitionRates,
    dt: f64,
    rng: &mut R,
) -> HiddenState {
    evolve(state, &JumpRates::new(rates), dt, rng, |_, _| {}).0
}

fn draw_count<R: Rng + ?Sized>(mean: f64, family: CountFamily, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let lambda = match family {
        CountFamily::Poisson => mean,
        CountFamily::OverDispersed { fano } => {
            // gamma-mixed Poisson = negative binomial with variance fano·mean
            let excess = fano - 1.0;
            let gamma = Gamma::new(mean / excess, excess).expect("validated gamma parameters");
            gamma.sample(rng)
        }
    };
    if lambda <= 0.0 {
        return 0;
    }
    let poisson = Poisson::new(lambda).expect("positive finite poisson mean");
    poisson.sample(rng) as u64
}

/// One draw from `p(n|state)`.
pub fn emit_photons<R: Rng + ?Sized>(
    state: HiddenState,
    model: &PhotonCountModel,
    rng: &mut R,
) -> u64 {
    draw_count(model.mean_counts()[state.index()], model.family(), rng)
}

/// One bin's count when the state changed during the bin; `fractions` are the
/// fractions of the bin spent in each state.
pub fn emit_photons_mixed<R: Rng + ?Sized>(
    fractions: [f64; N_STATES],
    model: &PhotonCountModel,
    rng: &mut R,
) -> u64 {
    let means = model.mean_counts();
    let mean: f64 = (0..N_STATES).map(|i| fractions[i] * means[i]).sum();
    draw_count(mean, model.family(), rng)
}

/// Each atom addressable by the pulse flips independently with the pulse's
/// transition probability.
pub fn apply_pulse<R: Rng + ?Sized>(
    state: HiddenState,
    pulse: &PulseSpec,
    rng: &mut R,
) -> HiddenState {
    let t = pulse.transition_probability;
    let alpha = state.alpha() as i64;
    let addressable = match pulse.direction {
        PulseDirection::Repump => 2 - alpha,
        PulseDirection::Depump => alpha,
    };
    let flips = (0..addressable).filter(|_| rng.random_bool(t)).count() as i64;
    let next = match pulse.direction {
        PulseDirection::Repump => alpha + flips,
        PulseDirection::Depump => alpha - flips,
    };
    HiddenState::ALL[next as usize]
}

/// Simulates `config.n_bins` bins. Per bin: evolve the hidden state, draw the
/// count, ask the controller, and apply its pulse at the bin boundary.
pub fn simulate(
    config: &SimConfig,
    mut controller: Option<&mut dyn Controller>,
) -> Result<SimulatedTrace> {
    config.validate()?;
    let jumps = JumpRates::new(&config.rates);
    let mut rng = rng_from_seed(config.rng_seed);
    let mut state = config.initial_state;
    let mut path = HiddenPath::default();
    path.push(state, 0.0);
    let mut records = Vec::with_capacity(config.n_bins);
    let dt = config.bin_time;

    for i in 0..config.n_bins {
        let bin_start = i as f64 * dt;
        let (end_state, occupancy) = evolve(state, &jumps, dt, &mut rng, |t, s| {
            path.push(s, bin_start + t)
        });
        state = end_state;
        let fractions = occupancy.map(|o| o / dt);
        let count = emit_photons_mixed(fractions, &config.photon_model, &mut rng);

        let pulse = controller.as_mut().and_then(|c| c.on_bin(i as u64, count));
        records.push(TraceRecord {
            bin_index: i as u64,
            photon_count: count,
            pulse: pulse.map(|p| p.direction),
            true_state: Some(state),
        });
        if let Some(p) = pulse {
            state = apply_pulse(state, &p, &mut rng);
            path.push(state, (i + 1) as f64 * dt);
        }
    }
    path.close(config.n_bins as f64 * dt);
    Ok(SimulatedTrace { records, path })
}

/// [`simulate`] without the continuous-time path.
pub fn run_trace(
    config: &SimConfig,
    controller: Option<&mut dyn Controller>,
) -> Result<Vec<TraceRecord>> {
    Ok(simulate(config, controller)?.records)
}
