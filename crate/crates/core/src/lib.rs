//! Simulation, Bayesian estimation and feedback control of a hidden
//! three-level telegraph process observed through per-bin photon counts.
//!
//! The hidden state is the number of atoms (0, 1 or 2) in the upper spin
//! state of a two-atom system. Each level attenuates a probe beam differently,
//! so the photon count of a time bin carries noisy information about it.
//!
//! * [`state`]: domain types and the count model `p(n|α)`
//! * [`simulator`]: exact event-driven ground truth with pulse actuation
//! * [`filter`]: per-bin Bayes update with rate-equation prior propagation
//! * [`grid`]: joint state and rate inference on a grid
//! * [`controller`]: feedback policies minimizing the Kolmogorov distance
//! * [`analytics`]: occupancies, repump sweeps, dwell and recovery times
//! * [`experiment`]: seeded ensembles and the rate-estimation protocol
//! * [`config`], [`trace_io`]: experiment files

pub mod analytics;
pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod grid;
pub mod simulator;
pub mod state;
pub mod trace_io;

pub use error::{Error, Result};
pub use state::{
    likelihood, normalize, BeliefVector, CountFamily, HiddenState, PhotonCountModel,
    PulseDirection, TraceRecord, TransitionRates,
};
