//! Python bindings: `import telegraph`.
//!
//! Beliefs cross the boundary as `(p0, p1, p2)` tuples, pulse directions as
//! the strings `"repump"` and `"depump"`.

use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use telegraph_core::analytics;
use telegraph_core::controller::{self, ControlPolicy};
use telegraph_core::dynamics::Propagation;
use telegraph_core::experiment::run_closed_loop;
use telegraph_core::filter::{self, FilterConfig, PulseProbabilities};
use telegraph_core::grid::{GridSpec, RateGrid};
use telegraph_core::simulator::{simulate as simulate_trace, SimConfig};
use telegraph_core::{
    BeliefVector, CountFamily, Error, HiddenState, PhotonCountModel, PulseDirection,
    TransitionRates,
};

type Triple = (f64, f64, f64);
type Record = (u64, u64, u8, i64);

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn belief(p: Triple) -> PyResult<BeliefVector> {
    BeliefVector::new([p.0, p.1, p.2]).map_err(err)
}

fn triple(b: BeliefVector) -> Triple {
    let [a, b, c] = b.probs();
    (a, b, c)
}

fn direction(name: &str) -> PyResult<PulseDirection> {
    match name {
        "repump" => Ok(PulseDirection::Repump),
        "depump" => Ok(PulseDirection::Depump),
        other => Err(PyValueError::new_err(format!(
            "pulse direction {other:?}: expected \"repump\" or \"depump\""
        ))),
    }
}

fn propagation(exact: bool) -> Propagation {
    if exact {
        Propagation::Exact
    } else {
        Propagation::Linearized
    }
}

fn record_tuple(r: &telegraph_core::TraceRecord) -> Record {
    (
        r.bin_index,
        r.photon_count,
        r.pulse.map_or(0, PulseDirection::code),
        r.true_state.map_or(-1, |s| s.alpha() as i64),
    )
}

/// Rates of the hidden chain in 1/s.
#[pyclass(name = "TransitionRates", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyRates(TransitionRates);

#[pymethods]
impl PyRates {
    #[new]
    #[pyo3(signature = (r21, r10, r_repump, r_depump = 0.0))]
    fn new(r21: f64, r10: f64, r_repump: f64, r_depump: f64) -> PyResult<Self> {
        TransitionRates::new(r21, r10, r_repump, r_depump)
            .map(PyRates)
            .map_err(err)
    }

    /// Probe decay with weak continuous repumping.
    #[staticmethod]
    fn measured() -> Self {
        PyRates(TransitionRates::measured())
    }

    /// Probe decay only.
    #[staticmethod]
    fn probe_only() -> Self {
        PyRates(TransitionRates::probe_only())
    }

    #[getter]
    fn r21(&self) -> f64 {
        self.0.r21
    }

    #[getter]
    fn r10(&self) -> f64 {
        self.0.r10
    }

    #[getter]
    fn r_repump(&self) -> f64 {
        self.0.r_repump
    }

    #[getter]
    fn r_depump(&self) -> f64 {
        self.0.r_depump
    }

    fn __repr__(&self) -> String {
        let r = self.0;
        format!(
            "TransitionRates(r21={}, r10={}, r_repump={}, r_depump={})",
            r.r21, r.r10, r.r_repump, r.r_depump
        )
    }
}

/// Per-state photon count distribution for one bin; `fano > 1` is over-dispersed.
#[pyclass(name = "PhotonCountModel", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyModel(PhotonCountModel);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (mean_counts, bin_time, fano = 1.0))]
    fn new(mean_counts: [f64; 3], bin_time: f64, fano: f64) -> PyResult<Self> {
        let family = if fano == 1.0 {
            CountFamily::Poisson
        } else {
            CountFamily::OverDispersed { fano }
        };
        PhotonCountModel::new(mean_counts, family, bin_time)
            .map(PyModel)
            .map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (bin_time = 1e-3))]
    fn default(bin_time: f64) -> PyResult<Self> {
        PhotonCountModel::default_for_bin_time(bin_time)
            .map(PyModel)
            .map_err(err)
    }

    #[getter]
    fn mean_counts(&self) -> [f64; 3] {
        self.0.mean_counts()
    }

    #[getter]
    fn bin_time(&self) -> f64 {
        self.0.bin_time()
    }

    #[getter]
    fn fano(&self) -> f64 {
        self.0.fano()
    }

    fn log_likelihoods(&self, n: u64) -> [f64; 3] {
        self.0.log_likelihoods(n)
    }
}

fn filter_config(
    model: &PyModel,
    rates: &PyRates,
    initial_belief: Triple,
    exact: bool,
    t_repump: f64,
    t_depump: f64,
) -> PyResult<FilterConfig> {
    let mut config = FilterConfig::new(model.0, rates.0, model.0.bin_time()).map_err(err)?;
    config.initial_belief = belief(initial_belief)?;
    config.propagation = propagation(exact);
    config.pulses = PulseProbabilities {
        repump: t_repump,
        depump: t_depump,
    };
    config.validate().map_err(err)?;
    Ok(config)
}

/// Recursive Bayes filter over the three hidden states.
#[pyclass(name = "BayesFilter")]
struct PyFilter(filter::BayesFilter);

#[pymethods]
impl PyFilter {
    #[new]
    #[pyo3(signature = (model, rates, initial_belief = (0.0, 0.0, 1.0), exact = false, t_repump = 0.5, t_depump = 0.5))]
    fn new(
        model: PyModel,
        rates: PyRates,
        initial_belief: Triple,
        exact: bool,
        t_repump: f64,
        t_depump: f64,
    ) -> PyResult<Self> {
        let config = filter_config(&model, &rates, initial_belief, exact, t_repump, t_depump)?;
        filter::BayesFilter::new(&config).map(PyFilter).map_err(err)
    }

    /// Propagates one bin and conditions on its count.
    fn step(&mut self, n: u64) -> PyResult<Triple> {
        self.0.step(n).map(triple).map_err(err)
    }

    fn apply_pulse(&mut self, direction_name: &str) -> PyResult<Triple> {
        self.0
            .apply_pulse(direction(direction_name)?)
            .map(triple)
            .map_err(err)
    }

    #[getter]
    fn belief(&self) -> Triple {
        triple(self.0.belief())
    }

    #[getter]
    fn log_evidence(&self) -> f64 {
        self.0.log_evidence()
    }
}

/// Joint posterior over hidden state and the rates `(r21, r10, r_repump)`.
#[pyclass(name = "RateGrid")]
struct PyGrid(RateGrid);

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (min = 2.0, max = 150.0, n_points = 25, initial_belief = (0.0, 0.0, 1.0), exact = false))]
    fn new(
        min: f64,
        max: f64,
        n_points: usize,
        initial_belief: Triple,
        exact: bool,
    ) -> PyResult<Self> {
        let spec = GridSpec::uniform(min, max, n_points).map_err(err)?;
        let grid = RateGrid::init_flat(spec, &belief(initial_belief)?).map_err(err)?;
        Ok(PyGrid(grid.with_propagation(propagation(exact))))
    }

    /// One-cell grid at known rates; behaves like the plain filter.
    #[staticmethod]
    #[pyo3(signature = (rates, initial_belief = (0.0, 0.0, 1.0)))]
    fn single_cell(rates: PyRates, initial_belief: Triple) -> PyResult<Self> {
        RateGrid::init_flat(GridSpec::single_cell(&rates.0), &belief(initial_belief)?)
            .map(PyGrid)
            .map_err(err)
    }

    fn update(&mut self, n: u64, model: PyModel) -> PyResult<()> {
        self.0.update(n, &model.0, model.0.bin_time()).map_err(err)
    }

    fn marginal_states(&self) -> Triple {
        triple(self.0.marginal_states())
    }

    /// `{name: (mean, rms)}` in 1/s.
    fn marginal_rates(&self) -> HashMap<&'static str, (f64, f64)> {
        self.0
            .marginal_rates()
            .as_array()
            .into_iter()
            .map(|(name, p)| (name, (p.mean, p.rms)))
            .collect()
    }

    #[pyo3(signature = (threshold = 0.10))]
    fn stopping_check(&self, threshold: f64) -> PyResult<bool> {
        self.0.stopping_check(threshold).map_err(err)
    }
}

fn sim_config(
    model: &PyModel,
    rates: &PyRates,
    n_bins: usize,
    seed: u64,
    initial_state: i64,
) -> PyResult<SimConfig> {
    let config = SimConfig {
        rates: rates.0,
        photon_model: model.0,
        bin_time: model.0.bin_time(),
        n_bins,
        initial_state: HiddenState::new(initial_state).map_err(err)?,
        rng_seed: seed,
    };
    config.validate().map_err(err)?;
    Ok(config)
}

/// Open-loop trace as `(bin_index, photon_count, pulse, true_state)` rows.
#[pyfunction]
#[pyo3(signature = (model, rates, n_bins, seed, initial_state = 2))]
fn simulate(
    model: PyModel,
    rates: PyRates,
    n_bins: usize,
    seed: u64,
    initial_state: i64,
) -> PyResult<Vec<Record>> {
    let trace = simulate_trace(
        &sim_config(&model, &rates, n_bins, seed, initial_state)?,
        None,
    )
    .map_err(err)?;
    Ok(trace.records.iter().map(record_tuple).collect())
}

/// Posterior after every count.
#[pyfunction]
#[pyo3(signature = (counts, model, rates, initial_belief = (0.0, 0.0, 1.0), exact = false))]
fn run_filter(
    counts: Vec<u64>,
    model: PyModel,
    rates: PyRates,
    initial_belief: Triple,
    exact: bool,
) -> PyResult<Vec<Triple>> {
    let config = filter_config(&model, &rates, initial_belief, exact, 0.5, 0.5)?;
    let mut f = filter::BayesFilter::new(&config).map_err(err)?;
    counts
        .into_iter()
        .map(|n| f.step(n).map(triple).map_err(err))
        .collect()
}

/// Closed-loop run; returns the trace rows and the posterior of every bin
/// before its pulse. `policy` is `"simple"` (fixed `t`) or `"optimal"`.
#[pyfunction]
#[pyo3(signature = (model, rates, n_bins, seed, policy = "simple", t = 0.4, target = (0.0, 1.0, 0.0)))]
fn run_feedback(
    model: PyModel,
    rates: PyRates,
    n_bins: usize,
    seed: u64,
    policy: &str,
    t: f64,
    target: Triple,
) -> PyResult<(Vec<Record>, Vec<Triple>)> {
    let mut p = match policy {
        "simple" => ControlPolicy::simple(t, t).map_err(err)?,
        "optimal" => ControlPolicy::optimal(),
        other => {
            return Err(PyValueError::new_err(format!(
                "policy {other:?}: expected \"simple\" or \"optimal\""
            )))
        }
    };
    p.target = belief(target)?;
    let sim = sim_config(&model, &rates, n_bins, seed, 2)?;
    let filter = FilterConfig::new(model.0, rates.0, model.0.bin_time()).map_err(err)?;
    let run = run_closed_loop(&sim, &filter, &p).map_err(err)?;
    Ok((
        run.trace.records.iter().map(record_tuple).collect(),
        run.posteriors.into_iter().map(triple).collect(),
    ))
}

/// `(r_repump, mean p1 over duration, stationary p1)` for each repump rate,
/// starting from `(0, 0, 1)`.
#[pyfunction]
#[pyo3(signature = (rates, r_values, duration = 0.3, dt = 1e-3))]
fn sweep_repump_rate(
    rates: PyRates,
    r_values: Vec<f64>,
    duration: f64,
    dt: f64,
) -> PyResult<Vec<Triple>> {
    let curve = analytics::sweep_repump_rate(&rates.0, &r_values, duration, dt).map_err(err)?;
    Ok(curve
        .points
        .iter()
        .map(|p| (p.r_repump, p.mean_p1, p.stationary_p1))
        .collect())
}

#[pyfunction]
fn stationary_p1(rates: PyRates) -> f64 {
    analytics::stationary_p1(&rates.0)
}

#[pyfunction]
fn kolmogorov_distance(p: Triple, q: Triple) -> PyResult<f64> {
    Ok(controller::kolmogorov_distance(&belief(p)?, &belief(q)?))
}

/// Column-stochastic belief transformation of one pulse, as rows.
#[pyfunction]
fn pulse_matrix(t: f64, direction_name: &str) -> PyResult<[[f64; 3]; 3]> {
    let m = controller::pulse_matrix(t, direction(direction_name)?).map_err(err)?;
    Ok([0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)])))
}

/// `(T, distance)` minimizing the distance to `target` after one pulse.
#[pyfunction]
fn optimal_pulse_probability(
    belief_now: Triple,
    target: Triple,
    direction_name: &str,
) -> PyResult<(f64, f64)> {
    Ok(controller::optimal_pulse_probability(
        &belief(belief_now)?,
        &belief(target)?,
        direction(direction_name)?,
    ))
}

#[pymodule]
fn telegraph(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyRates>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFilter>()?;
    m.add_class::<PyGrid>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_filter, m)?)?;
    m.add_function(wrap_pyfunction!(run_feedback, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_repump_rate, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_p1, m)?)?;
    m.add_function(wrap_pyfunction!(kolmogorov_distance, m)?)?;
    m.add_function(wrap_pyfunction!(pulse_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_pulse_probability, m)?)?;
    Ok(())
}
