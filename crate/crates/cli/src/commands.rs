use std::path::PathBuf;

use rayon::prelude::*;
use serde_json::{json, Value};
use telegraph_core::analytics::{
    count_histogram, dwell_time, mean_occupancy, sweep_repump_rate, time_to_target,
};
use telegraph_core::config::ExperimentConfig;
use telegraph_core::controller::ControlAction;
use telegraph_core::experiment::{
    estimate_rates as estimate, run_closed_loop_ensemble, simulate_ensemble, tune_fixed_t,
    RateEstimate, TUNING_GRID,
};
use telegraph_core::filter::run_filter;
use telegraph_core::grid::RatePosteriors;
use telegraph_core::simulator::derive_seed;
use telegraph_core::trace_io::{read_trace_file, withhold_truth};
use telegraph_core::{BeliefVector, HiddenState, TraceRecord};

use crate::output::{histogram_csv, trace_name, OutDir};
use crate::Failure;

/// Traces per candidate when tuning the threshold policy.
const TUNING_TRACES: usize = 20;
/// Seed stream for tuning, disjoint from the trace indices of the main run.
const TUNING_STREAM: u64 = u64::MAX;

pub fn simulate(c: &ExperimentConfig, withhold: bool) -> Result<(), Failure> {
    let sim = c.sim_config()?;
    let traces = simulate_ensemble(&sim, c.n_traces, c.seed)?;
    let mut out = OutDir::create(c)?;
    for (i, t) in traces.iter().enumerate() {
        let records = if withhold {
            withhold_truth(&t.records)
        } else {
            t.records.clone()
        };
        out.write_trace(&trace_name("trace", i), &records)?;
    }
    let hist = count_histogram(traces.iter().flat_map(|t| &t.records));
    out.write_text("histogram.csv", &histogram_csv(&hist))?;
    out.finish(
        "simulate",
        c,
        json!({ "withhold_truth": withhold, "trace_seeds": trace_seeds(c) }),
    )
}

pub fn estimate_rates(
    c: &ExperimentConfig,
    inputs: &[PathBuf],
    snapshot_every: usize,
) -> Result<(), Failure> {
    let mut config = c.estimation_config()?;
    config.snapshot_every = (snapshot_every > 0).then_some(snapshot_every);
    let mut out = OutDir::create(c)?;
    let (sources, traces) = if inputs.is_empty() {
        let sim = c.sim_config()?;
        let traces = simulate_ensemble(&sim, c.n_traces, c.seed)?;
        let mut names = Vec::new();
        for (i, t) in traces.iter().enumerate() {
            names.push(trace_name("trace", i));
            out.write_trace(&names[i], &t.records)?;
        }
        (names, traces.into_iter().map(|t| t.records).collect())
    } else {
        read_inputs(inputs)?
    };
    let estimates = traces
        .par_iter()
        .map(|records| estimate(records, &config))
        .collect::<telegraph_core::Result<Vec<RateEstimate>>>()?;

    let mut reports = Vec::new();
    let mut exhausted = Vec::new();
    for (i, (source, e)) in sources.iter().zip(&estimates).enumerate() {
        let mut csv = String::from("time_s,rate,value_per_s,probability\n");
        for snap in &e.snapshots {
            for (name, marginal) in ["r21", "r10", "r_repump"].iter().zip(&snap.marginals) {
                for (value, p) in marginal {
                    csv.push_str(&format!("{},{name},{value},{p}\n", snap.time));
                }
            }
        }
        out.write_text(&trace_name("posterior_evolution", i), &csv)?;
        if !e.converged() {
            exhausted.push(i);
            eprintln!(
                "telegraph: warning: {source}: data exhausted after {} bins; final rms/mean {}",
                e.bins_used,
                relative_summary(&e.posteriors)
            );
        }
        reports.push(json!({
            "source": source,
            "bins_used": e.bins_used,
            "converged": e.converged(),
            "stopped_at_bin": e.stopped_at_bin,
            "stopping_time_s": e.stopping_time(config.bin_time),
            "rates": rates_json(&e.posteriors),
            "final_states": e.final_states.probs(),
        }));
    }
    out.write_json(
        "summary.json",
        &json!({
            "stop_rms_ratio": config.stop_threshold,
            "n_converged": estimates.len() - exhausted.len(),
            "traces": reports,
        }),
    )?;
    out.finish("estimate-rates", c, json!({ "inputs": sources }))?;
    if exhausted.is_empty() {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!(
            "{} of {} traces ended before rms/mean <= {} for every rate",
            exhausted.len(),
            estimates.len(),
            config.stop_threshold
        )))
    }
}

pub fn feedback(c: &ExperimentConfig) -> Result<(), Failure> {
    let section = c.policy.ok_or_else(|| {
        Failure::Config("feedback needs a policy section (policy.mode = ...)".into())
    })?;
    let sim = c.sim_config()?;
    let filter = c.filter_config()?;
    let tuning = if section.needs_tuning() {
        let target = section.target()?;
        let seed = derive_seed(c.seed, TUNING_STREAM);
        Some(tune_fixed_t(
            &sim,
            &filter,
            &target,
            &TUNING_GRID,
            TUNING_TRACES,
            seed,
        )?)
    } else {
        None
    };
    let policy = section.policy(tuning.as_ref().map(|t| t.best_t))?;
    let runs = run_closed_loop_ensemble(&sim, &filter, &policy, c.n_traces, c.seed)?;

    let mut out = OutDir::create(c)?;
    for (i, run) in runs.iter().enumerate() {
        out.write_trace(&trace_name("trace", i), &run.trace.records)?;
        let mut log = String::from("bin_index,pulse,probability,p0,p1,p2\n");
        for (k, (d, p)) in run.decisions.iter().zip(&run.posteriors).enumerate() {
            let (code, t) = match d.action {
                ControlAction::None => continue,
                ControlAction::Repump(t) => (1, t),
                ControlAction::Depump(t) => (2, t),
            };
            let [p0, p1, p2] = p.probs();
            log.push_str(&format!("{k},{code},{t},{p0},{p1},{p2}\n"));
        }
        out.write_text(&trace_name("pulses", i), &log)?;
    }
    let posteriors: Vec<&[BeliefVector]> = runs.iter().map(|r| r.posteriors.as_slice()).collect();
    let target = policy.target.dominant();
    let hidden: Vec<f64> = match target {
        Some(s) => runs
            .iter()
            .flat_map(|r| r.trace.path.completed_dwell_times(s))
            .collect(),
        None => Vec::new(),
    };
    let summary = json!({
        "policy": {
            "mode": format!("{:?}", policy.mode),
            "t_repump": policy.fixed_t_repump,
            "t_depump": policy.fixed_t_depump,
            "target": policy.target.probs(),
        },
        "tuning": tuning.as_ref().map(|t| json!({ "best_t": t.best_t, "best_score": t.best_mean_p1, "curve": t.curve })),
        "occupancy": occupancy_json(&posteriors),
        "target_state": target.map(HiddenState::index),
        "belief_dwell": target.map(|s| belief_dwell_json(&posteriors, s, sim.bin_time)),
        "time_to_target": target.map(|s| time_to_target_json(&posteriors, s, sim.bin_time)),
        "hidden_dwell": {
            "mean_s": (!hidden.is_empty()).then(|| hidden.iter().sum::<f64>() / hidden.len() as f64),
            "n_episodes": hidden.len(),
        },
        "pulses": runs.iter().map(|r| r.trace.records.iter().filter(|x| x.pulse.is_some()).count()).sum::<usize>(),
    });
    out.write_json("summary.json", &summary)?;
    let tuned = tuning.map(|t| t.best_t);
    out.finish(
        "feedback",
        c,
        json!({ "tuned_t": tuned, "trace_seeds": trace_seeds(c) }),
    )
}

pub fn sweep(c: &ExperimentConfig) -> Result<(), Failure> {
    let sim = c.sim_config()?;
    let curve = sweep_repump_rate(
        &sim.rates,
        &c.sweep.r_values(),
        c.sweep.duration_ms * 1e-3,
        sim.bin_time,
    )?;
    let mut out = OutDir::create(c)?;
    let mut csv = String::from("r_repump_per_s,mean_p1,stationary_p1\n");
    for p in &curve.points {
        csv.push_str(&format!(
            "{},{},{}\n",
            p.r_repump, p.mean_p1, p.stationary_p1
        ));
    }
    out.write_text("sweep.csv", &csv)?;
    out.write_json(
        "summary.json",
        &json!({
            "duration_s": c.sweep.duration_ms * 1e-3,
            "best_r_repump_per_s": curve.best.r_repump,
            "best_mean_p1": curve.best.mean_p1,
            "stationary_optimum_r_repump_per_s": curve.stationary_optimum_rate,
            "stationary_optimum_p1": curve.stationary_optimum_p1,
        }),
    )?;
    out.finish("sweep", c, json!({}))
}

pub fn analyze(c: &ExperimentConfig, inputs: &[PathBuf]) -> Result<(), Failure> {
    let mut filter = c.filter_config()?;
    let mut target = HiddenState::ONE;
    if let Some(section) = &c.policy {
        if let Some(s) = section.target()?.dominant() {
            target = s;
        }
        if !section.needs_tuning() {
            filter.pulses = section.policy(None)?.pulse_probabilities();
        }
    }
    let (sources, traces) = read_inputs(inputs)?;
    let beliefs = traces
        .par_iter()
        .map(|records| run_filter(records, &filter))
        .collect::<telegraph_core::Result<Vec<_>>>()?;

    let mut out = OutDir::create(c)?;
    for (i, (records, bs)) in traces.iter().zip(&beliefs).enumerate() {
        let mut csv = String::from("bin_index,p0,p1,p2\n");
        for (r, b) in records.iter().zip(bs) {
            let [p0, p1, p2] = b.probs();
            csv.push_str(&format!("{},{p0},{p1},{p2}\n", r.bin_index));
        }
        out.write_text(&trace_name("beliefs", i), &csv)?;
    }
    let hist = count_histogram(traces.iter().flatten());
    out.write_text("histogram.csv", &histogram_csv(&hist))?;

    let (mut known, mut hits) = (0usize, 0usize);
    for (records, bs) in traces.iter().zip(&beliefs) {
        for (r, b) in records.iter().zip(bs) {
            if let Some(s) = r.true_state {
                known += 1;
                hits += (b.dominant() == Some(s)) as usize;
            }
        }
    }
    let views: Vec<&[BeliefVector]> = beliefs.iter().map(Vec::as_slice).collect();
    let summary = json!({
        "n_traces": traces.len(),
        "n_bins": traces.iter().map(Vec::len).sum::<usize>(),
        "occupancy": occupancy_json(&views),
        "target_state": target.index(),
        "belief_dwell": belief_dwell_json(&views, target, filter.bin_time),
        "time_to_target": time_to_target_json(&views, target, filter.bin_time),
        "argmax_accuracy": (known > 0).then(|| hits as f64 / known as f64),
        "bins_with_truth": known,
    });
    out.write_json("summary.json", &summary)?;
    out.finish("analyze", c, json!({ "inputs": sources }))
}

fn read_inputs(inputs: &[PathBuf]) -> Result<(Vec<String>, Vec<Vec<TraceRecord>>), Failure> {
    let traces = inputs
        .iter()
        .map(|p| read_trace_file(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        inputs.iter().map(|p| p.display().to_string()).collect(),
        traces,
    ))
}

fn trace_seeds(c: &ExperimentConfig) -> Vec<u64> {
    (0..c.n_traces as u64)
        .map(|i| derive_seed(c.seed, i))
        .collect()
}

fn rates_json(p: &RatePosteriors) -> Value {
    let mut m = serde_json::Map::new();
    for (name, r) in p.as_array() {
        m.insert(
            name.to_string(),
            json!({ "mean_per_s": r.mean, "rms_per_s": r.rms, "rms_over_mean": r.relative_uncertainty() }),
        );
    }
    Value::Object(m)
}

fn relative_summary(p: &RatePosteriors) -> String {
    p.as_array()
        .iter()
        .map(|(name, r)| format!("{name} {:.3}", r.relative_uncertainty()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn occupancy_json(posteriors: &[&[BeliefVector]]) -> Value {
    match mean_occupancy(posteriors) {
        Ok(s) => json!({ "mean_p": s.mean_p.probs(), "n_bins": s.n_bins, "n_traces": s.n_traces }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn belief_dwell_json(posteriors: &[&[BeliefVector]], target: HiddenState, bin_time: f64) -> Value {
    match dwell_time(posteriors, target, bin_time) {
        Ok(d) => json!({
            "tau_s": d.tau,
            "stderr_s": d.stderr,
            "n_episodes": d.n_episodes,
            "n_truncated": d.n_truncated,
        }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn time_to_target_json(
    posteriors: &[&[BeliefVector]],
    target: HiddenState,
    bin_time: f64,
) -> Value {
    match time_to_target(posteriors, target, bin_time) {
        Ok(t) => json!({ "mean_s": t.mean, "n_episodes": t.n_episodes }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}
