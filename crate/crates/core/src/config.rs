//! Experiment configuration files.
//!
//! The format is flat `key = value` text with dotted section prefixes, a
//! subset of TOML:
//!
//! ```text
//! seed = 7
//! sim.bin_time_ms = 1.0
//! sim.rates.r10_per_s = 50.0
//! ```
//!
//! Physical quantities carry their unit in the key name. Values are stored in
//! those units, so `parse(serialize(c)) == c` holds exactly; the `*_config`
//! builders convert to SI.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::controller::{ControlPolicy, PolicyMode};
use crate::dynamics::Propagation;
use crate::error::{Error, Result};
use crate::experiment::EstimationConfig;
use crate::filter::FilterConfig;
use crate::grid::{GridSpec, RateAxis, DEFAULT_MAX_CELLS};
use crate::simulator::SimConfig;
use crate::state::{BeliefVector, CountFamily, HiddenState, PhotonCountModel, TransitionRates};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatesSection {
    pub r21_per_s: f64,
    pub r10_per_s: f64,
    pub r_repump_per_s: f64,
    pub r_depump_per_s: f64,
}

impl RatesSection {
    pub fn from_rates(r: &TransitionRates) -> Self {
        RatesSection {
            r21_per_s: r.r21,
            r10_per_s: r.r10,
            r_repump_per_s: r.r_repump,
            r_depump_per_s: r.r_depump,
        }
    }

    pub fn rates(&self) -> Result<TransitionRates> {
        TransitionRates::new(
            self.r21_per_s,
            self.r10_per_s,
            self.r_repump_per_s,
            self.r_depump_per_s,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonSection {
    /// Mean detected photons per millisecond for α = 0, 1, 2.
    pub count_rate_per_ms: [f64; 3],
    /// Variance over mean; 1 selects Poisson counts.
    pub fano: f64,
}

impl Default for PhotonSection {
    fn default() -> Self {
        PhotonSection {
            count_rate_per_ms: [40.0, 28.0, 16.0],
            fano: 1.0,
        }
    }
}

impl PhotonSection {
    pub fn model(&self, bin_time_ms: f64) -> Result<PhotonCountModel> {
        let family = if self.fano == 1.0 {
            CountFamily::Poisson
        } else {
            CountFamily::OverDispersed { fano: self.fano }
        };
        PhotonCountModel::new(
            self.count_rate_per_ms.map(|r| r * bin_time_ms),
            family,
            bin_time_ms * 1e-3,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSection {
    pub bin_time_ms: f64,
    pub n_bins: usize,
    pub initial_state: u8,
    pub rates: RatesSection,
    pub photon: PhotonSection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSection {
    pub bin_time_ms: f64,
    pub rates: RatesSection,
    pub photon: PhotonSection,
    pub initial_belief: [f64; 3],
    pub propagation: Propagation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSection {
    pub min_per_s: f64,
    pub max_per_s: f64,
    pub n_points: usize,
}

impl Default for AxisSection {
    fn default() -> Self {
        AxisSection {
            min_per_s: 2.0,
            max_per_s: 150.0,
            n_points: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSection {
    pub r21: AxisSection,
    pub r10: AxisSection,
    pub r_repump: AxisSection,
    pub max_cells: usize,
    pub stop_rms_ratio: f64,
    pub initial_state: u8,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            r21: AxisSection::default(),
            r10: AxisSection::default(),
            r_repump: AxisSection::default(),
            max_cells: DEFAULT_MAX_CELLS,
            stop_rms_ratio: 0.10,
            initial_state: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySection {
    pub mode: PolicyMode,
    /// `None` asks the harness to tune the value.
    pub t_repump: Option<f64>,
    pub t_depump: Option<f64>,
    pub target: [f64; 3],
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            mode: PolicyMode::SimpleThreshold,
            t_repump: None,
            t_depump: None,
            target: [0.0, 1.0, 0.0],
        }
    }
}

impl PolicySection {
    pub fn needs_tuning(&self) -> bool {
        self.mode == PolicyMode::SimpleThreshold
            && (self.t_repump.is_none() || self.t_depump.is_none())
    }

    pub fn target(&self) -> Result<BeliefVector> {
        BeliefVector::new(self.target)
    }

    /// Builds the policy, filling unset pulse probabilities with `tuned_t`.
    pub fn policy(&self, tuned_t: Option<f64>) -> Result<ControlPolicy> {
        let fill = |t: Option<f64>| {
            t.or(tuned_t)
                .or(if self.mode == PolicyMode::OptimalT {
                    Some(0.0)
                } else {
                    None
                })
                .ok_or_else(|| {
                    Error::Config("policy: pulse probability not set and not tuned".into())
                })
        };
        let policy = ControlPolicy {
            mode: self.mode,
            fixed_t_repump: fill(self.t_repump)?,
            fixed_t_depump: fill(self.t_depump)?,
            target: self.target()?,
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSection {
    pub r_min_per_s: f64,
    pub r_max_per_s: f64,
    pub n_points: usize,
    pub duration_ms: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            r_min_per_s: 0.0,
            r_max_per_s: 200.0,
            n_points: 201,
            duration_ms: 300.0,
        }
    }
}

impl SweepSection {
    pub fn r_values(&self) -> Vec<f64> {
        if self.n_points == 1 {
            return vec![self.r_min_per_s];
        }
        let step = (self.r_max_per_s - self.r_min_per_s) / (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| self.r_min_per_s + i as f64 * step)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_traces: usize,
    pub output_dir: PathBuf,
    /// Permit the filter to assume a photon model different from the simulator's.
    pub allow_model_mismatch: bool,
    pub sim: SimSection,
    pub filter: FilterSection,
    pub grid: Option<GridSection>,
    pub policy: Option<PolicySection>,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    /// Open-loop run at the measured rates, 300 bins of 1 ms.
    fn default() -> Self {
        let rates = RatesSection::from_rates(&TransitionRates::measured());
        ExperimentConfig {
            seed: 0,
            n_traces: 1,
            output_dir: PathBuf::from("out"),
            allow_model_mismatch: false,
            sim: SimSection {
                bin_time_ms: 1.0,
                n_bins: 300,
                initial_state: 2,
                rates,
                photon: PhotonSection::default(),
            },
            filter: FilterSection {
                bin_time_ms: 1.0,
                rates,
                photon: PhotonSection::default(),
                initial_belief: [0.0, 0.0, 1.0],
                propagation: Propagation::Linearized,
            },
            grid: None,
            policy: None,
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Closed-loop run: continuous repumping off, threshold policy with tuned T.
    pub fn feedback_default() -> Self {
        let rates = RatesSection::from_rates(&TransitionRates::probe_only());
        let mut c = ExperimentConfig {
            n_traces: 100,
            policy: Some(PolicySection::default()),
            ..ExperimentConfig::default()
        };
        c.sim.rates = rates;
        c.filter.rates = rates;
        c
    }

    /// Long open-loop traces for rate estimation on the default grid.
    pub fn estimation_default() -> Self {
        let mut c = ExperimentConfig::default();
        c.sim.n_bins = 5100;
        c.grid = Some(GridSection::default());
        c
    }

    /// Sets the bin time of simulator and filter together.
    pub fn set_bin_time_ms(&mut self, bin_time_ms: f64) {
        self.sim.bin_time_ms = bin_time_ms;
        self.filter.bin_time_ms = bin_time_ms;
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.sim;
        let config = SimConfig {
            rates: s.rates.rates()?,
            photon_model: s.photon.model(s.bin_time_ms)?,
            bin_time: s.bin_time_ms * 1e-3,
            n_bins: s.n_bins,
            initial_state: HiddenState::new(s.initial_state as i64)?,
            rng_seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn filter_config(&self) -> Result<FilterConfig> {
        let f = &self.filter;
        let mut config = FilterConfig::new(
            f.photon.model(f.bin_time_ms)?,
            f.rates.rates()?,
            f.bin_time_ms * 1e-3,
        )?;
        config.initial_belief = BeliefVector::new(f.initial_belief)?;
        config.propagation = f.propagation;
        config.validate()?;
        Ok(config)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = self.grid.unwrap_or_default();
        let axis = |a: &AxisSection| RateAxis::new(a.min_per_s, a.max_per_s, a.n_points);
        let spec = GridSpec {
            r21: axis(&g.r21)?,
            r10: axis(&g.r10)?,
            r_repump: axis(&g.r_repump)?,
            max_cells: g.max_cells,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid estimation over traces counted with the filter's photon model.
    pub fn estimation_config(&self) -> Result<EstimationConfig> {
        let g = self.grid.unwrap_or_default();
        let filter = self.filter_config()?;
        let mut config = EstimationConfig::new(filter.photon_model, filter.bin_time);
        config.grid = self.grid_spec()?;
        config.initial_states = BeliefVector::delta(HiddenState::new(g.initial_state as i64)?);
        config.propagation = filter.propagation;
        config.stop_threshold = g.stop_rms_ratio;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_traces == 0 {
            return Err(Error::Config("n_traces must be >= 1".into()));
        }
        let sim = self.sim_config().map_err(|e| section_error("sim", e))?;
        let filter = self
            .filter_config()
            .map_err(|e| section_error("filter", e))?;
        if sim.bin_time != filter.bin_time {
            return Err(Error::Config(format!(
                "sim.bin_time_ms = {} differs from filter.bin_time_ms = {}",
                self.sim.bin_time_ms, self.filter.bin_time_ms
            )));
        }
        if !self.allow_model_mismatch && self.sim.photon != self.filter.photon {
            return Err(Error::Config(
                "sim.photon and filter.photon differ; set allow_model_mismatch = true to permit"
                    .into(),
            ));
        }
        if self.grid.is_some() {
            self.estimation_config()
                .map_err(|e| section_error("grid", e))?;
        }
        if let Some(p) = &self.policy {
            p.policy(Some(0.5))
                .map_err(|e| section_error("policy", e))?;
        }
        let sw = &self.sweep;
        if !(sw.n_points >= 1
            && sw.r_min_per_s >= 0.0
            && sw.r_max_per_s >= sw.r_min_per_s
            && sw.duration_ms > 0.0)
        {
            return Err(Error::Config(
                "sweep: need n_points >= 1, 0 <= r_min_per_s <= r_max_per_s, duration_ms > 0"
                    .into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn to_text(&self) -> String {
        let mut w = Writer::default();
        // TOML integers are signed 64-bit; larger seeds are written as strings
        match i64::try_from(self.seed) {
            Ok(_) => w.int("seed", self.seed),
            Err(_) => w.string("seed", &self.seed.to_string()),
        }
        w.int("n_traces", self.n_traces as u64);
        w.string("output_dir", &self.output_dir.to_string_lossy());
        w.raw(
            "allow_model_mismatch",
            self.allow_model_mismatch.to_string(),
        );

        w.blank();
        let s = &self.sim;
        w.float("sim.bin_time_ms", s.bin_time_ms);
        w.int("sim.n_bins", s.n_bins as u64);
        w.int("sim.initial_state", s.initial_state as u64);
        w.rates("sim.rates", &s.rates);
        w.photon("sim.photon", &s.photon);

        w.blank();
        let f = &self.filter;
        w.float("filter.bin_time_ms", f.bin_time_ms);
        w.rates("filter.rates", &f.rates);
        w.photon("filter.photon", &f.photon);
        w.floats("filter.initial_belief", &f.initial_belief);
        w.string("filter.propagation", propagation_name(f.propagation));

        if let Some(g) = &self.grid {
            w.blank();
            for (name, a) in [("r21", &g.r21), ("r10", &g.r10), ("r_repump", &g.r_repump)] {
                w.float(&format!("grid.{name}.min_per_s"), a.min_per_s);
                w.float(&format!("grid.{name}.max_per_s"), a.max_per_s);
                w.int(&format!("grid.{name}.n_points"), a.n_points as u64);
            }
            w.int("grid.max_cells", g.max_cells as u64);
            w.float("grid.stop_rms_ratio", g.stop_rms_ratio);
            w.int("grid.initial_state", g.initial_state as u64);
        }

        if let Some(p) = &self.policy {
            w.blank();
            w.string("policy.mode", policy_name(p.mode));
            if let Some(t) = p.t_repump {
                w.float("policy.t_repump", t);
            }
            if let Some(t) = p.t_depump {
                w.float("policy.t_depump", t);
            }
            w.floats("policy.target", &p.target);
        }

        w.blank();
        let sw = &self.sweep;
        w.float("sweep.r_min_per_s", sw.r_min_per_s);
        w.float("sweep.r_max_per_s", sw.r_max_per_s);
        w.int("sweep.n_points", sw.n_points as u64);
        w.float("sweep.duration_ms", sw.duration_ms);
        w.0
    }

    /// Parses config text. Keys missing from the text keep their defaults
    /// from [`ExperimentConfig::default`]; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = FlatDoc::parse(text)?;
        let d = ExperimentConfig::default();
        let mut c = ExperimentConfig {
            seed: doc.uint("seed", d.seed)?,
            n_traces: doc.usize("n_traces", d.n_traces)?,
            output_dir: doc
                .string("output_dir", None)?
                .map(PathBuf::from)
                .unwrap_or(d.output_dir),
            allow_model_mismatch: doc.bool("allow_model_mismatch", d.allow_model_mismatch)?,
            sim: SimSection {
                bin_time_ms: doc.positive("sim.bin_time_ms", d.sim.bin_time_ms)?,
                n_bins: doc.usize("sim.n_bins", d.sim.n_bins)?,
                initial_state: doc.state("sim.initial_state", d.sim.initial_state)?,
                rates: doc.rates("sim.rates", &d.sim.rates)?,
                photon: doc.photon("sim.photon", &d.sim.photon)?,
            },
            filter: FilterSection {
                bin_time_ms: 0.0,
                rates: RatesSection::from_rates(&TransitionRates::default()),
                photon: PhotonSection::default(),
                initial_belief: doc.belief("filter.initial_belief", d.filter.initial_belief)?,
                propagation: match doc.choice("filter.propagation", &["linearized", "exact"])? {
                    Some("exact") => Propagation::Exact,
                    _ => Propagation::Linearized,
                },
            },
            grid: None,
            policy: None,
            sweep: SweepSection::default(),
        };
        // filter values default to the simulator's so a minimal file stays consistent
        c.filter.bin_time_ms = doc.positive("filter.bin_time_ms", c.sim.bin_time_ms)?;
        c.filter.rates = doc.rates("filter.rates", &c.sim.rates)?;
        c.filter.photon = doc.photon("filter.photon", &c.sim.photon)?;

        if doc.has_section("grid") {
            let g = GridSection::default();
            let mut axis = |name: &str, a: &AxisSection| -> Result<AxisSection> {
                Ok(AxisSection {
                    min_per_s: doc.non_negative(&format!("grid.{name}.min_per_s"), a.min_per_s)?,
                    max_per_s: doc.non_negative(&format!("grid.{name}.max_per_s"), a.max_per_s)?,
                    n_points: doc.usize(&format!("grid.{name}.n_points"), a.n_points)?,
                })
            };
            c.grid = Some(GridSection {
                r21: axis("r21", &g.r21)?,
                r10: axis("r10", &g.r10)?,
                r_repump: axis("r_repump", &g.r_repump)?,
                max_cells: doc.usize("grid.max_cells", g.max_cells)?,
                stop_rms_ratio: doc.positive("grid.stop_rms_ratio", g.stop_rms_ratio)?,
                initial_state: doc.state("grid.initial_state", g.initial_state)?,
            });
        }

        if doc.has_section("policy") {
            let p = PolicySection::default();
            let mode = match doc.choice("policy.mode", &["simple", "optimal"])? {
                Some("optimal") => PolicyMode::OptimalT,
                _ => PolicyMode::SimpleThreshold,
            };
            c.policy = Some(PolicySection {
                mode,
                t_repump: doc.probability("policy.t_repump")?,
                t_depump: doc.probability("policy.t_depump")?,
                target: doc.belief("policy.target", p.target)?,
            });
        }

        let sw = SweepSection::default();
        c.sweep = SweepSection {
            r_min_per_s: doc.non_negative("sweep.r_min_per_s", sw.r_min_per_s)?,
            r_max_per_s: doc.non_negative("sweep.r_max_per_s", sw.r_max_per_s)?,
            n_points: doc.usize("sweep.n_points", sw.n_points)?,
            duration_ms: doc.positive("sweep.duration_ms", sw.duration_ms)?,
        };

        doc.finish()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

fn section_error(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(format!("{section}: {other}")),
    }
}

fn propagation_name(p: Propagation) -> &'static str {
    match p {
        Propagation::Linearized => "linearized",
        Propagation::Exact => "exact",
    }
}

fn policy_name(m: PolicyMode) -> &'static str {
    match m {
        PolicyMode::SimpleThreshold => "simple",
        PolicyMode::OptimalT => "optimal",
    }
}

#[derive(Default)]
struct Writer(String);

impl Writer {
    fn raw(&mut self, key: &str, value: String) {
        let _ = writeln!(self.0, "{key} = {value}");
    }

    fn blank(&mut self) {
        self.0.push('\n');
    }

    fn int(&mut self, key: &str, v: u64) {
        self.raw(key, v.to_string());
    }

    // Debug keeps a trailing `.0` and prints the shortest round-tripping digits.
    fn float(&mut self, key: &str, v: f64) {
        self.raw(key, format!("{v:?}"));
    }

    fn floats(&mut self, key: &str, v: &[f64]) {
        let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        self.raw(key, format!("[{}]", items.join(", ")));
    }

    fn string(&mut self, key: &str, v: &str) {
        self.raw(key, toml::Value::String(v.to_owned()).to_string());
    }

    fn rates(&mut self, prefix: &str, r: &RatesSection) {
        self.float(&format!("{prefix}.r21_per_s"), r.r21_per_s);
        self.float(&format!("{prefix}.r10_per_s"), r.r10_per_s);
        self.float(&format!("{prefix}.r_repump_per_s"), r.r_repump_per_s);
        self.float(&format!("{prefix}.r_depump_per_s"), r.r_depump_per_s);
    }

    fn photon(&mut self, prefix: &str, p: &PhotonSection) {
        self.floats(&format!("{prefix}.count_rate_per_ms"), &p.count_rate_per_ms);
        self.float(&format!("{prefix}.fano"), p.fano);
    }
}

/// Dotted keys mapped to their value and 1-based line number.
struct FlatDoc {
    entries: BTreeMap<String, (toml::Value, usize)>,
}

impl FlatDoc {
    fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
            Error::Config(format!("line {line}: {}", e.message()))
        })?;
        let mut lines = BTreeMap::new();
        for (i, l) in text.lines().enumerate() {
            if let Some((k, _)) = l.split_once('=') {
                let k: String = k.split('.').map(str::trim).collect::<Vec<_>>().join(".");
                lines.entry(k).or_insert(i + 1);
            }
        }
        let mut entries = BTreeMap::new();
        flatten("", toml::Value::Table(table), &lines, &mut entries);
        Ok(FlatDoc { entries })
    }

    /// One of `options`, returned as the matching static string.
    fn choice(&mut self, key: &str, options: &[&'static str]) -> Result<Option<&'static str>> {
        let line = self.entries.get(key).map(|e| e.1).unwrap_or(0);
        match self.string(key, None)? {
            None => Ok(None),
            Some(v) => options
                .iter()
                .find(|o| **o == v)
                .map(|o| Some(*o))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "line {line}: {key}: unknown value '{v}', expected one of {}",
                        options.join(", ")
                    ))
                }),
        }
    }

    fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}.");
        self.entries.keys().any(|k| k.starts_with(&prefix))
    }

    fn take(&mut self, key: &str) -> Option<(toml::Value, usize)> {
        self.entries.remove(key)
    }

    fn f64_opt(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some((toml::Value::Float(x), _)) => Ok(Some(x)),
            Some((toml::Value::Integer(i), _)) => Ok(Some(i as f64)),
            Some((v, line)) => Err(Error::Config(format!(
                "line {line}: {key}: expected a number, found {v}"
            ))),
        }
    }

    fn checked(
        &mut self,
        key: &str,
        default: f64,
        ok: impl Fn(f64) -> bool,
        what: &str,
    ) -> Result<f64> {
        let line = self.entries.get(key).map(|e| e.1);
        let v = self.f64_opt(key)?.unwrap_or(default);
        if ok(v) {
            Ok(v)
        } else {
            Err(Error::Config(format!(
                "line {}: {key}: {v} must be {what}",
                line.unwrap_or(0)
            )))
        }
    }

    fn positive(&mut self, key: &str, default: f64) -> Result<f64> {
        self.checked(key, default, |v| v.is_finite() && v > 0.0, "finite and > 0")
    }

    fn non_negative(&mut self, key: &str, default: f64) -> Result<f64> {
        self.checked(
            key,
            default,
            |v| v.is_finite() && v >= 0.0,
            "finite and >= 0",
        )
    }

    fn probability(&mut self, key: &str) -> Result<Option<f64>> {
        if !self.entries.contains_key(key) {
            return Ok(None);
        }
        self.checked(key, 0.0, |v| (0.0..=1.0).contains(&v), "in [0, 1]")
            .map(Some)
    }

    fn uint(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some((toml::Value::Integer(i), _)) if i >= 0 => Ok(i as u64),
            Some((toml::Value::String(t), line)) => t.parse().map_err(|_| {
                Error::Config(format!(
                    "line {line}: {key}: '{t}' is not a non-negative integer"
                ))
            }),
            Some((v, line)) => Err(Error::Config(format!(
                "line {line}: {key}: expected a non-negative integer, found {v}"
            ))),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        self.uint(key, default as u64).map(|v| v as usize)
    }

    fn state(&mut self, key: &str, default: u8) -> Result<u8> {
        let line = self.entries.get(key).map(|e| e.1).unwrap_or(0);
        let v = self.uint(key, default as u64)?;
        if v <= 2 {
            Ok(v as u8)
        } else {
            Err(Error::Config(format!(
                "line {line}: {key}: state {v} not in 0..=2"
            )))
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some((toml::Value::Boolean(b), _)) => Ok(b),
            Some((v, line)) => Err(Error::Config(format!(
                "line {line}: {key}: expected true or false, found {v}"
            ))),
        }
    }

    fn string(&mut self, key: &str, default: Option<String>) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(default),
            Some((toml::Value::String(s), _)) => Ok(Some(s)),
            Some((v, line)) => Err(Error::Config(format!(
                "line {line}: {key}: expected a string, found {v}"
            ))),
        }
    }

    fn triple(&mut self, key: &str, default: [f64; 3]) -> Result<(Option<usize>, [f64; 3])> {
        match self.take(key) {
            None => Ok((None, default)),
            Some((toml::Value::Array(items), line)) if items.len() == 3 => {
                let mut out = [0.0; 3];
                for (o, item) in out.iter_mut().zip(&items) {
                    *o = match item {
                        toml::Value::Float(x) => *x,
                        toml::Value::Integer(i) => *i as f64,
                        v => {
                            return Err(Error::Config(format!(
                                "line {line}: {key}: expected numbers, found {v}"
                            )))
                        }
                    };
                }
                Ok((Some(line), out))
            }
            Some((v, line)) => Err(Error::Config(format!(
                "line {line}: {key}: expected a list of 3 numbers, found {v}"
            ))),
        }
    }

    fn belief(&mut self, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
        let (line, v) = self.triple(key, default)?;
        BeliefVector::new(v)
            .map(|_| v)
            .map_err(|e| Error::Config(format!("line {}: {key}: {e}", line.unwrap_or(0))))
    }

    fn rates(&mut self, prefix: &str, d: &RatesSection) -> Result<RatesSection> {
        Ok(RatesSection {
            r21_per_s: self.non_negative(&format!("{prefix}.r21_per_s"), d.r21_per_s)?,
            r10_per_s: self.non_negative(&format!("{prefix}.r10_per_s"), d.r10_per_s)?,
            r_repump_per_s: self
                .non_negative(&format!("{prefix}.r_repump_per_s"), d.r_repump_per_s)?,
            r_depump_per_s: self
                .non_negative(&format!("{prefix}.r_depump_per_s"), d.r_depump_per_s)?,
        })
    }

    fn photon(&mut self, prefix: &str, d: &PhotonSection) -> Result<PhotonSection> {
        let key = format!("{prefix}.count_rate_per_ms");
        let (line, rates) = self.triple(&key, d.count_rate_per_ms)?;
        if !(rates.iter().all(|r| r.is_finite() && *r >= 0.0)
            && rates[0] > rates[1]
            && rates[1] > rates[2])
        {
            return Err(Error::Config(format!(
                "line {}: {key}: {rates:?} must be non-negative and strictly decreasing",
                line.unwrap_or(0)
            )));
        }
        let fano = self.checked(
            &format!("{prefix}.fano"),
            d.fano,
            |f| f.is_finite() && f >= 1.0,
            ">= 1",
        )?;
        Ok(PhotonSection {
            count_rate_per_ms: rates,
            fano,
        })
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().min_by_key(|(_, (_, line))| *line) {
            None => Ok(()),
            Some((key, (_, line))) => {
                Err(Error::Config(format!("line {line}: unknown key '{key}'")))
            }
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn flatten(
    prefix: &str,
    value: toml::Value,
    lines: &BTreeMap<String, usize>,
    out: &mut BTreeMap<String, (toml::Value, usize)>,
) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, lines, out);
            }
        }
        v => {
            let line = lines.get(prefix).copied().unwrap_or(0);
            out.insert(prefix.to_owned(), (v, line));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for c in [
            ExperimentConfig::default(),
            ExperimentConfig::feedback_default(),
            ExperimentConfig::estimation_default(),
        ] {
            let text = c.to_text();
            assert_eq!(ExperimentConfig::parse(&text).unwrap(), c, "{text}");
            c.validate().unwrap();
        }
    }

    #[test]
    fn empty_text_is_default() {
        assert_eq!(
            ExperimentConfig::parse("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn filter_inherits_sim_values() {
        let c =
            ExperimentConfig::parse("sim.bin_time_ms = 0.3\nsim.rates.r10_per_s = 12\n").unwrap();
        assert_eq!(c.filter.bin_time_ms, 0.3);
        assert_eq!(c.filter.rates.r10_per_s, 12.0);
        c.validate().unwrap();
    }

    #[test]
    fn errors_name_the_line() {
        let err = ExperimentConfig::parse("seed = 1\n\nsim.bin_time_ms = -1\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.starts_with("line 3: sim.bin_time_ms")),
            "{err}"
        );

        let err = ExperimentConfig::parse("seed = 1\nsim.bogus = 2\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m == "line 2: unknown key 'sim.bogus'"),
            "{err}"
        );

        let err = ExperimentConfig::parse("seed = 1\nseed = = 2\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.starts_with("line 2")),
            "{err}"
        );

        let err = ExperimentConfig::parse("policy.mode = \"greedy\"\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.starts_with("line 1: policy.mode")),
            "{err}"
        );

        let err =
            ExperimentConfig::parse("\nsim.photon.count_rate_per_ms = [10, 20, 30]\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.starts_with("line 2: sim.photon")),
            "{err}"
        );
    }

    #[test]
    fn mismatch_needs_flag() {
        let text = "filter.photon.count_rate_per_ms = [50.0, 30.0, 10.0]\n";
        assert!(ExperimentConfig::parse(text).unwrap().validate().is_err());
        let c = ExperimentConfig::parse(&format!("allow_model_mismatch = true\n{text}")).unwrap();
        c.validate().unwrap();
        let bins = ExperimentConfig::parse("filter.bin_time_ms = 2.0\n").unwrap();
        assert!(bins.validate().is_err());
    }

    #[test]
    fn builders_convert_units() {
        let mut c = ExperimentConfig::default();
        c.set_bin_time_ms(0.5);
        let sim = c.sim_config().unwrap();
        assert_eq!(sim.bin_time, 0.5e-3);
        assert_eq!(sim.photon_model.mean_counts(), [20.0, 14.0, 8.0]);
        assert_eq!(sim.rates, TransitionRates::measured());
        c.sim.photon.fano = 1.5;
        c.filter.photon.fano = 1.5;
        assert_eq!(c.filter_config().unwrap().photon_model.fano(), 1.5);
    }

    #[test]
    fn large_seeds_survive() {
        let c = ExperimentConfig {
            seed: u64::MAX,
            ..ExperimentConfig::default()
        };
        assert!(c.to_text().contains("seed = \"18446744073709551615\""));
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn untuned_policy_is_filled() {
        let p = PolicySection::default();
        assert!(p.needs_tuning());
        assert!(p.policy(None).is_err());
        assert_eq!(p.policy(Some(0.4)).unwrap().fixed_t_repump, 0.4);
        let opt = PolicySection {
            mode: PolicyMode::OptimalT,
            ..p
        };
        assert!(!opt.needs_tuning());
        opt.policy(None).unwrap();
    }

    #[test]
    fn sweep_values() {
        let s = SweepSection {
            r_min_per_s: 0.0,
            r_max_per_s: 10.0,
            n_points: 6,
            duration_ms: 1.0,
        };
        assert_eq!(s.r_values(), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }
}
