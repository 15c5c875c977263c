use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use telegraph_core::config::ExperimentConfig;
use telegraph_core::trace_io::write_trace_file;
use telegraph_core::TraceRecord;

use crate::Failure;

pub const CONFIG_FILE: &str = "config.conf";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Output directory that remembers what was written for the manifest.
pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    /// Creates the directory and stores the effective config in it.
    pub fn create(config: &ExperimentConfig) -> Result<Self, Failure> {
        fs::create_dir_all(&config.output_dir)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", config.output_dir.display())))?;
        let mut out = OutDir {
            root: config.output_dir.clone(),
            files: Vec::new(),
        };
        out.write_text(CONFIG_FILE, &config.to_text())?;
        Ok(out)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.root.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_failure(&path, e))
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(value).expect("json values serialize") + "\n";
        self.write_text(name, &text)
    }

    pub fn write_trace(&mut self, name: &str, records: &[TraceRecord]) -> Result<(), Failure> {
        let path = self.path(name);
        write_trace_file(&path, records).map_err(Failure::from)
    }

    /// Writes `manifest.json`; `extra` keys are merged in at the top level.
    pub fn finish(
        mut self,
        command: &str,
        config: &ExperimentConfig,
        extra: Value,
    ) -> Result<(), Failure> {
        let mut manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": config.seed,
            "config_hash": config.hash(),
            "config_file": CONFIG_FILE,
            "n_traces": config.n_traces,
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut manifest, extra) {
            m.extend(e);
        }
        manifest["outputs"] = json!(self.files);
        self.write_json(MANIFEST_FILE, &manifest)
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

pub fn trace_name(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:04}.csv")
}

pub fn histogram_csv(hist: &[u64]) -> String {
    let mut s = String::from("photon_count,bins\n");
    for (n, c) in hist.iter().enumerate() {
        s.push_str(&format!("{n},{c}\n"));
    }
    s
}
