use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

/// Everything needed to rerun a command: the instance text, the fully
/// resolved configuration and the tool version. Timings are informational.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub instance_path: PathBuf,
    pub instance_text: String,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub config: Value,
    pub artifacts: Vec<String>,
    pub timings_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, instance: &Path, text: &str, out: &Path, threads: usize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            instance_path: instance.to_path_buf(),
            instance_text: text.to_string(),
            out_dir: out.to_path_buf(),
            threads,
            config: Value::Null,
            artifacts: Vec::new(),
            timings_seconds: BTreeMap::new(),
        }
    }

    pub fn time<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let v = f();
        self.timings_seconds
            .insert(label.to_string(), start.elapsed().as_secs_f64());
        v
    }

    pub fn file_name(&self) -> String {
        format!("manifest.{}.json", self.command)
    }
}
