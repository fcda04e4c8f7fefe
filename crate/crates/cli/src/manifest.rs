//! Run manifests: canonical config echo, per-stage metrics, and a checksummed
//! inventory of emitted files. Manifests are byte-reproducible for a fixed
//! config and seed; wall-clock timing goes to a sidecar (`timing.txt`) that
//! is not part of the inventory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub struct StageReport {
    pub name: String,
    pub metrics: BTreeMap<String, Value>,
    pub passed: bool,
}

impl StageReport {
    pub fn new(name: &str) -> Self {
        StageReport { name: name.to_string(), metrics: BTreeMap::new(), passed: true }
    }

    pub fn metric(mut self, key: &str, value: Value) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    pub fn num(self, key: &str, value: f64) -> Self {
        self.metric(key, json!(value))
    }

    pub fn check(mut self, ok: bool) -> Self {
        self.passed &= ok;
        self
    }
}

/// Recursively sorts every JSON object by key (the canonical order used in
/// manifests and config echoes).
pub fn canonicalize(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut sorted = BTreeMap::new();
            for (k, val) in map {
                sorted.insert(k, canonicalize(val));
            }
            let mut out = Map::new();
            for (k, val) in sorted {
                out.insert(k, val);
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

pub struct RunWriter {
    out_dir: PathBuf,
    files: Vec<(String, usize, String)>,
    started: std::time::Instant,
}

impl RunWriter {
    pub fn new(out_dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(RunWriter {
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
            started: std::time::Instant::now(),
        })
    }

    /// Writes a file into the run directory and records its checksum.
    pub fn emit(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        let digest = Sha256::digest(bytes);
        self.files.push((name.to_string(), bytes.len(), hex_string(&digest)));
        Ok(())
    }

    /// Writes `manifest.json` plus the timing sidecar; returns overall pass.
    pub fn finish(
        mut self,
        command: &str,
        seed: u64,
        config: Value,
        stages: Vec<StageReport>,
    ) -> anyhow::Result<bool> {
        let certified = stages.iter().all(|s| s.passed);
        let stage_values: Vec<Value> = stages
            .iter()
            .map(|s| {
                json!({
                    "name": s.name,
                    "metrics": Value::Object(s.metrics.clone().into_iter().collect()),
                    "passed": s.passed,
                })
            })
            .collect();
        self.files.sort();
        let files: Vec<Value> = self
            .files
            .iter()
            .map(|(name, bytes, sha)| json!({"path": name, "bytes": bytes, "sha256": sha}))
            .collect();
        let manifest = canonicalize(json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config": config,
            "stages": stage_values,
            "certified": certified,
            "files": files,
        }));
        let body = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(self.out_dir.join("manifest.json"), body)?;
        let mut timing = std::fs::File::create(self.out_dir.join("timing.txt"))?;
        writeln!(timing, "wall_clock_ms = {}", self.started.elapsed().as_millis())?;
        Ok(certified)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
