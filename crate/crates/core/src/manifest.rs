//! Run manifests: every CLI command records what it ran, on what, with which
//! seed, so outputs are attributable and reruns comparable.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Flag values in sorted order.
    pub args: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Short content id over (command, args, seed): identical invocations
    /// share an id.
    pub run_id: String,
    pub started_unix: u64,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            args: BTreeMap::new(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            run_id: String::new(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_seconds: 0.0,
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    fn compute_run_id(&self) -> String {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.command.hash(&mut hasher);
        for (k, v) in &self.args {
            k.hash(&mut hasher);
            v.hash(&mut hasher);
        }
        self.seed.hash(&mut hasher);
        format!("{:016x}", hasher.finish())
    }

    /// Finalize timing and write `<name>.manifest.json` next to the outputs.
    pub fn write(&mut self, path: &Path, wall_seconds: f64) -> Result<()> {
        self.wall_seconds = wall_seconds;
        self.run_id = self.compute_run_id();
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
