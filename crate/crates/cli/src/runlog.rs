//! Per-command run logs: config hash, seeds, a `git describe` string,
//! and the loss curve, written atomically under <out>/logs/.

use musemask_core::error::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

#[derive(Serialize)]
pub struct RunLog {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub loss_curve: Vec<(usize, f32)>,
    pub extra: BTreeMap<String, String>,
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

impl RunLog {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        RunLog {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            git_describe: git_describe(),
            loss_curve: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_curve(mut self, curve: Vec<(usize, f32)>) -> Self {
        self.loss_curve = curve;
        self
    }

    pub fn note(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.insert(key.to_string(), value.to_string());
        self
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let dir = out_dir.join("logs");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{}.json", self.command));
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_string_pretty(self).expect("log serializes");
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
