//! JSON summaries and their merge.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Task};
use crate::tasks::Assertion;
use crate::CliError;

pub const SCHEMA: &str = "carnot-verify/summary/1";
pub const MERGED_SCHEMA: &str = "carnot-verify/merged/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub schema: String,
    pub task: Task,
    pub group: String,
    pub config: ExperimentConfig,
    /// SHA-256 of the resolved config and the tool version.
    pub input_hash: String,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    pub stats: BTreeMap<String, Value>,
    pub csv: String,
    /// Seconds since the Unix epoch; ignored by comparisons and merges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl Summary {
    pub fn without_timestamp(&self) -> Self {
        Self {
            timestamp: None,
            ..self.clone()
        }
    }
}

/// Hex SHA-256 of the canonical JSON of the resolved config.
pub fn input_hash(cfg: &ExperimentConfig) -> String {
    let mut echo = cfg.clone();
    echo.output = None;
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(&echo).expect("config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Merged {
    pub schema: String,
    /// Conjunction over every entry.
    pub passed: bool,
    /// Entries per task, sorted and free of duplicates.
    pub tasks: BTreeMap<Task, Vec<Summary>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Input {
    Summary(Box<Summary>),
    Merged(Merged),
}

fn sort_key(s: &Summary) -> (String, String, String) {
    (s.group.clone(), s.input_hash.clone(), serde_json::to_string(s).expect("summary serializes"))
}

/// Merges summaries or previously merged documents. Timestamps are dropped,
/// identical entries collapse, so the result is idempotent and order-free.
pub fn merge(paths: &[impl AsRef<Path>]) -> Result<Merged, CliError> {
    let mut tasks: BTreeMap<Task, Vec<Summary>> = BTreeMap::new();
    for p in paths {
        let p = p.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
        let input: Input = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: not a summary or merged report: {e}", p.display())))?;
        let entries = match input {
            Input::Summary(s) if s.schema == SCHEMA => vec![*s],
            Input::Merged(m) if m.schema == MERGED_SCHEMA => m.tasks.into_values().flatten().collect(),
            _ => return Err(CliError::Config(format!("{}: unsupported schema", p.display()))),
        };
        for s in entries {
            tasks.entry(s.task).or_default().push(s.without_timestamp());
        }
    }
    for list in tasks.values_mut() {
        list.sort_by_key(sort_key);
        list.dedup();
    }
    Ok(Merged {
        schema: MERGED_SCHEMA.into(),
        passed: tasks.values().flatten().all(|s| s.passed),
        tasks,
    })
}
