//! Experiment configuration: strict JSON, defaults filled per task.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use carnot_core::kernel::EpsilonProvider;
use carnot_core::sampling::default_s_grid;
use carnot_core::semigroup::Gradient;
use carnot_core::GroupSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    AlgebraCheck,
    ExpCheck,
    DistanceCheck,
    KernelCheck,
    McpScan,
    WeightedMcpScan,
    N32Chain,
    CoreLemma,
    QbeScan,
    VolumeCheck,
}

impl Task {
    pub const ALL: [Task; 10] = [
        Task::AlgebraCheck,
        Task::ExpCheck,
        Task::DistanceCheck,
        Task::KernelCheck,
        Task::McpScan,
        Task::WeightedMcpScan,
        Task::N32Chain,
        Task::CoreLemma,
        Task::QbeScan,
        Task::VolumeCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::AlgebraCheck => "algebra-check",
            Task::ExpCheck => "exp-check",
            Task::DistanceCheck => "distance-check",
            Task::KernelCheck => "kernel-check",
            Task::McpScan => "mcp-scan",
            Task::WeightedMcpScan => "weighted-mcp-scan",
            Task::N32Chain => "n32-chain",
            Task::CoreLemma => "core-lemma",
            Task::QbeScan => "qbe-scan",
            Task::VolumeCheck => "volume-check",
        }
    }

    /// Optional keys the task reads, besides `task`, `group`, `seed` and `output`.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Task::AlgebraCheck => &["n_samples", "tolerance"],
            Task::ExpCheck => &["n_samples", "tolerance", "zeta_min", "zeta_max"],
            Task::DistanceCheck => &["n_samples", "x_half", "t_half"],
            Task::KernelCheck => &["n_samples", "tolerance", "d_max"],
            Task::McpScan => &["N", "n_samples", "s_grid", "zeta_min", "zeta_max", "boundary_grid", "threshold"],
            Task::WeightedMcpScan => &["N", "n_samples", "s_grid", "zeta_min", "zeta_max", "boundary_grid", "kernel", "epsilon"],
            Task::N32Chain => &["n_samples", "s_grid", "n0", "epsilon", "zeta_min", "zeta_max"],
            Task::CoreLemma => &["n_samples", "a_param", "steps", "zeta_min", "zeta_max", "tolerance"],
            Task::QbeScan => &["n_functions", "n_points", "h", "k", "gradient", "n_paths", "d_max", "ceiling"],
            Task::VolumeCheck => &["n_samples", "radii", "sigma"],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

/// A built-in label such as `heisenberg(1)` or inline structure matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupRef {
    Label(String),
    Inline {
        /// `structure[j][row][col]`, each matrix skew-symmetric.
        structure: Vec<Vec<Vec<f64>>>,
    },
}

impl GroupRef {
    pub fn build(&self) -> carnot_core::Result<GroupSpec> {
        match self {
            GroupRef::Label(l) => GroupSpec::from_label(l),
            GroupRef::Inline { structure } => GroupSpec::from_rows(structure),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    Oscillatory,
    Comparator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonChoice {
    Constant(f64),
    /// Only `"heuristic"` is accepted.
    Named(String),
}

impl EpsilonChoice {
    pub fn provider(&self) -> Result<EpsilonProvider, CliError> {
        match self {
            EpsilonChoice::Constant(c) if *c > 0.0 && c.is_finite() => Ok(EpsilonProvider::Constant(*c)),
            EpsilonChoice::Constant(c) => Err(CliError::Config(format!("epsilon must be positive, got {c}"))),
            EpsilonChoice::Named(s) if s == "heuristic" => Ok(EpsilonProvider::Heuristic),
            EpsilonChoice::Named(s) => Err(CliError::Config(format!("epsilon must be a number or \"heuristic\", got \"{s}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientChoice {
    Horizontal,
    Riemannian,
}

impl From<GradientChoice> for Gradient {
    fn from(g: GradientChoice) -> Self {
        match g {
            GradientChoice::Horizontal => Gradient::Horizontal,
            GradientChoice::Riemannian => Gradient::Riemannian,
        }
    }
}

/// Configuration file contents. After [`ExperimentConfig::resolve`] every key
/// the task reads is present; keys the task does not read are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<GroupRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_grid: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<EpsilonChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_half: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_half: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_param: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_functions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<GradientChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ceiling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

/// Defaults, as listed by `verify --help`.
pub const DEFAULTS_HELP: &str = "\
Config defaults (JSON keys; `group` is required, `N` is required for the MCP scans):
  all tasks          seed 0
  algebra-check      n_samples 1000, tolerance 1e-12
  exp-check          n_samples 1000, tolerance 1e-6, zeta_min 0.2, zeta_max 5
  distance-check     n_samples 10000, x_half 3, t_half 3
  kernel-check       n_samples 1000, tolerance 1e-3, d_max 8
  mcp-scan           n_samples 10000, s_grid 0.05k for k=1..20 and 2^-k for k=1..10,
                     zeta_min 0.2, zeta_max 5, boundary_grid true, threshold 1-1e-6
  weighted-mcp-scan  as mcp-scan without threshold; kernel oscillatory (comparator for n32),
                     epsilon \"heuristic\"
  n32-chain          n_samples 1000, n0 14, epsilon \"heuristic\", zeta_min 0.2, zeta_max 5
  core-lemma         n_samples 40, a_param 5, steps 16, zeta_min 6, zeta_max 10, tolerance 1e-6
  qbe-scan           n_functions 20, n_points 10, h [0.25, 1, 4], k 1, gradient horizontal,
                     n_paths 100000, d_max 4, ceiling 10
  volume-check       n_samples 10000, radii [0.5, 1, 2], sigma 3";

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn present_keys(&self) -> Vec<&'static str> {
        let value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object().expect("config is an object");
        ALL_KEYS.iter().copied().filter(|k| obj.contains_key(*k)).collect()
    }

    /// Checks the task, rejects keys the task does not read and fills defaults.
    pub fn resolve(mut self, task: Task, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(t) = self.task {
            if t != task {
                return Err(CliError::Config(format!("config is for task `{t}` but `{task}` was requested")));
            }
        }
        self.task = Some(task);
        for key in self.present_keys() {
            if !COMMON_KEYS.contains(&key) && !task.keys().contains(&key) {
                return Err(CliError::Config(format!("key `{key}` is not used by task `{task}`")));
            }
        }
        if self.group.is_none() {
            return Err(CliError::Config("missing required key `group`".into()));
        }
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        self.seed.get_or_insert(0);
        let n32 = matches!(&self.group, Some(GroupRef::Label(l)) if l == "n32");
        match task {
            Task::AlgebraCheck => {
                self.n_samples.get_or_insert(1000);
                self.tolerance.get_or_insert(1e-12);
            }
            Task::ExpCheck => {
                self.n_samples.get_or_insert(1000);
                self.tolerance.get_or_insert(1e-6);
                self.zeta_min.get_or_insert(0.2);
                self.zeta_max.get_or_insert(5.0);
            }
            Task::DistanceCheck => {
                self.n_samples.get_or_insert(10_000);
                self.x_half.get_or_insert(3.0);
                self.t_half.get_or_insert(3.0);
            }
            Task::KernelCheck => {
                self.n_samples.get_or_insert(1000);
                self.tolerance.get_or_insert(1e-3);
                self.d_max.get_or_insert(8.0);
            }
            Task::McpScan | Task::WeightedMcpScan => {
                if self.n.is_none() {
                    return Err(CliError::Config(format!("task `{task}` needs the exponent `N`")));
                }
                self.n_samples.get_or_insert(10_000);
                self.s_grid.get_or_insert_with(default_s_grid);
                self.zeta_min.get_or_insert(0.2);
                self.zeta_max.get_or_insert(5.0);
                self.boundary_grid.get_or_insert(true);
                if task == Task::McpScan {
                    self.threshold.get_or_insert(carnot_core::curvature::MCP_THRESHOLD);
                } else {
                    self.kernel
                        .get_or_insert(if n32 { KernelChoice::Comparator } else { KernelChoice::Oscillatory });
                    self.epsilon.get_or_insert(EpsilonChoice::Named("heuristic".into()));
                }
            }
            Task::N32Chain => {
                self.n_samples.get_or_insert(1000);
                self.s_grid.get_or_insert_with(default_s_grid);
                self.n0.get_or_insert(14.0);
                self.epsilon.get_or_insert(EpsilonChoice::Named("heuristic".into()));
                self.zeta_min.get_or_insert(0.2);
                self.zeta_max.get_or_insert(5.0);
            }
            Task::CoreLemma => {
                self.n_samples.get_or_insert(40);
                self.a_param.get_or_insert(5.0);
                self.steps.get_or_insert(16);
                self.zeta_min.get_or_insert(6.0);
                self.zeta_max.get_or_insert(10.0);
                self.tolerance.get_or_insert(1e-6);
            }
            Task::QbeScan => {
                self.n_functions.get_or_insert(20);
                self.n_points.get_or_insert(10);
                self.h.get_or_insert_with(|| vec![0.25, 1.0, 4.0]);
                self.k.get_or_insert(1);
                self.gradient.get_or_insert(GradientChoice::Horizontal);
                self.n_paths.get_or_insert(100_000);
                self.d_max.get_or_insert(4.0);
                self.ceiling.get_or_insert(10.0);
            }
            Task::VolumeCheck => {
                self.n_samples.get_or_insert(10_000);
                self.radii.get_or_insert_with(|| vec![0.5, 1.0, 2.0]);
                self.sigma.get_or_insert(3.0);
            }
        }
        Ok(self)
    }
}

const COMMON_KEYS: [&str; 4] = ["task", "group", "seed", "output"];

const ALL_KEYS: [&str; 29] = [
    "task",
    "group",
    "seed",
    "output",
    "n_samples",
    "tolerance",
    "N",
    "s_grid",
    "zeta_min",
    "zeta_max",
    "boundary_grid",
    "threshold",
    "kernel",
    "epsilon",
    "x_half",
    "t_half",
    "d_max",
    "n0",
    "a_param",
    "steps",
    "n_functions",
    "n_points",
    "h",
    "k",
    "gradient",
    "n_paths",
    "ceiling",
    "radii",
    "sigma",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig, serde_json::Error> {
        serde_json::from_str(s)
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(r#"{"group": "n32", "bogus": 1}"#).is_err());
    }

    #[test]
    fn inapplicable_keys_are_rejected() {
        let c = parse(r#"{"group": "heisenberg(1)", "n_paths": 10}"#).unwrap();
        assert!(c.resolve(Task::McpScan, None).is_err());
    }

    #[test]
    fn defaults_fill_every_task_key() {
        for task in Task::ALL {
            let mut c = parse(r#"{"group": "heisenberg(1)"}"#).unwrap();
            if matches!(task, Task::McpScan | Task::WeightedMcpScan) {
                c.n = Some(5.0);
            }
            let r = c.resolve(task, Some(3)).unwrap();
            let present = r.present_keys();
            for key in task.keys() {
                assert!(present.contains(key), "{task}: {key} missing");
            }
            assert_eq!(r.seed, Some(3));
        }
    }

    #[test]
    fn missing_group_is_a_config_error() {
        let c = parse(r#"{"N": 5}"#).unwrap();
        assert!(matches!(c.resolve(Task::McpScan, None), Err(CliError::Config(_))));
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let c = parse(r#"{"task": "exp-check", "group": "n32"}"#).unwrap();
        assert!(c.resolve(Task::AlgebraCheck, None).is_err());
    }

    #[test]
    fn inline_group_builds() {
        let c = parse(r#"{"group": {"structure": [[[0, 1], [-1, 0]]]}}"#).unwrap();
        let spec = c.group.unwrap().build().unwrap();
        assert_eq!((spec.q(), spec.m()), (2, 1));
    }
}
