//! Experiment configuration: one TOML file drives data generation,
//! training, certification, evaluation, and sweeps. All randomness in a run
//! derives from the single top-level seed plus stage tags.

use crate::solver::LossKind;
use crate::tasks::TaskKind;
use crate::witness::{LeakMode, ThrMode, DEFAULT_LEAK, DEFAULT_THR};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: String,
    pub task: TaskConfig,
    pub arch: ArchConfig,
    #[serde(default)]
    pub witness: WitnessConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sg: SgConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// "addition" | "xor" | "mnist"
    pub kind: String,
    #[serde(default = "default_base")]
    pub base: usize,
    #[serde(default = "default_n_digits")]
    pub n_digits: usize,
    /// xor / mnist sequence length (addition derives T = n_digits + 1)
    #[serde(default)]
    pub t_len: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub one_hot: bool,
    #[serde(default)]
    pub mnist_images: Option<PathBuf>,
    #[serde(default)]
    pub mnist_labels: Option<PathBuf>,
}

fn default_base() -> usize {
    2
}
fn default_n_digits() -> usize {
    8
}
fn default_n_train() -> usize {
    2304
}
fn default_n_val() -> usize {
    512
}
fn default_n_test() -> usize {
    1024
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// hidden widths, last entry is the dictionary layer
    pub widths: Vec<usize>,
    /// parallel subnets for surrogate inits
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WitnessConfig {
    /// sampled dictionary size
    pub m: usize,
    pub leak: LeakMode,
    pub u_thr: ThrMode,
}

impl Default for WitnessConfig {
    fn default() -> Self {
        WitnessConfig {
            m: 256,
            leak: DEFAULT_LEAK,
            u_thr: DEFAULT_THR,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub reg_beta_grid: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            reg_beta_grid: vec![1e-3],
            tol: 1e-7,
            max_iter: 50_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgConfig {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub slope: f64,
    pub weight_decay: f64,
    pub detach_reset: bool,
}

impl Default for SgConfig {
    fn default() -> Self {
        SgConfig {
            lr_grid: vec![1e-3, 5e-3, 1e-2, 1e-1],
            epochs: 30,
            batch_size: 64,
            slope: crate::surrogate::DEFAULT_SLOPE,
            weight_decay: 0.0,
            detach_reset: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// "squared" | "logistic" | "softmax"
    pub kind: String,
    pub lambda_sum: f64,
    pub lambda_carry: f64,
    /// per-timestep linear ramp weighting for addition
    pub ramp: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: "squared".into(),
            lambda_sum: 1.0,
            lambda_carry: 1.0,
            ramp: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// "tf" | "ar"
    pub mode: String,
    /// additional digit counts for length generalization (addition only)
    pub ood_lengths: Vec<usize>,
    pub ood_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: "tf".into(),
            ood_lengths: Vec::new(),
            ood_samples: 512,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: "config".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn task_kind(&self) -> Result<TaskKind> {
        match self.task.kind.as_str() {
            "addition" => Ok(TaskKind::Addition {
                base: self.task.base,
                n_digits: self.task.n_digits,
            }),
            "xor" => Ok(TaskKind::FirstLastXor),
            "mnist" => Ok(TaskKind::MnistSeq),
            other => Err(Error::Config {
                path: "task.kind".into(),
                message: format!("unknown task {other:?} (addition|xor|mnist)"),
            }),
        }
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        match self.loss.kind.as_str() {
            "squared" => Ok(LossKind::Squared),
            "logistic" => Ok(LossKind::Logistic),
            "softmax" => Ok(LossKind::Softmax),
            other => Err(Error::Config {
                path: "loss.kind".into(),
                message: format!("unknown loss {other:?} (squared|logistic|softmax)"),
            }),
        }
    }

    /// Sequence length the task runs at.
    pub fn t_len(&self) -> usize {
        if self.task.kind == "addition" {
            self.task.n_digits + 1
        } else {
            self.task.t_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: String| -> Result<()> {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        self.task_kind()?;
        self.loss_kind()?;
        if crate::variants::variant_by_name(&self.variant).is_err() {
            return fail(
                "variant",
                format!(
                    "unknown variant {:?}; available: {}",
                    self.variant,
                    crate::variants::variant_names().join(", ")
                ),
            );
        }
        match self.task.kind.as_str() {
            "addition" => {
                if self.task.base < 2 {
                    return fail("task.base", "must be at least 2".into());
                }
                if self.task.n_digits == 0 {
                    return fail("task.n_digits", "must be at least 1".into());
                }
            }
            "xor" => {
                if self.task.t_len < 2 {
                    return fail("task.t_len", "xor needs t_len >= 2".into());
                }
            }
            "mnist" => {
                if self.task.t_len == 0 || 784 % self.task.t_len != 0 {
                    return fail("task.t_len", "must divide 784".into());
                }
                for (field, path) in [
                    (&self.task.mnist_images, "task.mnist_images"),
                    (&self.task.mnist_labels, "task.mnist_labels"),
                ] {
                    match field {
                        None => return fail(path, "required for the mnist task".into()),
                        Some(p) if !p.exists() => {
                            return fail(path, format!("file not found: {}", p.display()))
                        }
                        _ => {}
                    }
                }
            }
            _ => unreachable!("task_kind validated above"),
        }
        if self.task.n_train == 0 || self.task.n_val == 0 || self.task.n_test == 0 {
            return fail("task.n_train", "split sizes must be positive".into());
        }
        if self.arch.widths.is_empty() || self.arch.widths.iter().any(|w| *w == 0) {
            return fail("arch.widths", "need nonempty positive widths".into());
        }
        if self.arch.k == 0 {
            return fail("arch.k", "need at least one subnet".into());
        }
        if self.witness.m == 0 {
            return fail("witness.m", "need at least one witness".into());
        }
        if self.solver.reg_beta_grid.is_empty() {
            return fail("solver.reg_beta_grid", "grid must be nonempty".into());
        }
        if self.solver.reg_beta_grid.iter().any(|b| !(*b > 0.0)) {
            return fail("solver.reg_beta_grid", "entries must be positive".into());
        }
        if !(self.solver.tol > 0.0) {
            return fail("solver.tol", "must be positive".into());
        }
        if self.sg.lr_grid.is_empty() {
            return fail("sg.lr_grid", "grid must be nonempty".into());
        }
        if self.sg.lr_grid.iter().any(|lr| !(*lr > 0.0)) {
            return fail("sg.lr_grid", "entries must be positive".into());
        }
        if self.sg.batch_size == 0 {
            return fail("sg.batch_size", "must be nonzero".into());
        }
        if !(self.sg.slope > 0.0) {
            return fail("sg.slope", "must be positive".into());
        }
        if self.loss.lambda_sum < 0.0
            || self.loss.lambda_carry < 0.0
            || self.loss.lambda_sum + self.loss.lambda_carry == 0.0
        {
            return fail(
                "loss.lambda_sum",
                "weights must be nonnegative with a positive entry".into(),
            );
        }
        match self.eval.mode.as_str() {
            "tf" | "ar" => {}
            other => return fail("eval.mode", format!("unknown mode {other:?} (tf|ar)")),
        }
        if self.eval.mode == "ar" && self.task.kind != "addition" {
            return fail("eval.mode", "autoregressive rollout needs the addition task".into());
        }
        if self.eval.ood_lengths.iter().any(|l| *l == 0) {
            return fail("eval.ood_lengths", "lengths must be positive".into());
        }
        if !self.eval.ood_lengths.is_empty() && self.task.kind != "addition" {
            return fail(
                "eval.ood_lengths",
                "length generalization is defined for the addition task".into(),
            );
        }
        if self.output.as_os_str().is_empty() {
            return fail("output", "output directory required".into());
        }
        Ok(())
    }
}

/// Default length-generalization digit counts per base.
pub fn default_ood_lengths(base: usize) -> Vec<usize> {
    if base == 2 {
        vec![10, 20, 50]
    } else {
        vec![10, 25, 50]
    }
}

pub const EXAMPLE_CONFIG: &str = r#"seed = 7
variant = "cvx"
output = "out"

[task]
kind = "addition"
base = 2
n_digits = 8
n_train = 2304
n_val = 512
n_test = 1024

[arch]
widths = [256, 512]
k = 2

[witness]
m = 512

[solver]
reg_beta_grid = [0.0005, 0.001, 0.002]
tol = 1e-7

[sg]
lr_grid = [0.001, 0.005, 0.01, 0.1]
epochs = 30
batch_size = 64

[loss]
lambda_sum = 1.0
lambda_carry = 1.0

[eval]
mode = "tf"
ood_lengths = [10, 20, 50]
"#;
