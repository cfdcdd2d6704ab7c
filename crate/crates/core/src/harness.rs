//! Run orchestration on top of the variant registry.
//!
//! Every training run lives in a content-addressed directory keyed by the
//! parts of the config that can change its artifacts, so re-running a
//! completed stage is a no-op that logs the hash match instead of
//! recomputing. Staged variants (`sg-cvx`, `sg-sg`, `cvx-sg`) ensure their
//! prerequisite run first and load its checkpoint; the prerequisite cell is
//! canonicalized (unused grid coordinates zeroed) so one checkpoint is
//! shared across the downstream sweep. Sweep cells execute in a worker
//! pool; the summary tables are written by the coordinating thread only.

use crate::config::ExperimentConfig;
use crate::metrics::{
    append_metrics_csv, evaluate, EvalMode, EvalOutcome, MetricsRow,
};
use crate::reconstruct::{load_parallel_snn, save_parallel_snn};
use crate::solver::{dual_certificate, load_solution, problem_hash, ConvexProblem};
use crate::surrogate::{load_trainable, save_trainable, EpochRecord, SurrogateConfig, TrainLossSpec};
use crate::tasks::{
    gen_addition, gen_first_last_xor, load_dataset, load_mnist_seq, save_dataset, TaskDataset,
};
use crate::variants::{TrainedModel, VariantContext, VariantOutput};
use crate::witness::Arch;
use crate::{Error, Result};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Overrides the dataset cache location (defaults to `<output>/data`).
pub const DATA_ROOT_ENV: &str = "SPIKECVX_DATA_ROOT";

/// A persisted certificate must reproduce its stored gap this tightly.
pub const GAP_REPRODUCTION_TOL: f64 = 1e-10;

/// Coordinates of one grid cell. Stages ignore the coordinates they do not
/// use; those are zeroed before hashing so equivalent runs share a
/// directory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub reg_beta: f64,
    pub lr: f64,
    pub seed: u64,
}

impl CellParams {
    /// First grid entries: the cell a plain `train` invocation runs.
    pub fn from_config(config: &ExperimentConfig) -> CellParams {
        CellParams {
            reg_beta: config.solver.reg_beta_grid[0],
            lr: config.sg.lr_grid[0],
            seed: config.seed,
        }
    }
}

fn variant_uses_convex(variant: &str) -> bool {
    matches!(variant, "cvx" | "sg-cvx" | "cvx-sg")
}

fn variant_uses_sg(variant: &str) -> bool {
    matches!(variant, "sg" | "sg-sg" | "sg-cvx" | "cvx-sg")
}

fn canonical_cell(variant: &str, cell: CellParams) -> CellParams {
    CellParams {
        reg_beta: if variant_uses_convex(variant) { cell.reg_beta } else { 0.0 },
        lr: if variant_uses_sg(variant) { cell.lr } else { 0.0 },
        seed: cell.seed,
    }
}

/// Stage seeds derive from the top-level seed by tag, never by arithmetic.
fn stage_seed(seed: u64, tag: &str) -> u64 {
    crate::rng::stream(seed, tag, &[]).next_u64()
}

#[derive(Serialize)]
struct Fingerprint<'a> {
    variant: &'a str,
    cell: CellParams,
    task: &'a crate::config::TaskConfig,
    arch: &'a crate::config::ArchConfig,
    witness: &'a crate::config::WitnessConfig,
    loss: &'a crate::config::LossConfig,
    solver_tol: f64,
    solver_max_iter: usize,
    sg_epochs: usize,
    sg_batch_size: usize,
    sg_slope: f64,
    sg_weight_decay: f64,
    sg_detach_reset: bool,
}

fn short_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())[..16].to_string()
}

/// Content address of a run: everything that can change its artifacts.
pub fn run_id(config: &ExperimentConfig, variant: &str, cell: CellParams) -> Result<String> {
    let cell = canonical_cell(variant, cell);
    let fp = Fingerprint {
        variant,
        cell,
        task: &config.task,
        arch: &config.arch,
        witness: &config.witness,
        loss: &config.loss,
        solver_tol: config.solver.tol,
        solver_max_iter: config.solver.max_iter,
        sg_epochs: config.sg.epochs,
        sg_batch_size: config.sg.batch_size,
        sg_slope: config.sg.slope,
        sg_weight_decay: config.sg.weight_decay,
        sg_detach_reset: config.sg.detach_reset,
    };
    Ok(short_hash(&serde_json::to_vec(&fp)?))
}

pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(output: &Path, run_id: &str) -> RunPaths {
        RunPaths {
            dir: output.join("runs").join(run_id),
        }
    }

    pub fn config_echo(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn witnesses(&self) -> PathBuf {
        self.dir.join("witnesses.json")
    }
    pub fn dictionary(&self) -> PathBuf {
        self.dir.join("dictionary.bin")
    }
    pub fn solution(&self) -> PathBuf {
        self.dir.join("solution.json")
    }
    pub fn model_parallel(&self) -> PathBuf {
        self.dir.join("model_parallel.json")
    }
    pub fn model_trainable(&self) -> PathBuf {
        self.dir.join("model_trainable.json")
    }
    pub fn epochs_csv(&self) -> PathBuf {
        self.dir.join("epochs.csv")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn done(&self) -> PathBuf {
        self.dir.join("done")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.txt")
    }
}

fn log_line(paths: &RunPaths, message: &str) -> Result<()> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(paths.log())?;
    writeln!(f, "{stamp} {message}")?;
    Ok(())
}

pub fn data_root(config: &ExperimentConfig) -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| config.output.join("data"))
}

pub fn task_label(config: &ExperimentConfig) -> String {
    match config.task.kind.as_str() {
        "addition" => format!("addition-b{}-d{}", config.task.base, config.task.n_digits),
        "mnist" => format!("mnist-t{}", config.task.t_len),
        other => other.to_string(),
    }
}

fn generate_full_dataset(config: &ExperimentConfig, total: usize) -> Result<TaskDataset> {
    let seed = stage_seed(config.seed, "data");
    match config.task.kind.as_str() {
        "addition" => gen_addition(config.task.base, config.task.n_digits, total, seed),
        "xor" => gen_first_last_xor(config.task.t_len, total, seed, config.task.one_hot),
        "mnist" => load_mnist_seq(
            config.task.mnist_images.as_ref().unwrap(),
            config.task.mnist_labels.as_ref().unwrap(),
            config.task.t_len,
            total,
            0,
        ),
        other => Err(Error::Config {
            path: "task.kind".into(),
            message: format!("unknown task {other:?}"),
        }),
    }
}

/// Train/val/test splits, generated once and cached under the data root.
pub fn prepare_splits(
    config: &ExperimentConfig,
) -> Result<(TaskDataset, TaskDataset, TaskDataset)> {
    let total = config.task.n_train + config.task.n_val + config.task.n_test;
    let key = {
        #[derive(Serialize)]
        struct DataKey<'a> {
            task: &'a crate::config::TaskConfig,
            seed: u64,
            total: usize,
        }
        short_hash(&serde_json::to_vec(&DataKey {
            task: &config.task,
            seed: config.seed,
            total,
        })?)
    };
    let root = data_root(config);
    std::fs::create_dir_all(&root)?;
    let cache = root.join(format!("{}-{key}.ds", task_label(config)));
    let full = if cache.exists() {
        let ds = load_dataset(&cache)?;
        if ds.n_samples() != total {
            return Err(Error::Artifact {
                path: cache.display().to_string(),
                message: format!(
                    "cached dataset has {} samples, config wants {total}",
                    ds.n_samples()
                ),
            });
        }
        ds
    } else {
        let ds = generate_full_dataset(config, total)?;
        save_dataset(&ds, &cache)?;
        ds
    };
    let mut parts = full.split(&[config.task.n_train, config.task.n_val, config.task.n_test])?;
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((train, val, test))
}

fn loss_spec(config: &ExperimentConfig) -> Result<TrainLossSpec> {
    if config.task.kind == "addition" {
        let weights = config
            .loss
            .ramp
            .then(|| crate::tasks::ramp_weights(config.t_len()));
        crate::tasks::joint_loss_spec(
            config.loss.lambda_sum,
            config.loss.lambda_carry,
            config.task.base,
            weights,
        )
    } else {
        Ok(TrainLossSpec::plain(config.loss_kind()?))
    }
}

fn eval_mode(config: &ExperimentConfig) -> EvalMode {
    match config.eval.mode.as_str() {
        "ar" => EvalMode::Autoregressive,
        _ => EvalMode::TeacherForced,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub variant: String,
    pub task: String,
    pub cell: CellParams,
    pub n_columns: Option<usize>,
    pub support: Option<usize>,
    pub primal: Option<f64>,
    pub dual: Option<f64>,
    pub gap: Option<f64>,
    pub iterations: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub val: EvalOutcome,
    pub test: EvalOutcome,
    pub wall_seconds: f64,
    /// true when a completed run directory satisfied this request
    #[serde(default)]
    pub reused: bool,
}

fn prerequisite(variant: &str) -> Option<(&'static str, &'static str)> {
    // (prerequisite variant, artifact it must leave behind)
    match variant {
        "sg-cvx" | "sg-sg" => Some(("sg", "trainable")),
        "cvx-sg" => Some(("cvx", "parallel")),
        _ => None,
    }
}

/// Runs a variant in its content-addressed directory, or reuses the
/// completed directory when the fingerprint already ran.
pub fn ensure_run(
    config: &ExperimentConfig,
    cell: CellParams,
    variant: &str,
) -> Result<RunSummary> {
    let cell = canonical_cell(variant, cell);
    let id = run_id(config, variant, cell)?;
    let paths = RunPaths::new(&config.output, &id);
    if paths.done().exists() {
        let mut summary: RunSummary =
            serde_json::from_str(&std::fs::read_to_string(paths.summary())?)?;
        summary.reused = true;
        log_line(&paths, &format!("reuse: fingerprint {id} already complete"))?;
        return Ok(summary);
    }
    execute_run(config, cell, variant, &id, &paths)
}

fn execute_run(
    config: &ExperimentConfig,
    cell: CellParams,
    variant: &str,
    id: &str,
    paths: &RunPaths,
) -> Result<RunSummary> {
    let clock = Instant::now();
    std::fs::create_dir_all(&paths.dir)?;
    log_line(paths, &format!("start: variant {variant} cell {cell:?}"))?;
    std::fs::write(
        paths.config_echo(),
        toml::to_string_pretty(config).map_err(|e| Error::Config {
            path: "config".into(),
            message: e.to_string(),
        })?,
    )?;

    let (train, val, test) = prepare_splits(config)?;

    // staged prerequisites load from their own completed runs
    let mut sg_ckpt = None;
    let mut cvx_model = None;
    if let Some((pre_variant, artifact)) = prerequisite(variant) {
        let pre = ensure_run(config, cell, pre_variant)?;
        let pre_paths = RunPaths::new(&config.output, &pre.run_id);
        match artifact {
            "trainable" => sg_ckpt = Some(load_trainable(&pre_paths.model_trainable())?.0),
            _ => cvx_model = Some(load_parallel_snn(&pre_paths.model_parallel())?),
        }
        log_line(paths, &format!("prerequisite {pre_variant}: run {}", pre.run_id))?;
    }

    let arch = Arch::new(train.d_in(), config.arch.widths.clone(), train.t_len());
    let mut ctx = VariantContext::new(&train, &val, arch, cell.seed);
    ctx.k_subnets = config.arch.k;
    ctx.n_witnesses = config.witness.m;
    ctx.leak_mode = config.witness.leak;
    ctx.thr_mode = config.witness.u_thr;
    ctx.reg_beta = cell.reg_beta;
    ctx.solver_tol = config.solver.tol;
    ctx.solver_max_iter = config.solver.max_iter;
    let mut sg = SurrogateConfig::new(
        cell.lr,
        config.sg.epochs,
        config.sg.batch_size,
        stage_seed(cell.seed, "sg"),
    );
    sg.slope = config.sg.slope;
    sg.weight_decay = config.sg.weight_decay;
    sg.detach_reset = config.sg.detach_reset;
    ctx.sg = sg;
    ctx.loss = loss_spec(config)?;
    ctx.sg_checkpoint = sg_ckpt.as_ref();
    ctx.convex_model = cvx_model.as_ref();

    let out = crate::variants::run_variant(variant, &ctx)?;
    persist_outputs(config, paths, variant, cell, &train, &out)?;

    let mode = eval_mode(config);
    let view = out.model.view();
    let train_eval = evaluate(&view, &train, mode)?;
    let val_eval = evaluate(&view, &val, mode)?;
    let test_eval = evaluate(&view, &test, mode)?;

    let (primal, dual, gap, iterations, support) = match &out.solution {
        Some(s) => (
            Some(s.primal_value),
            Some(s.dual_value),
            Some(s.gap),
            Some(s.iterations),
            Some(
                s.w_tilde
                    .rows()
                    .into_iter()
                    .filter(|r| r.iter().any(|v| *v != 0.0))
                    .count(),
            ),
        ),
        None => (None, None, None, None, None),
    };
    let summary = RunSummary {
        run_id: id.to_string(),
        variant: variant.to_string(),
        task: task_label(config),
        cell,
        n_columns: out.dictionary.as_ref().map(|d| d.n_columns()),
        support,
        primal,
        dual,
        gap,
        iterations,
        final_train_loss: out.epochs.last().map(|e| e.train_loss),
        final_val_loss: out.epochs.last().map(|e| e.val_loss),
        val: val_eval.clone(),
        test: test_eval.clone(),
        wall_seconds: clock.elapsed().as_secs_f64(),
        reused: false,
    };

    let rows: Vec<MetricsRow> = [("train", train_eval), ("val", val_eval), ("test", test_eval)]
        .into_iter()
        .map(|(split, outcome)| MetricsRow {
            run_id: id.to_string(),
            variant: variant.to_string(),
            task: summary.task.clone(),
            split: split.to_string(),
            seed: cell.seed,
            outcome,
            primal,
            dual,
            gap,
            wall_seconds: summary.wall_seconds,
        })
        .collect();
    append_metrics_csv(&paths.metrics_csv(), &rows)?;
    std::fs::write(paths.summary(), serde_json::to_string_pretty(&summary)?)?;
    log_line(paths, &format!("done: {:.3}s", summary.wall_seconds))?;
    std::fs::write(paths.done(), id)?;
    Ok(summary)
}

fn persist_outputs(
    config: &ExperimentConfig,
    paths: &RunPaths,
    variant: &str,
    cell: CellParams,
    train: &TaskDataset,
    out: &VariantOutput,
) -> Result<()> {
    match &out.model {
        TrainedModel::Parallel(snn) => save_parallel_snn(snn, &paths.model_parallel())?,
        TrainedModel::Trainable(snn) => save_trainable(snn, variant, &paths.model_trainable())?,
    }
    if let Some(store) = &out.witnesses {
        crate::witness::save_witness_store(store, &paths.witnesses())?;
    }
    if let Some(dict) = &out.dictionary {
        crate::dictionary::save_dictionary(dict, &paths.dictionary())?;
    }
    if let (Some(sol), Some(dict)) = (&out.solution, &out.dictionary) {
        // hash of the exact program the solution certifies
        let spec = loss_spec(config)?.resolve(train.n_samples(), train.readout);
        let problem = ConvexProblem::new(dict, train.targets.clone(), cell.reg_beta, spec);
        crate::solver::save_solution(sol, &problem_hash(&problem), &paths.solution())?;
    }
    if !out.epochs.is_empty() {
        write_epochs_csv(&paths.epochs_csv(), &out.epochs)?;
    }
    Ok(())
}

fn write_epochs_csv(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,diverged\n");
    for e in epochs {
        writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.diverged)
            .expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Result of re-certifying a persisted solution against its rebuilt program.
#[derive(Clone, Debug, Serialize)]
pub struct CertifyOutcome {
    pub run_id: String,
    pub stored_gap: f64,
    pub recomputed_gap: f64,
    pub difference: f64,
    /// stored and recomputed gaps agree to GAP_REPRODUCTION_TOL
    pub reproduced: bool,
    /// recomputed gap is within the configured solver tolerance
    pub gap_ok: bool,
    pub tol: f64,
}

impl CertifyOutcome {
    pub fn passed(&self) -> bool {
        self.reproduced && self.gap_ok
    }
}

/// Reloads a run's solution and dictionary, rebuilds the convex program
/// from config + cached data, and recomputes the duality gap from scratch.
pub fn certify_run(config: &ExperimentConfig, cell: CellParams) -> Result<CertifyOutcome> {
    let cell = canonical_cell(&config.variant, cell);
    let id = run_id(config, &config.variant, cell)?;
    let paths = RunPaths::new(&config.output, &id);
    if !paths.solution().exists() {
        return Err(Error::MissingCheckpoint(format!(
            "run {id} has no persisted solution (variant {})",
            config.variant
        )));
    }
    let dict = crate::dictionary::load_dictionary(&paths.dictionary())?;
    let (w, meta) = load_solution(&paths.solution())?;
    let (train, _, _) = prepare_splits(config)?;
    let spec = loss_spec(config)?.resolve(train.n_samples(), train.readout);
    let problem = ConvexProblem::new(&dict, train.targets.clone(), cell.reg_beta, spec);
    let hash = problem_hash(&problem);
    if hash != meta.problem_hash {
        return Err(Error::Artifact {
            path: paths.solution().display().to_string(),
            message: "solution does not match the rebuilt program".into(),
        });
    }
    let (_lambda, _dual, gap) = dual_certificate(&problem, &w)?;
    let difference = (gap - meta.gap).abs();
    let outcome = CertifyOutcome {
        run_id: id,
        stored_gap: meta.gap,
        recomputed_gap: gap,
        difference,
        reproduced: difference <= GAP_REPRODUCTION_TOL,
        gap_ok: gap <= config.solver.tol,
        tol: config.solver.tol,
    };
    log_line(&paths, &format!("certify: gap {gap:.3e} stored {:.3e}", meta.gap))?;
    Ok(outcome)
}

fn load_model(paths: &RunPaths) -> Result<TrainedModel> {
    if paths.model_parallel().exists() {
        Ok(TrainedModel::Parallel(load_parallel_snn(
            &paths.model_parallel(),
        )?))
    } else if paths.model_trainable().exists() {
        Ok(TrainedModel::Trainable(
            load_trainable(&paths.model_trainable())?.0,
        ))
    } else {
        Err(Error::MissingCheckpoint(format!(
            "no model artifact under {}",
            paths.dir.display()
        )))
    }
}

/// Evaluates a (possibly cached) run on the test split and on freshly
/// generated longer-sequence addition sets; appends one metrics row per
/// split. Witness dynamics are time-invariant, so longer horizons reuse the
/// trained model unchanged.
pub fn evaluate_run(
    config: &ExperimentConfig,
    ood_lengths: &[usize],
) -> Result<(RunSummary, Vec<MetricsRow>)> {
    if !ood_lengths.is_empty() && config.task.kind != "addition" {
        return Err(Error::Config {
            path: "eval.ood_lengths".into(),
            message: "length generalization is defined for the addition task".into(),
        });
    }
    let summary = ensure_run(config, CellParams::from_config(config), &config.variant)?;
    let paths = RunPaths::new(&config.output, &summary.run_id);
    let model = load_model(&paths)?;
    let view = model.view();
    let mode = eval_mode(config);
    let (_, _, test) = prepare_splits(config)?;
    let mut rows = Vec::new();
    let row = |split: String, outcome: EvalOutcome| MetricsRow {
        run_id: summary.run_id.clone(),
        variant: summary.variant.clone(),
        task: summary.task.clone(),
        split,
        seed: summary.cell.seed,
        outcome,
        primal: summary.primal,
        dual: summary.dual,
        gap: summary.gap,
        wall_seconds: 0.0,
    };
    rows.push(row("test".into(), evaluate(&view, &test, mode)?));
    let ood_seed = stage_seed(config.seed, "ood-eval");
    for &len in ood_lengths {
        let ds = gen_addition(config.task.base, len, config.eval.ood_samples, ood_seed)?;
        rows.push(row(format!("ood-{len}"), evaluate(&view, &ds, mode)?));
    }
    append_metrics_csv(&paths.metrics_csv(), &rows)?;
    Ok((summary, rows))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub cell: CellParams,
    pub run_id: String,
    pub val_token_acc: f64,
    pub test_token_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub sweep_id: String,
    pub variant: String,
    pub cells: Vec<SweepCell>,
    pub best: SweepCell,
    #[serde(default)]
    pub reused: bool,
}

/// Best validation metric; ties broken by smaller reg_beta, then smaller lr.
fn select_best(cells: &[SweepCell]) -> usize {
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| {
        cells[b]
            .val_token_acc
            .partial_cmp(&cells[a].val_token_acc)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                cells[a]
                    .cell
                    .reg_beta
                    .total_cmp(&cells[b].cell.reg_beta),
            )
            .then(cells[a].cell.lr.total_cmp(&cells[b].cell.lr))
    });
    order[0]
}

pub fn sweep_paths(config: &ExperimentConfig, sweep_id: &str) -> PathBuf {
    config.output.join("sweeps").join(sweep_id)
}

/// Runs every grid cell (worker pool; each cell is an independent run
/// directory) and selects the best by validation token accuracy.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    let variant = config.variant.as_str();
    let betas: Vec<f64> = if variant_uses_convex(variant) {
        config.solver.reg_beta_grid.clone()
    } else {
        vec![0.0]
    };
    let lrs: Vec<f64> = if variant_uses_sg(variant) {
        config.sg.lr_grid.clone()
    } else {
        vec![0.0]
    };
    let cells: Vec<CellParams> = betas
        .iter()
        .flat_map(|&reg_beta| {
            lrs.iter().map(move |&lr| CellParams {
                reg_beta,
                lr,
                seed: config.seed,
            })
        })
        .collect();

    let sweep_id = {
        #[derive(Serialize)]
        struct SweepKey<'a> {
            base: String,
            cells: &'a [CellParams],
        }
        let base = run_id(config, variant, cells[0])?;
        short_hash(&serde_json::to_vec(&SweepKey {
            base,
            cells: &cells,
        })?)
    };
    let dir = sweep_paths(config, &sweep_id);
    let summary_path = dir.join("summary.json");
    if summary_path.exists() {
        let mut outcome: SweepOutcome =
            serde_json::from_str(&std::fs::read_to_string(&summary_path)?)?;
        outcome.reused = true;
        return Ok(outcome);
    }
    std::fs::create_dir_all(&dir)?;

    // warm shared state serially: dataset cache, then any shared prerequisite
    prepare_splits(config)?;
    if prerequisite(variant).is_some() {
        let mut seen = std::collections::BTreeSet::new();
        for &cell in &cells {
            let (pre_variant, _) = prerequisite(variant).unwrap();
            let pre_cell = canonical_cell(pre_variant, cell);
            if seen.insert(format!("{pre_cell:?}")) {
                ensure_run(config, pre_cell, pre_variant)?;
            }
        }
    }

    let results: Vec<SweepCell> = cells
        .par_iter()
        .map(|&cell| -> Result<SweepCell> {
            let summary = ensure_run(config, cell, variant)?;
            Ok(SweepCell {
                cell: canonical_cell(variant, cell),
                run_id: summary.run_id.clone(),
                val_token_acc: summary.val.token_acc,
                test_token_acc: summary.test.token_acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = results[select_best(&results)].clone();
    let outcome = SweepOutcome {
        sweep_id: sweep_id.clone(),
        variant: variant.to_string(),
        cells: results,
        best,
        reused: false,
    };

    // single writer for all sweep-level tables and plots
    let mut table = String::from("reg_beta,lr,seed,run_id,val_token_acc,test_token_acc\n");
    for c in &outcome.cells {
        writeln!(
            table,
            "{},{},{},{},{},{}",
            c.cell.reg_beta, c.cell.lr, c.cell.seed, c.run_id, c.val_token_acc, c.test_token_acc
        )
        .expect("string write");
    }
    std::fs::write(dir.join("cells.csv"), table)?;
    let series = sweep_series(&outcome, variant_uses_convex(variant));
    write_dat(&dir.join("sweep.dat"), &series)?;
    let xlabel = if variant_uses_convex(variant) { "reg_beta" } else { "learning rate" };
    write_svg_lines(
        &dir.join("sweep.svg"),
        &format!("{variant} validation accuracy"),
        xlabel,
        "val token accuracy",
        &series,
    )?;
    std::fs::write(&summary_path, serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

fn sweep_series(outcome: &SweepOutcome, over_beta: bool) -> Vec<Series> {
    let mut series: Vec<Series> = Vec::new();
    for c in &outcome.cells {
        let (label, x) = if over_beta {
            (format!("lr={}", c.cell.lr), c.cell.reg_beta)
        } else {
            ("val".to_string(), c.cell.lr)
        };
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((x, c.val_token_acc)),
            None => series.push(Series {
                label,
                points: vec![(x, c.val_token_acc)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    series
}

/// One labelled polyline of a plot.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// gnuplot-style data file: one block per series, blank-line separated, so
/// `plot 'f.dat' index 0 with lines` works directly.
pub fn write_dat(path: &Path, series: &[Series]) -> Result<()> {
    let mut s = String::new();
    for (i, ser) in series.iter().enumerate() {
        if i > 0 {
            s.push_str("\n\n");
        }
        writeln!(s, "# {}", ser.label).expect("string write");
        for (x, y) in &ser.points {
            writeln!(s, "{x} {y}").expect("string write");
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const SVG_PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Minimal self-contained line chart; enough to eyeball sweeps and curves
/// without any plotting dependency.
pub fn write_svg_lines(
    path: &Path,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[Series],
) -> Result<()> {
    let (w, h) = (640.0, 420.0);
    let (x0, y0, x1, y1) = (70.0, 40.0, 610.0, 360.0);
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &points {
        xmin = xmin.min(*x);
        xmax = xmax.max(*x);
        ymin = ymin.min(*y);
        ymax = ymax.max(*y);
    }
    if points.is_empty() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if xmax - xmin < 1e-300 {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if ymax - ymin < 1e-300 {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
    let sy = |y: f64| y1 - (y - ymin) / (ymax - ymin) * (y1 - y0);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).expect("string write");
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (x0 + x1) / 2.0,
        xml_escape(title)
    )
    .expect("string write");
    for (ax, ay, bx, by) in [(x0, y1, x1, y1), (x0, y0, x0, y1)] {
        writeln!(
            s,
            r#"<line x1="{ax}" y1="{ay}" x2="{bx}" y2="{by}" stroke="black"/>"#
        )
        .expect("string write");
    }
    for i in 0..5 {
        let f = i as f64 / 4.0;
        let xv = xmin + f * (xmax - xmin);
        let yv = ymin + f * (ymax - ymin);
        let px = sx(xv);
        let py = sy(yv);
        writeln!(
            s,
            r#"<line x1="{px}" y1="{y1}" x2="{px}" y2="{}" stroke="black"/>"#,
            y1 + 5.0
        )
        .expect("string write");
        writeln!(
            s,
            r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#,
            y1 + 20.0,
            tick(xv)
        )
        .expect("string write");
        writeln!(
            s,
            r#"<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/>"#,
            x0 - 5.0
        )
        .expect("string write");
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 8.0,
            py + 4.0,
            tick(yv)
        )
        .expect("string write");
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        h - 10.0,
        xml_escape(xlabel)
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml_escape(ylabel)
    )
    .expect("string write");
    for (i, ser) in series.iter().enumerate() {
        let color = SVG_PALETTE[i % SVG_PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        )
        .expect("string write");
        for (x, y) in &ser.points {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                sx(*x),
                sy(*y)
            )
            .expect("string write");
        }
        let ly = y0 + 14.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            x1 - 120.0,
            x1 - 100.0
        )
        .expect("string write");
        writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            x1 - 94.0,
            ly + 4.0,
            xml_escape(&ser.label)
        )
        .expect("string write");
    }
    writeln!(s, "</svg>").expect("string write");
    std::fs::write(path, s)?;
    Ok(())
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 0.01 && a < 10000.0 {
        let r = (v * 1e4).round() / 1e4;
        format!("{r}")
    } else {
        format!("{v:.1e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn xor_config(dir: &Path, variant: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
seed = 11
variant = "{variant}"
output = "{}"

[task]
kind = "xor"
t_len = 4
n_train = 32
n_val = 16
n_test = 16

[arch]
widths = [4, 3]
k = 2

[witness]
m = 16

[solver]
reg_beta_grid = [0.05]
tol = 1e-7

[sg]
lr_grid = [0.005]
epochs = 2
batch_size = 16
"#,
            dir.display()
        ))
        .unwrap()
    }

    fn addition_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
seed = 3
variant = "cvx"
output = "{}"

[task]
kind = "addition"
base = 2
n_digits = 2
n_train = 32
n_val = 16
n_test = 16

[arch]
widths = [4, 4]

[witness]
m = 8

[solver]
reg_beta_grid = [0.1]

[eval]
mode = "tf"
ood_samples = 16
"#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn run_and_reuse_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let config = xor_config(tmp.path(), "cvx");
        let cell = CellParams::from_config(&config);
        let first = ensure_run(&config, cell, "cvx").unwrap();
        assert!(!first.reused);
        let paths = RunPaths::new(&config.output, &first.run_id);
        for f in [
            paths.config_echo(),
            paths.witnesses(),
            paths.dictionary(),
            paths.solution(),
            paths.model_parallel(),
            paths.metrics_csv(),
            paths.summary(),
            paths.done(),
        ] {
            assert!(f.exists(), "missing artifact {}", f.display());
        }
        let metrics_before = std::fs::read(paths.metrics_csv()).unwrap();

        let second = ensure_run(&config, cell, "cvx").unwrap();
        assert!(second.reused);
        assert_eq!(second.run_id, first.run_id);
        assert_eq!(second.primal, first.primal);
        let metrics_after = std::fs::read(paths.metrics_csv()).unwrap();
        assert_eq!(metrics_before, metrics_after, "reuse must not append");
        let log = std::fs::read_to_string(paths.log()).unwrap();
        assert!(log.contains("reuse: fingerprint"), "log: {log}");
    }

    #[test]
    fn certify_reproduces_stored_gap() {
        let tmp = tempfile::tempdir().unwrap();
        let config = xor_config(tmp.path(), "cvx");
        let cell = CellParams::from_config(&config);
        let summary = ensure_run(&config, cell, "cvx").unwrap();
        let outcome = certify_run(&config, cell).unwrap();
        assert_eq!(outcome.run_id, summary.run_id);
        assert!(
            outcome.difference <= GAP_REPRODUCTION_TOL,
            "stored {} vs recomputed {}",
            outcome.stored_gap,
            outcome.recomputed_gap
        );
        assert!(outcome.gap_ok, "gap {} over tol", outcome.recomputed_gap);
        assert!(outcome.passed());
    }

    #[test]
    fn staged_variant_reuses_prerequisite_run() {
        let tmp = tempfile::tempdir().unwrap();
        let config = xor_config(tmp.path(), "cvx-sg");
        let cell = CellParams::from_config(&config);
        let summary = ensure_run(&config, cell, "cvx-sg").unwrap();
        assert_eq!(summary.variant, "cvx-sg");
        assert!(summary.final_train_loss.is_some());

        // the cvx prerequisite completed in its own directory
        let pre_id = run_id(&config, "cvx", cell).unwrap();
        assert_ne!(pre_id, summary.run_id);
        let pre_paths = RunPaths::new(&config.output, &pre_id);
        assert!(pre_paths.done().exists());
        assert!(pre_paths.model_parallel().exists());

        let again = ensure_run(&config, cell, "cvx-sg").unwrap();
        assert!(again.reused);
    }

    fn mk(reg_beta: f64, lr: f64, val: f64) -> SweepCell {
        SweepCell {
            cell: CellParams {
                reg_beta,
                lr,
                seed: 0,
            },
            run_id: String::new(),
            val_token_acc: val,
            test_token_acc: 0.0,
        }
    }

    #[test]
    fn sweep_selection_prefers_val_then_smaller_beta_then_smaller_lr() {
        assert_eq!(select_best(&[mk(0.1, 0.2, 0.9), mk(0.1, 0.1, 0.95)]), 1);
        assert_eq!(select_best(&[mk(0.2, 0.1, 0.9), mk(0.1, 0.1, 0.9)]), 1);
        assert_eq!(select_best(&[mk(0.1, 0.2, 0.9), mk(0.1, 0.1, 0.9)]), 1);
        assert_eq!(
            select_best(&[mk(0.1, 0.1, 0.9), mk(0.2, 0.05, 0.9), mk(0.05, 0.3, 0.8)]),
            0
        );
    }

    #[test]
    fn sweep_runs_cells_and_persists_tables() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = xor_config(tmp.path(), "cvx");
        config.solver.reg_beta_grid = vec![0.05, 0.4];
        let outcome = run_sweep(&config).unwrap();
        assert_eq!(outcome.cells.len(), 2);
        assert!(!outcome.reused);
        let best_idx = select_best(&outcome.cells);
        assert_eq!(outcome.best.run_id, outcome.cells[best_idx].run_id);
        let dir = sweep_paths(&config, &outcome.sweep_id);
        for f in ["cells.csv", "sweep.dat", "sweep.svg", "summary.json"] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
        let again = run_sweep(&config).unwrap();
        assert!(again.reused);
        assert_eq!(again.best.run_id, outcome.best.run_id);
    }

    #[test]
    fn ood_eval_extends_horizon_and_appends_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let config = addition_config(tmp.path());
        let (summary, rows) = evaluate_run(&config, &[4]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].split, "test");
        assert_eq!(rows[1].split, "ood-4");
        // trained at T = 3, evaluated at T = 5
        assert_eq!(rows[1].outcome.t_len, 5);
        assert_eq!(rows[1].outcome.n_samples, 16);
        let paths = RunPaths::new(&config.output, &summary.run_id);
        let csv = std::fs::read_to_string(paths.metrics_csv()).unwrap();
        assert!(csv.contains("ood-4"));
    }

    #[test]
    fn plot_outputs_are_wellformed() {
        let tmp = tempfile::tempdir().unwrap();
        let series = vec![
            Series {
                label: "a&b".into(),
                points: vec![(0.0, 1.0), (1.0, 0.5)],
            },
            Series {
                label: "c".into(),
                points: vec![(0.0, 0.25), (1.0, 0.75)],
            },
        ];
        let dat = tmp.path().join("x.dat");
        let svg = tmp.path().join("x.svg");
        write_dat(&dat, &series).unwrap();
        write_svg_lines(&svg, "title", "x", "y", &series).unwrap();

        let dat_text = std::fs::read_to_string(&dat).unwrap();
        let blocks: Vec<&str> = dat_text.split("\n\n\n").collect();
        assert_eq!(blocks.len(), 2);
        assert!(blocks[0].starts_with("# a&b\n"));
        for line in dat_text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
            let cols: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(cols.len(), 2);
            cols[0].parse::<f64>().unwrap();
            cols[1].parse::<f64>().unwrap();
        }

        let svg_text = std::fs::read_to_string(&svg).unwrap();
        assert!(svg_text.starts_with("<svg"));
        assert!(svg_text.ends_with("</svg>\n"));
        assert_eq!(svg_text.matches("<polyline").count(), 2);
        assert!(svg_text.contains("a&amp;b"));
        assert!(!svg_text.contains("a&b"));
    }
}
