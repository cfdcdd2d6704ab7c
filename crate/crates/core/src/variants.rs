//! Training strategy registry.
//!
//! Five ways to fit the same parallel spiking architecture, behind one
//! trait so the harness and CLI select them by name at runtime:
//!
//! - `sg`      surrogate-gradient descent from random init
//! - `cvx`     sampled witness dictionary + convex readout fit
//! - `sg-cvx`  convex readout refit over a trained checkpoint's frozen subnets
//! - `sg-sg`   continue surrogate training from a checkpoint
//! - `cvx-sg`  surrogate fine-tuning of a reconstructed convex model
//!
//! Staged variants take their prerequisite artifact through the context
//! rather than re-running the earlier stage, so a sweep can reuse one
//! checkpoint across many downstream configurations.

use crate::dictionary::{build_sampled_dictionary, build_trajectory_dictionary, SpikeDictionary};
use crate::reconstruct::{merge_by_witness, reconstruct, ParallelSnn, ReadoutRule};
use crate::solver::{solve, ConvexProblem, ConvexSolution};
use crate::surrogate::{train_sg, EpochRecord, SurrogateConfig, TrainLossSpec, TrainableSnn};
use crate::tasks::TaskDataset;
use crate::witness::{
    extract_pretrained_witnesses, sample_gaussian_witnesses, Arch, LeakMode, ThrMode, WitnessStore,
    DEFAULT_LEAK, DEFAULT_THR,
};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::time::Instant;

/// Everything a variant may need; staged prerequisites stay `None` unless
/// the caller already produced them.
pub struct VariantContext<'a> {
    pub train: &'a TaskDataset,
    pub val: &'a TaskDataset,
    pub arch: Arch,
    /// subnet count for surrogate inits
    pub k_subnets: usize,
    /// sampled dictionary size for `cvx`
    pub n_witnesses: usize,
    pub seed: u64,
    pub leak_mode: LeakMode,
    pub thr_mode: ThrMode,
    pub reg_beta: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub sg: SurrogateConfig,
    pub loss: TrainLossSpec,
    pub sg_checkpoint: Option<&'a TrainableSnn>,
    pub convex_model: Option<&'a ParallelSnn>,
}

impl<'a> VariantContext<'a> {
    /// Sensible desk-scale defaults around a train/val pair.
    pub fn new(train: &'a TaskDataset, val: &'a TaskDataset, arch: Arch, seed: u64) -> Self {
        VariantContext {
            train,
            val,
            arch,
            k_subnets: 2,
            n_witnesses: 64,
            seed,
            leak_mode: DEFAULT_LEAK,
            thr_mode: DEFAULT_THR,
            reg_beta: 1e-3,
            solver_tol: 1e-7,
            solver_max_iter: 50_000,
            sg: SurrogateConfig::new(1e-3, 10, 32, seed),
            loss: TrainLossSpec::plain(crate::solver::LossKind::Squared),
            sg_checkpoint: None,
            convex_model: None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Parallel(ParallelSnn),
    Trainable(TrainableSnn),
}

impl TrainedModel {
    pub fn view(&self) -> crate::metrics::ModelView<'_> {
        match self {
            TrainedModel::Parallel(p) => crate::metrics::ModelView::of_parallel(p),
            TrainedModel::Trainable(t) => crate::metrics::ModelView::of_trainable(t),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            TrainedModel::Parallel(p) => p.k(),
            TrainedModel::Trainable(t) => t.k(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariantOutput {
    pub model: TrainedModel,
    /// present when a convex stage ran last
    pub solution: Option<ConvexSolution>,
    /// the program the solution certifies, kept so it can be persisted and
    /// re-certified without re-rolling the witnesses
    pub dictionary: Option<SpikeDictionary>,
    pub witnesses: Option<WitnessStore>,
    /// present when a surrogate stage ran last (epoch 0 is the init eval)
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

pub trait TrainingVariant: Send + Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    fn run(&self, ctx: &VariantContext) -> Result<VariantOutput>;
}

fn build_dictionary(store: &WitnessStore, ds: &TaskDataset) -> Result<SpikeDictionary> {
    match ds.readout {
        ReadoutRule::FinalTime => build_sampled_dictionary(store, &ds.inputs),
        ReadoutRule::PerTimestep => build_trajectory_dictionary(store, &ds.inputs),
    }
}

/// Dictionary fit + reconstruction shared by `cvx` and `sg-cvx`.
fn convex_stage(
    store: &WitnessStore,
    ctx: &VariantContext,
) -> Result<(ParallelSnn, ConvexSolution, SpikeDictionary)> {
    let ds = ctx.train;
    let dict = build_dictionary(store, ds)?;
    let spec = ctx.loss.resolve(ds.n_samples(), ds.readout);
    let problem = ConvexProblem::new(&dict, ds.targets.clone(), ctx.reg_beta, spec);
    let sol = solve(&problem, ctx.solver_tol, ctx.solver_max_iter)?;
    // per-column decomposition, then regrouped per witness so downstream
    // evaluation and finetuning scale with K rather than the support size
    let snn = merge_by_witness(&reconstruct(&dict, store, &sol.w_tilde)?);
    Ok((snn, sol, dict))
}

fn surrogate_stage(
    init: TrainableSnn,
    ctx: &VariantContext,
) -> Result<(TrainableSnn, Vec<EpochRecord>)> {
    train_sg(
        init,
        &ctx.sg,
        &ctx.loss,
        &ctx.train.as_supervised(),
        &ctx.val.as_supervised(),
    )
}

struct Sg;

impl TrainingVariant for Sg {
    fn name(&self) -> &'static str {
        "sg"
    }

    fn describe(&self) -> &'static str {
        "surrogate-gradient training from random init"
    }

    fn run(&self, ctx: &VariantContext) -> Result<VariantOutput> {
        let clock = Instant::now();
        let init = TrainableSnn::new_random(
            &ctx.arch,
            ctx.train.d_out(),
            ctx.k_subnets,
            ctx.seed,
            ctx.train.readout,
        )?;
        let (snn, epochs) = surrogate_stage(init, ctx)?;
        Ok(VariantOutput {
            model: TrainedModel::Trainable(snn),
            solution: None,
            dictionary: None,
            witnesses: None,
            epochs,
            wall_seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

struct Cvx;

impl TrainingVariant for Cvx {
    fn name(&self) -> &'static str {
        "cvx"
    }

    fn describe(&self) -> &'static str {
        "sampled witness dictionary with convex readout fit"
    }

    fn run(&self, ctx: &VariantContext) -> Result<VariantOutput> {
        let clock = Instant::now();
        let store = sample_gaussian_witnesses(
            &ctx.arch,
            ctx.n_witnesses,
            ctx.seed,
            ctx.leak_mode,
            ctx.thr_mode,
        )?;
        let (snn, sol, dict) = convex_stage(&store, ctx)?;
        Ok(VariantOutput {
            model: TrainedModel::Parallel(snn),
            solution: Some(sol),
            dictionary: Some(dict),
            witnesses: Some(store),
            epochs: Vec::new(),
            wall_seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

struct SgCvx;

impl TrainingVariant for SgCvx {
    fn name(&self) -> &'static str {
        "sg-cvx"
    }

    fn describe(&self) -> &'static str {
        "convex readout refit over frozen pretrained subnets"
    }

    fn run(&self, ctx: &VariantContext) -> Result<VariantOutput> {
        let clock = Instant::now();
        let ckpt = ctx.sg_checkpoint.ok_or_else(|| {
            Error::MissingCheckpoint("sg-cvx needs a trained sg checkpoint".into())
        })?;
        let store = extract_pretrained_witnesses(&ckpt.subnets, &ckpt.arch, "sg")?;
        let (snn, sol, dict) = convex_stage(&store, ctx)?;
        Ok(VariantOutput {
            model: TrainedModel::Parallel(snn),
            solution: Some(sol),
            dictionary: Some(dict),
            witnesses: Some(store),
            epochs: Vec::new(),
            wall_seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

struct SgSg;

impl TrainingVariant for SgSg {
    fn name(&self) -> &'static str {
        "sg-sg"
    }

    fn describe(&self) -> &'static str {
        "continue surrogate training from a checkpoint"
    }

    fn run(&self, ctx: &VariantContext) -> Result<VariantOutput> {
        let clock = Instant::now();
        let ckpt = ctx.sg_checkpoint.ok_or_else(|| {
            Error::MissingCheckpoint("sg-sg needs a trained sg checkpoint".into())
        })?;
        let (snn, epochs) = surrogate_stage(ckpt.clone(), ctx)?;
        Ok(VariantOutput {
            model: TrainedModel::Trainable(snn),
            solution: None,
            dictionary: None,
            witnesses: None,
            epochs,
            wall_seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

struct CvxSg;

impl TrainingVariant for CvxSg {
    fn name(&self) -> &'static str {
        "cvx-sg"
    }

    fn describe(&self) -> &'static str {
        "surrogate fine-tuning of a reconstructed convex model"
    }

    fn run(&self, ctx: &VariantContext) -> Result<VariantOutput> {
        let clock = Instant::now();
        let snn = ctx.convex_model.ok_or_else(|| {
            Error::MissingCheckpoint("cvx-sg needs a reconstructed convex model".into())
        })?;
        let init = TrainableSnn::from_parallel_snn(snn);
        let (snn, epochs) = surrogate_stage(init, ctx)?;
        Ok(VariantOutput {
            model: TrainedModel::Trainable(snn),
            solution: None,
            dictionary: None,
            witnesses: None,
            epochs,
            wall_seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

pub fn registry() -> BTreeMap<&'static str, Box<dyn TrainingVariant>> {
    let variants: Vec<Box<dyn TrainingVariant>> = vec![
        Box::new(Sg),
        Box::new(Cvx),
        Box::new(SgCvx),
        Box::new(SgSg),
        Box::new(CvxSg),
    ];
    variants.into_iter().map(|v| (v.name(), v)).collect()
}

pub fn variant_names() -> Vec<&'static str> {
    registry().into_keys().collect()
}

pub fn variant_by_name(name: &str) -> Result<Box<dyn TrainingVariant>> {
    registry().remove(name).ok_or_else(|| Error::Config {
        path: "train.variant".into(),
        message: format!(
            "unknown variant {name:?}; available: {}",
            variant_names().join(", ")
        ),
    })
}

pub fn run_variant(name: &str, ctx: &VariantContext) -> Result<VariantOutput> {
    variant_by_name(name)?.run(ctx)
}
