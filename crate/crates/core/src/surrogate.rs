//! Surrogate-gradient BPTT for K-parallel LIF networks.
//!
//! The forward pass always emits exact binary spikes; only the backward pass
//! replaces the threshold derivative with k*s(kU)*(1-s(kU)). Because that
//! pairing is not the gradient of any function, finite-difference checks run
//! against a smoothed-forward twin (spikes replaced by s(kU) everywhere),
//! which shares the backward code verbatim.
//!
//! Gradients flow through the input path and through both recurrent paths of
//! the membrane recurrence (leak and reset); the reset path can be detached
//! by flag. Training is plain minibatch Adam with the leak clamped back into
//! [0, 1) after every update.

use crate::lif::{lif_rollout, LifTrajectory, LifWitness};
use crate::reconstruct::{ParallelSnn, ReadoutRule};
use crate::solver::{loss_gradient, loss_value, LossKind, LossSpec};
use crate::witness::{
    sample_gaussian_witnesses, witness_from_json, witness_to_json, Arch, LeakMode, ThrMode,
    WitnessJson,
};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TRAINABLE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SLOPE: f64 = 25.0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which parameter groups receive updates. Output weights and feedforward
/// weights train by default; leak and threshold stay fixed unless asked.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Trainability {
    pub p_in: bool,
    pub leak: bool,
    pub u_thr: bool,
    pub p_out: bool,
}

impl Default for Trainability {
    fn default() -> Self {
        Trainability {
            p_in: true,
            leak: false,
            u_thr: false,
            p_out: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SurrogateConfig {
    /// sigmoid steepness k in the surrogate derivative
    pub slope: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
    /// l2 coefficient applied to p_in and p_out gradients
    pub weight_decay: f64,
    /// drop the gradient path through the spike-reset term
    pub detach_reset: bool,
    pub trainability: Trainability,
}

impl SurrogateConfig {
    pub fn new(learning_rate: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        SurrogateConfig {
            slope: DEFAULT_SLOPE,
            learning_rate,
            epochs,
            batch_size,
            seed,
            adam: AdamParams::default(),
            weight_decay: 0.0,
            detach_reset: false,
            trainability: Trainability::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.slope > 0.0) {
            return Err(Error::Config {
                path: "surrogate.slope".into(),
                message: "must be positive".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                path: "surrogate.batch_size".into(),
                message: "must be nonzero".into(),
            });
        }
        Ok(())
    }
}

/// Forward spike semantics. Training always uses exact thresholds; the
/// smoothed twin exists so the backward pass has a finite-difference oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    ExactForward,
    Smoothed,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Surrogate derivative k*s(kU)*(1-s(kU)); also the true derivative of the
/// smoothed spike s(kU).
pub fn surrogate_derivative(u: f64, k: f64) -> f64 {
    let s = sigmoid(k * u);
    k * s * (1.0 - s)
}

/// K parallel LIF stacks with per-stack output weights.
#[derive(Clone, Debug)]
pub struct TrainableSnn {
    pub subnets: Vec<LifWitness>,
    /// per subnet, m_last x d_out
    pub p_out: Vec<Array2<f64>>,
    pub arch: Arch,
    pub readout_rule: ReadoutRule,
    pub d_out: usize,
}

impl TrainableSnn {
    pub fn k(&self) -> usize {
        self.subnets.len()
    }

    /// Fresh Gaussian-initialized network with `k` parallel stacks.
    pub fn new_random(
        arch: &Arch,
        d_out: usize,
        k: usize,
        seed: u64,
        readout_rule: ReadoutRule,
    ) -> Result<TrainableSnn> {
        let store = sample_gaussian_witnesses(
            arch,
            k,
            seed,
            LeakMode::Fixed { value: 0.9 },
            ThrMode::Fixed { value: 1.0 },
        )?;
        let m = arch.m_last();
        let p_out = (0..k)
            .map(|i| {
                let mut rng = crate::rng::stream(seed, "sg-init-out", &[i as u64]);
                let sd = 1.0 / (m as f64).sqrt();
                Array2::from_shape_fn((m, d_out), |_| {
                    rng.sample::<f64, _>(rand_distr::Normal::new(0.0, sd).unwrap())
                })
            })
            .collect();
        Ok(TrainableSnn {
            subnets: store.witnesses,
            p_out,
            arch: arch.clone(),
            readout_rule,
            d_out,
        })
    }

    /// Adopts a reconstructed network's parameters verbatim so finetuning
    /// starts from the convex solution's exact function.
    pub fn from_parallel_snn(snn: &ParallelSnn) -> TrainableSnn {
        TrainableSnn {
            subnets: snn.subnets.iter().map(|s| s.witness.clone()).collect(),
            p_out: snn.subnets.iter().map(|s| s.p_out.clone()).collect(),
            arch: snn.arch.clone(),
            readout_rule: snn.readout_rule,
            d_out: snn.d_out,
        }
    }

    fn rollout(&self, subnet: usize, inputs: &[Array2<f64>], mode: SpikeMode, k: f64) -> Result<LifTrajectory> {
        match mode {
            SpikeMode::ExactForward => lif_rollout(&self.subnets[subnet], inputs),
            SpikeMode::Smoothed => soft_rollout(&self.subnets[subnet], inputs, k),
        }
    }

    /// Summed readout over subnets; rows are samples (final_time) or t-major
    /// stacked blocks (per_timestep).
    pub fn forward(&self, inputs: &[Array2<f64>], mode: SpikeMode, k: f64) -> Result<Array2<f64>> {
        let n = inputs.first().map(|m| m.nrows()).unwrap_or(0);
        let t_len = self.arch.t_len;
        let rows = match self.readout_rule {
            ReadoutRule::FinalTime => n,
            ReadoutRule::PerTimestep => n * t_len,
        };
        let parts: Vec<Array2<f64>> = self
            .subnets
            .par_iter()
            .enumerate()
            .map(|(s, _)| -> Result<Array2<f64>> {
                let traj = self.rollout(s, inputs, mode, k)?;
                Ok(readout(&traj, &self.p_out[s], self.readout_rule, t_len))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros((rows, self.d_out));
        for p in parts {
            out += &p;
        }
        Ok(out)
    }
}

fn readout(
    traj: &LifTrajectory,
    p_out: &Array2<f64>,
    rule: ReadoutRule,
    t_len: usize,
) -> Array2<f64> {
    match rule {
        ReadoutRule::FinalTime => traj.final_spikes().dot(p_out),
        ReadoutRule::PerTimestep => {
            let n = traj.final_spikes().nrows();
            let d = p_out.ncols();
            let mut out = Array2::zeros((n * t_len, d));
            for t in 1..=t_len {
                let block = traj.final_layer_at(t).dot(p_out);
                for i in 0..n {
                    for j in 0..d {
                        out[((t - 1) * n + i, j)] = block[(i, j)];
                    }
                }
            }
            out
        }
    }
}

/// Rollout with smoothed spikes s(k*U); mirrors the exact recurrence
/// operation for operation so gradients line up.
fn soft_rollout(witness: &LifWitness, inputs: &[Array2<f64>], k: f64) -> Result<LifTrajectory> {
    witness.validate(inputs.first().map(|m| m.ncols()).unwrap_or(0))?;
    let n = inputs.first().map(|m| m.nrows()).unwrap_or(0);
    let layers = &witness.layers;
    let mut u_prev: Vec<Array2<f64>> = layers
        .iter()
        .map(|l| {
            let mut m = Array2::zeros((n, l.width()));
            m += &l.u_init;
            m
        })
        .collect();
    let mut s_prev: Vec<Array2<f64>> = layers
        .iter()
        .map(|l| Array2::zeros((n, l.width())))
        .collect();
    let mut membranes: Vec<Vec<Array2<f64>>> = vec![Vec::new(); layers.len()];
    let mut spikes: Vec<Vec<Array2<f64>>> = vec![Vec::new(); layers.len()];
    for x_t in inputs {
        let mut inp = x_t.clone();
        for (l, layer) in layers.iter().enumerate() {
            let mut u = inp.dot(&layer.p_in);
            u += &(&u_prev[l] * &layer.leak);
            u -= &(&s_prev[l] * &layer.u_thr);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::MembraneOverflow {
                    layer: l + 1,
                    t: membranes[l].len() + 1,
                });
            }
            let s = u.mapv(|v| sigmoid(k * v));
            u_prev[l] = u.clone();
            s_prev[l] = s.clone();
            membranes[l].push(u);
            spikes[l].push(s.clone());
            inp = s;
        }
    }
    Ok(LifTrajectory { membranes, spikes })
}

/// Gradients mirroring the parameter structure of a TrainableSnn.
#[derive(Clone, Debug)]
pub struct SnnGrads {
    /// [subnet][layer]
    pub p_in: Vec<Vec<Array2<f64>>>,
    pub leak: Vec<Vec<Array1<f64>>>,
    pub u_thr: Vec<Vec<Array1<f64>>>,
    /// [subnet]
    pub p_out: Vec<Array2<f64>>,
}

impl SnnGrads {
    pub fn zeros_like(snn: &TrainableSnn) -> SnnGrads {
        SnnGrads {
            p_in: snn
                .subnets
                .iter()
                .map(|w| w.layers.iter().map(|l| Array2::zeros(l.p_in.dim())).collect())
                .collect(),
            leak: snn
                .subnets
                .iter()
                .map(|w| w.layers.iter().map(|l| Array1::zeros(l.leak.len())).collect())
                .collect(),
            u_thr: snn
                .subnets
                .iter()
                .map(|w| w.layers.iter().map(|l| Array1::zeros(l.u_thr.len())).collect())
                .collect(),
            p_out: snn.p_out.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p_in
            .iter()
            .flatten()
            .flat_map(|m| m.iter())
            .chain(self.leak.iter().flatten().flat_map(|v| v.iter()))
            .chain(self.u_thr.iter().flatten().flat_map(|v| v.iter()))
            .chain(self.p_out.iter().flat_map(|m| m.iter()))
            .all(|v| v.is_finite())
    }
}

/// One forward/backward pass over a batch. Returns the loss and gradients
/// for every parameter group (the caller masks by trainability).
pub fn surrogate_forward_backward(
    snn: &TrainableSnn,
    inputs: &[Array2<f64>],
    targets: &Array2<f64>,
    loss: &LossSpec,
    mode: SpikeMode,
    slope: f64,
    detach_reset: bool,
) -> Result<(f64, SnnGrads)> {
    let t_len = self_t_len(snn, inputs)?;
    let trajs: Vec<LifTrajectory> = (0..snn.k())
        .into_par_iter()
        .map(|s| snn.rollout(s, inputs, mode, slope))
        .collect::<Result<Vec<_>>>()?;
    let n = inputs.first().map(|m| m.nrows()).unwrap_or(0);
    let rows = match snn.readout_rule {
        ReadoutRule::FinalTime => n,
        ReadoutRule::PerTimestep => n * t_len,
    };
    let mut preds = Array2::zeros((rows, snn.d_out));
    for (s, traj) in trajs.iter().enumerate() {
        preds += &readout(traj, &snn.p_out[s], snn.readout_rule, t_len);
    }
    let loss_val = loss_value(loss, &preds, targets)?;
    let g_pred = loss_gradient(loss, &preds, targets)?;

    let per_subnet: Vec<(Array2<f64>, Vec<Array2<f64>>, Vec<Array1<f64>>, Vec<Array1<f64>>)> =
        (0..snn.k())
            .into_par_iter()
            .map(|s| {
                backward_one_subnet(
                    &snn.subnets[s],
                    &trajs[s],
                    &snn.p_out[s],
                    inputs,
                    &g_pred,
                    snn.readout_rule,
                    slope,
                    detach_reset,
                )
            })
            .collect();

    let mut grads = SnnGrads::zeros_like(snn);
    for (s, (d_pout, d_pin, d_leak, d_thr)) in per_subnet.into_iter().enumerate() {
        grads.p_out[s] = d_pout;
        grads.p_in[s] = d_pin;
        grads.leak[s] = d_leak;
        grads.u_thr[s] = d_thr;
    }
    if !loss_val.is_finite() || !grads.is_finite() {
        return Err(Error::GradientOverflow);
    }
    Ok((loss_val, grads))
}

fn self_t_len(snn: &TrainableSnn, inputs: &[Array2<f64>]) -> Result<usize> {
    if inputs.len() != snn.arch.t_len {
        return Err(Error::ShapeMismatch {
            layer: 0,
            got: format!("{} timesteps", inputs.len()),
            expected: format!("{} timesteps", snn.arch.t_len),
        });
    }
    Ok(snn.arch.t_len)
}

/// BPTT through one subnet. Walking t = T..1 and l = L..1, the spike
/// gradient collects the readout term, the next layer's input path, and the
/// reset path from t+1; the membrane gradient adds the leak path from t+1.
#[allow(clippy::too_many_arguments)]
fn backward_one_subnet(
    witness: &LifWitness,
    traj: &LifTrajectory,
    p_out: &Array2<f64>,
    inputs: &[Array2<f64>],
    g_pred: &Array2<f64>,
    rule: ReadoutRule,
    slope: f64,
    detach_reset: bool,
) -> (Array2<f64>, Vec<Array2<f64>>, Vec<Array1<f64>>, Vec<Array1<f64>>) {
    let layers = &witness.layers;
    let n_layers = layers.len();
    let t_len = inputs.len();
    let n = inputs[0].nrows();

    // dL/d(final-layer spikes) per timestep, and the p_out gradient
    let g_pred_block = |t: usize| -> Array2<f64> {
        match rule {
            ReadoutRule::FinalTime => {
                if t == t_len {
                    g_pred.clone()
                } else {
                    Array2::zeros((n, g_pred.ncols()))
                }
            }
            ReadoutRule::PerTimestep => {
                let mut b = Array2::zeros((n, g_pred.ncols()));
                for i in 0..n {
                    for j in 0..g_pred.ncols() {
                        b[(i, j)] = g_pred[((t - 1) * n + i, j)];
                    }
                }
                b
            }
        }
    };
    let mut d_pout = Array2::zeros(p_out.dim());
    match rule {
        ReadoutRule::FinalTime => {
            d_pout += &traj.final_spikes().t().dot(g_pred);
        }
        ReadoutRule::PerTimestep => {
            for t in 1..=t_len {
                d_pout += &traj.final_layer_at(t).t().dot(&g_pred_block(t));
            }
        }
    }

    let mut d_pin: Vec<Array2<f64>> = layers.iter().map(|l| Array2::zeros(l.p_in.dim())).collect();
    let mut d_leak: Vec<Array1<f64>> = layers.iter().map(|l| Array1::zeros(l.width())).collect();
    let mut d_thr: Vec<Array1<f64>> = layers.iter().map(|l| Array1::zeros(l.width())).collect();

    // gU at t+1 per layer; empty at the last timestep
    let mut g_u_next: Vec<Array2<f64>> = layers
        .iter()
        .map(|l| Array2::zeros((n, l.width())))
        .collect();

    for t in (1..=t_len).rev() {
        let mut g_u_cur: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        g_u_cur.resize(n_layers, Array2::zeros((0, 0)));
        for l in (0..n_layers).rev() {
            let mut g_s = if l == n_layers - 1 {
                g_pred_block(t).dot(&p_out.t())
            } else {
                // input path into layer l+1 at the same t
                g_u_cur[l + 1].dot(&layers[l + 1].p_in.t())
            };
            if t < t_len && !detach_reset {
                // reset path: U_l^{t+1} -= S_l^t * u_thr
                g_s -= &(&g_u_next[l] * &layers[l].u_thr);
            }
            let u_t = &traj.membranes[l][t - 1];
            let mut g_u = Array2::from_shape_fn(g_s.dim(), |(i, j)| {
                g_s[(i, j)] * surrogate_derivative(u_t[(i, j)], slope)
            });
            if t < t_len {
                g_u += &(&g_u_next[l] * &layers[l].leak);
            }

            // parameter contributions at (l, t)
            let below: &Array2<f64> = if l == 0 {
                &inputs[t - 1]
            } else {
                &traj.spikes[l - 1][t - 1]
            };
            d_pin[l] += &below.t().dot(&g_u);
            let u_prev_owned;
            let u_prev: &Array2<f64> = if t == 1 {
                u_prev_owned = {
                    let mut m = Array2::zeros((n, layers[l].width()));
                    m += &layers[l].u_init;
                    m
                };
                &u_prev_owned
            } else {
                &traj.membranes[l][t - 2]
            };
            d_leak[l] += &(&g_u * u_prev).sum_axis(Axis(0));
            if t > 1 {
                let s_prev = &traj.spikes[l][t - 2];
                d_thr[l] -= &(&g_u * s_prev).sum_axis(Axis(0));
            }
            g_u_cur[l] = g_u;
        }
        g_u_next = g_u_cur;
    }
    (d_pout, d_pin, d_leak, d_thr)
}

/// Dataset view the trainer consumes: `inputs[t]` is the timestep-t slice of
/// all samples; targets rows follow the readout rule (samples, or t-major
/// stacked blocks).
#[derive(Clone, Debug)]
pub struct SupervisedData {
    pub inputs: Vec<Array2<f64>>,
    pub targets: Array2<f64>,
}

impl SupervisedData {
    pub fn n_samples(&self) -> usize {
        self.inputs.first().map(|m| m.nrows()).unwrap_or(0)
    }

    /// Row-slices one batch, keeping the t-major target layout.
    pub fn batch(&self, idx: &[usize], rule: ReadoutRule) -> SupervisedData {
        let t_len = self.inputs.len();
        let n = self.n_samples();
        let inputs = self
            .inputs
            .iter()
            .map(|m| {
                Array2::from_shape_fn((idx.len(), m.ncols()), |(r, c)| m[(idx[r], c)])
            })
            .collect();
        let targets = match rule {
            ReadoutRule::FinalTime => Array2::from_shape_fn(
                (idx.len(), self.targets.ncols()),
                |(r, c)| self.targets[(idx[r], c)],
            ),
            ReadoutRule::PerTimestep => Array2::from_shape_fn(
                (idx.len() * t_len, self.targets.ncols()),
                |(r, c)| {
                    let t = r / idx.len();
                    let i = idx[r % idx.len()];
                    self.targets[(t * n + i, c)]
                },
            ),
        };
        SupervisedData { inputs, targets }
    }
}

/// Loss shape for training: a kind plus optional per-timestep weights
/// (per_timestep readout only) and per-output weights.
#[derive(Clone, Debug)]
pub struct TrainLossSpec {
    pub kind: LossKind,
    pub timestep_weights: Option<Vec<f64>>,
    pub col_weights: Option<Array1<f64>>,
}

impl TrainLossSpec {
    pub fn plain(kind: LossKind) -> TrainLossSpec {
        TrainLossSpec {
            kind,
            timestep_weights: None,
            col_weights: None,
        }
    }

    /// Expands timestep weights to per-row weights for a batch of n samples.
    pub fn resolve(&self, n: usize, rule: ReadoutRule) -> LossSpec {
        let row_weights = self.timestep_weights.as_ref().map(|ws| {
            debug_assert_eq!(rule, ReadoutRule::PerTimestep);
            let mut r = Array1::zeros(n * ws.len());
            for (t, w) in ws.iter().enumerate() {
                for i in 0..n {
                    r[t * n + i] = *w;
                }
            }
            r
        });
        LossSpec {
            kind: self.kind,
            row_weights,
            col_weights: self.col_weights.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub diverged: bool,
}

struct AdamState {
    m: SnnGrads,
    v: SnnGrads,
    t: u64,
}

fn adam_step(
    p: &mut f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    t: u64,
    lr: f64,
    a: &AdamParams,
) {
    *m = a.beta1 * *m + (1.0 - a.beta1) * g;
    *v = a.beta2 * *v + (1.0 - a.beta2) * g * g;
    let mh = *m / (1.0 - a.beta1.powi(t as i32));
    let vh = *v / (1.0 - a.beta2.powi(t as i32));
    *p -= lr * mh / (vh.sqrt() + a.eps);
}

fn apply_update(
    snn: &mut TrainableSnn,
    grads: &SnnGrads,
    state: &mut AdamState,
    cfg: &SurrogateConfig,
) {
    state.t += 1;
    let t = state.t;
    let lr = cfg.learning_rate;
    let tr = cfg.trainability;
    for s in 0..snn.subnets.len() {
        for l in 0..snn.subnets[s].layers.len() {
            if tr.p_in {
                let layer = &mut snn.subnets[s].layers[l];
                let g = &grads.p_in[s][l];
                let m = &mut state.m.p_in[s][l];
                let v = &mut state.v.p_in[s][l];
                for (idx, p) in layer.p_in.indexed_iter_mut() {
                    let gi = g[idx] + cfg.weight_decay * *p;
                    adam_step(p, gi, &mut m[idx], &mut v[idx], t, lr, &cfg.adam);
                }
            }
            if tr.leak {
                let layer = &mut snn.subnets[s].layers[l];
                let g = &grads.leak[s][l];
                let m = &mut state.m.leak[s][l];
                let v = &mut state.v.leak[s][l];
                for (idx, p) in layer.leak.indexed_iter_mut() {
                    adam_step(p, g[idx], &mut m[idx], &mut v[idx], t, lr, &cfg.adam);
                    *p = p.clamp(0.0, 1.0 - 1e-9);
                }
            }
            if tr.u_thr {
                let layer = &mut snn.subnets[s].layers[l];
                let g = &grads.u_thr[s][l];
                let m = &mut state.m.u_thr[s][l];
                let v = &mut state.v.u_thr[s][l];
                for (idx, p) in layer.u_thr.indexed_iter_mut() {
                    adam_step(p, g[idx], &mut m[idx], &mut v[idx], t, lr, &cfg.adam);
                }
            }
        }
        if tr.p_out {
            let g = &grads.p_out[s];
            let m = &mut state.m.p_out[s];
            let v = &mut state.v.p_out[s];
            for (idx, p) in snn.p_out[s].indexed_iter_mut() {
                let gi = g[idx] + cfg.weight_decay * *p;
                adam_step(p, gi, &mut m[idx], &mut v[idx], t, lr, &cfg.adam);
            }
        }
    }
}

/// Full-dataset loss with exact spikes; the metric tracked for checkpointing.
pub fn evaluate_loss(
    snn: &TrainableSnn,
    data: &SupervisedData,
    loss: &TrainLossSpec,
    slope: f64,
) -> Result<f64> {
    let preds = snn.forward(&data.inputs, SpikeMode::ExactForward, slope)?;
    let spec = loss.resolve(data.n_samples(), snn.readout_rule);
    loss_value(&spec, &preds, &data.targets)
}

/// Epoch loop with minibatch Adam. Returns the best-validation checkpoint
/// and the per-epoch curve; on divergence the loop aborts and hands back the
/// last finite checkpoint, flagging the final record.
pub fn train_sg(
    init: TrainableSnn,
    config: &SurrogateConfig,
    loss: &TrainLossSpec,
    train: &SupervisedData,
    val: &SupervisedData,
) -> Result<(TrainableSnn, Vec<EpochRecord>)> {
    config.validate()?;
    let mut snn = init;
    let mut state = AdamState {
        m: SnnGrads::zeros_like(&snn),
        v: SnnGrads::zeros_like(&snn),
        t: 0,
    };
    let n = train.n_samples();
    let mut history = Vec::with_capacity(config.epochs + 1);
    let train_loss0 = evaluate_loss(&snn, train, loss, config.slope)?;
    let val_loss0 = evaluate_loss(&snn, val, loss, config.slope)?;
    history.push(EpochRecord {
        epoch: 0,
        train_loss: train_loss0,
        val_loss: val_loss0,
        diverged: false,
    });
    let mut best = snn.clone();
    let mut best_val = val_loss0;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = crate::rng::stream(config.seed, "sg-shuffle", &[epoch as u64]);
        order.shuffle(&mut rng);
        let mut aborted = false;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.batch(chunk, snn.readout_rule);
            let spec = loss.resolve(chunk.len(), snn.readout_rule);
            match surrogate_forward_backward(
                &snn,
                &batch.inputs,
                &batch.targets,
                &spec,
                SpikeMode::ExactForward,
                config.slope,
                config.detach_reset,
            ) {
                Ok((_, grads)) => apply_update(&mut snn, &grads, &mut state, config),
                Err(Error::GradientOverflow) | Err(Error::MembraneOverflow { .. }) => {
                    aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if aborted {
            history.push(EpochRecord {
                epoch,
                train_loss: f64::NAN,
                val_loss: f64::NAN,
                diverged: true,
            });
            break;
        }
        let train_loss = evaluate_loss(&snn, train, loss, config.slope)?;
        let val_loss = evaluate_loss(&snn, val, loss, config.slope)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            history.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
                diverged: true,
            });
            break;
        }
        if val_loss < best_val {
            best_val = val_loss;
            best = snn.clone();
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            diverged: false,
        });
    }
    Ok((best, history))
}

#[derive(Serialize, Deserialize)]
struct TrainableSubnetJson {
    witness: WitnessJson,
    p_out: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TrainableJson {
    format_version: u32,
    stage: String,
    arch: Arch,
    readout_rule: ReadoutRule,
    d_out: usize,
    subnets: Vec<TrainableSubnetJson>,
}

pub fn save_trainable(snn: &TrainableSnn, stage: &str, path: &Path) -> Result<()> {
    let doc = TrainableJson {
        format_version: TRAINABLE_FORMAT_VERSION,
        stage: stage.to_string(),
        arch: snn.arch.clone(),
        readout_rule: snn.readout_rule,
        d_out: snn.d_out,
        subnets: snn
            .subnets
            .iter()
            .zip(&snn.p_out)
            .map(|(w, p)| TrainableSubnetJson {
                witness: witness_to_json(w),
                p_out: crate::witness::matrix_to_rows(p),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_trainable(path: &Path) -> Result<(TrainableSnn, String)> {
    let doc: TrainableJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.format_version != TRAINABLE_FORMAT_VERSION {
        return Err(Error::Artifact {
            path: path.display().to_string(),
            message: format!("unsupported checkpoint format {}", doc.format_version),
        });
    }
    let mut subnets = Vec::new();
    let mut p_out = Vec::new();
    for s in &doc.subnets {
        let w = witness_from_json(&s.witness)?;
        if !doc.arch.matches(&w) {
            return Err(Error::IncompatibleCheckpoint(
                "subnet does not match declared arch".into(),
            ));
        }
        let p = crate::witness::rows_to_matrix(&s.p_out)?;
        if p.dim() != (doc.arch.m_last(), doc.d_out) {
            return Err(Error::IncompatibleCheckpoint("p_out shape mismatch".into()));
        }
        subnets.push(w);
        p_out.push(p);
    }
    Ok((
        TrainableSnn {
            subnets,
            p_out,
            arch: doc.arch,
            readout_rule: doc.readout_rule,
            d_out: doc.d_out,
        },
        doc.stage,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lif::LifLayerParams;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn surrogate_derivative_at_zero() {
        assert_eq!(surrogate_derivative(0.0, 1.0), 0.25);
        assert_abs_diff_eq!(surrogate_derivative(0.0, 25.0), 6.25, epsilon = 1e-12);
    }

    fn micro_snn(seed: u64, widths: Vec<usize>, t_len: usize, d_out: usize) -> TrainableSnn {
        let arch = Arch {
            input_dim: 2,
            widths,
            t_len,
        };
        TrainableSnn::new_random(&arch, d_out, 1, seed, ReadoutRule::FinalTime).unwrap()
    }

    fn micro_inputs(seed: u64, t_len: usize, n: usize, d: usize) -> Vec<Array2<f64>> {
        let mut rng = crate::rng::stream(seed, "surrogate-test", &[0]);
        (0..t_len)
            .map(|_| Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    // One neuron, one timestep, hand-derived chain rule:
    //   U = x w, S = H(U), pred = S q, L = 0.5 (pred - y)^2
    //   dq = S (pred - y); dw = x (pred - y) q k s(kU)(1 - s(kU))
    #[test]
    fn one_step_chain_rule_matches_hand_derivation() {
        let (x, w, q, y, k) = (0.7, 0.9, 1.3, 0.2, 4.0);
        let witness = LifWitness {
            layers: vec![LifLayerParams {
                p_in: array![[w]],
                leak: array![0.5],
                u_thr: array![1.0],
                u_init: array![0.0],
            }],
        };
        let snn = TrainableSnn {
            subnets: vec![witness],
            p_out: vec![array![[q]]],
            arch: Arch {
                input_dim: 1,
                widths: vec![1],
                t_len: 1,
            },
            readout_rule: ReadoutRule::FinalTime,
            d_out: 1,
        };
        let inputs = vec![array![[x]]];
        let targets = array![[y]];
        let (loss, grads) = surrogate_forward_backward(
            &snn,
            &inputs,
            &targets,
            &LossSpec::plain(LossKind::Squared),
            SpikeMode::ExactForward,
            k,
            false,
        )
        .unwrap();
        let u = x * w;
        let s = f64::from(u >= 0.0);
        let pred = s * q;
        assert_abs_diff_eq!(loss, 0.5 * (pred - y) * (pred - y), epsilon = 1e-15);
        let sig = 1.0 / (1.0 + (-k * u).exp());
        let dq = s * (pred - y);
        let dw = x * (pred - y) * q * k * sig * (1.0 - sig);
        assert_abs_diff_eq!(grads.p_out[0][(0, 0)], dq, epsilon = 1e-12);
        assert_abs_diff_eq!(grads.p_in[0][0][(0, 0)], dw, epsilon = 1e-12);
        // leak gradient at t=1 multiplies u_init = 0; threshold sees S^0 = 0
        assert_eq!(grads.leak[0][0][0], 0.0);
        assert_eq!(grads.u_thr[0][0][0], 0.0);
    }

    #[test]
    fn forward_spikes_are_binary() {
        let snn = micro_snn(3, vec![4, 3], 3, 2);
        let inputs = micro_inputs(5, 3, 6, 2);
        for s in 0..snn.k() {
            let traj = snn.rollout(s, &inputs, SpikeMode::ExactForward, 25.0).unwrap();
            for per_layer in &traj.spikes {
                for mat in per_layer {
                    assert!(mat.iter().all(|v| *v == 0.0 || *v == 1.0));
                }
            }
        }
    }

    // Central finite differences on the smoothed-forward network; the
    // backward pass is its true gradient.
    #[test]
    fn smoothed_gradients_match_finite_differences() {
        let arch = Arch {
            input_dim: 2,
            widths: vec![3, 2],
            t_len: 3,
        };
        let mut snn = TrainableSnn::new_random(&arch, 2, 1, 11, ReadoutRule::FinalTime).unwrap();
        // keep membranes away from saturation so FD is well-conditioned
        for l in &mut snn.subnets[0].layers {
            l.p_in.mapv_inplace(|v| v * 1.5);
        }
        let inputs = micro_inputs(13, 3, 5, 2);
        let mut rng = crate::rng::stream(17, "surrogate-test", &[1]);
        let targets = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let spec = LossSpec::plain(LossKind::Squared);
        let k = 4.0;
        let (_, grads) = surrogate_forward_backward(
            &snn, &inputs, &targets, &spec, SpikeMode::Smoothed, k, false,
        )
        .unwrap();

        let h = 1e-6;
        let mut checked = 0;
        let eval = |snn: &TrainableSnn| -> f64 {
            let preds = snn.forward(&inputs, SpikeMode::Smoothed, k).unwrap();
            loss_value(&spec, &preds, &targets).unwrap()
        };
        for l in 0..2 {
            let dim = snn.subnets[0].layers[l].p_in.dim();
            for i in 0..dim.0 {
                for j in 0..dim.1 {
                    let mut plus = snn.clone();
                    plus.subnets[0].layers[l].p_in[(i, j)] += h;
                    let mut minus = snn.clone();
                    minus.subnets[0].layers[l].p_in[(i, j)] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = grads.p_in[0][l][(i, j)];
                    let rel = (fd - an).abs() / 1.0f64.max(an.abs());
                    assert!(rel <= 1e-4, "p_in[{l}][{i},{j}]: fd {fd} vs {an}");
                    checked += 1;
                }
            }
            // leak and threshold paths
            for nrn in 0..snn.subnets[0].layers[l].width() {
                let mut plus = snn.clone();
                plus.subnets[0].layers[l].leak[nrn] += h;
                let mut minus = snn.clone();
                minus.subnets[0].layers[l].leak[nrn] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.leak[0][l][nrn];
                assert!(
                    (fd - an).abs() / 1.0f64.max(an.abs()) <= 1e-4,
                    "leak[{l}][{nrn}]: fd {fd} vs {an}"
                );
                let mut plus = snn.clone();
                plus.subnets[0].layers[l].u_thr[nrn] += h;
                let mut minus = snn.clone();
                minus.subnets[0].layers[l].u_thr[nrn] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.u_thr[0][l][nrn];
                assert!(
                    (fd - an).abs() / 1.0f64.max(an.abs()) <= 1e-4,
                    "u_thr[{l}][{nrn}]: fd {fd} vs {an}"
                );
                checked += 2;
            }
        }
        for (idx, _) in snn.p_out[0].clone().indexed_iter() {
            let mut plus = snn.clone();
            plus.p_out[0][idx] += h;
            let mut minus = snn.clone();
            minus.p_out[0][idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grads.p_out[0][idx];
            assert!((fd - an).abs() / 1.0f64.max(an.abs()) <= 1e-4);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn smoothed_gradients_per_timestep_readout() {
        let arch = Arch {
            input_dim: 2,
            widths: vec![3],
            t_len: 3,
        };
        let mut snn = TrainableSnn::new_random(&arch, 1, 1, 19, ReadoutRule::FinalTime).unwrap();
        snn.readout_rule = ReadoutRule::PerTimestep;
        let inputs = micro_inputs(23, 3, 4, 2);
        let mut rng = crate::rng::stream(29, "surrogate-test", &[2]);
        let targets = Array2::from_shape_fn((12, 1), |_| rng.gen_range(-1.0..1.0));
        let spec = TrainLossSpec {
            kind: LossKind::Squared,
            timestep_weights: Some(vec![0.5, 1.0, 1.5]),
            col_weights: None,
        }
        .resolve(4, ReadoutRule::PerTimestep);
        let k = 3.0;
        let (_, grads) = surrogate_forward_backward(
            &snn, &inputs, &targets, &spec, SpikeMode::Smoothed, k, false,
        )
        .unwrap();
        let h = 1e-6;
        let eval = |snn: &TrainableSnn| -> f64 {
            let preds = snn.forward(&inputs, SpikeMode::Smoothed, k).unwrap();
            loss_value(&spec, &preds, &targets).unwrap()
        };
        for (idx, _) in snn.subnets[0].layers[0].p_in.clone().indexed_iter() {
            let mut plus = snn.clone();
            plus.subnets[0].layers[0].p_in[idx] += h;
            let mut minus = snn.clone();
            minus.subnets[0].layers[0].p_in[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grads.p_in[0][0][idx];
            assert!(
                (fd - an).abs() / 1.0f64.max(an.abs()) <= 1e-4,
                "fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn detach_reset_changes_gradient_path() {
        let arch = Arch {
            input_dim: 2,
            widths: vec![3],
            t_len: 3,
        };
        let snn = TrainableSnn::new_random(&arch, 1, 1, 31, ReadoutRule::FinalTime).unwrap();
        let inputs = micro_inputs(37, 3, 5, 2);
        let mut rng = crate::rng::stream(41, "surrogate-test", &[3]);
        let targets = Array2::from_shape_fn((5, 1), |_| rng.gen_range(-1.0..1.0));
        let spec = LossSpec::plain(LossKind::Squared);
        let (_, with_reset) = surrogate_forward_backward(
            &snn, &inputs, &targets, &spec, SpikeMode::ExactForward, 25.0, false,
        )
        .unwrap();
        let (_, without) = surrogate_forward_backward(
            &snn, &inputs, &targets, &spec, SpikeMode::ExactForward, 25.0, true,
        )
        .unwrap();
        let diff: f64 = with_reset.p_in[0][0]
            .iter()
            .zip(without.p_in[0][0].iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0, "reset path contributed nothing");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let snn = micro_snn(43, vec![3], 2, 1);
        let before = snn.clone();
        let inputs = micro_inputs(47, 2, 8, 2);
        let mut rng = crate::rng::stream(53, "surrogate-test", &[4]);
        let targets = Array2::from_shape_fn((8, 1), |_| rng.gen_range(-1.0..1.0));
        let data = SupervisedData {
            inputs,
            targets,
        };
        let mut cfg = SurrogateConfig::new(0.0, 3, 4, 59);
        cfg.trainability.leak = true;
        cfg.trainability.u_thr = true;
        let loss = TrainLossSpec::plain(LossKind::Squared);
        let (trained, history) = train_sg(snn, &cfg, &loss, &data, &data).unwrap();
        assert_eq!(history.len(), 4);
        for (a, b) in trained.subnets.iter().zip(&before.subnets) {
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                assert_eq!(la.p_in, lb.p_in);
                assert_eq!(la.leak, lb.leak);
                assert_eq!(la.u_thr, lb.u_thr);
            }
        }
        for (a, b) in trained.p_out.iter().zip(&before.p_out) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn memorizes_micro_task() {
        // n=8 random binary task; loss should fall well below the initial
        // value within a few hundred epochs
        let arch = Arch {
            input_dim: 2,
            widths: vec![6],
            t_len: 2,
        };
        let snn = TrainableSnn::new_random(&arch, 1, 4, 61, ReadoutRule::FinalTime).unwrap();
        let mut rng = crate::rng::stream(67, "surrogate-test", &[5]);
        let inputs: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let targets = Array2::from_shape_fn((8, 1), |_| f64::from(rng.gen_bool(0.5)));
        let data = SupervisedData { inputs, targets };
        let cfg = SurrogateConfig::new(1e-2, 500, 8, 71);
        let loss = TrainLossSpec::plain(LossKind::Squared);
        let (_, history) = train_sg(snn, &cfg, &loss, &data, &data).unwrap();
        let best = history
            .iter()
            .filter(|r| !r.diverged)
            .map(|r| r.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "best loss {best}");
        assert!(!history.iter().any(|r| r.diverged));
    }

    #[test]
    fn reproducible_training() {
        let arch = Arch {
            input_dim: 2,
            widths: vec![4],
            t_len: 2,
        };
        let mut rng = crate::rng::stream(73, "surrogate-test", &[6]);
        let inputs: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((10, 2), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let targets = Array2::from_shape_fn((10, 1), |_| rng.gen_range(-1.0..1.0));
        let data = SupervisedData { inputs, targets };
        let cfg = SurrogateConfig::new(5e-3, 10, 4, 79);
        let loss = TrainLossSpec::plain(LossKind::Squared);
        let run = || {
            let snn = TrainableSnn::new_random(&arch, 1, 2, 83, ReadoutRule::FinalTime).unwrap();
            train_sg(snn, &cfg, &loss, &data, &data).unwrap()
        };
        let (snn_a, hist_a) = run();
        let (snn_b, hist_b) = run();
        for (ra, rb) in hist_a.iter().zip(&hist_b) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
        }
        for (a, b) in snn_a.p_out.iter().zip(&snn_b.p_out) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trainable_checkpoint_roundtrip() {
        let snn = micro_snn(89, vec![3, 2], 2, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sg.json");
        save_trainable(&snn, "sg", &path).unwrap();
        let (loaded, stage) = load_trainable(&path).unwrap();
        assert_eq!(stage, "sg");
        assert_eq!(loaded.k(), snn.k());
        for (a, b) in loaded.subnets.iter().zip(&snn.subnets) {
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                assert_eq!(la.p_in, lb.p_in);
            }
        }
        let inputs = micro_inputs(97, 2, 4, 2);
        assert_eq!(
            loaded
                .forward(&inputs, SpikeMode::ExactForward, 25.0)
                .unwrap(),
            snn.forward(&inputs, SpikeMode::ExactForward, 25.0).unwrap()
        );
    }

    #[test]
    fn divergence_aborts_with_last_finite_checkpoint() {
        let arch = Arch {
            input_dim: 2,
            widths: vec![3],
            t_len: 2,
        };
        let snn = TrainableSnn::new_random(&arch, 1, 1, 101, ReadoutRule::FinalTime).unwrap();
        let mut rng = crate::rng::stream(103, "surrogate-test", &[7]);
        let inputs: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        // targets beyond sqrt(f64::MAX) overflow the squared loss at once
        let targets = Array2::from_elem((6, 1), 1e200);
        let data = SupervisedData { inputs, targets };
        let cfg = SurrogateConfig::new(1e-2, 50, 6, 107);
        let loss = TrainLossSpec::plain(LossKind::Squared);
        let (returned, history) = train_sg(snn, &cfg, &loss, &data, &data).unwrap();
        assert!(history.iter().any(|r| r.diverged), "no divergence recorded");
        // the returned checkpoint itself is still finite and usable
        assert!(returned
            .subnets
            .iter()
            .all(|w| w.layers.iter().all(|l| l.p_in.iter().all(|v| v.is_finite()))));
        let sane = SupervisedData {
            inputs: data.inputs.clone(),
            targets: Array2::zeros((6, 1)),
        };
        let v = evaluate_loss(&returned, &sane, &loss, cfg.slope).unwrap();
        assert!(v.is_finite());
    }
}
