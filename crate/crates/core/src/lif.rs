//! Exact forward dynamics for LIF networks and generic recurrent threshold nets.
//!
//! The membrane recurrence per hidden layer l is
//!
//! ```text
//! U_l^t = S_{l-1}^t P_in + U_l^{t-1} * leak - S_l^{t-1} * u_thr
//! S_l^t = threshold(U_l^t)
//! ```
//!
//! with soft reset (the threshold is subtracted, the membrane is not zeroed),
//! S_l^0 = 0 and U_l^0 = u_init. Spikes are exact: threshold(x) = 1 iff x >= 0,
//! and IEEE -0.0 counts as >= 0. No epsilon band anywhere; dictionary
//! deduplication depends on this determinism.

use crate::{Error, Result};
use ndarray::{Array1, Array2};

/// Parameters of one hidden LIF layer. `p_in` is (width_prev x width); the
/// leak, threshold and initial membrane are per-neuron vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LifLayerParams {
    pub p_in: Array2<f64>,
    pub leak: Array1<f64>,
    pub u_thr: Array1<f64>,
    pub u_init: Array1<f64>,
}

impl LifLayerParams {
    pub fn width(&self) -> usize {
        self.p_in.ncols()
    }

    pub fn fan_in(&self) -> usize {
        self.p_in.nrows()
    }
}

/// Frozen hidden dynamics: the ordered hidden layers 1..=L-1 of a network.
/// The output layer is deliberately absent.
#[derive(Debug, Clone, PartialEq)]
pub struct LifWitness {
    pub layers: Vec<LifLayerParams>,
}

impl LifWitness {
    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn final_width(&self) -> usize {
        self.layers.last().map(|l| l.width()).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.width()).collect()
    }

    /// Shape chaining, leak range and finiteness checks.
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let mut prev = input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.p_in.nrows() != prev {
                return Err(Error::ShapeMismatch {
                    layer: l + 1,
                    got: format!("p_in {}x{}", layer.p_in.nrows(), layer.p_in.ncols()),
                    expected: format!("p_in {}x{}", prev, layer.p_in.ncols()),
                });
            }
            let w = layer.width();
            for (name, v) in [
                ("leak", &layer.leak),
                ("u_thr", &layer.u_thr),
                ("u_init", &layer.u_init),
            ] {
                if v.len() != w {
                    return Err(Error::ShapeMismatch {
                        layer: l + 1,
                        got: format!("{} len {}", name, v.len()),
                        expected: format!("{} len {}", name, w),
                    });
                }
            }
            for (i, &b) in layer.leak.iter().enumerate() {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::LeakOutOfRange {
                        layer: l + 1,
                        neuron: i,
                        value: b,
                    });
                }
            }
            if layer.p_in.iter().any(|v| !v.is_finite())
                || layer.u_thr.iter().any(|v| !v.is_finite())
                || layer.u_init.iter().any(|v| !v.is_finite())
            {
                return Err(Error::NonFinitePreActivation);
            }
            prev = w;
        }
        Ok(())
    }
}

/// Per-layer parameters of a generic recurrent threshold network:
/// H_l^t = threshold(H_{l-1}^t p_in + H_l^{t-1} p_rec).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRnnParams {
    pub p_in: Array2<f64>,
    pub p_rec: Array2<f64>,
}

/// Exact binary threshold: 1 iff x >= 0 (so 0.0 and -0.0 both fire).
pub fn threshold(x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePreActivation);
    }
    Ok(x.mapv(|v| if v >= 0.0 { 1.0 } else { 0.0 }))
}

/// Full membrane and spike history of a rollout, indexed `[layer][t-1]`.
#[derive(Debug, Clone)]
pub struct LifTrajectory {
    pub membranes: Vec<Vec<Array2<f64>>>,
    pub spikes: Vec<Vec<Array2<f64>>>,
}

impl LifTrajectory {
    /// Final-layer spikes at the last timestep.
    pub fn final_spikes(&self) -> &Array2<f64> {
        self.spikes.last().unwrap().last().unwrap()
    }

    /// Final-layer spikes at timestep t (1-based).
    pub fn final_layer_at(&self, t: usize) -> &Array2<f64> {
        &self.spikes.last().unwrap()[t - 1]
    }
}

/// Mutable rollout state for timestep-at-a-time evaluation (needed when the
/// input at t depends on the model's output at t-1, e.g. autoregressive carry).
pub struct LifState<'a> {
    witness: &'a LifWitness,
    t: usize,
    u: Vec<Array2<f64>>,
    s: Vec<Array2<f64>>,
}

impl<'a> LifState<'a> {
    pub fn new(witness: &'a LifWitness, n_samples: usize) -> Self {
        let u = witness
            .layers
            .iter()
            .map(|l| {
                let mut m = Array2::zeros((n_samples, l.width()));
                m += &l.u_init;
                m
            })
            .collect();
        let s = witness
            .layers
            .iter()
            .map(|l| Array2::zeros((n_samples, l.width())))
            .collect();
        LifState {
            witness,
            t: 0,
            u,
            s,
        }
    }

    /// Advance one timestep; returns spikes of every layer at the new t.
    pub fn step(&mut self, x_t: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        self.t += 1;
        let mut inp = x_t.clone();
        let mut out = Vec::with_capacity(self.witness.layers.len());
        for (l, layer) in self.witness.layers.iter().enumerate() {
            if inp.ncols() != layer.fan_in() {
                return Err(Error::ShapeMismatch {
                    layer: l + 1,
                    got: format!("input width {}", inp.ncols()),
                    expected: format!("input width {}", layer.fan_in()),
                });
            }
            let mut u = inp.dot(&layer.p_in);
            u += &(&self.u[l] * &layer.leak);
            u -= &(&self.s[l] * &layer.u_thr);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::MembraneOverflow {
                    layer: l + 1,
                    t: self.t,
                });
            }
            let s = threshold(&u)?;
            self.u[l] = u;
            self.s[l] = s.clone();
            inp = s.clone();
            out.push(s);
        }
        Ok(out)
    }

    /// Membranes after the last step, one matrix per layer.
    pub fn membranes(&self) -> &[Array2<f64>] {
        &self.u
    }
}

/// Roll a witness over T input matrices (each n x input_dim), returning the
/// full trajectory.
pub fn lif_rollout(witness: &LifWitness, inputs: &[Array2<f64>]) -> Result<LifTrajectory> {
    assert!(!inputs.is_empty(), "T >= 1 required");
    witness.validate(inputs[0].ncols())?;
    let n = inputs[0].nrows();
    let mut state = LifState::new(witness, n);
    let mut membranes: Vec<Vec<Array2<f64>>> = vec![Vec::new(); witness.layers.len()];
    let mut spikes: Vec<Vec<Array2<f64>>> = vec![Vec::new(); witness.layers.len()];
    for x_t in inputs {
        let layer_spikes = state.step(x_t)?;
        for (l, s) in layer_spikes.into_iter().enumerate() {
            membranes[l].push(state.u[l].clone());
            spikes[l].push(s);
        }
    }
    Ok(LifTrajectory { membranes, spikes })
}

/// Roll a generic threshold RNN; returns binary states `[layer][t-1]`.
pub fn threshold_rnn_rollout(
    layers: &[ThresholdRnnParams],
    inputs: &[Array2<f64>],
) -> Result<Vec<Vec<Array2<f64>>>> {
    assert!(!inputs.is_empty(), "T >= 1 required");
    let n = inputs[0].nrows();
    let mut h_prev: Vec<Array2<f64>> = layers
        .iter()
        .map(|l| Array2::zeros((n, l.p_rec.ncols())))
        .collect();
    let mut traj: Vec<Vec<Array2<f64>>> = vec![Vec::new(); layers.len()];
    for x_t in inputs {
        let mut inp = x_t.clone();
        for (l, layer) in layers.iter().enumerate() {
            if inp.ncols() != layer.p_in.nrows() {
                return Err(Error::ShapeMismatch {
                    layer: l + 1,
                    got: format!("input width {}", inp.ncols()),
                    expected: format!("input width {}", layer.p_in.nrows()),
                });
            }
            let pre = inp.dot(&layer.p_in) + h_prev[l].dot(&layer.p_rec);
            let h = threshold(&pre)?;
            h_prev[l] = h.clone();
            traj[l].push(h.clone());
            inp = h;
        }
    }
    Ok(traj)
}

/// Membrane rescaling: per layer, multiply p_in columns, u_thr and u_init by
/// the positive per-neuron scales. Leak is untouched (it conjugates to itself
/// for diagonal scaling). Spike trajectories are invariant.
pub fn lif_rescale(witness: &LifWitness, scales: &[Array1<f64>]) -> Result<LifWitness> {
    assert_eq!(scales.len(), witness.layers.len(), "one scale vector per layer");
    let mut layers = Vec::with_capacity(witness.layers.len());
    for (l, (layer, a)) in witness.layers.iter().zip(scales).enumerate() {
        for (i, &v) in a.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositiveScale {
                    layer: l + 1,
                    neuron: i,
                    value: v,
                });
            }
        }
        let mut p_in = layer.p_in.clone();
        for (mut col, &ai) in p_in.columns_mut().into_iter().zip(a.iter()) {
            col *= ai;
        }
        layers.push(LifLayerParams {
            p_in,
            leak: layer.leak.clone(),
            u_thr: &layer.u_thr * a,
            u_init: &layer.u_init * a,
        });
    }
    Ok(LifWitness { layers })
}
