//! Turning a certified coefficient vector back into an executable network.
//!
//! Each support column of the convex solution is witnessed by a concrete
//! (witness, final-layer neuron) pair, so the solution lifts to a K-parallel
//! LIF-SNN: subnetwork k runs witness omega_{i_k} and reads out through an
//! output matrix that places the coefficient row on the generating neuron and
//! zero elsewhere. The masking (rather than spreading w/m_last uniformly over
//! all final-layer rows) is deliberate: sampled witnesses do not produce
//! identical columns per neuron, and fidelity to D w_tilde takes precedence.
//! The lift is exact up to float summation order; `verify_reconstruction`
//! recomputes both sides and also re-rolls every subnet to confirm its spike
//! column bit for bit.

use crate::dictionary::SpikeDictionary;
use crate::lif::{lif_rollout, LifWitness};
use crate::witness::{witness_from_json, witness_to_json, Arch, WitnessJson, WitnessStore};
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SNN_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutRule {
    /// outputs read from final-time spikes only
    FinalTime,
    /// outputs read at every timestep; prediction rows stack T blocks
    PerTimestep,
}

#[derive(Clone, Debug)]
pub struct Subnet {
    pub witness: LifWitness,
    /// m_last x d_out, nonzero only on the generating neuron's row
    pub p_out: Array2<f64>,
    /// dictionary column this subnet reproduces
    pub column: usize,
    /// final-layer neuron that generated the column
    pub neuron: usize,
}

#[derive(Clone, Debug)]
pub struct ParallelSnn {
    pub subnets: Vec<Subnet>,
    pub arch: Arch,
    pub readout_rule: ReadoutRule,
    pub d_out: usize,
}

impl ParallelSnn {
    pub fn k(&self) -> usize {
        self.subnets.len()
    }

    /// Sum of per-subnet readouts. `inputs[t]` holds the timestep-t slice of
    /// all samples; output rows are samples (final_time) or timestep-major
    /// stacked blocks t*n + i (per_timestep).
    pub fn forward(&self, inputs: &[Array2<f64>]) -> Result<Array2<f64>> {
        let n = inputs.first().map(|m| m.nrows()).unwrap_or(0);
        let rows = match self.readout_rule {
            ReadoutRule::FinalTime => n,
            ReadoutRule::PerTimestep => n * self.arch.t_len,
        };
        let parts: Vec<Array2<f64>> = self
            .subnets
            .par_iter()
            .map(|sub| -> Result<Array2<f64>> {
                let spikes = self.subnet_spike_rows(sub, inputs)?;
                Ok(spikes.dot(&sub.p_out))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros((rows, self.d_out));
        for p in parts {
            out += &p;
        }
        Ok(out)
    }

    /// Final-layer spike rows for one subnet, shaped to the readout rule.
    fn subnet_spike_rows(&self, sub: &Subnet, inputs: &[Array2<f64>]) -> Result<Array2<f64>> {
        let traj = lif_rollout(&sub.witness, inputs)?;
        match self.readout_rule {
            ReadoutRule::FinalTime => Ok(traj.final_spikes().to_owned()),
            ReadoutRule::PerTimestep => {
                let n = inputs.first().map(|m| m.nrows()).unwrap_or(0);
                let m = self.arch.m_last();
                let mut rows = Array2::zeros((n * self.arch.t_len, m));
                for t in 1..=self.arch.t_len {
                    let s = traj.final_layer_at(t);
                    for i in 0..n {
                        for j in 0..m {
                            rows[((t - 1) * n + i, j)] = s[(i, j)];
                        }
                    }
                }
                Ok(rows)
            }
        }
    }
}

/// Lifts a coefficient matrix over a witnessed dictionary to a K-parallel
/// network, one subnetwork per nonzero coefficient row.
pub fn reconstruct(
    dict: &SpikeDictionary,
    store: &WitnessStore,
    w_tilde: &Array2<f64>,
) -> Result<ParallelSnn> {
    if w_tilde.nrows() != dict.n_columns() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            got: format!("{} coefficient rows", w_tilde.nrows()),
            expected: format!("{} dictionary columns", dict.n_columns()),
        });
    }
    if store.arch.m_last() != dict.m_last {
        return Err(Error::IncompatibleCheckpoint(format!(
            "store final width {} vs dictionary m_last {}",
            store.arch.m_last(),
            dict.m_last
        )));
    }
    let d_out = w_tilde.ncols();
    let mut subnets = Vec::new();
    for (i, row) in w_tilde.rows().into_iter().enumerate() {
        if row.iter().all(|v| *v == 0.0) {
            continue;
        }
        let (w_idx, neuron) = dict.witness_of[i];
        let witness = store
            .witnesses
            .get(w_idx as usize)
            .ok_or_else(|| {
                Error::IncompatibleCheckpoint(format!(
                    "dictionary column {i} references witness {w_idx} outside the store"
                ))
            })?
            .clone();
        let mut p_out = Array2::zeros((dict.m_last, d_out));
        for (j, v) in row.iter().enumerate() {
            p_out[(neuron as usize, j)] = *v;
        }
        subnets.push(Subnet {
            witness,
            p_out,
            column: i,
            neuron: neuron as usize,
        });
    }
    Ok(ParallelSnn {
        subnets,
        arch: store.arch.clone(),
        readout_rule: if dict.is_trajectory() {
            ReadoutRule::PerTimestep
        } else {
            ReadoutRule::FinalTime
        },
        d_out,
    })
}

#[derive(Clone, Debug)]
pub struct ReconstructionReport {
    /// max |forward - D w_tilde| over all entries
    pub max_deviation: f64,
    /// per-subnet: re-rolled spike column equals the dictionary column
    pub subnet_matches: Vec<bool>,
    pub support_size: usize,
    /// whether |S| <= n_rows + 1; recorded only, larger supports are legal
    pub support_within_bound: bool,
}

impl ReconstructionReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_deviation <= tol && self.subnet_matches.iter().all(|b| *b)
    }
}

pub fn verify_reconstruction(
    snn: &ParallelSnn,
    dict: &SpikeDictionary,
    w_tilde: &Array2<f64>,
    inputs: &[Array2<f64>],
) -> Result<ReconstructionReport> {
    let forward = snn.forward(inputs)?;
    let reference = dict.columns.mul_coeffs(w_tilde);
    if forward.dim() != reference.dim() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            got: format!("{:?}", forward.dim()),
            expected: format!("{:?}", reference.dim()),
        });
    }
    let max_deviation = forward
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let subnet_matches = snn
        .subnets
        .par_iter()
        .map(|sub| -> Result<bool> {
            let rows = snn.subnet_spike_rows(sub, inputs)?;
            let col = rows.column(sub.neuron);
            Ok((0..col.len()).all(|r| (col[r] != 0.0) == dict.columns.get(r, sub.column)))
        })
        .collect::<Result<Vec<_>>>()?;
    let support_size = snn.k();
    Ok(ReconstructionReport {
        max_deviation,
        subnet_matches,
        support_size,
        support_within_bound: support_size <= dict.columns.n_rows() + 1,
    })
}

/// Collapses subnets sharing a witness into one subnet whose readout is the
/// sum of the originals. Same terms regrouped, so forward outputs agree up
/// to float addition order; the result has at most one subnet per distinct
/// witness, which keeps evaluation and finetuning of large-support
/// solutions tractable. `column`/`neuron` keep the first member's values
/// and stop identifying a single dictionary column.
pub fn merge_by_witness(snn: &ParallelSnn) -> ParallelSnn {
    let mut subnets: Vec<Subnet> = Vec::new();
    for sub in &snn.subnets {
        match subnets.iter_mut().find(|m| m.witness == sub.witness) {
            Some(m) => m.p_out = &m.p_out + &sub.p_out,
            None => subnets.push(sub.clone()),
        }
    }
    ParallelSnn {
        subnets,
        arch: snn.arch.clone(),
        readout_rule: snn.readout_rule,
        d_out: snn.d_out,
    }
}

#[derive(Serialize, Deserialize)]
struct SubnetJson {
    column: usize,
    neuron: usize,
    witness: WitnessJson,
    p_out: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SnnJson {
    format_version: u32,
    arch: Arch,
    readout_rule: ReadoutRule,
    d_out: usize,
    subnets: Vec<SubnetJson>,
}

pub fn save_parallel_snn(snn: &ParallelSnn, path: &Path) -> Result<()> {
    let doc = SnnJson {
        format_version: SNN_FORMAT_VERSION,
        arch: snn.arch.clone(),
        readout_rule: snn.readout_rule,
        d_out: snn.d_out,
        subnets: snn
            .subnets
            .iter()
            .map(|s| SubnetJson {
                column: s.column,
                neuron: s.neuron,
                witness: witness_to_json(&s.witness),
                p_out: crate::witness::matrix_to_rows(&s.p_out),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_parallel_snn(path: &Path) -> Result<ParallelSnn> {
    let doc: SnnJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.format_version != SNN_FORMAT_VERSION {
        return Err(Error::Artifact {
            path: path.display().to_string(),
            message: format!("unsupported snn format {}", doc.format_version),
        });
    }
    let mut subnets = Vec::with_capacity(doc.subnets.len());
    for s in &doc.subnets {
        let witness = witness_from_json(&s.witness)?;
        if !doc.arch.matches(&witness) {
            return Err(Error::Artifact {
                path: path.display().to_string(),
                message: "subnet witness does not match declared arch".into(),
            });
        }
        let p_out = crate::witness::rows_to_matrix(&s.p_out)?;
        if p_out.dim() != (doc.arch.m_last(), doc.d_out) {
            return Err(Error::Artifact {
                path: path.display().to_string(),
                message: "p_out shape mismatch".into(),
            });
        }
        subnets.push(Subnet {
            witness,
            p_out,
            column: s.column,
            neuron: s.neuron,
        });
    }
    Ok(ParallelSnn {
        subnets,
        arch: doc.arch,
        readout_rule: doc.readout_rule,
        d_out: doc.d_out,
    })
}

/// Column of the dictionary as a dense vector; test and diagnostics helper.
pub fn dense_column(dict: &SpikeDictionary, c: usize) -> Array1<f64> {
    Array1::from_shape_fn(dict.columns.n_rows(), |r| {
        f64::from(dict.columns.get(r, c))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_sampled_dictionary, build_trajectory_dictionary};
    use crate::witness::{sample_gaussian_witnesses, Arch, LeakMode, ThrMode};
    use ndarray::Array2;
    use rand::Rng;

    fn desk_setup(seed: u64) -> (WitnessStore, Vec<Array2<f64>>) {
        let arch = Arch {
            input_dim: 3,
            widths: vec![4, 3],
            t_len: 3,
        };
        let store = sample_gaussian_witnesses(
            &arch,
            6,
            seed,
            LeakMode::Fixed { value: 0.9 },
            ThrMode::Fixed { value: 1.0 },
        )
        .unwrap();
        let mut rng = crate::rng::stream(seed, "reconstruct-test", &[0]);
        // one matrix per timestep, 10 samples x 3 input dims
        let inputs: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((10, 3), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        (store, inputs)
    }

    #[test]
    fn single_column_lift_is_exact() {
        let (store, inputs) = desk_setup(5);
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        let mut w = Array2::zeros((dict.n_columns(), 1));
        w[(2, 0)] = 0.5;
        let snn = reconstruct(&dict, &store, &w).unwrap();
        assert_eq!(snn.k(), 1);
        assert_eq!(snn.subnets[0].column, 2);
        let forward = snn.forward(&inputs).unwrap();
        let col = dense_column(&dict, 2);
        for (i, v) in forward.column(0).iter().enumerate() {
            assert_eq!(*v, 0.5 * col[i]);
        }
    }

    #[test]
    fn zero_solution_gives_empty_network() {
        let (store, inputs) = desk_setup(7);
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        let w = Array2::zeros((dict.n_columns(), 2));
        let snn = reconstruct(&dict, &store, &w).unwrap();
        assert_eq!(snn.k(), 0);
        let forward = snn.forward(&inputs).unwrap();
        assert!(forward.iter().all(|v| *v == 0.0));
        let report = verify_reconstruction(&snn, &dict, &w, &inputs).unwrap();
        assert_eq!(report.max_deviation, 0.0);
        assert!(report.passed(1e-9));
        assert_eq!(report.support_size, 0);
    }

    #[test]
    fn random_solution_matches_dictionary_product() {
        let (store, inputs) = desk_setup(11);
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        let mut rng = crate::rng::stream(13, "reconstruct-test", &[1]);
        let w = Array2::from_shape_fn((dict.n_columns(), 2), |_| {
            if rng.gen_bool(0.4) {
                rng.gen_range(-2.0..2.0)
            } else {
                0.0
            }
        });
        let snn = reconstruct(&dict, &store, &w).unwrap();
        let report = verify_reconstruction(&snn, &dict, &w, &inputs).unwrap();
        assert!(report.max_deviation <= 1e-9, "dev {}", report.max_deviation);
        assert!(report.subnet_matches.iter().all(|b| *b));
        let expected = crate::solver::support(&w).len();
        assert_eq!(report.support_size, expected);
        assert_eq!(
            report.support_within_bound,
            expected <= dict.columns.n_rows() + 1
        );
    }

    #[test]
    fn trajectory_readout_matches_dictionary_product() {
        let (store, inputs) = desk_setup(17);
        let dict = build_trajectory_dictionary(&store, &inputs).unwrap();
        assert!(dict.is_trajectory());
        let mut rng = crate::rng::stream(19, "reconstruct-test", &[2]);
        let w = Array2::from_shape_fn((dict.n_columns(), 1), |_| rng.gen_range(-1.0..1.0));
        let snn = reconstruct(&dict, &store, &w).unwrap();
        assert_eq!(snn.readout_rule, ReadoutRule::PerTimestep);
        let report = verify_reconstruction(&snn, &dict, &w, &inputs).unwrap();
        assert!(report.max_deviation <= 1e-9, "dev {}", report.max_deviation);
        assert!(report.passed(1e-9));
    }

    #[test]
    fn corrupted_witness_is_flagged() {
        let (store, inputs) = desk_setup(23);
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        // pick a column with at least one silent sample so forcing the
        // neuron to fire is guaranteed to flip a bit
        let target = (0..dict.n_columns())
            .find(|c| dense_column(&dict, *c).iter().any(|v| *v == 0.0))
            .expect("some column has a zero bit");
        let other = (0..dict.n_columns()).find(|c| *c != target).unwrap();
        let mut w = Array2::zeros((dict.n_columns(), 1));
        w[(target, 0)] = 1.0;
        w[(other, 0)] = -1.0;
        let mut snn = reconstruct(&dict, &store, &w).unwrap();
        let k = snn
            .subnets
            .iter()
            .position(|s| s.column == target)
            .unwrap();
        // a huge initial membrane keeps the generating neuron firing at
        // every step regardless of input
        let nrn = snn.subnets[k].neuron;
        let last = snn.subnets[k].witness.layers.len() - 1;
        snn.subnets[k].witness.layers[last].u_init[nrn] = 1e6;
        let report = verify_reconstruction(&snn, &dict, &w, &inputs).unwrap();
        assert!(!report.subnet_matches[k], "corruption went undetected");
        assert!(report
            .subnet_matches
            .iter()
            .enumerate()
            .all(|(i, b)| i == k || *b));
        assert!(report.max_deviation > 1e-9);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let (store, inputs) = desk_setup(29);
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        let mut rng = crate::rng::stream(31, "reconstruct-test", &[3]);
        let w = Array2::from_shape_fn((dict.n_columns(), 2), |_| {
            if rng.gen_bool(0.5) {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let snn = reconstruct(&dict, &store, &w).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snn.json");
        save_parallel_snn(&snn, &path).unwrap();
        let loaded = load_parallel_snn(&path).unwrap();
        assert_eq!(loaded.k(), snn.k());
        assert_eq!(loaded.readout_rule, snn.readout_rule);
        for (a, b) in loaded.subnets.iter().zip(&snn.subnets) {
            assert_eq!(a.p_out, b.p_out);
            assert_eq!(a.column, b.column);
            for (la, lb) in a.witness.layers.iter().zip(&b.witness.layers) {
                assert_eq!(la.p_in, lb.p_in);
                assert_eq!(la.leak, lb.leak);
                assert_eq!(la.u_thr, lb.u_thr);
                assert_eq!(la.u_init, lb.u_init);
            }
        }
        // the reloaded network computes the identical function
        assert_eq!(
            loaded.forward(&inputs).unwrap(),
            snn.forward(&inputs).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (store, inputs) = desk_setup(37);
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        let w = Array2::zeros((dict.n_columns() + 1, 1));
        assert!(matches!(
            reconstruct(&dict, &store, &w),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn witness_merge_preserves_outputs_with_one_subnet_per_witness() {
        // low threshold so every witness fires several distinct neurons
        let arch = Arch {
            input_dim: 3,
            widths: vec![4, 3],
            t_len: 3,
        };
        let store = sample_gaussian_witnesses(
            &arch,
            6,
            41,
            LeakMode::Fixed { value: 0.9 },
            ThrMode::Fixed { value: 0.2 },
        )
        .unwrap();
        let mut rng = crate::rng::stream(43, "reconstruct-test", &[4]);
        let inputs: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((10, 3), |_| rng.gen_range(-2.0..2.0)))
            .collect();
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        // dense coefficients: every column is in the support
        let w = Array2::from_shape_fn((dict.n_columns(), 2), |_| rng.gen_range(-1.0..1.0));
        let snn = reconstruct(&dict, &store, &w).unwrap();
        let merged = merge_by_witness(&snn);
        let mut owners: Vec<u32> = dict.witness_of.iter().map(|(w, _)| *w).collect();
        owners.sort_unstable();
        owners.dedup();
        assert_eq!(snn.k(), dict.n_columns());
        assert_eq!(merged.k(), owners.len());
        assert!(merged.k() < snn.k());
        let a = snn.forward(&inputs).unwrap();
        let b = merged.forward(&inputs).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}
