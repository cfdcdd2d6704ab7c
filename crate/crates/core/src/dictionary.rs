//! Spike dictionaries: the binary design matrices of the convex program.
//!
//! Rolling every witness over the training inputs gives one candidate column
//! per final-layer neuron. Duplicate columns collapse to the smallest
//! (witness, neuron) pair so each kept column stays witnessed: re-rolling its
//! representative reproduces it bit-exactly. The trajectory variant stacks
//! all T timestep blocks per column before dedup, for per-timestep
//! supervision.

use crate::bitmat::BitMatrix;
use crate::lif::lif_rollout;
use crate::witness::WitnessStore;
use crate::{Error, Result};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

const DICT_MAGIC: &[u8; 8] = b"SNNDICT1";

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeDictionary {
    /// n x P, bit-packed by column
    pub columns: BitMatrix,
    /// per column: (witness index, final-layer neuron index)
    pub witness_of: Vec<(u32, u32)>,
    pub t_len: usize,
    pub n_layers: usize,
    pub m_last: usize,
    /// rows per timestep block; equals n_rows for final-time dictionaries
    pub n_samples: usize,
}

impl SpikeDictionary {
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_columns(&self) -> usize {
        self.columns.n_cols()
    }

    /// True when the columns stack T timestep blocks.
    pub fn is_trajectory(&self) -> bool {
        self.columns.n_rows() != self.n_samples
    }
}

/// Candidate columns in (witness, neuron) order, one final-layer spike
/// matrix per witness.
fn final_spike_mats(store: &WitnessStore, inputs: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    store
        .witnesses
        .par_iter()
        .map(|w| Ok(lif_rollout(w, inputs)?.final_spikes().to_owned()))
        .collect()
}

fn stacked_spike_mats(store: &WitnessStore, inputs: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    let n = inputs[0].nrows();
    let t_len = inputs.len();
    store
        .witnesses
        .par_iter()
        .map(|w| {
            let traj = lif_rollout(w, inputs)?;
            let m = w.final_width();
            let mut stacked = Array2::zeros((n * t_len, m));
            for t in 0..t_len {
                let block = traj.final_layer_at(t + 1);
                stacked
                    .slice_mut(ndarray::s![t * n..(t + 1) * n, ..])
                    .assign(block);
            }
            Ok(stacked)
        })
        .collect()
}

fn check_inputs(store: &WitnessStore, inputs: &[Array2<f64>]) -> Result<()> {
    if store.is_empty() {
        return Err(Error::EmptyWitnessStore);
    }
    if inputs.len() != store.arch.t_len
        || inputs.iter().any(|x| {
            x.ncols() != store.arch.input_dim || x.nrows() != inputs[0].nrows()
        })
    {
        return Err(Error::ShapeMismatch {
            layer: 0,
            got: format!(
                "{} timesteps of width {}",
                inputs.len(),
                inputs.first().map(|x| x.ncols()).unwrap_or(0)
            ),
            expected: format!(
                "{} timesteps of width {}",
                store.arch.t_len, store.arch.input_dim
            ),
        });
    }
    Ok(())
}

fn pack_bits(col: ndarray::ArrayView1<f64>) -> Vec<u64> {
    let mut words = vec![0u64; col.len().div_ceil(64)];
    for (r, v) in col.iter().enumerate() {
        debug_assert!(*v == 0.0 || *v == 1.0);
        if *v != 0.0 {
            words[r / 64] |= 1u64 << (r % 64);
        }
    }
    words
}

fn dedup_columns(
    n_rows: usize,
    per_witness: &[Array2<f64>],
) -> (BitMatrix, Vec<(u32, u32)>) {
    let mut columns = BitMatrix::new(n_rows);
    let mut witness_of = Vec::new();
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    for (wi, mat) in per_witness.iter().enumerate() {
        for neuron in 0..mat.ncols() {
            let words = pack_bits(mat.column(neuron));
            if seen.insert(words.clone(), ()).is_none() {
                columns.push_column_words(&words);
                witness_of.push((wi as u32, neuron as u32));
            }
        }
    }
    (columns, witness_of)
}

/// Final-time dictionary: one column per distinct final-layer spike pattern
/// at t = T.
pub fn build_sampled_dictionary(
    store: &WitnessStore,
    inputs: &[Array2<f64>],
) -> Result<SpikeDictionary> {
    check_inputs(store, inputs)?;
    let mats = final_spike_mats(store, inputs)?;
    let n = inputs[0].nrows();
    let (columns, witness_of) = dedup_columns(n, &mats);
    Ok(SpikeDictionary {
        columns,
        witness_of,
        t_len: store.arch.t_len,
        n_layers: store.arch.widths.len(),
        m_last: store.arch.m_last(),
        n_samples: n,
    })
}

/// Trajectory dictionary: columns stack the T timestep blocks
/// [S^1; ...; S^T]; dedup runs on the full stack.
pub fn build_trajectory_dictionary(
    store: &WitnessStore,
    inputs: &[Array2<f64>],
) -> Result<SpikeDictionary> {
    check_inputs(store, inputs)?;
    let mats = stacked_spike_mats(store, inputs)?;
    let n = inputs[0].nrows();
    let (columns, witness_of) = dedup_columns(n * inputs.len(), &mats);
    Ok(SpikeDictionary {
        columns,
        witness_of,
        t_len: store.arch.t_len,
        n_layers: store.arch.widths.len(),
        m_last: store.arch.m_last(),
        n_samples: n,
    })
}

/// Re-roll every column's witness and compare bit-exactly.
pub fn verify_witnessed(
    dict: &SpikeDictionary,
    store: &WitnessStore,
    inputs: &[Array2<f64>],
) -> Result<Vec<usize>> {
    let mats = if dict.is_trajectory() {
        stacked_spike_mats(store, inputs)?
    } else {
        final_spike_mats(store, inputs)?
    };
    let mut mismatched = Vec::new();
    for (c, &(wi, neuron)) in dict.witness_of.iter().enumerate() {
        let words = pack_bits(mats[wi as usize].column(neuron as usize));
        if words != dict.columns.col(c) {
            mismatched.push(c);
        }
    }
    Ok(mismatched)
}

#[derive(Serialize, Deserialize)]
struct DictTrailer {
    witness_of: Vec<(u32, u32)>,
    n_layers: u32,
    n_samples: u32,
}

/// Container layout: magic, then n_rows/P/T/m_last as little-endian u32,
/// then P*words_per_col packed words (little-endian u64), then a JSON
/// trailer with the witness map.
pub fn save_dictionary(dict: &SpikeDictionary, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DICT_MAGIC)?;
    for v in [
        dict.columns.n_rows() as u32,
        dict.n_columns() as u32,
        dict.t_len as u32,
        dict.m_last as u32,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    for w in dict.columns.raw_words() {
        f.write_all(&w.to_le_bytes())?;
    }
    let trailer = DictTrailer {
        witness_of: dict.witness_of.clone(),
        n_layers: dict.n_layers as u32,
        n_samples: dict.n_samples as u32,
    };
    f.write_all(serde_json::to_string(&trailer)?.as_bytes())?;
    Ok(())
}

pub fn load_dictionary(path: &Path) -> Result<SpikeDictionary> {
    let bad = |message: &str| Error::Artifact {
        path: path.display().to_string(),
        message: message.into(),
    };
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != DICT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut header = [0u32; 4];
    for h in header.iter_mut() {
        f.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
        *h = u32::from_le_bytes(u32buf);
    }
    let [n_rows, p, t_len, m_last] = header.map(|v| v as usize);
    let wpc = n_rows.div_ceil(64);
    let mut words = vec![0u64; p * wpc];
    let mut u64buf = [0u8; 8];
    for w in words.iter_mut() {
        f.read_exact(&mut u64buf).map_err(|_| bad("truncated columns"))?;
        *w = u64::from_le_bytes(u64buf);
    }
    let mut trailer_text = String::new();
    f.read_to_string(&mut trailer_text)?;
    let trailer: DictTrailer = serde_json::from_str(&trailer_text)?;
    if trailer.witness_of.len() != p {
        return Err(bad("witness map length mismatch"));
    }
    Ok(SpikeDictionary {
        columns: BitMatrix::from_words(n_rows, p, words),
        witness_of: trailer.witness_of,
        t_len,
        n_layers: trailer.n_layers as usize,
        m_last,
        n_samples: trailer.n_samples as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lif::{lif_rescale, LifLayerParams, LifWitness};
    use crate::witness::{
        sample_gaussian_witnesses, Arch, Provenance, WitnessStore, DEFAULT_LEAK, DEFAULT_THR,
    };
    use ndarray::{array, Array1};
    use rand::Rng;

    fn store_of(witnesses: Vec<LifWitness>, arch: Arch) -> WitnessStore {
        let provenance = (0..witnesses.len())
            .map(|index| Provenance::Gaussian { seed: 0, index })
            .collect();
        WitnessStore {
            arch,
            witnesses,
            provenance,
        }
    }

    fn random_inputs(n: usize, d: usize, t_len: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut r = crate::rng::stream(seed, "dict-test", &[0]);
        (0..t_len)
            .map(|_| Array2::from_shape_fn((n, d), |_| r.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn rescaled_witnesses_dedup_to_one() {
        let arch = Arch::new(2, vec![3], 3);
        let base = sample_gaussian_witnesses(&arch, 1, 42, DEFAULT_LEAK, DEFAULT_THR).unwrap();
        let scaled = lif_rescale(&base.witnesses[0], &[Array1::from_elem(3, 4.0)]).unwrap();
        let store = store_of(vec![base.witnesses[0].clone(), scaled], arch);
        let inputs = random_inputs(6, 2, 3, 1);
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        // every kept column is represented by the first witness
        assert!(dict.witness_of.iter().all(|&(w, _)| w == 0));
        assert!(dict.n_columns() <= 3);
    }

    #[test]
    fn zero_inputs_single_timestep_collapse_to_all_ones() {
        let arch = Arch::new(2, vec![4], 1);
        let store = sample_gaussian_witnesses(&arch, 5, 7, DEFAULT_LEAK, DEFAULT_THR).unwrap();
        let inputs = vec![Array2::zeros((6, 2))];
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        assert_eq!(dict.n_columns(), 1);
        assert_eq!(dict.columns.col_popcount(0), 6);
        assert_eq!(dict.witness_of[0], (0, 0));
    }

    #[test]
    fn dedup_bound_holds() {
        let arch = Arch::new(2, vec![1], 2);
        let store = sample_gaussian_witnesses(&arch, 8, 3, DEFAULT_LEAK, DEFAULT_THR).unwrap();
        let inputs = random_inputs(4, 2, 2, 5);
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        assert!(dict.n_columns() <= 8);
        assert!(dict.n_columns() <= 16);
    }

    #[test]
    fn empty_store_rejected() {
        let arch = Arch::new(2, vec![1], 2);
        let store = store_of(vec![], arch);
        assert!(matches!(
            build_sampled_dictionary(&store, &random_inputs(4, 2, 2, 5)),
            Err(Error::EmptyWitnessStore)
        ));
    }

    #[test]
    fn trajectory_with_t1_equals_final() {
        let arch = Arch::new(3, vec![2], 1);
        let store = sample_gaussian_witnesses(&arch, 6, 9, DEFAULT_LEAK, DEFAULT_THR).unwrap();
        let inputs = random_inputs(8, 3, 1, 2);
        let a = build_sampled_dictionary(&store, &inputs).unwrap();
        let b = build_trajectory_dictionary(&store, &inputs).unwrap();
        assert_eq!(a, b);
    }

    fn one_neuron(p: f64, thr: f64) -> LifWitness {
        LifWitness {
            layers: vec![LifLayerParams {
                p_in: array![[p]],
                leak: array![0.0],
                u_thr: array![thr],
                u_init: array![0.0],
            }],
        }
    }

    // Two witnesses with equal spikes at t=T but different spikes at t=1:
    // final-time dedup merges them, trajectory stacking keeps both.
    #[test]
    fn trajectory_separates_what_final_merges() {
        let arch = Arch::new(1, vec![1], 2);
        let store = store_of(vec![one_neuron(1.0, 2.0), one_neuron(-1.0, 2.0)], arch);
        let inputs = vec![array![[1.0], [-1.0]], array![[1.0], [-1.0]]];
        let final_dict = build_sampled_dictionary(&store, &inputs).unwrap();
        assert_eq!(final_dict.n_columns(), 1, "final patterns coincide");
        let traj = build_trajectory_dictionary(&store, &inputs).unwrap();
        assert_eq!(traj.n_columns(), 2, "histories differ at t=1");
        // block t=1 of column 0: witness A fires exactly on sample 0
        assert!(traj.columns.get(0, 0) && !traj.columns.get(1, 0));
        assert!(!traj.columns.get(0, 1) && traj.columns.get(1, 1));
        // block t=2: both all-zero
        for c in 0..2 {
            assert!(!traj.columns.get(2, c) && !traj.columns.get(3, c));
        }
    }

    #[test]
    fn trajectory_blocks_match_rollout() {
        let arch = Arch::new(2, vec![3, 2], 3);
        let store = sample_gaussian_witnesses(&arch, 4, 11, DEFAULT_LEAK, DEFAULT_THR).unwrap();
        let inputs = random_inputs(5, 2, 3, 6);
        let dict = build_trajectory_dictionary(&store, &inputs).unwrap();
        for (c, &(wi, neuron)) in dict.witness_of.iter().enumerate() {
            let traj = lif_rollout(&store.witnesses[wi as usize], &inputs).unwrap();
            for t in 0..3 {
                let block = traj.final_layer_at(t + 1);
                for i in 0..5 {
                    assert_eq!(
                        dict.columns.get(t * 5 + i, c),
                        block[(i, neuron as usize)] != 0.0
                    );
                }
            }
        }
    }

    #[test]
    fn duplicate_witness_keeps_smallest_pair() {
        let arch = Arch::new(2, vec![2], 2);
        let base = sample_gaussian_witnesses(&arch, 1, 21, DEFAULT_LEAK, DEFAULT_THR).unwrap();
        let store = store_of(
            vec![base.witnesses[0].clone(), base.witnesses[0].clone()],
            arch,
        );
        let dict = build_sampled_dictionary(&store, &random_inputs(7, 2, 2, 8)).unwrap();
        assert!(dict.witness_of.iter().all(|&(w, _)| w == 0));
    }

    #[test]
    fn witnessed_consistency_invariant() {
        let arch = Arch::new(3, vec![4, 3], 4);
        let store = sample_gaussian_witnesses(&arch, 10, 13, DEFAULT_LEAK, DEFAULT_THR).unwrap();
        let inputs = random_inputs(9, 3, 4, 17);
        for dict in [
            build_sampled_dictionary(&store, &inputs).unwrap(),
            build_trajectory_dictionary(&store, &inputs).unwrap(),
        ] {
            assert!(verify_witnessed(&dict, &store, &inputs).unwrap().is_empty());
            // pairwise distinct columns
            for a in 0..dict.n_columns() {
                for b in a + 1..dict.n_columns() {
                    assert_ne!(dict.columns.col(a), dict.columns.col(b));
                }
            }
        }
    }

    #[test]
    fn final_block_of_trajectory_covers_final_dictionary() {
        let arch = Arch::new(2, vec![3], 3);
        let store = sample_gaussian_witnesses(&arch, 6, 15, DEFAULT_LEAK, DEFAULT_THR).unwrap();
        let inputs = random_inputs(6, 2, 3, 19);
        let fin = build_sampled_dictionary(&store, &inputs).unwrap();
        let traj = build_trajectory_dictionary(&store, &inputs).unwrap();
        let n = 6;
        let final_blocks: Vec<Vec<bool>> = (0..traj.n_columns())
            .map(|c| (0..n).map(|i| traj.columns.get(2 * n + i, c)).collect())
            .collect();
        for c in 0..fin.n_columns() {
            let want: Vec<bool> = (0..n).map(|i| fin.columns.get(i, c)).collect();
            assert!(final_blocks.contains(&want));
        }
    }

    #[test]
    fn persistence_roundtrip_and_determinism() {
        let arch = Arch::new(2, vec![3], 2);
        let store = sample_gaussian_witnesses(&arch, 5, 23, DEFAULT_LEAK, DEFAULT_THR).unwrap();
        let inputs = random_inputs(70, 2, 2, 29);
        let dict = build_sampled_dictionary(&store, &inputs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("d1.bin");
        let p2 = dir.path().join("d2.bin");
        save_dictionary(&dict, &p1).unwrap();
        save_dictionary(&dict, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(load_dictionary(&p1).unwrap(), dict);
        // corrupt magic
        let mut bytes = std::fs::read(&p1).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&p1, bytes).unwrap();
        assert!(matches!(
            load_dictionary(&p1),
            Err(Error::Artifact { .. })
        ));
    }
}
