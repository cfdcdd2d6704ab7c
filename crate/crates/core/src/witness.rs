//! Frozen hidden-dynamics witnesses: Gaussian-sampled or extracted from a
//! pretrained network, with versioned JSON persistence.
//!
//! A witness pins every hidden parameter of one LIF column stack. Rolling a
//! witness over the training inputs yields one candidate spike pattern per
//! final-layer neuron; the dictionary module collects those. Sampling is a
//! pure function of (seed, witness index, layer index), so a store is
//! prefix-stable: growing the count never changes earlier witnesses.

use crate::lif::{LifLayerParams, LifWitness};
use crate::{rng, Error, Result};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const WITNESS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    /// hidden widths m_1..m_{L-1}; the last entry is the dictionary layer
    pub widths: Vec<usize>,
    pub t_len: usize,
}

impl Arch {
    pub fn new(input_dim: usize, widths: Vec<usize>, t_len: usize) -> Arch {
        Arch {
            input_dim,
            widths,
            t_len,
        }
    }

    pub fn m_last(&self) -> usize {
        *self.widths.last().expect("arch has at least one layer")
    }

    pub fn matches(&self, witness: &LifWitness) -> bool {
        witness.validate(self.input_dim).is_ok() && witness.widths() == self.widths
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeakMode {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThrMode {
    Fixed { value: f64 },
    /// |N(0,1)| per neuron
    HalfNormal,
}

pub const DEFAULT_LEAK: LeakMode = LeakMode::Fixed { value: 0.9 };
pub const DEFAULT_THR: ThrMode = ThrMode::Fixed { value: 1.0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Gaussian { seed: u64, index: usize },
    Pretrained { checkpoint: String, subnet: usize },
    /// grid point of an exact micro-scale enumeration
    Enumerated { leak: f64, u_thr: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WitnessStore {
    pub arch: Arch,
    pub witnesses: Vec<LifWitness>,
    pub provenance: Vec<Provenance>,
}

impl WitnessStore {
    pub fn len(&self) -> usize {
        self.witnesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.witnesses.is_empty()
    }
}

/// Sample `count` witnesses. Input weights are N(0, 1/fan_in); leak and
/// threshold follow the given modes; u_init = 0.
pub fn sample_gaussian_witnesses(
    arch: &Arch,
    count: usize,
    seed: u64,
    leak_mode: LeakMode,
    thr_mode: ThrMode,
) -> Result<WitnessStore> {
    if count == 0 {
        return Err(Error::EmptyWitnessStore);
    }
    validate_leak_mode(&leak_mode)?;
    let witnesses: Vec<LifWitness> = (0..count)
        .into_par_iter()
        .map(|i| sample_one(arch, seed, i, &leak_mode, &thr_mode))
        .collect();
    let provenance = (0..count)
        .map(|index| Provenance::Gaussian { seed, index })
        .collect();
    Ok(WitnessStore {
        arch: arch.clone(),
        witnesses,
        provenance,
    })
}

fn validate_leak_mode(mode: &LeakMode) -> Result<()> {
    let (ok, value) = match *mode {
        LeakMode::Fixed { value } => ((0.0..1.0).contains(&value), value),
        LeakMode::Uniform { lo, hi } => (0.0 <= lo && lo <= hi && hi < 1.0, hi),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::LeakOutOfRange {
            layer: 0,
            neuron: 0,
            value,
        })
    }
}

fn sample_one(
    arch: &Arch,
    seed: u64,
    index: usize,
    leak_mode: &LeakMode,
    thr_mode: &ThrMode,
) -> LifWitness {
    let mut layers = Vec::with_capacity(arch.widths.len());
    let mut fan_in = arch.input_dim;
    for (l, &width) in arch.widths.iter().enumerate() {
        let mut r = rng::stream(seed, "witness", &[index as u64, l as u64]);
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
        let p_in = Array2::from_shape_fn((fan_in, width), |_| normal.sample(&mut r));
        let leak = Array1::from_shape_fn(width, |_| match *leak_mode {
            LeakMode::Fixed { value } => value,
            LeakMode::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    r.gen_range(lo..hi)
                }
            }
        });
        let std_normal = Normal::<f64>::new(0.0, 1.0).unwrap();
        let u_thr = Array1::from_shape_fn(width, |_| match *thr_mode {
            ThrMode::Fixed { value } => value,
            ThrMode::HalfNormal => std_normal.sample(&mut r).abs(),
        });
        layers.push(LifLayerParams {
            p_in,
            leak,
            u_thr,
            u_init: Array1::zeros(width),
        });
        fan_in = width;
    }
    LifWitness { layers }
}

/// Freeze hidden dynamics copied verbatim from a trained network's subnets.
/// The output layer is the caller's to discard.
pub fn extract_pretrained_witnesses(
    hidden: &[LifWitness],
    arch: &Arch,
    checkpoint: &str,
) -> Result<WitnessStore> {
    if hidden.is_empty() {
        return Err(Error::EmptyWitnessStore);
    }
    for (k, w) in hidden.iter().enumerate() {
        if !arch.matches(w) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "subnet {k} widths {:?}, arch wants {:?}",
                w.widths(),
                arch.widths
            )));
        }
    }
    Ok(WitnessStore {
        arch: arch.clone(),
        witnesses: hidden.to_vec(),
        provenance: (0..hidden.len())
            .map(|subnet| Provenance::Pretrained {
                checkpoint: checkpoint.to_string(),
                subnet,
            })
            .collect(),
    })
}

// Persistence mirror: plain nested arrays, row-major, shortest round-trip
// decimals via the JSON writer.
#[derive(Serialize, Deserialize)]
pub(crate) struct LayerJson {
    p_in: Vec<Vec<f64>>,
    leak: Vec<f64>,
    u_thr: Vec<f64>,
    u_init: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct WitnessJson {
    pub(crate) layers: Vec<LayerJson>,
}

#[derive(Serialize, Deserialize)]
struct StoreJson {
    format_version: u32,
    arch: Arch,
    provenance: Vec<Provenance>,
    witnesses: Vec<WitnessJson>,
}

pub(crate) fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Artifact {
            path: String::new(),
            message: "ragged matrix rows".into(),
        });
    }
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    Array2::from_shape_vec((nrows, ncols), flat).map_err(|e| Error::Artifact {
        path: String::new(),
        message: e.to_string(),
    })
}

pub(crate) fn witness_to_json(w: &LifWitness) -> WitnessJson {
    WitnessJson {
        layers: w
            .layers
            .iter()
            .map(|l| LayerJson {
                p_in: matrix_to_rows(&l.p_in),
                leak: l.leak.to_vec(),
                u_thr: l.u_thr.to_vec(),
                u_init: l.u_init.to_vec(),
            })
            .collect(),
    }
}

pub(crate) fn witness_from_json(w: &WitnessJson) -> Result<LifWitness> {
    let mut layers = Vec::with_capacity(w.layers.len());
    for l in &w.layers {
        layers.push(LifLayerParams {
            p_in: rows_to_matrix(&l.p_in)?,
            leak: Array1::from_vec(l.leak.clone()),
            u_thr: Array1::from_vec(l.u_thr.clone()),
            u_init: Array1::from_vec(l.u_init.clone()),
        });
    }
    Ok(LifWitness { layers })
}

pub fn save_witness_store(store: &WitnessStore, path: &Path) -> Result<()> {
    let doc = StoreJson {
        format_version: WITNESS_FORMAT_VERSION,
        arch: store.arch.clone(),
        provenance: store.provenance.clone(),
        witnesses: store.witnesses.iter().map(witness_to_json).collect(),
    };
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_witness_store(path: &Path) -> Result<WitnessStore> {
    let text = std::fs::read_to_string(path)?;
    let doc: StoreJson = serde_json::from_str(&text)?;
    if doc.format_version != WITNESS_FORMAT_VERSION {
        return Err(Error::Artifact {
            path: path.display().to_string(),
            message: format!("unsupported witness format {}", doc.format_version),
        });
    }
    let witnesses = doc
        .witnesses
        .iter()
        .map(witness_from_json)
        .collect::<Result<Vec<_>>>()?;
    for w in &witnesses {
        if !doc.arch.matches(w) {
            return Err(Error::Artifact {
                path: path.display().to_string(),
                message: "witness does not match declared arch".into(),
            });
        }
    }
    Ok(WitnessStore {
        arch: doc.arch,
        witnesses,
        provenance: doc.provenance,
    })
}
