//! Exact enumeration of realizable spike patterns at micro scale.
//!
//! Two enumerators back the global-optimality oracle:
//!
//! * `exact_enumerate_arrangement`: all sign patterns 1{Zu >= 0} over u in
//!   R^d for d <= 3, by walking the cells of the central hyperplane
//!   arrangement (directions, pairwise intersections, perturbations, and a
//!   seeded dense sweep for closure at d = 3).
//! * `exact_enumerate_snn_dictionary`: all final-layer spike patterns of a
//!   single scalar-input LIF neuron over a (leak, threshold) grid and an
//!   arbitrary real input weight, by exact breakpoint enumeration of the
//!   piecewise-constant trajectory map.
//!
//! Both are complete only relative to their declared discretization (the
//! grid, and boundary patterns up to float noise on the breakpoints); the
//! intended use is as a containment oracle for randomly drawn witnesses,
//! which avoid boundaries almost surely.

use crate::bitmat::BitMatrix;
use crate::dictionary::{build_sampled_dictionary, SpikeDictionary};
use crate::lif::{LifLayerParams, LifWitness};
use crate::witness::{Arch, Provenance, WitnessStore};
use crate::{Error, Result};
use ndarray::{array, Array2};
use rand::Rng;
use std::collections::BTreeSet;

pub const ARRANGEMENT_N_MAX: usize = 12;

/// Sign pattern of Z u with on-hyperplane snapping: |z_i . u| below a
/// relative tolerance counts as 0 and fires.
fn pattern_of(z: &Array2<f64>, u: &[f64], row_norms: &[f64]) -> Vec<u64> {
    let n = z.nrows();
    let u_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut words = vec![0u64; n.div_ceil(64)];
    for i in 0..n {
        let dot: f64 = z.row(i).iter().zip(u).map(|(a, b)| a * b).sum();
        let tol = 1e-12 * row_norms[i] * u_norm;
        if dot >= -tol {
            words[i / 64] |= 1u64 << (i % 64);
        }
    }
    words
}

/// Complete set of realizable threshold patterns {1{Zu >= 0}} for d <= 3.
/// Columns are sorted lexicographically for determinism.
pub fn exact_enumerate_arrangement(z: &Array2<f64>, n_max: usize) -> Result<BitMatrix> {
    let (n, d) = z.dim();
    if n == 0 || n > n_max || d == 0 || d > 3 {
        return Err(Error::EnumerationBudget(format!(
            "arrangement needs 1 <= n <= {n_max} and 1 <= d <= 3, got n={n}, d={d}"
        )));
    }
    let row_norms: Vec<f64> = z
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut candidates: Vec<Vec<f64>> = vec![vec![0.0; d]];
    match d {
        1 => {
            candidates.push(vec![1.0]);
            candidates.push(vec![-1.0]);
        }
        2 => {
            // critical directions: perpendiculars of every row (exact zero
            // dot with their own row), plus arc midpoints between them
            let mut angles = BTreeSet::new();
            let mut dirs: Vec<Vec<f64>> = Vec::new();
            for i in 0..n {
                if row_norms[i] == 0.0 {
                    continue;
                }
                let (a, b) = (z[(i, 0)], z[(i, 1)]);
                for s in [1.0, -1.0] {
                    dirs.push(vec![-b * s, a * s]);
                    angles.insert(ordered(f64::atan2(a * s, -b * s)));
                }
            }
            candidates.extend(dirs);
            let sorted: Vec<f64> = angles.iter().map(|o| o.0).collect();
            for w in 0..sorted.len() {
                let a0 = sorted[w];
                let a1 = if w + 1 < sorted.len() {
                    sorted[w + 1]
                } else {
                    sorted[0] + std::f64::consts::TAU
                };
                let mid = 0.5 * (a0 + a1);
                candidates.push(vec![mid.cos(), mid.sin()]);
            }
            if sorted.is_empty() {
                candidates.push(vec![1.0, 0.0]);
            }
        }
        3 => {
            let rows: Vec<[f64; 3]> = (0..n)
                .filter(|&i| row_norms[i] > 0.0)
                .map(|i| [z[(i, 0)], z[(i, 1)], z[(i, 2)]])
                .collect();
            let mut seeds: Vec<[f64; 3]> = vec![
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ];
            for r in &rows {
                seeds.push(*r);
                // two independent in-plane directions
                seeds.push(cross(*r, [1.0, 0.0, 0.0]));
                seeds.push(cross(*r, [0.0, 1.0, 0.0]));
                seeds.push(cross(*r, [0.0, 0.0, 1.0]));
            }
            for i in 0..rows.len() {
                for j in i + 1..rows.len() {
                    seeds.push(cross(rows[i], rows[j]));
                }
            }
            let base: Vec<[f64; 3]> = seeds
                .iter()
                .filter(|v| norm3(**v) > 0.0)
                .map(|v| scale3(*v, 1.0 / norm3(*v)))
                .collect();
            for v in &base {
                for s in [1.0, -1.0] {
                    let v = scale3(*v, s);
                    candidates.push(v.to_vec());
                    // nudge off every incident hyperplane in both directions
                    for r in &rows {
                        let rn = scale3(*r, 1.0 / norm3(*r));
                        for delta in [1e-4, -1e-4, 1e-7, -1e-7] {
                            candidates.push(add3(v, scale3(rn, delta)).to_vec());
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    let mut set: BTreeSet<Vec<u64>> = candidates
        .iter()
        .map(|u| pattern_of(z, u, &row_norms))
        .collect();
    if d == 3 {
        // closure sweep: dense random directions must not reveal new cells;
        // if they do, fold them in and re-check until stable
        let mut rng = crate::rng::stream(0, "arrangement-sweep", &[n as u64, d as u64]);
        loop {
            let mut grew = false;
            for _ in 0..20_000 {
                let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                grew |= set.insert(pattern_of(z, &u, &row_norms));
            }
            if !grew {
                break;
            }
        }
    }
    let mut out = BitMatrix::new(n);
    for words in &set {
        out.push_column_words(words);
    }
    Ok(out)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn scale3(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[derive(PartialEq, PartialOrd)]
struct Ordered(f64);
impl Eq for Ordered {}
#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for Ordered {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).unwrap()
    }
}
fn ordered(v: f64) -> Ordered {
    Ordered(v)
}

/// Discretization of the non-convex witness coordinates.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub leak: Vec<f64>,
    pub u_thr: Vec<f64>,
}

impl GridSpec {
    /// Evenly spaced grid over leak in [0, leak_max] and u_thr in
    /// (0, thr_max], `points` values each.
    pub fn even(points: usize, leak_max: f64, thr_max: f64) -> GridSpec {
        let leak = (0..points)
            .map(|i| leak_max * i as f64 / (points.max(2) - 1) as f64)
            .collect();
        let u_thr = (1..=points)
            .map(|i| thr_max * i as f64 / points as f64)
            .collect();
        GridSpec { leak, u_thr }
    }
}

pub const SNN_ENUM_N_MAX: usize = 16;
pub const SNN_ENUM_T_MAX: usize = 4;

/// Candidate input weights for one scalar-input LIF neuron at fixed
/// (leak, u_thr): the trajectory map p -> (S^1..S^T) is piecewise constant
/// with breakpoints p = u_thr * h / a_i^t, where a_i^t is the
/// leak-accumulated input and h sweeps the reset-history sums; taking every
/// breakpoint, the midpoints between neighbours, and a point beyond each end
/// visits every cell of the 1-D arrangement.
pub(crate) fn scalar_weight_candidates(inputs: &[Array2<f64>], leak: f64, thr: f64) -> Vec<f64> {
    let t_len = inputs.len();
    let n = inputs.first().map(|x| x.nrows()).unwrap_or(0);
    // a_i^t = sum_tau leak^{t-tau} x_i^tau
    let mut a = vec![vec![0.0f64; n]; t_len];
    for t in 0..t_len {
        for i in 0..n {
            let prev = if t == 0 { 0.0 } else { a[t - 1][i] };
            a[t][i] = inputs[t][(i, 0)] + leak * prev;
        }
    }
    // history sums h = sum_{tau<t} leak^{t-1-tau} s_tau over all binary
    // histories
    let mut hists: Vec<Vec<f64>> = vec![vec![0.0]];
    for t in 1..t_len {
        let mut next = BTreeSet::new();
        for h in &hists[t - 1] {
            for s in [0.0, 1.0] {
                next.insert(ordered(leak * h + s));
            }
        }
        hists.push(next.into_iter().map(|o| o.0).collect());
    }
    let mut brk = BTreeSet::new();
    for t in 0..t_len {
        for i in 0..n {
            if a[t][i] == 0.0 {
                continue;
            }
            for h in &hists[t] {
                brk.insert(ordered(thr * h / a[t][i]));
            }
        }
    }
    let brk: Vec<f64> = brk.into_iter().map(|o| o.0).collect();
    let mut ps = vec![0.0];
    if let (Some(first), Some(last)) = (brk.first(), brk.last()) {
        ps.push(first - 1.0);
        ps.push(last + 1.0);
    }
    for w in brk.windows(2) {
        ps.push(0.5 * (w[0] + w[1]));
    }
    ps.extend_from_slice(&brk);
    ps
}

/// Exact dictionary for a single scalar-input LIF neuron: for each grid
/// (leak, u_thr) the trajectory map p -> (S^1..S^T) is piecewise constant in
/// the input weight p with breakpoints p = u_thr * h / a_i^t, where a_i^t is
/// the leak-accumulated input and h ranges over the spike-history sums; the
/// candidate set takes every breakpoint, the midpoints between neighbours,
/// and points beyond both ends. Completeness is relative to the grid.
pub fn exact_enumerate_snn_dictionary(
    inputs: &[Array2<f64>],
    grid: &GridSpec,
) -> Result<(SpikeDictionary, WitnessStore)> {
    let t_len = inputs.len();
    let n = inputs.first().map(|x| x.nrows()).unwrap_or(0);
    if t_len == 0 || t_len > SNN_ENUM_T_MAX || n == 0 || n > SNN_ENUM_N_MAX {
        return Err(Error::EnumerationBudget(format!(
            "snn enumeration needs 1 <= T <= {SNN_ENUM_T_MAX} and 1 <= n <= {SNN_ENUM_N_MAX}, got T={t_len}, n={n}"
        )));
    }
    if inputs.iter().any(|x| x.ncols() != 1 || x.nrows() != n) {
        return Err(Error::EnumerationBudget(
            "snn enumeration is scalar-input only".into(),
        ));
    }
    for (leak, ok) in grid.leak.iter().map(|&b| (b, (0.0..1.0).contains(&b))) {
        if !ok {
            return Err(Error::LeakOutOfRange {
                layer: 1,
                neuron: 0,
                value: leak,
            });
        }
    }
    let arch = Arch::new(1, vec![1], t_len);
    let mut witnesses = Vec::new();
    let mut provenance = Vec::new();
    for &leak in &grid.leak {
        for &thr in &grid.u_thr {
            for p in scalar_weight_candidates(inputs, leak, thr) {
                witnesses.push(LifWitness {
                    layers: vec![LifLayerParams {
                        p_in: array![[p]],
                        leak: array![leak],
                        u_thr: array![thr],
                        u_init: array![0.0],
                    }],
                });
                provenance.push(Provenance::Enumerated { leak, u_thr: thr });
            }
        }
    }
    let store = WitnessStore {
        arch,
        witnesses,
        provenance,
    };
    let dict = build_sampled_dictionary(&store, inputs)?;
    Ok((dict, store))
}
