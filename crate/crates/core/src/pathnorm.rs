//! Path regularizers over network DAGs, incoming-norm normalization, and the
//! reduction-to-outer-norm identities.
//!
//! A network is a weighted DAG with input, hidden and output nodes. The path
//! regularizer aggregates, over all input-to-output paths, the product of
//! edge-weight magnitudes raised to p; for parallel networks the per-subnet
//! values are summed:
//!
//! ```text
//! Phi_p = sum_k ( sum_{paths q in subnet k} prod_{e in q} |w(e)|^p )^{1/p}
//! ```
//!
//! The LIF variant restricts the dynamic program to scale-bearing edges
//! (input weights and trainable reset thresholds); leak edges carry no
//! removable scale and propagate no path mass. Initial-state nodes count as
//! unit-mass sources. With that convention, normalizing every hidden unit's
//! scale-bearing incoming block to unit l_p^p mass makes every internal node
//! carry mass exactly 1, so the regularizer collapses to the l_p norms of the
//! output layers. Normalization divides incoming blocks only; binary
//! activations are scale-invariant, so the network function and the output
//! weights are untouched.

use crate::lif::{LifWitness, ThresholdRnnParams};
use crate::{lif, Error, Result};
use ndarray::{Array1, Array2};
use std::collections::{HashMap, HashSet};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    Input,
    Hidden,
    Output,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Act {
    Linear,
    Threshold,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub role: Role,
    pub layer: usize,
    pub act: Act,
    /// Hidden nodes sharing a removable scale (time copies of one neuron)
    /// share a group; normalization removes one scalar per group.
    pub norm_group: Option<usize>,
    pub subnet: usize,
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
    /// delta(e): whether the weight carries the removable threshold scale.
    pub scale_bearing: bool,
    pub trainable: bool,
    /// Edges produced by unrolling one underlying parameter share a tie group
    /// and must keep equal weights.
    pub tie_group: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct PathDag {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathNormValue {
    pub value: f64,
    pub p: f64,
}

impl PathDag {
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (ei, e) in self.edges.iter().enumerate() {
            indeg[e.to] += 1;
            out[e.from].push(ei);
        }
        let mut queue: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        let mut head = 0;
        while head < queue.len() {
            let v = queue[head];
            head += 1;
            order.push(v);
            for &ei in &out[v] {
                let t = self.edges[ei].to;
                indeg[t] -= 1;
                if indeg[t] == 0 {
                    queue.push(t);
                }
            }
        }
        if order.len() != n {
            return Err(Error::NotADag);
        }
        Ok(order)
    }

    fn n_subnets(&self) -> usize {
        self.nodes.iter().map(|n| n.subnet).max().unwrap_or(0) + 1
    }

    /// Per-subnet path norm (mass^{1/p}) at the outputs. In `lif_mode` only
    /// scale-bearing edges propagate mass.
    fn subnet_norms(&self, lif_mode: bool) -> Result<Vec<f64>> {
        let order = self.topo_order()?;
        let use_log = self.edges.iter().any(|e| {
            let a = e.weight.abs();
            a != 0.0 && !(1e-3..=1e3).contains(&a)
        });
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (ei, e) in self.edges.iter().enumerate() {
            if !lif_mode || e.scale_bearing {
                incoming[e.to].push(ei);
            }
        }
        let mut per_subnet = vec![if use_log { f64::NEG_INFINITY } else { 0.0 }; self.n_subnets()];
        let mut r = vec![0.0f64; self.nodes.len()];
        if use_log {
            // log-domain accumulation; exponentiation deferred to the root
            for &v in &order {
                r[v] = match self.nodes[v].role {
                    Role::Input => 0.0,
                    _ => log_sum_exp(incoming[v].iter().map(|&ei| {
                        let e = &self.edges[ei];
                        self.p * e.weight.abs().ln() + r[e.from]
                    })),
                };
                if self.nodes[v].role == Role::Output {
                    for &ei in &incoming[v] {
                        let e = &self.edges[ei];
                        let k = self.nodes[e.from].subnet;
                        let term = self.p * e.weight.abs().ln() + r[e.from];
                        per_subnet[k] = log_sum_exp([per_subnet[k], term].into_iter());
                    }
                }
            }
            Ok(per_subnet.into_iter().map(|lm| (lm / self.p).exp()).collect())
        } else {
            for &v in &order {
                r[v] = match self.nodes[v].role {
                    Role::Input => 1.0,
                    _ => incoming[v]
                        .iter()
                        .map(|&ei| {
                            let e = &self.edges[ei];
                            e.weight.abs().powf(self.p) * r[e.from]
                        })
                        .sum(),
                };
                if self.nodes[v].role == Role::Output {
                    for &ei in &incoming[v] {
                        let e = &self.edges[ei];
                        per_subnet[self.nodes[e.from].subnet] +=
                            e.weight.abs().powf(self.p) * r[e.from];
                    }
                }
            }
            Ok(per_subnet
                .into_iter()
                .map(|m| m.powf(1.0 / self.p))
                .collect())
        }
    }

    fn aggregate(&self, norms: Vec<f64>) -> PathNormValue {
        PathNormValue {
            value: norms.iter().sum(),
            p: self.p,
        }
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Path regularizer over all edges.
pub fn path_regularizer(dag: &PathDag) -> Result<PathNormValue> {
    Ok(dag.aggregate(dag.subnet_norms(false)?))
}

/// LIF path regularizer: only scale-bearing edges carry weight factors and
/// path mass; leak edges are transparent to the scale symmetry and excluded.
pub fn lif_path_regularizer(dag: &PathDag) -> Result<PathNormValue> {
    Ok(dag.aggregate(dag.subnet_norms(true)?))
}

/// Normalize every hidden unit's incoming scale-bearing trainable block to
/// unit l_p^p mass. Tied copies of one parameter count once in the block and
/// are all divided by the same scale. Output weights are left unchanged;
/// binary activations make the function invariant.
pub fn normalize_incoming(dag: &PathDag) -> Result<PathDag> {
    let mut out = dag.clone();
    // group id -> smallest member node (for error reporting and fixed order)
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut singleton_base = dag
        .nodes
        .iter()
        .filter_map(|n| n.norm_group)
        .max()
        .map(|g| g + 1)
        .unwrap_or(0);
    let mut node_group = vec![usize::MAX; dag.nodes.len()];
    for (v, node) in dag.nodes.iter().enumerate() {
        if node.role != Role::Hidden {
            continue;
        }
        let g = match node.norm_group {
            Some(g) => g,
            None => {
                let g = singleton_base;
                singleton_base += 1;
                g
            }
        };
        node_group[v] = g;
        groups.entry(g).or_default().push(v);
    }
    let mut order: Vec<usize> = groups.keys().cloned().collect();
    order.sort_unstable();
    for g in order {
        let members: HashSet<usize> = groups[&g].iter().cloned().collect();
        let mut seen_ties = HashSet::new();
        let mut mass = 0.0f64;
        let mut block = Vec::new();
        for (ei, e) in dag.edges.iter().enumerate() {
            if !members.contains(&e.to) || !e.scale_bearing || !e.trainable {
                continue;
            }
            block.push(ei);
            let counted = match e.tie_group {
                Some(t) => seen_ties.insert(t),
                None => true,
            };
            if counted {
                mass += e.weight.abs().powf(dag.p);
            }
        }
        if mass == 0.0 {
            return Err(Error::DegenerateNode {
                node: groups[&g][0],
            });
        }
        let a = mass.powf(1.0 / dag.p);
        for ei in block {
            out.edges[ei].weight /= a;
        }
    }
    Ok(out)
}

/// Witness-level normalization: per neuron, the scale-bearing block is the
/// p_in column plus the threshold when it is trainable. The removed scale is
/// applied via membrane rescaling, so spikes are unchanged.
pub fn lif_normalize(
    witness: &LifWitness,
    trainable_threshold: bool,
    p: f64,
) -> Result<LifWitness> {
    let mut scales = Vec::with_capacity(witness.layers.len());
    for (l, layer) in witness.layers.iter().enumerate() {
        let mut a = Array1::zeros(layer.width());
        for i in 0..layer.width() {
            let mut mass: f64 = layer.p_in.column(i).iter().map(|w| w.abs().powf(p)).sum();
            if trainable_threshold {
                mass += layer.u_thr[i].abs().powf(p);
            }
            if mass == 0.0 {
                return Err(Error::DegenerateNeuron {
                    layer: l + 1,
                    neuron: i,
                });
            }
            a[i] = 1.0 / mass.powf(1.0 / p);
        }
        scales.push(a);
    }
    lif::lif_rescale(witness, &scales)
}

/// Joint column normalization for recurrent threshold layers:
/// ||p_in[:,i]||_p^p + ||p_rec[:,i]||_p^p = 1 per neuron. Spikes invariant.
pub fn normalize_rnn_params(
    layers: &[ThresholdRnnParams],
    p: f64,
) -> Result<Vec<ThresholdRnnParams>> {
    let mut out = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let m = layer.p_in.ncols();
        let mut p_in = layer.p_in.clone();
        let mut p_rec = layer.p_rec.clone();
        for i in 0..m {
            let mass: f64 = layer.p_in.column(i).iter().map(|w| w.abs().powf(p)).sum::<f64>()
                + layer.p_rec.column(i).iter().map(|w| w.abs().powf(p)).sum::<f64>();
            if mass == 0.0 {
                return Err(Error::DegenerateNeuron {
                    layer: l + 1,
                    neuron: i,
                });
            }
            let a = mass.powf(1.0 / p);
            p_in.column_mut(i).mapv_inplace(|w| w / a);
            p_rec.column_mut(i).mapv_inplace(|w| w / a);
        }
        out.push(ThresholdRnnParams { p_in, p_rec });
    }
    Ok(out)
}

impl PathDag {
    /// Parallel feedforward threshold network: one weight-matrix stack per
    /// subnet over shared inputs and outputs. The last matrix of each stack is
    /// the (linear) output layer.
    pub fn from_parallel_feedforward(subnets: &[Vec<Array2<f64>>], p: f64) -> PathDag {
        assert!(!subnets.is_empty());
        let d_in = subnets[0][0].nrows();
        let d_out = subnets[0].last().unwrap().ncols();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let inputs: Vec<usize> = (0..d_in)
            .map(|_| {
                nodes.push(Node {
                    role: Role::Input,
                    layer: 0,
                    act: Act::Linear,
                    norm_group: None,
                    subnet: 0,
                });
                nodes.len() - 1
            })
            .collect();
        let outputs: Vec<usize> = (0..d_out)
            .map(|_| {
                nodes.push(Node {
                    role: Role::Output,
                    layer: usize::MAX,
                    act: Act::Linear,
                    norm_group: None,
                    subnet: 0,
                });
                nodes.len() - 1
            })
            .collect();
        let mut next_group = 0;
        for (k, mats) in subnets.iter().enumerate() {
            assert_eq!(mats[0].nrows(), d_in);
            let mut prev = inputs.clone();
            for (li, w) in mats.iter().enumerate() {
                assert_eq!(w.nrows(), prev.len(), "subnet {k} layer {li} fan-in");
                let is_output = li == mats.len() - 1;
                let cur: Vec<usize> = if is_output {
                    assert_eq!(w.ncols(), d_out);
                    outputs.clone()
                } else {
                    (0..w.ncols())
                        .map(|_| {
                            nodes.push(Node {
                                role: Role::Hidden,
                                layer: li + 1,
                                act: Act::Threshold,
                                norm_group: Some(next_group),
                                subnet: k,
                            });
                            next_group += 1;
                            nodes.len() - 1
                        })
                        .collect()
                };
                for (j, &from) in prev.iter().enumerate() {
                    for (i, &to) in cur.iter().enumerate() {
                        edges.push(Edge {
                            from,
                            to,
                            weight: w[(j, i)],
                            scale_bearing: true,
                            trainable: true,
                            tie_group: None,
                        });
                    }
                }
                prev = cur;
            }
        }
        PathDag { nodes, edges, p }
    }

    pub fn from_feedforward(mats: &[Array2<f64>], p: f64) -> PathDag {
        PathDag::from_parallel_feedforward(std::slice::from_ref(&mats.to_vec()), p)
    }

    /// Unrolled recurrent threshold network with tie groups across time.
    /// Initial-state nodes are unit-mass sources.
    pub fn from_threshold_rnn(
        layers: &[ThresholdRnnParams],
        p_out: &Array2<f64>,
        t_len: usize,
        p: f64,
    ) -> PathDag {
        let d_in = layers[0].p_in.nrows();
        let d_out = p_out.ncols();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut tie = TieCounter::default();
        // inputs per timestep
        let x: Vec<Vec<usize>> = (1..=t_len)
            .map(|t| {
                (0..d_in)
                    .map(|_| push_node(&mut nodes, Role::Input, t, Act::Linear, None, 0))
                    .collect()
            })
            .collect();
        let outputs: Vec<usize> = (0..d_out)
            .map(|_| push_node(&mut nodes, Role::Output, t_len + 1, Act::Linear, None, 0))
            .collect();
        let mut group = 0usize;
        let mut h_prev: Vec<Vec<usize>> = Vec::new(); // [layer][neuron] at t-1
        let mut groups_of: Vec<Vec<usize>> = Vec::new();
        // initial states
        for layer in layers {
            let m = layer.p_rec.ncols();
            let init: Vec<usize> = (0..m)
                .map(|_| push_node(&mut nodes, Role::Input, 0, Act::Linear, None, 0))
                .collect();
            h_prev.push(init);
            groups_of.push((0..m).map(|_| {
                group += 1;
                group - 1
            }).collect());
        }
        let mut h_nodes: Vec<Vec<Vec<usize>>> = vec![Vec::new(); layers.len()];
        for t in 1..=t_len {
            let mut below = x[t - 1].clone();
            for (l, layer) in layers.iter().enumerate() {
                let m = layer.p_rec.ncols();
                let cur: Vec<usize> = (0..m)
                    .map(|i| {
                        push_node(
                            &mut nodes,
                            Role::Hidden,
                            t,
                            Act::Threshold,
                            Some(groups_of[l][i]),
                            0,
                        )
                    })
                    .collect();
                for (j, &from) in below.iter().enumerate() {
                    for (i, &to) in cur.iter().enumerate() {
                        edges.push(Edge {
                            from,
                            to,
                            weight: layer.p_in[(j, i)],
                            scale_bearing: true,
                            trainable: true,
                            tie_group: Some(tie.get(("in", l, j, i))),
                        });
                    }
                }
                for (j, &from) in h_prev[l].iter().enumerate() {
                    for (i, &to) in cur.iter().enumerate() {
                        edges.push(Edge {
                            from,
                            to,
                            weight: layer.p_rec[(j, i)],
                            scale_bearing: true,
                            trainable: true,
                            tie_group: Some(tie.get(("rec", l, j, i))),
                        });
                    }
                }
                h_prev[l] = cur.clone();
                below = cur.clone();
                h_nodes[l].push(cur);
            }
        }
        // final-time readout
        let last = h_nodes.last().unwrap().last().unwrap();
        for (i, &from) in last.iter().enumerate() {
            for (o, &to) in outputs.iter().enumerate() {
                edges.push(Edge {
                    from,
                    to,
                    weight: p_out[(i, o)],
                    scale_bearing: true,
                    trainable: true,
                    tie_group: None,
                });
            }
        }
        PathDag { nodes, edges, p }
    }

    /// Unrolled K-parallel LIF network. Membrane nodes are linear, spike
    /// nodes threshold their membrane through a fixed unit edge. Leak edges
    /// are not scale-bearing; reset edges are scale-bearing exactly when the
    /// threshold is trainable.
    pub fn from_parallel_snn(
        subnets: &[(&LifWitness, &Array2<f64>)],
        t_len: usize,
        trainable_threshold: bool,
        per_timestep_readout: bool,
        p: f64,
    ) -> PathDag {
        let d_in = subnets[0].0.input_dim();
        let d_out = subnets[0].1.ncols();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut tie = TieCounter::default();
        let x: Vec<Vec<usize>> = (1..=t_len)
            .map(|t| {
                (0..d_in)
                    .map(|_| push_node(&mut nodes, Role::Input, t, Act::Linear, None, 0))
                    .collect()
            })
            .collect();
        let outputs: Vec<usize> = (0..d_out)
            .map(|_| push_node(&mut nodes, Role::Output, t_len + 1, Act::Linear, None, 0))
            .collect();
        let mut group = 0usize;
        for (k, (witness, p_out)) in subnets.iter().enumerate() {
            let mut u_prev: Vec<Vec<usize>> = Vec::new();
            let mut s_prev: Vec<Vec<usize>> = Vec::new();
            let mut groups_of: Vec<Vec<usize>> = Vec::new();
            for layer in &witness.layers {
                let m = layer.width();
                u_prev.push(
                    (0..m)
                        .map(|_| push_node(&mut nodes, Role::Input, 0, Act::Linear, None, k))
                        .collect(),
                );
                s_prev.push(
                    (0..m)
                        .map(|_| push_node(&mut nodes, Role::Input, 0, Act::Linear, None, k))
                        .collect(),
                );
                groups_of.push(
                    (0..m)
                        .map(|_| {
                            group += 1;
                            group - 1
                        })
                        .collect(),
                );
            }
            let mut s_final: Vec<Vec<usize>> = Vec::new();
            for t in 1..=t_len {
                let mut below = x[t - 1].clone();
                for (l, layer) in witness.layers.iter().enumerate() {
                    let m = layer.width();
                    let u_cur: Vec<usize> = (0..m)
                        .map(|i| {
                            push_node(
                                &mut nodes,
                                Role::Hidden,
                                t,
                                Act::Linear,
                                Some(groups_of[l][i]),
                                k,
                            )
                        })
                        .collect();
                    let s_cur: Vec<usize> = (0..m)
                        .map(|i| {
                            push_node(
                                &mut nodes,
                                Role::Hidden,
                                t,
                                Act::Threshold,
                                Some(groups_of[l][i]),
                                k,
                            )
                        })
                        .collect();
                    for (j, &from) in below.iter().enumerate() {
                        for i in 0..m {
                            edges.push(Edge {
                                from,
                                to: u_cur[i],
                                weight: layer.p_in[(j, i)],
                                scale_bearing: true,
                                trainable: true,
                                tie_group: Some(tie.get(("in", k + 1, l, j * m + i))),
                            });
                        }
                    }
                    for i in 0..m {
                        // leak: membrane to membrane, no removable scale
                        edges.push(Edge {
                            from: u_prev[l][i],
                            to: u_cur[i],
                            weight: layer.leak[i],
                            scale_bearing: false,
                            trainable: false,
                            tie_group: Some(tie.get(("leak", k + 1, l, i))),
                        });
                        // soft reset
                        edges.push(Edge {
                            from: s_prev[l][i],
                            to: u_cur[i],
                            weight: -layer.u_thr[i],
                            scale_bearing: trainable_threshold,
                            trainable: trainable_threshold,
                            tie_group: Some(tie.get(("thr", k + 1, l, i))),
                        });
                        // membrane -> spike, fixed unit edge
                        edges.push(Edge {
                            from: u_cur[i],
                            to: s_cur[i],
                            weight: 1.0,
                            scale_bearing: true,
                            trainable: false,
                            tie_group: None,
                        });
                    }
                    u_prev[l] = u_cur;
                    s_prev[l] = s_cur.clone();
                    below = s_cur.clone();
                    if l == witness.layers.len() - 1 {
                        s_final.push(s_cur);
                    }
                }
            }
            let read_ts: Vec<usize> = if per_timestep_readout {
                (0..t_len).collect()
            } else {
                vec![t_len - 1]
            };
            for ti in read_ts {
                for (i, &from) in s_final[ti].iter().enumerate() {
                    for (o, &to) in outputs.iter().enumerate() {
                        edges.push(Edge {
                            from,
                            to,
                            weight: p_out[(i, o)],
                            scale_bearing: true,
                            trainable: true,
                            tie_group: if per_timestep_readout {
                                Some(tie.get(("out", k + 1, i, o)))
                            } else {
                                None
                            },
                        });
                    }
                }
            }
        }
        PathDag { nodes, edges, p }
    }

    /// Evaluate the dag as a network: inputs given in input-node order,
    /// outputs returned in output-node order.
    pub fn eval(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let order = self.topo_order()?;
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (ei, e) in self.edges.iter().enumerate() {
            incoming[e.to].push(ei);
        }
        let mut vals = vec![0.0f64; self.nodes.len()];
        let mut next_input = 0;
        for v in 0..self.nodes.len() {
            if self.nodes[v].role == Role::Input {
                vals[v] = inputs[next_input];
                next_input += 1;
            }
        }
        assert_eq!(next_input, inputs.len(), "input count mismatch");
        for &v in &order {
            if self.nodes[v].role == Role::Input {
                continue;
            }
            let z: f64 = incoming[v]
                .iter()
                .map(|&ei| self.edges[ei].weight * vals[self.edges[ei].from])
                .sum();
            vals[v] = match (self.nodes[v].role, self.nodes[v].act) {
                (Role::Hidden, Act::Threshold) => {
                    if z >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => z,
            };
        }
        Ok((0..self.nodes.len())
            .filter(|&v| self.nodes[v].role == Role::Output)
            .map(|v| vals[v])
            .collect())
    }
}

fn push_node(
    nodes: &mut Vec<Node>,
    role: Role,
    layer: usize,
    act: Act,
    norm_group: Option<usize>,
    subnet: usize,
) -> usize {
    nodes.push(Node {
        role,
        layer,
        act,
        norm_group,
        subnet,
    });
    nodes.len() - 1
}

#[derive(Default)]
struct TieCounter {
    map: HashMap<(&'static str, usize, usize, usize), usize>,
}

impl TieCounter {
    fn get(&mut self, key: (&'static str, usize, usize, usize)) -> usize {
        let next = self.map.len();
        *self.map.entry(key).or_insert(next)
    }
}
