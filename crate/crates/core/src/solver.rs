//! The finite convex program over a spike dictionary:
//!
//! ```text
//! min_w  L(D w, Y) + (beta / sqrt(m_last)) * ||w||
//! ```
//!
//! with L a convex loss (squared, binary logistic, softmax), D the bit-packed
//! dictionary, and the penalty either plain l1 or row-grouped l2/l1 across
//! output coordinates. Solved by monotone accelerated proximal gradient with
//! function-value restarts and backtracking. Every reported solution carries
//! an exact Fenchel primal-dual gap certificate:
//!
//! ```text
//! lambda0 = -grad L(D w, Y)
//! lambda  = lambda0 * min(1, beta / (sqrt(m_last) * max_i ||lambda0^T d_i||))
//! dual    = -L*(-lambda),   gap = primal - dual
//! ```
//!
//! The rescaled lambda is always dual-feasible, so the gap is a true global
//! suboptimality bound. A Gram-matrix fast path accelerates squared-loss
//! iterations when row weights are constant per timestep block; certificates
//! and stopping tests always recompute gradients through the exact bit-matrix
//! product, never through the Gram cache.

use crate::bitmat::BitMatrix;
use crate::dictionary::SpikeDictionary;
use crate::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 50_000;
pub const SOLUTION_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Logistic,
    Softmax,
}

/// Loss specification with optional per-row and per-output weights; the
/// effective weight of entry (i, j) is row_weights[i] * col_weights[j].
#[derive(Clone, Debug)]
pub struct LossSpec {
    pub kind: LossKind,
    pub row_weights: Option<Array1<f64>>,
    pub col_weights: Option<Array1<f64>>,
}

impl LossSpec {
    pub fn plain(kind: LossKind) -> LossSpec {
        LossSpec {
            kind,
            row_weights: None,
            col_weights: None,
        }
    }

    fn rows(&self, n: usize) -> Array1<f64> {
        self.row_weights
            .clone()
            .unwrap_or_else(|| Array1::ones(n))
    }

    fn cols(&self, d: usize) -> Array1<f64> {
        self.col_weights
            .clone()
            .unwrap_or_else(|| Array1::ones(d))
    }

    fn validate(&self, preds: &Array2<f64>, targets: &Array2<f64>) -> Result<()> {
        let (n, d) = targets.dim();
        if preds.dim() != (n, d) {
            return Err(Error::ShapeMismatch {
                layer: 0,
                got: format!("{:?}", preds.dim()),
                expected: format!("{:?}", targets.dim()),
            });
        }
        if let Some(r) = &self.row_weights {
            if r.len() != n || r.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
                return Err(Error::Config {
                    path: "loss.row_weights".into(),
                    message: "need one positive finite weight per row".into(),
                });
            }
        }
        // zero column weights are allowed (they drop outputs from the loss),
        // but at least one output must count
        if let Some(c) = &self.col_weights {
            if c.len() != d
                || c.iter().any(|v| *v < 0.0 || !v.is_finite())
                || c.iter().all(|v| *v == 0.0)
            {
                return Err(Error::Config {
                    path: "loss.col_weights".into(),
                    message: "need nonnegative finite weights with a positive entry".into(),
                });
            }
        }
        match self.kind {
            LossKind::Squared => {}
            LossKind::Logistic => {
                if targets.iter().any(|y| *y != 1.0 && *y != -1.0) {
                    return Err(Error::LabelDomain(
                        "logistic targets must be +1 or -1".into(),
                    ));
                }
            }
            LossKind::Softmax => {
                if self.col_weights.is_some() {
                    return Err(Error::Config {
                        path: "loss.col_weights".into(),
                        message: "softmax couples outputs; per-output weights unsupported".into(),
                    });
                }
                for row in targets.rows() {
                    let s: f64 = row.sum();
                    if row.iter().any(|y| *y < 0.0) || (s - 1.0).abs() > 1e-9 {
                        return Err(Error::LabelDomain(
                            "softmax target rows must lie on the simplex".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Curvature bound of the unweighted per-entry (or per-row) loss.
    fn smoothness_factor(&self) -> f64 {
        match self.kind {
            LossKind::Squared => 1.0,
            LossKind::Logistic => 0.25,
            LossKind::Softmax => 0.5,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn xlnx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

pub fn loss_value(spec: &LossSpec, preds: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    spec.validate(preds, targets)?;
    let (n, d) = targets.dim();
    let r = spec.rows(n);
    let c = spec.cols(d);
    let v = match spec.kind {
        LossKind::Squared => {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..d {
                    let e = preds[(i, j)] - targets[(i, j)];
                    acc += 0.5 * r[i] * c[j] * e * e;
                }
            }
            acc
        }
        LossKind::Logistic => {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..d {
                    acc += r[i] * c[j] * softplus(-targets[(i, j)] * preds[(i, j)]);
                }
            }
            acc
        }
        LossKind::Softmax => {
            let mut acc = 0.0;
            for i in 0..n {
                let row = preds.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let dot: f64 = row
                    .iter()
                    .zip(targets.row(i).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                acc += r[i] * (lse - dot);
            }
            acc
        }
    };
    Ok(v)
}

pub fn loss_gradient(
    spec: &LossSpec,
    preds: &Array2<f64>,
    targets: &Array2<f64>,
) -> Result<Array2<f64>> {
    spec.validate(preds, targets)?;
    let (n, d) = targets.dim();
    let r = spec.rows(n);
    let c = spec.cols(d);
    let mut g = Array2::zeros((n, d));
    match spec.kind {
        LossKind::Squared => {
            for i in 0..n {
                for j in 0..d {
                    g[(i, j)] = r[i] * c[j] * (preds[(i, j)] - targets[(i, j)]);
                }
            }
        }
        LossKind::Logistic => {
            for i in 0..n {
                for j in 0..d {
                    let y = targets[(i, j)];
                    g[(i, j)] = -r[i] * c[j] * y * sigmoid(-y * preds[(i, j)]);
                }
            }
        }
        LossKind::Softmax => {
            for i in 0..n {
                let row = preds.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..d {
                    g[(i, j)] = r[i] * (exps[j] / z - targets[(i, j)]);
                }
            }
        }
    }
    Ok(g)
}

/// Fenchel conjugate of the full weighted loss, evaluated at z. Returns +inf
/// outside the conjugate's domain (with a 1e-12-relative feasibility slack).
pub fn loss_conjugate(spec: &LossSpec, z: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    spec.validate(z, targets)?;
    let (n, d) = targets.dim();
    let r = spec.rows(n);
    let c = spec.cols(d);
    let v = match spec.kind {
        LossKind::Squared => {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..d {
                    let w = r[i] * c[j];
                    if w == 0.0 {
                        // dropped output: conjugate is the indicator of z = 0
                        if z[(i, j)] != 0.0 {
                            return Ok(f64::INFINITY);
                        }
                        continue;
                    }
                    acc += z[(i, j)] * z[(i, j)] / (2.0 * w) + z[(i, j)] * targets[(i, j)];
                }
            }
            acc
        }
        LossKind::Logistic => {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..d {
                    let w = r[i] * c[j];
                    if w == 0.0 {
                        if z[(i, j)] != 0.0 {
                            return Ok(f64::INFINITY);
                        }
                        continue;
                    }
                    let s = -z[(i, j)] * targets[(i, j)] / w;
                    if !(-1e-12..=1.0 + 1e-12).contains(&s) {
                        return Ok(f64::INFINITY);
                    }
                    let s = s.clamp(0.0, 1.0);
                    acc += w * (xlnx(s) + xlnx(1.0 - s));
                }
            }
            acc
        }
        LossKind::Softmax => {
            let mut acc = 0.0;
            for i in 0..n {
                let mut sum = 0.0;
                let mut ent = 0.0;
                for j in 0..d {
                    let q = z[(i, j)] / r[i] + targets[(i, j)];
                    if q < -1e-12 {
                        return Ok(f64::INFINITY);
                    }
                    sum += q;
                    ent += xlnx(q.max(0.0));
                }
                if (sum - 1.0).abs() > 1e-9 {
                    return Ok(f64::INFINITY);
                }
                acc += r[i] * ent;
            }
            acc
        }
    };
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// sum of absolute values over all coefficients
    PlainL1,
    /// sum over dictionary columns of the l2 norm across outputs; the dual
    /// constraint then bounds ||lambda^T d_i||_2, matching the per-subnet
    /// output-norm grouping
    RowGroupL2,
}

#[derive(Clone, Debug)]
pub struct ConvexProblem<'a> {
    pub dict: &'a SpikeDictionary,
    /// n_rows x d_out
    pub targets: Array2<f64>,
    pub reg_beta: f64,
    pub loss: LossSpec,
    pub penalty: PenaltyMode,
}

impl<'a> ConvexProblem<'a> {
    pub fn new(
        dict: &'a SpikeDictionary,
        targets: Array2<f64>,
        reg_beta: f64,
        loss: LossSpec,
    ) -> ConvexProblem<'a> {
        let penalty = if targets.ncols() > 1 {
            PenaltyMode::RowGroupL2
        } else {
            PenaltyMode::PlainL1
        };
        ConvexProblem {
            dict,
            targets,
            reg_beta,
            loss,
            penalty,
        }
    }

    /// Effective penalty scale tau = beta / sqrt(m_last).
    pub fn tau(&self) -> f64 {
        self.reg_beta / (self.dict.m_last as f64).sqrt()
    }

    pub fn penalty_value(&self, w: &Array2<f64>) -> f64 {
        match self.penalty {
            PenaltyMode::PlainL1 => w.iter().map(|v| v.abs()).sum(),
            PenaltyMode::RowGroupL2 => w
                .rows()
                .into_iter()
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum(),
        }
    }

    pub fn predictions(&self, w: &Array2<f64>) -> Array2<f64> {
        self.dict.columns.mul_coeffs(w)
    }

    pub fn primal_value(&self, w: &Array2<f64>) -> Result<f64> {
        let preds = self.predictions(w);
        Ok(loss_value(&self.loss, &preds, &self.targets)? + self.tau() * self.penalty_value(w))
    }

    fn validate(&self) -> Result<()> {
        if self.dict.n_columns() == 0 {
            return Err(Error::Config {
                path: "dictionary".into(),
                message: "empty dictionary".into(),
            });
        }
        if !(self.reg_beta > 0.0) {
            return Err(Error::Config {
                path: "reg_beta".into(),
                message: format!("must be positive, got {}", self.reg_beta),
            });
        }
        if self.targets.nrows() != self.dict.columns.n_rows() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                got: format!("{} target rows", self.targets.nrows()),
                expected: format!("{} dictionary rows", self.dict.columns.n_rows()),
            });
        }
        Ok(())
    }

    /// max_i ||z^T d_i|| with the norm dual to the penalty grouping;
    /// z is n_rows x d_out.
    pub fn dual_constraint_norm(&self, z: &Array2<f64>) -> f64 {
        let dtz = self.dict.columns.t_mul(z); // P x d_out
        let mut worst = 0.0f64;
        for row in dtz.rows() {
            let v = match self.penalty {
                PenaltyMode::PlainL1 => row.iter().fold(0.0f64, |a, b| a.max(b.abs())),
                PenaltyMode::RowGroupL2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
            };
            worst = worst.max(v);
        }
        worst
    }
}

#[derive(Clone, Debug)]
pub struct ConvexSolution {
    pub w_tilde: Array2<f64>,
    pub primal_value: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub iterations: usize,
    pub lambda: Array2<f64>,
    /// primal values at certificate checks, nonincreasing by construction
    pub trace: Vec<f64>,
    pub used_gram: bool,
}

/// Feasible dual point, dual value, and certified gap at w.
pub fn dual_certificate(
    problem: &ConvexProblem,
    w: &Array2<f64>,
) -> Result<(Array2<f64>, f64, f64)> {
    let preds = problem.predictions(w);
    let primal = loss_value(&problem.loss, &preds, &problem.targets)?
        + problem.tau() * problem.penalty_value(w);
    let grad = loss_gradient(&problem.loss, &preds, &problem.targets)?;
    let lambda0 = grad.mapv(|v| -v);
    let m_sqrt = (problem.dict.m_last as f64).sqrt();
    let norm = problem.dual_constraint_norm(&lambda0);
    let scale = if m_sqrt * norm > problem.reg_beta {
        problem.reg_beta / (m_sqrt * norm)
    } else {
        1.0
    };
    let lambda = lambda0.mapv(|v| v * scale);
    let neg_lambda = lambda.mapv(|v| -v);
    let dual = -loss_conjugate(&problem.loss, &neg_lambda, &problem.targets)?;
    Ok((lambda, dual, primal - dual))
}

fn prox(w: &Array2<f64>, a: f64, mode: PenaltyMode) -> Array2<f64> {
    match mode {
        PenaltyMode::PlainL1 => w.mapv(|v| {
            if v > a {
                v - a
            } else if v < -a {
                v + a
            } else {
                0.0
            }
        }),
        PenaltyMode::RowGroupL2 => {
            let mut out = w.clone();
            for mut row in out.rows_mut() {
                let n2 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n2 <= a {
                    row.fill(0.0);
                } else {
                    let s = 1.0 - a / n2;
                    row.mapv_inplace(|v| v * s);
                }
            }
            out
        }
    }
}

/// Largest eigenvalue of D^T diag(r) D by power iteration (deterministic
/// seeded start), slightly inflated for a safe step size.
fn operator_norm_sq(d: &BitMatrix, r: &Array1<f64>) -> f64 {
    use rand::Rng;
    let p = d.n_cols();
    let mut rng = crate::rng::stream(0, "solver-power", &[d.n_rows() as u64, p as u64]);
    let mut v = Array2::from_shape_fn((p, 1), |_| rng.gen_range(-1.0..1.0f64));
    let mut sigma = 1.0f64;
    for _ in 0..60 {
        let mut dv = d.mul_coeffs(&v); // n x 1
        for (i, mut row) in dv.rows_mut().into_iter().enumerate() {
            row[0] *= r[i];
        }
        let next = d.t_mul(&dv); // p x 1
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 1.0;
        }
        sigma = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        v = next.mapv(|x| x / norm);
    }
    sigma * 1.01
}

/// Gram matrix D^T diag(r) D where r is constant on consecutive blocks of
/// `block_len` rows: computed from masked AND-popcounts per block.
fn block_weighted_gram(d: &BitMatrix, block_len: usize, block_w: &[f64]) -> Array2<f64> {
    let p = d.n_cols();
    let n = d.n_rows();
    assert_eq!(block_len * block_w.len(), n);
    let mut g = Array2::zeros((p, p));
    // extract per-block bit submatrices once
    let mut blocks: Vec<BitMatrix> = Vec::with_capacity(block_w.len());
    for (t, _) in block_w.iter().enumerate() {
        let mut sub = BitMatrix::new(block_len);
        let mut words = vec![0u64; block_len.div_ceil(64)];
        for c in 0..p {
            words.iter_mut().for_each(|w| *w = 0);
            for i in 0..block_len {
                if d.get(t * block_len + i, c) {
                    words[i / 64] |= 1 << (i % 64);
                }
            }
            sub.push_column_words(&words);
        }
        blocks.push(sub);
    }
    for a in 0..p {
        for b in a..p {
            let mut acc = 0.0;
            for (t, &wt) in block_w.iter().enumerate() {
                let ca = blocks[t].col(a);
                let cb = blocks[t].col(b);
                let mut pop = 0u32;
                for (x, y) in ca.iter().zip(cb) {
                    pop += (x & y).count_ones();
                }
                acc += wt * pop as f64;
            }
            g[(a, b)] = acc;
            g[(b, a)] = acc;
        }
    }
    g
}

/// Row weights usable by the Gram path: uniform, or constant per
/// n_samples-sized block (trajectory ramp). Returns (block_len, weights).
fn gram_blocks(problem: &ConvexProblem) -> Option<(usize, Vec<f64>)> {
    let n = problem.dict.columns.n_rows();
    match &problem.loss.row_weights {
        None => Some((n, vec![1.0])),
        Some(r) => {
            let b = problem.dict.n_samples();
            if b == 0 || n % b != 0 {
                return None;
            }
            let mut ws = Vec::with_capacity(n / b);
            for chunk in r.as_slice()?.chunks(b) {
                if chunk.iter().any(|v| *v != chunk[0]) {
                    return None;
                }
                ws.push(chunk[0]);
            }
            Some((b, ws))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub check_every: usize,
    /// disable the Gram fast path even when eligible
    pub force_matvec: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            check_every: 50,
            force_matvec: false,
        }
    }
}

pub fn solve(problem: &ConvexProblem, tol: f64, max_iter: usize) -> Result<ConvexSolution> {
    solve_with(
        problem,
        SolverOptions {
            tol,
            max_iter,
            ..SolverOptions::default()
        },
        None,
    )
}

pub fn solve_with(
    problem: &ConvexProblem,
    opts: SolverOptions,
    warm_start: Option<&Array2<f64>>,
) -> Result<ConvexSolution> {
    problem.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::Config {
            path: "tol".into(),
            message: "must be positive".into(),
        });
    }
    let p = problem.dict.n_columns();
    let d_out = problem.targets.ncols();
    let n = problem.targets.nrows();
    let tau = problem.tau();
    let r = problem.loss.rows(n);
    let c = problem.loss.cols(d_out);
    let max_c = c.iter().cloned().fold(0.0f64, f64::max);

    // Gram fast path: squared loss, block-constant row weights
    let gram = if !opts.force_matvec && problem.loss.kind == LossKind::Squared {
        gram_blocks(problem).map(|(bl, ws)| {
            let g = block_weighted_gram(&problem.dict.columns, bl, &ws);
            // b = D^T diag(r) Y
            let mut ry = problem.targets.clone();
            for (i, mut row) in ry.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|v| v * r[i]);
            }
            let b = problem.dict.columns.t_mul(&ry);
            (g, b)
        })
    } else {
        None
    };

    let lf = match &gram {
        Some((g, _)) => {
            // power iteration directly on the small Gram matrix
            let mut v = Array1::from_elem(p, 1.0 / (p as f64).sqrt());
            let mut sigma = 1.0f64;
            for _ in 0..60 {
                let next = g.dot(&v);
                let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    break;
                }
                sigma = norm;
                v = next.mapv(|x| x / norm);
            }
            (sigma * 1.01).max(1e-12) * max_c
        }
        None => {
            operator_norm_sq(&problem.dict.columns, &r)
                * problem.loss.smoothness_factor()
                * max_c
        }
    };

    // smooth part and its gradient; Gram path avoids bit matvecs, exact path
    // goes through the dictionary product
    let f_val = |w: &Array2<f64>| -> Result<f64> {
        let preds = problem.predictions(w);
        loss_value(&problem.loss, &preds, &problem.targets)
    };
    let f_grad = |w: &Array2<f64>| -> Result<Array2<f64>> {
        match &gram {
            Some((g, b)) => {
                let mut out = g.dot(w) - b;
                for (j, mut col) in out.columns_mut().into_iter().enumerate() {
                    col.mapv_inplace(|v| v * c[j]);
                }
                Ok(out)
            }
            None => {
                let preds = problem.predictions(w);
                let grad = loss_gradient(&problem.loss, &preds, &problem.targets)?;
                Ok(problem.dict.columns.t_mul(&grad))
            }
        }
    };
    // Gram-path f for backtracking only: 0.5 w'Gw - <w,b> + const; constant
    // omitted, so pair it with the same expansion at y
    let f_quad = |w: &Array2<f64>| -> f64 {
        match &gram {
            Some((g, b)) => {
                let gw = g.dot(w);
                let mut acc = 0.0;
                for j in 0..d_out {
                    let wj = w.column(j);
                    let quad: f64 = wj.iter().zip(gw.column(j)).map(|(a, x)| a * x).sum();
                    let lin: f64 = wj.iter().zip(b.column(j)).map(|(a, x)| a * x).sum();
                    acc += c[j] * (0.5 * quad - lin);
                }
                acc
            }
            None => unreachable!(),
        }
    };

    // objective used for monotonicity comparisons; in Gram mode it is the
    // quadratic expansion (off by a constant, identical on both sides of
    // every comparison)
    let obj = |w: &Array2<f64>| -> Result<f64> {
        let f = if gram.is_some() { f_quad(w) } else { f_val(w)? };
        Ok(f + tau * problem.penalty_value(w))
    };

    let mut w = match warm_start {
        Some(w0) if w0.dim() == (p, d_out) => w0.clone(),
        _ => Array2::zeros((p, d_out)),
    };
    let mut y = w.clone();
    let mut t_mom = 1.0f64;
    let step0 = 1.0 / lf;
    let mut step = step0;
    let mut f_w = obj(&w)?;
    if !f_w.is_finite() || !problem.primal_value(&w)?.is_finite() {
        return Err(Error::SolverDivergence);
    }

    let (mut lambda, mut dual, mut gap) = dual_certificate(problem, &w)?;
    let mut trace = vec![problem.primal_value(&w)?];
    let mut iterations = 0;

    while gap > opts.tol && iterations < opts.max_iter {
        let inner = opts.check_every.min(opts.max_iter - iterations).max(1);
        for _ in 0..inner {
            iterations += 1;
            let gy = f_grad(&y)?;
            if gy.iter().any(|v| !v.is_finite()) {
                return Err(Error::SolverDivergence);
            }
            // backtracking line search on the smooth part
            let fy = if gram.is_some() { f_quad(&y) } else { f_val(&y)? };
            let mut z;
            let mut fz_smooth;
            let mut halvings = 0;
            loop {
                z = prox(&(&y - &gy.mapv(|v| v * step)), step * tau, problem.penalty);
                fz_smooth = if gram.is_some() { f_quad(&z) } else { f_val(&z)? };
                let diff = &z - &y;
                let lin: f64 = diff.iter().zip(gy.iter()).map(|(a, b)| a * b).sum();
                let quad: f64 = diff.iter().map(|v| v * v).sum();
                if fz_smooth <= fy + lin + quad / (2.0 * step) + 1e-12 * (1.0 + fy.abs()) {
                    break;
                }
                step *= 0.5;
                halvings += 1;
                if halvings > 80 {
                    return Err(Error::SolverDivergence);
                }
            }
            let f_z = fz_smooth + tau * problem.penalty_value(&z);
            if !f_z.is_finite() {
                return Err(Error::SolverDivergence);
            }
            // monotone accelerated update: keep the better of candidate and
            // current iterate, but let the momentum point follow the
            // candidate so rejected steps still make progress
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_mom * t_mom).sqrt());
            let (w_next, f_next) = if f_z <= f_w {
                (z.clone(), f_z)
            } else {
                (w.clone(), f_w)
            };
            y = &w_next
                + &(&z - &w_next).mapv(|v| v * (t_mom / t_next))
                + &(&w_next - &w).mapv(|v| v * ((t_mom - 1.0) / t_next));
            w = w_next;
            f_w = f_next;
            t_mom = t_next;
        }
        let (l2, d2, g2) = dual_certificate(problem, &w)?;
        lambda = l2;
        dual = d2;
        gap = g2;
        trace.push(problem.primal_value(&w)?);
        // the line search only shrinks; relax it between checks so one bad
        // region does not pin the step forever
        step = (step * 2.0).min(step0);
    }

    Ok(ConvexSolution {
        primal_value: problem.primal_value(&w)?,
        w_tilde: w,
        dual_value: dual,
        gap,
        iterations,
        lambda,
        trace,
        used_gram: gram.is_some(),
    })
}

/// Stable content hash of a problem, stored beside persisted solutions so a
/// certificate can be matched to the exact program it certifies.
pub fn problem_hash(problem: &ConvexProblem) -> String {
    let mut h = Sha256::new();
    h.update(b"convex-problem-v1");
    for v in [
        problem.dict.columns.n_rows() as u64,
        problem.dict.n_columns() as u64,
        problem.dict.m_last as u64,
    ] {
        h.update(v.to_le_bytes());
    }
    for w in problem.dict.columns.raw_words() {
        h.update(w.to_le_bytes());
    }
    for v in problem.targets.iter() {
        h.update(v.to_le_bytes());
    }
    h.update(problem.reg_beta.to_le_bytes());
    h.update([match problem.loss.kind {
        LossKind::Squared => 0u8,
        LossKind::Logistic => 1,
        LossKind::Softmax => 2,
    }]);
    for wopt in [&problem.loss.row_weights, &problem.loss.col_weights] {
        match wopt {
            Some(ws) => {
                h.update([1u8]);
                for v in ws.iter() {
                    h.update(v.to_le_bytes());
                }
            }
            None => h.update([0u8]),
        }
    }
    h.update([match problem.penalty {
        PenaltyMode::PlainL1 => 0u8,
        PenaltyMode::RowGroupL2 => 1,
    }]);
    format!("{:x}", h.finalize())
}

#[derive(Serialize, Deserialize)]
struct SolutionJson {
    format_version: u32,
    shape: (usize, usize),
    /// (column, output, value) for nonzero coefficients
    triplets: Vec<(u32, u32, f64)>,
    primal_value: f64,
    dual_value: f64,
    gap: f64,
    iterations: usize,
    problem_hash: String,
}

pub fn save_solution(solution: &ConvexSolution, hash: &str, path: &Path) -> Result<()> {
    let mut triplets = Vec::new();
    for ((i, j), v) in solution.w_tilde.indexed_iter() {
        if *v != 0.0 {
            triplets.push((i as u32, j as u32, *v));
        }
    }
    let doc = SolutionJson {
        format_version: SOLUTION_FORMAT_VERSION,
        shape: solution.w_tilde.dim(),
        triplets,
        primal_value: solution.primal_value,
        dual_value: solution.dual_value,
        gap: solution.gap,
        iterations: solution.iterations,
        problem_hash: hash.to_string(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Loads (w_tilde, stored gap, problem hash); the caller re-certifies.
pub fn load_solution(path: &Path) -> Result<(Array2<f64>, SolutionMeta)> {
    let doc: SolutionJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.format_version != SOLUTION_FORMAT_VERSION {
        return Err(Error::Artifact {
            path: path.display().to_string(),
            message: format!("unsupported solution format {}", doc.format_version),
        });
    }
    let mut w = Array2::zeros(doc.shape);
    for (i, j, v) in &doc.triplets {
        if *i as usize >= doc.shape.0 || *j as usize >= doc.shape.1 {
            return Err(Error::Artifact {
                path: path.display().to_string(),
                message: "triplet out of bounds".into(),
            });
        }
        w[(*i as usize, *j as usize)] = *v;
    }
    Ok((
        w,
        SolutionMeta {
            primal_value: doc.primal_value,
            dual_value: doc.dual_value,
            gap: doc.gap,
            iterations: doc.iterations,
            problem_hash: doc.problem_hash,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct SolutionMeta {
    pub primal_value: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub iterations: usize,
    pub problem_hash: String,
}

/// Support rows (dictionary columns with any nonzero coefficient).
pub fn support(w: &Array2<f64>) -> Vec<usize> {
    w.rows()
        .into_iter()
        .enumerate()
        .filter(|(_, row)| row.iter().any(|v| *v != 0.0))
        .map(|(i, _)| i)
        .collect()
}

/// Drops near-zero coefficients in place; returns the count of cleared rows.
pub fn sparsify(w: &mut Array2<f64>, abs_tol: f64) -> usize {
    let mut cleared = 0;
    for mut row in w.rows_mut() {
        let n2 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n2 > 0.0 && n2 <= abs_tol {
            row.fill(0.0);
            cleared += 1;
        }
    }
    let _ = Axis(0);
    cleared
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitmat::BitMatrix;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn dict_from_dense(cols: &[Vec<f64>], m_last: usize) -> SpikeDictionary {
        let n = cols[0].len();
        let mut bm = BitMatrix::new(n);
        for col in cols {
            let arr = Array1::from_vec(col.clone());
            bm.push_column_f64(arr.view());
        }
        SpikeDictionary {
            columns: bm,
            witness_of: (0..cols.len()).map(|i| (i as u32, 0)).collect(),
            t_len: 1,
            n_layers: 1,
            m_last,
            n_samples: n,
        }
    }

    fn random_dict(n: usize, p: usize, seed: u64) -> SpikeDictionary {
        let mut rng = crate::rng::stream(seed, "solver-test", &[0]);
        loop {
            let cols: Vec<Vec<f64>> = (0..p)
                .map(|_| (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect())
                .collect();
            let mut uniq: Vec<Vec<f64>> = Vec::new();
            for c in cols {
                if !uniq.contains(&c) {
                    uniq.push(c);
                }
            }
            if uniq.len() == p {
                return dict_from_dense(&uniq, 1);
            }
        }
    }

    // Closed-form 1-column lasso: D all-ones (n=4), y = 0.5, tau = 0.3
    // => w* = (sum d.y - tau) / ||d||^2 = (2 - 0.3)/4 = 0.425.
    #[test]
    fn one_column_lasso_closed_form() {
        let dict = dict_from_dense(&[vec![1.0; 4]], 1);
        let targets = Array2::from_elem((4, 1), 0.5);
        let problem = ConvexProblem::new(&dict, targets, 0.3, LossSpec::plain(LossKind::Squared));
        let sol = solve(&problem, 1e-12, 20_000).unwrap();
        assert_abs_diff_eq!(sol.w_tilde[(0, 0)], 0.425, epsilon = 1e-9);
        assert!(sol.gap <= 1e-12, "gap {}", sol.gap);
        // certificate evaluated at the hand-written optimum is exact
        let w_star = array![[0.425]];
        let (_, _, gap) = dual_certificate(&problem, &w_star).unwrap();
        assert!(gap.abs() <= 1e-12, "gap {gap}");
    }

    #[test]
    fn null_solution_above_threshold() {
        let dict = random_dict(6, 4, 1);
        let mut rng = crate::rng::stream(2, "solver-test", &[1]);
        let targets = Array2::from_shape_fn((6, 1), |_| rng.gen_range(-1.0..1.0));
        let spec = LossSpec::plain(LossKind::Squared);
        // beta at the null threshold: sqrt(m) * max_i |d_i^T grad L(0)|
        let g0 = loss_gradient(&spec, &Array2::zeros((6, 1)), &targets).unwrap();
        let thresh = dict.columns.t_mul(&g0).iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let problem = ConvexProblem::new(&dict, targets, thresh * 1.05, spec);
        let sol = solve(&problem, 1e-10, 10_000).unwrap();
        assert!(sol.w_tilde.iter().all(|v| *v == 0.0));
        assert!(sol.gap <= 1e-12, "gap {}", sol.gap);
        assert_eq!(sol.iterations, 0, "certificate at 0 already exact");
    }

    #[test]
    fn rejects_nonpositive_beta() {
        let dict = dict_from_dense(&[vec![1.0; 4]], 1);
        let problem = ConvexProblem::new(
            &dict,
            Array2::zeros((4, 1)),
            0.0,
            LossSpec::plain(LossKind::Squared),
        );
        assert!(matches!(
            solve(&problem, 1e-8, 10),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn logistic_at_zero_is_n_log2() {
        let spec = LossSpec::plain(LossKind::Logistic);
        let preds = Array2::zeros((8, 1));
        let targets = Array2::from_shape_fn((8, 1), |(i, _)| if i % 2 == 0 { 1.0 } else { -1.0 });
        let v = loss_value(&spec, &preds, &targets).unwrap();
        assert_abs_diff_eq!(v, 8.0 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn squared_loss_zero_at_fit() {
        let spec = LossSpec::plain(LossKind::Squared);
        let y = array![[1.0, -2.0], [0.5, 3.0]];
        assert_eq!(loss_value(&spec, &y, &y).unwrap(), 0.0);
        assert!(loss_gradient(&spec, &y, &y).unwrap().iter().all(|v| *v == 0.0));
    }

    fn fd_check(spec: &LossSpec, n: usize, d: usize, seed: u64, tol: f64) {
        let mut rng = crate::rng::stream(seed, "solver-test", &[2]);
        let targets = match spec.kind {
            LossKind::Squared => Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0)),
            LossKind::Logistic => {
                Array2::from_shape_fn((n, d), |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            }
            LossKind::Softmax => {
                let mut t = Array2::zeros((n, d));
                for i in 0..n {
                    t[(i, rng.gen_range(0..d))] = 1.0;
                }
                t
            }
        };
        let v = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let grad = loss_gradient(spec, &v, &targets).unwrap();
        let h = 1e-6;
        for i in 0..n {
            for j in 0..d {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[(i, j)] += h;
                vm[(i, j)] -= h;
                let fd = (loss_value(spec, &vp, &targets).unwrap()
                    - loss_value(spec, &vm, &targets).unwrap())
                    / (2.0 * h);
                let denom = 1.0f64.max(grad[(i, j)].abs());
                assert!(
                    (fd - grad[(i, j)]).abs() / denom < tol,
                    "{:?} ({i},{j}): fd {fd} vs {}",
                    spec.kind,
                    grad[(i, j)]
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(&LossSpec::plain(LossKind::Squared), 5, 2, 3, 1e-8);
        fd_check(&LossSpec::plain(LossKind::Logistic), 5, 2, 4, 1e-6);
        fd_check(&LossSpec::plain(LossKind::Softmax), 5, 3, 5, 1e-6);
        // weighted squared
        let spec = LossSpec {
            kind: LossKind::Squared,
            row_weights: Some(array![0.5, 1.5, 2.0, 0.25, 1.0]),
            col_weights: Some(array![2.0, 0.5]),
        };
        fd_check(&spec, 5, 2, 6, 1e-8);
    }

    // Fenchel-Young: L(v) + L*(z) >= <z, v>, equality at z = grad L(v).
    #[test]
    fn fenchel_young_inequality_and_tightness() {
        let mut rng = crate::rng::stream(7, "solver-test", &[3]);
        let specs = [
            LossSpec::plain(LossKind::Squared),
            LossSpec {
                kind: LossKind::Squared,
                row_weights: Some(array![0.5, 2.0, 1.0, 0.75]),
                col_weights: None,
            },
            LossSpec::plain(LossKind::Logistic),
            LossSpec::plain(LossKind::Softmax),
        ];
        for spec in &specs {
            let d = if spec.kind == LossKind::Softmax { 3 } else { 2 };
            let targets = match spec.kind {
                LossKind::Squared => Array2::from_shape_fn((4, d), |_| rng.gen_range(-1.0..1.0)),
                LossKind::Logistic => {
                    Array2::from_shape_fn((4, d), |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                }
                LossKind::Softmax => {
                    let mut t = Array2::zeros((4, d));
                    for i in 0..4 {
                        t[(i, rng.gen_range(0..d))] = 1.0;
                    }
                    t
                }
            };
            for _ in 0..100 {
                let v = Array2::from_shape_fn((4, d), |_| rng.gen_range(-2.0..2.0));
                let vp = Array2::from_shape_fn((4, d), |_| rng.gen_range(-2.0..2.0));
                // feasible z via a gradient at a nearby point
                let z = loss_gradient(spec, &vp, &targets).unwrap();
                let lv = loss_value(spec, &v, &targets).unwrap();
                let lz = loss_conjugate(spec, &z, &targets).unwrap();
                let ip: f64 = z.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                assert!(lv + lz >= ip - 1e-10, "{:?}", spec.kind);
                // tightness at z = grad L(v)
                let zt = loss_gradient(spec, &v, &targets).unwrap();
                let lzt = loss_conjugate(spec, &zt, &targets).unwrap();
                let ipt: f64 = zt.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                assert!(
                    (lv + lzt - ipt).abs() <= 1e-10 * (1.0 + lv.abs() + lzt.abs()),
                    "{:?}: slack {}",
                    spec.kind,
                    lv + lzt - ipt
                );
            }
        }
    }

    #[test]
    fn weak_duality_everywhere() {
        let mut rng = crate::rng::stream(11, "solver-test", &[4]);
        let dict = random_dict(8, 5, 13);
        for kind in [LossKind::Squared, LossKind::Logistic] {
            let targets = match kind {
                LossKind::Logistic => {
                    Array2::from_shape_fn((8, 1), |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                }
                _ => Array2::from_shape_fn((8, 1), |_| rng.gen_range(-1.0..1.0)),
            };
            let problem = ConvexProblem::new(&dict, targets, 0.7, LossSpec::plain(kind));
            for _ in 0..50 {
                let w = Array2::from_shape_fn((5, 1), |_| rng.gen_range(-2.0..2.0));
                let (lambda, dual, gap) = dual_certificate(&problem, &w).unwrap();
                let primal = problem.primal_value(&w).unwrap();
                assert!(dual <= primal + 1e-12);
                assert_abs_diff_eq!(gap, primal - dual, epsilon = 1e-12);
                // returned lambda always feasible
                let norm = problem.dual_constraint_norm(&lambda);
                assert!(norm <= problem.reg_beta * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn solver_reaches_tolerance_and_is_monotone() {
        let mut rng = crate::rng::stream(17, "solver-test", &[5]);
        let dict = random_dict(10, 6, 19);
        let targets = Array2::from_shape_fn((10, 1), |_| rng.gen_range(-1.0..1.0));
        let problem = ConvexProblem::new(&dict, targets, 0.2, LossSpec::plain(LossKind::Squared));
        let sol = solve(&problem, 1e-9, 50_000).unwrap();
        assert!(sol.gap <= 1e-9, "gap {}", sol.gap);
        for w in sol.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        // persisted certificate reproduces exactly
        let (_, _, gap) = dual_certificate(&problem, &sol.w_tilde).unwrap();
        assert_eq!(gap, sol.gap);
    }

    #[test]
    fn logistic_solve_certified() {
        let mut rng = crate::rng::stream(23, "solver-test", &[6]);
        let dict = random_dict(12, 5, 29);
        let targets =
            Array2::from_shape_fn((12, 1), |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        let problem = ConvexProblem::new(&dict, targets, 0.5, LossSpec::plain(LossKind::Logistic));
        let sol = solve(&problem, 1e-8, 50_000).unwrap();
        assert!(sol.gap <= 1e-8, "gap {}", sol.gap);
        assert!(!sol.used_gram);
    }

    #[test]
    fn softmax_solve_certified() {
        let mut rng = crate::rng::stream(31, "solver-test", &[7]);
        let dict = random_dict(9, 4, 37);
        let mut targets = Array2::zeros((9, 3));
        for i in 0..9 {
            targets[(i, rng.gen_range(0..3))] = 1.0;
        }
        let problem = ConvexProblem::new(&dict, targets, 0.4, LossSpec::plain(LossKind::Softmax));
        let sol = solve(&problem, 1e-7, 50_000).unwrap();
        assert!(sol.gap <= 1e-7, "gap {}", sol.gap);
    }

    // tau = beta / sqrt(m_last): declaring m_last = 4 with beta = 2 tau must
    // match the m_last = 1 problem with beta = tau.
    #[test]
    fn penalty_reparameterization() {
        let mut rng = crate::rng::stream(41, "solver-test", &[8]);
        let mut dict_a = random_dict(8, 4, 43);
        let targets = Array2::from_shape_fn((8, 1), |_| rng.gen_range(-1.0..1.0));
        let tau = 0.25;
        let pa = ConvexProblem::new(
            &dict_a,
            targets.clone(),
            tau,
            LossSpec::plain(LossKind::Squared),
        );
        let wa = solve(&pa, 1e-11, 50_000).unwrap().w_tilde;
        dict_a.m_last = 4;
        let pb = ConvexProblem::new(&dict_a, targets, 2.0 * tau, LossSpec::plain(LossKind::Squared));
        let wb = solve(&pb, 1e-11, 50_000).unwrap().w_tilde;
        for (a, b) in wa.iter().zip(wb.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    // Plain l1 with squared loss separates across output columns.
    #[test]
    fn multiclass_separability_plain_l1() {
        let mut rng = crate::rng::stream(47, "solver-test", &[9]);
        let dict = random_dict(10, 5, 53);
        let targets = Array2::from_shape_fn((10, 3), |_| rng.gen_range(-1.0..1.0));
        let mut problem =
            ConvexProblem::new(&dict, targets.clone(), 0.3, LossSpec::plain(LossKind::Squared));
        problem.penalty = PenaltyMode::PlainL1;
        let joint = solve(&problem, 1e-11, 50_000).unwrap().w_tilde;
        for j in 0..3 {
            let tj = targets.column(j).insert_axis(Axis(1)).to_owned();
            let pj = ConvexProblem::new(&dict, tj, 0.3, LossSpec::plain(LossKind::Squared));
            let wj = solve(&pj, 1e-11, 50_000).unwrap().w_tilde;
            for i in 0..5 {
                assert_abs_diff_eq!(joint[(i, j)], wj[(i, 0)], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn row_group_penalty_zeroes_whole_rows() {
        let mut rng = crate::rng::stream(59, "solver-test", &[10]);
        let dict = random_dict(12, 6, 61);
        let targets = Array2::from_shape_fn((12, 2), |_| rng.gen_range(-1.0..1.0));
        let problem = ConvexProblem::new(&dict, targets, 1.2, LossSpec::plain(LossKind::Squared));
        assert_eq!(problem.penalty, PenaltyMode::RowGroupL2);
        let sol = solve(&problem, 1e-9, 50_000).unwrap();
        for row in sol.w_tilde.rows() {
            let nz: Vec<bool> = row.iter().map(|v| *v != 0.0).collect();
            // group prox: a row is all-zero or fully dense (generically)
            assert!(nz.iter().all(|b| *b) || nz.iter().all(|b| !*b));
        }
    }

    #[test]
    fn gram_path_matches_matvec_path() {
        let mut rng = crate::rng::stream(67, "solver-test", &[11]);
        let dict = random_dict(16, 7, 71);
        let targets = Array2::from_shape_fn((16, 2), |_| rng.gen_range(-1.0..1.0));
        let problem = ConvexProblem::new(&dict, targets, 0.15, LossSpec::plain(LossKind::Squared));
        let fast = solve_with(&problem, SolverOptions { tol: 1e-10, ..Default::default() }, None)
            .unwrap();
        let slow = solve_with(
            &problem,
            SolverOptions {
                tol: 1e-10,
                force_matvec: true,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert!(fast.used_gram);
        assert!(!slow.used_gram);
        for (a, b) in fast.w_tilde.iter().zip(slow.w_tilde.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        assert!(fast.gap <= 1e-10 && slow.gap <= 1e-10);
    }

    // Block-constant row weights (a trajectory ramp) keep the Gram path
    // eligible and correct.
    #[test]
    fn gram_with_ramp_weights() {
        let mut rng = crate::rng::stream(73, "solver-test", &[12]);
        let mut dict = random_dict(12, 5, 79);
        dict.n_samples = 4; // 3 timestep blocks of 4 samples
        let ramp = [0.5, 1.0, 1.5];
        let mut rows = Array1::zeros(12);
        for t in 0..3 {
            for i in 0..4 {
                rows[t * 4 + i] = ramp[t];
            }
        }
        let spec = LossSpec {
            kind: LossKind::Squared,
            row_weights: Some(rows),
            col_weights: None,
        };
        let targets = Array2::from_shape_fn((12, 1), |_| rng.gen_range(-1.0..1.0));
        let problem = ConvexProblem::new(&dict, targets, 0.2, spec);
        let fast = solve_with(&problem, SolverOptions { tol: 1e-10, ..Default::default() }, None)
            .unwrap();
        assert!(fast.used_gram);
        let slow = solve_with(
            &problem,
            SolverOptions {
                tol: 1e-10,
                force_matvec: true,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        for (a, b) in fast.w_tilde.iter().zip(slow.w_tilde.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn warm_start_converges_faster_or_equal() {
        let mut rng = crate::rng::stream(83, "solver-test", &[13]);
        let dict = random_dict(14, 6, 89);
        let targets = Array2::from_shape_fn((14, 1), |_| rng.gen_range(-1.0..1.0));
        let p1 = ConvexProblem::new(&dict, targets.clone(), 0.3, LossSpec::plain(LossKind::Squared));
        let s1 = solve(&p1, 1e-10, 50_000).unwrap();
        let p2 = ConvexProblem::new(&dict, targets, 0.29, LossSpec::plain(LossKind::Squared));
        let cold = solve(&p2, 1e-10, 50_000).unwrap();
        let warm = solve_with(
            &p2,
            SolverOptions { tol: 1e-10, ..Default::default() },
            Some(&s1.w_tilde),
        )
        .unwrap();
        assert!(warm.gap <= 1e-10);
        assert!(warm.iterations <= cold.iterations + 50);
    }

    #[test]
    fn divergent_targets_detected() {
        let dict = dict_from_dense(&[vec![1.0; 4]], 1);
        let targets = Array2::from_elem((4, 1), f64::INFINITY);
        let problem = ConvexProblem::new(&dict, targets, 0.3, LossSpec::plain(LossKind::Squared));
        assert!(matches!(
            solve(&problem, 1e-8, 100),
            Err(Error::SolverDivergence)
        ));
    }

    #[test]
    fn solution_persistence_roundtrip() {
        let mut rng = crate::rng::stream(97, "solver-test", &[14]);
        let dict = random_dict(10, 5, 101);
        let targets = Array2::from_shape_fn((10, 2), |_| rng.gen_range(-1.0..1.0));
        let problem = ConvexProblem::new(&dict, targets, 0.4, LossSpec::plain(LossKind::Squared));
        let sol = solve(&problem, 1e-9, 50_000).unwrap();
        let hash = problem_hash(&problem);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("solution.json");
        save_solution(&sol, &hash, &path).unwrap();
        let (w, meta) = load_solution(&path).unwrap();
        assert_eq!(w, sol.w_tilde);
        assert_eq!(meta.problem_hash, hash);
        // recomputing the certificate from the persisted coefficients lands
        // on the identical gap
        let (_, dual, gap) = dual_certificate(&problem, &w).unwrap();
        assert_eq!(gap, meta.gap);
        assert_eq!(dual, meta.dual_value);
    }

    #[test]
    fn problem_hash_sensitivity() {
        let dict = random_dict(8, 4, 103);
        let targets = Array2::from_elem((8, 1), 0.25);
        let a = ConvexProblem::new(&dict, targets.clone(), 0.4, LossSpec::plain(LossKind::Squared));
        let mut t2 = targets.clone();
        t2[(0, 0)] = 0.3;
        let b = ConvexProblem::new(&dict, t2, 0.4, LossSpec::plain(LossKind::Squared));
        let c = ConvexProblem::new(&dict, targets, 0.5, LossSpec::plain(LossKind::Squared));
        assert_ne!(problem_hash(&a), problem_hash(&b));
        assert_ne!(problem_hash(&a), problem_hash(&c));
        assert_eq!(problem_hash(&a), problem_hash(&a));
    }

    #[test]
    fn support_and_sparsify() {
        let mut w = array![[0.5, 0.0], [0.0, 0.0], [1e-12, 1e-13], [0.0, -2.0]];
        assert_eq!(support(&w), vec![0, 2, 3]);
        let cleared = sparsify(&mut w, 1e-9);
        assert_eq!(cleared, 1);
        assert_eq!(support(&w), vec![0, 3]);
    }
}
