//! Model evaluation: teacher-forced and autoregressive accuracy, plus the
//! versioned metrics CSV the experiment harness appends to.
//!
//! Evaluation is generic over [`StepModel`] so the same code paths score
//! spiking networks and hand-built reference models. Autoregressive mode
//! replays the addition task with the model's own predicted carry wired
//! back into the next input, which is where teacher forcing usually flatters
//! a model.

use crate::lif::{LifState, LifWitness};
use crate::reconstruct::{ParallelSnn, ReadoutRule};
use crate::surrogate::TrainableSnn;
use crate::tasks::{TaskDataset, TaskKind};
use crate::{Error, Result};
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Anything that can consume one timestep at a time and emit a readout.
pub trait StepModel {
    fn d_out(&self) -> usize;
    fn readout_rule(&self) -> ReadoutRule;
    /// Fresh stepping state for a batch of `n_samples` sequences.
    fn begin(&self, n_samples: usize) -> Result<Box<dyn StepState + '_>>;

    /// Full-sequence readout: per-timestep rows are t-major, final-time is
    /// one row per sample. Steps past the training horizon are legal; the
    /// dynamics are time-invariant.
    fn forward_seq(&self, inputs: &[Array2<f64>]) -> Result<Array2<f64>> {
        let n = inputs.first().map(|m| m.nrows()).unwrap_or(0);
        let mut state = self.begin(n)?;
        match self.readout_rule() {
            ReadoutRule::FinalTime => {
                let mut last = Array2::zeros((n, self.d_out()));
                for x_t in inputs {
                    last = state.step(x_t)?;
                }
                Ok(last)
            }
            ReadoutRule::PerTimestep => {
                let mut out = Array2::zeros((inputs.len() * n, self.d_out()));
                for (t, x_t) in inputs.iter().enumerate() {
                    let r = state.step(x_t)?;
                    for i in 0..n {
                        for j in 0..self.d_out() {
                            out[(t * n + i, j)] = r[(i, j)];
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

pub trait StepState {
    /// Consume `x_t` (n x d_in) and return the readout at this timestep.
    fn step(&mut self, x_t: &Array2<f64>) -> Result<Array2<f64>>;
}

/// Borrowed view of any parallel spiking model as (witness, readout) pairs.
pub struct ModelView<'a> {
    pairs: Vec<(&'a LifWitness, &'a Array2<f64>)>,
    d_out: usize,
    readout: ReadoutRule,
}

impl<'a> ModelView<'a> {
    pub fn of_parallel(snn: &'a ParallelSnn) -> Self {
        ModelView {
            pairs: snn
                .subnets
                .iter()
                .map(|s| (&s.witness, &s.p_out))
                .collect(),
            d_out: snn.d_out,
            readout: snn.readout_rule,
        }
    }

    pub fn of_trainable(snn: &'a TrainableSnn) -> Self {
        ModelView {
            pairs: snn.subnets.iter().zip(snn.p_out.iter()).collect(),
            d_out: snn.d_out,
            readout: snn.readout_rule,
        }
    }
}

struct ViewState<'a> {
    states: Vec<LifState<'a>>,
    p_outs: Vec<&'a Array2<f64>>,
    n: usize,
    d_out: usize,
}

impl StepState for ViewState<'_> {
    fn step(&mut self, x_t: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.n, self.d_out));
        for (state, p_out) in self.states.iter_mut().zip(&self.p_outs) {
            let spikes = state.step(x_t)?;
            let last = spikes.last().expect("witness has at least one layer");
            out += &last.dot(*p_out);
        }
        Ok(out)
    }
}

impl StepModel for ModelView<'_> {
    fn d_out(&self) -> usize {
        self.d_out
    }

    fn readout_rule(&self) -> ReadoutRule {
        self.readout
    }

    fn begin(&self, n_samples: usize) -> Result<Box<dyn StepState + '_>> {
        Ok(Box::new(ViewState {
            states: self
                .pairs
                .iter()
                .map(|(w, _)| LifState::new(w, n_samples))
                .collect(),
            p_outs: self.pairs.iter().map(|(_, p)| *p).collect(),
            n: n_samples,
            d_out: self.d_out,
        }))
    }
}

/// First index of the row maximum (deterministic tie-break).
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

pub fn decode_sum_digit(row: ArrayView1<f64>, base: usize) -> usize {
    argmax(row.slice(ndarray::s![..base]))
}

pub fn decode_carry(row: ArrayView1<f64>, base: usize) -> usize {
    argmax(row.slice(ndarray::s![base..base + 2]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    TeacherForced,
    Autoregressive,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::TeacherForced => "tf",
            EvalMode::Autoregressive => "ar",
        }
    }
}

/// Accuracy summary of one evaluation pass.
///
/// For single-token tasks (final-time readout) the per-token and
/// per-sequence fields coincide and the carry fields are absent. For
/// addition: `token_acc` scores sum digits, `carry_acc` the carry flags,
/// `joint_token_acc` both at once, `seq_acc` whole answers (all sum digits),
/// `error_free_frac` sequences with every joint token right, and
/// `first_error_mean` the mean first failing timestep among errored
/// sequences.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub mode: EvalMode,
    pub n_samples: usize,
    pub t_len: usize,
    pub token_acc: f64,
    pub joint_token_acc: f64,
    pub seq_acc: f64,
    pub error_free_frac: f64,
    pub carry_acc: Option<f64>,
    pub first_error_mean: Option<f64>,
}

fn score_addition(
    predictions: &Array2<f64>,
    ds: &TaskDataset,
    base: usize,
    mode: EvalMode,
) -> EvalOutcome {
    let n = ds.n_samples();
    let t_len = ds.t_len();
    let mut sum_hits = 0usize;
    let mut carry_hits = 0usize;
    let mut joint_hits = 0usize;
    let mut seq_hits = 0usize;
    let mut clean = 0usize;
    let mut first_errors = Vec::new();
    for i in 0..n {
        let mut all_sums = true;
        let mut first_err: Option<usize> = None;
        for t in 0..t_len {
            let r = t * n + i;
            let sum_ok =
                decode_sum_digit(predictions.row(r), base) == decode_sum_digit(ds.targets.row(r), base);
            let carry_ok =
                decode_carry(predictions.row(r), base) == decode_carry(ds.targets.row(r), base);
            sum_hits += sum_ok as usize;
            carry_hits += carry_ok as usize;
            joint_hits += (sum_ok && carry_ok) as usize;
            all_sums &= sum_ok;
            if !(sum_ok && carry_ok) && first_err.is_none() {
                first_err = Some(t);
            }
        }
        seq_hits += all_sums as usize;
        match first_err {
            None => clean += 1,
            Some(t) => first_errors.push(t as f64),
        }
    }
    let tokens = (n * t_len) as f64;
    EvalOutcome {
        mode,
        n_samples: n,
        t_len,
        token_acc: sum_hits as f64 / tokens,
        joint_token_acc: joint_hits as f64 / tokens,
        seq_acc: seq_hits as f64 / n as f64,
        error_free_frac: clean as f64 / n as f64,
        carry_acc: Some(carry_hits as f64 / tokens),
        first_error_mean: if first_errors.is_empty() {
            None
        } else {
            Some(first_errors.iter().sum::<f64>() / first_errors.len() as f64)
        },
    }
}

fn score_final_time(predictions: &Array2<f64>, ds: &TaskDataset, mode: EvalMode) -> Result<EvalOutcome> {
    let labels = ds.labels.as_ref().ok_or_else(|| Error::Config {
        path: "eval".into(),
        message: "final-time scoring needs labels".into(),
    })?;
    let n = ds.n_samples();
    let mut hits = 0usize;
    for i in 0..n {
        let pred = if predictions.ncols() == 1 {
            // signed scalar output, +1 <-> class 1
            u32::from(predictions[(i, 0)] >= 0.0)
        } else {
            argmax(predictions.row(i)) as u32
        };
        hits += (pred == labels[i]) as usize;
    }
    let acc = hits as f64 / n as f64;
    Ok(EvalOutcome {
        mode,
        n_samples: n,
        t_len: ds.t_len(),
        token_acc: acc,
        joint_token_acc: acc,
        seq_acc: acc,
        error_free_frac: acc,
        carry_acc: None,
        first_error_mean: None,
    })
}

/// Scores the model with ground-truth inputs at every timestep.
pub fn eval_teacher_forced<M: StepModel + ?Sized>(
    model: &M,
    ds: &TaskDataset,
) -> Result<EvalOutcome> {
    let predictions = model.forward_seq(&ds.inputs)?;
    match ds.kind {
        TaskKind::Addition { base, .. } => {
            Ok(score_addition(&predictions, ds, base, EvalMode::TeacherForced))
        }
        _ => score_final_time(&predictions, ds, EvalMode::TeacherForced),
    }
}

/// Addition only: the carry input channel at t comes from the model's own
/// prediction at t-1 (zero at t=0, where no column has carried yet).
pub fn eval_autoregressive<M: StepModel + ?Sized>(
    model: &M,
    ds: &TaskDataset,
) -> Result<EvalOutcome> {
    let base = match ds.kind {
        TaskKind::Addition { base, .. } => base,
        _ => return Err(Error::AutoregressiveNeedsCarry),
    };
    let n = ds.n_samples();
    let t_len = ds.t_len();
    let mut state = model.begin(n)?;
    let mut carry = vec![0.0f64; n];
    let mut predictions = Array2::zeros((t_len * n, model.d_out()));
    for (t, x_t) in ds.inputs.iter().enumerate() {
        let mut fed = x_t.clone();
        for i in 0..n {
            fed[(i, 2)] = carry[i];
        }
        let readout = state.step(&fed)?;
        for i in 0..n {
            carry[i] = decode_carry(readout.row(i), base) as f64;
            for j in 0..model.d_out() {
                predictions[(t * n + i, j)] = readout[(i, j)];
            }
        }
    }
    Ok(score_addition(&predictions, ds, base, EvalMode::Autoregressive))
}

pub fn evaluate<M: StepModel + ?Sized>(
    model: &M,
    ds: &TaskDataset,
    mode: EvalMode,
) -> Result<EvalOutcome> {
    match mode {
        EvalMode::TeacherForced => eval_teacher_forced(model, ds),
        EvalMode::Autoregressive => eval_autoregressive(model, ds),
    }
}

pub const METRICS_CSV_VERSION: u32 = 1;

/// One appended line of the run-level metrics table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub variant: String,
    pub task: String,
    pub split: String,
    pub seed: u64,
    pub outcome: EvalOutcome,
    pub primal: Option<f64>,
    pub dual: Option<f64>,
    pub gap: Option<f64>,
    pub wall_seconds: f64,
}

pub fn metrics_csv_header() -> String {
    format!(
        "schema_version,run_id,variant,task,split,mode,seed,n_samples,t_len,\
         token_acc,joint_token_acc,seq_acc,error_free_frac,carry_acc,\
         first_error_mean,primal,dual,gap,wall_seconds\n"
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> Result<&str> {
    if s.contains(',') || s.contains('\n') {
        return Err(Error::Config {
            path: "metrics.csv".into(),
            message: format!("field {s:?} contains a separator"),
        });
    }
    Ok(s)
}

/// Appends rows, writing the header first on a fresh or empty file. The
/// serialization uses shortest round-trip float formatting, so reading the
/// file back reproduces every value exactly.
pub fn append_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut buf = String::new();
    if fresh {
        buf.push_str(&metrics_csv_header());
    }
    for row in rows {
        let o = &row.outcome;
        buf.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            METRICS_CSV_VERSION,
            csv_field(&row.run_id)?,
            csv_field(&row.variant)?,
            csv_field(&row.task)?,
            csv_field(&row.split)?,
            o.mode.as_str(),
            row.seed,
            o.n_samples,
            o.t_len,
            o.token_acc,
            o.joint_token_acc,
            o.seq_acc,
            o.error_free_frac,
            opt(o.carry_acc),
            opt(o.first_error_mean),
            opt(row.primal),
            opt(row.dual),
            opt(row.gap),
            row.wall_seconds,
        ));
    }
    file.write_all(buf.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::SpikeMode;
    use crate::tasks::{addition_from_digits, gen_addition, gen_first_last_xor};
    use crate::witness::Arch;
    use ndarray::array;

    fn denorm(v: f64, base: usize) -> u32 {
        (v * (base as f64 - 1.0)).round() as u32
    }

    /// Stateless exact adder: reads (a, b, carry_in) off the input row and
    /// one-hots the true sum digit and outgoing carry.
    struct PerfectAdder {
        base: usize,
    }

    struct PerfectState {
        base: usize,
    }

    impl StepModel for PerfectAdder {
        fn d_out(&self) -> usize {
            self.base + 2
        }
        fn readout_rule(&self) -> ReadoutRule {
            ReadoutRule::PerTimestep
        }
        fn begin(&self, _n: usize) -> Result<Box<dyn StepState + '_>> {
            Ok(Box::new(PerfectState { base: self.base }))
        }
    }

    impl StepState for PerfectState {
        fn step(&mut self, x_t: &Array2<f64>) -> Result<Array2<f64>> {
            let n = x_t.nrows();
            let mut out = Array2::zeros((n, self.base + 2));
            for i in 0..n {
                let a = denorm(x_t[(i, 0)], self.base);
                let b = denorm(x_t[(i, 1)], self.base);
                let c = x_t[(i, 2)].round() as u32;
                let total = a + b + c;
                out[(i, (total % self.base as u32) as usize)] = 1.0;
                out[(i, self.base + (total / self.base as u32) as usize)] = 1.0;
            }
            Ok(out)
        }
    }

    /// Adversary: correct sum digit for the carry it was given, but always
    /// claims the outgoing carry is zero.
    struct NeverCarries {
        base: usize,
    }

    impl StepModel for NeverCarries {
        fn d_out(&self) -> usize {
            self.base + 2
        }
        fn readout_rule(&self) -> ReadoutRule {
            ReadoutRule::PerTimestep
        }
        fn begin(&self, _n: usize) -> Result<Box<dyn StepState + '_>> {
            Ok(Box::new(NeverCarriesState { base: self.base }))
        }
    }

    struct NeverCarriesState {
        base: usize,
    }

    impl StepState for NeverCarriesState {
        fn step(&mut self, x_t: &Array2<f64>) -> Result<Array2<f64>> {
            let n = x_t.nrows();
            let mut out = Array2::zeros((n, self.base + 2));
            for i in 0..n {
                let a = denorm(x_t[(i, 0)], self.base);
                let b = denorm(x_t[(i, 1)], self.base);
                let c = x_t[(i, 2)].round() as u32;
                out[(i, ((a + b + c) % self.base as u32) as usize)] = 1.0;
                out[(i, self.base)] = 1.0;
            }
            Ok(out)
        }
    }

    #[test]
    fn perfect_adder_tf_equals_ar() {
        for base in [2usize, 3] {
            let ds = gen_addition(base, 5, 64, 3).unwrap();
            let model = PerfectAdder { base };
            let tf = eval_teacher_forced(&model, &ds).unwrap();
            let ar = eval_autoregressive(&model, &ds).unwrap();
            for o in [&tf, &ar] {
                assert_eq!(o.token_acc, 1.0);
                assert_eq!(o.joint_token_acc, 1.0);
                assert_eq!(o.seq_acc, 1.0);
                assert_eq!(o.error_free_frac, 1.0);
                assert_eq!(o.carry_acc, Some(1.0));
                assert_eq!(o.first_error_mean, None);
            }
            assert_eq!(tf.mode, EvalMode::TeacherForced);
            assert_eq!(ar.mode, EvalMode::Autoregressive);
        }
    }

    // Two crafted binary sums: first carry fires at t=0 for sample 0 and
    // t=1 for sample 1, so the mean first joint error is 0.5 under teacher
    // forcing. Autoregressively the sum digits also go wrong once the fed
    // carry diverges, but the first failing timestep is unchanged.
    #[test]
    fn never_carries_first_error_positions() {
        let a = array![[1u32, 1, 0], [0, 1, 0]];
        let b = array![[1u32, 0, 0], [0, 1, 0]];
        let ds = addition_from_digits(2, &a, &b).unwrap();
        let model = NeverCarries { base: 2 };
        let tf = eval_teacher_forced(&model, &ds).unwrap();
        assert_eq!(tf.token_acc, 1.0, "ground-truth carries keep sums right");
        assert_eq!(tf.first_error_mean, Some(0.5));
        assert_eq!(tf.error_free_frac, 0.0);
        assert!(tf.carry_acc.unwrap() < 1.0);

        let ar = eval_autoregressive(&model, &ds).unwrap();
        assert_eq!(ar.first_error_mean, Some(0.5));
        assert!(ar.token_acc < 1.0, "fed-back wrong carries corrupt sums");
        assert_eq!(ar.seq_acc, 0.0);
    }

    #[test]
    fn never_carries_is_perfect_without_carries() {
        // digit pairs that never sum past the base leave no carry to miss
        let a = array![[1u32, 0, 1], [0, 1, 1]];
        let b = array![[0u32, 1, 0], [1, 0, 0]];
        let ds = addition_from_digits(2, &a, &b).unwrap();
        let model = NeverCarries { base: 2 };
        let ar = eval_autoregressive(&model, &ds).unwrap();
        assert_eq!(ar.joint_token_acc, 1.0);
        assert_eq!(ar.first_error_mean, None);
    }

    #[test]
    fn autoregressive_requires_addition() {
        let ds = gen_first_last_xor(4, 8, 1, false).unwrap();
        let snn = TrainableSnn::new_random(
            &Arch::new(1, vec![3, 2], 4),
            1,
            2,
            7,
            ReadoutRule::FinalTime,
        )
        .unwrap();
        let view = ModelView::of_trainable(&snn);
        match eval_autoregressive(&view, &ds) {
            Err(Error::AutoregressiveNeedsCarry) => {}
            other => panic!("expected carry-channel error, got {other:?}"),
        }
    }

    #[test]
    fn model_view_matches_batch_forward() {
        let arch = Arch::new(3, vec![4, 3], 5);
        let snn = TrainableSnn::new_random(&arch, 2, 3, 11, ReadoutRule::PerTimestep).unwrap();
        let ds = gen_addition(2, 4, 16, 5).unwrap();
        let batch = snn.forward(&ds.inputs, SpikeMode::ExactForward, 25.0).unwrap();
        let view = ModelView::of_trainable(&snn);
        let stepped = view.forward_seq(&ds.inputs).unwrap();
        assert_eq!(batch, stepped);
    }

    #[test]
    fn model_view_handles_longer_horizons() {
        // arch trained at T=5 but stepped over T=9: the state machine does
        // not know the training horizon
        let arch = Arch::new(3, vec![3, 2], 5);
        let snn = TrainableSnn::new_random(&arch, 4, 2, 13, ReadoutRule::PerTimestep).unwrap();
        let ds = gen_addition(2, 8, 8, 17).unwrap();
        assert_eq!(ds.t_len(), 9);
        let view = ModelView::of_trainable(&snn);
        let out = view.forward_seq(&ds.inputs).unwrap();
        assert_eq!(out.nrows(), 9 * 8);
        let tf = eval_teacher_forced(&view, &ds).unwrap();
        assert!(tf.token_acc >= 0.0 && tf.token_acc <= 1.0);
    }

    #[test]
    fn xor_scoring_counts_signs() {
        let ds = gen_first_last_xor(4, 40, 23, false).unwrap();
        // constant positive output predicts class 1 everywhere
        struct Constant;
        struct ConstantState;
        impl StepModel for Constant {
            fn d_out(&self) -> usize {
                1
            }
            fn readout_rule(&self) -> ReadoutRule {
                ReadoutRule::FinalTime
            }
            fn begin(&self, _n: usize) -> Result<Box<dyn StepState + '_>> {
                Ok(Box::new(ConstantState))
            }
        }
        impl StepState for ConstantState {
            fn step(&mut self, x_t: &Array2<f64>) -> Result<Array2<f64>> {
                Ok(Array2::ones((x_t.nrows(), 1)))
            }
        }
        let out = eval_teacher_forced(&Constant, &ds).unwrap();
        let ones = ds.labels.as_ref().unwrap().iter().filter(|l| **l == 1).count();
        assert_eq!(out.token_acc, ones as f64 / 40.0);
        assert_eq!(out.carry_acc, None);
    }

    #[test]
    fn csv_appends_header_once_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let row = |seed: u64, gap: Option<f64>| MetricsRow {
            run_id: format!("run-{seed}"),
            variant: "cvx".into(),
            task: "addition_b2".into(),
            split: "val".into(),
            seed,
            outcome: EvalOutcome {
                mode: EvalMode::TeacherForced,
                n_samples: 8,
                t_len: 4,
                token_acc: 0.1 + seed as f64 / 7.0,
                joint_token_acc: 0.5,
                seq_acc: 0.25,
                error_free_frac: 0.25,
                carry_acc: Some(1.0 / 3.0),
                first_error_mean: None,
            },
            primal: Some(1.25e-3),
            dual: Some(1.2e-3),
            gap,
            wall_seconds: 0.75,
        };
        append_metrics_csv(&path, &[row(1, Some(5e-5))]).unwrap();
        append_metrics_csv(&path, &[row(2, None)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("schema_version,run_id"));
        assert_eq!(
            lines[0].split(',').count(),
            lines[1].split(',').count(),
            "header and data column counts agree"
        );
        // shortest round-trip float formatting reproduces values exactly
        let fields: Vec<&str> = lines[1].split(',').collect();
        let token_acc: f64 = fields[9].parse().unwrap();
        assert_eq!(token_acc, 0.1 + 1.0 / 7.0);
        let carry: f64 = fields[13].parse().unwrap();
        assert_eq!(carry, 1.0 / 3.0);
        assert_eq!(lines[2].split(',').nth(17), Some(""), "absent gap is empty");
        // separator injection is rejected
        let mut bad = row(3, None);
        bad.split = "a,b".into();
        assert!(append_metrics_csv(&path, &[bad]).is_err());
    }
}
