//! Dataset generation and ingestion.
//!
//! Three tasks: carry-augmented base-b addition (per-timestep supervision,
//! digits least-significant first so the carry runs forward in time),
//! first/last-XOR (final-time binary label), and sequential MNIST patches
//! (each image streamed as T contiguous pixel blocks). All generated tensor
//! values are exactly representable in f32 so the binary cache round-trips
//! losslessly.

use crate::reconstruct::ReadoutRule;
use crate::solver::LossKind;
use crate::surrogate::{SupervisedData, TrainLossSpec};
use crate::{Error, Result};
use flate2::read::GzDecoder;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 8] = b"SNNDATA1";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// App-F carry-weight sweep values.
pub const LAMBDA_CARRY_GRID: [f64; 12] = [
    0.125, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 4.0, 6.0, 8.0, 10.0,
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskKind {
    Addition { base: usize, n_digits: usize },
    FirstLastXor,
    MnistSeq,
}

#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub kind: TaskKind,
    /// inputs[t]: n x d_in slice of every sample at timestep t
    pub inputs: Vec<Array2<f64>>,
    /// target rows follow the readout rule (t-major blocks for per-timestep)
    pub targets: Array2<f64>,
    pub readout: ReadoutRule,
    pub seed: u64,
    /// addition only: raw operand digits, LSB first, n x n_digits
    pub digits_a: Option<Array2<u32>>,
    pub digits_b: Option<Array2<u32>>,
    /// xor/mnist: final-time class labels
    pub labels: Option<Vec<u32>>,
}

impl TaskDataset {
    pub fn n_samples(&self) -> usize {
        self.inputs.first().map(|m| m.nrows()).unwrap_or(0)
    }

    pub fn t_len(&self) -> usize {
        self.inputs.len()
    }

    pub fn d_in(&self) -> usize {
        self.inputs.first().map(|m| m.ncols()).unwrap_or(0)
    }

    pub fn d_out(&self) -> usize {
        self.targets.ncols()
    }

    pub fn as_supervised(&self) -> SupervisedData {
        SupervisedData {
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
        }
    }

    /// Consecutive disjoint sample ranges, one sub-dataset per requested size.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<TaskDataset>> {
        let total: usize = sizes.iter().sum();
        let n = self.n_samples();
        if total > n {
            return Err(Error::Config {
                path: "split".into(),
                message: format!("requested {total} samples, dataset has {n}"),
            });
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            let idx: Vec<usize> = (start..start + len).collect();
            out.push(self.subset(&idx));
            start += len;
        }
        Ok(out)
    }

    /// Row-selects samples, preserving the t-major target layout.
    pub fn subset(&self, idx: &[usize]) -> TaskDataset {
        let n = self.n_samples();
        let t_len = self.t_len();
        let inputs: Vec<Array2<f64>> = self
            .inputs
            .iter()
            .map(|m| Array2::from_shape_fn((idx.len(), m.ncols()), |(r, c)| m[(idx[r], c)]))
            .collect();
        let targets = match self.readout {
            ReadoutRule::FinalTime => Array2::from_shape_fn(
                (idx.len(), self.targets.ncols()),
                |(r, c)| self.targets[(idx[r], c)],
            ),
            ReadoutRule::PerTimestep => Array2::from_shape_fn(
                (idx.len() * t_len, self.targets.ncols()),
                |(r, c)| {
                    let t = r / idx.len();
                    self.targets[(t * n + idx[r % idx.len()], c)]
                },
            ),
        };
        let pick_digits = |d: &Option<Array2<u32>>| {
            d.as_ref().map(|m| {
                Array2::from_shape_fn((idx.len(), m.ncols()), |(r, c)| m[(idx[r], c)])
            })
        };
        TaskDataset {
            kind: self.kind.clone(),
            inputs,
            targets,
            readout: self.readout,
            seed: self.seed,
            digits_a: pick_digits(&self.digits_a),
            digits_b: pick_digits(&self.digits_b),
            labels: self
                .labels
                .as_ref()
                .map(|ls| idx.iter().map(|i| ls[*i]).collect()),
        }
    }
}

/// Exact f32 value of digit/(base-1), widened back to f64 so the cache
/// round-trips bit for bit.
fn norm_digit(d: u32, base: usize) -> f64 {
    if base == 2 {
        d as f64
    } else {
        f64::from(d as f32 / (base as f32 - 1.0))
    }
}

/// Carry-augmented base-b addition with per-timestep supervision. Inputs at
/// t are (a_t, b_t, carry_in) with digits normalized by b-1; targets one-hot
/// the sum digit (b columns) then the outgoing carry (2 columns). The
/// horizon is n_digits + 1 so the final carry becomes the last sum digit.
pub fn gen_addition(
    base: usize,
    n_digits: usize,
    n_samples: usize,
    seed: u64,
) -> Result<TaskDataset> {
    if base < 2 || n_digits == 0 {
        return Err(Error::Config {
            path: "task.addition".into(),
            message: format!("need base >= 2 and n_digits >= 1, got {base}/{n_digits}"),
        });
    }
    let mut rng = crate::rng::stream(seed, "task-addition", &[base as u64, n_digits as u64]);
    let mut digits_a = Array2::zeros((n_samples, n_digits));
    let mut digits_b = Array2::zeros((n_samples, n_digits));
    for i in 0..n_samples {
        for j in 0..n_digits {
            digits_a[(i, j)] = rng.gen_range(0..base as u32);
            digits_b[(i, j)] = rng.gen_range(0..base as u32);
        }
    }
    let mut ds = addition_from_digits(base, &digits_a, &digits_b)?;
    ds.seed = seed;
    Ok(ds)
}

/// Deterministic encode of explicit operand digit matrices (LSB first).
pub fn addition_from_digits(
    base: usize,
    digits_a: &Array2<u32>,
    digits_b: &Array2<u32>,
) -> Result<TaskDataset> {
    let (n_samples, n_digits) = digits_a.dim();
    if digits_b.dim() != (n_samples, n_digits) || n_digits == 0 || base < 2 {
        return Err(Error::Config {
            path: "task.addition".into(),
            message: "operand digit matrices must share a nonempty shape".into(),
        });
    }
    for v in digits_a.iter().chain(digits_b.iter()) {
        if *v as usize >= base {
            return Err(Error::Config {
                path: "task.addition".into(),
                message: format!("digit {v} out of range for base {base}"),
            });
        }
    }
    let t_len = n_digits + 1;
    let d_out = base + 2;
    let mut inputs = vec![Array2::zeros((n_samples, 3)); t_len];
    let mut targets = Array2::zeros((t_len * n_samples, d_out));
    for i in 0..n_samples {
        let mut carry = 0u32;
        for t in 0..t_len {
            let (a, b) = if t < n_digits {
                (digits_a[(i, t)], digits_b[(i, t)])
            } else {
                (0, 0)
            };
            inputs[t][(i, 0)] = norm_digit(a, base);
            inputs[t][(i, 1)] = norm_digit(b, base);
            inputs[t][(i, 2)] = carry as f64;
            let total = a + b + carry;
            let sum_digit = total % base as u32;
            let carry_out = total / base as u32;
            targets[(t * n_samples + i, sum_digit as usize)] = 1.0;
            targets[(t * n_samples + i, base + carry_out as usize)] = 1.0;
            carry = carry_out;
        }
    }
    Ok(TaskDataset {
        kind: TaskKind::Addition { base, n_digits },
        inputs,
        targets,
        readout: ReadoutRule::PerTimestep,
        seed: 0,
        digits_a: Some(digits_a.clone()),
        digits_b: Some(digits_b.clone()),
        labels: None,
    })
}

/// Integer both operands encode, for identity checks.
pub fn operand_value(digits: &Array2<u32>, row: usize, base: usize) -> u128 {
    let mut v = 0u128;
    for j in (0..digits.ncols()).rev() {
        v = v * base as u128 + digits[(row, j)] as u128;
    }
    v
}

/// Integer encoded by the one-hot sum-digit targets of one sample.
pub fn target_sum_value(ds: &TaskDataset, row: usize) -> Result<u128> {
    let (base, _) = match ds.kind {
        TaskKind::Addition { base, n_digits } => (base, n_digits),
        _ => {
            return Err(Error::Config {
                path: "task".into(),
                message: "sum decoding requires the addition task".into(),
            })
        }
    };
    let n = ds.n_samples();
    let mut v = 0u128;
    for t in (0..ds.t_len()).rev() {
        let r = t * n + row;
        let digit = (0..base)
            .find(|d| ds.targets[(r, *d)] == 1.0)
            .ok_or_else(|| Error::Config {
                path: "task".into(),
                message: "missing one-hot sum digit".into(),
            })?;
        v = v * base as u128 + digit as u128;
    }
    Ok(v)
}

/// Binary sequence task: label = XOR of the first and last timestep bits.
/// Classes are balanced by stratified generation (within one sample for odd
/// n). Targets are +/-1; `one_hot` switches the input encoding from a scalar
/// bit to two complementary channels.
pub fn gen_first_last_xor(
    t_len: usize,
    n_samples: usize,
    seed: u64,
    one_hot: bool,
) -> Result<TaskDataset> {
    if t_len < 2 {
        return Err(Error::Config {
            path: "task.xor".into(),
            message: "need t_len >= 2".into(),
        });
    }
    let mut rng = crate::rng::stream(seed, "task-xor", &[t_len as u64]);
    let mut bits = Array2::zeros((n_samples, t_len));
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = (i % 2) as u32; // stratified: alternate classes
        let first = u32::from(rng.gen_bool(0.5));
        let last = first ^ label;
        bits[(i, 0)] = first;
        bits[(i, t_len - 1)] = last;
        for t in 1..t_len - 1 {
            bits[(i, t)] = u32::from(rng.gen_bool(0.5));
        }
        labels.push(label);
    }
    // shuffle sample order so classes are not position-coded
    let mut order: Vec<usize> = (0..n_samples).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let d_in = if one_hot { 2 } else { 1 };
    let mut inputs = vec![Array2::zeros((n_samples, d_in)); t_len];
    let mut targets = Array2::zeros((n_samples, 1));
    let mut shuffled_labels = vec![0u32; n_samples];
    for (new_i, &old_i) in order.iter().enumerate() {
        for t in 0..t_len {
            let b = bits[(old_i, t)];
            if one_hot {
                inputs[t][(new_i, 0)] = f64::from(b == 1);
                inputs[t][(new_i, 1)] = f64::from(b == 0);
            } else {
                inputs[t][(new_i, 0)] = b as f64;
            }
        }
        targets[(new_i, 0)] = if labels[old_i] == 1 { 1.0 } else { -1.0 };
        shuffled_labels[new_i] = labels[old_i];
    }
    Ok(TaskDataset {
        kind: TaskKind::FirstLastXor,
        inputs,
        targets,
        readout: ReadoutRule::FinalTime,
        seed,
        digits_a: None,
        digits_b: None,
        labels: Some(shuffled_labels),
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptIdx(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::CorruptIdx("truncated header".into()))
}

/// Parses an IDX image file (optionally gzipped) into row-major u8 images.
pub fn read_idx_images(path: &Path) -> Result<(Vec<Vec<u8>>, usize, usize)> {
    let bytes = read_maybe_gz(path)?;
    if be_u32(&bytes, 0)? != IDX_IMAGES_MAGIC {
        return Err(Error::CorruptIdx(format!(
            "{}: bad image magic",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let rows = be_u32(&bytes, 8)? as usize;
    let cols = be_u32(&bytes, 12)? as usize;
    let pixels = rows * cols;
    if bytes.len() != 16 + n * pixels {
        return Err(Error::CorruptIdx(format!(
            "{}: expected {} data bytes, found {}",
            path.display(),
            n * pixels,
            bytes.len() - 16
        )));
    }
    let images = (0..n)
        .map(|i| bytes[16 + i * pixels..16 + (i + 1) * pixels].to_vec())
        .collect();
    Ok((images, rows, cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    if be_u32(&bytes, 0)? != IDX_LABELS_MAGIC {
        return Err(Error::CorruptIdx(format!(
            "{}: bad label magic",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::CorruptIdx(format!(
            "{}: expected {n} labels, found {}",
            path.display(),
            bytes.len() - 8
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Writes IDX images (raw, not gzipped); inverse of `read_idx_images`.
pub fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::CorruptIdx("image size mismatch on write".into()));
        }
        out.extend_from_slice(img);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Sequential MNIST: each image flattened row-major and streamed as T
/// contiguous patches of 784/T pixels, scaled to [0,1]; one-hot labels at
/// final time. `offset` skips samples so splits can share one file pair.
pub fn load_mnist_seq(
    images_path: &Path,
    labels_path: &Path,
    t_len: usize,
    n_samples: usize,
    offset: usize,
) -> Result<TaskDataset> {
    let (images, rows, cols) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::CorruptIdx(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let pixels = rows * cols;
    if t_len == 0 || pixels % t_len != 0 {
        return Err(Error::Config {
            path: "task.mnist.t_len".into(),
            message: format!("{t_len} does not divide {pixels}"),
        });
    }
    if offset + n_samples > images.len() {
        return Err(Error::Config {
            path: "task.mnist".into(),
            message: format!(
                "requested samples {}..{} beyond file size {}",
                offset,
                offset + n_samples,
                images.len()
            ),
        });
    }
    let patch = pixels / t_len;
    let mut inputs = vec![Array2::zeros((n_samples, patch)); t_len];
    let mut targets = Array2::zeros((n_samples, 10));
    let mut out_labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let img = &images[offset + i];
        for t in 0..t_len {
            for p in 0..patch {
                inputs[t][(i, p)] = f64::from(img[t * patch + p] as f32 / 255.0f32);
            }
        }
        let label = labels[offset + i];
        if label > 9 {
            return Err(Error::CorruptIdx(format!("label {label} out of range")));
        }
        targets[(i, label as usize)] = 1.0;
        out_labels.push(u32::from(label));
    }
    Ok(TaskDataset {
        kind: TaskKind::MnistSeq,
        inputs,
        targets,
        readout: ReadoutRule::FinalTime,
        seed: 0,
        digits_a: None,
        digits_b: None,
        labels: Some(out_labels),
    })
}

/// Linear ramp 0.5 -> 1.5 over timesteps, normalized to mean exactly 1.
pub fn ramp_weights(t_len: usize) -> Vec<f64> {
    if t_len <= 1 {
        return vec![1.0; t_len];
    }
    let raw: Vec<f64> = (0..t_len)
        .map(|t| 0.5 + t as f64 / (t_len - 1) as f64)
        .collect();
    let mean = raw.iter().sum::<f64>() / t_len as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Joint addition loss: squared loss whose column weights put lambda_sum on
/// the sum-digit block and lambda_carry on the carry block, with optional
/// ramped timestep weighting.
pub fn joint_loss_spec(
    lambda_sum: f64,
    lambda_carry: f64,
    base: usize,
    timestep_weights: Option<Vec<f64>>,
) -> Result<TrainLossSpec> {
    if lambda_sum < 0.0 || lambda_carry < 0.0 || lambda_sum + lambda_carry == 0.0 {
        return Err(Error::Config {
            path: "loss.lambda".into(),
            message: "weights must be nonnegative with a positive entry".into(),
        });
    }
    let mut cols = Array1::zeros(base + 2);
    for j in 0..base {
        cols[j] = lambda_sum;
    }
    cols[base] = lambda_carry;
    cols[base + 1] = lambda_carry;
    Ok(TrainLossSpec {
        kind: LossKind::Squared,
        timestep_weights,
        col_weights: Some(cols),
    })
}

// Cache container: magic, version, JSON header, then little-endian f32
// tensors in a fixed order (inputs per timestep, targets, digits, labels).
#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format_version: u32,
    kind: TaskKind,
    t_len: usize,
    n_samples: usize,
    d_in: usize,
    d_out: usize,
    readout: ReadoutRule,
    seed: u64,
    n_digit_cols: usize,
    has_labels: bool,
}

fn push_f32s(out: &mut Vec<u8>, it: impl Iterator<Item = f64>) {
    for v in it {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn save_dataset(ds: &TaskDataset, path: &Path) -> Result<()> {
    let header = CacheHeader {
        format_version: DATASET_FORMAT_VERSION,
        kind: ds.kind.clone(),
        t_len: ds.t_len(),
        n_samples: ds.n_samples(),
        d_in: ds.d_in(),
        d_out: ds.d_out(),
        readout: ds.readout,
        seed: ds.seed,
        n_digit_cols: ds.digits_a.as_ref().map(|m| m.ncols()).unwrap_or(0),
        has_labels: ds.labels.is_some(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for m in &ds.inputs {
        push_f32s(&mut out, m.iter().cloned());
    }
    push_f32s(&mut out, ds.targets.iter().cloned());
    for d in [&ds.digits_a, &ds.digits_b].into_iter().flatten() {
        push_f32s(&mut out, d.iter().map(|v| *v as f64));
    }
    if let Some(ls) = &ds.labels {
        push_f32s(&mut out, ls.iter().map(|v| *v as f64));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TaskDataset> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::Artifact {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != DATASET_MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header: CacheHeader = serde_json::from_slice(
        bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?,
    )?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(bad("unsupported dataset format"));
    }
    let mut cursor = 12 + hlen;
    let mut take = |count: usize| -> Result<Vec<f64>> {
        let need = count * 4;
        let chunk = bytes
            .get(cursor..cursor + need)
            .ok_or_else(|| bad("truncated tensor data"))?;
        cursor += need;
        Ok(chunk
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    };
    let (n, t_len, d_in, d_out) = (header.n_samples, header.t_len, header.d_in, header.d_out);
    let mut inputs = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let flat = take(n * d_in)?;
        inputs.push(Array2::from_shape_vec((n, d_in), flat).map_err(|e| bad(&e.to_string()))?);
    }
    let target_rows = match header.readout {
        ReadoutRule::FinalTime => n,
        ReadoutRule::PerTimestep => n * t_len,
    };
    let targets = Array2::from_shape_vec((target_rows, d_out), take(target_rows * d_out)?)
        .map_err(|e| bad(&e.to_string()))?;
    let mut read_digits = || -> Result<Option<Array2<u32>>> {
        if header.n_digit_cols == 0 {
            return Ok(None);
        }
        let flat = take(n * header.n_digit_cols)?;
        Ok(Some(
            Array2::from_shape_vec(
                (n, header.n_digit_cols),
                flat.into_iter().map(|v| v as u32).collect(),
            )
            .map_err(|e| bad(&e.to_string()))?,
        ))
    };
    let digits_a = read_digits()?;
    let digits_b = read_digits()?;
    let labels = if header.has_labels {
        Some(take(n)?.into_iter().map(|v| v as u32).collect())
    } else {
        None
    };
    if cursor != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(TaskDataset {
        kind: header.kind,
        inputs,
        targets,
        readout: header.readout,
        seed: header.seed,
        digits_a,
        digits_b,
        labels,
    })
}
