//! Bit-packed binary matrices, column-major: each column holds ceil(n/64)
//! u64 words, row r in word r/64 at bit r%64. Unused high bits of the last
//! word are kept zero so columns compare and hash by word equality.
//!
//! Matrix-vector products iterate columns in index order and bits in word
//! order, so accumulation order is fixed and results are deterministic.

use ndarray::{Array2, ArrayView1};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    n_rows: usize,
    wpc: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn new(n_rows: usize) -> Self {
        BitMatrix {
            n_rows,
            wpc: n_rows.div_ceil(64),
            data: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        if self.wpc == 0 {
            0
        } else {
            self.data.len() / self.wpc
        }
    }

    pub fn words_per_col(&self) -> usize {
        self.wpc
    }

    pub fn raw_words(&self) -> &[u64] {
        &self.data
    }

    pub fn from_words(n_rows: usize, n_cols: usize, data: Vec<u64>) -> Self {
        let wpc = n_rows.div_ceil(64);
        assert_eq!(data.len(), wpc * n_cols, "word count mismatch");
        BitMatrix {
            n_rows,
            wpc,
            data,
        }
    }

    pub fn push_column_words(&mut self, words: &[u64]) {
        assert_eq!(words.len(), self.wpc);
        if self.n_rows % 64 != 0 {
            let mask = (1u64 << (self.n_rows % 64)) - 1;
            assert_eq!(words[self.wpc - 1] & !mask, 0, "stray bits past n_rows");
        }
        self.data.extend_from_slice(words);
    }

    /// Pack a 0.0/1.0 column.
    pub fn push_column_f64(&mut self, col: ArrayView1<f64>) {
        assert_eq!(col.len(), self.n_rows);
        let mut words = vec![0u64; self.wpc];
        for (r, &v) in col.iter().enumerate() {
            debug_assert!(v == 0.0 || v == 1.0, "non-binary entry {v}");
            if v == 1.0 {
                words[r / 64] |= 1u64 << (r % 64);
            }
        }
        self.data.extend_from_slice(&words);
    }

    pub fn col(&self, c: usize) -> &[u64] {
        &self.data[c * self.wpc..(c + 1) * self.wpc]
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.col(c)[r / 64] >> (r % 64) & 1 == 1
    }

    pub fn col_popcount(&self, c: usize) -> u32 {
        self.col(c).iter().map(|w| w.count_ones()).sum()
    }

    /// D * w, i.e. (n x P)(P x d) -> n x d.
    pub fn mul_coeffs(&self, w: &Array2<f64>) -> Array2<f64> {
        let p = self.n_cols();
        let d = w.ncols();
        assert_eq!(w.nrows(), p);
        let mut out = Array2::<f64>::zeros((self.n_rows, d));
        for c in 0..p {
            let wc = w.row(c);
            // skip exact zeros: the solver iterates sparse-ish coefficients
            if wc.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (wi, &word) in self.col(c).iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let r = wi * 64 + bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    let mut row = out.row_mut(r);
                    for j in 0..d {
                        row[j] += wc[j];
                    }
                }
            }
        }
        out
    }

    /// D^T * v, i.e. (P x n)(n x d) -> P x d.
    pub fn t_mul(&self, v: &Array2<f64>) -> Array2<f64> {
        assert_eq!(v.nrows(), self.n_rows);
        let p = self.n_cols();
        let d = v.ncols();
        let mut out = Array2::<f64>::zeros((p, d));
        let vs = v.as_standard_layout();
        let flat = vs.as_slice().unwrap();
        for c in 0..p {
            let mut acc = vec![0.0f64; d];
            for (wi, &word) in self.col(c).iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let r = wi * 64 + bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    let row = &flat[r * d..(r + 1) * d];
                    for j in 0..d {
                        acc[j] += row[j];
                    }
                }
            }
            out.row_mut(c).assign(&ndarray::ArrayView1::from(&acc));
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_rows, self.n_cols()), |(r, c)| {
            if self.get(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Rows [r0, r0+len) of column c as f64.
    pub fn col_slice_dense(&self, c: usize, r0: usize, len: usize) -> Vec<f64> {
        (r0..r0 + len)
            .map(|r| if self.get(r, c) { 1.0 } else { 0.0 })
            .collect()
    }
}
