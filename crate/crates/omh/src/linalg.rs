//! Dense row-major matrices and the cosine-similarity kernels the rest of the
//! crate is built on.
//!
//! All accumulations run in `f64`. Degenerate (near-zero-norm) rows are
//! reported as errors instead of being epsilon-padded, so broken feature
//! pipelines surface immediately.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Row norms below this are treated as zero, i.e. the row direction is
/// undefined and cosine similarity against it is an error.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("zero-norm row {row} in {side} matrix")]
    ZeroNormRow { side: &'static str, row: usize },
    #[error("dimension mismatch in {context}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    DimensionMismatch {
        context: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("matrix csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major dense matrix of `f64`. The universal carrier for features,
/// cluster centers, activations, transport plans and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadShape { rows, cols, len: data.len() });
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a matrix from row slices. Intended for literals in tests and
    /// small fixed matrices; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged row in from_rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data).expect("from_rows: non-finite entry")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                context: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(r);
                for c in 0..other.cols {
                    out_row[c] += a * orow[c];
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                sums[c] += v;
            }
        }
        sums
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn row_norm(&self, r: usize) -> f64 {
        self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<(), LinalgError> {
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                if !v.is_finite() {
                    return Err(LinalgError::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(())
    }

    /// Serializes to the matrix CSV format: a `rows,cols` header line, then
    /// one comma-separated line per row. Entries are written with 17
    /// significant digits so a round-trip reproduces every `f64` exactly.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{},{}", self.rows, self.cols);
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), LinalgError> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn from_csv_str(s: &str) -> Result<Self, LinalgError> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| LinalgError::Csv("empty file".into()))?;
        let mut dims = header.split(',');
        let rows: usize = dims
            .next()
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| LinalgError::Csv(format!("bad header: {header}")))?;
        let cols: usize = dims
            .next()
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| LinalgError::Csv(format!("bad header: {header}")))?;
        let mut data = Vec::with_capacity(rows * cols);
        for (i, line) in lines.enumerate() {
            if i >= rows {
                return Err(LinalgError::Csv(format!("more than {rows} data rows")));
            }
            for tok in line.split(',') {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| LinalgError::Csv(format!("bad value {tok:?} on row {i}")))?;
                data.push(v);
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn read_csv(path: &Path) -> Result<Self, LinalgError> {
        let text = fs::read_to_string(path)?;
        Self::from_csv_str(&text)
    }
}

fn row_norms(m: &DenseMatrix, side: &'static str) -> Result<Vec<f64>, LinalgError> {
    (0..m.rows())
        .map(|r| {
            let n = m.row_norm(r);
            if n < NORM_FLOOR {
                Err(LinalgError::ZeroNormRow { side, row: r })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Cosine similarity between every row of `a` and every row of `b`.
/// Entry `(k, l)` is `<a_k, b_l> / (|a_k| |b_l|)`, clamped into `[-1, 1]`
/// against floating-point drift.
pub fn cosine_sim(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if a.cols() != b.cols() {
        return Err(LinalgError::DimensionMismatch {
            context: "cosine_sim",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let na = row_norms(a, "left")?;
    let nb = row_norms(b, "right")?;
    let mut out = DenseMatrix::zeros(a.rows(), b.rows());
    for k in 0..a.rows() {
        let arow = a.row(k);
        for l in 0..b.rows() {
            let dot: f64 = arow.iter().zip(b.row(l)).map(|(x, y)| x * y).sum();
            out.set(k, l, (dot / (na[k] * nb[l])).clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

/// Cosine similarity with negative values clipped to zero; entries in `[0, 1]`.
pub fn cosine_sim_plus(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    Ok(cosine_sim(a, b)?.map(|v| v.max(0.0)))
}

/// Backward pass for `cosine_sim`. `sim` is the forward result and
/// `upstream` the gradient flowing into it; for the clipped variant the
/// caller masks `upstream` to zero wherever the clip was active, which makes
/// `sim`'s surviving entries equal the signed values the formula needs.
/// Returns the gradients with respect to `a` and `b`.
pub fn cosine_sim_backward(
    a: &DenseMatrix,
    b: &DenseMatrix,
    sim: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix), LinalgError> {
    assert_eq!(sim.shape(), (a.rows(), b.rows()), "sim shape mismatch");
    assert_eq!(upstream.shape(), sim.shape(), "upstream shape mismatch");
    let na = row_norms(a, "left")?;
    let nb = row_norms(b, "right")?;
    let mut grad_a = DenseMatrix::zeros(a.rows(), a.cols());
    let mut grad_b = DenseMatrix::zeros(b.rows(), b.cols());
    for k in 0..a.rows() {
        for l in 0..b.rows() {
            let g = upstream.get(k, l);
            if g == 0.0 {
                continue;
            }
            let s = sim.get(k, l);
            let (nk, nl) = (na[k], nb[l]);
            // d s / d a_k = (b_l / |b_l| - s * a_k / |a_k|) / |a_k|, and
            // symmetrically for b_l.
            for d in 0..a.cols() {
                let ah = a.get(k, d) / nk;
                let bh = b.get(l, d) / nl;
                grad_a.set(k, d, grad_a.get(k, d) + g * (bh - s * ah) / nk);
                grad_b.set(l, d, grad_b.get(l, d) + g * (ah - s * bh) / nl);
            }
        }
    }
    Ok((grad_a, grad_b))
}

/// Per-row argmax column indices. Ties break to the lowest index.
/// Panics on an empty matrix.
pub fn row_argmax(m: &DenseMatrix) -> Vec<usize> {
    assert!(!m.is_empty(), "row_argmax on empty matrix");
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Per-column argmax row indices. Ties break to the lowest index.
/// Panics on an empty matrix.
pub fn col_argmax(m: &DenseMatrix) -> Vec<usize> {
    assert!(!m.is_empty(), "col_argmax on empty matrix");
    (0..m.cols())
        .map(|c| {
            let mut best = 0;
            for r in 1..m.rows() {
                if m.get(r, c) > m.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

/// Hard one-hot assignment: per column, a single 1 at the row holding the
/// maximum. Ties break to the lowest row index so results are reproducible.
pub fn col_onehot_argmax(m: &DenseMatrix) -> DenseMatrix {
    let winners = col_argmax(m);
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for (c, &r) in winners.iter().enumerate() {
        out.set(r, c, 1.0);
    }
    out
}
