//! Dense `f64` storage for token/head/channel states and projection weights.
//!
//! [`Tensor3`] is laid out row-major with the channel axis fastest, so the
//! vector for `(token, head)` is one contiguous slice of length `head_dim`.
//! That layout is also the on-disk body order of the tensor file format.

use std::ops::Range;

use crate::error::{Error, Result};

/// `[token, head, channel]` array of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    data: Vec<f64>,
    tokens: usize,
    heads: usize,
    head_dim: usize,
}

impl Tensor3 {
    pub fn new(data: Vec<f64>, tokens: usize, heads: usize, head_dim: usize) -> Result<Self> {
        let expected = tokens * heads * head_dim;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "tensor data has {} values, shape ({tokens}, {heads}, {head_dim}) needs {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self {
            data,
            tokens,
            heads,
            head_dim,
        })
    }

    pub fn zeros(tokens: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            data: vec![0.0; tokens * heads * head_dim],
            tokens,
            heads,
            head_dim,
        }
    }

    /// An empty sequence with the given head layout.
    pub fn empty(heads: usize, head_dim: usize) -> Self {
        Self::zeros(0, heads, head_dim)
    }

    pub fn from_fn(
        tokens: usize,
        heads: usize,
        head_dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(tokens * heads * head_dim);
        for t in 0..tokens {
            for h in 0..heads {
                for j in 0..head_dim {
                    data.push(f(t, h, j));
                }
            }
        }
        Self::new(data, tokens, heads, head_dim)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.tokens, self.heads, self.head_dim)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, token: usize, head: usize) -> usize {
        (token * self.heads + head) * self.head_dim
    }

    pub fn get(&self, token: usize, head: usize, channel: usize) -> f64 {
        self.data[self.offset(token, head) + channel]
    }

    pub fn set(&mut self, token: usize, head: usize, channel: usize, value: f64) {
        let off = self.offset(token, head);
        self.data[off + channel] = value;
    }

    /// The `head_dim` channel values of one `(token, head)` pair.
    pub fn vector(&self, token: usize, head: usize) -> &[f64] {
        let off = self.offset(token, head);
        &self.data[off..off + self.head_dim]
    }

    pub fn vector_mut(&mut self, token: usize, head: usize) -> &mut [f64] {
        let off = self.offset(token, head);
        let d = self.head_dim;
        &mut self.data[off..off + d]
    }

    /// All heads of one token, `heads * head_dim` values.
    pub fn token_row(&self, token: usize) -> &[f64] {
        let w = self.heads * self.head_dim;
        &self.data[token * w..(token + 1) * w]
    }

    pub fn token_row_mut(&mut self, token: usize) -> &mut [f64] {
        let w = self.heads * self.head_dim;
        &mut self.data[token * w..(token + 1) * w]
    }

    pub fn checked_vector(&self, token: usize, head: usize) -> Result<&[f64]> {
        if token >= self.tokens {
            return Err(Error::Index {
                what: "token",
                index: token,
                bound: self.tokens,
            });
        }
        if head >= self.heads {
            return Err(Error::Index {
                what: "head",
                index: head,
                bound: self.heads,
            });
        }
        Ok(self.vector(token, head))
    }

    /// Copy of the tokens in `range`.
    pub fn slice_tokens(&self, range: Range<usize>) -> Tensor3 {
        let w = self.heads * self.head_dim;
        Tensor3 {
            data: self.data[range.start * w..range.end * w].to_vec(),
            tokens: range.len(),
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    /// Copy of the listed tokens, in the listed order.
    pub fn select_tokens(&self, indices: &[usize]) -> Tensor3 {
        let mut data = Vec::with_capacity(indices.len() * self.heads * self.head_dim);
        for &t in indices {
            data.extend_from_slice(self.token_row(t));
        }
        Tensor3 {
            data,
            tokens: indices.len(),
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    /// Appends the tokens of `other`; head layouts must match.
    pub fn append(&mut self, other: &Tensor3) -> Result<()> {
        if other.heads != self.heads || other.head_dim != self.head_dim {
            return Err(Error::Dimension(format!(
                "cannot append ({}, {}) tokens onto ({}, {}) layout",
                other.heads, other.head_dim, self.heads, self.head_dim
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.tokens += other.tokens;
        Ok(())
    }

    pub fn concat(parts: &[&Tensor3]) -> Result<Tensor3> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let mut out = Tensor3::empty(first.heads, first.head_dim);
        for p in parts {
            out.append(p)?;
        }
        Ok(out)
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.tokens = 0;
    }

    /// Views the tensor as a `tokens x (heads * head_dim)` matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            data: self.data.clone(),
            rows: self.tokens,
            cols: self.heads * self.head_dim,
        }
    }

    /// Reshapes a `tokens x (heads * head_dim)` matrix.
    pub fn from_matrix(m: &Matrix, heads: usize, head_dim: usize) -> Result<Self> {
        if m.cols != heads * head_dim {
            return Err(Error::Dimension(format!(
                "matrix has {} columns, expected {heads} x {head_dim}",
                m.cols
            )));
        }
        Self::new(m.data.clone(), m.rows, heads, head_dim)
    }

    /// Mean of squared element-wise differences.
    pub fn mse(&self, other: &Tensor3) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "mse between {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix data has {} values, shape ({rows}, {cols}) needs {}",
                data.len(),
                rows * cols
            )));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { data, rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }
}

/// Standard matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul ({}, {}) x ({}, {})",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    // i-k-j order keeps the inner loop on contiguous rows of `b` and `out`.
    for i in 0..a.rows {
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix {
        data: out,
        rows: a.rows,
        cols: b.cols,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean norm of the `(token, head)` vector.
pub fn token_l2_norm(x: &Tensor3, token: usize, head: usize) -> Result<f64> {
    Ok(l2_norm(x.checked_vector(token, head)?))
}
