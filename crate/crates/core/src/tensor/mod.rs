//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Values are row-major. A 1-D tensor is a vector, a 2-D tensor a matrix,
//! and a 0-D tensor (empty shape, one value) a scalar. Each forward pass
//! records into a fresh [`Graph`]; [`Graph::backward`] returns gradients for
//! every leaf created with [`Graph::param`].

mod graph;
mod gradcheck;

pub use graph::{Gradients, Graph, Op, Var};
pub use gradcheck::{finite_diff_check, FdProbe, GradCheckReport};

use thiserror::Error;

/// Inputs to `safe_log` below this value are clamped.
pub const LOG_EPS: f64 = 1e-8;

/// Vectors with a norm below this value are rejected by cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: degenerate vector (norm {norm:e} below {NORM_EPS:e})")]
    Degenerate { op: &'static str, norm: f64 },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![1.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::Shape {
                    op: "matrix",
                    left: vec![r, c],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![r, c],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a `rows x cols` matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut t = Self::zeros(&[rows, cols]);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(TensorError::Shape {
                    op: "from_columns",
                    left: vec![rows, cols],
                    right: vec![col.len()],
                });
            }
            for (i, &v) in col.iter().enumerate() {
                t.data[i * cols + j] = v;
            }
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => 1,
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Copies column `c` of a matrix.
    pub fn column(&self, c: usize) -> Vec<f64> {
        let cols = self.cols();
        (0..self.rows()).map(|r| self.data[r * cols + c]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        let cols = self.cols();
        for (r, &v) in values.iter().enumerate() {
            self.data[r * cols + c] = v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Order-sensitive checksum of the raw bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &d in &self.shape {
            h = (h ^ d as u64).wrapping_mul(0x0100_0000_01b3);
        }
        for v in &self.data {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Numerically stable softmax over a slice.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn safe_log(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two slices; errors when either norm is below [`NORM_EPS`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(TensorError::Shape {
            op: "cosine",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    for n in [nu, nv] {
        if n < NORM_EPS {
            return Err(TensorError::Degenerate { op: "cosine", norm: n });
        }
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn columns_round_trip() {
        let t = Tensor::from_columns(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.column(1), vec![3.0, 4.0]);
        assert_eq!(t.data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn stable_helpers() {
        assert_eq!(softmax(&[0.0, 0.0, 0.0, 0.0]), vec![0.25; 4]);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(800.0).is_finite());
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(safe_log(0.0), LOG_EPS.ln());
    }

    #[test]
    fn cosine_closed_forms() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(TensorError::Degenerate { .. })
        ));
    }
}
