//! Dense f32 kernels used by the forward pass.
//!
//! Every reduction accumulates in `f32` along its index in ascending order, so
//! a given input always produces the same bits regardless of how many worker
//! threads process *other* rows or images. Negative infinity is the only
//! non-finite value that is allowed to appear, and [`softmax_in_place`] is the
//! one place that interprets it (as a masked entry).

use crate::error::{Error, Result};

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copy of columns `start..start + width`.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }
}

/// Standard matrix product. Each output entry is accumulated along the inner
/// dimension in index order, starting from `0.0`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j loop order: every out[i][j] still sees its k terms in order.
    for i in 0..a.rows {
        let a_row = a.row(i);
        let o_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &b_kj) in o_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(out)
}

/// `x · Wᵀ + bias` with `W` stored as `out_features × in_features`.
pub fn linear(x: &Matrix, weight: &Matrix, bias: Option<&[f32]>) -> Result<Matrix> {
    if x.cols != weight.cols {
        return Err(Error::Shape(format!(
            "linear input width {} vs weight {}x{}",
            x.cols, weight.rows, weight.cols
        )));
    }
    if let Some(b) = bias {
        if b.len() != weight.rows {
            return Err(Error::Shape(format!(
                "linear bias length {} vs {} outputs",
                b.len(),
                weight.rows
            )));
        }
    }
    let mut out = Matrix::zeros(x.rows, weight.rows);
    for i in 0..x.rows {
        let xi = x.row(i);
        for o in 0..weight.rows {
            let mut acc = dot(xi, weight.row(o));
            if let Some(b) = bias {
                acc += b[o];
            }
            out.data[i * weight.rows + o] = acc;
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of one row. `-inf` entries become exactly `0`.
pub fn softmax_in_place(row: &mut [f32]) -> Result<()> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Err(Error::Degenerate(
            "softmax row is entirely masked (-inf)".into(),
        ));
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = if *v == f32::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r))?;
    }
    Ok(out)
}

/// Layer normalization with population variance.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, eps, &mut out)?;
    Ok(out)
}

fn layer_norm_into(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) -> Result<()> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer_norm lengths x={} gamma={} beta={}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let n = x.len() as f32;
    let mut mean = 0.0f32;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0f32;
    for v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv = 1.0 / (var + eps).sqrt();
    for (((o, v), g), b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = (v - mean) * inv * g + b;
    }
    Ok(())
}

/// Row-wise [`layer_norm`].
pub fn layer_norm_rows(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let (src, dst) = (x.row(r), &mut out.data[r * x.cols..(r + 1) * x.cols]);
        layer_norm_into(src, gamma, beta, eps, dst)?;
    }
    Ok(out)
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu(x: &[f32]) -> Vec<f32> {
    x.iter().copied().map(gelu_scalar).collect()
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn l2_norm(v: &[f32]) -> f32 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit Euclidean length.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = l2_norm(v);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}
