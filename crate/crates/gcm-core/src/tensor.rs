//! Dense numeric substrate: row-major f32 tensors, the forward kernels the
//! model needs, and an exact hand-written backward for every kernel.
//!
//! All reductions accumulate in f64 to bound drift; storage stays f32 so
//! checkpoints remain compact. Kernels are pure functions: same inputs give
//! bit-identical outputs, and nothing here holds shared mutable state.

use crate::error::{GcmError, Result};

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Row-major 2-D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GcmError::Shape(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f32 {
        &mut self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Validation pass: every value finite.
    pub fn validate_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(GcmError::Validation(format!(
                    "non-finite value {} at flat index {} of {}x{} tensor",
                    v, i, self.rows, self.cols
                )));
            }
        }
        Ok(())
    }
}

/// Row-major 3-D tensor, `[d0][d1][d2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3D {
    pub d0: usize,
    pub d1: usize,
    pub d2: usize,
    pub data: Vec<f32>,
}

impl Tensor3D {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Tensor3D { d0, d1, d2, data: vec![0.0; d0 * d1 * d2] }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[(i * self.d1 + j) * self.d2 + k]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f32 {
        &mut self.data[(i * self.d1 + j) * self.d2 + k]
    }

    #[inline]
    pub fn slice2(&self, i: usize) -> &[f32] {
        let n = self.d1 * self.d2;
        &self.data[i * n..(i + 1) * n]
    }
}

// ── Forward kernels ─────────────────────────────────────────────────────────

/// f64-accumulated dot product over eight independent lanes. The fixed lane
/// schedule keeps results bit-reproducible while breaking the serial
/// dependency chain a single accumulator would impose; fixed-size chunks let
/// the compiler drop bounds checks and vectorize.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0f64; 8];
    let whole = a.len() / 8 * 8;
    for (xa, xb) in a[..whole].chunks_exact(8).zip(b[..whole].chunks_exact(8)) {
        let xa: &[f32; 8] = xa.try_into().unwrap();
        let xb: &[f32; 8] = xb.try_into().unwrap();
        for l in 0..8 {
            lanes[l] += xa[l] as f64 * xb[l] as f64;
        }
    }
    for i in whole..a.len() {
        lanes[i % 8] += a[i] as f64 * b[i] as f64;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

#[inline]
fn to_f64_buf(src: &[f32], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(src.iter().map(|&v| v as f64));
}

/// Standard matrix product, f64 accumulation. Row-accumulation (axpy) order:
/// both operands stream row-major, per-element sums are independent, and the
/// right operand is staged to f64 once so the inner loop is pure fused
/// multiply-add — vectorizable without reassociating any reduction.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(GcmError::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut bf = Vec::new();
    to_f64_buf(&b.data, &mut bf);
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    let mut scratch = vec![0f64; b.cols];
    for i in 0..a.rows {
        scratch.fill(0.0);
        let ar = a.row(i);
        for (k, &aik) in ar.iter().enumerate() {
            let av = aik as f64;
            let br = &bf[k * b.cols..(k + 1) * b.cols];
            for (s, &bv) in scratch.iter_mut().zip(br) {
                *s += av * bv;
            }
        }
        for (o, &s) in out.row_mut(i).iter_mut().zip(&scratch) {
            *o = s as f32;
        }
    }
    Ok(out)
}

/// `out = aᵀ·b` without materializing the transpose; the usual shape for
/// weight gradients (`x_inᵀ · d_out`).
pub fn matmul_at(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(GcmError::Shape(format!(
            "matmul_at: ({}x{})ᵀ times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut bf = vec![0f64; b.cols];
    let mut scratch = vec![0f64; a.cols * b.cols];
    for i in 0..a.rows {
        let ar = a.row(i);
        to_f64_buf(b.row(i), &mut bf);
        for (r, &av) in ar.iter().enumerate() {
            let av = av as f64;
            let row = &mut scratch[r * b.cols..(r + 1) * b.cols];
            for (s, &bv) in row.iter_mut().zip(&bf) {
                *s += av * bv;
            }
        }
    }
    let mut out = Tensor2D::zeros(a.cols, b.cols);
    for (o, &s) in out.data.iter_mut().zip(&scratch) {
        *o = s as f32;
    }
    Ok(out)
}

/// `out = a·bᵀ` without materializing the transpose (b is already row-major
/// over the contraction axis). Both operands stage to f64 so the eight-lane
/// dot runs on pure f64 fused multiply-adds.
pub fn matmul_bt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(GcmError::Shape(format!(
            "matmul_bt: {}x{} times ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut bf = Vec::new();
    to_f64_buf(&b.data, &mut bf);
    let mut af = vec![0f64; a.cols];
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        to_f64_buf(a.row(i), &mut af);
        for j in 0..b.rows {
            let br = &bf[j * b.cols..(j + 1) * b.cols];
            out.data[i * b.rows + j] = dot_f64_f64(&af, br) as f32;
        }
    }
    Ok(out)
}

/// Eight-lane f64 dot product with a fixed, reproducible lane schedule.
#[inline]
fn dot_f64_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0f64; 8];
    let whole = a.len() / 8 * 8;
    for (xa, xb) in a[..whole].chunks_exact(8).zip(b[..whole].chunks_exact(8)) {
        let xa: &[f64; 8] = xa.try_into().unwrap();
        let xb: &[f64; 8] = xb.try_into().unwrap();
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    for i in whole..a.len() {
        lanes[i % 8] += a[i] * b[i];
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(x: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        softmax_into(x.row(r), out.row_mut(r));
    }
    out
}

/// Softmax of one row into a destination slice. `-inf` entries map to 0.
pub fn softmax_into(row: &[f32], dst: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0f64;
    for (d, &v) in dst.iter_mut().zip(row) {
        let e = ((v - max) as f64).exp();
        *d = e as f32;
        sum += e;
    }
    let inv = (1.0 / sum) as f32;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

/// Log-softmax of one row, f64 throughout (used for scoring objectives).
pub fn log_softmax_f64(row: &[f32]) -> Vec<f64> {
    let mut max = f32::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0f64;
    for &v in row {
        sum += ((v - max) as f64).exp();
    }
    let lse = max as f64 + sum.ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Zero-mean unit-variance normalization then affine, on one vector.
pub fn layernorm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(GcmError::Shape(format!(
            "layernorm: x len {}, gain len {}, bias len {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps as f64).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (((v as f64 - mean) * inv_std) as f32) * g + b)
        .collect())
}

/// Tanh-approximation GELU (the GPT-2 variant).
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    let xf = x as f64;
    (0.5 * xf * (1.0 + (C * (xf + 0.044715 * xf * xf * xf)).tanh())) as f32
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    const C: f64 = 0.7978845608028654;
    let xf = x as f64;
    let inner = C * (xf + 0.044715 * xf * xf * xf);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * xf * xf);
    (0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * dinner) as f32
}

// ── Backward kernels ────────────────────────────────────────────────────────
//
// Each backward takes the saved forward inputs and the upstream gradient and
// returns analytical gradients. Shape mismatches against the recorded forward
// are usage errors.

/// Gradients of `matmul(a, b)` given upstream `g` (same shape as the output):
/// `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor2D, b: &Tensor2D, g: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
    if g.rows != a.rows || g.cols != b.cols || a.cols != b.rows {
        return Err(GcmError::Shape(format!(
            "matmul_backward: a {}x{}, b {}x{}, g {}x{}",
            a.rows, a.cols, b.rows, b.cols, g.rows, g.cols
        )));
    }
    let ga = matmul_bt(g, b)?;
    let gb = matmul_at(a, g)?;
    Ok((ga, gb))
}

/// Backward through row-wise softmax given the forward output `s` and
/// upstream `g`: `gx = s ⊙ (g − (g·s))` per row.
pub fn softmax_rows_backward(s: &Tensor2D, g: &Tensor2D) -> Result<Tensor2D> {
    if s.rows != g.rows || s.cols != g.cols {
        return Err(GcmError::Shape("softmax_rows_backward: s and g differ".into()));
    }
    let mut out = Tensor2D::zeros(s.rows, s.cols);
    for r in 0..s.rows {
        let sr = s.row(r);
        let gr = g.row(r);
        let dot: f64 = sr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
        for c in 0..s.cols {
            out.data[r * s.cols + c] = (sr[c] as f64 * (gr[c] as f64 - dot)) as f32;
        }
    }
    Ok(out)
}

/// Backward through `layernorm` for one vector. Returns `(gx, ggain, gbias)`.
pub fn layernorm_backward(
    x: &[f32],
    gain: &[f32],
    eps: f32,
    g: &[f32],
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    if gain.len() != x.len() || g.len() != x.len() {
        return Err(GcmError::Shape("layernorm_backward: length mismatch".into()));
    }
    let n = x.len();
    let nf = n as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / nf;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / nf;
    let inv_std = 1.0 / (var + eps as f64).sqrt();

    // xhat_i = (x_i - mean) * inv_std; out_i = xhat_i * gain_i + bias_i
    let xhat: Vec<f64> = x.iter().map(|&v| (v as f64 - mean) * inv_std).collect();
    let gxhat: Vec<f64> = g.iter().zip(gain).map(|(&gi, &w)| gi as f64 * w as f64).collect();
    let sum_gxhat: f64 = gxhat.iter().sum();
    let sum_gxhat_xhat: f64 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();

    let gx: Vec<f32> = (0..n)
        .map(|i| {
            (inv_std * (gxhat[i] - sum_gxhat / nf - xhat[i] * sum_gxhat_xhat / nf)) as f32
        })
        .collect();
    let ggain: Vec<f32> = (0..n).map(|i| (g[i] as f64 * xhat[i]) as f32).collect();
    let gbias: Vec<f32> = g.to_vec();
    Ok((gx, ggain, gbias))
}
