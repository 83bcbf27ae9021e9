//! Small dense matrix exponential (scaling-and-squaring) with an exact
//! reverse-mode adjoint via the block-augmented exponential.

use super::ops::{matmul_raw, record1};
use super::TensorBase;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// 1-norm (max column abs sum) of a square matrix.
fn one_norm<S: Scalar>(a: &[S], m: usize) -> S {
    let mut best = S::zero();
    for j in 0..m {
        let mut col = S::zero();
        for i in 0..m {
            col += a[i * m + j].abs();
        }
        if col > best {
            best = col;
        }
    }
    best
}

/// e^A for a square matrix held as a flat row-major slice.
///
/// Scale by 2^-s until the 1-norm is at most 0.5, apply a degree-13 Taylor
/// polynomial (remainder ~7e-16 at that norm), then square s times.
pub fn matexp_raw<S: Scalar>(a: &[S], m: usize) -> Vec<S> {
    let norm = one_norm(a, m);
    let half = S::from_f64(0.5);
    let mut s = 0u32;
    let mut scaled = a.to_vec();
    if norm > half {
        s = (norm / half).to_f64().log2().ceil() as u32;
        let scale = S::one() / S::from_f64(2.0f64.powi(s as i32));
        for v in scaled.iter_mut() {
            *v = *v * scale;
        }
    }
    // Taylor: I + B + B²/2! + … + B¹³/13!
    let mut result = vec![S::zero(); m * m];
    for i in 0..m {
        result[i * m + i] = S::one();
    }
    let mut term = result.clone();
    for k in 1..=13usize {
        term = matmul_raw(&term, &scaled, m, m, m);
        let inv_k = S::one() / S::from_f64(k as f64);
        for v in term.iter_mut() {
            *v = *v * inv_k;
        }
        for (r, &t) in result.iter_mut().zip(term.iter()) {
            *r += t;
        }
    }
    for _ in 0..s {
        result = matmul_raw(&result, &result, m, m, m);
    }
    result
}

/// Detached matrix exponential of a square tensor.
pub fn plain_matexp<S: Scalar>(a: &TensorBase<S>) -> Result<TensorBase<S>> {
    let m = check_square(a)?;
    TensorBase::from_vec(&[m, m], matexp_raw(a.data(), m))
}

fn check_square<S: Scalar>(a: &TensorBase<S>) -> Result<usize> {
    match a.shape() {
        [m, n] if m == n => Ok(*m),
        other => Err(Error::dim(format!("matrix exponential expects a square matrix, got {:?}", other))),
    }
}

/// Fréchet-adjoint of the matrix exponential: given upstream gradient G at
/// exp(A), returns dL/dA as the top-right block of exp([[Aᵀ, G], [0, Aᵀ]]).
fn matexp_adjoint<S: Scalar>(a: &[S], g: &[S], m: usize) -> Vec<S> {
    let n = 2 * m;
    let mut block = vec![S::zero(); n * n];
    for i in 0..m {
        for j in 0..m {
            let at = a[j * m + i]; // Aᵀ
            block[i * n + j] = at;
            block[(m + i) * n + (m + j)] = at;
            block[i * n + (m + j)] = g[i * m + j];
        }
    }
    let e = matexp_raw(&block, n);
    let mut out = vec![S::zero(); m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = e[i * n + (m + j)];
        }
    }
    out
}

impl<S: Scalar> TensorBase<S> {
    /// Differentiable matrix exponential of a square matrix.
    pub fn matexp(&self) -> Result<TensorBase<S>> {
        let m = check_square(self)?;
        if !self.is_finite() {
            return Err(Error::numeric("matexp input is non-finite"));
        }
        let data = matexp_raw(self.data(), m);
        let a = self.data_rc();
        Ok(record1(self, vec![m, m], data, move |up| matexp_adjoint(&a, up, m)))
    }
}
