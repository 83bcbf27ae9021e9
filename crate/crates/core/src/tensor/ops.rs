//! Differentiable tensor operations.
//!
//! Every op computes its forward value eagerly and, when any input is
//! attached to a tape, records a node whose backward closure maps the
//! upstream gradient to per-parent contributions.

use std::rc::Rc;

use super::tape::{unify_tape, BackwardFn};
use super::{numel_of, strides_of, NodeRef, TensorBase};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// recording helpers
// ---------------------------------------------------------------------------

pub(crate) fn record1<S: Scalar>(
    x: &TensorBase<S>,
    shape: Vec<usize>,
    data: Vec<S>,
    back: impl Fn(&[S]) -> Vec<S> + 'static,
) -> TensorBase<S> {
    let node = x.node().map(|n| {
        let f: BackwardFn<S> = Box::new(move |up| vec![Some(back(up))]);
        let idx = n.tape.push(vec![n.idx], Some(f), data.len());
        NodeRef { tape: n.tape.clone(), idx }
    });
    TensorBase::from_parts(shape, data, node)
}

#[allow(clippy::type_complexity)]
pub(crate) fn record2<S: Scalar>(
    a: &TensorBase<S>,
    b: &TensorBase<S>,
    shape: Vec<usize>,
    data: Vec<S>,
    back: impl Fn(&[S], bool, bool) -> (Option<Vec<S>>, Option<Vec<S>>) + 'static,
) -> Result<TensorBase<S>> {
    let tape = unify_tape(&[a, b])?;
    let node = tape.map(|tape| {
        let need_a = a.node().is_some();
        let need_b = b.node().is_some();
        let mut parents = Vec::new();
        if need_a {
            parents.push(a.node().unwrap().idx);
        }
        if need_b {
            parents.push(b.node().unwrap().idx);
        }
        let f: BackwardFn<S> = Box::new(move |up| {
            let (ga, gb) = back(up, need_a, need_b);
            let mut out = Vec::new();
            if need_a {
                out.push(ga);
            }
            if need_b {
                out.push(gb);
            }
            out
        });
        let idx = tape.push(parents, Some(f), data.len());
        NodeRef { tape, idx }
    });
    Ok(TensorBase::from_parts(shape, data, node))
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Right-aligned broadcast of two shapes (axes of extent 1 stretch).
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {:?} and {:?} are not broadcast-compatible",
                    a, b
                )))
            }
        };
    }
    Ok(out)
}

/// Strides into `shape` when iterated under `out_shape` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        if i >= pad && shape[i - pad] != 1 {
            out[i] = strides[i - pad];
        }
    }
    out
}

/// Applies `f(a_i, b_i)` under broadcasting; returns (out_shape, out_data).
fn broadcast_map<S: Scalar>(
    a: &TensorBase<S>,
    b: &TensorBase<S>,
    f: impl Fn(S, S) -> S,
) -> Result<(Vec<usize>, Vec<S>)> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a.shape().to_vec(), data));
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n = numel_of(&out_shape);
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (da, db) = (a.data(), b.data());
    let mut offa = 0usize;
    let mut offb = 0usize;
    for _ in 0..n {
        data.push(f(da[offa], db[offb]));
        // increment multi-index
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            offa += sa[ax];
            offb += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            offa -= sa[ax] * out_shape[ax];
            offb -= sb[ax] * out_shape[ax];
        }
    }
    Ok((out_shape, data))
}

/// Sums `grad` (laid out as `out_shape`) down to `in_shape` for broadcast backward.
pub(crate) fn reduce_to_shape<S: Scalar>(grad: &[S], out_shape: &[usize], in_shape: &[usize]) -> Vec<S> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let mut out = vec![S::zero(); numel_of(in_shape)];
    let si = broadcast_strides(in_shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for &g in grad {
        out[off] += g;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += si[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= si[ax] * out_shape[ax];
        }
    }
    out
}

/// Per-element weighted map used by broadcast backward: grad * other-operand.
fn broadcast_mul_grad<S: Scalar>(
    up: &[S],
    out_shape: &[usize],
    other: &TensorBase<S>,
    target_shape: &[usize],
) -> Vec<S> {
    let so = broadcast_strides(other.shape(), out_shape);
    let d = other.data();
    let mut weighted = Vec::with_capacity(up.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for &g in up {
        weighted.push(g * d[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += so[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= so[ax] * out_shape[ax];
        }
    }
    reduce_to_shape(&weighted, out_shape, target_shape)
}

// ---------------------------------------------------------------------------
// elementwise and broadcast ops
// ---------------------------------------------------------------------------

impl<S: Scalar> TensorBase<S> {
    pub fn add(&self, other: &TensorBase<S>) -> Result<TensorBase<S>> {
        let (shape, data) = broadcast_map(self, other, |a, b| a + b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let out_shape = shape.clone();
        record2(self, other, shape, data, move |up, na, nb| {
            let ga = na.then(|| reduce_to_shape(up, &out_shape, &sa));
            let gb = nb.then(|| reduce_to_shape(up, &out_shape, &sb));
            (ga, gb)
        })
    }

    pub fn sub(&self, other: &TensorBase<S>) -> Result<TensorBase<S>> {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &TensorBase<S>) -> Result<TensorBase<S>> {
        let (shape, data) = broadcast_map(self, other, |a, b| a * b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (va, vb) = (self.detach(), other.detach());
        let out_shape = shape.clone();
        record2(self, other, shape, data, move |up, na, nb| {
            let ga = na.then(|| broadcast_mul_grad(up, &out_shape, &vb, &sa));
            let gb = nb.then(|| broadcast_mul_grad(up, &out_shape, &va, &sb));
            (ga, gb)
        })
    }

    pub fn neg(&self) -> TensorBase<S> {
        let data = self.data().iter().map(|&v| -v).collect();
        record1(self, self.shape().to_vec(), data, |up| up.iter().map(|&g| -g).collect())
    }

    pub fn scale(&self, c: S) -> TensorBase<S> {
        let data = self.data().iter().map(|&v| v * c).collect();
        record1(self, self.shape().to_vec(), data, move |up| {
            up.iter().map(|&g| g * c).collect()
        })
    }

    pub fn add_scalar(&self, c: S) -> TensorBase<S> {
        let data = self.data().iter().map(|&v| v + c).collect();
        record1(self, self.shape().to_vec(), data, |up| up.to_vec())
    }

    fn unary(
        &self,
        f: impl Fn(S) -> S,
        // derivative as a function of (input, output)
        df: impl Fn(S, S) -> S + 'static,
    ) -> TensorBase<S> {
        let data: Vec<S> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.data_rc();
        let y = Rc::new(data.clone());
        record1(self, self.shape().to_vec(), data, move |up| {
            up.iter().zip(x.iter().zip(y.iter())).map(|(&g, (&xi, &yi))| g * df(xi, yi)).collect()
        })
    }

    pub fn exp(&self) -> TensorBase<S> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> TensorBase<S> {
        self.unary(|v| v.ln(), |x, _| S::one() / x)
    }

    pub fn sigmoid(&self) -> TensorBase<S> {
        self.unary(
            |v| S::one() / (S::one() + (-v).exp()),
            |_, y| y * (S::one() - y),
        )
    }

    pub fn tanh(&self) -> TensorBase<S> {
        self.unary(|v| v.tanh(), |_, y| S::one() - y * y)
    }

    /// Softplus ln(1 + e^x), computed stably.
    pub fn softplus(&self) -> TensorBase<S> {
        self.unary(
            |v| {
                if v > S::zero() {
                    v + (-v).exp().ln_1p()
                } else {
                    v.exp().ln_1p()
                }
            },
            |x, _| S::one() / (S::one() + (-x).exp()),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> TensorBase<S> {
        let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        self.unary(
            move |v| {
                let inner = c * (v + k * v * v * v);
                half * v * (S::one() + inner.tanh())
            },
            move |x, _| {
                let inner = c * (x + k * x * x * x);
                let t = inner.tanh();
                let sech2 = S::one() - t * t;
                let dinner = c * (S::one() + S::from_f64(3.0) * k * x * x);
                half * (S::one() + t) + half * x * sech2 * dinner
            },
        )
    }

    pub fn abs(&self) -> TensorBase<S> {
        self.unary(
            |v| v.abs(),
            |x, _| {
                if x >= S::zero() {
                    S::one()
                } else {
                    -S::one()
                }
            },
        )
    }

    /// Clamp to [lo, hi]; gradient passes only through the interior.
    pub fn clamp(&self, lo: S, hi: S) -> TensorBase<S> {
        self.unary(
            move |v| v.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    // -----------------------------------------------------------------------
    // shape ops
    // -----------------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<TensorBase<S>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape(),
                self.numel(),
                shape
            )));
        }
        Ok(record1(self, shape.to_vec(), self.to_vec(), |up| up.to_vec()))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<TensorBase<S>> {
        let [m, n]: [usize; 2] = self
            .shape()
            .try_into()
            .map_err(|_| Error::dim(format!("transpose expects rank 2, got {:?}", self.shape())))?;
        let src = self.data();
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(record1(self, vec![n, m], data, move |up| {
            let mut g = vec![S::zero(); m * n];
            for j in 0..n {
                for i in 0..m {
                    g[i * n + j] = up[j * m + i];
                }
            }
            g
        }))
    }

    /// Reverse along one axis.
    pub fn flip(&self, axis: usize) -> Result<TensorBase<S>> {
        if axis >= self.shape().len() {
            return Err(Error::dim(format!("flip axis {} out of range for {:?}", axis, self.shape())));
        }
        let shape = self.shape().to_vec();
        let perm = flip_perm(&shape, axis);
        let src = self.data();
        let data: Vec<S> = perm.iter().map(|&i| src[i]).collect();
        Ok(record1(self, shape, data, move |up| {
            let mut g = vec![S::zero(); up.len()];
            for (dst, &src_idx) in perm.iter().enumerate() {
                g[src_idx] = up[dst];
            }
            g
        }))
    }

    /// Contiguous slice `[start, end)` along one axis.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<TensorBase<S>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {end}) on axis {axis} invalid for shape {:?}",
                shape
            )));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let width = shape[axis];
        let src = self.data();
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            let base = o * width * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let full = self.numel();
        Ok(record1(self, out_shape, data, move |up| {
            let mut g = vec![S::zero(); full];
            let span = (end - start) * inner;
            for o in 0..outer {
                let dst = o * width * inner + start * inner;
                g[dst..dst + span].copy_from_slice(&up[o * span..(o + 1) * span]);
            }
            g
        }))
    }

    // -----------------------------------------------------------------------
    // reductions
    // -----------------------------------------------------------------------

    /// Sum of all elements (rank-0 result).
    pub fn sum_all(&self) -> TensorBase<S> {
        let s = self.data().iter().fold(S::zero(), |acc, &v| acc + v);
        let n = self.numel();
        record1(self, vec![], vec![s], move |up| vec![up[0]; n])
    }

    pub fn mean_all(&self) -> TensorBase<S> {
        let n = S::from_f64(self.numel() as f64);
        self.sum_all().scale(S::one() / n)
    }

    /// Sum over one axis (axis removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<TensorBase<S>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("sum_axis {} out of range for {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let width = shape[axis];
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let src = self.data();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for w in 0..width {
                let base = (o * width + w) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let n = self.numel();
        Ok(record1(self, out_shape, data, move |up| {
            let mut g = vec![S::zero(); n];
            for o in 0..outer {
                for w in 0..width {
                    let base = (o * width + w) * inner;
                    for i in 0..inner {
                        g[base + i] = up[o * inner + i];
                    }
                }
            }
            g
        }))
    }

    // -----------------------------------------------------------------------
    // matmul
    // -----------------------------------------------------------------------

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &TensorBase<S>) -> Result<TensorBase<S>> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 {
            return Err(Error::dim(format!(
                "matmul expects rank-2 operands, got {:?} x {:?}",
                a_shape, b_shape
            )));
        }
        let (m, k) = (a_shape[0], a_shape[1]);
        let (k2, n) = (b_shape[0], b_shape[1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                a_shape, b_shape
            )));
        }
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        let (a_val, b_val) = (self.data_rc(), other.data_rc());
        record2(self, other, vec![m, n], data, move |up, na, nb| {
            // dA = up · Bᵀ ; dB = Aᵀ · up
            let ga = na.then(|| matmul_nt(up, &b_val, m, n, k));
            let gb = nb.then(|| matmul_tn(&a_val, up, m, k, n));
            (ga, gb)
        })
    }
}

fn flip_perm(shape: &[usize], axis: usize) -> Vec<usize> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let width = shape[axis];
    let mut perm = Vec::with_capacity(numel_of(shape));
    for o in 0..outer {
        for w in 0..width {
            let src_w = width - 1 - w;
            let base = (o * width + src_w) * inner;
            perm.extend(base..base + inner);
        }
    }
    perm
}

/// C[m×n] = A[m×k] · B[k×n]
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C[m×k] = A[m×n] · Bᵀ where B is [k×n]
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = S::zero();
            let arow = &a[i * n..(i + 1) * n];
            let brow = &b[j * n..(j + 1) * n];
            for p in 0..n {
                acc += arow[p] * brow[p];
            }
            c[i * k + j] = acc;
        }
    }
    c
}

/// C[k×n] = Aᵀ · B where A is [m×k], B is [m×n]
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let apv = arow[p];
            if apv == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += apv * brow[j];
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// concatenation
// ---------------------------------------------------------------------------

/// Concatenate tensors along `axis`. All other extents must agree.
pub fn concat<S: Scalar>(axis: usize, parts: &[&TensorBase<S>]) -> Result<TensorBase<S>> {
    if parts.is_empty() {
        return Err(Error::arg("concat of zero tensors"));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(Error::dim(format!("concat axis {} out of range", axis)));
    }
    let mut out_shape = parts[0].shape().to_vec();
    let mut widths = Vec::with_capacity(parts.len());
    widths.push(out_shape[axis]);
    for p in &parts[1..] {
        if p.shape().len() != rank {
            return Err(Error::dim("concat rank mismatch"));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != out_shape[d] {
                return Err(Error::dim(format!(
                    "concat extent mismatch on axis {}: {:?} vs {:?}",
                    d,
                    parts[0].shape(),
                    p.shape()
                )));
            }
        }
        widths.push(p.shape()[axis]);
        out_shape[axis] += p.shape()[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total_width = out_shape[axis];
    let mut data = vec![S::zero(); numel_of(&out_shape)];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(widths.iter()) {
        let src = p.data();
        for o in 0..outer {
            let dst = (o * total_width + offset) * inner;
            let s = o * w * inner;
            data[dst..dst + w * inner].copy_from_slice(&src[s..s + w * inner]);
        }
        offset += w;
    }

    let tape = unify_tape(&parts.to_vec())?;
    let node = tape.map(|tape| {
        let attached: Vec<(usize, usize, usize)> = parts
            .iter()
            .enumerate()
            .filter_map(|(slot, p)| p.node().map(|n| (slot, n.idx, p.numel())))
            .collect();
        let parents: Vec<usize> = attached.iter().map(|&(_, idx, _)| idx).collect();
        let widths = widths.clone();
        let slots: Vec<(usize, usize)> = attached.iter().map(|&(s, _, n)| (s, n)).collect();
        let f: BackwardFn<S> = Box::new(move |up| {
            let offsets: Vec<usize> = widths
                .iter()
                .scan(0usize, |acc, &w| {
                    let o = *acc;
                    *acc += w;
                    Some(o)
                })
                .collect();
            slots
                .iter()
                .map(|&(slot, numel)| {
                    let w = widths[slot];
                    let off = offsets[slot];
                    let mut g = vec![S::zero(); numel];
                    for o in 0..outer {
                        let src = (o * total_width + off) * inner;
                        let dst = o * w * inner;
                        g[dst..dst + w * inner].copy_from_slice(&up[src..src + w * inner]);
                    }
                    Some(g)
                })
                .collect()
        });
        let idx = tape.push(parents, Some(f), numel_of(&out_shape));
        NodeRef { tape, idx }
    });
    Ok(TensorBase::from_parts(out_shape, data, node))
}

// ---------------------------------------------------------------------------
// column gather / scatter (for sparse voxel layouts)
// ---------------------------------------------------------------------------

/// Gather columns `idx` of a [C×N] tensor into [C×K].
pub fn gather_cols<S: Scalar>(src: &TensorBase<S>, idx: &[usize]) -> Result<TensorBase<S>> {
    let [c, n]: [usize; 2] = src
        .shape()
        .try_into()
        .map_err(|_| Error::dim(format!("gather_cols expects rank 2, got {:?}", src.shape())))?;
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::dim(format!("gather_cols index {} out of range {}", bad, n)));
    }
    let k = idx.len();
    let d = src.data();
    let mut data = vec![S::zero(); c * k];
    for row in 0..c {
        for (j, &i) in idx.iter().enumerate() {
            data[row * k + j] = d[row * n + i];
        }
    }
    let idx_owned = idx.to_vec();
    Ok(record1(src, vec![c, k], data, move |up| {
        let mut g = vec![S::zero(); c * n];
        for row in 0..c {
            for (j, &i) in idx_owned.iter().enumerate() {
                g[row * n + i] += up[row * k + j];
            }
        }
        g
    }))
}

/// Scatter columns of a [C×K] tensor into a zero-initialized [C×N] tensor.
/// Indices must be unique.
pub fn scatter_cols<S: Scalar>(src: &TensorBase<S>, idx: &[usize], n: usize) -> Result<TensorBase<S>> {
    let [c, k]: [usize; 2] = src
        .shape()
        .try_into()
        .map_err(|_| Error::dim(format!("scatter_cols expects rank 2, got {:?}", src.shape())))?;
    if idx.len() != k {
        return Err(Error::dim(format!("scatter_cols got {} indices for {} columns", idx.len(), k)));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::dim(format!("scatter_cols index {} out of range {}", bad, n)));
    }
    let d = src.data();
    let mut data = vec![S::zero(); c * n];
    for row in 0..c {
        for (j, &i) in idx.iter().enumerate() {
            data[row * n + i] = d[row * k + j];
        }
    }
    let idx_owned = idx.to_vec();
    Ok(record1(src, vec![c, n], data, move |up| {
        let mut g = vec![S::zero(); c * k];
        for row in 0..c {
            for (j, &i) in idx_owned.iter().enumerate() {
                g[row * k + j] = up[row * n + i];
            }
        }
        g
    }))
}

// ---------------------------------------------------------------------------
// masked softmax / cross-entropy over the leading axis
// ---------------------------------------------------------------------------

/// Column-wise softmax over the leading axis of a [V×N] tensor, restricted to
/// entries where `valid[v*N + j]` holds. Invalid entries get weight zero; a
/// column with no valid entry is all-zero.
pub fn masked_softmax_cols<S: Scalar>(scores: &TensorBase<S>, valid: &[bool]) -> Result<TensorBase<S>> {
    let [v, n]: [usize; 2] = scores
        .shape()
        .try_into()
        .map_err(|_| Error::dim(format!("masked_softmax_cols expects rank 2, got {:?}", scores.shape())))?;
    if valid.len() != v * n {
        return Err(Error::dim("mask length mismatch in masked_softmax_cols"));
    }
    let z = scores.data();
    let mut data = vec![S::zero(); v * n];
    for j in 0..n {
        let mut mx = S::neg_infinity();
        for i in 0..v {
            if valid[i * n + j] && z[i * n + j] > mx {
                mx = z[i * n + j];
            }
        }
        if mx == S::neg_infinity() {
            continue;
        }
        let mut denom = S::zero();
        for i in 0..v {
            if valid[i * n + j] {
                let e = (z[i * n + j] - mx).exp();
                data[i * n + j] = e;
                denom += e;
            }
        }
        for i in 0..v {
            if valid[i * n + j] {
                data[i * n + j] /= denom;
            }
        }
    }
    let soft = Rc::new(data.clone());
    let valid_owned: Rc<Vec<bool>> = Rc::new(valid.to_vec());
    Ok(record1(scores, vec![v, n], data, move |up| {
        // per column: g_i = s_i (up_i − Σ_j up_j s_j)
        let mut g = vec![S::zero(); v * n];
        for j in 0..n {
            let mut dot = S::zero();
            for i in 0..v {
                if valid_owned[i * n + j] {
                    dot += up[i * n + j] * soft[i * n + j];
                }
            }
            for i in 0..v {
                if valid_owned[i * n + j] {
                    g[i * n + j] = soft[i * n + j] * (up[i * n + j] - dot);
                }
            }
        }
        g
    }))
}

/// Mean cross-entropy between softmax(scores) and fixed target distributions,
/// column-wise over the leading axis; restricted to valid entries and to
/// supervised columns. Targets must sum to 1 over the valid entries of each
/// supervised column.
pub fn cross_entropy_cols<S: Scalar>(
    scores: &TensorBase<S>,
    targets: &[S],
    valid: &[bool],
    supervised: &[bool],
) -> Result<TensorBase<S>> {
    let [v, n]: [usize; 2] = scores
        .shape()
        .try_into()
        .map_err(|_| Error::dim(format!("cross_entropy_cols expects rank 2, got {:?}", scores.shape())))?;
    if targets.len() != v * n || valid.len() != v * n || supervised.len() != n {
        return Err(Error::dim("target/mask length mismatch in cross_entropy_cols"));
    }
    let n_sup = supervised.iter().filter(|&&s| s).count();
    if n_sup == 0 {
        return Err(Error::eval("cross_entropy_cols with no supervised columns"));
    }
    let z = scores.data();
    let mut total = S::zero();
    let mut softmax = vec![S::zero(); v * n];
    for j in 0..n {
        if !supervised[j] {
            continue;
        }
        let mut mx = S::neg_infinity();
        for i in 0..v {
            if valid[i * n + j] && z[i * n + j] > mx {
                mx = z[i * n + j];
            }
        }
        if mx == S::neg_infinity() {
            return Err(Error::eval("supervised column has no valid entries"));
        }
        let mut denom = S::zero();
        for i in 0..v {
            if valid[i * n + j] {
                let e = (z[i * n + j] - mx).exp();
                softmax[i * n + j] = e;
                denom += e;
            }
        }
        let lse = mx + denom.ln();
        let mut ce = S::zero();
        for i in 0..v {
            if valid[i * n + j] {
                softmax[i * n + j] /= denom;
                let t = targets[i * n + j];
                if t != S::zero() {
                    ce += t * (lse - z[i * n + j]);
                }
            }
        }
        total += ce;
    }
    let mean = total / S::from_f64(n_sup as f64);
    let soft = Rc::new(softmax);
    let tgt: Rc<Vec<S>> = Rc::new(targets.to_vec());
    let val: Rc<Vec<bool>> = Rc::new(valid.to_vec());
    let sup: Rc<Vec<bool>> = Rc::new(supervised.to_vec());
    Ok(record1(scores, vec![], vec![mean], move |up| {
        let scale = up[0] / S::from_f64(n_sup as f64);
        let mut g = vec![S::zero(); v * n];
        for j in 0..n {
            if !sup[j] {
                continue;
            }
            for i in 0..v {
                if val[i * n + j] {
                    g[i * n + j] = scale * (soft[i * n + j] - tgt[i * n + j]);
                }
            }
        }
        g
    }))
}

// ---------------------------------------------------------------------------
// im2col (convolution support)
// ---------------------------------------------------------------------------

/// Unfold a [C×H×W] tensor into [C·k·k × H'·W'] patch columns for a k×k
/// convolution with the given stride and zero padding.
pub fn im2col<S: Scalar>(
    input: &TensorBase<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<TensorBase<S>> {
    let [c, h, w]: [usize; 3] = input
        .shape()
        .try_into()
        .map_err(|_| Error::dim(format!("im2col expects rank 3, got {:?}", input.shape())))?;
    if k == 0 || stride == 0 {
        return Err(Error::arg("im2col kernel/stride must be positive"));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::dim("im2col kernel larger than padded input"));
    }
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let cols = out_h * out_w;
    let rows = c * k * k;
    let src = input.data();
    // map[row*cols + col] = source index + 1, or 0 for padding
    let mut map = vec![0usize; rows * cols];
    let mut data = vec![S::zero(); rows * cols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let col = oy * out_w + ox;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            let s = (ci * h + iy as usize) * w + ix as usize;
                            map[row * cols + col] = s + 1;
                            data[row * cols + col] = src[s];
                        }
                    }
                }
            }
        }
    }
    let numel = input.numel();
    let map = Rc::new(map);
    Ok(record1(input, vec![rows, cols], data, move |up| {
        let mut g = vec![S::zero(); numel];
        for (pos, &m) in map.iter().enumerate() {
            if m > 0 {
                g[m - 1] += up[pos];
            }
        }
        g
    }))
}
