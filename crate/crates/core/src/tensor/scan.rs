//! Linear state-space recurrence over a sequence, with exact
//! backprop-through-time.

use std::rc::Rc;

use super::tape::{unify_tape, BackwardFn};
use super::{NodeRef, TensorBase};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Runs h_t = Ā·h_{t-1} + B̄·x_t for t = 0..T (h_{-1} = h0) and returns all
/// states as rows of a [T×M] tensor. Equals the unrolled convolution form
/// Σ_{s≤t} Ā^{t−s} B̄ x_s + Ā^{t+1} h0.
pub fn scan_linear<S: Scalar>(
    a_bar: &TensorBase<S>,
    b_bar: &TensorBase<S>,
    x: &TensorBase<S>,
    h0: &TensorBase<S>,
) -> Result<TensorBase<S>> {
    let m = match a_bar.shape() {
        [m, m2] if m == m2 => *m,
        other => return Err(Error::dim(format!("scan_linear state matrix must be square, got {:?}", other))),
    };
    let c = match b_bar.shape() {
        [bm, c] if *bm == m => *c,
        other => {
            return Err(Error::dim(format!(
                "scan_linear input matrix must be [{m}×C], got {:?}",
                other
            )))
        }
    };
    let t_len = match x.shape() {
        [t, xc] if *xc == c => *t,
        other => {
            return Err(Error::dim(format!(
                "scan_linear sequence must be [T×{c}], got {:?}",
                other
            )))
        }
    };
    if h0.shape() != [m] {
        return Err(Error::dim(format!("scan_linear h0 must be [{m}], got {:?}", h0.shape())));
    }

    let a = a_bar.data();
    let b = b_bar.data();
    let xs = x.data();
    let h0d = h0.data();

    let mut states = vec![S::zero(); t_len * m];
    let mut prev: Vec<S> = h0d.to_vec();
    for t in 0..t_len {
        let row = &mut states[t * m..(t + 1) * m];
        for i in 0..m {
            let mut acc = S::zero();
            let arow = &a[i * m..(i + 1) * m];
            for j in 0..m {
                acc += arow[j] * prev[j];
            }
            let brow = &b[i * c..(i + 1) * c];
            let xrow = &xs[t * c..(t + 1) * c];
            for j in 0..c {
                acc += brow[j] * xrow[j];
            }
            row[i] = acc;
        }
        prev.copy_from_slice(row);
    }

    let tape = unify_tape(&[a_bar, b_bar, x, h0])?;
    let node = tape.map(|tape| {
        let inputs = [a_bar.node(), b_bar.node(), x.node(), h0.node()];
        let need: Vec<bool> = inputs.iter().map(|n| n.is_some()).collect();
        let parents: Vec<usize> = inputs.iter().flatten().map(|n| n.idx).collect();
        let a = a_bar.data_rc();
        let b = b_bar.data_rc();
        let xs = x.data_rc();
        let h0d = h0.data_rc();
        let states_rc: Rc<Vec<S>> = Rc::new(states.clone());
        let f: BackwardFn<S> = Box::new(move |up| {
            // λ_t = dL/dh_t = up_t + Āᵀ λ_{t+1}, walked backwards.
            let mut da = vec![S::zero(); m * m];
            let mut db = vec![S::zero(); m * c];
            let mut dx = vec![S::zero(); t_len * c];
            let mut lam = vec![S::zero(); m]; // holds Āᵀ λ_{t+1}
            let mut lam_t = vec![S::zero(); m];
            for t in (0..t_len).rev() {
                for i in 0..m {
                    lam_t[i] = lam[i] + up[t * m + i];
                }
                let h_prev: &[S] = if t == 0 { &h0d } else { &states_rc[(t - 1) * m..t * m] };
                let xrow = &xs[t * c..(t + 1) * c];
                for i in 0..m {
                    let li = lam_t[i];
                    if li != S::zero() {
                        let darow = &mut da[i * m..(i + 1) * m];
                        for j in 0..m {
                            darow[j] += li * h_prev[j];
                        }
                        let dbrow = &mut db[i * c..(i + 1) * c];
                        for j in 0..c {
                            dbrow[j] += li * xrow[j];
                        }
                    }
                }
                let dxrow = &mut dx[t * c..(t + 1) * c];
                for j in 0..c {
                    let mut acc = S::zero();
                    for i in 0..m {
                        acc += b[i * c + j] * lam_t[i];
                    }
                    dxrow[j] = acc;
                }
                // lam ← Āᵀ λ_t
                for j in 0..m {
                    let mut acc = S::zero();
                    for i in 0..m {
                        acc += a[i * m + j] * lam_t[i];
                    }
                    lam[j] = acc;
                }
            }
            let dh0 = lam; // Āᵀ λ_0
            let grads = [Some(da), Some(db), Some(dx), Some(dh0)];
            grads
                .into_iter()
                .zip(need.iter())
                .filter(|(_, &n)| n)
                .map(|(g, _)| g)
                .collect()
        });
        let idx = tape.push(parents, Some(f), t_len * m);
        NodeRef { tape, idx }
    });
    Ok(TensorBase::from_parts(vec![t_len, m], states, node))
}
