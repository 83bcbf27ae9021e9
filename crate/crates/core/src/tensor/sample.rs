//! Bilinear sampling of feature planes at normalized coordinates.

use std::rc::Rc;

use super::ops::record2;
use super::TensorBase;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maps a normalized coordinate in [-1, 1] to pixel space [0, extent-1].
/// Degenerate extent 1 collapses to the single sample at 0.
#[inline]
fn unnormalize<S: Scalar>(v: S, extent: usize) -> S {
    (v + S::one()) * S::from_f64(0.5) * S::from_f64((extent - 1) as f64)
}

impl<S: Scalar> TensorBase<S> {
    /// Sample a [C×H×W] feature plane at K normalized (x, y) coordinates,
    /// returning [C×K]. Samples outside the plane are zero-padded; the result
    /// is differentiable with respect to both the features and the coords.
    pub fn bilinear_sample(&self, coords: &TensorBase<S>) -> Result<TensorBase<S>> {
        let [c, h, w]: [usize; 3] = self
            .shape()
            .try_into()
            .map_err(|_| Error::dim(format!("bilinear_sample expects [C,H,W] features, got {:?}", self.shape())))?;
        let k = match coords.shape() {
            [k, 2] => *k,
            other => {
                return Err(Error::dim(format!(
                    "bilinear_sample expects [K,2] coords, got {:?}",
                    other
                )))
            }
        };
        if !coords.is_finite() {
            return Err(Error::numeric("bilinear_sample coords are non-finite"));
        }

        let feat = self.data();
        let cd = coords.data();
        let mut out = vec![S::zero(); c * k];
        // Per-sample corner info reused by both backward closures:
        // (x0, y0, tx, ty) with corner validity derived on the fly.
        let mut corners = Vec::with_capacity(k);
        for s in 0..k {
            let xf = unnormalize(cd[s * 2], w);
            let yf = unnormalize(cd[s * 2 + 1], h);
            let x0 = xf.floor();
            let y0 = yf.floor();
            let tx = xf - x0;
            let ty = yf - y0;
            let xi = x0.to_f64() as i64;
            let yi = y0.to_f64() as i64;
            corners.push((xi, yi, tx, ty));
            let val = |x: i64, y: i64, ch: usize| -> S {
                if x >= 0 && (x as usize) < w && y >= 0 && (y as usize) < h {
                    feat[(ch * h + y as usize) * w + x as usize]
                } else {
                    S::zero()
                }
            };
            let one = S::one();
            for ch in 0..c {
                let v = val(xi, yi, ch) * (one - tx) * (one - ty)
                    + val(xi + 1, yi, ch) * tx * (one - ty)
                    + val(xi, yi + 1, ch) * (one - tx) * ty
                    + val(xi + 1, yi + 1, ch) * tx * ty;
                out[ch * k + s] = v;
            }
        }

        let corners = Rc::new(corners);
        let feat_rc = self.data_rc();
        let corners_b = Rc::clone(&corners);
        let feat_b = Rc::clone(&feat_rc);
        record2(self, coords, vec![c, k], out, move |up, need_feat, need_coords| {
            let one = S::one();
            let gf = need_feat.then(|| {
                let mut g = vec![S::zero(); c * h * w];
                for (s, &(xi, yi, tx, ty)) in corners_b.iter().enumerate() {
                    let mut add = |x: i64, y: i64, wgt: S| {
                        if x >= 0 && (x as usize) < w && y >= 0 && (y as usize) < h {
                            for ch in 0..c {
                                g[(ch * h + y as usize) * w + x as usize] += up[ch * k + s] * wgt;
                            }
                        }
                    };
                    add(xi, yi, (one - tx) * (one - ty));
                    add(xi + 1, yi, tx * (one - ty));
                    add(xi, yi + 1, (one - tx) * ty);
                    add(xi + 1, yi + 1, tx * ty);
                }
                g
            });
            let gc = need_coords.then(|| {
                let mut g = vec![S::zero(); 2 * k];
                let dx_scale = S::from_f64(0.5) * S::from_f64((w - 1) as f64);
                let dy_scale = S::from_f64(0.5) * S::from_f64((h - 1) as f64);
                for (s, &(xi, yi, tx, ty)) in corners.iter().enumerate() {
                    let val = |x: i64, y: i64, ch: usize| -> S {
                        if x >= 0 && (x as usize) < w && y >= 0 && (y as usize) < h {
                            feat_b[(ch * h + y as usize) * w + x as usize]
                        } else {
                            S::zero()
                        }
                    };
                    let mut gx = S::zero();
                    let mut gy = S::zero();
                    for ch in 0..c {
                        let f00 = val(xi, yi, ch);
                        let f10 = val(xi + 1, yi, ch);
                        let f01 = val(xi, yi + 1, ch);
                        let f11 = val(xi + 1, yi + 1, ch);
                        let u = up[ch * k + s];
                        // d out / d xf and d out / d yf
                        gx += u * ((f10 - f00) * (one - ty) + (f11 - f01) * ty);
                        gy += u * ((f01 - f00) * (one - tx) + (f11 - f10) * tx);
                    }
                    g[s * 2] = gx * dx_scale;
                    g[s * 2 + 1] = gy * dy_scale;
                }
                g
            });
            (gf, gc)
        })
    }
}
