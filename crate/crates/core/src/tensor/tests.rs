//! Unit tests for the tensor kernel: hand-checked cases plus independent
//! oracles (finite differences, Taylor series, explicit convolution form).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::ops::{cross_entropy_cols, gather_cols, im2col, masked_softmax_cols, scatter_cols};
use super::*;
use crate::tensor::scan::scan_linear;

type T = TensorBase<f64>;
type Tape = TapeBase<f64>;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "expected {a} ≈ {b} within {tol}");
}

#[test]
fn constructor_rejects_shape_mismatch_and_nonfinite() {
    assert!(T::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    assert!(T::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
    assert!(T::from_vec(&[2], vec![1.0, f64::INFINITY]).is_err());
    assert!(T::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
}

#[test]
fn matmul_identity_and_hand_case() {
    let i3 = T::eye(3);
    let b = T::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let prod = i3.matmul(&b).unwrap();
    assert_eq!(prod.to_vec(), b.to_vec());

    let a = T::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let v = T::from_vec(&[2, 1], vec![0., 1.]).unwrap();
    let out = a.matmul(&v).unwrap();
    assert_eq!(out.to_vec(), vec![2., 4.]);

    assert!(a.matmul(&b).is_err(), "inner dimension mismatch must error");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(7);
    let a = T::randn(&[5, 7], 1.0, &mut r);
    let b = T::randn(&[7, 3], 1.0, &mut r);
    let err = grad_check(
        |_, p| Ok(p[0].matmul(&p[1])?.sum_all()),
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "matmul grad rel err {err}");
}

#[test]
fn matexp_zero_and_diagonal() {
    let z = T::zeros(&[4, 4]);
    let e = z.matexp().unwrap();
    assert!(e.max_abs_diff(&T::eye(4)) < 1e-15);

    let d = T::from_vec(&[2, 2], vec![2f64.ln(), 0., 0., 3f64.ln()]).unwrap();
    let e = d.matexp().unwrap();
    let expect = T::from_vec(&[2, 2], vec![2., 0., 0., 3.]).unwrap();
    assert!(e.max_abs_diff(&expect) < 1e-12);

    assert!(T::zeros(&[2, 3]).matexp().is_err(), "non-square must error");
}

/// 30-term Taylor series oracle, summed directly.
fn taylor_exp(a: &[f64], m: usize, terms: usize) -> Vec<f64> {
    let mut result = vec![0.0; m * m];
    for i in 0..m {
        result[i * m + i] = 1.0;
    }
    let mut term = result.clone();
    for k in 1..=terms {
        term = super::ops::matmul_raw(&term, a, m, m, m);
        for v in term.iter_mut() {
            *v /= k as f64;
        }
        for (r, t) in result.iter_mut().zip(term.iter()) {
            *r += t;
        }
    }
    result
}

#[test]
fn matexp_matches_taylor_oracle() {
    let mut r = rng(11);
    for _ in 0..10 {
        let a = T::rand_uniform(&[4, 4], -0.5, 0.5, &mut r);
        let e = a.matexp().unwrap();
        let oracle = taylor_exp(a.data(), 4, 30);
        let worst = e
            .data()
            .iter()
            .zip(oracle.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "matexp vs Taylor oracle diff {worst}");
    }
}

#[test]
fn matexp_inverse_property() {
    let mut r = rng(13);
    for _ in 0..5 {
        let a = T::rand_uniform(&[5, 5], -1.0, 1.0, &mut r);
        let e = a.matexp().unwrap();
        let einv = a.neg().matexp().unwrap();
        let prod = e.matmul(&einv).unwrap();
        assert!(prod.max_abs_diff(&T::eye(5)) < 1e-9, "exp(u)exp(−u) ≠ I");
    }
}

#[test]
fn matexp_gradient_matches_finite_differences() {
    let mut r = rng(17);
    let a = T::rand_uniform(&[3, 3], -0.8, 0.8, &mut r);
    let w = T::randn(&[3, 3], 1.0, &mut r);
    let err = grad_check(
        |_, p| Ok(p[0].matexp()?.mul(&p[1])?.sum_all()),
        &[a, w],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "matexp grad rel err {err}");
}

#[test]
fn scan_hand_unroll_and_memoryless() {
    // scalar Ā=0.5, B̄=1, x=[1,1,1], h0=0 → h=[1, 1.5, 1.75]
    let a = T::from_vec(&[1, 1], vec![0.5]).unwrap();
    let b = T::from_vec(&[1, 1], vec![1.0]).unwrap();
    let x = T::from_vec(&[3, 1], vec![1.0, 1.0, 1.0]).unwrap();
    let h0 = T::zeros(&[1]);
    let h = scan_linear(&a, &b, &x, &h0).unwrap();
    assert_eq!(h.to_vec(), vec![1.0, 1.5, 1.75]);

    // Ā = 0 → h_t = B̄ x_t
    let a0 = T::zeros(&[2, 2]);
    let mut r = rng(19);
    let b = T::randn(&[2, 3], 1.0, &mut r);
    let x = T::randn(&[5, 3], 1.0, &mut r);
    let h0 = T::randn(&[2], 1.0, &mut r);
    let h = scan_linear(&a0, &b, &x, &h0).unwrap();
    for t in 0..5 {
        for i in 0..2 {
            let mut expect = 0.0;
            for j in 0..3 {
                expect += b.at(&[i, j]) * x.at(&[t, j]);
            }
            assert_close(h.at(&[t, i]), expect, 1e-14);
        }
    }
}

/// Explicit convolution-form oracle: h_t = Σ_{s≤t} Ā^{t−s} B̄ x_s + Ā^{t+1} h0.
fn conv_form_oracle(a: &T, b: &T, x: &T, h0: &T) -> Vec<f64> {
    let m = a.shape()[0];
    let c = b.shape()[1];
    let t_len = x.shape()[0];
    // powers[p] = Ā^p
    let mut powers: Vec<Vec<f64>> = vec![T::eye(m).to_vec()];
    for p in 1..=t_len {
        powers.push(super::ops::matmul_raw(&powers[p - 1], a.data(), m, m, m));
    }
    let bx: Vec<Vec<f64>> = (0..t_len)
        .map(|s| {
            (0..m)
                .map(|i| (0..c).map(|j| b.at(&[i, j]) * x.at(&[s, j])).sum())
                .collect()
        })
        .collect();
    let mut out = vec![0.0; t_len * m];
    for t in 0..t_len {
        for i in 0..m {
            let mut acc = 0.0;
            for s in 0..=t {
                let pw = &powers[t - s];
                for j in 0..m {
                    acc += pw[i * m + j] * bx[s][j];
                }
            }
            let pw = &powers[t + 1];
            for j in 0..m {
                acc += pw[i * m + j] * h0.at(&[j]);
            }
            out[t * m + i] = acc;
        }
    }
    out
}

#[test]
fn scan_matches_convolution_form() {
    let mut r = rng(23);
    for m in [1usize, 4, 8] {
        // keep the spectral radius modest so high powers stay tame
        let a = T::rand_uniform(&[m, m], -0.4, 0.4, &mut r);
        let b = T::randn(&[m, 3], 1.0, &mut r);
        let x = T::randn(&[16, 3], 1.0, &mut r);
        let h0 = T::randn(&[m], 1.0, &mut r);
        let h = scan_linear(&a, &b, &x, &h0).unwrap();
        let oracle = conv_form_oracle(&a, &b, &x, &h0);
        let worst = h
            .data()
            .iter()
            .zip(oracle.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "scan vs convolution oracle diff {worst} at M={m}");
    }
}

#[test]
fn scan_gradient_matches_finite_differences() {
    let mut r = rng(29);
    let a = T::rand_uniform(&[3, 3], -0.4, 0.4, &mut r);
    let b = T::randn(&[3, 2], 1.0, &mut r);
    let x = T::randn(&[6, 2], 1.0, &mut r);
    let h0 = T::randn(&[3], 1.0, &mut r);
    let err = grad_check(
        |_, p| {
            let h = scan_linear(&p[0], &p[1], &p[2], &p[3])?;
            Ok(h.mul(&h)?.sum_all())
        },
        &[a, b, x, h0],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "scan grad rel err {err}");
}

#[test]
fn bilinear_grid_aligned_center_and_padding() {
    // 1 channel, 2×2 patch {0,1,2,3}
    let feat = T::from_vec(&[1, 2, 2], vec![0., 1., 2., 3.]).unwrap();
    let coords = T::from_vec(
        &[3, 2],
        vec![
            -1.0, -1.0, // pixel (0,0) → 0
            1.0, 1.0, // pixel (1,1) → 3
            0.0, 0.0, // center → 1.5
        ],
    )
    .unwrap();
    let out = feat.bilinear_sample(&coords).unwrap();
    assert_eq!(out.shape(), &[1, 3]);
    assert_close(out.at(&[0, 0]), 0.0, 1e-15);
    assert_close(out.at(&[0, 1]), 3.0, 1e-15);
    assert_close(out.at(&[0, 2]), 1.5, 1e-15);

    // x = 2.0 lands a full pixel beyond the right edge on a 3-wide plane:
    // every corner is out of bounds, so zero padding yields the zero vector.
    let feat3 = T::from_vec(&[2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
    let outside = T::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, -2.0]).unwrap();
    let out = feat3.bilinear_sample(&outside).unwrap();
    assert_eq!(out.to_vec(), vec![0.0; 4]);
}

#[test]
fn bilinear_exact_at_grid_points_and_linear_between() {
    let mut r = rng(31);
    let feat = T::randn(&[2, 4, 5], 1.0, &mut r);
    for i in 0..4 {
        for j in 0..5 {
            let xn = 2.0 * j as f64 / 4.0 - 1.0;
            let yn = 2.0 * i as f64 / 3.0 - 1.0;
            let coords = T::from_vec(&[1, 2], vec![xn, yn]).unwrap();
            let out = feat.bilinear_sample(&coords).unwrap();
            for c in 0..2 {
                assert_close(out.at(&[c, 0]), feat.at(&[c, i, j]), 1e-12);
            }
        }
    }
    // linearity along x between pixels (1,1) and (1,2)
    let y = 2.0 * 1.0 / 3.0 - 1.0;
    let x1 = 2.0 * 1.0 / 4.0 - 1.0;
    let x2 = 2.0 * 2.0 / 4.0 - 1.0;
    for &alpha in &[0.25, 0.5, 0.75] {
        let x = x1 + alpha * (x2 - x1);
        let coords = T::from_vec(&[1, 2], vec![x, y]).unwrap();
        let out = feat.bilinear_sample(&coords).unwrap();
        for c in 0..2 {
            let expect = (1.0 - alpha) * feat.at(&[c, 1, 1]) + alpha * feat.at(&[c, 1, 2]);
            assert_close(out.at(&[c, 0]), expect, 1e-12);
        }
    }
}

#[test]
fn bilinear_gradient_matches_finite_differences() {
    let mut r = rng(37);
    let feat = T::randn(&[2, 3, 4], 1.0, &mut r);
    // interior, non-integer sample positions so the FD step stays on one cell
    let coords = T::from_vec(&[3, 2], vec![-0.31, 0.22, 0.43, -0.57, 0.11, 0.66]).unwrap();
    let err = grad_check(
        |_, p| {
            let s = p[0].bilinear_sample(&p[1])?;
            Ok(s.mul(&s)?.sum_all())
        },
        &[feat, coords],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "bilinear grad rel err {err}");
}

#[test]
fn grad_check_quadratic_constant_and_composite() {
    // f(x) = Σx² at x = [1,2]: analytic [2,4]
    let x = T::from_vec(&[2], vec![1.0, 2.0]).unwrap();
    let err = grad_check(|_, p| Ok(p[0].mul(&p[0])?.sum_all()), &[x.clone()], 1e-5).unwrap();
    assert!(err < 1e-8, "quadratic rel err {err}");
    {
        let tape = Tape::new();
        let w = tape.watch(&x);
        let loss = w.mul(&w).unwrap().sum_all();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap().to_vec(), vec![2.0, 4.0]);
    }

    // constant function → zero gradient, zero error
    let err = grad_check(|_, _| T::scalar(3.5), &[x], 1e-5).unwrap();
    assert_eq!(err, 0.0);

    // softmax-cross-entropy composite
    let mut r = rng(41);
    let z = T::randn(&[3, 4], 1.0, &mut r);
    let targets = vec![
        0.5, 0.0, 1.0, 0.25, //
        0.25, 1.0, 0.0, 0.5, //
        0.25, 0.0, 0.0, 0.25,
    ];
    let valid = vec![true; 12];
    let supervised = vec![true; 4];
    let err = grad_check(
        |_, p| cross_entropy_cols(&p[0], &targets, &valid, &supervised),
        &[z],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "softmax-CE composite rel err {err}");
}

#[test]
fn broadcast_add_mul_and_backward() {
    let a = T::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let b = T::from_vec(&[3], vec![10., 20., 30.]).unwrap();
    let sum = a.add(&b).unwrap();
    assert_eq!(sum.to_vec(), vec![11., 22., 33., 14., 25., 36.]);

    let row = T::from_vec(&[1, 3], vec![2., 3., 4.]).unwrap();
    let prod = a.mul(&row).unwrap();
    assert_eq!(prod.to_vec(), vec![2., 6., 12., 8., 15., 24.]);

    let err = grad_check(
        |_, p| Ok(p[0].mul(&p[1])?.sum_all()),
        &[a, row],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);

    let bad = T::from_vec(&[4], vec![0.; 4]).unwrap();
    assert!(T::zeros(&[2, 3]).add(&bad).is_err());
}

#[test]
fn unary_op_gradients() {
    let mut r = rng(43);
    let x = T::randn(&[6], 0.8, &mut r);
    for (name, f) in [
        ("sigmoid", Box::new(|t: &T| t.sigmoid()) as Box<dyn Fn(&T) -> T>),
        ("tanh", Box::new(|t: &T| t.tanh())),
        ("exp", Box::new(|t: &T| t.exp())),
        ("softplus", Box::new(|t: &T| t.softplus())),
        ("gelu", Box::new(|t: &T| t.gelu())),
        ("scale", Box::new(|t: &T| t.scale(2.5))),
        ("neg", Box::new(|t: &T| t.neg())),
    ] {
        let err = grad_check(|_, p| Ok(f(&p[0]).sum_all()), &[x.clone()], 1e-6).unwrap();
        assert!(err < 1e-7, "{name} grad rel err {err}");
    }
    // ln needs positive input
    let pos = T::from_vec(&[3], vec![0.5, 1.5, 3.0]).unwrap();
    let err = grad_check(|_, p| Ok(p[0].ln().sum_all()), &[pos], 1e-6).unwrap();
    assert!(err < 1e-7, "ln grad rel err {err}");
    // abs away from the kink
    let off = T::from_vec(&[3], vec![-1.5, 0.5, 2.0]).unwrap();
    let err = grad_check(|_, p| Ok(p[0].abs().sum_all()), &[off], 1e-6).unwrap();
    assert!(err < 1e-8, "abs grad rel err {err}");
}

#[test]
fn shape_ops_roundtrip_gradients() {
    let mut r = rng(47);
    let x = T::randn(&[3, 4], 1.0, &mut r);
    let err = grad_check(
        |_, p| {
            let t = p[0].transpose()?;
            let s = t.slice(0, 1, 3)?;
            let f = s.flip(1)?;
            let rs = f.reshape(&[6])?;
            Ok(rs.mul(&rs)?.sum_all())
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);

    let x = T::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    assert_eq!(x.transpose().unwrap().to_vec(), vec![1., 3., 2., 4.]);
    assert_eq!(x.flip(0).unwrap().to_vec(), vec![3., 4., 1., 2.]);
    assert_eq!(x.slice(1, 0, 1).unwrap().to_vec(), vec![1., 3.]);
}

#[test]
fn concat_and_sum_axis() {
    let a = T::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = T::from_vec(&[2, 1], vec![5., 6.]).unwrap();
    let c = super::ops::concat(1, &[&a, &b]).unwrap();
    assert_eq!(c.shape(), &[2, 3]);
    assert_eq!(c.to_vec(), vec![1., 2., 5., 3., 4., 6.]);

    let s = c.sum_axis(1).unwrap();
    assert_eq!(s.to_vec(), vec![8., 13.]);

    let err = grad_check(
        |_, p| {
            let c = super::ops::concat(0, &[&p[0], &p[1]])?;
            Ok(c.mul(&c)?.sum_all())
        },
        &[T::from_vec(&[1, 3], vec![1., 2., 3.]).unwrap(), T::from_vec(&[2, 3], vec![4., 5., 6., 7., 8., 9.]).unwrap()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn gather_scatter_inverse_and_gradients() {
    let src = T::from_vec(&[2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
    let g = gather_cols(&src, &[3, 1]).unwrap();
    assert_eq!(g.to_vec(), vec![4., 2., 8., 6.]);
    let sc = scatter_cols(&g, &[3, 1], 4).unwrap();
    assert_eq!(sc.to_vec(), vec![0., 2., 0., 4., 0., 6., 0., 8.]);

    let err = grad_check(
        |_, p| {
            let g = gather_cols(&p[0], &[0, 2])?;
            let s = scatter_cols(&g, &[1, 0], 3)?;
            Ok(s.mul(&s)?.sum_all())
        },
        &[src],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn masked_softmax_simplex_and_gradient() {
    let mut r = rng(53);
    let scores = T::randn(&[3, 5], 1.0, &mut r);
    let valid = vec![
        true, true, false, true, false, //
        true, false, false, true, false, //
        false, true, false, true, false,
    ];
    let w = masked_softmax_cols(&scores, &valid).unwrap();
    for j in 0..5 {
        let col: f64 = (0..3).map(|i| w.at(&[i, j])).sum();
        let any_valid = (0..3).any(|i| valid[i * 5 + j]);
        if any_valid {
            assert_close(col, 1.0, 1e-12);
        } else {
            assert_eq!(col, 0.0, "empty column must be all-zero");
        }
        for i in 0..3 {
            assert!(w.at(&[i, j]) >= 0.0);
            if !valid[i * 5 + j] {
                assert_eq!(w.at(&[i, j]), 0.0);
            }
        }
    }
    let valid2 = valid.clone();
    let probe = T::randn(&[3, 5], 1.0, &mut r);
    let err = grad_check(
        |_, p| {
            let w = masked_softmax_cols(&p[0], &valid2)?;
            Ok(w.mul(&p[1])?.sum_all())
        },
        &[scores, probe],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "masked softmax grad rel err {err}");
}

#[test]
fn im2col_matches_direct_convolution() {
    let mut r = rng(59);
    let x = T::randn(&[2, 5, 6], 1.0, &mut r);
    let w = T::randn(&[3, 2 * 9], 1.0, &mut r);
    let col = im2col(&x, 3, 2, 1).unwrap();
    assert_eq!(col.shape(), &[18, 3 * 3]);
    let y = w.matmul(&col).unwrap();
    // direct conv oracle
    for oc in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0;
                for ic in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                acc += w.at(&[oc, (ic * 3 + ky) * 3 + kx])
                                    * x.at(&[ic, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                assert_close(y.at(&[oc, oy * 3 + ox]), acc, 1e-12);
            }
        }
    }
    let err = grad_check(
        |_, p| {
            let col = im2col(&p[0], 3, 2, 1)?;
            let y = p[1].matmul(&col)?;
            Ok(y.mul(&y)?.sum_all())
        },
        &[x, w],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6);
}

#[test]
fn tape_is_backward_once() {
    let tape = Tape::new();
    let x = tape.watch(&T::from_vec(&[2], vec![1., 2.]).unwrap());
    let loss = x.mul(&x).unwrap().sum_all();
    tape.backward(&loss).unwrap();
    assert!(tape.backward(&loss).is_err(), "second backward must fail");
}

#[test]
fn mixing_tapes_is_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.watch(&T::ones(&[2]));
    let b = t2.watch(&T::ones(&[2]));
    assert!(a.add(&b).is_err());
}

#[test]
fn autodiff_over_many_random_seeds() {
    // Composite expression exercising most ops, 100 seeds.
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let a = T::randn(&[3, 3], 0.5, &mut r);
        let b = T::randn(&[3, 2], 0.7, &mut r);
        let err = grad_check(
            |_, p| {
                let m = p[0].matmul(&p[1])?;
                let s = m.sigmoid().mul(&m.tanh())?;
                let g = s.gelu().add(&m.scale(0.3))?;
                Ok(g.mul(&g)?.mean_all())
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: rel err {err}");
    }
}

#[test]
fn f32_instantiation_works() {
    // The kernel is generic; spot-check a scan and a matmul at f32.
    let a = TensorBase::<f32>::from_vec(&[1, 1], vec![0.5]).unwrap();
    let b = TensorBase::<f32>::from_vec(&[1, 1], vec![1.0]).unwrap();
    let x = TensorBase::<f32>::from_vec(&[3, 1], vec![1.0, 1.0, 1.0]).unwrap();
    let h0 = TensorBase::<f32>::zeros(&[1]);
    let h = scan_linear(&a, &b, &x, &h0).unwrap();
    assert_eq!(h.to_vec(), vec![1.0f32, 1.5, 1.75]);

    let i2 = TensorBase::<f32>::eye(2);
    let m = TensorBase::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(i2.matmul(&m).unwrap().to_vec(), m.to_vec());
}
