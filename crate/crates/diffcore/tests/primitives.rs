//! Finite-difference checks for every primitive, plus determinism.

use diffcore::{grad_check, Result, SeededRng, Tape, Tensor, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: usize = 100;

/// Random point with entries in `[lo, hi)`.
fn point(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    rng.uniform_tensor(shape, lo, hi)
}

/// Weighted sum so that every output coordinate contributes a distinct gradient.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = SeededRng::new(seed).uniform_tensor(&shape, -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn sweep(name: &str, shape: &[usize], lo: f64, hi: f64, tol: f64, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let mut rng = SeededRng::new(name.len() as u64 * 7919);
    let mut worst = 0.0f64;
    for i in 0..POINTS {
        let p = point(&mut rng, shape, lo, hi);
        let err = grad_check(|t, x| {
            let y = f(t, x)?;
            probe(t, y, i as u64)
        }, &p, STEP)
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(err);
    }
    assert!(worst < tol, "{name}: worst relative error {worst:e}");
}

#[test]
fn elementwise_unary() {
    sweep("relu", &[3, 4], -2.0, 2.0, TOL, |t, x| Ok(t.relu(x)));
    sweep("tanh", &[3, 4], -3.0, 3.0, TOL, |t, x| Ok(t.tanh(x)));
    sweep("exp", &[3, 4], -2.0, 2.0, TOL, |t, x| Ok(t.exp(x)));
    sweep("log", &[3, 4], 0.1, 3.0, TOL, |t, x| Ok(t.log(x)));
    sweep("sqrt", &[3, 4], 0.1, 3.0, TOL, |t, x| Ok(t.sqrt(x)));
    sweep("square", &[5], -3.0, 3.0, TOL, |t, x| Ok(t.square(x)));
    sweep("scale", &[5], -3.0, 3.0, TOL, |t, x| Ok(t.scale(x, -2.5)));
    sweep("neg", &[5], -3.0, 3.0, TOL, |t, x| Ok(t.neg(x)));
    sweep("add_scalar", &[5], -3.0, 3.0, TOL, |t, x| Ok(t.add_scalar(x, 0.7)));
}

#[test]
fn singular_boundary_ops() {
    // at least 1e-3 away from |x| = 1
    sweep("atanh", &[6], -0.999, 0.999, 1e-3, |t, x| Ok(t.atanh(x)));
    sweep("atanh_interior", &[6], -0.9, 0.9, TOL, |t, x| Ok(t.atanh(x)));
    sweep("acosh", &[6], 1.001, 5.0, 1e-3, |t, x| Ok(t.acosh(x)));
    sweep("acosh_interior", &[6], 1.1, 5.0, TOL, |t, x| Ok(t.acosh(x)));
}

#[test]
fn binary_broadcasting() {
    let other = |rng: u64, shape: &[usize]| SeededRng::new(rng).uniform_tensor(shape, 0.5, 2.0);
    for (name, shape) in [("same", vec![3, 4]), ("row", vec![1, 4]), ("col", vec![3, 1]), ("scalar", vec![1])] {
        let o = other(1, &shape);
        sweep(&format!("add_{name}"), &[3, 4], -2.0, 2.0, TOL, |t, x| {
            let c = t.param(o.clone());
            t.add(x, c)
        });
        sweep(&format!("sub_{name}"), &[3, 4], -2.0, 2.0, TOL, |t, x| {
            let c = t.param(o.clone());
            t.sub(c, x)
        });
        sweep(&format!("mul_{name}"), &[3, 4], -2.0, 2.0, TOL, |t, x| {
            let c = t.param(o.clone());
            t.mul(x, c)
        });
        sweep(&format!("div_{name}"), &[3, 4], -2.0, 2.0, TOL, |t, x| {
            let c = t.param(o.clone());
            t.div(x, c)
        });
        // gradient into the broadcast operand
        let full = other(2, &[3, 4]);
        sweep(&format!("div_rhs_{name}"), &shape, 0.5, 2.0, TOL, |t, x| {
            let c = t.param(full.clone());
            t.div(c, x)
        });
        sweep(&format!("mul_rhs_{name}"), &shape, -2.0, 2.0, TOL, |t, x| {
            let c = t.param(full.clone());
            t.mul(c, x)
        });
    }
}

#[test]
fn minimum_away_from_ties() {
    let o = SeededRng::new(5).uniform_tensor(&[4, 3], -1.0, 1.0);
    sweep("minimum", &[4, 3], -1.0, 1.0, TOL, |t, x| {
        let c = t.constant(o.clone());
        t.minimum(x, c)
    });
}

#[test]
fn matmul_and_linear_algebra() {
    let b = SeededRng::new(9).uniform_tensor(&[4, 5], -1.0, 1.0);
    sweep("matmul_lhs", &[3, 4], -1.0, 1.0, TOL, |t, x| {
        let c = t.constant(b.clone());
        t.matmul(x, c)
    });
    let a = SeededRng::new(10).uniform_tensor(&[3, 4], -1.0, 1.0);
    sweep("matmul_rhs", &[4, 5], -1.0, 1.0, TOL, |t, x| {
        let c = t.constant(a.clone());
        t.matmul(c, x)
    });
    let bt = SeededRng::new(11).uniform_tensor(&[6, 4], -1.0, 1.0);
    sweep("matmul_nt_lhs", &[3, 4], -1.0, 1.0, TOL, |t, x| {
        let c = t.constant(bt.clone());
        t.matmul_nt(x, c)
    });
    sweep("matmul_nt_rhs", &[6, 4], -1.0, 1.0, TOL, |t, x| {
        let c = t.constant(a.clone());
        t.matmul_nt(c, x)
    });
}

#[test]
fn sum_of_matmul_matches_finite_differences() {
    // loss = sum(A B), both operands differentiated, step 1e-5
    let b = SeededRng::new(21).uniform_tensor(&[4, 2], -1.0, 1.0);
    let a = SeededRng::new(22).uniform_tensor(&[3, 4], -1.0, 1.0);
    let ea = grad_check(|t, x| {
        let c = t.constant(b.clone());
        let m = t.matmul(x, c)?;
        Ok(t.sum(m))
    }, &a, 1e-5)
    .unwrap();
    let eb = grad_check(|t, x| {
        let c = t.constant(a.clone());
        let m = t.matmul(c, x)?;
        Ok(t.sum(m))
    }, &b, 1e-5)
    .unwrap();
    assert!(ea < 1e-4 && eb < 1e-4, "{ea} {eb}");
}

#[test]
fn convolution_and_upsampling() {
    let w = SeededRng::new(12).uniform_tensor(&[3 * 2, 3], -1.0, 1.0);
    for stride in [1, 2] {
        sweep(&format!("conv1d_x_s{stride}"), &[2 * 8, 2], -1.0, 1.0, TOL, |t, x| {
            let c = t.constant(w.clone());
            t.conv1d(x, c, 2, 3, stride)
        });
        let xin = SeededRng::new(13).uniform_tensor(&[2 * 8, 2], -1.0, 1.0);
        sweep(&format!("conv1d_w_s{stride}"), &[6, 3], -1.0, 1.0, TOL, |t, x| {
            let c = t.constant(xin.clone());
            t.conv1d(c, x, 2, 3, stride)
        });
    }
    sweep("upsample", &[2 * 4, 3], -1.0, 1.0, TOL, |t, x| t.upsample(x, 2));
}

#[test]
fn conv1d_matches_direct_definition() {
    let mut rng = SeededRng::new(77);
    let (batch, t_in, cin, cout, k) = (2, 8, 3, 2, 3);
    let x = rng.uniform_tensor(&[batch * t_in, cin], -1.0, 1.0);
    let w = rng.uniform_tensor(&[k * cin, cout], -1.0, 1.0);
    for stride in [1usize, 2] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv1d(xv, wv, batch, k, stride).unwrap();
        let t_out = t_in / stride;
        assert_eq!(tape.value(y).shape(), &[batch * t_out, cout]);
        for b in 0..batch {
            for to in 0..t_out {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for tap in 0..k {
                        let ti = (to * stride + tap) as isize - 1;
                        if ti < 0 || ti >= t_in as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[(b * t_in + ti as usize) * cin + ci] * w.data()[(tap * cin + ci) * cout + co];
                        }
                    }
                    let got = tape.value(y).data()[(b * t_out + to) * cout + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn reductions_and_normalizers() {
    sweep("sum", &[3, 4], -1.0, 1.0, TOL, |t, x| Ok(t.sum(x)));
    sweep("mean", &[3, 4], -1.0, 1.0, TOL, |t, x| Ok(t.mean(x)));
    sweep("sum_axis0", &[3, 4], -1.0, 1.0, TOL, |t, x| t.sum_axis(x, 0));
    sweep("sum_axis1", &[2, 3, 4], -1.0, 1.0, TOL, |t, x| t.sum_axis(x, 1));
    sweep("norm_rows", &[3, 4], -1.0, 1.0, TOL, |t, x| t.norm_rows(x));
    sweep("softmax_rows", &[3, 5], -2.0, 2.0, TOL, |t, x| Ok(t.softmax_rows(x)));
    sweep("log_softmax_rows", &[3, 5], -2.0, 2.0, TOL, |t, x| Ok(t.log_softmax_rows(x)));
    let g = SeededRng::new(14).uniform_tensor(&[5], 0.5, 1.5);
    let b = SeededRng::new(15).uniform_tensor(&[5], -0.5, 0.5);
    sweep("layer_norm_x", &[3, 5], -2.0, 2.0, TOL, |t, x| {
        let gg = t.constant(g.clone());
        let bb = t.constant(b.clone());
        t.layer_norm(x, gg, bb)
    });
    let xin = SeededRng::new(16).uniform_tensor(&[3, 5], -2.0, 2.0);
    sweep("layer_norm_gamma", &[5], 0.5, 1.5, TOL, |t, x| {
        let xx = t.constant(xin.clone());
        let bb = t.constant(b.clone());
        t.layer_norm(xx, x, bb)
    });
}

#[test]
fn indexing_and_reshaping() {
    sweep("gather_rows", &[4, 3], -1.0, 1.0, TOL, |t, x| t.gather_rows(x, &[2, 0, 2, 3]));
    sweep("slice_cols", &[4, 6], -1.0, 1.0, TOL, |t, x| t.slice_cols(x, 2, 5));
    sweep("slice_rows", &[4, 6], -1.0, 1.0, TOL, |t, x| t.slice_rows(x, 1, 3));
    sweep("concat_rows", &[2, 3], -1.0, 1.0, TOL, |t, x| {
        let s = t.square(x);
        t.concat_rows(&[x, s, x])
    });
    sweep("concat_cols", &[2, 3], -1.0, 1.0, TOL, |t, x| {
        let s = t.square(x);
        t.concat_cols(&[s, x])
    });
    sweep("reshape", &[2, 6], -1.0, 1.0, TOL, |t, x| t.reshape(x, vec![3, 4]));
    sweep("sort_desc", &[7], -1.0, 1.0, TOL, |t, x| Ok(t.sort_desc(x)?.0));
    sweep("gather", &[5], -1.0, 1.0, TOL, |t, x| t.gather(x, vec![4, 4, 0], vec![3]));
}

#[test]
fn smooth_l1_and_attention() {
    let target = SeededRng::new(17).uniform_tensor(&[3, 4], -2.0, 2.0);
    sweep("smooth_l1", &[3, 4], -3.0, 3.0, TOL, |t, x| {
        let c = t.constant(target.clone());
        t.smooth_l1(x, c)
    });
    let k = SeededRng::new(18).uniform_tensor(&[7, 4], -1.0, 1.0);
    let v = SeededRng::new(19).uniform_tensor(&[7, 4], -1.0, 1.0);
    sweep("attention_q", &[7, 4], -1.0, 1.0, TOL, |t, x| {
        let kk = t.constant(k.clone());
        let vv = t.constant(v.clone());
        t.causal_attention(x, kk, vv, &[3, 4], 2)
    });
    sweep("attention_kv", &[7, 4], -1.0, 1.0, TOL, |t, x| {
        let qq = t.constant(k.clone());
        t.causal_attention(qq, x, x, &[4, 3], 2)
    });
}

#[test]
fn backward_twice_is_bit_identical() {
    let mut rng = SeededRng::new(31);
    let a = rng.uniform_tensor(&[4, 6], -1.0, 1.0);
    let w = rng.uniform_tensor(&[6, 3], -1.0, 1.0);
    let build = |t: &mut Tape| -> (Var, Var, Var) {
        let x = t.param(a.clone());
        let ww = t.param(w.clone());
        let h = t.matmul(x, ww).unwrap();
        let h = t.tanh(h);
        let s = t.log_softmax_rows(h);
        let l = t.mean(s);
        (x, ww, l)
    };
    let mut t1 = Tape::new();
    let (x1, w1, l1) = build(&mut t1);
    let g1 = t1.backward(l1).unwrap();
    let g1b = t1.backward(l1).unwrap();
    let mut t2 = Tape::new();
    let (x2, w2, l2) = build(&mut t2);
    let g2 = t2.backward(l2).unwrap();
    for (ga, gb) in [(g1.get(x1), g2.get(x2)), (g1.get(w1), g2.get(w2)), (g1.get(x1), g1b.get(x1))] {
        assert!(ga.unwrap().bit_eq(gb.unwrap()));
    }
}

#[test]
fn stop_gradient_branch_leaves_get_nothing() {
    let mut t = Tape::new();
    let a = t.param(Tensor::from_vec(vec![1.0, 2.0]));
    let b = t.param(Tensor::from_vec(vec![3.0, 4.0]));
    let sa = t.stop_gradient(a);
    let e = t.exp(sa);
    let p = t.mul(e, b).unwrap();
    let l = t.sum(p);
    let g = t.backward(l).unwrap();
    assert!(g.get(a).is_none());
    assert!(g.get(b).is_some());
}

proptest! {
    #[test]
    fn sort_matches_reference(xs in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(xs.clone()));
        let (s, perm) = t.sort_desc(x).unwrap();
        let mut want = xs.clone();
        want.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(t.value(s).data(), &want[..]);
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(xs[p], want[i]);
        }
        // gradient of sorted[i] lands on perm[i]
        let w: Vec<f64> = (0..xs.len()).map(|i| i as f64 + 1.0).collect();
        let wv = t.constant(Tensor::from_vec(w.clone()));
        let p = t.mul(s, wv).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        let gx = g.get(x).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(gx.data()[p], w[i]);
        }
    }
}
