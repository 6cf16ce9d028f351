use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stella::numerics::{grad_check, Tape, Tensor, Var};
use stella::Result;

const POINTS: u64 = 10;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn weights(n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    Tensor::from_fn(&[n], |_| rng.gen_range(-1.0..1.0))
}

/// Random weighted sum of the output so every coordinate matters.
fn project<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let n = y.value().numel();
    let w = y.tape().constant(weights(n).reshape(&y.shape())?);
    Ok(y.mul(w)?.sum())
}

fn check<F>(name: &str, shape: &[usize], lo: f64, hi: f64, f: F)
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
        let r = grad_check(|v| project(f(v)?), &x, EPS, TOL).unwrap();
        assert!(r.passed(), "{name} at point {seed}: {r:?}");
    }
}

fn split<'t>(x: Var<'t>, n: usize) -> Result<(Var<'t>, Var<'t>)> {
    let len = x.shape()[0];
    Ok((x.slice(0, 0, n)?, x.slice(0, n, len - n)?))
}

#[test]
fn elementwise_binary_ops() {
    check("add", &[12], -2.0, 2.0, |x| {
        let (a, b) = split(x, 6)?;
        a.add(b)
    });
    check("sub", &[12], -2.0, 2.0, |x| {
        let (a, b) = split(x, 6)?;
        a.sub(b)
    });
    check("mul", &[12], -2.0, 2.0, |x| {
        let (a, b) = split(x, 6)?;
        a.mul(b)
    });
    check("div", &[12], 0.5, 2.0, |x| {
        let (a, b) = split(x, 6)?;
        a.div(b)
    });
}

#[test]
fn broadcasting_ops() {
    check("broadcast add", &[15], -2.0, 2.0, |x| {
        let (a, b) = split(x, 12)?;
        a.reshape(&[4, 3])?.add(b)
    });
    check("broadcast mul", &[16], -2.0, 2.0, |x| {
        let (a, b) = split(x, 12)?;
        a.reshape(&[3, 4])?.mul(b.reshape(&[1, 4])?)
    });
}

#[test]
fn unary_ops() {
    check("neg", &[7], -2.0, 2.0, |x| Ok(x.neg()));
    check("scale", &[7], -2.0, 2.0, |x| Ok(x.scale(-1.7)));
    check("add_scalar", &[7], -2.0, 2.0, |x| Ok(x.add_scalar(0.3).square()));
    check("square", &[7], -2.0, 2.0, |x| Ok(x.square()));
    check("sqrt", &[7], 0.2, 3.0, |x| x.sqrt());
    check("exp", &[7], -2.0, 2.0, |x| Ok(x.exp()));
    check("abs", &[7], 0.1, 2.0, |x| {
        let signs = x.tape().constant(Tensor::from_fn(&[7], |i| if i % 2 == 0 { 1.0 } else { -1.0 }));
        Ok(x.mul(signs)?.abs())
    });
    check("gelu", &[7], -3.0, 3.0, |x| Ok(x.gelu()));
    check("sigmoid", &[7], -3.0, 3.0, |x| Ok(x.sigmoid()));
    check("tanh", &[7], -3.0, 3.0, |x| Ok(x.tanh()));
}

#[test]
fn matmul_ops() {
    check("matmul", &[12 + 8], -1.0, 1.0, |x| {
        let (a, b) = split(x, 12)?;
        a.reshape(&[3, 4])?.matmul(b.reshape(&[4, 2])?)
    });
    check("batched matmul", &[24 + 16], -1.0, 1.0, |x| {
        let (a, b) = split(x, 24)?;
        a.reshape(&[2, 3, 4])?.matmul(b.reshape(&[2, 4, 2])?)
    });
    check("matmul_t", &[12 + 8], -1.0, 1.0, |x| {
        let (a, b) = split(x, 12)?;
        a.reshape(&[3, 4])?.matmul_t(b.reshape(&[2, 4])?)
    });
}

#[test]
fn reductions_and_softmax() {
    check("sum_axis", &[12], -2.0, 2.0, |x| x.reshape(&[3, 4])?.sum_axis(1)?.square().add(x.sum_axis(0)?));
    check("mean_axis", &[12], -2.0, 2.0, |x| Ok(x.reshape(&[2, 3, 2])?.mean_axis(1)?.square()));
    check("var_axis", &[12], -2.0, 2.0, |x| x.reshape(&[3, 4])?.var_axis(1));
    check("mean", &[12], -2.0, 2.0, |x| Ok(x.square().mean()));
    check("softmax", &[12], -3.0, 3.0, |x| x.reshape(&[3, 4])?.softmax(1));
    check("softmax axis 0", &[12], -3.0, 3.0, |x| x.reshape(&[3, 4])?.softmax(0));
}

#[test]
fn shape_ops() {
    check("permute", &[24], -1.0, 1.0, |x| Ok(x.reshape(&[2, 3, 4])?.permute(&[2, 0, 1])?.square()));
    check("transpose", &[12], -1.0, 1.0, |x| {
        let m = x.reshape(&[3, 4])?;
        m.transpose_last()?.matmul(m)
    });
    check("slice", &[12], -1.0, 1.0, |x| Ok(x.reshape(&[3, 4])?.slice(1, 1, 2)?.square()));
    check("concat", &[12], -1.0, 1.0, |x| {
        let (a, b) = split(x, 5)?;
        Ok(Var::concat(&[b, a.square(), b], 0)?.square())
    });
    check("gather_rows", &[12], -1.0, 1.0, |x| Ok(x.reshape(&[4, 3])?.gather_rows(&[3, 0, 3, 1])?.square()));
}

#[test]
fn convolution_ops() {
    // x [2,2,6], w [3,2,2], b [3]
    check("causal_conv", &[24 + 12 + 3], -1.0, 1.0, |v| {
        let x = v.slice(0, 0, 24)?.reshape(&[2, 2, 6])?;
        let w = v.slice(0, 24, 12)?.reshape(&[3, 2, 2])?;
        let b = v.slice(0, 36, 3)?;
        x.causal_conv1d(w, Some(b), 2)
    });
    // x [2,2,3], w [2,3,4], b [3]
    check("conv_transpose", &[12 + 24 + 3], -1.0, 1.0, |v| {
        let x = v.slice(0, 0, 12)?.reshape(&[2, 2, 3])?;
        let w = v.slice(0, 12, 24)?.reshape(&[2, 3, 4])?;
        let b = v.slice(0, 36, 3)?;
        x.conv_transpose1d(w, Some(b), 4)
    });
    check("depthwise", &[12 + 2 + 2], -1.0, 1.0, |v| {
        let x = v.slice(0, 0, 12)?.reshape(&[2, 2, 3])?;
        let w = v.slice(0, 12, 2)?;
        let b = v.slice(0, 14, 2)?;
        Ok(x.depthwise_conv1x1(w, b)?.square())
    });
}

#[test]
fn dropout_in_training_mode() {
    check("dropout", &[20], -1.0, 1.0, |x| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        Ok(x.dropout(0.3, true, &mut rng)?.square())
    });
}

#[test]
fn sum_of_squares_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[8], |_| rng.gen_range(-2.0..2.0));
    let r = grad_check(|v| Ok(v.square().sum()), &x, 1e-5, 1e-7).unwrap();
    assert!(r.max_relative_error < 1e-7, "{r:?}");
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_fn(&[6], |i| i as f64 * 0.7 - 1.0));
    let y = x.softmax(0).unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn non_finite_forward_is_rejected() {
    let x = Tensor::from_fn(&[2], |_| 1.0);
    assert!(grad_check(|v| Ok(v.scale(f64::INFINITY).sum()), &x, 1e-6, 1e-4).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], vals).unwrap());
        let s = x.softmax(1).unwrap().value();
        for r in 0..3 {
            let tot: f64 = (0..4).map(|c| s.at(&[r, c])).sum();
            prop_assert!((tot - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn causal_conv_ignores_later_inputs(vals in prop::collection::vec(-2.0f64..2.0, 16), t in 0usize..7, bump in -5.0f64..5.0) {
        let tape = Tape::new();
        let w = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| (i as f64 * 0.41).sin()));
        let x0 = Tensor::new(&[1, 2, 8], vals).unwrap();
        let mut x1 = x0.clone();
        for c in 0..2 {
            for p in (t + 1)..8 {
                let v = x1.at(&[0, c, p]);
                x1.set(&[0, c, p], v + bump);
            }
        }
        let y0 = tape.constant(x0).causal_conv1d(w, None, 2).unwrap().value();
        let y1 = tape.constant(x1).causal_conv1d(w, None, 2).unwrap().value();
        for c in 0..2 {
            for p in 0..=t {
                prop_assert_eq!(y0.at(&[0, c, p]).to_bits(), y1.at(&[0, c, p]).to_bits());
            }
        }
    }

    #[test]
    fn eval_dropout_is_identity(vals in prop::collection::vec(-2.0f64..2.0, 10), p in 0.0f64..0.9) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[10], vals).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = x.dropout(p, false, &mut rng).unwrap();
        prop_assert!(y.value().bit_eq(&x.value()));
        let z = x.dropout(0.0, true, &mut rng).unwrap();
        prop_assert!(z.value().bit_eq(&x.value()));
    }
}
