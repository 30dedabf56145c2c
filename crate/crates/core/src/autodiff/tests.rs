use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn add_values_and_grads() {
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::row(&[1.0, 2.0])).unwrap();
    let b = s.add("b", Tensor::row(&[3.0, 4.0])).unwrap();
    let mut g = Graph::new();
    let (va, vb) = (g.param(&s, a), g.param(&s, b));
    let sum = g.add(va, vb).unwrap();
    assert_eq!(g.value(sum).data(), &[4.0, 6.0]);
    let root = g.sum(sum);
    let grads = g.backward(root).unwrap().for_store(&s);
    assert_eq!(grads[0].data(), &[1.0, 1.0]);
    assert_eq!(grads[1].data(), &[1.0, 1.0]);
}

#[test]
fn log_of_exp_is_identity_with_unit_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.5));
    let e = g.exp(x);
    let l = g.log(e).unwrap();
    assert!((g.value(l).item() - 0.5).abs() < 1e-15);
    let grads = g.backward(l).unwrap();
    assert!((grads.wrt(x).unwrap().item() - 1.0).abs() < 1e-15);
}

#[test]
fn tanh_gradient_at_origin() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.0));
    let t = g.tanh(x);
    let grads = g.backward(t).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 1.0);
}

#[test]
fn sum_and_mean_square_gradients() {
    let mut s = ParamStore::new();
    let p = s.add("p", Tensor::row(&[0.2, -3.0, 7.0])).unwrap();
    let mut g = Graph::new();
    let v = g.param(&s, p);
    let root = g.sum(v);
    assert_eq!(g.backward(root).unwrap().for_store(&s)[0].data(), &[1.0, 1.0, 1.0]);

    let mut s = ParamStore::new();
    let p = s.add("p", Tensor::row(&[1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let v = g.param(&s, p);
    let sq = g.square(v);
    let root = g.mean(sq);
    assert_eq!(g.backward(root).unwrap().for_store(&s)[0].data(), &[1.0, 2.0]);
}

#[test]
fn unreachable_parameters_get_zero() {
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::row(&[1.0, 2.0])).unwrap();
    s.add("unused", Tensor::zeros(2, 3)).unwrap();
    let mut g = Graph::new();
    let va = g.param(&s, a);
    let root = g.sum(va);
    let grads = g.backward(root).unwrap().for_store(&s);
    assert_eq!(grads[1], Tensor::zeros(2, 3));
}

#[test]
fn shape_errors_name_operation_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(3, 2));
    let err = g.add(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch {
            op: "add",
            lhs: (2, 3),
            rhs: (3, 2)
        }
    );
    assert!(matches!(g.matmul(a, a), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
    assert!(err.to_string().contains("add"));
}

#[test]
fn domain_errors() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::row(&[1.0, 0.0]));
    assert!(matches!(g.log(z), Err(AutodiffError::Domain { op: "log", .. })));
    let neg = g.constant(Tensor::row(&[-1.0]));
    assert!(matches!(g.log(neg), Err(AutodiffError::Domain { .. })));
    let one = g.constant(Tensor::row(&[1.0, 1.0]));
    assert!(matches!(g.div(one, z), Err(AutodiffError::Domain { op: "div", .. })));
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(&[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarRoot { rows: 1, cols: 2 })));
}

#[test]
fn constants_never_accumulate() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::row(&[1.0, 2.0]));
    let x = g.input(Tensor::row(&[3.0, 4.0]));
    let m = g.mul(c, x).unwrap();
    let root = g.sum(m);
    let grads = g.backward(root).unwrap();
    assert!(grads.wrt(c).is_none());
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn frozen_store_gets_no_gradient() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::row(&[2.0])).unwrap();
    let mut g = Graph::new();
    g.freeze(&s);
    let x = g.input(Tensor::row(&[3.0]));
    let vw = g.param(&s, w);
    let m = g.mul(vw, x).unwrap();
    let root = g.sum(m);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.for_store(&s)[0].data(), &[0.0]);
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 7.0);
}

#[test]
fn masked_weights_get_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    let w = s.add("w", rand_tensor(&mut rng, 4, 3, -1.0, 1.0)).unwrap();
    let mask = Arc::new(Tensor::new(4, 3, vec![1., 0., 1., 0., 0., 1., 1., 1., 0., 0., 1., 0.]).unwrap());
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, 5, 4, -1.0, 1.0));
    let vw = g.param(&s, w);
    let y = g.masked_matmul(x, vw, &mask).unwrap();
    let t = g.tanh(y);
    let root = g.sum(t);
    let gw = &g.backward(root).unwrap().for_store(&s)[0];
    for (gi, m) in gw.data().iter().zip(mask.data()) {
        if *m == 0.0 {
            assert_eq!(*gi, 0.0);
        } else {
            assert_ne!(*gi, 0.0);
        }
    }
}

#[test]
fn backward_twice_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = ParamStore::new();
    let w = s.add("w", rand_tensor(&mut rng, 3, 4, -1.0, 1.0)).unwrap();
    let xt = rand_tensor(&mut rng, 6, 3, -1.0, 1.0);
    let run = |s: &ParamStore| {
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let vw = g.param(s, w);
        let h = g.matmul(x, vw).unwrap();
        let t = g.sigmoid(h);
        let root = g.mean(t);
        g.backward(root).unwrap().for_store(s)
    };
    assert_eq!(run(&s), run(&s));
}

#[test]
fn set_sum_is_order_free_bitwise() {
    let rows = [[0.1, 1e16], [0.2, 1.0], [0.3, -1e16], [1e-17, 3.3]];
    let base = Tensor::from_rows(&rows).unwrap();
    let perm = Tensor::from_rows(&[rows[2], rows[0], rows[3], rows[1]]).unwrap();
    let mut g = Graph::no_grad();
    let a = g.constant(base);
    let b = g.constant(perm);
    let sa = g.set_sum(a, 4).unwrap();
    let sb = g.set_sum(b, 4).unwrap();
    assert_eq!(g.value(sa).data(), g.value(sb).data());
}

/// Every op, as a scalar loss over random parameters, checked against
/// central differences.
type OpCase = fn(&mut Graph, Var, Var) -> Result<Var, AutodiffError>;

fn op_cases() -> Vec<(&'static str, (usize, usize), (usize, usize), OpCase)> {
    vec![
        ("add", (3, 4), (1, 4), |g, a, b| g.add(a, b)),
        ("sub", (3, 4), (3, 1), |g, a, b| g.sub(a, b)),
        ("mul", (3, 4), (3, 4), |g, a, b| g.mul(a, b)),
        ("div", (3, 4), (1, 1), |g, a, b| g.div(a, b)),
        ("matmul", (3, 4), (4, 2), |g, a, b| g.matmul(a, b)),
        ("tanh", (3, 4), (3, 4), |g, a, b| {
            let t = g.tanh(a);
            g.mul(t, b)
        }),
        ("sigmoid", (3, 4), (3, 4), |g, a, b| {
            let t = g.sigmoid(a);
            g.mul(t, b)
        }),
        ("log_sigmoid", (3, 4), (3, 4), |g, a, b| {
            let t = g.log_sigmoid(a);
            g.mul(t, b)
        }),
        ("exp", (3, 4), (3, 4), |g, a, b| {
            let t = g.exp(a);
            g.mul(t, b)
        }),
        ("log", (3, 4), (3, 4), |g, a, b| {
            let sq = g.square(a);
            let pos = g.add_scalar(sq, 0.5);
            let t = g.log(pos)?;
            g.mul(t, b)
        }),
        ("square", (3, 4), (3, 4), |g, a, b| {
            let t = g.square(a);
            g.mul(t, b)
        }),
        ("mean", (3, 4), (3, 4), |g, a, b| {
            let m = g.mul(a, b)?;
            let s = g.mean(m);
            Ok(g.square(s))
        }),
        ("row_sum", (3, 4), (3, 1), |g, a, b| {
            let r = g.row_sum(a);
            let t = g.tanh(r);
            g.mul(t, b)
        }),
        ("concat", (3, 4), (3, 2), |g, a, b| {
            let c = g.concat(&[a, b, a])?;
            let t = g.tanh(c);
            Ok(g.square(t))
        }),
        ("slice", (3, 4), (3, 2), |g, a, b| {
            let s = g.slice(a, 1, 3)?;
            g.mul(s, b)
        }),
        ("permute_cols", (3, 4), (3, 4), |g, a, b| {
            let p = g.permute_cols(a, &Arc::new(vec![2, 0, 3, 1]))?;
            g.mul(p, b)
        }),
        ("masked_matmul", (3, 4), (4, 2), |g, a, b| {
            let mask = Arc::new(Tensor::new(4, 2, vec![1., 0., 1., 1., 0., 1., 1., 0.]).unwrap());
            g.masked_matmul(a, b, &mask)
        }),
        ("set_sum", (4, 3), (2, 3), |g, a, b| {
            let s = g.set_sum(a, 2)?;
            let t = g.tanh(s);
            g.mul(t, b)
        }),
        ("neg_scale", (3, 4), (3, 4), |g, a, b| {
            let n = g.neg(a);
            let s = g.scale(n, 2.5);
            g.mul(s, b)
        }),
    ]
}

#[test]
fn every_op_matches_finite_differences_over_random_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, sa, sb, f) in op_cases() {
        for trial in 0..100 {
            let mut s = ParamStore::new();
            let a = s.add("a", rand_tensor(&mut rng, sa.0, sa.1, -1.5, 1.5)).unwrap();
            // divisors kept away from zero
            let b = if name == "div" {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                s.add("b", Tensor::scalar(sign * rng.random_range(0.5..2.0))).unwrap()
            } else {
                s.add("b", rand_tensor(&mut rng, sb.0, sb.1, -1.5, 1.5)).unwrap()
            };
            let report = finite_diff_check(
                &mut s,
                |s, g| {
                    let (va, vb) = (g.param(s, a), g.param(s, b));
                    let out = f(g, va, vb)?;
                    Ok(g.sum(out))
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{name} trial {trial}: {report:?}");
        }
    }
}

#[test]
fn two_layer_tanh_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    let w1 = s.add("w1", rand_tensor(&mut rng, 3, 8, -1.0, 1.0)).unwrap();
    let b1 = s.add("b1", rand_tensor(&mut rng, 1, 8, -0.5, 0.5)).unwrap();
    let w2 = s.add("w2", rand_tensor(&mut rng, 8, 2, -1.0, 1.0)).unwrap();
    let b2 = s.add("b2", rand_tensor(&mut rng, 1, 2, -0.5, 0.5)).unwrap();
    let x = rand_tensor(&mut rng, 10, 3, -2.0, 2.0);
    let y = rand_tensor(&mut rng, 10, 2, -1.0, 1.0);
    let report = finite_diff_check(
        &mut s,
        |s, g| {
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let (w1, b1, w2, b2) = (g.param(s, w1), g.param(s, b1), g.param(s, w2), g.param(s, b2));
            let h = g.matmul(xv, w1)?;
            let h = g.add(h, b1)?;
            let h = g.tanh(h);
            let o = g.matmul(h, w2)?;
            let o = g.add(o, b2)?;
            let d = g.sub(o, yv)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
