use std::rc::Rc;

use super::*;

fn arr(rows: usize, cols: usize, data: &[f64]) -> Array {
    Array::new(rows, cols, data.to_vec()).unwrap()
}

/// Central-difference gradient of `f` at `x`.
fn fd(x: &Array, f: impl Fn(&Array) -> f64) -> Array {
    let h = 1e-5;
    let mut g = Array::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn close(a: &Array, b: &Array, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        let err = (x - y).abs() / y.abs().max(1e-9).max(x.abs());
        assert!(err <= tol || (x - y).abs() <= 1e-9, "{x} vs {y} ({err})");
    }
}

#[test]
fn trivial_values() {
    let tape = Tape::new();
    assert_eq!(tape.scalar(0.0).cos().item(), 1.0);
    assert_eq!(tape.scalar(0.0).tanh().item(), 0.0);
    let p = tape.scalar(2.0).matmul(&tape.scalar(3.0)).unwrap();
    assert_eq!(p.item(), 6.0);
}

#[test]
fn power_rule_and_cos_gradient() {
    let tape = Tape::new();
    let x = tape.var(Array::scalar(3.0));
    let g = tape.grad_wrt(&x.powi(2), &[x]).unwrap();
    assert_eq!(g[0].item(), 6.0);
    let y = tape.var(Array::scalar(0.0));
    let g = tape.grad_wrt(&y.cos(), &[y]).unwrap();
    assert_eq!(g[0].item(), 0.0);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Array::zeros(2, 3));
    let b = tape.constant(Array::zeros(3, 2));
    let msg = a.add(&b).unwrap_err().to_string();
    assert!(msg.contains("2x3") && msg.contains("3x2"), "{msg}");
}

#[test]
fn foreign_target_is_usage_error() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let x = t1.var(Array::scalar(1.0));
    let y = t2.var(Array::scalar(1.0));
    let err = t1.grad_wrt(&x.square(), &[y]).unwrap_err();
    assert!(matches!(err, crate::Error::Usage(_)));
}

#[test]
fn non_scalar_output_rejected() {
    let tape = Tape::new();
    let x = tape.var(Array::zeros(2, 1));
    assert!(tape.grad_wrt(&x, &[x]).is_err());
}

/// Scalar function built from one primitive (plus a fixed random projection
/// so that the output is a scalar).
type Case = Box<dyn for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a>>;

fn primitive_cases() -> Vec<(&'static str, Case)> {
    let w = arr(3, 2, &[0.3, -1.1, 0.7, 0.2, -0.5, 0.9]);
    let w2 = w.transpose();
    let w3 = w.clone();
    vec![
        ("sin", Box::new(|_t, x| x.sin().sum())),
        ("cos", Box::new(|_t, x| x.cos().sum())),
        ("tanh", Box::new(|_t, x| x.tanh().sum())),
        ("exp", Box::new(|_t, x| x.exp().sum())),
        ("powi3", Box::new(|_t, x| x.powi(3).sum())),
        ("square", Box::new(|_t, x| x.square().sum())),
        ("scale", Box::new(|_t, x| x.scale(-2.5).square().sum())),
        ("shift", Box::new(|_t, x| x.shift(0.7).square().sum())),
        ("mul", Box::new(|_t, x| x.mul(&x.sin()).unwrap().sum())),
        ("add", Box::new(|_t, x| x.add(&x.cos()).unwrap().square().sum())),
        ("sub", Box::new(|_t, x| x.sub(&x.tanh()).unwrap().square().sum())),
        (
            "scalar-broadcast",
            Box::new(|_t, x| {
                let s = x.select(0, 1, 0, 1).unwrap();
                x.mul(&s).unwrap().add(&s).unwrap().square().sum()
            }),
        ),
        (
            "matmul",
            Box::new(move |t, x| {
                let w = t.constant(w.transpose());
                w.matmul(&x).unwrap().sin().sum()
            }),
        ),
        (
            "matmul-ta",
            Box::new(move |_t, x| x.matmul_t(&x, true, false).unwrap().cos().sum()),
        ),
        (
            "matmul-tb",
            Box::new(move |t, x| {
                let w = t.constant(w2.clone());
                x.matmul_t(&w, true, true).unwrap().tanh().sum()
            }),
        ),
        (
            "concat",
            Box::new(|_t, x| Var::concat(&[x.sin(), x, x.square()]).unwrap().cos().sum()),
        ),
        (
            "select-embed",
            Box::new(|_t, x| {
                let b = x.select(1, 2, 1, 1).unwrap().embed(0, 1, 3, 4).unwrap();
                b.shift(0.3).square().sum()
            }),
        ),
        (
            "gather-scatter",
            Box::new(|_t, x| {
                let idx: Rc<[usize]> = vec![2, 0, 2, 1].into();
                let g = x.gather(idx.clone()).unwrap().sin();
                g.scatter(vec![0, 1, 1, 4].into(), 5).unwrap().cos().sum()
            }),
        ),
        (
            "broadcast",
            Box::new(move |t, x| {
                let w = t.constant(w3.clone());
                x.sum().sin().broadcast(3, 2).unwrap().mul(&w).unwrap().exp().sum()
            }),
        ),
    ]
}

#[test]
fn every_primitive_matches_finite_differences() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for (name, f) in primitive_cases() {
        for _ in 0..100 {
            let data: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x0 = arr(3, 2, &data);
            let tape = Tape::new();
            let x = tape.var(x0.clone());
            let g = tape.grad_wrt(&f(&tape, x), &[x]).unwrap().remove(0);
            let num = fd(&x0, |p| {
                let t = Tape::new();
                let v = t.constant(p.clone());
                f(&t, v).item()
            });
            for (a, b) in g.data().iter().zip(num.data()) {
                let err = (a - b).abs() / b.abs().max(1e-9);
                assert!(err <= 1e-6 || (a - b).abs() <= 1e-9, "{name}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn graph_gradient_matches_numeric_and_is_differentiable() {
    for (name, f) in primitive_cases() {
        let x0 = arr(3, 2, &[0.4, -1.3, 0.8, 1.7, -0.2, 0.6]);
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let out = f(&tape, x);
        let numeric = tape.grad_wrt(&out, &[x]).unwrap().remove(0);
        let graph = tape.grad_graph(&out, &[x]).unwrap()[0];
        close(&graph.value(), &numeric, 1e-12);

        // Differentiate a functional of the gradient and compare against
        // finite differences of the numeric gradient.
        let probe = arr(3, 2, &[1.0, -0.5, 0.25, 2.0, -1.5, 0.75]);
        let pv = tape.constant(probe.clone());
        let second = graph.mul(&pv).unwrap().sum();
        let hvp = tape.grad_wrt(&second, &[x]).unwrap().remove(0);
        let num = fd(&x0, |p| {
            let t = Tape::new();
            let v = t.var(p.clone());
            let g = t.grad_wrt(&f(&t, v), &[v]).unwrap().remove(0);
            g.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        });
        for (a, b) in hvp.data().iter().zip(num.data()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn gradient_with_respect_to_constant_input() {
    let tape = Tape::new();
    let x = tape.constant(arr(2, 1, &[0.5, -0.3]));
    let w = tape.var(arr(1, 2, &[1.5, 2.0]));
    let y = w.matmul(&x).unwrap().sin();
    let g = tape.grad_wrt(&y, &[x, w]).unwrap();
    let c = (1.5f64 * 0.5 - 2.0 * 0.3).cos();
    close(&g[0], &arr(2, 1, &[1.5 * c, 2.0 * c]), 1e-14);
    close(&g[1], &arr(1, 2, &[0.5 * c, -0.3 * c]), 1e-14);
}

#[test]
fn repeated_backward_passes_are_identical() {
    let tape = Tape::new();
    let x = tape.var(arr(2, 2, &[0.1, 0.2, -0.7, 1.3]));
    let y = x.matmul(&x).unwrap().tanh().mul(&x.cos()).unwrap().sum();
    let a = tape.grad_wrt(&y, &[x]).unwrap();
    let b = tape.grad_wrt(&y, &[x]).unwrap();
    assert_eq!(
        a[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn unreachable_target_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.var(Array::scalar(1.0));
    let z = tape.var(arr(1, 2, &[1.0, 2.0]));
    let g = tape.grad_wrt(&x.square(), &[z]).unwrap();
    assert_eq!(g[0], Array::zeros(1, 2));
    let gg = tape.grad_graph(&x.square(), &[z]).unwrap();
    assert_eq!(gg[0].value(), Array::zeros(1, 2));
}

#[test]
fn jacobian_of_identity_and_linear_map() {
    let tape = Tape::new();
    let x = tape.var(arr(2, 1, &[0.3, -0.4]));
    let outs = [x.select(0, 1, 0, 1).unwrap(), x.select(1, 1, 0, 1).unwrap()];
    assert_eq!(tape.jacobian_wrt_input(&outs, &x).unwrap(), Array::identity(2));

    let w = arr(3, 2, &[1.0, 2.0, -3.0, 0.5, 0.25, 4.0]);
    let y = tape.constant(w.clone()).matmul(&x).unwrap();
    let outs: Vec<_> = (0..3).map(|i| y.select(i, 1, 0, 1).unwrap()).collect();
    assert_eq!(tape.jacobian_wrt_input(&outs, &x).unwrap(), w);
}

#[test]
fn negative_power() {
    let tape = Tape::new();
    let x = tape.var(Array::scalar(2.0));
    let g = tape.grad_wrt(&x.powi(-2), &[x]).unwrap();
    assert!((g[0].item() + 0.25).abs() < 1e-15);
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn gradient_is_linear(a in proptest::collection::vec(-2.0f64..2.0, 4), c in -3.0f64..3.0) {
            let x0 = Array::new(2, 2, a).unwrap();
            let tape = Tape::new();
            let x = tape.var(x0);
            let f = x.sin().sum();
            let g = x.matmul(&x).unwrap().tanh().sum();
            let h = f.add(&g.scale(c)).unwrap();
            let gf = tape.grad_wrt(&f, &[x]).unwrap().remove(0);
            let gg = tape.grad_wrt(&g, &[x]).unwrap().remove(0);
            let gh = tape.grad_wrt(&h, &[x]).unwrap().remove(0);
            for i in 0..4 {
                let expect = gf.data()[i] + c * gg.data()[i];
                prop_assert!((gh.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn nodes_follow_their_operands(n in 1usize..20) {
            let tape = Tape::new();
            let mut v = tape.var(Array::scalar(0.5));
            for i in 0..n {
                v = if i % 2 == 0 { v.sin() } else { v.mul(&v).unwrap() };
                prop_assert!(v.id() + 1 == tape.len());
            }
        }
    }
}
