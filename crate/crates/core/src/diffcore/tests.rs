use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn vecv(g: &mut Graph, v: &[f64]) -> Var {
    g.constant(Tensor::vector(v.to_vec()).unwrap())
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(Param::new(*name, t.clone())).unwrap();
    }
    s
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let a = vecv(&mut g, &[1.0, -1.0]);
    let s = g.sigmoid(a).unwrap();
    let v = g.value(s).data().to_vec();
    assert!((v[0] - 0.731_058_578_6).abs() < 1e-9 && (v[1] - 0.268_941_421_4).abs() < 1e-9);

    let l = vecv(&mut g, &[2f64.ln(), 0.0]);
    let sm = g.softmax(l).unwrap();
    let v = g.value(sm).data();
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);

    let big = vecv(&mut g, &[1000.0, 0.0, -1000.0]);
    let sm = g.softmax(big).unwrap();
    assert_eq!(g.value(sm).data(), &[1.0, 0.0, 0.0]);

    let h = vecv(&mut g, &[-0.5, 0.0, 0.25]);
    let h = g.hinge(h).unwrap();
    assert_eq!(g.value(h).data(), &[0.0, 0.0, 0.25]);

    let m = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let x = vecv(&mut g, &[1.0, 10.0]);
    let y = g.vecmat(x, m).unwrap();
    assert_eq!(g.value(y).data(), &[41.0, 52.0, 63.0]);

    let u = vecv(&mut g, &[1.0, 2.0]);
    let w = vecv(&mut g, &[3.0, 4.0, 5.0]);
    let o = g.outer(u, w).unwrap();
    assert_eq!(g.value(o).data(), &[3., 4., 5., 6., 8., 10.]);

    let p = vecv(&mut g, &[0.25, 0.75]);
    let ce = g.cross_entropy(p, 1).unwrap();
    assert!((g.value(ce).item() + (0.75f64 + LOG_EPS).ln()).abs() < 1e-15);
}

#[test]
fn shape_errors() {
    let mut g = Graph::new();
    let a = vecv(&mut g, &[1.0, 2.0]);
    let b = vecv(&mut g, &[1.0, 2.0, 3.0]);
    assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    assert!(matches!(g.vecmat(a, b), Err(Error::Shape(_))));
    assert!(matches!(g.gather(a, &[2]), Err(Error::Shape(_))));
    assert!(matches!(g.cross_entropy(a, 5), Err(Error::Shape(_))));
    assert!(matches!(g.backward(a), Err(Error::Shape(_))));
}

#[test]
fn ratio_norm_rejects_nonpositive_sum() {
    let mut g = Graph::new();
    let a = vecv(&mut g, &[1.0, -2.0]);
    assert!(matches!(g.ratio_norm(a), Err(Error::Numerics(_))));
    let b = vecv(&mut g, &[1.0, 3.0]);
    let r = g.ratio_norm(b).unwrap();
    assert_eq!(g.value(r).data(), &[0.25, 0.75]);
}

#[test]
fn hinge_kink_subgradient_is_zero() {
    let s = store(&[("x", Tensor::vector(vec![0.0, 1.0, -1.0]).unwrap())]);
    let obj = |g: &mut Graph, p: &ParamStore| {
        let x = g.param(p, "x")?;
        let h = g.hinge(x)?;
        g.sum(h)
    };
    let grads = gradients(&obj, &s, &["x"]).unwrap();
    assert_eq!(grads["x"].data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn untouched_and_frozen_params_get_zero_gradients() {
    let mut s = store(&[
        ("a", Tensor::vector(vec![1.0, 2.0]).unwrap()),
        ("b", Tensor::vector(vec![3.0, 4.0]).unwrap()),
        ("unused", Tensor::scalar(5.0).unwrap()),
    ]);
    let obj = |g: &mut Graph, p: &ParamStore| {
        let a = g.param(p, "a")?;
        let b = g.param(p, "b")?;
        g.dot(a, b)
    };
    let grads = gradients(&obj, &s, &["a", "b", "unused"]).unwrap();
    assert_eq!(grads["a"].data(), &[3.0, 4.0]);
    assert_eq!(grads["unused"].data(), &[0.0]);

    s.set_frozen("b", true).unwrap();
    let loss = backprop(&obj, &mut s).unwrap();
    assert_eq!(loss, 11.0);
    assert_eq!(s.get("a").unwrap().grad().data(), &[3.0, 4.0]);
    assert_eq!(s.get("b").unwrap().grad().data(), &[0.0, 0.0]);
}

#[test]
fn parameter_used_twice_accumulates() {
    let s = store(&[("x", Tensor::vector(vec![1.5, -2.0]).unwrap())]);
    let obj = |g: &mut Graph, p: &ParamStore| {
        let x = g.param(p, "x")?;
        let x2 = g.param(p, "x")?;
        let m = g.mul(x, x2)?;
        g.sum(m)
    };
    let grads = gradients(&obj, &s, &["x"]).unwrap();
    assert_eq!(grads["x"].data(), &[3.0, -4.0]);
}

#[test]
fn gradcheck_rejects_bad_step() {
    let s = store(&[("x", Tensor::scalar(1.0).unwrap())]);
    let obj = |g: &mut Graph, p: &ParamStore| g.param(p, "x");
    assert!(matches!(
        finite_difference_check(&obj, &s, &["x"], 0.0, 1e-4),
        Err(Error::Config(_))
    ));
}

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert_eq!(relative_error(2.0, 1.0), 0.5);
    assert_eq!(relative_error(0.0, 0.0), 0.0);
}

/// Each operator checked against central differences, one at a time, on
/// inputs away from any kink.
#[test]
fn every_op_matches_finite_differences() {
    let s = store(&[
        ("a", Tensor::vector(vec![0.3, -0.7, 1.1]).unwrap()),
        ("b", Tensor::vector(vec![-0.4, 0.9, 0.2]).unwrap()),
        ("m", Tensor::matrix(3, 2, vec![0.5, -0.2, 0.1, 0.8, -0.6, 0.3]).unwrap()),
        ("c", Tensor::scalar(0.7).unwrap()),
    ]);
    let weights = [0.9, -1.3, 0.4, 0.6, -0.2, 1.7, 0.8, -0.5, 1.1];
    type Build = fn(&mut Graph, Var, Var, Var, Var) -> crate::Result<Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("add", |g, a, b, _, _| g.add(a, b)),
        ("sub", |g, a, b, _, _| g.sub(a, b)),
        ("mul", |g, a, b, _, _| g.mul(a, b)),
        ("scale", |g, a, _, _, _| g.scale(a, -2.5)),
        ("const_sub", |g, a, _, _, _| g.const_sub(1.0, a)),
        ("mul_scalar", |g, a, _, _, c| g.mul_scalar(a, c)),
        ("tanh", |g, a, _, _, _| g.tanh(a)),
        ("sigmoid", |g, a, _, _, _| g.sigmoid(a)),
        ("hinge", |g, a, _, _, _| g.hinge(a)),
        ("vecmat", |g, a, _, m, _| g.vecmat(a, m)),
        ("dot", |g, a, b, _, _| g.dot(a, b)),
        ("outer", |g, a, b, _, _| g.outer(a, b)),
        ("softmax", |g, a, _, _, _| g.softmax(a)),
        ("ratio_norm", |g, _, b, _, c| {
            let shifted = g.add_n(&[b, b])?;
            let one = g.constant(Tensor::vector(vec![1.0; 3])?);
            let offset = g.mul_scalar(one, c)?;
            let pos = g.add(shifted, offset)?;
            g.ratio_norm(pos)
        }),
        ("concat", |g, a, b, _, c| g.concat(&[a, c, b])),
        ("sum", |g, a, _, _, _| g.sum(a)),
        ("add_n", |g, a, b, _, _| g.add_n(&[a, b, a])),
        ("mean", |g, a, b, _, _| g.mean(&[a, b])),
        ("gather", |g, _, _, m, _| g.gather(m, &[5, 0, 3, 3])),
        ("squared_error", |g, a, b, _, _| g.squared_error(a, b)),
        ("cross_entropy", |g, a, _, _, _| {
            let p = g.softmax(a)?;
            g.cross_entropy(p, 2)
        }),
    ];
    for (name, build) in cases {
        let obj = |g: &mut Graph, p: &ParamStore| -> crate::Result<Var> {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let m = g.param(p, "m")?;
            let c = g.param(p, "c")?;
            let out = build(g, a, b, m, c)?;
            let n = g.value(out).len();
            let w = g.constant(Tensor::vector(weights[..n].to_vec())?);
            let flat = if g.value(out).rank() == 1 {
                out
            } else {
                let idx: Vec<usize> = (0..n).collect();
                g.gather(out, &idx)?
            };
            g.dot(flat, w)
        };
        let report = finite_difference_check(&obj, &s, &["a", "b", "m", "c"], 1e-5, 1e-6).unwrap();
        assert!(report.passed, "{name}: {:?}", report.worst());
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let s = store(&[("x", Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap())]);
    let obj = |g: &mut Graph, p: &ParamStore| {
        let x = g.param(p, "x")?;
        let sm = g.softmax(x)?;
        let t = g.tanh(sm)?;
        g.sum(t)
    };
    let a = gradients(&obj, &s, &["x"]).unwrap();
    let b = gradients(&obj, &s, &["x"]).unwrap();
    assert!(a["x"].bit_eq(&b["x"]));
}

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut g = Graph::new();
        let x = vecv(&mut g, &v);
        let s = g.softmax(x).unwrap();
        let out = g.value(s).data();
        prop_assert!(out.iter().all(|&p| p >= 0.0));
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant(v in finite_vec(6), shift in -20.0f64..20.0) {
        let mut g = Graph::new();
        let x = vecv(&mut g, &v);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let y = vecv(&mut g, &shifted);
        let a = g.softmax(x).unwrap();
        let b = g.softmax(y).unwrap();
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_is_linear_in_the_objective(
        x in finite_vec(4),
        w1 in finite_vec(4),
        w2 in finite_vec(4),
        k in -3.0f64..3.0,
    ) {
        let s = store(&[("x", Tensor::vector(x).unwrap())]);
        let grad_of = |w: Vec<f64>| {
            let obj = move |g: &mut Graph, p: &ParamStore| {
                let x = g.param(p, "x")?;
                let t = g.tanh(x)?;
                let wv = g.constant(Tensor::vector(w.clone())?);
                g.dot(t, wv)
            };
            gradients(&obj, &s, &["x"]).unwrap()["x"].data().to_vec()
        };
        let combined: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + k * b).collect();
        let g1 = grad_of(w1);
        let g2 = grad_of(w2);
        let gc = grad_of(combined);
        for i in 0..4 {
            prop_assert!(close(gc[i], g1[i] + k * g2[i], 1e-12));
        }
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(v in prop::collection::vec(-800.0f64..800.0, 1..10)) {
        let mut g = Graph::new();
        let x = vecv(&mut g, &v);
        let s = g.sigmoid(x).unwrap();
        prop_assert!(g.value(s).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn tanh_chain_matches_finite_differences(
        x in prop::collection::vec(-1.0f64..1.0, 3),
        m in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let s = store(&[
            ("x", Tensor::vector(x).unwrap()),
            ("m", Tensor::matrix(3, 2, m).unwrap()),
        ]);
        let obj = |g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "x")?;
            let m = g.param(p, "m")?;
            let h = g.vecmat(x, m)?;
            let t = g.tanh(h)?;
            let sm = g.softmax(t)?;
            g.cross_entropy(sm, 0)
        };
        let r = finite_difference_check(&obj, &s, &["x", "m"], 1e-5, 1e-4).unwrap();
        prop_assert!(r.passed, "{:?}", r.worst());
    }
}
