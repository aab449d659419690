use proptest::prelude::*;
use vaekrnet::numerics::{Graph, Param, Parameterized, Tensor, Var};

/// Central-difference check of `f` at `x` through a non-parameter leaf.
fn check_unary(x: &Tensor, f: impl Fn(&Var) -> Var) -> f64 {
    let g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&v).sum();
    let grads = g.backward(&out).unwrap();
    let ad = v.grad(&grads).unwrap().clone();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let ng = Graph::no_grad();
        let fp = f(&ng.constant(xp)).sum().item();
        let fm = f(&ng.constant(xm)).sum().item();
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((ad.data()[i] - fd).abs() / (fd.abs() + 1e-12).max(1e-3));
    }
    worst
}

fn check_binary(a: &Tensor, b: &Tensor, f: impl Fn(&Var, &Var) -> Var) -> f64 {
    let ea = check_unary(a, |x| f(x, &Graph::no_grad().constant(b.clone())));
    let eb = check_unary(b, |y| f(&Graph::no_grad().constant(a.clone()), y));
    ea.max(eb)
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn vecs(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, n).prop_map(Tensor::vector)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elementwise_unary_ops(x in mat(3, 4)) {
        prop_assert!(check_unary(&x, |v| v.exp()) < 1e-5);
        prop_assert!(check_unary(&x, |v| v.tanh()) < 1e-5);
        prop_assert!(check_unary(&x, |v| v.square()) < 1e-5);
        prop_assert!(check_unary(&x, |v| v.scale(-1.7).add_scalar(0.3)) < 1e-5);
        prop_assert!(check_unary(&x, |v| v.neg()) < 1e-5);
        let pos = x.map(|t| t.abs() + 0.5);
        prop_assert!(check_unary(&pos, |v| v.ln()) < 1e-5);
        prop_assert!(check_unary(&pos, |v| v.abs()) < 1e-5);
        prop_assert!(check_unary(&x.map(|t| t * 0.4), |v| v.clamp(-1.0, 1.0)) < 1e-5);
    }

    #[test]
    fn broadcast_binary_ops(a in mat(3, 4), b in mat(3, 4), r in vecs(4), s in -2.0f64..2.0) {
        let sc = Tensor::scalar(s);
        for rhs in [&b, &r, &sc] {
            prop_assert!(check_binary(&a, rhs, |x, y| x.add(y)) < 1e-5);
            prop_assert!(check_binary(&a, rhs, |x, y| x.sub(y)) < 1e-5);
            prop_assert!(check_binary(&a, rhs, |x, y| x.mul(y)) < 1e-5);
            let away = rhs.map(|t| if t >= 0.0 { t + 0.5 } else { t - 0.5 });
            prop_assert!(check_binary(&a, &away, |x, y| x.div(y)) < 1e-5);
        }
    }

    #[test]
    fn structural_ops(a in mat(3, 4), b in mat(4, 2), c in mat(3, 2)) {
        prop_assert!(check_binary(&a, &b, |x, y| x.matmul(y).square()) < 1e-5);
        prop_assert!(check_unary(&a, |v| v.transpose().matmul(v).square()) < 1e-5);
        prop_assert!(check_unary(&a, |v| v.sum_cols().square()) < 1e-5);
        prop_assert!(check_unary(&a, |v| v.sum_rows().square()) < 1e-5);
        prop_assert!(check_unary(&a, |v| v.slice_cols(1, 3).square()) < 1e-5);
        prop_assert!(check_unary(&a, |v| v.mean().square()) < 1e-5);
        prop_assert!(check_unary(&a, |v| v.reshape(&[12]).square()) < 1e-5);
        prop_assert!(check_binary(&a, &c, |x, y| Var::concat_cols(&[y, x, y]).square()) < 1e-5);
    }

    #[test]
    fn matrix_inverse(a in mat(3, 3)) {
        let well = Tensor::new(&[3, 3], a.data().iter().enumerate()
            .map(|(i, x)| if i % 4 == 0 { x + 4.0 } else { *x }).collect()).unwrap();
        prop_assert!(check_unary(&well, |v| v.inverse().unwrap().mul(v)) < 1e-5);
    }
}

struct Scalar(Param);

impl Parameterized for Scalar {
    fn params(&self) -> Vec<&Param> {
        vec![&self.0]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.0]
    }
}

#[test]
fn power_rule() {
    let p = Param::new(Tensor::scalar(3.0));
    let g = Graph::new();
    let loss = g.param(&p).square();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(p.id()).unwrap().data(), &[6.0]);
}

#[test]
fn tanh_slope_at_zero() {
    let p = Param::new(Tensor::zeros(&[4]));
    let g = Graph::new();
    let loss = g.param(&p).tanh().sum();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(p.id()).unwrap().data(), &[1.0; 4]);
}

#[test]
fn unused_parameter_gets_zero() {
    let p = Param::new(Tensor::vector(vec![1.0, 2.0]));
    let q = Param::new(Tensor::vector(vec![5.0]));
    let g = Graph::new();
    let _ = g.param(&q);
    let loss = g.param(&p).sum();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(q.id()).unwrap().data(), &[0.0]);
}

#[test]
fn reused_parameter_accumulates() {
    let p = Param::new(Tensor::scalar(2.0));
    let g = Graph::new();
    let a = g.param(&p);
    let b = g.param(&p);
    let loss = a.mul(&b).add(&a);
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(p.id()).unwrap().data(), &[5.0]);
}

#[test]
fn backward_errors() {
    let p = Param::new(Tensor::vector(vec![1.0, 2.0]));
    let g = Graph::new();
    let v = g.param(&p);
    assert!(g.backward(&v).is_err(), "non-scalar loss");
    let c = g.constant(Tensor::scalar(1.0));
    assert!(g.backward(&c).is_err(), "constant is not on the tape");
    let other = Graph::new();
    let w = other.param(&p).sum();
    assert!(g.backward(&w).is_err(), "loss from another graph");
    let ng = Graph::no_grad();
    let n = ng.param(&p).sum();
    assert!(ng.backward(&n).is_err());
}

#[test]
fn lu_log_det_gradient_matches_differences() {
    // log|det(L U)| with unit-lower L and upper U taken from a full 3x3 parameter
    let raw = vec![1.3, 0.4, -0.2, 0.7, -0.9, 0.5, -0.3, 0.8, 1.6];
    let mut m = Scalar(Param::new(Tensor::matrix(3, 3, raw).unwrap()));
    let strict_lower = Tensor::matrix(3, 3, vec![0., 0., 0., 1., 0., 0., 1., 1., 0.]).unwrap();
    let upper = Tensor::matrix(3, 3, vec![1., 1., 1., 0., 1., 1., 0., 0., 1.]).unwrap();
    let f = |m: &Scalar, g: &Graph| {
        let p = g.param(&m.0);
        let u = p.mul(&g.constant(upper.clone()));
        let diag = u.mul(&g.constant(Tensor::identity(3))).sum_cols();
        Ok(diag.abs().ln().sum())
    };
    let ng = Graph::no_grad();
    let p = ng.param(&m.0);
    let l = p.mul(&ng.constant(strict_lower.clone())).add(&ng.constant(Tensor::identity(3)));
    let w = l.matmul(&p.mul(&ng.constant(upper.clone())));
    let w = w.value();
    let det = w.get(0, 0) * (w.get(1, 1) * w.get(2, 2) - w.get(1, 2) * w.get(2, 1))
        - w.get(0, 1) * (w.get(1, 0) * w.get(2, 2) - w.get(1, 2) * w.get(2, 0))
        + w.get(0, 2) * (w.get(1, 0) * w.get(2, 1) - w.get(1, 1) * w.get(2, 0));
    assert!((f(&m, &ng).unwrap().item() - det.abs().ln()).abs() < 1e-12);
    let err = vaekrnet::numerics::grad_check(&mut m, f).unwrap();
    assert!(err < 1e-6, "{err}");
}
