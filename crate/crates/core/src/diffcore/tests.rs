use super::*;
use crate::Error;

#[test]
fn sin_at_zero() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(0.0));
    let y = g.sin(x);
    assert_eq!(g.value(y).item(), Some(0.0));
    let grads = g.backward_grads(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), Some(1.0));
}

#[test]
fn train_batch_norm_standardizes_channels() {
    let mut g = Graph::new();
    let data: Vec<f64> = (0..48)
        .map(|i| ((i * 7919) % 97) as f64 * 0.31 - 4.0 + (i % 2) as f64 * 10.0)
        .collect();
    let x = g.constant(Tensor::new(&[4, 3, 2, 2], data).unwrap());
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Train).unwrap();
    assert!(stats.is_some());
    let yv = g.value(y).data();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..4).map(move |i| (n * 3 + ch) * 4 + i))
            .map(|i| yv[i])
            .collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        // eps in the denominator shrinks the variance slightly
        assert!((var - 1.0).abs() < 1e-5, "{var}");
    }
}

#[test]
fn eval_batch_norm_uses_running_stats() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 1], vec![3.0, 5.0]).unwrap());
    let gamma = g.constant(Tensor::full(&[1], 2.0));
    let beta = g.constant(Tensor::full(&[1], 1.0));
    let (y, stats) = g
        .batch_norm(
            x,
            gamma,
            beta,
            BnMode::Eval {
                mean: &[1.0],
                var: &[4.0],
            },
        )
        .unwrap();
    assert!(stats.is_none());
    let s = (4.0 + BN_EPS).sqrt();
    assert!((g.value(y).data()[0] - (2.0 * 2.0 / s + 1.0)).abs() < 1e-12);
    assert!((g.value(y).data()[1] - (2.0 * 4.0 / s + 1.0)).abs() < 1e-12);
}

#[test]
fn conv2d_ones_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, 1, 1).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 1, 4, 4]);
    // brute-force count of in-bounds taps
    for oy in 0..4i32 {
        for ox in 0..4i32 {
            let mut taps = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (0..4).contains(&(oy + dy)) && (0..4).contains(&(ox + dx)) {
                        taps += 1;
                    }
                }
            }
            assert_eq!(v.data()[(oy * 4 + ox) as usize], taps as f64);
        }
    }
    assert_eq!(v.data()[5], 9.0);
    assert_eq!(v.data()[0], 4.0);
}

#[test]
fn squared_error_of_equal_tensors_has_zero_gradient() {
    let mut g = Graph::new();
    let t = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let a = g.variable(t.clone());
    let b = g.variable(t);
    let l = g.squared_error(a, b).unwrap();
    assert_eq!(g.value(l).item(), Some(0.0));
    let grads = g.backward_grads(l).unwrap();
    assert!(grads.wrt(a).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.wrt(b).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    match g.add(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(
        g.matmul(a, a),
        Err(Error::Shape { op: "matmul", .. })
    ));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let a = g.variable(Tensor::zeros(&[2]));
    let y = g.sin(a);
    assert!(g.backward_grads(y).is_err());
}

#[test]
fn unreachable_params_get_zero_grad() {
    let mut store = ParamStore::new();
    let used = store.push(Param::new(
        "used",
        Tensor::full(&[2], 0.5),
        ParamGroup::Backbone,
    ));
    let unused = store.push(Param::new(
        "unused",
        Tensor::full(&[2], 0.5),
        ParamGroup::Backbone,
    ));
    let mut g = Graph::new();
    let p = g.param(&store, used, true);
    let _q = g.param(&store, unused, true);
    let s = g.sum_all(p).unwrap();
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(used).grad().data(), &[1.0, 1.0]);
    assert_eq!(store.get(unused).grad().data(), &[0.0, 0.0]);
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.push(Param::new(
        "w",
        Tensor::full(&[2], 2.0),
        ParamGroup::Backbone,
    ));
    let mut g = Graph::new();
    let p = g.param(&store, w, false);
    let x = g.variable(Tensor::full(&[2], 3.0));
    let y = g.mul(p, x).unwrap();
    let s = g.sum_all(y).unwrap();
    let grads = g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(w).grad().data(), &[0.0, 0.0]);
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, err) in gradcheck::primitive_suite(100, 11).unwrap() {
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}

#[test]
fn composite_matches_finite_differences() {
    let mut rng = crate::rng::rng_from(5);
    use rand_distr::{Distribution, StandardNormal};
    for _ in 0..20 {
        let x: Vec<f64> = (0..2 * 1 * 6 * 6)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let k: Vec<f64> = (0..3 * 9)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let inputs = [
            Tensor::new(&[2, 1, 6, 6], x).unwrap(),
            Tensor::new(&[3, 1, 3, 3], k).unwrap(),
        ];
        let err = gradcheck::check_gradients(&inputs, 1e-4, |g, v| {
            let c = g.conv2d(v[0], v[1], 2, 1)?;
            let gamma = g.constant(Tensor::full(&[3], 1.3));
            let beta = g.constant(Tensor::full(&[3], 0.2));
            let (b, _) = g.batch_norm(c, gamma, beta, BnMode::Train)?;
            let t = g.tanh(b);
            let s = g.sin(t);
            let m = g.mean(s, &[0, 2, 3])?;
            let target = g.constant(Tensor::full(&[3], 0.1));
            g.squared_error(m, target)
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![0.1, 0.7, -0.3, 2.0]).unwrap());
        let w = g.constant(Tensor::new(&[2, 2], vec![1.5, -0.2, 0.3, 0.9]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let z = g.softplus(y);
        g.value(z).clone()
    };
    assert_eq!(build(), build());
}
