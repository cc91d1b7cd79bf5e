use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let a = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
    let y = g.matmul(i, a).unwrap();
    assert_eq!(g.value(y), g.value(a));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    let c = g.constant(Tensor::zeros(&[4]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layernorm_hand_oracle() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 3], &[1.0, 3.0, 5.0]));
    let y = g.layernorm(x, 0.0);
    // mean 3, population variance 8/3
    let s = (8.0f64 / 3.0).sqrt();
    let expected = [-2.0 / s, 0.0, 2.0 / s];
    for (a, b) in g.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    let v = g.value(y).data();
    assert!(v.iter().sum::<f64>().abs() < 1e-12);
    assert!((v.iter().map(|x| x * x).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
    let y = g
        .masked_softmax(x, &[true, true, false, true, false, false])
        .unwrap();
    let v = g.value(y).data();
    assert_eq!(v[2], 0.0);
    assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
    assert_eq!(&v[3..], &[1.0, 0.0, 0.0]);
}

#[test]
fn max_axis_grad_goes_to_first_max() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3, 1], &[2.0, 2.0, 1.0]));
    let m = g.max_axis(x, 0).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let other = g.leaf(t(&[2], &[5.0, 5.0]));
    let sq = g.square(x);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    // independent leaf receives nothing
    assert!(g.grad(other).is_none());
}

#[test]
fn backward_rejects_non_scalar_and_second_pass() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let y = g.square(x);
    assert!(matches!(g.backward(y), Err(NumericsError::Domain(_))));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(NumericsError::BackwardTwice)));
}

#[test]
fn matmul_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut r = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let (a, b, c) = (r(&[3, 4]), r(&[4, 5]), r(&[5, 2]));
    let err = grad_check_many(
        |g, v| {
            let ab = g.matmul(v[0], v[1])?;
            let abc = g.matmul(ab, v[2])?;
            let sq = g.square(abc);
            Ok(g.sum(sq))
        },
        &[a, b, c],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = t(&[5], &[0.3, -1.0, 2.0, 7.5, 0.0]);
    let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn grad_check_normalize_then_dot() {
    let x = t(&[1, 4], &[0.3, -1.2, 0.8, 0.1]);
    let k = t(&[1, 4], &[1.0, 0.5, -0.25, 2.0]);
    let err = grad_check(
        |g, v| {
            let n = g.l2_normalize(v, 1e-12);
            let kv = g.constant(k.clone());
            let p = g.mul(n, kv)?;
            Ok(g.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_op_passes_grad_check() {
    for (name, err) in op_suite(100, 2024).unwrap() {
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn scalar_broadcast_gradients_reduce() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let s = g.leaf(Tensor::scalar(2.0));
    let y = g.mul(x, s).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(s).unwrap(), &[6.0]);
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn quat_to_mat_matches_geom() {
    let mut g = Graph::new();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let q = g.constant(t(&[1, 4], &[h, 0.0, 0.0, h]));
    let m = g.quat_to_mat(q).unwrap();
    let expected = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    for (a, b) in g.value(m).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}
