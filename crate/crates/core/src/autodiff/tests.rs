use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{grad_check, grad_check_params, DEFAULT_STEP};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn all_coords(params: &[Tensor]) -> Vec<(usize, usize)> {
    params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect()
}

/// Sum of squares keeps every output coordinate in the gradient.
fn sum_sq(g: &mut Graph, v: Var) -> Result<Var> {
    let sq = g.mul(v, v)?;
    g.sum(sq)
}

/// Weighted sum with fixed pseudo-random weights, so gradients differ per
/// output element.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let w = random(g.shape(v), 999);
    let w = g.constant(w)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g
        .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
        .unwrap();
    let b = g
        .constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap())
        .unwrap();
    let c = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g
        .constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap())
        .unwrap();
    let col = g
        .constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap())
        .unwrap();
    let c = g.matmul(a, col).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);

    assert!(matches!(g.matmul(a, a), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let params = [random(&[3, 4], 1), random(&[4, 2], 2)];
    let err = grad_check_params(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            g.sum(c)
        },
        &params,
        &all_coords(&params),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

fn conv1d_oracle(x: &[f64], k: &Tensor, stride: usize) -> Vec<f64> {
    let (n, p) = (k.shape()[0], k.shape()[1]);
    let l = (x.len() - p) / stride + 1;
    let mut out = vec![0.0; n * l];
    for ni in 0..n {
        for li in 0..l {
            let mut acc = 0.0;
            for pi in 0..p {
                acc += k.at(&[ni, pi]) * x[li * stride + pi];
            }
            out[ni * l + li] = acc;
        }
    }
    out
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]))
        .unwrap();
    let k = g
        .constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap())
        .unwrap();
    let y = g.conv1d(x, k, 2).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 7.0]);

    let one = g
        .constant(Tensor::from_rows(&[vec![1.0]]).unwrap())
        .unwrap();
    let y = g.conv1d(x, one, 1).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let long = g.constant(Tensor::zeros(vec![32000])).unwrap();
    let k8 = g.constant(Tensor::zeros(vec![3, 8])).unwrap();
    let y = g.conv1d(long, k8, 4).unwrap();
    assert_eq!(g.shape(y), &[3, 7999]);

    let short = g.constant(Tensor::zeros(vec![5])).unwrap();
    assert!(matches!(g.conv1d(short, k8, 4), Err(Error::Shape(_))));
}

proptest! {
    #[test]
    fn conv1d_matches_triple_loop(t in 1usize..=64, p in 1usize..=8, n in 1usize..=4, stride in 1usize..=5, seed in 0u64..1000) {
        prop_assume!(t >= p);
        let x = random(&[t], seed);
        let k = random(&[n, p], seed + 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let kv = g.constant(k.clone()).unwrap();
        let y = g.conv1d(xv, kv, stride).unwrap();
        let expect = conv1d_oracle(x.data(), &k, stride);
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let x = random(&[4, 7], seed).map(|v| v * 10.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = g.softmax(xv, 1).unwrap();
        let shifted = g.constant(x.map(|v| v + shift)).unwrap();
        let ys = g.softmax(shifted, 1).unwrap();
        for row in g.value(y).data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)).unwrap() < 1e-12);
    }
}

#[test]
fn conv1d_gradient_matches_finite_differences() {
    let params = [random(&[23], 3), random(&[3, 4], 4)];
    let err = grad_check_params(
        |g, v| {
            let y = g.conv1d(v[0], v[1], 2)?;
            weighted_sum(g, y)
        },
        &params,
        &all_coords(&params),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn pointwise_linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(random(&[3, 2, 2], 5)).unwrap();
    let eye = g
        .constant(
            Tensor::from_rows(&[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ])
            .unwrap(),
        )
        .unwrap();
    let zero = g.constant(Tensor::zeros(vec![3])).unwrap();
    let y = g.pointwise_linear(x, eye, Some(zero)).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let col = g
        .constant(Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap())
        .unwrap();
    let w = g
        .constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap())
        .unwrap();
    let b = g.constant(Tensor::vector(vec![1.0])).unwrap();
    let y = g.pointwise_linear(col, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);

    assert!(matches!(
        g.pointwise_linear(x, w, None),
        Err(Error::Shape(_))
    ));
}

#[test]
fn pointwise_linear_gradient_on_3x4x5() {
    let params = [random(&[3, 4, 5], 6), random(&[2, 3], 7), random(&[2], 8)];
    let err = grad_check_params(
        |g, v| {
            let y = g.pointwise_linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y)
        },
        &params,
        &all_coords(&params),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_gradient() {
    let params = [random(&[2, 3, 4], 9), random(&[5, 4], 10), random(&[5], 11)];
    let err = grad_check_params(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y)
        },
        &params,
        &all_coords(&params),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batch_matmul_gradients() {
    for trans_b in [false, true] {
        let b_shape = if trans_b { [2, 5, 4] } else { [2, 4, 5] };
        let params = [random(&[2, 3, 4], 12), random(&b_shape, 13)];
        let err = grad_check_params(
            |g, v| {
                let y = g.batch_matmul(v[0], v[1], trans_b)?;
                weighted_sum(g, y)
            },
            &params,
            &all_coords(&params),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "trans_b={trans_b}: {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln()])).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_then_sum_of_squares_gradient() {
    let x = random(&[5], 14);
    let err = grad_check(
        |g, v| {
            let s = g.softmax(v, 0)?;
            sum_sq(g, s)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    // Middle axis of a 3-D tensor.
    let x = random(&[2, 3, 4], 15);
    let err = grad_check(
        |g, v| {
            let s = g.softmax(v, 1)?;
            weighted_sum(g, s)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
    let y = g.activation(x, Activation::Relu).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let x = g
        .constant(Tensor::new(vec![2, 1], vec![-4.0, 4.0]).unwrap())
        .unwrap();
    let a = g.constant(Tensor::vector(vec![0.25])).unwrap();
    let y = g.activation(x, Activation::Prelu(a)).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 4.0]);
}

#[test]
fn relu_and_prelu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let a = g.param(Tensor::vector(vec![0.3, 0.3])).unwrap();
    let r = g.relu(x).unwrap();
    let p = g.prelu(x, a).unwrap();
    let s = g.add(r, p).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn activation_gradients() {
    let x = random(&[4, 3], 16);
    for kind in ["tanh", "sigmoid", "relu"] {
        let err = grad_check(
            |g, v| {
                let y = match kind {
                    "tanh" => g.tanh(v)?,
                    "sigmoid" => g.sigmoid(v)?,
                    _ => g.relu(v)?,
                };
                weighted_sum(g, y)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{kind}: {err}");
    }
    let params = [random(&[4, 3], 17), Tensor::vector(vec![0.1, 0.25, -0.2])];
    let err = grad_check_params(
        |g, v| {
            let y = g.prelu(v[0], v[1])?;
            weighted_sum(g, y)
        },
        &params,
        &all_coords(&params),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "prelu: {err}");
}

#[test]
fn combine_concat_permute_examples() {
    let mut g = Graph::new();
    let x = g.constant(random(&[2, 3], 18)).unwrap();
    let ones = g.constant(Tensor::ones(vec![2, 3])).unwrap();
    let y = g.mul(x, ones).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let z = g.constant(random(&[1, 3], 19)).unwrap();
    let c = g.concat(0, &[x, z]).unwrap();
    assert_eq!(g.shape(c), &[3, 3]);
    assert!(matches!(g.concat(1, &[x, z]), Err(Error::Shape(_))));

    let t = g.constant(random(&[2, 3, 4], 20)).unwrap();
    let p = g.permute(t, &[2, 0, 1]).unwrap();
    assert_eq!(g.shape(p), &[4, 2, 3]);
    assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(t).at(&[1, 2, 3]));
    // σ = [2,0,1] has inverse [1,2,0].
    let back = g.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(g.value(back), g.value(t));
    assert!(g.permute(t, &[0, 0, 1]).is_err());
}

#[test]
fn structural_op_gradients() {
    let params = [random(&[2, 3, 4], 21), random(&[2, 1, 4], 22)];
    let err = grad_check_params(
        |g, v| {
            let c = g.concat(1, &[v[0], v[1]])?;
            let p = g.permute(c, &[2, 0, 1])?;
            let n = g.narrow(p, 2, 1, 2)?;
            let r = g.reshape(n, &[4, 4])?;
            let s = g.sub(r, r)?;
            let a = g.add(r, s)?;
            let sc = g.scale(a, -1.5)?;
            let sel = g.select(sc, &[0, 5, 5, 15])?;
            let m = g.mean(sel)?;
            let w = weighted_sum(g, sc)?;
            g.add(m, w)
        },
        &params,
        &all_coords(&params),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gather_and_scatter_mean_gradients() {
    let x = random(&[6], 23);
    let err = grad_check(
        |g, v| {
            let gathered = g.gather(v, vec![0, 1, 2, 1, 2, 3, NONE, 5], vec![8])?;
            let merged = g.scatter_mean(gathered, vec![0, 1, 1, 2, 2, NONE, 3, 3], vec![4])?;
            weighted_sum(g, merged)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn lstm_gradient() {
    let (i, h) = (3, 4);
    let params = [
        random(&[2, 5, i], 24),
        random(&[4 * h, i], 25),
        random(&[4 * h, h], 26),
        random(&[4 * h], 27),
    ];
    for reverse in [false, true] {
        let err = grad_check_params(
            |g, v| {
                let y = g.lstm(v[0], v[1], v[2], v[3], reverse)?;
                weighted_sum(g, y)
            },
            &params,
            &all_coords(&params),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "reverse={reverse}: {err}");
    }
}

#[test]
fn snr_gradients() {
    let reference = random(&[3, 40], 28);
    let est = random(&[3, 40], 29).map(|v| v * 0.5);
    for si in [false, true] {
        let err = grad_check(
            |g, v| {
                let s = if si {
                    g.si_snr_db(v, &reference, 1e-8)?
                } else {
                    g.snr_db(v, &reference, 1e-8)?
                };
                weighted_sum(g, s)
            },
            &est,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "si={si}: {err}");
    }
}

#[test]
fn backward_examples() {
    let x0 = random(&[3, 2], 30);
    let mut g = Graph::new();
    let x = g.param(x0.clone()).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones(vec![3, 2]));

    let mut g = Graph::new();
    let x = g.param(x0.clone()).unwrap();
    let loss = sum_sq(&mut g, x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &x0.map(|v| 2.0 * v));
}

#[test]
fn backward_accumulates_across_fan_out() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let a = g.scale(x, 3.0).unwrap();
    let b = g.add(a, x).unwrap();
    let loss = g.sum(b).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(vec![2])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn non_finite_values_are_reported_with_the_op() {
    let mut g = Graph::new();
    assert!(matches!(
        g.leaf(Tensor::vector(vec![f64::NAN]), true),
        Err(Error::NonFinite { op: "leaf" })
    ));

    // Finite forward pass whose gradient overflows in the hadamard rule.
    let x = g.param(Tensor::vector(vec![1e-200])).unwrap();
    let big = g.constant(Tensor::vector(vec![1e200])).unwrap();
    let p = g.mul(big, x).unwrap();
    let s = g.sum(p).unwrap();
    let loss = g.scale(s, 1e200).unwrap();
    assert!(matches!(
        g.backward(loss),
        Err(Error::NonFinite { op: "hadamard" })
    ));

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1e200])).unwrap();
    assert!(matches!(
        g.mul(x, x),
        Err(Error::NonFinite { op: "hadamard" })
    ));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(random(&[2, 6, 3], 31)).unwrap();
        let w_ih = g.param(random(&[8, 3], 32)).unwrap();
        let w_hh = g.param(random(&[8, 2], 33)).unwrap();
        let b = g.param(random(&[8], 34)).unwrap();
        let y = g.lstm(x, w_ih, w_hh, b, false).unwrap();
        let s = g.softmax(y, 1).unwrap();
        let loss = sum_sq(&mut g, s).unwrap();
        let grads = g.backward(loss).unwrap();
        (
            g.value(loss).clone(),
            grads.get(w_hh).unwrap().clone(),
            grads.get(x).unwrap().clone(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(vec![2])).unwrap();
    let c = g.constant(Tensor::ones(vec![2])).unwrap();
    let p = g.mul(x, c).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(x).is_some());
}
