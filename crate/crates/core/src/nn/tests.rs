use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{grad_check_params, DEFAULT_STEP};
use crate::params::{named, ParamTree};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn bind<P: ParamTree<Leaf = Tensor>>(g: &mut Graph, p: &P) -> P::Mapped<Var> {
    p.try_map(&mut |t| g.param(t.clone())).unwrap()
}

fn zeroed<P: ParamTree<Leaf = Tensor> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    z
}

fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let w = g.constant(random(g.shape(v), 4242))?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Gradient check of `f` over `input` and every leaf of `tree`, sampling at
/// most `max_coords` coordinates.
///
/// Attention key biases are skipped: they shift every score of a query row
/// by the same amount, so their exact gradient is zero and a relative error
/// against finite-difference noise is meaningless.
fn check_tree<P, F>(tree: &P, input: &Tensor, max_coords: usize, f: F) -> f64
where
    P: ParamTree<Leaf = Tensor, Mapped<Tensor> = P> + Clone,
    F: Fn(&mut Graph, Var, &P::Mapped<Var>) -> Result<Var>,
{
    let leaves = named(tree);
    let mut all = vec![input.clone()];
    let mut checked = vec![true];
    for (name, t) in leaves {
        checked.push(!name.ends_with("key.bias"));
        all.push(t);
    }
    let mut coords: Vec<(usize, usize)> = all
        .iter()
        .enumerate()
        .filter(|(p, _)| checked[*p])
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let mut r = rng(77);
    while coords.len() > max_coords {
        let i = r.random_range(0..coords.len());
        coords.swap_remove(i);
    }
    grad_check_params(
        |g, vars| {
            let mut it = vars[1..].iter();
            let bound = tree.try_map(&mut |_| Ok(*it.next().unwrap()))?;
            f(g, vars[0], &bound)
        },
        &all,
        &coords,
        DEFAULT_STEP,
    )
    .unwrap()
}

#[test]
fn lstm_step_zero_params_give_zero_state() {
    let p = zeroed(&LstmParams::init(&mut rng(1), 3, 2));
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let x = g.constant(random(&[3], 2)).unwrap();
    let h = g.constant(Tensor::zeros(vec![2])).unwrap();
    let c = g.constant(Tensor::zeros(vec![2])).unwrap();
    let (h1, c1) = lstm_step(&mut g, x, h, c, &pv).unwrap();
    assert_eq!(g.value(h1).data(), &[0.0, 0.0]);
    assert_eq!(g.value(c1).data(), &[0.0, 0.0]);
}

#[test]
fn lstm_step_saturated_gates_hand_evaluation() {
    // One unit, zero weights, gates i=f=o driven to ≈1 by bias 100, cell bias 0.5:
    // c' = σ(100)·c + σ(100)·tanh(0.5), h' = σ(100)·tanh(c').
    let s = 1.0 / (1.0 + (-100f64).exp());
    let p = LstmParams {
        w_ih: Leaf(Tensor::zeros(vec![4, 1])),
        w_hh: Leaf(Tensor::zeros(vec![4, 1])),
        bias: Leaf(Tensor::vector(vec![100.0, 100.0, 0.5, 100.0])),
    };
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let x = g.constant(Tensor::vector(vec![0.7])).unwrap();
    let h = g.constant(Tensor::vector(vec![0.0])).unwrap();
    let c = g.constant(Tensor::vector(vec![0.0])).unwrap();
    let (h1, c1) = lstm_step(&mut g, x, h, c, &pv).unwrap();
    let c_expect = s * 0.5f64.tanh();
    assert!((g.value(c1).data()[0] - c_expect).abs() < 1e-15);
    assert!((g.value(c1).data()[0] - 0.5f64.tanh()).abs() < 1e-15);
    assert!((g.value(h1).data()[0] - s * c_expect.tanh()).abs() < 1e-15);
}

#[test]
fn lstm_step_gradient() {
    let p = LstmParams::init(&mut rng(3), 3, 4);
    let x = random(&[3], 4);
    let err = check_tree(&p, &x, 1000, |g, x, pv| {
        let h0 = g.constant(random(&[4], 5))?;
        let c0 = g.constant(random(&[4], 6))?;
        let (h, c) = lstm_step(g, x, h0, c0, pv)?;
        let hs = g.mul(h, h)?;
        let cs = g.mul(c, c)?;
        let s = g.add(hs, cs)?;
        g.sum(s)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fused_lstm_matches_stepwise_cell() {
    let p = LstmParams::init(&mut rng(7), 3, 4);
    let x = random(&[2, 5, 3], 8);
    for reverse in [false, true] {
        let mut g = Graph::new();
        let pv = bind(&mut g, &p);
        let xv = g.constant(x.clone()).unwrap();
        let fused = g
            .lstm(xv, pv.w_ih.0, pv.w_hh.0, pv.bias.0, reverse)
            .unwrap();
        let fused = g.value(fused).clone();
        for b in 0..2 {
            let mut h = g.constant(Tensor::zeros(vec![4])).unwrap();
            let mut c = g.constant(Tensor::zeros(vec![4])).unwrap();
            let order: Vec<usize> = if reverse {
                (0..5).rev().collect()
            } else {
                (0..5).collect()
            };
            for t in order {
                let xt = g
                    .constant(Tensor::vector(
                        x.data()[(b * 5 + t) * 3..(b * 5 + t + 1) * 3].to_vec(),
                    ))
                    .unwrap();
                (h, c) = lstm_step(&mut g, xt, h, c, &pv).unwrap();
                for j in 0..4 {
                    let diff = (g.value(h).data()[j] - fused.at(&[b, t, j])).abs();
                    assert!(diff < 1e-14, "b={b} t={t} j={j}: {diff}");
                }
            }
        }
    }
}

#[test]
fn blstm_single_step_is_concat_of_cells() {
    let p = BlstmParams::init(&mut rng(9), 3, 2);
    let x = random(&[1, 1, 3], 10);
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let xv = g.constant(x.clone()).unwrap();
    let y = blstm(&mut g, xv, &pv).unwrap();
    let x1 = g.constant(Tensor::vector(x.data().to_vec())).unwrap();
    let z = g.constant(Tensor::zeros(vec![2])).unwrap();
    let (hf, _) = lstm_step(&mut g, x1, z, z, &pv.forward).unwrap();
    let (hb, _) = lstm_step(&mut g, x1, z, z, &pv.backward).unwrap();
    let expect = [g.value(hf).data(), g.value(hb).data()].concat();
    assert_eq!(g.shape(y), &[1, 1, 4]);
    for (a, b) in g.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn blstm_time_reversal_symmetry() {
    let p = BlstmParams::init(&mut rng(11), 3, 2);
    let swapped = BlstmParams {
        forward: p.backward.clone(),
        backward: p.forward.clone(),
    };
    let (m, h) = (6, 2);
    let x = random(&[1, m, 3], 12);
    let mut rev = Vec::new();
    for t in (0..m).rev() {
        rev.extend_from_slice(&x.data()[t * 3..(t + 1) * 3]);
    }
    let xr = Tensor::new(vec![1, m, 3], rev).unwrap();

    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let sv = bind(&mut g, &swapped);
    let xv = g.constant(x).unwrap();
    let xrv = g.constant(xr).unwrap();
    let y = blstm(&mut g, xv, &pv).unwrap();
    let yr = blstm(&mut g, xrv, &sv).unwrap();
    let (y, yr) = (g.value(y), g.value(yr));
    for t in 0..m {
        for j in 0..h {
            assert_eq!(yr.at(&[0, t, j]), y.at(&[0, m - 1 - t, h + j]));
            assert_eq!(yr.at(&[0, t, h + j]), y.at(&[0, m - 1 - t, j]));
        }
    }
}

#[test]
fn blstm_zero_params_give_zero_output() {
    let p = zeroed(&BlstmParams::init(&mut rng(13), 3, 2));
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let x = g.constant(random(&[2, 4, 3], 14)).unwrap();
    let y = blstm(&mut g, x, &pv).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_single_key_has_unit_weight() {
    let p = AttentionParams::init(&mut rng(15), 4, 3);
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let z = g.constant(random(&[2, 1, 4], 16)).unwrap();
    let out = self_attention_weights(&mut g, z, &pv).unwrap();
    assert!(g.value(out.weights).data().iter().all(|&w| w == 1.0));

    let v = linear(&mut g, z, &pv.value).unwrap();
    let merged = linear(&mut g, v, &pv.merge).unwrap();
    let skip = g.concat(2, &[merged, z]).unwrap();
    let expect = linear(&mut g, skip, &pv.fuse).unwrap();
    assert_eq!(g.value(out.output), g.value(expect));
}

#[test]
fn attention_rows_sum_to_one() {
    let p = AttentionParams::init(&mut rng(17), 5, 3);
    for seed in 0..20 {
        let mut g = Graph::new();
        let pv = bind(&mut g, &p);
        let z = g
            .constant(random(&[3, 9, 5], 100 + seed).map(|v| 4.0 * v))
            .unwrap();
        let out = self_attention_weights(&mut g, z, &pv).unwrap();
        for row in g.value(out.weights).data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_is_row_permutation_equivariant() {
    let p = AttentionParams::init(&mut rng(18), 4, 3);
    let m = 7;
    let z = random(&[1, m, 4], 19);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let mut zp = Vec::new();
    for &r in &perm {
        zp.extend_from_slice(&z.data()[r * 4..(r + 1) * 4]);
    }
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let zv = g.constant(z).unwrap();
    let zpv = g.constant(Tensor::new(vec![1, m, 4], zp).unwrap()).unwrap();
    let y = self_attention(&mut g, zv, &pv).unwrap();
    let yp = self_attention(&mut g, zpv, &pv).unwrap();
    for (i, &r) in perm.iter().enumerate() {
        for c in 0..4 {
            assert!((g.value(yp).at(&[0, i, c]) - g.value(y).at(&[0, r, c])).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_gradient() {
    let p = AttentionParams::init(&mut rng(20), 4, 3);
    let z = random(&[2, 5, 4], 21);
    let err = check_tree(&p, &z, 400, |g, z, pv| {
        let y = self_attention(g, z, pv)?;
        weighted_sum(g, y)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn attention_key_bias_has_no_effect() {
    let p = AttentionParams::init(&mut rng(46), 4, 3);
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let z = g.constant(random(&[2, 5, 4], 47)).unwrap();
    let y = self_attention(&mut g, z, &pv).unwrap();
    let loss = weighted_sum(&mut g, y).unwrap();
    let grads = g.backward(loss).unwrap();
    let key_bias = pv.key.bias.as_ref().unwrap().0;
    assert!(grads
        .get(key_bias)
        .unwrap()
        .data()
        .iter()
        .all(|v| v.abs() < 1e-12));
}

#[test]
fn gated_rnn_with_silent_second_blstm_projects_input_only() {
    let mut p = GatedRnnParams::init(&mut rng(22), 4, 3);
    p.second = zeroed(&p.second);
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let x = g.constant(random(&[2, 5, 4], 23)).unwrap();
    let y = gated_rnn(&mut g, x, &pv).unwrap();
    let zeros = g.constant(Tensor::zeros(vec![2, 5, 6])).unwrap();
    let joined = g.concat(2, &[zeros, x]).unwrap();
    let expect = linear(&mut g, joined, &pv.proj).unwrap();
    assert_eq!(g.value(y), g.value(expect));
}

#[test]
fn gated_rnn_shapes() {
    let p = GatedRnnParams::init(&mut rng(24), 4, 3);
    for m in [1, 5, 14] {
        let mut g = Graph::new();
        let pv = bind(&mut g, &p);
        let x = g.constant(random(&[2, m, 4], 25)).unwrap();
        let y = gated_rnn(&mut g, x, &pv).unwrap();
        assert_eq!(g.shape(y), &[2, m, 4]);
    }
}

#[test]
fn gated_rnn_gradient() {
    let p = GatedRnnParams::init(&mut rng(26), 3, 2);
    let x = random(&[2, 4, 3], 27);
    let err = check_tree(&p, &x, 500, |g, x, pv| {
        let y = gated_rnn(g, x, pv)?;
        weighted_sum(g, y)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn subblock_with_zero_interior_is_identity() {
    for attention in [true, false] {
        let p = zeroed(&SubblockParams::init(&mut rng(28), 4, 3, 2, attention));
        let mut g = Graph::new();
        let pv = bind(&mut g, &p);
        let x = g.constant(random(&[3, 7, 4], 29)).unwrap();
        let y = subblock(&mut g, x, &pv).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}

#[test]
fn subblock_shape_and_gradient() {
    let p = SubblockParams::init(&mut rng(30), 3, 2, 2, true);
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let x = g.constant(random(&[1, 7, 3], 31)).unwrap();
    let y = subblock(&mut g, x, &pv).unwrap();
    assert_eq!(g.shape(y), &[1, 7, 3]);

    let x = random(&[2, 4, 3], 32);
    let err = check_tree(&p, &x, 500, |g, x, pv| {
        let y = subblock(g, x, pv)?;
        weighted_sum(g, y)
    });
    assert!(err < 1e-4, "{err}");
}

const ALL_ON: BlockToggles = BlockToggles {
    dense_connectivity: true,
    self_attention: true,
};
const ALL_OFF: BlockToggles = BlockToggles {
    dense_connectivity: false,
    self_attention: false,
};

#[test]
fn first_block_takes_single_input_without_projection() {
    let p = SaMulcatParams::init(&mut rng(33), 1, 4, 3, 2, ALL_ON);
    assert!(p.dense_proj.is_none());
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let x = g.constant(random(&[3, 5, 4], 34)).unwrap();
    let y = sa_mulcat(&mut g, &[x], &pv).unwrap();
    assert_eq!(g.shape(y), &[3, 5, 4]);
    assert!(sa_mulcat(&mut g, &[x, x], &pv).is_err());
}

#[test]
fn dense_block_projects_concatenated_inputs() {
    let p = SaMulcatParams::init(&mut rng(35), 3, 4, 3, 2, ALL_ON);
    assert_eq!(p.dense_proj.as_ref().unwrap().weight.0.shape(), &[4, 12]);
    // Zero interiors leave exactly the projected input.
    let mut z = zeroed(&p);
    z.dense_proj = p.dense_proj.clone();
    let mut g = Graph::new();
    let pv = bind(&mut g, &z);
    let ins: Vec<Var> = (0..3)
        .map(|i| g.constant(random(&[3, 5, 4], 36 + i)).unwrap())
        .collect();
    let y = sa_mulcat(&mut g, &ins, &pv).unwrap();
    let joined = g.concat(2, &ins).unwrap();
    let proj = linear(&mut g, joined, pv.dense_proj.as_ref().unwrap()).unwrap();
    assert_eq!(g.value(y), g.value(proj));
}

#[test]
fn ablation_without_dc_and_sa_is_plain_mulcat() {
    let p = SaMulcatParams::init(&mut rng(37), 4, 4, 3, 2, ALL_OFF);
    assert!(p.dense_proj.is_none());
    assert!(p.intra.attention.is_none() && p.inter.attention.is_none());
    let mut g = Graph::new();
    let pv = bind(&mut g, &p);
    let x = g.constant(random(&[3, 5, 4], 40)).unwrap();
    let y = sa_mulcat(&mut g, &[x], &pv).unwrap();

    let a = gated_rnn(&mut g, x, &pv.intra.rnn).unwrap();
    let a = g.add(a, x).unwrap();
    let t = g.permute(a, &[1, 0, 2]).unwrap();
    let b = gated_rnn(&mut g, t, &pv.inter.rnn).unwrap();
    let b = g.add(b, t).unwrap();
    let expect = g.permute(b, &[1, 0, 2]).unwrap();
    assert_eq!(g.value(y), g.value(expect));
}

#[test]
fn sa_mulcat_preserves_shape_for_small_and_large_extents() {
    let p = SaMulcatParams::init(&mut rng(41), 2, 4, 3, 2, ALL_ON);
    for (s, r) in [(1, 1), (2, 2), (1, 6), (6, 1), (5, 6)] {
        let mut g = Graph::new();
        let pv = bind(&mut g, &p);
        let a = g.constant(random(&[s, r, 4], 42)).unwrap();
        let b = g.constant(random(&[s, r, 4], 43)).unwrap();
        let y = sa_mulcat(&mut g, &[a, b], &pv).unwrap();
        assert_eq!(g.shape(y), &[s, r, 4]);
    }
}

#[test]
fn sa_mulcat_gradient() {
    let p = SaMulcatParams::init(&mut rng(44), 2, 3, 2, 2, ALL_ON);
    let x = random(&[3, 4, 3], 45);
    let err = check_tree(&p, &x, 300, |g, x, pv| {
        let x2 = g.scale(x, 0.5)?;
        let y = sa_mulcat(g, &[x, x2], pv)?;
        weighted_sum(g, y)
    });
    assert!(err < 1e-4, "{err}");
}
