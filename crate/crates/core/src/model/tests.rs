use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{grad_check_params, DEFAULT_STEP};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn tiny(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        ..ModelConfig::tiny()
    }
}

#[test]
fn frame_and_chunk_arithmetic() {
    assert_eq!(frame_count(32000, 8), 7999);
    assert_eq!(chunk_layout(7999, 126), (126, 8001));
    assert_eq!(chunk_layout(126, 126), (1, 126));
    assert_eq!(chunk_layout(5, 126), (1, 126));
    assert_eq!(frame_count(4000, 8), 999);
    assert_eq!(frame_count(8, 8), 1);
    assert_eq!(frame_count(9, 8), 2);
    assert_eq!(frame_count(13, 8), 3);
}

#[test]
fn encoder_output_length_on_four_seconds() {
    let mut g = Graph::new();
    let w = g.constant(random(&[32000], 1)).unwrap();
    let k = g.constant(random(&[2, 8], 2)).unwrap();
    let u = encode(&mut g, w, k).unwrap();
    assert_eq!(g.shape(u), &[7999, 2]);
    assert!(g.value(u).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn encoder_of_silence_is_zero() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::zeros(vec![50])).unwrap();
    let k = g.constant(random(&[4, 8], 3)).unwrap();
    let u = encode(&mut g, w, k).unwrap();
    assert!(g.value(u).data().iter().all(|&v| v == 0.0));
    let short = g.constant(Tensor::zeros(vec![7])).unwrap();
    assert!(encode(&mut g, short, k).is_err());
}

#[test]
fn single_chunk_passes_through() {
    let mut g = Graph::new();
    let u = g.constant(random(&[6, 3], 4)).unwrap();
    let w = chunk(&mut g, u, 6).unwrap();
    assert_eq!(g.shape(w), &[1, 6, 3]);
    assert_eq!(g.value(w).data(), g.value(u).data());
    let back = merge_chunks(&mut g, w, 6).unwrap();
    assert_eq!(g.value(back), g.value(u));
}

#[test]
fn merge_chunks_matches_direct_summation() {
    let (s, r, n) = (3, 4, 4);
    let w = random(&[s, r, n], 5);
    let l = (s - 1) * (r / 2) + r;
    let mut sum = vec![0.0; l * n];
    let mut count = vec![0.0; l];
    for si in 0..s {
        for ri in 0..r {
            let f = si * 2 + ri;
            count[f] += 1.0;
            for c in 0..n {
                sum[f * n + c] += w.at(&[si, ri, c]);
            }
        }
    }
    let mut g = Graph::new();
    let wv = g.constant(w).unwrap();
    let m = merge_chunks(&mut g, wv, l).unwrap();
    for f in 0..l {
        for c in 0..n {
            assert!((g.value(m).at(&[f, c]) - sum[f * n + c] / count[f]).abs() < 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunk_merge_roundtrip(l in 1usize..60, half in 1usize..8, n in 1usize..4, seed in any::<u64>()) {
        let r = 2 * half;
        let u = random(&[l, n], seed);
        let mut g = Graph::new();
        let uv = g.constant(u.clone()).unwrap();
        let w = chunk(&mut g, uv, r).unwrap();
        let (s, _) = chunk_layout(l, r);
        prop_assert_eq!(g.shape(w), &[s, r, n]);
        let back = merge_chunks(&mut g, w, l).unwrap();
        prop_assert!(g.value(back).max_abs_diff(&u).unwrap() <= 1e-12);
    }

    #[test]
    fn frame_overlap_add_roundtrip(half in 1usize..6, extra in 0usize..40, seed in any::<u64>()) {
        let p = 2 * half;
        let t = p + extra;
        let x = random(&[t], seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let frames = frame(&mut g, xv, p).unwrap();
        let l = frame_count(t, p);
        prop_assert_eq!(g.shape(frames), &[l, p]);
        let frames = g.reshape(frames, &[l, 1, p]).unwrap();
        let y = overlap_add(&mut g, frames, t).unwrap();
        prop_assert!(g.value(y).data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

#[test]
fn decoding_zero_embedding_gives_silence() {
    let cfg = tiny(Mode::Siso);
    let params = SagrnnParams::init_seeded(&cfg, 6).unwrap();
    let mut dec = params.decoder.clone();
    if let Some(b) = dec.proj.bias.as_mut() {
        b.0.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let d = dec.try_map(&mut |t| g.constant(t.clone())).unwrap();
    let (s, _) = chunk_layout(30, 14);
    let w = g.constant(Tensor::zeros(vec![s, 14, 16])).unwrap();
    let y = decode_block(&mut g, w, &d, 2, 30, 123).unwrap();
    assert_eq!(g.shape(y), &[2, 123]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_encoder_decoder_reproduces_the_input() {
    // N = P with unit kernels and an identity waveform basis: the encoder
    // reads frames, the decoder writes them back.
    let (p, c, t) = (6, 2, 41);
    let eye = |n: usize| {
        let mut m = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            m.data_mut()[i * n + i] = 1.0;
        }
        m
    };
    let mut stacked = eye(p).into_data();
    stacked.extend(eye(p).into_data());
    let dec = DecoderParams {
        prelu: Leaf(Tensor::ones(vec![p])),
        proj: LinearParams {
            weight: Leaf(Tensor::new(vec![c * p, p], stacked).unwrap()),
            bias: None,
        },
        basis: Leaf(eye(p)),
    };
    let x = random(&[t], 7).map(|v| v.abs() + 0.1);
    let mut g = Graph::new();
    let d = dec.try_map(&mut |t| g.constant(t.clone())).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let k = g.constant(eye(p)).unwrap();
    let u = encode(&mut g, xv, k).unwrap();
    let l = g.shape(u)[0];
    let w = chunk(&mut g, u, 4).unwrap();
    let y = decode_block(&mut g, w, &d, c, l, t).unwrap();
    for ci in 0..c {
        for i in 0..t {
            assert!((g.value(y).at(&[ci, i]) - x.data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn siso_output_shape_on_half_a_second() {
    let cfg = tiny(Mode::Siso);
    let params = SagrnnParams::init_seeded(&cfg, 8).unwrap();
    assert!(params.encoder_nonref.is_none() && params.fusion.is_none());
    let mut g = Graph::new();
    let p = params.bind(&mut g).unwrap();
    let w = g.constant(random(&[4000], 9)).unwrap();
    let out = siso_forward(&mut g, w, &p, &cfg).unwrap();
    let stacked = stack_blocks(&mut g, &out).unwrap();
    assert_eq!(g.shape(stacked), &[2, 2, 4000]);
}

#[test]
fn estimate_length_equals_input_length() {
    for (p, r) in [(2, 2), (4, 6), (8, 14)] {
        let cfg = ModelConfig {
            frame_size: p,
            chunk_size: r,
            mode: Mode::Siso,
            blocks: 1,
            ..ModelConfig::tiny()
        };
        let params = SagrnnParams::init_seeded(&cfg, 10).unwrap();
        for t in [p, p + 1, 3 * p + 1, 97] {
            let mut g = Graph::new();
            let pv = params.bind(&mut g).unwrap();
            let w = g.constant(random(&[t], 11)).unwrap();
            let out = siso_forward(&mut g, w, &pv, &cfg).unwrap();
            assert_eq!(g.shape(out[0]), &[2, t], "P={p} R={r} T={t}");
        }
    }
}

#[test]
fn single_block_pipeline() {
    let cfg = ModelConfig {
        blocks: 1,
        ..tiny(Mode::Siso)
    };
    let params = SagrnnParams::init_seeded(&cfg, 12).unwrap();
    assert_eq!(params.blocks.len(), 1);
    assert!(params.blocks[0].dense_proj.is_none());
    let mut g = Graph::new();
    let p = params.bind(&mut g).unwrap();
    let w = g.constant(random(&[200], 13)).unwrap();
    let out = siso_forward(&mut g, w, &p, &cfg).unwrap();
    assert_eq!(out.len(), 1);

    let u = encode(&mut g, w, p.encoder_ref.0).unwrap();
    let l = g.shape(u)[0];
    let c = chunk(&mut g, u, cfg.chunk_size).unwrap();
    let b = sa_mulcat(&mut g, &[c], &p.blocks[0]).unwrap();
    let y = decode_block(&mut g, b, &p.decoder, 2, l, 200).unwrap();
    assert_eq!(g.value(y), g.value(out[0]));
}

#[test]
fn block_fan_in_follows_dense_toggle() {
    let dense = ModelConfig {
        blocks: 4,
        ..ModelConfig::tiny()
    };
    let plain = ModelConfig {
        dense_connectivity: false,
        ..dense
    };
    assert_eq!(dense.block_inputs(1), 0..1);
    assert_eq!(dense.block_inputs(4), 0..4);
    assert_eq!(plain.block_inputs(4), 3..4);
    let p = SagrnnParams::init_seeded(&dense, 14).unwrap();
    for (i, b) in p.blocks.iter().enumerate() {
        let fan_in = b
            .dense_proj
            .as_ref()
            .map_or(1, |d| d.weight.0.shape()[1] / 16);
        assert_eq!(fan_in, i + 1);
    }
    let p = SagrnnParams::init_seeded(&plain, 14).unwrap();
    assert!(p.blocks.iter().all(|b| b.dense_proj.is_none()));
}

#[test]
fn miso_symmetric_encoders_ignore_input_order() {
    let cfg = tiny(Mode::Mimo);
    let mut params = SagrnnParams::init_seeded(&cfg, 15).unwrap();
    params.encoder_nonref = Some(params.encoder_ref.clone());
    let fusion = params.fusion.as_mut().unwrap();
    let n = cfg.channels;
    let w = fusion.weight.0.data_mut();
    for row in w.chunks_mut(2 * n) {
        let (a, b) = row.split_at_mut(n);
        b.copy_from_slice(a);
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g).unwrap();
    let a = g.constant(random(&[150], 16)).unwrap();
    let b = g.constant(random(&[150], 17)).unwrap();
    let ab = miso_forward(&mut g, a, b, &p, &cfg).unwrap();
    let ba = miso_forward(&mut g, b, a, &p, &cfg).unwrap();
    for (x, y) in ab.iter().zip(&ba) {
        assert_eq!(g.shape(*x), &[2, 150]);
        assert!(g.value(*x).max_abs_diff(g.value(*y)).unwrap() < 1e-12);
    }
}

#[test]
fn miso_with_silent_other_channel_fuses_against_zeros() {
    let cfg = tiny(Mode::Mimo);
    let params = SagrnnParams::init_seeded(&cfg, 18).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g).unwrap();
    let a = g.constant(random(&[150], 19)).unwrap();
    let z = g.constant(Tensor::zeros(vec![150])).unwrap();
    let out = miso_forward(&mut g, a, z, &p, &cfg).unwrap();

    let u = encode(&mut g, a, p.encoder_ref.0).unwrap();
    let zeros = g.constant(Tensor::zeros(g.shape(u).to_vec())).unwrap();
    let joined = g.concat(1, &[u, zeros]).unwrap();
    let fused = linear(&mut g, joined, p.fusion.as_ref().unwrap()).unwrap();
    let expect = separate_embedding(&mut g, fused, &p, &cfg, 150).unwrap();
    for (x, y) in out.iter().zip(&expect) {
        assert_eq!(g.value(*x), g.value(*y));
    }
}

#[test]
fn mimo_ear_swap_is_bit_exact() {
    let cfg = tiny(Mode::Mimo);
    let params = SagrnnParams::init_seeded(&cfg, 20).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g).unwrap();
    let l = g.constant(random(&[300], 21)).unwrap();
    let r = g.constant(random(&[300], 22)).unwrap();
    let lr = mimo_forward(&mut g, l, r, &p, &cfg).unwrap();
    let rl = mimo_forward(&mut g, r, l, &p, &cfg).unwrap();
    for (x, y) in lr.iter().zip(&rl) {
        let (x, y) = (g.value(*x), g.value(*y));
        assert_eq!(x.shape(), &[2, 2, 300]);
        for c in 0..2 {
            for i in 0..300 {
                assert_eq!(x.at(&[c, 0, i]).to_bits(), y.at(&[c, 1, i]).to_bits());
                assert_eq!(x.at(&[c, 1, i]).to_bits(), y.at(&[c, 0, i]).to_bits());
            }
        }
    }

    let same = mimo_forward(&mut g, l, l, &p, &cfg).unwrap();
    let v = g.value(same[1]);
    for c in 0..2 {
        for i in 0..300 {
            assert_eq!(v.at(&[c, 0, i]), v.at(&[c, 1, i]));
        }
    }
    let stacked = stack_blocks(&mut g, &same).unwrap();
    assert_eq!(g.shape(stacked), &[2, 2, 2, 300]);
}

#[test]
fn siso_mode_processes_ears_independently() {
    let cfg = tiny(Mode::Siso);
    let params = SagrnnParams::init_seeded(&cfg, 23).unwrap();
    let (l, r) = (random(&[100], 24), random(&[100], 25));
    let both = separate(&params, &cfg, l.data(), r.data()).unwrap();
    let only_left = separate(&params, &cfg, l.data(), l.data()).unwrap();
    for c in 0..2 {
        for i in 0..100 {
            assert_eq!(both.at(&[c, 0, i]), only_left.at(&[c, 0, i]));
        }
    }
}

#[test]
fn mimo_requires_equal_lengths() {
    let cfg = tiny(Mode::Mimo);
    let params = SagrnnParams::init_seeded(&cfg, 26).unwrap();
    assert!(separate(&params, &cfg, &[0.1; 100], &[0.1; 99]).is_err());
}

#[test]
fn config_validation_and_parameter_check() {
    assert!(ModelConfig::default().validate().is_ok());
    for bad in [
        ModelConfig {
            frame_size: 7,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            chunk_size: 13,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            blocks: 0,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            speakers: 1,
            ..ModelConfig::tiny()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let cfg = ModelConfig::tiny();
    let params = SagrnnParams::init_seeded(&cfg, 27).unwrap();
    assert!(params.check_config(&cfg).is_ok());
    assert!(params
        .check_config(&ModelConfig { hidden: 9, ..cfg })
        .is_err());
    assert!(params
        .check_config(&ModelConfig {
            self_attention: false,
            ..cfg
        })
        .is_err());
}

#[test]
fn encoder_gradient_of_scalarized_output() {
    let cfg = ModelConfig {
        blocks: 1,
        ..tiny(Mode::Siso)
    };
    let params = SagrnnParams::init_seeded(&cfg, 28).unwrap();
    let wave = random(&[64], 29);
    let weights = random(&[2, 64], 30);
    let coords: Vec<(usize, usize)> = (0..16).map(|i| (0, i * 8 + i % 8)).collect();
    let err = grad_check_params(
        |g, vars| {
            let mut p = params.try_map(&mut |t| g.constant(t.clone()))?;
            p.encoder_ref = Leaf(vars[0]);
            let w = g.constant(wave.clone())?;
            let out = siso_forward(g, w, &p, &cfg)?;
            let k = g.constant(weights.clone())?;
            let y = g.mul(out[0], k)?;
            g.sum(y)
        },
        std::slice::from_ref(&params.encoder_ref.0),
        &coords,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
