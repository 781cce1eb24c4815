//! The standing gradient suite: every graph op, every layer, and the full
//! tiny-config loss in both channel modes.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_params, DEFAULT_STEP};
use crate::autodiff::{Graph, Var, NONE};
use crate::error::Result;
use crate::loss::{multi_scale_loss_var, LossConfig};
use crate::model::{self, forward_binaural, DecoderParams, Mode, ModelConfig, SagrnnParams};
use crate::nn::{
    self, AttentionParams, BlockToggles, BlstmParams, GatedRnnParams, LstmParams, SaMulcatParams,
};
use crate::params::{named, ParamTree};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

type Body = Box<dyn Fn() -> Result<(f64, usize)> + Send + Sync>;

/// A named check returning (max relative error, coordinates checked).
pub struct Case {
    pub name: String,
    body: Body,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        body: impl Fn() -> Result<(f64, usize)> + Send + Sync + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            body: Box::new(body),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub rows: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        writeln!(
            f,
            "{:<width$}  {:>7}  {:>12}  result",
            "case", "coords", "max rel err"
        )?;
        for r in &self.rows {
            let verdict = if r.max_rel_err < self.tolerance {
                "pass"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<width$}  {:>7}  {:>12.3e}  {verdict}",
                r.name, r.coords, r.max_rel_err
            )?;
        }
        write!(
            f,
            "tolerance {:.0e}: {}",
            self.tolerance,
            if self.passed() {
                "all passed"
            } else {
                "FAILED"
            }
        )
    }
}

pub fn run(cases: &[Case], tolerance: f64) -> Result<SuiteReport> {
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let (max_rel_err, coords) = (c.body)()?;
        rows.push(CaseResult {
            name: c.name.clone(),
            max_rel_err,
            coords,
        });
    }
    Ok(SuiteReport { tolerance, rows })
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
}

/// Reduces `v` to a scalar with fixed random weights, so every output
/// coordinate carries a distinct cotangent.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let w = g.constant(random(g.shape(v), 4242))?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn sample_coords(params: &[Tensor], skip: &[bool], max: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .filter(|(p, _)| !skip[*p])
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    while coords.len() > max {
        let i = r.random_range(0..coords.len());
        coords.swap_remove(i);
    }
    coords.sort_unstable();
    coords
}

/// Checks every coordinate of plain tensor arguments.
fn tensors_case<F>(name: &str, params: Vec<Tensor>, f: F) -> Case
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
{
    Case::new(name, move || {
        let coords = sample_coords(&params, &vec![false; params.len()], usize::MAX, 0);
        Ok((
            grad_check_params(&f, &params, &coords, DEFAULT_STEP)?,
            coords.len(),
        ))
    })
}

/// Checks `inputs` and up to `max_coords` sampled parameter coordinates of
/// `tree`.
///
/// Attention key biases are skipped: they shift every score of a query row
/// by the same amount, which softmax cancels, so their exact gradient is
/// zero and the relative error against difference noise is meaningless.
fn tree_case<P, F>(name: &str, tree: P, inputs: Vec<Tensor>, max_coords: usize, f: F) -> Case
where
    P: ParamTree<Leaf = Tensor> + Send + Sync + 'static,
    F: Fn(&mut Graph, &[Var], &P::Mapped<Var>) -> Result<Var> + Send + Sync + 'static,
{
    Case::new(name, move || {
        let k = inputs.len();
        let mut all = inputs.clone();
        let mut skip = vec![false; k];
        for (leaf, t) in named(&tree) {
            skip.push(leaf.ends_with("key.bias"));
            all.push(t);
        }
        let coords = sample_coords(&all, &skip, max_coords, 77);
        let err = grad_check_params(
            |g, vars| {
                let mut it = vars[k..].iter();
                let bound = tree.try_map(&mut |_| Ok(*it.next().expect("one var per leaf")))?;
                f(g, &vars[..k], &bound)
            },
            &all,
            &coords,
            DEFAULT_STEP,
        )?;
        Ok((err, coords.len()))
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn op_cases() -> Vec<Case> {
    vec![
        tensors_case(
            "add/sub/mul/scale",
            vec![random(&[3, 4], 1), random(&[3, 4], 2)],
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let s = g.sub(a, v[1])?;
                let m = g.mul(s, v[1])?;
                let c = g.scale(m, -0.7)?;
                weighted_sum(g, c)
            },
        ),
        tensors_case(
            "matmul",
            vec![random(&[3, 5], 3), random(&[5, 4], 4)],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y)
            },
        ),
        tensors_case(
            "linear",
            vec![random(&[2, 3, 5], 5), random(&[4, 5], 6), random(&[4], 7)],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(g, y)
            },
        ),
        tensors_case(
            "pointwise_linear",
            vec![random(&[3, 4, 5], 8), random(&[2, 3], 9), random(&[2], 10)],
            |g, v| {
                let y = g.pointwise_linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(g, y)
            },
        ),
        tensors_case(
            "batch_matmul",
            vec![
                random(&[2, 3, 4], 11),
                random(&[2, 4, 5], 12),
                random(&[2, 5, 4], 13),
            ],
            |g, v| {
                let a = g.batch_matmul(v[0], v[1], false)?;
                let b = g.batch_matmul(v[0], v[2], true)?;
                let (wa, wb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
                g.add(wa, wb)
            },
        ),
        tensors_case(
            "conv1d",
            vec![random(&[23], 14), random(&[3, 6], 15)],
            |g, v| {
                let y = g.conv1d(v[0], v[1], 3)?;
                weighted_sum(g, y)
            },
        ),
        tensors_case("softmax", vec![random(&[3, 4, 5], 16)], |g, v| {
            let a = g.softmax(v[0], 1)?;
            let b = g.softmax(v[0], 2)?;
            let s = g.add(a, b)?;
            weighted_sum(g, s)
        }),
        tensors_case(
            "relu/sigmoid/tanh/prelu",
            vec![
                random(&[4, 3], 17).map(|x| x + 0.05 * x.signum()),
                random(&[3], 18),
            ],
            |g, v| {
                let r = g.relu(v[0])?;
                let s = g.sigmoid(v[0])?;
                let t = g.tanh(v[0])?;
                let p = g.prelu(v[0], v[1])?;
                let a = g.add(r, s)?;
                let b = g.mul(t, p)?;
                let c = g.add(a, b)?;
                weighted_sum(g, c)
            },
        ),
        tensors_case(
            "concat/permute/narrow/reshape/select",
            vec![random(&[2, 3, 4], 19), random(&[2, 1, 4], 20)],
            |g, v| {
                let c = g.concat(1, &[v[0], v[1]])?;
                let p = g.permute(c, &[2, 0, 1])?;
                let n = g.narrow(p, 2, 1, 2)?;
                let r = g.reshape(n, &[4, 4])?;
                let sel = g.select(r, &[0, 5, 5, 15])?;
                let m = g.mean(sel)?;
                let w = weighted_sum(g, r)?;
                g.add(m, w)
            },
        ),
        tensors_case("gather/scatter_mean", vec![random(&[6], 21)], |g, v| {
            let gathered = g.gather(v[0], vec![0, 1, 2, 1, 2, 3, NONE, 5], vec![8])?;
            let merged = g.scatter_mean(gathered, vec![0, 1, 1, 2, 2, NONE, 3, 3], vec![4])?;
            weighted_sum(g, merged)
        }),
        tensors_case(
            "lstm (both directions)",
            vec![
                random(&[2, 5, 3], 22),
                random(&[16, 3], 23),
                random(&[16, 4], 24),
                random(&[16], 25),
            ],
            |g, v| {
                let f = g.lstm(v[0], v[1], v[2], v[3], false)?;
                let b = g.lstm(v[0], v[1], v[2], v[3], true)?;
                let (wf, wb) = (weighted_sum(g, f)?, weighted_sum(g, b)?);
                g.add(wf, wb)
            },
        ),
        tensors_case("snr/si_snr", vec![random(&[3, 40], 26)], |g, v| {
            let reference = random(&[3, 40], 27);
            let a = g.snr_db(v[0], &reference, 1e-8)?;
            let b = g.si_snr_db(v[0], &reference, 1e-8)?;
            let (wa, wb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
            g.add(wa, wb)
        }),
    ]
}

fn layer_cases() -> Vec<Case> {
    let toggles = BlockToggles {
        dense_connectivity: true,
        self_attention: true,
    };
    vec![
        tree_case(
            "lstm_step",
            LstmParams::init(&mut rng(30), 3, 4),
            vec![random(&[3], 31), random(&[4], 32), random(&[4], 33)],
            200,
            |g, x, p| {
                let (h, c) = nn::lstm_step(g, x[0], x[1], x[2], p)?;
                let (a, b) = (weighted_sum(g, h)?, weighted_sum(g, c)?);
                g.add(a, b)
            },
        ),
        tree_case(
            "blstm",
            BlstmParams::init(&mut rng(34), 3, 4),
            vec![random(&[2, 5, 3], 35)],
            200,
            |g, x, p| {
                let y = nn::blstm(g, x[0], p)?;
                weighted_sum(g, y)
            },
        ),
        tree_case(
            "self_attention",
            AttentionParams::init(&mut rng(36), 6, 4),
            vec![random(&[2, 5, 6], 37)],
            200,
            |g, x, p| {
                let y = nn::self_attention(g, x[0], p)?;
                weighted_sum(g, y)
            },
        ),
        tree_case(
            "gated_rnn",
            GatedRnnParams::init(&mut rng(38), 6, 3),
            vec![random(&[2, 4, 6], 39)],
            200,
            |g, x, p| {
                let y = nn::gated_rnn(g, x[0], p)?;
                weighted_sum(g, y)
            },
        ),
        tree_case(
            "sa_mulcat (dense, block 2)",
            SaMulcatParams::init(&mut rng(40), 2, 6, 3, 4, toggles),
            vec![random(&[3, 4, 6], 41), random(&[3, 4, 6], 42)],
            250,
            |g, x, p| {
                let y = nn::sa_mulcat(g, x, p)?;
                weighted_sum(g, y)
            },
        ),
        tree_case(
            "encoder",
            crate::params::Leaf(random(&[5, 8], 43)),
            vec![random(&[37], 44).map(|v| v + 0.02)],
            200,
            |g, x, k| {
                let u = model::encode(g, x[0], k.0)?;
                weighted_sum(g, u)
            },
        ),
        tensors_case("chunk/merge", vec![random(&[9, 3], 46)], |g, x| {
            let w = model::chunk(g, x[0], 4)?;
            let m = model::merge_chunks(g, w, 9)?;
            let y = g.mul(m, m)?;
            weighted_sum(g, y)
        }),
        tree_case(
            "decoder",
            decoder_params(),
            vec![random(&[4, 4, 5], 47)],
            250,
            |g, x, p| {
                let y = model::decode_block(g, x[0], p, 2, 9, 40)?;
                weighted_sum(g, y)
            },
        ),
    ]
}

fn decoder_params() -> DecoderParams<Tensor> {
    let cfg = ModelConfig {
        frame_size: 8,
        channels: 5,
        chunk_size: 4,
        hidden: 3,
        attention_dim: 4,
        blocks: 1,
        ..ModelConfig::tiny()
    };
    SagrnnParams::init(&cfg, &mut rng(48))
        .expect("valid config")
        .decoder
}

/// Full multi-scale PIT loss of the tiny configuration on a short random
/// binaural input, sampling parameter coordinates.
pub fn full_model_case(mode: Mode, samples: usize, max_coords: usize) -> Case {
    let cfg = ModelConfig {
        mode,
        ..ModelConfig::tiny()
    };
    let name = format!(
        "full model ({})",
        if mode == Mode::Mimo { "mimo" } else { "siso" }
    );
    let params = SagrnnParams::init(&cfg, &mut rng(50)).expect("tiny config is valid");
    let reference = random(&[cfg.speakers, 2, samples], 51);
    let inputs = vec![random(&[samples], 52), random(&[samples], 53)];
    let loss = LossConfig::default();
    tree_case(&name, params, inputs, max_coords, move |g, x, p| {
        let blocks = forward_binaural(g, x[0], x[1], p, &cfg)?;
        multi_scale_loss_var(g, &blocks, &reference, &loss)
    })
}

/// Every case of the standing suite.
pub fn default_cases() -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(layer_cases());
    cases.push(full_model_case(Mode::Mimo, 120, 400));
    cases.push(full_model_case(Mode::Siso, 120, 200));
    cases
}
