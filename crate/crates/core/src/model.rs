//! The separation network: encoder, chunking, a stack of SA-MULCAT blocks,
//! a decoder shared by every block, and overlap-add back to waveforms.
//!
//! Embeddings are stored channels-last: the encoder output is `[L × N]`
//! (frames × channels) and chunked embeddings are `[S × R × N]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, NONE};
use crate::error::{shape_err, Error, Result};
use crate::nn::{linear, sa_mulcat, BlockToggles, LinearParams, SaMulcatParams};
use crate::params::{named, param_struct, uniform, Leaf, ParamTree};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One ear in, that ear's estimates out. Binaural input is processed
    /// one ear at a time.
    Siso,
    /// Both ears in, both ears out, each ear taking a turn as reference.
    Mimo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frame size P in samples; the encoder hop is P/2.
    pub frame_size: usize,
    /// Embedding channels N.
    pub channels: usize,
    /// Chunk size R in frames; the chunk hop is R/2.
    pub chunk_size: usize,
    /// BLSTM units per direction H.
    pub hidden: usize,
    /// Attention dimension D.
    pub attention_dim: usize,
    /// Number of SA-MULCAT blocks B.
    pub blocks: usize,
    /// Number of speakers C.
    pub speakers: usize,
    pub dense_connectivity: bool,
    pub self_attention: bool,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_size: 8,
            channels: 128,
            chunk_size: 126,
            hidden: 128,
            attention_dim: 64,
            blocks: 6,
            speakers: 2,
            dense_connectivity: true,
            self_attention: true,
            mode: Mode::Mimo,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for tests and desk-scale training.
    pub fn tiny() -> Self {
        ModelConfig {
            frame_size: 8,
            channels: 16,
            chunk_size: 14,
            hidden: 8,
            attention_dim: 8,
            blocks: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.frame_size < 2 || !self.frame_size.is_multiple_of(2) {
            return fail(format!(
                "frame_size must be even and at least 2, got {}",
                self.frame_size
            ));
        }
        if self.chunk_size < 2 || !self.chunk_size.is_multiple_of(2) {
            return fail(format!(
                "chunk_size must be even and at least 2, got {}",
                self.chunk_size
            ));
        }
        if self.blocks == 0 {
            return fail("blocks must be at least 1".into());
        }
        if self.speakers < 2 {
            return fail(format!(
                "speakers must be at least 2, got {}",
                self.speakers
            ));
        }
        if self.channels == 0 || self.hidden == 0 || self.attention_dim == 0 {
            return fail("channels, hidden and attention_dim must be positive".into());
        }
        Ok(())
    }

    pub fn toggles(&self) -> BlockToggles {
        BlockToggles {
            dense_connectivity: self.dense_connectivity,
            self_attention: self.self_attention,
        }
    }

    /// Indices into `[embedding, out_1, …, out_{b−1}]` consumed by block
    /// `b` (1-based): all of them with dense connectivity, otherwise the
    /// last one.
    pub fn block_inputs(&self, b: usize) -> std::ops::Range<usize> {
        if self.dense_connectivity {
            0..b
        } else {
            b - 1..b
        }
    }
}

param_struct! {
    pub struct DecoderParams<T> {
        /// PReLU slopes `[N]`.
        pub prelu: Leaf<T>,
        /// 1×1 projection `[CN × N]`.
        pub proj: LinearParams<T>,
        /// Waveform basis `[P × N]` mapping a frame embedding to samples.
        pub basis: Leaf<T>,
    }
}

param_struct! {
    pub struct SagrnnParams<T> {
        /// `[N × P]`
        pub encoder_ref: Leaf<T>,
        /// `[N × P]`, MIMO only.
        pub encoder_nonref: Option<Leaf<T>>,
        /// `[N × 2N]`, MIMO only.
        pub fusion: Option<LinearParams<T>>,
        pub blocks: Vec<SaMulcatParams<T>>,
        pub decoder: DecoderParams<T>,
    }
}

impl SagrnnParams<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (p, n) = (cfg.frame_size, cfg.channels);
        let mimo = cfg.mode == Mode::Mimo;
        let encoder_ref = Leaf(uniform(rng, &[n, p], p));
        let encoder_nonref = mimo.then(|| Leaf(uniform(rng, &[n, p], p)));
        let fusion = mimo.then(|| LinearParams::init(rng, 2 * n, n, true));
        let blocks = (1..=cfg.blocks)
            .map(|b| SaMulcatParams::init(rng, b, n, cfg.hidden, cfg.attention_dim, cfg.toggles()))
            .collect();
        let decoder = DecoderParams {
            prelu: Leaf(Tensor::full(vec![n], 0.25)),
            proj: LinearParams::init(rng, n, cfg.speakers * n, true),
            basis: Leaf(uniform(rng, &[p, n], n)),
        };
        Ok(SagrnnParams {
            encoder_ref,
            encoder_nonref,
            fusion,
            blocks,
            decoder,
        })
    }

    pub fn init_seeded(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Checks that names and shapes agree with what `cfg` prescribes.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let expected = Self::init_seeded(cfg, 0)?;
        let shapes = |p: &Self| -> Vec<(String, Vec<usize>)> {
            named(p)
                .into_iter()
                .map(|(k, t)| (k, t.shape().to_vec()))
                .collect()
        };
        let (want, got) = (shapes(&expected), shapes(self));
        if want != got {
            let diff = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", want.len(), got.len()));
            return Err(Error::Config(format!(
                "parameters do not match the model config: {diff}"
            )));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph) -> Result<SagrnnParams<Var>> {
        self.try_map(&mut |t| g.param(t.clone()))
    }
}

/// Number of encoder frames for `t` samples (after tail padding).
pub fn frame_count(t: usize, frame: usize) -> usize {
    let hop = frame / 2;
    if t <= frame {
        1
    } else {
        (t - frame).div_ceil(hop) + 1
    }
}

/// `(S, L')`: chunk count and padded frame count for `l` frames.
pub fn chunk_layout(l: usize, chunk: usize) -> (usize, usize) {
    let hop = chunk / 2;
    let s = if l <= chunk {
        1
    } else {
        (l - chunk).div_ceil(hop) + 1
    };
    (s, (s - 1) * hop + chunk)
}

/// Splits `wave: [T]` into tail-padded frames `[L × P]` at hop P/2.
pub fn frame(g: &mut Graph, wave: Var, frame: usize) -> Result<Var> {
    let t = wave_len(g, wave)?;
    if frame < 2 || !frame.is_multiple_of(2) || t < frame {
        return Err(shape_err!("frame: {t} samples with frame size {frame}"));
    }
    let (hop, l) = (frame / 2, frame_count(t, frame));
    let src = (0..l)
        .flat_map(|f| (0..frame).map(move |k| f * hop + k))
        .map(|i| if i < t { i } else { NONE })
        .collect();
    g.gather(wave, src, vec![l, frame])
}

/// Overlap-add of frames `[L × C × P]` at hop P/2 into `[C × T]`, dividing
/// each sample by the number of frames covering it and dropping samples
/// past `t`.
pub fn overlap_add(g: &mut Graph, frames: Var, t: usize) -> Result<Var> {
    let shape = g.shape(frames).to_vec();
    let [l, c, p] = shape[..] else {
        return Err(shape_err!(
            "overlap_add: expected [L × C × P], got {shape:?}"
        ));
    };
    if p < 2 || p % 2 != 0 {
        return Err(shape_err!("overlap_add: frame size {p} must be even"));
    }
    let hop = p / 2;
    let mut dst = Vec::with_capacity(l * c * p);
    for f in 0..l {
        for ci in 0..c {
            for k in 0..p {
                let i = f * hop + k;
                dst.push(if i < t { ci * t + i } else { NONE });
            }
        }
    }
    g.scatter_mean(frames, dst, vec![c, t])
}

/// Encoder: tail-pad, strided convolution with hop P/2, ReLU. Returns
/// `[L × N]`.
pub fn encode(g: &mut Graph, wave: Var, kernels: Var) -> Result<Var> {
    let t = wave_len(g, wave)?;
    let ks = g.shape(kernels).to_vec();
    let [_, p] = ks[..] else {
        return Err(shape_err!("encode: kernels must be [N × P], got {ks:?}"));
    };
    if p < 2 || p % 2 != 0 || t < p {
        return Err(shape_err!("encode: {t} samples with frame size {p}"));
    }
    let padded = (frame_count(t, p) - 1) * (p / 2) + p;
    let src = (0..padded).map(|i| if i < t { i } else { NONE }).collect();
    let x = g.gather(wave, src, vec![padded])?;
    let u = g.conv1d(x, kernels, p / 2)?;
    let u = g.relu(u)?;
    g.permute(u, &[1, 0])
}

/// `[L × N]` → `[S × R × N]`, chunk `s` covering frames
/// `[s·R/2, s·R/2 + R)`; frames past `L` are zero.
pub fn chunk(g: &mut Graph, u: Var, chunk: usize) -> Result<Var> {
    let shape = g.shape(u).to_vec();
    let [l, n] = shape[..] else {
        return Err(shape_err!("chunk: expected [L × N], got {shape:?}"));
    };
    if chunk < 2 || !chunk.is_multiple_of(2) {
        return Err(shape_err!("chunk: chunk size {chunk} must be even"));
    }
    let (s, _) = chunk_layout(l, chunk);
    let hop = chunk / 2;
    let mut src = Vec::with_capacity(s * chunk * n);
    for si in 0..s {
        for r in 0..chunk {
            let f = si * hop + r;
            src.extend((0..n).map(|c| if f < l { f * n + c } else { NONE }));
        }
    }
    g.gather(u, src, vec![s, chunk, n])
}

/// Inverse of [`chunk`]: overlap-add `[S × R × N]` at hop R/2, divide by the
/// overlap count and truncate to `l` frames.
pub fn merge_chunks(g: &mut Graph, w: Var, l: usize) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    let [s, r, n] = shape[..] else {
        return Err(shape_err!(
            "merge_chunks: expected [S × R × N], got {shape:?}"
        ));
    };
    if r < 2 || r % 2 != 0 || l == 0 {
        return Err(shape_err!("merge_chunks: chunk size {r}, {l} frames"));
    }
    let hop = r / 2;
    let mut dst = Vec::with_capacity(s * r * n);
    for si in 0..s {
        for ri in 0..r {
            let f = si * hop + ri;
            dst.extend((0..n).map(|c| if f < l { f * n + c } else { NONE }));
        }
    }
    g.scatter_mean(w, dst, vec![l, n])
}

/// Decodes one block's chunked embedding `[S × R × N]` into `[C × T]`:
/// PReLU, 1×1 projection to C·N channels, chunk overlap-add, waveform basis
/// per frame, frame overlap-add.
pub fn decode_block(
    g: &mut Graph,
    w: Var,
    dec: &DecoderParams<Var>,
    speakers: usize,
    frames: usize,
    t: usize,
) -> Result<Var> {
    let n = g.shape(dec.prelu.0)[0];
    let x = g.prelu(w, dec.prelu.0)?;
    let x = linear(g, x, &dec.proj)?;
    if g.shape(x)[2] != speakers * n {
        return Err(shape_err!(
            "decode_block: projection gives {} channels for C={speakers}",
            g.shape(x)[2]
        ));
    }
    let merged = merge_chunks(g, x, frames)?;
    let merged = g.reshape(merged, &[frames, speakers, n])?;
    let samples = g.linear(merged, dec.basis.0, None)?;
    overlap_add(g, samples, t)
}

/// Runs the block stack on an encoder output `[L × N]` and decodes every
/// block, returning B estimate sets `[C × T]`.
pub fn separate_embedding(
    g: &mut Graph,
    u: Var,
    params: &SagrnnParams<Var>,
    cfg: &ModelConfig,
    t: usize,
) -> Result<Vec<Var>> {
    if params.blocks.len() != cfg.blocks {
        return Err(Error::Config(format!(
            "{} blocks of parameters for B={}",
            params.blocks.len(),
            cfg.blocks
        )));
    }
    let frames = g.shape(u)[0];
    let mut outputs = vec![chunk(g, u, cfg.chunk_size)?];
    for (i, block) in params.blocks.iter().enumerate() {
        let b = i + 1;
        let inputs = outputs[cfg.block_inputs(b)].to_vec();
        let out = sa_mulcat(g, &inputs, block)?;
        outputs.push(out);
    }
    outputs[1..]
        .iter()
        .map(|&w| decode_block(g, w, &params.decoder, cfg.speakers, frames, t))
        .collect()
}

/// Single-channel separation: B estimate sets `[C × T]`.
pub fn siso_forward(
    g: &mut Graph,
    wave: Var,
    params: &SagrnnParams<Var>,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    let t = wave_len(g, wave)?;
    let u = encode(g, wave, params.encoder_ref.0)?;
    separate_embedding(g, u, params, cfg, t)
}

/// Two-channel input, estimates for the reference channel: B sets `[C × T]`.
pub fn miso_forward(
    g: &mut Graph,
    reference: Var,
    other: Var,
    params: &SagrnnParams<Var>,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    let t = wave_len(g, reference)?;
    if wave_len(g, other)? != t {
        return Err(shape_err!(
            "miso_forward: channel lengths {t} and {} differ",
            g.shape(other)[0]
        ));
    }
    let (Some(nonref), Some(fusion)) = (&params.encoder_nonref, &params.fusion) else {
        return Err(Error::Config(
            "two-channel input needs the non-reference encoder and fusion".into(),
        ));
    };
    let ur = encode(g, reference, params.encoder_ref.0)?;
    let un = encode(g, other, nonref.0)?;
    let joined = g.concat(1, &[ur, un])?;
    let u = linear(g, joined, fusion)?;
    separate_embedding(g, u, params, cfg, t)
}

/// Binaural separation, each ear taking a turn as reference with shared
/// parameters: B sets `[C × 2 × T]`, left ear first.
pub fn mimo_forward(
    g: &mut Graph,
    left: Var,
    right: Var,
    params: &SagrnnParams<Var>,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    let l = miso_forward(g, left, right, params, cfg)?;
    let r = miso_forward(g, right, left, params, cfg)?;
    stack_ears(g, &l, &r)
}

/// Binaural forward in the configured mode: B sets `[C × 2 × T]`.
pub fn forward_binaural(
    g: &mut Graph,
    left: Var,
    right: Var,
    params: &SagrnnParams<Var>,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    match cfg.mode {
        Mode::Mimo => mimo_forward(g, left, right, params, cfg),
        Mode::Siso => {
            let l = siso_forward(g, left, params, cfg)?;
            let r = siso_forward(g, right, params, cfg)?;
            stack_ears(g, &l, &r)
        }
    }
}

fn stack_ears(g: &mut Graph, left: &[Var], right: &[Var]) -> Result<Vec<Var>> {
    left.iter()
        .zip(right)
        .map(|(&l, &r)| {
            let [c, t] = g.shape(l)[..] else {
                unreachable!("decoder output is [C × T]")
            };
            let l = g.reshape(l, &[c, 1, t])?;
            let r = g.reshape(r, &[c, 1, t])?;
            g.concat(1, &[l, r])
        })
        .collect()
}

/// Stacks per-block estimates into one `[B × …]` tensor.
pub fn stack_blocks(g: &mut Graph, blocks: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(blocks.len());
    for &b in blocks {
        let mut shape = vec![1];
        shape.extend_from_slice(g.shape(b));
        parts.push(g.reshape(b, &shape)?);
    }
    g.concat(0, &parts)
}

/// Inference on a binaural mixture: last block's estimates `[C × 2 × T]`.
pub fn separate(
    params: &SagrnnParams<Tensor>,
    cfg: &ModelConfig,
    left: &[f64],
    right: &[f64],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.try_map(&mut |t| g.constant(t.clone()))?;
    let l = g.constant(Tensor::new(vec![left.len()], left.to_vec())?)?;
    let r = g.constant(Tensor::new(vec![right.len()], right.to_vec())?)?;
    let out = forward_binaural(&mut g, l, r, &p, cfg)?;
    Ok(g.value(*out.last().expect("at least one block")).clone())
}

fn wave_len(g: &Graph, wave: Var) -> Result<usize> {
    match g.shape(wave) {
        [t] => Ok(*t),
        s => Err(shape_err!("expected a waveform [T], got {s:?}")),
    }
}

#[cfg(test)]
mod tests;
