//! Separation network building blocks: LSTM/BLSTM, the self-attention block,
//! the gated RNN module, subblocks and the SA-MULCAT block.
//!
//! Sequence tensors are laid out `[batch × steps × features]`. A 3-D
//! embedding of N channels, S chunks and R frames per chunk is stored
//! `[S × R × N]`, so the intra-chunk view (S sequences of length R) is the
//! tensor itself and the inter-chunk view (R sequences of length S) is its
//! `[1, 0, 2]` permutation.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{param_struct, uniform, Leaf};
use crate::tensor::Tensor;

param_struct! {
    /// Affine projection over the last axis, `weight: [out × in]`.
    pub struct LinearParams<T> {
        pub weight: Leaf<T>,
        pub bias: Option<Leaf<T>>,
    }
}

param_struct! {
    /// One LSTM direction. Gate order (input, forget, cell, output).
    pub struct LstmParams<T> {
        /// `[4H × I]`
        pub w_ih: Leaf<T>,
        /// `[4H × H]`
        pub w_hh: Leaf<T>,
        /// `[4H]`
        pub bias: Leaf<T>,
    }
}

param_struct! {
    pub struct BlstmParams<T> {
        pub forward: LstmParams<T>,
        pub backward: LstmParams<T>,
    }
}

param_struct! {
    pub struct AttentionParams<T> {
        /// `[D × N]`
        pub query: LinearParams<T>,
        pub key: LinearParams<T>,
        pub value: LinearParams<T>,
        /// `[N × D]`
        pub merge: LinearParams<T>,
        /// `[N × 2N]`, fuses the attention output with the block input.
        pub fuse: LinearParams<T>,
    }
}

param_struct! {
    pub struct GatedRnnParams<T> {
        pub first: BlstmParams<T>,
        pub second: BlstmParams<T>,
        /// `[N × (2H + N)]`
        pub proj: LinearParams<T>,
    }
}

param_struct! {
    pub struct SubblockParams<T> {
        /// Absent when self-attention is disabled.
        pub attention: Option<AttentionParams<T>>,
        pub rnn: GatedRnnParams<T>,
    }
}

param_struct! {
    pub struct SaMulcatParams<T> {
        /// `[N × bN]`, present only on dense blocks after the first.
        pub dense_proj: Option<LinearParams<T>>,
        pub intra: SubblockParams<T>,
        pub inter: SubblockParams<T>,
    }
}

impl LinearParams<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        LinearParams {
            weight: Leaf(uniform(rng, &[fan_out, fan_in], fan_in)),
            bias: with_bias.then(|| Leaf(uniform(rng, &[fan_out], fan_in))),
        }
    }
}

impl LstmParams<Tensor> {
    /// Uniform init with the forget-gate bias set to +1.
    pub fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        let w_ih = uniform(rng, &[4 * hidden, input], input);
        let w_hh = uniform(rng, &[4 * hidden, hidden], hidden);
        let mut bias = uniform(rng, &[4 * hidden], hidden);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmParams {
            w_ih: Leaf(w_ih),
            w_hh: Leaf(w_hh),
            bias: Leaf(bias),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.0.shape()[1]
    }
}

impl BlstmParams<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        BlstmParams {
            forward: LstmParams::init(rng, input, hidden),
            backward: LstmParams::init(rng, input, hidden),
        }
    }
}

impl AttentionParams<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, dim: usize) -> Self {
        AttentionParams {
            query: LinearParams::init(rng, channels, dim, true),
            key: LinearParams::init(rng, channels, dim, true),
            value: LinearParams::init(rng, channels, dim, true),
            merge: LinearParams::init(rng, dim, channels, true),
            fuse: LinearParams::init(rng, 2 * channels, channels, true),
        }
    }
}

impl GatedRnnParams<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, hidden: usize) -> Self {
        GatedRnnParams {
            first: BlstmParams::init(rng, channels, hidden),
            second: BlstmParams::init(rng, channels, hidden),
            proj: LinearParams::init(rng, 2 * hidden + channels, channels, true),
        }
    }
}

impl SubblockParams<Tensor> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        channels: usize,
        hidden: usize,
        dim: usize,
        attention: bool,
    ) -> Self {
        SubblockParams {
            attention: attention.then(|| AttentionParams::init(rng, channels, dim)),
            rnn: GatedRnnParams::init(rng, channels, hidden),
        }
    }
}

/// Structural switches of one SA-MULCAT block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockToggles {
    pub dense_connectivity: bool,
    pub self_attention: bool,
}

impl SaMulcatParams<Tensor> {
    /// Parameters for block `index` (1-based) of the stack.
    pub fn init(
        rng: &mut ChaCha8Rng,
        index: usize,
        channels: usize,
        hidden: usize,
        dim: usize,
        toggles: BlockToggles,
    ) -> Self {
        let dense_proj = (toggles.dense_connectivity && index > 1)
            .then(|| LinearParams::init(rng, index * channels, channels, true));
        SaMulcatParams {
            dense_proj,
            intra: SubblockParams::init(rng, channels, hidden, dim, toggles.self_attention),
            inter: SubblockParams::init(rng, channels, hidden, dim, toggles.self_attention),
        }
    }
}

pub fn linear(g: &mut Graph, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    g.linear(x, p.weight.0, p.bias.as_ref().map(|b| b.0))
}

/// One LSTM cell update from elementary graph ops.
///
/// `x: [I]`, `h`, `c: [H]`. Returns `(h', c')`. The fused sequence op
/// [`Graph::lstm`] computes the same recurrence.
pub fn lstm_step(g: &mut Graph, x: Var, h: Var, c: Var, p: &LstmParams<Var>) -> Result<(Var, Var)> {
    let hidden = g.shape(p.w_hh.0)[1];
    if g.shape(h) != [hidden] || g.shape(c) != [hidden] {
        return Err(shape_err!(
            "lstm_step: state shapes {:?}, {:?} for H={hidden}",
            g.shape(h),
            g.shape(c)
        ));
    }
    let xi = g.reshape(x, &[1, g.shape(x)[0]])?;
    let hi = g.reshape(h, &[1, hidden])?;
    let from_x = g.linear(xi, p.w_ih.0, Some(p.bias.0))?;
    let from_h = g.linear(hi, p.w_hh.0, None)?;
    let pre = g.add(from_x, from_h)?;
    let pre = g.reshape(pre, &[4 * hidden])?;
    let gate = |g: &mut Graph, k: usize| g.narrow(pre, 0, k * hidden, hidden);
    let (i, f, cand, o) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let cand = g.tanh(cand)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let tc = g.tanh(c_next)?;
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Bidirectional LSTM over `x: [batch × M × I]`, returning `[batch × M × 2H]`
/// with forward states first.
pub fn blstm(g: &mut Graph, x: Var, p: &BlstmParams<Var>) -> Result<Var> {
    let fwd = &p.forward;
    let bwd = &p.backward;
    let f = g.lstm(x, fwd.w_ih.0, fwd.w_hh.0, fwd.bias.0, false)?;
    let b = g.lstm(x, bwd.w_ih.0, bwd.w_hh.0, bwd.bias.0, true)?;
    g.concat(2, &[f, b])
}

/// Output of [`self_attention_weights`].
pub struct AttentionOutput {
    pub output: Var,
    /// Softmax weights `[batch × M × M]`, one row per query.
    pub weights: Var,
}

/// Scaled dot-product self-attention over each slice of `z: [batch × M × N]`,
/// also returning the attention weights.
pub fn self_attention_weights(
    g: &mut Graph,
    z: Var,
    p: &AttentionParams<Var>,
) -> Result<AttentionOutput> {
    if g.shape(z).len() != 3 {
        return Err(shape_err!(
            "self_attention: expected [batch × M × N], got {:?}",
            g.shape(z)
        ));
    }
    let q = linear(g, z, &p.query)?;
    let k = linear(g, z, &p.key)?;
    let v = linear(g, z, &p.value)?;
    let dim = g.shape(q)[2] as f64;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / dim.sqrt())?;
    let weights = g.softmax(scores, 2)?;
    let attended = g.batch_matmul(weights, v, false)?;
    let merged = linear(g, attended, &p.merge)?;
    let skip = g.concat(2, &[merged, z])?;
    let output = linear(g, skip, &p.fuse)?;
    Ok(AttentionOutput { output, weights })
}

pub fn self_attention(g: &mut Graph, z: Var, p: &AttentionParams<Var>) -> Result<Var> {
    Ok(self_attention_weights(g, z, p)?.output)
}

/// Two BLSTMs on the same input, multiplied elementwise, concatenated with
/// the input and projected back to N channels.
pub fn gated_rnn(g: &mut Graph, x: Var, p: &GatedRnnParams<Var>) -> Result<Var> {
    let a = blstm(g, x, &p.first)?;
    let b = blstm(g, x, &p.second)?;
    let gated = g.mul(a, b)?;
    let joined = g.concat(2, &[gated, x])?;
    linear(g, joined, &p.proj)
}

/// Self-attention (or identity when absent), then the gated RNN, plus an
/// additive bypass of the whole subblock.
pub fn subblock(g: &mut Graph, x: Var, p: &SubblockParams<Var>) -> Result<Var> {
    let attended = match &p.attention {
        Some(att) => self_attention(g, x, att)?,
        None => x,
    };
    let y = gated_rnn(g, attended, &p.rnn)?;
    g.add(y, x)
}

/// One SA-MULCAT block on embeddings laid out `[S × R × N]`.
///
/// `inputs` are the embeddings this block consumes: every preceding output
/// under dense connectivity, otherwise only the previous one. Dense inputs
/// are concatenated over channels and projected back to N.
pub fn sa_mulcat(g: &mut Graph, inputs: &[Var], p: &SaMulcatParams<Var>) -> Result<Var> {
    let first = *inputs
        .first()
        .ok_or_else(|| Error::Usage("sa_mulcat without inputs".into()))?;
    let shape = g.shape(first).to_vec();
    if shape.len() != 3 || inputs.iter().any(|&v| g.shape(v) != shape.as_slice()) {
        return Err(shape_err!(
            "sa_mulcat: inputs must share one [S × R × N] shape"
        ));
    }
    let x = match (&p.dense_proj, inputs.len()) {
        (None, 1) => first,
        (Some(proj), n) if n > 1 => {
            let joined = g.concat(2, inputs)?;
            if g.shape(proj.weight.0)[1] != g.shape(joined)[2] {
                return Err(shape_err!(
                    "sa_mulcat: dense projection {:?} for {n} inputs",
                    g.shape(proj.weight.0)
                ));
            }
            linear(g, joined, proj)?
        }
        (proj, n) => {
            return Err(Error::Usage(format!(
                "sa_mulcat: {n} inputs with {} dense projection",
                if proj.is_some() { "a" } else { "no" }
            )))
        }
    };
    let intra = subblock(g, x, &p.intra)?;
    let across = g.permute(intra, &[1, 0, 2])?;
    let inter = subblock(g, across, &p.inter)?;
    g.permute(inter, &[1, 0, 2])
}

#[cfg(test)]
mod tests;
