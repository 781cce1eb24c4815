use super::kernels::{self, mm, mm_nt, sigmoid, transpose};
use super::{Graph, LstmRecord, Op, SnrKind, SnrRecord, Var, NONE};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Elementwise nonlinearity selector for [`Graph::activation`].
#[derive(Clone, Copy, Debug)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Parametric ReLU with one learnable slope per last-axis channel.
    Prelu(Var),
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k, n },
        )
    }

    /// Affine map over the last axis: `x[…×F] · wᵀ + b` with `w: [G×F]`, `b: [G]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let fin = *xs
            .last()
            .ok_or_else(|| shape_err!("linear: scalar input"))?;
        if ws.len() != 2 || ws[1] != fin {
            return Err(shape_err!("linear: input {xs:?} with weight {ws:?}"));
        }
        let fout = ws[0];
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [fout] {
                return Err(shape_err!(
                    "linear: bias {:?} for {fout} outputs",
                    self.shape(b)
                ));
            }
        }
        let rows = numel(&xs) / fin;
        let mut out = vec![0.0; rows * fout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        mm_nt(
            self.value(x).data(),
            self.value(w).data(),
            rows,
            fin,
            fout,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Linear {
                x,
                w,
                b,
                rows,
                fin,
                fout,
            },
        )
    }

    /// Affine map over the leading axis: `w · x + b` applied independently at
    /// every position of the trailing grid. `x: [F×…]`, `w: [G×F]`, `b: [G]`.
    pub fn pointwise_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if xs.is_empty() || ws.len() != 2 || ws[1] != xs[0] {
            return Err(shape_err!(
                "pointwise_linear: input {xs:?} with weight {ws:?}"
            ));
        }
        let (fin, fout) = (xs[0], ws[0]);
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [fout] {
                return Err(shape_err!("pointwise_linear: bias {:?}", self.shape(b)));
            }
        }
        let cols = numel(&xs) / fin;
        let mut out = vec![0.0; fout * cols];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_exact_mut(cols).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        mm(
            self.value(w).data(),
            self.value(x).data(),
            fout,
            fin,
            cols,
            &mut out,
        );
        let mut shape = xs;
        shape[0] = fout;
        self.push(
            Tensor::from_parts(shape, out),
            Op::PointwiseLinear {
                x,
                w,
                b,
                fin,
                fout,
                cols,
            },
        )
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`, or `a · bᵀ` with `b[B×n×k]`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err!("batch_matmul: {sa:?} · {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(shape_err!(
                "batch_matmul: {sa:?} · {sb:?} (trans_b={trans_b})"
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt(ai, bi, m, k, n, oi);
            } else {
                mm(ai, bi, m, k, n, oi);
            }
        }
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        )
    }

    /// Strided 1-D convolution (cross-correlation) of `x: [T]` with
    /// `kernels: [N×P]`, giving `[N×L]` with `L = (T−P)/stride + 1`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(kernels)?;
        let xs = self.shape(x);
        let ks = self.shape(kernels);
        if xs.len() != 1 || ks.len() != 2 {
            return Err(shape_err!("conv1d: input {xs:?}, kernels {ks:?}"));
        }
        if stride == 0 {
            return Err(Error::Usage("conv1d: stride must be at least 1".into()));
        }
        let (t, n, p) = (xs[0], ks[0], ks[1]);
        if t < p {
            return Err(shape_err!(
                "conv1d: input length {t} shorter than kernel {p}"
            ));
        }
        let l = (t - p) / stride + 1;
        let xv = self.value(x).data();
        let kv = self.value(kernels).data();
        let mut out = vec![0.0; n * l];
        for ni in 0..n {
            let kr = &kv[ni * p..(ni + 1) * p];
            for li in 0..l {
                out[ni * l + li] = kernels::dot(kr, &xv[li * stride..li * stride + p]);
            }
        }
        self.push(
            Tensor::from_parts(vec![n, l], out),
            Op::Conv1d {
                x,
                k: kernels,
                stride,
                n,
                p,
                l,
            },
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax: axis {axis} for shape {shape:?}"));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let max = (0..dim)
                    .map(|d| xv[base + d * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let e = (xv[base + d * inner] - max).exp();
                    out[base + d * inner] = e;
                    total += e;
                }
                for d in 0..dim {
                    out[base + d * inner] /= total;
                }
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// Parametric ReLU; `slopes` has one entry per last-axis channel of `x`.
    pub fn prelu(&mut self, x: Var, slopes: Var) -> Result<Var> {
        self.check(x)?;
        self.check(slopes)?;
        let xs = self.shape(x).to_vec();
        let channels = *xs.last().ok_or_else(|| shape_err!("prelu: scalar input"))?;
        if self.shape(slopes) != [channels] {
            return Err(shape_err!(
                "prelu: slopes {:?} for input {xs:?}",
                self.shape(slopes)
            ));
        }
        let a = self.value(slopes).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[i % channels] * v })
            .collect();
        self.push(
            Tensor::from_parts(xs, data),
            Op::Prelu {
                x,
                a: slopes,
                channels,
            },
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
            Activation::Prelu(a) => self.prelu(x, a),
        }
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat: axis {axis} for shape {base:?}"));
        }
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat on axis {axis}: {base:?} vs {s:?}"));
            }
            dims.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &d) in inputs.iter().zip(&dims) {
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                dims,
            },
        )
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if order.len() != shape.len()
            || order
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err!("permute: order {order:?} for shape {shape:?}"));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
        let src_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let total = numel(&shape);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out_shape.len()];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for ax in (0..out_shape.len()).rev() {
                idx[ax] += 1;
                off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        let xv = self.value(x).data();
        let data = map.iter().map(|&i| xv[i]).collect();
        self.push(Tensor::from_parts(out_shape, data), Op::Permute { x, map })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!(
                "narrow: axis {axis} [{start}, +{len}) of {shape:?}"
            ));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow {
                x,
                outer,
                inner,
                dim,
                start,
                len,
            },
        )
    }

    /// `out[o] = x[src[o]]`, or zero where `src[o]` is the `NONE` sentinel.
    pub(crate) fn gather(&mut self, x: Var, src: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x).data();
        if src.len() != numel(&shape) || src.iter().any(|&s| s != NONE && s >= xv.len()) {
            return Err(shape_err!("gather: bad index map for shape {shape:?}"));
        }
        let data = src
            .iter()
            .map(|&s| if s == NONE { 0.0 } else { xv[s] })
            .collect();
        self.push(Tensor::new(shape, data)?, Op::Gather { x, src })
    }

    /// Sums `x[i]` into `out[dst[i]]` and divides every output by the number
    /// of contributions it received. `NONE` entries are dropped; outputs that
    /// receive nothing are zero.
    pub(crate) fn scatter_mean(
        &mut self,
        x: Var,
        dst: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        self.check(x)?;
        let n_out = numel(&shape);
        let xv = self.value(x).data();
        if dst.len() != xv.len() || dst.iter().any(|&d| d != NONE && d >= n_out) {
            return Err(shape_err!(
                "scatter_mean: bad index map for shape {shape:?}"
            ));
        }
        let mut count = vec![0u32; n_out];
        let mut out = vec![0.0; n_out];
        for (&d, &v) in dst.iter().zip(xv) {
            if d != NONE {
                out[d] += v;
                count[d] += 1;
            }
        }
        let inv_count: Vec<f64> = count
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / f64::from(c) })
            .collect();
        for (o, &c) in out.iter_mut().zip(&count) {
            if c > 1 {
                *o /= f64::from(c);
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::ScatterMean { x, dst, inv_count },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Picks elements of the flattened `x`.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x).data();
        if idx.is_empty() || idx.iter().any(|&i| i >= xv.len()) {
            return Err(shape_err!(
                "select: indices {idx:?} for {} elements",
                xv.len()
            ));
        }
        let data = idx.iter().map(|&i| xv[i]).collect();
        self.push(
            Tensor::from_parts(vec![idx.len()], data),
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Runs an LSTM over every sequence of `x: [batch × steps × I]` from zero
    /// initial state, returning all hidden states `[batch × steps × H]`.
    ///
    /// Gate order in `w_ih: [4H×I]`, `w_hh: [4H×H]` and `bias: [4H]` is
    /// (input, forget, cell, output). With `reverse` the sequence is consumed
    /// from the last step to the first; outputs stay at their original
    /// positions.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        for v in [x, w_ih, w_hh, bias] {
            self.check(v)?;
        }
        let xs = self.shape(x).to_vec();
        let (wis, whs, bs) = (self.shape(w_ih), self.shape(w_hh), self.shape(bias));
        if xs.len() != 3 || wis.len() != 2 || whs.len() != 2 || bs.len() != 1 {
            return Err(shape_err!(
                "lstm: x {xs:?}, w_ih {wis:?}, w_hh {whs:?}, b {bs:?}"
            ));
        }
        let (batch, steps, input) = (xs[0], xs[1], xs[2]);
        let hidden = whs[1];
        let g4 = 4 * hidden;
        if wis != [g4, input] || whs != [g4, hidden] || bs != [g4] {
            return Err(shape_err!(
                "lstm: x {xs:?}, w_ih {wis:?}, w_hh {whs:?}, b {bs:?}"
            ));
        }

        // Input contributions for every step at once.
        let mut gates = vec![0.0; batch * steps * g4];
        let bv = self.value(bias).data();
        for row in gates.chunks_exact_mut(g4) {
            row.copy_from_slice(bv);
        }
        mm_nt(
            self.value(x).data(),
            self.value(w_ih).data(),
            batch * steps,
            input,
            g4,
            &mut gates,
        );

        let whh_t = transpose(self.value(w_hh).data(), g4, hidden);
        let mut cells = vec![0.0; batch * steps * hidden];
        let mut cells_tanh = vec![0.0; batch * steps * hidden];
        let mut out = vec![0.0; batch * steps * hidden];
        let mut h_prev = vec![0.0; hidden];
        let mut c_prev = vec![0.0; hidden];
        for b in 0..batch {
            h_prev.fill(0.0);
            c_prev.fill(0.0);
            for s in 0..steps {
                let t = if reverse { steps - 1 - s } else { s };
                let row = b * steps + t;
                let gr = &mut gates[row * g4..(row + 1) * g4];
                mm(&h_prev, &whh_t, 1, hidden, g4, gr);
                for j in 0..hidden {
                    let i_g = sigmoid(gr[j]);
                    let f_g = sigmoid(gr[hidden + j]);
                    let g_g = gr[2 * hidden + j].tanh();
                    let o_g = sigmoid(gr[3 * hidden + j]);
                    gr[j] = i_g;
                    gr[hidden + j] = f_g;
                    gr[2 * hidden + j] = g_g;
                    gr[3 * hidden + j] = o_g;
                    let c = f_g * c_prev[j] + i_g * g_g;
                    let tc = c.tanh();
                    cells[row * hidden + j] = c;
                    cells_tanh[row * hidden + j] = tc;
                    out[row * hidden + j] = o_g * tc;
                }
                h_prev.copy_from_slice(&out[row * hidden..(row + 1) * hidden]);
                c_prev.copy_from_slice(&cells[row * hidden..(row + 1) * hidden]);
            }
        }
        let record = LstmRecord {
            x,
            w_ih,
            w_hh,
            bias,
            reverse,
            batch,
            steps,
            input,
            hidden,
            gates,
            cells,
            cells_tanh,
        };
        self.push(
            Tensor::from_parts(vec![batch, steps, hidden], out),
            Op::Lstm(Box::new(record)),
        )
    }

    /// Row-wise SNR in dB of `est: [K×T]` against a constant `reference`:
    /// `10·log10((‖r‖²+ε)/(‖r−e‖²+ε))`.
    pub fn snr_db(&mut self, est: Var, reference: &Tensor, eps: f64) -> Result<Var> {
        self.snr_like(est, reference, eps, SnrKind::Plain)
    }

    /// Row-wise scale-invariant SNR in dB of `est: [K×T]` against a constant
    /// `reference`. See [`crate::loss::si_snr_db`] for the definition.
    pub fn si_snr_db(&mut self, est: Var, reference: &Tensor, eps: f64) -> Result<Var> {
        self.snr_like(est, reference, eps, SnrKind::ScaleInvariant)
    }

    fn snr_like(&mut self, est: Var, reference: &Tensor, eps: f64, kind: SnrKind) -> Result<Var> {
        self.check(est)?;
        let es = self.shape(est);
        if es != reference.shape() || es.len() != 2 {
            return Err(shape_err!(
                "snr: estimate {es:?}, reference {:?}",
                reference.shape()
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!(
                "snr epsilon must be positive, got {eps}"
            )));
        }
        let (rows, len) = (es[0], es[1]);
        let ev = self.value(est).data();
        let rv = reference.data();
        let values = (0..rows)
            .map(|k| {
                let e = &ev[k * len..(k + 1) * len];
                let r = &rv[k * len..(k + 1) * len];
                match kind {
                    SnrKind::Plain => crate::loss::snr_db_slice(e, r, eps),
                    SnrKind::ScaleInvariant => crate::loss::si_snr_db_slice(e, r, eps),
                }
            })
            .collect();
        let record = SnrRecord {
            est,
            kind,
            rows,
            len,
            eps,
            reference: rv.to_vec(),
        };
        self.push(
            Tensor::from_parts(vec![rows], values),
            Op::Snr(Box::new(record)),
        )
    }
}
