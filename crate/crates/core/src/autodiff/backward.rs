use super::kernels::{add_into, all_finite, mm, mm_nt, mm_tn};
use super::{Gradients, Graph, Node, Op, SnrKind, Var, NONE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adds a contribution into the gradient buffer of `v`, if `v` wants one.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
    f(buf);
}

impl Graph {
    /// Reverse sweep from a scalar `loss`, returning gradients for every node
    /// that requires one. Fan-out accumulates by summation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut out: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            backward_node(nodes, idx, &g, &mut grads);
            for v in node.op.inputs() {
                if grads[v.0].as_ref().is_some_and(|d| !all_finite(d)) {
                    return Err(Error::NonFinite { op: node.op.name() });
                }
            }
            if matches!(node.op, Op::Leaf) {
                out[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn backward_node(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * vb[i];
                }
            });
            acc(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * va[i];
                }
            });
        }
        Op::Scale(x, c) => {
            acc(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
            });
        }
        &Op::MatMul { a, b, m, k, n } => {
            acc(nodes, grads, a, |d| mm_nt(g, val(b), m, n, k, d));
            acc(nodes, grads, b, |d| mm_tn(val(a), g, m, k, n, d));
        }
        &Op::Linear {
            x,
            w,
            b,
            rows,
            fin,
            fout,
        } => {
            acc(nodes, grads, x, |d| mm(g, val(w), rows, fout, fin, d));
            acc(nodes, grads, w, |d| mm_tn(g, val(x), rows, fout, fin, d));
            if let Some(b) = b {
                acc(nodes, grads, b, |d| {
                    for row in g.chunks_exact(fout) {
                        add_into(d, row);
                    }
                });
            }
        }
        &Op::PointwiseLinear {
            x,
            w,
            b,
            fin,
            fout,
            cols,
        } => {
            acc(nodes, grads, x, |d| mm_tn(val(w), g, fout, fin, cols, d));
            acc(nodes, grads, w, |d| mm_nt(g, val(x), fout, cols, fin, d));
            if let Some(b) = b {
                acc(nodes, grads, b, |d| {
                    for (dv, row) in d.iter_mut().zip(g.chunks_exact(cols)) {
                        *dv += row.iter().sum::<f64>();
                    }
                });
            }
        }
        &Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (va, vb) = (val(a), val(b));
            let (sa, sb, sc) = (m * k, k * n, m * n);
            acc(nodes, grads, a, |d| {
                for i in 0..batch {
                    let (gi, bi) = (&g[i * sc..(i + 1) * sc], &vb[i * sb..(i + 1) * sb]);
                    let di = &mut d[i * sa..(i + 1) * sa];
                    if trans_b {
                        mm(gi, bi, m, n, k, di);
                    } else {
                        mm_nt(gi, bi, m, n, k, di);
                    }
                }
            });
            acc(nodes, grads, b, |d| {
                for i in 0..batch {
                    let (gi, ai) = (&g[i * sc..(i + 1) * sc], &va[i * sa..(i + 1) * sa]);
                    let di = &mut d[i * sb..(i + 1) * sb];
                    if trans_b {
                        mm_tn(gi, ai, m, n, k, di);
                    } else {
                        mm_tn(ai, gi, m, k, n, di);
                    }
                }
            });
        }
        &Op::Conv1d {
            x,
            k,
            stride,
            n,
            p,
            l,
        } => {
            let (xv, kv) = (val(x), val(k));
            acc(nodes, grads, x, |d| {
                for ni in 0..n {
                    let kr = &kv[ni * p..(ni + 1) * p];
                    for li in 0..l {
                        let gv = g[ni * l + li];
                        for (dv, kw) in d[li * stride..li * stride + p].iter_mut().zip(kr) {
                            *dv += gv * kw;
                        }
                    }
                }
            });
            acc(nodes, grads, k, |d| {
                for ni in 0..n {
                    let dk = &mut d[ni * p..(ni + 1) * p];
                    for li in 0..l {
                        let gv = g[ni * l + li];
                        for (dv, xw) in dk.iter_mut().zip(&xv[li * stride..li * stride + p]) {
                            *dv += gv * xw;
                        }
                    }
                }
            });
        }
        &Op::Softmax {
            x,
            outer,
            dim,
            inner,
        } => {
            let y = node.value.data();
            acc(nodes, grads, x, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let s: f64 = (0..dim)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..dim {
                            let at = base + j * inner;
                            d[at] += y[at] * (g[at] - s);
                        }
                    }
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x);
            acc(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    if xv[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            acc(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            acc(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        &Op::Prelu { x, a, channels } => {
            let (xv, av) = (val(x), val(a));
            acc(nodes, grads, x, |d| {
                for i in 0..d.len() {
                    let v = xv[i];
                    if v > 0.0 {
                        d[i] += g[i];
                    } else if v < 0.0 {
                        d[i] += g[i] * av[i % channels];
                    }
                }
            });
            acc(nodes, grads, a, |d| {
                for i in 0..xv.len() {
                    if xv[i] < 0.0 {
                        d[i % channels] += g[i] * xv[i];
                    }
                }
            });
        }
        Op::Concat {
            inputs,
            outer,
            inner,
            dims,
        } => {
            let total: usize = dims.iter().sum();
            let mut offset = 0;
            for (&v, &dim) in inputs.iter().zip(dims) {
                let span = dim * inner;
                acc(nodes, grads, v, |d| {
                    for o in 0..*outer {
                        let src = &g[(o * total) * inner + offset..][..span];
                        add_into(&mut d[o * span..(o + 1) * span], src);
                    }
                });
                offset += span;
            }
        }
        Op::Permute { x, map } => {
            acc(nodes, grads, *x, |d| {
                for (&src, &gv) in map.iter().zip(g) {
                    d[src] += gv;
                }
            });
        }
        Op::Reshape(x) => acc(nodes, grads, *x, |d| add_into(d, g)),
        &Op::Narrow {
            x,
            outer,
            inner,
            dim,
            start,
            len,
        } => {
            acc(nodes, grads, x, |d| {
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    add_into(
                        &mut d[base..base + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            });
        }
        Op::Gather { x, src } => {
            acc(nodes, grads, *x, |d| {
                for (&s, &gv) in src.iter().zip(g) {
                    if s != NONE {
                        d[s] += gv;
                    }
                }
            });
        }
        Op::ScatterMean { x, dst, inv_count } => {
            acc(nodes, grads, *x, |d| {
                for (dv, &t) in d.iter_mut().zip(dst) {
                    if t != NONE {
                        *dv += g[t] * inv_count[t];
                    }
                }
            });
        }
        Op::Sum(x) => acc(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Select { x, idx } => {
            acc(nodes, grads, *x, |d| {
                for (&i, &gv) in idx.iter().zip(g) {
                    d[i] += gv;
                }
            });
        }
        Op::Lstm(r) => lstm_backward(nodes, r, node.value.data(), g, grads),
        Op::Snr(r) => {
            let ev = val(r.est);
            acc(nodes, grads, r.est, |d| {
                let k10 = 10.0 / std::f64::consts::LN_10;
                for row in 0..r.rows {
                    let span = row * r.len..(row + 1) * r.len;
                    let (e, rf) = (&ev[span.clone()], &r.reference[span.clone()]);
                    let dr = &mut d[span];
                    let gr = g[row];
                    match r.kind {
                        SnrKind::Plain => {
                            let den: f64 = e
                                .iter()
                                .zip(rf)
                                .map(|(a, b)| (b - a) * (b - a))
                                .sum::<f64>()
                                + r.eps;
                            let c = -2.0 * k10 * gr / den;
                            for i in 0..e.len() {
                                dr[i] += c * (e[i] - rf[i]);
                            }
                        }
                        SnrKind::ScaleInvariant => {
                            let n = e.len() as f64;
                            let me = e.iter().sum::<f64>() / n;
                            let mr = rf.iter().sum::<f64>() / n;
                            let (mut ee, mut rr, mut er) = (0.0, 0.0, 0.0);
                            for i in 0..e.len() {
                                let (a, b) = (e[i] - me, rf[i] - mr);
                                ee += a * a;
                                rr += b * b;
                                er += a * b;
                            }
                            if ee == 0.0 || rr == 0.0 {
                                continue;
                            }
                            let rho2 = er * er / (ee * rr);
                            let dsi = k10 * (1.0 / (rho2 + r.eps) + 1.0 / (1.0 - rho2 + r.eps));
                            let ca = gr * dsi * 2.0 * er / (ee * rr);
                            let cb = gr * dsi * 2.0 * er * er / (ee * ee * rr);
                            for i in 0..e.len() {
                                dr[i] += ca * (rf[i] - mr) - cb * (e[i] - me);
                            }
                        }
                    }
                }
            });
        }
    }
}

fn lstm_backward(
    nodes: &[Node],
    r: &super::LstmRecord,
    out: &[f64],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (batch, steps, hidden, input) = (r.batch, r.steps, r.hidden, r.input);
    let g4 = 4 * hidden;
    let whh = nodes[r.w_hh.0].value.data();
    let need_whh = nodes[r.w_hh.0].requires_grad;
    let mut dpre = vec![0.0; batch * steps * g4];
    let mut dwhh = vec![0.0; if need_whh { g4 * hidden } else { 0 }];
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    for b in 0..batch {
        dh_next.fill(0.0);
        dc_next.fill(0.0);
        for s in (0..steps).rev() {
            let t = if r.reverse { steps - 1 - s } else { s };
            let prev = (s > 0).then(|| b * steps + if r.reverse { t + 1 } else { t - 1 });
            let row = b * steps + t;
            let gates = &r.gates[row * g4..(row + 1) * g4];
            let dp = &mut dpre[row * g4..(row + 1) * g4];
            for j in 0..hidden {
                let (ig, fg, gg, og) = (
                    gates[j],
                    gates[hidden + j],
                    gates[2 * hidden + j],
                    gates[3 * hidden + j],
                );
                let tc = r.cells_tanh[row * hidden + j];
                let dh = g[row * hidden + j] + dh_next[j];
                let dc = dc_next[j] + dh * og * (1.0 - tc * tc);
                let c_prev = prev.map_or(0.0, |p| r.cells[p * hidden + j]);
                dp[j] = dc * gg * ig * (1.0 - ig);
                dp[hidden + j] = dc * c_prev * fg * (1.0 - fg);
                dp[2 * hidden + j] = dc * ig * (1.0 - gg * gg);
                dp[3 * hidden + j] = dh * tc * og * (1.0 - og);
                dc_next[j] = dc * fg;
            }
            dh_next.fill(0.0);
            mm(dp, whh, 1, g4, hidden, &mut dh_next);
            if need_whh {
                if let Some(p) = prev {
                    mm_tn(
                        dp,
                        &out[p * hidden..(p + 1) * hidden],
                        1,
                        g4,
                        hidden,
                        &mut dwhh,
                    );
                }
            }
        }
    }
    let rows = batch * steps;
    acc(nodes, grads, r.x, |d| {
        mm(&dpre, nodes[r.w_ih.0].value.data(), rows, g4, input, d)
    });
    acc(nodes, grads, r.w_ih, |d| {
        mm_tn(&dpre, nodes[r.x.0].value.data(), rows, g4, input, d)
    });
    acc(nodes, grads, r.w_hh, |d| add_into(d, &dwhh));
    acc(nodes, grads, r.bias, |d| {
        for row in dpre.chunks_exact(g4) {
            add_into(d, row);
        }
    });
}
