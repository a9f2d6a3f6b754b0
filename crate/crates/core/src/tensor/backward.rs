//! Reverse sweep. Nodes were appended in execution order, so walking the tape
//! backwards visits every child before its parents; unreached branches keep a
//! `None` buffer and cost nothing.

use super::ops::{head_block, lanes, matmul_nt, matmul_raw, transpose_raw};
use super::{Gradients, Node, Op, Tape, Var};

impl Tape {
    /// Accumulates `dLoss/dNode` for every tensor the scalar `loss` reaches.
    /// Leaves created with `constant` are never reported.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let shape = self.nodes.borrow()[loss.id].shape.clone();
        assert!(
            shape.iter().product::<usize>() == 1,
            "backward expects a scalar loss, got shape {shape:?}"
        );
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep from externally supplied output gradients. Used to chain
    /// tapes: a downstream tape's gradients at copied-over values seed the
    /// upstream tape here.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, Vec<f64>)]) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut buffers: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut top = 0;
        for (var, seed) in seeds {
            assert!(
                std::ptr::eq(var.tape, self),
                "backward_seeded called with a seed from a different tape"
            );
            assert_eq!(seed.len(), nodes[var.id].data.len(), "seed length mismatch at node {}", var.id);
            let buf = buffers[var.id].get_or_insert_with(|| vec![0.0; seed.len()]);
            for (o, g) in buf.iter_mut().zip(seed) {
                *o += g;
            }
            top = top.max(var.id);
        }
        for id in (0..=top).rev() {
            let Some(grad) = buffers[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                step(&nodes, &mut buffers, node, &grad);
            }
            buffers[id] = Some(grad);
        }
        Gradients { buffers }
    }
}

fn accumulate(nodes: &[Node], buffers: &mut [Option<Vec<f64>>], parent: usize, add: impl FnOnce(&mut [f64])) {
    if !nodes[parent].requires_grad {
        return;
    }
    let buf = buffers[parent].get_or_insert_with(|| vec![0.0; nodes[parent].data.len()]);
    add(buf);
}

fn step(nodes: &[Node], buffers: &mut [Option<Vec<f64>>], node: &Node, grad: &[f64]) {
    match &node.op {
        Op::Leaf => {}

        Op::Add(a, b) => {
            accumulate(nodes, buffers, *a, |buf| {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o += g;
                }
            });
            accumulate(nodes, buffers, *b, |buf| {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o += g;
                }
            });
        }

        Op::Sub(a, b) => {
            accumulate(nodes, buffers, *a, |buf| {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o += g;
                }
            });
            accumulate(nodes, buffers, *b, |buf| {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o -= g;
                }
            });
        }

        Op::Mul(a, b) => {
            accumulate(nodes, buffers, *a, |buf| {
                for ((o, g), x) in buf.iter_mut().zip(grad).zip(&nodes[*b].data) {
                    *o += g * x;
                }
            });
            accumulate(nodes, buffers, *b, |buf| {
                for ((o, g), x) in buf.iter_mut().zip(grad).zip(&nodes[*a].data) {
                    *o += g * x;
                }
            });
        }

        Op::Scale(a, c) => {
            accumulate(nodes, buffers, *a, |buf| {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o += g * c;
                }
            });
        }

        Op::ScaleBy(a, s) => {
            let sv = nodes[*s].data[0];
            accumulate(nodes, buffers, *a, |buf| {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o += g * sv;
                }
            });
            accumulate(nodes, buffers, *s, |buf| {
                buf[0] += grad.iter().zip(&nodes[*a].data).map(|(g, x)| g * x).sum::<f64>();
            });
        }

        Op::Recip(a) => {
            accumulate(nodes, buffers, *a, |buf| {
                for ((o, g), x) in buf.iter_mut().zip(grad).zip(&nodes[*a].data) {
                    *o -= g / (x * x);
                }
            });
        }

        Op::AddBias(a, b) => {
            let d = nodes[*b].data.len();
            accumulate(nodes, buffers, *a, |buf| {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o += g;
                }
            });
            accumulate(nodes, buffers, *b, |buf| {
                for grow in grad.chunks(d) {
                    for (o, g) in buf.iter_mut().zip(grow) {
                        *o += g;
                    }
                }
            });
        }

        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            accumulate(nodes, buffers, *a, |buf| {
                let bt = transpose_raw(&nodes[*b].data, k, n);
                let da = matmul_raw(grad, &bt, m, n, k);
                for (o, g) in buf.iter_mut().zip(&da) {
                    *o += g;
                }
            });
            accumulate(nodes, buffers, *b, |buf| {
                let at = transpose_raw(&nodes[*a].data, m, k);
                let db = matmul_raw(&at, grad, k, m, n);
                for (o, g) in buf.iter_mut().zip(&db) {
                    *o += g;
                }
            });
        }

        Op::Transpose(a) => {
            let (rows, cols) = (node.shape[0], node.shape[1]);
            accumulate(nodes, buffers, *a, |buf| {
                let gt = transpose_raw(grad, rows, cols);
                for (o, g) in buf.iter_mut().zip(&gt) {
                    *o += g;
                }
            });
        }

        Op::Concat { axis, parts } => {
            if *axis == 0 || node.shape.len() == 1 {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].data.len();
                    accumulate(nodes, buffers, p, |buf| {
                        for (o, g) in buf.iter_mut().zip(&grad[offset..offset + len]) {
                            *o += g;
                        }
                    });
                    offset += len;
                }
            } else {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut col = 0;
                for &p in parts {
                    let d = nodes[p].shape[1];
                    accumulate(nodes, buffers, p, |buf| {
                        for r in 0..rows {
                            for j in 0..d {
                                buf[r * d + j] += grad[r * total + col + j];
                            }
                        }
                    });
                    col += d;
                }
            }
        }

        Op::StackRows { parts } => {
            let d = node.shape[1];
            for (r, &p) in parts.iter().enumerate() {
                accumulate(nodes, buffers, p, |buf| {
                    for (o, g) in buf.iter_mut().zip(&grad[r * d..(r + 1) * d]) {
                        *o += g;
                    }
                });
            }
        }

        Op::SliceRows { a, start } => {
            let d = node.shape[1];
            accumulate(nodes, buffers, *a, |buf| {
                for (o, g) in buf[start * d..].iter_mut().zip(grad) {
                    *o += g;
                }
            });
        }

        Op::Row { a, i } => {
            let d = node.shape[0];
            accumulate(nodes, buffers, *a, |buf| {
                for (o, g) in buf[i * d..(i + 1) * d].iter_mut().zip(grad) {
                    *o += g;
                }
            });
        }

        Op::Reshape(a) => {
            accumulate(nodes, buffers, *a, |buf| {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o += g;
                }
            });
        }

        Op::Relu(a) => {
            accumulate(nodes, buffers, *a, |buf| {
                for ((o, g), x) in buf.iter_mut().zip(grad).zip(&nodes[*a].data) {
                    if *x > 0.0 {
                        *o += g;
                    }
                }
            });
        }

        Op::Softmax { a, axis } => {
            let (outer, lane, inner) = lanes(&node.shape, *axis);
            let p = &node.data;
            accumulate(nodes, buffers, *a, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * lane * inner + l * inner + i;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            dot += grad[at(l)] * p[at(l)];
                        }
                        for l in 0..lane {
                            buf[at(l)] += p[at(l)] * (grad[at(l)] - dot);
                        }
                    }
                }
            });
        }

        Op::LayerNorm { x, gain, bias, eps } => {
            let d = *node.shape.last().unwrap();
            let xs = &nodes[*x].data;
            let gs = &nodes[*gain].data;
            accumulate(nodes, buffers, *x, |buf| {
                for (r, (row, grow)) in xs.chunks(d).zip(grad.chunks(d)).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gs).map(|(g, w)| g * w).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        buf[r * d + j] +=
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
            });
            accumulate(nodes, buffers, *gain, |buf| {
                for (row, grow) in xs.chunks(d).zip(grad.chunks(d)) {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        buf[j] += grow[j] * (row[j] - mean) * inv;
                    }
                }
            });
            accumulate(nodes, buffers, *bias, |buf| {
                for grow in grad.chunks(d) {
                    for (o, g) in buf.iter_mut().zip(grow) {
                        *o += g;
                    }
                }
            });
        }

        Op::NormalizeRows(a) => {
            let d = *node.shape.last().unwrap();
            let xs = &nodes[*a].data;
            accumulate(nodes, buffers, *a, |buf| {
                for (r, (row, grow)) in xs.chunks(d).zip(grad.chunks(d)).enumerate() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let y: Vec<f64> = row.iter().map(|v| v / norm).collect();
                    let dot: f64 = grow.iter().zip(&y).map(|(g, v)| g * v).sum();
                    for j in 0..d {
                        buf[r * d + j] += (grow[j] - y[j] * dot) / norm;
                    }
                }
            });
        }

        Op::MeanPool { a, axis } => {
            let (n, d) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            accumulate(nodes, buffers, *a, |buf| {
                if *axis == 0 {
                    for row in buf.chunks_mut(d) {
                        for (o, g) in row.iter_mut().zip(grad) {
                            *o += g / n as f64;
                        }
                    }
                } else {
                    for (i, row) in buf.chunks_mut(d).enumerate() {
                        for o in row.iter_mut() {
                            *o += grad[i] / d as f64;
                        }
                    }
                }
            });
        }

        Op::SumAll(a) => {
            accumulate(nodes, buffers, *a, |buf| {
                for o in buf.iter_mut() {
                    *o += grad[0];
                }
            });
        }

        Op::Embed { table, ids } => {
            let d = node.shape[1];
            accumulate(nodes, buffers, *table, |buf| {
                for (r, &i) in ids.iter().enumerate() {
                    for (o, g) in buf[i * d..(i + 1) * d].iter_mut().zip(&grad[r * d..(r + 1) * d]) {
                        *o += g;
                    }
                }
            });
        }

        Op::CrossEntropy { logits, targets, ignore } => {
            let classes = nodes[*logits].shape[1];
            let active = targets.iter().filter(|&&t| t != *ignore).count();
            if active == 0 {
                return;
            }
            let xs = &nodes[*logits].data;
            let g = grad[0] / active as f64;
            accumulate(nodes, buffers, *logits, |buf| {
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let row = &xs[r * classes..(r + 1) * classes];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for c in 0..classes {
                        let p = (row[c] - max).exp() / sum;
                        let y = if c == t as usize { 1.0 } else { 0.0 };
                        buf[r * classes + c] += g * (p - y);
                    }
                }
            });
        }

        Op::MaskedAttention { q, k, v, probs, heads } => {
            let (m, d) = (node.shape[0], node.shape[1]);
            let n = nodes[*k].shape[0];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let qs = &nodes[*q].data;
            let ks = &nodes[*k].data;
            let vs = &nodes[*v].data;
            let mut dq = vec![0.0; qs.len()];
            let mut dk = vec![0.0; ks.len()];
            let mut dv = vec![0.0; vs.len()];
            for h in 0..*heads {
                let off = h * dh;
                let p = &probs[h * m * n..(h + 1) * m * n];
                let gh = head_block(grad, m, d, off, dh);
                let qh = head_block(qs, m, d, off, dh);
                let kh = head_block(ks, n, d, off, dh);
                let vh = head_block(vs, n, d, off, dh);

                // dP = dO V^T; dS = P o (dP - rowdot(dP, P)); fully-blocked
                // rows have zero probabilities and stay zero.
                let mut ds = matmul_nt(&gh, &vh, m, dh, n);
                for i in 0..m {
                    let prow = &p[i * n..(i + 1) * n];
                    let dsrow = &mut ds[i * n..(i + 1) * n];
                    let dot: f64 = dsrow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dsrow[j] = prow[j] * (dsrow[j] - dot) * scale;
                    }
                }
                // dQ_h = dS K_h ; dK_h = dS^T Q_h ; dV_h = P^T dO_h.
                let dqh = matmul_raw(&ds, &kh, m, n, dh);
                let dst = transpose_raw(&ds, m, n);
                let dkh = matmul_raw(&dst, &qh, n, m, dh);
                let pt = transpose_raw(p, m, n);
                let dvh = matmul_raw(&pt, &gh, n, m, dh);
                for r in 0..m {
                    for c in 0..dh {
                        dq[r * d + off + c] += dqh[r * dh + c];
                    }
                }
                for r in 0..n {
                    for c in 0..dh {
                        dk[r * d + off + c] += dkh[r * dh + c];
                        dv[r * d + off + c] += dvh[r * dh + c];
                    }
                }
            }
            accumulate(nodes, buffers, *q, |buf| {
                for (o, g) in buf.iter_mut().zip(&dq) {
                    *o += g;
                }
            });
            accumulate(nodes, buffers, *k, |buf| {
                for (o, g) in buf.iter_mut().zip(&dk) {
                    *o += g;
                }
            });
            accumulate(nodes, buffers, *v, |buf| {
                for (o, g) in buf.iter_mut().zip(&dv) {
                    *o += g;
                }
            });
        }
    }
}
