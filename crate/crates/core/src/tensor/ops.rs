//! Forward implementations. Each op records enough on the tape for the
//! reverse sweep in `backward.rs`.

use std::sync::Arc;

use super::{AttnMask, Op, Tape, Var};

/// Row-parallel `[m,k] x [k,n]` kernel. Each output row is accumulated
/// sequentially in `k` order by exactly one task, so results are
/// bit-identical for any thread count.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aik) in arow.iter().enumerate() {
            let brow = &b[p * n..p * n + n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    };
    if m * k * n >= 1 << 22 && m > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `[m,k] x [n,k]^T` via an explicit transpose and the wide ikj kernel;
/// short inner dots do not vectorize, wide accumulation rows do.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose_raw(b, n, k);
    matmul_raw(a, &bt, m, k, n)
}

/// Extracts one head's `[rows, dh]` column block from a `[rows, d]` matrix.
pub(crate) fn head_block(x: &[f64], rows: usize, d: usize, off: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dh];
    for r in 0..rows {
        out[r * dh..(r + 1) * dh].copy_from_slice(&x[r * d + off..r * d + off + dh]);
    }
    out
}

/// Stable softmax over `axis` of a rank-1 or rank-2 tensor, in place.
pub(crate) fn softmax_raw(data: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, lane, inner) = lanes(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * lane * inner + l * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..lane {
                max = max.max(data[at(l)]);
            }
            let mut sum = 0.0;
            for l in 0..lane {
                let e = (data[at(l)] - max).exp();
                data[at(l)] = e;
                sum += e;
            }
            for l in 0..lane {
                data[at(l)] /= sum;
            }
        }
    }
}

/// Decomposes `shape` around `axis` as (outer, axis extent, inner).
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn binary_shape_check(op: &str, a: &[usize], b: &[usize]) {
    assert!(a == b, "{op}: shape mismatch {a:?} vs {b:?}");
}

impl<'t> Var<'t> {
    fn node_shape(&self) -> Vec<usize> {
        self.shape()
    }

    fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let (sa, sb) = (self.node_shape(), rhs.node_shape());
        binary_shape_check("add", &sa, &sb);
        let data: Vec<f64> = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().zip(&nodes[rhs.id].data).map(|(x, y)| x + y).collect()
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        self.tape.push(sa, data, Op::Add(self.id, rhs.id), rg)
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let (sa, sb) = (self.node_shape(), rhs.node_shape());
        binary_shape_check("sub", &sa, &sb);
        let data: Vec<f64> = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().zip(&nodes[rhs.id].data).map(|(x, y)| x - y).collect()
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        self.tape.push(sa, data, Op::Sub(self.id, rhs.id), rg)
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (sa, sb) = (self.node_shape(), rhs.node_shape());
        binary_shape_check("mul", &sa, &sb);
        let data: Vec<f64> = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().zip(&nodes[rhs.id].data).map(|(x, y)| x * y).collect()
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        self.tape.push(sa, data, Op::Mul(self.id, rhs.id), rg)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let shape = self.node_shape();
        let data: Vec<f64> = self.tape.nodes.borrow()[self.id].data.iter().map(|x| x * c).collect();
        let rg = self.requires_grad();
        self.tape.push(shape, data, Op::Scale(self.id, c), rg)
    }

    /// Multiply every element by a single-element tensor (the one permitted
    /// scalar broadcast).
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.len(), 1, "scale_by expects a scalar tensor, got shape {:?}", s.shape());
        let shape = self.node_shape();
        let sv = s.scalar();
        let data: Vec<f64> = self.tape.nodes.borrow()[self.id].data.iter().map(|x| x * sv).collect();
        let rg = self.requires_grad() || s.requires_grad();
        self.tape.push(shape, data, Op::ScaleBy(self.id, s.id), rg)
    }

    /// Elementwise reciprocal.
    pub fn recip(self) -> Var<'t> {
        let shape = self.node_shape();
        let data: Vec<f64> = self.tape.nodes.borrow()[self.id].data.iter().map(|x| 1.0 / x).collect();
        let rg = self.requires_grad();
        self.tape.push(shape, data, Op::Recip(self.id), rg)
    }

    /// Adds a `[d]` bias to every row of an `[n,d]` tensor.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        let shape = self.node_shape();
        let bshape = bias.node_shape();
        assert!(
            shape.len() == 2 && bshape.len() == 1 && shape[1] == bshape[0],
            "add_bias: shape mismatch {shape:?} vs {bshape:?}"
        );
        let data: Vec<f64> = {
            let nodes = self.tape.nodes.borrow();
            let b = &nodes[bias.id].data;
            let x = &nodes[self.id].data;
            let mut out = vec![0.0; x.len()];
            for (orow, xrow) in out.chunks_mut(shape[1]).zip(x.chunks(shape[1])) {
                for j in 0..shape[1] {
                    orow[j] = xrow[j] + b[j];
                }
            }
            out
        };
        let rg = self.requires_grad() || bias.requires_grad();
        self.tape.push(shape, data, Op::AddBias(self.id, bias.id), rg)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (sa, sb) = (self.node_shape(), rhs.node_shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: shape mismatch {sa:?} vs {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = {
            let nodes = self.tape.nodes.borrow();
            matmul_raw(&nodes[self.id].data, &nodes[rhs.id].data, m, k, n)
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        self.tape.push(vec![m, n], data, Op::Matmul(self.id, rhs.id), rg)
    }

    pub fn transpose(self) -> Var<'t> {
        let shape = self.node_shape();
        assert_eq!(shape.len(), 2, "transpose expects rank-2, got shape {shape:?}");
        let data = transpose_raw(&self.tape.nodes.borrow()[self.id].data, shape[0], shape[1]);
        let rg = self.requires_grad();
        self.tape.push(vec![shape[1], shape[0]], data, Op::Transpose(self.id), rg)
    }

    pub fn reshape(self, new_shape: &[usize]) -> Var<'t> {
        let n: usize = new_shape.iter().product();
        assert_eq!(n, self.len(), "reshape: {} elements cannot fill shape {new_shape:?}", self.len());
        let data = self.value();
        let rg = self.requires_grad();
        self.tape.push(new_shape.to_vec(), data, Op::Reshape(self.id), rg)
    }

    pub fn relu(self) -> Var<'t> {
        let shape = self.node_shape();
        let data: Vec<f64> = self.tape.nodes.borrow()[self.id].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.requires_grad();
        self.tape.push(shape, data, Op::Relu(self.id), rg)
    }

    /// Stable softmax along `axis`. NaN inputs propagate to NaN outputs.
    pub fn softmax(self, axis: usize) -> Var<'t> {
        let shape = self.node_shape();
        let mut data = self.value();
        softmax_raw(&mut data, &shape, axis);
        let rg = self.requires_grad();
        self.tape.push(shape, data, Op::Softmax { a: self.id, axis }, rg)
    }

    /// Per-row standardization over the last axis, then affine `gain, bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        assert!(eps > 0.0, "layer_norm eps must be positive, got {eps}");
        let shape = self.node_shape();
        let d = *shape.last().expect("layer_norm on rank-0 tensor");
        assert_eq!(gain.len(), d, "layer_norm: gain shape {:?} vs feature dim {d}", gain.shape());
        assert_eq!(bias.len(), d, "layer_norm: bias shape {:?} vs feature dim {d}", bias.shape());
        let data = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data;
            let g = &nodes[gain.id].data;
            let b = &nodes[bias.id].data;
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    orow[j] = (row[j] - mean) * inv * g[j] + b[j];
                }
            }
            out
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        self.tape.push(shape, data, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, eps }, rg)
    }

    /// L2-normalizes each row; an exactly zero row stays zero.
    pub fn normalize_rows(self) -> Var<'t> {
        let shape = self.node_shape();
        let d = *shape.last().expect("normalize_rows on rank-0 tensor");
        let data = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data;
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for j in 0..d {
                        orow[j] = row[j] / norm;
                    }
                }
            }
            out
        };
        let rg = self.requires_grad();
        self.tape.push(shape, data, Op::NormalizeRows(self.id), rg)
    }

    /// Mean over one axis of a rank-2 tensor: axis 0 gives `[d]`, axis 1 `[n]`.
    pub fn mean_pool(self, axis: usize) -> Var<'t> {
        let shape = self.node_shape();
        assert_eq!(shape.len(), 2, "mean_pool expects rank-2, got shape {shape:?}");
        assert!(axis < 2, "mean_pool axis {axis} out of range");
        assert!(shape[axis] > 0, "mean_pool over empty axis of shape {shape:?}");
        let (n, d) = (shape[0], shape[1]);
        let data = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data;
            if axis == 0 {
                let mut out = vec![0.0; d];
                for row in x.chunks(d) {
                    for j in 0..d {
                        out[j] += row[j];
                    }
                }
                for v in &mut out {
                    *v /= n as f64;
                }
                out
            } else {
                x.chunks(d).map(|row| row.iter().sum::<f64>() / d as f64).collect()
            }
        };
        let out_shape = if axis == 0 { vec![d] } else { vec![n] };
        let rg = self.requires_grad();
        self.tape.push(out_shape, data, Op::MeanPool { a: self.id, axis }, rg)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t> {
        let s: f64 = self.tape.nodes.borrow()[self.id].data.iter().sum();
        let rg = self.requires_grad();
        self.tape.push(vec![], vec![s], Op::SumAll(self.id), rg)
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let shape = self.node_shape();
        assert_eq!(shape.len(), 2, "slice_rows expects rank-2, got shape {shape:?}");
        assert!(start <= end && end <= shape[0], "slice_rows {start}..{end} out of {} rows", shape[0]);
        let d = shape[1];
        let data = self.tape.nodes.borrow()[self.id].data[start * d..end * d].to_vec();
        let rg = self.requires_grad();
        self.tape.push(vec![end - start, d], data, Op::SliceRows { a: self.id, start }, rg)
    }

    /// Row `i` of a rank-2 tensor, as a rank-1 tensor.
    pub fn row(self, i: usize) -> Var<'t> {
        let shape = self.node_shape();
        assert_eq!(shape.len(), 2, "row expects rank-2, got shape {shape:?}");
        assert!(i < shape[0], "row {i} out of {} rows", shape[0]);
        let d = shape[1];
        let data = self.tape.nodes.borrow()[self.id].data[i * d..(i + 1) * d].to_vec();
        let rg = self.requires_grad();
        self.tape.push(vec![d], data, Op::Row { a: self.id, i }, rg)
    }

    /// Mean negative log-softmax probability of the target class per
    /// non-ignored row; rows whose target equals `ignore` contribute nothing,
    /// and a batch with every row ignored yields exactly zero.
    pub fn cross_entropy_logits(self, targets: &[i64], ignore: i64) -> Var<'t> {
        let shape = self.node_shape();
        assert_eq!(shape.len(), 2, "cross_entropy_logits expects rank-2 logits, got {shape:?}");
        let (n, classes) = (shape[0], shape[1]);
        assert_eq!(targets.len(), n, "cross_entropy_logits: {} targets for {n} rows", targets.len());
        let mut active = 0usize;
        let mut total = 0.0;
        {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data;
            for (r, &t) in targets.iter().enumerate() {
                if t == ignore {
                    continue;
                }
                assert!(
                    t >= 0 && (t as usize) < classes,
                    "cross_entropy_logits: target {t} out of range 0..{classes} at row {r}"
                );
                let row = &x[r * classes..(r + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[t as usize];
                active += 1;
            }
        }
        let loss = if active == 0 { 0.0 } else { total / active as f64 };
        let rg = self.requires_grad();
        self.tape.push(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits: self.id, targets: Arc::new(targets.to_vec()), ignore },
            rg,
        )
    }
}

impl Tape {
    /// Concatenates along `axis`; parts must agree on every other extent.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let first = parts[0].shape();
        assert!(axis < first.len().max(1), "concat axis {axis} out of range for shape {first:?}");
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), first.len(), "concat: rank mismatch {first:?} vs {s:?}");
            for (ax, (a, b)) in first.iter().zip(s.iter()).enumerate() {
                assert!(ax == axis || a == b, "concat: shape mismatch {first:?} vs {s:?} on axis {ax}");
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let data = if axis == 0 || first.len() == 1 {
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(&p.tape.nodes.borrow()[p.id].data);
            }
            data
        } else {
            // axis == 1 on rank-2 parts: interleave row fragments.
            let rows = first[0];
            let mut data = Vec::with_capacity(out_shape.iter().product());
            let nodes = self.nodes.borrow();
            for r in 0..rows {
                for p in parts {
                    let d = nodes[p.id].shape[1];
                    data.extend_from_slice(&nodes[p.id].data[r * d..(r + 1) * d]);
                }
            }
            data
        };
        let rg = parts.iter().any(|p| p.tape.nodes.borrow()[p.id].requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(out_shape, data, Op::Concat { axis, parts: ids }, rg)
    }

    /// Stacks rank-1 tensors of equal length into a rank-2 tensor, one row each.
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "stack_rows of zero parts");
        let d = parts[0].len();
        let mut data = Vec::with_capacity(parts.len() * d);
        for p in parts {
            let s = p.shape();
            assert!(s.len() == 1 && s[0] == d, "stack_rows: expected [{d}] rows, got shape {s:?}");
            data.extend_from_slice(&p.tape.nodes.borrow()[p.id].data);
        }
        let rg = parts.iter().any(|p| p.tape.nodes.borrow()[p.id].requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(vec![parts.len(), d], data, Op::StackRows { parts: ids }, rg)
    }

    /// Gathers rows of `table` by id. Backward scatter-adds into the table.
    pub fn embedding_lookup<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Var<'t> {
        let shape = table.shape();
        assert_eq!(shape.len(), 2, "embedding_lookup expects rank-2 table, got {shape:?}");
        let (v, d) = (shape[0], shape[1]);
        let data = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.id].data;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                assert!(i < v, "embedding_lookup: id {i} out of table size {v}");
                out.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
            out
        };
        let rg = self.nodes.borrow()[table.id].requires_grad;
        self.push(
            vec![ids.len(), d],
            data,
            Op::Embed { table: table.id, ids: Arc::new(ids.to_vec()) },
            rg,
        )
    }
}

/// Multi-head scaled dot-product attention under a boolean visibility mask.
///
/// `q` is `[m,d]`, `k` and `v` are `[n,d]`, `mask` is `m x n`; `heads` must
/// divide `d`. Disallowed positions are excluded before the softmax, and a
/// row with no allowed position outputs zeros. Intermediate scores are
/// recomputed during backward instead of being cached.
pub fn masked_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, mask: &AttnMask, heads: usize) -> Var<'t> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    assert!(sq.len() == 2 && sk.len() == 2 && sv.len() == 2, "masked_attention expects rank-2 q/k/v");
    assert!(
        sq[1] == sk[1] && sk == sv,
        "masked_attention: shape mismatch q {sq:?}, k {sk:?}, v {sv:?}"
    );
    assert!(heads > 0 && sq[1] % heads == 0, "heads {heads} must divide model dim {}", sq[1]);
    assert!(
        mask.rows == sq[0] && mask.cols == sk[0],
        "masked_attention: mask {}x{} does not fit q rows {} and k rows {}",
        mask.rows,
        mask.cols,
        sq[0],
        sk[0]
    );
    let (m, n, d) = (sq[0], sk[0], sq[1]);
    let dh = d / heads;
    let (data, probs) = {
        let nodes = q.tape.nodes.borrow();
        attention_forward(&nodes[q.id].data, &nodes[k.id].data, &nodes[v.id].data, mask, m, n, d, heads, dh)
    };
    let rg = {
        let nodes = q.tape.nodes.borrow();
        nodes[q.id].requires_grad || nodes[k.id].requires_grad || nodes[v.id].requires_grad
    };
    q.tape.push(
        vec![m, d],
        data,
        Op::MaskedAttention { q: q.id, k: k.id, v: v.id, probs: Arc::new(probs), heads },
        rg,
    )
}

/// Returns the attended output and the per-head probability matrices
/// (`heads * m * n`, head-major). The probabilities are cached on the tape
/// node so backward never recomputes the softmax.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &AttnMask,
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    dh: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; m * d];
    let mut all_probs = vec![0.0; heads * m * n];
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let off = h * dh;
        let qh = head_block(q, m, d, off, dh);
        let kh = head_block(k, n, d, off, dh);
        let vh = head_block(v, n, d, off, dh);
        let probs = &mut all_probs[h * m * n..(h + 1) * m * n];
        probs.copy_from_slice(&matmul_nt(&qh, &kh, m, dh, n));
        for i in 0..m {
            let row = &mut probs[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if mask.allowed(i, j) {
                    max = max.max(row[j] * scale);
                }
            }
            if max == f64::NEG_INFINITY {
                // Row sees nothing: zero probabilities, zero output row.
                row.iter_mut().for_each(|p| *p = 0.0);
                continue;
            }
            let mut sum = 0.0;
            for j in 0..n {
                if mask.allowed(i, j) {
                    let e = (row[j] * scale - max).exp();
                    row[j] = e;
                    sum += e;
                } else {
                    row[j] = 0.0;
                }
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        let oh = matmul_raw(probs, &vh, m, n, dh);
        for r in 0..m {
            out[r * d + off..r * d + off + dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
        }
    }
    (out, all_probs)
}
