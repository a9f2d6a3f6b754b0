//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! All values are recorded on a [`Tape`]; [`Var`] is a copyable handle into it.
//! Tensors are immutable once created, so reading values is safe anywhere, but
//! a tape must stay on a single thread. Shapes are checked at every op
//! boundary and violations panic with both shapes in the message; there is no
//! implicit broadcasting except scalar-by-tensor.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

mod backward;
mod ops;

pub use ops::masked_attention;

/// Boolean attention visibility: `bits[r * cols + c]` says whether row `r`
/// may attend to column `c`. A row with no allowed column produces a zero
/// output row rather than NaN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Self {
        assert_eq!(
            bits.len(),
            rows * cols,
            "mask bits {} do not fill {rows}x{cols}",
            bits.len()
        );
        AttnMask { rows, cols, bits }
    }

    pub fn all_true(rows: usize, cols: usize) -> Self {
        AttnMask { rows, cols, bits: vec![true; rows * cols] }
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    /// Blocks the given sequence positions entirely: their rows and columns
    /// all become false. Used to exclude padding from visibility.
    pub fn block_positions(&self, positions: &[usize]) -> Self {
        let mut out = self.clone();
        for &p in positions {
            assert!(p < self.rows && p < self.cols, "blocked position {p} outside {}x{}", self.rows, self.cols);
            for c in 0..out.cols {
                out.bits[p * out.cols + c] = false;
            }
            for r in 0..out.rows {
                out.bits[r * out.cols + p] = false;
            }
        }
        out
    }
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Multiply every element of the first operand by a scalar tensor.
    ScaleBy(usize, usize),
    Recip(usize),
    /// `[n,d] + [d]`, bias added to every row.
    AddBias(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Concat { axis: usize, parts: Vec<usize> },
    StackRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    Row { a: usize, i: usize },
    Reshape(usize),
    Relu(usize),
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    NormalizeRows(usize),
    MeanPool { a: usize, axis: usize },
    SumAll(usize),
    Embed { table: usize, ids: Arc<Vec<usize>> },
    CrossEntropy { logits: usize, targets: Arc<Vec<i64>>, ignore: i64 },
    /// Cached softmax probabilities (head-major, heads*m*n) so the reverse
    /// sweep never recomputes the exponentials.
    MaskedAttention { q: usize, k: usize, v: usize, probs: Arc<Vec<f64>>, heads: usize },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Record of executed operations. Nodes are appended in execution order, so
/// every parent index precedes its children and one reverse sweep suffices
/// for the chain rule.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape, data, op, requires_grad });
        Var { tape: self, id }
    }

    /// Differentiable input: gradients are reported for it after `backward`.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Var<'_> {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length {} does not match shape {shape:?}",
            data.len()
        );
        self.push(shape.to_vec(), data, Op::Leaf, true)
    }

    /// Non-differentiable input: backward never reaches it and reports zero.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Var<'_> {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "constant data length {} does not match shape {shape:?}",
            data.len()
        );
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.push(vec![], vec![x], Op::Leaf, false)
    }
}

/// Handle to one tensor on a tape.
#[allow(clippy::should_implement_trait)]
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    pub fn data_ref(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].data.as_slice())
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        assert_eq!(node.data.len(), 1, "scalar() on tensor of shape {:?}", node.shape);
        node.data[0]
    }

}

/// Per-node gradient buffers produced by [`ops::backward`].
pub struct Gradients {
    pub(crate) buffers: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if the loss never reached it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.buffers[v.id].as_deref()
    }

    /// Like [`Gradients::wrt`] but materializes zeros for unreached tensors.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Vec<f64> {
        match self.wrt(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.len()],
        }
    }
}
