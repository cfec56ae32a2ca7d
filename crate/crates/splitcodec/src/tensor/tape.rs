use std::cell::{Ref, RefCell};

use ndarray::{ArrayD, Axis, Ix2};

use crate::error::{CodecError, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`]. Valid only for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, F),
    MulScalar(Var, F),
    MatMul(Var, Var),
    Gather { table: Var, indices: Vec<usize> },
    LayerNorm { x: Var, gain: Var, eps: F },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Erf(Var),
    Sin(Var),
    Cos(Var),
    ClampMin(Var, F),
    RoundSte(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SliceCols { x: Var, start: usize, end: usize },
    ConcatCols(Vec<Var>),
    ShiftRowsDown { x: Var, first: Var },
    SumAll(Var),
    MeanAll(Var),
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<ArrayD<F>> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
pub(crate) struct Node<F: Scalar> {
    pub value: ArrayD<F>,
    pub op: Op<F>,
    pub needs_grad: bool,
}

/// Dynamically recorded computation graph.
pub struct Tape<F: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<F>>>,
}

/// Gradients produced by one `backward` call, indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    pub(crate) grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; `backward` accumulates a gradient for it.
    pub fn param(&self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Reads a `[1]`-shaped node as a plain scalar.
    pub fn scalar(&self, v: Var) -> F {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.0].value.len(), 1);
        nodes[v.0].value.iter().next().copied().unwrap()
    }

    pub fn scalar_leaf(&self, x: F) -> Var {
        self.leaf(ArrayD::from_shape_vec(ndarray::IxDyn(&[1]), vec![x]).unwrap())
    }

    pub(crate) fn push(&self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Checks that every element of `v` is finite.
    pub fn check_finite(&self, v: Var, op: &'static str) -> Result<()> {
        let nodes = self.nodes.borrow();
        for (i, x) in nodes[v.0].value.iter().enumerate() {
            if !x.is_finite() {
                return Err(CodecError::NonFinite { op, coord: i });
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        debug_assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].value.raw_dim()));

        for i in (0..nodes.len()).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(&nodes, i, &g, &mut grads);
            // Leaves keep their gradient; interior grads are dropped once used.
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }
}

pub(crate) fn accumulate<F: Scalar>(slot: &mut Option<ArrayD<F>>, delta: ArrayD<F>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

pub(crate) fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
}

pub(crate) fn rows_cols<F: Scalar>(a: &ArrayD<F>) -> (usize, usize) {
    let s = a.shape();
    debug_assert_eq!(s.len(), 2);
    (s[0], s[1])
}

