//! Tape-based reverse-mode automatic differentiation.
//!
//! Every value computed through a [`Var`] is appended to its [`Tape`]. The
//! backward rules are themselves written with `Var` operations, so running
//! [`backward`] in [`GradMode::Higher`] records the gradient computation on the
//! same tape and the returned gradients can be differentiated again. In
//! [`GradMode::First`] recording is switched off while the rules run and the
//! returned gradients are plain constants.

mod fd;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::Tensor;

pub use fd::finite_diff_gradient;
pub use ops::{concat, IndexSets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Gradients are constants.
    First,
    /// Gradients carry tape history and can be passed to [`backward`] again.
    Higher,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Dot(usize, usize),
    SumAll(usize),
    /// Tensor times a one-element tensor.
    MulScalar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    BroadcastAxis { src: usize, axis: usize },
    SumKeepAxis { src: usize, axis: usize },
    Gather { src: usize, idx: Arc<[usize]> },
    ScatterAdd { src: usize, idx: Arc<[usize]> },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    ConvInputGrad { gy: usize, w: usize, geom: ConvGeom },
    ConvWeightGrad { x: usize, gy: usize, geom: ConvGeom },
    AvgPool { src: usize, kh: usize, kw: usize },
    AvgPoolAdjoint { src: usize, kh: usize, kw: usize },
    IndexMean { src: usize, sets: Arc<IndexSets> },
    IndexMeanAdjoint { src: usize, sets: Arc<IndexSets> },
}

impl Op {
    fn inputs(&self) -> ([usize; 2], usize) {
        use Op::*;
        match *self {
            Leaf => ([0, 0], 0),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Dot(a, b) | MulScalar(a, b) | MatMul(a, b) => {
                ([a, b], 2)
            }
            Conv2d { x, w, .. } => ([x, w], 2),
            ConvInputGrad { gy, w, .. } => ([gy, w], 2),
            ConvWeightGrad { x, gy, .. } => ([x, gy], 2),
            Scale(a, _) | AddConst(a) | Exp(a) | Log(a) | Sqrt(a) | SumAll(a) | Transpose(a) | Reshape(a) => {
                ([a, 0], 1)
            }
            BroadcastAxis { src, .. }
            | SumKeepAxis { src, .. }
            | Gather { src, .. }
            | ScatterAdd { src, .. }
            | AvgPool { src, .. }
            | AvgPoolAdjoint { src, .. }
            | IndexMean { src, .. }
            | IndexMeanAdjoint { src, .. } => ([src, 0], 1),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Scale(..) => "scale",
            AddConst(..) => "add_const",
            Exp(_) => "exp",
            Log(_) => "log",
            Sqrt(_) => "sqrt",
            Dot(..) => "dot",
            SumAll(_) => "sum",
            MulScalar(..) => "mul_scalar",
            MatMul(..) => "matmul",
            Transpose(_) => "transpose",
            Reshape(_) => "reshape",
            BroadcastAxis { .. } => "broadcast_axis",
            SumKeepAxis { .. } => "sum_keep_axis",
            Gather { .. } => "gather",
            ScatterAdd { .. } => "scatter_add",
            Conv2d { .. } => "conv2d",
            ConvInputGrad { .. } => "conv2d_input_grad",
            ConvWeightGrad { .. } => "conv2d_weight_grad",
            AvgPool { .. } => "avg_pool2d",
            AvgPoolAdjoint { .. } => "avg_pool2d_adjoint",
            IndexMean { .. } => "mean_over_index_set",
            IndexMeanAdjoint { .. } => "mean_over_index_set_adjoint",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of computed values; the creation order is a valid
/// evaluation order. A tape is confined to a single thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: Cell::new(true) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn var(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(Arc::new(value), true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(Arc::new(value), false)
    }

    pub fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let (inputs, n) = op.inputs();
        let rg = self.recording.get() && inputs[..n].iter().any(|&i| nodes[i].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        nodes.push(Node { value: Arc::new(value), op, requires_grad: rg });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn var_at(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }
}

/// A handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }
}

/// Result of [`backward`]: one gradient per requested variable.
#[derive(Debug)]
pub struct Gradients<'t> {
    pub grads: Vec<Var<'t>>,
    /// `true` where the variable does not influence the output; its gradient is zero.
    pub unreachable: Vec<bool>,
}

/// Differentiates the scalar `output` with respect to each of `wrt`.
pub fn backward<'t>(output: Var<'t>, wrt: &[Var<'t>], mode: GradMode) -> Result<Gradients<'t>> {
    let tape = output.tape;
    if output.numel() != 1 {
        return Err(Error::shape("backward", format!("output of shape {:?} is not scalar", output.shape())));
    }
    for w in wrt {
        if !std::ptr::eq(w.tape, tape) {
            return Err(Error::invalid("backward: variable belongs to a different tape"));
        }
        if !w.requires_grad() {
            return Err(Error::invalid(format!("backward: variable {} does not require grad", w.id)));
        }
    }

    let n = output.id + 1;
    let mut is_target = vec![false; n];
    for w in wrt {
        if w.id < n {
            is_target[w.id] = true;
        }
    }
    // needs[i]: node i lies on a path to some wrt variable.
    let mut needs = is_target.clone();
    let ops: Vec<Op> = {
        let nodes = tape.nodes.borrow();
        for i in 0..n {
            if needs[i] || !nodes[i].requires_grad {
                continue;
            }
            let (inputs, k) = nodes[i].op.inputs();
            needs[i] = inputs[..k].iter().any(|&j| needs[j]);
        }
        nodes[..n].iter().map(|node| node.op.clone()).collect()
    };

    let previous = tape.recording.replace(mode == GradMode::Higher);
    let result = (|| {
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        let mut found: Vec<Option<Var<'t>>> = vec![None; n];
        grads[output.id] = Some(tape.constant(Tensor::full(&output.shape(), 1.0))?);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if is_target[i] {
                found[i] = Some(g);
            }
            if matches!(ops[i], Op::Leaf) {
                continue;
            }
            for (input, gi) in ops::input_grads(tape, i, &ops[i], g, &needs)? {
                grads[input] = Some(match grads[input] {
                    Some(acc) => acc.add(gi)?,
                    None => gi,
                });
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::with_capacity(wrt.len());
        for w in wrt {
            match found.get(w.id).copied().flatten() {
                Some(g) => {
                    out.push(g);
                    unreachable.push(false);
                }
                None => {
                    out.push(tape.constant(Tensor::zeros(&w.shape()))?);
                    unreachable.push(true);
                }
            }
        }
        Ok(Gradients { grads: out, unreachable })
    })();
    tape.recording.set(previous);
    result
}

#[cfg(test)]
mod tests;
