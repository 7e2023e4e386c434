use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::{Array, DiffError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Upsample(Var, usize),
    Downsample(Var, usize),
    DepthToSpace(Var, usize),
    Logistic(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        target: Var,
        weight: Option<Var>,
    },
    AddChannel(Var, Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Arc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive evaluations supporting reverse-mode gradients.
///
/// Leaves are either differentiable inputs ([`Tape::input`]) or constants
/// ([`Tape::constant`]); gradients are only propagated along paths that start
/// at a differentiable input.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every differentiable node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `var`; `None` if `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Array> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
        }
    }

    /// Drops every recorded node. Vars issued before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = fresh_id();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Array) -> Var {
        self.leaf(Arc::new(value), true)
    }

    pub fn input_shared(&mut self, value: Arc<Array>) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn constant_shared(&mut self, value: Arc<Array>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Arc<Array>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Arc<Array>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node, DiffError> {
        if v.tape != self.id {
            return Err(DiffError::NotOnTape);
        }
        self.nodes.get(v.index).ok_or(DiffError::NotOnTape)
    }

    pub fn value(&self, v: Var) -> &Array {
        self.try_value(v).expect("var belongs to a different tape")
    }

    pub fn try_value(&self, v: Var) -> Result<&Array, DiffError> {
        self.node(v).map(|n| n.value.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).is_ok_and(|n| n.requires_grad)
    }

    fn record(&mut self, op: Op) -> Result<Var, DiffError> {
        let operands = operands(&op);
        let mut requires_grad = false;
        for &v in &operands {
            requires_grad |= self.node(v)?.requires_grad;
        }
        let value = {
            let lookup = |v: Var| self.nodes[v.index].value.as_ref();
            evaluate(&op, lookup)?
        };
        Ok(self.push(Arc::new(value), op, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        self.record(Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        self.record(Op::AddScalar(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.record(Op::MatMul(a, b))
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var, DiffError> {
        self.record(Op::Conv3d {
            input,
            weight,
            bias,
            stride,
        })
    }

    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var, DiffError> {
        self.record(Op::Upsample(a, factor))
    }

    pub fn downsample(&mut self, a: Var, factor: usize) -> Result<Var, DiffError> {
        self.record(Op::Downsample(a, factor))
    }

    /// Rearranges `factor^3` channel blocks into `factor`-sized spatial blocks.
    pub fn depth_to_space(&mut self, a: Var, factor: usize) -> Result<Var, DiffError> {
        self.record(Op::DepthToSpace(a, factor))
    }

    pub fn logistic(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Op::Logistic(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        self.record(Op::Mean(a))
    }

    /// Mean binary cross-entropy between probabilities and targets,
    /// optionally restricted by nonnegative per-element weights.
    pub fn bce(&mut self, pred: Var, target: Var, weight: Option<Var>) -> Result<Var, DiffError> {
        self.record(Op::Bce {
            pred,
            target,
            weight,
        })
    }

    /// Adds a per-channel vector along the last axis.
    pub fn add_channel(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        self.record(Op::AddChannel(a, bias))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let node = self.node(a)?;
        let value = node.value.as_ref().clone().reshape(shape).map_err(|_| {
            DiffError::shape("reshape", &[node.value.shape()])
        })?;
        let rg = node.requires_grad;
        Ok(self.push(Arc::new(value), Op::Reshape(a), rg))
    }

    /// `x * logistic(x)`, composed from primitives.
    pub fn silu(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.logistic(a)?;
        self.mul(a, s)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(DiffError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(Array::full(root.value.shape(), 1.0));
        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (target, contrib) in self.vjp(node, &g)? {
                if !self.nodes[target.index].requires_grad {
                    continue;
                }
                match &mut grads[target.index] {
                    Some(acc) => acc.axpy(1.0, &contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if let Some(g) = slot {
                if !g.all_finite() {
                    return Err(DiffError::NonFinite("gradient"));
                }
            }
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// Gradient of scalar `loss` with respect to `wrt`.
    pub fn grad(&self, loss: Var, wrt: Var) -> Result<Array, DiffError> {
        let target = self.node(wrt)?;
        if !target.requires_grad {
            return Err(DiffError::NotDifferentiable);
        }
        let shape = target.value.shape().to_vec();
        let grads = self.backward(loss)?;
        Ok(grads.get(wrt).cloned().unwrap_or_else(|| Array::zeros(&shape)))
    }

    /// Recomputes every node from its recorded operation and leaf values.
    pub fn replay(&self) -> Result<Vec<Array>, DiffError> {
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.as_ref().clone(),
                Op::Reshape(a) => values[a.index].clone().reshape(node.value.shape().to_vec())?,
                op => evaluate(op, |v: Var| &values[v.index])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    fn vjp(&self, node: &Node, g: &Array) -> Result<Vec<(Var, Array)>, DiffError> {
        let val = |v: Var| self.nodes[v.index].value.as_ref();
        let needs = |v: Var| self.nodes[v.index].requires_grad;
        let out = match node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needs(a) {
                    out.push((a, g.zip_map(val(b), "mul", |x, y| x * y)?));
                }
                if needs(b) {
                    out.push((b, g.zip_map(val(a), "mul", |x, y| x * y)?));
                }
                out
            }
            Op::Scale(a, k) => vec![(a, g.map(|v| v * k))],
            Op::AddScalar(a, _) => vec![(a, g.clone())],
            Op::MatMul(a, b) => {
                let (ga, gb) = kernels::matmul_grad(g, val(a), val(b));
                vec![(a, ga), (b, gb)]
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (x, w, b) = (val(input), val(weight), val(bias));
                let mut out = Vec::with_capacity(3);
                if needs(input) {
                    out.push((input, kernels::conv3d_grad_input(g, x, w, b, stride)?));
                }
                if needs(weight) {
                    out.push((weight, kernels::conv3d_grad_weight(g, x, w, b, stride)?));
                }
                if needs(bias) {
                    out.push((bias, kernels::channel_sum(g)));
                }
                out
            }
            Op::Upsample(a, f) => vec![(a, kernels::upsample_grad(g, val(a).shape(), f))],
            Op::Downsample(a, f) => vec![(a, kernels::downsample_grad(g, val(a).shape(), f))],
            Op::DepthToSpace(a, f) => vec![(a, kernels::depth_to_space_grad(g, val(a).shape(), f))],
            Op::Logistic(a) => {
                let y = node.value.as_ref();
                vec![(a, g.zip_map(y, "logistic", |gv, s| gv * s * (1.0 - s))?)]
            }
            Op::Exp(a) => vec![(a, g.zip_map(&node.value, "exp", |gv, e| gv * e)?)],
            Op::Sum(a) => {
                let up = g.data()[0];
                vec![(a, Array::full(val(a).shape(), up))]
            }
            Op::Mean(a) => {
                let x = val(a);
                let up = g.data()[0] / x.len().max(1) as f64;
                vec![(a, Array::full(x.shape(), up))]
            }
            Op::Bce {
                pred,
                target,
                weight,
            } => {
                let w = weight.map(val);
                vec![(pred, kernels::bce_grad(g.data()[0], val(pred), val(target), w))]
            }
            Op::AddChannel(a, b) => vec![(a, g.clone()), (b, kernels::channel_sum(g))],
            Op::Reshape(a) => vec![(a, g.clone().reshape(val(a).shape().to_vec())?)],
        };
        Ok(out)
    }
}

fn operands(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddChannel(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Upsample(a, _)
        | Op::Downsample(a, _)
        | Op::DepthToSpace(a, _)
        | Op::Logistic(a)
        | Op::Exp(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![a],
        Op::Conv3d {
            input, weight, bias, ..
        } => vec![input, weight, bias],
        Op::Bce {
            pred,
            target,
            weight,
        } => {
            let mut v = vec![pred, target];
            v.extend(weight);
            v
        }
    }
}

fn evaluate<'a>(op: &Op, val: impl Fn(Var) -> &'a Array) -> Result<Array, DiffError> {
    Ok(match *op {
        Op::Leaf | Op::Reshape(_) => unreachable!("leaves and reshapes are not re-evaluated"),
        Op::Add(a, b) => val(a).zip_map(val(b), "add", |x, y| x + y)?,
        Op::Sub(a, b) => val(a).zip_map(val(b), "sub", |x, y| x - y)?,
        Op::Mul(a, b) => val(a).zip_map(val(b), "mul", |x, y| x * y)?,
        Op::Scale(a, k) => val(a).map(|x| x * k),
        Op::AddScalar(a, k) => val(a).map(|x| x + k),
        Op::MatMul(a, b) => kernels::matmul(val(a), val(b))?,
        Op::Conv3d {
            input,
            weight,
            bias,
            stride,
        } => kernels::conv3d(val(input), val(weight), val(bias), stride)?,
        Op::Upsample(a, f) => kernels::upsample(val(a), f)?,
        Op::Downsample(a, f) => kernels::downsample(val(a), f)?,
        Op::DepthToSpace(a, f) => kernels::depth_to_space(val(a), f)?,
        Op::Logistic(a) => val(a).map(kernels::logistic),
        Op::Exp(a) => val(a).map(f64::exp),
        Op::Sum(a) => Array::scalar(val(a).sum()),
        Op::Mean(a) => {
            let x = val(a);
            Array::scalar(x.sum() / x.len().max(1) as f64)
        }
        Op::Bce {
            pred,
            target,
            weight,
        } => Array::scalar(kernels::bce(val(pred), val(target), weight.map(&val))?),
        Op::AddChannel(a, b) => kernels::add_channel(val(a), val(b))?,
    })
}
