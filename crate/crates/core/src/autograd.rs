//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every executed primitive in order. Nodes are addressed by
//! [`Var`] handles; `backward` replays adjoints in reverse and accumulates into
//! the gradient slots of the [`ParamStore`] the leaves came from.
//!
//! The heavy sequence kernels (attention, the wkv scans, norms, losses) are
//! fused ops implementing [`Backward`] next to their forward code.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{broadcastable, lit, BinaryOp, Element, ReduceOp, Strided, Tensor, UnaryOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a fused op.
pub trait Backward<T: Element> {
    /// Returns one gradient per input, `None` where `needs[i]` is false.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Lerp(Var, Var, Var),
    Reduce(ReduceOp, usize, Var),
    SumAll(Var),
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn Backward<T>>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, a) | Op::Reduce(_, _, a) | Op::SumAll(a) | Op::Reshape(a) => vec![*a],
            Op::Lerp(a, b, x) => vec![*a, *b, *x],
            Op::Custom(inputs, _) => inputs.clone(),
        }
    }
}

#[derive(Clone, Copy)]
struct ParamRef {
    store: u64,
    id: ParamId,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamRef>,
}

/// Ordered record of executed operations.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::gradients`]. Only leaf gradients are retained.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true }
    }

    /// A tape that evaluates but records no adjoints (inference).
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    pub fn needs_grad(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = self.needs_grad(&op.inputs());
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf not tied to any store; its gradient is read back from [`Gradients`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let needs_grad = self.recording && requires_grad;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Places a stored parameter on the tape. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let needs_grad = self.recording && p.trainable;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            needs_grad,
            param: Some(ParamRef { store: store.store_id(), id }),
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers the output of a fused op.
    pub fn push_custom(&mut self, inputs: Vec<Var>, value: Tensor<T>, op: Box<dyn Backward<T>>) -> Var {
        self.push(value, Op::Custom(inputs, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).binary(op, self.value(b))?;
        Ok(self.push(value, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let value = self.value(a).unary(op);
        self.push(value, Op::Unary(op, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        self.unary(UnaryOp::Affine(mul, add), a)
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::MaxScalar(c), a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    /// `a + (b − a) ⊙ x`.
    pub fn lerp(&mut self, a: Var, b: Var, x: Var) -> Result<Var> {
        let value = Tensor::lerp(self.value(a), self.value(b), self.value(x))?;
        Ok(self.push(value, Op::Lerp(a, b, x)))
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).reduce(op, axis)?;
        Ok(self.push(value, Op::Reduce(op, axis, a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_all());
        self.push(value, Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Reverse pass from a scalar `loss`; gradients of leaves are returned.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NoTape("backward called on an inference tape"));
        }
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs = node.op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let input_grads = self.adjoint(node, &g, &inputs, &needs)?;
            for ((v, ig), need) in inputs.iter().zip(input_grads).zip(needs) {
                if let (Some(ig), true) = (ig, need) {
                    accumulate(&mut grads[v.0], ig)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse pass and adds leaf gradients into `store`'s slots.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        self.accumulate_into(&grads, store)
    }

    pub fn accumulate_into(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(p), Some(g)) = (node.param, g) {
                if p.store == store.store_id() {
                    store.get_mut(p.id).grad.add_assign(g)?;
                }
            }
        }
        Ok(())
    }

    fn adjoint(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        inputs: &[Var],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                let da = needs[0].then(|| {
                    let mut out = vec![T::zero(); m * k];
                    crate::tensor::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        Strided::rows(0, n),
                        bv.data(),
                        Strided::transposed(0, n),
                        T::zero(),
                        &mut out,
                        Strided::rows(0, k),
                    );
                    Tensor::new(av.shape(), out)
                });
                let db = needs[1].then(|| {
                    let mut out = vec![T::zero(); k * n];
                    crate::tensor::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        Strided::transposed(0, k),
                        g.data(),
                        Strided::rows(0, n),
                        T::zero(),
                        &mut out,
                        Strided::rows(0, n),
                    );
                    Tensor::new(bv.shape(), out)
                });
                vec![da.transpose()?, db.transpose()?]
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (ga, gb_full) = match op {
                    BinaryOp::Add => (g.clone(), needs[1].then(|| g.clone())),
                    BinaryOp::Sub => (g.clone(), needs[1].then(|| g.unary(UnaryOp::Neg))),
                    BinaryOp::Mul => (
                        if needs[0] { g.binary(BinaryOp::Mul, bv)? } else { g.clone() },
                        if needs[1] { Some(g.binary(BinaryOp::Mul, av)?) } else { None },
                    ),
                };
                let gb = gb_full.map(|t| reduce_to(t, bv.shape())).transpose()?;
                vec![needs[0].then_some(ga), gb]
            }
            Op::Unary(op, a) => {
                let x = val(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| g * op.derivative(x, y))
                    .collect();
                vec![Some(Tensor::new(x.shape(), data)?)]
            }
            Op::Lerp(a, b, x) => {
                let (av, bv, xv) = (val(*a), val(*b), val(*x));
                let n = xv.numel();
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let d = (0..gd.len()).map(|i| gd[i] * (T::one() - xv.data()[i % n])).collect();
                    Tensor::new(av.shape(), d)
                });
                let gb = needs[1].then(|| {
                    let d = (0..gd.len()).map(|i| gd[i] * xv.data()[i % n]).collect();
                    Tensor::new(bv.shape(), d)
                });
                let gx = if needs[2] {
                    let full = g.binary(BinaryOp::Mul, &bv.sub(av)?)?;
                    Some(reduce_to(full, xv.shape())?)
                } else {
                    None
                };
                vec![ga.transpose()?, gb.transpose()?, gx]
            }
            Op::Reduce(op, axis, a) => {
                let x = val(*a);
                let (outer, len, inner) = x.axis_split(*axis)?;
                let mut out = vec![T::zero(); x.numel()];
                let gd = g.data();
                let y = node.value.data();
                let inv_len = T::one() / lit::<T>(len as f64);
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            let gi = gd[o * inner + i];
                            out[base + i] = match op {
                                ReduceOp::Sum => gi,
                                ReduceOp::Mean => gi * inv_len,
                                ReduceOp::L2Norm => {
                                    let nrm = y[o * inner + i];
                                    if nrm > T::zero() {
                                        gi * x.data()[base + i] / nrm
                                    } else {
                                        T::zero()
                                    }
                                }
                            };
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape(), out)?)]
            }
            Op::SumAll(a) => {
                let gv = g.item()?;
                vec![Some(Tensor::full(val(*a).shape(), gv))]
            }
            Op::Reshape(a) => vec![Some(g.clone().reshape(val(*a).shape())?)],
            Op::Custom(_, op) => {
                let ctx = BackwardCtx {
                    inputs: inputs.iter().map(|v| val(*v)).collect(),
                    output: &node.value,
                    grad: g,
                    needs: needs.to_vec(),
                };
                let out = op.backward(&ctx)?;
                if out.len() != inputs.len() {
                    return Err(Error::invalid("fused op returned wrong number of gradients"));
                }
                out
            }
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Sums a broadcast gradient back down to the operand's (suffix) shape.
fn reduce_to<T: Element>(g: Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g);
    }
    if !broadcastable(g.shape(), shape) {
        return Err(Error::shape("broadcast-adjoint", g.shape(), shape));
    }
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    for (i, &x) in g.data().iter().enumerate() {
        out[i % n] += x;
    }
    Tensor::new(shape, out)
}
