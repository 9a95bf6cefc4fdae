use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Affine(usize, R),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor<R>,
        inv_std: Vec<R>,
    },
    Sum(usize),
    MeanAxis(usize, usize),
    L2Norm(usize),
    Cosine(usize, usize, R),
    CosineRows(usize, usize, R),
}

#[derive(Debug)]
struct Node<R> {
    value: Rc<Tensor<R>>,
    op: Op<R>,
    requires_grad: bool,
}

/// Operation record for one forward pass. Records are appended in execution
/// order, so every record's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape<R = f64> {
    nodes: RefCell<Vec<Node<R>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, R = f64> {
    tape: &'t Tape<R>,
    id: usize,
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an input tensor. Gradients are reported only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&self, value: Tensor<R>, requires_grad: bool) -> Var<'_, R> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<R>) -> Var<'_, R> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<R>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar loss. Every record is visited once, in
    /// reverse order.
    pub fn backward(&self, loss: Var<'_, R>) -> Result<Gradients<R>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::invalid("backward", "tape is empty"));
        }
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(grad);
                continue;
            }
            let need = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &*nodes[i].value;
            let mut contribs: Vec<(usize, Tensor<R>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if need(*a) {
                        contribs.push((*a, grad.clone()));
                    }
                    if need(*b) {
                        contribs.push((*b, grad));
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        contribs.push((*a, grad.zip_map(val(*b), |g, y| g * y)?));
                    }
                    if need(*b) {
                        contribs.push((*b, grad.zip_map(val(*a), |g, x| g * x)?));
                    }
                }
                Op::AddBias(x, bias) => {
                    if need(*bias) {
                        contribs.push((*bias, kernels::column_sum(&grad, val(*bias).numel())));
                    }
                    if need(*x) {
                        contribs.push((*x, grad));
                    }
                }
                Op::Affine(x, scale) => {
                    let s = *scale;
                    contribs.push((*x, grad.map(|g| g * s)));
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), &grad, need(*a), need(*b));
                    contribs.extend(ga.map(|g| (*a, g)));
                    contribs.extend(gb.map(|g| (*b, g)));
                }
                Op::BatchMatMul(a, b) => {
                    let (ga, gb) =
                        kernels::batch_matmul_backward(val(*a), val(*b), &grad, need(*a), need(*b));
                    contribs.extend(ga.map(|g| (*a, g)));
                    contribs.extend(gb.map(|g| (*b, g)));
                }
                Op::Reshape(x) => {
                    contribs.push((*x, grad.reshaped(val(*x).shape())?));
                }
                Op::Permute(x, axes) => {
                    let inverse = kernels::inverse_permutation(axes);
                    contribs.push((*x, kernels::permute(&grad, &inverse)?));
                }
                Op::Gelu(x) => contribs.push((*x, kernels::gelu_backward(val(*x), &grad))),
                Op::Softmax(x) => contribs.push((*x, kernels::softmax_backward(&node.value, &grad))),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (dx, dg, db) = kernels::layernorm_backward(xhat, inv_std, val(*gain), &grad);
                    if need(*x) {
                        contribs.push((*x, dx));
                    }
                    if need(*gain) {
                        contribs.push((*gain, dg));
                    }
                    if need(*bias) {
                        contribs.push((*bias, db));
                    }
                }
                Op::Sum(x) => {
                    let g = grad.item();
                    contribs.push((*x, Tensor::full(val(*x).shape(), g)));
                }
                Op::MeanAxis(x, axis) => {
                    contribs.push((*x, kernels::mean_axis_backward(val(*x).shape(), *axis, &grad)));
                }
                Op::L2Norm(x) => {
                    let g = grad.item();
                    let norm = node.value.item();
                    let scale = if norm > R::zero() { g / norm } else { R::zero() };
                    contribs.push((*x, val(*x).map(|v| v * scale)));
                }
                Op::Cosine(a, b, eps) => {
                    let (ga, gb) =
                        kernels::cosine_backward(val(*a), val(*b), *eps, grad.item(), need(*a), need(*b));
                    contribs.extend(ga.map(|g| (*a, g)));
                    contribs.extend(gb.map(|g| (*b, g)));
                }
                Op::CosineRows(a, b, eps) => {
                    let (ga, gb) =
                        kernels::cosine_rows_backward(val(*a), val(*b), *eps, &grad, need(*a), need(*b));
                    contribs.extend(ga.map(|g| (*a, g)));
                    contribs.extend(gb.map(|g| (*b, g)));
                }
            }
            for (input, g) in contribs {
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut map = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                map.insert(id, g);
            }
        }
        Ok(Gradients { map })
    }
}

/// Gradients of a loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<R = f64> {
    map: HashMap<usize, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn wrt(&self, var: &Var<'_, R>) -> Option<&Tensor<R>> {
        self.map.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<'_, R>) -> Option<Tensor<R>> {
        self.map.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<'t, R: Real> Var<'t, R> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<R> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<R>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Copies the value out as a tensor detached from the tape.
    pub fn detach(&self) -> Tensor<R> {
        (*self.value()).clone()
    }

    fn same_tape(&self, other: &Var<'t, R>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::invalid("tape", "operands recorded on different tapes"));
        }
        Ok(())
    }

    fn unary(&self, value: Tensor<R>, op: Op<R>) -> Var<'t, R> {
        self.tape.push(value, op, self.tape.requires_grad(self.id))
    }

    fn binary(&self, other: &Var<'t, R>, value: Tensor<R>, op: Op<R>) -> Var<'t, R> {
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(other.id);
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        kernels::same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.add(&other.scale(-R::one()))
    }

    pub fn mul(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        kernels::same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    /// Adds a vector along the last dimension of every row.
    pub fn add_bias(&self, bias: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_tape(bias)?;
        let out = kernels::add_bias(&self.value(), &bias.value())?;
        Ok(self.binary(bias, out, Op::AddBias(self.id, bias.id)))
    }

    pub fn scale(&self, factor: R) -> Var<'t, R> {
        self.affine(factor, R::zero())
    }

    /// `factor · x + shift`, elementwise.
    pub fn affine(&self, factor: R, shift: R) -> Var<'t, R> {
        let out = self.value().map(|v| factor * v + shift);
        self.unary(out, Op::Affine(self.id, factor))
    }

    pub fn matmul(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_tape(other)?;
        let out = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// Batched product of `[b, m, k]` and `[b, k, n]`.
    pub fn batch_matmul(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_tape(other)?;
        let out = kernels::batch_matmul(&self.value(), &other.value())?;
        Ok(self.binary(other, out, Op::BatchMatMul(self.id, other.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, R>> {
        let out = (*self.value()).clone().reshaped(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, R>> {
        let out = kernels::permute(&self.value(), axes)?;
        Ok(self.unary(out, Op::Permute(self.id, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, R>> {
        let rank = self.value().shape().len();
        if rank < 2 {
            return Err(Error::invalid("transpose", "need at least two dimensions"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&self) -> Var<'t, R> {
        let out = kernels::gelu(&self.value());
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t, R>> {
        let out = kernels::softmax_rows(&self.value())?;
        Ok(self.unary(out, Op::Softmax(self.id)))
    }

    /// Normalizes every row of the last dimension, then applies `gain` and `bias`.
    pub fn layernorm(&self, gain: &Var<'t, R>, bias: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (out, xhat, inv_std) = kernels::layernorm(&self.value(), &gain.value(), &bias.value())?;
        let rg = [self.id, gain.id, bias.id]
            .iter()
            .any(|&i| self.tape.requires_grad(i));
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'t, R> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, R>> {
        let out = kernels::mean_axis(&self.value(), axis)?;
        Ok(self.unary(out, Op::MeanAxis(self.id, axis)))
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(&self) -> Var<'t, R> {
        let out = Tensor::scalar(kernels::l2_norm(&self.value()));
        self.unary(out, Op::L2Norm(self.id))
    }

    /// `(a·b) / (‖a‖‖b‖ + eps)` with both operands flattened.
    pub fn cosine_similarity(&self, other: &Var<'t, R>, eps: R) -> Result<Var<'t, R>> {
        self.same_tape(other)?;
        if eps <= R::zero() {
            return Err(Error::invalid("cosine_similarity", "eps must be positive"));
        }
        let s = kernels::cosine_similarity(&self.value(), &other.value(), eps)?;
        Ok(self.binary(other, Tensor::scalar(s), Op::Cosine(self.id, other.id, eps)))
    }

    /// Cosine similarity of matching rows (last dimension), one value per row.
    pub fn cosine_rows(&self, other: &Var<'t, R>, eps: R) -> Result<Var<'t, R>> {
        self.same_tape(other)?;
        if eps <= R::zero() {
            return Err(Error::invalid("cosine_rows", "eps must be positive"));
        }
        let out = kernels::cosine_rows(&self.value(), &other.value(), eps)?;
        Ok(self.binary(other, out, Op::CosineRows(self.id, other.id, eps)))
    }
}
