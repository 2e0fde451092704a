//! Wengert-list autodiff.
//!
//! Network and loss code is written once against [`Ops`]. [`Tape`] records
//! every call for a later [`Tape::backward`]; [`NoGrad`] evaluates eagerly
//! and keeps nothing, which is what teacher inference uses.

use super::kernels;
use super::{ConvGeometry, Real, Tensor};
use crate::error::{Error, Result};

/// The differentiable operator set.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive<T> {
    Conv2d(ConvGeometry),
    Dense,
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Reshape(Vec<usize>),
    Softmax,
    LogSoftmax,
    Sigmoid,
    Add,
    Sub,
    Mul,
    /// `scale · x + shift`
    Affine { scale: T, shift: T },
    Log,
    Square,
    Sum,
    Mean,
    Pick(Vec<usize>),
    Clamp { lo: T, hi: T },
}

impl<T> Primitive<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d(_) => "conv2d",
            Primitive::Dense => "dense",
            Primitive::Relu => "relu",
            Primitive::MaxPool2d { .. } => "max_pool2d",
            Primitive::Reshape(_) => "reshape",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Affine { .. } => "affine",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Pick(_) => "pick",
            Primitive::Clamp { .. } => "clamp",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Conv2d(_) | Primitive::Dense => 3,
            Primitive::Add | Primitive::Sub | Primitive::Mul => 2,
            _ => 1,
        }
    }
}

fn forward<T: Real>(prim: &Primitive<T>, x: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.len() != prim.arity() {
        return Err(Error::InvalidArgument(format!(
            "{} takes {} operands, got {}",
            prim.name(),
            prim.arity(),
            x.len()
        )));
    }
    let out = match prim {
        Primitive::Conv2d(g) => kernels::conv2d(x[0], x[1], x[2], g)?,
        Primitive::Dense => kernels::dense(x[0], x[1], x[2])?,
        Primitive::Relu => kernels::relu(x[0]),
        Primitive::MaxPool2d { window, stride } => {
            return kernels::max_pool2d(x[0], *window, *stride);
        }
        Primitive::Reshape(shape) => x[0].reshape(shape.clone())?,
        Primitive::Softmax => kernels::softmax(x[0])?,
        Primitive::LogSoftmax => kernels::log_softmax(x[0])?,
        Primitive::Sigmoid => kernels::sigmoid(x[0]),
        Primitive::Add => kernels::zip_with("add", x[0], x[1], |a, b| a + b)?,
        Primitive::Sub => kernels::zip_with("sub", x[0], x[1], |a, b| a - b)?,
        Primitive::Mul => kernels::zip_with("mul", x[0], x[1], |a, b| a * b)?,
        Primitive::Affine { scale, shift } => x[0].map(|v| v * *scale + *shift),
        Primitive::Log => x[0].map(|v| v.ln()),
        Primitive::Square => x[0].map(|v| v * v),
        Primitive::Sum => Tensor::scalar(x[0].sum()),
        Primitive::Mean => Tensor::scalar(x[0].mean()),
        Primitive::Pick(index) => kernels::pick(x[0], index)?,
        Primitive::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
            }
            x[0].map(|v| v.max(*lo).min(*hi))
        }
    };
    Ok((out, Vec::new()))
}

fn backward<T: Real>(
    prim: &Primitive<T>,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    saved: &[usize],
    dy: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let like = |t: &Tensor<T>, data: Vec<T>| Tensor::from_parts(t.shape_ref().clone(), data);
    let grads = match prim {
        Primitive::Conv2d(g) => {
            let (dx, dw, db) = kernels::conv2d_backward(x[0], x[1], g, dy)?;
            vec![dx, dw, db]
        }
        Primitive::Dense => {
            let (dx, dw, db) = kernels::dense_backward(x[0], x[1], dy)?;
            vec![dx, dw, db]
        }
        Primitive::Relu => vec![kernels::relu_backward(x[0], dy)],
        Primitive::MaxPool2d { .. } => {
            vec![kernels::max_pool2d_backward(x[0].shape_ref(), saved, dy)]
        }
        Primitive::Reshape(_) => vec![dy.reshape(x[0].shape().to_vec())?],
        Primitive::Softmax => vec![kernels::softmax_backward(y, dy)],
        Primitive::LogSoftmax => vec![kernels::log_softmax_backward(y, dy)],
        Primitive::Sigmoid => vec![kernels::sigmoid_backward(y, dy)],
        Primitive::Add => vec![dy.clone(), dy.clone()],
        Primitive::Sub => vec![dy.clone(), dy.map(|g| -g)],
        Primitive::Mul => vec![
            kernels::zip_with("mul", dy, x[1], |g, b| g * b)?,
            kernels::zip_with("mul", dy, x[0], |g, a| g * a)?,
        ],
        Primitive::Affine { scale, .. } => vec![dy.map(|g| g * *scale)],
        Primitive::Log => vec![kernels::zip_with("log", dy, x[0], |g, v| g / v)?],
        Primitive::Square => {
            let two = T::one() + T::one();
            vec![kernels::zip_with("square", dy, x[0], |g, v| two * v * g)?]
        }
        Primitive::Sum => {
            let g = dy.item()?;
            vec![like(x[0], vec![g; x[0].numel()])]
        }
        Primitive::Mean => {
            let g = dy.item()? / T::from_usize(x[0].numel()).unwrap();
            vec![like(x[0], vec![g; x[0].numel()])]
        }
        Primitive::Pick(index) => vec![kernels::pick_backward(x[0].shape_ref(), index, dy)],
        Primitive::Clamp { lo, hi } => vec![kernels::zip_with("clamp", dy, x[0], |g, v| {
            if v >= *lo && v <= *hi {
                g
            } else {
                T::zero()
            }
        })?],
    };
    Ok(grads)
}

/// An executor for the operator set.
pub trait Ops<T: Real> {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    /// A value that never receives gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;

    /// Binds a parameter tensor; `trainable` parameters become gradient
    /// leaves on a recording executor.
    fn param(&mut self, t: &Tensor<T>, trainable: bool) -> Self::Value;

    fn apply(&mut self, prim: Primitive<T>, inputs: &[&Self::Value]) -> Result<Self::Value>;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
        geom: ConvGeometry,
    ) -> Result<Self::Value> {
        self.apply(Primitive::Conv2d(geom), &[x, w, b])
    }

    fn dense(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Dense, &[x, w, b])
    }

    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Relu, &[x])
    }

    fn max_pool2d(&mut self, x: &Self::Value, window: usize, stride: usize) -> Result<Self::Value> {
        self.apply(Primitive::MaxPool2d { window, stride }, &[x])
    }

    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    /// `[N, ...] -> [N, prod(...)]`
    fn flatten(&mut self, x: &Self::Value) -> Result<Self::Value> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    fn softmax(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Softmax, &[x])
    }

    fn log_softmax(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::LogSoftmax, &[x])
    }

    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Sub, &[a, b])
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Mul, &[a, b])
    }

    fn affine(&mut self, x: &Self::Value, scale: T, shift: T) -> Result<Self::Value> {
        self.apply(Primitive::Affine { scale, shift }, &[x])
    }

    fn scale(&mut self, x: &Self::Value, factor: T) -> Result<Self::Value> {
        self.affine(x, factor, T::zero())
    }

    fn log(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Log, &[x])
    }

    fn square(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Square, &[x])
    }

    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Sum, &[x])
    }

    fn mean(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Mean, &[x])
    }

    fn pick(&mut self, x: &Self::Value, index: &[usize]) -> Result<Self::Value> {
        self.apply(Primitive::Pick(index.to_vec()), &[x])
    }

    fn clamp(&mut self, x: &Self::Value, lo: T, hi: T) -> Result<Self::Value> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }
}

/// Eager evaluation without history.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoGrad {
    check_finite: bool,
}

impl NoGrad {
    pub fn new() -> Self {
        NoGrad { check_finite: true }
    }

    /// Skips the per-operation finiteness check.
    pub fn unchecked() -> Self {
        NoGrad { check_finite: false }
    }
}

impl<T: Real> Ops<T> for NoGrad {
    type Value = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn param(&mut self, t: &Tensor<T>, _trainable: bool) -> Tensor<T> {
        t.clone()
    }

    fn apply(&mut self, prim: Primitive<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (out, _) = forward(&prim, inputs)?;
        if self.check_finite {
            out.ensure_finite(prim.name())?;
        }
        Ok(out)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

enum NodeKind<T> {
    Leaf,
    Constant,
    Op {
        prim: Primitive<T>,
        inputs: Vec<Var>,
        saved: Vec<usize>,
    },
    Custom {
        name: String,
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    kind: NodeKind<T>,
    requires_grad: bool,
}

/// Append-only record of operations. Operands always precede their
/// consumers, so index order is a topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaves: Vec<Var>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: Vec::new(),
            check_finite: true,
        }
    }

    /// A tape that skips per-operation finiteness checks (training mode).
    pub fn unchecked() -> Self {
        Tape {
            check_finite: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    /// Registers a tensor that requires a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, NodeKind::Leaf, true);
        self.leaves.push(v);
        v
    }

    fn push(&mut self, value: Tensor<T>, kind: NodeKind<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::InvalidArgument(format!("{v:?} is not on this tape")))
    }

    /// Records an operation with a caller-supplied backward rule. The rule
    /// receives the operand values and the upstream gradient and returns one
    /// gradient per operand.
    pub fn custom(
        &mut self,
        name: &str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>> + 'static,
    ) -> Result<Var> {
        let mut requires_grad = false;
        for &v in inputs {
            requires_grad |= self.node(v)?.requires_grad;
        }
        Ok(self.push(
            value,
            NodeKind::Custom {
                name: name.to_string(),
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            requires_grad,
        ))
    }

    /// Reverse pass from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_node = self.node(root)?;
        if !root_node.value.is_scalar() {
            return Err(Error::NotScalar(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::from_parts(
            root_node.value.shape_ref().clone(),
            vec![T::one()],
        ));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let (inputs, input_grads) = match &node.kind {
                NodeKind::Leaf | NodeKind::Constant => {
                    grads[idx] = Some(dy);
                    continue;
                }
                NodeKind::Op { prim, inputs, saved } => {
                    let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    (inputs, backward(prim, &xs, &node.value, saved, &dy)?)
                }
                NodeKind::Custom {
                    name,
                    inputs,
                    backward,
                } => {
                    let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let gs = backward(&xs, &dy);
                    if gs.len() != inputs.len() {
                        return Err(Error::InvalidArgument(format!(
                            "custom op {name} returned {} gradients for {} inputs",
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    (inputs, gs)
                }
            };
            for (v, g) in inputs.iter().zip(input_grads) {
                let target = &self.nodes[v.0];
                if !target.requires_grad {
                    continue;
                }
                if g.shape() != target.value.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!(
                            "gradient {:?} for operand of shape {:?}",
                            g.shape(),
                            target.value.shape()
                        ),
                    ));
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let by_leaf = self
            .leaves
            .iter()
            .map(|&leaf| {
                let g = grads
                    .get_mut(leaf.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[leaf.0].value));
                (leaf, g)
            })
            .collect();
        Ok(Gradients { by_leaf })
    }
}

impl<T: Real> Ops<T> for Tape<T> {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, NodeKind::Constant, false)
    }

    fn param(&mut self, t: &Tensor<T>, trainable: bool) -> Var {
        if trainable {
            self.leaf(t.clone())
        } else {
            self.constant(t.clone())
        }
    }

    fn apply(&mut self, prim: Primitive<T>, inputs: &[&Var]) -> Result<Var> {
        let mut requires_grad = false;
        for v in inputs {
            requires_grad |= self.node(**v)?.requires_grad;
        }
        let (out, saved) = {
            let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&prim, &xs)?
        };
        if self.check_finite {
            out.ensure_finite(prim.name())?;
        }
        let kind = NodeKind::Op {
            prim,
            inputs: inputs.iter().map(|v| **v).collect(),
            saved,
        };
        Ok(self.push(out, kind, requires_grad))
    }
}

/// Leaf gradients from one backward pass. Every leaf on the tape has an
/// entry; leaves the root does not depend on get zeros.
#[derive(Debug)]
pub struct Gradients<T> {
    by_leaf: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.by_leaf.iter().find(|(v, _)| *v == leaf).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.by_leaf.iter().map(|(v, g)| (*v, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, -2.0, 3.0]));
        let s = tape.sum(&x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_square_norm_is_x() {
        let data = [0.5, -1.5, 2.0, 4.0];
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&data));
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq).unwrap();
        let half = tape.scale(&s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &data);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, 2.0]));
        let y = tape.leaf(vec_t(&[3.0]));
        let s = tape.sum(&x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, 2.0]));
        let r = tape.relu(&x).unwrap();
        assert!(matches!(tape.backward(r), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, 2.0]));
        let c = tape.constant(vec_t(&[5.0, 7.0]));
        let p = tape.mul(&x, &c).unwrap();
        let s = tape.sum(&p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 7.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn checked_tape_reports_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[0.0]));
        assert!(matches!(tape.log(&x), Err(Error::NonFinite(_))));
        let mut lax = Tape::unchecked();
        let x = lax.leaf(vec_t(&[0.0]));
        assert!(lax.log(&x).is_ok());
    }

    #[test]
    fn no_grad_records_nothing() {
        let mut ng = NoGrad::new();
        let x = vec_t(&[1.0, -1.0]);
        let y = ng.relu(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }
}
