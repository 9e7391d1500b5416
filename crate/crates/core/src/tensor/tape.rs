use std::str::FromStr;

use super::kernels::{self, ConvGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    Permute,
    Reshape,
    Concat,
    Slice,
    Sum,
    Mean,
    Conv1dTime,
    Scale,
    Log,
    Exp,
    Abs,
    Square,
    StraightThrough,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Leaf => "leaf",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::BatchMatMul => "bmm",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Tanh => "tanh",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::Permute => "permute",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Slice => "slice",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::Conv1dTime => "conv1d_time",
            PrimitiveKind::Scale => "scale",
            PrimitiveKind::Log => "log",
            PrimitiveKind::Exp => "exp",
            PrimitiveKind::Abs => "abs",
            PrimitiveKind::Square => "square",
            PrimitiveKind::StraightThrough => "straight_through",
        }
    }

    const ALL: [PrimitiveKind; 23] = [
        PrimitiveKind::Leaf,
        PrimitiveKind::MatMul,
        PrimitiveKind::BatchMatMul,
        PrimitiveKind::Add,
        PrimitiveKind::Sub,
        PrimitiveKind::Mul,
        PrimitiveKind::Sigmoid,
        PrimitiveKind::Tanh,
        PrimitiveKind::Relu,
        PrimitiveKind::Softmax,
        PrimitiveKind::Permute,
        PrimitiveKind::Reshape,
        PrimitiveKind::Concat,
        PrimitiveKind::Slice,
        PrimitiveKind::Sum,
        PrimitiveKind::Mean,
        PrimitiveKind::Conv1dTime,
        PrimitiveKind::Scale,
        PrimitiveKind::Log,
        PrimitiveKind::Exp,
        PrimitiveKind::Abs,
        PrimitiveKind::Square,
        PrimitiveKind::StraightThrough,
    ];
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PrimitiveKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s && *k != PrimitiveKind::Leaf)
            .ok_or_else(|| Error::UnknownPrimitive(s.to_string()))
    }
}

/// Attribute record accompanying a primitive application. Each primitive
/// reads only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub axes: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    pub shape: Option<Vec<usize>>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub dilation: Option<usize>,
    pub scalar: Option<f64>,
    pub index: Option<usize>,
}

impl Attrs {
    pub fn axis(axis: usize) -> Self {
        Attrs {
            axis: Some(axis),
            ..Default::default()
        }
    }

    pub fn axes(axes: &[usize]) -> Self {
        Attrs {
            axes: Some(axes.to_vec()),
            ..Default::default()
        }
    }

    pub fn perm(perm: &[usize]) -> Self {
        Attrs {
            perm: Some(perm.to_vec()),
            ..Default::default()
        }
    }

    pub fn shape(shape: &[usize]) -> Self {
        Attrs {
            shape: Some(shape.to_vec()),
            ..Default::default()
        }
    }

    pub fn slice(axis: usize, start: usize, end: usize) -> Self {
        Attrs {
            axis: Some(axis),
            start: Some(start),
            end: Some(end),
            ..Default::default()
        }
    }

    pub fn scalar(value: f64) -> Self {
        Attrs {
            scalar: Some(value),
            ..Default::default()
        }
    }

    pub fn dilation(dilation: usize) -> Self {
        Attrs {
            dilation: Some(dilation),
            ..Default::default()
        }
    }

    pub fn index(index: usize) -> Self {
        Attrs {
            index: Some(index),
            ..Default::default()
        }
    }
}

struct Node {
    kind: PrimitiveKind,
    inputs: Vec<Var>,
    attrs: Attrs,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when the value does not lie on a differentiable path to the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, var: Var) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel(&self.shapes[var.0])],
        }
    }

    pub fn tensor(&self, var: Var) -> Tensor {
        Tensor::new(self.shapes[var.0].clone(), self.get_or_zeros(var))
            .expect("gradient shape matches value")
    }
}

/// Ordered record of primitive applications. Inputs always precede outputs,
/// so a single reverse sweep is a valid backward schedule.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(primitive: PrimitiveKind, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        primitive: primitive.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn attr_err(primitive: PrimitiveKind, attr: &'static str) -> Error {
    Error::BadAttribute {
        primitive: primitive.name(),
        attr,
    }
}

/// Output shape for elementwise binary ops. The smaller operand must equal the
/// larger, be a suffix of its shape, or hold a single element.
fn broadcast_shape(kind: PrimitiveKind, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (big, small) = if numel(a) >= numel(b) { (a, b) } else { (b, a) };
    if numel(small) == 1 || (small.len() <= big.len() && big.ends_with(small)) {
        Ok(big.to_vec())
    } else {
        Err(shape_err(kind, a, b))
    }
}

/// Geometry of a matmul: `lead` independent products of (m×k)·(k×n).
#[derive(Clone, Copy)]
enum MatMulCase {
    /// rhs is a single matrix shared across all lhs leading indices
    SharedRhs,
    /// lhs is a single matrix shared across all rhs leading indices
    SharedLhs,
    Batched,
}

struct MatMulGeom {
    case: MatMulCase,
    lead: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_geom(kind: PrimitiveKind, a: &[usize], b: &[usize]) -> Result<MatMulGeom> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err(kind, a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_err(kind, a, b));
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let (case, lead_shape) = if b_lead.is_empty() && kind == PrimitiveKind::MatMul {
        (MatMulCase::SharedRhs, a_lead)
    } else if a_lead.is_empty() && kind == PrimitiveKind::MatMul {
        (MatMulCase::SharedLhs, b_lead)
    } else if a_lead == b_lead {
        (MatMulCase::Batched, a_lead)
    } else {
        return Err(shape_err(kind, a, b));
    };
    let mut out_shape = lead_shape.to_vec();
    out_shape.extend([m, n]);
    Ok(MatMulGeom {
        case,
        lead: numel(lead_shape),
        m,
        k,
        n,
        out_shape,
    })
}

/// Maps every flat index of `shape` to its flat index after removing `axes`.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<bool> = (0..shape.len()).map(|ax| !axes.contains(&ax)).collect();
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&d, _)| d)
        .collect();
    let out_strides = kernels::strides(&out_shape);
    let mut stride_for_axis = vec![0usize; shape.len()];
    let mut j = 0;
    for ax in 0..shape.len() {
        if keep[ax] {
            stride_for_axis[ax] = out_strides[j];
            j += 1;
        }
    }
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut dst = 0usize;
    for _ in 0..total {
        map.push(dst);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            dst += stride_for_axis[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            dst -= stride_for_axis[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

fn normalized_axes(kind: PrimitiveKind, attrs: &Attrs, ndim: usize) -> Result<Vec<usize>> {
    let mut axes = match &attrs.axes {
        Some(a) => a.clone(),
        None => (0..ndim).collect(),
    };
    axes.sort_unstable();
    axes.dedup();
    if axes.iter().any(|&a| a >= ndim) {
        return Err(attr_err(kind, "axes"));
    }
    Ok(axes)
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients flow to it iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(PrimitiveKind::Leaf, Vec::new(), Attrs::default(), tensor, requires_grad)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn param(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = true;
        self.leaf(tensor)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(
        &mut self,
        kind: PrimitiveKind,
        inputs: Vec<Var>,
        attrs: Attrs,
        value: Tensor,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            kind,
            inputs,
            attrs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies a primitive by name. Unknown names are an error.
    pub fn apply_named(&mut self, name: &str, inputs: &[Var], attrs: Attrs) -> Result<Var> {
        let kind: PrimitiveKind = name.parse()?;
        self.apply(kind, inputs, attrs)
    }

    pub fn apply(&mut self, kind: PrimitiveKind, inputs: &[Var], attrs: Attrs) -> Result<Var> {
        if let Some(v) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Backward(format!("{v:?} is not on this tape")));
        }
        let value = self.forward(kind, inputs, &attrs)?;
        if !value.is_finite() && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            return Err(Error::NonFinite {
                primitive: kind.name(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(kind, inputs.to_vec(), attrs, value, requires_grad))
    }

    fn arity(kind: PrimitiveKind, inputs: &[Var], n: usize) -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::BadAttribute {
                primitive: kind.name(),
                attr: "inputs",
            })
        }
    }

    fn forward(&self, kind: PrimitiveKind, inputs: &[Var], attrs: &Attrs) -> Result<Tensor> {
        use PrimitiveKind as P;
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        match kind {
            P::Leaf => Err(Error::UnknownPrimitive("leaf".into())),
            P::MatMul | P::BatchMatMul => {
                Self::arity(kind, inputs, 2)?;
                let (a, b) = (val(0), val(1));
                let g = matmul_geom(kind, a.shape(), b.shape())?;
                let mut out = vec![0.0; numel(&g.out_shape)];
                let (mk, kn, mn) = (g.m * g.k, g.k * g.n, g.m * g.n);
                match g.case {
                    MatMulCase::SharedRhs => {
                        kernels::mm_nn(a.data(), b.data(), &mut out, g.lead * g.m, g.k, g.n)
                    }
                    MatMulCase::SharedLhs => {
                        for l in 0..g.lead {
                            kernels::mm_nn(
                                a.data(),
                                &b.data()[l * kn..(l + 1) * kn],
                                &mut out[l * mn..(l + 1) * mn],
                                g.m,
                                g.k,
                                g.n,
                            );
                        }
                    }
                    MatMulCase::Batched => {
                        for l in 0..g.lead {
                            kernels::mm_nn(
                                &a.data()[l * mk..(l + 1) * mk],
                                &b.data()[l * kn..(l + 1) * kn],
                                &mut out[l * mn..(l + 1) * mn],
                                g.m,
                                g.k,
                                g.n,
                            );
                        }
                    }
                }
                Tensor::new(g.out_shape, out)
            }
            P::Add | P::Sub | P::Mul => {
                Self::arity(kind, inputs, 2)?;
                let (a, b) = (val(0), val(1));
                let shape = broadcast_shape(kind, a.shape(), b.shape())?;
                let (ad, bd) = (a.data(), b.data());
                let n = numel(&shape);
                let out = match kind {
                    P::Add => kernels::broadcast_map(ad, bd, n, |x, y| x + y),
                    P::Sub => kernels::broadcast_map(ad, bd, n, |x, y| x - y),
                    _ => kernels::broadcast_map(ad, bd, n, |x, y| x * y),
                };
                Tensor::new(shape, out)
            }
            P::Sigmoid => {
                Self::arity(kind, inputs, 1)?;
                Ok(unary(val(0), sigmoid))
            }
            P::Tanh => {
                Self::arity(kind, inputs, 1)?;
                Ok(unary(val(0), f64::tanh))
            }
            P::Relu => {
                Self::arity(kind, inputs, 1)?;
                Ok(unary(val(0), |v| v.max(0.0)))
            }
            P::Log => {
                Self::arity(kind, inputs, 1)?;
                Ok(unary(val(0), f64::ln))
            }
            P::Exp => {
                Self::arity(kind, inputs, 1)?;
                Ok(unary(val(0), f64::exp))
            }
            P::Abs => {
                Self::arity(kind, inputs, 1)?;
                Ok(unary(val(0), f64::abs))
            }
            P::Square => {
                Self::arity(kind, inputs, 1)?;
                Ok(unary(val(0), |v| v * v))
            }
            P::Scale => {
                Self::arity(kind, inputs, 1)?;
                let c = attrs.scalar.ok_or_else(|| attr_err(kind, "scalar"))?;
                Ok(unary(val(0), |v| v * c))
            }
            P::Softmax => {
                Self::arity(kind, inputs, 1)?;
                let x = val(0);
                let axis = attrs.axis.ok_or_else(|| attr_err(kind, "axis"))?;
                if axis >= x.ndim() {
                    return Err(attr_err(kind, "axis"));
                }
                let (outer, len, inner) = kernels::split_axis(x.shape(), axis);
                let mut out = vec![0.0; x.len()];
                kernels::softmax_forward(x.data(), &mut out, outer, len, inner);
                Tensor::new(x.shape().to_vec(), out)
            }
            P::Permute => {
                Self::arity(kind, inputs, 1)?;
                let x = val(0);
                let perm = attrs.perm.as_ref().ok_or_else(|| attr_err(kind, "perm"))?;
                let mut sorted = perm.clone();
                sorted.sort_unstable();
                if sorted != (0..x.ndim()).collect::<Vec<_>>() {
                    return Err(attr_err(kind, "perm"));
                }
                let map = kernels::permute_index_map(x.shape(), perm);
                let shape = perm.iter().map(|&p| x.shape()[p]).collect();
                Tensor::new(shape, map.iter().map(|&i| x.data()[i]).collect())
            }
            P::Reshape => {
                Self::arity(kind, inputs, 1)?;
                let x = val(0);
                let shape = attrs.shape.as_ref().ok_or_else(|| attr_err(kind, "shape"))?;
                if numel(shape) != x.len() {
                    return Err(shape_err(kind, x.shape(), shape));
                }
                Tensor::new(shape.clone(), x.data().to_vec())
            }
            P::Concat => {
                if inputs.is_empty() {
                    return Err(attr_err(kind, "inputs"));
                }
                let axis = attrs.axis.ok_or_else(|| attr_err(kind, "axis"))?;
                let first = val(0).shape().to_vec();
                if axis >= first.len() {
                    return Err(attr_err(kind, "axis"));
                }
                let mut total = 0;
                for i in 0..inputs.len() {
                    let s = val(i).shape();
                    let compatible = s.len() == first.len()
                        && s.iter()
                            .zip(&first)
                            .enumerate()
                            .all(|(ax, (a, b))| ax == axis || a == b);
                    if !compatible {
                        return Err(shape_err(kind, &first, s));
                    }
                    total += s[axis];
                }
                let mut shape = first.clone();
                shape[axis] = total;
                let (outer, _, inner) = kernels::split_axis(&shape, axis);
                let mut out = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    for i in 0..inputs.len() {
                        let x = val(i);
                        let chunk = x.shape()[axis] * inner;
                        out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Tensor::new(shape, out)
            }
            P::Slice => {
                Self::arity(kind, inputs, 1)?;
                let x = val(0);
                let axis = attrs.axis.ok_or_else(|| attr_err(kind, "axis"))?;
                let start = attrs.start.ok_or_else(|| attr_err(kind, "start"))?;
                let end = attrs.end.ok_or_else(|| attr_err(kind, "end"))?;
                if axis >= x.ndim() || start >= end || end > x.shape()[axis] {
                    return Err(attr_err(kind, "range"));
                }
                let (outer, len, inner) = kernels::split_axis(x.shape(), axis);
                let mut out = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * len * inner;
                    out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = end - start;
                Tensor::new(shape, out)
            }
            P::Sum | P::Mean => {
                Self::arity(kind, inputs, 1)?;
                let x = val(0);
                let axes = normalized_axes(kind, attrs, x.ndim())?;
                let (shape, map) = reduce_map(x.shape(), &axes);
                let mut out = vec![0.0; numel(&shape)];
                for (v, &dst) in x.data().iter().zip(&map) {
                    out[dst] += v;
                }
                if kind == P::Mean {
                    let count = (x.len() / out.len().max(1)) as f64;
                    out.iter_mut().for_each(|v| *v /= count);
                }
                Tensor::new(shape, out)
            }
            P::Conv1dTime => {
                Self::arity(kind, inputs, 2)?;
                let (x, w) = (val(0), val(1));
                let geom = conv_geom(x.shape(), w.shape(), attrs)?;
                let mut out = vec![0.0; geom.batch * geom.time * geom.nodes * geom.c_out];
                geom.forward(x.data(), w.data(), &mut out);
                Tensor::new(vec![geom.batch, geom.time, geom.nodes, geom.c_out], out)
            }
            P::StraightThrough => {
                let index = attrs.index.ok_or_else(|| attr_err(kind, "index"))?;
                let p = val(0);
                let m = inputs.len() - 1;
                if p.shape() != [m] || index >= m {
                    return Err(shape_err(kind, p.shape(), &[m]));
                }
                let shape = val(1).shape();
                for i in 2..inputs.len() {
                    if val(i).shape() != shape {
                        return Err(shape_err(kind, shape, val(i).shape()));
                    }
                }
                Ok(val(1 + index).clone_value())
            }
        }
    }

    /// Reverse sweep from a single-element `loss`. A tape supports one
    /// backward pass; record a fresh tape for the next one.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        if self.consumed {
            return Err(Error::Backward(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let loss_val = &self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward(format!("{loss:?} is not on this tape")))?
            .value;
        if loss_val.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                loss_val.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.kind == PrimitiveKind::Leaf {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            // Intermediate gradients are dropped once propagated.
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if node.kind == PrimitiveKind::Leaf && node.requires_grad {
                node.value.grad = Some(g.clone().unwrap_or_else(|| vec![0.0; node.value.len()]));
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        use PrimitiveKind as P;
        let inputs = &node.inputs;
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let wants = |i: usize| self.nodes[inputs[i].0].requires_grad;
        // Accumulates `f(&mut buffer)` into input i's gradient.
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            let var = inputs[i];
            let len = self.nodes[var.0].value.len();
            let buf = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match node.kind {
            P::Leaf => {}
            P::MatMul | P::BatchMatMul => {
                let (a, b) = (val(0), val(1));
                let geo = matmul_geom(node.kind, a.shape(), b.shape())?;
                let (m, k, n) = (geo.m, geo.k, geo.n);
                let (mk, kn, mn) = (m * k, k * n, m * n);
                if wants(0) {
                    acc(0, &mut |ga| match geo.case {
                        MatMulCase::SharedRhs => {
                            kernels::mm_nt(g, b.data(), ga, geo.lead * m, n, k)
                        }
                        MatMulCase::SharedLhs => {
                            for l in 0..geo.lead {
                                kernels::mm_nt(
                                    &g[l * mn..(l + 1) * mn],
                                    &b.data()[l * kn..(l + 1) * kn],
                                    ga,
                                    m,
                                    n,
                                    k,
                                );
                            }
                        }
                        MatMulCase::Batched => {
                            for l in 0..geo.lead {
                                kernels::mm_nt(
                                    &g[l * mn..(l + 1) * mn],
                                    &b.data()[l * kn..(l + 1) * kn],
                                    &mut ga[l * mk..(l + 1) * mk],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        }
                    });
                }
                if wants(1) {
                    acc(1, &mut |gb| match geo.case {
                        MatMulCase::SharedRhs => {
                            kernels::mm_tn(a.data(), g, gb, geo.lead * m, k, n)
                        }
                        MatMulCase::SharedLhs => {
                            for l in 0..geo.lead {
                                kernels::mm_tn(
                                    a.data(),
                                    &g[l * mn..(l + 1) * mn],
                                    &mut gb[l * kn..(l + 1) * kn],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        }
                        MatMulCase::Batched => {
                            for l in 0..geo.lead {
                                kernels::mm_tn(
                                    &a.data()[l * mk..(l + 1) * mk],
                                    &g[l * mn..(l + 1) * mn],
                                    &mut gb[l * kn..(l + 1) * kn],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        }
                    });
                }
            }
            P::Add | P::Sub | P::Mul => {
                let (a, b) = (val(0), val(1));
                let (ad, bd) = (a.data(), b.data());
                if wants(0) {
                    acc(0, &mut |ga| match node.kind {
                        P::Mul => kernels::broadcast_accumulate(ga, g, bd, |gv, o| gv * o),
                        _ => kernels::broadcast_accumulate(ga, g, g, |gv, _| gv),
                    });
                }
                if wants(1) {
                    acc(1, &mut |gb| match node.kind {
                        P::Mul => kernels::broadcast_accumulate(gb, g, ad, |gv, o| gv * o),
                        P::Sub => kernels::broadcast_accumulate(gb, g, g, |gv, _| -gv),
                        _ => kernels::broadcast_accumulate(gb, g, g, |gv, _| gv),
                    });
                }
            }
            P::Sigmoid | P::Tanh | P::Relu | P::Log | P::Exp | P::Abs | P::Square | P::Scale => {
                if wants(0) {
                    let x = val(0).data();
                    let y = node.value.data();
                    let c = node.attrs.scalar.unwrap_or(1.0);
                    let kind = node.kind;
                    acc(0, &mut |gx| match kind {
                        P::Sigmoid => unary_backward(gx, g, y, |y| y * (1.0 - y)),
                        P::Tanh => unary_backward(gx, g, y, |y| 1.0 - y * y),
                        P::Relu => unary_backward(gx, g, x, |x| (x > 0.0) as u8 as f64),
                        P::Log => unary_backward(gx, g, x, |x| 1.0 / x),
                        P::Exp => unary_backward(gx, g, y, |y| y),
                        P::Abs => unary_backward(gx, g, x, |x| {
                            if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }),
                        P::Square => unary_backward(gx, g, x, |x| 2.0 * x),
                        _ => unary_backward(gx, g, x, |_| c),
                    });
                }
            }
            P::Softmax => {
                if wants(0) {
                    let axis = node.attrs.axis.expect("validated in forward");
                    let (outer, len, inner) = kernels::split_axis(node.value.shape(), axis);
                    let y = node.value.data();
                    acc(0, &mut |gx| kernels::softmax_backward(y, g, gx, outer, len, inner));
                }
            }
            P::Permute => {
                if wants(0) {
                    let perm = node.attrs.perm.as_ref().expect("validated in forward");
                    let map = kernels::permute_index_map(val(0).shape(), perm);
                    acc(0, &mut |gx| {
                        for (gv, &src) in g.iter().zip(&map) {
                            gx[src] += gv;
                        }
                    });
                }
            }
            P::Reshape => {
                if wants(0) {
                    acc(0, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                }
            }
            P::Concat => {
                let axis = node.attrs.axis.expect("validated in forward");
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), axis);
                let mut offset = 0;
                for i in 0..inputs.len() {
                    let len = val(i).shape()[axis];
                    if wants(i) {
                        acc(i, &mut |gx| {
                            let chunk = len * inner;
                            for o in 0..outer {
                                let src = &g[o * total * inner + offset * inner..][..chunk];
                                gx[o * chunk..(o + 1) * chunk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += b);
                            }
                        });
                    }
                    offset += len;
                }
            }
            P::Slice => {
                if wants(0) {
                    let axis = node.attrs.axis.expect("validated");
                    let start = node.attrs.start.expect("validated");
                    let end = node.attrs.end.expect("validated");
                    let (outer, len, inner) = kernels::split_axis(val(0).shape(), axis);
                    let chunk = (end - start) * inner;
                    acc(0, &mut |gx| {
                        for o in 0..outer {
                            let dst = &mut gx[o * len * inner + start * inner..][..chunk];
                            dst.iter_mut()
                                .zip(&g[o * chunk..(o + 1) * chunk])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            P::Sum | P::Mean => {
                if wants(0) {
                    let x = val(0);
                    let axes = normalized_axes(node.kind, &node.attrs, x.ndim())?;
                    let (_, map) = reduce_map(x.shape(), &axes);
                    let scale = if node.kind == P::Mean {
                        node.value.len() as f64 / x.len() as f64
                    } else {
                        1.0
                    };
                    acc(0, &mut |gx| {
                        for (gv, &dst) in gx.iter_mut().zip(&map) {
                            *gv += g[dst] * scale;
                        }
                    });
                }
            }
            P::Conv1dTime => {
                let (x, w) = (val(0), val(1));
                let geom = conv_geom(x.shape(), w.shape(), &node.attrs)?;
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                geom.backward(x.data(), w.data(), g, &mut gx, &mut gw);
                if wants(0) {
                    acc(0, &mut |buf| buf.iter_mut().zip(&gx).for_each(|(a, b)| *a += b));
                }
                if wants(1) {
                    acc(1, &mut |buf| buf.iter_mut().zip(&gw).for_each(|(a, b)| *a += b));
                }
            }
            P::StraightThrough => {
                let index = node.attrs.index.expect("validated");
                if wants(0) {
                    let dots: Vec<f64> = (1..inputs.len())
                        .map(|i| val(i).data().iter().zip(g).map(|(o, gv)| o * gv).sum())
                        .collect();
                    acc(0, &mut |gp| gp.iter_mut().zip(&dots).for_each(|(a, b)| *a += b));
                }
                if wants(1 + index) {
                    acc(1 + index, &mut |go| go.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                }
            }
        }
        Ok(())
    }
}

/// gx[i] += g[i] · d(src[i]); `src` is the input or the output, whichever
/// the derivative is written in.
fn unary_backward(gx: &mut [f64], g: &[f64], src: &[f64], d: impl Fn(f64) -> f64) {
    for ((gx, &gv), &v) in gx.iter_mut().zip(g).zip(src) {
        *gx += gv * d(v);
    }
}

impl Tensor {
    fn clone_value(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data().to_vec()).expect("same shape")
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_geom(x: &[usize], w: &[usize], attrs: &Attrs) -> Result<ConvGeom> {
    let kind = PrimitiveKind::Conv1dTime;
    if x.len() != 4 || w.len() != 3 || x[3] != w[1] || w[0] == 0 {
        return Err(shape_err(kind, x, w));
    }
    let dilation = attrs.dilation.unwrap_or(1);
    if dilation == 0 {
        return Err(attr_err(kind, "dilation"));
    }
    Ok(ConvGeom {
        batch: x[0],
        time: x[1],
        nodes: x[2],
        c_in: x[3],
        c_out: w[2],
        kernel: w[0],
        dilation,
    })
}

/// Shorthand constructors so model code reads like arithmetic.
impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(PrimitiveKind::MatMul, &[a, b], Attrs::default())
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(PrimitiveKind::BatchMatMul, &[a, b], Attrs::default())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Add, &[a, b], Attrs::default())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Sub, &[a, b], Attrs::default())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Mul, &[a, b], Attrs::default())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Sigmoid, &[x], Attrs::default())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Tanh, &[x], Attrs::default())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Relu, &[x], Attrs::default())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Log, &[x], Attrs::default())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Exp, &[x], Attrs::default())
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Abs, &[x], Attrs::default())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Square, &[x], Attrs::default())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(PrimitiveKind::Scale, &[x], Attrs::scalar(c))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(PrimitiveKind::Softmax, &[x], Attrs::axis(axis))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(PrimitiveKind::Permute, &[x], Attrs::perm(perm))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(PrimitiveKind::Reshape, &[x], Attrs::shape(shape))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(PrimitiveKind::Concat, xs, Attrs::axis(axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(PrimitiveKind::Slice, &[x], Attrs::slice(axis, start, end))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(PrimitiveKind::Sum, &[x], Attrs::axes(axes))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Sum, &[x], Attrs::default())
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(PrimitiveKind::Mean, &[x], Attrs::axes(axes))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Mean, &[x], Attrs::default())
    }

    pub fn conv1d_time(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        self.apply(PrimitiveKind::Conv1dTime, &[x, w], Attrs::dilation(dilation))
    }

    /// Forward: copy of `candidates[index]`. Backward: `candidates[index]`
    /// receives the upstream gradient, and `probs` receives it as if the
    /// output were Σ probs[j]·candidates[j].
    pub fn straight_through(&mut self, probs: Var, candidates: &[Var], index: usize) -> Result<Var> {
        let mut inputs = Vec::with_capacity(candidates.len() + 1);
        inputs.push(probs);
        inputs.extend_from_slice(candidates);
        self.apply(PrimitiveKind::StraightThrough, &inputs, Attrs::index(index))
    }
}
