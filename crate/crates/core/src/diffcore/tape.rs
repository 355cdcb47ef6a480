use super::kernels::{self, ConvGeometry};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node. Parents always precede the node on the
/// tape, so the recorded graph is acyclic by construction.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale · x + shift`
    Affine {
        x: NodeId,
        scale: f64,
        shift: f64,
    },
    /// `W x` for `W: [m, n]`, `x: [n]`.
    MatVec {
        w: NodeId,
        x: NodeId,
    },
    /// `Wᵀ y` for `W: [m, n]`, `y: [m]`.
    MatTVec {
        w: NodeId,
        y: NodeId,
    },
    /// `u vᵀ`
    Outer {
        u: NodeId,
        v: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Hard clamp; derivative 1 inside `[lo, hi]` (inclusive), 0 outside.
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    /// Elementwise Huber penalty of a residual.
    Huber {
        r: NodeId,
        delta: f64,
    },
    Sum(NodeId),
    /// Broadcast a single-element tensor to `shape`.
    Broadcast {
        x: NodeId,
        shape: Vec<usize>,
    },
    /// Flattened concatenation into a vector.
    Concat(Vec<NodeId>),
    /// Flat slice `x[start .. start + len]` as a vector.
    Slice {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Embed a tensor flat at `offset` in a zero vector of length `total`.
    Pad {
        x: NodeId,
        offset: usize,
        total: usize,
    },
    Reshape {
        x: NodeId,
        shape: Vec<usize>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        geometry: ConvGeometry,
    },
    ConvInputGrad {
        dy: NodeId,
        w: NodeId,
        geometry: ConvGeometry,
    },
    ConvWeightGrad {
        x: NodeId,
        dy: NodeId,
        geometry: ConvGeometry,
    },
    /// Broadcast `b: [O]` to `[O, height, width]`.
    ChannelBroadcast {
        b: NodeId,
        height: usize,
        width: usize,
    },
    /// Sum `[O, h, w]` over the spatial axes to `[O]`.
    ChannelSum(NodeId),
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::MatVec { .. } => "matvec",
            Op::MatTVec { .. } => "mattvec",
            Op::Outer { .. } => "outer",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Huber { .. } => "huber",
            Op::Sum(_) => "sum",
            Op::Broadcast { .. } => "broadcast",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::ChannelBroadcast { .. } => "channel_broadcast",
            Op::ChannelSum(_) => "channel_sum",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Clamp { x, .. }
            | Op::Sum(x)
            | Op::Broadcast { x, .. }
            | Op::Slice { x, .. }
            | Op::Pad { x, .. }
            | Op::Reshape { x, .. }
            | Op::ChannelSum(x) => vec![*x],
            Op::Huber { r, .. } => vec![*r],
            Op::MatVec { w, x } => vec![*w, *x],
            Op::MatTVec { w, y } => vec![*w, *y],
            Op::Outer { u, v } => vec![*u, *v],
            Op::Concat(parts) => parts.clone(),
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::ConvInputGrad { dy, w, .. } => vec![*dy, *w],
            Op::ConvWeightGrad { x, dy, .. } => vec![*x, *dy],
            Op::ChannelBroadcast { b, .. } => vec![*b],
        }
    }
}

/// A value in the differentiable graph.
#[derive(Clone, Debug)]
pub struct DiffNode {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

impl DiffNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn op(&self) -> &Op {
        &self.op
    }
}

/// Define-by-run record of every executed operation.
///
/// Nodes are appended in execution order, which is also a topological order.
/// Backward passes walk it in reverse; [`Tape::replay`] re-executes it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<DiffNode>,
}

const SIGMOID_LO: f64 = f64::MIN_POSITIVE;
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, clamped so the result stays strictly inside (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_LO, SIGMOID_HI)
}

pub(crate) fn huber_value(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

fn mismatch(op: &str, detail: String) -> Error {
    Error::contract(format!("{op}: {detail}"))
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            op,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    (0..m).map(|i| dot(&wd[i * n..(i + 1) * n], x)).collect()
}

/// Dot product with four interleaved partial sums, which lets the compiler
/// vectorize while keeping a fixed summation order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn mattvec(w: &Tensor, y: &[f64]) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut out = vec![0.0; n];
    for i in 0..m {
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
            *o += a * yi;
        }
    }
    out
}

pub(crate) fn outer(u: &[f64], v: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(u.len() * v.len());
    for &a in u {
        data.extend(v.iter().map(|&b| a * b));
    }
    Tensor::new(vec![u.len(), v.len()], data).expect("outer shape")
}

pub(crate) fn channel_sum(x: &Tensor) -> Tensor {
    let (o, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let data = (0..o)
        .map(|c| x.data()[c * hw..(c + 1) * hw].iter().sum())
        .collect();
    Tensor::vector(data)
}

pub(crate) fn channel_broadcast(b: &[f64], height: usize, width: usize) -> Tensor {
    let hw = height * width;
    let mut data = Vec::with_capacity(b.len() * hw);
    for &v in b {
        data.extend(std::iter::repeat(v).take(hw));
    }
    Tensor::new(vec![b.len(), height, width], data).expect("channel broadcast shape")
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

fn is_vector(t: &Tensor) -> bool {
    t.shape().len() == 1
}

/// Evaluate `op` against the values already on `nodes`.
pub(crate) fn eval_op(op: &Op, nodes: &[DiffNode]) -> Result<Tensor> {
    let v = |id: &NodeId| &nodes[id.0].value;
    let tag = op.tag();
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => {
            same_shape(tag, v(a), v(b))?;
            v(a).zip(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(tag, v(a), v(b))?;
            v(a).zip(v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(tag, v(a), v(b))?;
            v(a).zip(v(b), |x, y| x * y)
        }
        Op::Affine { x, scale, shift } => v(x).map(|e| scale * e + shift),
        Op::MatVec { w, x } => {
            let (wt, xt) = (v(w), v(x));
            if !is_matrix(wt) || !is_vector(xt) || wt.shape()[1] != xt.numel() {
                return Err(mismatch(
                    tag,
                    format!(
                        "weight {:?} cannot multiply input {:?}",
                        wt.shape(),
                        xt.shape()
                    ),
                ));
            }
            Tensor::vector(matvec(wt, xt.data()))
        }
        Op::MatTVec { w, y } => {
            let (wt, yt) = (v(w), v(y));
            if !is_matrix(wt) || !is_vector(yt) || wt.shape()[0] != yt.numel() {
                return Err(mismatch(
                    tag,
                    format!(
                        "weight {:?} transposed cannot multiply {:?}",
                        wt.shape(),
                        yt.shape()
                    ),
                ));
            }
            Tensor::vector(mattvec(wt, yt.data()))
        }
        Op::Outer { u, v: vv } => {
            let (ut, vt) = (v(u), v(vv));
            if !is_vector(ut) || !is_vector(vt) {
                return Err(mismatch(tag, "operands must be vectors".into()));
            }
            outer(ut.data(), vt.data())
        }
        Op::Relu(x) => v(x).map(|e| if e > 0.0 { e } else { 0.0 }),
        Op::Sigmoid(x) => v(x).map(sigmoid),
        Op::Clamp { x, lo, hi } => v(x).map(|e| e.clamp(*lo, *hi)),
        Op::Huber { r, delta } => {
            if !(*delta > 0.0) {
                return Err(mismatch(
                    tag,
                    format!("delta must be positive, got {delta}"),
                ));
            }
            v(r).map(|e| huber_value(e, *delta))
        }
        Op::Sum(x) => Tensor::scalar(v(x).data().iter().sum()),
        Op::Broadcast { x, shape } => {
            let xt = v(x);
            if xt.numel() != 1 {
                return Err(mismatch(
                    tag,
                    format!("source {:?} is not a single element", xt.shape()),
                ));
            }
            Tensor::filled(shape, xt.item())
        }
        Op::Concat(parts) => {
            if parts.is_empty() {
                return Err(mismatch(tag, "nothing to concatenate".into()));
            }
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(v(p).data());
            }
            Tensor::vector(data)
        }
        Op::Slice { x, start, len } => {
            let xt = v(x);
            if start + len > xt.numel() {
                return Err(mismatch(
                    tag,
                    format!(
                        "range {}..{} out of {} elements",
                        start,
                        start + len,
                        xt.numel()
                    ),
                ));
            }
            Tensor::vector(xt.data()[*start..start + len].to_vec())
        }
        Op::Pad { x, offset, total } => {
            let xt = v(x);
            if offset + xt.numel() > *total {
                return Err(mismatch(tag, "padded region exceeds total length".into()));
            }
            let mut data = vec![0.0; *total];
            data[*offset..offset + xt.numel()].copy_from_slice(xt.data());
            Tensor::vector(data)
        }
        Op::Reshape { x, shape } => v(x).clone().reshaped(shape)?,
        Op::Conv2d { x, w, geometry: g } => {
            check_conv_operand(tag, v(x), &[g.in_channels, g.height, g.width])?;
            check_conv_operand(
                tag,
                v(w),
                &[g.out_channels, g.in_channels, g.kernel, g.kernel],
            )?;
            Tensor::new(
                vec![g.out_channels, g.out_height(), g.out_width()],
                kernels::conv2d(g, v(x).data(), v(w).data()),
            )?
        }
        Op::ConvInputGrad { dy, w, geometry: g } => {
            check_conv_operand(tag, v(dy), &[g.out_channels, g.out_height(), g.out_width()])?;
            check_conv_operand(
                tag,
                v(w),
                &[g.out_channels, g.in_channels, g.kernel, g.kernel],
            )?;
            Tensor::new(
                vec![g.in_channels, g.height, g.width],
                kernels::conv2d_input_grad(g, v(dy).data(), v(w).data()),
            )?
        }
        Op::ConvWeightGrad { x, dy, geometry: g } => {
            check_conv_operand(tag, v(x), &[g.in_channels, g.height, g.width])?;
            check_conv_operand(tag, v(dy), &[g.out_channels, g.out_height(), g.out_width()])?;
            Tensor::new(
                vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
                kernels::conv2d_weight_grad(g, v(x).data(), v(dy).data()),
            )?
        }
        Op::ChannelBroadcast { b, height, width } => {
            let bt = v(b);
            if !is_vector(bt) {
                return Err(mismatch(
                    tag,
                    format!("bias must be a vector, got {:?}", bt.shape()),
                ));
            }
            channel_broadcast(bt.data(), *height, *width)
        }
        Op::ChannelSum(x) => {
            let xt = v(x);
            if xt.shape().len() != 3 {
                return Err(mismatch(
                    tag,
                    format!("expected [C, H, W], got {:?}", xt.shape()),
                ));
            }
            channel_sum(xt)
        }
    })
}

fn check_conv_operand(tag: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(mismatch(
            tag,
            format!("expected operand {:?}, got {:?}", expected, t.shape()),
        ));
    }
    Ok(())
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

    pub fn node(&self, id: NodeId) -> &DiffNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &DiffNode)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::contract(format!(
                "node {} is not on this tape",
                id.0
            )));
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, op: Op) -> Result<NodeId> {
        let parents = op.parents();
        for p in &parents {
            self.check_id(*p)?;
        }
        let value = eval_op(&op, &self.nodes)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(DiffNode {
            value,
            requires_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Record an input value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(DiffNode {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Same value, no parents, never receives a gradient.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.nodes[id.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::MatVec { w, x })
    }

    pub fn mattvec(&mut self, w: NodeId, y: NodeId) -> Result<NodeId> {
        self.push(Op::MatTVec { w, y })
    }

    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        self.push(Op::Outer { u, v })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::contract(format!("clamp: empty range [{lo}, {hi}]")));
        }
        self.push(Op::Clamp { x, lo, hi })
    }

    pub fn huber_elem(&mut self, r: NodeId, delta: f64) -> Result<NodeId> {
        self.push(Op::Huber { r, delta })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Broadcast {
            x,
            shape: shape.to_vec(),
        })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice { x, start, len })
    }

    pub fn pad(&mut self, x: NodeId, offset: usize, total: usize) -> Result<NodeId> {
        self.push(Op::Pad { x, offset, total })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    /// Unpadded convolution of `x: [C, H, W]` with `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(w)?;
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(mismatch(
                "conv2d",
                format!("input {:?} incompatible with kernel {:?}", xs, ws),
            ));
        }
        if stride == 0 || xs[1] < ws[2] || xs[2] < ws[3] {
            return Err(mismatch(
                "conv2d",
                "kernel larger than input or zero stride".into(),
            ));
        }
        let geometry = ConvGeometry {
            in_channels: xs[0],
            height: xs[1],
            width: xs[2],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
        };
        self.push(Op::Conv2d { x, w, geometry })
    }

    pub(crate) fn conv_input_grad(
        &mut self,
        dy: NodeId,
        w: NodeId,
        geometry: ConvGeometry,
    ) -> Result<NodeId> {
        self.push(Op::ConvInputGrad { dy, w, geometry })
    }

    pub(crate) fn conv_weight_grad(
        &mut self,
        x: NodeId,
        dy: NodeId,
        geometry: ConvGeometry,
    ) -> Result<NodeId> {
        self.push(Op::ConvWeightGrad { x, dy, geometry })
    }

    pub(crate) fn conv2d_with(
        &mut self,
        x: NodeId,
        w: NodeId,
        geometry: ConvGeometry,
    ) -> Result<NodeId> {
        self.push(Op::Conv2d { x, w, geometry })
    }

    pub fn channel_broadcast(&mut self, b: NodeId, height: usize, width: usize) -> Result<NodeId> {
        self.push(Op::ChannelBroadcast { b, height, width })
    }

    pub fn channel_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelSum(x))
    }

    /// Re-execute the recorded operations, optionally substituting leaf
    /// values, and return the resulting tape.
    pub fn replay(&self, overrides: &[(NodeId, Tensor)]) -> Result<Tape> {
        for (id, t) in overrides {
            self.check_id(*id)?;
            let node = &self.nodes[id.0];
            if node.op != Op::Leaf {
                return Err(Error::contract("replay: only leaves can be substituted"));
            }
            if t.shape() != node.value.shape() {
                return Err(Error::contract("replay: substituted leaf changes shape"));
            }
        }
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Leaf => overrides
                    .iter()
                    .find(|(id, _)| id.0 == i)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| node.value.clone()),
                ref op => eval_op(op, &out.nodes)?,
            };
            out.nodes.push(DiffNode {
                value,
                requires_grad: node.requires_grad,
                op: node.op.clone(),
            });
        }
        Ok(out)
    }
}

/// Number of elements for a shape; re-exported for layer code.
pub fn shape_numel(shape: &[usize]) -> usize {
    numel(shape)
}
