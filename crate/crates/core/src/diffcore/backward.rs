use std::collections::BTreeMap;

use super::kernels;
use super::tape::{channel_broadcast, channel_sum, mattvec, matvec, outer, NodeId, Op, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by node. Nodes the loss does not reach have no entry and
/// are treated as zero.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    entries: BTreeMap<NodeId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    /// Gradient of `id`, or zeros shaped like it when unreached.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Tensor {
        self.entries
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(id)))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.entries.iter()
    }
}

/// Gradients that are themselves nodes on the tape, so they can be
/// differentiated again.
#[derive(Clone, Debug, Default)]
pub struct DiffGradMap {
    entries: BTreeMap<NodeId, NodeId>,
}

impl DiffGradMap {
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.entries.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn step_mask(x: &Tensor, pred: impl Fn(f64) -> bool) -> Tensor {
    x.map(|e| if pred(e) { 1.0 } else { 0.0 })
}

impl Tape {
    fn check_scalar_loss(&self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss node is not on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        Ok(())
    }

    fn first_nan_upto(&self, last: NodeId) -> Option<&'static str> {
        self.nodes[..=last.0]
            .iter()
            .find(|n| n.value.has_nan())
            .map(|n| n.op.tag())
    }

    /// Nodes that depend on at least one of `wrt` (or all grad-requiring
    /// nodes when `wrt` is `None`).
    fn relevance(&self, last: NodeId, wrt: Option<&[NodeId]>) -> Vec<bool> {
        let mut relevant = vec![false; last.0 + 1];
        for (i, node) in self.nodes[..=last.0].iter().enumerate() {
            relevant[i] = node.requires_grad
                && match wrt {
                    None => true,
                    Some(ids) => {
                        ids.iter().any(|id| id.0 == i)
                            || node.op.parents().iter().any(|p| relevant[p.0])
                    }
                };
        }
        relevant
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// reachable node that requires a gradient.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        self.backward_impl(loss, None)
    }

    /// Like [`Tape::backward`] but only propagates along paths that start at
    /// one of `wrt`, which keeps inner planning steps from walking back into
    /// the encoder.
    pub fn backward_wrt(&self, loss: NodeId, wrt: &[NodeId]) -> Result<GradMap> {
        self.backward_impl(loss, Some(wrt))
    }

    fn backward_impl(&self, loss: NodeId, wrt: Option<&[NodeId]>) -> Result<GradMap> {
        self.check_scalar_loss(loss)?;
        if let Some(op) = self.first_nan_upto(loss) {
            return Err(Error::NumericFault {
                op,
                context: "forward value".into(),
            });
        }
        let relevant = self.relevance(loss, wrt);
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if relevant[loss.0] {
            grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        }
        for i in (0..=loss.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let contributions = self.vjp(NodeId(i), &upstream, &relevant)?;
            for (parent, g) in contributions {
                if g.has_nan() {
                    return Err(Error::NumericFault {
                        op: node.op.tag(),
                        context: "gradient".into(),
                    });
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[i] = Some(upstream);
        }
        let entries = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (NodeId(i), g)))
            .collect();
        Ok(GradMap { entries })
    }

    /// Numeric vector-Jacobian products of node `id` for its relevant parents.
    fn vjp(&self, id: NodeId, u: &Tensor, relevant: &[bool]) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[id.0];
        let val = |n: NodeId| &self.nodes[n.0].value;
        let wants = |n: NodeId| relevant[n.0];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    out.push((*a, u.clone()));
                }
                if wants(*b) {
                    out.push((*b, u.clone()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    out.push((*a, u.clone()));
                }
                if wants(*b) {
                    out.push((*b, u.map(|e| -e)));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, u.zip(val(*b), |x, y| x * y)));
                }
                if wants(*b) {
                    out.push((*b, u.zip(val(*a), |x, y| x * y)));
                }
            }
            Op::Affine { x, scale, .. } => {
                if wants(*x) {
                    out.push((*x, u.map(|e| e * scale)));
                }
            }
            Op::MatVec { w, x } => {
                if wants(*w) {
                    out.push((*w, outer(u.data(), val(*x).data())));
                }
                if wants(*x) {
                    out.push((*x, Tensor::vector(mattvec(val(*w), u.data()))));
                }
            }
            Op::MatTVec { w, y } => {
                if wants(*w) {
                    out.push((*w, outer(val(*y).data(), u.data())));
                }
                if wants(*y) {
                    out.push((*y, Tensor::vector(matvec(val(*w), u.data()))));
                }
            }
            Op::Outer { u: p, v: q } => {
                if wants(*p) {
                    out.push((*p, Tensor::vector(matvec(u, val(*q).data()))));
                }
                if wants(*q) {
                    out.push((*q, Tensor::vector(mattvec(u, val(*p).data()))));
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    out.push((*x, u.zip(val(*x), |g, e| if e > 0.0 { g } else { 0.0 })));
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    out.push((*x, u.zip(&node.value, |g, y| g * y * (1.0 - y))));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if wants(*x) {
                    out.push((
                        *x,
                        u.zip(val(*x), |g, e| if e >= *lo && e <= *hi { g } else { 0.0 }),
                    ));
                }
            }
            Op::Huber { r, delta } => {
                if wants(*r) {
                    out.push((*r, u.zip(val(*r), |g, e| g * e.clamp(-delta, *delta))));
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    out.push((*x, Tensor::filled(val(*x).shape(), u.item())));
                }
            }
            Op::Broadcast { x, .. } => {
                if wants(*x) {
                    let s: f64 = u.data().iter().sum();
                    out.push((*x, Tensor::filled(val(*x).shape(), s)));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).numel();
                    if wants(*p) {
                        let g = Tensor::new(
                            val(*p).shape().to_vec(),
                            u.data()[offset..offset + n].to_vec(),
                        )?;
                        out.push((*p, g));
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start, len } => {
                if wants(*x) {
                    let mut g = Tensor::zeros(val(*x).shape());
                    g.data_mut()[*start..start + len].copy_from_slice(u.data());
                    out.push((*x, g));
                }
            }
            Op::Pad { x, offset, .. } => {
                if wants(*x) {
                    let n = val(*x).numel();
                    out.push((
                        *x,
                        Tensor::new(
                            val(*x).shape().to_vec(),
                            u.data()[*offset..offset + n].to_vec(),
                        )?,
                    ));
                }
            }
            Op::Reshape { x, .. } => {
                if wants(*x) {
                    out.push((*x, u.clone().reshaped(val(*x).shape())?));
                }
            }
            Op::Conv2d { x, w, geometry: g } => {
                if wants(*x) {
                    let d = kernels::conv2d_input_grad(g, u.data(), val(*w).data());
                    out.push((*x, Tensor::new(val(*x).shape().to_vec(), d)?));
                }
                if wants(*w) {
                    let d = kernels::conv2d_weight_grad(g, val(*x).data(), u.data());
                    out.push((*w, Tensor::new(val(*w).shape().to_vec(), d)?));
                }
            }
            Op::ConvInputGrad { dy, w, geometry: g } => {
                if wants(*dy) {
                    let d = kernels::conv2d(g, u.data(), val(*w).data());
                    out.push((*dy, Tensor::new(val(*dy).shape().to_vec(), d)?));
                }
                if wants(*w) {
                    let d = kernels::conv2d_weight_grad(g, u.data(), val(*dy).data());
                    out.push((*w, Tensor::new(val(*w).shape().to_vec(), d)?));
                }
            }
            Op::ConvWeightGrad { x, dy, geometry: g } => {
                if wants(*x) {
                    let d = kernels::conv2d_input_grad(g, val(*dy).data(), u.data());
                    out.push((*x, Tensor::new(val(*x).shape().to_vec(), d)?));
                }
                if wants(*dy) {
                    let d = kernels::conv2d(g, val(*x).data(), u.data());
                    out.push((*dy, Tensor::new(val(*dy).shape().to_vec(), d)?));
                }
            }
            Op::ChannelBroadcast { b, .. } => {
                if wants(*b) {
                    out.push((*b, channel_sum(u)));
                }
            }
            Op::ChannelSum(x) => {
                if wants(*x) {
                    let s = val(*x).shape();
                    out.push((*x, channel_broadcast(u.data(), s[1], s[2])));
                }
            }
        }
        Ok(out)
    }

    /// Reverse-mode gradients recorded as new nodes on the tape, so an
    /// expression of them can itself be differentiated. Only paths leaving
    /// `wrt` are expanded; the returned map has an entry for each `wrt` node
    /// the loss depends on.
    pub fn backward_differentiable(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<DiffGradMap> {
        self.check_scalar_loss(loss)?;
        if let Some(op) = self.first_nan_upto(loss) {
            return Err(Error::NumericFault {
                op,
                context: "forward value".into(),
            });
        }
        let relevant = self.relevance(loss, Some(wrt));
        let mut grads: Vec<Option<NodeId>> = vec![None; loss.0 + 1];
        if relevant[loss.0] {
            let seed = Tensor::ones(self.shape(loss));
            grads[loss.0] = Some(self.constant(seed));
        }
        for i in (0..=loss.0).rev() {
            let Some(upstream) = grads[i] else {
                continue;
            };
            let tag = self.nodes[i].op.tag();
            for (parent, g) in self.vjp_graph(NodeId(i), upstream, &relevant)? {
                if self.value(g).has_nan() {
                    return Err(Error::NumericFault {
                        op: tag,
                        context: "differentiable gradient".into(),
                    });
                }
                grads[parent.0] = Some(match grads[parent.0] {
                    Some(acc) => self.add(acc, g)?,
                    None => g,
                });
            }
        }
        let entries = wrt
            .iter()
            .filter(|id| id.0 <= loss.0)
            .filter_map(|id| grads[id.0].map(|g| (*id, g)))
            .collect();
        Ok(DiffGradMap { entries })
    }

    /// Vector-Jacobian products expressed as tape operations.
    fn vjp_graph(
        &mut self,
        id: NodeId,
        u: NodeId,
        relevant: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[id.0].op.clone();
        let wants = |n: NodeId| relevant[n.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((a, u));
                }
                if wants(b) {
                    out.push((b, u));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((a, u));
                }
                if wants(b) {
                    out.push((b, self.neg(u)?));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    out.push((a, self.mul(u, b)?));
                }
                if wants(b) {
                    out.push((b, self.mul(u, a)?));
                }
            }
            Op::Affine { x, scale, .. } => {
                if wants(x) {
                    out.push((x, self.scale(u, scale)?));
                }
            }
            Op::MatVec { w, x } => {
                if wants(w) {
                    out.push((w, self.outer(u, x)?));
                }
                if wants(x) {
                    out.push((x, self.mattvec(w, u)?));
                }
            }
            Op::MatTVec { w, y } => {
                if wants(w) {
                    out.push((w, self.outer(y, u)?));
                }
                if wants(y) {
                    out.push((y, self.matvec(w, u)?));
                }
            }
            Op::Outer { u: p, v: q } => {
                if wants(p) {
                    out.push((p, self.matvec(u, q)?));
                }
                if wants(q) {
                    out.push((q, self.mattvec(u, p)?));
                }
            }
            Op::Relu(x) => {
                if wants(x) {
                    let mask = self.constant(step_mask(self.value(x), |e| e > 0.0));
                    out.push((x, self.mul(u, mask)?));
                }
            }
            Op::Sigmoid(x) => {
                if wants(x) {
                    let one_minus = self.affine(id, -1.0, 1.0)?;
                    let slope = self.mul(id, one_minus)?;
                    out.push((x, self.mul(u, slope)?));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if wants(x) {
                    let mask = self.constant(step_mask(self.value(x), |e| e >= lo && e <= hi));
                    out.push((x, self.mul(u, mask)?));
                }
            }
            Op::Huber { r, delta } => {
                if wants(r) {
                    let clipped = self.clamp(r, -delta, delta)?;
                    out.push((r, self.mul(u, clipped)?));
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    let shape = self.shape(x).to_vec();
                    out.push((x, self.broadcast(u, &shape)?));
                }
            }
            Op::Broadcast { x, .. } => {
                if wants(x) {
                    let shape = self.shape(x).to_vec();
                    let s = self.sum(u)?;
                    out.push((x, self.reshape(s, &shape)?));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.shape(p).to_vec();
                    let n = shape.iter().product::<usize>();
                    if wants(p) {
                        let s = self.slice(u, offset, n)?;
                        out.push((p, self.reshape(s, &shape)?));
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start, .. } => {
                if wants(x) {
                    let shape = self.shape(x).to_vec();
                    let total = shape.iter().product();
                    let p = self.pad(u, start, total)?;
                    out.push((x, self.reshape(p, &shape)?));
                }
            }
            Op::Pad { x, offset, .. } => {
                if wants(x) {
                    let shape = self.shape(x).to_vec();
                    let n = shape.iter().product();
                    let s = self.slice(u, offset, n)?;
                    out.push((x, self.reshape(s, &shape)?));
                }
            }
            Op::Reshape { x, .. } => {
                if wants(x) {
                    let shape = self.shape(x).to_vec();
                    out.push((x, self.reshape(u, &shape)?));
                }
            }
            Op::Conv2d { x, w, geometry } => {
                if wants(x) {
                    out.push((x, self.conv_input_grad(u, w, geometry)?));
                }
                if wants(w) {
                    out.push((w, self.conv_weight_grad(x, u, geometry)?));
                }
            }
            Op::ConvInputGrad { dy, w, geometry } => {
                if wants(dy) {
                    out.push((dy, self.conv2d_with(u, w, geometry)?));
                }
                if wants(w) {
                    out.push((w, self.conv_weight_grad(u, dy, geometry)?));
                }
            }
            Op::ConvWeightGrad { x, dy, geometry } => {
                if wants(x) {
                    out.push((x, self.conv_input_grad(dy, u, geometry)?));
                }
                if wants(dy) {
                    out.push((dy, self.conv2d_with(x, u, geometry)?));
                }
            }
            Op::ChannelBroadcast { b, .. } => {
                if wants(b) {
                    out.push((b, self.channel_sum(u)?));
                }
            }
            Op::ChannelSum(x) => {
                if wants(x) {
                    let s = self.shape(x).to_vec();
                    out.push((x, self.channel_broadcast(u, s[1], s[2])?));
                }
            }
        }
        Ok(out)
    }
}
