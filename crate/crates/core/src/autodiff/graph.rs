//! Tape of differentiable operations and the reverse sweep over it.

use super::conv::{self, Spatial};
use super::{AutodiffError, Real, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied operator. Mostly useful for testing the gradient checker.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradient for each input given the upstream gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv3 {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Pointwise {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample(NodeId),
    Concat(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<u8>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    ForegroundProb(NodeId),
    SoftDice {
        p: NodeId,
        target: Vec<T>,
        eps: T,
    },
    Sum(NodeId),
    Scale(NodeId, T),
    Add(NodeId, NodeId),
    Pick {
        x: NodeId,
        index: usize,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3 { .. } => "conv3d",
            Op::Pointwise { .. } => "pointwise_conv3d",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "maxpool3d",
            Op::Upsample(_) => "upsample_nearest3d",
            Op::Concat(..) => "concat_channels",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::ForegroundProb(_) => "foreground_prob",
            Op::SoftDice { .. } => "soft_dice_loss",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Add(..) => "add",
            Op::Pick { .. } => "pick",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3 { x, w, b } | Op::Pointwise { x, w, b } | Op::Linear { x, w, b } => {
                vec![*x, *w, *b]
            }
            Op::Relu(x)
            | Op::Upsample(x)
            | Op::GlobalAvgPool(x)
            | Op::ForegroundProb(x)
            | Op::Sum(x)
            | Op::Scale(x, _) => vec![*x],
            Op::MaxPool { x, .. } | Op::Pick { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::SoftDice { p, .. } => vec![*p],
            Op::Concat(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// d(root)/d(node), or `None` when the node does not influence the root
    /// or was created without `requires_grad`.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor<T>) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// An append-only tape. Node order is a topological order by construction.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn split5(op: &'static str, s: &[usize]) -> Result<(usize, usize, Spatial)> {
    match *s {
        [n, c, d, h, w] => Ok((n, c, [d, h, w])),
        _ => Err(shape_err(op, format!("expected [N,C,D,H,W], got {s:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// All node handles in tape order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                pass: "forward",
            });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: "leaf",
                pass: "forward",
            });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// 3×3×3 cross-correlation, pad 1, stride 1.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, c, sp) = split5("conv3d", self.value(x).shape())?;
        let ws = self.value(w).shape();
        let k = ws[0];
        if ws != [k, c, 3, 3, 3] || self.value(b).shape() != [k] {
            return Err(shape_err(
                "conv3d",
                format!(
                    "input channels {c}, weight {:?}, bias {:?}",
                    ws,
                    self.value(b).shape()
                ),
            ));
        }
        let out = conv::conv3x3_forward(
            self.value(x).data(),
            n,
            c,
            sp,
            self.value(w).data(),
            k,
            Some(self.value(b).data()),
        );
        let value = Tensor::new(vec![n, k, sp[0], sp[1], sp[2]], out)?;
        self.push(Op::Conv3 { x, w, b }, value)
    }

    /// 1×1×1 convolution: a per-voxel linear map over channels.
    pub fn pointwise_conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, c, sp) = split5("pointwise_conv3d", self.value(x).shape())?;
        let ws = self.value(w).shape().to_vec();
        let k = ws[0];
        if ws != [k, c] || self.value(b).shape() != [k] {
            return Err(shape_err(
                "pointwise_conv3d",
                format!("input channels {c}, weight {ws:?}"),
            ));
        }
        let vol = sp.iter().product::<usize>();
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![T::zero(); n * k * vol];
        for ni in 0..n {
            for ko in 0..k {
                let o = &mut out[(ni * k + ko) * vol..(ni * k + ko + 1) * vol];
                o.fill(bv[ko]);
                for ci in 0..c {
                    let wt = wv[ko * c + ci];
                    let src = &xv[(ni * c + ci) * vol..(ni * c + ci + 1) * vol];
                    for (a, &s) in o.iter_mut().zip(src) {
                        *a = *a + wt * s;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, k, sp[0], sp[1], sp[2]], out)?;
        self.push(Op::Pointwise { x, w, b }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push(Op::Relu(x), value)
    }

    /// 2×2×2 max pooling, stride 2. Ties resolve to the lowest linear index.
    pub fn maxpool3d(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, [d, h, w]) = split5("maxpool3d", self.value(x).shape())?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::OddDims([d, h, w]));
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best_i = base + ((2 * z) * h + 2 * y) * w + 2 * xo;
                        let mut best = xv[best_i];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i =
                                        base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                    if xv[i] > best {
                                        best = xv[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, od, oh, ow], out)?;
        self.push(Op::MaxPool { x, argmax }, value)
    }

    /// Nearest-neighbour upsampling by 2 along each spatial axis.
    pub fn upsample_nearest3d(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, [d, h, w]) = split5("upsample_nearest3d", self.value(x).shape())?;
        let xv = self.value(x).data();
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * od * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * d * h * w..(nc + 1) * d * h * w];
            let dst = &mut out[nc * od * oh * ow..(nc + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let srow = &src[((z / 2) * h + y / 2) * w..][..w];
                    let drow = &mut dst[(z * oh + y) * ow..][..ow];
                    for (xo, v) in drow.iter_mut().enumerate() {
                        *v = srow[xo / 2];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, od, oh, ow], out)?;
        self.push(Op::Upsample(x), value)
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for ni in 0..sa[0] {
            out.extend_from_slice(&av[ni * ca..(ni + 1) * ca]);
            out.extend_from_slice(&bv[ni * cb..(ni + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let value = Tensor::new(shape, out)?;
        self.push(Op::Concat(a, b), value)
    }

    /// Mean over the spatial axes: `[N, C, D, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, sp) = split5("global_avg_pool", self.value(x).shape())?;
        let vol = sp.iter().product::<usize>();
        let inv = T::of(1.0 / vol as f64);
        let out = self
            .value(x)
            .data()
            .chunks_exact(vol)
            .map(|ch| ch.iter().fold(T::zero(), |s, &v| s + v) * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push(Op::GlobalAvgPool(x), value)
    }

    /// `x[N,F] · weight[G,F]ᵀ + bias[G]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.value(b).shape() != [ws[0]] {
            return Err(shape_err(
                "linear",
                format!("x {xs:?}, weight {ws:?}, bias {:?}", self.value(b).shape()),
            ));
        }
        let (n, f, g) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = Vec::with_capacity(n * g);
        for ni in 0..n {
            let row = &xv[ni * f..(ni + 1) * f];
            for gi in 0..g {
                let wr = &wv[gi * f..(gi + 1) * f];
                out.push(row.iter().zip(wr).fold(bv[gi], |s, (&a, &b)| s + a * b));
            }
        }
        let value = Tensor::new(vec![n, g], out)?;
        self.push(Op::Linear { x, w, b }, value)
    }

    /// Class-weighted cross entropy of a channel softmax, averaged over every
    /// (sample, position). `logits` is `[N, C]` or `[N, C, ...spatial]`;
    /// `labels` holds one class index per (sample, position).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[u8],
        class_weights: &[T],
    ) -> Result<NodeId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() < 2 || class_weights.len() != s[1] {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?}, {} class weights", class_weights.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if labels.len() != n * inner {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for logits {s:?}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(AutodiffError::BadLabel(bad));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for ni in 0..n {
            for p in 0..inner {
                let at = |ch: usize| (ni * c + ch) * inner + p;
                let m = (0..c).map(|ch| lv[at(ch)]).fold(T::neg_infinity(), T::max);
                let z = (0..c).fold(T::zero(), |s, ch| s + (lv[at(ch)] - m).exp());
                for ch in 0..c {
                    probs[at(ch)] = (lv[at(ch)] - m).exp() / z;
                }
                let label = labels[ni * inner + p] as usize;
                let log_p = lv[at(label)] - m - z.ln();
                total = total - class_weights[label] * log_p;
            }
        }
        let loss = total / T::of((n * inner) as f64);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: class_weights.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Foreground (class 1) probability of a two-channel softmax:
    /// `[N, 2, ...] -> [N, 1, ...]`.
    pub fn foreground_prob(&mut self, logits: NodeId) -> Result<NodeId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() < 2 || s[1] != 2 {
            return Err(shape_err("foreground_prob", format!("logits {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let lv = self.value(logits).data();
        let mut out = Vec::with_capacity(s[0] * inner);
        for ni in 0..s[0] {
            let l0 = &lv[(2 * ni) * inner..(2 * ni + 1) * inner];
            let l1 = &lv[(2 * ni + 1) * inner..(2 * ni + 2) * inner];
            out.extend(l0.iter().zip(l1).map(|(&a, &b)| sigmoid(b - a)));
        }
        let mut shape = s;
        shape[1] = 1;
        let value = Tensor::new(shape, out)?;
        self.push(Op::ForegroundProb(logits), value)
    }

    /// `1 - (2 Σ p·g + eps) / (Σ p + Σ g + eps)` over all elements.
    pub fn soft_dice_loss(&mut self, p: NodeId, target: &[T], eps: T) -> Result<NodeId> {
        let pv = self.value(p).data();
        if pv.len() != target.len() {
            return Err(shape_err(
                "soft_dice_loss",
                format!("{} predictions vs {} targets", pv.len(), target.len()),
            ));
        }
        let (inter, sp, sg) = dice_sums(pv, target);
        let loss = T::one() - (T::of(2.0) * inter + eps) / (sp + sg + eps);
        self.push(
            Op::SoftDice {
                p,
                target: target.to_vec(),
                eps,
            },
            Tensor::scalar(loss),
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push(Op::Scale(x, factor), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), value)
    }

    /// Selects one element (by flat index) as a scalar node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(x);
        let value = *v.data().get(index).ok_or_else(|| {
            shape_err("pick", format!("index {index} out of {} elements", v.len()))
        })?;
        self.push(Op::Pick { x, index }, Tensor::scalar(value))
    }

    pub fn custom(&mut self, inputs: &[NodeId], op: Box<dyn CustomOp<T>>) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let value = op.forward(&vals)?;
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
        )
    }

    /// Reverse sweep from a scalar root. Every node reachable from the root
    /// through `requires_grad` nodes receives d(root)/d(node).
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let contributions = self.node_backward(node, g)?;
            for (input, grad) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !grad.is_finite() {
                    return Err(AutodiffError::NonFinite {
                        op: node.op.name(),
                        pass: "backward",
                    });
                }
                match &mut grads[input.0] {
                    Some(existing) => existing.accumulate(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3 { x, w, b } => {
                let xv = self.value(*x);
                let (n, c, sp) = split5("conv3d", xv.shape())?;
                let wv = self.value(*w);
                let k = wv.shape()[0];
                if self.wants(*x) {
                    let gi = conv::conv3x3_backward_input(gd, n, k, sp, wv.data(), c);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), gi)?));
                }
                if self.wants(*w) || self.wants(*b) {
                    let (gw, gb) = conv::conv3x3_backward_params(xv.data(), gd, n, c, k, sp);
                    out.push((*w, Tensor::new(wv.shape().to_vec(), gw)?));
                    out.push((*b, Tensor::new(vec![k], gb)?));
                }
            }
            Op::Pointwise { x, w, b } => {
                let xv = self.value(*x);
                let (n, c, sp) = split5("pointwise_conv3d", xv.shape())?;
                let vol = sp.iter().product::<usize>();
                let wv = self.value(*w).data();
                let k = self.value(*w).shape()[0];
                if self.wants(*x) {
                    let mut gi = vec![T::zero(); xv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let dst = &mut gi[(ni * c + ci) * vol..(ni * c + ci + 1) * vol];
                            for ko in 0..k {
                                let wt = wv[ko * c + ci];
                                let src = &gd[(ni * k + ko) * vol..(ni * k + ko + 1) * vol];
                                for (a, &s) in dst.iter_mut().zip(src) {
                                    *a = *a + wt * s;
                                }
                            }
                        }
                    }
                    out.push((*x, Tensor::new(xv.shape().to_vec(), gi)?));
                }
                let mut gw = vec![T::zero(); k * c];
                let mut gb = vec![T::zero(); k];
                for ni in 0..n {
                    for ko in 0..k {
                        let gs = &gd[(ni * k + ko) * vol..(ni * k + ko + 1) * vol];
                        gb[ko] = gs.iter().fold(gb[ko], |s, &v| s + v);
                        for ci in 0..c {
                            let xs = &xv.data()[(ni * c + ci) * vol..(ni * c + ci + 1) * vol];
                            gw[ko * c + ci] = gs
                                .iter()
                                .zip(xs)
                                .fold(gw[ko * c + ci], |s, (&a, &b)| s + a * b);
                        }
                    }
                }
                out.push((*w, Tensor::new(vec![k, c], gw)?));
                out.push((*b, Tensor::new(vec![k], gb)?));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gi = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), gi)?));
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut gi = vec![T::zero(); xv.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    gi[src] = gi[src] + gv;
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), gi)?));
            }
            Op::Upsample(x) => {
                let xv = self.value(*x);
                let (n, c, [d, h, w]) = split5("upsample_nearest3d", xv.shape())?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut gi = vec![T::zero(); xv.len()];
                for nc in 0..n * c {
                    let src = &gd[nc * 8 * d * h * w..(nc + 1) * 8 * d * h * w];
                    let dst = &mut gi[nc * d * h * w..(nc + 1) * d * h * w];
                    for z in 0..d {
                        for y in 0..h {
                            for xi in 0..w {
                                let mut s = T::zero();
                                for dz in 0..2 {
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            s = s + src[((2 * z + dz) * oh + 2 * y + dy) * ow
                                                + 2 * xi
                                                + dx];
                                        }
                                    }
                                }
                                dst[(z * h + y) * w + xi] = s;
                            }
                        }
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), gi)?));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut ga = Vec::with_capacity(sa[0] * ca);
                let mut gb = Vec::with_capacity(sa[0] * cb);
                for chunk in gd.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                out.push((*a, Tensor::new(sa.to_vec(), ga)?));
                out.push((*b, Tensor::new(sb.to_vec(), gb)?));
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let vol: usize = xv.shape()[2..].iter().product();
                let inv = T::of(1.0 / vol as f64);
                let gi = gd
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, vol))
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), gi)?));
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, f) = (xv.shape()[0], xv.shape()[1]);
                let gdim = wv.shape()[0];
                if self.wants(*x) {
                    let mut gi = vec![T::zero(); n * f];
                    for ni in 0..n {
                        for gi_ in 0..gdim {
                            let gv = gd[ni * gdim + gi_];
                            let wr = &wv.data()[gi_ * f..(gi_ + 1) * f];
                            for (a, &wt) in gi[ni * f..(ni + 1) * f].iter_mut().zip(wr) {
                                *a = *a + gv * wt;
                            }
                        }
                    }
                    out.push((*x, Tensor::new(vec![n, f], gi)?));
                }
                let mut gw = vec![T::zero(); gdim * f];
                let mut gb = vec![T::zero(); gdim];
                for ni in 0..n {
                    let row = &xv.data()[ni * f..(ni + 1) * f];
                    for gi_ in 0..gdim {
                        let gv = gd[ni * gdim + gi_];
                        gb[gi_] = gb[gi_] + gv;
                        for (a, &xa) in gw[gi_ * f..(gi_ + 1) * f].iter_mut().zip(row) {
                            *a = *a + gv * xa;
                        }
                    }
                }
                out.push((*w, Tensor::new(vec![gdim, f], gw)?));
                out.push((*b, Tensor::new(vec![gdim], gb)?));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let s = self.value(*logits).shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let scale = gd[0] / T::of((n * inner) as f64);
                let mut gi = vec![T::zero(); probs.len()];
                for ni in 0..n {
                    for p in 0..inner {
                        let label = labels[ni * inner + p] as usize;
                        let wl = weights[label] * scale;
                        for ch in 0..c {
                            let at = (ni * c + ch) * inner + p;
                            let onehot = if ch == label { T::one() } else { T::zero() };
                            gi[at] = wl * (probs[at] - onehot);
                        }
                    }
                }
                out.push((*logits, Tensor::new(s.to_vec(), gi)?));
            }
            Op::ForegroundProb(logits) => {
                let s = self.value(*logits).shape();
                let inner: usize = s[2..].iter().product();
                let pv = node.value.data();
                let mut gi = vec![T::zero(); 2 * pv.len()];
                for ni in 0..s[0] {
                    for p in 0..inner {
                        let pr = pv[ni * inner + p];
                        let d = gd[ni * inner + p] * pr * (T::one() - pr);
                        gi[(2 * ni) * inner + p] = -d;
                        gi[(2 * ni + 1) * inner + p] = d;
                    }
                }
                out.push((*logits, Tensor::new(s.to_vec(), gi)?));
            }
            Op::SoftDice { p, target, eps } => {
                let pv = self.value(*p);
                let (inter, sp, sg) = dice_sums(pv.data(), target);
                let num = T::of(2.0) * inter + *eps;
                let den = sp + sg + *eps;
                // d/dp_i of -(num/den) = -(2 g_i den - num) / den²
                let gi = target
                    .iter()
                    .map(|&t| -gd[0] * (T::of(2.0) * t * den - num) / (den * den))
                    .collect();
                out.push((*p, Tensor::new(pv.shape().to_vec(), gi)?));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                out.push((*x, Tensor::full(xv.shape(), gd[0])));
            }
            Op::Scale(x, factor) => {
                let gi = gd.iter().map(|&v| v * *factor).collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), gi)?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Pick { x, index } => {
                let xv = self.value(*x);
                let mut gi = Tensor::zeros(xv.shape());
                gi.data_mut()[*index] = gd[0];
                out.push((*x, gi));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let grads = op.backward(&vals, &node.value, g)?;
                out.extend(inputs.iter().copied().zip(grads));
            }
        }
        Ok(out)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn dice_sums<T: Real>(p: &[T], g: &[T]) -> (T, T, T) {
    p.iter().zip(g).fold(
        (T::zero(), T::zero(), T::zero()),
        |(i, sp, sg), (&a, &b)| (i + a * b, sp + a, sg + b),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_idempotence() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let rr = g.relu(r).unwrap();
        assert_eq!(g.value(rr).data(), g.value(r).data());
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_block_and_tie_break() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (1..=8).map(f64::from).collect();
        let x = g.leaf(t(&[1, 1, 2, 2, 2], &vals), true).unwrap();
        let p = g.maxpool3d(x).unwrap();
        assert_eq!(g.value(p).data(), &[8.0]);

        let y = g.leaf(Tensor::full(&[1, 1, 2, 2, 2], 3.0), true).unwrap();
        let q = g.maxpool3d(y).unwrap();
        assert_eq!(g.value(q).data(), &[3.0]);
        let s = g.sum(q).unwrap();
        let grads = g.backward(s).unwrap();
        let gy = grads.get(y).unwrap().data();
        assert_eq!(gy[0], 1.0);
        assert!(gy[1..].iter().all(|&v| v == 0.0));

        let odd = g.leaf(Tensor::zeros(&[1, 1, 3, 2, 2]), false).unwrap();
        assert!(matches!(g.maxpool3d(odd), Err(AutodiffError::OddDims(_))));
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut g = Graph::new();
        let x = g
            .leaf(t(&[1, 2, 1, 1, 2], &[1.0, -2.0, 3.5, 0.0]), false)
            .unwrap();
        let u = g.upsample_nearest3d(x).unwrap();
        assert_eq!(g.value(u).shape(), &[1, 2, 2, 2, 4]);
        let p = g.maxpool3d(u).unwrap();
        assert_eq!(g.value(p), g.value(x));

        let one = g.leaf(t(&[1, 1, 1, 1, 1], &[7.0]), false).unwrap();
        let up = g.upsample_nearest3d(one).unwrap();
        assert_eq!(g.value(up).data(), &[7.0; 8]);
    }

    #[test]
    fn concat_shapes_and_order() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[1, 2, 1, 1, 1], 1.0), false).unwrap();
        let b = g.leaf(Tensor::full(&[1, 3, 1, 1, 1], 2.0), false).unwrap();
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 1, 1, 1]);
        assert_eq!(g.value(c).data(), &[1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn global_avg_pool_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2, 2], 4.0), false).unwrap();
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let mut one = vec![0.0; 27];
        one[5] = 1.0;
        let y = g.leaf(t(&[1, 1, 3, 3, 3], &one), false).unwrap();
        let q = g.global_avg_pool(y).unwrap();
        assert_eq!(g.value(q).data(), &[1.0 / 27.0]);
    }

    #[test]
    fn linear_identity_and_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[3.0, -4.0]), false).unwrap();
        let eye = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false).unwrap();
        let zero = g.leaf(Tensor::zeros(&[2, 2]), false).unwrap();
        let b = g.leaf(t(&[2], &[0.5, 1.5]), false).unwrap();
        let y = g.linear(x, eye, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.5, -2.5]);
        let z = g.linear(x, zero, b).unwrap();
        assert_eq!(g.value(z).data(), &[0.5, 1.5]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::zeros(&[3, 2]), false).unwrap();
        let loss = g.softmax_cross_entropy(l, &[0, 1, 0], &[1.0, 1.0]).unwrap();
        assert!((g.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);

        let sat = g.leaf(t(&[1, 2], &[30.0, -30.0]), false).unwrap();
        let loss = g.softmax_cross_entropy(sat, &[0], &[1.0, 1.0]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-20);

        let big = g.leaf(t(&[1, 2], &[1000.0, -1000.0]), false).unwrap();
        let loss = g.softmax_cross_entropy(big, &[1], &[1.0, 1.0]).unwrap();
        assert!((g.value(loss).data()[0] - 2000.0).abs() < 1e-9);

        assert!(matches!(
            g.softmax_cross_entropy(l, &[0, 2, 0], &[1.0, 1.0]),
            Err(AutodiffError::BadLabel(2))
        ));
    }

    #[test]
    fn soft_dice_examples() {
        let gt = [1.0, 0.0, 1.0, 1.0, 0.0];
        let mut g = Graph::<f64>::new();
        let p = g.leaf(t(&[5], &gt), false).unwrap();
        let loss = g.soft_dice_loss(p, &gt, 1.0).unwrap();
        let l = g.value(loss).data()[0];
        assert!(l >= 0.0 && l <= 1.0 / (2.0 * 3.0 + 1.0));

        let inv: Vec<f64> = gt.iter().map(|v| 1.0 - v).collect();
        let q = g.leaf(t(&[5], &inv), false).unwrap();
        let loss = g.soft_dice_loss(q, &gt, 1.0).unwrap();
        let expected = 1.0 - 1.0 / (2.0 + 3.0 + 1.0);
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn foreground_prob_is_half_for_equal_logits() {
        let mut g = Graph::<f32>::new();
        let l = g.leaf(Tensor::zeros(&[1, 2, 2, 2, 2]), false).unwrap();
        let p = g.foreground_prob(l).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1, 2, 2, 2]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn backward_roots() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);

        let c = g.leaf(Tensor::scalar(5.0), false).unwrap();
        let grads = g.backward(c).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(x, g.value(x)).data(), &[0.0; 4]);

        assert!(matches!(
            g.backward(x),
            Err(AutodiffError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::scalar(f32::MAX), false).unwrap();
        assert!(matches!(
            g.scale(x, 10.0),
            Err(AutodiffError::NonFinite { .. })
        ));
        assert!(g.leaf(Tensor::scalar(f32::NAN), false).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cross_entropy_stable_and_normalized(
                n in 1usize..4,
                c in 2usize..5,
                seed in any::<u64>(),
                scale in prop_oneof![Just(1.0f32), Just(1e3f32)],
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let logits: Vec<f32> = (0..n * c).map(|_| rng.random_range(-scale..=scale)).collect();
                let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..c as u8)).collect();
                let mut g = Graph::<f32>::new();
                let x = g.leaf(Tensor::new(vec![n, c], logits).unwrap(), true).unwrap();
                let loss = g.softmax_cross_entropy(x, &labels, &vec![1.0; c]).unwrap();
                prop_assert!(g.value(loss).data()[0].is_finite());
                let grads = g.backward(loss).unwrap();
                let gx = grads.get(x).unwrap().data();
                prop_assert!(gx.iter().all(|v| v.is_finite()));
                // d/dl of mean CE is (softmax - onehot) / n per sample
                for row in gx.chunks(c) {
                    let total: f32 = row.iter().sum();
                    prop_assert!((total * n as f32).abs() < 1e-6, "softmax sums to {}", 1.0 + total * n as f32);
                }
            }
        }
    }
}
