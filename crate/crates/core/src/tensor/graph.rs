use super::{GradMap, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds supported by the tape, with their attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Same-padded, stride-1 convolution: inputs `[x: I×H×W, w: O×I×K×K]`.
    Conv2d,
    /// Per-channel bias over spatial dims: inputs `[x: C×H×W, b: C]`.
    BiasAdd,
    Relu,
    /// 2×2 max pooling with stride 2.
    MaxPool2,
    /// Nearest-neighbour 2× upsampling.
    UpsampleNearest2,
    Add,
    /// Concatenation along the channel (first) axis.
    ConcatChannels,
    /// Softmax over the channel axis at every pixel.
    SoftmaxChannels,
    /// Elementwise product of two same-shaped tensors.
    Mul,
    /// Multiplication by a constant.
    MulScalar(f64),
    Sum,
    Mean,
    Abs,
    Log,
    Neg,
    /// Sum of the entries selected by a mask with the input's element count.
    MaskedSelectSum(Vec<bool>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::BiasAdd => "bias_add",
            OpKind::Relu => "relu",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::UpsampleNearest2 => "upsample_nearest2",
            OpKind::Add => "add",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SoftmaxChannels => "softmax_channels",
            OpKind::Mul => "mul",
            OpKind::MulScalar(_) => "mul_scalar",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Abs => "abs",
            OpKind::Log => "log",
            OpKind::Neg => "neg",
            OpKind::MaskedSelectSum(_) => "masked_select_sum",
        }
    }
}

#[derive(Debug)]
enum Record {
    Leaf { param: Option<String> },
    Op {
        kind: OpKind,
        inputs: Vec<NodeId>,
        /// Flat input index chosen by each pooling window.
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    record: Record,
    value: Tensor,
}

/// A tape of operations in topological (insertion) order.
///
/// Every op input refers to an earlier node, so reverse insertion order is a
/// valid reverse topological order and no cycle can be formed.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Record::Leaf { param: None }, value)
    }

    /// Records a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(
            Record::Leaf {
                param: Some(name.to_string()),
            },
            value,
        )
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, record: Record, value: Tensor) -> NodeId {
        self.nodes.push(Node { record, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on the given inputs and records it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let name = kind.name();
        let arity = match kind {
            OpKind::Conv2d | OpKind::BiasAdd | OpKind::Add | OpKind::Mul => Some(2),
            OpKind::ConcatChannels => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::shape(name, format!("expected {n} inputs, got {}", inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(name, "no inputs"));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Invalid(format!("unknown node {}", bad.0)));
        }

        let mut argmax = Vec::new();
        let value = {
            let x = |k: usize| &self.nodes[inputs[k].0].value;
            match &kind {
                OpKind::Conv2d => conv2d(x(0), x(1))?,
                OpKind::BiasAdd => bias_add(x(0), x(1))?,
                OpKind::Relu => map(x(0), |v| if v > 0.0 { v } else { 0.0 }),
                OpKind::MaxPool2 => {
                    let (out, idx) = maxpool2(x(0))?;
                    argmax = idx;
                    out
                }
                OpKind::UpsampleNearest2 => upsample2(x(0))?,
                OpKind::Add | OpKind::Mul => {
                    let (a, b) = (x(0), x(1));
                    if a.shape() != b.shape() {
                        return Err(Error::shape(
                            name,
                            format!("{:?} vs {:?}", a.shape(), b.shape()),
                        ));
                    }
                    let data = a.data().iter().zip(b.data());
                    let data = if kind == OpKind::Add {
                        data.map(|(p, q)| p + q).collect()
                    } else {
                        data.map(|(p, q)| p * q).collect()
                    };
                    Tensor::new(a.shape().to_vec(), data)?
                }
                OpKind::ConcatChannels => {
                    let parts: Vec<&Tensor> = (0..inputs.len()).map(x).collect();
                    concat_channels(&parts)?
                }
                OpKind::SoftmaxChannels => softmax_channels(x(0))?,
                OpKind::MulScalar(s) => {
                    let s = *s;
                    map(x(0), |v| v * s)
                }
                OpKind::Sum => Tensor::scalar(x(0).data().iter().sum()),
                OpKind::Mean => {
                    let t = x(0);
                    Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
                }
                OpKind::Abs => map(x(0), f64::abs),
                OpKind::Log => {
                    let t = x(0);
                    if let Some(&v) = t.data().iter().find(|&&v| !(v > 0.0)) {
                        return Err(Error::LogDomain { value: v });
                    }
                    map(t, f64::ln)
                }
                OpKind::Neg => map(x(0), |v| -v),
                OpKind::MaskedSelectSum(mask) => {
                    let t = x(0);
                    if mask.len() != t.numel() {
                        return Err(Error::shape(
                            name,
                            format!("mask has {} entries, input {}", mask.len(), t.numel()),
                        ));
                    }
                    let s = t
                        .data()
                        .iter()
                        .zip(mask)
                        .filter(|(_, &m)| m)
                        .map(|(v, _)| v)
                        .sum();
                    Tensor::scalar(s)
                }
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(
            Record::Op {
                kind,
                inputs: inputs.to_vec(),
                argmax,
            },
            value,
        ))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Conv2d, &[x, w])
    }
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::BiasAdd, &[x, b])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[x])
    }
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MaxPool2, &[x])
    }
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::UpsampleNearest2, &[x])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::ConcatChannels, parts)
    }
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SoftmaxChannels, &[x])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn mul_scalar(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.apply(OpKind::MulScalar(s), &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[x])
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[x])
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Abs, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[x])
    }
    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Neg, &[x])
    }
    pub fn masked_select_sum(&mut self, x: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        self.apply(OpKind::MaskedSelectSum(mask), &[x])
    }

    /// Reverse-mode gradients of the scalar `loss` for every tensor in
    /// `params`, matched by name to the graph's param leaves. Parameters the
    /// loss does not reach receive zeros.
    /// Smallest distance of any recorded relu or abs input from zero, or of
    /// any pooling window's maximum from its runner-up. Finite differences
    /// with a step well below this see a smooth function. Windows tied at
    /// exactly zero hold clamped activations and are skipped.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let Record::Op { kind, inputs, .. } = &node.record else {
                continue;
            };
            let x = &self.nodes[inputs[0].0].value;
            match kind {
                OpKind::Relu | OpKind::Abs => {
                    margin = x.data().iter().fold(margin, |m, v| m.min(v.abs()));
                }
                OpKind::MaxPool2 => {
                    let (h, w) = (x.shape()[1], x.shape()[2]);
                    for plane in x.data().chunks(h * w) {
                        for r in (0..h).step_by(2) {
                            for c in (0..w).step_by(2) {
                                let mut win = [plane[r * w + c], plane[r * w + c + 1], plane[(r + 1) * w + c], plane[(r + 1) * w + c + 1]];
                                win.sort_by(|a, b| b.total_cmp(a));
                                if win[0] != 0.0 {
                                    margin = margin.min(win[0] - win[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn backward(&self, loss: NodeId, params: &ParamSet) -> Result<GradMap> {
        let grads = self.node_grads(loss)?;
        let mut out = GradMap::zeros_like(params);
        for (node, grad) in self.nodes.iter().zip(grads) {
            let (Record::Leaf { param: Some(name) }, Some(grad)) = (&node.record, grad) else {
                continue;
            };
            if let Some(slot) = out.get_mut(name) {
                if slot.shape() != grad.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!("param {name}: {:?} vs {:?}", slot.shape(), grad.shape()),
                    ));
                }
                for (s, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                    *s += g;
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to every node (None where unreached).
    fn node_grads(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let Record::Op {
                kind,
                inputs,
                argmax,
            } = &node.record
            else {
                grads[id] = Some(g);
                continue;
            };
            debug_assert!(inputs.iter().all(|i| i.0 < id), "graph is not topological");
            let x = |k: usize| &self.nodes[inputs[k].0].value;
            let y = &node.value;
            let gd = g.data();

            let input_grads: Vec<Tensor> = match kind {
                OpKind::Conv2d => {
                    let (gx, gw) = conv2d_backward(x(0), x(1), &g)?;
                    vec![gx, gw]
                }
                OpKind::BiasAdd => {
                    let (c, h, w) = x(0).chw("bias_add")?;
                    let hw = h * w;
                    let gb = (0..c).map(|ch| gd[ch * hw..(ch + 1) * hw].iter().sum()).collect();
                    vec![g.clone(), Tensor::new(vec![c], gb)?]
                }
                OpKind::Relu => vec![zip_map(&g, x(0), |gv, xv| if xv > 0.0 { gv } else { 0.0 })],
                OpKind::MaxPool2 => {
                    let mut gx = Tensor::zeros(x(0).shape());
                    let gxd = gx.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        gxd[src] += gd[o];
                    }
                    vec![gx]
                }
                OpKind::UpsampleNearest2 => vec![upsample2_backward(x(0), &g)?],
                OpKind::Add => vec![g.clone(), g.clone()],
                OpKind::Mul => vec![zip_map(&g, x(1), |gv, bv| gv * bv), zip_map(&g, x(0), |gv, av| gv * av)],
                OpKind::ConcatChannels => {
                    let mut offset = 0;
                    let mut parts = Vec::with_capacity(inputs.len());
                    for k in 0..inputs.len() {
                        let n = x(k).numel();
                        parts.push(Tensor::new(x(k).shape().to_vec(), gd[offset..offset + n].to_vec())?);
                        offset += n;
                    }
                    debug_assert_eq!(offset, y.numel());
                    parts
                }
                OpKind::SoftmaxChannels => {
                    let (c, h, w) = y.chw("softmax_channels")?;
                    let hw = h * w;
                    let yd = y.data();
                    let mut gx = vec![0.0; y.numel()];
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|ch| gd[ch * hw + p] * yd[ch * hw + p]).sum();
                        for ch in 0..c {
                            let i = ch * hw + p;
                            gx[i] = yd[i] * (gd[i] - dot);
                        }
                    }
                    vec![Tensor::new(y.shape().to_vec(), gx)?]
                }
                OpKind::MulScalar(s) => {
                    let s = *s;
                    vec![map(&g, |v| v * s)]
                }
                OpKind::Sum => vec![Tensor::full(x(0).shape(), gd[0])],
                OpKind::Mean => {
                    let n = x(0).numel() as f64;
                    vec![Tensor::full(x(0).shape(), gd[0] / n)]
                }
                OpKind::Abs => vec![zip_map(&g, x(0), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })],
                OpKind::Log => vec![zip_map(&g, x(0), |gv, xv| gv / xv)],
                OpKind::Neg => vec![map(&g, |v| -v)],
                OpKind::MaskedSelectSum(mask) => {
                    let data = mask.iter().map(|&m| if m { gd[0] } else { 0.0 }).collect();
                    vec![Tensor::new(x(0).shape().to_vec(), data)?]
                }
            };

            for (input, ig) in inputs.iter().zip(input_grads) {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(grads)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: g.data.iter().zip(&x.data).map(|(&gv, &xv)| f(gv, xv)).collect(),
    }
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (ci, h, wd) = x.chw("conv2d")?;
    let [o, i, k, k2] = w.shape()[..] else {
        return Err(Error::shape("conv2d", format!("weight must be O×I×K×K, got {:?}", w.shape())));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {k}×{k2}")));
    }
    if i != ci {
        return Err(Error::shape("conv2d", format!("weight expects {i} input channels, input has {ci}")));
    }
    Ok((o, i, k, h, wd))
}

/// Overlap of output positions `[lo, hi)` for a kernel tap shifted by `d`.
#[inline]
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (o, i, k, h, wd) = conv_dims(x, w)?;
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; o * hw];
    for oc in 0..o {
        let out_plane = &mut out[oc * hw..(oc + 1) * hw];
        for ic in 0..i {
            let in_plane = &xd[ic * hw..(ic + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, wd);
                    let wv = wdat[((oc * i + ic) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut out_plane[y * wd + x0..y * wd + x1];
                        let s0 = (x0 as isize + dx) as usize;
                        let src = &in_plane[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![o, h, wd], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (o, i, k, h, wd) = conv_dims(x, w)?;
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();
    let mut gx = vec![0.0; i * hw];
    let mut gw = vec![0.0; wdat.len()];
    for oc in 0..o {
        let g_plane = &gd[oc * hw..(oc + 1) * hw];
        for ic in 0..i {
            let in_plane = &xd[ic * hw..(ic + 1) * hw];
            let gx_plane = &mut gx[ic * hw..(ic + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, wd);
                    let widx = ((oc * i + ic) * k + ky) * k + kx;
                    let wv = wdat[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (x0 as isize + dx) as usize;
                        let n = x1 - x0;
                        let grow = &g_plane[y * wd + x0..y * wd + x0 + n];
                        let src = &in_plane[sy * wd + s0..sy * wd + s0 + n];
                        let dst = &mut gx_plane[sy * wd + s0..sy * wd + s0 + n];
                        for ((d, s), gv) in dst.iter_mut().zip(src).zip(grow) {
                            *d += wv * gv;
                            acc += gv * s;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(w.shape().to_vec(), gw)?))
}

fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw("bias_add")?;
    if b.shape() != [c] {
        return Err(Error::shape("bias_add", format!("bias {:?} for {c} channels", b.shape())));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (ch, &bv) in b.data().iter().enumerate() {
        for v in &mut out[ch * hw..(ch + 1) * hw] {
            *v += bv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.chw("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", format!("spatial size {h}×{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for cand in [
                    base + 2 * y * w + 2 * xx + 1,
                    base + (2 * y + 1) * w + 2 * xx,
                    base + (2 * y + 1) * w + 2 * xx + 1,
                ] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                out.push(xd[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, idx))
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw("upsample_nearest2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = &xd[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for xx in 0..ow {
                out.push(row[xx / 2]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn upsample2_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw("upsample_nearest2")?;
    let ow = 2 * w;
    let gd = g.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..ow {
                gx[ch * h * w + (y / 2) * w + xx / 2] += gd[ch * 4 * h * w + y * ow + xx];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gx)
}

fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (_, h, w) = parts[0].chw("concat_channels")?;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw) = p.chw("concat_channels")?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial {ph}×{pw} vs {h}×{w}"),
            ));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw("softmax_channels")?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for p in 0..hw {
        let max = (0..c).map(|ch| xd[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for ch in 0..c {
            let e = (xd[ch * hw + p] - max).exp();
            out[ch * hw + p] = e;
            total += e;
        }
        for ch in 0..c {
            out[ch * hw + p] /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
