//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]. A node holds
//! its forward value and whatever the vector-Jacobian product needs. Calling
//! [`Tape::backward`] walks the nodes in reverse order exactly once; a second
//! call is rejected. Gradients from multiple consumers of one node are summed,
//! which is what makes recurrently reused weights train correctly.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::conv::{self, ConvGeom};
use crate::numerics::layers::Parameter;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian rule for [`Tape::custom`]: `(inputs, output, grad_out) -> grad per input`.
pub type VjpFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Softmax(Var),
    Resize(Var),
    CeLogits { x: Var, labels: Vec<u32>, ignore: Option<u32>, count: usize },
    CeProbs { x: Var, labels: Vec<u32>, ignore: Option<u32>, count: usize },
    Sum(Var),
    Mean(Var),
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    Expand(Var),
    SpaceToDepth { x: Var, patch: usize },
    TokenMix { x: Var, w: Var, b: Var },
    ChannelScale { x: Var, scale: Vec<f64> },
    Custom { name: String, inputs: Vec<Var>, vjp: VjpFn },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Concat(_) => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Softmax(_) => "softmax_channels",
            Op::Resize(_) => "bilinear_resize",
            Op::CeLogits { .. } => "cross_entropy_logits",
            Op::CeProbs { .. } => "cross_entropy_probs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::Expand(_) => "expand",
            Op::SpaceToDepth { .. } => "space_to_depth",
            Op::TokenMix { .. } => "token_mix",
            Op::ChannelScale { .. } => "channel_affine",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    consumed: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Parameters bound on the tape, in binding order, with their gradients.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), self.get(*v)))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Per-output-index source taps for align-corners-false bilinear sampling.
pub(crate) fn interp_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check_labels(
    op: &'static str,
    x: &Tensor,
    labels: &[u32],
    ignore: Option<u32>,
) -> Result<(usize, usize, usize)> {
    let (n, k, h, w) = x.dims4()?;
    if labels.len() != n * h * w {
        return Err(Error::shape(op, format!("{} labels for {n}x{h}x{w} prediction", labels.len())));
    }
    let mut count = 0;
    for &l in labels {
        if Some(l) == ignore {
            continue;
        }
        if l as usize >= k {
            return Err(Error::Label { label: l, classes: k });
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("cross_entropy: every pixel is ignored"));
    }
    Ok((k, h * w, count))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Describes the first node, in execution order, holding a NaN or
    /// infinity: the parameter name for bound parameters, else index and op.
    pub fn first_non_finite(&self) -> Option<String> {
        let (i, node) = self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite())?;
        let bound = self.param_order.iter().find(|name| self.params.get(*name).is_some_and(|v| v.0 == i));
        Some(match bound {
            Some(name) => format!("parameter `{name}`"),
            None => format!("node {i} ({})", node.op.name()),
        })
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter. Repeated calls with the same name return the
    /// same node, so a parameter used several times accumulates one gradient.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(p.name.clone(), v);
        self.param_order.push(p.name.clone());
        v
    }

    /// Pre-binds `name` to an existing node; later [`Tape::param`] calls with
    /// that name resolve to it.
    pub fn bind(&mut self, name: &str, v: Var) {
        if self.params.insert(name.to_string(), v).is_none() {
            self.param_order.push(name.to_string());
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so a diverged input stays visible downstream
        let out = self.value(a).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_channels"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.value(p).shape(), self.value(*first).shape()),
                ));
            }
            channels += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new(vec![n, channels, h, w], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    /// Per-pixel softmax over the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, k, h, w) = t.dims4()?;
        if k < 2 {
            return Err(Error::shape("softmax_channels", format!("need at least 2 channels, got {k}")));
        }
        let plane = h * w;
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            let base = b * k * plane;
            for px in 0..plane {
                let at = |c: usize| base + c * plane + px;
                let max = (0..k).map(|c| src[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for c in 0..k {
                    let e = (src[at(c)] - max).exp();
                    data[at(c)] = e;
                    denom += e;
                }
                for c in 0..k {
                    data[at(c)] /= denom;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Bilinear resampling with the align-corners-false convention.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "output extent must be positive"));
        }
        let out = if (h, w) == (out_h, out_w) {
            t.clone()
        } else {
            let rows = interp_taps(h, out_h);
            let cols = interp_taps(w, out_w);
            let src = t.data();
            let mut data = Vec::with_capacity(n * c * out_h * out_w);
            for plane in src.chunks(h * w) {
                for &(y0, y1, ly) in &rows {
                    for &(x0, x1, lx) in &cols {
                        let top = (1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                        let bot = (1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                        data.push((1.0 - ly) * top + ly * bot);
                    }
                }
            }
            Tensor::new(vec![n, c, out_h, out_w], data)?
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize(x), rg))
    }

    /// Mean cross-entropy of raw logits against integer labels (log-sum-exp form).
    pub fn cross_entropy_logits(&mut self, x: Var, labels: &[u32], ignore: Option<u32>) -> Result<Var> {
        let t = self.value(x);
        let (k, plane, count) = check_labels("cross_entropy", t, labels, ignore)?;
        let src = t.data();
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if Some(l) == ignore {
                continue;
            }
            let (b, px) = (i / plane, i % plane);
            let at = |c: usize| (b * k + c) * plane + px;
            let max = (0..k).map(|c| src[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (src[at(c)] - max).exp()).sum::<f64>().ln();
            total += lse - src[at(l as usize)];
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.rg(x);
        Ok(self.push(out, Op::CeLogits { x, labels: labels.to_vec(), ignore, count }, rg))
    }

    /// Mean cross-entropy of per-pixel probabilities against integer labels.
    pub fn cross_entropy_probs(&mut self, x: Var, labels: &[u32], ignore: Option<u32>) -> Result<Var> {
        let t = self.value(x);
        let (k, plane, count) = check_labels("cross_entropy", t, labels, ignore)?;
        let src = t.data();
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if Some(l) == ignore {
                continue;
            }
            let (b, px) = (i / plane, i % plane);
            total -= src[(b * k + l as usize) * plane + px].max(PROB_FLOOR).ln();
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.rg(x);
        Ok(self.push(out, Op::CeProbs { x, labels: labels.to_vec(), ignore, count }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// `N×C×H×W -> N×C×1×1` maximum over space. Ties resolve to the first position.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (i, chunk) in t.data().chunks(plane).enumerate() {
            let mut best = 0;
            for (j, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = j;
                }
            }
            data.push(chunk[best]);
            argmax.push(i * plane + best);
        }
        let out = Tensor::new(vec![n, c, 1, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// Broadcasts `N×C×1×1` to `N×C×H×W`.
    pub fn expand(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c, th, tw) = t.dims4()?;
        if (th, tw) != (1, 1) || h == 0 || w == 0 {
            return Err(Error::shape("expand", format!("cannot expand {:?} to {h}x{w}", t.shape())));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in t.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Expand(x), rg))
    }

    /// Folds each `patch×patch` block into channels: `N×C×H×W -> N×(C·p²)×(H/p)×(W/p)`.
    /// Output channel `(c·p + dy)·p + dx` holds pixel `(dy, dx)` of each block.
    pub fn space_to_depth(&mut self, x: Var, patch: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape("space_to_depth", format!("{h}x{w} not divisible by patch {patch}")));
        }
        let (gh, gw) = (h / patch, w / patch);
        let mut data = vec![0.0; t.numel()];
        for (src, dst) in s2d_index(n, c, h, w, patch) {
            data[dst] = t.data()[src];
        }
        let out = Tensor::new(vec![n, c * patch * patch, gh, gw], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SpaceToDepth { x, patch }, rg))
    }

    /// Linear mixing across spatial positions: for every `(n, c)` row of
    /// `H·W` tokens, `y = W·x + b` with `W: T×T`, `b: T`.
    pub fn token_mix(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, c, h, wd) = tx.dims4()?;
        let t = h * wd;
        if tw.shape() != [t, t] || tb.numel() != t {
            return Err(Error::shape(
                "token_mix",
                format!("{t} tokens need {t}x{t} weight, got {:?}", tw.shape()),
            ));
        }
        let rows = n * c;
        let mut data = vec![0.0; rows * t];
        for row in data.chunks_mut(t) {
            row.copy_from_slice(tb.data());
        }
        // Y (rows×T) = X (rows×T) · Wᵀ
        gemm_rm(rows, t, t, tx.data(), (t, 1), tw.data(), (1, t), &mut data, 1.0);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::TokenMix { x, w, b }, rg))
    }

    /// Fixed per-channel affine map `y = scale[c]·x + shift[c]` (constants, not parameters).
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let (_, c, h, w) = t.dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape("channel_affine", format!("{c} channels, {} constants", scale.len())));
        }
        let plane = h * w;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                scale[ch] * v + shift[ch]
            })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelScale { x, scale: scale.to_vec() }, rg))
    }

    /// Records a user-defined operation with an explicit vector-Jacobian rule.
    pub fn custom(&mut self, name: &str, inputs: &[Var], value: Tensor, vjp: VjpFn) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom { name: name.to_string(), inputs: inputs.to_vec(), vjp }, rg)
    }

    /// Propagates gradients from the scalar `loss` to every reachable node
    /// that requires them. Leaf gradients are returned; a tape can be
    /// differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.vjp(i, &g)? {
                match grads[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&contrib),
                    None => grads[input.0] = Some(contrib),
                }
            }
        }
        let params = self
            .param_order
            .iter()
            .map(|n| (n.clone(), self.params[n]))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = conv::backward(self.value(*x), self.value(*w), geom, g, need)?;
                if let Some(t) = cg.input {
                    out.push((*x, t));
                }
                if let Some(t) = cg.weight {
                    out.push((*w, t));
                }
                if let (Some(b), Some(t)) = (b, cg.bias) {
                    out.push((*b, t));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        out.push((*v, g.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.rg(*v) {
                        let o = self.value(*other).data();
                        let d = g.data().iter().zip(o).map(|(gv, ov)| gv * ov).collect();
                        out.push((*v, Tensor::new(g.shape().to_vec(), d)?));
                    }
                }
            }
            Op::Scale(a, f) => out.push((*a, g.map(|v| v * f))),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g.data().iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    if self.rg(*p) {
                        out.push((*p, g.slice_channels(start, c)?));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4()?;
                let len = g.shape()[1];
                let plane = h * w;
                let mut d = vec![0.0; xt.numel()];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    d[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                }
                out.push((*x, Tensor::new(xt.shape().to_vec(), d)?));
            }
            Op::Softmax(x) => {
                let (n, k, h, w) = y.dims4()?;
                let plane = h * w;
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0; yd.len()];
                for b in 0..n {
                    for px in 0..plane {
                        let at = |c: usize| (b * k + c) * plane + px;
                        let dot: f64 = (0..k).map(|c| gd[at(c)] * yd[at(c)]).sum();
                        for c in 0..k {
                            d[at(c)] = yd[at(c)] * (gd[at(c)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), d)?));
            }
            Op::Resize(x) => {
                let xt = self.value(*x);
                let (_, _, h, w) = xt.dims4()?;
                let (_, _, oh, ow) = y.dims4()?;
                if (h, w) == (oh, ow) {
                    out.push((*x, g.clone()));
                } else {
                    let rows = interp_taps(h, oh);
                    let cols = interp_taps(w, ow);
                    let mut d = vec![0.0; xt.numel()];
                    for (dst, src) in d.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                                let gv = src[oy * ow + ox];
                                dst[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * gv;
                                dst[y0 * w + x1] += (1.0 - ly) * lx * gv;
                                dst[y1 * w + x0] += ly * (1.0 - lx) * gv;
                                dst[y1 * w + x1] += ly * lx * gv;
                            }
                        }
                    }
                    out.push((*x, Tensor::new(xt.shape().to_vec(), d)?));
                }
            }
            Op::CeLogits { x, labels, ignore, count } => {
                let xt = self.value(*x);
                let (_, k, h, w) = xt.dims4()?;
                let plane = h * w;
                let src = xt.data();
                let scale = g.item() / *count as f64;
                let mut d = vec![0.0; src.len()];
                for (i, &l) in labels.iter().enumerate() {
                    if Some(l) == *ignore {
                        continue;
                    }
                    let (b, px) = (i / plane, i % plane);
                    let at = |c: usize| (b * k + c) * plane + px;
                    let max = (0..k).map(|c| src[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = (0..k).map(|c| (src[at(c)] - max).exp()).sum();
                    for c in 0..k {
                        let p = (src[at(c)] - max).exp() / denom;
                        let onehot = if c == l as usize { 1.0 } else { 0.0 };
                        d[at(c)] = scale * (p - onehot);
                    }
                }
                out.push((*x, Tensor::new(xt.shape().to_vec(), d)?));
            }
            Op::CeProbs { x, labels, ignore, count } => {
                let xt = self.value(*x);
                let (_, k, h, w) = xt.dims4()?;
                let plane = h * w;
                let src = xt.data();
                let scale = g.item() / *count as f64;
                let mut d = vec![0.0; src.len()];
                for (i, &l) in labels.iter().enumerate() {
                    if Some(l) == *ignore {
                        continue;
                    }
                    let at = ((i / plane) * k + l as usize) * plane + i % plane;
                    if src[at] > PROB_FLOOR {
                        d[at] = -scale / src[at];
                    }
                }
                out.push((*x, Tensor::new(xt.shape().to_vec(), d)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.value(*x).shape(), g.item())));
            }
            Op::Mean(x) => {
                let xt = self.value(*x);
                out.push((*x, Tensor::full(xt.shape(), g.item() / xt.numel() as f64)));
            }
            Op::GlobalMaxPool { x, argmax } => {
                let xt = self.value(*x);
                let mut d = vec![0.0; xt.numel()];
                for (&at, gv) in argmax.iter().zip(g.data()) {
                    d[at] += gv;
                }
                out.push((*x, Tensor::new(xt.shape().to_vec(), d)?));
            }
            Op::Expand(x) => {
                let (_, _, h, w) = y.dims4()?;
                let d = g.data().chunks(h * w).map(|c| c.iter().sum()).collect();
                out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), d)?));
            }
            Op::SpaceToDepth { x, patch } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4()?;
                let mut d = vec![0.0; xt.numel()];
                for (src, dst) in s2d_index(n, c, h, w, *patch) {
                    d[src] = g.data()[dst];
                }
                out.push((*x, Tensor::new(xt.shape().to_vec(), d)?));
            }
            Op::TokenMix { x, w, b } => {
                let xt = self.value(*x);
                let (n, c, h, wd) = xt.dims4()?;
                let (rows, t) = (n * c, h * wd);
                if self.rg(*x) {
                    let mut d = vec![0.0; rows * t];
                    gemm_rm(rows, t, t, g.data(), (t, 1), self.value(*w).data(), (t, 1), &mut d, 0.0);
                    out.push((*x, Tensor::new(xt.shape().to_vec(), d)?));
                }
                if self.rg(*w) {
                    let mut d = vec![0.0; t * t];
                    gemm_rm(t, rows, t, g.data(), (1, t), xt.data(), (t, 1), &mut d, 0.0);
                    out.push((*w, Tensor::new(vec![t, t], d)?));
                }
                if self.rg(*b) {
                    let mut d = vec![0.0; t];
                    for row in g.data().chunks(t) {
                        d.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), d)?));
                }
            }
            Op::ChannelScale { x, scale } => {
                let (_, c, h, w) = g.dims4()?;
                let plane = h * w;
                let d = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * scale[(i / plane) % c])
                    .collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::Custom { inputs, vjp, .. } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                for (v, d) in inputs.iter().zip(vjp(&values, y, g)) {
                    if self.rg(*v) {
                        out.push((*v, d));
                    }
                }
            }
        }
        Ok(out.into_iter().filter(|(v, _)| self.rg(*v)).collect())
    }
}

/// `(source index, destination index)` pairs for [`Tape::space_to_depth`].
fn s2d_index(n: usize, c: usize, h: usize, w: usize, p: usize) -> impl Iterator<Item = (usize, usize)> {
    let (gh, gw) = (h / p, w / p);
    let oc = c * p * p;
    (0..n * c * h * w).map(move |src| {
        let x = src % w;
        let y = (src / w) % h;
        let ch = (src / (w * h)) % c;
        let b = src / (w * h * c);
        let (gy, dy, gx, dx) = (y / p, y % p, x / p, x % p);
        let o = (ch * p + dy) * p + dx;
        (src, ((b * oc + o) * gh + gy) * gw + gx)
    })
}

#[allow(clippy::too_many_arguments)]
fn gemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: extents and strides describe in-bounds views of the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
