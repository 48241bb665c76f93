use std::collections::{HashMap, HashSet};

use super::{DiffError, Tensor};

/// Index of a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize, DiffError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push((name, value));
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn by_index(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }
}

/// Gradient tensors aligned with the parameters of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            entries: params
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn by_index(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// The closed set of primitives the tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Constant,
    Param(usize),
    /// `y = W x + b`, `W: [out, in]`; `x` is read flattened.
    Linear { x: NodeId, w: NodeId, b: NodeId },
    /// Zero "same" padding, odd square kernel, `W: [out, in, k, k]`.
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    Relu(NodeId),
    Add(NodeId, NodeId),
    WeightedSum(Vec<(NodeId, f64)>),
    GlobalAvgPool(NodeId),
    Downsample2(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, label: usize },
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Constant | Op::Param(_) => Vec::new(),
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Relu(x) | Op::GlobalAvgPool(x) | Op::Downsample2(x) => vec![*x],
            Op::Add(a, b) => vec![*a, *b],
            Op::WeightedSum(terms) => terms.iter().map(|(n, _)| *n).collect(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::WeightedSum(_) => "weighted_sum",
            Op::GlobalAvgPool(_) => "gap",
            Op::Downsample2(_) => "downsample2",
            Op::SoftmaxCrossEntropy { .. } => "softmax_ce",
        }
    }
}

struct Node {
    op: Op,
    label: String,
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
}

/// Define-by-run tape over a borrowed parameter store.
///
/// Nodes are evaluated eagerly as they are recorded, so the tape order is a
/// valid topological order by construction.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

fn mismatch(label: &str, detail: String) -> DiffError {
    DiffError::ShapeMismatch {
        node: label.to_string(),
        detail,
    }
}

/// Output index range `[lo, hi)` whose input coordinate `o*stride + kpos - pad`
/// falls inside `[0, in_len)`.
fn valid_range(kpos: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if kpos >= pad { 0 } else { (pad - kpos).div_ceil(stride) };
    let hi = (in_len + pad - kpos).div_ceil(stride).min(out_len);
    (lo, hi.max(lo))
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(idx)) => self.params.by_index(*idx),
            _ => unreachable!("non-param node without value"),
        }
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Every node `target` transitively reads from, excluding itself.
    pub fn ancestors(&self, target: NodeId) -> HashSet<NodeId> {
        let mut seen = HashSet::new();
        let mut stack = self.nodes[target.0].op.inputs();
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(self.nodes[n.0].op.inputs());
            }
        }
        seen
    }

    pub fn depends_on(&self, node: NodeId, ancestor: NodeId) -> bool {
        self.ancestors(node).contains(&ancestor)
    }

    fn push(&mut self, op: Op, label: &str, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            label: label.to_string(),
            value: Some(value),
        });
        id
    }

    pub fn input(&mut self, label: &str, value: Tensor) -> Result<NodeId, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite(label.to_string()));
        }
        Ok(self.push(Op::Input, label, value))
    }

    pub fn constant(&mut self, label: &str, value: Tensor) -> NodeId {
        self.push(Op::Constant, label, value)
    }

    /// Node for a named parameter; repeated lookups share one node so that
    /// gradients from every use accumulate into it.
    pub fn param(&mut self, name: &str) -> Result<NodeId, DiffError> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if let Some(&id) = self.param_nodes.get(&idx) {
            return Ok(id);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param(idx),
            label: name.to_string(),
            value: None,
        });
        self.param_nodes.insert(idx, id);
        Ok(id)
    }

    pub fn linear(&mut self, label: &str, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 || bv.rank() != 1 {
            return Err(mismatch(label, format!("linear x{:?} w{:?} b{:?}", xv.shape(), wv.shape(), bv.shape())));
        }
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        if xv.len() != inp || bv.len() != out {
            return Err(mismatch(label, format!("linear x{:?} w{:?} b{:?}", xv.shape(), wv.shape(), bv.shape())));
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let y: Vec<f64> = (0..out)
            .map(|o| {
                let row = &wd[o * inp..(o + 1) * inp];
                let mut acc = bd[o];
                for (wi, xi) in row.iter().zip(xd) {
                    acc += wi * xi;
                }
                acc
            })
            .collect();
        let value = Tensor::new(vec![out], y)?;
        Ok(self.push(Op::Linear { x, w, b }, label, value))
    }

    pub fn conv2d(
        &mut self,
        label: &str,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, DiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let bad = || mismatch(label, format!("conv2d x{:?} w{:?} b{:?} stride {stride}", xv.shape(), wv.shape(), bv.shape()));
        if xv.rank() != 3 || wv.rank() != 4 || bv.rank() != 1 || stride == 0 {
            return Err(bad());
        }
        let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, wcin, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if wcin != cin || k != k2 || k % 2 == 0 || bv.len() != cout {
            return Err(bad());
        }
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (xs, ws, bs) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; cout * ho * wo];
        for oc in 0..cout {
            let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            plane.fill(bs[oc]);
            for ic in 0..cin {
                let xin = &xs[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
                    for kx in 0..k {
                        let wval = ws[((oc * cin + ic) * k + ky) * k + kx];
                        let (ox0, ox1) = valid_range(kx, pad, stride, wd, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            let irow = &xin[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                for (o, i) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                                    *o += wval * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wval * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride }, label, value))
    }

    pub fn relu(&mut self, label: &str, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), label, value)
    }

    pub fn add(&mut self, label: &str, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let value = self
            .value(a)
            .add(self.value(b))
            .map_err(|e| mismatch(label, e.to_string()))?;
        Ok(self.push(Op::Add(a, b), label, value))
    }

    /// `Σ wᵢ·xᵢ`, accumulated left to right.
    pub fn weighted_sum(&mut self, label: &str, terms: &[(NodeId, f64)]) -> Result<NodeId, DiffError> {
        let Some(&(first, w0)) = terms.first() else {
            return Err(mismatch(label, "empty weighted sum".into()));
        };
        let shape = self.value(first).shape().to_vec();
        let mut acc = self.value(first).scale(w0);
        for &(n, w) in &terms[1..] {
            let v = self.value(n);
            if v.shape() != shape.as_slice() {
                return Err(mismatch(label, format!("sum term {:?} vs {:?} ({})", v.shape(), shape, self.label(n))));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                *a += w * b;
            }
        }
        Ok(self.push(Op::WeightedSum(terms.to_vec()), label, acc))
    }

    pub fn sum(&mut self, label: &str, terms: &[NodeId]) -> Result<NodeId, DiffError> {
        let weighted: Vec<(NodeId, f64)> = terms.iter().map(|&n| (n, 1.0)).collect();
        self.weighted_sum(label, &weighted)
    }

    /// `[C, H, W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, label: &str, x: NodeId) -> Result<NodeId, DiffError> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(mismatch(label, format!("gap expects [C,H,W], got {:?}", xv.shape())));
        }
        let c = xv.shape()[0];
        let hw = xv.shape()[1] * xv.shape()[2];
        let means = xv
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![c], means)?;
        Ok(self.push(Op::GlobalAvgPool(x), label, value))
    }

    /// Keeps every second row and column, starting at 0.
    pub fn downsample2(&mut self, label: &str, x: NodeId) -> Result<NodeId, DiffError> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(mismatch(label, format!("downsample expects [C,H,W], got {:?}", xv.shape())));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let d = xv.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out.push(d[(ch * h + 2 * oy) * w + 2 * ox]);
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(Op::Downsample2(x), label, value))
    }

    /// Scalar `logsumexp(z) - z[label]`.
    pub fn softmax_cross_entropy(&mut self, label: &str, logits: NodeId, class: usize) -> Result<NodeId, DiffError> {
        let z = self.value(logits);
        if z.rank() != 1 || class >= z.len() {
            return Err(mismatch(label, format!("class {class} for logits {:?}", z.shape())));
        }
        if !z.is_finite() {
            return Err(DiffError::NonFinite(label.to_string()));
        }
        let loss = log_sum_exp(z.data()) - z.data()[class];
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, label: class },
            label,
            Tensor::scalar(loss),
        ))
    }

    /// Reverse sweep from a scalar node; returns `∂loss/∂p` for every
    /// parameter in the store (zero for parameters the loss does not reach).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::NonScalarLoss(self.label(loss).to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        fn acc<'a>(slot: &'a mut Option<Tensor>, shape: &[usize]) -> &'a mut Tensor {
            slot.get_or_insert_with(|| Tensor::zeros(shape))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Constant => {}
                Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                    let gd = g.data();
                    {
                        let gb = acc(&mut grads[b.0], &[out]);
                        for (a, v) in gb.data_mut().iter_mut().zip(gd) {
                            *a += v;
                        }
                    }
                    {
                        let gw = acc(&mut grads[w.0], wv.shape());
                        let gwd = gw.data_mut();
                        for o in 0..out {
                            for j in 0..inp {
                                gwd[o * inp + j] += gd[o] * xv.data()[j];
                            }
                        }
                    }
                    let gx = acc(&mut grads[x.0], xv.shape());
                    let gxd = gx.data_mut();
                    for o in 0..out {
                        for j in 0..inp {
                            gxd[j] += gd[o] * wv.data()[o * inp + j];
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride } => {
                    self.conv2d_backward(&g, *x, *w, *b, *stride, &mut grads);
                }
                Op::Relu(x) => {
                    let out = node.value.as_ref().expect("relu value");
                    let gx = acc(&mut grads[x.0], out.shape());
                    for ((a, gv), o) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *o > 0.0 {
                            *a += gv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], g.shape()).add_assign(&g);
                    acc(&mut grads[b.0], g.shape()).add_assign(&g);
                }
                Op::WeightedSum(terms) => {
                    for &(n, wt) in terms {
                        let slot = acc(&mut grads[n.0], g.shape());
                        for (a, v) in slot.data_mut().iter_mut().zip(g.data()) {
                            *a += wt * v;
                        }
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let hw = shape[1] * shape[2];
                    let gx = acc(&mut grads[x.0], &shape);
                    for (ch, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                        let share = g.data()[ch] / hw as f64;
                        for v in plane {
                            *v += share;
                        }
                    }
                }
                Op::Downsample2(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                    let gx = acc(&mut grads[x.0], &shape);
                    let gxd = gx.data_mut();
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                gxd[(ch * h + 2 * oy) * w + 2 * ox] += g.data()[(ch * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, label } => {
                    let z = self.value(*logits);
                    let p = softmax(z.data());
                    let gx = acc(&mut grads[logits.0], z.shape());
                    let upstream = g.data()[0];
                    for (k, (a, pk)) in gx.data_mut().iter_mut().zip(p).enumerate() {
                        let onehot = if k == *label { 1.0 } else { 0.0 };
                        *a += upstream * (pk - onehot);
                    }
                }
            }
        }

        let mut out = Gradients::zeros_like(self.params);
        for (&pidx, &nid) in &self.param_nodes {
            if let Some(g) = grads.get_mut(nid.0).and_then(Option::take) {
                out.entries[pidx].1 = g;
            }
        }
        Ok(out)
    }

    fn conv2d_backward(
        &self,
        g: &Tensor,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        let (ho, wo) = (g.shape()[1], g.shape()[2]);
        let pad = k / 2;
        let gd = g.data();

        let mut gb = vec![0.0; cout];
        for (oc, v) in gb.iter_mut().enumerate() {
            *v = gd[oc * ho * wo..(oc + 1) * ho * wo].iter().sum();
        }
        let mut gw = vec![0.0; wv.len()];
        let mut gx = vec![0.0; xv.len()];
        let (xs, ws) = (xv.data(), wv.data());
        for oc in 0..cout {
            let gplane = &gd[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..cin {
                let xin = &xs[ic * h * wd..(ic + 1) * h * wd];
                let gin = &mut gx[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
                    for kx in 0..k {
                        let widx = ((oc * cin + ic) * k + ky) * k + kx;
                        let wval = ws[widx];
                        let (ox0, ox1) = valid_range(kx, pad, stride, wd, wo);
                        let mut gwacc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - pad;
                                let gv = grow[ox];
                                gwacc += gv * xin[iy * wd + ix];
                                gin[iy * wd + ix] += gv * wval;
                            }
                        }
                        gw[widx] += gwacc;
                    }
                }
            }
        }
        let add = |slot: &mut Option<Tensor>, shape: &[usize], vals: Vec<f64>| {
            let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
            for (a, v) in t.data_mut().iter_mut().zip(vals) {
                *a += v;
            }
        };
        add(&mut grads[b.0], &[cout], gb);
        add(&mut grads[w.0], wv.shape(), gw);
        add(&mut grads[x.0], xv.shape(), gx);
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (n, t) in entries {
            p.insert(*n, t.clone()).unwrap();
        }
        p
    }

    #[test]
    fn gap_of_two_by_two() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let x = g
            .input("x", Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap())
            .unwrap();
        let y = g.global_avg_pool("gap", x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn relu_values() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let x = g.input("x", Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu("r", x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let p = store(&[
            ("w", Tensor::filled(&[1, 1, 3, 3], 1.0)),
            ("b", Tensor::zeros(&[1])),
        ]);
        let mut g = Graph::new(&p);
        let x = g.input("x", Tensor::filled(&[1, 3, 3], 1.0)).unwrap();
        let (w, b) = (g.param("w").unwrap(), g.param("b").unwrap());
        let y = g.conv2d("conv", x, w, b, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 3, 3]);
        assert_eq!(v.data()[4], 9.0);
        // corners see four ones under zero padding
        assert_eq!(v.data()[0], 4.0);
    }

    #[test]
    fn conv_stride_two_halves() {
        let p = store(&[
            ("w", Tensor::filled(&[2, 1, 3, 3], 1.0)),
            ("b", Tensor::zeros(&[2])),
        ]);
        let mut g = Graph::new(&p);
        let x = g.input("x", Tensor::filled(&[1, 8, 8], 1.0)).unwrap();
        let (w, b) = (g.param("w").unwrap(), g.param("b").unwrap());
        let y = g.conv2d("conv", x, w, b, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 4]);
        assert_eq!(g.value(y).data()[5], 9.0);
    }

    #[test]
    fn conv_rejects_even_kernel_and_names_node() {
        let p = store(&[
            ("w", Tensor::filled(&[1, 1, 2, 2], 1.0)),
            ("b", Tensor::zeros(&[1])),
        ]);
        let mut g = Graph::new(&p);
        let x = g.input("x", Tensor::filled(&[1, 3, 3], 1.0)).unwrap();
        let (w, b) = (g.param("w").unwrap(), g.param("b").unwrap());
        let err = g.conv2d("stem/conv", x, w, b, 1).unwrap_err();
        assert!(err.to_string().contains("stem/conv"), "{err}");
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        assert!(matches!(
            g.input("x", Tensor::vector(vec![f64::NAN])),
            Err(DiffError::NonFinite(_))
        ));
    }

    #[test]
    fn product_rule() {
        let p = store(&[("w", Tensor::new(vec![1, 1], vec![2.0]).unwrap()), ("b", Tensor::zeros(&[1]))]);
        let mut g = Graph::new(&p);
        let x = g.input("x", Tensor::vector(vec![3.0])).unwrap();
        let (w, b) = (g.param("w").unwrap(), g.param("b").unwrap());
        let y = g.linear("lin", x, w, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[3.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn relu_negative_side_has_zero_gradient() {
        let p = store(&[("w", Tensor::vector(vec![-1.0]))]);
        let mut g = Graph::new(&p);
        let w = g.param("w").unwrap();
        let y = g.relu("r", w);
        assert_eq!(g.backward(y).unwrap().get("w").unwrap().data(), &[0.0]);

        let p0 = store(&[("w", Tensor::vector(vec![0.0]))]);
        let mut g = Graph::new(&p0);
        let w = g.param("w").unwrap();
        let y = g.relu("r", w);
        assert_eq!(g.backward(y).unwrap().get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn softmax_ce_uniform_gradient() {
        let p = store(&[("z", Tensor::vector(vec![0.0, 0.0]))]);
        let mut g = Graph::new(&p);
        let z = g.param("z").unwrap();
        let l = g.softmax_cross_entropy("ce", z, 0).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let gz = g.backward(l).unwrap();
        assert_eq!(gz.get("z").unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = w + w + 2w => 4
        let p = store(&[("w", Tensor::vector(vec![1.5]))]);
        let mut g = Graph::new(&p);
        let w = g.param("w").unwrap();
        let w_again = g.param("w").unwrap();
        assert_eq!(w, w_again);
        let a = g.add("a", w, w_again).unwrap();
        let s = g.weighted_sum("s", &[(a, 1.0), (w, 2.0)]).unwrap();
        assert_eq!(g.backward(s).unwrap().get("w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let p = store(&[("w", Tensor::vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&p);
        let w = g.param("w").unwrap();
        let r = g.relu("r", w);
        assert!(matches!(g.backward(r), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn downsample_picks_even_positions() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let x = g
            .input("x", Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap())
            .unwrap();
        let y = g.downsample2("ds", x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 6.0, 8.0]);
    }

    #[test]
    fn unknown_param_errors() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        assert!(matches!(g.param("nope"), Err(DiffError::UnknownParam(_))));
    }
}
