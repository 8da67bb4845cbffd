//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`GradGraph`] is a tape of op records in topological order. Forward ops
//! append nodes; [`GradGraph::backward`] walks the tape in reverse and fills
//! per-node gradients. Everything is `f64`, row-major, and single-owner: one
//! graph is built, run and dropped per optimization step. Independent graphs
//! can live on separate threads.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Node index into a [`GradGraph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, kernel: NodeId, bias: Option<NodeId>, stride: usize, pad: usize },
    Relu { x: NodeId },
    Linear { x: NodeId, weight: NodeId, bias: NodeId },
    GlobalAvgPool { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    // Cached probabilities make the backward pass a one-liner.
    CrossEntropy { logits: NodeId, label: usize, probs: Vec<f64> },
    Mse { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, s: f64 },
    WeightedSum { weights: NodeId, stack: NodeId },
    SumAxis { x: NodeId, axis: usize },
    // out[i] = x[map[i]] or 0.0 when None. Covers temporal shift and
    // frame replication as pure index permutations.
    Gather { x: NodeId, map: Vec<Option<usize>> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, kernel, bias, .. } => {
                let mut v = vec![*x, *kernel];
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
            Op::Relu { x } | Op::GlobalAvgPool { x } => vec![*x],
            Op::Linear { x, weight, bias } => vec![*x, *weight, *bias],
            Op::Softmax { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Mse { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::Scale { a, .. } => vec![*a],
            Op::WeightedSum { weights, stack } => vec![*weights, *stack],
            Op::SumAxis { x, .. } => vec![*x],
            Op::Gather { x, .. } => vec![*x],
        }
    }
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction; `backward` visits each exactly once in reverse.
#[derive(Default)]
pub struct GradGraph {
    nodes: Vec<Node>,
}

impl GradGraph {
    pub fn new() -> Self {
        GradGraph { nodes: Vec::new() }
    }

    fn push(&mut self, mut tensor: Tensor, op: Op) -> NodeId {
        debug_assert!(tensor.is_finite(), "non-finite forward value out of {:?}", op_name(&op));
        tensor.requires_grad = op
            .inputs()
            .iter()
            .any(|id| self.nodes[id.0].tensor.requires_grad);
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf. Gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node { tensor: t, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// 2D convolution over a `[N, Cin, H, W]` input with a
    /// `[Cout, Cin, KH, KW]` kernel and optional `[Cout]` bias. Direct
    /// nested loops; correctness over speed.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::Domain("conv2d stride must be >= 1".into()));
        }
        let xs = self.value(x).shape.clone();
        let ks = self.value(kernel).shape.clone();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d expects 4-d input and kernel, got {:?} and {:?}",
                xs, ks
            )));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if cin != kcin {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input {:?} vs kernel {:?}",
                xs, ks
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dim(format!(
                "conv2d kernel {:?} larger than padded input {:?}",
                ks, xs
            )));
        }
        if let Some(b) = bias {
            let bs = &self.value(b).shape;
            if bs.as_slice() != [cout] {
                return Err(Error::Dim(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    bs, cout
                )));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let out = {
            let xd = &self.nodes[x.0].tensor.data;
            let kd = &self.nodes[kernel.0].tensor.data;
            let bd = bias.map(|b| self.nodes[b.0].tensor.data.clone());
            let mut out = vec![0.0; n * cout * oh * ow];
            let geom = ConvGeom { cin, h, w, kh, kw, oh, ow, stride, pad };
            for ni in 0..n {
                for oc in 0..cout {
                    let obase = ((ni * cout + oc) * oh) * ow;
                    if let Some(b) = &bd {
                        out[obase..obase + oh * ow].fill(b[oc]);
                    }
                    for ic in 0..cin {
                        let xbase = ((ni * cin + ic) * h) * w;
                        let kbase = ((oc * cin + ic) * kh) * kw;
                        geom.for_each_row(|oy, ky, iy, kx, ox_lo, ox_hi| {
                            let k = kd[kbase + ky * kw + kx];
                            if k == 0.0 {
                                return;
                            }
                            let orow = obase + oy * ow;
                            let xrow = xbase + iy * w;
                            let xoff = (ox_lo * stride + kx) - pad;
                            if stride == 1 {
                                let xs = &xd[xrow + xoff..xrow + xoff + (ox_hi - ox_lo)];
                                let os = &mut out[orow + ox_lo..orow + ox_hi];
                                for (o, xv) in os.iter_mut().zip(xs) {
                                    *o += k * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out[orow + ox] += k * xd[xrow + (ox * stride + kx) - pad];
                                }
                            }
                        });
                    }
                }
            }
            out
        };
        let t = Tensor::new(vec![n, cout, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, kernel, bias, stride, pad }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| v.max(0.0)).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::Relu { x })
    }

    /// `weight [K, D] · x [D] + bias [K]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(weight).shape.clone();
        let bs = self.value(bias).shape.clone();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs.as_slice() != [ws[0]] {
            return Err(Error::Dim(format!(
                "linear shapes do not conform: x {:?}, weight {:?}, bias {:?}",
                xs, ws, bs
            )));
        }
        let (k, d) = (ws[0], ws[1]);
        let xd = &self.nodes[x.0].tensor.data;
        let wd = &self.nodes[weight.0].tensor.data;
        let bd = &self.nodes[bias.0].tensor.data;
        let mut out = vec![0.0; k];
        for r in 0..k {
            let mut acc = bd[r];
            let row = &wd[r * d..(r + 1) * d];
            for j in 0..d {
                acc += row[j] * xd[j];
            }
            out[r] = acc;
        }
        let t = Tensor::new(vec![k], out)?;
        Ok(self.push(t, Op::Linear { x, weight, bias }))
    }

    /// Spatial mean over the last two axes of `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 4 {
            return Err(Error::Dim(format!("global_avg_pool expects 4-d input, got {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let area = (h * w) as f64;
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            let s: f64 = xd[i * h * w..(i + 1) * h * w].iter().sum();
            out[i] = s / area;
        }
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool { x }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.value(x).shape.clone();
        if axis >= xs.len() {
            return Err(Error::Dim(format!("softmax axis {} out of range for {:?}", axis, xs)));
        }
        let (outer, len, inner) = axis_split(&xs, axis);
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for a in 0..len {
                    m = m.max(xd[idx(a)]);
                }
                let mut z = 0.0;
                for a in 0..len {
                    let e = (xd[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] /= z;
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// Negative log-likelihood of `label` under softmax of a 1-d logits
    /// vector. Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let ls = self.value(logits).shape.clone();
        if ls.len() != 1 {
            return Err(Error::Dim(format!("cross_entropy expects 1-d logits, got {:?}", ls)));
        }
        let k = ls[0];
        if label >= k {
            return Err(Error::Domain(format!("label {} out of range for {} classes", label, k)));
        }
        let ld = &self.nodes[logits.0].tensor.data;
        let m = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = ld.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = z.ln() + m - ld[label];
        let t = Tensor::scalar(loss);
        Ok(self.push(t, Op::CrossEntropy { logits, label, probs }))
    }

    /// Mean squared difference; scalar. Scale by `numel` for the
    /// sum-of-squares convention.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Dim(format!(
                "mse shape mismatch: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let ad = &self.nodes[a.0].tensor.data;
        let bd = &self.nodes[b.0].tensor.data;
        let n = ad.len() as f64;
        let s: f64 = ad.iter().zip(bd).map(|(x, y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / n);
        Ok(self.push(t, Op::Mse { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Dim(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .tensor
            .data
            .iter()
            .zip(&self.nodes[b.0].tensor.data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data, requires_grad: false, grad: None };
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.nodes[a.0].tensor.data.iter().map(|&v| v * s).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::Scale { a, s })
    }

    /// `out = Σ_t weights[t] · stack[t]` where `stack` is `[T, rest…]` and
    /// `weights` is `[T]`. Output shape is `rest…`.
    pub fn weighted_sum(&mut self, weights: NodeId, stack: NodeId) -> Result<NodeId> {
        let ws = self.value(weights).shape.clone();
        let ss = self.value(stack).shape.clone();
        if ws.len() != 1 || ss.is_empty() || ws[0] != ss[0] {
            return Err(Error::Dim(format!(
                "weighted_sum expects weights [T] and stack [T, ...], got {:?} and {:?}",
                ws, ss
            )));
        }
        if ss[0] == 0 {
            return Err(Error::Domain("weighted_sum over an empty stack".into()));
        }
        let t_len = ss[0];
        let rest: usize = ss[1..].iter().product();
        let wd = &self.nodes[weights.0].tensor.data;
        let sd = &self.nodes[stack.0].tensor.data;
        let mut out = vec![0.0; rest];
        for t in 0..t_len {
            let wt = wd[t];
            let slice = &sd[t * rest..(t + 1) * rest];
            for (o, v) in out.iter_mut().zip(slice) {
                *o += wt * v;
            }
        }
        let out_shape = if ss.len() == 1 { vec![1] } else { ss[1..].to_vec() };
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::WeightedSum { weights, stack }))
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.value(x).shape.clone();
        if axis >= xs.len() {
            return Err(Error::Dim(format!("sum_axis axis {} out of range for {:?}", axis, xs)));
        }
        let (outer, len, inner) = axis_split(&xs, axis);
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[row + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = xs.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::SumAxis { x, axis }))
    }

    /// Index remap: `out[i] = x[map[i]]`, zero where the map is `None`.
    pub fn gather(&mut self, x: NodeId, map: Vec<Option<usize>>, out_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() {
            return Err(Error::Dim(format!(
                "gather map length {} does not match output shape {:?}",
                map.len(),
                out_shape
            )));
        }
        let n = self.value(x).numel();
        if let Some(bad) = map.iter().flatten().find(|&&j| j >= n) {
            return Err(Error::Dim(format!("gather index {} out of range for {} elements", bad, n)));
        }
        let xd = &self.nodes[x.0].tensor.data;
        let data: Vec<f64> = map.iter().map(|m| m.map_or(0.0, |j| xd[j])).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Gather { x, map }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` node with ∂root/∂node.
    /// Existing gradients are zeroed first; see [`backward_accumulate`]
    /// for the accumulating variant.
    ///
    /// [`backward_accumulate`]: GradGraph::backward_accumulate
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        self.backward_accumulate(root)
    }

    /// Like [`backward`](GradGraph::backward) but adds onto any gradients
    /// already present.
    pub fn backward_accumulate(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].tensor.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].tensor.shape
            )));
        }
        // Upstream gradients live in a scratch vector so that node.grad only
        // ever holds ∂root/∂node for nodes the caller asked to track.
        let n = self.nodes.len();
        let mut up: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        up[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let Some(g) = up[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &g, &mut up)?;
            let entry = &mut self.nodes[i].tensor;
            match &mut entry.grad {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                None => entry.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, node: usize, g: &[f64], up: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].tensor.requires_grad;
        let send = |id: NodeId, delta: Vec<f64>, up: &mut [Option<Vec<f64>>]| {
            match &mut up[id.0] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&delta) {
                        *a += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias, stride, pad } => {
                let xs = &self.nodes[x.0].tensor.shape;
                let ks = &self.nodes[kernel.0].tensor.shape;
                let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let os = &self.nodes[node].tensor.shape;
                let (oh, ow) = (os[2], os[3]);
                let xd = &self.nodes[x.0].tensor.data;
                let kd = &self.nodes[kernel.0].tensor.data;
                let want_x = needs(*x);
                let want_k = needs(*kernel);
                let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
                let mut gk = if want_k { vec![0.0; kd.len()] } else { Vec::new() };
                let geom = ConvGeom { cin, h, w, kh, kw, oh, ow, stride: *stride, pad: *pad };
                for ni in 0..n {
                    for oc in 0..cout {
                        let obase = ((ni * cout + oc) * oh) * ow;
                        for ic in 0..cin {
                            let xbase = ((ni * cin + ic) * h) * w;
                            let kbase = ((oc * cin + ic) * kh) * kw;
                            geom.for_each_row(|oy, ky, iy, kx, ox_lo, ox_hi| {
                                let orow = obase + oy * ow;
                                let xrow = xbase + iy * w;
                                let xoff = (ox_lo * stride + kx) - pad;
                                let gs = &g[orow + ox_lo..orow + ox_hi];
                                if want_x {
                                    let k = kd[kbase + ky * kw + kx];
                                    if k != 0.0 {
                                        if *stride == 1 {
                                            let dst = &mut gx[xrow + xoff..xrow + xoff + gs.len()];
                                            for (d, go) in dst.iter_mut().zip(gs) {
                                                *d += k * go;
                                            }
                                        } else {
                                            for (i, go) in gs.iter().enumerate() {
                                                gx[xrow + ((ox_lo + i) * stride + kx) - pad] += k * go;
                                            }
                                        }
                                    }
                                }
                                if want_k {
                                    let mut acc = 0.0;
                                    if *stride == 1 {
                                        let xs = &xd[xrow + xoff..xrow + xoff + gs.len()];
                                        for (go, xv) in gs.iter().zip(xs) {
                                            acc += go * xv;
                                        }
                                    } else {
                                        for (i, go) in gs.iter().enumerate() {
                                            acc += go * xd[xrow + ((ox_lo + i) * stride + kx) - pad];
                                        }
                                    }
                                    gk[kbase + ky * kw + kx] += acc;
                                }
                            });
                        }
                    }
                }
                if want_x {
                    send(*x, gx, up);
                }
                if want_k {
                    send(*kernel, gk, up);
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let mut gb = vec![0.0; cout];
                        for ni in 0..n {
                            for oc in 0..cout {
                                let base = ((ni * cout + oc) * oh) * ow;
                                gb[oc] += g[base..base + oh * ow].iter().sum::<f64>();
                            }
                        }
                        send(*b, gb, up);
                    }
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let xd = &self.nodes[x.0].tensor.data;
                    let gx = g.iter().zip(xd).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect();
                    send(*x, gx, up);
                }
            }
            Op::Linear { x, weight, bias } => {
                let ws = &self.nodes[weight.0].tensor.shape;
                let (k, d) = (ws[0], ws[1]);
                let xd = &self.nodes[x.0].tensor.data;
                let wd = &self.nodes[weight.0].tensor.data;
                if needs(*x) {
                    let mut gx = vec![0.0; d];
                    for r in 0..k {
                        for j in 0..d {
                            gx[j] += g[r] * wd[r * d + j];
                        }
                    }
                    send(*x, gx, up);
                }
                if needs(*weight) {
                    let mut gw = vec![0.0; k * d];
                    for r in 0..k {
                        for j in 0..d {
                            gw[r * d + j] = g[r] * xd[j];
                        }
                    }
                    send(*weight, gw, up);
                }
                if needs(*bias) {
                    send(*bias, g.to_vec(), up);
                }
            }
            Op::GlobalAvgPool { x } => {
                if needs(*x) {
                    let xs = &self.nodes[x.0].tensor.shape;
                    let (h, w) = (xs[2], xs[3]);
                    let area = (h * w) as f64;
                    let mut gx = vec![0.0; self.nodes[x.0].tensor.numel()];
                    for i in 0..g.len() {
                        let gv = g[i] / area;
                        for p in 0..h * w {
                            gx[i * h * w + p] = gv;
                        }
                    }
                    send(*x, gx, up);
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let shape = &self.nodes[node].tensor.shape;
                    let s = &self.nodes[node].tensor.data;
                    let (outer, len, inner) = axis_split(shape, *axis);
                    let mut gx = vec![0.0; s.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let mut dot = 0.0;
                            for a in 0..len {
                                dot += g[idx(a)] * s[idx(a)];
                            }
                            for a in 0..len {
                                gx[idx(a)] = s[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                    send(*x, gx, up);
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if needs(*logits) {
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    gl[*label] -= g[0];
                    send(*logits, gl, up);
                }
            }
            Op::Mse { a, b } => {
                let ad = &self.nodes[a.0].tensor.data;
                let bd = &self.nodes[b.0].tensor.data;
                let n = ad.len() as f64;
                if needs(*a) {
                    let ga = ad.iter().zip(bd).map(|(x, y)| 2.0 * (x - y) / n * g[0]).collect();
                    send(*a, ga, up);
                }
                if needs(*b) {
                    let gb = ad.iter().zip(bd).map(|(x, y)| -2.0 * (x - y) / n * g[0]).collect();
                    send(*b, gb, up);
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    send(*a, g.to_vec(), up);
                }
                if needs(*b) {
                    send(*b, g.to_vec(), up);
                }
            }
            Op::Scale { a, s } => {
                if needs(*a) {
                    send(*a, g.iter().map(|v| v * s).collect(), up);
                }
            }
            Op::WeightedSum { weights, stack } => {
                let wd = &self.nodes[weights.0].tensor.data;
                let sd = &self.nodes[stack.0].tensor.data;
                let t_len = wd.len();
                let rest = g.len();
                if needs(*weights) {
                    let mut gw = vec![0.0; t_len];
                    for t in 0..t_len {
                        let slice = &sd[t * rest..(t + 1) * rest];
                        gw[t] = g.iter().zip(slice).map(|(gv, v)| gv * v).sum();
                    }
                    send(*weights, gw, up);
                }
                if needs(*stack) {
                    let mut gs = vec![0.0; sd.len()];
                    for t in 0..t_len {
                        let wt = wd[t];
                        for (o, gv) in gs[t * rest..(t + 1) * rest].iter_mut().zip(g) {
                            *o = wt * gv;
                        }
                    }
                    send(*stack, gs, up);
                }
            }
            Op::SumAxis { x, axis } => {
                if needs(*x) {
                    let xs = &self.nodes[x.0].tensor.shape;
                    let (outer, len, inner) = axis_split(xs, *axis);
                    let mut gx = vec![0.0; self.nodes[x.0].tensor.numel()];
                    for o in 0..outer {
                        for a in 0..len {
                            let row = (o * len + a) * inner;
                            for i in 0..inner {
                                gx[row + i] = g[o * inner + i];
                            }
                        }
                    }
                    send(*x, gx, up);
                }
            }
            Op::Gather { x, map } => {
                if needs(*x) {
                    let mut gx = vec![0.0; self.nodes[x.0].tensor.numel()];
                    for (i, m) in map.iter().enumerate() {
                        if let Some(j) = m {
                            gx[*j] += g[i];
                        }
                    }
                    send(*x, gx, up);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu { .. } => "relu",
        Op::Linear { .. } => "linear",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::Softmax { .. } => "softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Mse { .. } => "mse",
        Op::Add { .. } => "add",
        Op::Scale { .. } => "scale",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::SumAxis { .. } => "sum_axis",
        Op::Gather { .. } => "gather",
    }
}

/// Loop geometry shared by the convolution forward and backward passes:
/// enumerates the (output row, kernel row, input row, kernel column, valid
/// output column range) tuples with padding already resolved, so the hot
/// loops run over contiguous slices without bounds branches.
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    #[inline]
    fn for_each_row<F: FnMut(usize, usize, usize, usize, usize, usize)>(&self, mut f: F) {
        let _ = self.cin;
        for ky in 0..self.kh {
            for oy in 0..self.oh {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for kx in 0..self.kw {
                    // valid ox: 0 <= ox*stride + kx - pad < w
                    let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
                    let hi = ((self.w + self.pad - kx).div_ceil(self.stride)).min(self.ow);
                    if lo >= hi {
                        continue;
                    }
                    f(oy, ky, iy as usize, kx, lo, hi);
                }
            }
        }
    }
}

/// Split a shape at `axis` into (outer, axis length, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Central finite-difference check of ∂root/∂leaf.
///
/// `build` receives a fresh graph plus the leaf node and must return the
/// scalar root. The closure is evaluated twice up front; if the two forward
/// values differ bit-for-bit the closure is non-deterministic and the check
/// refuses to run. Per-element error is |analytic − numeric| relative to
/// max(|analytic|, |numeric|, 1e-2).
pub fn finite_difference_check<F>(build: F, leaf_init: &Tensor, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut GradGraph, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Domain("finite-difference step h must be positive".into()));
    }
    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = GradGraph::new();
        let t = Tensor::new(leaf_init.shape.clone(), data.to_vec())?.with_grad();
        let leaf = g.leaf(t);
        let root = build(&mut g, leaf)?;
        Ok(g.scalar_value(root))
    };

    let f0 = eval(&leaf_init.data)?;
    let f1 = eval(&leaf_init.data)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Contract(
            "graph builder is non-deterministic: double evaluation mismatch".into(),
        ));
    }

    let analytic = {
        let mut g = GradGraph::new();
        let t = Tensor::new(leaf_init.shape.clone(), leaf_init.data.clone())?.with_grad();
        let leaf = g.leaf(t);
        let root = build(&mut g, leaf)?;
        g.backward(root)?;
        g.grad(leaf)
            .ok_or_else(|| Error::Contract("leaf did not receive a gradient".into()))?
            .to_vec()
    };

    let mut max_rel = 0.0f64;
    let mut data = leaf_init.data.clone();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let fp = eval(&data)?;
        data[i] = orig - h;
        let fm = eval(&data)?;
        data[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-2);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(FdReport { max_rel_err: max_rel, pass: max_rel <= tol })
}
