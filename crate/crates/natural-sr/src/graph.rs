//! Reverse-mode autodiff on an eager tape.
//!
//! Every builder method computes its value immediately and records an
//! operation node; [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! differentiable leaf. Named trainable leaves collect into a per-parameter
//! gradient map.
//!
//! Determinism: each output element of every op is accumulated by a single
//! thread in a fixed order, so results are bitwise reproducible for any
//! thread count.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// (top, bottom, left, right) spatial padding amounts.
pub type PadSpec = [usize; 4];

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// Elementwise `a - s` where `s` is a single-element node.
    SubScalar(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    Abs(NodeId),
    MeanAll(NodeId),
    Pad(NodeId, PadMode, PadSpec),
    ConvValid {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    BiasAdd(NodeId, NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    DepthToSpace(NodeId, usize),
    SpaceToDepth(NodeId, usize),
    ConcatC(Vec<NodeId>),
    SliceBatch(NodeId, usize, usize),
    Reshape(NodeId),
    /// Weight divided by its estimated top singular value; `u`, `v` are the
    /// power-iteration vectors captured at forward time and treated as
    /// constants by the backward pass.
    SpectralNorm {
        w: NodeId,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    param: Option<String>,
}

pub struct Tape {
    nodes: Vec<Node>,
    threads: usize,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

const SN_EPS: f64 = 1e-12;

impl Tape {
    pub fn new(threads: usize) -> Tape {
        Tape { nodes: Vec::new(), threads: threads.max(1) }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad, param: None });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Unnamed differentiable leaf (used by gradient checks).
    pub fn var(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Named parameter leaf. Gradients accumulate under `name` only when
    /// `trainable` is set; frozen parameters still carry values forward.
    pub fn param(&mut self, name: &str, t: Tensor, trainable: bool) -> NodeId {
        let id = self.push(Op::Leaf, t, trainable);
        self.nodes[id].param = Some(name.to_string());
        id
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.nodes[a].value.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.nodes[a].value.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.nodes[a].value.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.map(|v| v * c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.map(|v| v + c);
        let ng = self.needs(a);
        self.push(Op::AddConst(a), value, ng)
    }

    /// Broadcast-subtracts single-element node `s` from every element of `a`.
    pub fn sub_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].value.numel() != 1 {
            return Err(Error::shape(
                "sub_scalar",
                format!("rhs has {} elements, expected 1", self.nodes[s].value.numel()),
            ));
        }
        let sv = self.nodes[s].value.data()[0];
        let value = self.nodes[a].value.map(|v| v - sv);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(Op::SubScalar(a, s), value, ng))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), value, ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::ln);
        let ng = self.needs(a);
        self.push(Op::Ln(a), value, ng)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[a].value.map(|v| v.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(Op::Clamp(a, lo, hi), value, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::abs);
        let ng = self.needs(a);
        self.push(Op::Abs(a), value, ng)
    }

    /// Mean over all elements, producing a single-element tensor.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.nodes[a].value.mean());
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), value, ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[a].value.reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, ng))
    }

    // ── Spatial ops ─────────────────────────────────────────────────────

    pub fn pad(&mut self, a: NodeId, mode: PadMode, pad: PadSpec) -> Result<NodeId> {
        let (b, h, w, c) = self.nodes[a].value.dims4("pad")?;
        let [pt, pb, pl, pr] = pad;
        if mode == PadMode::Reflect && (pt >= h || pb >= h || pl >= w || pr >= w) {
            return Err(Error::shape(
                "pad",
                format!("reflect pad {:?} too large for {}x{}", pad, h, w),
            ));
        }
        let (oh, ow) = (h + pt + pb, w + pl + pr);
        let mut out = Tensor::zeros(&[b, oh, ow, c]);
        let x = &self.nodes[a].value;
        for bi in 0..b {
            for oy in 0..oh {
                let sy = match mode {
                    PadMode::Zero => {
                        if oy < pt || oy >= pt + h {
                            continue;
                        }
                        oy - pt
                    }
                    PadMode::Reflect => reflect_index(oy as isize - pt as isize, h),
                };
                for ox in 0..ow {
                    let sx = match mode {
                        PadMode::Zero => {
                            if ox < pl || ox >= pl + w {
                                continue;
                            }
                            ox - pl
                        }
                        PadMode::Reflect => reflect_index(ox as isize - pl as isize, w),
                    };
                    for ch in 0..c {
                        *out.at4_mut(bi, oy, ox, ch) = x.at4(bi, sy, sx, ch);
                    }
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Pad(a, mode, pad), out, ng))
    }

    /// Valid cross-correlation: `x (b,h,w,cin)` with `w (kh,kw,cin,cout)`.
    /// Output spatial extent is `floor((extent - k) / stride) + 1`.
    pub fn conv2d_valid(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (b, h, wd, cin) = self.nodes[x].value.dims4("conv2d")?;
        let ws = self.nodes[w].value.shape();
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight rank {} != 4", ws.len())));
        }
        let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", cin, wcin),
            ));
        }
        if kh > h || kw > wd {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than input {}x{}", kh, kw, h, wd),
            ));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, oh, ow, cout]);
        {
            let xv = self.nodes[x].value.data();
            let wv = self.nodes[w].value.data();
            let row = ow * cout;
            for_each_chunk(out.data_mut(), row, self.threads, |chunk, orow| {
                let (bi, oy) = (chunk / oh, chunk % oh);
                for ox in 0..ow {
                    let acc = &mut orow[ox * cout..(ox + 1) * cout];
                    for ky in 0..kh {
                        let iy = oy * stride + ky;
                        for kx in 0..kw {
                            let ix = ox * stride + kx;
                            let xoff = ((bi * h + iy) * wd + ix) * cin;
                            let woff = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let xval = xv[xoff + ci];
                                let wrow = &wv[woff + ci * cout..woff + (ci + 1) * cout];
                                for (o, wv_) in acc.iter_mut().zip(wrow) {
                                    *o += xval * wv_;
                                }
                            }
                        }
                    }
                }
            });
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::ConvValid { x, w, stride }, out, ng))
    }

    /// Adds per-channel bias `b (cout)` to `x (b,h,w,cout)`.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (b, h, w, c) = self.nodes[x].value.dims4("bias_add")?;
        if self.nodes[bias].value.shape() != [c] {
            return Err(Error::shape(
                "bias_add",
                format!("bias shape {:?}, expected [{}]", self.nodes[bias].value.shape(), c),
            ));
        }
        let mut out = self.nodes[x].value.clone();
        {
            let bv = self.nodes[bias].value.data().to_vec();
            let data = out.data_mut();
            for i in 0..b * h * w {
                for (o, bvv) in data[i * c..(i + 1) * c].iter_mut().zip(&bv) {
                    *o += bvv;
                }
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::BiasAdd(x, bias), out, ng))
    }

    /// Convolution with padding policy and bias: the composition used by
    /// every network layer.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        mode: PadMode,
        pad: PadSpec,
    ) -> Result<NodeId> {
        let padded = if pad == [0, 0, 0, 0] { x } else { self.pad(x, mode, pad)? };
        let conv = self.conv2d_valid(padded, w, stride)?;
        match bias {
            Some(b) => self.bias_add(conv, b),
            None => Ok(conv),
        }
    }

    /// 'same' padding amounts for kernel `k`: total `k - 1`, split with the
    /// extra sample on the trailing edge.
    pub fn same_pad(kh: usize, kw: usize) -> PadSpec {
        [(kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2]
    }

    /// 2x2 max pooling with stride 2. Requires even spatial extents.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, h, w, c) = self.nodes[x].value.dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("odd spatial extent {}x{}", h, w)));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, oh, ow, c]);
        let mut argmax = vec![0usize; b * oh * ow * c];
        {
            let xv = &self.nodes[x].value;
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                                    let v = xv.at4(bi, iy, ix, ch);
                                    if v > best {
                                        best = v;
                                        best_idx = ((bi * h + iy) * w + ix) * c + ch;
                                    }
                                }
                            }
                            *out.at4_mut(bi, oy, ox, ch) = best;
                            argmax[((bi * oh + oy) * ow + ox) * c + ch] = best_idx;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::MaxPool2 { x, argmax }, out, ng))
    }

    /// Mean over the spatial extent: `(b,h,w,c) -> (b,1,1,c)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, h, w, c) = self.nodes[x].value.dims4("global_avg_pool")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("global_avg_pool", "zero spatial extent".to_string()));
        }
        let mut out = Tensor::zeros(&[b, 1, 1, c]);
        let xv = &self.nodes[x].value;
        for bi in 0..b {
            for ch in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x_ in 0..w {
                        acc += xv.at4(bi, y, x_, ch);
                    }
                }
                *out.at4_mut(bi, 0, 0, ch) = acc / (h * w) as f64;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool(x), out, ng))
    }

    /// Rearranges channel blocks into space: `(b,h,w,c) -> (b,hk,wk,c/k^2)`.
    /// Channel-to-pixel order: output pixel `(dy, dx)` inside each `k x k`
    /// cell reads channel group `dy*k + dx`.
    pub fn depth_to_space(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (b, h, w, c) = self.nodes[x].value.dims4("depth_to_space")?;
        if k == 0 || c % (k * k) != 0 {
            return Err(Error::shape(
                "depth_to_space",
                format!("{} channels not divisible by {}^2", c, k),
            ));
        }
        let co = c / (k * k);
        let mut out = Tensor::zeros(&[b, h * k, w * k, co]);
        let xv = &self.nodes[x].value;
        for bi in 0..b {
            for y in 0..h {
                for x_ in 0..w {
                    for dy in 0..k {
                        for dx in 0..k {
                            for ch in 0..co {
                                *out.at4_mut(bi, y * k + dy, x_ * k + dx, ch) =
                                    xv.at4(bi, y, x_, (dy * k + dx) * co + ch);
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::DepthToSpace(x, k), out, ng))
    }

    /// Exact inverse of [`Tape::depth_to_space`].
    pub fn space_to_depth(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (b, h, w, c) = self.nodes[x].value.dims4("space_to_depth")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "space_to_depth",
                format!("{}x{} not divisible by {}", h, w, k),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = Tensor::zeros(&[b, oh, ow, c * k * k]);
        let xv = &self.nodes[x].value;
        for bi in 0..b {
            for y in 0..oh {
                for x_ in 0..ow {
                    for dy in 0..k {
                        for dx in 0..k {
                            for ch in 0..c {
                                *out.at4_mut(bi, y, x_, (dy * k + dx) * c + ch) =
                                    xv.at4(bi, y * k + dy, x_ * k + dx, ch);
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SpaceToDepth(x, k), out, ng))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape("concat_channels", "empty input list".to_string()));
        }
        let (b, h, w, _) = self.nodes[xs[0]].value.dims4("concat_channels")?;
        let mut c_total = 0;
        for &id in xs {
            let (bi, hi, wi, ci) = self.nodes[id].value.dims4("concat_channels")?;
            if (bi, hi, wi) != (b, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.nodes[id].value.shape(), (b, h, w)),
                ));
            }
            c_total += ci;
        }
        let mut out = Tensor::zeros(&[b, h, w, c_total]);
        {
            let od = out.data_mut();
            let pixels = b * h * w;
            let mut c_off = 0;
            for &id in xs {
                let xv = &self.nodes[id].value;
                let ci = xv.shape()[3];
                let xd = xv.data();
                for p in 0..pixels {
                    od[p * c_total + c_off..p * c_total + c_off + ci]
                        .copy_from_slice(&xd[p * ci..(p + 1) * ci]);
                }
                c_off += ci;
            }
        }
        let ng = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(Op::ConcatC(xs.to_vec()), out, ng))
    }

    /// Batch slice `[from, to)`.
    pub fn slice_batch(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (b, h, w, c) = self.nodes[x].value.dims4("slice_batch")?;
        if from >= to || to > b {
            return Err(Error::shape(
                "slice_batch",
                format!("range {}..{} out of batch {}", from, to, b),
            ));
        }
        let stride = h * w * c;
        let data = self.nodes[x].value.data()[from * stride..to * stride].to_vec();
        let value = Tensor::from_vec(&[to - from, h, w, c], data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::SliceBatch(x, from, to), value, ng))
    }

    /// Divides `w` by its top singular value, estimated with `iters` rounds
    /// of power iteration warm-started from `u` (updated in place). The
    /// backward pass treats the iteration vectors as constants. The weight
    /// is read as a matrix with one row per output channel (last axis).
    pub fn spectral_norm(&mut self, w: NodeId, u: &mut Vec<f64>, iters: usize) -> Result<NodeId> {
        let ws = self.nodes[w].value.shape().to_vec();
        if ws.is_empty() {
            return Err(Error::shape("spectral_norm", "scalar weight".to_string()));
        }
        let cout = *ws.last().unwrap();
        let k: usize = ws[..ws.len() - 1].iter().product();
        if cout == 0 || k == 0 {
            return Err(Error::shape("spectral_norm", format!("degenerate shape {:?}", ws)));
        }
        if u.len() != cout {
            return Err(Error::shape(
                "spectral_norm",
                format!("u has {} entries, weight has {} rows", u.len(), cout),
            ));
        }
        let wv = self.nodes[w].value.data();
        // M[r][c] = w[c*cout + r], rows = output channels.
        let mut v = vec![0.0; k];
        let mut un = u.clone();
        for _ in 0..iters.max(1) {
            // v = M^T u, normalized.
            for (c_, vc) in v.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (r, ur) in un.iter().enumerate() {
                    acc += wv[c_ * cout + r] * ur;
                }
                *vc = acc;
            }
            normalize(&mut v);
            // u = M v, normalized.
            for (r, ur) in un.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (c_, vc) in v.iter().enumerate() {
                    acc += wv[c_ * cout + r] * vc;
                }
                *ur = acc;
            }
            normalize(&mut un);
        }
        let mut sigma = 0.0;
        for (c_, vc) in v.iter().enumerate() {
            for (r, ur) in un.iter().enumerate() {
                sigma += ur * wv[c_ * cout + r] * vc;
            }
        }
        sigma = sigma.max(SN_EPS);
        u.clone_from(&un);
        let value = self.nodes[w].value.map(|x| x / sigma);
        let ng = self.needs(w);
        Ok(self.push(Op::SpectralNorm { w, u: un, v, sigma }, value, ng))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a single-element loss node. Returns per-node
    /// gradients; use [`Tape::param_grads`] for the named parameter map.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has {} elements, expected 1", self.nodes[loss].value.numel()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Sums gradients over trainable parameter leaves, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        let mut out: IndexMap<String, Tensor> = IndexMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let (Some(name), Some(g)) = (&node.param, grads.of(id)) else { continue };
            if !node.needs_grad {
                continue;
            }
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, &self.nodes[*b].value, |gv, bv| gv * bv);
                let gb = zip_map(g, &self.nodes[*a].value, |gv, av| gv * av);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddConst(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::SubScalar(a, s) => {
                self.accumulate(grads, *a, g.clone());
                let total: f64 = g.data().iter().sum();
                self.accumulate(grads, *s, Tensor::scalar(-total));
            }
            Op::Relu(a) => {
                let ga = zip_map(g, &self.nodes[*a].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(g, &self.nodes[id].value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = zip_map(g, &self.nodes[*a].value, |gv, x| gv / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga =
                    zip_map(g, &self.nodes[*a].value, |gv, x| if x > lo && x < hi { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = zip_map(g, &self.nodes[*a].value, |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.numel() as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *a, Tensor::filled(self.nodes[*a].value.shape(), gv));
            }
            Op::Reshape(a) => {
                let back = g.reshape(self.nodes[*a].value.shape()).expect("reshape backward");
                self.accumulate(grads, *a, back);
            }
            Op::Pad(a, mode, pad) => {
                let (b, h, w, c) = self.nodes[*a].value.dims4("pad_back").unwrap();
                let [pt, _, pl, _] = *pad;
                let (_, oh, ow, _) = self.nodes[id].value.dims4("pad_back").unwrap();
                let mut ga = Tensor::zeros(&[b, h, w, c]);
                for bi in 0..b {
                    for oy in 0..oh {
                        let sy = match mode {
                            PadMode::Zero => {
                                if oy < pt || oy >= pt + h {
                                    continue;
                                }
                                oy - pt
                            }
                            PadMode::Reflect => reflect_index(oy as isize - pt as isize, h),
                        };
                        for ox in 0..ow {
                            let sx = match mode {
                                PadMode::Zero => {
                                    if ox < pl || ox >= pl + w {
                                        continue;
                                    }
                                    ox - pl
                                }
                                PadMode::Reflect => reflect_index(ox as isize - pl as isize, w),
                            };
                            for ch in 0..c {
                                *ga.at4_mut(bi, sy, sx, ch) += g.at4(bi, oy, ox, ch);
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConvValid { x, w, stride } => {
                self.conv_backward(id, *x, *w, *stride, g, grads);
            }
            Op::BiasAdd(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let c = self.nodes[*bias].value.numel();
                    let mut gb = vec![0.0; c];
                    for (i, gv) in g.data().iter().enumerate() {
                        gb[i % c] += gv;
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(&[c], gb).unwrap());
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut ga = Tensor::zeros(self.nodes[*x].value.shape());
                for (i, &src) in argmax.iter().enumerate() {
                    ga.data_mut()[src] += g.data()[i];
                }
                self.accumulate(grads, *x, ga);
            }
            Op::GlobalAvgPool(x) => {
                let (b, h, w, c) = self.nodes[*x].value.dims4("gap_back").unwrap();
                let scale = 1.0 / (h * w) as f64;
                let mut ga = Tensor::zeros(&[b, h, w, c]);
                for bi in 0..b {
                    for ch in 0..c {
                        let gv = g.at4(bi, 0, 0, ch) * scale;
                        for y in 0..h {
                            for x_ in 0..w {
                                *ga.at4_mut(bi, y, x_, ch) = gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::DepthToSpace(x, k) => {
                let (b, h, w, c) = self.nodes[*x].value.dims4("d2s_back").unwrap();
                let k = *k;
                let co = c / (k * k);
                let mut ga = Tensor::zeros(&[b, h, w, c]);
                for bi in 0..b {
                    for y in 0..h {
                        for x_ in 0..w {
                            for dy in 0..k {
                                for dx in 0..k {
                                    for ch in 0..co {
                                        *ga.at4_mut(bi, y, x_, (dy * k + dx) * co + ch) =
                                            g.at4(bi, y * k + dy, x_ * k + dx, ch);
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::SpaceToDepth(x, k) => {
                let (b, h, w, c) = self.nodes[*x].value.dims4("s2d_back").unwrap();
                let k = *k;
                let mut ga = Tensor::zeros(&[b, h, w, c]);
                for bi in 0..b {
                    for y in 0..h / k {
                        for x_ in 0..w / k {
                            for dy in 0..k {
                                for dx in 0..k {
                                    for ch in 0..c {
                                        *ga.at4_mut(bi, y * k + dy, x_ * k + dx, ch) =
                                            g.at4(bi, y, x_, (dy * k + dx) * c + ch);
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::ConcatC(xs) => {
                let (b, h, w, c_total) = self.nodes[id].value.dims4("concat_back").unwrap();
                let pixels = b * h * w;
                let mut c_off = 0;
                for &xid in xs {
                    let ci = self.nodes[xid].value.shape()[3];
                    if self.needs(xid) {
                        let mut part = Tensor::zeros(self.nodes[xid].value.shape());
                        let pd = part.data_mut();
                        let gd = g.data();
                        for p in 0..pixels {
                            pd[p * ci..(p + 1) * ci].copy_from_slice(
                                &gd[p * c_total + c_off..p * c_total + c_off + ci],
                            );
                        }
                        self.accumulate(grads, xid, part);
                    }
                    c_off += ci;
                }
            }
            Op::SliceBatch(x, from, _to) => {
                let mut ga = Tensor::zeros(self.nodes[*x].value.shape());
                let stride: usize = self.nodes[*x].value.shape()[1..].iter().product();
                let off = from * stride;
                ga.data_mut()[off..off + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, ga);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // out = w / sigma with sigma = u^T M v and u, v constant:
                // dL/dw = g/sigma - (sum(g*w) / sigma^2) * (u v^T).
                let wv = self.nodes[*w].value.data();
                let cout = u.len();
                let dot: f64 = g.data().iter().zip(wv).map(|(a, b)| a * b).sum();
                let coef = dot / (sigma * sigma);
                let mut gw = Tensor::zeros(self.nodes[*w].value.shape());
                {
                    let gd = gw.data_mut();
                    for (i, gv) in g.data().iter().enumerate() {
                        let (c_, r) = (i / cout, i % cout);
                        gd[i] = gv / sigma - coef * u[r] * v[c_];
                    }
                }
                self.accumulate(grads, *w, gw);
            }
        }
    }

    fn conv_backward(
        &self,
        _out: NodeId,
        x: NodeId,
        w: NodeId,
        stride: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (b, h, wd, cin) = self.nodes[x].value.dims4("conv_back").unwrap();
        let ws = self.nodes[w].value.shape();
        let (kh, kw, _, cout) = (ws[0], ws[1], ws[2], ws[3]);
        let (_, oh, ow, _) = g.dims4("conv_back").unwrap();
        let gv = g.data();
        let wv = self.nodes[w].value.data();
        let xv = self.nodes[x].value.data();

        if self.needs(x) {
            let mut gx = Tensor::zeros(&[b, h, wd, cin]);
            let row = wd * cin;
            for_each_chunk(gx.data_mut(), row, self.threads, |chunk, xrow| {
                let (bi, iy) = (chunk / h, chunk % h);
                for ky in 0..kh {
                    if iy < ky || (iy - ky) % stride != 0 {
                        continue;
                    }
                    let oy = (iy - ky) / stride;
                    if oy >= oh {
                        continue;
                    }
                    for ox in 0..ow {
                        let goff = ((bi * oh + oy) * ow + ox) * cout;
                        let grow = &gv[goff..goff + cout];
                        for kx in 0..kw {
                            let ix = ox * stride + kx;
                            let woff = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let wrow = &wv[woff + ci * cout..woff + (ci + 1) * cout];
                                let mut acc = 0.0;
                                for (gvv, wvv) in grow.iter().zip(wrow) {
                                    acc += gvv * wvv;
                                }
                                xrow[ix * cin + ci] += acc;
                            }
                        }
                    }
                }
            });
            self.accumulate(grads, x, gx);
        }

        if self.needs(w) {
            let mut gw = Tensor::zeros(&[kh, kw, cin, cout]);
            let chunk_len = cin * cout;
            for_each_chunk(gw.data_mut(), chunk_len, self.threads, |chunk, wchunk| {
                let (ky, kx) = (chunk / kw, chunk % kw);
                for bi in 0..b {
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        for ox in 0..ow {
                            let ix = ox * stride + kx;
                            let xoff = ((bi * h + iy) * wd + ix) * cin;
                            let goff = ((bi * oh + oy) * ow + ox) * cout;
                            let grow = &gv[goff..goff + cout];
                            for ci in 0..cin {
                                let xval = xv[xoff + ci];
                                let wrow = &mut wchunk[ci * cout..(ci + 1) * cout];
                                for (wvv, gvv) in wrow.iter_mut().zip(grow) {
                                    *wvv += xval * gvv;
                                }
                            }
                        }
                    }
                }
            });
            self.accumulate(grads, w, gw);
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(SN_EPS);
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Mirror indexing without edge repetition: -1 -> 1, n -> n-2.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    let period = 2 * (n - 1).max(1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new(1);
        let x = tape.constant(t4(&[1, 3, 3, 2], (0..18).map(|v| v as f64).collect()));
        // 1x1 kernel with identity channel mixing.
        let w = tape.constant(t4(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d_valid(x, w, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (b, h, w, cin, cout, kh, kw, s) = (2, 7, 6, 3, 4, 3, 2, 2);
        let x: Vec<f64> = (0..b * h * w * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..kh * kw * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new(2);
        let xn = tape.constant(t4(&[b, h, w, cin], x.clone()));
        let wn = tape.constant(t4(&[kh, kw, cin, cout], wt.clone()));
        let y = tape.conv2d_valid(xn, wn, s).unwrap();
        let (oh, ow) = ((h - kh) / s + 1, (w - kw) / s + 1);
        assert_eq!(tape.value(y).shape(), &[b, oh, ow, cout]);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                for ci in 0..cin {
                                    acc += x[(((bi * h) + oy * s + ky) * w + ox * s + kx) * cin + ci]
                                        * wt[((ky * kw + kx) * cin + ci) * cout + co];
                                }
                            }
                        }
                        let got = tape.value(y).at4(bi, oy, ox, co);
                        assert!((acc - got).abs() < 1e-12, "{} vs {}", acc, got);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new(1);
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 3]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 2, 8]));
        assert!(tape.conv2d_valid(x, w, 1).is_err());
    }

    #[test]
    fn depth_to_space_order_and_inverse() {
        let mut tape = Tape::new(1);
        let x = tape.constant(t4(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.depth_to_space(x, 2).unwrap();
        // Channel g*k + dx fills pixel (dy, dx): row-major cell fill.
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 1]);
        let back = tape.space_to_depth(y, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn mul_backward_matches_product_rule() {
        let mut tape = Tape::new(1);
        let a = tape.var(t4(&[2], vec![2.0, -3.0]));
        let b = tape.var(t4(&[2], vec![5.0, 7.0]));
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.mean_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(a).unwrap().data(), &[2.5, 3.5]);
        assert_eq!(grads.of(b).unwrap().data(), &[1.0, -1.5]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::new(1);
        let x = tape.var(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        let grads = tape.backward(y).unwrap();
        assert!((grads.of(x).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new(1);
        let x = tape.var(Tensor::scalar(0.0));
        let y = tape.relu(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.of(x).unwrap().item(), 0.0);
    }

    #[test]
    fn gap_zero_extent_errors() {
        let mut tape = Tape::new(1);
        let x = tape.constant(Tensor::zeros(&[1, 0, 4, 2]));
        assert!(tape.global_avg_pool(x).is_err());
    }

    #[test]
    fn frozen_param_gets_no_grad_entry() {
        let mut tape = Tape::new(1);
        let p = tape.param("frozen.w", Tensor::scalar(2.0), false);
        let q = tape.param("live.w", Tensor::scalar(3.0), true);
        let y = tape.mul(p, q).unwrap();
        let grads = tape.backward(y).unwrap();
        let map = tape.param_grads(&grads);
        assert!(map.contains_key("live.w"));
        assert!(!map.contains_key("frozen.w"));
        assert_eq!(map["live.w"].item(), 2.0);
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 5), 3);
    }

    #[test]
    fn spectral_norm_unit_top_singular_value() {
        // diag(3, 1): normalized weight must have top singular value 1.
        let mut tape = Tape::new(1);
        let w = tape.var(t4(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]));
        let mut u = vec![1.0, 0.5];
        let y = tape.spectral_norm(w, &mut u, 16).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9, "normalized diag {:?}", d);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn same_pad_preserves_extent() {
        let mut tape = Tape::new(1);
        let x = tape.constant(Tensor::zeros(&[1, 8, 8, 3]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 3, 5]));
        let y = tape.conv2d(x, w, None, 1, PadMode::Zero, Tape::same_pad(3, 3)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, 8, 5]);
    }

    #[test]
    fn strided_same_conv_halves_extent() {
        let mut tape = Tape::new(1);
        let x = tape.constant(Tensor::zeros(&[1, 8, 8, 3]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 3, 5]));
        let y = tape.conv2d(x, w, None, 2, PadMode::Zero, Tape::same_pad(3, 3)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 4, 5]);
    }
}
