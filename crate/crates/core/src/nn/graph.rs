use std::collections::BTreeMap;
use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Sqr(NodeId),
    Abs(NodeId),
    Pelu { x: NodeId, p: NodeId },
    UpsampleNearest2x(NodeId),
    ResizeBilinear { x: NodeId },
    ConcatChannels(Vec<NodeId>),
    ConcatBatch(Vec<NodeId>),
    SelectBatch { x: NodeId, index: usize },
    SliceChannels { x: NodeId, start: usize },
    RepeatChannels { x: NodeId },
    MeanSpatial(NodeId),
    ScaleChannels { x: NodeId, s: NodeId },
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    AddRow { a: NodeId, b: NodeId },
    L2NormalizeRows { x: NodeId, eps: f32 },
    NchwToRows(NodeId),
    RowsToNchw(NodeId),
    GatherRows { x: NodeId, idx: Vec<usize> },
    TopK { x: NodeId, src: Vec<Option<usize>> },
    LogSoftmaxChannels(NodeId),
    SoftmaxChannels(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Which parameters a graph records gradients for.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    Nothing,
    /// Parameters whose name starts with one of the prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// A tape of tensor operations. Forward values are computed eagerly as ops are
/// recorded; [`Graph::backward`] walks the tape in reverse.
///
/// Shape errors are programming errors here and panic; domain code validates
/// shapes before building graphs.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    trainable: Trainable,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes[node.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// L2 norm of all gradients whose parameter name starts with `prefix`.
    pub fn norm_with_prefix(&self, store: &ParamStore, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(id, _)| store.name(**id).starts_with(prefix))
            .map(|(_, g)| g.sq_norm())
            .sum::<f64>()
            .sqrt()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Trainable::All)
    }
}

impl Graph {
    pub fn new(trainable: Trainable) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), trainable }
    }

    /// A graph that never records gradients for parameters.
    pub fn inference() -> Self {
        Self::new(Trainable::Nothing)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf input that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter once per graph; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let needs = self.trainable.allows(store.name(id));
        let n = self.push(store.value(id).clone(), Op::Param, needs);
        self.params.insert(id, n);
        n
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom) -> NodeId {
        let v = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::Conv2d { x, w, b, geom }, ng)
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: NodeId, k: f32) -> NodeId {
        let v = self.value(x).map(|v| v * k);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, k), ng)
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f32) -> NodeId {
        let v = self.value(x).map(|v| v + k);
        let ng = self.ng(x);
        self.push(v, Op::AddScalar(x), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f32::exp);
        let ng = self.ng(x);
        self.push(v, Op::Exp(x), ng)
    }

    pub fn sqr(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(v, Op::Sqr(x), ng)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f32::abs);
        let ng = self.ng(x);
        self.push(v, Op::Abs(x), ng)
    }

    /// Parametric exponential-linear unit with parameters `p = [a, b, c]`:
    /// `c * x` for `x >= 0`, `a * (exp(x / b) - 1)` otherwise.
    pub fn pelu(&mut self, x: NodeId, p: NodeId) -> NodeId {
        let pv = self.value(p).data().to_vec();
        assert_eq!(pv.len(), 3, "pelu expects three parameters");
        let (a, b, c) = (pv[0], pv[1], pv[2]);
        let v = self.value(x).map(|v| pelu(v, a, b, c));
        let ng = self.ng(x) || self.ng(p);
        self.push(v, Op::Pelu { x, p }, ng)
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * oh * ow];
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new([n, c, oh, ow], out), Op::UpsampleNearest2x(x), ng)
    }

    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let v = kernels::resize_bilinear_forward(self.value(x), oh, ow);
        let ng = self.ng(x);
        self.push(v, Op::ResizeBilinear { x }, ng)
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let mut cs = Vec::with_capacity(xs.len());
        for &x in xs {
            let (n2, c, h2, w2) = self.value(x).dims4();
            assert_eq!((n2, h2, w2), (n, h, w), "concat_channels shape mismatch");
            cs.push(c);
        }
        let ctot: usize = cs.iter().sum();
        let mut out = Vec::with_capacity(n * ctot * h * w);
        for ni in 0..n {
            for (&x, &c) in xs.iter().zip(&cs) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[ni * c * h * w..(ni + 1) * c * h * w]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::new([n, ctot, h, w], out), Op::ConcatChannels(xs.to_vec()), ng)
    }

    pub fn concat_batch(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let (_, c, h, w) = self.value(xs[0]).dims4();
        let mut ntot = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (n, c2, h2, w2) = self.value(x).dims4();
            assert_eq!((c2, h2, w2), (c, h, w), "concat_batch shape mismatch");
            ntot += n;
            out.extend_from_slice(self.value(x).data());
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::new([ntot, c, h, w], out), Op::ConcatBatch(xs.to_vec()), ng)
    }

    pub fn select_batch(&mut self, x: NodeId, index: usize) -> NodeId {
        let v = self.value(x).batch_item(index);
        let ng = self.ng(x);
        self.push(v, Op::SelectBatch { x, index }, ng)
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        assert!(start + len <= c, "slice_channels out of range");
        let mut out = Vec::with_capacity(n * len * h * w);
        for ni in 0..n {
            let s = (ni * c + start) * h * w;
            out.extend_from_slice(&t.data()[s..s + len * h * w]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new([n, len, h, w], out), Op::SliceChannels { x, start }, ng)
    }

    /// Repeats a single-channel map `times` times along the channel axis.
    pub fn repeat_channels(&mut self, x: NodeId, times: usize) -> NodeId {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        assert_eq!(c, 1, "repeat_channels expects one channel");
        let mut out = Vec::with_capacity(n * times * h * w);
        for ni in 0..n {
            for _ in 0..times {
                out.extend_from_slice(t.plane(ni, 0));
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new([n, times, h, w], out), Op::RepeatChannels { x }, ng)
    }

    /// Spatial average per channel: `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let hw = (h * w) as f32;
        let out = (0..n * c)
            .map(|p| t.data()[p * h * w..(p + 1) * h * w].iter().sum::<f32>() / hw)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new([n, c], out), Op::MeanSpatial(x), ng)
    }

    /// Multiplies every channel plane by a per-(batch, channel) factor `s: [N, C]`.
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (t, sv) = (self.value(x), self.value(s));
        let (n, c, h, w) = t.dims4();
        assert_eq!(sv.shape(), &[n, c], "scale_channels factor shape");
        let hw = h * w;
        let mut out = t.data().to_vec();
        for p in 0..n * c {
            let k = sv.data()[p];
            for v in &mut out[p * hw..(p + 1) * hw] {
                *v *= k;
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(Tensor::new([n, c, h, w], out), Op::ScaleChannels { x, s }, ng)
    }

    /// `a[M, K] * b[K, N]`, or `a * b^T` for `b: [N, K]` when `transpose_b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (n, bs) = if transpose_b {
            let (n, k2) = tb.dims2();
            assert_eq!(k, k2, "matmul inner dimension");
            (n, (1isize, k as isize))
        } else {
            let (k2, n) = tb.dims2();
            assert_eq!(k, k2, "matmul inner dimension");
            (n, (n as isize, 1isize))
        };
        let mut out = vec![0.0f32; m * n];
        kernels::gemm(m, k, n, ta.data(), (k as isize, 1), tb.data(), bs, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new([m, n], out), Op::MatMul { a, b, transpose_b }, ng)
    }

    /// Adds a row vector `b: [N]` to every row of `a: [M, N]`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2();
        assert_eq!(tb.numel(), n, "add_row width");
        let mut out = ta.data().to_vec();
        for r in 0..m {
            for (v, bb) in out[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *v += bb;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new([m, n], out), Op::AddRow { a, b }, ng)
    }

    /// Row-wise `x / (||x|| + eps)`.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f32) -> NodeId {
        let t = self.value(x);
        let (m, c) = t.dims2();
        let mut out = t.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * c..(r + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            let d = norm + eps;
            for v in row {
                *v /= d;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new([m, c], out), Op::L2NormalizeRows { x, eps }, ng)
    }

    /// `[N, C, H, W] -> [N*H*W, C]`, one row per pixel.
    pub fn nchw_to_rows(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let hw = h * w;
        let mut out = vec![0.0f32; n * hw * c];
        for ni in 0..n {
            for ci in 0..c {
                let plane = t.plane(ni, ci);
                for (p, &v) in plane.iter().enumerate() {
                    out[(ni * hw + p) * c + ci] = v;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new([n * hw, c], out), Op::NchwToRows(x), ng)
    }

    /// Inverse of [`Graph::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: NodeId, n: usize, h: usize, w: usize) -> NodeId {
        let t = self.value(x);
        let (m, c) = t.dims2();
        assert_eq!(m, n * h * w, "rows_to_nchw row count");
        let hw = h * w;
        let mut out = vec![0.0f32; n * c * hw];
        for ni in 0..n {
            for p in 0..hw {
                for ci in 0..c {
                    out[(ni * c + ci) * hw + p] = t.data()[(ni * hw + p) * c + ci];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new([n, c, h, w], out), Op::RowsToNchw(x), ng)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let t = self.value(x);
        let (m, c) = t.dims2();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < m, "gather_rows index out of range");
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new([idx.len(), c], out), Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    /// Per row, the `k` largest values in descending order. Rows shorter than
    /// `k` are padded with `pad` (which receives no gradient).
    pub fn topk_desc(&mut self, x: NodeId, k: usize, pad: f32) -> NodeId {
        let t = self.value(x);
        let (m, p) = t.dims2();
        let mut out = Vec::with_capacity(m * k);
        let mut src = Vec::with_capacity(m * k);
        let mut order: Vec<usize> = Vec::with_capacity(p);
        for r in 0..m {
            let row = &t.data()[r * p..(r + 1) * p];
            order.clear();
            order.extend(0..p);
            // Stable sort keeps equal values in index order, so results do not
            // depend on anything but the values.
            order.sort_by(|&i, &j| row[j].total_cmp(&row[i]));
            for slot in 0..k {
                match order.get(slot) {
                    Some(&j) => {
                        out.push(row[j]);
                        src.push(Some(r * p + j));
                    }
                    None => {
                        out.push(pad);
                        src.push(None);
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new([m, k], out), Op::TopK { x, src }, ng)
    }

    pub fn log_softmax_channels(&mut self, x: NodeId) -> NodeId {
        let v = channel_softmax(self.value(x), true);
        let ng = self.ng(x);
        self.push(v, Op::LogSoftmaxChannels(x), ng)
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let v = channel_softmax(self.value(x), false);
        let ng = self.ng(x);
        self.push(v, Op::SoftmaxChannels(x), ng)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum() as f32;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let s = (t.sum() / t.numel() as f64) as f32;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).clone().reshape(shape.to_vec());
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (&pid, &nid) in &self.params {
            if let Some(g) = grads[nid.0].as_ref() {
                params.insert(pid, g.clone());
            }
        }
        Gradients { nodes: grads, params }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geom,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_if(grads, *a, || elementwise(g, vb, |g, y| g * y));
                self.acc_if(grads, *b, || elementwise(g, va, |g, x| g * x));
            }
            Op::Scale(x, k) => self.acc_if(grads, *x, || g.map(|v| v * k)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc_if(grads, *x, || g.clone().reshape(shape));
            }
            Op::Relu(x) => self.acc_if(grads, *x, || elementwise(g, out, |g, y| if y > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(x) => self.acc_if(grads, *x, || elementwise(g, out, |g, y| g * y * (1.0 - y))),
            Op::Exp(x) => self.acc_if(grads, *x, || elementwise(g, out, |g, y| g * y)),
            Op::Sqr(x) => self.acc_if(grads, *x, || elementwise(g, self.value(*x), |g, v| 2.0 * g * v)),
            Op::Abs(x) => self.acc_if(grads, *x, || {
                elementwise(g, self.value(*x), |g, v| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 })
            }),
            Op::Pelu { x, p } => {
                let pv = self.value(*p).data();
                let (a, b, c) = (pv[0], pv[1], pv[2]);
                let xv = self.value(*x);
                self.acc_if(grads, *x, || {
                    elementwise(g, xv, |g, v| if v >= 0.0 { g * c } else { g * a * (v / b).exp() / b })
                });
                if self.ng(*p) {
                    let (mut da, mut db, mut dc) = (0.0f64, 0.0f64, 0.0f64);
                    for (&gv, &v) in g.data().iter().zip(xv.data()) {
                        if v >= 0.0 {
                            dc += (gv * v) as f64;
                        } else {
                            let e = (v / b).exp();
                            da += (gv * (e - 1.0)) as f64;
                            db += (gv * (-a * e * v / (b * b))) as f64;
                        }
                    }
                    accumulate(grads, *p, Tensor::new([3], vec![da as f32, db as f32, dc as f32]));
                }
            }
            Op::UpsampleNearest2x(x) => self.acc_if(grads, *x, || {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    let gs = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let ds = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            ds[(y / 2) * w + xx / 2] += gs[y * ow + xx];
                        }
                    }
                }
                Tensor::new([n, c, h, w], d)
            }),
            Op::ResizeBilinear { x } => self.acc_if(grads, *x, || {
                let (_, _, h, w) = self.value(*x).dims4();
                kernels::resize_bilinear_backward(g, h, w)
            }),
            Op::ConcatChannels(xs) => {
                let (n, ctot, h, w) = g.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).dims4().1;
                    if self.ng(x) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for ni in 0..n {
                            let s = (ni * ctot + offset) * hw;
                            d.extend_from_slice(&g.data()[s..s + c * hw]);
                        }
                        accumulate(grads, x, Tensor::new([n, c, h, w], d));
                    }
                    offset += c;
                }
            }
            Op::ConcatBatch(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    if self.ng(x) {
                        let d = g.data()[offset..offset + len].to_vec();
                        accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), d));
                    }
                    offset += len;
                }
            }
            Op::SelectBatch { x, index } => self.acc_if(grads, *x, || {
                let shape = self.value(*x).shape().to_vec();
                let mut d = Tensor::zeros(shape);
                let len = g.numel();
                d.data_mut()[index * len..(index + 1) * len].copy_from_slice(g.data());
                d
            }),
            Op::SliceChannels { x, start } => self.acc_if(grads, *x, || {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = g.dims4().1;
                let mut d = Tensor::zeros([n, c, h, w]);
                for ni in 0..n {
                    let s = (ni * c + start) * h * w;
                    let gs = ni * len * h * w;
                    d.data_mut()[s..s + len * h * w].copy_from_slice(&g.data()[gs..gs + len * h * w]);
                }
                d
            }),
            Op::RepeatChannels { x } => self.acc_if(grads, *x, || {
                let (n, times, h, w) = g.dims4();
                let mut d = vec![0.0f32; n * h * w];
                for ni in 0..n {
                    for t in 0..times {
                        for (dv, gv) in d[ni * h * w..(ni + 1) * h * w].iter_mut().zip(g.plane(ni, t)) {
                            *dv += gv;
                        }
                    }
                }
                Tensor::new([n, 1, h, w], d)
            }),
            Op::MeanSpatial(x) => self.acc_if(grads, *x, || {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut d = vec![0.0f32; n * c * hw];
                for p in 0..n * c {
                    let v = g.data()[p] / hw as f32;
                    d[p * hw..(p + 1) * hw].fill(v);
                }
                Tensor::new([n, c, h, w], d)
            }),
            Op::ScaleChannels { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                self.acc_if(grads, *x, || {
                    let mut d = g.data().to_vec();
                    for p in 0..n * c {
                        let k = sv.data()[p];
                        for v in &mut d[p * hw..(p + 1) * hw] {
                            *v *= k;
                        }
                    }
                    Tensor::new([n, c, h, w], d)
                });
                self.acc_if(grads, *s, || {
                    let d = (0..n * c)
                        .map(|p| {
                            g.data()[p * hw..(p + 1) * hw]
                                .iter()
                                .zip(&xv.data()[p * hw..(p + 1) * hw])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    Tensor::new([n, c], d)
                });
            }
            Op::MatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = g.dims2().1;
                self.acc_if(grads, *a, || {
                    // da[m, k] = g[m, n] * b^T, where b^T is [n, k]
                    let bs = if *transpose_b { (k as isize, 1) } else { (1, n as isize) };
                    let mut d = vec![0.0f32; m * k];
                    kernels::gemm(m, n, k, g.data(), (n as isize, 1), tb.data(), bs, 0.0, &mut d);
                    Tensor::new([m, k], d)
                });
                self.acc_if(grads, *b, || {
                    if *transpose_b {
                        // db[n, k] = g^T[n, m] * a[m, k]
                        let mut d = vec![0.0f32; n * k];
                        kernels::gemm(n, m, k, g.data(), (1, n as isize), ta.data(), (k as isize, 1), 0.0, &mut d);
                        Tensor::new([n, k], d)
                    } else {
                        // db[k, n] = a^T[k, m] * g[m, n]
                        let mut d = vec![0.0f32; k * n];
                        kernels::gemm(k, m, n, ta.data(), (1, k as isize), g.data(), (n as isize, 1), 0.0, &mut d);
                        Tensor::new([k, n], d)
                    }
                });
            }
            Op::AddRow { a, b } => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || {
                    let (m, n) = g.dims2();
                    let mut d = vec![0.0f32; n];
                    for r in 0..m {
                        for (dv, gv) in d.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *dv += gv;
                        }
                    }
                    Tensor::new(self.value(*b).shape().to_vec(), d)
                });
            }
            Op::L2NormalizeRows { x, eps } => self.acc_if(grads, *x, || {
                let xv = self.value(*x);
                let (m, c) = xv.dims2();
                let mut d = vec![0.0f32; m * c];
                for r in 0..m {
                    let xr = &xv.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let norm = xr.iter().map(|v| v * v).sum::<f32>().sqrt();
                    let s = norm + eps;
                    let dot: f32 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let k = if norm > 0.0 { dot / (s * s * norm) } else { 0.0 };
                    for j in 0..c {
                        d[r * c + j] = gr[j] / s - xr[j] * k;
                    }
                }
                Tensor::new([m, c], d)
            }),
            Op::NchwToRows(x) => self.acc_if(grads, *x, || {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut d = vec![0.0f32; n * c * hw];
                for ni in 0..n {
                    for p in 0..hw {
                        for ci in 0..c {
                            d[(ni * c + ci) * hw + p] = g.data()[(ni * hw + p) * c + ci];
                        }
                    }
                }
                Tensor::new([n, c, h, w], d)
            }),
            Op::RowsToNchw(x) => self.acc_if(grads, *x, || {
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                let mut d = vec![0.0f32; n * hw * c];
                for ni in 0..n {
                    for ci in 0..c {
                        for (p, &v) in g.plane(ni, ci).iter().enumerate() {
                            d[(ni * hw + p) * c + ci] = v;
                        }
                    }
                }
                Tensor::new([n * hw, c], d)
            }),
            Op::GatherRows { x, idx } => self.acc_if(grads, *x, || {
                let (m, c) = self.value(*x).dims2();
                let mut d = vec![0.0f32; m * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[k * c + j];
                    }
                }
                Tensor::new([m, c], d)
            }),
            Op::TopK { x, src } => self.acc_if(grads, *x, || {
                let mut d = Tensor::zeros(self.value(*x).shape().to_vec());
                for (k, s) in src.iter().enumerate() {
                    if let Some(s) = s {
                        d.data_mut()[*s] += g.data()[k];
                    }
                }
                d
            }),
            Op::LogSoftmaxChannels(x) => self.acc_if(grads, *x, || {
                // dx = g - softmax * sum_c g
                let (n, c, h, w) = out.dims4();
                let hw = h * w;
                let mut d = vec![0.0f32; n * c * hw];
                for ni in 0..n {
                    for p in 0..hw {
                        let gs: f32 = (0..c).map(|ci| g.data()[(ni * c + ci) * hw + p]).sum();
                        for ci in 0..c {
                            let k = (ni * c + ci) * hw + p;
                            d[k] = g.data()[k] - out.data()[k].exp() * gs;
                        }
                    }
                }
                Tensor::new([n, c, h, w], d)
            }),
            Op::SoftmaxChannels(x) => self.acc_if(grads, *x, || {
                let (n, c, h, w) = out.dims4();
                let hw = h * w;
                let mut d = vec![0.0f32; n * c * hw];
                for ni in 0..n {
                    for p in 0..hw {
                        let dot: f32 = (0..c)
                            .map(|ci| {
                                let k = (ni * c + ci) * hw + p;
                                g.data()[k] * out.data()[k]
                            })
                            .sum();
                        for ci in 0..c {
                            let k = (ni * c + ci) * hw + p;
                            d[k] = out.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                Tensor::new([n, c, h, w], d)
            }),
            Op::SumAll(x) => self.acc_if(grads, *x, || {
                Tensor::full(self.value(*x).shape().to_vec(), g.item())
            }),
            Op::MeanAll(x) => self.acc_if(grads, *x, || {
                let t = self.value(*x);
                Tensor::full(t.shape().to_vec(), g.item() / t.numel() as f32)
            }),
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce() -> Tensor) {
        if self.ng(id) {
            accumulate(grads, id, f());
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn pelu(v: f32, a: f32, b: f32, c: f32) -> f32 {
    if v >= 0.0 {
        c * v
    } else {
        a * ((v / b).exp() - 1.0)
    }
}

fn channel_softmax(t: &Tensor, log: bool) -> Tensor {
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    let mut out = vec![0.0f32; n * c * hw];
    for ni in 0..n {
        for p in 0..hw {
            let at = |ci: usize| (ni * c + ci) * hw + p;
            let m = (0..c).map(|ci| t.data()[at(ci)]).fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = (0..c).map(|ci| (t.data()[at(ci)] - m).exp()).sum();
            let lz = z.ln();
            for ci in 0..c {
                let s = t.data()[at(ci)] - m;
                out[at(ci)] = if log { s - lz } else { s.exp() / z };
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}
