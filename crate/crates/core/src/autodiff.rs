//! Reverse-mode automatic differentiation on f64 tensors.
//!
//! Every trainable model in the crate (denoiser, autoencoder, forger,
//! feature pyramid, downstream baselines) builds a [`Graph`] per step.
//! Nodes own their values; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node, so losses can be differentiated with
//! respect to parameters and inputs alike.
//!
//! The op set is deliberately small: dense/conv primitives, the attention
//! pieces (shared-rhs batched matmul + softmax), pointwise activations, and
//! the loss reductions. Everything is single-threaded and deterministic.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

pub type Arr = ArrayD<f64>;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// Elementwise sum, equal shapes.
    Add(NodeId, NodeId),
    /// Elementwise difference, equal shapes.
    Sub(NodeId, NodeId),
    /// Hadamard product, equal shapes.
    Mul(NodeId, NodeId),
    /// Multiply by a scalar constant.
    Scale(NodeId, f64),
    /// Multiply each batch row `x[b, ..]` by `scales[b]`.
    ScaleRows(NodeId, Vec<f64>),
    /// `[B, N] + [N]` or `[B, C, H, W] + [C]`.
    AddBias(NodeId, NodeId),
    /// `[B, C, H, W] + [B, C]`, broadcast over spatial dims.
    AddChannelVec(NodeId, NodeId),
    /// `[M, K] x [K, N]`.
    Matmul(NodeId, NodeId),
    /// `[B, M, K] x [K, N]` with the rank-2 rhs shared across the batch.
    BmmShared(NodeId, NodeId),
    /// `[B, M, K] x [N, K]^T -> [B, M, N]`, rhs shared across the batch.
    BmmSharedT(NodeId, NodeId),
    /// Softmax over the last axis.
    SoftmaxLast(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        /// Cached im2col patches per batch item (recording mode only).
        cols: Vec<Array2<f64>>,
    },
    /// Nearest-neighbor 2x upsample of `[B, C, H, W]`.
    Upsample2x(NodeId),
    Silu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Clamp to `[0, 1]`; gradient passes inside the closed interval.
    Clamp01(NodeId),
    Reshape(NodeId),
    /// `[B, C, H, W] -> [B, H*W, C]`.
    NchwToNlc(NodeId),
    /// `[B, H*W, C] -> [B, C, H, W]` for the given spatial dims.
    NlcToNchw(NodeId, usize, usize),
    /// Concatenate along the channel axis (rank 4).
    ConcatC(NodeId, NodeId),
    /// Mean over every element -> scalar.
    MeanAll(NodeId),
    /// Sum over every element -> scalar.
    SumAll(NodeId),
    /// Mean over the batch of per-row L2 norms -> scalar.
    Norm2RowsMean(NodeId),
    /// Mean softmax cross-entropy of `[B, K]` logits against class indices.
    CrossEntropyMean(NodeId, Vec<usize>),
    /// Global average pool `[B, C, H, W] -> [B, C]`.
    MeanSpatial(NodeId),
}

struct Node {
    value: Arr,
    op: Op,
}

/// Gradients for every node of a graph, keyed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Arr> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of the given shape if it never received one.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Arr {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Recording graph: keeps everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only graph: ops skip caches, `backward` must not be called.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: Arr, op: Op) -> NodeId {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn scale_rows(&mut self, a: NodeId, scales: Vec<f64>) -> NodeId {
        assert_eq!(self.value(a).shape()[0], scales.len());
        let mut v = self.value(a).clone();
        for (mut row, s) in v.axis_iter_mut(Axis(0)).zip(scales.iter()) {
            row.mapv_inplace(|x| x * s);
        }
        self.push(v, Op::ScaleRows(a, scales))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.ndim(), 1);
        let mut v = xv.clone();
        match xv.ndim() {
            2 => {
                assert_eq!(xv.shape()[1], bv.shape()[0]);
                for mut row in v.axis_iter_mut(Axis(0)) {
                    for (o, b) in row.iter_mut().zip(bv.iter()) {
                        *o += *b;
                    }
                }
            }
            4 => {
                assert_eq!(xv.shape()[1], bv.shape()[0]);
                for mut item in v.axis_iter_mut(Axis(0)) {
                    for (mut chan, b) in item.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                        chan.mapv_inplace(|x| x + *b);
                    }
                }
            }
            d => panic!("add_bias on rank {d}"),
        }
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn add_channel_vec(&mut self, x: NodeId, vecs: NodeId) -> NodeId {
        let xv = self.value(x);
        let cv = self.value(vecs);
        assert_eq!(xv.ndim(), 4);
        assert_eq!(cv.ndim(), 2);
        assert_eq!(xv.shape()[0], cv.shape()[0]);
        assert_eq!(xv.shape()[1], cv.shape()[1]);
        let mut v = xv.clone();
        for (mut item, row) in v.axis_iter_mut(Axis(0)).zip(cv.axis_iter(Axis(0))) {
            for (mut chan, b) in item.axis_iter_mut(Axis(0)).zip(row.iter()) {
                chan.mapv_inplace(|x| x + *b);
            }
        }
        self.push(v, Op::AddChannelVec(x, vecs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::Matmul(a, b))
    }

    pub fn bmm_shared(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let (bs, m, k) = av.dim();
        assert_eq!(k, bv.dim().0);
        let n = bv.dim().1;
        let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
        for (mut o, x) in out.axis_iter_mut(Axis(0)).zip(av.axis_iter(Axis(0))) {
            o.assign(&x.dot(&bv));
        }
        self.push(out.into_dyn(), Op::BmmShared(a, b))
    }

    pub fn bmm_shared_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let (bs, m, k) = av.dim();
        assert_eq!(k, bv.dim().1);
        let n = bv.dim().0;
        let bt = bv.t();
        let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
        for (mut o, x) in out.axis_iter_mut(Axis(0)).zip(av.axis_iter(Axis(0))) {
            o.assign(&x.dot(&bt));
        }
        self.push(out.into_dyn(), Op::BmmSharedT(a, b))
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in lane.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in lane.iter_mut() {
                *x /= sum;
            }
        }
        self.push(v, Op::SoftmaxLast(a))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let (bs, cin, h, w_in) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w_in + 2 * pad - kw) / stride + 1;
        let w2 = wv
            .to_shape((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let mut out = Array4::<f64>::zeros((bs, cout, ho, wo));
        let mut cols = Vec::with_capacity(if self.record { bs } else { 0 });
        for (bi, xb) in xv.axis_iter(Axis(0)).enumerate() {
            let col = im2col(&xb, kh, kw, stride, pad, ho, wo);
            let y = w2.dot(&col);
            out.index_axis_mut(Axis(0), bi)
                .assign(&y.to_shape((cout, ho, wo)).unwrap());
            if self.record {
                cols.push(col);
            }
        }
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
        )
    }

    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (bs, c, h, w) = av.dim();
        let mut out = Array4::<f64>::zeros((bs, c, 2 * h, 2 * w));
        for b in 0..bs {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = av[[b, ci, y, x]];
                        out[[b, ci, 2 * y, 2 * x]] = v;
                        out[[b, ci, 2 * y, 2 * x + 1]] = v;
                        out[[b, ci, 2 * y + 1, 2 * x]] = v;
                        out[[b, ci, 2 * y + 1, 2 * x + 1]] = v;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample2x(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * sigmoid_f(x));
        self.push(v, Op::Silu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid_f);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(0.0, 1.0));
        self.push(v, Op::Clamp01(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        self.push(v, Op::Reshape(a))
    }

    pub fn nchw_to_nlc(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (bs, c, h, w) = av.dim();
        let perm = av.permuted_axes([0, 2, 3, 1]);
        let v = perm
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((bs, h * w, c))
            .unwrap();
        self.push(v.into_dyn(), Op::NchwToNlc(a))
    }

    pub fn nlc_to_nchw(&mut self, a: NodeId, h: usize, w: usize) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let (bs, l, c) = av.dim();
        assert_eq!(l, h * w);
        let v = av
            .to_shape((bs, h, w, c))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        self.push(v.into_dyn(), Op::NlcToNchw(a, h, w))
    }

    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix4>().unwrap();
        let v = ndarray::concatenate(Axis(1), &[av, bv]).unwrap();
        self.push(v.into_dyn(), Op::ConcatC(a, b))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a).mean().unwrap();
        self.push(scalar_arr(m), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(scalar_arr(s), Op::SumAll(a))
    }

    pub fn norm2_rows_mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let bs = v.shape()[0];
        let flat = v.view().into_shape_with_order((bs, v.len() / bs)).unwrap();
        let mut total = 0.0;
        for row in flat.axis_iter(Axis(0)) {
            total += row.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        self.push(scalar_arr(total / bs as f64), Op::Norm2RowsMean(a))
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = self.value(logits).view().into_dimensionality::<Ix2>().unwrap();
        let (bs, k) = lv.dim();
        assert_eq!(bs, targets.len());
        let mut total = 0.0;
        for (row, &t) in lv.axis_iter(Axis(0)).zip(targets.iter()) {
            assert!(t < k);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        self.push(
            scalar_arr(total / bs as f64),
            Op::CrossEntropyMean(logits, targets),
        )
    }

    pub fn mean_spatial(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (bs, c, h, w) = av.dim();
        let mut out = Array2::<f64>::zeros((bs, c));
        for b in 0..bs {
            for ci in 0..c {
                out[[b, ci]] = av.index_axis(Axis(0), b).index_axis(Axis(0), ci).mean().unwrap();
            }
        }
        let _ = (h, w);
        self.push(out.into_dyn(), Op::MeanSpatial(a))
    }

    /// Backpropagate from a scalar loss node; returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(scalar_arr(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                add_grad(grads, *a, g * self.value(*b));
                add_grad(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => add_grad(grads, *a, g.mapv(|x| x * c)),
            Op::ScaleRows(a, scales) => {
                let mut ga = g.clone();
                for (mut row, s) in ga.axis_iter_mut(Axis(0)).zip(scales.iter()) {
                    row.mapv_inplace(|x| x * s);
                }
                add_grad(grads, *a, ga);
            }
            Op::AddBias(x, bias) => {
                add_grad(grads, *x, g.clone());
                let bv = self.value(*bias);
                let mut gb = ArrayD::<f64>::zeros(bv.raw_dim());
                match g.ndim() {
                    2 => {
                        for row in g.axis_iter(Axis(0)) {
                            for (o, v) in gb.iter_mut().zip(row.iter()) {
                                *o += *v;
                            }
                        }
                    }
                    4 => {
                        for item in g.axis_iter(Axis(0)) {
                            for (o, chan) in gb.iter_mut().zip(item.axis_iter(Axis(0))) {
                                *o += chan.sum();
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                add_grad(grads, *bias, gb);
            }
            Op::AddChannelVec(x, vecs) => {
                add_grad(grads, *x, g.clone());
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bs, c, _, _) = g4.dim();
                let mut gv = Array2::<f64>::zeros((bs, c));
                for b in 0..bs {
                    for ci in 0..c {
                        gv[[b, ci]] = g4.index_axis(Axis(0), b).index_axis(Axis(0), ci).sum();
                    }
                }
                add_grad(grads, *vecs, gv.into_dyn());
            }
            Op::Matmul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                add_grad(grads, *a, g2.dot(&bv.t()).into_dyn());
                add_grad(grads, *b, av.t().dot(&g2).into_dyn());
            }
            Op::BmmShared(a, b) => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                let mut ga = ndarray::Array3::<f64>::zeros(av.dim());
                let mut gb = Array2::<f64>::zeros(bv.dim());
                for ((mut gab, gob), ab) in ga
                    .axis_iter_mut(Axis(0))
                    .zip(g3.axis_iter(Axis(0)))
                    .zip(av.axis_iter(Axis(0)))
                {
                    gab.assign(&gob.dot(&bv.t()));
                    gb += &ab.t().dot(&gob);
                }
                add_grad(grads, *a, ga.into_dyn());
                add_grad(grads, *b, gb.into_dyn());
            }
            Op::BmmSharedT(a, b) => {
                // y[b] = a[b] . b^T  =>  ga[b] = g[b] . b ; gb = sum_b g[b]^T . a[b]
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                let mut ga = ndarray::Array3::<f64>::zeros(av.dim());
                let mut gb = Array2::<f64>::zeros(bv.dim());
                for ((mut gab, gob), ab) in ga
                    .axis_iter_mut(Axis(0))
                    .zip(g3.axis_iter(Axis(0)))
                    .zip(av.axis_iter(Axis(0)))
                {
                    gab.assign(&gob.dot(&bv));
                    gb += &gob.t().dot(&ab);
                }
                add_grad(grads, *a, ga.into_dyn());
                add_grad(grads, *b, gb.into_dyn());
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let last = y.ndim() - 1;
                let mut ga = y * g;
                for (mut lane, ylane) in ga.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
                {
                    let dot: f64 = lane.sum();
                    for (o, yv) in lane.iter_mut().zip(ylane.iter()) {
                        *o -= yv * dot;
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                let (bs, cin, h, w_in) = xv.dim();
                let (cout, _, kh, kw) = wv.dim();
                let (_, _, ho, wo) = g4.dim();
                let w2 = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
                let mut gw2 = Array2::<f64>::zeros((cout, cin * kh * kw));
                let mut gx = Array4::<f64>::zeros((bs, cin, h, w_in));
                for bi in 0..bs {
                    let gy = g4
                        .index_axis(Axis(0), bi)
                        .to_shape((cout, ho * wo))
                        .unwrap()
                        .to_owned();
                    let col = if cols.is_empty() {
                        im2col(&xv.index_axis(Axis(0), bi), kh, kw, *stride, *pad, ho, wo)
                    } else {
                        cols[bi].clone()
                    };
                    gw2 += &gy.dot(&col.t());
                    let gcol = w2.t().dot(&gy);
                    col2im(
                        &gcol,
                        &mut gx.index_axis_mut(Axis(0), bi),
                        kh,
                        kw,
                        *stride,
                        *pad,
                        ho,
                        wo,
                    );
                }
                add_grad(grads, *x, gx.into_dyn());
                add_grad(
                    grads,
                    *w,
                    gw2.into_shape_with_order((cout, cin, kh, kw))
                        .unwrap()
                        .into_dyn(),
                );
            }
            Op::Upsample2x(a) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bs, c, h2, w2) = g4.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut ga = Array4::<f64>::zeros((bs, c, h, w));
                for b in 0..bs {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                ga[[b, ci, y, x]] = g4[[b, ci, 2 * y, 2 * x]]
                                    + g4[[b, ci, 2 * y, 2 * x + 1]]
                                    + g4[[b, ci, 2 * y + 1, 2 * x]]
                                    + g4[[b, ci, 2 * y + 1, 2 * x + 1]];
                            }
                        }
                    }
                }
                add_grad(grads, *a, ga.into_dyn());
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let ga = ndarray::Zip::from(g).and(xv).map_collect(|gv, x| {
                    let s = sigmoid_f(*x);
                    gv * s * (1.0 + x * (1.0 - s))
                });
                add_grad(grads, *a, ga);
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                let ga = ndarray::Zip::from(g)
                    .and(xv)
                    .map_collect(|gv, x| if *x > 0.0 { *gv } else { 0.0 });
                add_grad(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = ndarray::Zip::from(g).and(y).map_collect(|gv, yv| gv * yv * (1.0 - yv));
                add_grad(grads, *a, ga);
            }
            Op::Clamp01(a) => {
                let xv = self.value(*a);
                let ga = ndarray::Zip::from(g)
                    .and(xv)
                    .map_collect(|gv, x| if (0.0..=1.0).contains(x) { *gv } else { 0.0 });
                add_grad(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g
                    .clone()
                    .into_shape_with_order(self.value(*a).raw_dim())
                    .unwrap();
                add_grad(grads, *a, ga);
            }
            Op::NchwToNlc(a) => {
                let xv = self.value(*a);
                let (bs, c, h, w) = xv.view().into_dimensionality::<Ix4>().unwrap().dim();
                let g3 = g
                    .view()
                    .into_shape_with_order((bs, h, w, c))
                    .unwrap()
                    .permuted_axes([0, 3, 1, 2])
                    .as_standard_layout()
                    .to_owned();
                add_grad(grads, *a, g3.into_dyn());
            }
            Op::NlcToNchw(a, h, w) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bs, c, _, _) = g4.dim();
                let ga = g4
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((bs, h * w, c))
                    .unwrap();
                add_grad(grads, *a, ga.into_dyn());
            }
            Op::ConcatC(a, b) => {
                let ca = self.value(*a).shape()[1];
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let ga = g4.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                let gb = g4.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                add_grad(grads, *a, ga.into_dyn());
                add_grad(grads, *b, gb.into_dyn());
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let gs = g.iter().next().unwrap() / n;
                add_grad(grads, *a, ArrayD::from_elem(self.value(*a).raw_dim(), gs));
            }
            Op::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                add_grad(grads, *a, ArrayD::from_elem(self.value(*a).raw_dim(), gs));
            }
            Op::Norm2RowsMean(a) => {
                let gs = *g.iter().next().unwrap();
                let xv = self.value(*a);
                let bs = xv.shape()[0];
                let flat = xv.view().into_shape_with_order((bs, xv.len() / bs)).unwrap();
                let mut ga = Array2::<f64>::zeros(flat.dim());
                for (mut grow, row) in ga.axis_iter_mut(Axis(0)).zip(flat.axis_iter(Axis(0))) {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        let c = gs / (bs as f64 * norm);
                        for (o, x) in grow.iter_mut().zip(row.iter()) {
                            *o = c * x;
                        }
                    }
                }
                add_grad(
                    grads,
                    *a,
                    ga.into_shape_with_order(xv.raw_dim()).unwrap().into_dyn(),
                );
            }
            Op::CrossEntropyMean(logits, targets) => {
                let gs = *g.iter().next().unwrap();
                let lv = self.value(*logits).view().into_dimensionality::<Ix2>().unwrap();
                let (bs, _k) = lv.dim();
                let mut gl = Array2::<f64>::zeros(lv.dim());
                for ((mut grow, row), &t) in
                    gl.axis_iter_mut(Axis(0)).zip(lv.axis_iter(Axis(0))).zip(targets.iter())
                {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for (j, (o, x)) in grow.iter_mut().zip(row.iter()).enumerate() {
                        let p = (x - max).exp() / sum;
                        *o = gs * (p - if j == t { 1.0 } else { 0.0 }) / bs as f64;
                    }
                }
                add_grad(grads, *logits, gl.into_dyn());
            }
            Op::MeanSpatial(a) => {
                let xv = self.value(*a).view().into_dimensionality::<Ix4>().unwrap();
                let (bs, c, h, w) = xv.dim();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut ga = Array4::<f64>::zeros((bs, c, h, w));
                let inv = 1.0 / (h * w) as f64;
                for b in 0..bs {
                    for ci in 0..c {
                        let gv = g2[[b, ci]] * inv;
                        ga.slice_mut(ndarray::s![b, ci, .., ..]).fill(gv);
                    }
                }
                add_grad(grads, *a, ga.into_dyn());
            }
        }
    }
}

#[inline]
fn sigmoid_f(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn scalar_arr(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn add_grad(grads: &mut [Option<Arr>], id: NodeId, g: Arr) {
    match &mut grads[id.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[r, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &Array2<f64>,
    gx: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (cin, h, w) = gx.dim();
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += gcol[[r, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, fill_normal};
    use ndarray::IxDyn;

    fn randn(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Arr {
        let mut a = ArrayD::zeros(IxDyn(shape));
        fill_normal(rng, a.as_slice_mut().unwrap());
        a
    }

    /// Central finite differences against analytic gradients for a scalar
    /// loss built by `f` from the given leaf values.
    fn check_grads(inputs: &[Arr], f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let eps = 1e-5;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let loss = f(&mut g, &ids);
        let grads = g.backward(loss);

        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[i], input.shape());
            for flat in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[flat] += eps;
                minus[i].as_slice_mut().unwrap()[flat] -= eps;

                let mut gp = Graph::new();
                let idp: Vec<NodeId> = plus.iter().map(|v| gp.leaf(v.clone())).collect();
                let lp_id = f(&mut gp, &idp);
                let lp = gp.scalar(lp_id);
                let mut gm = Graph::new();
                let idm: Vec<NodeId> = minus.iter().map(|v| gm.leaf(v.clone())).collect();
                let lm_id = f(&mut gm, &idm);
                let lm = gm.scalar(lm_id);

                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[flat];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "input {i} coord {flat}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_bias_silu() {
        let mut rng = derive_rng(1, &[1]);
        let x = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[4, 5]);
        let b = randn(&mut rng, &[5]);
        check_grads(&[x, w, b], |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            let y = g.add_bias(y, ids[2]);
            let y = g.silu(y);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        });
    }

    #[test]
    fn grad_conv2d_stride1_and_stride2() {
        let mut rng = derive_rng(2, &[1]);
        for stride in [1usize, 2] {
            let x = randn(&mut rng, &[2, 3, 6, 6]);
            let w = randn(&mut rng, &[4, 3, 3, 3]);
            let b = randn(&mut rng, &[4]);
            check_grads(&[x, w, b], move |g, ids| {
                let y = g.conv2d(ids[0], ids[1], stride, 1);
                let y = g.add_bias(y, ids[2]);
                let y = g.silu(y);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            });
        }
    }

    #[test]
    fn grad_attention_block() {
        let mut rng = derive_rng(3, &[1]);
        let x = randn(&mut rng, &[2, 6, 4]); // [B, L, C]
        let prompt = randn(&mut rng, &[3, 5]); // [N, d]
        let wq = randn(&mut rng, &[4, 4]);
        let wk = randn(&mut rng, &[5, 4]);
        let wv = randn(&mut rng, &[5, 4]);
        let wo = randn(&mut rng, &[4, 4]);
        check_grads(&[x, prompt, wq, wk, wv, wo], |g, ids| {
            let q = g.bmm_shared(ids[0], ids[2]);
            let k = g.matmul(ids[1], ids[3]);
            let v = g.matmul(ids[1], ids[4]);
            let scores = g.bmm_shared_t(q, k);
            let scores = g.scale(scores, 0.5);
            let attn = g.softmax_last(scores);
            let h = g.bmm_shared(attn, v);
            let o = g.bmm_shared(h, ids[5]);
            let o = g.add(o, ids[0]);
            let sq = g.mul(o, o);
            g.mean_all(sq)
        });
    }

    #[test]
    fn grad_upsample_concat_reshape() {
        let mut rng = derive_rng(4, &[1]);
        let x = randn(&mut rng, &[1, 2, 3, 3]);
        let y = randn(&mut rng, &[1, 2, 6, 6]);
        check_grads(&[x, y], |g, ids| {
            let up = g.upsample2x(ids[0]);
            let cat = g.concat_c(up, ids[1]);
            let lc = g.nchw_to_nlc(cat);
            let back = g.nlc_to_nchw(lc, 6, 6);
            let sq = g.mul(back, back);
            g.sum_all(sq)
        });
    }

    #[test]
    fn grad_norm2_rows_mean() {
        let mut rng = derive_rng(5, &[1]);
        let x = randn(&mut rng, &[3, 2, 4]);
        check_grads(&[x], |g, ids| g.norm2_rows_mean(ids[0]));
    }

    #[test]
    fn grad_cross_entropy_and_pool() {
        let mut rng = derive_rng(6, &[1]);
        let x = randn(&mut rng, &[3, 2, 4, 4]);
        let w = randn(&mut rng, &[2, 3]);
        check_grads(&[x, w], |g, ids| {
            let p = g.mean_spatial(ids[0]);
            let logits = g.matmul(p, ids[1]);
            g.cross_entropy_mean(logits, vec![0, 2, 1])
        });
    }

    #[test]
    fn grad_pointwise_and_scale_rows() {
        let mut rng = derive_rng(7, &[1]);
        let x = randn(&mut rng, &[3, 4]).mapv(|v| 0.4 + 0.1 * v.tanh());
        check_grads(&[x], |g, ids| {
            let a = g.sigmoid(ids[0]);
            let b = g.relu(a);
            let c = g.clamp01(b);
            let d = g.scale_rows(c, vec![0.5, -1.5, 2.0]);
            let sq = g.mul(d, d);
            g.mean_all(sq)
        });
    }

    #[test]
    fn grad_add_channel_vec() {
        let mut rng = derive_rng(8, &[1]);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let v = randn(&mut rng, &[2, 3]);
        check_grads(&[x, v], |g, ids| {
            let y = g.add_channel_vec(ids[0], ids[1]);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        });
    }

    #[test]
    fn inference_graph_matches_recorded_forward() {
        let mut rng = derive_rng(9, &[1]);
        let x = randn(&mut rng, &[2, 3, 8, 8]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);

        let mut gr = Graph::new();
        let (xr, wr) = (gr.leaf(x.clone()), gr.leaf(w.clone()));
        let yr = gr.conv2d(xr, wr, 1, 1);

        let mut gi = Graph::inference();
        let (xi, wi) = (gi.leaf(x), gi.leaf(w));
        let yi = gi.conv2d(xi, wi, 1, 1);

        assert_eq!(gr.value(yr), gi.value(yi));
    }
}
