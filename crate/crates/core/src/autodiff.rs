//! Reverse-mode automatic differentiation over dynamically shaped `f64`
//! arrays.
//!
//! A [`Graph`] is a flat tape of nodes appended in topological order; each op
//! stores its parent ids, so [`Graph::backward`] is a single reverse sweep
//! with a `match` per op. Values are plain `ndarray` arrays in standard
//! layout. The engine is single-threaded and allocation-order deterministic;
//! data parallelism happens one graph per chunk above this layer.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, IxDyn, Slice};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Exp(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Silu(NodeId),
    /// Value stores sigmoid(x) so backward reuses it.
    Sigmoid(NodeId),
    Tanh(NodeId),
    Clamp(NodeId, f64, f64),
    /// (m,k) x (k,n)
    MatMul(NodeId, NodeId),
    /// (b,m,k) x (b,k,n)
    BatchMatMul(NodeId, NodeId),
    /// x: (..., f) + b: (f)
    BiasAdd(NodeId, NodeId),
    /// x: (b,c,h,w) + v: (b,c), broadcast over space
    AddChanVec(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2(NodeId),
    /// (b,c,h,w) -> (b,c) global average pool
    MeanSpatial(NodeId),
    /// softmax over the last axis; value stores the output
    Softmax(NodeId),
    /// layer norm over the last axis with learned gain/bias of shape (f)
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    /// elementwise binary cross-entropy with logits against constant targets
    BceWithLogits(NodeId, ArrayD<f64>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by a backward sweep, indexed by `NodeId`.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a node that is known to participate in the loss.
    pub fn expect(&self, id: NodeId) -> &ArrayD<f64> {
        self.get(id).expect("node has no gradient")
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Scalar value of a 0-dim (or single-element) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Leaf that receives a gradient (inputs under optimization, parameters).
    pub fn input(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let v = &self.nodes[a].value / &self.nodes[b].value;
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * s);
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x + s);
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::AddScalar(a, s), g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Exp(a), g)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * x);
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Square(a), g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Relu(a), g)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * sigmoid(x));
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Silu(a), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(sigmoid);
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Tanh(a), g)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.clamp(lo, hi));
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let bv = as2(&self.nodes[b].value);
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "batch_matmul: lhs must be 3-d");
        assert_eq!(sb.len(), 3, "batch_matmul: rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "batch_matmul: batch mismatch");
        assert_eq!(sa[2], sb[1], "batch_matmul: inner dim mismatch");
        let (bsz, m, n) = (sa[0], sa[1], sb[2]);
        let mut out = ArrayD::zeros(IxDyn(&[bsz, m, n]));
        for i in 0..bsz {
            let ai = self.nodes[a]
                .value
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let bi = self.nodes[b]
                .value
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::BatchMatMul(a, b), g)
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let f = *self.shape(x).last().expect("bias_add: 0-d input");
        assert_eq!(self.shape(b), &[f], "bias_add: bias shape mismatch");
        let bv = self.nodes[b].value.clone();
        let v = &self.nodes[x].value + &bv;
        let g = self.any_grad(&[x, b]);
        self.push(v, Op::BiasAdd(x, b), g)
    }

    pub fn add_chan_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        assert_eq!(sx.len(), 4, "add_chan_vec: x must be (b,c,h,w)");
        assert_eq!(&sv, &[sx[0], sx[1]], "add_chan_vec: v must be (b,c)");
        let mut out = self.nodes[x].value.clone();
        {
            let vv = &self.nodes[v].value;
            for b in 0..sx[0] {
                for c in 0..sx[1] {
                    let add = vv[[b, c]];
                    out.index_axis_mut(Axis(0), b)
                        .index_axis_mut(Axis(0), c)
                        .mapv_inplace(|x| x + add);
                }
            }
        }
        let g = self.any_grad(&[x, v]);
        self.push(out, Op::AddChanVec(x, v), g)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv2d_forward(&self.nodes[x].value, &self.nodes[w].value, stride, pad);
        let g = self.any_grad(&[x, w]);
        self.push(v, Op::Conv2d { x, w, stride, pad }, g)
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xin = &self.nodes[x].value;
        let s = xin.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample: x must be (b,c,h,w)");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xin[[bi, ci, i, j]];
                        out[[bi, ci, 2 * i, 2 * j]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let g = self.nodes[x].needs_grad;
        self.push(out, Op::UpsampleNearest2(x), g)
    }

    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "mean_spatial: x must be (b,c,h,w)");
        let v = self.nodes[x]
            .value
            .mean_axis(Axis(3))
            .unwrap()
            .mean_axis(Axis(2))
            .unwrap();
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::MeanSpatial(x), g)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        let last = v.ndim() - 1;
        for mut row in v.lanes_mut(Axis(last)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::Softmax(x), g)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let f = *self.shape(x).last().expect("layer_norm: 0-d input");
        assert_eq!(self.shape(gain), &[f], "layer_norm: gain shape");
        assert_eq!(self.shape(bias), &[f], "layer_norm: bias shape");
        let gv = self.nodes[gain]
            .value
            .clone()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let bv = self.nodes[bias]
            .value
            .clone()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut v = self.nodes[x].value.clone();
        let last = v.ndim() - 1;
        for mut row in v.lanes_mut(Axis(last)) {
            let mu = row.mean().unwrap();
            let var = row.mapv(|x| (x - mu) * (x - mu)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            for (i, e) in row.iter_mut().enumerate() {
                *e = (*e - mu) * inv * gv[i] + bv[i];
            }
        }
        let g = self.any_grad(&[x, gain, bias]);
        self.push(v, Op::LayerNorm { x, gain, bias, eps }, g)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        assert_eq!(self.nodes[x].value.len(), n, "reshape: element count");
        let v = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::Reshape(x), g)
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self.nodes[x]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::Permute(x, axes.to_vec()), g)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat: empty");
        let views: Vec<ArrayViewD<f64>> =
            parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let g = self.any_grad(parts);
        self.push(v, Op::Concat(parts.to_vec(), axis), g)
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice_axis(
                Axis(axis),
                Slice::from(start as isize..(start + len) as isize),
            )
            .to_owned();
        let g = self.nodes[x].needs_grad;
        self.push(
            v,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            g,
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = ndarray::arr0(self.nodes[x].value.sum()).into_dyn();
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::SumAll(x), g)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = ndarray::arr0(self.nodes[x].value.mean().expect("mean of empty")).into_dyn();
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::MeanAll(x), g)
    }

    /// Elementwise stable binary cross-entropy with logits:
    /// `max(z,0) - z*y + ln(1+exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &ArrayD<f64>) -> NodeId {
        assert_eq!(self.shape(logits), targets.shape(), "bce: shape mismatch");
        let z = &self.nodes[logits].value;
        let mut v = ArrayD::zeros(z.raw_dim());
        ndarray::Zip::from(&mut v)
            .and(z)
            .and(targets)
            .for_each(|o, &z, &y| {
                *o = z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
            });
        let g = self.nodes[logits].needs_grad;
        self.push(v, Op::BceWithLogits(logits, targets.clone()), g)
    }

    /// Mean squared error between two same-shaped nodes (scalar output).
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Reverse sweep from a scalar `root`; returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(
            self.nodes[root].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));

        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, id: NodeId, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        let nodes = &self.nodes;
        let mut acc = |pid: NodeId, delta: ArrayD<f64>| {
            if !nodes[pid].needs_grad {
                return;
            }
            match &mut grads[pid] {
                Some(a) => *a += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g * &self.nodes[*b].value);
                acc(*b, g * &self.nodes[*a].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                acc(*a, g / bv);
                let av = &self.nodes[*a].value;
                acc(*b, -(g * av) / (bv * bv));
            }
            Op::Scale(a, s) => acc(*a, g.mapv(|x| x * s)),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g * &self.nodes[id].value),
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                acc(*a, g * &y.mapv(|y| 0.5 / y));
            }
            Op::Square(a) => {
                let x = &self.nodes[*a].value;
                acc(*a, g * &x.mapv(|x| 2.0 * x));
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                acc(*a, g * &x.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                acc(
                    *a,
                    g * &x.mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    }),
                );
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                acc(*a, g * &y.mapv(|y| y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                acc(*a, g * &y.mapv(|y| 1.0 - y * y));
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[*a].value;
                acc(
                    *a,
                    g * &x.mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 }),
                );
            }
            Op::MatMul(a, b) => {
                let av = as2(&self.nodes[*a].value);
                let bv = as2(&self.nodes[*b].value);
                let gv = as2(g);
                acc(*a, gv.dot(&bv.t()).into_dyn());
                acc(*b, av.t().dot(&gv).into_dyn());
            }
            Op::BatchMatMul(a, b) => {
                let bsz = self.shape(*a)[0];
                let mut da = ArrayD::zeros(self.nodes[*a].value.raw_dim());
                let mut db = ArrayD::zeros(self.nodes[*b].value.raw_dim());
                for i in 0..bsz {
                    let ai = owned2(self.nodes[*a].value.index_axis(Axis(0), i));
                    let bi = owned2(self.nodes[*b].value.index_axis(Axis(0), i));
                    let gi = owned2(g.index_axis(Axis(0), i));
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::BiasAdd(x, b) => {
                acc(*x, g.clone());
                let f = self.shape(*b)[0];
                let flat = g
                    .view()
                    .into_shape_with_order((g.len() / f, f))
                    .expect("bias grad reshape");
                acc(*b, flat.sum_axis(Axis(0)).into_dyn());
            }
            Op::AddChanVec(x, v) => {
                acc(*x, g.clone());
                let s = g.shape();
                let mut dv = ArrayD::zeros(IxDyn(&[s[0], s[1]]));
                for b in 0..s[0] {
                    for c in 0..s[1] {
                        dv[[b, c]] = g.index_axis(Axis(0), b).index_axis(Axis(0), c).sum();
                    }
                }
                acc(*v, dv);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    *stride,
                    *pad,
                    self.nodes[*x].needs_grad,
                    self.nodes[*w].needs_grad,
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::UpsampleNearest2(x) => {
                let s = self.shape(*x).to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut dx = ArrayD::zeros(IxDyn(&s));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, ci, i, j]] = g[[bi, ci, 2 * i, 2 * j]]
                                    + g[[bi, ci, 2 * i + 1, 2 * j]]
                                    + g[[bi, ci, 2 * i, 2 * j + 1]]
                                    + g[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MeanSpatial(x) => {
                let s = self.shape(*x).to_vec();
                let scale = 1.0 / (s[2] * s[3]) as f64;
                let mut dx = ArrayD::zeros(IxDyn(&s));
                for b in 0..s[0] {
                    for c in 0..s[1] {
                        let gv = g[[b, c]] * scale;
                        dx.index_axis_mut(Axis(0), b)
                            .index_axis_mut(Axis(0), c)
                            .fill(gv);
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[id].value;
                let mut dx = g * y;
                let last = dx.ndim() - 1;
                // dx = y * (g - sum(g*y)) per row
                for (mut drow, yrow) in dx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
                {
                    let dot: f64 = drow.sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= dot * yv;
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gain]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let f = *xv.shape().last().unwrap();
                let last = xv.ndim() - 1;
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let mut dgain = ndarray::Array1::<f64>::zeros(f);
                let mut dbias = ndarray::Array1::<f64>::zeros(f);
                for ((xrow, grow), mut drow) in xv
                    .lanes(Axis(last))
                    .into_iter()
                    .zip(g.lanes(Axis(last)))
                    .zip(dx.lanes_mut(Axis(last)))
                {
                    let mu = xrow.mean().unwrap();
                    let var = xrow.mapv(|x| (x - mu) * (x - mu)).mean().unwrap();
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&x| (x - mu) * inv).collect();
                    let dy: Vec<f64> = grow.iter().cloned().collect();
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in 0..f {
                        let dh = dy[i] * gv[i];
                        m1 += dh;
                        m2 += dh * xhat[i];
                        dgain[i] += dy[i] * xhat[i];
                        dbias[i] += dy[i];
                    }
                    m1 /= f as f64;
                    m2 /= f as f64;
                    for i in 0..f {
                        let dh = dy[i] * gv[i];
                        drow[i] = inv * (dh - m1 - xhat[i] * m2);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain.into_dyn());
                acc(*bias, dbias.into_dyn());
            }
            Op::Reshape(x) => {
                let target = self.nodes[*x].value.raw_dim();
                acc(
                    *x,
                    g.clone().into_shape_with_order(target).expect("reshape"),
                );
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                acc(
                    *x,
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned(),
                );
            }
            Op::Concat(parts, axis) => {
                let mut start = 0usize;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let part = g
                        .slice_axis(
                            Axis(*axis),
                            Slice::from(start as isize..(start + len) as isize),
                        )
                        .to_owned();
                    acc(p, part);
                    start += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let mut dx = ArrayD::zeros(self.nodes[*x].value.raw_dim());
                dx.slice_axis_mut(
                    Axis(*axis),
                    Slice::from(*start as isize..(*start + *len) as isize),
                )
                .assign(g);
                acc(*x, dx);
            }
            Op::SumAll(x) => {
                let gv = *g.iter().next().unwrap();
                acc(
                    *x,
                    ArrayD::from_elem(self.nodes[*x].value.raw_dim(), gv),
                );
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].value.len() as f64;
                let gv = *g.iter().next().unwrap() / n;
                acc(
                    *x,
                    ArrayD::from_elem(self.nodes[*x].value.raw_dim(), gv),
                );
            }
            Op::BceWithLogits(logits, targets) => {
                let z = &self.nodes[*logits].value;
                let mut d = ArrayD::zeros(z.raw_dim());
                ndarray::Zip::from(&mut d)
                    .and(z)
                    .and(targets)
                    .and(g)
                    .for_each(|o, &z, &y, &gg| {
                        *o = (sigmoid(z) - y) * gg;
                    });
                acc(*logits, d);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d view")
}

fn owned2(a: ArrayViewD<f64>) -> ndarray::Array2<f64> {
    a.into_dimensionality::<Ix2>().unwrap().to_owned()
}

/// im2col for a (b,c,h,w) input: columns of shape (c*kh*kw, b*ho*wo).
fn im2col(
    x: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array2<f64> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let xs = x.as_slice().expect("standard layout");
    let mut cols = ndarray::Array2::<f64>::zeros((c * kh * kw, b * ho * wo));
    let cs = cols.as_slice_mut().unwrap();
    let ncols = b * ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let rbase = row * ncols;
                for bi in 0..b {
                    let xbase = (bi * c + ci) * h * w;
                    let obase = rbase + bi * ho * wo;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ii as usize * w;
                        let orow = obase + oi * wo;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cs[orow + oj] = xs[xrow + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back into input layout.
fn col2im(
    dcols: &ndarray::Array2<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<f64> {
    let mut dx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
    let ds = dx.as_slice_mut().unwrap();
    let cs = dcols.as_slice().expect("standard layout");
    let ncols = b * ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let rbase = row * ncols;
                for bi in 0..b {
                    let xbase = (bi * c + ci) * h * w;
                    let obase = rbase + bi * ho * wo;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ii as usize * w;
                        let orow = obase + oi * wo;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            ds[xrow + jj as usize] += cs[orow + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_out(hw: usize, k: usize, stride: usize, pad: usize) -> usize {
    (hw + 2 * pad - k) / stride + 1
}

fn conv2d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d: input must be (b,c,h,w)");
    assert_eq!(ws.len(), 4, "conv2d: weight must be (o,c,kh,kw)");
    assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(wd, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad, ho, wo);
    let wmat = w
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .expect("weight reshape");
    let ymat = wmat.dot(&cols); // (o, b*ho*wo)
    let mut y = ArrayD::zeros(IxDyn(&[b, o, ho, wo]));
    {
        let ys = y.as_slice_mut().unwrap();
        let ym = ymat.as_slice().unwrap();
        let plane = ho * wo;
        for oi in 0..o {
            for bi in 0..b {
                let src = oi * (b * plane) + bi * plane;
                let dst = (bi * o + oi) * plane;
                ys[dst..dst + plane].copy_from_slice(&ym[src..src + plane]);
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gy: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let xs = x.shape();
    let ws = w.shape();
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(wd, kw, stride, pad);
    let plane = ho * wo;

    // (o, b*ho*wo) layout of the output gradient
    let mut gmat = ndarray::Array2::<f64>::zeros((o, b * plane));
    {
        let gm = gmat.as_slice_mut().unwrap();
        let gs = gy.as_slice().expect("standard layout");
        for oi in 0..o {
            for bi in 0..b {
                let dst = oi * (b * plane) + bi * plane;
                let src = (bi * o + oi) * plane;
                gm[dst..dst + plane].copy_from_slice(&gs[src..src + plane]);
            }
        }
    }

    let dw = if need_dw {
        let cols = im2col(x, kh, kw, stride, pad, ho, wo);
        let dwmat = gmat.dot(&cols.t()); // (o, c*kh*kw)
        Some(
            dwmat
                .into_shape_with_order(IxDyn(&[o, c, kh, kw]))
                .expect("dw reshape"),
        )
    } else {
        None
    };

    let dx = if need_dx {
        let wmat = w
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .expect("weight reshape");
        let dcols = wmat.t().dot(&gmat); // (c*kh*kw, b*ho*wo)
        Some(col2im(&dcols, b, c, h, wd, kh, kw, stride, pad, ho, wo))
    } else {
        None
    };

    (dx, dw)
}

/// Central finite differences of a scalar function, used by gradient checks.
pub fn finite_difference<F>(f: F, x0: &ArrayD<f64>, step: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let orig = x.as_slice().unwrap()[idx];
        x.as_slice_mut().unwrap()[idx] = orig + step;
        let fp = f(&x);
        x.as_slice_mut().unwrap()[idx] = orig - step;
        let fm = f(&x);
        x.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Relative L2 distance `|a-b| / max(|b|, eps)` between gradient vectors.
pub fn relative_l2(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}
