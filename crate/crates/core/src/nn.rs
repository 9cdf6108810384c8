//! Parameter storage, layer primitives and the Adam optimizer.
//!
//! Parameters live in a [`ParamSet`]: named `f64` arrays whose values are
//! always exactly representable in `f32`, so checkpoints (raw little-endian
//! `f32`) round-trip bit-for-bit. A [`Binding`] lazily registers parameters
//! as graph leaves — trainable or frozen — and maps gradients back by index.

use crate::autodiff::{Graph, Grads, NodeId};
use crate::rng::standard_normal;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter arrays for one model component.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

/// Round to the nearest f32-representable value.
pub fn quantize_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: ArrayD<f64>) -> ParamId {
        value.mapv_inplace(quantize_f32);
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn set_value(&mut self, id: ParamId, mut value: ArrayD<f64>) {
        value.mapv_inplace(quantize_f32);
        self.values[id.0] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over the canonical f32 little-endian bytes, in index order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &x in v.iter() {
                h.update((x as f32).to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Combined hash over several components, in call order.
pub fn combined_hash(sets: &[&ParamSet]) -> String {
    let mut h = Sha256::new();
    for s in sets {
        h.update(s.content_hash().as_bytes());
    }
    hex_digest(h)
}

fn hex_digest(h: Sha256) -> String {
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Lazily binds one `ParamSet` into a graph, trainable or frozen.
pub struct Binding<'p> {
    params: &'p ParamSet,
    trainable: bool,
    nodes: Vec<Option<NodeId>>,
}

impl<'p> Binding<'p> {
    pub fn trainable(params: &'p ParamSet) -> Self {
        Binding {
            params,
            trainable: true,
            nodes: vec![None; params.len()],
        }
    }

    pub fn frozen(params: &'p ParamSet) -> Self {
        Binding {
            params,
            trainable: false,
            nodes: vec![None; params.len()],
        }
    }

    pub fn node(&mut self, g: &mut Graph, id: ParamId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let value = self.params.value(id).clone();
        let n = if self.trainable {
            g.input(value)
        } else {
            g.constant(value)
        };
        self.nodes[id.0] = Some(n);
        n
    }

    /// Per-parameter gradients (zeros for parameters the loss never touched).
    pub fn gradients(&self, grads: &Grads) -> Vec<ArrayD<f64>> {
        self.params
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| match self.nodes[i] {
                Some(n) => grads
                    .get(n)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(v.raw_dim())),
                None => ArrayD::zeros(v.raw_dim()),
            })
            .collect()
    }
}

pub fn add_grads(acc: &mut [ArrayD<f64>], delta: &[ArrayD<f64>]) {
    for (a, d) in acc.iter_mut().zip(delta.iter()) {
        *a += d;
    }
}

pub fn scale_grads(acc: &mut [ArrayD<f64>], s: f64) {
    for a in acc.iter_mut() {
        a.mapv_inplace(|x| x * s);
    }
}

/// Adaptive moment estimation over one parameter set.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params
                .values()
                .iter()
                .map(|v| ArrayD::zeros(v.raw_dim()))
                .collect(),
            v: params
                .values()
                .iter()
                .map(|v| ArrayD::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), params.len(), "adam: grad count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            self.v[i]
                .zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = params.value_mut(ParamId(i));
            ndarray::Zip::from(p.view_mut())
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p = quantize_f32(*p - self.lr * mhat / (vhat.sqrt() + self.eps));
                });
        }
    }
}

// ---------------------------------------------------------------------------
// initializers

/// He-style normal init scaled by fan-in.
pub fn kaiming(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
    let fan_in: usize = if shape.len() >= 2 {
        shape[1..].iter().product::<usize>().max(1)
    } else {
        shape[0].max(1)
    };
    let std = (2.0 / fan_in as f64).sqrt();
    standard_normal(rng, shape).mapv(|x| x * std)
}

/// For linear weights stored (in, out): fan-in is the first axis.
pub fn kaiming_linear(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> ArrayD<f64> {
    let std = (2.0 / in_dim as f64).sqrt();
    standard_normal(rng, &[in_dim, out_dim]).mapv(|x| x * std)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Matrix (rows, cols) with orthonormal rows (requires cols >= rows), built by
/// Gram-Schmidt on Gaussian rows. `m.dot(m.t()) == I`.
pub fn orthonormal_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    assert!(cols >= rows, "orthonormal_rows requires cols >= rows");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = standard_normal(rng, &[cols]).into_raw_vec_and_offset().0;
        for b in &basis {
            let dot: f64 = v.iter().zip(b.iter()).map(|(a, b)| a * b).sum();
            for (vi, bi) in v.iter_mut().zip(b.iter()) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw, resample
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        basis.push(v);
    }
    let flat: Vec<f64> = basis.into_iter().flatten().collect();
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), flat).unwrap()
}

pub fn identity_matrix(n: usize) -> ArrayD<f64> {
    let mut m = ArrayD::zeros(IxDyn(&[n, n]));
    for i in 0..n {
        m[[i, i]] = 1.0;
    }
    m
}

// ---------------------------------------------------------------------------
// layers

/// Fully connected layer; weight stored (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Linear {
            w: params.add(format!("{prefix}.w"), kaiming_linear(rng, in_dim, out_dim)),
            b: params.add(format!("{prefix}.b"), zeros(&[out_dim])),
        }
    }

    /// Zero-initialized layer (zero output at init; used for residual branch
    /// tails so fresh blocks start as the identity).
    pub fn new_zeroed(params: &mut ParamSet, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: params.add(format!("{prefix}.w"), zeros(&[in_dim, out_dim])),
            b: params.add(format!("{prefix}.b"), zeros(&[out_dim])),
        }
    }

    /// Input (..., in) -> (..., out). Higher-rank inputs are flattened over
    /// the leading axes and restored.
    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, x: NodeId) -> NodeId {
        let shape = g.shape(x).to_vec();
        let f = *shape.last().unwrap();
        let lead: usize = shape[..shape.len() - 1].iter().product();
        let w = bind.node(g, self.w);
        let b = bind.node(g, self.b);
        let out_dim = g.shape(w)[1];
        let x2 = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[lead, f])
        };
        let y = g.matmul(x2, w);
        let y = g.bias_add(y, b);
        if shape.len() == 2 {
            y
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = out_dim;
            g.reshape(y, &out_shape)
        }
    }
}

/// kxk convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv {
            w: params.add(format!("{prefix}.w"), kaiming(rng, &[out_ch, in_ch, k, k])),
            b: params.add(format!("{prefix}.b"), zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    /// Zero-initialized conv (exactly zero output at init).
    pub fn new_zeroed(
        params: &mut ParamSet,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv {
            w: params.add(format!("{prefix}.w"), zeros(&[out_ch, in_ch, k, k])),
            b: params.add(format!("{prefix}.b"), zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, x: NodeId) -> NodeId {
        let w = bind.node(g, self.w);
        let b = bind.node(g, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad);
        // bias over the channel axis: (b,o,h,w) -> (b,h,w,o), add, restore
        let p = g.permute(y, &[0, 2, 3, 1]);
        let p = g.bias_add(p, b);
        g.permute(p, &[0, 3, 1, 2])
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{prefix}.gain"), ArrayD::ones(IxDyn(&[dim]))),
            bias: params.add(format!("{prefix}.bias"), zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, x: NodeId) -> NodeId {
        let gain = bind.node(g, self.gain);
        let bias = bind.node(g, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

// ---------------------------------------------------------------------------
// deterministic data-parallel step

/// Splits `0..n` into up to `chunks` contiguous runs. The chunk count is a
/// fixed function of the inputs (never of the thread count), so results are
/// identical however rayon schedules them.
pub fn chunk_ranges(n: usize, chunks: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = chunks.min(n).max(1);
    let base = n / chunks;
    let extra = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// One data-parallel forward/backward step over fixed chunks.
///
/// `f` builds a scalar mean-loss node for its chunk range plus auxiliary
/// scalars (loss components). Per-chunk losses, gradients and aux values are
/// averaged with weights `len/total` in chunk order, so the result is
/// bit-stable across thread schedules and equals the full-batch mean.
pub fn parallel_chunks<F>(
    param_sets: &[&ParamSet],
    n: usize,
    chunks: usize,
    f: F,
) -> (f64, Vec<Vec<ArrayD<f64>>>, Vec<f64>)
where
    F: Fn(std::ops::Range<usize>, &mut crate::autodiff::Graph, &mut [Binding]) -> (NodeId, Vec<f64>)
        + Sync,
{
    use rayon::prelude::*;
    let ranges = chunk_ranges(n, chunks);
    let results: Vec<(f64, Vec<Vec<ArrayD<f64>>>, Vec<f64>, usize)> = ranges
        .par_iter()
        .map(|r| {
            let mut g = crate::autodiff::Graph::new();
            let mut binds: Vec<Binding> =
                param_sets.iter().map(|p| Binding::trainable(*p)).collect();
            let (loss, aux) = f(r.clone(), &mut g, &mut binds);
            let grads = g.backward(loss);
            let set_grads: Vec<Vec<ArrayD<f64>>> =
                binds.iter().map(|b| b.gradients(&grads)).collect();
            (g.scalar(loss), set_grads, aux, r.len())
        })
        .collect();

    let mut total_loss = 0.0;
    let mut agg: Option<Vec<Vec<ArrayD<f64>>>> = None;
    let mut aux_agg: Vec<f64> = Vec::new();
    for (loss, grads, aux, len) in results {
        let w = len as f64 / n as f64;
        total_loss += w * loss;
        if aux_agg.is_empty() {
            aux_agg = vec![0.0; aux.len()];
        }
        for (a, v) in aux_agg.iter_mut().zip(aux.iter()) {
            *a += w * v;
        }
        match &mut agg {
            None => {
                let mut scaled = grads;
                for set in scaled.iter_mut() {
                    scale_grads(set, w);
                }
                agg = Some(scaled);
            }
            Some(acc) => {
                for (aset, gset) in acc.iter_mut().zip(grads.iter()) {
                    for (a, g) in aset.iter_mut().zip(gset.iter()) {
                        a.zip_mut_with(g, |a, &g| *a += w * g);
                    }
                }
            }
        }
    }
    (total_loss, agg.unwrap_or_default(), aux_agg)
}

/// Sinusoidal embedding of a timestep index, dimension `dim` (even).
pub fn sinusoidal_embedding(t: f64, dim: usize) -> ArrayD<f64> {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    ArrayD::from_shape_vec(IxDyn(&[dim]), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn params_are_f32_exact() {
        let mut p = ParamSet::new();
        let id = p.add("w", ArrayD::from_elem(IxDyn(&[3]), 0.1f64));
        for &v in p.value(id).iter() {
            assert_eq!(v, v as f32 as f64);
            assert_ne!(v, 0.1f64); // 0.1 is not f32-representable
        }
    }

    #[test]
    fn hash_changes_with_values_and_names() {
        let mut a = ParamSet::new();
        a.add("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut b = ParamSet::new();
        b.add("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        assert_eq!(a.content_hash(), b.content_hash());
        let mut c = ParamSet::new();
        c.add("w", ArrayD::from_elem(IxDyn(&[2]), 2.0));
        assert_ne!(a.content_hash(), c.content_hash());
        let mut d = ParamSet::new();
        d.add("v", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        assert_ne!(a.content_hash(), d.content_hash());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamSet::new();
        let id = p.add("x", ArrayD::from_elem(IxDyn(&[4]), 5.0));
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let grad = p.value(id).mapv(|x| 2.0 * x); // d/dx x^2
            opt.step(&mut p, &[grad]);
        }
        for &v in p.value(id).iter() {
            assert!(v.abs() < 1e-2, "adam failed to converge: {v}");
        }
    }

    #[test]
    fn orthonormal_rows_are_orthonormal() {
        let m = orthonormal_rows(&mut rng_from(1), 16, 64);
        let m2 = m.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let gram = m2.dot(&m2.t());
        for i in 0..16 {
            for j in 0..16 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn linear_layer_shapes_and_gradients() {
        let mut params = ParamSet::new();
        let mut rng = rng_from(2);
        let lin = Linear::new(&mut params, &mut rng, "lin", 6, 3);
        let mut g = Graph::new();
        let mut bind = Binding::trainable(&params);
        let x = g.constant(standard_normal(&mut rng, &[5, 6]));
        let y = lin.forward(&mut g, &mut bind, x);
        assert_eq!(g.shape(y), &[5, 3]);
        let sq = g.square(y);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        let out = bind.gradients(&grads);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), &[6, 3]);
        assert_eq!(out[1].shape(), &[3]);
        assert!(out[0].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn frozen_binding_gets_no_gradients() {
        let mut params = ParamSet::new();
        let mut rng = rng_from(3);
        let lin = Linear::new(&mut params, &mut rng, "lin", 4, 2);
        let mut g = Graph::new();
        let mut bind = Binding::frozen(&params);
        let x = g.input(standard_normal(&mut rng, &[3, 4]));
        let y = lin.forward(&mut g, &mut bind, x);
        let sq = g.square(y);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        // input still receives a gradient through the frozen layer
        assert!(grads.get(x).is_some());
        let pg = bind.gradients(&grads);
        assert!(pg.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding(1.0, 16);
        let b = sinusoidal_embedding(2.0, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
