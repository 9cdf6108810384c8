//! Self-attention network approximating the causal mechanism that combines
//! identity and pathology factors: one token per latent channel, pre-norm
//! residual blocks, and channel projections initialized as exact inverses so
//! a fresh network is the identity map.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{
    identity_matrix, orthonormal_rows, zeros, Binding, LayerNorm, Linear, ParamSet,
};
use crate::rng::{child_seed, rng_from};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Latent channel count (token count).
    pub n_channels: usize,
    /// Latent spatial side; one token is a flattened h*w vector.
    pub latent_hw: usize,
    /// Model width. Must be >= h*w so the channel projections can be exact
    /// inverses.
    pub dim: usize,
    /// Layer count k.
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden multiple of `dim`.
    pub ffn_mult: usize,
    /// Scale on the additive exogenous noise of the causal composition
    /// (0 disables it).
    pub exogenous_scale: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            n_channels: 4,
            latent_hw: 16,
            dim: 256,
            layers: 4,
            heads: 4,
            ffn_mult: 2,
            exogenous_scale: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn token_len(&self) -> usize {
        self.latent_hw * self.latent_hw
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("transformer needs >= 1 layer".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config("dim must be divisible by heads".into()));
        }
        if self.dim < self.token_len() {
            return Err(Error::Config(format!(
                "dim ({}) must be >= h*w ({}) for invertible channel projections",
                self.dim,
                self.token_len()
            )));
        }
        if self.exogenous_scale < 0.0 {
            return Err(Error::Config("exogenous_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    attn_out: Linear,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

/// The causal modulation network T.
#[derive(Debug, Clone)]
pub struct CausalTransformer {
    pub cfg: TransformerConfig,
    pub params: ParamSet,
    in_proj: crate::nn::ParamId,
    out_proj: crate::nn::ParamId,
    chan_embed: crate::nn::ParamId,
    blocks: Vec<Block>,
}

impl CausalTransformer {
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let hw = cfg.token_len();
        let d = cfg.dim;

        // Channel projections are exact inverses at init (identity when the
        // dimensions match, orthonormal rows otherwise), attention/FFN output
        // layers start at zero: a fresh network computes f == z.
        let w_in = if d == hw {
            identity_matrix(d)
        } else {
            orthonormal_rows(&mut rng_from(child_seed(seed, 0)), hw, d)
        };
        let w_out = w_in
            .clone()
            .permuted_axes(ndarray::IxDyn(&[1, 0]))
            .as_standard_layout()
            .to_owned();
        let in_proj = params.add("t.in_proj", w_in);
        let out_proj = params.add("t.out_proj", w_out);
        let chan_embed = params.add("t.chan_embed", zeros(&[cfg.n_channels * d]));

        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut rng = rng_from(child_seed(seed, 100 + l as u64));
            let prefix = format!("t.block{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(&mut params, &format!("{prefix}.ln1"), d),
                qkv: Linear::new(&mut params, &mut rng, &format!("{prefix}.qkv"), d, 3 * d),
                attn_out: Linear::new_zeroed(&mut params, &format!("{prefix}.attn_out"), d, d),
                ln2: LayerNorm::new(&mut params, &format!("{prefix}.ln2"), d),
                ffn1: Linear::new(
                    &mut params,
                    &mut rng,
                    &format!("{prefix}.ffn1"),
                    d,
                    cfg.ffn_mult * d,
                ),
                ffn2: Linear::new_zeroed(
                    &mut params,
                    &format!("{prefix}.ffn2"),
                    cfg.ffn_mult * d,
                    d,
                ),
            });
        }

        Ok(CausalTransformer {
            cfg,
            params,
            in_proj,
            out_proj,
            chan_embed,
            blocks,
        })
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        let hw = self.cfg.latent_hw;
        if shape.len() != 4 || shape[1] != self.cfg.n_channels || shape[2] != hw || shape[3] != hw
        {
            return Err(Error::Shape {
                context: "causal_modulate input",
                expected: vec![0, self.cfg.n_channels, hw, hw],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// f = T(z): (b,n,h,w) -> (b,n,h,w), shape preserved.
    pub fn modulate_node(&self, g: &mut Graph, bind: &mut Binding, z: NodeId) -> NodeId {
        let s = g.shape(z).to_vec();
        self.check_latent(&s).expect("modulate_node: bad latent shape");
        let (b, n, h, w) = (s[0], s[1], s[2], s[3]);
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;

        // channels as tokens
        let tokens = g.reshape(z, &[b, n, h * w]);
        let w_in = bind.node(g, self.in_proj);
        let flat = g.reshape(tokens, &[b * n, h * w]);
        let mut t = g.matmul(flat, w_in); // (b*n, d)
        // learned channel embedding (zero at init)
        let t3 = g.reshape(t, &[b, n * d]);
        let ce = bind.node(g, self.chan_embed);
        let t3 = g.bias_add(t3, ce);
        t = g.reshape(t3, &[b * n, d]);

        for blk in &self.blocks {
            // attention sub-block, pre-norm
            let tn = g.reshape(t, &[b, n, d]);
            let normed = blk.ln1.forward(g, bind, tn);
            let qkv = blk.qkv.forward(g, bind, normed); // (b, n, 3d)
            let q = g.slice_axis(qkv, 2, 0, d);
            let k = g.slice_axis(qkv, 2, d, d);
            let v = g.slice_axis(qkv, 2, 2 * d, d);
            // (b, n, d) -> (b*heads, n, dh)
            let split = |g: &mut Graph, x: NodeId| {
                let x = g.reshape(x, &[b, n, heads, dh]);
                let x = g.permute(x, &[0, 2, 1, 3]);
                g.reshape(x, &[b * heads, n, dh])
            };
            let qh = split(g, q);
            let kh = split(g, k);
            let vh = split(g, v);
            let kt = g.permute(kh, &[0, 2, 1]); // (b*heads, dh, n)
            let scores = g.batch_matmul(qh, kt);
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax(scores);
            let ctx = g.batch_matmul(attn, vh); // (b*heads, n, dh)
            let ctx = g.reshape(ctx, &[b, heads, n, dh]);
            let ctx = g.permute(ctx, &[0, 2, 1, 3]);
            let ctx = g.reshape(ctx, &[b, n, d]);
            let attn_out = blk.attn_out.forward(g, bind, ctx);
            let attn_out = g.reshape(attn_out, &[b * n, d]);
            t = g.add(t, attn_out);

            // feed-forward sub-block, pre-norm
            let tn = g.reshape(t, &[b, n, d]);
            let normed = blk.ln2.forward(g, bind, tn);
            let h1 = blk.ffn1.forward(g, bind, normed);
            let h1 = g.silu(h1);
            let h2 = blk.ffn2.forward(g, bind, h1);
            let h2 = g.reshape(h2, &[b * n, d]);
            t = g.add(t, h2);
        }

        let w_out = bind.node(g, self.out_proj);
        let out = g.matmul(t, w_out); // (b*n, h*w)
        g.reshape(out, &[b, n, h, w])
    }

    /// Array-level modulation.
    pub fn modulate(&self, z: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        self.check_latent(z.shape())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "causal_modulate input".into(),
            });
        }
        let mut g = Graph::new();
        let mut bind = Binding::frozen(&self.params);
        let zn = g.constant(z.clone());
        let f = self.modulate_node(&mut g, &mut bind, zn);
        Ok(g.value(f).clone())
    }

    /// g(z^{1:n-1}, z^n, eps): channel concatenation with optional additive
    /// exogenous noise, then causal modulation. Node-level.
    pub fn compose_node(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        identity: NodeId,
        pathology: NodeId,
        exogenous: Option<&ArrayD<f64>>,
    ) -> NodeId {
        let z = if self.cfg.n_channels == 1 {
            pathology
        } else {
            g.concat(&[identity, pathology], 1)
        };
        let z = match exogenous {
            Some(eps) if self.cfg.exogenous_scale > 0.0 => {
                let e = g.constant(eps.clone());
                let e = g.scale(e, self.cfg.exogenous_scale);
                g.add(z, e)
            }
            _ => z,
        };
        self.modulate_node(g, bind, z)
    }

    /// Array-level counterfactual composition: f_G = T(g(identity, pathology, eps)).
    pub fn compose_counterfactual(
        &self,
        identity: &ArrayD<f64>,
        pathology: &ArrayD<f64>,
        exogenous: Option<&ArrayD<f64>>,
    ) -> Result<ArrayD<f64>> {
        let n = self.cfg.n_channels;
        let hw = self.cfg.latent_hw;
        let b = pathology.shape().first().copied().unwrap_or(0);
        if pathology.shape() != [b, 1, hw, hw] {
            return Err(Error::Shape {
                context: "compose pathology",
                expected: vec![b, 1, hw, hw],
                got: pathology.shape().to_vec(),
            });
        }
        if n > 1 && identity.shape() != [b, n - 1, hw, hw] {
            return Err(Error::Shape {
                context: "compose identity",
                expected: vec![b, n - 1, hw, hw],
                got: identity.shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        let mut bind = Binding::frozen(&self.params);
        let id = g.constant(identity.clone());
        let p = g.constant(pathology.clone());
        let f = self.compose_node(&mut g, &mut bind, id, p, exogenous);
        Ok(g.value(f).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_l2};
    use crate::rng::{rng_from, standard_normal};
    use ndarray::Axis;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            n_channels: 2,
            latent_hw: 4,
            dim: 32,
            layers: 2,
            heads: 4,
            ffn_mult: 2,
            exogenous_scale: 0.0,
        }
    }

    #[test]
    fn shape_preserved_for_valid_inputs() {
        let t = CausalTransformer::new(tiny_cfg(), 1).unwrap();
        let z = standard_normal(&mut rng_from(2), &[3, 2, 4, 4]);
        let f = t.modulate(&z).unwrap();
        assert_eq!(f.shape(), z.shape());
        // channel mismatch rejected
        let bad = standard_normal(&mut rng_from(3), &[3, 5, 4, 4]);
        assert!(t.modulate(&bad).is_err());
    }

    #[test]
    fn fresh_network_is_the_identity() {
        // dim == h*w: projections are identity matrices
        let t = CausalTransformer::new(
            TransformerConfig {
                n_channels: 3,
                latent_hw: 4,
                dim: 16,
                layers: 3,
                heads: 4,
                ffn_mult: 2,
                exogenous_scale: 0.0,
            },
            7,
        )
        .unwrap();
        let z = standard_normal(&mut rng_from(4), &[2, 3, 4, 4]);
        let f = t.modulate(&z).unwrap();
        let max_err = f
            .iter()
            .zip(z.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-10, "identity at init violated: {max_err}");

        // dim > h*w: orthonormal projection pair still round-trips exactly
        let t2 = CausalTransformer::new(tiny_cfg(), 8).unwrap();
        let z2 = standard_normal(&mut rng_from(5), &[2, 2, 4, 4]);
        let f2 = t2.modulate(&z2).unwrap();
        let max_err2 = f2
            .iter()
            .zip(z2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err2 < 1e-9, "projection roundtrip violated: {max_err2}");
    }

    #[test]
    fn deterministic_given_params_and_input() {
        let t = CausalTransformer::new(tiny_cfg(), 9).unwrap();
        let z = standard_normal(&mut rng_from(6), &[1, 2, 4, 4]);
        assert_eq!(t.modulate(&z).unwrap(), t.modulate(&z).unwrap());
    }

    /// Directional-derivative check of u . T(z) against finite differences
    /// on a 2-channel 4x4 input.
    #[test]
    fn modulation_gradient_matches_finite_differences() {
        let mut t = CausalTransformer::new(tiny_cfg(), 10).unwrap();
        perturb_params(&mut t, 11);
        let z0 = standard_normal(&mut rng_from(12), &[1, 2, 4, 4]);
        let u = standard_normal(&mut rng_from(13), &[1, 2, 4, 4]);

        let mut g = Graph::new();
        let mut bind = Binding::frozen(&t.params);
        let z = g.input(z0.clone());
        let f = t.modulate_node(&mut g, &mut bind, z);
        let un = g.constant(u.clone());
        let dot = g.mul(f, un);
        let loss = g.sum_all(dot);
        let grads = g.backward(loss);
        let analytic = grads.expect(z).clone();

        let fd = finite_difference(
            |zv| {
                let f = t.modulate(zv).unwrap();
                f.iter().zip(u.iter()).map(|(a, b)| a * b).sum()
            },
            &z0,
            1e-5,
        );
        let rel = relative_l2(&analytic, &fd);
        assert!(rel < 1e-3, "rel err {rel:.2e}");

        // gradient flows to every input channel
        for c in 0..2 {
            let chan = analytic.index_axis(Axis(1), c);
            assert!(
                chan.iter().any(|&v| v.abs() > 1e-12),
                "no gradient into channel {c}"
            );
        }
    }

    /// Adds noise to the zero-initialized branches so the test exercises a
    /// non-identity network.
    fn perturb_params(t: &mut CausalTransformer, seed: u64) {
        let mut rng = rng_from(seed);
        for i in 0..t.params.len() {
            let id = crate::nn::ParamId(i);
            let v = t.params.value(id).clone();
            let noise = standard_normal(&mut rng, v.shape());
            t.params.set_value(id, v + noise.mapv(|x| 0.05 * x));
        }
    }

    #[test]
    fn compose_matches_modulate_on_own_pathology() {
        let t = CausalTransformer::new(tiny_cfg(), 14).unwrap();
        let z = standard_normal(&mut rng_from(15), &[2, 2, 4, 4]);
        let id = z.slice_axis(Axis(1), ndarray::Slice::from(0..1)).to_owned();
        let p = z.slice_axis(Axis(1), ndarray::Slice::from(1..2)).to_owned();
        let f_compose = t.compose_counterfactual(&id, &p, None).unwrap();
        let f_direct = t.modulate(&z).unwrap();
        assert_eq!(f_compose, f_direct);
    }

    #[test]
    fn exogenous_scale_zero_ignores_noise() {
        let t = CausalTransformer::new(tiny_cfg(), 16).unwrap();
        let z = standard_normal(&mut rng_from(17), &[1, 2, 4, 4]);
        let id = z.slice_axis(Axis(1), ndarray::Slice::from(0..1)).to_owned();
        let p = z.slice_axis(Axis(1), ndarray::Slice::from(1..2)).to_owned();
        let eps = standard_normal(&mut rng_from(18), &[1, 2, 4, 4]);
        let with = t.compose_counterfactual(&id, &p, Some(&eps)).unwrap();
        let without = t.compose_counterfactual(&id, &p, None).unwrap();
        assert_eq!(with, without);

        // non-zero scale changes the composition deterministically
        let mut cfg = tiny_cfg();
        cfg.exogenous_scale = 0.5;
        let t2 = CausalTransformer::new(cfg, 16).unwrap();
        let a = t2.compose_counterfactual(&id, &p, Some(&eps)).unwrap();
        let b = t2.compose_counterfactual(&id, &p, Some(&eps)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, t2.compose_counterfactual(&id, &p, None).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.dim = 8; // < h*w = 16
        assert!(CausalTransformer::new(cfg, 1).is_err());
        let mut cfg = tiny_cfg();
        cfg.heads = 5; // does not divide 32
        assert!(CausalTransformer::new(cfg, 1).is_err());
    }
}
