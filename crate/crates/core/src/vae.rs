//! Channel-split variational autoencoder: identity channels `1..n-1`, a
//! pathology channel `n`, the five training losses, and the group-supervised
//! pathology swap.

use crate::autodiff::{Graph, NodeId};
use crate::encoders::{IdentityEncoder, PathologyEncoder};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv, Linear, ParamSet};
use crate::rng::rng_from;
use crate::ssim::ssim_node;
use ndarray::{ArrayD, Axis, IxDyn, Slice};
use serde::{Deserialize, Serialize};

const LOGVAR_MIN: f64 = -8.0;
const LOGVAR_MAX: f64 = 4.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeConfig {
    pub image_size: usize,
    /// Latent channel count n; channel n-1 (0-based) is the pathology factor.
    pub n_channels: usize,
    pub n_cls: usize,
    /// Encoder conv widths (two stages).
    pub enc_widths: (usize, usize),
    /// Decoder conv widths (three stages, coarse to fine).
    pub dec_widths: (usize, usize, usize),
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            image_size: 64,
            n_channels: 4,
            n_cls: 4,
            enc_widths: (16, 24),
            dec_widths: (24, 16, 8),
        }
    }
}

impl VaeConfig {
    pub fn latent_hw(&self) -> usize {
        self.image_size / 4
    }

    pub fn latent_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.n_channels, self.latent_hw(), self.latent_hw()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 || self.image_size < 16 {
            return Err(Error::Config(
                "image_size must be a multiple of 4, at least 16".into(),
            ));
        }
        if self.n_channels < 1 {
            return Err(Error::Config("n_channels must be >= 1".into()));
        }
        if self.n_cls < 1 {
            return Err(Error::Config("n_cls must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss weights; defaults are alpha 0.1, beta 5.0, gamma 1.0, delta 2.5,
/// lambda_ssim 0.01.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 5.0,
            gamma: 1.0,
            delta: 2.5,
            lambda_ssim: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("lambda_ssim", self.lambda_ssim),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-batch latent code; arrays are (b, n, h, w).
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub mean: ArrayD<f64>,
    pub logvar: ArrayD<f64>,
    pub sample: ArrayD<f64>,
    pub n: usize,
}

impl LatentCode {
    /// Channels 1..n-1 of the sample.
    pub fn identity_view(&self) -> ArrayD<f64> {
        self.sample
            .slice_axis(Axis(1), Slice::from(0..self.n as isize - 1))
            .to_owned()
    }

    /// Channel n of the sample.
    pub fn pathology_view(&self) -> ArrayD<f64> {
        self.sample
            .slice_axis(Axis(1), Slice::from(self.n as isize - 1..self.n as isize))
            .to_owned()
    }

    /// Channel n of the mean (the classifier input).
    pub fn pathology_mean(&self) -> ArrayD<f64> {
        self.mean
            .slice_axis(Axis(1), Slice::from(self.n as isize - 1..self.n as isize))
            .to_owned()
    }
}

/// Exchanges the pathology channel between two codes; inputs untouched.
pub fn swap_pathology(a: &LatentCode, b: &LatentCode) -> Result<(LatentCode, LatentCode)> {
    if a.n != b.n || a.sample.shape() != b.sample.shape() {
        return Err(Error::Shape {
            context: "swap_pathology",
            expected: a.sample.shape().to_vec(),
            got: b.sample.shape().to_vec(),
        });
    }
    if a.n < 2 {
        return Err(Error::Config(
            "swap_pathology requires n >= 2 (no identity channels to keep)".into(),
        ));
    }
    let c = a.n - 1;
    let swap_field = |x: &ArrayD<f64>, y: &ArrayD<f64>| -> (ArrayD<f64>, ArrayD<f64>) {
        let mut xa = x.clone();
        let mut yb = y.clone();
        xa.index_axis_mut(Axis(1), c)
            .assign(&y.index_axis(Axis(1), c));
        yb.index_axis_mut(Axis(1), c)
            .assign(&x.index_axis(Axis(1), c));
        (xa, yb)
    };
    let (mean_a, mean_b) = swap_field(&a.mean, &b.mean);
    let (logvar_a, logvar_b) = swap_field(&a.logvar, &b.logvar);
    let (sample_a, sample_b) = swap_field(&a.sample, &b.sample);
    Ok((
        LatentCode {
            mean: mean_a,
            logvar: logvar_a,
            sample: sample_a,
            n: a.n,
        },
        LatentCode {
            mean: mean_b,
            logvar: logvar_b,
            sample: sample_b,
            n: b.n,
        },
    ))
}

/// Graph-node view of an encoded batch.
pub struct EncodedNodes {
    pub mean: NodeId,
    pub logvar: NodeId,
    pub sample: NodeId,
}

/// Encoder/decoder with a channel-split latent and a classifier head on the
/// pathology-channel mean.
#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub params: ParamSet,
    enc1: Conv,
    enc2: Conv,
    enc3: Conv,
    enc_head: Conv,
    dec1: Conv,
    dec2: Conv,
    dec3: Conv,
    dec_out: Conv,
    cls_hidden: Linear,
    cls_out: Linear,
}

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = rng_from(seed);
        let n = cfg.n_channels;
        let (e1, e2) = cfg.enc_widths;
        let (d1, d2, d3) = cfg.dec_widths;
        let hw = cfg.latent_hw();

        let enc1 = Conv::new(&mut params, &mut rng, "enc.conv1", 1, e1, 3, 2, 1);
        let enc2 = Conv::new(&mut params, &mut rng, "enc.conv2", e1, e2, 3, 2, 1);
        let enc3 = Conv::new(&mut params, &mut rng, "enc.conv3", e2, e2, 3, 1, 1);
        let enc_head = Conv::new(&mut params, &mut rng, "enc.head", e2, 2 * n, 1, 1, 0);

        let dec1 = Conv::new(&mut params, &mut rng, "dec.conv1", n, d1, 3, 1, 1);
        let dec2 = Conv::new(&mut params, &mut rng, "dec.conv2", d1, d2, 3, 1, 1);
        let dec3 = Conv::new(&mut params, &mut rng, "dec.conv3", d2, d3, 3, 1, 1);
        let dec_out = Conv::new(&mut params, &mut rng, "dec.out", d3, 1, 3, 1, 1);

        let cls_hidden = Linear::new(&mut params, &mut rng, "cls.hidden", hw * hw, 64);
        let cls_out = Linear::new(&mut params, &mut rng, "cls.out", 64, cfg.n_cls);

        Ok(Vae {
            cfg,
            params,
            enc1,
            enc2,
            enc3,
            enc_head,
            dec1,
            dec2,
            dec3,
            dec_out,
            cls_hidden,
            cls_out,
        })
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape {
                context: "vae input image",
                expected: vec![0, 1, s, s],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Encode to (mean, logvar, sample) nodes. `eps` supplies the
    /// reparameterization noise; `None` is the deterministic mode
    /// (sample == mean, the logvar -> -inf limit).
    pub fn encode_node(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        x: NodeId,
        eps: Option<&ArrayD<f64>>,
    ) -> EncodedNodes {
        let h = self.enc1.forward(g, bind, x);
        let h = g.silu(h);
        let h = self.enc2.forward(g, bind, h);
        let h = g.silu(h);
        let h = self.enc3.forward(g, bind, h);
        let h = g.silu(h);
        let h = self.enc_head.forward(g, bind, h);
        let n = self.cfg.n_channels;
        let mean = g.slice_axis(h, 1, 0, n);
        let logvar_raw = g.slice_axis(h, 1, n, n);
        let logvar = g.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        let sample = match eps {
            Some(eps) => {
                assert_eq!(g.shape(mean), eps.shape(), "encode: eps shape mismatch");
                let half = g.scale(logvar, 0.5);
                let std = g.exp(half);
                let e = g.constant(eps.clone());
                let noise = g.mul(std, e);
                g.add(mean, noise)
            }
            None => mean,
        };
        EncodedNodes {
            mean,
            logvar,
            sample,
        }
    }

    /// Decode a causally modulated latent (b,n,h,w) to an image in [0,1].
    pub fn decode_node(&self, g: &mut Graph, bind: &mut Binding, f: NodeId) -> NodeId {
        let h = self.dec1.forward(g, bind, f);
        let h = g.silu(h);
        let h = g.upsample_nearest2(h);
        let h = self.dec2.forward(g, bind, h);
        let h = g.silu(h);
        let h = g.upsample_nearest2(h);
        let h = self.dec3.forward(g, bind, h);
        let h = g.silu(h);
        let h = self.dec_out.forward(g, bind, h);
        g.sigmoid(h)
    }

    /// Classifier logits from the pathology-channel mean (b,1,h,w).
    pub fn classify_node(&self, g: &mut Graph, bind: &mut Binding, zn_mean: NodeId) -> NodeId {
        let s = g.shape(zn_mean).to_vec();
        let flat = g.reshape(zn_mean, &[s[0], s[2] * s[3]]);
        let h = self.cls_hidden.forward(g, bind, flat);
        let h = g.silu(h);
        self.cls_out.forward(g, bind, h)
    }

    /// Array-level encode. Validates shape and finiteness.
    pub fn encode(&self, x: &ArrayD<f64>, eps: Option<&ArrayD<f64>>) -> Result<LatentCode> {
        self.check_image(x.shape())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "vae encode input".into(),
            });
        }
        let mut g = Graph::new();
        let mut bind = Binding::frozen(&self.params);
        let xn = g.constant(x.clone());
        let enc = self.encode_node(&mut g, &mut bind, xn, eps);
        Ok(LatentCode {
            mean: g.value(enc.mean).clone(),
            logvar: g.value(enc.logvar).clone(),
            sample: g.value(enc.sample).clone(),
            n: self.cfg.n_channels,
        })
    }

    /// Array-level decode.
    pub fn decode(&self, f: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let want = self.cfg.latent_shape(f.shape().first().copied().unwrap_or(0));
        if f.shape() != want.as_slice() {
            return Err(Error::Shape {
                context: "vae decode latent",
                expected: want,
                got: f.shape().to_vec(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "vae decode input".into(),
            });
        }
        let mut g = Graph::new();
        let mut bind = Binding::frozen(&self.params);
        let fn_ = g.constant(f.clone());
        let img = self.decode_node(&mut g, &mut bind, fn_);
        Ok(g.value(img).clone())
    }

    /// Array-level classifier probabilities from a full latent mean.
    pub fn classify(&self, mean: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let n = self.cfg.n_channels;
        let zn = mean
            .slice_axis(Axis(1), Slice::from(n as isize - 1..n as isize))
            .to_owned();
        let mut g = Graph::new();
        let mut bind = Binding::frozen(&self.params);
        let z = g.constant(zn);
        let logits = self.classify_node(&mut g, &mut bind, z);
        let p = g.sigmoid(logits);
        Ok(g.value(p).clone())
    }
}

// ---------------------------------------------------------------------------
// losses

/// KL(q || N(0,I)) in closed form: `-0.5 * sum(1 + logvar - mean^2 -
/// exp(logvar))`, summed over elements and averaged over the batch.
pub fn kl_divergence_node(g: &mut Graph, mean: NodeId, logvar: NodeId) -> NodeId {
    let batch = g.shape(mean)[0] as f64;
    let m2 = g.square(mean);
    let ev = g.exp(logvar);
    let t = g.sub(logvar, m2);
    let t = g.sub(t, ev);
    let t = g.add_scalar(t, 1.0);
    let s = g.sum_all(t);
    g.scale(s, -0.5 / batch)
}

/// Array-level KL with validation.
pub fn kl_divergence(mean: &ArrayD<f64>, logvar: &ArrayD<f64>) -> Result<f64> {
    if mean.shape() != logvar.shape() {
        return Err(Error::Shape {
            context: "kl_divergence",
            expected: mean.shape().to_vec(),
            got: logvar.shape().to_vec(),
        });
    }
    if mean.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "kl_divergence input".into(),
        });
    }
    let mut g = Graph::new();
    let m = g.constant(mean.clone());
    let l = g.constant(logvar.clone());
    let kl = kl_divergence_node(&mut g, m, l);
    Ok(g.scalar(kl))
}

/// Pixel MSE plus `lambda * (1 - SSIM)`.
pub fn recon_loss_node(g: &mut Graph, x: NodeId, x_hat: NodeId, lambda_ssim: f64) -> NodeId {
    let mse = g.mse(x, x_hat);
    if lambda_ssim == 0.0 {
        return mse;
    }
    let s = ssim_node(g, x, x_hat);
    let one_minus = g.scale(s, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let weighted = g.scale(one_minus, lambda_ssim);
    g.add(mse, weighted)
}

/// Array-level reconstruction loss.
pub fn recon_loss(x: &ArrayD<f64>, x_hat: &ArrayD<f64>, lambda_ssim: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape {
            context: "recon_loss",
            expected: x.shape().to_vec(),
            got: x_hat.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(x_hat.clone());
    let l = recon_loss_node(&mut g, a, b, lambda_ssim);
    Ok(g.scalar(l))
}

/// Multi-label binary cross-entropy: summed over classes, averaged over the
/// batch. Reduces to the categorical form on one-hot targets.
pub fn classification_loss_node(g: &mut Graph, logits: NodeId, targets: &ArrayD<f64>) -> NodeId {
    let shape = g.shape(logits).to_vec();
    assert_eq!(shape.as_slice(), targets.shape(), "classification targets");
    let batch = shape[0] as f64;
    let elems = g.bce_with_logits(logits, targets);
    let total = g.sum_all(elems);
    g.scale(total, 1.0 / batch)
}

/// Sum of squared distances between two embedding nodes (b,d), divided by the
/// number of pairs (rows are pair members stacked in the batch axis).
pub fn embedding_consistency_node(g: &mut Graph, e: NodeId, e_prime: NodeId, pairs: usize) -> NodeId {
    let d = g.sub(e, e_prime);
    let sq = g.square(d);
    let s = g.sum_all(sq);
    g.scale(s, 1.0 / pairs.max(1) as f64)
}

/// Identity consistency: squared distance in the identity-encoder feature
/// space between originals and swapped reconstructions.
pub fn identity_loss_node(
    g: &mut Graph,
    enc: &IdentityEncoder,
    enc_bind: &mut Binding,
    x: NodeId,
    x_prime: NodeId,
    pairs: usize,
) -> NodeId {
    let e = enc.embed_node(g, enc_bind, x);
    let ep = enc.embed_node(g, enc_bind, x_prime);
    embedding_consistency_node(g, e, ep, pairs)
}

/// Which images the pathology-consistency loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcVariant {
    /// Compare the swapped reconstruction against the pathology DONOR
    /// (x'_A carries B's pathology, so compare with x_B). Default.
    Crossed,
    /// Literal pairing from the training procedure's pseudocode: compare
    /// x'_i against x_i, which penalizes the intended change.
    Literal,
}

impl Default for PcVariant {
    fn default() -> Self {
        PcVariant::Crossed
    }
}

/// Pathology consistency in the pathology-encoder feature space.
/// `x_ref` must already reflect the chosen [`PcVariant`] pairing.
pub fn pathology_consistency_node(
    g: &mut Graph,
    enc: &PathologyEncoder,
    enc_bind: &mut Binding,
    x_ref: NodeId,
    x_prime: NodeId,
    pairs: usize,
) -> NodeId {
    let e = enc.embed_node(g, enc_bind, x_ref);
    let ep = enc.embed_node(g, enc_bind, x_prime);
    embedding_consistency_node(g, e, ep, pairs)
}

/// Scalar loss components of one training step. `vae` and `total` are
/// recombined from the parts so the reported numbers are exactly consistent.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub cls: f64,
    pub id: f64,
    pub pc: f64,
    pub vae: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted sums from the components.
    pub fn recombine(components: [f64; 5], w: &LossWeights) -> Self {
        let [recon, kl, cls, id, pc] = components;
        let vae = recon + w.alpha * kl + w.beta * cls;
        let total = vae + w.gamma * id + w.delta * pc;
        LossBreakdown {
            recon,
            kl,
            cls,
            id,
            pc,
            vae,
            total,
        }
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("kl", self.kl),
            ("cls", self.cls),
            ("id", self.id),
            ("pc", self.pc),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Combines component nodes into the training objective:
/// `vae = recon + alpha*kl + beta*cls`, `total = vae + gamma*id + delta*pc`.
pub fn total_loss_node(
    g: &mut Graph,
    recon: NodeId,
    kl: NodeId,
    cls: NodeId,
    id_pc: Option<(NodeId, NodeId)>,
    w: &LossWeights,
) -> NodeId {
    let akl = g.scale(kl, w.alpha);
    let bcls = g.scale(cls, w.beta);
    let vae = g.add(recon, akl);
    let vae = g.add(vae, bcls);
    match id_pc {
        None => vae,
        Some((id, pc)) => {
            let gid = g.scale(id, w.gamma);
            let dpc = g.scale(pc, w.delta);
            let t = g.add(vae, gid);
            g.add(t, dpc)
        }
    }
}

/// Swap the pathology channel between two latent nodes (b,n,h,w).
pub fn swap_pathology_nodes(g: &mut Graph, a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    let n = g.shape(a)[1];
    assert_eq!(g.shape(a), g.shape(b), "swap nodes: shape mismatch");
    assert!(n >= 2, "swap nodes: need n >= 2");
    let a_id = g.slice_axis(a, 1, 0, n - 1);
    let a_p = g.slice_axis(a, 1, n - 1, 1);
    let b_id = g.slice_axis(b, 1, 0, n - 1);
    let b_p = g.slice_axis(b, 1, n - 1, 1);
    let a_sw = g.concat(&[a_id, b_p], 1);
    let b_sw = g.concat(&[b_id, a_p], 1);
    (a_sw, b_sw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_l2};
    use crate::rng::{rng_from, standard_normal, uniform};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny_vae() -> Vae {
        Vae::new(
            VaeConfig {
                image_size: 16,
                n_channels: 2,
                n_cls: 4,
                enc_widths: (6, 8),
                dec_widths: (8, 6, 4),
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn encode_shapes_and_deterministic_mode() {
        let vae = Vae::new(VaeConfig::default(), 1).unwrap();
        let x = uniform(&mut rng_from(2), &[2, 1, 64, 64], 0.0, 1.0);
        let code = vae.encode(&x, None).unwrap();
        assert_eq!(code.sample.shape(), &[2, 4, 16, 16]);
        assert_eq!(code.mean.shape(), &[2, 4, 16, 16]);
        // deterministic mode: sample == mean (the logvar -> -inf limit)
        assert_eq!(code.sample, code.mean);

        let eps = standard_normal(&mut rng_from(3), &[2, 4, 16, 16]);
        let stoch = vae.encode(&x, Some(&eps)).unwrap();
        assert_ne!(stoch.sample, stoch.mean);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let vae = tiny_vae();
        let wrong = uniform(&mut rng_from(4), &[1, 1, 8, 8], 0.0, 1.0);
        assert!(vae.encode(&wrong, None).is_err());
        let mut bad = uniform(&mut rng_from(5), &[1, 1, 16, 16], 0.0, 1.0);
        bad[[0, 0, 0, 0]] = f64::NAN;
        assert!(vae.encode(&bad, None).is_err());
    }

    #[test]
    fn decode_range_and_determinism() {
        let vae = tiny_vae();
        let z = ndarray::ArrayD::zeros(IxDyn(&[1, 2, 4, 4]));
        let img = vae.decode(&z).unwrap();
        assert_eq!(img.shape(), &[1, 1, 16, 16]);
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let img2 = vae.decode(&z).unwrap();
        assert_eq!(img, img2);
        // shape contract
        let bad = ndarray::ArrayD::<f64>::zeros(IxDyn(&[1, 3, 4, 4]));
        assert!(vae.decode(&bad).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        // prior == posterior
        let zeros = ndarray::ArrayD::zeros(IxDyn(&[1, 1, 1, 1]));
        assert_eq!(kl_divergence(&zeros, &zeros).unwrap(), 0.0);
        // single element mean=1, logvar=0 -> 0.5
        let mean = ndarray::ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0);
        let kl = kl_divergence(&mean, &zeros).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        // always >= 0 on random inputs
        let m = standard_normal(&mut rng_from(6), &[2, 3, 2, 2]);
        let lv = standard_normal(&mut rng_from(7), &[2, 3, 2, 2]);
        assert!(kl_divergence(&m, &lv).unwrap() >= 0.0);
    }

    /// Monte-Carlo oracle: KL = E_q[log q(z) - log p(z)] estimated by
    /// sampling, within 1% relative at 1e5 draws.
    #[test]
    fn kl_matches_monte_carlo_oracle() {
        let shape = [1usize, 2, 2, 2];
        let mean = uniform(&mut rng_from(8), &shape, -1.0, 1.0);
        let logvar = uniform(&mut rng_from(9), &shape, -1.0, 0.5);
        let closed = kl_divergence(&mean, &logvar).unwrap();

        let mut rng = rng_from(10);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let mut term = 0.0;
            for (m, lv) in mean.iter().zip(logvar.iter()) {
                let std = (lv / 2.0).exp();
                let eta: f64 = rng.sample(StandardNormal);
                let z = m + std * eta;
                // log q - log p for one coordinate
                let log_q = -0.5 * (lv + (z - m) * (z - m) / lv.exp());
                let log_p = -0.5 * z * z;
                term += log_q - log_p;
            }
            acc += term;
        }
        let mc = acc / draws as f64;
        let rel = (closed - mc).abs() / closed.abs();
        assert!(
            rel < 0.01,
            "closed {closed} vs MC {mc}: rel err {rel:.4} >= 1%"
        );
    }

    #[test]
    fn recon_loss_closed_forms() {
        let x = uniform(&mut rng_from(11), &[1, 1, 16, 16], 0.0, 1.0);
        assert_eq!(recon_loss(&x, &x, 0.01).unwrap(), 0.0);
        // constant difference, lambda = 0: plain MSE
        let zeros = ndarray::ArrayD::zeros(IxDyn(&[1, 1, 16, 16]));
        let half = ndarray::ArrayD::from_elem(IxDyn(&[1, 1, 16, 16]), 0.5);
        assert!((recon_loss(&zeros, &half, 0.0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_closed_form_and_gradient() {
        // all predictions 0.5 over 4 classes -> 4 ln 2
        let mut g = Graph::new();
        let logits = g.constant(ndarray::ArrayD::zeros(IxDyn(&[3, 4])));
        let targets = ndarray::ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| {
            f64::from((ix[0] + ix[1]) % 2 == 0)
        });
        let l = classification_loss_node(&mut g, logits, &targets);
        let want = 4.0 * std::f64::consts::LN_2;
        assert!((g.scalar(l) - want).abs() < 1e-12, "got {}", g.scalar(l));

        // exact predictions -> 0 (saturated logits approach it)
        let mut g2 = Graph::new();
        let big = g2.constant(targets.mapv(|t| if t > 0.5 { 40.0 } else { -40.0 }));
        let l2 = classification_loss_node(&mut g2, big, &targets);
        assert!(g2.scalar(l2) < 1e-12);

        // gradient vs finite differences
        let x0 = standard_normal(&mut rng_from(12), &[2, 4]);
        let t2 = targets.slice_axis(Axis(0), Slice::from(0..2)).to_owned();
        let mut g3 = Graph::new();
        let xn = g3.input(x0.clone());
        let loss = classification_loss_node(&mut g3, xn, &t2);
        let grads = g3.backward(loss);
        let analytic = grads.expect(xn).clone();
        let fd = finite_difference(
            |x| {
                let mut g = Graph::new();
                let xn = g.constant(x.clone());
                let l = classification_loss_node(&mut g, xn, &t2);
                g.scalar(l)
            },
            &x0,
            1e-4,
        );
        assert!(relative_l2(&analytic, &fd) < 1e-3);
    }

    fn random_code(seed: u64, n: usize) -> LatentCode {
        LatentCode {
            mean: standard_normal(&mut rng_from(seed), &[1, n, 4, 4]),
            logvar: standard_normal(&mut rng_from(seed + 1), &[1, n, 4, 4]),
            sample: standard_normal(&mut rng_from(seed + 2), &[1, n, 4, 4]),
            n,
        }
    }

    #[test]
    fn swap_is_involution_and_touches_only_channel_n() {
        let a = random_code(20, 3);
        let b = random_code(30, 3);
        let (sa, sb) = swap_pathology(&a, &b).unwrap();
        // channel n swapped bit-exactly
        assert_eq!(
            sa.sample.index_axis(Axis(1), 2).to_owned(),
            b.sample.index_axis(Axis(1), 2).to_owned()
        );
        assert_eq!(
            sb.sample.index_axis(Axis(1), 2).to_owned(),
            a.sample.index_axis(Axis(1), 2).to_owned()
        );
        // identity channels untouched
        for c in 0..2 {
            assert_eq!(
                sa.sample.index_axis(Axis(1), c).to_owned(),
                a.sample.index_axis(Axis(1), c).to_owned()
            );
        }
        // involution
        let (ra, rb) = swap_pathology(&sa, &sb).unwrap();
        assert_eq!(ra.sample, a.sample);
        assert_eq!(rb.sample, b.sample);
        assert_eq!(ra.mean, a.mean);
        // self-swap is the identity
        let (ss, _) = swap_pathology(&a, &a).unwrap();
        assert_eq!(ss.sample, a.sample);
        // n = 1 has no identity channels to keep
        let a1 = random_code(40, 1);
        assert!(swap_pathology(&a1, &a1).is_err());
    }

    #[test]
    fn consistency_losses_are_zero_on_identical_inputs_and_symmetric() {
        let enc = IdentityEncoder::new(16, 77);
        let x = uniform(&mut rng_from(21), &[2, 1, 16, 16], 0.0, 1.0);
        let mut g = Graph::new();
        let mut bind = Binding::frozen(&enc.params);
        let xn = g.constant(x.clone());
        let same = identity_loss_node(&mut g, &enc, &mut bind, xn, xn, 1);
        assert_eq!(g.scalar(same), 0.0);

        let y = uniform(&mut rng_from(22), &[2, 1, 16, 16], 0.0, 1.0);
        let mut g1 = Graph::new();
        let mut b1 = Binding::frozen(&enc.params);
        let xa = g1.constant(x.clone());
        let ya = g1.constant(y.clone());
        let fwd = identity_loss_node(&mut g1, &enc, &mut b1, xa, ya, 1);
        let mut g2 = Graph::new();
        let mut b2 = Binding::frozen(&enc.params);
        let yb = g2.constant(y);
        let xb = g2.constant(x);
        let rev = identity_loss_node(&mut g2, &enc, &mut b2, yb, xb, 1);
        assert!((g1.scalar(fwd) - g2.scalar(rev)).abs() < 1e-12);
        assert!(g1.scalar(fwd) >= 0.0);
    }

    #[test]
    fn total_loss_recombination_is_exact() {
        let w = LossWeights::default();
        let comps = [0.3125, 1.75, 0.9921875, 0.125, 0.046875];
        let bd = LossBreakdown::recombine(comps, &w);
        assert_eq!(bd.vae, comps[0] + w.alpha * comps[1] + w.beta * comps[2]);
        assert_eq!(bd.total, bd.vae + w.gamma * comps[3] + w.delta * comps[4]);
        // gamma = delta = 0 -> total == vae
        let w0 = LossWeights {
            gamma: 0.0,
            delta: 0.0,
            ..Default::default()
        };
        let bd0 = LossBreakdown::recombine(comps, &w0);
        assert_eq!(bd0.total, bd0.vae);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mean0 = standard_normal(&mut rng_from(23), &[1, 2, 4, 4]);
        let logvar0 = standard_normal(&mut rng_from(24), &[1, 2, 4, 4]);
        let mut g = Graph::new();
        let m = g.input(mean0.clone());
        let lv = g.input(logvar0.clone());
        let kl = kl_divergence_node(&mut g, m, lv);
        let grads = g.backward(kl);
        for (node, x0, other, is_mean) in [
            (m, &mean0, &logvar0, true),
            (lv, &logvar0, &mean0, false),
        ] {
            let analytic = grads.expect(node).clone();
            let fd = finite_difference(
                |x| {
                    let (mm, ll) = if is_mean { (x, other) } else { (other, x) };
                    kl_divergence(mm, ll).unwrap()
                },
                x0,
                1e-4,
            );
            assert!(relative_l2(&analytic, &fd) < 1e-3);
        }
    }

    #[test]
    fn recon_gradient_matches_finite_differences() {
        let x = uniform(&mut rng_from(25), &[1, 1, 12, 12], 0.1, 0.9);
        let xh0 = uniform(&mut rng_from(26), &[1, 1, 12, 12], 0.1, 0.9);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let xh = g.input(xh0.clone());
        let l = recon_loss_node(&mut g, xn, xh, 0.01);
        let grads = g.backward(l);
        let analytic = grads.expect(xh).clone();
        let fd = finite_difference(|v| recon_loss(&x, v, 0.01).unwrap(), &xh0, 1e-4);
        assert!(relative_l2(&analytic, &fd) < 1e-3);
    }

    /// encode -> decode -> encode round-trips through compatible shapes.
    #[test]
    fn shape_roundtrip_is_total() {
        let vae = tiny_vae();
        let x = uniform(&mut rng_from(27), &[2, 1, 16, 16], 0.0, 1.0);
        let code = vae.encode(&x, None).unwrap();
        let img = vae.decode(&code.sample).unwrap();
        let again = vae.encode(&img, None).unwrap();
        assert_eq!(again.sample.shape(), code.sample.shape());
    }
}
