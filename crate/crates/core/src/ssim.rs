//! Structural similarity with the standard 11x11 Gaussian window
//! (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0), averaged over valid
//! windows. Built on graph ops so it is differentiable and reusable inside
//! the reconstruction loss.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};

pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;

/// Normalized 2-d Gaussian window as a (1,1,k,k) conv kernel.
pub fn gaussian_kernel() -> ArrayD<f64> {
    let k = WINDOW;
    let c = (k as f64 - 1.0) / 2.0;
    let mut w = ArrayD::zeros(IxDyn(&[1, 1, k, k]));
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            let di = i as f64 - c;
            let dj = j as f64 - c;
            let v = (-(di * di + dj * dj) / (2.0 * SIGMA * SIGMA)).exp();
            w[[0, 0, i, j]] = v;
            sum += v;
        }
    }
    w.mapv_inplace(|v| v / sum);
    w
}

/// SSIM between two (b,1,h,w) nodes; scalar node, mean over windows and batch.
///
/// Inputs smaller than the window fall back to a single global window (the
/// same statistics computed over the whole image).
pub fn ssim_node(g: &mut Graph, x: NodeId, y: NodeId) -> NodeId {
    assert_eq!(g.shape(x), g.shape(y), "ssim: shape mismatch");
    let s = g.shape(x).to_vec();
    assert_eq!(s.len(), 4, "ssim: expected (b,1,h,w)");
    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);

    let windowed = s[2] >= WINDOW && s[3] >= WINDOW;
    let (mu_x, mu_y, xx, yy, xy);
    if windowed {
        let kern = g.constant(gaussian_kernel());
        mu_x = g.conv2d(x, kern, 1, 0);
        mu_y = g.conv2d(y, kern, 1, 0);
        let x2 = g.mul(x, x);
        let y2 = g.mul(y, y);
        let xyv = g.mul(x, y);
        xx = g.conv2d(x2, kern, 1, 0);
        yy = g.conv2d(y2, kern, 1, 0);
        xy = g.conv2d(xyv, kern, 1, 0);
    } else {
        // global window: image-wide means as (b,1) -> (b,1,1,1)
        let n = s[0];
        let mx = g.mean_spatial(x);
        let my = g.mean_spatial(y);
        let x2 = g.mul(x, x);
        let y2 = g.mul(y, y);
        let xyv = g.mul(x, y);
        let mxx = g.mean_spatial(x2);
        let myy = g.mean_spatial(y2);
        let mxy = g.mean_spatial(xyv);
        mu_x = g.reshape(mx, &[n, 1, 1, 1]);
        mu_y = g.reshape(my, &[n, 1, 1, 1]);
        xx = g.reshape(mxx, &[n, 1, 1, 1]);
        yy = g.reshape(myy, &[n, 1, 1, 1]);
        xy = g.reshape(mxy, &[n, 1, 1, 1]);
    }

    let mu_x2 = g.mul(mu_x, mu_x);
    let mu_y2 = g.mul(mu_y, mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(xx, mu_x2);
    let var_y = g.sub(yy, mu_y2);
    let cov = g.sub(xy, mu_xy);

    let a1 = g.scale(mu_xy, 2.0);
    let a1 = g.add_scalar(a1, c1);
    let a2 = g.scale(cov, 2.0);
    let a2 = g.add_scalar(a2, c2);
    let b1 = g.add(mu_x2, mu_y2);
    let b1 = g.add_scalar(b1, c1);
    let b2 = g.add(var_x, var_y);
    let b2 = g.add_scalar(b2, c2);

    let num = g.mul(a1, a2);
    let den = g.mul(b1, b2);
    let map = g.div(num, den);
    g.mean_all(map)
}

/// SSIM of two plain arrays, each (h,w) or (b,1,h,w), values in [0,1].
pub fn ssim(x: &ArrayD<f64>, y: &ArrayD<f64>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            context: "ssim",
            expected: x.shape().to_vec(),
            got: y.shape().to_vec(),
        });
    }
    let (xb, yb) = match x.ndim() {
        2 => {
            let (h, w) = (x.shape()[0], x.shape()[1]);
            (
                x.clone().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap(),
                y.clone().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap(),
            )
        }
        4 => (x.clone(), y.clone()),
        _ => {
            return Err(Error::Shape {
                context: "ssim",
                expected: vec![0, 0],
                got: x.shape().to_vec(),
            })
        }
    };
    let mut g = Graph::new();
    let xn = g.constant(xb);
    let yn = g.constant(yb);
    let s = ssim_node(&mut g, xn, yn);
    Ok(g.scalar(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from, uniform};

    #[test]
    fn identical_images_score_exactly_one() {
        let x = uniform(&mut rng_from(1), &[1, 1, 16, 16], 0.0, 1.0);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let big = uniform(&mut rng_from(2), &[1, 1, 32, 32], 0.0, 1.0);
        assert_eq!(ssim(&big, &big).unwrap(), 1.0);
    }

    #[test]
    fn constant_zero_vs_one_matches_closed_form() {
        // zero variances: ssim = C1 / (1 + C1)
        let x = ArrayD::zeros(IxDyn(&[1, 1, 16, 16]));
        let y = ArrayD::from_elem(IxDyn(&[1, 1, 16, 16]), 1.0);
        let c1 = K1 * K1;
        let want = c1 / (1.0 + c1);
        let got = ssim(&x, &y).unwrap();
        assert!(
            (got - want).abs() < 1e-12,
            "got {got}, want {want} (~9.999e-5)"
        );
    }

    #[test]
    fn symmetric_in_arguments() {
        let x = uniform(&mut rng_from(3), &[1, 1, 16, 16], 0.0, 1.0);
        let y = uniform(&mut rng_from(4), &[1, 1, 16, 16], 0.0, 1.0);
        let a = ssim(&x, &y).unwrap();
        let b = ssim(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = ArrayD::zeros(IxDyn(&[1, 1, 16, 16]));
        let y = ArrayD::zeros(IxDyn(&[1, 1, 8, 8]));
        assert!(ssim(&x, &y).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::autodiff::{finite_difference, relative_l2};
        let x0 = uniform(&mut rng_from(5), &[1, 1, 12, 12], 0.1, 0.9);
        let y0 = uniform(&mut rng_from(6), &[1, 1, 12, 12], 0.1, 0.9);
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = g.constant(y0.clone());
        let s = ssim_node(&mut g, x, y);
        let grads = g.backward(s);
        let analytic = grads.expect(x).clone();
        let fd = finite_difference(
            |xv| {
                let mut g = Graph::new();
                let x = g.constant(xv.clone());
                let y = g.constant(y0.clone());
                let s = ssim_node(&mut g, x, y);
                g.scalar(s)
            },
            &x0,
            1e-5,
        );
        assert!(relative_l2(&analytic, &fd) < 1e-6);
    }
}
