//! Reconstruction and total training losses.

use rayon::prelude::*;

use crate::colorspace::ColorTag;
use crate::error::Result;
use crate::image::ImageBuffer;
use crate::metrics::ssim_plane;

use super::TrainConfig;

/// Reconstruction loss with its parts and the gradient with respect to the
/// prediction (interleaved RGB, one triple per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct ReconLoss {
    pub value: f64,
    pub l1: f64,
    pub ssim: f64,
    pub grad: Vec<f64>,
}

/// `(1 - w) L1 + w (1 - SSIM)` between two unbounded sRGB images, RGB only.
pub fn recon_loss(pred: &ImageBuffer, gt: &ImageBuffer, ssim_weight: f64) -> Result<ReconLoss> {
    pred.ensure_tag(ColorTag::UnboundedSRGB)?;
    gt.ensure_tag(ColorTag::UnboundedSRGB)?;
    pred.ensure_same_size(gt)?;
    let p = [pred.channel(0), pred.channel(1), pred.channel(2)];
    let g = [gt.channel(0), gt.channel(1), gt.channel(2)];
    Ok(recon_loss_planes(&p, &g, pred.width, pred.height, ssim_weight))
}

pub(crate) fn recon_loss_planes(
    pred: &[Vec<f64>; 3],
    gt: &[Vec<f64>; 3],
    width: usize,
    height: usize,
    ssim_weight: f64,
) -> ReconLoss {
    let n = width * height;
    let scale = 1.0 / (3 * n) as f64;
    let per_channel: Vec<(f64, f64, Vec<f64>)> = (0..3)
        .into_par_iter()
        .map(|c| {
            let (p, g) = (&pred[c], &gt[c]);
            let l1: f64 = p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum();
            let (s, s_grad) = ssim_plane(p, g, width, height, ssim_weight > 0.0);
            let mut grad: Vec<f64> = p
                .iter()
                .zip(g)
                .map(|(a, b)| (1.0 - ssim_weight) * scale * sign(a - b))
                .collect();
            if let Some(sg) = s_grad {
                for (d, v) in grad.iter_mut().zip(sg) {
                    *d -= ssim_weight * v / 3.0;
                }
            }
            (l1, s, grad)
        })
        .collect();
    let l1 = per_channel.iter().map(|c| c.0).sum::<f64>() * scale;
    let ssim = per_channel.iter().map(|c| c.1).sum::<f64>() / 3.0;
    let mut grad = vec![0.0; 3 * n];
    for (c, (_, _, g)) in per_channel.iter().enumerate() {
        for (i, v) in g.iter().enumerate() {
            grad[3 * i + c] = *v;
        }
    }
    ReconLoss {
        value: (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim),
        l1,
        ssim,
        grad,
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn total_loss(recon: f64, exposure_loss: f64, black_loss: f64, cfg: &TrainConfig) -> f64 {
    recon + cfg.lambda_e * exposure_loss + cfg.lambda_b * black_loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, ColorTag::UnboundedSRGB);
        for (i, px) in img.data.chunks_exact_mut(4).enumerate() {
            for c in 0..3 {
                px[c] = f(i, c);
            }
            px[3] = 1.0;
        }
        img
    }

    #[test]
    fn identical_images_cost_nothing() {
        let a = image(16, 12, |i, c| (i * 3 + c) as f32 * 0.01);
        let l = recon_loss(&a, &a, 0.2).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn constant_offset_is_pure_l1() {
        let a = image(8, 8, |_, _| 0.5);
        let b = image(8, 8, |_, _| 0.4);
        let l = recon_loss(&a, &b, 0.0).unwrap();
        assert!((l.value - 0.1).abs() < 1e-7);
    }

    #[test]
    fn rejects_linear_input() {
        let mut a = image(4, 4, |_, _| 0.5);
        let b = a.clone();
        a.tag = ColorTag::LinearHDR;
        assert!(recon_loss(&a, &b, 0.2).is_err());
        assert!(recon_loss(&b, &image(4, 5, |_, _| 0.0), 0.2).is_err());
    }

    /// Scalar reimplementation with a direct, unnormalized-at-border window sum.
    fn oracle(p: &[Vec<f64>; 3], g: &[Vec<f64>; 3], w: usize, h: usize, wt: f64) -> f64 {
        let n = w * h;
        let mut l1 = 0.0;
        for c in 0..3 {
            for i in 0..n {
                l1 += (p[c][i] - g[c][i]).abs();
            }
        }
        l1 /= (3 * n) as f64;
        let k: Vec<f64> = (-5i64..=5).map(|d| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
        let mut ssim_sum = 0.0;
        for c in 0..3 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (mut sw, mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -5i64..=5 {
                        for dx in -5i64..=5 {
                            let (xx, yy) = (x + dx, y + dy);
                            if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                                continue;
                            }
                            let j = yy as usize * w + xx as usize;
                            // Per-axis renormalization equals the product of the clipped 1D sums.
                            let wgt = k[(dx + 5) as usize] * k[(dy + 5) as usize];
                            sw += wgt;
                            let (a, b) = (p[c][j], g[c][j]);
                            ma += wgt * a;
                            mb += wgt * b;
                            aa += wgt * a * a;
                            bb += wgt * b * b;
                            ab += wgt * a * b;
                        }
                    }
                    let (ma, mb, aa, bb, ab) = (ma / sw, mb / sw, aa / sw, bb / sw, ab / sw);
                    let (c1, c2) = (1e-4, 9e-4);
                    ssim_sum += (2.0 * ma * mb + c1) * (2.0 * (ab - ma * mb) + c2)
                        / ((ma * ma + mb * mb + c1) * (aa - ma * ma + bb - mb * mb + c2));
                }
            }
        }
        (1.0 - wt) * l1 + wt * (1.0 - ssim_sum / (3 * n) as f64)
    }

    #[test]
    fn matches_scalar_oracle_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (19, 14);
        let p: [Vec<f64>; 3] = std::array::from_fn(|_| (0..w * h).map(|_| rng.random_range(-0.1..1.3)).collect());
        let g: [Vec<f64>; 3] = std::array::from_fn(|_| (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect());
        let l = recon_loss_planes(&p, &g, w, h, 0.2);
        assert!((l.value - oracle(&p, &g, w, h, 0.2)).abs() < 1e-6);

        for &(c, i) in &[(0usize, 0usize), (1, 77), (2, w * h - 1), (0, 140)] {
            let eps = 1e-6;
            let mut pp = p.clone();
            pp[c][i] += eps;
            let up = recon_loss_planes(&pp, &g, w, h, 0.2).value;
            pp[c][i] -= 2.0 * eps;
            let down = recon_loss_planes(&pp, &g, w, h, 0.2).value;
            let fd = (up - down) / (2.0 * eps);
            let an = l.grad[3 * i + c];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{c},{i}: {fd} vs {an}");
        }
    }

    #[test]
    fn total_loss_weights() {
        let cfg = TrainConfig::default();
        assert_eq!(total_loss(1.0, 0.0, 0.0, &cfg), 1.0);
        assert!((total_loss(0.5, 0.01, -0.2, &cfg) - 0.59).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
    }
}
