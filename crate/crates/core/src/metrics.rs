//! PSNR, SSIM and temporal PSNR.
//!
//! Image-level metrics work on display values (sRGB encoded, clamped to
//! [0, 1]) at peak 1. The SSIM core operates on raw f64 planes and has an
//! exact gradient so the trainer can reuse it on unclamped values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Value reported for identical inputs instead of +infinity.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR in dB from a mean squared error, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

fn display_planes(a: &ImageBuffer, b: &ImageBuffer) -> Result<([Vec<f64>; 3], [Vec<f64>; 3])> {
    a.ensure_same_size(b)?;
    if a.pixel_count() == 0 {
        return Err(Error::Empty("image has no pixels".into()));
    }
    Ok((a.display_rgb(), b.display_rgb()))
}

fn mse_planes(a: &[Vec<f64>; 3], b: &[Vec<f64>; 3]) -> f64 {
    let n: usize = a.iter().map(Vec::len).sum();
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(pa, pb)| pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    sum / n as f64
}

/// `10 log10(peak^2 / MSE)` over display RGB.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    let (da, db) = display_planes(a, b)?;
    Ok(psnr_from_mse(mse_planes(&da, &db), peak))
}

/// Separable Gaussian filter whose taps are renormalized near the border so
/// every output is a convex combination of in-bounds samples.
#[derive(Debug, Clone)]
struct WindowFilter {
    taps: Vec<f64>,
}

impl WindowFilter {
    fn ssim() -> Self {
        let r = SSIM_RADIUS as i64;
        let taps: Vec<f64> = (-r..=r)
            .map(|k| (-(k * k) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        WindowFilter { taps }
    }

    fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    /// Reciprocal of the in-bounds tap sum at each position of an axis.
    fn inv_norms(&self, n: usize) -> Vec<f64> {
        let r = self.radius();
        (0..n)
            .map(|p| {
                let lo = p.saturating_sub(r);
                let hi = (p + r).min(n - 1);
                1.0 / (lo..=hi).map(|q| self.taps[q + r - p]).sum::<f64>()
            })
            .collect()
    }

    /// Zero-padded correlation along rows. The kernel is symmetric, so this
    /// is also its own transpose.
    fn conv_rows(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let r = self.radius();
        let taps = &self.taps;
        let mut out = vec![0.0; w * h];
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            let line = &src[y * w..(y + 1) * w];
            for (p, o) in row.iter_mut().enumerate() {
                if p >= r && p + r < w {
                    let win = &line[p - r..=p + r];
                    *o = win.iter().zip(taps).map(|(a, b)| a * b).sum();
                } else {
                    let lo = p.saturating_sub(r);
                    let hi = (p + r).min(w - 1);
                    *o = (lo..=hi).map(|q| taps[q + r - p] * line[q]).sum();
                }
            }
        });
        out
    }

    /// Zero-padded correlation along columns.
    fn conv_cols(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let r = self.radius();
        let mut out = vec![0.0; w * h];
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for q in lo..=hi {
                let k = self.taps[q + r - y];
                for (o, v) in row.iter_mut().zip(&src[q * w..(q + 1) * w]) {
                    *o += k * v;
                }
            }
        });
        out
    }

    fn scale_axes(data: &mut [f64], w: usize, nx: Option<&[f64]>, ny: Option<&[f64]>) {
        data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            let sy = ny.map_or(1.0, |n| n[y]);
            match nx {
                Some(nx) => row.iter_mut().zip(nx).for_each(|(v, s)| *v *= s * sy),
                None => row.iter_mut().for_each(|v| *v *= sy),
            }
        });
    }

    fn apply(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let (nx, ny) = (self.inv_norms(w), self.inv_norms(h));
        let mut rows = self.conv_rows(src, w, h);
        Self::scale_axes(&mut rows, w, Some(&nx), None);
        let mut out = self.conv_cols(&rows, w, h);
        Self::scale_axes(&mut out, w, None, Some(&ny));
        out
    }

    fn apply_transpose(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let (nx, ny) = (self.inv_norms(w), self.inv_norms(h));
        let mut scaled = src.to_vec();
        Self::scale_axes(&mut scaled, w, None, Some(&ny));
        let mut cols = self.conv_cols(&scaled, w, h);
        Self::scale_axes(&mut cols, w, Some(&nx), None);
        self.conv_rows(&cols, w, h)
    }
}

/// Mean SSIM of two planes and, optionally, its gradient with respect to `a`.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    assert_eq!(a.len(), w * h);
    assert_eq!(b.len(), w * h);
    let f = WindowFilter::ssim();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = f.apply(a, w, h);
    let mu_b = f.apply(b, w, h);
    let e_aa = f.apply(&aa, w, h);
    let e_bb = f.apply(&bb, w, h);
    let e_ab = f.apply(&ab, w, h);

    let n = (w * h) as f64;
    let mut sum = 0.0;
    let (mut g_mu, mut g_aa, mut g_ab) = if want_grad {
        (vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..w * h {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = var_a + var_b + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        sum += s;
        if want_grad {
            let inv = 1.0 / (b1 * b2 * n);
            g_mu[i] = 2.0 * mb * a2 * inv - 2.0 * mb * a1 * inv - 2.0 * ma * s / (b1 * n) + 2.0 * ma * s / (b2 * n);
            g_aa[i] = -s / (b2 * n);
            g_ab[i] = 2.0 * a1 * inv;
        }
    }
    let value = sum / n;
    if !want_grad {
        return (value, None);
    }
    let t_mu = f.apply_transpose(&g_mu, w, h);
    let t_aa = f.apply_transpose(&g_aa, w, h);
    let t_ab = f.apply_transpose(&g_ab, w, h);
    let grad = (0..w * h)
        .map(|i| t_mu[i] + 2.0 * a[i] * t_aa[i] + b[i] * t_ab[i])
        .collect();
    (value, Some(grad))
}

/// Single-scale SSIM over display RGB, averaged over pixels and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let (da, db) = display_planes(a, b)?;
    let (w, h) = a.dims();
    let total: f64 = (0..3).map(|c| ssim_plane(&da[c], &db[c], w, h, false).0).sum();
    Ok(total / 3.0)
}

fn check_sequences(a: &[ImageBuffer], b: &[ImageBuffer]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "sequences have different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        x.ensure_same_size(y)?;
    }
    Ok(())
}

/// Per-step PSNR of consecutive-frame differences in display space.
pub fn tpsnr_steps(a: &[ImageBuffer], b: &[ImageBuffer]) -> Result<Vec<f64>> {
    check_sequences(a, b)?;
    if a.len() < 2 {
        return Err(Error::InvalidArgument("temporal PSNR needs at least 2 frames".into()));
    }
    let da: Vec<[Vec<f64>; 3]> = a.par_iter().map(ImageBuffer::display_rgb).collect();
    let db: Vec<[Vec<f64>; 3]> = b.par_iter().map(ImageBuffer::display_rgb).collect();
    Ok((1..a.len())
        .map(|t| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for c in 0..3 {
                for i in 0..da[t][c].len() {
                    let diff_a = da[t][c][i] - da[t - 1][c][i];
                    let diff_b = db[t][c][i] - db[t - 1][c][i];
                    sum += (diff_a - diff_b) * (diff_a - diff_b);
                    n += 1;
                }
            }
            psnr_from_mse(sum / n as f64, 1.0)
        })
        .collect())
}

/// Mean over `t >= 1` of the PSNR between temporal differences.
pub fn tpsnr(a: &[ImageBuffer], b: &[ImageBuffer]) -> Result<f64> {
    let steps = tpsnr_steps(a, b)?;
    Ok(steps.iter().sum::<f64>() / steps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Temporal PSNR of the step ending at this frame; absent for frame 0.
    pub tpsnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Absent for single-frame sequences.
    pub mean_tpsnr: Option<f64>,
}

impl MetricReport {
    /// Scores `test` against `reference` frame by frame.
    pub fn compute(test: &[ImageBuffer], reference: &[ImageBuffer]) -> Result<Self> {
        check_sequences(test, reference)?;
        if test.is_empty() {
            return Err(Error::Empty("no frames to evaluate".into()));
        }
        let per_frame: Vec<(f64, f64)> = test
            .par_iter()
            .zip(reference.par_iter())
            .map(|(a, b)| Ok((psnr(a, b, 1.0)?, ssim(a, b)?)))
            .collect::<Result<_>>()?;
        let steps = if test.len() >= 2 { Some(tpsnr_steps(test, reference)?) } else { None };
        let frames: Vec<FrameMetrics> = per_frame
            .iter()
            .enumerate()
            .map(|(i, &(p, s))| FrameMetrics {
                frame: i,
                psnr: p,
                ssim: s,
                tpsnr: steps.as_ref().and_then(|st| i.checked_sub(1).map(|k| st[k])),
            })
            .collect();
        let n = frames.len() as f64;
        Ok(MetricReport {
            mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
            mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
            mean_tpsnr: steps.map(|st| st.iter().sum::<f64>() / st.len() as f64),
            frames,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,psnr,ssim,tpsnr\n");
        for f in &self.frames {
            let t = f.tpsnr.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", f.frame, f.psnr, f.ssim, t));
        }
        let t = self.mean_tpsnr.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("mean,{},{},{}\n", self.mean_psnr, self.mean_ssim, t));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::ColorTag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(v: f32, w: usize, h: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, ColorTag::UnboundedSRGB);
        for px in img.data.chunks_exact_mut(4) {
            px.copy_from_slice(&[v, v, v, 1.0]);
        }
        img
    }

    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, ColorTag::UnboundedSRGB);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    /// Direct 2D window sum with per-pixel renormalization.
    fn ssim_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
        let r = SSIM_RADIUS as i64;
        let mut total = 0.0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qx, qy) = (x + dx, y + dy);
                        if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                            continue;
                        }
                        let k = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                        let i = (qy * w as i64 + qx) as usize;
                        sw += k;
                        ma += k * a[i];
                        mb += k * b[i];
                        saa += k * a[i] * a[i];
                        sbb += k * b[i] * b[i];
                        sab += k * a[i] * b[i];
                    }
                }
                let (ma, mb) = (ma / sw, mb / sw);
                let va = saa / sw - ma * ma;
                let vb = sbb / sw - mb * mb;
                let cab = sab / sw - ma * mb;
                total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total / (w * h) as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let a = constant(0.5, 8, 8);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = constant(0.6, 8, 8);
        // MSE is 0.01 up to the f32 representation of 0.5 and 0.6.
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let c = constant(0.0, 4, 4);
        let d = constant(1.0, 4, 4);
        assert_eq!(psnr(&c, &d, 1.0).unwrap(), 0.0);
        assert!(matches!(psnr(&a, &constant(0.5, 4, 8), 1.0), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn psnr_matches_scalar_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 13, 9);
        let b = random(&mut rng, 13, 9);
        let mut se = 0.0;
        for (x, y) in a.data.chunks_exact(4).zip(b.data.chunks_exact(4)) {
            for c in 0..3 {
                let d = x[c].clamp(0.0, 1.0) as f64 - y[c].clamp(0.0, 1.0) as f64;
                se += d * d;
            }
        }
        let expected = 10.0 * (1.0 / (se / (13.0 * 9.0 * 3.0))).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, 20, 17);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // Constants: variances vanish, leaving the luminance term.
        let (c1, c2) = (0.2f32 as f64, 0.4f32 as f64);
        let expected = (2.0 * c1 * c2 + SSIM_C1) / (c1 * c1 + c2 * c2 + SSIM_C1);
        let s = ssim(&constant(0.2, 16, 16), &constant(0.4, 16, 16)).unwrap();
        assert!((s - expected).abs() < 1e-9);
        assert!((expected - 0.800_099_950_024_987_5).abs() < 1e-7);
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, h) = (19, 14);
        let a: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v * 0.7 + rng.random_range(0.0..0.3)).collect();
        let (s, _) = ssim_plane(&a, &b, w, h, false);
        assert!((s - ssim_oracle(&a, &b, w, h)).abs() < 1e-12);
        let (s2, _) = ssim_plane(&b, &a, w, h, false);
        assert!((s - s2).abs() < 1e-14);
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (w, h) = (15, 12);
        let a: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, g) = ssim_plane(&a, &b, w, h, true);
        let g = g.unwrap();
        let eps = 1e-6;
        for &i in &[0, 7, w + 3, w * h / 2, w * h - 1] {
            let mut p = a.clone();
            p[i] += eps;
            let mut m = a.clone();
            m[i] -= eps;
            let fd = (ssim_plane(&p, &b, w, h, false).0 - ssim_plane(&m, &b, w, h, false).0) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-6), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn window_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (17, 9);
        let f = WindowFilter::ssim();
        let x: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = f.apply(&x, w, h).iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&f.apply_transpose(&u, w, h)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_to_shared_pixel_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(&mut rng, 10, 10);
        let b = random(&mut rng, 10, 10);
        let mut perm: Vec<usize> = (0..100).collect();
        for i in (1..100).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffle = |img: &ImageBuffer| {
            let mut out = img.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.data[4 * dst..4 * dst + 4].copy_from_slice(&img.data[4 * src..4 * src + 4]);
            }
            out
        };
        let p0 = psnr(&a, &b, 1.0).unwrap();
        let p1 = psnr(&shuffle(&a), &shuffle(&b), 1.0).unwrap();
        assert!((p0 - p1).abs() < 1e-9);
    }

    #[test]
    fn tpsnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let seq: Vec<ImageBuffer> = (0..4).map(|_| random(&mut rng, 8, 8)).collect();
        assert_eq!(tpsnr(&seq, &seq).unwrap(), PSNR_CAP);
        assert!(matches!(tpsnr(&seq[..1], &seq[..1]), Err(Error::InvalidArgument(_))));

        // Static ground truth vs gain flicker: differences are (g_t - g_{t-1}) * v.
        let base = constant(0.5, 6, 6);
        let gains = [1.0f32, 1.1, 0.9, 1.05];
        let gt = vec![base.clone(); 4];
        let flick: Vec<ImageBuffer> = gains.iter().map(|&g| constant(0.5 * g, 6, 6)).collect();
        let expected: f64 = (1..4)
            .map(|t| {
                let d = (0.5 * gains[t]) as f64 - (0.5 * gains[t - 1]) as f64;
                10.0 * (1.0 / (d * d)).log10()
            })
            .sum::<f64>()
            / 3.0;
        assert!((tpsnr(&flick, &gt).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn tpsnr_invariant_to_shared_static_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a: Vec<ImageBuffer> = (0..3).map(|_| {
            let mut img = random(&mut rng, 8, 8);
            img.data.iter_mut().for_each(|v| *v *= 0.5);
            img
        }).collect();
        let b: Vec<ImageBuffer> = a.iter().map(|img| {
            let mut o = img.clone();
            o.data.iter_mut().for_each(|v| *v = (*v + 0.05).min(0.5));
            o
        }).collect();
        let offset: Vec<f32> = (0..64 * 4).map(|_| rng.random_range(0.0..0.25)).collect();
        let add = |s: &[ImageBuffer]| -> Vec<ImageBuffer> {
            s.iter().map(|img| {
                let mut o = img.clone();
                o.data.iter_mut().zip(&offset).for_each(|(v, d)| *v += d);
                o
            }).collect()
        };
        let t0 = tpsnr(&a, &b).unwrap();
        let t1 = tpsnr(&add(&a), &add(&b)).unwrap();
        assert!((t0 - t1).abs() < 1e-4, "{t0} vs {t1}");
    }

    #[test]
    fn report_formats() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a: Vec<ImageBuffer> = (0..3).map(|_| random(&mut rng, 8, 8)).collect();
        let b: Vec<ImageBuffer> = (0..3).map(|_| random(&mut rng, 8, 8)).collect();
        let r = MetricReport::compute(&a, &b).unwrap();
        assert_eq!(r.frames.len(), 3);
        assert!(r.frames[0].tpsnr.is_none() && r.frames[2].tpsnr.is_some());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("frame,psnr,ssim,tpsnr\n"));
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let single = MetricReport::compute(&a[..1], &b[..1]).unwrap();
        assert!(single.mean_tpsnr.is_none());
    }
}
