//! Dense optical flow, backward warping and validity masks.
//!
//! Flow is estimated coarse to fine with windowed Lucas-Kanade updates on the
//! luminance of display-mapped frames. A flow vector maps a pixel of the
//! current frame to its location in the previous frame.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

use super::pyramid::{half, reduce};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSettings {
    pub levels: usize,
    pub warps_per_level: usize,
    /// Half-width of the square aggregation window.
    pub window_radius: usize,
    /// Tikhonov term added to the structure tensor.
    pub regularization: f64,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            levels: 5,
            warps_per_level: 3,
            window_radius: 2,
            regularization: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<Vector2<f64>>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            vectors: vec![Vector2::zeros(); width * height],
        }
    }

    /// Constant displacement everywhere.
    pub fn uniform(width: usize, height: usize, d: Vector2<f64>) -> Self {
        FlowField {
            width,
            height,
            vectors: vec![d; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> Vector2<f64> {
        self.vectors[y * self.width + x]
    }
}

/// Per-pixel binary flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    pub width: usize,
    pub height: usize,
    pub valid: Vec<bool>,
}

impl ValidityMask {
    pub fn all(width: usize, height: usize, value: bool) -> Self {
        ValidityMask {
            width,
            height,
            valid: vec![value; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn to_plane(&self) -> Vec<f32> {
        self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

fn luminance(img: &ImageBuffer) -> Vec<f64> {
    let [r, g, b] = img.display_rgb();
    (0..r.len()).map(|i| 0.2126 * r[i] + 0.7152 * g[i] + 0.0722 * b[i]).collect()
}

/// Bilinear sample with clamped coordinates.
fn sample_clamped(img: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn gradient(img: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            if xr > xl {
                gx[y * w + x] = (img[y * w + xr] - img[y * w + xl]) / (xr - xl) as f64;
            }
            if yd > yu {
                gy[y * w + x] = (img[yd * w + x] - img[yu * w + x]) / (yd - yu) as f64;
            }
        }
    }
    (gx, gy)
}

/// Box sum over a `(2r+1)^2` window, truncated at the border.
fn box_sum(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = src[y * w + lo..=y * w + hi].iter().sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).sum();
        }
    }
    out
}

fn refine(curr: &[f64], prev: &[f64], w: usize, h: usize, flow: &mut [Vector2<f64>], s: &FlowSettings) {
    let (cgx, cgy) = gradient(curr, w, h);
    for _ in 0..s.warps_per_level {
        let warped: Vec<f64> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                sample_clamped(prev, w, h, x + flow[i].x, y + flow[i].y)
            })
            .collect();
        let (wgx, wgy) = gradient(&warped, w, h);
        let n = w * h;
        let mut ixx = vec![0.0; n];
        let mut ixy = vec![0.0; n];
        let mut iyy = vec![0.0; n];
        let mut ixt = vec![0.0; n];
        let mut iyt = vec![0.0; n];
        for i in 0..n {
            let gx = 0.5 * (cgx[i] + wgx[i]);
            let gy = 0.5 * (cgy[i] + wgy[i]);
            let it = warped[i] - curr[i];
            ixx[i] = gx * gx;
            ixy[i] = gx * gy;
            iyy[i] = gy * gy;
            ixt[i] = gx * it;
            iyt[i] = gy * it;
        }
        let r = s.window_radius;
        let (sxx, sxy, syy) = (box_sum(&ixx, w, h, r), box_sum(&ixy, w, h, r), box_sum(&iyy, w, h, r));
        let (sxt, syt) = (box_sum(&ixt, w, h, r), box_sum(&iyt, w, h, r));
        flow.par_iter_mut().enumerate().for_each(|(i, f)| {
            let a = Matrix2::new(sxx[i] + s.regularization, sxy[i], sxy[i], syy[i] + s.regularization);
            if let Some(inv) = a.try_inverse() {
                *f -= inv * Vector2::new(sxt[i], syt[i]);
            }
        });
    }
}

/// Flow from `curr` to `prev` with default settings.
pub fn compute_flow(curr: &ImageBuffer, prev: &ImageBuffer) -> Result<FlowField> {
    compute_flow_with(curr, prev, &FlowSettings::default())
}

pub fn compute_flow_with(curr: &ImageBuffer, prev: &ImageBuffer, s: &FlowSettings) -> Result<FlowField> {
    curr.ensure_same_size(prev)?;
    let (w, h) = curr.dims();
    if w == 0 || h == 0 {
        return Err(Error::Empty("cannot compute flow of an empty frame".into()));
    }
    let mut pyr_c = vec![(luminance(curr), w, h)];
    let mut pyr_p = vec![luminance(prev)];
    for _ in 1..s.levels.max(1) {
        let (ref c, cw, ch) = *pyr_c.last().unwrap();
        if cw < 8 || ch < 8 {
            break;
        }
        let next_c = reduce(c, cw, ch);
        let next_p = reduce(pyr_p.last().unwrap(), cw, ch);
        pyr_c.push((next_c, half(cw), half(ch)));
        pyr_p.push(next_p);
    }
    let coarsest = pyr_c.len() - 1;
    let (_, cw, ch) = pyr_c[coarsest];
    let mut flow = vec![Vector2::zeros(); cw * ch];
    let mut fw = cw;
    for level in (0..=coarsest).rev() {
        let (ref c, lw, lh) = pyr_c[level];
        if level != coarsest {
            // Fine pixel x sits at coarse coordinate x / 2.
            let fh = flow.len() / fw;
            let comps: Vec<Vec<f64>> = (0..2).map(|k| flow.iter().map(|f| f[k]).collect()).collect();
            flow = (0..lw * lh)
                .map(|i| {
                    let (x, y) = ((i % lw) as f64 * 0.5, (i / lw) as f64 * 0.5);
                    Vector2::new(
                        2.0 * sample_clamped(&comps[0], fw, fh, x, y),
                        2.0 * sample_clamped(&comps[1], fw, fh, x, y),
                    )
                })
                .collect();
            fw = lw;
        }
        refine(c, &pyr_p[level], lw, lh, &mut flow, s);
    }
    Ok(FlowField { width: w, height: h, vectors: flow })
}

/// A backward-warped frame with its in-bounds flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Warped {
    pub image: ImageBuffer,
    pub in_bounds: ValidityMask,
}

/// Bilinear backward warp: output pixel `x` samples `prev` at `x + flow(x)`.
/// Samples outside the frame are zero and flagged.
pub fn warp(prev: &ImageBuffer, flow: &FlowField) -> Result<Warped> {
    let (w, h) = prev.dims();
    if (flow.width, flow.height) != (w, h) {
        return Err(Error::SizeMismatch { left: (w, h), right: (flow.width, flow.height) });
    }
    let mut image = ImageBuffer::new(w, h, prev.tag);
    let mut in_bounds = ValidityMask::all(w, h, false);
    const SLACK: f64 = 1e-9;
    let results: Vec<Option<[f32; 4]>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let sx = (i % w) as f64 + flow.vectors[i].x;
            let sy = (i / w) as f64 + flow.vectors[i].y;
            if !(sx >= -SLACK && sy >= -SLACK && sx <= (w - 1) as f64 + SLACK && sy <= (h - 1) as f64 + SLACK) {
                return None;
            }
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
            let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let p = |x: usize, y: usize, c: usize| prev.data[4 * (y * w + x) + c] as f64;
            let mut out = [0.0f32; 4];
            for (c, o) in out.iter_mut().enumerate() {
                let top = p(x0, y0, c) * (1.0 - fx) + p(x1, y0, c) * fx;
                let bot = p(x0, y1, c) * (1.0 - fx) + p(x1, y1, c) * fx;
                *o = (top * (1.0 - fy) + bot * fy) as f32;
            }
            Some(out)
        })
        .collect();
    for (i, r) in results.into_iter().enumerate() {
        if let Some(px) = r {
            image.data[4 * i..4 * i + 4].copy_from_slice(&px);
            in_bounds.valid[i] = true;
        }
    }
    Ok(Warped { image, in_bounds })
}

/// Valid where the warp sample was in bounds and the mean absolute display
/// RGB difference to `curr` is below `tau`.
pub fn validity_mask(curr: &ImageBuffer, warped: &Warped, tau: f64) -> Result<ValidityMask> {
    curr.ensure_same_size(&warped.image)?;
    let a = curr.display_rgb();
    let b = warped.image.display_rgb();
    let (w, h) = curr.dims();
    let valid = (0..w * h)
        .map(|i| {
            let diff = (0..3).map(|c| (a[c][i] - b[c][i]).abs()).sum::<f64>() / 3.0;
            warped.in_bounds.valid[i] && diff < tau
        })
        .collect();
    Ok(ValidityMask { width: w, height: h, valid })
}
