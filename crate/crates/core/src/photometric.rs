//! Per-camera black-level and exposure grids.
//!
//! A coarse grid is brought to image resolution by spectral zero padding:
//! forward DFT, centered embedding into a larger spectrum (Nyquist bins split
//! evenly between the positive and negative frequency so the result stays
//! real), inverse DFT, rescaled so the spatial mean is unchanged. The adjoint
//! of that linear map back-propagates image gradients to the grid.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::colorspace::ColorTag;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const GRID_SIZE: usize = 32;
pub const GRID_CELLS: usize = GRID_SIZE * GRID_SIZE;

/// Black level `B` (additive, linear units) and exposure `E` (gain) grids of
/// one camera, row-major `GRID_SIZE x GRID_SIZE`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricGrid {
    pub camera_id: u32,
    pub black: Vec<f64>,
    pub exposure: Vec<f64>,
}

impl PhotometricGrid {
    /// `B = 0`, `E = 1`: the identity adjustment.
    pub fn identity(camera_id: u32) -> Self {
        PhotometricGrid {
            camera_id,
            black: vec![0.0; GRID_CELLS],
            exposure: vec![1.0; GRID_CELLS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.black.len() != GRID_CELLS || self.exposure.len() != GRID_CELLS {
            return Err(Error::InvalidSize(format!(
                "photometric grid of camera {} must have {GRID_CELLS} cells",
                self.camera_id
            )));
        }
        if self.exposure.iter().any(|&e| !(e > 0.0 && e.is_finite()))
            || self.black.iter().any(|b| !b.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "photometric grid of camera {} has non-finite or non-positive values",
                self.camera_id
            )));
        }
        Ok(())
    }
}

fn planner_fft(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    type Cache = Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

/// Unnormalized 2D DFT of a row-major `h x w` complex array, in place.
fn fft2(data: &mut [Complex64], w: usize, h: usize, inverse: bool) {
    let row_fft = planner_fft(w, inverse);
    data.par_chunks_mut(w).for_each(|row| row_fft.process(row));
    let col_fft = planner_fft(h, inverse);
    let mut cols = vec![Complex64::default(); w * h];
    for y in 0..h {
        for x in 0..w {
            cols[x * h + y] = data[y * w + x];
        }
    }
    cols.par_chunks_mut(h).for_each(|col| col_fft.process(col));
    for x in 0..w {
        for y in 0..h {
            data[y * w + x] = cols[x * h + y];
        }
    }
}

/// For each input frequency bin, the output bins it lands in and their weight.
fn bin_map(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_in)
        .map(|k| {
            let half = n_in / 2;
            if n_in % 2 == 0 && k == half && n_out > n_in {
                // Nyquist bin: split between +n/2 and -n/2.
                vec![(half, 0.5), (n_out - half, 0.5)]
            } else if k <= half {
                vec![(k, 1.0)]
            } else {
                vec![(n_out - (n_in - k), 1.0)]
            }
        })
        .collect()
}

/// Upsamples a `gw x gh` grid to `out_w x out_h` by spectral zero padding.
pub fn fft_upsample_sized(
    grid: &[f64],
    gw: usize,
    gh: usize,
    out_w: usize,
    out_h: usize,
) -> Result<Vec<f64>> {
    if grid.len() != gw * gh {
        return Err(Error::InvalidSize(format!(
            "grid has {} cells, expected {gw}x{gh}",
            grid.len()
        )));
    }
    if out_w < gw || out_h < gh {
        return Err(Error::InvalidSize(format!(
            "output {out_w}x{out_h} is smaller than the {gw}x{gh} grid"
        )));
    }
    let mut spec: Vec<Complex64> = grid.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut spec, gw, gh, false);
    let mx = bin_map(gw, out_w);
    let my = bin_map(gh, out_h);
    let mut big = vec![Complex64::default(); out_w * out_h];
    for (ky, ys) in my.iter().enumerate() {
        for (kx, xs) in mx.iter().enumerate() {
            let v = spec[ky * gw + kx];
            for &(oy, wy) in ys {
                for &(ox, wx) in xs {
                    big[oy * out_w + ox] += v * (wx * wy);
                }
            }
        }
    }
    fft2(&mut big, out_w, out_h, true);
    // The inverse transform is unnormalized: dividing by the grid size gives
    // (1/(W H)) * (W H / (gw gh)).
    let scale = 1.0 / (gw * gh) as f64;
    Ok(big.iter().map(|c| c.re * scale).collect())
}

/// Adjoint of [`fft_upsample_sized`].
pub fn fft_upsample_adjoint_sized(
    upstream: &[f64],
    gw: usize,
    gh: usize,
    out_w: usize,
    out_h: usize,
) -> Result<Vec<f64>> {
    if upstream.len() != out_w * out_h {
        return Err(Error::InvalidSize(format!(
            "upstream has {} samples, expected {out_w}x{out_h}",
            upstream.len()
        )));
    }
    if out_w < gw || out_h < gh {
        return Err(Error::InvalidSize(format!(
            "output {out_w}x{out_h} is smaller than the {gw}x{gh} grid"
        )));
    }
    let mut big: Vec<Complex64> = upstream.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut big, out_w, out_h, false);
    let mx = bin_map(gw, out_w);
    let my = bin_map(gh, out_h);
    let mut spec = vec![Complex64::default(); gw * gh];
    for (ky, ys) in my.iter().enumerate() {
        for (kx, xs) in mx.iter().enumerate() {
            let mut acc = Complex64::default();
            for &(oy, wy) in ys {
                for &(ox, wx) in xs {
                    acc += big[oy * out_w + ox] * (wx * wy);
                }
            }
            spec[ky * gw + kx] = acc;
        }
    }
    fft2(&mut spec, gw, gh, true);
    let scale = 1.0 / (gw * gh) as f64;
    Ok(spec.iter().map(|c| c.re * scale).collect())
}

/// Upsamples a `GRID_SIZE x GRID_SIZE` grid to full resolution.
pub fn fft_upsample(grid: &[f64], out_w: usize, out_h: usize) -> Result<Vec<f64>> {
    fft_upsample_sized(grid, GRID_SIZE, GRID_SIZE, out_w, out_h)
}

/// Gradient of a full-resolution map pulled back to the grid.
pub fn fft_upsample_adjoint(upstream: &[f64], out_w: usize, out_h: usize) -> Result<Vec<f64>> {
    fft_upsample_adjoint_sized(upstream, GRID_SIZE, GRID_SIZE, out_w, out_h)
}

/// Full-resolution black and exposure maps of one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampledGrid {
    pub width: usize,
    pub height: usize,
    pub black: Vec<f64>,
    pub exposure: Vec<f64>,
}

impl UpsampledGrid {
    pub fn new(grid: &PhotometricGrid, width: usize, height: usize) -> Result<Self> {
        grid.validate()?;
        Ok(UpsampledGrid {
            width,
            height,
            black: fft_upsample(&grid.black, width, height)?,
            exposure: fft_upsample(&grid.exposure, width, height)?,
        })
    }

    /// `(c + B) * E` for one linear value at pixel `i`.
    #[inline]
    pub fn adjust(&self, i: usize, c: f64) -> f64 {
        (c + self.black[i]) * self.exposure[i]
    }
}

/// Applies `(C + B) * E` to the RGB channels of a linear image.
pub fn apply(img: &ImageBuffer, grid: &PhotometricGrid) -> Result<ImageBuffer> {
    img.ensure_tag(ColorTag::LinearHDR)?;
    let up = UpsampledGrid::new(grid, img.width, img.height)?;
    Ok(apply_upsampled(img, &up))
}

pub fn apply_upsampled(img: &ImageBuffer, up: &UpsampledGrid) -> ImageBuffer {
    let mut out = img.clone();
    out.data
        .par_chunks_exact_mut(4)
        .enumerate()
        .for_each(|(i, px)| {
            for c in &mut px[..3] {
                *c = up.adjust(i, *c as f64) as f32;
            }
        });
    out
}

/// `(mean over cells and cameras of (E - 1))^2`.
pub fn exposure_loss<'a>(exposures: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let (sum, n) = exposures
        .into_iter()
        .flat_map(|e| e.iter())
        .fold((0.0, 0usize), |(s, n), &e| (s + (e - 1.0), n + 1));
    if n == 0 {
        return 0.0;
    }
    (sum / n as f64).powi(2)
}

/// Gradient of [`exposure_loss`] with respect to every cell; the same for all.
pub fn exposure_loss_grad(mean_deviation: f64, total_cells: usize) -> f64 {
    2.0 * mean_deviation / total_cells as f64
}

/// Negative mean black level over cells and cameras.
pub fn black_loss<'a>(blacks: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let (sum, n) = blacks
        .into_iter()
        .flat_map(|b| b.iter())
        .fold((0.0, 0usize), |(s, n), &b| (s + b, n + 1));
    if n == 0 {
        return 0.0;
    }
    -sum / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::srgb_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    /// Trigonometric interpolation evaluated directly from a naive DFT.
    fn trig_interp(grid: &[f64], n: usize, out_w: usize, out_h: usize) -> Vec<f64> {
        let mut coef = vec![(0.0, 0.0); n * n];
        for ky in 0..n {
            for kx in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let ph = -TAU * ((kx * x) as f64 / n as f64 + (ky * y) as f64 / n as f64);
                        re += grid[y * n + x] * ph.cos();
                        im += grid[y * n + x] * ph.sin();
                    }
                }
                coef[ky * n + kx] = (re, im);
            }
        }
        // Signed frequency; the Nyquist bin becomes a cosine (average of +/-).
        let freq = |k: usize| -> i64 { if k <= n / 2 { k as i64 } else { k as i64 - n as i64 } };
        let mut out = vec![0.0; out_w * out_h];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for ky in 0..n {
                    for kx in 0..n {
                        let (re, im) = coef[ky * n + kx];
                        let fx = freq(kx) as f64;
                        let fy = freq(ky) as f64;
                        let px = TAU * fx * ox as f64 / out_w as f64;
                        let py = TAU * fy * oy as f64 / out_h as f64;
                        let nyq_x = kx == n / 2;
                        let nyq_y = ky == n / 2;
                        // Real part of c * e^{i(px+py)}, with Nyquist terms
                        // replaced by the real cosine they stand for.
                        let term = |ax: f64, ay: f64| re * (ax + ay).cos() - im * (ax + ay).sin();
                        acc += match (nyq_x, nyq_y) {
                            (false, false) => term(px, py),
                            (true, false) => 0.5 * (term(px, py) + term(-px, py)),
                            (false, true) => 0.5 * (term(px, py) + term(px, -py)),
                            (true, true) => 0.25 * (term(px, py) + term(-px, py) + term(px, -py) + term(-px, -py)),
                        };
                    }
                }
                out[oy * out_w + ox] = acc / (n * n) as f64;
            }
        }
        out
    }

    #[test]
    fn constant_grid() {
        let g = vec![0.37; GRID_CELLS];
        let up = fft_upsample(&g, 96, 64).unwrap();
        assert!(up.iter().all(|v| (v - 0.37).abs() < 1e-9));
    }

    #[test]
    fn cosine_grid_matches_trigonometric_interpolation() {
        let n = GRID_SIZE;
        let g: Vec<f64> = (0..GRID_CELLS).map(|i| (TAU * (i % n) as f64 / n as f64).cos()).collect();
        let (w, h) = (80, 48);
        let up = fft_upsample(&g, w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expected = (TAU * x as f64 / w as f64).cos();
                assert!((up[y * w + x] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn random_grid_matches_trigonometric_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 8;
        let g: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (w, h) = (20, 12);
        let up = fft_upsample_sized(&g, n, n, w, h).unwrap();
        let oracle = trig_interp(&g, n, w, h);
        for (a, b) in up.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        // Same size is the identity.
        let same = fft_upsample_sized(&g, n, n, n, n).unwrap();
        for (a, b) in same.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_preserved_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g1: Vec<f64> = (0..GRID_CELLS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = (0..GRID_CELLS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (w, h) = (64, 40);
        let u1 = fft_upsample(&g1, w, h).unwrap();
        let m_grid = g1.iter().sum::<f64>() / GRID_CELLS as f64;
        let m_up = u1.iter().sum::<f64>() / (w * h) as f64;
        assert!((m_grid - m_up).abs() < 1e-9);
        let u2 = fft_upsample(&g2, w, h).unwrap();
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let um = fft_upsample(&mix, w, h).unwrap();
        for i in 0..w * h {
            assert!((um[i] - (2.0 * u1[i] - 0.5 * u2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn output_smaller_than_grid_is_rejected() {
        let g = vec![0.0; GRID_CELLS];
        assert!(matches!(fft_upsample(&g, 16, 64), Err(Error::InvalidSize(_))));
    }

    #[test]
    fn adjoint_matches_dense_operator() {
        let (n, w, h) = (8, 16, 16);
        // Column j of the forward matrix is the upsampled delta grid.
        let columns: Vec<Vec<f64>> = (0..n * n)
            .map(|j| {
                let mut d = vec![0.0; n * n];
                d[j] = 1.0;
                fft_upsample_sized(&d, n, n, w, h).unwrap()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let adj = fft_upsample_adjoint_sized(&u, n, n, w, h).unwrap();
        for j in 0..n * n {
            let dense: f64 = columns[j].iter().zip(&u).map(|(a, b)| a * b).sum();
            assert!((adj[j] - dense).abs() < 1e-9);
        }
        // Adjoint of a one-hot upstream is a row of the forward matrix.
        let mut e = vec![0.0; w * h];
        e[37] = 1.0;
        let row = fft_upsample_adjoint_sized(&e, n, n, w, h).unwrap();
        for j in 0..n * n {
            assert!((row[j] - columns[j][37]).abs() < 1e-12);
        }
        let zero = fft_upsample_adjoint_sized(&vec![0.0; w * h], n, n, w, h).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(w, h) in &[(64, 64), (96, 50), (33, 32)] {
            let g: Vec<f64> = (0..GRID_CELLS).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fg = fft_upsample(&g, w, h).unwrap();
            let ftu = fft_upsample_adjoint(&u, w, h).unwrap();
            let lhs: f64 = fg.iter().zip(&u).map(|(a, b)| a * b).sum();
            let rhs: f64 = g.iter().zip(&ftu).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    fn constant_image(v: f32, w: usize, h: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, ColorTag::LinearHDR);
        for px in img.data.chunks_exact_mut(4) {
            px.copy_from_slice(&[v, v, v, 0.5]);
        }
        img
    }

    #[test]
    fn apply_identity_and_constants() {
        let img = constant_image(0.4, 40, 36);
        let out = apply(&img, &PhotometricGrid::identity(0)).unwrap();
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
        let grid = PhotometricGrid {
            camera_id: 0,
            black: vec![0.1; GRID_CELLS],
            exposure: vec![2.0; GRID_CELLS],
        };
        let out = apply(&img, &grid).unwrap();
        for px in out.data.chunks_exact(4) {
            assert!((px[0] - 1.0).abs() < 1e-6 && px[3] == 0.5);
        }
        let enc = crate::colorspace::convert_image(&img, ColorTag::UnboundedSRGB);
        assert!(matches!(apply(&enc, &grid), Err(Error::TagMismatch { .. })));
    }

    #[test]
    fn apply_matches_per_pixel_oracle_and_display_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (48, 40);
        let grid = PhotometricGrid {
            camera_id: 2,
            black: (0..GRID_CELLS).map(|_| rng.random_range(0.0..0.2)).collect(),
            exposure: (0..GRID_CELLS).map(|_| rng.random_range(0.7..1.3)).collect(),
        };
        let mut img = ImageBuffer::new(w, h, ColorTag::LinearHDR);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..2.0);
        }
        let out = apply(&img, &grid).unwrap();
        let b = fft_upsample(&grid.black, w, h).unwrap();
        let e = fft_upsample(&grid.exposure, w, h).unwrap();
        for i in 0..w * h {
            for c in 0..3 {
                let expected = (img.data[4 * i + c] as f64 + b[i]) * e[i];
                assert!((out.data[4 * i + c] as f64 - expected).abs() < 1e-9 * expected.abs().max(1.0) + 1e-6);
                // Display value of the fused expression.
                let fused = srgb_forward((img.data[4 * i + c] as f64 + b[i]) * e[i]);
                assert!((srgb_forward(out.data[4 * i + c] as f64) - fused).abs() < 1e-6);
            }
            assert_eq!(out.data[4 * i + 3], img.data[4 * i + 3]);
        }
    }

    #[test]
    fn regularizers() {
        let ones = vec![1.0; GRID_CELLS];
        assert_eq!(exposure_loss([ones.as_slice()]), 0.0);
        let e11 = vec![1.1; GRID_CELLS];
        assert!((exposure_loss([e11.as_slice(), e11.as_slice()]) - 0.01).abs() < 1e-12);
        let half: Vec<f64> = (0..GRID_CELLS).map(|i| if i % 2 == 0 { 0.9 } else { 1.1 }).collect();
        assert!(exposure_loss([half.as_slice()]).abs() < 1e-20);

        let zeros = vec![0.0; GRID_CELLS];
        assert_eq!(black_loss([zeros.as_slice()]), 0.0);
        let b5 = vec![0.5; GRID_CELLS];
        assert!((black_loss([b5.as_slice()]) + 0.5).abs() < 1e-15);
        let mixed: Vec<f64> = (0..GRID_CELLS).map(|i| [0.1, 0.3, -0.2, 0.6][i % 4]).collect();
        // Mean of the repeating pattern (0.1 + 0.3 - 0.2 + 0.6) / 4 = 0.2.
        assert!((black_loss([mixed.as_slice(), zeros.as_slice()]) + 0.1).abs() < 1e-12);
    }
}
