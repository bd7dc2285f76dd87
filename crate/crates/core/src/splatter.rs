//! Tile-based differentiable Gaussian rasterizer.
//!
//! Slices are projected with the first-order (EWA) perspective approximation,
//! low-pass filtered in screen space with opacity compensation, sorted
//! globally by depth (ties broken by primitive index) and composited front to
//! back per pixel in linear color. Pixel centers sit at integer coordinates.
//!
//! The backward pass re-runs the per-pixel traversal and walks contributors
//! back to front, so it needs no division by `1 - alpha`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{CameraFrame, Z_NEAR};
use crate::colorspace::{srgb_inverse, srgb_inverse_deriv, ColorTag};
use crate::error::Result;
use crate::gaussian4d::{GaussianSlice, SliceGrad};
use crate::geometry::{quat_to_matrix, quat_to_matrix_backward};
use crate::image::ImageBuffer;
use crate::sh::{evaluate_sh, evaluate_sh_backward};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSettings {
    pub tile_size: usize,
    /// Screen-space low-pass variance in pixel^2 added to every footprint.
    pub aa_variance: f64,
    pub alpha_min: f64,
    pub transmittance_stop: f64,
    /// Footprint cutoff in standard deviations.
    pub sigma_cutoff: f64,
    /// Convert SH colors with the inverse sRGB curve before compositing.
    /// Off means colors are stored linear.
    pub linearize_colors: bool,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings {
            tile_size: 16,
            aa_variance: 0.3 * 0.3,
            alpha_min: 1.0 / 255.0,
            transmittance_stop: 1e-4,
            sigma_cutoff: 3.0,
            linearize_colors: true,
        }
    }
}

/// A projected, antialiased screen-space splat.
#[derive(Debug, Clone)]
pub struct Splat2D {
    /// Index of the source slice.
    pub index: usize,
    pub mean: Vector2<f64>,
    /// Screen covariance after the low-pass dilation.
    pub cov: Matrix2<f64>,
    pub depth: f64,
    /// Opacity after antialiasing compensation.
    pub opacity: f64,
    /// Linear RGB.
    pub color: Vector3<f64>,
    conic: Matrix2<f64>,
    /// Inclusive pixel bounds `[x0, x1] x [y0, y1]`.
    bbox: [i64; 4],
    cache: ProjectionCache,
}

#[derive(Debug, Clone)]
struct ProjectionCache {
    p_cam: Vector3<f64>,
    t_mat: Matrix2x3<f64>,
    cov3: Matrix3<f64>,
    rot: Matrix3<f64>,
    cov_raw: Matrix2<f64>,
    det_ratio: f64,
    view_dir: Vector3<f64>,
    view_dist: f64,
    color_encoded: Vector3<f64>,
}

/// Linear RGB plus alpha in f64, the working format of the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffer {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        RenderBuffer {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn to_image(&self) -> ImageBuffer {
        let mut img = ImageBuffer::new(self.width, self.height, ColorTag::LinearHDR);
        for (i, px) in img.data.chunks_exact_mut(4).enumerate() {
            px[0] = self.rgb[3 * i] as f32;
            px[1] = self.rgb[3 * i + 1] as f32;
            px[2] = self.rgb[3 * i + 2] as f32;
            px[3] = self.alpha[i] as f32;
        }
        img
    }
}

/// Gradients produced by [`rasterize_backward`], indexed like the input slices.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrad {
    pub slices: Vec<SliceGrad>,
    pub sh: Vec<Vec<Vector3<f64>>>,
}

fn cofactor(m: &Matrix2<f64>) -> Matrix2<f64> {
    Matrix2::new(m[(1, 1)], -m[(1, 0)], -m[(0, 1)], m[(0, 0)])
}

fn project_one(
    index: usize,
    s: &GaussianSlice<'_>,
    cam: &CameraFrame,
    w: &Matrix3<f64>,
    cam_center: &Vector3<f64>,
    settings: &RasterSettings,
) -> Option<Splat2D> {
    let p_cam = w * s.mean + cam.translation;
    let z = p_cam.z;
    if z <= Z_NEAR {
        return None;
    }
    let lim_x = 1.3 * cam.cx.max(cam.width as f64 - cam.cx) / cam.fx;
    let lim_y = 1.3 * cam.cy.max(cam.height as f64 - cam.cy) / cam.fy;
    if (p_cam.x / z).abs() > lim_x || (p_cam.y / z).abs() > lim_y {
        return None;
    }
    let mean = Vector2::new(
        cam.fx * p_cam.x / z + cam.cx,
        cam.fy * p_cam.y / z + cam.cy,
    );
    let j = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * p_cam.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * p_cam.y / (z * z),
    );
    let t_mat = j * w;
    let rot = quat_to_matrix(&s.rotation);
    let m = rot * Matrix3::from_diagonal(&s.scale);
    let cov3 = m * m.transpose();
    let cov_raw = t_mat * cov3 * t_mat.transpose();
    let cov = cov_raw + Matrix2::identity() * settings.aa_variance;
    let det_a = cov.determinant();
    if !(det_a > 0.0) {
        return None;
    }
    let det_ratio = (cov_raw.determinant() / det_a).max(0.0);
    let opacity = s.opacity * det_ratio.sqrt();
    if !(opacity > 0.0) || opacity < settings.alpha_min {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det_a;

    let hx = settings.sigma_cutoff * cov[(0, 0)].sqrt();
    let hy = settings.sigma_cutoff * cov[(1, 1)].sqrt();
    let bbox = [
        ((mean.x - hx).ceil() as i64).max(0),
        ((mean.x + hx).floor() as i64).min(cam.width as i64 - 1),
        ((mean.y - hy).ceil() as i64).max(0),
        ((mean.y + hy).floor() as i64).min(cam.height as i64 - 1),
    ];
    if bbox[0] > bbox[1] || bbox[2] > bbox[3] {
        return None;
    }

    let v = s.mean - cam_center;
    let view_dist = v.norm();
    let view_dir = if view_dist > 0.0 { v / view_dist } else { Vector3::z() };
    let color_encoded = evaluate_sh(s.sh, &view_dir);
    let color = if settings.linearize_colors {
        color_encoded.map(srgb_inverse)
    } else {
        color_encoded
    };

    Some(Splat2D {
        index,
        mean,
        cov,
        depth: z,
        opacity,
        color,
        conic,
        bbox,
        cache: ProjectionCache {
            p_cam,
            t_mat,
            cov3,
            rot,
            cov_raw,
            det_ratio,
            view_dir,
            view_dist,
            color_encoded,
        },
    })
}

/// Projects visible slices to screen space, sorted front to back.
pub fn project_splats(
    slices: &[GaussianSlice<'_>],
    cam: &CameraFrame,
    settings: &RasterSettings,
) -> Vec<Splat2D> {
    let w = cam.rotation_matrix();
    let center = cam.center();
    let mut splats: Vec<Splat2D> = slices
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project_one(i, s, cam, &w, &center, settings))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

/// CSV dump of projected splats for debugging.
pub fn splats_to_csv(splats: &[Splat2D]) -> String {
    let mut out = String::from("index,u,v,cov_xx,cov_xy,cov_yy,depth,opacity,r,g,b\n");
    for s in splats {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            s.index,
            s.mean.x,
            s.mean.y,
            s.cov[(0, 0)],
            s.cov[(0, 1)],
            s.cov[(1, 1)],
            s.depth,
            s.opacity,
            s.color.x,
            s.color.y,
            s.color.z
        ));
    }
    out
}

struct Tiles {
    nx: usize,
    ny: usize,
    size: usize,
    /// Per tile, positions into the sorted splat list, front to back.
    lists: Vec<Vec<u32>>,
}

fn bin_tiles(splats: &[Splat2D], width: usize, height: usize, size: usize) -> Tiles {
    let nx = width.div_ceil(size);
    let ny = height.div_ceil(size);
    let mut lists = vec![Vec::new(); nx * ny];
    for (k, s) in splats.iter().enumerate() {
        let tx0 = s.bbox[0] as usize / size;
        let tx1 = s.bbox[1] as usize / size;
        let ty0 = s.bbox[2] as usize / size;
        let ty1 = s.bbox[3] as usize / size;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * nx + tx].push(k as u32);
            }
        }
    }
    Tiles {
        nx,
        ny,
        size,
        lists,
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    transmittance: f64,
    d: Vector2<f64>,
}

/// The fields traversal reads, packed contiguously per tile.
#[derive(Clone, Copy)]
struct Footprint {
    mean: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
    bbox: [i64; 4],
}

fn footprints(splats: &[Splat2D], list: &[u32]) -> Vec<Footprint> {
    list.iter()
        .map(|&k| {
            let s = &splats[k as usize];
            Footprint {
                mean: s.mean,
                conic: [s.conic[(0, 0)], s.conic[(0, 1)], s.conic[(1, 1)]],
                opacity: s.opacity,
                color: s.color,
                bbox: s.bbox,
            }
        })
        .collect()
}

/// Front-to-back traversal for one pixel. Calls `visit` for each splat that
/// contributes, returning the final transmittance.
#[inline]
fn traverse(
    local: &[Footprint],
    px: i64,
    py: i64,
    settings: &RasterSettings,
    mut visit: impl FnMut(usize, &Footprint, f64, f64, f64, Vector2<f64>),
) -> f64 {
    let cutoff = -0.5 * settings.sigma_cutoff * settings.sigma_cutoff;
    let (fx, fy) = (px as f64, py as f64);
    let mut t = 1.0;
    for (slot, s) in local.iter().enumerate() {
        if px < s.bbox[0] || px > s.bbox[1] || py < s.bbox[2] || py > s.bbox[3] {
            continue;
        }
        let d = Vector2::new(fx - s.mean.x, fy - s.mean.y);
        let [a, b, c] = s.conic;
        let power = -0.5 * (a * d.x * d.x + 2.0 * b * d.x * d.y + c * d.y * d.y);
        if power < cutoff {
            continue;
        }
        let gauss = power.exp();
        let alpha = s.opacity * gauss;
        if alpha < settings.alpha_min {
            continue;
        }
        visit(slot, s, alpha, gauss, t, d);
        t *= 1.0 - alpha;
        if t < settings.transmittance_stop {
            break;
        }
    }
    t
}

fn tile_bounds(tiles: &Tiles, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let tx = tile % tiles.nx;
    let ty = tile / tiles.nx;
    let x0 = tx * tiles.size;
    let y0 = ty * tiles.size;
    (x0, (x0 + tiles.size).min(width), y0, (y0 + tiles.size).min(height))
}

/// Forward rasterization into an f64 buffer.
pub fn render(
    slices: &[GaussianSlice<'_>],
    cam: &CameraFrame,
    background: &Vector3<f64>,
    settings: &RasterSettings,
) -> Result<RenderBuffer> {
    cam.validate()?;
    let (width, height) = (cam.width, cam.height);
    let splats = project_splats(slices, cam, settings);
    let tiles = bin_tiles(&splats, width, height, settings.tile_size);

    let tile_out: Vec<(Vec<f64>, Vec<f64>)> = (0..tiles.nx * tiles.ny)
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tile_bounds(&tiles, tile, width, height);
            let local = footprints(&splats, &tiles.lists[tile]);
            let n = (x1 - x0) * (y1 - y0);
            let mut rgb = Vec::with_capacity(3 * n);
            let mut alpha = Vec::with_capacity(n);
            for py in y0..y1 {
                for px in x0..x1 {
                    let mut c = Vector3::zeros();
                    let t = traverse(&local, px as i64, py as i64, settings, |_, s, a, _, t, _| {
                        c += s.color * (t * a);
                    });
                    c += background * t;
                    rgb.extend_from_slice(c.as_slice());
                    alpha.push(1.0 - t);
                }
            }
            (rgb, alpha)
        })
        .collect();

    let mut out = RenderBuffer::new(width, height);
    for (tile, (rgb, alpha)) in tile_out.iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(&tiles, tile, width, height);
        let tw = x1 - x0;
        for y in y0..y1 {
            let row = (y - y0) * tw;
            let dst = y * width + x0;
            out.alpha[dst..dst + tw].copy_from_slice(&alpha[row..row + tw]);
            out.rgb[3 * dst..3 * (dst + tw)].copy_from_slice(&rgb[3 * row..3 * (row + tw)]);
        }
    }
    Ok(out)
}

/// Renders slices to a linear HDR image. With no visible primitives every
/// pixel is the background with alpha 0.
pub fn rasterize(
    slices: &[GaussianSlice<'_>],
    cam: &CameraFrame,
    background: &Vector3<f64>,
) -> Result<ImageBuffer> {
    Ok(render(slices, cam, background, &RasterSettings::default())?.to_image())
}

#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
}

impl std::ops::AddAssign for ScreenGrad {
    fn add_assign(&mut self, o: Self) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Backward pass. `d_rgb` (interleaved) and `d_alpha` are the loss gradients
/// with respect to the rendered linear color and alpha.
pub fn rasterize_backward(
    slices: &[GaussianSlice<'_>],
    cam: &CameraFrame,
    background: &Vector3<f64>,
    settings: &RasterSettings,
    d_rgb: &[f64],
    d_alpha: &[f64],
) -> Result<RasterGrad> {
    cam.validate()?;
    let (width, height) = (cam.width, cam.height);
    assert_eq!(d_rgb.len(), 3 * width * height);
    assert_eq!(d_alpha.len(), width * height);
    let splats = project_splats(slices, cam, settings);
    let tiles = bin_tiles(&splats, width, height, settings.tile_size);

    let tile_grads: Vec<Vec<ScreenGrad>> = (0..tiles.nx * tiles.ny)
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tile_bounds(&tiles, tile, width, height);
            let local = footprints(&splats, &tiles.lists[tile]);
            let mut acc = vec![ScreenGrad::default(); local.len()];
            let mut contribs: Vec<Contribution> = Vec::new();
            for py in y0..y1 {
                for px in x0..x1 {
                    let pix = py * width + px;
                    let g_c = Vector3::new(d_rgb[3 * pix], d_rgb[3 * pix + 1], d_rgb[3 * pix + 2]);
                    let g_a = d_alpha[pix];
                    if g_c == Vector3::zeros() && g_a == 0.0 {
                        continue;
                    }
                    contribs.clear();
                    traverse(&local, px as i64, py as i64, settings, |slot, _, alpha, gauss, t, d| {
                        contribs.push(Contribution {
                            slot,
                            alpha,
                            gauss,
                            transmittance: t,
                            d,
                        });
                    });
                    // Color and alpha of everything behind the current splat.
                    let mut behind_c = *background;
                    let mut behind_a = 0.0;
                    for c in contribs.iter().rev() {
                        let s = &local[c.slot];
                        let t = c.transmittance;
                        let g_alpha = g_c.dot(&((s.color - behind_c) * t)) + g_a * t * (1.0 - behind_a);
                        let g = &mut acc[c.slot];
                        g.color += g_c * (t * c.alpha);
                        g.opacity += g_alpha * c.gauss;
                        let g_power = g_alpha * c.alpha;
                        // power = -0.5 d^T Q d with d = pixel - mean.
                        let [ca, cb, cc] = s.conic;
                        g.mean += Vector2::new(ca * c.d.x + cb * c.d.y, cb * c.d.x + cc * c.d.y) * g_power;
                        g.conic += c.d * c.d.transpose() * (-0.5 * g_power);
                        behind_c = s.color * c.alpha + behind_c * (1.0 - c.alpha);
                        behind_a = c.alpha + behind_a * (1.0 - c.alpha);
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); splats.len()];
    for (tile, grads) in tile_grads.into_iter().enumerate() {
        for (slot, g) in grads.into_iter().enumerate() {
            screen[tiles.lists[tile][slot] as usize] += g;
        }
    }

    let mut out = RasterGrad {
        slices: vec![SliceGrad::default(); slices.len()],
        sh: slices.iter().map(|s| vec![Vector3::zeros(); s.sh.len()]).collect(),
    };
    let w = cam.rotation_matrix();
    let per_splat: Vec<(usize, SliceGrad, Vec<Vector3<f64>>)> = splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(s, g)| {
            let slice = &slices[s.index];
            let mut d_sh = vec![Vector3::zeros(); slice.sh.len()];
            let sg = splat_backward(s, slice, g, cam, &w, settings, &mut d_sh);
            (s.index, sg, d_sh)
        })
        .collect();
    for (i, sg, d_sh) in per_splat {
        out.slices[i] = sg;
        out.sh[i] = d_sh;
    }
    Ok(out)
}

fn splat_backward(
    s: &Splat2D,
    slice: &GaussianSlice<'_>,
    g: &ScreenGrad,
    cam: &CameraFrame,
    w: &Matrix3<f64>,
    settings: &RasterSettings,
    d_sh: &mut [Vector3<f64>],
) -> SliceGrad {
    let c = &s.cache;
    let mut g_mean3 = Vector3::zeros();

    // Color: linear <- encoded <- SH(view direction).
    let g_enc = if settings.linearize_colors {
        g.color.component_mul(&c.color_encoded.map(srgb_inverse_deriv))
    } else {
        g.color
    };
    let d_dir = evaluate_sh_backward(slice.sh, &c.view_dir, &g_enc, d_sh);
    if c.view_dist > 0.0 {
        g_mean3 += (d_dir - c.view_dir * c.view_dir.dot(&d_dir)) / c.view_dist;
    }

    // Effective opacity = o * sqrt(det(cov_raw) / det(cov)).
    let sqrt_r = c.det_ratio.sqrt();
    let g_o = g.opacity * sqrt_r;
    let det_a = s.cov.determinant();
    let mut g_cov2 = Matrix2::zeros();
    if sqrt_r > 1e-12 {
        g_cov2 += (cofactor(&c.cov_raw) - cofactor(&s.cov) * c.det_ratio)
            * (g.opacity * slice.opacity * 0.5 / (sqrt_r * det_a));
    }
    // Conic = cov^-1; the dilation is additive so d cov = d cov_raw.
    g_cov2 -= s.conic * g.conic * s.conic;

    // cov_raw = T cov3 T^T, T = J W.
    let g_cov3 = c.t_mat.transpose() * g_cov2 * c.t_mat;
    let g_t = (g_cov2 + g_cov2.transpose()) * c.t_mat * c.cov3;
    let g_j = g_t * w.transpose();

    let (x, y, z) = (c.p_cam.x, c.p_cam.y, c.p_cam.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_pc = Vector3::new(
        g_j[(0, 2)] * (-fx / z2),
        g_j[(1, 2)] * (-fy / z2),
        g_j[(0, 0)] * (-fx / z2)
            + g_j[(0, 2)] * (2.0 * fx * x / z3)
            + g_j[(1, 1)] * (-fy / z2)
            + g_j[(1, 2)] * (2.0 * fy * y / z3),
    );
    g_pc.x += g.mean.x * fx / z;
    g_pc.y += g.mean.y * fy / z;
    g_pc.z += -g.mean.x * fx * x / z2 - g.mean.y * fy * y / z2;
    g_mean3 += w.transpose() * g_pc;

    // cov3 = M M^T, M = R S.
    let m = c.rot * Matrix3::from_diagonal(&slice.scale);
    let g_m = (g_cov3 + g_cov3.transpose()) * m;
    let rt_gm = c.rot.transpose() * g_m;
    let g_scale = Vector3::new(rt_gm[(0, 0)], rt_gm[(1, 1)], rt_gm[(2, 2)]);
    let g_rot = g_m * Matrix3::from_diagonal(&slice.scale);
    let g_q = quat_to_matrix_backward(&slice.rotation, &g_rot);

    SliceGrad {
        mean: g_mean3,
        rotation: g_q,
        scale: g_scale,
        opacity: g_o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn slice<'a>(mean: Vector3<f64>, scale: f64, opacity: f64, sh: &'a [Vector3<f64>]) -> GaussianSlice<'a> {
        GaussianSlice {
            mean,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            scale: Vector3::repeat(scale),
            opacity,
            sh,
        }
    }

    fn cam64() -> CameraFrame {
        CameraFrame::identity(64, 64, 80.0)
    }

    #[test]
    fn empty_scene_is_background() {
        let img = rasterize(&[], &cam64(), &Vector3::zeros()).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
        let img = rasterize(&[], &cam64(), &Vector3::new(0.2, 0.3, 0.4)).unwrap();
        assert_eq!(img.pixel(5, 7), [0.2, 0.3, 0.4, 0.0]);
    }

    #[test]
    fn single_splat_center_alpha() {
        let sh = [Vector3::repeat(0.5 / crate::sh::SH_C0)];
        let (scale, z, o) = (0.02, 2.0, 0.7);
        let cam = cam64();
        let s = slice(Vector3::new(0.0, 0.0, z), scale, o, &sh);
        let img = rasterize(&[s], &cam, &Vector3::zeros()).unwrap();
        // Projected variance (f * s / z)^2 plus the low-pass variance.
        let var = (cam.fx * scale / z).powi(2);
        let expected = o * (var * var / ((var + 0.09) * (var + 0.09))).sqrt();
        let center = img.pixel(32, 32);
        assert!((center[3] as f64 - expected).abs() < 1e-5);
        let lin = srgb_inverse(0.5);
        assert!((center[0] as f64 - expected * lin).abs() < 1e-5);
    }

    #[test]
    fn co_located_splats_compose() {
        let sh = [Vector3::repeat(1.0)];
        let cam = cam64();
        let a = slice(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.6, &sh);
        let b = slice(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.3, &sh);
        let img = rasterize(&[a, b], &cam, &Vector3::zeros()).unwrap();
        let single = |o| {
            let s = slice(Vector3::new(0.0, 0.0, 2.0), 0.1, o, &sh);
            rasterize(&[s], &cam, &Vector3::zeros()).unwrap().pixel(32, 32)[3] as f64
        };
        let (a1, a2) = (single(0.6), single(0.3));
        assert!((img.pixel(32, 32)[3] as f64 - (1.0 - (1.0 - a1) * (1.0 - a2))).abs() < 1e-6);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, shs: &[Vec<Vector3<f64>>]) -> Vec<GaussianSlice<'static>> {
        let shs: &'static [Vec<Vector3<f64>>] = Box::leak(shs.to_vec().into_boxed_slice());
        (0..n)
            .map(|i| {
                let q = Vector4::new(
                    rng.random_range(0.5..1.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                )
                .normalize();
                GaussianSlice {
                    mean: Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(1.5..2.5)),
                    rotation: q,
                    scale: Vector3::new(rng.random_range(0.03..0.12), rng.random_range(0.03..0.12), rng.random_range(0.03..0.12)),
                    opacity: rng.random_range(0.3..0.9),
                    sh: &shs[i],
                }
            })
            .collect()
    }

    fn random_sh(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<Vector3<f64>>> {
        (0..n)
            .map(|_| {
                (0..4)
                    .map(|k| {
                        let s = if k == 0 { 1.5 } else { 0.3 };
                        Vector3::new(rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.0..s))
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shs = random_sh(&mut rng, 40);
        let slices = random_scene(&mut rng, 40, &shs);
        let cam = cam64();
        let a = rasterize(&slices, &cam, &Vector3::zeros()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| rasterize(&slices, &cam, &Vector3::zeros()).unwrap());
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn alpha_in_unit_interval_and_monotone_in_opacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shs = random_sh(&mut rng, 30);
        let mut slices = random_scene(&mut rng, 30, &shs);
        let cam = cam64();
        let before = rasterize(&slices, &cam, &Vector3::zeros()).unwrap();
        assert!(before.data.chunks(4).all(|p| (0.0..=1.0).contains(&p[3])));
        slices[7].opacity = (slices[7].opacity + 0.3).min(1.0);
        let after = rasterize(&slices, &cam, &Vector3::zeros()).unwrap();
        for (p, q) in before.data.chunks(4).zip(after.data.chunks(4)) {
            assert!(q[3] >= p[3] - 1e-7);
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shs = random_sh(&mut rng, 20);
        let slices = random_scene(&mut rng, 20, &shs);
        let cam = cam64();
        let mut shifted = cam.clone();
        shifted.cx += 1.0;
        let a = rasterize(&slices, &cam, &Vector3::zeros()).unwrap();
        let b = rasterize(&slices, &shifted, &Vector3::zeros()).unwrap();
        for y in 8..56 {
            for x in 8..55 {
                let p = a.pixel(x, y);
                let q = b.pixel(x + 1, y);
                for c in 0..4 {
                    assert!((p[c] - q[c]).abs() < 1e-5);
                }
            }
        }
    }

    fn loss(slices: &[GaussianSlice<'_>], cam: &CameraFrame, w_rgb: &[f64], w_a: &[f64]) -> f64 {
        let r = render(slices, cam, &Vector3::new(0.1, 0.05, 0.0), &RasterSettings::default()).unwrap();
        r.rgb.iter().zip(w_rgb).map(|(a, b)| a * b).sum::<f64>() + r.alpha.iter().zip(w_a).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shs = random_sh(&mut rng, 5);
        let slices = random_scene(&mut rng, 5, &shs);
        let cam = cam64();
        let g = rasterize_backward(&slices, &cam, &Vector3::zeros(), &RasterSettings::default(), &vec![0.0; 3 * 64 * 64], &vec![0.0; 64 * 64]).unwrap();
        assert!(g.slices.iter().all(|s| *s == SliceGrad::default()));
        assert!(g.sh.iter().flatten().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn occluded_splat_has_no_gradient() {
        let front_sh = [Vector3::repeat(1.0)];
        let back_sh = [Vector3::repeat(0.5)];
        let cam = cam64();
        let front = slice(Vector3::new(0.0, 0.0, 1.0), 0.5, 1.0, &front_sh);
        let back = slice(Vector3::new(0.0, 0.0, 3.0), 0.02, 0.9, &back_sh);
        let n = 64 * 64;
        let settings = RasterSettings::default();
        let (up_c, up_a) = (vec![1.0; 3 * n], vec![1.0; n]);
        let occluded = rasterize_backward(&[front, back], &cam, &Vector3::zeros(), &settings, &up_c, &up_a).unwrap();
        let alone = rasterize_backward(&[back], &cam, &Vector3::zeros(), &settings, &up_c, &up_a).unwrap();
        let ratio = |a: f64, b: f64| a.abs() / b.abs();
        assert!(ratio(occluded.slices[1].mean.norm(), alone.slices[0].mean.norm()) < 1e-3);
        assert!(ratio(occluded.slices[1].opacity, alone.slices[0].opacity) < 1e-3);
        assert!(ratio(occluded.sh[1][0].norm(), alone.sh[0][0].norm()) < 1e-3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 5;
        let shs = random_sh(&mut rng, n);
        let slices = random_scene(&mut rng, n, &shs);
        let cam = cam64();
        let npx = 64 * 64;
        let w_rgb: Vec<f64> = (0..3 * npx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_a: Vec<f64> = (0..npx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = rasterize_backward(&slices, &cam, &Vector3::new(0.1, 0.05, 0.0), &RasterSettings::default(), &w_rgb, &w_a).unwrap();
        let h = 1e-5;
        let check = |an: f64, f: &dyn Fn(&mut GaussianSlice<'static>, f64)| {
            let mut p = slices.clone();
            let mut m = slices.clone();
            f(&mut p[0], h);
            f(&mut m[0], -h);
            let fd = (loss(&p, &cam, &w_rgb, &w_a) - loss(&m, &cam, &w_rgb, &w_a)) / (2.0 * h);
            let tol = 1e-3 * fd.abs().max(an.abs()).max(1e-2);
            assert!((an - fd).abs() < tol, "analytic {an} fd {fd}");
        };
        for k in 0..3 {
            check(g.slices[0].mean[k], &|s, d| s.mean[k] += d);
            check(g.slices[0].scale[k], &|s, d| s.scale[k] += d);
        }
        for k in 0..4 {
            check(g.slices[0].rotation[k], &|s, d| s.rotation[k] += d);
        }
        check(g.slices[0].opacity, &|s, d| s.opacity += d);
    }
}
