//! Forward and backward pass for one (camera, frame) view.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::CameraFrame;
use crate::colorspace::{srgb_forward, srgb_forward_deriv, ColorTag};
use crate::error::{Error, Result};
use crate::gaussian4d::{evaluate_batch, evaluate_grad, PolyGaussian, PolyGrad};
use crate::image::ImageBuffer;
use crate::photometric::{fft_upsample_adjoint, PhotometricGrid, UpsampledGrid};
use crate::splatter::{rasterize_backward, render, RenderBuffer};

use super::loss::{recon_loss_planes, ReconLoss};
use super::TrainConfig;

/// Ground truth of one view, pre-encoded to unbounded sRGB planes.
#[derive(Debug, Clone)]
pub(crate) struct Target {
    pub width: usize,
    pub height: usize,
    pub planes: [Vec<f64>; 3],
}

impl Target {
    pub fn new(img: &ImageBuffer) -> Result<Self> {
        img.ensure_tag(ColorTag::LinearHDR)?;
        Ok(Target {
            width: img.width,
            height: img.height,
            planes: std::array::from_fn(|c| img.channel(c).into_iter().map(srgb_forward).collect()),
        })
    }
}

/// Output of [`photometric_loss`]: the reconstruction loss plus gradients
/// with respect to the rendered linear RGB and the upsampled grid maps.
pub(crate) struct PhotometricLoss {
    pub recon: ReconLoss,
    /// Display-space PSNR of the prediction.
    pub psnr: f64,
    pub d_rgb: Vec<f64>,
    pub d_black: Vec<f64>,
    pub d_exposure: Vec<f64>,
}

/// `recon(srgb((C + B) E), srgb(gt))` with its backward pass.
pub(crate) fn photometric_loss(
    buf: &RenderBuffer,
    up: Option<&UpsampledGrid>,
    target: &Target,
    ssim_weight: f64,
) -> PhotometricLoss {
    let n = buf.width * buf.height;
    let adjusted: Vec<f64> = match up {
        Some(up) => buf.rgb.par_iter().enumerate().map(|(k, &c)| up.adjust(k / 3, c)).collect(),
        None => buf.rgb.clone(),
    };
    let pred: [Vec<f64>; 3] = std::array::from_fn(|c| (0..n).map(|i| srgb_forward(adjusted[3 * i + c])).collect());
    let recon = recon_loss_planes(&pred, &target.planes, buf.width, buf.height, ssim_weight);

    let mut se = 0.0;
    for c in 0..3 {
        for i in 0..n {
            let d = pred[c][i].clamp(0.0, 1.0) - target.planes[c][i].clamp(0.0, 1.0);
            se += d * d;
        }
    }
    let psnr = crate::metrics::psnr_from_mse(se / (3 * n) as f64, 1.0);

    let d_adj: Vec<f64> = recon
        .grad
        .par_iter()
        .zip(adjusted.par_iter())
        .map(|(g, &a)| g * srgb_forward_deriv(a))
        .collect();
    let (d_rgb, d_black, d_exposure) = match up {
        Some(up) => {
            let d_rgb = d_adj.iter().enumerate().map(|(k, g)| g * up.exposure[k / 3]).collect();
            let mut d_black = vec![0.0; n];
            let mut d_exposure = vec![0.0; n];
            for i in 0..n {
                for c in 0..3 {
                    let g = d_adj[3 * i + c];
                    d_black[i] += g * up.exposure[i];
                    d_exposure[i] += g * (buf.rgb[3 * i + c] + up.black[i]);
                }
            }
            (d_rgb, d_black, d_exposure)
        }
        None => (d_adj, Vec::new(), Vec::new()),
    };
    PhotometricLoss {
        recon,
        psnr,
        d_rgb,
        d_black,
        d_exposure,
    }
}

/// Loss of one view and its gradients with respect to every primitive
/// coefficient and, when a grid is given, its black-level and exposure cells.
#[derive(Debug, Clone)]
pub struct ViewGrad {
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub gaussians: Vec<PolyGrad>,
    pub sh: Vec<Vec<Vector3<f64>>>,
    pub black: Vec<f64>,
    pub exposure: Vec<f64>,
}

pub(crate) fn view_grad_cached(
    gaussians: &[PolyGaussian],
    cam: &CameraFrame,
    grid: Option<&PhotometricGrid>,
    target: &Target,
    cfg: &TrainConfig,
) -> Result<ViewGrad> {
    if (cam.width, cam.height) != (target.width, target.height) {
        return Err(Error::SizeMismatch {
            left: (cam.width, cam.height),
            right: (target.width, target.height),
        });
    }
    let t = cam.frame as f64;
    let settings = cfg.raster_settings();
    let bg = Vector3::from(cfg.background);
    let slices = evaluate_batch(gaussians, t)?;
    let buf = render(&slices, cam, &bg, &settings)?;
    let up = grid.map(|g| UpsampledGrid::new(g, cam.width, cam.height)).transpose()?;
    let pl = photometric_loss(&buf, up.as_ref(), target, cfg.ssim_weight);
    let d_alpha = vec![0.0; cam.width * cam.height];
    let rg = rasterize_backward(&slices, cam, &bg, &settings, &pl.d_rgb, &d_alpha)?;
    let poly: Vec<PolyGrad> = gaussians
        .par_iter()
        .zip(rg.slices.par_iter())
        .map(|(g, sg)| evaluate_grad(g, t, sg))
        .collect::<Result<_>>()?;
    let (black, exposure) = if up.is_some() {
        (
            fft_upsample_adjoint(&pl.d_black, cam.width, cam.height)?,
            fft_upsample_adjoint(&pl.d_exposure, cam.width, cam.height)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ViewGrad {
        loss: pl.recon.value,
        l1: pl.recon.l1,
        ssim: pl.recon.ssim,
        psnr: pl.psnr,
        gaussians: poly,
        sh: rg.sh,
        black,
        exposure,
    })
}

/// Reconstruction loss of a linear ground-truth view under an optional
/// photometric grid, with gradients.
pub fn view_loss_grad(
    gaussians: &[PolyGaussian],
    cam: &CameraFrame,
    grid: Option<&PhotometricGrid>,
    gt: &ImageBuffer,
    cfg: &TrainConfig,
) -> Result<ViewGrad> {
    view_grad_cached(gaussians, cam, grid, &Target::new(gt)?, cfg)
}
