//! Rendering trained primitives along camera paths.

use nalgebra::Vector3;

use crate::camera::CameraFrame;
use crate::error::{Error, Result};
use crate::gaussian4d::{evaluate_batch, PolyGaussian};
use crate::image::ImageBuffer;
use crate::photometric::{apply, PhotometricGrid};
use crate::splatter::{render, RasterSettings};

/// Renders one view at the camera's frame time. The photometric grid, when
/// given, is applied to the linear result.
pub fn render_view(
    gaussians: &[PolyGaussian],
    cam: &CameraFrame,
    grid: Option<&PhotometricGrid>,
    settings: &RasterSettings,
    background: &Vector3<f64>,
) -> Result<ImageBuffer> {
    let slices = evaluate_batch(gaussians, cam.frame as f64)?;
    let img = render(&slices, cam, background, settings)?.to_image();
    match grid {
        Some(g) => apply(&img, g),
        None => Ok(img),
    }
}

/// Renders every camera of a path without photometric adjustment.
pub fn render_path(
    gaussians: &[PolyGaussian],
    path: &[CameraFrame],
    settings: &RasterSettings,
    background: &Vector3<f64>,
) -> Result<Vec<ImageBuffer>> {
    path.iter()
        .enumerate()
        .map(|(i, cam)| render_view(gaussians, cam, None, settings, background).map_err(|e| Error::at(i, e)))
        .collect()
}
