//! Paired low- and high-budget reconstructions of the same content.

use nalgebra::Vector3;

use crate::camera::CameraFrame;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::render::render_path;

use super::{train_segment, FramePoints, TrainConfig, TrainOutcome, TrainView};

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub lq: TrainOutcome,
    pub hq: TrainOutcome,
    pub lq_frames: Vec<ImageBuffer>,
    pub hq_frames: Vec<ImageBuffer>,
}

/// Trains the same segment twice with the two configs' budgets and renders
/// both along `path`.
pub fn pairgen(
    views: &[TrainView],
    heldout: &[TrainView],
    points: &[FramePoints],
    time_range: (f64, f64),
    cfg_lq: &TrainConfig,
    cfg_hq: &TrainConfig,
    path: &[CameraFrame],
) -> Result<PairOutcome> {
    cfg_lq.validate()?;
    cfg_hq.validate()?;
    if cfg_lq.resolve_budget() >= cfg_hq.resolve_budget() {
        return Err(Error::Config(format!(
            "low-quality budget {} must be below the high-quality budget {}",
            cfg_lq.resolve_budget(),
            cfg_hq.resolve_budget()
        )));
    }
    let lq = train_segment(views, heldout, points, time_range, cfg_lq)?;
    let hq = train_segment(views, heldout, points, time_range, cfg_hq)?;
    let frames = |out: &TrainOutcome, cfg: &TrainConfig| {
        render_path(&out.segment.gaussians, path, &cfg.raster_settings(), &Vector3::from(cfg.background))
    };
    Ok(PairOutcome {
        lq_frames: frames(&lq, cfg_lq)?,
        hq_frames: frames(&hq, cfg_hq)?,
        lq,
        hq,
    })
}
