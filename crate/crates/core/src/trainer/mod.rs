//! Segment optimization against multi-view video.

mod adam;
mod config;
mod init;
mod loss;
mod pairgen;
mod params;
mod relocate;
mod step;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraFrame;
use crate::colorspace::ColorTag;
use crate::error::{Error, Result};
use crate::gaussian4d::{evaluate_batch, Degrees, PolyGaussian};
use crate::image::ImageBuffer;
use crate::io::model::Model;
use crate::photometric::{black_loss, exposure_loss, exposure_loss_grad, PhotometricGrid, UpsampledGrid, GRID_CELLS};
use crate::splatter::render;

pub use adam::{clip_norm, Adam};
pub use config::{ColorSpace, LearningRates, TrainConfig};
pub use init::{init_from_points, kth_neighbor_distance, FramePoints, InitOptions};
pub use loss::{recon_loss, total_loss, ReconLoss};
pub use pairgen::{pairgen, PairOutcome};
pub use relocate::{relocate_dead, sample_donors, Relocation, DEAD_OPACITY};
pub use step::{view_loss_grad, ViewGrad};

use params::{Group, Layout};
use step::{photometric_loss, view_grad_cached, Target};

/// One training or evaluation image with its camera; the camera's `frame`
/// is the view's time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub camera: CameraFrame,
    pub image: ImageBuffer,
}

/// A contiguous time range reconstructed as one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub time_range: (f64, f64),
    pub degrees: Degrees,
    pub sh_degree: usize,
    pub gaussians: Vec<PolyGaussian>,
    /// One grid per training camera, ids ascending.
    pub grids: Vec<PhotometricGrid>,
    pub budget: usize,
}

impl Segment {
    pub fn to_model(&self) -> Model {
        Model {
            degrees: self.degrees,
            sh_degree: self.sh_degree,
            time_range: self.time_range,
            gaussians: self.gaussians.clone(),
            grids: self.grids.clone(),
        }
    }

    pub fn from_model(model: Model) -> Self {
        Segment {
            time_range: model.time_range,
            degrees: model.degrees,
            sh_degree: model.sh_degree,
            budget: model.gaussians.len(),
            gaussians: model.gaussians,
            grids: model.grids,
        }
    }

    pub fn grid(&self, camera_id: u32) -> Option<&PhotometricGrid> {
        self.grids.iter().find(|g| g.camera_id == camera_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Means over the iterations since the previous row.
    pub loss: f64,
    pub recon: f64,
    pub l1: f64,
    pub ssim: f64,
    pub exposure: f64,
    pub black: f64,
    pub train_psnr: f64,
    /// Held-out PSNR without grid fitting, on evaluation rows.
    pub eval_psnr: Option<f64>,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iteration,loss,recon,l1,ssim,exposure,black,train_psnr,eval_psnr\n");
    for r in rows {
        let eval = r.eval_psnr.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.iteration, r.loss, r.recon, r.l1, r.ssim, r.exposure, r.black, r.train_psnr, eval
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutView {
    pub camera_id: u32,
    pub frame: i64,
    /// PSNR after fitting the camera's photometric grid.
    pub psnr: f64,
    /// PSNR of the plain render.
    pub raw_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    pub views: Vec<HeldoutView>,
    pub mean_psnr: f64,
    pub mean_raw_psnr: f64,
    #[serde(skip)]
    pub grids: Vec<PhotometricGrid>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub segment: Segment,
    pub log: Vec<LogRow>,
    /// Total loss of every iteration.
    pub losses: Vec<f64>,
    pub heldout: Option<HeldoutReport>,
    pub relocations: usize,
}

fn check_views(views: &[TrainView], time_range: (f64, f64)) -> Result<()> {
    for (i, v) in views.iter().enumerate() {
        v.camera.validate().map_err(|e| Error::at(i, e))?;
        v.image.ensure_tag(ColorTag::LinearHDR).map_err(|e| Error::at(i, e))?;
        if v.image.dims() != (v.camera.width, v.camera.height) {
            return Err(Error::at(
                i,
                Error::SizeMismatch {
                    left: v.image.dims(),
                    right: (v.camera.width, v.camera.height),
                },
            ));
        }
        let t = v.camera.frame as f64;
        if t < time_range.0 || t > time_range.1 {
            return Err(Error::at(
                i,
                Error::InvalidArgument(format!(
                    "frame {} lies outside the segment [{}, {}]",
                    v.camera.frame, time_range.0, time_range.1
                )),
            ));
        }
    }
    Ok(())
}

/// Initializes a segment from point clouds and optimizes it.
pub fn train_segment(
    views: &[TrainView],
    heldout: &[TrainView],
    points: &[FramePoints],
    time_range: (f64, f64),
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let budget = cfg.resolve_budget();
    let opts = InitOptions {
        degrees: cfg.degrees,
        sh_degree: cfg.sh_degree,
        color_space: cfg.color_space,
        seed: cfg.seed,
    };
    let in_range: Vec<FramePoints> = points
        .iter()
        .filter(|p| (p.frame as f64) >= time_range.0 && (p.frame as f64) <= time_range.1)
        .cloned()
        .collect();
    let source = if in_range.is_empty() { points } else { &in_range[..] };
    let gaussians = init_from_points(source, time_range, budget, &opts)?;
    let mut ids: Vec<u32> = views.iter().map(|v| v.camera.camera_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let segment = Segment {
        time_range,
        degrees: cfg.degrees,
        sh_degree: cfg.sh_degree,
        gaussians,
        grids: ids.into_iter().map(PhotometricGrid::identity).collect(),
        budget,
    };
    train(segment, views, heldout, cfg)
}

struct GridState {
    /// Black levels then log exposures.
    params: Vec<f64>,
    adam: Adam,
}

impl GridState {
    fn new(grid: &PhotometricGrid) -> Self {
        let mut params = grid.black.clone();
        params.extend(grid.exposure.iter().map(|e| e.ln()));
        GridState {
            adam: Adam::new(params.len()),
            params,
        }
    }

    fn write(&self, grid: &mut PhotometricGrid) {
        grid.black.copy_from_slice(&self.params[..GRID_CELLS]);
        for (e, p) in grid.exposure.iter_mut().zip(&self.params[GRID_CELLS..]) {
            *e = p.exp();
        }
    }

    /// Adam step from gradients with respect to the grid values.
    fn update(&mut self, grid: &mut PhotometricGrid, d_black: &[f64], d_exposure: &[f64], lr: f64, clip: f64, clamp: bool) {
        let mut g: Vec<f64> = d_black.to_vec();
        g.extend(d_exposure.iter().zip(&grid.exposure).map(|(d, e)| d * e));
        clip_norm(&mut g, clip);
        self.adam.step(&mut self.params, &g, |_| lr);
        if clamp {
            self.params[..GRID_CELLS].iter_mut().for_each(|b| *b = b.clamp(0.0, 1.0));
        }
        self.write(grid);
    }
}

fn scene_extent(gaussians: &[PolyGaussian]) -> f64 {
    if gaussians.is_empty() {
        return 1.0;
    }
    let n = gaussians.len() as f64;
    let center = gaussians.iter().fold(nalgebra::Vector3::zeros(), |a, g| a + g.mu[0]) / n;
    gaussians
        .iter()
        .map(|g| (g.mu[0] - center).norm())
        .fold(0.0, f64::max)
        .max(1e-3)
}

/// Optimizes an existing segment in place of its initialization.
pub fn train(init: Segment, views: &[TrainView], heldout: &[TrainView], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_views(views, init.time_range)?;
    check_views(heldout, (f64::NEG_INFINITY, f64::INFINITY))?;
    let mut cams: Vec<u32> = views.iter().map(|v| v.camera.camera_id).collect();
    cams.sort_unstable();
    cams.dedup();
    if cams.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 cameras, got {}",
            cams.len()
        )));
    }
    if init.gaussians.len() > init.budget {
        return Err(Error::InvalidArgument(format!(
            "{} primitives exceed the budget of {}",
            init.gaussians.len(),
            init.budget
        )));
    }
    let mut segment = init;
    for &id in &cams {
        if segment.grid(id).is_none() {
            segment.grids.push(PhotometricGrid::identity(id));
        }
    }
    segment.grids.sort_by_key(|g| g.camera_id);

    let mut outcome = TrainOutcome {
        segment,
        log: Vec::new(),
        losses: Vec::with_capacity(cfg.iterations),
        heldout: None,
        relocations: 0,
    };
    if cfg.iterations > 0 {
        optimize(&mut outcome, views, heldout, cfg)?;
    }
    if !heldout.is_empty() {
        outcome.heldout = Some(evaluate_heldout(&outcome.segment.gaussians, heldout, cfg)?);
    }
    Ok(outcome)
}

fn optimize(out: &mut TrainOutcome, views: &[TrainView], heldout: &[TrainView], cfg: &TrainConfig) -> Result<()> {
    let seg = &mut out.segment;
    let layout = Layout::new(seg.degrees, seg.sh_degree);
    for (i, g) in seg.gaussians.iter().enumerate() {
        if g.degrees() != seg.degrees || g.sh.len() != layout.sh_count {
            return Err(Error::at(i, Error::InvalidArgument("primitive layout differs from the segment".into())));
        }
    }
    let stride = layout.stride;
    let n = seg.gaussians.len();
    let mut x = vec![0.0; n * stride];
    x.par_chunks_mut(stride)
        .zip(seg.gaussians.par_iter())
        .for_each(|(row, g)| layout.pack(g, row));
    let mut adam = Adam::new(x.len());
    let mut grads = vec![0.0; x.len()];

    let targets: Vec<Target> = views.par_iter().map(|v| Target::new(&v.image)).collect::<Result<_>>()?;
    let mut grid_states: Vec<GridState> = seg.grids.iter().map(GridState::new).collect();
    let grid_index: BTreeMap<u32, usize> = seg.grids.iter().enumerate().map(|(i, g)| (g.camera_id, i)).collect();
    let total_cells = seg.grids.len() * GRID_CELLS;

    let extent = scene_extent(&seg.gaussians);
    let lr = &cfg.lr;
    let group_lr = |group: Group, progress: f64| -> f64 {
        match group {
            Group::Mean(order) => {
                lr.mean * extent * lr.mean_order_decay.powi(order as i32) * lr.mean_final_ratio.powf(progress)
            }
            Group::Rotation => lr.rotation,
            Group::Scale => lr.scale,
            Group::Opacity => lr.opacity,
            Group::TimeCenter => {
                if cfg.train_time_center {
                    lr.time_center
                } else {
                    0.0
                }
            }
            Group::Color => lr.color,
        }
    };
    let mut group_ids: Vec<Group> = Vec::new();
    for g in &layout.groups {
        if !group_ids.contains(g) {
            group_ids.push(*g);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let densify_end = (cfg.densify_until * cfg.iterations as f64) as usize;
    let mut acc = [0.0f64; 7];
    let mut acc_n = 0usize;

    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let vi = order.pop().unwrap();
        let view = &views[vi];
        let gi = grid_index[&view.camera.camera_id];
        let grid = if cfg.photometric { Some(&seg.grids[gi]) } else { None };
        let vg = view_grad_cached(&seg.gaussians, &view.camera, grid, &targets[vi], cfg)?;

        let (exp_loss, blk_loss, mean_dev) = if cfg.photometric {
            let e = exposure_loss(seg.grids.iter().map(|g| &g.exposure[..]));
            let b = black_loss(seg.grids.iter().map(|g| &g.black[..]));
            let dev: f64 = seg.grids.iter().flat_map(|g| &g.exposure).map(|e| e - 1.0).sum::<f64>() / total_cells as f64;
            (e, b, dev)
        } else {
            (0.0, 0.0, 0.0)
        };
        let total = total_loss(vg.loss, exp_loss, blk_loss, cfg);
        if !total.is_finite() {
            return Err(Error::Diverged { iteration: it, loss: total });
        }
        out.losses.push(total);

        // Primitive gradients in the packed parameterization.
        grads
            .par_chunks_mut(stride)
            .zip(seg.gaussians.par_iter())
            .zip(vg.gaussians.par_iter().zip(vg.sh.par_iter()))
            .for_each(|((row, g), (pg, d_sh))| layout.pack_grad(g, pg, d_sh, row));
        for group in &group_ids {
            let norm2: f64 = grads
                .par_chunks(stride)
                .map(|row| {
                    row.iter()
                        .zip(&layout.groups)
                        .filter(|(_, g)| *g == group)
                        .map(|(v, _)| v * v)
                        .sum::<f64>()
                })
                .sum();
            let norm = norm2.sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads.par_chunks_mut(stride).for_each(|row| {
                    for (v, g) in row.iter_mut().zip(&layout.groups) {
                        if g == group {
                            *v *= s;
                        }
                    }
                });
            }
        }
        let progress = it as f64 / cfg.iterations.max(1) as f64;
        let slot_lr: Vec<f64> = layout.groups.iter().map(|&g| group_lr(g, progress)).collect();
        adam.step(&mut x, &grads, |i| slot_lr[i % stride]);
        seg.gaussians
            .par_iter_mut()
            .zip(x.par_chunks(stride))
            .for_each(|(g, row)| *g = layout.unpack(row));

        if cfg.photometric {
            let reg_e = cfg.lambda_e * exposure_loss_grad(mean_dev, total_cells);
            let reg_b = -cfg.lambda_b / total_cells as f64;
            let d_black: Vec<f64> = vg.black.iter().map(|d| d + reg_b).collect();
            let d_exposure: Vec<f64> = vg.exposure.iter().map(|d| d + reg_e).collect();
            grid_states[gi].update(&mut seg.grids[gi], &d_black, &d_exposure, lr.grid, cfg.grad_clip, cfg.clamp_black);
        }

        let done = it + 1;
        if cfg.densify_interval > 0 && done % cfg.densify_interval == 0 && done >= cfg.densify_from && done < densify_end {
            let moves = relocate_dead(&mut seg.gaussians, seg.time_range, cfg.dead_opacity, &mut rng);
            for m in &moves {
                for i in [m.dead, m.donor] {
                    layout.pack(&seg.gaussians[i], &mut x[i * stride..(i + 1) * stride]);
                    adam.reset(i * stride..(i + 1) * stride);
                }
            }
            out.relocations += moves.len();
        }

        for (a, v) in acc.iter_mut().zip([total, vg.loss, vg.l1, vg.ssim, exp_loss, blk_loss, vg.psnr]) {
            *a += v;
        }
        acc_n += 1;
        let log_now = cfg.log_interval > 0 && done % cfg.log_interval == 0;
        let eval_now = cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && !heldout.is_empty();
        if log_now || eval_now || done == cfg.iterations {
            let m = acc.map(|a| a / acc_n as f64);
            let eval_psnr = if eval_now { Some(raw_heldout_psnr(&seg.gaussians, heldout, cfg)?) } else { None };
            log::debug!("iteration {done}: loss {:.5} psnr {:.2}", m[0], m[6]);
            out.log.push(LogRow {
                iteration: done,
                loss: m[0],
                recon: m[1],
                l1: m[2],
                ssim: m[3],
                exposure: m[4],
                black: m[5],
                train_psnr: m[6],
                eval_psnr,
            });
            acc = [0.0; 7];
            acc_n = 0;
        }
    }
    Ok(())
}

fn render_linear(gaussians: &[PolyGaussian], cam: &CameraFrame, cfg: &TrainConfig) -> Result<crate::splatter::RenderBuffer> {
    let slices = evaluate_batch(gaussians, cam.frame as f64)?;
    render(&slices, cam, &nalgebra::Vector3::from(cfg.background), &cfg.raster_settings())
}

fn buffer_image(buf: &crate::splatter::RenderBuffer, up: Option<&UpsampledGrid>) -> ImageBuffer {
    let mut img = buf.to_image();
    if let Some(up) = up {
        img = crate::photometric::apply_upsampled(&img, up);
    }
    img
}

fn raw_heldout_psnr(gaussians: &[PolyGaussian], heldout: &[TrainView], cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for v in heldout {
        let buf = render_linear(gaussians, &v.camera, cfg)?;
        sum += crate::metrics::psnr(&buf.to_image(), &v.image, 1.0)?;
    }
    Ok(sum / heldout.len() as f64)
}

/// Scores primitives on held-out views. Each held-out camera first gets its
/// own photometric grid fitted with the primitives frozen, since its
/// exposure and glare are unknown to the model.
pub fn evaluate_heldout(gaussians: &[PolyGaussian], heldout: &[TrainView], cfg: &TrainConfig) -> Result<HeldoutReport> {
    if heldout.is_empty() {
        return Err(Error::Empty("no held-out views".into()));
    }
    let mut by_cam: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, v) in heldout.iter().enumerate() {
        by_cam.entry(v.camera.camera_id).or_default().push(i);
    }
    let mut views = vec![None; heldout.len()];
    let mut grids = Vec::new();
    for (&id, idx) in &by_cam {
        let bufs: Vec<_> = idx
            .iter()
            .map(|&i| render_linear(gaussians, &heldout[i].camera, cfg))
            .collect::<Result<_>>()?;
        let targets: Vec<Target> = idx.iter().map(|&i| Target::new(&heldout[i].image)).collect::<Result<_>>()?;
        let mut grid = PhotometricGrid::identity(id);
        if cfg.eval_fit_steps > 0 {
            let mut state = GridState::new(&grid);
            for step in 0..cfg.eval_fit_steps {
                let k = step % idx.len();
                let cam = &heldout[idx[k]].camera;
                let up = UpsampledGrid::new(&grid, cam.width, cam.height)?;
                let pl = photometric_loss(&bufs[k], Some(&up), &targets[k], cfg.ssim_weight);
                let d_black = crate::photometric::fft_upsample_adjoint(&pl.d_black, cam.width, cam.height)?;
                let d_exposure = crate::photometric::fft_upsample_adjoint(&pl.d_exposure, cam.width, cam.height)?;
                let lr = cfg.eval_fit_lr * 0.01f64.powf(step as f64 / cfg.eval_fit_steps as f64);
                state.update(&mut grid, &d_black, &d_exposure, lr, cfg.grad_clip, cfg.clamp_black);
            }
        }
        for (k, &i) in idx.iter().enumerate() {
            let cam = &heldout[i].camera;
            let up = UpsampledGrid::new(&grid, cam.width, cam.height)?;
            let fitted = buffer_image(&bufs[k], Some(&up));
            views[i] = Some(HeldoutView {
                camera_id: id,
                frame: cam.frame,
                psnr: crate::metrics::psnr(&fitted, &heldout[i].image, 1.0)?,
                raw_psnr: crate::metrics::psnr(&bufs[k].to_image(), &heldout[i].image, 1.0)?,
            });
        }
        grids.push(grid);
    }
    let views: Vec<HeldoutView> = views.into_iter().map(Option::unwrap).collect();
    let n = views.len() as f64;
    Ok(HeldoutReport {
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_raw_psnr: views.iter().map(|v| v.raw_psnr).sum::<f64>() / n,
        views,
        grids,
    })
}
