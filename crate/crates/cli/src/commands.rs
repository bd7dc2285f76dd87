use std::path::{Path, PathBuf};

use log::info;
use nalgebra::Vector3;
use p4gs_core::camera::{cameras_from_json, CameraFrame};
use p4gs_core::colorspace::ColorTag;
use p4gs_core::image::ImageBuffer;
use p4gs_core::io::model::{self, Model};
use p4gs_core::io::{pfm, read_file, write_file};
use p4gs_core::metrics::MetricReport;
use p4gs_core::render::render_view;
use p4gs_core::scene::{frame_file, load_scene, Scene};
use p4gs_core::splatter::RasterSettings;
use p4gs_core::stabilizer::{
    read_sequence, stabilize_sequence, Enhancer, FlickerEnhancer, IdentityEnhancer, StabilizerSettings,
    SubprocessEnhancer, UnsharpEnhancer,
};
use p4gs_core::synth::{synthesize, write_synthetic, SyntheticSceneSpec};
use p4gs_core::trainer::{log_to_csv, pairgen, train_segment, TrainConfig, TrainOutcome};
use p4gs_core::Error;
use serde::Serialize;

use crate::config::{self, PairgenConfig, RenderConfig, StabilizeConfig};
use crate::error::{CliError, CliResult};
use crate::lock::DirLock;
use crate::{Backend, Cli, Command};

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg_path = cli.config.as_deref();
    match &cli.command {
        Command::Synth { corrupted } => {
            let out = require_out(cli)?;
            let mut spec: SyntheticSceneSpec = match cfg_path {
                Some(_) => config::load(cfg_path)?,
                None if *corrupted => SyntheticSceneSpec::corrupted(),
                None => SyntheticSceneSpec::default(),
            };
            if *corrupted && cfg_path.is_some() && spec.gain_range.is_none() {
                let c = SyntheticSceneSpec::corrupted();
                spec.gain_range = c.gain_range;
                spec.glare_amplitude = c.glare_amplitude;
            }
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            synth(&spec, out)
        }
        Command::Train { scene, segment } => {
            let out = require_out(cli)?;
            let mut cfg: TrainConfig = config::load(cfg_path)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            train(scene, *segment, &cfg, out)
        }
        Command::Render { model, path, photometric } => {
            let out = require_out(cli)?;
            let cfg: RenderConfig = config::load(cfg_path)?;
            render(model, path, *photometric, &cfg, out)
        }
        Command::Pairgen { scene, path, segment } => {
            let out = require_out(cli)?;
            let mut cfg: PairgenConfig = config::load(cfg_path)?;
            if let Some(seed) = cli.seed {
                cfg.lq.seed = seed;
                cfg.hq.seed = seed;
            }
            run_pairgen(scene, path.as_deref(), *segment, &cfg, out)
        }
        Command::Stabilize { input, backend, cmd, args } => {
            let out = require_out(cli)?;
            let cfg: StabilizeConfig = config::load(cfg_path)?;
            stabilize(input, *backend, cmd.as_deref(), args, cli.seed.unwrap_or(0), &cfg, out)
        }
        Command::Eval { model, scene, test, reference, photometric } => {
            let cfg: RenderConfig = config::load(cfg_path)?;
            match (scene, test, reference) {
                (Some(scene), None, None) if !model.is_empty() => {
                    eval_model(model, scene, *photometric, &cfg, cli.out.as_deref())
                }
                (None, Some(test), Some(reference)) if model.is_empty() => {
                    eval_sequences(test, reference, cli.out.as_deref())
                }
                _ => Err(CliError::Config(
                    "eval needs either --model with --scene, or --test with --reference".into(),
                )),
            }
        }
    }
}

fn require_out(cli: &Cli) -> CliResult<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Config("this command needs --out <dir>".into()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    Ok(write_file(path, text.as_bytes())?)
}

fn synth(spec: &SyntheticSceneSpec, out: &Path) -> CliResult<()> {
    spec.validate()?;
    let _lock = DirLock::acquire(out)?;
    let scene = synthesize(spec)?;
    let manifest = write_synthetic(&scene, out)?;
    info!(
        "wrote {} training and {} held-out views over frames {:?} to {}",
        scene.views.len(),
        scene.heldout.len(),
        manifest.frames,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SegmentSummary {
    segment: usize,
    frames: [i64; 2],
    model: String,
    gaussians: usize,
    relocations: usize,
    final_loss: Option<f64>,
    heldout_psnr: Option<f64>,
    heldout_raw_psnr: Option<f64>,
}

fn segment_range(scene: &Scene, index: usize) -> CliResult<[i64; 2]> {
    let ranges = scene.manifest.segment_ranges();
    ranges.get(index).copied().ok_or_else(|| {
        CliError::Config(format!("segment {index} does not exist (scene has {})", ranges.len()))
    })
}

fn train_range(scene: &Scene, range: [i64; 2], cfg: &TrainConfig) -> CliResult<TrainOutcome> {
    let views = scene.views_in(range, false);
    let heldout = scene.views_in(range, true);
    Ok(train_segment(
        &views,
        &heldout,
        &scene.points,
        (range[0] as f64, range[1] as f64),
        cfg,
    )?)
}

fn train(scene_dir: &Path, only: Option<usize>, cfg: &TrainConfig, out: &Path) -> CliResult<()> {
    cfg.validate()?;
    let scene = load_scene(scene_dir)?;
    let indices: Vec<usize> = match only {
        Some(i) => vec![i],
        None => (0..scene.manifest.segment_ranges().len()).collect(),
    };
    let _lock = DirLock::acquire(out)?;
    write_file(
        &out.join("config.toml"),
        toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?.as_bytes(),
    )?;
    let mut summary = Vec::new();
    for i in indices {
        let range = segment_range(&scene, i)?;
        info!("segment {i}: frames {range:?}, {} iterations", cfg.iterations);
        let outcome = train_range(&scene, range, cfg)?;
        let name = format!("segment{i:02}.p4gs");
        model::write(&out.join(&name), &outcome.segment.to_model())?;
        write_file(&out.join(format!("segment{i:02}_log.csv")), log_to_csv(&outcome.log).as_bytes())?;
        if let Some(h) = &outcome.heldout {
            write_json(&out.join(format!("segment{i:02}_heldout.json")), h)?;
            info!("segment {i}: held-out PSNR {:.2} dB (raw {:.2} dB)", h.mean_psnr, h.mean_raw_psnr);
        }
        summary.push(SegmentSummary {
            segment: i,
            frames: range,
            model: name,
            gaussians: outcome.segment.gaussians.len(),
            relocations: outcome.relocations,
            final_loss: outcome.losses.last().copied(),
            heldout_psnr: outcome.heldout.as_ref().map(|h| h.mean_psnr),
            heldout_raw_psnr: outcome.heldout.as_ref().map(|h| h.mean_raw_psnr),
        });
    }
    write_json(&out.join("train.json"), &summary)
}

fn read_path(path: &Path) -> CliResult<Vec<CameraFrame>> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::Parse { offset: 0, message: format!("{}: not UTF-8", path.display()) })?;
    Ok(cameras_from_json(&text)?)
}

fn read_models(paths: &[PathBuf]) -> CliResult<Vec<Model>> {
    Ok(paths.iter().map(|p| model::read(p)).collect::<Result<_, _>>()?)
}

fn model_for(models: &[Model], frame: i64) -> CliResult<&Model> {
    let t = frame as f64;
    models
        .iter()
        .find(|m| m.time_range.0 <= t && t <= m.time_range.1)
        .ok_or_else(|| Error::InvalidArgument(format!("no model covers frame {frame}")).into())
}

fn raster_settings(cfg: &RenderConfig) -> RasterSettings {
    RasterSettings {
        linearize_colors: !cfg.linear_colors,
        ..RasterSettings::default()
    }
}

fn render_cameras(
    models: &[Model],
    cams: &[CameraFrame],
    photometric: bool,
    cfg: &RenderConfig,
) -> CliResult<Vec<ImageBuffer>> {
    let settings = raster_settings(cfg);
    let bg = Vector3::from(cfg.background);
    cams.iter()
        .enumerate()
        .map(|(i, cam)| {
            let m = model_for(models, cam.frame)?;
            let grid = if photometric { m.grid(cam.camera_id) } else { None };
            render_view(&m.gaussians, cam, grid, &settings, &bg).map_err(|e| Error::at(i, e).into())
        })
        .collect()
}

fn write_frames(dir: &Path, frames: &[ImageBuffer]) -> CliResult<()> {
    for (i, f) in frames.iter().enumerate() {
        pfm::write_rgba(&dir.join(frame_file(i as i64)), f)?;
    }
    Ok(())
}

fn render(model_paths: &[PathBuf], path: &Path, photometric: bool, cfg: &RenderConfig, out: &Path) -> CliResult<()> {
    let models = read_models(model_paths)?;
    let cams = read_path(path)?;
    let _lock = DirLock::acquire(out)?;
    let frames = render_cameras(&models, &cams, photometric, cfg)?;
    write_frames(out, &frames)?;
    info!("rendered {} frames to {}", frames.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct PairSummary {
    frames: [i64; 2],
    lq_gaussians: usize,
    hq_gaussians: usize,
    lq_heldout_psnr: Option<f64>,
    hq_heldout_psnr: Option<f64>,
    path_frames: usize,
}

/// Views of the first held-out camera, or of the first training camera when
/// nothing is held out.
fn default_path(scene: &Scene, range: [i64; 2]) -> Vec<CameraFrame> {
    let heldout = scene.views_in(range, true);
    let src = if heldout.is_empty() { scene.views_in(range, false) } else { heldout };
    let Some(first) = src.first().map(|v| v.camera.camera_id) else {
        return Vec::new();
    };
    let mut cams: Vec<CameraFrame> = src.into_iter().filter(|v| v.camera.camera_id == first).map(|v| v.camera).collect();
    cams.sort_by_key(|c| c.frame);
    cams
}

fn run_pairgen(scene_dir: &Path, path: Option<&Path>, segment: usize, cfg: &PairgenConfig, out: &Path) -> CliResult<()> {
    let scene = load_scene(scene_dir)?;
    let range = segment_range(&scene, segment)?;
    let cams = match path {
        Some(p) => read_path(p)?,
        None => default_path(&scene, range),
    };
    let _lock = DirLock::acquire(out)?;
    let views = scene.views_in(range, false);
    let heldout = scene.views_in(range, true);
    let pair = pairgen(
        &views,
        &heldout,
        &scene.points,
        (range[0] as f64, range[1] as f64),
        &cfg.lq,
        &cfg.hq,
        &cams,
    )?;
    model::write(&out.join("lq.p4gs"), &pair.lq.segment.to_model())?;
    model::write(&out.join("hq.p4gs"), &pair.hq.segment.to_model())?;
    write_frames(&out.join("lq"), &pair.lq_frames)?;
    write_frames(&out.join("hq"), &pair.hq_frames)?;
    let summary = PairSummary {
        frames: range,
        lq_gaussians: pair.lq.segment.gaussians.len(),
        hq_gaussians: pair.hq.segment.gaussians.len(),
        lq_heldout_psnr: pair.lq.heldout.as_ref().map(|h| h.mean_psnr),
        hq_heldout_psnr: pair.hq.heldout.as_ref().map(|h| h.mean_psnr),
        path_frames: cams.len(),
    };
    info!(
        "budgets {} / {}, held-out PSNR {:?} / {:?}",
        summary.lq_gaussians, summary.hq_gaussians, summary.lq_heldout_psnr, summary.hq_heldout_psnr
    );
    write_json(&out.join("pairgen.json"), &summary)
}

fn stabilize(
    input: &Path,
    backend: Backend,
    cmd: Option<&Path>,
    args: &[String],
    seed: u64,
    cfg: &StabilizeConfig,
    out: &Path,
) -> CliResult<()> {
    if cmd.is_some() != (backend == Backend::Subprocess) {
        return Err(CliError::Config("--cmd is required by, and only valid for, the subprocess backend".into()));
    }
    let frames = read_sequence(input, ColorTag::LinearHDR)?;
    let _lock = DirLock::acquire(out)?;
    let mut enhancer: Box<dyn Enhancer> = match backend {
        Backend::Identity => Box::new(IdentityEnhancer),
        Backend::Unsharp => Box::new(UnsharpEnhancer {
            radius: cfg.unsharp_radius,
            amount: cfg.unsharp_amount,
        }),
        Backend::Flicker => Box::new(FlickerEnhancer::new(seed)),
        Backend::Subprocess => Box::new(SubprocessEnhancer::new(
            cmd.unwrap(),
            args.to_vec(),
            out.join("backend"),
        )),
    };
    let settings = StabilizerSettings {
        tau: cfg.tau,
        pyramid_levels: cfg.pyramid_levels,
        ..StabilizerSettings::default()
    };
    let result = stabilize_sequence(&frames, enhancer.as_mut(), &settings)?;
    write_frames(out, &result)?;
    info!("stabilized {} frames into {}", result.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct CameraReport {
    camera_id: u32,
    heldout: bool,
    report: MetricReport,
}

#[derive(Serialize)]
struct ModelEval {
    cameras: Vec<CameraReport>,
    mean_psnr: f64,
    mean_ssim: f64,
    mean_tpsnr: Option<f64>,
}

fn emit_report<T: Serialize>(out: Option<&Path>, report: &T, csv: Vec<(String, String)>) -> CliResult<()> {
    match out {
        Some(dir) => {
            let _lock = DirLock::acquire(dir)?;
            write_json(&dir.join("metrics.json"), report)?;
            for (name, text) in csv {
                write_file(&dir.join(name), text.as_bytes())?;
            }
        }
        None => println!("{}", serde_json::to_string_pretty(report).map_err(Error::from)?),
    }
    Ok(())
}

fn eval_model(model_paths: &[PathBuf], scene_dir: &Path, photometric: bool, cfg: &RenderConfig, out: Option<&Path>) -> CliResult<()> {
    let models = read_models(model_paths)?;
    let scene = load_scene(scene_dir)?;
    let use_heldout = !scene.heldout.is_empty();
    let views = if use_heldout { &scene.heldout } else { &scene.views };
    let mut ids: Vec<u32> = views.iter().map(|v| v.camera.camera_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut cameras = Vec::new();
    for id in ids {
        let mut seq: Vec<_> = views.iter().filter(|v| v.camera.camera_id == id).collect();
        seq.sort_by_key(|v| v.camera.frame);
        let cams: Vec<CameraFrame> = seq.iter().map(|v| v.camera.clone()).collect();
        let rendered = render_cameras(&models, &cams, photometric, cfg)?;
        let reference: Vec<ImageBuffer> = seq.iter().map(|v| v.image.clone()).collect();
        cameras.push(CameraReport {
            camera_id: id,
            heldout: use_heldout,
            report: MetricReport::compute(&rendered, &reference)?,
        });
    }
    let n = cameras.len() as f64;
    let tpsnr: Vec<f64> = cameras.iter().filter_map(|c| c.report.mean_tpsnr).collect();
    let summary = ModelEval {
        mean_psnr: cameras.iter().map(|c| c.report.mean_psnr).sum::<f64>() / n,
        mean_ssim: cameras.iter().map(|c| c.report.mean_ssim).sum::<f64>() / n,
        mean_tpsnr: (!tpsnr.is_empty()).then(|| tpsnr.iter().sum::<f64>() / tpsnr.len() as f64),
        cameras,
    };
    info!(
        "PSNR {:.2} dB, SSIM {:.4}, temporal PSNR {:?}",
        summary.mean_psnr, summary.mean_ssim, summary.mean_tpsnr
    );
    let csv = summary
        .cameras
        .iter()
        .map(|c| (format!("metrics_cam{:02}.csv", c.camera_id), c.report.to_csv()))
        .collect();
    emit_report(out, &summary, csv)
}

fn eval_sequences(test: &Path, reference: &Path, out: Option<&Path>) -> CliResult<()> {
    let a = read_sequence(test, ColorTag::LinearHDR)?;
    let b = read_sequence(reference, ColorTag::LinearHDR)?;
    let report = MetricReport::compute(&a, &b)?;
    info!(
        "PSNR {:.2} dB, SSIM {:.4}, temporal PSNR {:?}",
        report.mean_psnr, report.mean_ssim, report.mean_tpsnr
    );
    let csv = vec![("metrics.csv".to_string(), report.to_csv())];
    emit_report(out, &report, csv)
}
