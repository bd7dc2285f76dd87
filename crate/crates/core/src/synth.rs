//! Synthetic ground-truth scenes for controlled experiments.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraFrame;
use crate::colorspace::srgb_inverse;
use crate::error::{Error, Result};
use crate::gaussian4d::{evaluate, sh_coeff_count, Degrees, PolyGaussian};
use crate::geometry::quat_to_matrix;
use crate::image::ImageBuffer;
use crate::io::model::{self, quantize, Model};
use crate::io::ply::PointCloud;
use crate::render::render_view;
use crate::scene::{write_scene, SceneManifest};
use crate::sh::SH_C0;
use crate::splatter::RasterSettings;
use crate::trainer::{FramePoints, TrainView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub gaussians: usize,
    /// Highest nonzero polynomial order of the mean motion.
    pub motion_degree: usize,
    pub cameras: usize,
    pub heldout_cameras: usize,
    pub radius: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub sh_degree: usize,
    pub points_per_gaussian: usize,
    /// Per-camera linear gain range; `None` leaves intensities untouched.
    pub gain_range: Option<[f64; 2]>,
    /// Peak of the additive glare ramp in linear units.
    pub glare_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            gaussians: 200,
            motion_degree: 2,
            cameras: 8,
            heldout_cameras: 2,
            radius: 4.0,
            focal: 350.0,
            width: 256,
            height: 256,
            frames: 8,
            sh_degree: 1,
            points_per_gaussian: 10,
            gain_range: None,
            glare_amplitude: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    /// The default scene with per-camera gains in [0.7, 1.3] and glare.
    pub fn corrupted() -> Self {
        SyntheticSceneSpec {
            gain_range: Some([0.7, 1.3]),
            glare_amplitude: 0.08,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.gaussians == 0 {
            return bad("gaussian count must be positive");
        }
        if self.cameras < 2 {
            return bad("at least 2 training cameras are required");
        }
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return bad("frames and image size must be positive");
        }
        if !(self.radius > 1.0 && self.focal > 0.0) {
            return bad("camera radius must exceed 1 and focal length must be positive");
        }
        if self.motion_degree > 2 || self.sh_degree > 3 {
            return bad("motion degree must be at most 2 and SH degree at most 3");
        }
        if let Some([lo, hi]) = self.gain_range {
            if !(lo > 0.0 && lo <= hi) {
                return bad("gain range must be positive and ordered");
            }
        }
        if !(self.glare_amplitude >= 0.0) {
            return bad("glare amplitude must be nonnegative");
        }
        Ok(())
    }

    pub fn time_range(&self) -> (f64, f64) {
        (0.0, (self.frames - 1) as f64)
    }
}

/// Photometric corruption applied to one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraCorruption {
    pub camera_id: u32,
    pub gain: f64,
    /// Direction of increasing glare in normalized image coordinates.
    pub glare_angle: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    /// Ground truth, already rounded to container precision.
    pub model: Model,
    pub views: Vec<TrainView>,
    pub heldout: Vec<TrainView>,
    pub points: Vec<FramePoints>,
    pub corruption: Vec<CameraCorruption>,
}

fn in_ball(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v * r;
        }
    }
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn sample_gaussian(rng: &mut ChaCha8Rng, spec: &SyntheticSceneSpec, t0: f64) -> PolyGaussian {
    let degrees = Degrees::default();
    let mut mu = vec![Vector3::zeros(); degrees.mu + 1];
    mu[0] = in_ball(rng, 0.8);
    if spec.motion_degree >= 1 {
        mu[1] = in_ball(rng, 0.01);
    }
    if spec.motion_degree >= 2 {
        mu[2] = in_ball(rng, 0.001);
    }
    let q0 = Vector4::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    let q1 = Vector4::from_fn(|_, _| rng.random_range(-0.01..0.01));
    let log_scale = vec![Vector3::from_fn(|_, _| rng.random_range(0.04f64..0.12).ln())];
    let o0 = rng.random_range(0.6..0.95);
    let lambdas = vec![rng.random_range(0.0..0.02), rng.random_range(0.0..0.0005)];
    let mut sh = vec![Vector3::zeros(); sh_coeff_count(spec.sh_degree)];
    sh[0] = Vector3::from_fn(|_, _| rng.random_range(0.15..0.9)) / SH_C0;
    for c in sh.iter_mut().skip(1) {
        *c = Vector3::from_fn(|_, _| rng.random_range(-0.08..0.08));
    }
    PolyGaussian {
        mu,
        q: vec![q0.normalize(), q1],
        log_scale,
        o0,
        lambdas,
        t0,
        sh,
    }
}

fn ring_camera(spec: &SyntheticSceneSpec, id: u32, azimuth: f64, elevation: f64) -> CameraFrame {
    let eye = Vector3::new(
        elevation.cos() * azimuth.cos(),
        elevation.sin(),
        elevation.cos() * azimuth.sin(),
    ) * spec.radius;
    let mut cam = CameraFrame::look_at(eye, Vector3::zeros(), Vector3::y(), spec.focal, spec.width, spec.height);
    cam.camera_id = id;
    cam
}

/// Training ring cameras alternate above and below the equator; held-out
/// cameras sit between them at a different elevation.
pub fn scene_cameras(spec: &SyntheticSceneSpec) -> (Vec<CameraFrame>, Vec<CameraFrame>) {
    let n = spec.cameras;
    let train = (0..n)
        .map(|k| {
            let el = if k % 2 == 0 { 0.25 } else { -0.25 };
            ring_camera(spec, k as u32, TAU * k as f64 / n as f64, el)
        })
        .collect();
    let held = (0..spec.heldout_cameras)
        .map(|j| {
            let slot = (j * n) / spec.heldout_cameras.max(1);
            ring_camera(spec, (n + j) as u32, TAU * (slot as f64 + 0.5) / n as f64, 0.1)
        })
        .collect();
    (train, held)
}

/// `gain * C + amplitude * ramp` on the RGB channels of a linear image.
pub fn corrupt(img: &ImageBuffer, c: &CameraCorruption, amplitude: f64) -> ImageBuffer {
    let mut out = img.clone();
    let (w, h) = img.dims();
    let (dx, dy) = (c.glare_angle.cos(), c.glare_angle.sin());
    for y in 0..h {
        let v = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
        for x in 0..w {
            let u = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
            let ramp = 0.5 + 0.5 * (dx * u + dy * v) / 2f64.sqrt();
            let i = 4 * (y * w + x);
            for ch in 0..3 {
                out.data[i + ch] = (c.gain * out.data[i + ch] as f64 + amplitude * ramp) as f32;
            }
        }
    }
    out
}

fn sample_points(rng: &mut ChaCha8Rng, gaussians: &[PolyGaussian], frame: i64, per: usize) -> Result<PointCloud> {
    let mut cloud = PointCloud::default();
    for g in gaussians {
        let s = evaluate(g, frame as f64)?;
        if s.opacity < 0.05 {
            continue;
        }
        let m = quat_to_matrix(&s.rotation) * nalgebra::Matrix3::from_diagonal(&s.scale);
        let color = (s.sh[0] * SH_C0).map(|v| srgb_inverse(v).max(0.0));
        for _ in 0..per {
            let z = normal3(rng).map(|v| v.clamp(-2.0, 2.0));
            cloud.positions.push(s.mean + m * z);
            cloud.colors.push(color);
        }
    }
    Ok(cloud)
}

pub fn synthesize(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t_a, t_b) = spec.time_range();
    let t0 = 0.5 * (t_a + t_b);
    let gaussians: Vec<PolyGaussian> = (0..spec.gaussians).map(|_| sample_gaussian(&mut rng, spec, t0)).collect();
    let model = quantize(&Model {
        degrees: Degrees::default(),
        sh_degree: spec.sh_degree,
        time_range: (t_a, t_b),
        gaussians,
        grids: Vec::new(),
    })?;

    let (train_cams, held_cams) = scene_cameras(spec);
    let corruption: Vec<CameraCorruption> = train_cams
        .iter()
        .chain(&held_cams)
        .map(|c| CameraCorruption {
            camera_id: c.camera_id,
            gain: match spec.gain_range {
                Some([lo, hi]) if hi > lo => rng.random_range(lo..=hi),
                Some([lo, _]) => lo,
                None => 1.0,
            },
            glare_angle: rng.random_range(0.0..TAU),
        })
        .collect();
    let points = (0..spec.frames as i64)
        .map(|f| {
            Ok(FramePoints {
                frame: f,
                cloud: sample_points(&mut rng, &model.gaussians, f, spec.points_per_gaussian)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let settings = RasterSettings::default();
    let make_views = |cams: &[CameraFrame]| -> Result<Vec<TrainView>> {
        let jobs: Vec<CameraFrame> = cams
            .iter()
            .flat_map(|c| {
                (0..spec.frames as i64).map(move |f| {
                    let mut c = c.clone();
                    c.frame = f;
                    c
                })
            })
            .collect();
        jobs.into_par_iter()
            .map(|camera| {
                let clean = render_view(&model.gaussians, &camera, None, &settings, &Vector3::zeros())?;
                let c = corruption.iter().find(|c| c.camera_id == camera.camera_id).unwrap();
                let image = if spec.gain_range.is_some() || spec.glare_amplitude > 0.0 {
                    corrupt(&clean, c, spec.glare_amplitude)
                } else {
                    clean
                };
                Ok(TrainView { camera, image })
            })
            .collect()
    };
    let views = make_views(&train_cams)?;
    let heldout = make_views(&held_cams)?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        model,
        views,
        heldout,
        points,
        corruption,
    })
}

pub const GT_MODEL_FILE: &str = "gt.p4gs";

/// Writes the scene directory: images, cameras, clouds, ground-truth model,
/// the spec and the applied corruption.
pub fn write_synthetic(scene: &SyntheticScene, dir: &Path) -> Result<SceneManifest> {
    let manifest = write_scene(dir, &scene.views, &scene.heldout, &scene.points, Some(GT_MODEL_FILE))?;
    model::write(&dir.join(GT_MODEL_FILE), &scene.model)?;
    crate::io::write_file(&dir.join("spec.json"), serde_json::to_string_pretty(&scene.spec)?.as_bytes())?;
    crate::io::write_file(&dir.join("corruption.json"), serde_json::to_string_pretty(&scene.corruption)?.as_bytes())?;
    Ok(manifest)
}
