//! Temporal stabilization around a pluggable per-frame enhancer.
//!
//! For each frame after the first, flow between consecutive low-quality
//! frames warps the previous output and previous input; a validity mask marks
//! where the warped output can be trusted. The enhancer sees the current frame
//! with those temporal conditions, and its result gets the coarsest pyramid
//! level of the current input swapped back in.

pub mod flow;
pub mod pyramid;

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::ColorTag;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::io::pfm;

pub use flow::{compute_flow, validity_mask, warp, FlowField, FlowSettings, ValidityMask, Warped};
pub use pyramid::{low_freq_swap, LaplacianPyramid};

/// Everything an enhancer receives for one frame.
#[derive(Debug, Clone, Copy)]
pub struct EnhanceRequest<'a> {
    pub frame: usize,
    /// Current low-quality RGBA frame.
    pub current: &'a ImageBuffer,
    /// Previous enhanced output warped to the current frame; zeros at frame 0.
    pub warped_prev: &'a ImageBuffer,
    /// All invalid at frame 0.
    pub mask: &'a ValidityMask,
}

pub trait Enhancer {
    fn enhance(&mut self, req: &EnhanceRequest<'_>) -> Result<ImageBuffer>;
}

/// Returns the current frame unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityEnhancer;

impl Enhancer for IdentityEnhancer {
    fn enhance(&mut self, req: &EnhanceRequest<'_>) -> Result<ImageBuffer> {
        Ok(req.current.clone())
    }
}

/// Unsharp masking with a binomial blur of the given radius; alpha untouched.
#[derive(Debug, Clone, Copy)]
pub struct UnsharpEnhancer {
    pub radius: usize,
    pub amount: f64,
}

impl Default for UnsharpEnhancer {
    fn default() -> Self {
        UnsharpEnhancer { radius: 2, amount: 0.5 }
    }
}

fn binomial(radius: usize) -> Vec<f64> {
    let n = 2 * radius;
    let mut row = vec![1.0f64];
    for _ in 0..n {
        let mut next = vec![1.0; row.len() + 1];
        for k in 1..row.len() {
            next[k] = row[k - 1] + row[k];
        }
        row = next;
    }
    let s: f64 = row.iter().sum();
    row.iter().map(|v| v / s).collect()
}

fn blur_plane(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * src[y * w + pyramid::reflect(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[pyramid::reflect(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

impl Enhancer for UnsharpEnhancer {
    fn enhance(&mut self, req: &EnhanceRequest<'_>) -> Result<ImageBuffer> {
        let img = req.current;
        let (w, h) = img.dims();
        let taps = binomial(self.radius);
        let mut out = img.clone();
        for c in 0..3 {
            let plane = img.channel(c);
            let blurred = blur_plane(&plane, w, h, &taps);
            let sharp: Vec<f64> = plane
                .iter()
                .zip(&blurred)
                .map(|(v, b)| v + self.amount * (v - b))
                .collect();
            out.set_channel(c, &sharp);
        }
        Ok(out)
    }
}

/// Multiplies RGB by a per-frame gain drawn uniformly from `[low, high]`.
#[derive(Debug, Clone, Copy)]
pub struct FlickerEnhancer {
    pub seed: u64,
    pub low: f64,
    pub high: f64,
}

impl FlickerEnhancer {
    pub fn new(seed: u64) -> Self {
        FlickerEnhancer { seed, low: 0.9, high: 1.1 }
    }

    pub fn gain(&self, frame: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(frame as u64);
        rng.random_range(self.low..=self.high)
    }
}

impl Enhancer for FlickerEnhancer {
    fn enhance(&mut self, req: &EnhanceRequest<'_>) -> Result<ImageBuffer> {
        let g = self.gain(req.frame);
        let mut out = req.current.clone();
        for px in out.data.chunks_exact_mut(4) {
            for c in &mut px[..3] {
                *c = (*c as f64 * g) as f32;
            }
        }
        Ok(out)
    }
}

/// Runs an external program once per frame, exchanging PFM files:
/// `<program> [args] --rgb A --alpha B --warped C --mask D --out-rgb E --out-alpha F`.
#[derive(Debug, Clone)]
pub struct SubprocessEnhancer {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub workdir: PathBuf,
}

impl SubprocessEnhancer {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, workdir: impl Into<PathBuf>) -> Self {
        SubprocessEnhancer {
            program: program.into(),
            args,
            workdir: workdir.into(),
        }
    }

    fn run(&self, req: &EnhanceRequest<'_>, dir: &Path) -> Result<ImageBuffer> {
        let f = req.frame;
        let path = |name: &str| dir.join(format!("{name}_{f:05}.pfm"));
        let (rgb, alpha, warped, mask) = (path("rgb"), path("alpha"), path("warped"), path("mask"));
        let (out_rgb, out_alpha) = (path("out_rgb"), path("out_alpha"));
        pfm::write(&rgb, &pfm::rgb_of(req.current))?;
        pfm::write(&alpha, &pfm::alpha_of(req.current))?;
        pfm::write_rgba(&warped, req.warped_prev)?;
        pfm::write(&mask, &pfm::gray(req.mask.width, req.mask.height, req.mask.to_plane()))?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg("--rgb")
            .arg(&rgb)
            .arg("--alpha")
            .arg(&alpha)
            .arg("--warped")
            .arg(&warped)
            .arg("--mask")
            .arg(&mask)
            .arg("--out-rgb")
            .arg(&out_rgb)
            .arg("--out-alpha")
            .arg(&out_alpha)
            .status()
            .map_err(|e| Error::Backend {
                frame: f,
                message: format!("cannot start {}: {e}", self.program.display()),
            })?;
        if !status.success() {
            return Err(Error::Backend {
                frame: f,
                message: format!("{} exited with {status}", self.program.display()),
            });
        }
        let out = pfm::to_image(&pfm::read(&out_rgb)?, Some(&pfm::read(&out_alpha)?), req.current.tag)?;
        out.ensure_same_size(req.current)?;
        Ok(out)
    }
}

impl Enhancer for SubprocessEnhancer {
    fn enhance(&mut self, req: &EnhanceRequest<'_>) -> Result<ImageBuffer> {
        std::fs::create_dir_all(&self.workdir).map_err(|e| Error::io(&self.workdir, e))?;
        self.run(req, &self.workdir).map_err(|e| match e {
            Error::Backend { .. } => e,
            other => Error::Backend {
                frame: req.frame,
                message: other.to_string(),
            },
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StabilizerSettings {
    pub tau: f64,
    pub flow: FlowSettings,
    pub pyramid_levels: usize,
}

impl Default for StabilizerSettings {
    fn default() -> Self {
        StabilizerSettings {
            tau: 0.1,
            flow: FlowSettings::default(),
            pyramid_levels: pyramid::DEFAULT_LEVELS,
        }
    }
}

/// Enhances a sequence frame by frame with temporal conditioning and
/// low-frequency swapping.
pub fn stabilize_sequence(
    lq_frames: &[ImageBuffer],
    backend: &mut dyn Enhancer,
    settings: &StabilizerSettings,
) -> Result<Vec<ImageBuffer>> {
    let mut outputs: Vec<ImageBuffer> = Vec::with_capacity(lq_frames.len());
    for (t, curr) in lq_frames.iter().enumerate() {
        let (w, h) = curr.dims();
        let (warped_prev, mask) = if t == 0 {
            (ImageBuffer::new(w, h, curr.tag), ValidityMask::all(w, h, false))
        } else {
            let prev_lq = &lq_frames[t - 1];
            let flow = flow::compute_flow_with(curr, prev_lq, &settings.flow)?;
            let warped_out = warp(&outputs[t - 1], &flow)?;
            let warped_lq = warp(prev_lq, &flow)?;
            let mask = validity_mask(curr, &warped_lq, settings.tau)?;
            (warped_out.image, mask)
        };
        let req = EnhanceRequest {
            frame: t,
            current: curr,
            warped_prev: &warped_prev,
            mask: &mask,
        };
        let enhanced = backend.enhance(&req).map_err(|e| match e {
            Error::Backend { .. } => e,
            other => Error::Backend {
                frame: t,
                message: other.to_string(),
            },
        })?;
        if enhanced.dims() != (w, h) {
            return Err(Error::Backend {
                frame: t,
                message: format!("backend returned {:?}, expected {:?}", enhanced.dims(), (w, h)),
            });
        }
        outputs.push(pyramid::low_freq_swap_levels(&enhanced, curr, settings.pyramid_levels)?);
    }
    Ok(outputs)
}

/// Reads an RGBA PFM sequence in file-name order from a directory.
pub fn read_sequence(dir: &Path, tag: ColorTag) -> Result<Vec<ImageBuffer>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "pfm")
                && !p.file_stem().is_some_and(|s| s.to_string_lossy().ends_with("_alpha"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| pfm::read_rgba(p, tag)).collect()
}
