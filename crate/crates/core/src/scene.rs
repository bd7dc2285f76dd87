//! On-disk multi-view scenes.
//!
//! A scene directory holds `manifest.json`, a camera file with one record
//! per (camera, frame), one image directory per camera with files
//! `frame0000.pfm` (plus `_alpha.pfm`), and optional per-frame PLY clouds.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{cameras_from_json, cameras_to_json, CameraFrame};
use crate::colorspace::ColorTag;
use crate::error::{Error, Result};
use crate::io::{pfm, ply, read_file, write_file};
use crate::trainer::{FramePoints, TrainView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub id: u32,
    /// Image directory relative to the scene root.
    pub images: String,
    /// Held-out cameras are only used for evaluation.
    #[serde(default)]
    pub heldout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointsEntry {
    pub frame: i64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub width: usize,
    pub height: usize,
    /// First and last frame, inclusive.
    pub frames: [i64; 2],
    pub cameras: Vec<CameraEntry>,
    pub camera_file: String,
    #[serde(default)]
    pub points: Vec<PointsEntry>,
    /// Inclusive frame ranges trained as separate segments.
    #[serde(default)]
    pub segments: Vec<[i64; 2]>,
    #[serde(default)]
    pub gt_model: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn frame_file(frame: i64) -> String {
    format!("frame{frame:04}.pfm")
}

impl SceneManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let bytes = read_file(&dir.join(MANIFEST_FILE))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            offset: e.column(),
            message: format!("{}: {e}", dir.join(MANIFEST_FILE).display()),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Segment ranges, defaulting to one segment over all frames.
    pub fn segment_ranges(&self) -> Vec<[i64; 2]> {
        if self.segments.is_empty() {
            vec![self.frames]
        } else {
            self.segments.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames[0] > self.frames[1] {
            return Err(Error::InvalidArgument("manifest frame range is empty".into()));
        }
        for s in &self.segments {
            if s[0] > s[1] || s[0] < self.frames[0] || s[1] > self.frames[1] {
                return Err(Error::InvalidArgument(format!("segment {s:?} lies outside the frame range")));
            }
        }
        Ok(())
    }
}

/// A scene loaded into memory.
#[derive(Debug, Clone)]
pub struct Scene {
    pub manifest: SceneManifest,
    pub views: Vec<TrainView>,
    pub heldout: Vec<TrainView>,
    pub points: Vec<FramePoints>,
}

impl Scene {
    /// Views restricted to an inclusive frame range.
    pub fn views_in(&self, range: [i64; 2], heldout: bool) -> Vec<TrainView> {
        let src = if heldout { &self.heldout } else { &self.views };
        src.iter()
            .filter(|v| v.camera.frame >= range[0] && v.camera.frame <= range[1])
            .cloned()
            .collect()
    }
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let manifest = SceneManifest::read(dir)?;
    manifest.validate()?;
    let text = String::from_utf8(read_file(&dir.join(&manifest.camera_file))?)
        .map_err(|_| Error::Parse { offset: 0, message: "camera file is not UTF-8".into() })?;
    let cams = cameras_from_json(&text)?;
    let lookup: HashMap<(u32, i64), &CameraFrame> = cams.iter().map(|c| ((c.camera_id, c.frame), c)).collect();

    let mut views = Vec::new();
    let mut heldout = Vec::new();
    for entry in &manifest.cameras {
        for frame in manifest.frames[0]..=manifest.frames[1] {
            let cam = lookup.get(&(entry.id, frame)).ok_or_else(|| {
                Error::InvalidArgument(format!("camera {} has no record for frame {frame}", entry.id))
            })?;
            let path: PathBuf = dir.join(&entry.images).join(frame_file(frame));
            let image = pfm::read_rgba(&path, ColorTag::LinearHDR)?;
            if image.dims() != (cam.width, cam.height) {
                return Err(Error::SizeMismatch {
                    left: image.dims(),
                    right: (cam.width, cam.height),
                });
            }
            let view = TrainView {
                camera: (*cam).clone(),
                image,
            };
            if entry.heldout {
                heldout.push(view);
            } else {
                views.push(view);
            }
        }
    }
    let points = manifest
        .points
        .iter()
        .map(|p| {
            Ok(FramePoints {
                frame: p.frame,
                cloud: ply::read(&dir.join(&p.path))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Scene {
        manifest,
        views,
        heldout,
        points,
    })
}

/// Writes views, cameras and clouds under `dir` and returns the manifest
/// (also written).
pub fn write_scene(
    dir: &Path,
    views: &[TrainView],
    heldout: &[TrainView],
    points: &[FramePoints],
    gt_model: Option<&str>,
) -> Result<SceneManifest> {
    let all: Vec<&TrainView> = views.iter().chain(heldout).collect();
    let first = all.first().ok_or_else(|| Error::Empty("scene has no views".into()))?;
    let frames = [
        all.iter().map(|v| v.camera.frame).min().unwrap(),
        all.iter().map(|v| v.camera.frame).max().unwrap(),
    ];
    let mut cameras: Vec<CameraEntry> = Vec::new();
    for (list, held) in [(views, false), (heldout, true)] {
        for v in list {
            let id = v.camera.camera_id;
            if !cameras.iter().any(|c| c.id == id) {
                cameras.push(CameraEntry {
                    id,
                    images: format!("images/cam{id:02}"),
                    heldout: held,
                });
            }
            pfm::write_rgba(&dir.join(format!("images/cam{id:02}")).join(frame_file(v.camera.frame)), &v.image)?;
        }
    }
    let cams: Vec<CameraFrame> = all.iter().map(|v| v.camera.clone()).collect();
    write_file(&dir.join("cameras.json"), cameras_to_json(&cams)?.as_bytes())?;
    let mut point_entries = Vec::new();
    for p in points {
        let rel = format!("points/frame{:04}.ply", p.frame);
        ply::write(&dir.join(&rel), &p.cloud)?;
        point_entries.push(PointsEntry { frame: p.frame, path: rel });
    }
    let manifest = SceneManifest {
        width: first.camera.width,
        height: first.camera.height,
        frames,
        cameras,
        camera_file: "cameras.json".into(),
        points: point_entries,
        segments: Vec::new(),
        gt_model: gt_model.map(str::to_string),
    };
    manifest.write(dir)?;
    Ok(manifest)
}
