//! Pinhole cameras and smooth focal-length trajectories for zoom lenses.

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this (camera-space z) are culled.
pub const Z_NEAR: f64 = 0.01;

/// A pinhole camera at one frame. `rotation` is the world-to-camera unit
/// quaternion `(w, x, y, z)`; `translation` is in camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub camera_id: u32,
    pub frame: i64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Vector4<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraFrame {
    /// Camera at the origin looking down +z.
    pub fn identity(width: usize, height: usize, focal: f64) -> Self {
        CameraFrame {
            camera_id: 0,
            frame: 0,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            translation: Vector3::zeros(),
            width,
            height,
        }
    }

    /// Camera at `eye` looking at `target`; image y points along `-up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Rows are the camera axes expressed in world coordinates.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let q = UnitQuaternion::from_matrix(&r);
        CameraFrame {
            camera_id: 0,
            frame: 0,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: Vector4::new(q.w, q.i, q.j, q.k),
            translation: -(r * eye),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.rotation.norm();
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "camera {}: focal lengths must be positive",
                self.camera_id
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "camera {}: empty image",
                self.camera_id
            )));
        }
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "camera {}: rotation quaternion has norm {norm}",
                self.camera_id
            )));
        }
        Ok(())
    }

    /// World-to-camera rotation matrix.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        crate::geometry::quat_to_matrix(&self.rotation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    /// Projects a world point to pixel coordinates and depth.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let pc = self.world_to_camera(p);
        if pc.z <= Z_NEAR {
            return Err(Error::BehindCamera {
                depth: pc.z,
                near: Z_NEAR,
            });
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        Ok((Vector2::new(u, v), pc.z))
    }
}

/// Free-function form of [`CameraFrame::project`].
pub fn project(cam: &CameraFrame, p: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    cam.project(p)
}

/// Smooth function family for focal trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FocalBasis {
    Polynomial { degree: usize },
    /// Uniform cubic B-spline with `knots` knots spanning the domain
    /// (`knots - 1` segments, `knots + 2` control points).
    CubicSpline { knots: usize },
}

impl FocalBasis {
    /// Default: one spline knot per 12 frames.
    pub fn default_for_span(first: f64, last: f64) -> Self {
        let span = (last - first).max(0.0);
        FocalBasis::CubicSpline {
            knots: (span / 12.0).ceil() as usize + 1,
        }
        .normalized()
    }

    fn normalized(self) -> Self {
        match self {
            FocalBasis::CubicSpline { knots } => FocalBasis::CubicSpline { knots: knots.max(2) },
            p => p,
        }
    }

    pub fn dof(&self) -> usize {
        match *self {
            FocalBasis::Polynomial { degree } => degree + 1,
            FocalBasis::CubicSpline { knots } => knots + 2,
        }
    }

    /// Basis function values at normalized coordinate `u` in [0, 1].
    fn eval(&self, u: f64) -> Vec<f64> {
        match *self {
            FocalBasis::Polynomial { degree } => {
                // Powers of 2u - 1 keep the normal equations well conditioned.
                let x = 2.0 * u - 1.0;
                let mut out = Vec::with_capacity(degree + 1);
                let mut p = 1.0;
                for _ in 0..=degree {
                    out.push(p);
                    p *= x;
                }
                out
            }
            FocalBasis::CubicSpline { knots } => {
                let segments = (knots - 1) as f64;
                let x = (u * segments).clamp(0.0, segments);
                let seg = (x.floor() as usize).min(knots - 2);
                let s = x - seg as f64;
                let mut out = vec![0.0; knots + 2];
                let s2 = s * s;
                let s3 = s2 * s;
                out[seg] = (1.0 - s).powi(3) / 6.0;
                out[seg + 1] = (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0;
                out[seg + 2] = (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0;
                out[seg + 3] = s3 / 6.0;
                out
            }
        }
    }
}

/// A fitted focal-length curve for one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalTrajectory {
    pub camera_id: u32,
    pub basis: FocalBasis,
    pub coefficients: Vec<f64>,
    /// Inclusive frame range.
    pub domain: (f64, f64),
}

impl FocalTrajectory {
    fn normalize(&self, frame: f64) -> f64 {
        let (a, b) = self.domain;
        if b > a {
            ((frame - a) / (b - a)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn evaluate(&self, frame: f64) -> f64 {
        self.basis
            .eval(self.normalize(frame))
            .iter()
            .zip(&self.coefficients)
            .map(|(b, c)| b * c)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalFit {
    pub trajectory: FocalTrajectory,
    pub residuals: Vec<f64>,
}

/// Least-squares fit of a smooth focal curve to per-frame focal estimates.
pub fn fit_focal_trajectory(
    camera_id: u32,
    samples: &[(f64, f64)],
    basis: FocalBasis,
) -> Result<FocalFit> {
    let basis = basis.normalized();
    let dof = basis.dof();
    if samples.len() < dof {
        return Err(Error::IllPosed(format!(
            "{} samples for {dof} degrees of freedom",
            samples.len()
        )));
    }
    let first = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let last = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let mut traj = FocalTrajectory {
        camera_id,
        basis,
        coefficients: vec![0.0; dof],
        domain: (first, last),
    };
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|&(f, _)| basis.eval(traj.normalize(f)))
        .collect();
    let a = DMatrix::from_fn(samples.len(), dof, |i, j| rows[i][j]);
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::IllPosed(format!(
            "design matrix is rank deficient (singular values {smin:e} / {smax:e})"
        )));
    }
    let coeffs = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::IllPosed(e.to_string()))?;
    traj.coefficients = coeffs.iter().copied().collect();

    let residuals: Vec<f64> = samples
        .iter()
        .map(|&(f, v)| v - traj.evaluate(f))
        .collect();
    for &(f, _) in samples {
        if traj.evaluate(f) <= 0.0 {
            return Err(Error::IllPosed(format!(
                "fitted focal length is not positive at frame {f}"
            )));
        }
    }
    Ok(FocalFit {
        trajectory: traj,
        residuals,
    })
}

/// Mean squared deviation of per-frame focal estimates from the trajectory.
pub fn focal_regularizer(traj: &FocalTrajectory, per_frame_focals: &[(f64, f64)]) -> f64 {
    if per_frame_focals.is_empty() {
        return 0.0;
    }
    per_frame_focals
        .iter()
        .map(|&(f, v)| (v - traj.evaluate(f)).powi(2))
        .sum::<f64>()
        / per_frame_focals.len() as f64
}

/// Flat per-frame record of the camera-path JSON file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub camera_id: u32,
    pub frame: i64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&CameraFrame> for CameraRecord {
    fn from(c: &CameraFrame) -> Self {
        CameraRecord {
            camera_id: c.camera_id,
            frame: c.frame,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            qw: c.rotation[0],
            qx: c.rotation[1],
            qy: c.rotation[2],
            qz: c.rotation[3],
            tx: c.translation.x,
            ty: c.translation.y,
            tz: c.translation.z,
            width: c.width,
            height: c.height,
        }
    }
}

impl From<CameraRecord> for CameraFrame {
    fn from(r: CameraRecord) -> Self {
        CameraFrame {
            camera_id: r.camera_id,
            frame: r.frame,
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            rotation: Vector4::new(r.qw, r.qx, r.qy, r.qz),
            translation: Vector3::new(r.tx, r.ty, r.tz),
            width: r.width,
            height: r.height,
        }
    }
}

pub fn cameras_to_json(cams: &[CameraFrame]) -> Result<String> {
    let records: Vec<CameraRecord> = cams.iter().map(CameraRecord::from).collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn cameras_from_json(text: &str) -> Result<Vec<CameraFrame>> {
    let records: Vec<CameraRecord> = serde_json::from_str(text)?;
    let cams: Vec<CameraFrame> = records.into_iter().map(CameraFrame::from).collect();
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cam100() -> CameraFrame {
        let mut c = CameraFrame::identity(100, 100, 100.0);
        c.cx = 50.0;
        c.cy = 50.0;
        c
    }

    #[test]
    fn optical_axis_and_similar_triangles() {
        let c = cam100();
        let (px, d) = c.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((px, d), (Vector2::new(50.0, 50.0), 1.0));
        let (px, d) = c.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!((px, d), (Vector2::new(100.0, 50.0), 2.0));
        assert!(matches!(
            c.project(&Vector3::new(0.0, 0.0, 0.005)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn projection_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let q = UnitQuaternion::from_scaled_axis(axis);
            let mut cam = CameraFrame::identity(640, 480, rng.random_range(100.0..800.0));
            cam.fy = rng.random_range(100.0..800.0);
            cam.cx = rng.random_range(200.0..400.0);
            cam.rotation = Vector4::new(q.w, q.i, q.j, q.k);
            cam.translation = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 5.0);
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));

            let mut ext = Matrix4::identity();
            ext.fixed_view_mut::<3, 3>(0, 0).copy_from(q.to_rotation_matrix().matrix());
            ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.translation);
            let mut k = Matrix4::identity();
            k[(0, 0)] = cam.fx;
            k[(1, 1)] = cam.fy;
            k[(0, 2)] = cam.cx;
            k[(1, 2)] = cam.cy;
            let h = k * ext * p.push(1.0);
            let (px, d) = cam.project(&p).unwrap();
            assert!((px.x - h.x / h.z).abs() < 1e-9);
            assert!((px.y - h.y / h.z).abs() < 1e-9);
            assert!((d - h.z).abs() < 1e-9);
            // Points on the same ray land on the same pixel.
            let c = cam.center();
            let (px2, d2) = cam.project(&(c + (p - c) * 2.0)).unwrap();
            assert!((px2 - px).norm() < 1e-9 && (d2 - 2.0 * d).abs() < 1e-9);
        }
    }

    #[test]
    fn look_at_centers_target() {
        let cam = CameraFrame::look_at(
            Vector3::new(3.0, 1.0, -2.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            200.0,
            128,
            96,
        );
        let (px, d) = cam.project(&Vector3::zeros()).unwrap();
        assert!((px - Vector2::new(64.0, 48.0)).norm() < 1e-9);
        assert!((d - 14f64.sqrt()).abs() < 1e-9);
        // World up projects upward in the image.
        let (up, _) = cam.project(&Vector3::new(0.0, 0.1, 0.0)).unwrap();
        assert!(up.y < px.y);
    }

    #[test]
    fn constant_fit() {
        let samples: Vec<_> = (0..30).map(|f| (f as f64, 70.0)).collect();
        for basis in [FocalBasis::Polynomial { degree: 2 }, FocalBasis::default_for_span(0.0, 29.0)] {
            let fit = fit_focal_trajectory(0, &samples, basis).unwrap();
            assert!(fit.residuals.iter().all(|r| r.abs() < 1e-9));
            assert!((fit.trajectory.evaluate(13.5) - 70.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noisy_ramp_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let truth = |f: f64| 50.0 + f;
        let samples: Vec<_> = (0..=50)
            .map(|f| (f as f64, truth(f as f64) + noise.sample(&mut rng)))
            .collect();
        let fit = fit_focal_trajectory(0, &samples, FocalBasis::Polynomial { degree: 1 }).unwrap();
        let rmse = (samples
            .iter()
            .map(|s| (fit.trajectory.evaluate(s.0) - truth(s.0)).powi(2))
            .sum::<f64>()
            / samples.len() as f64)
            .sqrt();
        assert!(rmse <= 0.5, "rmse {rmse}");
    }

    #[test]
    fn underdetermined_fit_is_ill_posed() {
        let samples = [(0.0, 50.0), (10.0, 60.0)];
        assert!(matches!(
            fit_focal_trajectory(0, &samples, FocalBasis::Polynomial { degree: 3 }),
            Err(Error::IllPosed(_))
        ));
        // Enough samples but all at one frame.
        let samples = [(3.0, 50.0); 6];
        assert!(matches!(
            fit_focal_trajectory(0, &samples, FocalBasis::Polynomial { degree: 1 }),
            Err(Error::IllPosed(_))
        ));
    }

    #[test]
    fn family_members_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for basis in [FocalBasis::Polynomial { degree: 3 }, FocalBasis::CubicSpline { knots: 4 }] {
            let truth = FocalTrajectory {
                camera_id: 0,
                basis,
                coefficients: (0..basis.dof())
                    .map(|i| if i == 0 { 200.0 } else { 0.0 } + rng.random_range(-10.0..10.0))
                    .collect(),
                domain: (0.0, 36.0),
            };
            let samples: Vec<_> = (0..=36).map(|f| (f as f64, truth.evaluate(f as f64))).collect();
            let fit = fit_focal_trajectory(0, &samples, basis).unwrap();
            assert!(fit.residuals.iter().all(|r| r.abs() < 1e-9));
        }
    }

    #[test]
    fn regularizer_is_mse() {
        let traj = FocalTrajectory {
            camera_id: 0,
            basis: FocalBasis::Polynomial { degree: 1 },
            coefficients: vec![75.0, 25.0],
            domain: (0.0, 10.0),
        };
        let exact: Vec<_> = (0..=10).map(|f| (f as f64, traj.evaluate(f as f64))).collect();
        assert!(focal_regularizer(&traj, &exact).abs() < 1e-20);
        let shifted: Vec<_> = exact.iter().map(|&(f, v)| (f, v + 1.0)).collect();
        assert!((focal_regularizer(&traj, &shifted) - 1.0).abs() < 1e-12);
        let res = [0.3, -1.2, 0.7, 2.0];
        let noisy: Vec<_> = exact.iter().zip(res).map(|(&(f, v), r)| (f, v + r)).collect();
        let mse = (0.09 + 1.44 + 0.49 + 4.0) / 4.0;
        assert!((focal_regularizer(&traj, &noisy) - mse).abs() < 1e-12);
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = CameraFrame::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::y(), 300.0, 64, 64);
        let back = cameras_from_json(&cameras_to_json(&[cam.clone()]).unwrap()).unwrap();
        assert_eq!(back, vec![cam]);
    }
}
