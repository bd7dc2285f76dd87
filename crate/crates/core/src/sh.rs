//! Real spherical harmonics up to degree 3 (Condon-Shortley phase, the
//! ordering used by common splatting implementations).
//!
//! Colors are the raw dot product of coefficients and basis; no constant
//! offset is added because stored colors live in unbounded sRGB.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values for the first `count` functions at unit direction `d`.
pub fn basis(d: &Vector3<f64>, count: usize) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if count > 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if count > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if count > 9 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis polynomial with respect to (x, y, z).
fn basis_grad(d: &Vector3<f64>, count: usize) -> [[f64; 3]; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut g = [[0.0; 3]; 16];
    if count > 1 {
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if count > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let c = SH_C2;
        g[4] = [c[0] * y, c[0] * x, 0.0];
        g[5] = [0.0, c[1] * z, c[1] * y];
        g[6] = [-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z];
        g[7] = [c[3] * z, 0.0, c[3] * x];
        g[8] = [2.0 * c[4] * x, -2.0 * c[4] * y, 0.0];
        if count > 9 {
            let c = SH_C3;
            g[9] = [c[0] * 6.0 * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0];
            g[10] = [c[1] * y * z, c[1] * x * z, c[1] * x * y];
            g[11] = [
                c[2] * -2.0 * x * y,
                c[2] * (4.0 * zz - xx - 3.0 * yy),
                c[2] * 8.0 * y * z,
            ];
            g[12] = [
                c[3] * -6.0 * x * z,
                c[3] * -6.0 * y * z,
                c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                c[4] * (4.0 * zz - 3.0 * xx - yy),
                c[4] * -2.0 * x * y,
                c[4] * 8.0 * x * z,
            ];
            g[14] = [c[5] * 2.0 * x * z, c[5] * -2.0 * y * z, c[5] * (xx - yy)];
            g[15] = [c[6] * (3.0 * xx - 3.0 * yy), c[6] * -6.0 * x * y, 0.0];
        }
    }
    g
}

/// Color of an SH block seen along unit direction `view_dir`.
pub fn evaluate_sh(sh: &[Vector3<f64>], view_dir: &Vector3<f64>) -> Vector3<f64> {
    debug_assert!(sh.len() <= 16);
    let b = basis(view_dir, sh.len());
    sh.iter()
        .zip(b.iter())
        .fold(Vector3::zeros(), |acc, (c, &w)| acc + c * w)
}

/// Backward of [`evaluate_sh`]: returns coefficient gradients (accumulated
/// into `d_sh`) and the gradient with respect to the unnormalized direction
/// components.
pub fn evaluate_sh_backward(
    sh: &[Vector3<f64>],
    view_dir: &Vector3<f64>,
    upstream: &Vector3<f64>,
    d_sh: &mut [Vector3<f64>],
) -> Vector3<f64> {
    let b = basis(view_dir, sh.len());
    for (d, &w) in d_sh.iter_mut().zip(b.iter()) {
        *d += upstream * w;
    }
    let g = basis_grad(view_dir, sh.len());
    let mut d_dir = Vector3::zeros();
    for (c, gk) in sh.iter().zip(g.iter()).skip(1) {
        let s = c.dot(upstream);
        d_dir += Vector3::new(gk[0], gk[1], gk[2]) * s;
    }
    d_dir
}
