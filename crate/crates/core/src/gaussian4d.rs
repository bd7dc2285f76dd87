//! Polynomial 4D Gaussian primitives.
//!
//! Every time-dependent attribute of a primitive is a polynomial in
//! `tau = t - t0`:
//!
//! * mean: `sum_i mu_i tau^i`
//! * rotation: `normalize(sum_i q_i tau^i)`
//! * scale: `exp(sum_i s_i tau^i)` (coefficients are log-scale)
//! * opacity: `o0 * exp(-0.5 * sum_{i>=1} lambda_i tau^(2i))`
//!
//! Colors are time-constant spherical harmonics.

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial orders of mean, rotation, log-scale and the opacity envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degrees {
    pub mu: usize,
    pub q: usize,
    pub s: usize,
    pub o: usize,
}

impl Default for Degrees {
    fn default() -> Self {
        Degrees {
            mu: 2,
            q: 1,
            s: 0,
            o: 2,
        }
    }
}

impl Degrees {
    pub const fn new(mu: usize, q: usize, s: usize, o: usize) -> Self {
        Degrees { mu, q, s, o }
    }
}

/// Number of SH coefficients per color channel for degree `l`.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// One 4D primitive. Quaternions are stored `(w, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyGaussian {
    pub mu: Vec<Vector3<f64>>,
    pub q: Vec<Vector4<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub o0: f64,
    pub lambdas: Vec<f64>,
    pub t0: f64,
    /// SH coefficients, one RGB triple per basis function.
    pub sh: Vec<Vector3<f64>>,
}

impl PolyGaussian {
    /// A static isotropic primitive with all higher-order terms zero.
    pub fn isotropic(
        degrees: Degrees,
        sh_degree: usize,
        mean: Vector3<f64>,
        scale: f64,
        opacity: f64,
    ) -> Self {
        let mut mu = vec![Vector3::zeros(); degrees.mu + 1];
        mu[0] = mean;
        let mut q = vec![Vector4::zeros(); degrees.q + 1];
        q[0] = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let mut log_scale = vec![Vector3::zeros(); degrees.s + 1];
        log_scale[0] = Vector3::repeat(scale.ln());
        PolyGaussian {
            mu,
            q,
            log_scale,
            o0: opacity,
            lambdas: vec![0.0; degrees.o],
            t0: 0.0,
            sh: vec![Vector3::zeros(); sh_coeff_count(sh_degree)],
        }
    }

    pub fn degrees(&self) -> Degrees {
        Degrees {
            mu: self.mu.len() - 1,
            q: self.q.len() - 1,
            s: self.log_scale.len() - 1,
            o: self.lambdas.len(),
        }
    }

    pub fn sh_degree(&self) -> usize {
        (self.sh.len() as f64).sqrt() as usize - 1
    }

    /// Opacity envelope `exp(-0.5 sum lambda_i tau^(2i))`.
    pub fn envelope(&self, tau: f64) -> f64 {
        let tau2 = tau * tau;
        let mut p = 1.0;
        let mut acc = 0.0;
        for &l in &self.lambdas {
            p *= tau2;
            acc += l * p;
        }
        (-0.5 * acc).exp()
    }

    /// Largest opacity reached on `[t_a, t_b]`. The envelope is even and
    /// non-increasing in `|tau|`, so the peak is at the clamped center.
    pub fn peak_opacity(&self, t_a: f64, t_b: f64) -> f64 {
        let t = self.t0.clamp(t_a, t_b);
        self.o0 * self.envelope(t - self.t0)
    }
}

/// A primitive evaluated at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSlice<'a> {
    pub mean: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: Vector4<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub sh: &'a [Vector3<f64>],
}

/// Gradient of a scalar loss with respect to the slice attributes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SliceGrad {
    pub mean: Vector3<f64>,
    /// With respect to the normalized quaternion.
    pub rotation: Vector4<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
}

/// Gradient with respect to the primitive's coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyGrad {
    pub mu: Vec<Vector3<f64>>,
    pub q: Vec<Vector4<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub o0: f64,
    pub lambdas: Vec<f64>,
    pub t0: f64,
}

fn powers(tau: f64, n: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(n + 1);
    let mut acc = 1.0;
    for _ in 0..=n {
        p.push(acc);
        acc *= tau;
    }
    p
}

fn poly_sum<const D: usize>(
    coeffs: &[nalgebra::SVector<f64, D>],
    pw: &[f64],
) -> nalgebra::SVector<f64, D> {
    coeffs
        .iter()
        .zip(pw)
        .fold(nalgebra::SVector::zeros(), |acc, (c, &p)| acc + c * p)
}

/// d/dtau of a polynomial with the given coefficients.
fn poly_deriv<const D: usize>(
    coeffs: &[nalgebra::SVector<f64, D>],
    pw: &[f64],
) -> nalgebra::SVector<f64, D> {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .fold(nalgebra::SVector::zeros(), |acc, (i, c)| {
            acc + c * (i as f64 * pw[i - 1])
        })
}

const MIN_QUAT_NORM: f64 = 1e-12;

/// Evaluates `g` at time `t`.
pub fn evaluate(g: &PolyGaussian, t: f64) -> Result<GaussianSlice<'_>> {
    let tau = t - g.t0;
    let n = g.mu.len().max(g.q.len()).max(g.log_scale.len());
    let pw = powers(tau, n);
    let mean = poly_sum(&g.mu, &pw);
    let q_raw = poly_sum(&g.q, &pw);
    let norm = q_raw.norm();
    if !(norm >= MIN_QUAT_NORM) {
        return Err(Error::DegenerateRotation { norm });
    }
    let scale = poly_sum(&g.log_scale, &pw).map(f64::exp);
    Ok(GaussianSlice {
        mean,
        rotation: q_raw / norm,
        scale,
        opacity: g.o0 * g.envelope(tau),
        sh: &g.sh,
    })
}

/// Evaluates every primitive at `t`, preserving order.
pub fn evaluate_batch(gs: &[PolyGaussian], t: f64) -> Result<Vec<GaussianSlice<'_>>> {
    gs.par_iter()
        .enumerate()
        .map(|(i, g)| evaluate(g, t).map_err(|e| Error::at(i, e)))
        .collect()
}

/// Back-propagates a slice gradient to the polynomial coefficients.
pub fn evaluate_grad(g: &PolyGaussian, t: f64, upstream: &SliceGrad) -> Result<PolyGrad> {
    let tau = t - g.t0;
    let n = g.mu.len().max(g.q.len()).max(g.log_scale.len());
    let pw = powers(tau, n);

    let mu: Vec<_> = pw[..g.mu.len()].iter().map(|&p| upstream.mean * p).collect();

    let q_raw = poly_sum(&g.q, &pw);
    let norm = q_raw.norm();
    if !(norm >= MIN_QUAT_NORM) {
        return Err(Error::DegenerateRotation { norm });
    }
    let qn = q_raw / norm;
    let d_qraw = (upstream.rotation - qn * qn.dot(&upstream.rotation)) / norm;
    let q: Vec<_> = pw[..g.q.len()].iter().map(|&p| d_qraw * p).collect();

    let scale = poly_sum(&g.log_scale, &pw).map(f64::exp);
    let d_logsum = upstream.scale.component_mul(&scale);
    let log_scale: Vec<_> = pw[..g.log_scale.len()]
        .iter()
        .map(|&p| d_logsum * p)
        .collect();

    let env = g.envelope(tau);
    let opacity = g.o0 * env;
    let o0 = upstream.opacity * env;
    let tau2 = tau * tau;
    let mut p2 = 1.0;
    let mut lambdas = Vec::with_capacity(g.lambdas.len());
    // d(exponent)/dtau for the envelope, used by the t0 gradient.
    let mut d_expo_dtau = 0.0;
    for (i, &l) in g.lambdas.iter().enumerate() {
        let order = (i + 1) as f64;
        d_expo_dtau += -0.5 * l * 2.0 * order * p2 * tau;
        p2 *= tau2;
        lambdas.push(upstream.opacity * opacity * (-0.5 * p2));
    }

    // Every attribute depends on t0 through tau = t - t0.
    let d_mean_dtau = poly_deriv(&g.mu, &pw);
    let d_qraw_dtau = poly_deriv(&g.q, &pw);
    let d_logsum_dtau = poly_deriv(&g.log_scale, &pw);
    let d_tau = upstream.mean.dot(&d_mean_dtau)
        + d_qraw.dot(&d_qraw_dtau)
        + d_logsum.dot(&d_logsum_dtau)
        + upstream.opacity * opacity * d_expo_dtau;

    Ok(PolyGrad {
        mu,
        q,
        log_scale,
        o0,
        lambdas,
        t0: -d_tau,
    })
}
