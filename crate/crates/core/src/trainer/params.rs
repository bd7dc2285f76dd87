//! Flat optimization layout of primitives.
//!
//! Each primitive occupies `stride` consecutive slots: mean coefficients,
//! rotation coefficients, log-scale coefficients, logit of the base opacity,
//! log of each envelope rate, temporal center, SH. Opacity and envelope
//! rates are optimized through those transforms so they stay in range.

use nalgebra::{Vector3, Vector4};

use crate::gaussian4d::{sh_coeff_count, Degrees, PolyGaussian, PolyGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Group {
    Mean(usize),
    Rotation,
    Scale,
    Opacity,
    TimeCenter,
    Color,
}

const OPACITY_EPS: f64 = 1e-6;
const MIN_RATE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub degrees: Degrees,
    pub sh_count: usize,
    pub stride: usize,
    pub groups: Vec<Group>,
}

pub(crate) fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Layout {
    pub fn new(degrees: Degrees, sh_degree: usize) -> Self {
        let sh_count = sh_coeff_count(sh_degree);
        let mut groups = Vec::new();
        for order in 0..=degrees.mu {
            groups.extend([Group::Mean(order); 3]);
        }
        groups.extend(std::iter::repeat_n(Group::Rotation, 4 * (degrees.q + 1)));
        groups.extend(std::iter::repeat_n(Group::Scale, 3 * (degrees.s + 1)));
        groups.extend(std::iter::repeat_n(Group::Opacity, 1 + degrees.o));
        groups.push(Group::TimeCenter);
        groups.extend(std::iter::repeat_n(Group::Color, 3 * sh_count));
        Layout {
            degrees,
            sh_count,
            stride: groups.len(),
            groups,
        }
    }

    pub fn pack(&self, g: &PolyGaussian, out: &mut [f64]) {
        let mut k = 0;
        let mut put = |v: f64| {
            out[k] = v;
            k += 1;
        };
        g.mu.iter().flat_map(|v| v.iter()).for_each(|&v| put(v));
        g.q.iter().flat_map(|v| v.iter()).for_each(|&v| put(v));
        g.log_scale.iter().flat_map(|v| v.iter()).for_each(|&v| put(v));
        put(logit(g.o0));
        g.lambdas.iter().for_each(|&l| put(l.max(MIN_RATE).ln()));
        put(g.t0);
        g.sh.iter().flat_map(|v| v.iter()).for_each(|&v| put(v));
    }

    pub fn unpack(&self, x: &[f64]) -> PolyGaussian {
        let d = self.degrees;
        let mut k = 0;
        let mut take = || {
            k += 1;
            x[k - 1]
        };
        let mu = (0..=d.mu).map(|_| Vector3::new(take(), take(), take())).collect();
        let q = (0..=d.q).map(|_| Vector4::new(take(), take(), take(), take())).collect();
        let log_scale = (0..=d.s).map(|_| Vector3::new(take(), take(), take())).collect();
        let o0 = sigmoid(take());
        let lambdas = (0..d.o).map(|_| take().exp()).collect();
        let t0 = take();
        let sh = (0..self.sh_count).map(|_| Vector3::new(take(), take(), take())).collect();
        PolyGaussian {
            mu,
            q,
            log_scale,
            o0,
            lambdas,
            t0,
            sh,
        }
    }

    /// Writes the gradient with respect to the packed parameters.
    pub fn pack_grad(&self, g: &PolyGaussian, pg: &PolyGrad, d_sh: &[Vector3<f64>], out: &mut [f64]) {
        let mut k = 0;
        let mut put = |v: f64| {
            out[k] = v;
            k += 1;
        };
        pg.mu.iter().flat_map(|v| v.iter()).for_each(|&v| put(v));
        pg.q.iter().flat_map(|v| v.iter()).for_each(|&v| put(v));
        pg.log_scale.iter().flat_map(|v| v.iter()).for_each(|&v| put(v));
        put(pg.o0 * g.o0 * (1.0 - g.o0));
        pg.lambdas.iter().zip(&g.lambdas).for_each(|(&d, &l)| put(d * l));
        put(pg.t0);
        d_sh.iter().flat_map(|v| v.iter()).for_each(|&v| put(v));
    }
}
