//! Unbounded sRGB transfer curve.
//!
//! Gaussian colors are stored in the sRGB-encoded domain but without the usual
//! [0, 1] clamp, and are linearized before compositing. Both directions are
//! odd-extended below zero so the map stays a monotone bijection of the reals.

use serde::{Deserialize, Serialize};

use crate::image::ImageBuffer;

/// Color space carried by every image and color argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorTag {
    LinearHDR,
    UnboundedSRGB,
}

const A: f64 = 0.055;
const GAMMA: f64 = 2.4;
const SLOPE: f64 = 12.92;

/// Encoded-domain knee: the exact intersection of the linear and power
/// branches, so the curve is continuous to machine precision.
pub const ENCODED_KNEE: f64 = 0.040_448_236_277_108_19;
/// Linear-domain knee, `ENCODED_KNEE / 12.92`.
pub const LINEAR_KNEE: f64 = ENCODED_KNEE / SLOPE;

/// Encoded (unbounded sRGB) to linear.
#[inline]
pub fn srgb_inverse(x: f64) -> f64 {
    let a = x.abs();
    let y = if a <= ENCODED_KNEE {
        a / SLOPE
    } else {
        ((a + A) / (1.0 + A)).powf(GAMMA)
    };
    y.copysign(x)
}

/// Linear to encoded (unbounded sRGB).
#[inline]
pub fn srgb_forward(y: f64) -> f64 {
    let a = y.abs();
    let x = if a <= LINEAR_KNEE {
        a * SLOPE
    } else {
        (1.0 + A) * a.powf(1.0 / GAMMA) - A
    };
    x.copysign(y)
}

/// d srgb_inverse / dx.
#[inline]
pub fn srgb_inverse_deriv(x: f64) -> f64 {
    let a = x.abs();
    if a <= ENCODED_KNEE {
        1.0 / SLOPE
    } else {
        GAMMA / (1.0 + A) * ((a + A) / (1.0 + A)).powf(GAMMA - 1.0)
    }
}

/// d srgb_forward / dy.
#[inline]
pub fn srgb_forward_deriv(y: f64) -> f64 {
    let a = y.abs();
    if a <= LINEAR_KNEE {
        SLOPE
    } else {
        (1.0 + A) / GAMMA * a.powf(1.0 / GAMMA - 1.0)
    }
}

/// Converts the RGB channels of `img` into `target`; alpha is copied as is.
pub fn convert_image(img: &ImageBuffer, target: ColorTag) -> ImageBuffer {
    if img.tag == target {
        return img.clone();
    }
    let f: fn(f64) -> f64 = match target {
        ColorTag::LinearHDR => srgb_inverse,
        ColorTag::UnboundedSRGB => srgb_forward,
    };
    let mut out = img.clone();
    out.tag = target;
    for px in out.data.chunks_exact_mut(4) {
        for c in &mut px[..3] {
            *c = f(*c as f64) as f32;
        }
    }
    out
}

/// Display mapping used by metrics and the flow estimator: encode to sRGB and
/// clamp to [0, 1].
#[inline]
pub fn to_display(value: f64, tag: ColorTag) -> f64 {
    let v = match tag {
        ColorTag::LinearHDR => srgb_forward(value),
        ColorTag::UnboundedSRGB => value,
    };
    v.clamp(0.0, 1.0)
}
