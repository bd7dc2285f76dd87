//! Dynamic Gaussian splatting with polynomial motion, HDR-aware training and
//! temporal stabilization of enhanced renders.

pub mod camera;
pub mod colorspace;
pub mod error;
pub mod gaussian4d;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod photometric;
pub mod render;
pub mod scene;
pub mod sh;
pub mod splatter;
pub mod stabilizer;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
