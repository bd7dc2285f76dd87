use crate::colorspace::ColorTag;
use crate::error::{Error, Result};

/// Row-major RGBA image with 32-bit float samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub tag: ColorTag,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 4;

    /// All-zero image (transparent black).
    pub fn new(width: usize, height: usize, tag: ColorTag) -> Self {
        ImageBuffer {
            width,
            height,
            data: vec![0.0; width * height * 4],
            tag,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>, tag: ColorTag) -> Result<Self> {
        if data.len() != width * height * 4 {
            return Err(Error::InvalidSize(format!(
                "{} samples for a {width}x{height} RGBA image",
                data.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            data,
            tag,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 4] {
        let i = (y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, px: [f32; 4]) {
        let i = (y * self.width + x) * 4;
        self.data[i..i + 4].copy_from_slice(&px);
    }

    /// Channel `c` as an f64 plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.chunks_exact(4).map(|p| p[c] as f64).collect()
    }

    pub fn set_channel(&mut self, c: usize, plane: &[f64]) {
        for (p, &v) in self.data.chunks_exact_mut(4).zip(plane) {
            p[c] = v as f32;
        }
    }

    /// Builds an image from four f64 planes (RGB + alpha).
    pub fn from_planes(width: usize, height: usize, planes: [&[f64]; 4], tag: ColorTag) -> Self {
        let mut img = ImageBuffer::new(width, height, tag);
        for (c, plane) in planes.iter().enumerate() {
            img.set_channel(c, plane);
        }
        img
    }

    pub fn ensure_same_size(&self, other: &ImageBuffer) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::SizeMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    pub fn ensure_tag(&self, tag: ColorTag) -> Result<()> {
        if self.tag != tag {
            return Err(Error::TagMismatch {
                expected: tag,
                found: self.tag,
            });
        }
        Ok(())
    }

    /// RGB planes mapped to clamped display sRGB.
    pub fn display_rgb(&self) -> [Vec<f64>; 3] {
        let tag = self.tag;
        [0, 1, 2].map(|c| {
            self.data
                .chunks_exact(4)
                .map(|p| crate::colorspace::to_display(p[c] as f64, tag))
                .collect()
        })
    }
}
