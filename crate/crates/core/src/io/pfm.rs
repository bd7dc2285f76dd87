//! Portable float maps.
//!
//! Written little-endian (scale -1.0) with rows stored bottom to top, as the
//! format requires. RGBA images are stored as an RGB `PF` file next to a
//! grayscale `Pf` file with the `_alpha.pfm` suffix.

use std::path::{Path, PathBuf};

use crate::colorspace::ColorTag;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

use super::{read_file, write_file};

/// A decoded PFM with rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn encode(pfm: &Pfm) -> Vec<u8> {
    let tag = if pfm.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", pfm.width, pfm.height).into_bytes();
    let row_len = pfm.width * pfm.channels;
    out.reserve(4 * pfm.data.len());
    for y in (0..pfm.height).rev() {
        for v in &pfm.data[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_whitespace(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_whitespace();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Parse {
            offset: start,
            message: format!("{what} is not valid text"),
        })
    }

    fn parsed<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        self.skip_whitespace();
        let start = self.pos;
        let tok = self.token(what)?;
        tok.parse().map_err(|_| Error::Parse {
            offset: start,
            message: format!("invalid {what} {tok:?}"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pfm> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match cur.token("PFM magic")? {
        "PF" => 3,
        "Pf" => 1,
        other => {
            return Err(Error::Parse {
                offset: 0,
                message: format!("unknown PFM magic {other:?}"),
            })
        }
    };
    let width: usize = cur.parsed("width")?;
    let height: usize = cur.parsed("height")?;
    let scale: f32 = cur.parsed("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(cur.err("scale must be a nonzero finite number"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected a single whitespace byte after the scale")),
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let need = count * 4;
    let body = &bytes[cur.pos..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated sample data: need {need} bytes, found {}", body.len()),
        });
    }
    let little = scale < 0.0;
    let row_len = width * channels;
    let mut data = vec![0.0f32; count];
    for (i, chunk) in body[..need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let file_row = i / row_len.max(1);
        let y = height - 1 - file_row;
        data[y * row_len + i % row_len.max(1)] = v;
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

pub fn read(path: &Path) -> Result<Pfm> {
    decode(&read_file(path)?).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write(path: &Path, pfm: &Pfm) -> Result<()> {
    write_file(path, &encode(pfm))
}

/// The companion alpha path of an RGB PFM path: `a/b.pfm` becomes `a/b_alpha.pfm`.
pub fn alpha_path(rgb_path: &Path) -> PathBuf {
    let stem = rgb_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    rgb_path.with_file_name(format!("{stem}_alpha.pfm"))
}

pub fn rgb_of(img: &ImageBuffer) -> Pfm {
    Pfm {
        width: img.width,
        height: img.height,
        channels: 3,
        data: img.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
    }
}

pub fn alpha_of(img: &ImageBuffer) -> Pfm {
    Pfm {
        width: img.width,
        height: img.height,
        channels: 1,
        data: img.data.chunks_exact(4).map(|p| p[3]).collect(),
    }
}

pub fn gray(width: usize, height: usize, data: Vec<f32>) -> Pfm {
    Pfm {
        width,
        height,
        channels: 1,
        data,
    }
}

/// Combines an RGB map and an optional alpha map into an image.
pub fn to_image(rgb: &Pfm, alpha: Option<&Pfm>, tag: ColorTag) -> Result<ImageBuffer> {
    if rgb.channels != 3 {
        return Err(Error::InvalidArgument("color PFM must have 3 channels".into()));
    }
    if let Some(a) = alpha {
        if a.channels != 1 {
            return Err(Error::InvalidArgument("alpha PFM must be grayscale".into()));
        }
        if (a.width, a.height) != (rgb.width, rgb.height) {
            return Err(Error::SizeMismatch {
                left: (rgb.width, rgb.height),
                right: (a.width, a.height),
            });
        }
    }
    let mut img = ImageBuffer::new(rgb.width, rgb.height, tag);
    for (i, px) in img.data.chunks_exact_mut(4).enumerate() {
        px[..3].copy_from_slice(&rgb.data[3 * i..3 * i + 3]);
        px[3] = alpha.map_or(1.0, |a| a.data[i]);
    }
    Ok(img)
}

/// Writes `path` (RGB) and its `_alpha.pfm` companion.
pub fn write_rgba(path: &Path, img: &ImageBuffer) -> Result<()> {
    write(path, &rgb_of(img))?;
    write(&alpha_path(path), &alpha_of(img))
}

/// Reads an RGB PFM and its alpha companion; a missing companion means opaque.
pub fn read_rgba(path: &Path, tag: ColorTag) -> Result<ImageBuffer> {
    let rgb = read(path)?;
    let apath = alpha_path(path);
    let alpha = if apath.exists() { Some(read(&apath)?) } else { None };
    to_image(&rgb, alpha.as_ref(), tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_byte_layout() {
        // 2x2 RGB: top row (1,2,3) (4,5,6); bottom row (-1,0.5,0) (7,8,9).
        let pfm = Pfm {
            width: 2,
            height: 2,
            channels: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -1.0, 0.5, 0.0, 7.0, 8.0, 9.0],
        };
        let mut expected = b"PF\n2 2\n-1.0\n".to_vec();
        for v in [-1.0f32, 0.5, 0.0, 7.0, 8.0, 9.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(encode(&pfm), expected);
        assert_eq!(decode(&expected).unwrap(), pfm);

        let g = gray(2, 1, vec![0.25, -3.0]);
        let bytes = encode(&g);
        assert_eq!(
            bytes,
            [b"Pf\n2 1\n-1.0\n".as_slice(), &[0, 0, 0x80, 0x3e], &[0, 0, 0x40, 0xc0]].concat()
        );
    }

    #[test]
    fn big_endian_input_is_accepted() {
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.0f32.to_be_bytes());
        bytes.extend_from_slice(&3.0f32.to_be_bytes());
        let p = decode(&bytes).unwrap();
        assert_eq!(p.data, vec![3.0, 2.0]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let e = decode(b"P6\n1 1\n-1.0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 0, .. }));
        let e = decode(b"PF\n1 x\n-1.0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 5, .. }), "{e}");
        let e = decode(b"PF\n1 1\n0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        let e = decode(b"PF\n2 1\n-1.0\n\0\0\0\0").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 16, .. }), "{e}");
        let e = decode(b"PF\n2").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 4, .. }), "{e}");
    }

    #[test]
    fn rgba_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageBuffer::new(5, 3, ColorTag::LinearHDR);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.137).sin() * 3.0 + f32::EPSILON;
        }
        img.data[7] = f32::MIN_POSITIVE / 4.0;
        let path = dir.path().join("frames/f_000.pfm");
        write_rgba(&path, &img).unwrap();
        assert!(dir.path().join("frames/f_000_alpha.pfm").exists());
        let back = read_rgba(&path, ColorTag::LinearHDR).unwrap();
        assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), img.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
