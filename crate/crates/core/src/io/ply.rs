//! PLY point clouds (ascii or binary little-endian).
//!
//! Only the `vertex` element is read; it must come first in binary files.
//! Float colors are taken as linear RGB, 8-bit colors as display sRGB.

use std::path::Path;

use nalgebra::Vector3;

use crate::colorspace::srgb_inverse;
use crate::error::{Error, Result};

use super::{read_file, write_file};

/// Points with linear RGB colors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

struct Header {
    format: Format,
    count: usize,
    props: Vec<(String, Scalar)>,
    body_offset: usize,
}

fn parse_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut format = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut seen_other_first = false;
    let mut first = true;
    loop {
        let start = pos;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| parse_error(start, "header is not terminated by end_header"))?;
        pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| parse_error(start, "header line is not valid text"))?
            .trim_end_matches('\r')
            .trim();
        if first {
            if line != "ply" {
                return Err(parse_error(start, "missing 'ply' magic"));
            }
            first = false;
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", other, ..] => return Err(parse_error(start, format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(parse_error(start, "duplicate vertex element"));
                }
                count = Some(n.parse().map_err(|_| parse_error(start, format!("invalid vertex count {n:?}")))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    seen_other_first = true;
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_error(start, "list properties on vertices are not supported"))
            }
            ["property", ty, name] => {
                if in_vertex {
                    let s = Scalar::parse(ty).ok_or_else(|| parse_error(start, format!("unknown property type {ty}")))?;
                    props.push((name.to_string(), s));
                }
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(parse_error(start, format!("unrecognized header line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| parse_error(0, "missing format line"))?;
    let count = count.ok_or_else(|| parse_error(0, "missing vertex element"))?;
    if seen_other_first && format == Format::BinaryLe {
        return Err(parse_error(0, "vertex must be the first element of a binary file"));
    }
    Ok(Header {
        format,
        count,
        props,
        body_offset: pos,
    })
}

fn find(props: &[(String, Scalar)], names: &[&str]) -> Option<usize> {
    props.iter().position(|(n, _)| names.contains(&n.as_str()))
}

pub fn decode(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let props = &header.props;
    let xyz = [find(props, &["x"]), find(props, &["y"]), find(props, &["z"])];
    let [Some(ix), Some(iy), Some(iz)] = xyz else {
        return Err(parse_error(0, "vertex element lacks x, y or z"));
    };
    let rgb = [
        find(props, &["red", "r"]),
        find(props, &["green", "g"]),
        find(props, &["blue", "b"]),
    ];
    let color_idx = match rgb {
        [Some(r), Some(g), Some(b)] => Some([r, g, b]),
        _ => None,
    };

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(header.count);
    match header.format {
        Format::BinaryLe => {
            let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
            let mut pos = header.body_offset;
            for _ in 0..header.count {
                if pos + stride > bytes.len() {
                    return Err(parse_error(pos, "truncated vertex data"));
                }
                let mut row = Vec::with_capacity(props.len());
                let mut off = pos;
                for (_, s) in props {
                    row.push(s.read_le(&bytes[off..off + s.size()]));
                    off += s.size();
                }
                rows.push(row);
                pos += stride;
            }
        }
        Format::Ascii => {
            let mut pos = header.body_offset;
            for _ in 0..header.count {
                let start = pos;
                let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| pos + i);
                if start >= bytes.len() {
                    return Err(parse_error(start, "truncated vertex data"));
                }
                pos = end + 1;
                let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| parse_error(start, "vertex line is not valid text"))?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|w| w.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_error(start, format!("invalid vertex line {line:?}")))?;
                if row.len() < props.len() {
                    return Err(parse_error(start, "vertex line has too few values"));
                }
                rows.push(row);
            }
        }
    }

    let mut cloud = PointCloud::default();
    for row in rows {
        cloud.positions.push(Vector3::new(row[ix], row[iy], row[iz]));
        let color = match color_idx {
            Some(idx) => Vector3::from_iterator(idx.iter().map(|&i| {
                if props[i].1.is_float() {
                    row[i]
                } else {
                    srgb_inverse(row[i] / 255.0)
                }
            })),
            None => Vector3::repeat(srgb_inverse(0.5)),
        };
        cloud.colors.push(color);
    }
    Ok(cloud)
}

/// Binary little-endian with float positions and linear float colors.
pub fn encode(cloud: &PointCloud) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float red\nproperty float green\nproperty float blue\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for v in p.iter().chain(c.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read(path: &Path) -> Result<PointCloud> {
    decode(&read_file(path)?)
}

pub fn write(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_file(path, &encode(cloud))
}
