//! Binary model container.
//!
//! Little-endian. Header: `P4GS`, version u32, count u64, four u8 polynomial
//! degrees (mean, rotation, scale, opacity), SH degree u8, segment time range
//! as two f32. Then one f32 record per primitive with fields in declaration
//! order (mean coefficients, rotation coefficients, log-scale coefficients,
//! base opacity, envelope rates, temporal center, SH). The photometric grids
//! follow: u32 grid count, then per camera (ids ascending) a u32 id and the
//! black-level and exposure blocks of 32x32 f32 each.

use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::gaussian4d::{sh_coeff_count, Degrees, PolyGaussian};
use crate::photometric::{PhotometricGrid, GRID_CELLS};

use super::{read_file, write_file};

pub const MAGIC: &[u8; 4] = b"P4GS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub degrees: Degrees,
    pub sh_degree: usize,
    pub time_range: (f64, f64),
    pub gaussians: Vec<PolyGaussian>,
    pub grids: Vec<PhotometricGrid>,
}

impl Model {
    /// Checks that every primitive matches the declared layout.
    pub fn validate(&self) -> Result<()> {
        let d = self.degrees;
        if d.mu > 255 || d.q > 255 || d.s > 255 || d.o > 255 || self.sh_degree > 3 {
            return Err(Error::InvalidArgument("degrees out of range".into()));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.degrees() != d || g.sh.len() != sh_coeff_count(self.sh_degree) {
                return Err(Error::at(
                    i,
                    Error::InvalidArgument("primitive layout differs from the container header".into()),
                ));
            }
        }
        for w in self.grids.windows(2) {
            if w[0].camera_id >= w[1].camera_id {
                return Err(Error::InvalidArgument("grid camera ids must be strictly ascending".into()));
            }
        }
        for g in &self.grids {
            g.validate()?;
        }
        Ok(())
    }

    pub fn grid(&self, camera_id: u32) -> Option<&PhotometricGrid> {
        self.grids.iter().find(|g| g.camera_id == camera_id)
    }
}

fn record_len(d: Degrees, sh_degree: usize) -> usize {
    3 * (d.mu + 1) + 4 * (d.q + 1) + 3 * (d.s + 1) + 1 + d.o + 1 + 3 * sh_coeff_count(sh_degree)
}

fn put(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let d = model.degrees;
    let mut out = Vec::with_capacity(32 + model.gaussians.len() * 4 * record_len(d, model.sh_degree));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.gaussians.len() as u64).to_le_bytes());
    out.extend_from_slice(&[d.mu as u8, d.q as u8, d.s as u8, d.o as u8, model.sh_degree as u8]);
    put(&mut out, model.time_range.0);
    put(&mut out, model.time_range.1);
    for g in &model.gaussians {
        g.mu.iter().flat_map(|v| v.iter()).for_each(|&v| put(&mut out, v));
        g.q.iter().flat_map(|v| v.iter()).for_each(|&v| put(&mut out, v));
        g.log_scale.iter().flat_map(|v| v.iter()).for_each(|&v| put(&mut out, v));
        put(&mut out, g.o0);
        g.lambdas.iter().for_each(|&v| put(&mut out, v));
        put(&mut out, g.t0);
        g.sh.iter().flat_map(|v| v.iter()).for_each(|&v| put(&mut out, v));
    }
    out.extend_from_slice(&(model.grids.len() as u32).to_le_bytes());
    for grid in &model.grids {
        out.extend_from_slice(&grid.camera_id.to_le_bytes());
        grid.black.iter().chain(&grid.exposure).for_each(|&v| put(&mut out, v));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated container while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f(&mut self, what: &str) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as f64)
    }

    fn v3(&mut self, what: &str) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f(what)?, self.f(what)?, self.f(what)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a model container (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported container version {version}"),
        });
    }
    let count = u64::from_le_bytes(r.take(8, "count")?.try_into().unwrap()) as usize;
    let hdr = r.take(5, "degrees")?;
    let degrees = Degrees::new(hdr[0] as usize, hdr[1] as usize, hdr[2] as usize, hdr[3] as usize);
    let sh_degree = hdr[4] as usize;
    if sh_degree > 3 {
        return Err(Error::Parse {
            offset: r.pos - 1,
            message: format!("SH degree {sh_degree} exceeds 3"),
        });
    }
    let time_range = (r.f("time range")?, r.f("time range")?);
    let need = count
        .checked_mul(4 * record_len(degrees, sh_degree))
        .ok_or_else(|| Error::Parse { offset: 8, message: "primitive count overflows".into() })?;
    if r.pos + need > bytes.len() {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated container: {count} primitives need {need} bytes"),
        });
    }
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let mu = (0..=degrees.mu).map(|_| r.v3("mean")).collect::<Result<_>>()?;
        let q = (0..=degrees.q)
            .map(|_| Ok(Vector4::new(r.f("rotation")?, r.f("rotation")?, r.f("rotation")?, r.f("rotation")?)))
            .collect::<Result<_>>()?;
        let log_scale = (0..=degrees.s).map(|_| r.v3("scale")).collect::<Result<_>>()?;
        let o0 = r.f("opacity")?;
        let lambdas = (0..degrees.o).map(|_| r.f("envelope")).collect::<Result<_>>()?;
        let t0 = r.f("temporal center")?;
        let sh = (0..sh_coeff_count(sh_degree)).map(|_| r.v3("sh")).collect::<Result<_>>()?;
        gaussians.push(PolyGaussian { mu, q, log_scale, o0, lambdas, t0, sh });
    }
    let mut grids = Vec::new();
    if r.pos < bytes.len() {
        let n = r.u32("grid count")?;
        for _ in 0..n {
            let camera_id = r.u32("grid camera id")?;
            let black = (0..GRID_CELLS).map(|_| r.f("black level")).collect::<Result<_>>()?;
            let exposure = (0..GRID_CELLS).map(|_| r.f("exposure")).collect::<Result<_>>()?;
            grids.push(PhotometricGrid { camera_id, black, exposure });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            message: "trailing bytes after container".into(),
        });
    }
    Ok(Model { degrees, sh_degree, time_range, gaussians, grids })
}

pub fn read(path: &Path) -> Result<Model> {
    decode(&read_file(path)?)
}

pub fn write(path: &Path, model: &Model) -> Result<()> {
    write_file(path, &encode(model)?)
}

/// Rounds every parameter to f32, the precision stored on disk.
pub fn quantize(model: &Model) -> Result<Model> {
    decode(&encode(model)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Model {
        let d = Degrees::default();
        let mut g = PolyGaussian::isotropic(d, 1, Vector3::new(0.5, -1.0, 2.0), 0.1, 0.8);
        g.mu[1] = Vector3::new(0.01, 0.0, -0.02);
        g.lambdas = vec![0.25, 0.5];
        g.t0 = 3.5;
        g.sh[0] = Vector3::new(1.0, 0.5, 0.25);
        let mut grid = PhotometricGrid::identity(4);
        grid.black[5] = 0.125;
        Model {
            degrees: d,
            sh_degree: 1,
            time_range: (-4.0, 3.0),
            gaussians: vec![g.clone(), g],
            grids: vec![PhotometricGrid::identity(1), grid],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"P4GS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(&bytes[16..21], &[2, 1, 0, 2, 1]);
        assert_eq!(f32::from_le_bytes(bytes[21..25].try_into().unwrap()), -4.0);
        // Record: 9 + 8 + 3 + 1 + 2 + 1 + 12 = 36 floats.
        assert_eq!(record_len(Degrees::default(), 1), 36);
        let grids_at = 29 + 2 * 36 * 4;
        assert_eq!(u32::from_le_bytes(bytes[grids_at..grids_at + 4].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), grids_at + 4 + 2 * (4 + 2 * GRID_CELLS * 4));
    }

    #[test]
    fn round_trip_of_f32_values_is_exact() {
        let m = quantize(&sample()).unwrap();
        assert_ne!(m, sample());
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back).unwrap(), encode(&m).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = encode(&sample()).unwrap();
        assert!(matches!(decode(&bytes[..40]), Err(Error::Parse { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Parse { offset: 0, .. })));
        let mut m = sample();
        m.grids.swap(0, 1);
        assert!(encode(&m).is_err());
        let mut m = sample();
        m.gaussians[1].lambdas.pop();
        assert!(matches!(encode(&m), Err(Error::AtIndex { index: 1, .. })));
    }
}
