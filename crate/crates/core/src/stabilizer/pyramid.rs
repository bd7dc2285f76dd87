//! Laplacian pyramid with an exactly consistent reduce/expand pair.
//!
//! Reduce is the 5-tap binomial blur followed by decimation. Expand is the
//! weighted minimum-norm right inverse of reduce, so `reduce(expand(x)) == x`
//! and every band has a zero reduction. That makes the pyramid a true
//! decomposition: rebuilding the pyramid of a collapsed pyramid returns the
//! same bands, and a swapped lowest level survives a rebuild.

use rayon::prelude::*;

use crate::colorspace::{convert_image, ColorTag};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const DEFAULT_LEVELS: usize = 5;
const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror index `j` into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect(j: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let j = j.rem_euclid(period);
    (if j >= n as i64 { period - j } else { j }) as usize
}

pub(crate) fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Sparse rows of the 1D reduce operator for a line of length `n`.
fn reduce_rows(n: usize) -> Vec<Vec<(usize, f64)>> {
    if n == 1 {
        return vec![vec![(0, 1.0)]];
    }
    (0..half(n))
        .map(|i| {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(5);
            for (k, &t) in TAPS.iter().enumerate() {
                let j = reflect(2 * i as i64 + k as i64 - 2, n);
                match row.iter_mut().find(|(c, _)| *c == j) {
                    Some(e) => e.1 += t,
                    None => row.push((j, t)),
                }
            }
            row
        })
        .collect()
}

fn reduce_line(src: &[f64], rows: &[Vec<(usize, f64)>], dst: &mut [f64]) {
    for (o, row) in dst.iter_mut().zip(rows) {
        *o = row.iter().map(|&(j, w)| w * src[j]).sum();
    }
}

/// 1D expand operator `W D^T (D W D^T)^{-1}` for one axis.
struct Expander {
    rows: Vec<Vec<(usize, f64)>>,
    inv_colsum: Vec<f64>,
    // LDL^T factor of the pentadiagonal Gram matrix.
    d: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl Expander {
    fn new(n: usize) -> Self {
        let rows = reduce_rows(n);
        let m = rows.len();
        let mut colsum = vec![0.0; n];
        for row in &rows {
            for &(j, w) in row {
                colsum[j] += w;
            }
        }
        let inv_colsum: Vec<f64> = colsum.iter().map(|c| 1.0 / c).collect();
        let gram = |a: usize, b: usize| -> f64 {
            rows[a]
                .iter()
                .filter_map(|&(j, wa)| rows[b].iter().find(|(c, _)| *c == j).map(|&(_, wb)| wa * wb * inv_colsum[j]))
                .sum()
        };
        let mut d = vec![0.0; m];
        let mut l1 = vec![0.0; m];
        let mut l2 = vec![0.0; m];
        for i in 0..m {
            let mut di = gram(i, i);
            if i >= 1 {
                di -= l1[i] * l1[i] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i] * l2[i] * d[i - 2];
            }
            d[i] = di;
            if i + 1 < m {
                let mut v = gram(i + 1, i);
                if i >= 1 {
                    v -= l2[i + 1] * l1[i] * d[i - 1];
                }
                l1[i + 1] = v / di;
            }
            if i + 2 < m {
                l2[i + 2] = gram(i + 2, i) / di;
            }
        }
        Expander { rows, inv_colsum, d, l1, l2 }
    }

    fn apply(&self, coarse: &[f64], fine: &mut [f64]) {
        let m = self.d.len();
        let mut z = coarse.to_vec();
        for i in 0..m {
            if i >= 1 {
                z[i] -= self.l1[i] * z[i - 1];
            }
            if i >= 2 {
                z[i] -= self.l2[i] * z[i - 2];
            }
        }
        for i in 0..m {
            z[i] /= self.d[i];
        }
        for i in (0..m).rev() {
            if i + 1 < m {
                z[i] -= self.l1[i + 1] * z[i + 1];
            }
            if i + 2 < m {
                z[i] -= self.l2[i + 2] * z[i + 2];
            }
        }
        fine.iter_mut().for_each(|v| *v = 0.0);
        for (row, &zi) in self.rows.iter().zip(&z) {
            for &(j, w) in row {
                fine[j] += w * zi;
            }
        }
        for (v, s) in fine.iter_mut().zip(&self.inv_colsum) {
            *v *= s;
        }
    }
}

fn transpose(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = src[y * w + x];
        }
    }
    out
}

/// Blur and decimate a `w x h` plane to `ceil(w/2) x ceil(h/2)`.
pub fn reduce(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (mw, mh) = (half(w), half(h));
    let rx = reduce_rows(w);
    let mut tmp = vec![0.0; mw * h];
    tmp.par_chunks_mut(mw)
        .zip(src.par_chunks(w))
        .for_each(|(dst, line)| reduce_line(line, &rx, dst));
    let t = transpose(&tmp, mw, h);
    let ry = reduce_rows(h);
    let mut out_t = vec![0.0; mh * mw];
    out_t
        .par_chunks_mut(mh)
        .zip(t.par_chunks(h))
        .for_each(|(dst, line)| reduce_line(line, &ry, dst));
    transpose(&out_t, mh, mw)
}

/// Right inverse of [`reduce`]: maps a `ceil(w/2) x ceil(h/2)` plane to `w x h`.
pub fn expand(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (mw, mh) = (half(w), half(h));
    debug_assert_eq!(src.len(), mw * mh);
    let ey = Expander::new(h);
    let t = transpose(src, mw, mh);
    let mut cols = vec![0.0; mw * h];
    cols.par_chunks_mut(h)
        .zip(t.par_chunks(mh))
        .for_each(|(dst, line)| ey.apply(line, dst));
    let tmp = transpose(&cols, h, mw);
    let ex = Expander::new(w);
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w)
        .zip(tmp.par_chunks(mw))
        .for_each(|(dst, line)| ex.apply(line, dst));
    out
}

/// One pyramid level: all four channels at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub width: usize,
    pub height: usize,
    pub channels: Vec<Vec<f64>>,
}

/// Band-pass levels finest first; the last level is the low-pass residual.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPyramid {
    pub levels: Vec<Level>,
    pub tag: ColorTag,
}

impl LaplacianPyramid {
    pub fn build(img: &ImageBuffer, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidArgument("a pyramid needs at least one level".into()));
        }
        if img.pixel_count() == 0 {
            return Err(Error::Empty("cannot build a pyramid of an empty image".into()));
        }
        let mut cur = Level {
            width: img.width,
            height: img.height,
            channels: (0..4).map(|c| img.channel(c)).collect(),
        };
        let mut out = Vec::with_capacity(levels);
        for _ in 1..levels {
            let (w, h) = (cur.width, cur.height);
            let next: Vec<Vec<f64>> = cur.channels.iter().map(|p| reduce(p, w, h)).collect();
            let band = cur
                .channels
                .iter()
                .zip(&next)
                .map(|(p, n)| {
                    let up = expand(n, w, h);
                    p.iter().zip(&up).map(|(a, b)| a - b).collect()
                })
                .collect();
            out.push(Level { width: w, height: h, channels: band });
            cur = Level { width: half(w), height: half(h), channels: next };
        }
        out.push(cur);
        Ok(LaplacianPyramid { levels: out, tag: img.tag })
    }

    pub fn lowest(&self) -> &Level {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn collapse(&self) -> ImageBuffer {
        let mut cur = self.lowest().channels.clone();
        for band in self.levels.iter().rev().skip(1) {
            cur = cur
                .iter()
                .zip(&band.channels)
                .map(|(c, b)| {
                    let up = expand(c, band.width, band.height);
                    up.iter().zip(b).map(|(u, v)| u + v).collect()
                })
                .collect();
        }
        let top = &self.levels[0];
        let planes: Vec<&[f64]> = cur.iter().map(Vec::as_slice).collect();
        ImageBuffer::from_planes(top.width, top.height, [planes[0], planes[1], planes[2], planes[3]], self.tag)
    }
}

/// Extends a plane to `nw x nh` by mirroring past the right and bottom edges.
pub(crate) fn pad_reflect(src: &[f64], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let sy = reflect(y as i64, h);
        for x in 0..nw {
            out.push(src[sy * w + reflect(x as i64, w)]);
        }
    }
    out
}

fn crop(src: &[f64], nw: usize, w: usize, h: usize) -> Vec<f64> {
    (0..h).flat_map(|y| src[y * nw..y * nw + w].iter().copied()).collect()
}

/// Replaces the coarsest level of `enhanced` by that of `reference`.
///
/// Both are padded by reflection to a multiple of `2^(levels-1)`. The result
/// equals collapsing the enhanced bands over the reference residual.
pub fn low_freq_swap(enhanced: &ImageBuffer, reference: &ImageBuffer) -> Result<ImageBuffer> {
    low_freq_swap_levels(enhanced, reference, DEFAULT_LEVELS)
}

pub fn low_freq_swap_levels(enhanced: &ImageBuffer, reference: &ImageBuffer, levels: usize) -> Result<ImageBuffer> {
    enhanced.ensure_same_size(reference)?;
    if levels == 0 {
        return Err(Error::InvalidArgument("a pyramid needs at least one level".into()));
    }
    if enhanced.pixel_count() == 0 {
        return Err(Error::Empty("cannot swap bands of an empty image".into()));
    }
    let reference = convert_image(reference, enhanced.tag);
    let (w, h) = enhanced.dims();
    let block = 1usize << (levels - 1);
    let (nw, nh) = (w.div_ceil(block) * block, h.div_ceil(block) * block);
    let mut out = enhanced.clone();
    for c in 0..4 {
        let e = pad_reflect(&enhanced.channel(c), w, h, nw, nh);
        let r = pad_reflect(&reference.channel(c), w, h, nw, nh);
        let mut sizes = vec![(nw, nh)];
        let (mut le, mut lr) = (e.clone(), r);
        for _ in 1..levels {
            let (cw, ch) = *sizes.last().unwrap();
            le = reduce(&le, cw, ch);
            lr = reduce(&lr, cw, ch);
            sizes.push((half(cw), half(ch)));
        }
        let mut delta: Vec<f64> = lr.iter().zip(&le).map(|(a, b)| a - b).collect();
        if delta.iter().all(|&d| d == 0.0) {
            continue;
        }
        for &(cw, ch) in sizes.iter().rev().skip(1) {
            delta = expand(&delta, cw, ch);
        }
        let merged: Vec<f64> = e.iter().zip(&delta).map(|(a, d)| a + d).collect();
        out.set_channel(c, &crop(&merged, nw, w, h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, ColorTag::LinearHDR);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        img
    }

    fn dense_reduce(n: usize) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; n]; half(n)];
        for (i, row) in reduce_rows(n).iter().enumerate() {
            for &(j, w) in row {
                m[i][j] += w;
            }
        }
        m
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(7, 2), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn expand_is_a_right_inverse_of_reduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 2, 3, 4, 5, 8, 13, 32, 67] {
            let d = dense_reduce(n);
            let ex = Expander::new(n);
            let y: Vec<f64> = (0..half(n)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut x = vec![0.0; n];
            ex.apply(&y, &mut x);
            for i in 0..half(n) {
                let dx: f64 = (0..n).map(|j| d[i][j] * x[j]).sum();
                assert!((dx - y[i]).abs() < 1e-12, "n={n}");
            }
            let mut ones = vec![0.0; n];
            ex.apply(&vec![1.0; half(n)], &mut ones);
            assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-12), "n={n}");
        }
    }

    #[test]
    fn round_trip_and_band_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 37, 22);
        let pyr = LaplacianPyramid::build(&img, 5).unwrap();
        let sizes: Vec<(usize, usize)> = pyr.levels.iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(sizes, vec![(37, 22), (19, 11), (10, 6), (5, 3), (3, 2)]);
        let back = pyr.collapse();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
        // Rebuilding the collapsed pyramid yields the same decomposition.
        let again = LaplacianPyramid::build(&back, 5).unwrap();
        for (l0, l1) in pyr.levels.iter().zip(&again.levels) {
            for (c0, c1) in l0.channels.iter().zip(&l1.channels) {
                for (a, b) in c0.iter().zip(c1) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_image_has_empty_bands() {
        let mut img = ImageBuffer::new(48, 32, ColorTag::LinearHDR);
        img.data.iter_mut().for_each(|v| *v = 0.625);
        let pyr = LaplacianPyramid::build(&img, 5).unwrap();
        for band in &pyr.levels[..4] {
            assert!(band.channels.iter().flatten().all(|v| v.abs() < 1e-12));
        }
        assert!(pyr.lowest().channels.iter().flatten().all(|v| (v - 0.625).abs() < 1e-12));
    }

    #[test]
    fn lowest_level_size_for_full_hd() {
        let img = ImageBuffer::new(1920, 1088, ColorTag::LinearHDR);
        let pyr = LaplacianPyramid::build(&img, 5).unwrap();
        assert_eq!((pyr.lowest().width, pyr.lowest().height), (120, 68));
    }

    #[test]
    fn swap_of_identical_images_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 40, 24);
        assert_eq!(low_freq_swap(&img, &img).unwrap(), img);
    }

    #[test]
    fn swap_band_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enhanced = random_image(&mut rng, 64, 48);
        let mut reference = random_image(&mut rng, 64, 48);
        reference.data.iter_mut().for_each(|v| *v *= 2.0);
        let out = low_freq_swap(&enhanced, &reference).unwrap();
        let po = LaplacianPyramid::build(&out, 5).unwrap();
        let pr = LaplacianPyramid::build(&reference, 5).unwrap();
        let pe = LaplacianPyramid::build(&enhanced, 5).unwrap();
        for (a, b) in po.lowest().channels.iter().flatten().zip(pr.lowest().channels.iter().flatten()) {
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }
        for k in 0..4 {
            for (a, b) in po.levels[k].channels.iter().flatten().zip(pe.levels[k].channels.iter().flatten()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn swap_keeps_full_resolution_detail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reference = random_image(&mut rng, 48, 48);
        let mut pyr = LaplacianPyramid::build(&reference, 5).unwrap();
        // Noise projected onto the finest band: zero reduction.
        for c in 0..4 {
            let noise: Vec<f64> = (0..48 * 48).map(|_| rng.random_range(-0.1..0.1)).collect();
            let low = expand(&reduce(&noise, 48, 48), 48, 48);
            for (i, v) in pyr.levels[0].channels[c].iter_mut().enumerate() {
                *v += noise[i] - low[i];
            }
        }
        let enhanced = pyr.collapse();
        let out = low_freq_swap(&enhanced, &reference).unwrap();
        for (a, b) in out.data.iter().zip(&enhanced.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn swap_pads_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = random_image(&mut rng, 30, 21);
        let r = random_image(&mut rng, 30, 21);
        let out = low_freq_swap(&e, &r).unwrap();
        assert_eq!(out.dims(), (30, 21));
        assert!(out.data.iter().all(|v| v.is_finite()));
        assert!(matches!(low_freq_swap(&e, &random_image(&mut rng, 30, 20)), Err(Error::SizeMismatch { .. })));
    }
}
