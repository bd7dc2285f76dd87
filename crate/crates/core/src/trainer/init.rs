//! Primitive initialization from per-frame dense point clouds.

use std::collections::HashMap;

use nalgebra::{Vector3, Vector4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colorspace::srgb_forward;
use crate::error::{Error, Result};
use crate::gaussian4d::{sh_coeff_count, Degrees, PolyGaussian};
use crate::io::ply::PointCloud;
use crate::sh::SH_C0;

use super::ColorSpace;

/// A point cloud observed at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePoints {
    pub frame: i64,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub degrees: Degrees,
    pub sh_degree: usize,
    pub color_space: ColorSpace,
    pub seed: u64,
}

const INIT_OPACITY: f64 = 0.1;
/// Envelope exponent reached at the segment ends.
const INIT_ENVELOPE_DECAY: f64 = 1e-4;
const MIN_SCALE: f64 = 1e-7;

/// Picks up to `budget` points, starting at the frame closest to the
/// segment center and moving outwards.
fn select_points(clouds: &[FramePoints], center: f64, budget: usize, seed: u64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut order: Vec<&FramePoints> = clouds.iter().collect();
    order.sort_by(|a, b| {
        let da = (a.frame as f64 - center).abs();
        let db = (b.frame as f64 - center).abs();
        da.total_cmp(&db).then(a.frame.cmp(&b.frame))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = Vec::new();
    let mut col = Vec::new();
    for fp in order {
        let room = budget - pos.len();
        if room == 0 {
            break;
        }
        let n = fp.cloud.len();
        let mut picked: Vec<usize> = if n <= room {
            (0..n).collect()
        } else {
            sample(&mut rng, n, room).into_vec()
        };
        picked.sort_unstable();
        for i in picked {
            pos.push(fp.cloud.positions[i]);
            col.push(fp.cloud.colors[i]);
        }
    }
    (pos, col)
}

/// Distance from each point to its `k`-th nearest other point, using a
/// uniform hash grid. With fewer than `k + 1` points the farthest other
/// point is used instead.
pub fn kth_neighbor_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    if n < 2 {
        return vec![f64::NAN; n];
    }
    let k = k.min(n - 1);
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    // Size cells for a few points each over the non-degenerate axes.
    let spans: Vec<f64> = ext.iter().copied().filter(|&e| e > 1e-9 * ext.max()).collect();
    let volume: f64 = spans.iter().product();
    let cell = if spans.is_empty() {
        1.0
    } else {
        (volume * 4.0 / n as f64).powf(1.0 / spans.len() as f64).max(ext.max() / 1e4)
    };
    let key = |p: &Vector3<f64>| {
        let c = (p - lo) / cell;
        (c.x.floor() as i64, c.y.floor() as i64, c.z.floor() as i64)
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let max_ring = (ext.max() / cell).ceil() as i64 + 1;

    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let p = points[i];
            let (cx, cy, cz) = key(&p);
            // Sorted k smallest squared distances seen so far.
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for r in 0..=max_ring {
                for dx in -r..=r {
                    for dy in -r..=r {
                        for dz in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let Some(list) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                                continue;
                            };
                            for &j in list {
                                if j == i {
                                    continue;
                                }
                                let d = (points[j] - p).norm_squared();
                                if best.len() < k || d < best[k - 1] {
                                    let at = best.partition_point(|&b| b <= d);
                                    best.insert(at, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // Anything beyond ring r is at least r cells away.
                let reach = r as f64 * cell;
                if best.len() == k && best[k - 1] <= reach * reach {
                    break;
                }
            }
            best[k - 1].sqrt()
        })
        .collect()
}

/// Builds at most `budget` primitives for a segment spanning `time_range`
/// frames. Each starts static, isotropic and faint, centered in time.
pub fn init_from_points(
    clouds: &[FramePoints],
    time_range: (f64, f64),
    budget: usize,
    opts: &InitOptions,
) -> Result<Vec<PolyGaussian>> {
    if clouds.iter().all(|c| c.cloud.is_empty()) {
        return Err(Error::Empty("no initialization points".into()));
    }
    for fp in clouds {
        if fp.cloud.positions.len() != fp.cloud.colors.len() {
            return Err(Error::InvalidArgument(format!("frame {}: point and color counts differ", fp.frame)));
        }
    }
    let center = 0.5 * (time_range.0 + time_range.1);
    let (pos, col) = select_points(clouds, center, budget, opts.seed);
    let dist = kth_neighbor_distance(&pos, 3);
    let half = (0.5 * (time_range.1 - time_range.0)).max(1.0);
    let d = opts.degrees;
    let lambdas: Vec<f64> = (1..=d.o).map(|i| INIT_ENVELOPE_DECAY / half.powi(2 * i as i32)).collect();

    Ok(pos
        .iter()
        .zip(&col)
        .zip(&dist)
        .map(|((p, c), &r)| {
            let r = if r.is_finite() { r.max(MIN_SCALE) } else { 0.01 };
            let mut mu = vec![Vector3::zeros(); d.mu + 1];
            mu[0] = *p;
            let mut q = vec![Vector4::zeros(); d.q + 1];
            q[0] = Vector4::new(1.0, 0.0, 0.0, 0.0);
            let mut log_scale = vec![Vector3::zeros(); d.s + 1];
            log_scale[0] = Vector3::repeat(r.ln());
            let mut sh = vec![Vector3::zeros(); sh_coeff_count(opts.sh_degree)];
            sh[0] = match opts.color_space {
                ColorSpace::UnboundedSrgb => c.map(srgb_forward),
                ColorSpace::Linear => *c,
            } / SH_C0;
            PolyGaussian {
                mu,
                q,
                log_scale,
                o0: INIT_OPACITY,
                lambdas: lambdas.clone(),
                t0: center,
                sh,
            }
        })
        .collect())
}
