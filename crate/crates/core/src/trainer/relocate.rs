//! Budget-conserving relocation of faded primitives.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::gaussian4d::PolyGaussian;

/// Primitives whose peak opacity over the segment falls below this are dead.
pub const DEAD_OPACITY: f64 = 0.005;

/// Position noise of a relocated copy, in units of the donor's mean scale.
const JITTER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Relocation {
    pub dead: usize,
    pub donor: usize,
}

/// Draws `count` indices with probability proportional to `weights`.
/// Returns nothing if every weight is zero.
pub fn sample_donors(weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    match WeightedIndex::new(weights) {
        Ok(dist) => (0..count).map(|_| dist.sample(rng)).collect(),
        Err(_) => Vec::new(),
    }
}

/// Moves every dead primitive onto a donor drawn in proportion to peak
/// opacity. A donor chosen `k` times and its `k` copies all get opacity
/// `1 - (1 - o)^(1 / (k + 1))`, so their stack composites like the donor
/// alone. Copies take the donor's shape and colors plus a small position
/// jitter. The primitive count never changes.
pub fn relocate_dead(
    gaussians: &mut [PolyGaussian],
    time_range: (f64, f64),
    threshold: f64,
    rng: &mut impl Rng,
) -> Vec<Relocation> {
    let peaks: Vec<f64> = gaussians
        .iter()
        .map(|g| g.peak_opacity(time_range.0, time_range.1))
        .collect();
    let dead: Vec<usize> = (0..gaussians.len()).filter(|&i| !(peaks[i] >= threshold)).collect();
    if dead.is_empty() {
        return Vec::new();
    }
    let weights: Vec<f64> = peaks
        .iter()
        .map(|&p| if p >= threshold { p } else { 0.0 })
        .collect();
    let donors = sample_donors(&weights, dead.len(), rng);
    if donors.is_empty() {
        return Vec::new();
    }

    let mut copies = vec![0usize; gaussians.len()];
    for &d in &donors {
        copies[d] += 1;
    }
    for (i, &k) in copies.iter().enumerate() {
        if k > 0 {
            let o = gaussians[i].o0;
            gaussians[i].o0 = 1.0 - (1.0 - o).powf(1.0 / (k + 1) as f64);
        }
    }
    let moves: Vec<Relocation> = dead
        .iter()
        .zip(&donors)
        .map(|(&dead, &donor)| Relocation { dead, donor })
        .collect();
    for m in &moves {
        let mut g = gaussians[m.donor].clone();
        let spread = JITTER * g.log_scale[0].map(f64::exp).mean();
        for k in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            g.mu[0][k] += spread * n;
        }
        gaussians[m.dead] = g;
    }
    moves
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian4d::Degrees;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prim(x: f64, o: f64) -> PolyGaussian {
        PolyGaussian::isotropic(Degrees::default(), 0, Vector3::new(x, 0.0, 0.0), 0.1, o)
    }

    #[test]
    fn nothing_dead_is_identity() {
        let mut gs = vec![prim(0.0, 0.5), prim(1.0, 0.01)];
        let before = gs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(relocate_dead(&mut gs, (0.0, 1.0), DEAD_OPACITY, &mut rng).is_empty());
        assert_eq!(gs, before);
    }

    #[test]
    fn dead_primitives_move_onto_donors() {
        let mut gs = vec![prim(0.0, 0.6), prim(1.0, 0.001), prim(2.0, 0.0001), prim(3.0, 0.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let moves = relocate_dead(&mut gs, (0.0, 1.0), DEAD_OPACITY, &mut rng);
        assert_eq!(gs.len(), 4);
        assert_eq!(moves.len(), 3);
        assert!(moves.iter().all(|m| m.donor == 0));
        // Four copies of one donor: 1 - (1 - o)^(1/4) each.
        let expect = 1.0 - 0.4f64.powf(0.25);
        for g in &gs {
            assert!((g.o0 - expect).abs() < 1e-15);
            assert_eq!(g.log_scale, gs[0].log_scale);
            assert!((g.mu[0] - gs[0].mu[0]).norm() < 0.5);
        }
        let stacked = 1.0 - gs.iter().map(|g| 1.0 - g.o0).product::<f64>();
        assert!((stacked - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_split_uses_square_root_rule() {
        let mut gs = vec![prim(0.0, 0.75), prim(1.0, 0.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        relocate_dead(&mut gs, (0.0, 1.0), DEAD_OPACITY, &mut rng);
        assert!((gs[0].o0 - 0.5).abs() < 1e-15);
        assert!((gs[1].o0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_dead_keeps_everything() {
        let mut gs = vec![prim(0.0, 0.0), prim(1.0, 0.001)];
        let before = gs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(relocate_dead(&mut gs, (0.0, 1.0), DEAD_OPACITY, &mut rng).is_empty());
        assert_eq!(gs, before);
    }

    #[test]
    fn donor_frequencies_follow_weights() {
        let weights = [0.05, 0.2, 0.0, 0.5, 0.25];
        let total: f64 = weights.iter().sum();
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = sample_donors(&weights, n, &mut rng);
        for (i, &w) in weights.iter().enumerate() {
            let p = w / total;
            let count = draws.iter().filter(|&&d| d == i).count() as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((count - n as f64 * p).abs() <= 3.0 * sigma.max(1e-9), "index {i}: {count}");
        }
    }
}
