use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian4d::Degrees;
use crate::splatter::RasterSettings;

/// Domain in which SH colors are stored and optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Linear,
    #[default]
    UnboundedSrgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Order-0 mean rate, multiplied by the scene extent.
    pub mean: f64,
    /// Factor applied per additional polynomial order of the mean.
    pub mean_order_decay: f64,
    /// Mean rates decay exponentially to this fraction at the last iteration.
    pub mean_final_ratio: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub grid: f64,
    pub time_center: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mean: 1.6e-4,
            mean_order_decay: 0.1,
            mean_final_ratio: 0.01,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            grid: 1e-3,
            time_center: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Maximum primitive count.
    pub budget: usize,
    /// When set, the budget is drawn uniformly from this inclusive range.
    pub budget_range: Option<[usize; 2]>,
    pub ssim_weight: f64,
    pub lambda_e: f64,
    pub lambda_b: f64,
    /// Optimize per-camera black-level and exposure grids.
    pub photometric: bool,
    /// Keep black levels in [0, 1].
    pub clamp_black: bool,
    pub train_time_center: bool,
    pub color_space: ColorSpace,
    pub degrees: Degrees,
    pub sh_degree: usize,
    pub lr: LearningRates,
    /// Per-group gradient norm limit.
    pub grad_clip: f64,
    pub densify_interval: usize,
    pub densify_from: usize,
    /// Relocation stops after this fraction of the iterations.
    pub densify_until: f64,
    pub dead_opacity: f64,
    /// Grid-fitting steps per held-out camera before scoring it.
    pub eval_fit_steps: usize,
    pub eval_fit_lr: f64,
    /// Held-out PSNR is logged every this many iterations (0 disables).
    pub eval_interval: usize,
    pub log_interval: usize,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            seed: 0,
            budget: 2000,
            budget_range: None,
            ssim_weight: 0.2,
            lambda_e: 10.0,
            lambda_b: 0.05,
            photometric: true,
            clamp_black: false,
            train_time_center: false,
            color_space: ColorSpace::UnboundedSrgb,
            degrees: Degrees::default(),
            sh_degree: 1,
            lr: LearningRates::default(),
            grad_clip: 10.0,
            densify_interval: 100,
            densify_from: 500,
            densify_until: 0.8,
            dead_opacity: super::relocate::DEAD_OPACITY,
            eval_fit_steps: 200,
            eval_fit_lr: 1e-2,
            eval_interval: 1000,
            log_interval: 100,
            background: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        let reals = [
            ("ssim_weight", self.ssim_weight),
            ("lambda_e", self.lambda_e),
            ("lambda_b", self.lambda_b),
            ("grad_clip", self.grad_clip),
            ("densify_until", self.densify_until),
            ("dead_opacity", self.dead_opacity),
            ("eval_fit_lr", self.eval_fit_lr),
            ("lr.mean", lr.mean),
            ("lr.mean_order_decay", lr.mean_order_decay),
            ("lr.mean_final_ratio", lr.mean_final_ratio),
            ("lr.rotation", lr.rotation),
            ("lr.scale", lr.scale),
            ("lr.opacity", lr.opacity),
            ("lr.color", lr.color),
            ("lr.grid", lr.grid),
            ("lr.time_center", lr.time_center),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if self.ssim_weight > 1.0 {
            return Err(Error::Config("ssim_weight must not exceed 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if let Some([lo, hi]) = self.budget_range {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("invalid budget range [{lo}, {hi}]")));
            }
        }
        if self.sh_degree > 3 {
            return Err(Error::Config("sh_degree must be at most 3".into()));
        }
        if self.degrees.mu > 8 || self.degrees.q > 8 || self.degrees.s > 8 || self.degrees.o > 8 {
            return Err(Error::Config("polynomial degrees must be at most 8".into()));
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("background must be finite".into()));
        }
        Ok(())
    }

    /// The primitive budget for this run; a configured range is sampled
    /// deterministically from the seed.
    pub fn resolve_budget(&self) -> usize {
        use rand::{Rng, SeedableRng};
        match self.budget_range {
            Some([lo, hi]) => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ 0x6275_6467_6574);
                rng.random_range(lo..=hi)
            }
            None => self.budget,
        }
    }

    pub fn raster_settings(&self) -> RasterSettings {
        RasterSettings {
            linearize_colors: self.color_space == ColorSpace::UnboundedSrgb,
            ..RasterSettings::default()
        }
    }
}
