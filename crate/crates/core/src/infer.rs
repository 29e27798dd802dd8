//! Restoration paths over a trained bundle.
//!
//! The student restores in one denoiser evaluation: `z_H = z_L - eps(z_L)`
//! at the fixed student timestep with the null condition. Two adapter sets
//! give two noise predictions, `eps_pix` (pixel adapter only) and `eps_pisa`
//! (pixel + semantic). The adjustable path blends them:
//!
//! ```text
//! eps = lambda_pix * eps_pix + lambda_sem * (eps_pisa - eps_pix)
//! ```
//!
//! which is linear in the two scales, so caching both predictions makes any
//! later blend free of denoiser evaluations.

use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use crate::backbone::{DenoiserRole, DenoiserWeights};
use crate::codec::CodecWeights;
use crate::error::{Error, Result};
use crate::lora::{merge, AdapterRole, LoraAdapter};
use crate::perception::{Condition, FeatureNetWeights};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{ImageTensor, LatentTensor};

/// Slider range exposed by user interfaces.
pub const UI_SCALE_RANGE: (f64, f64) = (0.0, 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub lambda_pix: f64,
    pub lambda_sem: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

impl GuidanceScales {
    pub const fn new(lambda_pix: f64, lambda_sem: f64) -> Self {
        Self {
            lambda_pix,
            lambda_sem,
        }
    }

    /// Rejects non-finite scales. Values outside the UI range are accepted
    /// with a warning.
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_pix.is_finite() || !self.lambda_sem.is_finite() {
            return Err(Error::InvalidRange(format!(
                "guidance scales must be finite, got ({}, {})",
                self.lambda_pix, self.lambda_sem
            )));
        }
        let (lo, hi) = UI_SCALE_RANGE;
        for v in [self.lambda_pix, self.lambda_sem] {
            if !(lo..=hi).contains(&v) {
                log::warn!("guidance scale {v} outside [{lo}, {hi}]; expect artifacts");
            }
        }
        Ok(())
    }
}

/// Cached noise predictions for one LQ input.
#[derive(Clone, Debug)]
pub struct EpsCache {
    pub image_id: String,
    pub z_l: LatentTensor,
    pub eps_pix: LatentTensor,
    pub eps_pisa: LatentTensor,
    pub created: SystemTime,
}

/// `(lambda_pix - lambda_sem) * eps_pix + lambda_sem * eps_pisa`, the same
/// blend regrouped so that `(1, 1)` yields `eps_pisa` and `(1, 0)` yields
/// `eps_pix` without rounding.
pub fn blend_eps(
    eps_pix: &LatentTensor,
    eps_pisa: &LatentTensor,
    scales: GuidanceScales,
) -> Result<LatentTensor> {
    scales.validate()?;
    let a = eps_pix.scale(scales.lambda_pix - scales.lambda_sem)?;
    let b = eps_pisa.scale(scales.lambda_sem)?;
    a.add(&b)
}

/// Everything needed to restore images.
#[derive(Clone, Debug)]
pub struct Bundle {
    schedule: DiffusionSchedule,
    codec: CodecWeights,
    student_base: DenoiserWeights,
    pixel: LoraAdapter,
    semantic: LoraAdapter,
    featnet: Option<FeatureNetWeights>,
    student_timestep: usize,
    merged_pisa: DenoiserWeights,
}

impl Bundle {
    pub fn new(
        schedule: DiffusionSchedule,
        codec: CodecWeights,
        student_base: DenoiserWeights,
        pixel: LoraAdapter,
        semantic: LoraAdapter,
        featnet: Option<FeatureNetWeights>,
        student_timestep: usize,
    ) -> Result<Self> {
        student_base.require_role(DenoiserRole::StudentBase)?;
        for (a, role) in [(&pixel, AdapterRole::Pixel), (&semantic, AdapterRole::Semantic)] {
            if a.role != role {
                return Err(Error::Role {
                    expected: role.as_str().into(),
                    found: a.role.as_str().into(),
                });
            }
        }
        schedule.alpha_bar_at(student_timestep)?;
        if student_timestep == 0 {
            return Err(Error::StepOutOfRange {
                t: 0,
                max: schedule.steps(),
            });
        }
        let merged_pisa = merge(&student_base, &[&pixel, &semantic])?;
        Ok(Self {
            schedule,
            codec,
            student_base,
            pixel,
            semantic,
            featnet,
            student_timestep,
            merged_pisa,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn codec(&self) -> &CodecWeights {
        &self.codec
    }

    pub fn student_base(&self) -> &DenoiserWeights {
        &self.student_base
    }

    pub fn pixel(&self) -> &LoraAdapter {
        &self.pixel
    }

    pub fn semantic(&self) -> &LoraAdapter {
        &self.semantic
    }

    pub fn student_timestep(&self) -> usize {
        self.student_timestep
    }

    pub fn featnet(&self) -> Result<&FeatureNetWeights> {
        self.featnet
            .as_ref()
            .ok_or_else(|| Error::Missing("feature network".into()))
    }

    /// Total denoiser evaluations performed through this bundle (adapter
    /// path and merged weights).
    pub fn denoiser_evaluations(&self) -> u64 {
        self.student_base.evaluations() + self.merged_pisa.evaluations()
    }

    fn student_eps(&self, z_l: &LatentTensor, adapters: &[&LoraAdapter]) -> Result<LatentTensor> {
        self.student_base
            .eps_predict(z_l, &[self.student_timestep], &[Condition::Null], adapters)
    }

    /// Pre-decode latent of the default path (merged pixel + semantic
    /// weights, one evaluation).
    pub fn latent_default(&self, x_l: &ImageTensor) -> Result<LatentTensor> {
        let z_l = self.codec.encode(x_l)?;
        let eps = self.merged_pisa.eps_predict(&z_l, &[self.student_timestep], &[Condition::Null], &[])?;
        z_l.sub(&eps)
    }

    pub fn restore_default(&self, x_l: &ImageTensor) -> Result<ImageTensor> {
        self.codec.decode(&self.latent_default(x_l)?)
    }

    /// Both noise predictions for `x_l` (two evaluations).
    pub fn build_cache(&self, image_id: &str, x_l: &ImageTensor) -> Result<EpsCache> {
        let z_l = self.codec.encode(x_l)?;
        let eps_pix = self.student_eps(&z_l, &[&self.pixel])?;
        let eps_pisa = self.student_eps(&z_l, &[&self.pixel, &self.semantic])?;
        Ok(EpsCache {
            image_id: image_id.to_string(),
            z_l,
            eps_pix,
            eps_pisa,
            created: SystemTime::now(),
        })
    }

    pub fn latent_from_cache(&self, cache: &EpsCache, scales: GuidanceScales) -> Result<LatentTensor> {
        let eps = blend_eps(&cache.eps_pix, &cache.eps_pisa, scales)?;
        cache.z_l.sub(&eps)
    }

    pub fn blend_from_cache(&self, cache: &EpsCache, scales: GuidanceScales) -> Result<ImageTensor> {
        self.codec.decode(&self.latent_from_cache(cache, scales)?)
    }

    pub fn latent_adjustable(&self, x_l: &ImageTensor, scales: GuidanceScales) -> Result<LatentTensor> {
        scales.validate()?;
        let cache = self.build_cache("", x_l)?;
        self.latent_from_cache(&cache, scales)
    }

    /// Two-evaluation restoration at arbitrary scales.
    pub fn restore_adjustable(&self, x_l: &ImageTensor, scales: GuidanceScales) -> Result<ImageTensor> {
        self.codec.decode(&self.latent_adjustable(x_l, scales)?)
    }
}
