//! Pipeline configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assemble::QualityParams;
use crate::error::{Error, Result};
use crate::leafmodel::AugmentConfig;
use crate::measure::MeasureConfig;
use crate::refine::RefineConfig;
use crate::skelgraph::TipConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Greedy assembly runs. Desk-scale default; large searches use tens of
    /// thousands.
    pub runs: usize,
    /// Grey level above which a mask pixel is foreground.
    pub mask_threshold: u8,
    /// Largest distance from the pot centre at which a detected tip is taken
    /// as the plant base, mm.
    pub base_max_offset_mm: f64,
    pub candidates_per_tip: usize,
    /// Refined candidates of one tip closer than this (mean distance) are
    /// treated as the same leaf.
    pub candidate_min_distance_mm: f64,
    pub tips: TipConfig,
    pub augment: AugmentConfig,
    pub refine: RefineConfig,
    pub quality: QualityParams,
    pub measure: MeasureConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 1000,
            mask_threshold: 127,
            base_max_offset_mm: 60.0,
            candidates_per_tip: 5,
            candidate_min_distance_mm: 10.0,
            tips: TipConfig::default(),
            augment: AugmentConfig::default(),
            refine: RefineConfig::default(),
            quality: QualityParams::default(),
            measure: MeasureConfig::default(),
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what.to_string()))
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.refine;
        let q = &self.quality;
        let a = &self.augment;
        check(self.runs >= 1, "runs must be at least 1")?;
        check(self.candidates_per_tip >= 1, "candidates_per_tip must be at least 1")?;
        check(self.candidate_min_distance_mm >= 0.0, "candidate_min_distance_mm must be non-negative")?;
        check(self.base_max_offset_mm >= 0.0, "base_max_offset_mm must be non-negative")?;
        check(r.alpha >= 0.0, "refine.alpha must be non-negative")?;
        check(r.sample_spacing_mm > 0.0, "refine.sample_spacing_mm must be positive")?;
        check(r.top_k >= 1, "refine.top_k must be at least 1")?;
        check(r.jacobian_step_mm > 0.0, "refine.jacobian_step_mm must be positive")?;
        check(r.lm_relative_tolerance >= 0.0, "refine.lm_relative_tolerance must be non-negative")?;
        check(q.tau_px > 0.0, "quality.tau_px must be positive")?;
        check(q.beta >= 0.0 && q.gamma >= 0.0, "quality.beta and quality.gamma must be non-negative")?;
        check(q.stroke_width_px > 0.0, "quality.stroke_width_px must be positive")?;
        check(q.raster_step_mm > 0.0, "quality.raster_step_mm must be positive")?;
        check(a.min_scale > 0.0 && a.min_scale <= a.max_scale, "augment range must satisfy 0 < min <= max")?;
        check(self.measure.divergence_mm > 0.0, "measure.divergence_mm must be positive")?;
        check(self.measure.sample_spacing_mm > 0.0, "measure.sample_spacing_mm must be positive")?;
        check(self.tips.local_radius_px > 0.0, "tips.local_radius_px must be positive")?;
        Ok(())
    }
}
