//! Run configuration: a JSON file whose keys can all be overridden from the
//! command line. The effective configuration is echoed into the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rscope_core::encoder::EncoderConfig;
use rscope_core::indicators::{MagnitudeMode, RetentionParams};
use rscope_core::perturb::{BlurPreset, OcclusionFill, OcclusionSpec};
use rscope_core::seed::derive_seed;
use serde::{Deserialize, Serialize};

use crate::error::{validation, PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    VitBase,
}

/// Encoder geometry; unset fields fall back to the preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub preset: Preset,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub masking_ratio: Option<f64>,
    pub include_cls: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analyses {
    pub subspace: bool,
    pub attention: bool,
    pub rollout: bool,
    pub indicators: bool,
}

impl Default for Analyses {
    fn default() -> Self {
        Analyses { subspace: true, attention: true, rollout: true, indicators: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Directory holding `manifest.json` and trace archives; defaults to
    /// `<out>/traces`.
    pub traces: Option<PathBuf>,
    /// Worker threads; 0 lets the pool pick.
    pub workers: usize,
    pub encoder: EncoderSection,
    pub classes: usize,
    pub images_per_class: usize,
    pub mask_seeds_per_image: usize,
    pub blur_levels: Vec<String>,
    pub occlusion_fracs: Vec<f64>,
    pub occlusion_fill: String,
    pub analyses: Analyses,
    pub k: usize,
    pub top_k: usize,
    pub tau: f64,
    pub magnitude: String,
    pub residual_weight: f64,
    pub plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("rscope-out"),
            traces: None,
            workers: 0,
            encoder: EncoderSection::default(),
            classes: 3,
            images_per_class: 2,
            mask_seeds_per_image: 1,
            blur_levels: Vec::new(),
            occlusion_fracs: Vec::new(),
            occlusion_fill: "zero".into(),
            analyses: Analyses::default(),
            k: rscope_core::subspace::DEFAULT_K,
            top_k: rscope_core::indicators::DEFAULT_TOP_K,
            tau: rscope_core::indicators::DEFAULT_TAU,
            magnitude: "abs".into(),
            residual_weight: rscope_core::attention::DEFAULT_RESIDUAL_WEIGHT,
            plots: false,
        }
    }
}

/// A perturbation applied before the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Level {
    Clean,
    Blur(BlurPreset),
    Occlusion(OcclusionSpec),
}

impl Level {
    /// Stable label used in file names and CSV rows.
    pub fn label(&self) -> String {
        match self {
            Level::Clean => "clean".into(),
            Level::Blur(p) => format!("blur-{}", p.level),
            Level::Occlusion(o) => format!("occ-{:02}", (o.fraction * 100.0).round() as u32),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| validation(format!("config {}: {e}", path.display())))
    }

    pub fn trace_dir(&self) -> PathBuf {
        self.traces.clone().unwrap_or_else(|| self.out.join("traces"))
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let e = &self.encoder;
        let mut cfg = match e.preset {
            Preset::Desk => EncoderConfig::desk(),
            Preset::VitBase => EncoderConfig::vit_base(),
        };
        if let Some(s) = e.image_size {
            cfg.image_height = s;
            cfg.image_width = s;
        }
        cfg.patch_size = e.patch_size.unwrap_or(cfg.patch_size);
        cfg.embed_dim = e.embed_dim.unwrap_or(cfg.embed_dim);
        cfg.num_layers = e.num_layers.unwrap_or(cfg.num_layers);
        cfg.num_heads = e.num_heads.unwrap_or(cfg.num_heads);
        cfg.masking_ratio = e.masking_ratio.unwrap_or(cfg.masking_ratio);
        cfg.include_cls = e.include_cls.unwrap_or(cfg.include_cls);
        cfg.seed = derive_seed(self.seed, 0xE4C0);
        cfg.validate().map_err(|err| validation(err.to_string()))?;
        Ok(cfg)
    }

    pub fn retention_params(&self) -> Result<RetentionParams> {
        Ok(RetentionParams {
            top_k: self.top_k,
            tau: self.tau,
            mode: self.magnitude.parse::<MagnitudeMode>().map_err(|e| validation(e.to_string()))?,
        })
    }

    /// Clean first, then blur levels in preset order, then occlusion levels
    /// ascending.
    pub fn levels(&self) -> Result<Vec<Level>> {
        let fill: OcclusionFill = self.occlusion_fill.parse().map_err(|e: rscope_core::Error| validation(e.to_string()))?;
        let mut blurs = self
            .blur_levels
            .iter()
            .map(|l| l.parse::<BlurPreset>().map_err(|e| validation(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        blurs.sort_by_key(|p| rscope_core::perturb::BLUR_PRESETS.iter().position(|q| q == p));
        blurs.dedup();
        let mut fracs = self.occlusion_fracs.clone();
        if let Some(f) = fracs.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(validation(format!("occlusion fraction {f} outside [0, 1]")));
        }
        fracs.sort_by(f64::total_cmp);
        fracs.dedup();

        let mut levels = vec![Level::Clean];
        levels.extend(blurs.into_iter().map(Level::Blur));
        levels.extend(fracs.into_iter().map(|fraction| Level::Occlusion(OcclusionSpec { fraction, fill })));
        Ok(levels)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config()?;
        self.retention_params()?;
        self.levels()?;
        if self.classes == 0 || self.images_per_class == 0 || self.mask_seeds_per_image == 0 {
            return Err(validation("classes, images_per_class and mask_seeds_per_image must be positive"));
        }
        if self.k == 0 || self.top_k == 0 {
            return Err(validation("k and top_k must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(validation(format!("tau {} outside (0, 1]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.residual_weight) {
            return Err(validation(format!("residual weight {} outside [0, 1]", self.residual_weight)));
        }
        Ok(())
    }
}
