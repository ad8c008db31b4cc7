//! Synthetic dataset generation: perturbed images and encoder traces.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rscope_core::attention::{attention_rollout_with, PatchGrid, RolloutResult};
use rscope_core::encoder::{mask_select, ToyEncoder};
use rscope_core::image::{synthetic_image, Image};
use rscope_core::perturb::{blur, occlude, quality};
use rscope_core::seed::derive_seed;
use rscope_core::store::{TensorData, TensorRecord, FILE_EXTENSION};

use crate::config::{Level, RunConfig};
use crate::error::{PipelineError, Result};
use crate::manifest::{TraceEntry, TraceManifest};
use crate::tables::{fmt_f, write_csv};

pub const QUALITY_CSV: &str = "perturb_quality.csv";

#[derive(Debug, Clone)]
pub struct SampleImage {
    pub class: String,
    pub image: String,
    pub pixels: Image,
}

pub fn class_id(c: usize) -> String {
    format!("class{c:02}")
}

/// The synthetic image set described by the configuration, class-major.
pub fn dataset(cfg: &RunConfig) -> Result<Vec<SampleImage>> {
    let enc = cfg.encoder_config()?;
    let data_seed = derive_seed(cfg.seed, 0xDA7A);
    Ok((0..cfg.classes)
        .flat_map(|c| (0..cfg.images_per_class).map(move |i| (c, i)))
        .map(|(c, i)| SampleImage {
            class: class_id(c),
            image: format!("{}_img{i:03}", class_id(c)),
            pixels: synthetic_image(c, i, enc.image_height, enc.image_width, data_seed),
        })
        .collect())
}

/// Rollout over a fully visible forward pass, used to rank patches for
/// occlusion.
pub fn full_image_rollout(encoder: &ToyEncoder, image: &Image, residual_weight: f64) -> Result<RolloutResult> {
    let all: Vec<usize> = (0..encoder.config().num_patches()).collect();
    let trace = encoder.forward_visible(image, &all)?;
    let layers: Vec<_> = trace
        .layers
        .iter()
        .map(|l| l.heads.iter().map(|h| h.attention.clone()).collect())
        .collect();
    Ok(attention_rollout_with(&layers, trace.has_cls, &trace.visible_indices, residual_weight)?)
}

/// Applies `level` to `image`; occlusion also returns the removed-patch mask.
pub fn apply_level(
    encoder: &ToyEncoder,
    image: &Image,
    level: &Level,
    rollout: Option<&RolloutResult>,
) -> Result<(Image, Option<Vec<bool>>)> {
    match level {
        Level::Clean => Ok((image.clone(), None)),
        Level::Blur(p) => Ok((blur(image, p)?, None)),
        Level::Occlusion(spec) => {
            let cfg = encoder.config();
            let grid = PatchGrid::for_image(cfg.image_height, cfg.image_width, cfg.patch_size)?;
            let ranking = rollout.expect("occlusion levels need a rollout");
            let (img, mask) = occlude(image, &grid, spec, ranking)?;
            Ok((img, Some(mask)))
        }
    }
}

/// Runs `f` on a pool with the configured worker count.
pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Validation(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| PipelineError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub manifest: PathBuf,
    pub archives: Vec<PathBuf>,
}

/// Writes one trace archive per (image, mask seed, level) plus the trace
/// manifest.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    cfg.validate()?;
    let enc_cfg = cfg.encoder_config()?;
    let levels = cfg.levels()?;
    let images = dataset(cfg)?;
    let dir = cfg.trace_dir();
    create_dir(&dir)?;

    let produced = with_pool(cfg.workers, || {
        let encoder = ToyEncoder::new(enc_cfg.clone())?;
        let needs_rollout = levels.iter().any(|l| matches!(l, Level::Occlusion(_)));
        images
            .par_iter()
            .enumerate()
            .map(|(idx, sample)| -> Result<Vec<(TraceEntry, Vec<u8>)>> {
                let rollout = needs_rollout
                    .then(|| full_image_rollout(&encoder, &sample.pixels, cfg.residual_weight))
                    .transpose()?;
                let mut out = Vec::new();
                for level in &levels {
                    let (pixels, _) = apply_level(&encoder, &sample.pixels, level, rollout.as_ref())?;
                    for m in 0..cfg.mask_seeds_per_image {
                        let mask_seed = derive_seed(cfg.seed, ((idx as u64) << 16) | m as u64);
                        let visible = mask_select(enc_cfg.num_patches(), enc_cfg.masking_ratio, mask_seed);
                        let trace = encoder.forward_visible(&pixels, &visible)?;
                        let mut archive = trace.to_archive();
                        archive.set_meta("class", &sample.class);
                        archive.set_meta("image", &sample.image);
                        archive.set_meta("level", level.label());
                        archive.set_meta("mask_index", m.to_string());
                        archive.set_meta("mask_seed", mask_seed.to_string());
                        let entry = TraceEntry {
                            class: sample.class.clone(),
                            image: sample.image.clone(),
                            mask: m,
                            level: level.label(),
                            path: format!("{}__m{m}__{}.{FILE_EXTENSION}", sample.image, level.label()),
                        };
                        out.push((entry, archive.to_bytes().map_err(rscope_core::Error::from)?));
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut manifest = TraceManifest::default();
    let mut archives = Vec::new();
    for (entry, bytes) in produced.into_iter().flatten() {
        let path = dir.join(&entry.path);
        fs::write(&path, bytes).map_err(|e| PipelineError::io(&path, e))?;
        archives.push(path);
        manifest.traces.push(entry);
    }
    let manifest = manifest.write(&dir)?;
    Ok(SimulateSummary { manifest, archives })
}

/// Perturbed images and their PSNR/SSIM against the clean original.
pub fn cmd_perturb(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let enc_cfg = cfg.encoder_config()?;
    let levels: Vec<Level> = cfg.levels()?.into_iter().filter(|l| !matches!(l, Level::Clean)).collect();
    let images = dataset(cfg)?;
    let img_dir = cfg.out.join("images");
    create_dir(&img_dir)?;

    let results = with_pool(cfg.workers, || {
        let encoder = ToyEncoder::new(enc_cfg.clone())?;
        let needs_rollout = levels.iter().any(|l| matches!(l, Level::Occlusion(_)));
        images
            .par_iter()
            .map(|sample| -> Result<Vec<(String, Vec<String>, Vec<u8>)>> {
                let rollout = needs_rollout
                    .then(|| full_image_rollout(&encoder, &sample.pixels, cfg.residual_weight))
                    .transpose()?;
                let mut rows = Vec::new();
                for level in &levels {
                    let (pixels, mask) = apply_level(&encoder, &sample.pixels, level, rollout.as_ref())?;
                    let q = quality(&sample.pixels, &pixels)?;
                    let mut archive = rscope_core::store::TensorArchive::new();
                    archive.set_meta("image", &sample.image);
                    archive.set_meta("class", &sample.class);
                    archive.set_meta("level", level.label());
                    archive.push(pixels.to_record("image")).map_err(rscope_core::Error::from)?;
                    if let Some(mask) = mask {
                        let bits = mask.iter().map(|&m| u8::from(m)).collect::<Vec<_>>();
                        let rec = TensorRecord::new("occlusion_mask", vec![bits.len() as u64], TensorData::U8(bits))
                            .map_err(rscope_core::Error::from)?;
                        archive.push(rec).map_err(rscope_core::Error::from)?;
                    }
                    let name = format!("{}__{}.{FILE_EXTENSION}", sample.image, level.label());
                    rows.push((
                        name,
                        vec![sample.image.clone(), level.label(), fmt_f(q.psnr), fmt_f(q.ssim)],
                        archive.to_bytes().map_err(rscope_core::Error::from)?,
                    ));
                }
                Ok(rows)
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut rows = Vec::new();
    let mut written = Vec::new();
    for (name, row, bytes) in results.into_iter().flatten() {
        let path = img_dir.join(name);
        fs::write(&path, bytes).map_err(|e| PipelineError::io(&path, e))?;
        written.push(path);
        rows.push(row);
    }
    written.push(write_csv(&cfg.out.join(QUALITY_CSV), &["image_id", "level", "psnr_db", "ssim"], &rows)?);
    Ok(written)
}
