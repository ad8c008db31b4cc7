//! Analyses over a loaded trace set and the CSV reports they emit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rscope_core::attention::{aggregate_attention_distances, attention_rollout_with, trace_attention_distances};
use rscope_core::indicators::{class_retention, cosine_alignment, mean_drop, FeatureRetention};
use rscope_core::store::{TensorArchive, TensorRecord, FILE_EXTENSION};
use rscope_core::subspace::{assemble_class_matrix, class_subspace, layer_angle_distribution, ClassSubspace};

use crate::config::RunConfig;
use crate::error::{validation, PipelineError, Result};
use crate::manifest::{sha256_hex, FileDigest, LoadedTrace, RunManifest, TraceSet, TRACE_MANIFEST};
use crate::plots::render_plots;
use crate::simulate::with_pool;
use crate::tables::{fmt_f, write_csv};

pub const ANGLES_CSV: &str = "subspace_angles.csv";
pub const ANGLE_SUMMARY_CSV: &str = "subspace_summary.csv";
pub const SINGULAR_CSV: &str = "singular_values.csv";
pub const DISTANCE_CSV: &str = "attention_distance.csv";
pub const HEATMAP_CSV: &str = "retention_heatmap.csv";
pub const HEATMAP_BY_CLASS_CSV: &str = "retention_by_class.csv";
pub const DELTA_C_CSV: &str = "delta_c.csv";
pub const ALIGNMENT_CSV: &str = "alignment.csv";

pub const SUMMARY_HEADER: [&str; 8] = ["layer", "count", "median", "q1", "q3", "whisker_low", "whisker_high", "outliers"];
pub const HEATMAP_HEADER: [&str; 5] = ["level", "layer", "head", "c_clean", "c_pert"];
pub const DELTA_C_HEADER: [&str; 2] = ["level", "delta_c"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    Subspace,
    Attention,
    Rollout,
    Indicators,
}

/// Files written by one analysis plus parameters worth recording.
#[derive(Debug, Default)]
pub struct Emitted {
    pub files: Vec<PathBuf>,
    pub parameters: BTreeMap<String, String>,
}

fn clean_by_class(set: &TraceSet) -> BTreeMap<String, Vec<&LoadedTrace>> {
    set.by_class("clean")
}

pub fn run_subspace(cfg: &RunConfig, set: &TraceSet, out: &Path) -> Result<Emitted> {
    let classes = clean_by_class(set);
    if classes.len() < 2 {
        return Err(validation(format!("subspace angles need at least two classes with clean traces, found {}", classes.len())));
    }
    let layers: Vec<usize> = (1..=set.num_layers()).collect();
    let per_layer = layers
        .par_iter()
        .map(|&layer| -> Result<(Vec<ClassSubspace>, _)> {
            let subspaces = classes
                .iter()
                .map(|(class, traces)| {
                    let t: Vec<_> = traces.iter().map(|t| &t.trace).collect();
                    let x = assemble_class_matrix(&t, class, layer)?;
                    Ok(class_subspace(&x, cfg.k)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let dist = layer_angle_distribution(&subspaces)?;
            Ok((subspaces, dist))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut angle_rows = Vec::new();
    let mut summary_rows = Vec::new();
    let mut sigma_rows = Vec::new();
    for (subspaces, dist) in &per_layer {
        for ((ci, cj), angles) in &dist.pair_angles {
            let mut row = vec![dist.layer.to_string(), ci.clone(), cj.clone()];
            row.extend(angles.iter().map(|&a| fmt_f(a)));
            angle_rows.push(row);
        }
        let s = &dist.summary;
        summary_rows.push(vec![
            dist.layer.to_string(),
            s.count.to_string(),
            fmt_f(s.median),
            fmt_f(s.q1),
            fmt_f(s.q3),
            fmt_f(s.whisker_low),
            fmt_f(s.whisker_high),
            s.outliers.iter().map(|&v| fmt_f(v)).collect::<Vec<_>>().join(";"),
        ]);
        for sub in subspaces {
            sigma_rows.push(vec![
                sub.layer.to_string(),
                sub.class_id.clone(),
                fmt_f(sub.singular_values[0]),
                fmt_f(sub.singular_values.iter().sum()),
                sub.tie_at_k.to_string(),
            ]);
        }
    }
    let theta: Vec<String> = (1..=cfg.k).map(|i| format!("theta_{i}_deg")).collect();
    let mut header = vec!["layer", "class_i", "class_j"];
    header.extend(theta.iter().map(String::as_str));

    let ties = per_layer.iter().flat_map(|(s, _)| s).filter(|s| s.tie_at_k).count();
    let mut e = Emitted::default();
    e.files.push(write_csv(&out.join(ANGLES_CSV), &header, &angle_rows)?);
    e.files.push(write_csv(&out.join(ANGLE_SUMMARY_CSV), &SUMMARY_HEADER, &summary_rows)?);
    e.files.push(write_csv(
        &out.join(SINGULAR_CSV),
        &["layer", "class", "sigma_1", "sigma_sum", "tie_at_k"],
        &sigma_rows,
    )?);
    e.parameters.insert("subspace.k".into(), cfg.k.to_string());
    e.parameters.insert("subspace.centering".into(), "none".into());
    e.parameters.insert("subspace.ties_at_k".into(), ties.to_string());
    Ok(e)
}

pub fn run_attention(set: &TraceSet, out: &Path) -> Result<Emitted> {
    let per_image = set
        .clean()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|t| Ok((t.entry.path.clone(), trace_attention_distances(&t.trace)?)))
        .collect::<Result<Vec<_>>>()?;
    let means = aggregate_attention_distances(&per_image)?;
    let rows: Vec<Vec<String>> = means
        .iter()
        .map(|(&(l, h), &d)| vec![l.to_string(), h.to_string(), fmt_f(d)])
        .collect();
    let masked = set.clean().any(|t| {
        let tr = &t.trace;
        tr.visible_indices.len() < (tr.image_height / tr.patch_size) * (tr.image_width / tr.patch_size)
    });
    let mut e = Emitted::default();
    e.files.push(write_csv(&out.join(DISTANCE_CSV), &["layer", "head", "mean_distance_px"], &rows)?);
    e.parameters.insert("attention.images".into(), per_image.len().to_string());
    e.parameters.insert(
        "attention.distance_tokens".into(),
        if masked { "visible tokens of masked traces" } else { "all patches (unmasked traces)" }.into(),
    );
    Ok(e)
}

pub fn run_rollout(cfg: &RunConfig, set: &TraceSet, out: &Path) -> Result<Emitted> {
    let dir = out.join("rollout");
    fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    let clean: Vec<&LoadedTrace> = set.clean().collect();
    let archives = clean
        .par_iter()
        .map(|t| -> Result<(String, Vec<u8>)> {
            let layers: Vec<Vec<_>> = t
                .trace
                .layers
                .iter()
                .map(|l| l.heads.iter().map(|h| h.attention.clone()).collect())
                .collect();
            let r = attention_rollout_with(&layers, t.trace.has_cls, &t.trace.visible_indices, cfg.residual_weight)?;
            let mut a = TensorArchive::new();
            a.set_meta("source", &t.entry.path);
            a.set_meta("score_source", if r.from_cls { "cls-row" } else { "column-mean" });
            a.set_meta("residual_weight", fmt_f(cfg.residual_weight));
            let n = r.scores.len();
            let push = |a: &mut TensorArchive, rec: std::result::Result<TensorRecord, _>| -> Result<()> {
                a.push(rec.map_err(rscope_core::Error::from)?).map_err(rscope_core::Error::from)?;
                Ok(())
            };
            push(&mut a, TensorRecord::f64("rollout/scores", &[n], r.scores.clone()))?;
            push(
                &mut a,
                TensorRecord::i64("rollout/patch_idx", &[n], r.patch_indices.iter().map(|&p| p as i64).collect()),
            )?;
            let name = format!("{}.{FILE_EXTENSION}", t.entry.sample().replace('#', "__"));
            Ok((name, a.to_bytes().map_err(rscope_core::Error::from)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut e = Emitted::default();
    for (name, bytes) in archives {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|err| PipelineError::io(&path, err))?;
        e.files.push(path);
    }
    e.parameters.insert("rollout.residual_weight".into(), fmt_f(cfg.residual_weight));
    e.parameters.insert("rollout.head_fusion".into(), "mean".into());
    Ok(e)
}

pub fn run_indicators(cfg: &RunConfig, set: &TraceSet, out: &Path) -> Result<Emitted> {
    let params = cfg.retention_params()?;
    let levels = set.levels();
    if levels.is_empty() {
        return Err(validation("indicators need perturbed traces; the manifest lists only clean ones"));
    }
    let clean = clean_by_class(set);
    let clean_by_sample: BTreeMap<String, &LoadedTrace> = set.clean().map(|t| (t.entry.sample(), t)).collect();
    for t in set.traces.iter().filter(|t| t.entry.level != "clean") {
        if !clean_by_sample.contains_key(&t.entry.sample()) {
            return Err(validation(format!("{}: no clean trace for sample {}", t.entry.path, t.entry.sample())));
        }
    }
    let (layers, heads) = (set.num_layers(), set.num_heads());
    let final_layer = layers;

    let work: Vec<(String, String)> = levels
        .iter()
        .flat_map(|l| clean.keys().map(move |c| (l.clone(), c.clone())))
        .collect();
    let retained = work
        .par_iter()
        .map(|(level, class)| -> Result<Option<Vec<FeatureRetention>>> {
            let pert = set.by_class(level);
            let Some(p) = pert.get(class) else { return Ok(None) };
            let c: Vec<_> = clean[class].iter().map(|t| &t.trace).collect();
            let p: Vec<_> = p.iter().map(|t| &t.trace).collect();
            Ok(Some(class_retention(&c, &p, &params)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_class_rows = Vec::new();
    let mut heat_rows = Vec::new();
    let mut delta_rows = Vec::new();
    for level in &levels {
        let cells: Vec<(&String, &Vec<FeatureRetention>)> = work
            .iter()
            .zip(&retained)
            .filter(|((l, _), _)| l == level)
            .filter_map(|((_, c), r)| r.as_ref().map(|r| (c, r)))
            .collect();
        let mut sums: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        let mut drops = Vec::new();
        for (class, rets) in &cells {
            for r in rets.iter() {
                by_class_rows.push(vec![
                    level.clone(),
                    (*class).clone(),
                    r.layer.to_string(),
                    r.head.to_string(),
                    r.c_clean().to_string(),
                    r.c_pert().to_string(),
                ]);
                let s = sums.entry((r.layer, r.head)).or_default();
                s.0 += r.c_clean();
                s.1 += r.c_pert();
            }
            drops.push(mean_drop(rets, layers, heads)?);
        }
        let n = cells.len() as f64;
        for (&(l, h), &(cc, cp)) in &sums {
            heat_rows.push(vec![level.clone(), l.to_string(), h.to_string(), fmt_f(cc as f64 / n), fmt_f(cp as f64 / n)]);
        }
        delta_rows.push(vec![level.clone(), fmt_f(drops.iter().sum::<f64>() / n)]);
    }

    let mut align_rows = Vec::new();
    for level in &levels {
        let mut pairs: Vec<&LoadedTrace> = set.traces.iter().filter(|t| &t.entry.level == level).collect();
        pairs.sort_by_key(|t| t.entry.sample());
        let stats = pairs
            .par_iter()
            .map(|t| {
                let c = clean_by_sample[&t.entry.sample()];
                Ok(cosine_alignment(&c.trace.mean_patch(final_layer)?, &t.trace.mean_patch(final_layer)?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = stats.len() as f64;
        align_rows.push(vec![
            level.clone(),
            fmt_f(stats.iter().map(|s| s.cosine).sum::<f64>() / n),
            fmt_f(stats.iter().map(|s| s.norm_gap).sum::<f64>() / n),
        ]);
    }

    let mut e = Emitted::default();
    e.files.push(write_csv(&out.join(HEATMAP_CSV), &HEATMAP_HEADER, &heat_rows)?);
    e.files.push(write_csv(
        &out.join(HEATMAP_BY_CLASS_CSV),
        &["level", "class", "layer", "head", "c_clean", "c_pert"],
        &by_class_rows,
    )?);
    e.files.push(write_csv(&out.join(DELTA_C_CSV), &DELTA_C_HEADER, &delta_rows)?);
    e.files.push(write_csv(&out.join(ALIGNMENT_CSV), &["level", "mean_cosine", "mean_norm_gap"], &align_rows)?);
    e.parameters.insert("indicators.top_k".into(), params.top_k.to_string());
    e.parameters.insert("indicators.tau".into(), fmt_f(params.tau));
    e.parameters.insert("indicators.magnitude".into(), cfg.magnitude.clone());
    e.parameters.insert("indicators.common_sets".into(), "recomputed per level with clean (k, tau)".into());
    e.parameters.insert("indicators.heatmap_counts".into(), "mean over classes".into());
    e.parameters.insert("indicators.alignment_layer".into(), final_layer.to_string());
    Ok(e)
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn digest_file(path: &Path, base: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(FileDigest { path: rel(path, base), sha256: sha256_hex(&bytes) })
}

/// Loads and validates every trace, runs `analyses`, writes the run manifest
/// and, when enabled, plots. Returns the manifest path.
pub fn cmd_analyze(cfg: &RunConfig, command: &str, analyses: &[Analysis]) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| PipelineError::io(&out, e))?;
    let trace_dir = cfg.trace_dir();
    with_pool(cfg.workers, || -> Result<PathBuf> {
        let set = TraceSet::load(&trace_dir)?;
        let mut files = Vec::new();
        let mut parameters = BTreeMap::new();
        parameters.insert("traces".into(), set.traces.len().to_string());
        for a in analyses {
            let e = match a {
                Analysis::Subspace => run_subspace(cfg, &set, &out)?,
                Analysis::Attention => run_attention(&set, &out)?,
                Analysis::Rollout => run_rollout(cfg, &set, &out)?,
                Analysis::Indicators => run_indicators(cfg, &set, &out)?,
            };
            files.extend(e.files);
            parameters.extend(e.parameters);
        }
        let mut warnings = Vec::new();
        if cfg.plots {
            let plots = render_plots(&out);
            files.extend(plots.written);
            warnings.extend(plots.errors.iter().map(|e| format!("plot skipped: {e}")));
        }

        let mut inputs = vec![digest_file(&trace_dir.join(TRACE_MANIFEST), &trace_dir)?];
        inputs.extend(set.traces.iter().map(|t| FileDigest { path: t.entry.path.clone(), sha256: t.digest.clone() }));
        let outputs = files.iter().map(|f| digest_file(f, &out)).collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: command.to_string(),
            effective_config: serde_json::to_value(cfg).expect("config serializes"),
            parameters,
            inputs,
            outputs,
            warnings,
        };
        manifest.write(&out)
    })?
}

pub fn selected(cfg: &RunConfig) -> Vec<Analysis> {
    let a = &cfg.analyses;
    [
        (a.subspace, Analysis::Subspace),
        (a.attention, Analysis::Attention),
        (a.rollout, Analysis::Rollout),
        (a.indicators, Analysis::Indicators),
    ]
    .into_iter()
    .filter_map(|(on, x)| on.then_some(x))
    .collect()
}
