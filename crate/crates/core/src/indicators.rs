//! Robustness indicators between clean and perturbed traces: directional
//! alignment of mean patch embeddings, and head-wise retention of active
//! features.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::encoder::{head_output, ActivationTrace, EncoderConfig, ToyEncoder};
use crate::error::{config, contract, Error, Result};
use crate::image::Image;
use crate::seed::derive_seed;

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_TAU: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentStat {
    pub cosine: f64,
    pub clean_norm: f64,
    pub pert_norm: f64,
    pub norm_gap: f64,
}

pub fn cosine_alignment(clean: &DVector<f64>, pert: &DVector<f64>) -> Result<AlignmentStat> {
    if clean.len() != pert.len() {
        return Err(contract(format!("vector lengths differ: {} vs {}", clean.len(), pert.len())));
    }
    let (cn, pn) = (clean.norm(), pert.norm());
    if cn == 0.0 || pn == 0.0 {
        return Err(contract("cosine alignment of a zero vector"));
    }
    Ok(AlignmentStat {
        cosine: (clean.dot(pert) / (cn * pn)).clamp(-1.0, 1.0),
        clean_norm: cn,
        pert_norm: pn,
        norm_gap: (pn - cn).abs(),
    })
}

/// Row mean of a head output whose CLS row has already been removed.
pub fn head_mean_vector(output: &DMatrix<f64>) -> Result<DVector<f64>> {
    if output.nrows() == 0 {
        return Err(contract("head output has no visible-token rows"));
    }
    let mut sum = DVector::zeros(output.ncols());
    for row in output.row_iter() {
        sum += row.transpose();
    }
    Ok(sum / output.nrows() as f64)
}

/// How a coordinate's activity is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MagnitudeMode {
    #[default]
    Absolute,
    Signed,
}

impl FromStr for MagnitudeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" | "absolute" => Ok(MagnitudeMode::Absolute),
            "signed" => Ok(MagnitudeMode::Signed),
            other => Err(config(format!("unknown magnitude mode `{other}`"))),
        }
    }
}

/// Indices of the `k` most active coordinates; ties go to the lower index.
pub fn top_k_features(v: &DVector<f64>, k: usize, mode: MagnitudeMode) -> BTreeSet<usize> {
    let key = |x: f64| match mode {
        MagnitudeMode::Absolute => x.abs(),
        MagnitudeMode::Signed => x,
    };
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| key(v[b]).total_cmp(&key(v[a])).then(a.cmp(&b)));
    idx.into_iter().take(k).collect()
}

/// Minimum number of images, out of `images`, a feature must be active in.
pub fn membership_threshold(images: usize, tau: f64) -> usize {
    // the small offset absorbs products like 0.6 * 50 landing just above 30
    ((tau * images as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Features present in at least `ceil(tau M)` of the `M` per-image sets.
pub fn common_features(per_image: &[BTreeSet<usize>], tau: f64) -> Result<BTreeSet<usize>> {
    if per_image.is_empty() {
        return Err(contract("common features need at least one image"));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(config(format!("tau {tau} outside (0, 1]")));
    }
    let need = membership_threshold(per_image.len(), tau);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for set in per_image {
        for &f in set {
            *counts.entry(f).or_default() += 1;
        }
    }
    Ok(counts.into_iter().filter(|&(_, c)| c >= need).map(|(f, _)| f).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureRetention {
    pub layer: usize,
    pub head: usize,
    pub clean_common: BTreeSet<usize>,
    /// Clean common features that stay common under perturbation.
    pub pert_retained: BTreeSet<usize>,
}

impl FeatureRetention {
    pub fn c_clean(&self) -> usize {
        self.clean_common.len()
    }

    pub fn c_pert(&self) -> usize {
        self.pert_retained.len()
    }

    pub fn drop(&self) -> usize {
        self.c_clean() - self.c_pert()
    }
}

pub fn retention(layer: usize, head: usize, clean_common: &BTreeSet<usize>, pert_common: &BTreeSet<usize>) -> FeatureRetention {
    FeatureRetention {
        layer,
        head,
        clean_common: clean_common.clone(),
        pert_retained: clean_common.intersection(pert_common).copied().collect(),
    }
}

/// Mean of `C_clean - C_pert` over a complete `layers x heads` grid (1-based).
pub fn mean_drop(retentions: &[FeatureRetention], layers: usize, heads: usize) -> Result<f64> {
    let mut cells: BTreeMap<(usize, usize), &FeatureRetention> = BTreeMap::new();
    for r in retentions {
        if r.layer == 0 || r.layer > layers || r.head == 0 || r.head > heads {
            return Err(contract(format!("cell (layer {}, head {}) outside the {layers}x{heads} grid", r.layer, r.head)));
        }
        if cells.insert((r.layer, r.head), r).is_some() {
            return Err(contract(format!("cell (layer {}, head {}) given twice", r.layer, r.head)));
        }
    }
    let missing: Vec<String> = (1..=layers)
        .flat_map(|l| (1..=heads).map(move |h| (l, h)))
        .filter(|cell| !cells.contains_key(cell))
        .map(|(l, h)| format!("(layer {l}, head {h})"))
        .collect();
    if !missing.is_empty() {
        return Err(contract(format!("missing cells: {}", missing.join(", "))));
    }
    let total: usize = cells.values().map(|r| r.drop()).sum();
    Ok(total as f64 / (layers * heads) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetentionParams {
    pub top_k: usize,
    pub tau: f64,
    pub mode: MagnitudeMode,
}

impl Default for RetentionParams {
    fn default() -> Self {
        RetentionParams { top_k: DEFAULT_TOP_K, tau: DEFAULT_TAU, mode: MagnitudeMode::Absolute }
    }
}

/// Per-head mean output vectors of one trace, keyed by 1-based (layer, head).
///
/// `O = A V` uses the full traced attention (CLS included when present); the
/// CLS row is then left out of the mean.
pub fn head_mean_vectors(trace: &ActivationTrace) -> Result<BTreeMap<(usize, usize), DVector<f64>>> {
    let skip = usize::from(trace.has_cls);
    let mut out = BTreeMap::new();
    for (li, layer) in trace.layers.iter().enumerate() {
        for (hi, head) in layer.heads.iter().enumerate() {
            let o = head_output(&head.attention, &head.values)?;
            let visible = o.rows(skip, o.nrows() - skip).into_owned();
            out.insert((li + 1, hi + 1), head_mean_vector(&visible)?);
        }
    }
    Ok(out)
}

/// Top-k active feature sets of one trace, keyed by (layer, head).
pub fn head_top_k_sets(trace: &ActivationTrace, params: &RetentionParams) -> Result<BTreeMap<(usize, usize), BTreeSet<usize>>> {
    Ok(head_mean_vectors(trace)?
        .into_iter()
        .map(|(cell, v)| (cell, top_k_features(&v, params.top_k, params.mode)))
        .collect())
}

/// Common-feature sets of one class for every (layer, head) cell.
pub fn class_common_features(
    per_image: &[BTreeMap<(usize, usize), BTreeSet<usize>>],
    tau: f64,
) -> Result<BTreeMap<(usize, usize), BTreeSet<usize>>> {
    let first = per_image.first().ok_or_else(|| contract("class has no images"))?;
    let mut out = BTreeMap::new();
    for cell in first.keys() {
        let sets = per_image
            .iter()
            .map(|m| {
                m.get(cell)
                    .cloned()
                    .ok_or_else(|| contract(format!("image lacks layer {} head {}", cell.0, cell.1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(*cell, common_features(&sets, tau)?);
    }
    Ok(out)
}

/// Retention for every cell of one class at one perturbation level. Clean
/// and perturbed common sets are built with the same `(k, tau)`.
pub fn class_retention(
    clean: &[&ActivationTrace],
    perturbed: &[&ActivationTrace],
    params: &RetentionParams,
) -> Result<Vec<FeatureRetention>> {
    let sets = |traces: &[&ActivationTrace]| -> Result<Vec<_>> {
        traces.iter().map(|t| head_top_k_sets(t, params)).collect()
    };
    let clean_common = class_common_features(&sets(clean)?, params.tau)?;
    let pert_common = class_common_features(&sets(perturbed)?, params.tau)?;
    clean_common
        .iter()
        .map(|(&(l, h), c)| {
            let p = pert_common
                .get(&(l, h))
                .ok_or_else(|| contract(format!("perturbed traces lack layer {l} head {h}")))?;
            Ok(retention(l, h, c, p))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskInvarianceReport {
    pub layer: usize,
    pub norms: Vec<f64>,
    pub min_norm: f64,
    pub max_norm: f64,
    /// `None` for a single run.
    pub min_pairwise_cosine: Option<f64>,
    pub mean_pairwise_cosine: Option<f64>,
}

impl MaskInvarianceReport {
    pub fn norm_spread(&self) -> f64 {
        self.max_norm - self.min_norm
    }
}

/// Mean patch embeddings of one image under `runs` different mask seeds,
/// with fixed weights. Seeds derive from `config.mask_seed`.
pub fn mask_invariance_study(
    config: &EncoderConfig,
    image: &Image,
    runs: usize,
    layer: Option<usize>,
) -> Result<MaskInvarianceReport> {
    if runs == 0 {
        return Err(contract("mask invariance study needs at least one run"));
    }
    let layer = layer.unwrap_or(config.num_layers);
    let encoder = ToyEncoder::new(config.clone())?;
    let embeddings = (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut cfg = config.clone();
            cfg.mask_seed = derive_seed(config.mask_seed, i as u64);
            let visible = crate::encoder::mask_select(cfg.num_patches(), cfg.masking_ratio, cfg.mask_seed);
            encoder.forward_visible(image, &visible)?.mean_patch(layer)
        })
        .collect::<Result<Vec<_>>>()?;

    let norms: Vec<f64> = embeddings.iter().map(|v| v.norm()).collect();
    let mut cosines = Vec::new();
    for i in 0..runs {
        for j in i + 1..runs {
            cosines.push(cosine_alignment(&embeddings[i], &embeddings[j])?.cosine);
        }
    }
    Ok(MaskInvarianceReport {
        layer,
        min_norm: norms.iter().copied().fold(f64::INFINITY, f64::min),
        max_norm: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        norms,
        min_pairwise_cosine: cosines.iter().copied().reduce(f64::min),
        mean_pairwise_cosine: (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn cosine_cases() {
        let a = DVector::from_vec(vec![3.0, 4.0]);
        let b = DVector::from_vec(vec![4.0, 3.0]);
        let s = cosine_alignment(&a, &b).unwrap();
        assert!((s.cosine - 0.96).abs() < 1e-15);
        assert_eq!((s.clean_norm, s.pert_norm, s.norm_gap), (5.0, 5.0, 0.0));
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(cosine_alignment(&e1, &e2).unwrap().cosine, 0.0);
        assert_eq!(cosine_alignment(&a, &a).unwrap().cosine, 1.0);
        assert!(cosine_alignment(&a, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn head_mean_cases() {
        let o = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        assert_eq!(head_mean_vector(&o).unwrap().as_slice(), &[1.0, 1.0]);
        assert!(head_mean_vector(&DMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn top_k_cases() {
        let v = DVector::from_vec(vec![5.0, -7.0, 1.0, 0.0]);
        assert_eq!(top_k_features(&v, 2, MagnitudeMode::Absolute), set(&[0, 1]));
        assert_eq!(top_k_features(&v, 2, MagnitudeMode::Signed), set(&[0, 2]));
        let flat = DVector::from_element(6, 2.0);
        assert_eq!(top_k_features(&flat, 3, MagnitudeMode::Absolute), set(&[0, 1, 2]));
        assert_eq!(top_k_features(&v, 10, MagnitudeMode::Absolute), set(&[0, 1, 2, 3]));
    }

    #[test]
    fn thresholds() {
        assert_eq!(membership_threshold(50, 0.6), 30);
        assert_eq!(membership_threshold(2, 0.6), 2);
        assert_eq!(membership_threshold(10, 0.7), 7);
        assert_eq!(membership_threshold(3, 0.1), 1);
    }

    #[test]
    fn common_cases() {
        let same = vec![set(&[1, 2, 3]); 5];
        assert_eq!(common_features(&same, 0.6).unwrap(), set(&[1, 2, 3]));
        let disjoint = vec![set(&[0, 1]), set(&[2, 3])];
        assert!(common_features(&disjoint, 0.6).unwrap().is_empty());
        assert!(common_features(&[], 0.6).is_err());
        assert!(common_features(&same, 0.0).is_err());
    }

    #[test]
    fn retention_cases() {
        let clean = set(&[1, 2, 3]);
        let r = retention(1, 1, &clean, &set(&[2, 3, 9]));
        assert_eq!((r.c_clean(), r.c_pert()), (3, 2));
        assert_eq!(retention(1, 1, &clean, &clean).c_pert(), 3);
        assert_eq!(retention(1, 1, &clean, &set(&[7])).c_pert(), 0);
    }

    fn cell(l: usize, h: usize, clean: usize, pert: usize) -> FeatureRetention {
        FeatureRetention {
            layer: l,
            head: h,
            clean_common: (0..clean).collect(),
            pert_retained: (0..pert).collect(),
        }
    }

    #[test]
    fn mean_drop_cases() {
        let none: Vec<_> = (1..=2).flat_map(|l| (1..=2).map(move |h| cell(l, h, 5, 5))).collect();
        assert_eq!(mean_drop(&none, 2, 2).unwrap(), 0.0);
        let shift: Vec<_> = (1..=2).flat_map(|l| (1..=2).map(move |h| cell(l, h, 5, 3))).collect();
        assert_eq!(mean_drop(&shift, 2, 2).unwrap(), 2.0);
        let half = vec![cell(1, 1, 6, 2), cell(1, 2, 6, 2), cell(2, 1, 4, 4), cell(2, 2, 4, 4)];
        assert_eq!(mean_drop(&half, 2, 2).unwrap(), 2.0);
        let err = mean_drop(&half[..2], 2, 2).unwrap_err().to_string();
        assert!(err.contains("(layer 2, head 1)") && err.contains("(layer 2, head 2)"), "{err}");
    }
}
