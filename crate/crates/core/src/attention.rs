//! Mean attention distance and attention rollout.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::encoder::ActivationTrace;
use crate::error::{contract, Result};

/// Identity weight mixed into each head-averaged attention map before
/// renormalization.
pub const DEFAULT_RESIDUAL_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_size: usize) -> Self {
        PatchGrid { rows, cols, patch_size }
    }

    pub fn for_image(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(contract(format!("{height}x{width} image does not tile into {patch_size}-pixel patches")));
        }
        Ok(PatchGrid::new(height / patch_size, width / patch_size, patch_size))
    }

    pub fn from_trace(trace: &ActivationTrace) -> Result<Self> {
        Self::for_image(trace.image_height, trace.image_width, trace.patch_size)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel coordinates `(x, y)` of the centre of raster patch `index`.
    pub fn center(&self, index: usize) -> (f64, f64) {
        let (row, col) = (index / self.cols, index % self.cols);
        let n = self.patch_size as f64;
        ((col as f64 + 0.5) * n, (row as f64 + 0.5) * n)
    }

    pub fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    pub fn diagonal(&self) -> f64 {
        let n = self.patch_size as f64;
        ((self.rows as f64 * n).powi(2) + (self.cols as f64 * n).powi(2)).sqrt()
    }
}

/// Patch-to-patch block of a trace attention map: the CLS row and column are
/// dropped and each remaining row is rescaled to sum to one.
pub fn patch_attention(attention: &DMatrix<f64>, has_cls: bool) -> DMatrix<f64> {
    if !has_cls {
        return attention.clone();
    }
    let t = attention.nrows() - 1;
    let mut m = attention.view((1, 1), (t, t)).into_owned();
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    m
}

/// Attention-weighted mean Euclidean distance, in pixels, between each query
/// patch and the patches it attends to, averaged over queries.
///
/// `attention` is patch-only; slot `i` maps to grid patch `visible_indices[i]`.
pub fn mean_attention_distance(attention: &DMatrix<f64>, grid: &PatchGrid, visible_indices: &[usize]) -> Result<f64> {
    let t = attention.nrows();
    if !attention.is_square() || t != visible_indices.len() {
        return Err(contract(format!(
            "attention is {}x{} but {} tokens have grid positions",
            attention.nrows(),
            attention.ncols(),
            visible_indices.len()
        )));
    }
    if t == 0 {
        return Err(contract("attention distance needs at least one patch token"));
    }
    if let Some(&bad) = visible_indices.iter().find(|&&i| i >= grid.len()) {
        return Err(contract(format!("token maps to patch {bad}, grid has {}", grid.len())));
    }
    let centers: Vec<(f64, f64)> = visible_indices.iter().map(|&i| grid.center(i)).collect();
    let total: f64 = (0..t)
        .map(|i| {
            let (xi, yi) = centers[i];
            (0..t)
                .map(|j| {
                    let (xj, yj) = centers[j];
                    attention[(i, j)] * ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt()
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / t as f64)
}

/// Per-(layer, head) mean attention distance of one trace, 1-based keys.
pub fn trace_attention_distances(trace: &ActivationTrace) -> Result<BTreeMap<(usize, usize), f64>> {
    let grid = PatchGrid::from_trace(trace)?;
    let mut out = BTreeMap::new();
    for (li, layer) in trace.layers.iter().enumerate() {
        for (hi, head) in layer.heads.iter().enumerate() {
            let a = patch_attention(&head.attention, trace.has_cls);
            out.insert((li + 1, hi + 1), mean_attention_distance(&a, &grid, &trace.visible_indices)?);
        }
    }
    Ok(out)
}

/// Arithmetic mean over images of per-head distances. Images are visited in
/// ascending id order so the result does not depend on input order.
pub fn aggregate_attention_distances(
    per_image: &[(String, BTreeMap<(usize, usize), f64>)],
) -> Result<BTreeMap<(usize, usize), f64>> {
    if per_image.is_empty() {
        return Err(contract("no images to aggregate"));
    }
    let mut order: Vec<&(String, BTreeMap<(usize, usize), f64>)> = per_image.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    let keys: Vec<(usize, usize)> = order[0].1.keys().copied().collect();
    let mut out = BTreeMap::new();
    for key in keys {
        let mut sum = 0.0;
        for (id, m) in &order {
            sum += m
                .get(&key)
                .ok_or_else(|| contract(format!("image `{id}` lacks layer {} head {}", key.0, key.1)))?;
        }
        out.insert(key, sum / order.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `T x T` product of residual-adjusted attention maps.
    pub matrix: DMatrix<f64>,
    /// Importance of each patch token slot (CLS excluded).
    pub scores: Vec<f64>,
    /// Grid patch of each score.
    pub patch_indices: Vec<usize>,
    /// Scores are the CLS row of the rollout; otherwise the column means.
    pub from_cls: bool,
}

impl RolloutResult {
    /// Scores scattered onto the full grid; `None` when some grid patch has no
    /// token in the rollout.
    pub fn importance_by_patch(&self, num_patches: usize) -> Option<Vec<f64>> {
        let mut out = vec![None; num_patches];
        for (&p, &s) in self.patch_indices.iter().zip(&self.scores) {
            *out.get_mut(p)? = Some(s);
        }
        out.into_iter().collect()
    }
}

fn head_mean(heads: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = heads.first().ok_or_else(|| contract("layer has no attention heads"))?;
    let mut sum = DMatrix::zeros(first.nrows(), first.ncols());
    for h in heads {
        if h.shape() != first.shape() {
            return Err(contract("heads of one layer differ in shape"));
        }
        sum += h;
    }
    Ok(sum / heads.len() as f64)
}

/// Rollout `R = Â_L ⋯ Â_1` with `Â = rownorm((1 - w) Ā + w I)` and `Ā` the
/// head mean of each layer.
pub fn attention_rollout_with(
    layers: &[Vec<DMatrix<f64>>],
    has_cls: bool,
    patch_indices: &[usize],
    residual_weight: f64,
) -> Result<RolloutResult> {
    let first = layers
        .first()
        .and_then(|l| l.first())
        .ok_or_else(|| contract("rollout needs at least one layer"))?;
    let t = first.nrows();
    if !first.is_square() || t == 0 {
        return Err(contract("attention maps must be non-empty and square"));
    }
    if patch_indices.len() + usize::from(has_cls) != t {
        return Err(contract(format!(
            "{} patch indices do not match {t} tokens (cls = {has_cls})",
            patch_indices.len()
        )));
    }
    let mut rollout = DMatrix::identity(t, t);
    for (l, heads) in layers.iter().enumerate() {
        let mean = head_mean(heads)?;
        if mean.shape() != (t, t) {
            return Err(contract(format!(
                "layer {} has {}x{} attention, expected {t}x{t}",
                l + 1,
                mean.nrows(),
                mean.ncols()
            )));
        }
        let mut adjusted = mean * (1.0 - residual_weight) + DMatrix::identity(t, t) * residual_weight;
        for mut row in adjusted.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        rollout = adjusted * rollout;
    }

    let scores: Vec<f64> = if has_cls {
        (1..t).map(|j| rollout[(0, j)]).collect()
    } else {
        (0..t).map(|j| rollout.column(j).sum() / t as f64).collect()
    };
    Ok(RolloutResult { matrix: rollout, scores, patch_indices: patch_indices.to_vec(), from_cls: has_cls })
}

pub fn attention_rollout(layers: &[Vec<DMatrix<f64>>], has_cls: bool, patch_indices: &[usize]) -> Result<RolloutResult> {
    attention_rollout_with(layers, has_cls, patch_indices, DEFAULT_RESIDUAL_WEIGHT)
}

pub fn trace_rollout(trace: &ActivationTrace) -> Result<RolloutResult> {
    let layers: Vec<Vec<DMatrix<f64>>> = trace
        .layers
        .iter()
        .map(|l| l.heads.iter().map(|h| h.attention.clone()).collect())
        .collect();
    attention_rollout(&layers, trace.has_cls, &trace.visible_indices)
}

/// Grid patch indices by descending importance; ties go to the lower index.
pub fn rank_patches(result: &RolloutResult) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = result.patch_indices.iter().copied().zip(result.scores.iter().copied()).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(p, _)| p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn distance_hand_cases() {
        let grid = PatchGrid::new(1, 2, 16);
        let uniform = DMatrix::from_element(2, 2, 0.5);
        assert_eq!(mean_attention_distance(&uniform, &grid, &[0, 1]).unwrap(), 8.0);
        assert_eq!(mean_attention_distance(&DMatrix::identity(2, 2), &grid, &[0, 1]).unwrap(), 0.0);
        assert_eq!(mean_attention_distance(&DMatrix::identity(1, 1), &grid, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn distance_rejects_unmapped_tokens() {
        let grid = PatchGrid::new(1, 2, 16);
        assert!(mean_attention_distance(&DMatrix::identity(2, 2), &grid, &[0]).is_err());
        assert!(mean_attention_distance(&DMatrix::identity(1, 1), &grid, &[5]).is_err());
    }

    #[test]
    fn patch_attention_renormalizes() {
        let a = DMatrix::from_row_slice(3, 3, &[0.2, 0.4, 0.4, 0.5, 0.25, 0.25, 0.0, 0.5, 0.5]);
        let p = patch_attention(&a, true);
        assert_eq!(p, DMatrix::from_element(2, 2, 0.5));
    }

    #[test]
    fn rollout_identity_single_layer() {
        let r = attention_rollout(&[vec![DMatrix::identity(3, 3)]], false, &ident(3)).unwrap();
        assert_eq!(r.matrix, DMatrix::identity(3, 3));
        assert!(r.scores.iter().all(|&s| (s - r.scores[0]).abs() < 1e-15));
    }

    #[test]
    fn rollout_permutation_layer() {
        let p = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let r = attention_rollout(&[vec![p.clone()]], false, &ident(3)).unwrap();
        // 0.5 P + 0.5 I already has unit row sums
        let want = p * 0.5 + DMatrix::identity(3, 3) * 0.5;
        assert!((r.matrix - want).norm() < 1e-15);
    }

    #[test]
    fn rollout_rejects_inconsistent_layers() {
        let layers = vec![vec![DMatrix::identity(3, 3)], vec![DMatrix::identity(2, 2)]];
        assert!(attention_rollout(&layers, false, &ident(3)).is_err());
        assert!(attention_rollout(&[], false, &[]).is_err());
    }

    #[test]
    fn cls_row_scores() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.75, 0.25, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let r = attention_rollout(&[vec![a]], true, &[4, 9]).unwrap();
        // row 0 of rownorm(0.5 A + 0.5 I) = (0.5, 0.375, 0.125)
        assert!((r.scores[0] - 0.375).abs() < 1e-15);
        assert!((r.scores[1] - 0.125).abs() < 1e-15);
        assert_eq!(rank_patches(&r), vec![4, 9]);
    }

    #[test]
    fn ranking_cases() {
        let mk = |scores: Vec<f64>| RolloutResult {
            matrix: DMatrix::zeros(0, 0),
            patch_indices: ident(scores.len()),
            scores,
            from_cls: false,
        };
        assert_eq!(rank_patches(&mk(vec![0.1, 0.7, 0.2])), vec![1, 2, 0]);
        assert_eq!(rank_patches(&mk(vec![0.3; 4])), vec![0, 1, 2, 3]);
        assert_eq!(rank_patches(&mk(vec![1.0])), vec![0]);
    }

    #[test]
    fn importance_by_patch_needs_full_cover() {
        let r = RolloutResult { matrix: DMatrix::zeros(0, 0), scores: vec![0.2, 0.8], patch_indices: vec![1, 0], from_cls: false };
        assert_eq!(r.importance_by_patch(2), Some(vec![0.8, 0.2]));
        assert_eq!(r.importance_by_patch(3), None);
    }
}
