//! Class-conditional subspaces and the principal angles between them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SVD};
use rayon::prelude::*;

use crate::encoder::ActivationTrace;
use crate::error::{contract, Error, Result};
use crate::stats::BoxStats;

pub const DEFAULT_K: usize = 5;

/// Patch-token embeddings of every image of one class at one layer, stacked
/// row-wise in (image, token) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatrix {
    pub class_id: String,
    pub layer: usize,
    pub x: DMatrix<f64>,
}

impl ClassMatrix {
    pub fn num_tokens(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

pub fn assemble_class_matrix(traces: &[&ActivationTrace], class_id: &str, layer: usize) -> Result<ClassMatrix> {
    if traces.is_empty() {
        return Err(contract(format!("class `{class_id}` has no traces")));
    }
    let blocks = traces
        .iter()
        .map(|t| t.patch_tokens(layer))
        .collect::<Result<Vec<_>>>()?;
    let d = blocks[0].ncols();
    if let Some(b) = blocks.iter().find(|b| b.ncols() != d) {
        return Err(contract(format!("class `{class_id}` mixes embedding widths {d} and {}", b.ncols())));
    }
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    if rows == 0 {
        return Err(contract(format!("class `{class_id}` has no patch tokens at layer {layer}")));
    }
    let mut x = DMatrix::zeros(rows, d);
    let mut at = 0;
    for b in &blocks {
        x.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    Ok(ClassMatrix { class_id: class_id.to_string(), layer, x })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSubspace {
    pub class_id: String,
    pub layer: usize,
    pub k: usize,
    /// `D x k`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// All singular values of the class matrix, descending.
    pub singular_values: Vec<f64>,
    /// `sigma_k` and `sigma_{k+1}` coincide, so the retained span is not unique.
    pub tie_at_k: bool,
}

impl ClassSubspace {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }
}

fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Singular values of `x`, descending.
pub fn singular_value_profile(x: &ClassMatrix) -> Vec<f64> {
    SVD::new(x.x.clone(), false, false).singular_values.as_slice().to_vec()
}

/// Top-`k` right singular subspace of the class matrix (no centering).
pub fn class_subspace(x: &ClassMatrix, k: usize) -> Result<ClassSubspace> {
    let (m, d) = x.x.shape();
    if k == 0 || k > m.min(d) {
        return Err(contract(format!("k = {k} outside 1..={} for a {m}x{d} class matrix", m.min(d))));
    }
    let svd = SVD::new(x.x.clone(), false, true);
    let sigma = svd.singular_values.as_slice().to_vec();
    let tol = rank_tolerance(m, d, sigma[0]);
    let rank = sigma.iter().filter(|&&s| s > tol).count();
    if k > rank {
        return Err(Error::RankDeficient { k, rank });
    }
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut basis = v_t.rows(0, k).transpose();
    // Sign convention: the largest-magnitude entry of each column is positive.
    for mut col in basis.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    let tie_at_k = sigma.get(k).is_some_and(|&next| sigma[k - 1] - next <= 1e-10 * sigma[0]);
    Ok(ClassSubspace {
        class_id: x.class_id.clone(),
        layer: x.layer,
        k,
        basis,
        singular_values: sigma,
        tie_at_k,
    })
}

/// Principal angles in degrees, ascending, between the column spans of two
/// orthonormal bases of equal shape.
///
/// Cosines come from the singular values of `AᵀB`; for angles below 45° the
/// sine route (singular values of `B - A AᵀB`) is used instead, since arccos
/// loses precision near 1.
pub fn principal_angles_of_bases(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(contract(format!("ambient dimensions differ: {} vs {}", a.nrows(), b.nrows())));
    }
    if a.ncols() != b.ncols() {
        return Err(contract(format!("retained dimensions differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let cross = a.transpose() * b;
    let cosines = SVD::new(cross.clone(), false, false).singular_values;
    let residual = b - a * &cross;
    let mut sines = SVD::new(residual, false, false).singular_values.as_slice().to_vec();
    sines.reverse();

    let mut angles: Vec<f64> = cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            let c = c.clamp(0.0, 1.0);
            let rad = if c * c >= 0.5 { s.clamp(0.0, 1.0).asin() } else { c.acos() };
            rad.to_degrees()
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

pub fn principal_angles(a: &ClassSubspace, b: &ClassSubspace) -> Result<Vec<f64>> {
    principal_angles_of_bases(&a.basis, &b.basis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleDistribution {
    pub layer: usize,
    /// Keys are ordered `(class_i, class_j)` with `class_i < class_j`.
    pub pair_angles: BTreeMap<(String, String), Vec<f64>>,
    /// Box statistics of the smallest angle over all pairs.
    pub summary: BoxStats,
}

impl AngleDistribution {
    pub fn smallest_angles(&self) -> Vec<f64> {
        self.pair_angles.values().map(|v| v[0]).collect()
    }
}

/// Principal angles for every unordered class pair at one layer.
pub fn layer_angle_distribution(subspaces: &[ClassSubspace]) -> Result<AngleDistribution> {
    if subspaces.len() < 2 {
        return Err(contract("angle distribution needs at least two classes"));
    }
    let layer = subspaces[0].layer;
    let mut sorted: Vec<&ClassSubspace> = subspaces.iter().collect();
    sorted.sort_by(|a, b| a.class_id.cmp(&b.class_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].class_id == w[1].class_id) {
        return Err(contract(format!("class `{}` appears twice", w[0].class_id)));
    }
    let pairs: Vec<(usize, usize)> = (0..sorted.len())
        .flat_map(|i| (i + 1..sorted.len()).map(move |j| (i, j)))
        .collect();
    let angles = pairs
        .par_iter()
        .map(|&(i, j)| principal_angles(sorted[i], sorted[j]))
        .collect::<Result<Vec<_>>>()?;

    let pair_angles: BTreeMap<_, _> = pairs
        .iter()
        .zip(angles)
        .map(|(&(i, j), a)| ((sorted[i].class_id.clone(), sorted[j].class_id.clone()), a))
        .collect();
    let firsts: Vec<f64> = pair_angles.values().map(|v| v[0]).collect();
    let summary = BoxStats::from_samples(&firsts).expect("at least one pair");
    Ok(AngleDistribution { layer, pair_angles, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: usize, cols: usize, data: &[f64]) -> ClassMatrix {
        ClassMatrix { class_id: "c".into(), layer: 1, x: DMatrix::from_row_slice(rows, cols, data) }
    }

    fn span(d: usize, cols: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(d, cols.len(), |r, c| cols[c][r])
    }

    #[test]
    fn rank_one_rows() {
        let n = 6;
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(&[2.0, 0.0, 0.0, 0.0]);
        }
        let s = class_subspace(&cm(n, 4, &data), 1).unwrap();
        assert!((s.singular_values[0] - (n as f64).sqrt() * 2.0).abs() < 1e-12);
        assert!((s.basis[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(matches!(class_subspace(&cm(n, 4, &data), 2), Err(Error::RankDeficient { k: 2, rank: 1 })));
    }

    #[test]
    fn k_out_of_range() {
        let x = cm(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(class_subspace(&x, 0).is_err());
        assert!(class_subspace(&x, 3).is_err());
    }

    #[test]
    fn singular_profiles() {
        assert_eq!(singular_value_profile(&cm(2, 2, &[0.0; 4])), vec![0.0, 0.0]);
        let eye = singular_value_profile(&cm(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        assert!(eye.iter().all(|s| (s - 1.0).abs() < 1e-14));
        let mut d = vec![0.0; 25];
        d[0] = 3.0;
        d[6] = 2.0;
        d[12] = 1.0;
        let s = singular_value_profile(&cm(5, 5, &d));
        for (got, want) in s.iter().zip([3.0, 2.0, 1.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn basic_angles() {
        let e = |i: usize| -> Vec<f64> { (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect() };
        let (e1, e2, e3) = (e(0), e(1), e(2));
        let a = principal_angles_of_bases(&span(4, &[&e1]), &span(4, &[&e1])).unwrap();
        assert!(a[0].abs() < 1e-12);
        let a = principal_angles_of_bases(&span(4, &[&e1]), &span(4, &[&e2])).unwrap();
        assert!((a[0] - 90.0).abs() < 1e-12);
        let a = principal_angles_of_bases(&span(4, &[&e1, &e2]), &span(4, &[&e1, &e3])).unwrap();
        assert!(a[0].abs() < 1e-12 && (a[1] - 90.0).abs() < 1e-12);
        let alpha = 30f64.to_radians();
        let rot = vec![alpha.cos(), alpha.sin(), 0.0, 0.0];
        let a = principal_angles_of_bases(&span(4, &[&e1]), &span(4, &[&rot])).unwrap();
        assert!((a[0] - 30.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let a = DMatrix::identity(4, 1);
        let b = DMatrix::identity(5, 1);
        assert!(principal_angles_of_bases(&a, &b).is_err());
        assert!(principal_angles_of_bases(&DMatrix::identity(4, 2), &a).is_err());
    }

    #[test]
    fn distribution_needs_two_classes() {
        let s = ClassSubspace {
            class_id: "a".into(),
            layer: 1,
            k: 1,
            basis: DMatrix::identity(3, 1),
            singular_values: vec![1.0],
            tie_at_k: false,
        };
        assert!(layer_angle_distribution(std::slice::from_ref(&s)).is_err());
        let mut t = s.clone();
        t.class_id = "b".into();
        let d = layer_angle_distribution(&[t, s]).unwrap();
        assert_eq!(d.pair_angles.len(), 1);
        assert!(d.pair_angles.contains_key(&("a".to_string(), "b".to_string())));
        assert!(d.summary.median.abs() < 1e-12);
    }

    #[test]
    fn tie_flagged() {
        let x = cm(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5]);
        assert!(class_subspace(&x, 1).unwrap().tie_at_k);
        assert!(!class_subspace(&x, 2).unwrap().tie_at_k);
    }
}
