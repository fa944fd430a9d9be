//! KNN over Gaussian centers, local planar alignment and Laplacian smoothing.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::GaussianPrimitive;
use crate::linalg::{mean_and_covariance, normalize_in_place, sym_eigen3};
use crate::par;
use crate::spatial::KdTree;

/// Exact K nearest neighbors of every center, self excluded, sorted by
/// distance with ties broken by index.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    pub k: usize,
    pub neighbors: Vec<Vec<u32>>,
    /// Iteration at which the index was built.
    pub built_at: usize,
}

pub fn build_knn(points: &[Vector3<f64>], k: usize, built_at: usize) -> Result<KnnIndex> {
    if points.len() < 2 {
        return Err(Error::InvalidInput(format!("KNN needs at least 2 points, got {}", points.len())));
    }
    let tree = KdTree::new(points);
    let kk = k.min(points.len() - 1);
    let neighbors = par::map_range(points.len(), |i| {
        tree.knn(&points[i], kk, Some(i as u32))
            .into_iter()
            .map(|(j, _)| j)
            .collect()
    });
    Ok(KnnIndex {
        k: kk,
        neighbors,
        built_at,
    })
}

/// Projects every center onto the tangent plane fitted to its neighbors'
/// centers: `μ ← μ − ((μ − c̄)·e₃)e₃` with `e₃` the least-variance direction.
/// Centers whose neighborhood spans fewer than two directions are left alone.
/// Returns the number of moved centers.
pub fn planar_align(prims: &mut [GaussianPrimitive], knn: &KnnIndex) -> usize {
    let centers: Vec<Vector3<f64>> = prims.iter().map(|p| p.center).collect();
    let updated: Vec<Option<Vector3<f64>>> = par::map_range(centers.len(), |i| {
        let pts: Vec<Vector3<f64>> = knn.neighbors[i].iter().map(|&j| centers[j as usize]).collect();
        let (mean, cov) = mean_and_covariance(&pts)?;
        let eig = sym_eigen3(&cov);
        let scale = eig.values[2].max(0.0);
        if scale <= 0.0 || eig.values[1] <= 1e-12 * scale {
            return None;
        }
        let e3 = eig.vectors[0];
        let mu = centers[i];
        Some(mu - e3 * (mu - mean).dot(&e3))
    });
    let mut moved = 0;
    for (p, u) in prims.iter_mut().zip(updated) {
        if let Some(c) = u {
            if c != p.center {
                moved += 1;
            }
            p.center = c;
        }
    }
    moved
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothField {
    Normal,
    Descriptor,
}

/// Replaces each feature by the normalized mean of itself and its neighbors.
/// Features whose mean has norm below 1e-8 are left unchanged.
pub fn laplacian_smooth(prims: &mut [GaussianPrimitive], knn: &KnnIndex, field: SmoothField) {
    let features: Vec<Vec<f64>> = prims
        .iter()
        .map(|p| match field {
            SmoothField::Normal => p.normal.as_slice().to_vec(),
            SmoothField::Descriptor => p.descriptor.clone(),
        })
        .collect();
    let updated: Vec<Option<Vec<f64>>> = par::map_range(features.len(), |i| {
        let mut acc = features[i].clone();
        for &j in &knn.neighbors[i] {
            for (a, b) in acc.iter_mut().zip(&features[j as usize]) {
                *a += b;
            }
        }
        let count = (knn.neighbors[i].len() + 1) as f64;
        acc.iter_mut().for_each(|a| *a /= count);
        (normalize_in_place(&mut acc) >= 1e-8).then_some(acc)
    });
    for (p, u) in prims.iter_mut().zip(updated) {
        let Some(v) = u else { continue };
        match field {
            SmoothField::Normal => p.normal = Vector3::new(v[0], v[1], v[2]),
            SmoothField::Descriptor => p.descriptor = v,
        }
    }
}
