//! Partition metrics (Rand index, variation of information, segmentation
//! covering) and point-set accuracy / completeness.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::KahanSum;
use crate::par;
use crate::spatial::KdTree;

/// How unassigned predictions enter the partition metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnassignedMode {
    /// Unassigned elements form one extra cluster.
    #[default]
    ExtraCluster,
    /// Elements unassigned in either partition are dropped.
    Exclude,
}

/// Dense labels `0..clusters` for a labeling with optional entries.
pub fn densify(labels: &[Option<u32>]) -> Vec<usize> {
    let mut ids: BTreeMap<Option<u32>, usize> = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(*l).or_insert(next);
    }
    labels.iter().map(|l| ids[l]).collect()
}

/// Aligns two labelings under `mode` and densifies both.
pub fn prepare(a: &[Option<u32>], b: &[Option<u32>], mode: UnassignedMode) -> Result<(Vec<usize>, Vec<usize>)> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("partitions differ in size ({} vs {})", a.len(), b.len())));
    }
    let (a, b): (Vec<Option<u32>>, Vec<Option<u32>>) = match mode {
        UnassignedMode::ExtraCluster => (a.to_vec(), b.to_vec()),
        UnassignedMode::Exclude => a
            .iter()
            .zip(b)
            .filter(|(x, y)| x.is_some() && y.is_some())
            .map(|(x, y)| (*x, *y))
            .unzip(),
    };
    Ok((densify(&a), densify(&b)))
}

/// Contingency table `n_ij` of two dense partitions with its marginals.
#[derive(Debug, Clone)]
pub struct Contingency {
    pub n: usize,
    pub cells: BTreeMap<(usize, usize), usize>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Contingency {
    pub fn new(p: &[usize], q: &[usize]) -> Result<Self> {
        if p.len() != q.len() {
            return Err(Error::InvalidInput("partitions differ in size".into()));
        }
        if p.len() < 2 {
            return Err(Error::InvalidInput(format!("partition metrics need N ≥ 2, got {}", p.len())));
        }
        let mut cells = BTreeMap::new();
        let mut rows = vec![0; p.iter().max().map_or(0, |m| m + 1)];
        let mut cols = vec![0; q.iter().max().map_or(0, |m| m + 1)];
        for (&a, &b) in p.iter().zip(q) {
            *cells.entry((a, b)).or_insert(0) += 1;
            rows[a] += 1;
            cols[b] += 1;
        }
        Ok(Contingency {
            n: p.len(),
            cells,
            rows,
            cols,
        })
    }
}

fn pairs(x: usize) -> u128 {
    let x = x as u128;
    x * x.saturating_sub(1) / 2
}

/// Fraction of element pairs on which both partitions agree.
pub fn rand_index(p: &[usize], q: &[usize]) -> Result<f64> {
    let t = Contingency::new(p, q)?;
    let total = pairs(t.n);
    let both: u128 = t.cells.values().map(|&c| pairs(c)).sum();
    let same_p: u128 = t.rows.iter().map(|&c| pairs(c)).sum();
    let same_q: u128 = t.cols.iter().map(|&c| pairs(c)).sum();
    Ok((total + 2 * both - same_p - same_q) as f64 / total as f64)
}

/// `H(P|Q) + H(Q|P)` in nats.
pub fn variation_of_information(p: &[usize], q: &[usize]) -> Result<f64> {
    let t = Contingency::new(p, q)?;
    let n = t.n as f64;
    let mut sum = KahanSum::default();
    for (&(a, b), &c) in &t.cells {
        let r = c as f64 / n;
        let pa = t.rows[a] as f64 / n;
        let qb = t.cols[b] as f64 / n;
        sum.add(-r * ((r / pa).ln() + (r / qb).ln()));
    }
    Ok(sum.value().max(0.0))
}

/// `Σ_R (|R|/N) max_R' IoU(R, R')` over ground-truth regions `R`.
pub fn segmentation_covering(gt: &[usize], pred: &[usize]) -> Result<f64> {
    let t = Contingency::new(gt, pred)?;
    let mut best = vec![0.0f64; t.rows.len()];
    for (&(a, b), &c) in &t.cells {
        let iou = c as f64 / (t.rows[a] + t.cols[b] - c) as f64;
        best[a] = best[a].max(iou);
    }
    let covered: f64 = t.rows.iter().zip(&best).map(|(&r, &b)| r as f64 * b).sum();
    Ok(covered / t.n as f64)
}

/// Mean nearest-neighbor distance `pred → gt` (accuracy) and `gt → pred`
/// (completeness).
pub fn accuracy_completeness(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<(f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidInput("accuracy / completeness need non-empty point sets".into()));
    }
    let mean_nn = |from: &[Vector3<f64>], to: &[Vector3<f64>]| {
        let tree = KdTree::new(to);
        let d = par::map_slice(from, |p| tree.nearest(p).map_or(0.0, |(_, d)| d));
        let mut s = KahanSum::default();
        d.iter().for_each(|&x| s.add(x));
        s.value() / from.len() as f64
    };
    Ok((mean_nn(pred, gt), mean_nn(gt, pred)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub ri: f64,
    pub voi: f64,
    pub sc: f64,
    pub accuracy: Option<f64>,
    pub completeness: Option<f64>,
    pub n_planes_pred: usize,
    pub n_planes_gt: usize,
    pub n_unassigned: usize,
}

impl MetricsReport {
    /// Partition metrics of `pred` against `gt`; geometry fields left empty.
    pub fn partition(gt: &[Option<u32>], pred: &[Option<u32>], mode: UnassignedMode) -> Result<Self> {
        let (g, p) = prepare(gt, pred, mode)?;
        let count = |l: &[Option<u32>]| {
            let mut ids: Vec<u32> = l.iter().flatten().copied().collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        };
        Ok(MetricsReport {
            ri: rand_index(&g, &p)?,
            voi: variation_of_information(&g, &p)?,
            sc: segmentation_covering(&g, &p)?,
            accuracy: None,
            completeness: None,
            n_planes_pred: count(pred),
            n_planes_gt: count(gt),
            n_unassigned: pred.iter().filter(|l| l.is_none()).count(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::field::write_bytes(path.as_ref(), self.to_json()?.as_bytes())
    }
}
