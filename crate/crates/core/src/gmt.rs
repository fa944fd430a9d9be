//! Gaussian mixture tree.
//!
//! Leaves are 3D Gaussians fitted to the lifted boundary pixels of merged
//! segments. Leaves are merged greedily: a node absorbs every later node whose
//! Bhattacharyya distance and descriptor dissimilarity fall under the
//! thresholds, and each resulting node becomes a child of the root, i.e. a
//! plane instance. Primitives are then assigned to the plane whose descriptor
//! gate they pass with the largest weighted likelihood.

use std::path::Path;

use nalgebra::{Cholesky, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CameraView, GaussianPrimitive};
use crate::linalg::{mean_and_covariance, normalize_in_place, sym_eigen3};
use crate::par;
use crate::renderer::RenderedMaps;
use crate::segfusion::SegmentLabelMap;
use crate::synth::neighbors4;

/// Regularization added to every leaf covariance (m²).
pub const LEAF_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNode {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub normal: Vector3<f64>,
    pub descriptor: Vec<f64>,
    pub leaf_count: usize,
    /// Arena indices of the two merged nodes, ascending; empty at leaves.
    pub children: Vec<usize>,
    /// Leaf-count-weighted moments of the leaf mixture below this node.
    pub extent_mean: Vector3<f64>,
    pub extent_cov: Matrix3<f64>,
}

impl GaussianNode {
    pub fn leaf(mean: Vector3<f64>, cov: Matrix3<f64>, normal: Vector3<f64>, descriptor: Vec<f64>) -> Self {
        GaussianNode {
            mean,
            cov,
            normal,
            descriptor,
            leaf_count: 1,
            children: Vec::new(),
            extent_mean: mean,
            extent_cov: cov,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmtConfig {
    /// Bhattacharyya merge threshold. Default 4; tested over {1, 2, 4, 8}.
    pub epsilon_b: f64,
    /// Descriptor merge threshold on `1 − ⟨z_i, z_j⟩`. Default 0.05; tested over {0.02, 0.05, 0.1}.
    pub epsilon_z: f64,
    /// Merged segments with fewer pixels produce no leaf.
    pub p_min: usize,
    /// Segments with fewer valid boundary pixels produce no leaf.
    pub min_boundary: usize,
    pub leaf_order: LeafOrder,
    /// Descriptor gate `⟨z, z_k⟩ ≥ 1 − θ_assign`; 2 admits every plane.
    pub theta_assign: f64,
    /// Weighted density below which a primitive is left unassigned.
    pub r_min: f64,
    /// Which node Gaussian enters `D_B` while the tree is built.
    pub merge_density: NodeDensity,
    /// Which plane Gaussian scores primitives during assignment.
    pub assign_density: NodeDensity,
}

impl Default for GmtConfig {
    fn default() -> Self {
        GmtConfig {
            epsilon_b: 4.0,
            epsilon_z: 0.05,
            p_min: 50,
            min_boundary: 8,
            leaf_order: LeafOrder::ExtentDescending,
            theta_assign: 2.0,
            r_min: 1e-9,
            merge_density: NodeDensity::Extent,
            assign_density: NodeDensity::Extent,
        }
    }
}

impl GmtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_b >= 0.0 && self.epsilon_z >= 0.0 && self.theta_assign >= 0.0 && self.r_min >= 0.0) {
            return Err(Error::Config("gmt thresholds must be non-negative".into()));
        }
        Ok(())
    }
}

/// Order in which the greedy merge visits leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafOrder {
    /// Trace of the covariance, largest first; ties by insertion index.
    ExtentDescending,
    ExtentAscending,
    Insertion,
}

/// Which Gaussian of a node stands in for it in distances and likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeDensity {
    /// Moments of the leaf mixture below the node.
    Extent,
    /// The merged `(μ, Σ)` of the node itself.
    Merged,
}

impl GaussianNode {
    pub fn moments(&self, kind: NodeDensity) -> (&Vector3<f64>, &Matrix3<f64>) {
        match kind {
            NodeDensity::Extent => (&self.extent_mean, &self.extent_cov),
            NodeDensity::Merged => (&self.mean, &self.cov),
        }
    }
}

/// Leaves of one view: one per merged segment with at least `p_min` pixels and
/// `min_boundary` valid boundary pixels. Boundary pixels are valid pixels that
/// touch the image border or a pixel with a different label.
pub fn build_leaves_view(view: &CameraView, merged: &SegmentLabelMap, maps: &RenderedMaps, cfg: &GmtConfig) -> Vec<GaussianNode> {
    let (w, h) = (merged.width, merged.height);
    let m = merged.count as usize;
    let k = maps.descriptor_dim;
    let mut pixels = vec![0usize; m];
    let mut boundary: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); m];
    let mut nsum = vec![Vector3::zeros(); m];
    let mut zsum = vec![vec![0.0; k]; m];
    for p in 0..w * h {
        let l = merged.labels[p];
        if l == 0 {
            continue;
        }
        let i = l as usize - 1;
        pixels[i] += 1;
        if !maps.valid[p] {
            continue;
        }
        nsum[i] += maps.normal_at(p);
        for (a, b) in zsum[i].iter_mut().zip(maps.descriptor_at(p)) {
            *a += b;
        }
        let nb = neighbors4(p, w, h);
        let edge = nb.iter().any(|q| q.is_none_or(|q| merged.labels[q] != l));
        if edge {
            let cam = view.backproject((p % w) as f64, (p / w) as f64, maps.depth[p]);
            boundary[i].push(view.to_world(&cam));
        }
    }
    let rt = view.rotation().transpose();
    let mut leaves = Vec::new();
    for i in 0..m {
        if pixels[i] < cfg.p_min || boundary[i].len() < cfg.min_boundary.max(2) {
            continue;
        }
        let (mean, cov) = mean_and_covariance(&boundary[i]).expect("non-empty");
        let Some(normal) = (rt * nsum[i]).try_normalize(1e-12) else { continue };
        let mut z = zsum[i].clone();
        if normalize_in_place(&mut z) <= 1e-12 {
            continue;
        }
        leaves.push(GaussianNode::leaf(mean, cov + Matrix3::identity() * LEAF_EPSILON, normal, z));
    }
    leaves
}

/// Leaves of all views, in view order.
pub fn build_leaves(
    views: &[CameraView],
    merged: &[SegmentLabelMap],
    maps: &[RenderedMaps],
    cfg: &GmtConfig,
) -> Vec<GaussianNode> {
    par::map_range(views.len(), |v| build_leaves_view(&views[v], &merged[v], &maps[v], cfg)).concat()
}

fn spd_cholesky(m: &Matrix3<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::U3>> {
    Cholesky::new(*m).ok_or_else(|| Error::Invariant {
        stage: "gmt",
        invariant: format!("{what} covariance is not positive definite"),
    })
}

fn log_det(ch: &Cholesky<f64, nalgebra::U3>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `D_B = ⅛Δμᵀ Σ̄⁻¹ Δμ + ½ ln(det Σ̄ / √(det Σᵢ det Σⱼ))` with `Σ̄ = (Σᵢ + Σⱼ)/2`.
/// Rounding below zero is clamped.
pub fn bhattacharyya(mi: &Vector3<f64>, ci: &Matrix3<f64>, mj: &Vector3<f64>, cj: &Matrix3<f64>) -> Result<f64> {
    let avg = (ci + cj) * 0.5;
    let ch = spd_cholesky(&avg, "averaged")?;
    let li = log_det(&spd_cholesky(ci, "first")?);
    let lj = log_det(&spd_cholesky(cj, "second")?);
    let d = mi - mj;
    let maha = d.dot(&ch.solve(&d));
    let value = maha / 8.0 + 0.5 * (log_det(&ch) - 0.5 * (li + lj));
    Ok(value.max(0.0))
}

pub fn node_distance(a: &GaussianNode, b: &GaussianNode, kind: NodeDensity) -> Result<f64> {
    let (ma, ca) = a.moments(kind);
    let (mb, cb) = b.moments(kind);
    bhattacharyya(ma, ca, mb, cb)
}

/// `Σ_p = Σⱼ(Σᵢ+Σⱼ)⁻¹Σᵢ`, `μ_p = Σⱼ(Σᵢ+Σⱼ)⁻¹μᵢ + Σᵢ(Σᵢ+Σⱼ)⁻¹μⱼ`. The covariance is
/// evaluated as the average of both orderings, which is the same matrix in
/// exact arithmetic and keeps the result symmetric and order-independent.
/// Normal and descriptor are leaf-count-weighted means, renormalized.
pub fn merge_nodes(a: &GaussianNode, ia: usize, b: &GaussianNode, ib: usize) -> Result<GaussianNode> {
    let sum = a.cov + b.cov;
    let ch = spd_cholesky(&sum, "summed")?;
    let s_inv = ch.inverse();
    let cov = (b.cov * s_inv * a.cov + a.cov * s_inv * b.cov) * 0.5;
    let mean = b.cov * (s_inv * a.mean) + a.cov * (s_inv * b.mean);
    let (wa, wb) = (a.leaf_count as f64, b.leaf_count as f64);
    let extent_mean = (a.extent_mean * wa + b.extent_mean * wb) / (wa + wb);
    let (da, db) = (a.extent_mean - extent_mean, b.extent_mean - extent_mean);
    let extent_cov = ((a.extent_cov + da * da.transpose()) * wa + (b.extent_cov + db * db.transpose()) * wb) / (wa + wb);
    let normal = (a.normal * wa + b.normal * wb).try_normalize(1e-12).unwrap_or(a.normal);
    let mut descriptor: Vec<f64> = a.descriptor.iter().zip(&b.descriptor).map(|(x, y)| x * wa + y * wb).collect();
    if normalize_in_place(&mut descriptor) <= 1e-12 {
        descriptor = a.descriptor.clone();
    }
    Ok(GaussianNode {
        mean,
        cov,
        normal,
        descriptor,
        leaf_count: a.leaf_count + b.leaf_count,
        extent_mean,
        extent_cov,
        children: vec![ia.min(ib), ia.max(ib)],
    })
}

/// Tree arena and the root's children.
#[derive(Debug, Clone)]
pub struct MixtureTree {
    /// Leaves occupy `0..leaf_count`, merged nodes follow.
    pub nodes: Vec<GaussianNode>,
    pub leaf_count: usize,
    /// Arena indices of the root's children, in creation order.
    pub roots: Vec<usize>,
    /// Mixture weight of each root child, proportional to its leaf count.
    pub weights: Vec<f64>,
}

impl MixtureTree {
    /// Leaf indices below `node`.
    pub fn leaves_under(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if n < self.leaf_count {
                out.push(n);
            } else {
                stack.extend(self.nodes[n].children.iter().rev());
            }
        }
        out.sort_unstable();
        out
    }
}

fn leaf_visit_order(leaves: &[GaussianNode], order: LeafOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..leaves.len()).collect();
    match order {
        LeafOrder::Insertion => {}
        LeafOrder::ExtentDescending => idx.sort_by(|&a, &b| leaves[b].cov.trace().total_cmp(&leaves[a].cov.trace()).then(a.cmp(&b))),
        LeafOrder::ExtentAscending => idx.sort_by(|&a, &b| leaves[a].cov.trace().total_cmp(&leaves[b].cov.trace()).then(a.cmp(&b))),
    }
    idx
}

/// Greedy bottom-up merge. Visiting leaves in `order`, each leaf not yet
/// absorbed absorbs every later unabsorbed leaf that passes both tests against
/// the accumulated node, and the accumulated node becomes a root child.
pub fn build_tree(
    leaves: Vec<GaussianNode>,
    epsilon_b: f64,
    epsilon_z: f64,
    order: LeafOrder,
    density: NodeDensity,
) -> Result<MixtureTree> {
    if leaves.is_empty() {
        return Err(Error::InvalidInput("the mixture tree needs at least one leaf".into()));
    }
    let visit = leaf_visit_order(&leaves, order);
    let leaf_count = leaves.len();
    let mut nodes = leaves;
    let mut absorbed = vec![false; leaf_count];
    let mut roots = Vec::new();
    for (pos, &i) in visit.iter().enumerate() {
        if absorbed[i] {
            continue;
        }
        absorbed[i] = true;
        let mut current = i;
        for &j in &visit[pos + 1..] {
            if absorbed[j] {
                continue;
            }
            let similarity = crate::linalg::dot(&nodes[current].descriptor, &nodes[j].descriptor);
            if 1.0 - similarity > epsilon_z {
                continue;
            }
            if node_distance(&nodes[current], &nodes[j], density)? > epsilon_b {
                continue;
            }
            let parent = merge_nodes(&nodes[current], current, &nodes[j], j)?;
            nodes.push(parent);
            absorbed[j] = true;
            current = nodes.len() - 1;
        }
        roots.push(current);
    }
    let total: usize = roots.iter().map(|&r| nodes[r].leaf_count).sum();
    let weights = roots.iter().map(|&r| nodes[r].leaf_count as f64 / total as f64).collect();
    Ok(MixtureTree {
        nodes,
        leaf_count,
        roots,
        weights,
    })
}

/// One plane instance: a root child and its mixture weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneNode {
    pub id: u32,
    pub pi: f64,
    pub node: GaussianNode,
}

pub fn plane_nodes(tree: &MixtureTree) -> Vec<PlaneNode> {
    tree.roots
        .iter()
        .zip(&tree.weights)
        .enumerate()
        .map(|(id, (&r, &pi))| PlaneNode {
            id: id as u32,
            pi,
            node: tree.nodes[r].clone(),
        })
        .collect()
}

struct Density {
    ln_pi: f64,
    mean: Vector3<f64>,
    chol: Cholesky<f64, nalgebra::U3>,
    ln_norm: f64,
}

impl Density {
    fn new(p: &PlaneNode, kind: NodeDensity) -> Result<Self> {
        let (mean, cov) = p.node.moments(kind);
        let chol = spd_cholesky(cov, "plane")?;
        let ln_norm = -0.5 * (log_det(&chol) + 3.0 * (2.0 * std::f64::consts::PI).ln());
        Ok(Density {
            ln_pi: p.pi.ln(),
            mean: *mean,
            chol,
            ln_norm,
        })
    }

    /// `ln π + ln N(x | μ, Σ)`.
    fn score(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.mean;
        self.ln_pi + self.ln_norm - 0.5 * d.dot(&self.chol.solve(&d))
    }
}

/// Labels every primitive with a plane id or `None`.
///
/// Candidates are planes with `⟨z, z_k⟩ ≥ 1 − θ_assign`; the label is the
/// candidate with the largest `ln π_k + ln N(μ | μ_k, Σ_k)`, with `(μ_k, Σ_k)`
/// chosen by `density`. Without candidates the overall best plane is used. The
/// primitive stays unassigned when the chosen plane's weighted density is below
/// `r_min`.
pub fn assign_primitives(
    prims: &[GaussianPrimitive],
    planes: &[PlaneNode],
    theta_assign: f64,
    r_min: f64,
    density: NodeDensity,
) -> Result<Vec<Option<u32>>> {
    let dens: Vec<Density> = planes.iter().map(|p| Density::new(p, density)).collect::<Result<_>>()?;
    let floor = r_min.ln();
    Ok(par::map_slice(prims, |prim| {
        let mut best_gated: Option<(f64, u32)> = None;
        let mut best_any: Option<(f64, u32)> = None;
        for (p, d) in planes.iter().zip(&dens) {
            let s = d.score(&prim.center);
            if best_any.is_none_or(|(b, _)| s > b) {
                best_any = Some((s, p.id));
            }
            if crate::linalg::dot(&prim.descriptor, &p.node.descriptor) >= 1.0 - theta_assign
                && best_gated.is_none_or(|(b, _)| s > b)
            {
                best_gated = Some((s, p.id));
            }
        }
        best_gated.or(best_any).filter(|(s, _)| *s >= floor).map(|(_, id)| id)
    }))
}

/// Least-squares plane `n·x + offset = 0` through a plane's members.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub members: usize,
    pub rms: f64,
}

/// PCA fit per plane id in `0..plane_count`. The normal is the least-variance
/// direction, oriented toward the mean member normal. Planes with fewer than
/// three members get `None`.
pub fn fit_plane_params(prims: &[GaussianPrimitive], labels: &[Option<u32>], plane_count: usize) -> Vec<Option<PlaneFit>> {
    let centers: Vec<Vector3<f64>> = prims.iter().map(|p| p.center).collect();
    let normals: Vec<Vector3<f64>> = prims.iter().map(|p| p.normal).collect();
    fit_planes_to_points(&centers, Some(&normals), labels, plane_count)
}

/// As [`fit_plane_params`] on bare points; without normals the sign follows
/// [`crate::linalg::canonical_sign`].
pub fn fit_planes_to_points(
    points: &[Vector3<f64>],
    normals: Option<&[Vector3<f64>]>,
    labels: &[Option<u32>],
    plane_count: usize,
) -> Vec<Option<PlaneFit>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); plane_count];
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            if (*l as usize) < plane_count {
                members[*l as usize].push(i);
            }
        }
    }
    members
        .iter()
        .enumerate()
        .map(|(id, m)| {
            if m.len() < 3 {
                log::warn!("plane {id} has {} members; dropped from geometric evaluation", m.len());
                return None;
            }
            let pts: Vec<Vector3<f64>> = m.iter().map(|&i| points[i]).collect();
            let (centroid, cov) = mean_and_covariance(&pts)?;
            let mut n = sym_eigen3(&cov).vectors[0];
            match normals {
                Some(normals) => {
                    let mean_normal: Vector3<f64> = m.iter().map(|&i| normals[i]).sum();
                    if n.dot(&mean_normal) < 0.0 {
                        n = -n;
                    }
                }
                None => n = crate::linalg::canonical_sign(n),
            }
            let offset = -n.dot(&centroid);
            let sq: f64 = pts.iter().map(|p| (n.dot(p) + offset).powi(2)).sum();
            Some(PlaneFit {
                normal: n,
                offset,
                members: m.len(),
                rms: (sq / pts.len() as f64).sqrt(),
            })
        })
        .collect()
}

/// Final plane instances with fits and per-primitive labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSet {
    pub planes: Vec<PlaneNode>,
    pub fits: Vec<Option<PlaneFit>>,
    pub labels: Vec<Option<u32>>,
}

impl PlaneSet {
    pub fn unassigned(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// JSON export. Planes without a fit report the node normal and the offset
    /// through the node mean.
    pub fn to_json(&self, labels_ply: &str) -> Result<String> {
        let planes: Vec<PlaneRecord> = self
            .planes
            .iter()
            .zip(&self.fits)
            .map(|(p, fit)| {
                let (normal, offset) = match fit {
                    Some(f) => (f.normal, f.offset),
                    None => (p.node.normal, -p.node.normal.dot(&p.node.mean)),
                };
                PlaneRecord {
                    id: p.id,
                    pi: p.pi,
                    mu: p.node.mean.into(),
                    cov: p.node.cov.transpose().as_slice().try_into().expect("3x3"),
                    normal: normal.into(),
                    offset,
                    leaf_count: p.node.leaf_count,
                    fitted: fit.is_some(),
                }
            })
            .collect();
        let doc = PlaneSetRecord {
            planes,
            labels_ply: labels_ply.to_string(),
        };
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    pub fn save(&self, json_path: impl AsRef<Path>, labels_ply: impl AsRef<Path>, centers: &[Vector3<f64>]) -> Result<()> {
        let ply = labels_ply.as_ref();
        let name = ply.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        crate::field::write_bytes(json_path.as_ref(), self.to_json(&name)?.as_bytes())?;
        crate::field::save_labeled_points(centers, &self.labels, ply)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneRecord {
    id: u32,
    pi: f64,
    mu: [f64; 3],
    /// Row-major.
    cov: [f64; 9],
    normal: [f64; 3],
    offset: f64,
    leaf_count: usize,
    fitted: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneSetRecord {
    planes: Vec<PlaneRecord>,
    labels_ply: String,
}
