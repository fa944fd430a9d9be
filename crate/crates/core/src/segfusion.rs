//! Region adjacency graph merging of raw 2D segments.
//!
//! Raw segments (one label image per view, 0 = invalid) become graph nodes
//! carrying their mean rendered normal and mean planar distance. Edges join
//! 4-adjacent segments; edges between segments on different planes are cut by
//! an angle and a planar-distance threshold, and the remaining connected
//! components become the merged labels.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::CameraView;
use crate::imageio::{read_pgm, write_pgm16};
use crate::renderer::RenderedMaps;
use crate::synth::neighbors4;

/// Per-view integer label image. 0 marks invalid pixels; valid labels are
/// dense in `1..=count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: u32,
}

impl SegmentLabelMap {
    /// Validates dimensions and label density.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "label map has {} pixels, expected {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        let count = labels.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; count as usize + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=count as usize).find(|&l| !seen[l]) {
            return Err(Error::InvalidInput(format!("label {missing} is unused; labels must be dense")));
        }
        Ok(SegmentLabelMap {
            width,
            height,
            labels,
            count,
        })
    }

    /// Renumbers arbitrary ids densely in ascending id order (0 stays invalid).
    pub fn from_sparse(width: usize, height: usize, ids: &[u32]) -> Result<Self> {
        let mut distinct: Vec<u32> = ids.iter().copied().filter(|&i| i != 0).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let labels = ids
            .iter()
            .map(|&i| {
                if i == 0 {
                    0
                } else {
                    distinct.binary_search(&i).expect("present") as u32 + 1
                }
            })
            .collect();
        SegmentLabelMap::new(width, height, labels)
    }

    pub fn all_invalid(width: usize, height: usize) -> Self {
        SegmentLabelMap {
            width,
            height,
            labels: vec![0; width * height],
            count: 0,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Pixels per label, indexed by label (entry 0 counts invalid pixels).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.count as usize + 1];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.count > u16::MAX as u32 {
            return Err(Error::InvalidInput(format!("{} segments do not fit a 16-bit PGM", self.count)));
        }
        let data: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        write_pgm16(path, self.width, self.height, &data)
    }

    /// Loads a PGM label image; ids need not be dense.
    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, data) = read_pgm(path)?;
        let ids: Vec<u32> = data.into_iter().map(u32::from).collect();
        SegmentLabelMap::from_sparse(w, h, &ids)
    }
}

/// Thresholds for graph construction and cutting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegfusionConfig {
    /// Maximum angle between the mean normals of merged neighbors (degrees).
    pub theta_n_deg: f64,
    /// Maximum planar-distance difference of merged neighbors (meters).
    pub theta_d: f64,
    /// Segments whose mean angular deviation from their mean normal exceeds
    /// this are ignored (degrees).
    pub max_normal_spread_deg: f64,
}

impl Default for SegfusionConfig {
    fn default() -> Self {
        SegfusionConfig {
            theta_n_deg: 20.0,
            theta_d: 0.10,
            max_normal_spread_deg: 25.0,
        }
    }
}

impl SegfusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_n_deg >= 0.0 && self.theta_d >= 0.0 && self.max_normal_spread_deg >= 0.0) {
            return Err(Error::Config("segfusion thresholds must be non-negative".into()));
        }
        Ok(())
    }
}

/// Planar distance `d·((n₁/fx)(u0−u) + (n₂/fy)(v0−v) − n₃)` per pixel, using
/// camera-frame normals. Equals `−n·p` for the back-projected point `p`, the
/// offset of the plane `n·x + d = 0` through `p`. `None` where invalid.
pub fn planar_distance_map(depth: &[f64], normal: &[f64], valid: &[bool], view: &CameraView) -> Vec<Option<f64>> {
    let w = view.width;
    (0..depth.len())
        .map(|p| {
            if !valid[p] {
                return None;
            }
            let (u, v) = ((p % w) as f64, (p / w) as f64);
            let n = &normal[3 * p..3 * p + 3];
            let d = depth[p] * ((n[0] / view.fx) * (view.u0 - u) + (n[1] / view.fy) * (view.v0 - v) - n[2]);
            d.is_finite().then_some(d)
        })
        .collect()
}

/// [`planar_distance_map`] on rendered maps.
pub fn planar_distance_from_render(maps: &RenderedMaps, view: &CameraView) -> Vec<Option<f64>> {
    planar_distance_map(&maps.depth, &maps.normal, &maps.valid, view)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RagNode {
    pub label: u32,
    /// Pixels carrying this label.
    pub pixels: usize,
    /// Pixels that also have a valid normal and planar distance.
    pub measured: usize,
    pub normal: Vector3<f64>,
    pub distance: f64,
    /// Mean angle between pixel normals and `normal` (radians).
    pub normal_spread: f64,
    pub ignored: bool,
}

#[derive(Debug, Clone)]
pub struct Rag {
    pub width: usize,
    pub height: usize,
    /// Node `i` describes label `i + 1`.
    pub nodes: Vec<RagNode>,
    /// Label pairs `(a, b)` with `a < b`.
    pub edges: BTreeSet<(u32, u32)>,
    labels: Vec<u32>,
}

/// Builds the region adjacency graph of a raw label map.
pub fn build_rag(
    labels: &SegmentLabelMap,
    normal: &[f64],
    distance: &[Option<f64>],
    max_normal_spread: f64,
) -> Rag {
    let (w, h) = (labels.width, labels.height);
    let m = labels.count as usize;
    let mut pixels = vec![0usize; m];
    let mut measured = vec![0usize; m];
    let mut nsum = vec![Vector3::zeros(); m];
    let mut dsum = vec![0.0; m];
    let mut edges = BTreeSet::new();
    for p in 0..w * h {
        let l = labels.labels[p];
        if l == 0 {
            continue;
        }
        let i = l as usize - 1;
        pixels[i] += 1;
        if let Some(d) = distance[p] {
            let n = Vector3::new(normal[3 * p], normal[3 * p + 1], normal[3 * p + 2]);
            if n.norm_squared() > 0.0 {
                measured[i] += 1;
                nsum[i] += n;
                dsum[i] += d;
            }
        }
        // Right and down neighbors cover every adjacent pair once.
        for q in [neighbors4(p, w, h)[1], neighbors4(p, w, h)[3]].into_iter().flatten() {
            let lq = labels.labels[q];
            if lq != 0 && lq != l {
                edges.insert((l.min(lq), l.max(lq)));
            }
        }
    }
    let means: Vec<Option<Vector3<f64>>> = nsum.iter().map(|s| s.try_normalize(1e-12)).collect();
    let mut spread = vec![0.0; m];
    for p in 0..w * h {
        let l = labels.labels[p];
        if l == 0 || distance[p].is_none() {
            continue;
        }
        let i = l as usize - 1;
        let n = Vector3::new(normal[3 * p], normal[3 * p + 1], normal[3 * p + 2]);
        if let (Some(mean), Some(n)) = (means[i], n.try_normalize(1e-12)) {
            spread[i] += mean.dot(&n).clamp(-1.0, 1.0).acos();
        }
    }
    let nodes = (0..m)
        .map(|i| {
            let normal_spread = if measured[i] > 0 { spread[i] / measured[i] as f64 } else { 0.0 };
            RagNode {
                label: i as u32 + 1,
                pixels: pixels[i],
                measured: measured[i],
                normal: means[i].unwrap_or_else(Vector3::zeros),
                distance: if measured[i] > 0 { dsum[i] / measured[i] as f64 } else { 0.0 },
                normal_spread,
                ignored: means[i].is_none() || normal_spread > max_normal_spread,
            }
        })
        .collect();
    Rag {
        width: w,
        height: h,
        nodes,
        edges,
        labels: labels.labels.clone(),
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Cuts edges whose normals differ by more than `theta_n` (radians) or whose
/// planar distances differ by more than `theta_d`, then labels connected
/// components densely in order of their smallest raw label. Ignored segments
/// become invalid.
pub fn partition_rag(rag: &Rag, theta_n: f64, theta_d: f64) -> SegmentLabelMap {
    let m = rag.nodes.len();
    let mut parent: Vec<usize> = (0..m).collect();
    for &(a, b) in &rag.edges {
        let (na, nb) = (&rag.nodes[a as usize - 1], &rag.nodes[b as usize - 1]);
        if na.ignored || nb.ignored {
            continue;
        }
        let angle = na.normal.dot(&nb.normal).clamp(-1.0, 1.0).acos();
        if angle <= theta_n && (na.distance - nb.distance).abs() <= theta_d {
            let (ra, rb) = (find(&mut parent, a as usize - 1), find(&mut parent, b as usize - 1));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut remap = vec![0u32; m];
    let mut next = 0u32;
    for i in 0..m {
        if rag.nodes[i].ignored {
            continue;
        }
        let r = find(&mut parent, i);
        if remap[r] == 0 {
            next += 1;
            remap[r] = next;
        }
        remap[i] = remap[r];
    }
    let labels = rag
        .labels
        .iter()
        .map(|&l| if l == 0 { 0 } else { remap[l as usize - 1] })
        .collect();
    SegmentLabelMap {
        width: rag.width,
        height: rag.height,
        labels,
        count: next,
    }
}

/// Builds the graph from rendered maps and partitions it in one call.
pub fn fuse_view(raw: &SegmentLabelMap, maps: &RenderedMaps, view: &CameraView, cfg: &SegfusionConfig) -> SegmentLabelMap {
    let distance = planar_distance_from_render(maps, view);
    let rag = build_rag(raw, &maps.normal, &distance, cfg.max_normal_spread_deg.to_radians());
    partition_rag(&rag, cfg.theta_n_deg.to_radians(), cfg.theta_d)
}

/// One-hot regression targets. Row `r` is pixel `pixels[r]` with its single 1
/// in column `columns[r]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Targets {
    pub pixels: Vec<usize>,
    pub columns: Vec<u32>,
    pub segments: usize,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Dense `n × m` matrix.
    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut y = nalgebra::DMatrix::zeros(self.len(), self.segments);
        for (r, &c) in self.columns.iter().enumerate() {
            y[(r, c as usize)] = 1.0;
        }
        y
    }
}

/// Targets over the valid pixels of `merged`, optionally restricted by `mask`.
pub fn one_hot_targets(merged: &SegmentLabelMap, mask: Option<&[bool]>) -> Targets {
    let mut pixels = Vec::new();
    let mut columns = Vec::new();
    for (p, &l) in merged.labels.iter().enumerate() {
        if l == 0 || mask.is_some_and(|m| !m[p]) {
            continue;
        }
        pixels.push(p);
        columns.push(l - 1);
    }
    Targets {
        pixels,
        columns,
        segments: merged.count as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(w: usize, h: usize) -> CameraView {
        CameraView::look_at(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, -1.0, 0.0),
            50.0,
            50.0,
            w,
            h,
        )
        .unwrap()
    }

    fn flat(n: [f64; 3], pixels: usize) -> Vec<f64> {
        (0..pixels).flat_map(|_| n).collect()
    }

    #[test]
    fn principal_point_distance() {
        let v = view(9, 9);
        let p = 4 * 9 + 4;
        let mut depth = vec![0.0; 81];
        depth[p] = 2.0;
        let normal = flat([0.0, 0.0, -1.0], 81);
        let mut valid = vec![false; 81];
        valid[p] = true;
        let d = planar_distance_map(&depth, &normal, &valid, &v);
        assert_eq!(d[p], Some(2.0));
        assert_eq!(d[0], None);
    }

    #[test]
    fn tilted_plane_distance_is_constant() {
        // Plane n·x + 1.5 = 0 in camera coordinates, intersected per pixel ray.
        let v = view(16, 12);
        let n = Vector3::new(0.3, -0.2, -1.0).normalize();
        let (mut depth, mut normal) = (Vec::new(), Vec::new());
        for p in 0..16 * 12 {
            let ray = Vector3::new(((p % 16) as f64 - v.u0) / v.fx, ((p / 16) as f64 - v.v0) / v.fy, 1.0);
            depth.push(-1.5 / n.dot(&ray));
            normal.extend_from_slice(n.as_slice());
        }
        let d = planar_distance_map(&depth, &normal, &vec![true; 192], &v);
        assert!(d.iter().all(|x| (x.unwrap() - 1.5).abs() < 1e-12));
    }

    fn rag_of(w: usize, h: usize, labels: Vec<u32>) -> Rag {
        let map = SegmentLabelMap::new(w, h, labels).unwrap();
        let normal = flat([0.0, 0.0, -1.0], w * h);
        let distance = vec![Some(1.0); w * h];
        build_rag(&map, &normal, &distance, 25f64.to_radians())
    }

    #[test]
    fn side_by_side_segments_share_one_edge() {
        let rag = rag_of(4, 2, vec![1, 1, 2, 2, 1, 1, 2, 2]);
        assert_eq!(rag.edges.iter().copied().collect::<Vec<_>>(), vec![(1, 2)]);
    }

    #[test]
    fn invalid_band_separates_segments() {
        let rag = rag_of(5, 1, vec![1, 1, 0, 2, 2]);
        assert!(rag.edges.is_empty());
    }

    #[test]
    fn checkerboard_has_no_diagonal_edges() {
        let rag = rag_of(2, 2, vec![1, 2, 3, 4]);
        assert_eq!(rag.edges.len(), 4);
        assert!(!rag.edges.contains(&(1, 4)));
        assert!(!rag.edges.contains(&(2, 3)));
    }

    #[test]
    fn coplanar_cells_merge() {
        let rag = rag_of(6, 1, vec![3, 3, 1, 1, 2, 2]);
        let merged = partition_rag(&rag, 20f64.to_radians(), 0.1);
        assert_eq!(merged.count, 1);
        assert!(merged.labels.iter().all(|&l| l == 1));
    }

    fn two_region(n_right: [f64; 3], d_right: f64) -> SegmentLabelMap {
        let map = SegmentLabelMap::new(4, 1, vec![1, 1, 2, 2]).unwrap();
        let mut normal = flat([0.0, 0.0, -1.0], 2);
        normal.extend(flat(n_right, 2));
        let distance = vec![Some(1.0), Some(1.0), Some(d_right), Some(d_right)];
        let rag = build_rag(&map, &normal, &distance, 25f64.to_radians());
        partition_rag(&rag, 20f64.to_radians(), 0.10)
    }

    #[test]
    fn perpendicular_planes_are_cut() {
        assert_eq!(two_region([1.0, 0.0, 0.0], 1.0).count, 2);
    }

    #[test]
    fn parallel_planes_half_a_meter_apart_are_cut() {
        assert_eq!(two_region([0.0, 0.0, -1.0], 1.5).count, 2);
        assert_eq!(two_region([0.0, 0.0, -1.0], 1.05).count, 1);
    }

    #[test]
    fn noisy_segment_is_ignored() {
        let map = SegmentLabelMap::new(2, 1, vec![1, 1]).unwrap();
        let normal = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let rag = build_rag(&map, &normal, &[Some(1.0), Some(1.0)], 25f64.to_radians());
        assert!(rag.nodes[0].ignored);
        assert_eq!(partition_rag(&rag, 0.35, 0.1).labels, vec![0, 0]);
    }

    #[test]
    fn merged_labels_follow_smallest_raw_label() {
        let rag = rag_of(5, 1, vec![2, 2, 0, 1, 1]);
        let merged = partition_rag(&rag, 0.35, 0.1);
        assert_eq!(merged.labels, vec![2, 2, 0, 1, 1]);
    }

    #[test]
    fn targets_skip_invalid_pixels() {
        let map = SegmentLabelMap::new(4, 3, vec![1, 1, 2, 0, 2, 2, 1, 0, 1, 2, 1, 1]).unwrap();
        let t = one_hot_targets(&map, None);
        assert_eq!(t.len(), 10);
        let y = t.matrix();
        assert_eq!((y.nrows(), y.ncols()), (10, 2));
        assert!(y.row_iter().all(|r| r.sum() == 1.0));
    }

    #[test]
    fn single_segment_targets_are_ones() {
        let map = SegmentLabelMap::new(3, 1, vec![1, 1, 1]).unwrap();
        let y = one_hot_targets(&map, None).matrix();
        assert_eq!(y, nalgebra::DMatrix::from_element(3, 1, 1.0));
    }

    #[test]
    fn sparse_ids_are_densified() {
        let map = SegmentLabelMap::from_sparse(4, 1, &[0, 7, 3, 7]).unwrap();
        assert_eq!(map.labels, vec![0, 2, 1, 2]);
        assert!(SegmentLabelMap::new(2, 1, vec![2, 2]).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("masks/view_0.pgm");
        let map = SegmentLabelMap::new(3, 2, vec![0, 1, 2, 2, 1, 3]).unwrap();
        map.save_pgm(&p).unwrap();
        assert_eq!(SegmentLabelMap::load_pgm(&p).unwrap(), map);
    }
}
