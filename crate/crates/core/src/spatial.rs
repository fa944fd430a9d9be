//! Exact k-nearest-neighbor search over 3D points with a kd-tree.
//!
//! Neighbors are ordered by `(squared distance, index)`, so duplicate
//! coordinates resolve deterministically by index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            let p = &self.points[i as usize];
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let axis = extent.imax();
        if extent[axis] <= 0.0 {
            // All coincident: keep as one (possibly large) leaf.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid] as usize][axis];
        self.nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id]
        {
            *l = left;
            *r = right;
        }
        id
    }

    /// The `k` nearest points to `query`, sorted by `(distance, index)`.
    /// `exclude` skips one index (the query point itself).
    pub fn knn(&self, query: &Vector3<f64>, k: usize, exclude: Option<u32>) -> Vec<(u32, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2.sqrt())).collect()
    }

    /// Nearest point and its distance. `None` for an empty tree.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(u32, f64)> {
        self.knn(query, 1, None).into_iter().next()
    }

    fn search(
        &self,
        node: usize,
        q: &Vector3<f64>,
        k: usize,
        exclude: Option<u32>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = Candidate {
                        dist2: (self.points[i as usize] - q).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                // `<=` keeps equal-distance candidates with smaller indices reachable.
                if heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |c| c.dist2) {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(points: &[Vector3<f64>], q: usize, k: usize) -> Vec<u32> {
        let mut all: Vec<(f64, u32)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != q)
            .map(|(i, p)| ((p - points[q]).norm_squared(), i as u32))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn grid_with_many_ties_matches_brute_force() {
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..3 {
                    pts.push(Vector3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let tree = KdTree::new(&pts);
        for q in 0..pts.len() {
            let got: Vec<u32> = tree.knn(&pts[q], 7, Some(q as u32)).into_iter().map(|x| x.0).collect();
            assert_eq!(got, brute(&pts, q, 7), "query {q}");
        }
    }

    #[test]
    fn coincident_points() {
        let pts = vec![Vector3::new(1.0, 1.0, 1.0); 40];
        let tree = KdTree::new(&pts);
        let got: Vec<u32> = tree.knn(&pts[5], 3, Some(5)).into_iter().map(|x| x.0).collect();
        assert_eq!(got, vec![0, 1, 2]);
    }
}
