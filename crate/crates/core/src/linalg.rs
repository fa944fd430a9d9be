//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

/// Eigen-decomposition of a symmetric 3x3 matrix.
///
/// Eigenvalues are sorted ascending; each eigenvector's largest-magnitude
/// component is made positive so the result is deterministic.
#[derive(Debug, Clone, Copy)]
pub struct SymEigen3 {
    pub values: [f64; 3],
    pub vectors: [Vector3<f64>; 3],
}

pub fn sym_eigen3(m: &Matrix3<f64>) -> SymEigen3 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut values = [0.0; 3];
    let mut vectors = [Vector3::zeros(); 3];
    for (slot, &idx) in order.iter().enumerate() {
        values[slot] = eig.eigenvalues[idx];
        vectors[slot] = canonical_sign(eig.eigenvectors.column(idx).into_owned());
    }
    SymEigen3 { values, vectors }
}

/// Flips `v` so that its largest-magnitude component is positive.
pub fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut best = 0;
    for i in 1..3 {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

/// Normalizes `v` in place. Returns the original norm.
pub fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Mean and population covariance of a point set. `None` for an empty set.
pub fn mean_and_covariance(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Matrix3<f64>)> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    Some((mean, cov / n))
}

/// Kahan-compensated sum, used where many small terms are accumulated.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}
