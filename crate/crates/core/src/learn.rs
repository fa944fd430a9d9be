//! Descriptor and normal learning.
//!
//! Per view, rendered descriptors are regressed onto one-hot segment targets in
//! closed form, and the L1 residual is back-propagated through the blend
//! weights with the regression weights held fixed. Normals follow a cosine loss
//! against supervision normals. The recurrent mean-shift pulls descriptors of
//! the whole field toward their modes on the unit sphere.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GaussianPrimitive;
use crate::linalg::{dot, normalize_in_place, KahanSum};
use crate::par;
use crate::renderer::PixelWeights;
use crate::segfusion::Targets;

/// Largest field for which the dense `N × N` mean-shift kernel is allowed.
pub const EXACT_MEAN_SHIFT_LIMIT: usize = 20_000;

#[derive(Debug, Clone)]
pub struct RegressionSolve {
    /// `(k + 1) × m`; the last row multiplies the bias column.
    pub weights: DMatrix<f64>,
    /// `n × m` predictions `[Z | 1]·Ŵ`.
    pub predictions: DMatrix<f64>,
    pub lambda: f64,
    pub penalize_bias: bool,
    /// `Σᵢ ‖yᵢ − ŷᵢ‖₁`.
    pub loss: f64,
    /// Ratio of extreme eigenvalues of the regularized Gram matrix.
    pub condition: f64,
}

/// Design matrix `[Z | 1]`.
pub fn design_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = z.shape();
    let mut a = DMatrix::from_element(n, k + 1, 1.0);
    a.view_mut((0, 0), (n, k)).copy_from(z);
    a
}

fn penalty(k: usize, lambda: f64, penalize_bias: bool) -> DMatrix<f64> {
    let mut p = DMatrix::identity(k + 1, k + 1) * lambda;
    if !penalize_bias {
        p[(k, k)] = 0.0;
    }
    p
}

/// Solves `Ŵ = ([Z|1]ᵀ[Z|1] + λP)⁻¹[Z|1]ᵀY`, where `P` is the identity, or the
/// identity without the bias entry when `penalize_bias` is false.
pub fn solve_regression(z: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, penalize_bias: bool) -> Result<RegressionSolve> {
    let (n, k) = z.shape();
    if n == 0 || y.ncols() == 0 || y.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "regression needs n ≥ 1 rows and m ≥ 1 targets (got Z {n}x{k}, Y {}x{})",
            y.nrows(),
            y.ncols()
        )));
    }
    let a = design_matrix(z);
    let gram = a.tr_mul(&a) + penalty(k, lambda, penalize_bias);
    let rhs = a.tr_mul(y);
    let weights = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidInput("regression Gram matrix is singular".into()))?,
    };
    let eig = gram.symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e.abs()), hi.max(e.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let predictions = &a * &weights;
    let mut loss = KahanSum::default();
    for (p, t) in predictions.iter().zip(y.iter()) {
        loss.add((t - p).abs());
    }
    Ok(RegressionSolve {
        weights,
        predictions,
        lambda,
        penalize_bias,
        loss: loss.value(),
        condition,
    })
}

/// Frobenius norm of `[Z|1]ᵀ([Z|1]Ŵ − Y) + λPŴ`, zero at the optimum.
pub fn normal_equation_residual(z: &DMatrix<f64>, y: &DMatrix<f64>, solve: &RegressionSolve) -> f64 {
    let a = design_matrix(z);
    let r = a.tr_mul(&(&a * &solve.weights - y)) + penalty(z.ncols(), solve.lambda, solve.penalize_bias) * &solve.weights;
    r.norm()
}

/// Rendered descriptors before renormalization at the given pixels (`n × k`).
pub fn blend_rows(weights: &PixelWeights, values: &[f64], dim: usize, pixels: &[usize]) -> DMatrix<f64> {
    let rows = par::map_slice(pixels, |&p| {
        let mut acc = vec![0.0; dim];
        for &(i, w) in weights.pixel(p) {
            let v = &values[i as usize * dim..(i as usize + 1) * dim];
            for c in 0..dim {
                acc[c] += w * v[c];
            }
        }
        acc
    });
    DMatrix::from_row_iterator(pixels.len(), dim, rows.into_iter().flatten())
}

fn normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Scatters per-pixel gradients `g_raw` (`pixels.len() × dim`) through the
/// blend weights. Accumulates in pixel order.
fn scatter(weights: &PixelWeights, pixels: &[usize], g_raw: &[f64], dim: usize, n_prims: usize) -> Vec<f64> {
    let mut grad = vec![0.0; n_prims * dim];
    for (r, &p) in pixels.iter().enumerate() {
        let g = &g_raw[r * dim..(r + 1) * dim];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        for &(i, w) in weights.pixel(p) {
            let dst = &mut grad[i as usize * dim..(i as usize + 1) * dim];
            for c in 0..dim {
                dst[c] += w * g[c];
            }
        }
    }
    grad
}

/// Gradient of `(I − ẑẑᵀ)/‖raw‖ · g`, the Jacobian of `raw ↦ raw/‖raw‖` applied to `g`.
fn through_normalization(raw: &[f64], g: &[f64]) -> Vec<f64> {
    let n = dot(raw, raw).sqrt();
    if n == 0.0 {
        return vec![0.0; raw.len()];
    }
    let proj = dot(raw, g) / (n * n);
    raw.iter().zip(g).map(|(r, gi)| (gi - proj * r) / n).collect()
}

/// Segmentation loss and its gradient.
#[derive(Debug, Clone)]
pub struct SegGradient {
    pub loss: f64,
    /// Per-primitive gradient, `N × k` row-major.
    pub grad: Vec<f64>,
    pub solve: RegressionSolve,
}

/// Solves the regression on the renormalized rendered descriptors at the target
/// pixels, then differentiates `L_seg` with `Ŵ` fixed.
///
/// `descriptors` is `N × k` row-major. Pixels whose blended descriptor is zero
/// carry no gradient.
pub fn seg_loss_and_grad(
    weights: &PixelWeights,
    descriptors: &[f64],
    k: usize,
    targets: &Targets,
    lambda: f64,
    penalize_bias: bool,
) -> Result<SegGradient> {
    let raw = blend_rows(weights, descriptors, k, &targets.pixels);
    let z = normalize_rows(&raw);
    let y = targets.matrix();
    let solve = solve_regression(&z, &y, lambda, penalize_bias)?;
    let grad = seg_grad_fixed(weights, &raw, &y, &solve.weights, &targets.pixels, descriptors.len() / k.max(1));
    Ok(SegGradient {
        loss: solve.loss,
        grad,
        solve,
    })
}

/// `L_seg` for given raw rendered descriptors and fixed regression weights.
pub fn seg_loss_fixed(raw: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let pred = design_matrix(&normalize_rows(raw)) * w;
    let mut loss = KahanSum::default();
    for (p, t) in pred.iter().zip(y.iter()) {
        loss.add((t - p).abs());
    }
    loss.value()
}

fn seg_grad_fixed(
    weights: &PixelWeights,
    raw: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w: &DMatrix<f64>,
    pixels: &[usize],
    n_prims: usize,
) -> Vec<f64> {
    let k = raw.ncols();
    let m = y.ncols();
    let wz = w.rows(0, k);
    let rows: Vec<Vec<f64>> = par::map_range(pixels.len(), |r| {
        let raw_r: Vec<f64> = raw.row(r).iter().copied().collect();
        let n = dot(&raw_r, &raw_r).sqrt();
        if n == 0.0 {
            return vec![0.0; k];
        }
        let mut g = vec![0.0; k];
        for j in 0..m {
            let mut pred = w[(k, j)];
            for c in 0..k {
                pred += raw_r[c] / n * wz[(c, j)];
            }
            let s = pred - y[(r, j)];
            let sign = if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            };
            for c in 0..k {
                g[c] += sign * wz[(c, j)];
            }
        }
        through_normalization(&raw_r, &g)
    });
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    scatter(weights, pixels, &flat, k, n_prims)
}

/// Normal loss and its gradient with respect to the world-frame normals.
#[derive(Debug, Clone)]
pub struct NormalGradient {
    pub loss: f64,
    pub pixels: usize,
    pub grad: Vec<Vector3<f64>>,
}

/// `L_n = Σ (1 − ⟨n̂, n⟩)` over pixels where `mask` holds and the supervision
/// normal is non-zero. `n̂` is the renormalized blend of `R·nᵢ`.
pub fn normal_loss_and_grad(
    weights: &PixelWeights,
    normals: &[Vector3<f64>],
    rotation: &Matrix3<f64>,
    supervision: &[f64],
    mask: &[bool],
) -> NormalGradient {
    let cam: Vec<f64> = normals.iter().flat_map(|n| (rotation * n).into_iter().copied().collect::<Vec<_>>()).collect();
    let pixels: Vec<usize> = (0..weights.pixel_count())
        .filter(|&p| mask[p] && supervision[3 * p..3 * p + 3].iter().any(|&x| x != 0.0))
        .collect();
    let raw = blend_rows(weights, &cam, 3, &pixels);
    let per_pixel: Vec<(f64, Vec<f64>)> = par::map_range(pixels.len(), |r| {
        let p = pixels[r];
        let raw_r: Vec<f64> = raw.row(r).iter().copied().collect();
        let n = dot(&raw_r, &raw_r).sqrt();
        let mut s = supervision[3 * p..3 * p + 3].to_vec();
        normalize_in_place(&mut s);
        if n == 0.0 {
            return (1.0, vec![0.0; 3]);
        }
        let cos = dot(&raw_r, &s) / n;
        let g: Vec<f64> = s.iter().map(|x| -x).collect();
        (1.0 - cos, through_normalization(&raw_r, &g))
    });
    let mut loss = KahanSum::default();
    let mut flat = Vec::with_capacity(3 * pixels.len());
    for (l, g) in per_pixel {
        loss.add(l);
        flat.extend(g);
    }
    let g_cam = scatter(weights, &pixels, &flat, 3, normals.len());
    let rt = rotation.transpose();
    let grad = (0..normals.len())
        .map(|i| rt * Vector3::new(g_cam[3 * i], g_cam[3 * i + 1], g_cam[3 * i + 2]))
        .collect();
    NormalGradient {
        loss: loss.value(),
        pixels: pixels.len(),
        grad,
    }
}

/// `zᵢ ← normalize(zᵢ − lr·gᵢ)`. Primitives with a zero gradient are untouched.
pub fn descriptor_gradient_step(prims: &mut [GaussianPrimitive], grad: &[f64], lr: f64) {
    let k = prims.first().map_or(0, |p| p.descriptor.len());
    par::for_each_mut(prims, |i, p| {
        let g = &grad[i * k..(i + 1) * k];
        if g.iter().all(|&x| x == 0.0) {
            return;
        }
        let mut z: Vec<f64> = p.descriptor.iter().zip(g).map(|(z, g)| z - lr * g).collect();
        if normalize_in_place(&mut z) > 1e-12 {
            p.descriptor = z;
        }
    });
}

/// `nᵢ ← normalize(nᵢ − lr·gᵢ)`. Primitives with a zero gradient are untouched.
pub fn normal_loss_step(prims: &mut [GaussianPrimitive], grad: &[Vector3<f64>], lr: f64) {
    par::for_each_mut(prims, |i, p| {
        let g = grad[i];
        if g == Vector3::zeros() {
            return;
        }
        if let Some(n) = (p.normal - g * lr).try_normalize(1e-12) {
            p.normal = n;
        }
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanShiftConfig {
    /// Update rate in `(0, 1]`.
    pub eta: f64,
    /// vMF kernel concentration.
    pub gamma: f64,
    /// Update steps per invocation.
    pub steps: usize,
    /// Iterations between invocations.
    pub period: usize,
    /// First invocation happens at this iteration.
    pub warmup: usize,
    /// Rows per sampled kernel.
    pub sample_size: usize,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        MeanShiftConfig {
            eta: 0.5,
            gamma: 60.0,
            steps: 10,
            period: 100,
            warmup: 500,
            sample_size: 1024,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("mean-shift eta {} outside [0, 1]", self.eta)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("mean-shift gamma must be positive".into()));
        }
        if self.sample_size < 2 {
            return Err(Error::Config("mean-shift sample size must be at least 2".into()));
        }
        if self.period == 0 {
            return Err(Error::Config("mean-shift period must be positive".into()));
        }
        Ok(())
    }
}

/// Kernel-weighted mean of `rows` around row `j`, with weights
/// `exp(γ(⟨zᵢ, zⱼ⟩ − 1))` (the constant factor cancels in the ratio).
fn kernel_mean(z: &[f64], k: usize, rows: &[usize], j: usize, gamma: f64) -> Vec<f64> {
    let zj = &z[j * k..(j + 1) * k];
    let mut num = vec![0.0; k];
    let mut den = 0.0;
    for &i in rows {
        let zi = &z[i * k..(i + 1) * k];
        let w = (gamma * (dot(zi, zj) - 1.0)).exp();
        den += w;
        for c in 0..k {
            num[c] += w * zi[c];
        }
    }
    num.iter().map(|x| x / den).collect()
}

fn blend_unit(m: &[f64], z: &[f64], eta: f64) -> Vec<f64> {
    if eta == 0.0 {
        return z.to_vec();
    }
    let mut out: Vec<f64> = m.iter().zip(z).map(|(m, z)| eta * m + (1.0 - eta) * z).collect();
    if normalize_in_place(&mut out) <= 1e-12 {
        return z.to_vec();
    }
    out
}

/// One dense update `Z ← Z(ηKD⁻¹ + (1 − η)I)` followed by row renormalization.
/// `z` is `N × k` row-major.
pub fn mean_shift_step(z: &[f64], k: usize, eta: f64, gamma: f64) -> Vec<f64> {
    let n = z.len() / k;
    let all: Vec<usize> = (0..n).collect();
    par::map_range(n, |j| {
        let m = kernel_mean(z, k, &all, j, gamma);
        blend_unit(&m, &z[j * k..(j + 1) * k], eta)
    })
    .concat()
}

/// `cfg.steps` dense updates. Refuses fields above [`EXACT_MEAN_SHIFT_LIMIT`].
pub fn mean_shift_exact(z: &[f64], k: usize, cfg: &MeanShiftConfig) -> Result<Vec<f64>> {
    let n = z.len() / k.max(1);
    if n > EXACT_MEAN_SHIFT_LIMIT {
        return Err(Error::InvalidInput(format!(
            "dense mean-shift refused for {n} rows (limit {EXACT_MEAN_SHIFT_LIMIT}); use the sampled variant"
        )));
    }
    let mut cur = z.to_vec();
    for _ in 0..cfg.steps {
        cur = mean_shift_step(&cur, k, cfg.eta, cfg.gamma);
    }
    Ok(cur)
}

/// One sampled update. Rows are drawn without replacement in batches of
/// `sample_size`; each batch gets the dense update on its own kernel, and each
/// sample's kernel mean is shared with its not yet visited `knn` neighbors.
pub fn mean_shift_sampled_step(
    z: &[f64],
    k: usize,
    knn: &[Vec<u32>],
    eta: f64,
    gamma: f64,
    sample_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = z.len() / k;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut visited = vec![false; n];
    let mut out = z.to_vec();
    let mut cursor = 0;
    loop {
        let mut batch = Vec::with_capacity(sample_size);
        while batch.len() < sample_size && cursor < n {
            let i = order[cursor];
            cursor += 1;
            if !visited[i] {
                visited[i] = true;
                batch.push(i);
            }
        }
        if batch.is_empty() {
            break;
        }
        let means = par::map_slice(&batch, |&j| kernel_mean(z, k, &batch, j, gamma));
        for (&s, m) in batch.iter().zip(&means) {
            out[s * k..(s + 1) * k].copy_from_slice(&blend_unit(m, &z[s * k..(s + 1) * k], eta));
        }
        for (&s, m) in batch.iter().zip(&means) {
            for &q in &knn[s] {
                let q = q as usize;
                if !visited[q] {
                    visited[q] = true;
                    out[q * k..(q + 1) * k].copy_from_slice(&blend_unit(m, &z[q * k..(q + 1) * k], eta));
                }
            }
        }
    }
    out
}

/// `cfg.steps` sampled updates with a seeded RNG.
pub fn mean_shift_sampled(z: &[f64], k: usize, knn: &[Vec<u32>], cfg: &MeanShiftConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = z.to_vec();
    for _ in 0..cfg.steps {
        cur = mean_shift_sampled_step(&cur, k, knn, cfg.eta, cfg.gamma, cfg.sample_size, &mut rng);
    }
    cur
}

/// Flattens the descriptors of `prims` into an `N × k` row-major buffer.
pub fn descriptor_matrix(prims: &[GaussianPrimitive]) -> Vec<f64> {
    prims.iter().flat_map(|p| p.descriptor.iter().copied()).collect()
}

/// Writes an `N × k` row-major buffer back into the descriptors.
pub fn set_descriptors(prims: &mut [GaussianPrimitive], z: &[f64]) {
    let k = prims.first().map_or(0, |p| p.descriptor.len());
    par::for_each_mut(prims, |i, p| p.descriptor.copy_from_slice(&z[i * k..(i + 1) * k]));
}
