//! Evaluation metrics over embedded sample sets: Fréchet-distance
//! proxy, k-NN precision/recall and density/coverage, and noise
//! normality statistics.
//!
//! Distances are Euclidean over raw embeddings. Everything internal
//! runs in `f64`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Tensor, Value};
use crate::unet::UNetParams;
use crate::{Error, Result};

/// Where a feature set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Generated,
}

/// How images were embedded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    FlatPixels,
    TeacherEncoder,
}

/// An `n x d` matrix of embedding vectors.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
    pub provenance: Provenance,
    pub kind: EmbeddingKind,
}

impl FeatureSet {
    pub fn new(
        n: usize,
        d: usize,
        data: Vec<f64>,
        provenance: Provenance,
        kind: EmbeddingKind,
    ) -> Result<Self> {
        if n == 0 || d == 0 || data.len() != n * d {
            return Err(Error::ShapeMismatch {
                op: "feature_set",
                detail: format!("{n} x {d} with {} values", data.len()),
            });
        }
        Ok(Self { n, d, data, provenance, kind })
    }

    /// Flattened pixel embedding.
    pub fn from_pixels(images: &[Tensor<f32>], provenance: Provenance) -> Result<Self> {
        let d = images
            .first()
            .map(|t| t.numel())
            .ok_or(Error::EmptyDataset)?;
        let mut data = Vec::with_capacity(images.len() * d);
        for img in images {
            if img.numel() != d {
                return Err(Error::DimMismatch { left: img.numel(), right: d });
            }
            data.extend(img.data().iter().map(|&v| v as f64));
        }
        Self::new(images.len(), d, data, provenance, EmbeddingKind::FlatPixels)
    }

    /// Semantic embedding: the model's mid-block output at timestep 0
    /// under the null condition, pooled over space to one value per
    /// channel.
    pub fn from_teacher_mid(
        model: &UNetParams<f32>,
        images: &[Tensor<f32>],
        provenance: Provenance,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let cfg = model.config();
        let mut g = Graph::new();
        let net = model.bind(&mut g, false)?;
        let mut rows: Vec<f64> = Vec::new();
        let mut d = 0usize;
        for chunk in images.chunks(64) {
            let batch = chunk.len();
            let mut data = Vec::with_capacity(batch * cfg.in_channels * cfg.image_size * cfg.image_size);
            for img in chunk {
                data.extend_from_slice(img.data());
            }
            let z = Tensor::from_vec(
                &[batch, cfg.in_channels, cfg.image_size, cfg.image_size],
                data,
            )?;
            let cond = Tensor::zeros(&[batch, cfg.cond_dim]);
            let zv = g.constant(&z);
            let cv = g.constant(&cond);
            let cache = net.encode(&mut g, &zv, &vec![0; batch], &cv)?;
            let mid = cache.mid.tensor();
            let (_, c, h, w) = mid.dims4()?;
            d = c;
            let plane = h * w;
            for b in 0..batch {
                for ch in 0..c {
                    let o = (b * c + ch) * plane;
                    let s: f64 = mid.data()[o..o + plane].iter().map(|&v| v as f64).sum();
                    rows.push(s / plane as f64);
                }
            }
        }
        Self::new(images.len(), d, rows, provenance, EmbeddingKind::TeacherEncoder)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

// -----------------------------------------------------------------------
// symmetric eigensolver (cyclic Jacobi)
// -----------------------------------------------------------------------

/// Eigen-decomposition of a symmetric matrix; returns eigenvalues and
/// the orthonormal eigenvector matrix `v` (column `j` pairs with
/// eigenvalue `j`).
fn jacobi_eigen(a: &mut [f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(a)) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for i in 0..d {
                    let api = a[p * d + i];
                    let aqi = a[q * d + i];
                    a[p * d + i] = c * api - s * aqi;
                    a[q * d + i] = s * api + c * aqi;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matmul_f64(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for p in 0..d {
            let aip = a[i * d + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..d {
                c[i * d + j] += aip * b[p * d + j];
            }
        }
    }
    c
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// zero (rounding) are clamped.
fn sqrt_psd(mat: &[f64], d: usize) -> Vec<f64> {
    let mut work = mat.to_vec();
    let (eig, v) = jacobi_eigen(&mut work, d);
    let roots: Vec<f64> = eig.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // v * diag(roots) * v'
    let mut scaled = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            scaled[i * d + j] = v[i * d + j] * roots[j];
        }
    }
    let mut vt = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            vt[i * d + j] = v[j * d + i];
        }
    }
    matmul_f64(&scaled, &vt, d)
}

fn mean_and_cov(set: &FeatureSet) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (set.n, set.d);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(set.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = set.row(i);
        for p in 0..d {
            let dp = row[p] - mean[p];
            for q in p..d {
                cov[p * d + q] += dp * (row[q] - mean[q]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for p in 0..d {
        for q in p..d {
            let v = cov[p * d + q] / denom;
            cov[p * d + q] = v;
            cov[q * d + p] = v;
        }
    }
    (mean, cov)
}

/// Fréchet distance between Gaussian fits of two embedded sets:
/// `|mu_r - mu_f|^2 + tr(C_r + C_f - 2 (C_r C_f)^(1/2))`, the matrix
/// square root taken through the symmetrized product
/// `sqrt(C_r) C_f sqrt(C_r)`.
pub fn frechet_proxy(real: &FeatureSet, fake: &FeatureSet) -> Result<f64> {
    if real.d != fake.d {
        return Err(Error::DimMismatch { left: real.d, right: fake.d });
    }
    for set in [real, fake] {
        if set.n < set.d + 1 {
            return Err(Error::RankDeficient { n: set.n, d: set.d });
        }
    }
    let d = real.d;
    let (mu_r, cov_r) = mean_and_cov(real);
    let (mu_f, cov_f) = mean_and_cov(fake);
    let mean_term: f64 = mu_r.iter().zip(&mu_f).map(|(a, b)| (a - b) * (a - b)).sum();
    let sr = sqrt_psd(&cov_r, d);
    let inner = matmul_f64(&sr, &matmul_f64(&cov_f, &sr, d), d);
    let mut work = inner.clone();
    // symmetrize against rounding before the eigensolve
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (work[i * d + j] + work[j * d + i]);
            work[i * d + j] = avg;
            work[j * d + i] = avg;
        }
    }
    let (eig, _) = jacobi_eigen(&mut work, d);
    let tr_sqrt: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    Ok(mean_term + trace(&cov_r) + trace(&cov_f) - 2.0 * tr_sqrt)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-th nearest-neighbor squared radius for every row, neighbors drawn
/// from the same set excluding the row itself.
fn knn_sq_radii(set: &FeatureSet, k: usize) -> Vec<f64> {
    let n = set.n;
    let mut radii = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        for j in 0..n {
            if j != i {
                dists.push(squared_distance(set.row(i), set.row(j)));
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        radii.push(dists[k - 1]);
    }
    radii
}

fn check_k(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<()> {
    if real.d != fake.d {
        return Err(Error::DimMismatch { left: real.d, right: fake.d });
    }
    if k == 0 || k >= real.n.min(fake.n) {
        return Err(Error::KTooLarge { k, n: real.n.min(fake.n) });
    }
    Ok(())
}

/// Improved precision/recall: a fake point counts as precise when it
/// lies within the k-NN radius of at least one real point; recall swaps
/// the roles.
pub fn precision_recall(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    check_k(real, fake, k)?;
    let real_radii = knn_sq_radii(real, k);
    let fake_radii = knn_sq_radii(fake, k);
    let covered = |points: &FeatureSet, anchors: &FeatureSet, radii: &[f64]| -> f64 {
        let mut hits = 0usize;
        for i in 0..points.n {
            let p = points.row(i);
            let inside = (0..anchors.n).any(|j| squared_distance(p, anchors.row(j)) <= radii[j]);
            if inside {
                hits += 1;
            }
        }
        hits as f64 / points.n as f64
    };
    let precision = covered(fake, real, &real_radii);
    let recall = covered(real, fake, &fake_radii);
    Ok((precision, recall))
}

/// Density counts how many real k-NN balls contain each fake point
/// (normalized by `k * n_fake`); coverage is the fraction of real
/// points whose ball contains at least one fake point.
pub fn density_coverage(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    check_k(real, fake, k)?;
    let radii = knn_sq_radii(real, k);
    let mut density_hits = 0usize;
    for j in 0..fake.n {
        let f = fake.row(j);
        for i in 0..real.n {
            if squared_distance(f, real.row(i)) <= radii[i] {
                density_hits += 1;
            }
        }
    }
    let mut covered = 0usize;
    for i in 0..real.n {
        let r = real.row(i);
        if (0..fake.n).any(|j| squared_distance(r, fake.row(j)) <= radii[i]) {
            covered += 1;
        }
    }
    let density = density_hits as f64 / (k * fake.n) as f64;
    let coverage = covered as f64 / real.n as f64;
    Ok((density, coverage))
}

// -----------------------------------------------------------------------
// noise normality
// -----------------------------------------------------------------------

/// Variance floor below which the KL estimate is flagged degenerate.
pub const VAR_FLOOR: f64 = 1e-12;

/// Moment-matched KL divergence `KL(N(mean, var) || N(0, 1))`.
/// Returns the value and whether the variance hit the floor.
pub fn kl_standard_normal(mean: f64, var: f64) -> (f64, bool) {
    let degenerate = var < VAR_FLOOR;
    let v = var.max(VAR_FLOOR);
    (0.5 * (mean * mean + v - 1.0 - v.ln()), degenerate)
}

/// Elementwise distribution statistics of a predicted-noise tensor.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseStats {
    pub mean: f64,
    pub var: f64,
    pub excess_kurtosis: f64,
    pub kl_to_standard_normal: f64,
    pub degenerate: bool,
}

/// Empirical mean, variance, excess kurtosis, and moment-matched KL to
/// the standard normal, over all elements.
pub fn normality_stats<S: Scalar>(eps: &Tensor<S>) -> NoiseStats {
    let n = eps.numel() as f64;
    let mut sum = 0.0;
    for &v in eps.data() {
        sum += v.as_f64();
    }
    let mean = sum / n;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for &v in eps.data() {
        let d = v.as_f64() - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    let var = m2 / n;
    let kurt = if var > VAR_FLOOR { (m4 / n) / (var * var) - 3.0 } else { 0.0 };
    let (kl, degenerate) = kl_standard_normal(mean, var);
    NoiseStats { mean, var, excess_kurtosis: kurt, kl_to_standard_normal: kl, degenerate }
}

// -----------------------------------------------------------------------
// report
// -----------------------------------------------------------------------

/// One evaluation run, serializable as a single JSON object.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub density: f64,
    pub coverage: f64,
    /// Distribution statistics of the generated set's feature values.
    pub noise: NoiseStats,
    pub k: usize,
    pub n_real: usize,
    pub n_fake: usize,
    pub embedding: EmbeddingKind,
}

/// Computes every metric of one real/fake pair at the given `k`.
pub fn evaluate(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<MetricsReport> {
    let frechet = frechet_proxy(real, fake)?;
    let (precision, recall) = precision_recall(real, fake, k)?;
    let (density, coverage) = density_coverage(real, fake, k)?;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let fake_values =
        Tensor::<f64>::from_vec(&[fake.n * fake.d], fake.data.clone()).expect("flat features");
    Ok(MetricsReport {
        frechet,
        precision,
        recall,
        f1,
        density,
        coverage,
        noise: normality_stats(&fake_values),
        k,
        n_real: real.n,
        n_fake: fake.n,
        embedding: fake.kind,
    })
}

/// Differentiable moment-matched KL of one prediction against N(0, 1),
/// averaged per batch item. Mirrors [`kl_standard_normal`]; the second
/// return flags a variance that hit the floor.
pub fn kl_loss_value<S: Scalar>(g: &mut Graph<S>, eps: &Value<S>) -> Result<(Value<S>, bool)> {
    let mu = g.apply(crate::tensor::PrimOp::Mean { per_batch: true }, &[eps])?;
    let sq = g.apply(crate::tensor::PrimOp::Mul, &[eps, eps])?;
    let ex2 = g.apply(crate::tensor::PrimOp::Mean { per_batch: true }, &[&sq])?;
    let mu2 = g.apply(crate::tensor::PrimOp::Mul, &[&mu, &mu])?;
    let neg_mu2 = g.apply(crate::tensor::PrimOp::MulScalar(-1.0), &[&mu2])?;
    let var = g.apply(crate::tensor::PrimOp::Add, &[&ex2, &neg_mu2])?;
    let degenerate = var.tensor().data().iter().any(|v| v.as_f64() < VAR_FLOOR);
    let var = g.apply(crate::tensor::PrimOp::ClampMin(VAR_FLOOR), &[&var])?;
    let ln_var = g.apply(crate::tensor::PrimOp::Ln, &[&var])?;
    let neg_ln = g.apply(crate::tensor::PrimOp::MulScalar(-1.0), &[&ln_var])?;
    let sum = g.apply(crate::tensor::PrimOp::Add, &[&mu2, &var])?;
    let sum = g.apply(crate::tensor::PrimOp::Add, &[&sum, &neg_ln])?;
    let sum = g.apply(crate::tensor::PrimOp::AddScalar(-1.0), &[&sum])?;
    let half = g.apply(crate::tensor::PrimOp::MulScalar(0.5), &[&sum])?;
    let out = g.apply(crate::tensor::PrimOp::Mean { per_batch: false }, &[&half])?;
    Ok((out, degenerate))
}
