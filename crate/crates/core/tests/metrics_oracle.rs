//! Independent brute-force oracles for the k-NN metrics and the
//! univariate closed form for the Fréchet proxy.
//!
//! The oracle below recomputes everything with plain nested loops and
//! full sorts; it shares no code with the production implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiue_core::metrics::{
    density_coverage, frechet_proxy, normality_stats, precision_recall, EmbeddingKind, FeatureSet,
    Provenance,
};
use tiue_core::rng::normal_at;
use tiue_core::tensor::Tensor;

struct Oracle {
    real: Vec<Vec<f64>>,
    fake: Vec<Vec<f64>>,
    k: usize,
}

impl Oracle {
    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    /// k-th smallest distance from `points[i]` to the other points.
    fn knn_radius(points: &[Vec<f64>], i: usize, k: usize) -> f64 {
        let mut ds: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| Self::dist(&points[i], p))
            .collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ds[k - 1]
    }

    fn precision_recall(&self) -> (f64, f64) {
        let covered = |pts: &[Vec<f64>], anchors: &[Vec<f64>]| {
            let mut hit = 0usize;
            for p in pts {
                let mut inside = false;
                for (i, a) in anchors.iter().enumerate() {
                    if Self::dist(p, a) <= Self::knn_radius(anchors, i, self.k) {
                        inside = true;
                    }
                }
                if inside {
                    hit += 1;
                }
            }
            hit as f64 / pts.len() as f64
        };
        (covered(&self.fake, &self.real), covered(&self.real, &self.fake))
    }

    fn density_coverage(&self) -> (f64, f64) {
        let mut total = 0usize;
        for f in &self.fake {
            for (i, r) in self.real.iter().enumerate() {
                if Self::dist(f, r) <= Self::knn_radius(&self.real, i, self.k) {
                    total += 1;
                }
            }
        }
        let mut covered = 0usize;
        for (i, r) in self.real.iter().enumerate() {
            let radius = Self::knn_radius(&self.real, i, self.k);
            if self.fake.iter().any(|f| Self::dist(r, f) <= radius) {
                covered += 1;
            }
        }
        (
            total as f64 / (self.k * self.fake.len()) as f64,
            covered as f64 / self.real.len() as f64,
        )
    }
}

fn feature_set(rows: &[Vec<f64>], provenance: Provenance) -> FeatureSet {
    FeatureSet::new(
        rows.len(),
        rows[0].len(),
        rows.iter().flatten().copied().collect(),
        provenance,
        EmbeddingKind::FlatPixels,
    )
    .unwrap()
}

#[test]
fn knn_metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0DDC0DE);
    for case in 0..200 {
        let d = rng.random_range(1..=4);
        let n_real = rng.random_range(4..=50);
        let n_fake = rng.random_range(4..=50);
        let k = rng.random_range(1..n_real.min(n_fake));
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect()
        };
        let real_rows = draw(&mut rng, n_real);
        let fake_rows = draw(&mut rng, n_fake);
        let oracle = Oracle { real: real_rows.clone(), fake: fake_rows.clone(), k };
        let real = feature_set(&real_rows, Provenance::Real);
        let fake = feature_set(&fake_rows, Provenance::Generated);

        let (p, r) = precision_recall(&real, &fake, k).unwrap();
        let (po, ro) = oracle.precision_recall();
        assert_eq!(p, po, "case {case}: precision");
        assert_eq!(r, ro, "case {case}: recall");

        let (den, cov) = density_coverage(&real, &fake, k).unwrap();
        let (deno, covo) = oracle.density_coverage();
        assert_eq!(den, deno, "case {case}: density");
        assert_eq!(cov, covo, "case {case}: coverage");
    }
}

#[test]
fn metrics_are_row_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let rows: Vec<Vec<f64>> =
        (0..20).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let fake_rows: Vec<Vec<f64>> =
        (0..18).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut shuffled = rows.clone();
    shuffled.reverse();
    shuffled.swap(0, 5);
    let a = precision_recall(
        &feature_set(&rows, Provenance::Real),
        &feature_set(&fake_rows, Provenance::Generated),
        3,
    )
    .unwrap();
    let b = precision_recall(
        &feature_set(&shuffled, Provenance::Real),
        &feature_set(&fake_rows, Provenance::Generated),
        3,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn frechet_matches_univariate_closed_form() {
    // seeded 1-d Gaussians; closed form (mu1-mu2)^2 + (s1-s2)^2
    let n = 40_000;
    let (mu1, s1) = (0.3, 1.4);
    let (mu2, s2) = (-0.5, 0.7);
    let a: Vec<Vec<f64>> = (0..n).map(|i| vec![mu1 + s1 * normal_at(1, 0, i)]).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|i| vec![mu2 + s2 * normal_at(2, 0, i)]).collect();
    let fa = feature_set(&a, Provenance::Real);
    let fb = feature_set(&b, Provenance::Generated);
    let got = frechet_proxy(&fa, &fb).unwrap();
    let expect = (mu1 - mu2).powi(2) + (s1 - s2).powi(2);
    let rel = (got - expect).abs() / expect;
    assert!(rel < 0.02, "got {got}, closed form {expect}, rel {rel}");

    // symmetry
    let swapped = frechet_proxy(&fb, &fa).unwrap();
    assert!((got - swapped).abs() < 1e-6);
}

#[test]
fn frechet_never_meaningfully_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for _ in 0..20 {
        let d = rng.random_range(1..=3);
        let n = d + 1 + rng.random_range(1..20);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let a = feature_set(&draw(&mut rng), Provenance::Real);
        let b = feature_set(&draw(&mut rng), Provenance::Generated);
        assert!(frechet_proxy(&a, &b).unwrap() >= -1e-6);
        assert!(frechet_proxy(&a, &a).unwrap() >= -1e-6);
    }
}

#[test]
fn monte_carlo_standard_normal_stats() {
    let n = 1_000_000usize;
    let data: Vec<f32> = (0..n).map(|i| normal_at(0xA11CE, 0, i as u64) as f32).collect();
    let t = Tensor::from_vec(&[n], data).unwrap();
    let stats = normality_stats(&t);
    assert!(stats.mean.abs() < 0.01, "mean {}", stats.mean);
    assert!((stats.var - 1.0).abs() < 0.01, "var {}", stats.var);
    assert!(stats.kl_to_standard_normal < 1e-3, "kl {}", stats.kl_to_standard_normal);
    assert!(stats.excess_kurtosis.abs() < 0.05, "kurtosis {}", stats.excess_kurtosis);
    assert!(!stats.degenerate);
}
