//! Diagnostic metrics: gradient-conflict measures (cosine angle, magnitude
//! similarity, curvature bounding measure), 2-D hypervolume, Pearson
//! correlation, ROC-AUC, robust accuracy helpers, and McNemar's test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{GatError, Result};

/// Per-task flat gradient vectors plus what they were taken with respect to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientBundle {
    pub grads: Vec<Vec<f64>>,
    pub tag: GradientTag,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientTag {
    WrtInput,
    WrtSharedParams,
}

impl GradientBundle {
    pub fn new(grads: Vec<Vec<f64>>, tag: GradientTag, id: impl Into<String>) -> Result<Self> {
        if let Some(first) = grads.first() {
            if grads.iter().any(|g| g.len() != first.len()) {
                return Err(GatError::ShapeMismatch("gradient lengths differ".into()));
            }
        }
        Ok(GradientBundle { grads, tag, id: id.into() })
    }
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine of the angle between two gradients, and whether they conflict
/// (cosine below zero).
pub fn cosine_angle(gi: &[f64], gj: &[f64]) -> Result<(f64, bool)> {
    let (ni, nj) = (norm(gi), norm(gj));
    if ni == 0.0 || nj == 0.0 {
        return Err(GatError::Degenerate("zero gradient in cosine_angle".into()));
    }
    let cos = (dot(gi, gj) / (ni * nj)).clamp(-1.0, 1.0);
    Ok((cos, cos < 0.0))
}

/// Gradient magnitude similarity `2|gi||gj| / (|gi|^2 + |gj|^2)` in `[0,1]`;
/// equals 1 at equal norms.
pub fn magnitude_similarity(gi: &[f64], gj: &[f64]) -> Result<f64> {
    let (ni, nj) = (norm(gi), norm(gj));
    if ni == 0.0 && nj == 0.0 {
        return Err(GatError::Degenerate("both gradients zero".into()));
    }
    Ok(2.0 * ni * nj / (ni * ni + nj * nj))
}

/// Stabilizer for the `|gi + gj|^2` denominator; the antiparallel case has a
/// zero numerator factor, so the measure evaluates to 0 there.
pub const CURVATURE_DENOM_EPS: f64 = 1e-12;

/// Multi-task curvature bounding measure
/// `(1 - cos^2 phi) * |gi - gj|^2 / |gi + gj|^2`.
pub fn curvature_measure(gi: &[f64], gj: &[f64]) -> Result<f64> {
    let (cos, _) = cosine_angle(gi, gj)?;
    let mut sin_sq = (1.0 - cos * cos).max(0.0);
    // Collinear gradients have sin^2 = 0 exactly; rounding in the cosine must
    // not leak through the stabilized denominator in the antiparallel case.
    if sin_sq < 1e-12 {
        sin_sq = 0.0;
    }
    let diff_sq: f64 = gi.iter().zip(gj).map(|(a, b)| (a - b) * (a - b)).sum();
    let sum_sq: f64 = gi.iter().zip(gj).map(|(a, b)| (a + b) * (a + b)).sum();
    Ok(sin_sq * diff_sq / (sum_sq + CURVATURE_DENOM_EPS))
}

/// 2-D Pareto front in minimization orientation with a reference point that
/// every front point must dominate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParetoFront2D {
    pub points: Vec<(f64, f64)>,
    pub reference: (f64, f64),
}

impl ParetoFront2D {
    pub fn new(points: Vec<(f64, f64)>, reference: (f64, f64)) -> Result<Self> {
        for &(a, b) in &points {
            if a > reference.0 || b > reference.1 {
                return Err(GatError::InvalidArgument(format!(
                    "point ({a},{b}) beyond reference {:?}",
                    reference
                )));
            }
        }
        Ok(ParetoFront2D { points, reference })
    }
}

/// Area dominated by the front with respect to the reference point: union of
/// the rectangles `[point, reference]`. Order-independent; duplicates and
/// dominated points do not change the result.
pub fn hypervolume_2d(front: &ParetoFront2D) -> f64 {
    if front.points.is_empty() {
        return 0.0;
    }
    let mut pts = front.points.clone();
    // Sweep by first objective; staircase over the non-dominated subset.
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (rx, ry) = front.reference;
    let mut area = 0.0;
    let mut prev_y = ry;
    for &(x, y) in &pts {
        if y < prev_y {
            area += (rx - x) * (prev_y - y);
            prev_y = y;
        }
    }
    area
}

/// Product-moment correlation and two-sided p-value from the t distribution.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len();
    if n != ys.len() {
        return Err(GatError::ShapeMismatch("series lengths differ".into()));
    }
    if n < 3 {
        return Err(GatError::InvalidArgument("need at least 3 points".into()));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GatError::Degenerate("constant series".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok((r, p))
}

/// Probability that a random positive outranks a random negative; ties count
/// one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GatError::ShapeMismatch("scores/labels length".into()));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(GatError::Degenerate("single-class labels".into()));
    }
    let mut acc = 0.0;
    for &p in &pos {
        for &n in &neg {
            acc += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(acc / (pos.len() * neg.len()) as f64)
}

/// McNemar's test with Edwards continuity correction:
/// `chi2 = (|b - c| - 1)^2 / (b + c)`, rejecting at the 0.05 level when
/// `chi2 > 3.841`.
pub fn mcnemar_test(b: u64, c: u64) -> Result<(f64, bool)> {
    if b + c == 0 {
        return Err(GatError::Degenerate("b + c = 0".into()));
    }
    let d = (b as f64 - c as f64).abs() - 1.0;
    let chi2 = d * d / (b + c) as f64;
    Ok((chi2, chi2 > 3.841))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_basic_cases() {
        let (c, f) = cosine_angle(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(c, 0.0);
        assert!(!f);
        let (c, f) = cosine_angle(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-12 && !f);
        let (c, f) = cosine_angle(&[1.0, 0.0], &[-2.0, 0.0]).unwrap();
        assert!((c + 1.0).abs() < 1e-12 && f);
        assert!(cosine_angle(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn magnitude_similarity_cases() {
        assert!((magnitude_similarity(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((magnitude_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(magnitude_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(magnitude_similarity(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn curvature_cases() {
        assert!(curvature_measure(&[1.0, 1.0], &[2.0, 2.0]).unwrap() < 1e-12);
        let xi = curvature_measure(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((xi - 1.0).abs() < 1e-9);
        // antiparallel: sin^2 = 0 exactly, stabilized denominator
        let xi = curvature_measure(&[1.0, 2.0], &[-1.0, -2.0]).unwrap();
        assert_eq!(xi, 0.0);
    }

    #[test]
    fn curvature_upper_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let g1: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g2: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if norm(&g1) == 0.0 || norm(&g2) == 0.0 {
                continue;
            }
            let xi = curvature_measure(&g1, &g2).unwrap();
            let diff_sq: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum();
            let sum_sq: f64 = g1.iter().zip(&g2).map(|(a, b)| (a + b) * (a + b)).sum();
            assert!(xi <= diff_sq / (sum_sq + CURVATURE_DENOM_EPS) + 1e-12);
        }
    }

    #[test]
    fn pair_metrics_symmetry_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let g1: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g2: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = rng.gen_range(0.1..10.0);
            let s1: Vec<f64> = g1.iter().map(|x| x * c).collect();
            let s2: Vec<f64> = g2.iter().map(|x| x * c).collect();
            let cos = cosine_angle(&g1, &g2).unwrap().0;
            assert!((cos - cosine_angle(&g2, &g1).unwrap().0).abs() < 1e-12);
            assert!((cos - cosine_angle(&s1, &s2).unwrap().0).abs() < 1e-9);
            let phi = magnitude_similarity(&g1, &g2).unwrap();
            assert!((phi - magnitude_similarity(&g2, &g1).unwrap()).abs() < 1e-12);
            assert!((phi - magnitude_similarity(&s1, &s2).unwrap()).abs() < 1e-9);
            let xi = curvature_measure(&g1, &g2).unwrap();
            assert!((xi - curvature_measure(&g2, &g1).unwrap()).abs() < 1e-12);
            assert!((xi - curvature_measure(&s1, &s2).unwrap()).abs() < 1e-7);
        }
    }

    #[test]
    fn hypervolume_single_point() {
        let f = ParetoFront2D::new(vec![(0.2, 0.2)], (1.0, 1.0)).unwrap();
        assert!((hypervolume_2d(&f) - 0.64).abs() < 1e-12);
    }

    #[test]
    fn hypervolume_staircase() {
        let f = ParetoFront2D::new(
            vec![(0.25, 0.75), (0.5, 0.5), (0.75, 0.25)],
            (1.0, 1.0),
        )
        .unwrap();
        assert!((hypervolume_2d(&f) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn hypervolume_empty_front() {
        let f = ParetoFront2D::new(vec![], (1.0, 1.0)).unwrap();
        assert_eq!(hypervolume_2d(&f), 0.0);
    }

    #[test]
    fn hypervolume_rejects_point_beyond_reference() {
        assert!(ParetoFront2D::new(vec![(1.5, 0.2)], (1.0, 1.0)).is_err());
    }

    /// Brute-force grid integration oracle.
    fn hypervolume_grid(front: &ParetoFront2D, grid: usize) -> f64 {
        let (rx, ry) = front.reference;
        let mut count = 0usize;
        for i in 0..grid {
            for j in 0..grid {
                let x = (i as f64 + 0.5) / grid as f64 * rx;
                let y = (j as f64 + 0.5) / grid as f64 * ry;
                if front.points.iter().any(|&(px, py)| px <= x && py <= y) {
                    count += 1;
                }
            }
        }
        count as f64 / (grid * grid) as f64 * rx * ry
    }

    #[test]
    fn hypervolume_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let pts: Vec<(f64, f64)> = (0..6)
                .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
                .collect();
            let f = ParetoFront2D::new(pts, (1.0, 1.0)).unwrap();
            let exact = hypervolume_2d(&f);
            let approx = hypervolume_grid(&f, 400);
            assert!(
                (exact - approx).abs() < 1.0 / 400.0,
                "exact {exact} vs grid {approx}"
            );
        }
    }

    #[test]
    fn hypervolume_dominated_point_no_change() {
        let base = vec![(0.2, 0.5), (0.5, 0.2)];
        let f1 = ParetoFront2D::new(base.clone(), (1.0, 1.0)).unwrap();
        let mut with_dom = base;
        with_dom.push((0.6, 0.6)); // dominated by both
        let f2 = ParetoFront2D::new(with_dom, (1.0, 1.0)).unwrap();
        assert!((hypervolume_2d(&f1) - hypervolume_2d(&f2)).abs() < 1e-12);
    }

    #[test]
    fn pearson_exact_lines() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let (r, p) = pearson_r(&xs, &ys).unwrap();
        assert!((r - 1.0).abs() < 1e-12 && p < 1e-6);
        let ys: Vec<f64> = xs.iter().map(|x| -x).collect();
        let (r, _) = pearson_r(&xs, &ys).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_independent_noise_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (r, _) = pearson_r(&xs, &ys).unwrap();
        assert!(r.abs() < 0.1, "r = {r}");
    }

    #[test]
    fn pearson_rejects_constant_series() {
        assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn roc_auc_cases() {
        let auc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
        let auc = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 0.5);
        let auc = roc_auc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 0.75);
        assert!(roc_auc(&[0.5], &[true]).is_err());
    }

    #[test]
    fn mcnemar_cases() {
        let (chi2, reject) = mcnemar_test(10, 2).unwrap();
        assert!((chi2 - 49.0 / 12.0).abs() < 1e-12);
        assert!(reject);
        let (chi2, reject) = mcnemar_test(5, 5).unwrap();
        assert!((chi2 - 0.1).abs() < 1e-12);
        assert!(!reject);
        assert!(mcnemar_test(0, 0).is_err());
    }

    proptest! {
        #[test]
        fn roc_auc_monotone_transform_invariant(
            seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 20;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let base = roc_auc(&scores, &labels).unwrap();
            // strictly monotone transform
            let tx: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0 * s).collect();
            let transformed = roc_auc(&tx, &labels).unwrap();
            prop_assert!((base - transformed).abs() < 1e-12);
        }
    }
}
