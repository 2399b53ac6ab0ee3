//! Latent-space operations that derive new visual features from fixed ones:
//! convex interpolation, equidistant paths, grid-quantized simplex weight
//! sampling, category-constrained seed selection, and affine-rank checks.

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::datamodel::{BiradsDescription, LatentFeature};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("insufficient category members: requested {requested}, available {available}")]
    InsufficientCategory { requested: usize, available: usize },
}

/// Tolerance accepted when validating simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Nonnegative interpolation coefficients summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights {
    alpha: Vec<f64>,
}

impl SimplexWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self, FeatureError> {
        if alpha.is_empty() {
            return Err(FeatureError::Contract("weights must be non-empty".into()));
        }
        for (k, &a) in alpha.iter().enumerate() {
            if !a.is_finite() || a < -SIMPLEX_TOL || a > 1.0 + SIMPLEX_TOL {
                return Err(FeatureError::Contract(format!(
                    "alpha[{k}] = {a} outside [0, 1]"
                )));
            }
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(FeatureError::Contract(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Indices of the `k` largest weights, ties broken by lower index.
    pub fn top_indices(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.alpha.len()).collect();
        idx.sort_by(|&a, &b| {
            self.alpha[b]
                .partial_cmp(&self.alpha[a])
                .expect("finite weights")
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }
}

/// Convex combination `sum_k alpha_k * v_k` of N equal-length features.
pub fn interpolate(
    features: &[LatentFeature],
    weights: &SimplexWeights,
) -> Result<LatentFeature, FeatureError> {
    if features.is_empty() {
        return Err(FeatureError::Contract("need at least one feature".into()));
    }
    if features.len() != weights.len() {
        return Err(FeatureError::Contract(format!(
            "{} features but {} weights",
            features.len(),
            weights.len()
        )));
    }
    let dim = features[0].dim();
    for (k, f) in features.iter().enumerate() {
        if f.dim() != dim {
            return Err(FeatureError::Contract(format!(
                "feature {k} has length {}, expected {dim}",
                f.dim()
            )));
        }
    }
    let mut out = vec![0.0; dim];
    for (f, &a) in features.iter().zip(weights.alpha()) {
        for (o, &v) in out.iter_mut().zip(f.values()) {
            *o += a * v;
        }
    }
    LatentFeature::new(out).map_err(|e| FeatureError::Contract(e.to_string()))
}

/// `steps` features marching from `a` to `b` in equal increments; the
/// endpoints are returned bitwise, interior points are interpolations with
/// weights `((steps-1-k)/(steps-1), k/(steps-1))`.
pub fn equidistant_path(
    a: &LatentFeature,
    b: &LatentFeature,
    steps: usize,
) -> Result<Vec<LatentFeature>, FeatureError> {
    if steps < 2 {
        return Err(FeatureError::Contract(format!(
            "steps must be >= 2, got {steps}"
        )));
    }
    if a.dim() != b.dim() {
        return Err(FeatureError::Contract(format!(
            "endpoint lengths differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let last = steps - 1;
    let mut out = Vec::with_capacity(steps);
    out.push(a.clone());
    for k in 1..last {
        let t = k as f64 / last as f64;
        let w = SimplexWeights::new(vec![1.0 - t, t])?;
        out.push(interpolate(&[a.clone(), b.clone()], &w)?);
    }
    out.push(b.clone());
    Ok(out)
}

/// Uniformly samples simplex weights quantized to multiples of `unit`
/// (compositions of `1/unit` into `n` nonnegative parts, each composition
/// equally likely, via the stars-and-bars bijection).
pub fn sample_grid_simplex(
    n: usize,
    unit: f64,
    rng: &mut impl Rng,
) -> Result<SimplexWeights, FeatureError> {
    if n == 0 {
        return Err(FeatureError::Contract("n must be >= 1".into()));
    }
    if !(unit > 0.0) || unit > 1.0 {
        return Err(FeatureError::Contract(format!("unit {unit} outside (0, 1]")));
    }
    let t = (1.0 / unit).round();
    if !t.is_finite() || (1.0 / unit - t).abs() > 1e-9 || t < 1.0 {
        return Err(FeatureError::Contract(format!(
            "1/unit must be an integer, got {}",
            1.0 / unit
        )));
    }
    let t = t as usize;
    if n == 1 {
        return SimplexWeights::new(vec![1.0]);
    }
    // choose n-1 bar positions among t + n - 1 slots; gaps are the parts
    let mut bars = rand::seq::index::sample(rng, t + n - 1, n - 1).into_vec();
    bars.sort_unstable();
    let mut parts = Vec::with_capacity(n);
    let mut prev: isize = -1;
    for &b in &bars {
        parts.push((b as isize - prev - 1) as usize);
        prev = b as isize;
    }
    parts.push((t + n - 1) as usize - (prev + 1) as usize);
    debug_assert_eq!(parts.iter().sum::<usize>(), t);
    let alpha: Vec<f64> = parts.iter().map(|&p| p as f64 / t as f64).collect();
    SimplexWeights::new(alpha)
}

/// A dataset record with its encoded visual feature attached.
#[derive(Debug, Clone)]
pub struct EncodedRecord {
    pub id: String,
    pub description: BiradsDescription,
    pub feature: LatentFeature,
}

/// Uniformly selects `count` distinct records matching the category exactly;
/// returns indices into `records`.
pub fn select_category_indices(
    records: &[EncodedRecord],
    category: &BiradsDescription,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, FeatureError> {
    let matches: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.description == *category)
        .map(|(i, _)| i)
        .collect();
    if matches.len() < count {
        return Err(FeatureError::InsufficientCategory {
            requested: count,
            available: matches.len(),
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let picks = rand::seq::index::sample(rng, matches.len(), count);
    Ok(picks.into_iter().map(|i| matches[i]).collect())
}

/// As [`select_category_indices`] but returning the features themselves.
pub fn select_category_features(
    records: &[EncodedRecord],
    category: &BiradsDescription,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<LatentFeature>, FeatureError> {
    Ok(select_category_indices(records, category, count, rng)?
        .into_iter()
        .map(|i| records[i].feature.clone())
        .collect())
}

/// Relative singular-value cutoff for the affine rank.
pub const RANK_TOL: f64 = 1e-8;

/// Dimension of the affine hull of the features: the rank of the matrix of
/// differences `v_k - v_0`, with singular values below `1e-8 * sigma_max`
/// treated as zero. Equals N-1 exactly when the features are affinely
/// independent.
pub fn affine_rank(features: &[LatentFeature]) -> Result<usize, FeatureError> {
    if features.is_empty() {
        return Err(FeatureError::Contract("need at least one feature".into()));
    }
    let dim = features[0].dim();
    for f in features {
        if f.dim() != dim {
            return Err(FeatureError::Contract("feature lengths differ".into()));
        }
    }
    if features.len() == 1 {
        return Ok(0);
    }
    let rows = features.len() - 1;
    let base = features[0].values();
    let diffs = DMatrix::from_fn(rows, dim, |r, c| features[r + 1].values()[c] - base[c]);
    let svals = diffs.singular_values();
    let smax = svals.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(svals.iter().filter(|&&s| s > RANK_TOL * smax).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feat(values: Vec<f64>) -> LatentFeature {
        LatentFeature::new(values).unwrap()
    }

    fn basis(dim: usize, axis: usize, scale: f64) -> LatentFeature {
        let mut v = vec![0.0; dim];
        v[axis] = scale;
        feat(v)
    }

    #[test]
    fn interpolate_endpoint_identity() {
        let a = basis(1024, 0, 2.0);
        let b = basis(1024, 1, 2.0);
        let w = SimplexWeights::new(vec![1.0, 0.0]).unwrap();
        let out = interpolate(&[a.clone(), b], &w).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn interpolate_midpoint_and_barycenter() {
        let v1 = basis(1024, 0, 2.0);
        let v2 = basis(1024, 1, 2.0);
        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let mid = interpolate(&[v1, v2], &w).unwrap();
        assert_eq!(mid.values()[0], 1.0);
        assert_eq!(mid.values()[1], 1.0);
        assert!(mid.values()[2..].iter().all(|&v| v == 0.0));

        let u1 = basis(1024, 0, 3.0);
        let u2 = basis(1024, 1, 3.0);
        let u3 = basis(1024, 2, 3.0);
        let w3 = SimplexWeights::new(vec![1.0 / 3.0; 3]).unwrap();
        let bary = interpolate(&[u1, u2, u3], &w3).unwrap();
        for i in 0..3 {
            assert!((bary.values()[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolate_rejects_mismatches() {
        let a = basis(8, 0, 1.0);
        let b = basis(9, 0, 1.0);
        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        assert!(interpolate(&[a.clone(), b], &w).is_err());
        let w1 = SimplexWeights::new(vec![1.0]).unwrap();
        assert!(interpolate(&[a.clone(), a], &w1).is_err());
    }

    #[test]
    fn simplex_weights_validation() {
        assert!(SimplexWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexWeights::new(vec![0.6, 0.6]).is_err());
        assert!(SimplexWeights::new(vec![1.5, -0.5]).is_err());
        assert!(SimplexWeights::new(vec![]).is_err());
    }

    #[test]
    fn equidistant_path_arithmetic_progression() {
        let a = feat(vec![0.0; 1024]);
        let b = feat(vec![9.0; 1024]);
        let path = equidistant_path(&a, &b, 10).unwrap();
        assert_eq!(path.len(), 10);
        assert_eq!(path[0], a);
        assert_eq!(path[9], b);
        for (k, p) in path.iter().enumerate() {
            for &v in p.values() {
                assert_eq!(v, k as f64, "step {k}");
            }
        }
    }

    #[test]
    fn equidistant_path_steps_2_is_endpoints() {
        let a = basis(16, 3, 1.25);
        let b = basis(16, 7, -0.5);
        let path = equidistant_path(&a, &b, 2).unwrap();
        assert_eq!(path, vec![a, b]);
        assert!(equidistant_path(&path[0], &path[1], 1).is_err());
    }

    #[test]
    fn grid_simplex_n1_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = sample_grid_simplex(1, 0.05, &mut rng).unwrap();
        assert_eq!(w.alpha(), &[1.0]);
    }

    #[test]
    fn grid_simplex_n2_support_is_21_points_with_exact_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..5000 {
            let w = sample_grid_simplex(2, 0.05, &mut rng).unwrap();
            let s: f64 = w.alpha().iter().sum();
            assert_eq!(s, 1.0, "sum must be exactly 1");
            let grid = (w.alpha()[0] / 0.05).round() as i64;
            assert!((w.alpha()[0] - grid as f64 * 0.05).abs() < 1e-12);
            seen.insert(grid);
        }
        assert_eq!(seen.len(), 21);
        assert_eq!(*seen.first().unwrap(), 0);
        assert_eq!(*seen.last().unwrap(), 20);
    }

    #[test]
    fn grid_simplex_n20_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = sample_grid_simplex(20, 0.05, &mut rng).unwrap();
        assert_eq!(w.len(), 20);
        let mut total_units = 0i64;
        for &a in w.alpha() {
            let g = (a / 0.05).round();
            assert!((a - g * 0.05).abs() < 1e-9, "not a grid multiple: {a}");
            total_units += g as i64;
        }
        assert_eq!(total_units, 20);
    }

    #[test]
    fn grid_simplex_rejects_bad_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(sample_grid_simplex(3, 0.07, &mut rng).is_err());
        assert!(sample_grid_simplex(0, 0.05, &mut rng).is_err());
    }

    #[test]
    fn grid_simplex_is_seed_reproducible() {
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| sample_grid_simplex(20, 0.05, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(99), draw(99));
    }

    fn toy_records() -> Vec<EncodedRecord> {
        let mut out = Vec::new();
        for m in 0..2usize {
            for s in 0..2usize {
                for i in 0..5usize {
                    out.push(EncodedRecord {
                        id: format!("{m}-{s}-{i}"),
                        description: BiradsDescription { margin: m, shape: s },
                        feature: basis(16, (m * 2 + s) * 4 + i % 4, 1.0 + i as f64),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn select_category_draws_without_replacement() {
        let recs = toy_records();
        let cat = BiradsDescription { margin: 1, shape: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let idx = select_category_indices(&recs, &cat, 5, &mut rng).unwrap();
        assert_eq!(idx.len(), 5);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        for i in idx {
            assert_eq!(recs[i].description, cat);
        }
    }

    #[test]
    fn select_category_count_zero_and_errors() {
        let recs = toy_records();
        let cat = BiradsDescription { margin: 0, shape: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(select_category_features(&recs, &cat, 0, &mut rng)
            .unwrap()
            .is_empty());
        let err = select_category_features(&recs, &cat, 6, &mut rng).unwrap_err();
        match err {
            FeatureError::InsufficientCategory {
                requested,
                available,
            } => {
                assert_eq!(requested, 6);
                assert_eq!(available, 5);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn affine_rank_basics() {
        let v = basis(1024, 5, 1.0);
        assert_eq!(affine_rank(std::slice::from_ref(&v)).unwrap(), 0);

        // three non-collinear points embedded in 1024-d span a plane
        let a = basis(1024, 0, 1.0);
        let b = basis(1024, 1, 1.0);
        let c = basis(1024, 2, 1.0);
        assert_eq!(affine_rank(&[a, b, c]).unwrap(), 2);

        // v, 2v, 3v are collinear
        let v1 = basis(1024, 3, 1.0);
        let v2 = basis(1024, 3, 2.0);
        let v3 = basis(1024, 3, 3.0);
        assert_eq!(affine_rank(&[v1, v2, v3]).unwrap(), 1);
    }

    #[test]
    fn affine_rank_of_duplicates_is_zero() {
        let v = basis(64, 2, 1.5);
        assert_eq!(affine_rank(&[v.clone(), v.clone(), v]).unwrap(), 0);
    }
}
