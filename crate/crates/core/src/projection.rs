//! Projections onto the two constraint sets that drive normalization and
//! activation.
//!
//! `S1(sigma1, sigma2)` is the set of token rows whose mean is `sigma1` and
//! whose population variance is `sigma2^2`. The nearest point in `S1` has the
//! closed form
//!
//! ```text
//! u = sigma2 * (v - alpha) / sqrt(beta) + sigma1
//! ```
//!
//! per row, where `alpha` is the row mean and `beta` the row variance. This is
//! exactly layer normalization. `S2` is the nonnegative orthant; its nearest
//! point is the pointwise ReLU.
//!
//! [`oracle_s1`] certifies the closed form by brute force: it samples random
//! feasible points of `S1` and checks that none of them is closer to the
//! input than the closed-form output.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::scalar::Scalar;

/// Per-step normalization parameters: target row mean `sigma1`, target row
/// standard deviation `sigma2`, and the variance floor `epsilon` that guards
/// division for degenerate (constant) rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormTarget<F: Scalar = f64> {
    sigma1: F,
    sigma2: F,
    epsilon: F,
}

impl<F: Scalar> NormTarget<F> {
    pub const DEFAULT_EPSILON: f64 = 1e-12;

    pub fn new(sigma1: F, sigma2: F, epsilon: F) -> Result<Self> {
        if !(sigma2 > F::zero()) || !(epsilon > F::zero()) || !sigma1.is_finite() {
            return Err(Error::BadNormTarget {
                sigma2: sigma2.to_f64().unwrap_or(f64::NAN),
                epsilon: epsilon.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self {
            sigma1,
            sigma2,
            epsilon,
        })
    }

    /// Target mean `sigma1`, target standard deviation `sigma2`, default floor.
    pub fn with_moments(sigma1: F, sigma2: F) -> Result<Self> {
        Self::new(sigma1, sigma2, F::cast(Self::DEFAULT_EPSILON))
    }

    /// Mean 0, standard deviation 1.
    pub fn standard() -> Self {
        Self::with_moments(F::zero(), F::one()).expect("standard target is valid")
    }

    pub fn sigma1(&self) -> F {
        self.sigma1
    }

    pub fn sigma2(&self) -> F {
        self.sigma2
    }

    pub fn epsilon(&self) -> F {
        self.epsilon
    }
}

impl<F: Scalar> Default for NormTarget<F> {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct NormTargetRepr<F: Scalar> {
    sigma1: F,
    sigma2: F,
    #[serde(default)]
    epsilon: Option<F>,
}

impl<'de, F: Scalar> Deserialize<'de> for NormTarget<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = NormTargetRepr::<F>::deserialize(d)?;
        let eps = r.epsilon.unwrap_or_else(|| F::cast(Self::DEFAULT_EPSILON));
        NormTarget::new(r.sigma1, r.sigma2, eps).map_err(serde::de::Error::custom)
    }
}

fn row_mean<F: Scalar>(row: &[F]) -> F {
    let mut acc = F::zero();
    for &v in row {
        acc = acc + v;
    }
    acc / F::cast(row.len())
}

fn row_variance<F: Scalar>(row: &[F], mean: F) -> F {
    let mut acc = F::zero();
    for &v in row {
        let d = v - mean;
        acc = acc + d * d;
    }
    acc / F::cast(row.len())
}

/// Nearest point in `S1(sigma1, sigma2)`, row by row. Rows whose variance
/// falls below the floor come out as the constant `sigma1` row.
pub fn project_s1<F: Scalar>(v: &GridFunction<F>, t: &NormTarget<F>) -> GridFunction<F> {
    project_s1_detailed(v, t).0
}

/// Like [`project_s1`], also reporting the indices of degenerate rows whose
/// variance hit the floor.
pub fn project_s1_detailed<F: Scalar>(
    v: &GridFunction<F>,
    t: &NormTarget<F>,
) -> (GridFunction<F>, Vec<usize>) {
    let mut values = Vec::with_capacity(v.n_x() * v.n_y());
    let mut degenerate = Vec::new();
    for k in 0..v.n_x() {
        let row = v.row(k);
        let alpha = row_mean(row);
        let beta = row_variance(row, alpha);
        if beta < t.epsilon {
            degenerate.push(k);
        }
        let denom = beta.max(t.epsilon).sqrt();
        for &x in row {
            values.push(t.sigma2 * (x - alpha) / denom + t.sigma1);
        }
    }
    let out = GridFunction::new(v.n_x(), v.n_y(), values).expect("projection preserves shape");
    (out, degenerate)
}

/// Nearest point in the nonnegative orthant: pointwise ReLU. Negative entries
/// and negative zero both map to positive zero.
pub fn project_s2<F: Scalar>(v: &GridFunction<F>) -> GridFunction<F> {
    let values = v
        .values()
        .iter()
        .map(|&x| if x > F::zero() { x } else { F::zero() })
        .collect();
    GridFunction::new(v.n_x(), v.n_y(), values).expect("relu preserves shape")
}

fn l2_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc.sqrt()
}

/// Outcome of the brute-force minimality check for one row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct S1Certificate<F: Scalar = f64> {
    pub input: Vec<F>,
    pub closed_form_distance: F,
    pub best_sampled_distance: F,
    pub samples: usize,
    pub seed: u64,
    pub pass: bool,
}

/// Slack allowed when comparing the closed-form distance against sampled
/// feasible points; absorbs roundoff in the distance computations.
pub const ORACLE_SLACK: f64 = 1e-9;

/// Draws `samples` random feasible points of `S1` and checks that the closed
/// form [`project_s1`] is at least as close to `v_row` as every one of them.
///
/// A feasible point is constructed by centering a random vector, rescaling it
/// to variance `sigma2^2`, and shifting it to mean `sigma1`. Constant input
/// rows are rejected: the minimality statement needs a well-defined projection.
pub fn oracle_s1<F: Scalar>(
    v_row: &[F],
    t: &NormTarget<F>,
    samples: usize,
    seed: u64,
) -> Result<S1Certificate<F>> {
    let n = v_row.len();
    if n < 2 {
        return Err(Error::DegenerateRow);
    }
    let mean = row_mean(v_row);
    if row_variance(v_row, mean) < t.epsilon {
        return Err(Error::DegenerateRow);
    }

    let grid = GridFunction::new(1, n, v_row.to_vec())?;
    let projected = project_s1(&grid, t);
    let closed_form_distance = l2_distance(projected.values(), v_row);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = F::infinity();
    let mut pass = true;
    let slack = F::cast(ORACLE_SLACK);
    let mut candidate = vec![F::zero(); n];
    for _ in 0..samples {
        loop {
            for c in candidate.iter_mut() {
                *c = F::cast(rng.gen_range(-1.0..1.0));
            }
            let m = row_mean(&candidate);
            let var = row_variance(&candidate, m);
            if var > F::zero() {
                let scale = t.sigma2 / var.sqrt();
                for c in candidate.iter_mut() {
                    *c = (*c - m) * scale + t.sigma1;
                }
                break;
            }
        }
        let d = l2_distance(&candidate, v_row);
        if d < best {
            best = d;
        }
        if closed_form_distance > d + slack {
            pass = false;
        }
    }

    Ok(S1Certificate {
        input: v_row.to_vec(),
        closed_form_distance,
        best_sampled_distance: best,
        samples,
        seed,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(rows: &[Vec<f64>]) -> GridFunction {
        GridFunction::from_rows(rows).unwrap()
    }

    #[test]
    fn closed_form_worked_row() {
        let t = NormTarget::with_moments(0.0, 1.0).unwrap();
        let out = project_s1(&g(&[vec![1.0, 2.0, 3.0, 4.0]]), &t);
        // alpha = 2.5, beta = 1.25
        let denom = 1.25_f64.sqrt();
        let expected: Vec<f64> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|v| (v - 2.5) / denom)
            .collect();
        for (a, b) in out.values().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((out.at(0, 0) + 1.341641).abs() < 1e-6);
        assert!((out.at(0, 1) + 0.447214).abs() < 1e-6);
    }

    #[test]
    fn fixed_point_of_projection() {
        // Row already at mean 0.5, variance 4.
        let t = NormTarget::with_moments(0.5, 2.0).unwrap();
        let row = vec![2.5, -1.5, 2.5, -1.5];
        let out = project_s1(&g(&[row.clone()]), &t);
        for (a, b) in out.values().iter().zip(row.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_row_degenerates_to_sigma1() {
        let t = NormTarget::with_moments(3.0, 1.0).unwrap();
        let (out, degenerate) = project_s1_detailed(&g(&[vec![7.0, 7.0, 7.0]]), &t);
        assert_eq!(out.values(), &[3.0, 3.0, 3.0]);
        assert_eq!(degenerate, vec![0]);
    }

    #[test]
    fn relu_sign_split() {
        let out = project_s2(&g(&[vec![-1.0, 2.0]]));
        assert_eq!(out.values(), &[0.0, 2.0]);
    }

    #[test]
    fn relu_idempotent_on_nonnegative() {
        let v = g(&[vec![0.0, 1.0, 2.5]]);
        assert_eq!(project_s2(&v), v);
    }

    #[test]
    fn relu_normalizes_signed_zero() {
        let out = project_s2(&g(&[vec![-0.0]]));
        assert_eq!(out.values()[0].to_bits(), 0.0_f64.to_bits());
    }

    #[test]
    fn norm_target_validation() {
        assert!(NormTarget::new(0.0, 0.0, 1e-12).is_err());
        assert!(NormTarget::new(0.0, 1.0, 0.0).is_err());
        assert!(NormTarget::new(0.0, 1.0, 1e-12).is_ok());
    }

    #[test]
    fn oracle_certificate_passes() {
        let t = NormTarget::with_moments(0.0, 1.0).unwrap();
        let cert = oracle_s1(&[1.0, 2.0, 3.0, 4.0], &t, 100_000, 0).unwrap();
        assert!(cert.pass);
        assert!(cert.best_sampled_distance >= cert.closed_form_distance - ORACLE_SLACK);
    }

    #[test]
    fn oracle_self_comparison_distances_equal() {
        let t = NormTarget::with_moments(0.0, 1.0).unwrap();
        let v = vec![1.0, 2.0, 3.0, 4.0];
        let projected = project_s1(&g(&[v.clone()]), &t);
        let d_proj = l2_distance(projected.values(), &v);
        // The projection itself is a feasible point, so the minimal feasible
        // distance cannot beat it by more than roundoff.
        let cert = oracle_s1(&v, &t, 10_000, 1).unwrap();
        assert!(cert.best_sampled_distance >= d_proj - ORACLE_SLACK);
    }

    #[test]
    fn two_point_enumeration_at_ny_2() {
        // With two entries, the feasible set is exactly two points:
        // (s1 + s2, s1 - s2) and (s1 - s2, s1 + s2). The closed form must
        // select the nearer one; agreement is at roundoff level.
        let t = NormTarget::with_moments(0.25, 1.5).unwrap();
        for v in [[3.0, -1.0], [-1.0, 3.0], [0.1, 0.2]] {
            let out = project_s1(&g(&[v.to_vec()]), &t);
            let a = [0.25 + 1.5, 0.25 - 1.5];
            let b = [0.25 - 1.5, 0.25 + 1.5];
            let da = l2_distance(&a, &v);
            let db = l2_distance(&b, &v);
            let (nearer, farther): (&[f64; 2], &[f64; 2]) =
                if da <= db { (&a, &b) } else { (&b, &a) };
            let to_nearer = l2_distance(out.values(), nearer);
            let to_farther = l2_distance(out.values(), farther);
            assert!(to_nearer < 1e-12, "{to_nearer}");
            assert!(to_farther > 1.0);
        }
        // Exact-arithmetic inputs reproduce the enumerated point bit for bit.
        let out = project_s1(&g(&[vec![3.0, -1.0]]), &t);
        assert_eq!(out.values(), &[0.25 + 1.5, 0.25 - 1.5]);
    }

    #[test]
    fn oracle_rejects_degenerate_rows() {
        let t = NormTarget::standard();
        assert!(oracle_s1(&[1.0], &t, 10, 0).is_err());
        assert!(oracle_s1(&[2.0, 2.0, 2.0], &t, 10, 0).is_err());
    }

    proptest! {
        #[test]
        fn moments_hit_target(
            rows in prop::collection::vec(prop::collection::vec(-10.0..10.0_f64, 4..12), 1..5),
            sigma1 in -2.0..2.0_f64,
            sigma2 in 0.5..2.0_f64,
        ) {
            let width = rows[0].len();
            prop_assume!(rows.iter().all(|r| r.len() == width));
            let t = NormTarget::with_moments(sigma1, sigma2).unwrap();
            let (out, degenerate) = project_s1_detailed(&g(&rows), &t);
            for k in 0..out.n_x() {
                if degenerate.contains(&k) {
                    continue;
                }
                let mean = row_mean(out.row(k));
                let var = row_variance(out.row(k), mean);
                prop_assert!((mean - sigma1).abs() < 1e-12);
                prop_assert!((var - sigma2 * sigma2).abs() < 1e-10);
            }
        }

        #[test]
        fn projection_is_idempotent(
            row in prop::collection::vec(-10.0..10.0_f64, 3..10),
            sigma1 in -2.0..2.0_f64,
            sigma2 in 0.5..2.0_f64,
        ) {
            let t = NormTarget::with_moments(sigma1, sigma2).unwrap();
            let once = project_s1(&g(&[row]), &t);
            let twice = project_s1(&once, &t);
            prop_assert!(once.max_abs_diff(&twice).unwrap() < 1e-12);
        }

        #[test]
        fn invariant_to_positive_affine_input_maps(
            row in prop::collection::vec(-5.0..5.0_f64, 3..10),
            a in 0.1..5.0_f64,
            b in -3.0..3.0_f64,
        ) {
            let spread = row.iter().cloned().fold(f64::MIN, f64::max)
                - row.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let t = NormTarget::standard();
            let direct = project_s1(&g(&[row.clone()]), &t);
            let mapped: Vec<f64> = row.iter().map(|v| a * v + b).collect();
            let via_map = project_s1(&g(&[mapped]), &t);
            prop_assert!(direct.max_abs_diff(&via_map).unwrap() < 1e-12);
        }

        #[test]
        fn relu_is_1_lipschitz_in_max_norm(
            a in prop::collection::vec(-10.0..10.0_f64, 1..20),
            shift in prop::collection::vec(-1.0..1.0_f64, 1..20),
        ) {
            let n = a.len().min(shift.len());
            let a = a[..n].to_vec();
            let b: Vec<f64> = a.iter().zip(&shift[..n]).map(|(x, s)| x + s).collect();
            let ga = project_s2(&g(&[a.clone()]));
            let gb = project_s2(&g(&[b.clone()]));
            let in_dist = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let out_dist = ga.max_abs_diff(&gb).unwrap();
            prop_assert!(out_dist <= in_dist);
        }
    }
}
