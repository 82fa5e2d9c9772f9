//! Split conformal prediction for linear regression.
//!
//! Scores are absolute residuals `r = |y − ŵᵀx|`. For a pool of `N` scores the
//! conformal quantile is the `⌈(N+1)(1−α)⌉`-th smallest score and the
//! interval for a new input is `[ŵᵀx − q, ŵᵀx + q]`.

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{check_dim, Error, Result};
use crate::vector::dot;

/// One client's nonnegative nonconformity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub client_id: usize,
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(client_id: usize, scores: Vec<f64>) -> Result<Self> {
        let set = Self { client_id, scores };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        match self
            .scores
            .iter()
            .enumerate()
            .find(|(_, r)| !(**r >= 0.0 && r.is_finite()))
        {
            Some((index, &value)) => Err(Error::NegativeScore { index, value }),
            None => Ok(()),
        }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn mean(&self) -> f64 {
        crate::stats::mean(&self.scores)
    }
}

#[inline]
pub fn absolute_residual(model: &[f64], features: &[f64], target: f64) -> f64 {
    (target - dot(model, features)).abs()
}

pub fn nonconformity_scores(model: &[f64], samples: &[Sample], client_id: usize) -> Result<ScoreSet> {
    let scores = samples
        .iter()
        .map(|s| {
            check_dim(model.len(), s.features.dim())?;
            Ok(absolute_residual(model, &s.features, s.target))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { client_id, scores })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalQuantile {
    pub value: f64,
    /// 1-based order statistic that was requested.
    pub rank: usize,
    /// `rank > N`: the pool is too small for the requested level and the
    /// maximum score was returned instead of +∞.
    pub saturated: bool,
}

/// Rank `⌈(N+1)(1−α)⌉` of the conformal order statistic.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    // Guard against products like 100·0.9 landing a hair above an integer.
    (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize
}

pub fn conformal_quantile(pooled: &[f64], alpha: f64) -> Result<ConformalQuantile> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    if pooled.is_empty() {
        return Err(Error::Empty("conformal quantile of an empty pool"));
    }
    let n = pooled.len();
    let rank = conformal_rank(n, alpha);
    let saturated = rank > n;
    let mut buf = pooled.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(rank.min(n) - 1, f64::total_cmp);
    Ok(ConformalQuantile {
        value: *kth,
        rank,
        saturated,
    })
}

/// Concatenates the raw scores of the listed clients.
pub fn pool_scores<'a>(sets: impl IntoIterator<Item = &'a ScoreSet>) -> Vec<f64> {
    sets.into_iter()
        .flat_map(|s| s.scores.iter().copied())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
}

impl PredictionInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

pub fn predict_interval(model: &[f64], x: &[f64], q: f64) -> Result<PredictionInterval> {
    check_dim(model.len(), x.len())?;
    if !(q >= 0.0) {
        return Err(Error::invalid("q", format!("must be nonnegative, got {q}")));
    }
    let center = dot(model, x);
    Ok(PredictionInterval {
        lower: center - q,
        upper: center + q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub coverage: f64,
    pub mean_width: f64,
    pub n_test: usize,
    pub covered: usize,
}

pub fn evaluate(model: &[f64], q: f64, test: &[Sample]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation needs at least one test sample"));
    }
    let mut covered = 0;
    let mut width_sum = 0.0;
    for s in test {
        let interval = predict_interval(model, &s.features, q)?;
        width_sum += interval.width();
        if interval.contains(s.target) {
            covered += 1;
        }
    }
    Ok(EvalReport {
        coverage: covered as f64 / test.len() as f64,
        mean_width: width_sum / test.len() as f64,
        n_test: test.len(),
        covered,
    })
}

/// Same as [`evaluate`] given precomputed test residuals `|y − ŵᵀx|`; the
/// simulator uses this to avoid keeping test features around.
pub fn evaluate_residuals(residuals: &[f64], q: f64) -> Result<EvalReport> {
    if residuals.is_empty() {
        return Err(Error::Empty("evaluation needs at least one test sample"));
    }
    if !(q >= 0.0) {
        return Err(Error::invalid("q", format!("must be nonnegative, got {q}")));
    }
    let covered = residuals.iter().filter(|&&r| r <= q).count();
    Ok(EvalReport {
        coverage: covered as f64 / residuals.len() as f64,
        mean_width: 2.0 * q,
        n_test: residuals.len(),
        covered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn perfect_and_zero_models() {
        let w = [0.5, -0.25];
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample::synthesize(&w, vec![f64::from(i), 1.0], 0.0))
            .collect();
        let s = nonconformity_scores(&w, &samples, 0).unwrap();
        assert!(s.scores().iter().all(|&r| r == 0.0));
        let z = nonconformity_scores(&[0.0, 0.0], &samples, 0).unwrap();
        for (r, smp) in z.scores().iter().zip(&samples) {
            assert_eq!(*r, smp.target.abs());
        }
    }

    #[test]
    fn score_by_hand() {
        let s = nonconformity_scores(&[1.0, 1.0], &[Sample::new(vec![2.0, 3.0], 4.0)], 7).unwrap();
        assert_eq!(s.scores(), &[1.0]);
        assert_eq!(s.client_id, 7);
        assert!(nonconformity_scores(&[1.0], &[Sample::new(vec![2.0, 3.0], 4.0)], 0).is_err());
    }

    #[test]
    fn rank_formula() {
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(conformal_rank(99, 0.1), 90);
        assert_eq!(conformal_rank(999, 0.1), 900);
        assert_eq!(conformal_rank(10, 0.5), 6);
        assert_eq!(conformal_rank(3, 0.1), 4);
    }

    #[test]
    fn quantile_examples() {
        let pool: Vec<f64> = (1..=9).rev().map(f64::from).collect();
        let q = conformal_quantile(&pool, 0.1).unwrap();
        assert_eq!((q.value, q.rank, q.saturated), (9.0, 9, false));

        let pool: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(conformal_quantile(&pool, 0.5).unwrap().value, 6.0);

        let q = conformal_quantile(&[3.0, 1.0, 2.0], 0.1).unwrap();
        assert_eq!((q.value, q.saturated), (3.0, true));
    }

    #[test]
    fn quantile_errors() {
        assert!(conformal_quantile(&[], 0.1).is_err());
        assert!(conformal_quantile(&[1.0], 0.0).is_err());
        assert!(conformal_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn intervals() {
        let i = predict_interval(&[1.0, 1.0], &[2.0, 3.0], 0.0).unwrap();
        assert_eq!((i.lower, i.upper), (5.0, 5.0));
        let i = predict_interval(&[1.0], &[5.0], 2.0).unwrap();
        assert_eq!((i.lower, i.upper), (3.0, 7.0));
        assert!(predict_interval(&[1.0], &[5.0], -0.1).is_err());
    }

    #[test]
    fn vacuous_and_degenerate_evaluation() {
        let mut r = seed::rng(1, &[]);
        let w = [0.3, -0.7, 0.1];
        let samples: Vec<Sample> = (0..500)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                Sample::synthesize(&w, x, r.random_range(-1.0..1.0))
            })
            .collect();
        let max_res = nonconformity_scores(&w, &samples, 0)
            .unwrap()
            .scores()
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        let all = evaluate(&w, max_res + 1.0, &samples).unwrap();
        assert_eq!(all.coverage, 1.0);
        assert!((all.mean_width - 2.0 * (max_res + 1.0)).abs() < 1e-12);
        let none = evaluate(&w, 0.0, &samples).unwrap();
        assert_eq!(none.coverage, 0.0);
        assert!(evaluate(&w, 1.0, &[]).is_err());
    }

    #[test]
    fn negative_scores_rejected() {
        assert!(matches!(
            ScoreSet::new(0, vec![0.1, -0.2]),
            Err(Error::NegativeScore { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn width_is_twice_q(w in prop::collection::vec(-5.0f64..5.0, 4),
                            x in prop::collection::vec(-5.0f64..5.0, 4),
                            q in 0.0f64..10.0) {
            let i = predict_interval(&w, &x, q).unwrap();
            prop_assert!((i.width() - 2.0 * q).abs() <= 1e-12 * (1.0 + i.upper.abs()));
        }

        #[test]
        fn quantile_monotone_in_scores_and_alpha(
            pool in prop::collection::vec(0.0f64..10.0, 1..60),
            bump_at in 0usize..60,
            bump in 0.0f64..5.0,
            a1 in 0.01f64..0.99,
            a2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let q_lo = conformal_quantile(&pool, lo).unwrap().value;
            let q_hi = conformal_quantile(&pool, hi).unwrap().value;
            prop_assert!(q_hi <= q_lo);

            let mut raised = pool.clone();
            let i = bump_at % raised.len();
            raised[i] += bump;
            prop_assert!(conformal_quantile(&raised, lo).unwrap().value >= q_lo);
        }

        #[test]
        fn residuals_are_lipschitz_in_the_model(
            w in prop::collection::vec(-3.0f64..3.0, 6),
            w2 in prop::collection::vec(-3.0f64..3.0, 6),
            x in prop::collection::vec(-3.0f64..3.0, 6),
            y in -10.0f64..10.0,
        ) {
            let gap = (absolute_residual(&w, &x, y) - absolute_residual(&w2, &x, y)).abs();
            let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dn = crate::vector::euclidean(&w, &w2);
            prop_assert!(gap <= xn * dn + 1e-12);
        }
    }
}
