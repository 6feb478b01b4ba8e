//! Viewer scores, max aggregation, the global-local objective and the
//! annealed temperature.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{MvrError, Result};

/// Per-viewer scores of one (query, document) pair and their max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub individual: Vec<f64>,
    pub best_viewer: usize,
    pub aggregate: f64,
}

/// Inner product of the query vector with every view.
pub fn individual_scores(query: ArrayView1<f64>, views: ArrayView2<f64>) -> Result<Vec<f64>> {
    if query.len() != views.ncols() {
        return Err(MvrError::DimensionMismatch {
            expected: views.ncols(),
            actual: query.len(),
        });
    }
    Ok(views.rows().into_iter().map(|v| v.dot(&query)).collect())
}

/// Max over viewers; ties go to the lowest index.
pub fn aggregate_score(scores: &[f64]) -> Result<ScoreBreakdown> {
    let (&first, rest) = scores
        .split_first()
        .ok_or_else(|| MvrError::invalid("cannot aggregate an empty score vector"))?;
    let mut best = (0, first);
    for (i, &s) in rest.iter().enumerate() {
        if s > best.1 {
            best = (i + 1, s);
        }
    }
    Ok(ScoreBreakdown {
        individual: scores.to_vec(),
        best_viewer: best.0,
        aggregate: best.1,
    })
}

pub fn score_pair(query: ArrayView1<f64>, views: ArrayView2<f64>) -> Result<ScoreBreakdown> {
    aggregate_score(&individual_scores(query, views)?)
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(MvrError::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Softmax cross-entropy of the positive's aggregate score against the negatives'.
pub fn global_loss(pos: &ScoreBreakdown, negs: &[ScoreBreakdown], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let logits = std::iter::once(pos.aggregate)
        .chain(negs.iter().map(|n| n.aggregate))
        .map(|s| s / tau);
    Ok(log_sum_exp(logits) - pos.aggregate / tau)
}

/// Softmax cross-entropy of the winning viewer against all viewers of the positive.
pub fn local_loss(pos: &ScoreBreakdown, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let logits = pos.individual.iter().map(|s| s / tau);
    Ok(log_sum_exp(logits) - pos.aggregate / tau)
}

pub fn combined_loss(global: f64, local: f64, lambda: f64) -> f64 {
    global + lambda * local
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TauMode {
    Annealed,
    Fixed { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the local term.
    pub lambda: f64,
    /// Annealing speed.
    pub alpha: f64,
    pub tau_floor: f64,
    pub tau_mode: TauMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.01,
            alpha: 0.1,
            tau_floor: 0.3,
            tau_mode: TauMode::Annealed,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(MvrError::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(MvrError::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tau_floor > 0.0 && self.tau_floor <= 1.0) {
            return Err(MvrError::config(format!("tau_floor must be in (0, 1], got {}", self.tau_floor)));
        }
        if let TauMode::Fixed { tau } = self.tau_mode {
            check_tau(tau).map_err(|_| MvrError::config(format!("fixed tau must be > 0, got {tau}")))?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            alpha: self.alpha,
            floor: self.tau_floor,
            mode: self.tau_mode,
        }
    }
}

/// `tau(t) = max(floor, exp(-alpha * t))`, evaluated once per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub alpha: f64,
    pub floor: f64,
    pub mode: TauMode,
}

impl TemperatureSchedule {
    pub fn annealed(alpha: f64) -> Self {
        TemperatureSchedule {
            alpha,
            floor: 0.3,
            mode: TauMode::Annealed,
        }
    }

    pub fn temperature_at(&self, epoch: usize) -> f64 {
        match self.mode {
            TauMode::Fixed { tau } => tau,
            TauMode::Annealed => self.floor.max((-self.alpha * epoch as f64).exp()),
        }
    }
}

/// Loss value and its gradients for one query.
#[derive(Debug, Clone)]
pub struct QueryLoss {
    pub breakdown: ScoreBreakdown,
    pub global: f64,
    pub local: f64,
    pub total: f64,
    pub d_query: Array1<f64>,
    pub d_pos: Array2<f64>,
    pub d_negs: Vec<Array2<f64>>,
}

/// Global-local loss for one query against its positive's views and each
/// negative's views, with gradients routed through each document's winning viewer.
pub fn query_loss(
    query: ArrayView1<f64>,
    pos: ArrayView2<f64>,
    negs: &[ArrayView2<f64>],
    tau: f64,
    lambda: f64,
) -> Result<QueryLoss> {
    check_tau(tau)?;
    let pos_sb = score_pair(query, pos)?;
    let neg_sb: Vec<ScoreBreakdown> = negs
        .iter()
        .map(|n| score_pair(query, *n))
        .collect::<Result<_>>()?;
    let global = global_loss(&pos_sb, &neg_sb, tau)?;
    let local = local_loss(&pos_sb, tau)?;

    let d = query.len();
    let mut d_query = Array1::zeros(d);
    let mut d_pos = Array2::zeros(pos.raw_dim());
    let mut d_negs: Vec<Array2<f64>> = negs.iter().map(|n| Array2::zeros(n.raw_dim())).collect();

    // global term: softmax over aggregate scores
    let lse = log_sum_exp(
        std::iter::once(pos_sb.aggregate)
            .chain(neg_sb.iter().map(|n| n.aggregate))
            .map(|s| s / tau),
    );
    let coef_pos = ((pos_sb.aggregate / tau - lse).exp() - 1.0) / tau;
    {
        let b = pos_sb.best_viewer;
        d_query.scaled_add(coef_pos, &pos.row(b));
        d_pos.row_mut(b).scaled_add(coef_pos, &query);
    }
    for ((sb, view), grad) in neg_sb.iter().zip(negs).zip(d_negs.iter_mut()) {
        let coef = (sb.aggregate / tau - lse).exp() / tau;
        let b = sb.best_viewer;
        d_query.scaled_add(coef, &view.row(b));
        grad.row_mut(b).scaled_add(coef, &query);
    }

    // local term: softmax over the positive's viewers
    if lambda != 0.0 {
        let lse_local = log_sum_exp(pos_sb.individual.iter().map(|s| s / tau));
        for (i, &s) in pos_sb.individual.iter().enumerate() {
            let mut coef = (s / tau - lse_local).exp();
            if i == pos_sb.best_viewer {
                coef -= 1.0;
            }
            let coef = lambda * coef / tau;
            d_query.scaled_add(coef, &pos.row(i));
            d_pos.row_mut(i).scaled_add(coef, &query);
        }
    }

    Ok(QueryLoss {
        total: combined_loss(global, local, lambda),
        breakdown: pos_sb,
        global,
        local,
        d_query,
        d_pos,
        d_negs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sb(scores: &[f64]) -> ScoreBreakdown {
        aggregate_score(scores).unwrap()
    }

    #[test]
    fn orthonormal_individual_scores() {
        let q = arr1(&[1.0, 0.0]);
        let views = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(individual_scores(q.view(), views.view()).unwrap(), vec![1.0, 0.0]);
        let zero = arr1(&[0.0, 0.0]);
        assert_eq!(individual_scores(zero.view(), views.view()).unwrap(), vec![0.0, 0.0]);
        let bad = arr1(&[1.0, 0.0, 0.0]);
        assert!(individual_scores(bad.view(), views.view()).is_err());
    }

    #[test]
    fn individual_scores_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Array::from_shape_fn(64, |_| rng.random_range(-1.0..1.0));
        let v = Array::from_shape_fn((8, 64), |_| rng.random_range(-1.0..1.0));
        let got = individual_scores(q.view(), v.view()).unwrap();
        for i in 0..8 {
            let mut naive = 0.0;
            for j in 0..64 {
                naive += q[j] * v[[i, j]];
            }
            assert!((got[i] - naive).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregate_tie_breaks_to_lowest_index() {
        let a = sb(&[0.2, 0.9, 0.9]);
        assert_eq!((a.aggregate, a.best_viewer), (0.9, 1));
        let one = sb(&[0.5]);
        assert_eq!((one.aggregate, one.best_viewer), (0.5, 0));
        assert!(aggregate_score(&[]).is_err());
    }

    #[test]
    fn global_loss_cases() {
        let l = global_loss(&sb(&[0.3]), &[sb(&[0.3])], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(global_loss(&sb(&[0.3]), &[], 1.0).unwrap(), 0.0);
        // direct exponent sums
        let (p, n1, n2, tau): (f64, f64, f64, f64) = (0.7, -0.2, 0.4, 0.5);
        let direct = -((p / tau).exp() / ((p / tau).exp() + (n1 / tau).exp() + (n2 / tau).exp())).ln();
        let got = global_loss(&sb(&[p]), &[sb(&[n1]), sb(&[n2])], tau).unwrap();
        assert!((got - direct).abs() < 1e-10);
        assert!(global_loss(&sb(&[p]), &[], 0.0).is_err());
        assert!(global_loss(&sb(&[p]), &[], -1.0).is_err());
    }

    #[test]
    fn local_loss_cases() {
        let l = local_loss(&sb(&[0.4; 4]), 1.0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert_eq!(local_loss(&sb(&[1.3]), 0.7).unwrap(), 0.0);
        let l = local_loss(&sb(&[2.0, 0.0, 0.0, 0.0]), 1.0).unwrap();
        let direct = -(2f64.exp() / (2f64.exp() + 3.0)).ln();
        assert!((l - direct).abs() < 1e-12);
        assert!((l - 0.340_75).abs() < 1e-5);
        assert!(local_loss(&sb(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn combined_loss_arithmetic() {
        assert_eq!(combined_loss(0.7, 1.4, 0.0), 0.7);
        assert!((combined_loss(0.7, 1.4, 0.01) - 0.714).abs() < 1e-15);
        assert!((combined_loss(0.7, 1.4, 0.5) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn temperature_schedule() {
        let s = TemperatureSchedule::annealed(0.1);
        assert_eq!(s.temperature_at(0), 1.0);
        assert_eq!(s.temperature_at(40), 0.3);
        assert!((s.temperature_at(5) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(s.temperature_at(12), (-0.1 * 12.0f64).exp());
        assert_eq!(s.temperature_at(13), 0.3);
        let flat = TemperatureSchedule::annealed(0.0);
        assert!((0..100).all(|t| flat.temperature_at(t) == 1.0));
        let fixed = TemperatureSchedule {
            mode: TauMode::Fixed { tau: 0.7 },
            ..s
        };
        assert_eq!(fixed.temperature_at(20), 0.7);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau_mode: TauMode::Fixed { tau: 0.0 },
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            lambda: f64::NAN,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn query_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = |shape: (usize, usize)| Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0));
        let q = r((1, 6)).row(0).to_owned();
        let pos = r((4, 6));
        let negs = vec![r((4, 6)), r((4, 6))];
        let (tau, lambda) = (0.7, 0.3);
        let eval = |q: &Array1<f64>, pos: &Array2<f64>, negs: &[Array2<f64>]| {
            let views: Vec<_> = negs.iter().map(|n| n.view()).collect();
            query_loss(q.view(), pos.view(), &views, tau, lambda).unwrap().total
        };
        let views: Vec<_> = negs.iter().map(|n| n.view()).collect();
        let an = query_loss(q.view(), pos.view(), &views, tau, lambda).unwrap();
        let h = 1e-6;
        for j in 0..6 {
            let (mut a, mut b) = (q.clone(), q.clone());
            a[j] += h;
            b[j] -= h;
            let fd = (eval(&a, &pos, &negs) - eval(&b, &pos, &negs)) / (2.0 * h);
            assert!((fd - an.d_query[j]).abs() < 1e-7);
        }
        for i in 0..4 {
            for j in 0..6 {
                let (mut a, mut b) = (pos.clone(), pos.clone());
                a[[i, j]] += h;
                b[[i, j]] -= h;
                let fd = (eval(&q, &a, &negs) - eval(&q, &b, &negs)) / (2.0 * h);
                assert!((fd - an.d_pos[[i, j]]).abs() < 1e-7);
                let (mut a, mut b) = (negs.clone(), negs.clone());
                a[1][[i, j]] += h;
                b[1][[i, j]] -= h;
                let fd = (eval(&q, &pos, &a) - eval(&q, &pos, &b)) / (2.0 * h);
                assert!((fd - an.d_negs[1][[i, j]]).abs() < 1e-7);
            }
        }
    }

    fn scores(k: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, k)
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_covariant(s in scores(1..10), rot in 0usize..10) {
            let a = sb(&s);
            let mut p = s.clone();
            let r = rot % p.len();
            p.rotate_left(r);
            let b = sb(&p);
            prop_assert_eq!(a.aggregate, b.aggregate);
            prop_assert_eq!(p[b.best_viewer], s[a.best_viewer]);
            prop_assert_eq!(a.aggregate, a.individual[a.best_viewer]);
            prop_assert!(a.individual.iter().all(|&x| x <= a.aggregate));
        }

        #[test]
        fn losses_shift_invariant_and_bounded(s in scores(1..10), negs in scores(1..6), c in -100.0f64..100.0, tau in 0.1f64..2.0) {
            let pos = sb(&s);
            let n: Vec<_> = negs.iter().map(|&x| sb(&[x])).collect();
            let g = global_loss(&pos, &n, tau).unwrap();
            let l = local_loss(&pos, tau).unwrap();
            prop_assert!(g >= 0.0);
            prop_assert!(l >= 0.0 && l <= (s.len() as f64).ln() + 1e-12);
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let nshift: Vec<_> = negs.iter().map(|&x| sb(&[x + c])).collect();
            let g2 = global_loss(&sb(&shifted), &nshift, tau).unwrap();
            let l2 = local_loss(&sb(&shifted), tau).unwrap();
            prop_assert!((g - g2).abs() < 1e-9 * (1.0 + g.abs()));
            prop_assert!((l - l2).abs() < 1e-9 * (1.0 + l.abs()));
        }

        #[test]
        fn scaling_keeps_best_viewer(s in scores(1..10), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
            prop_assert_eq!(sb(&s).best_viewer, sb(&scaled).best_viewer);
        }

        #[test]
        fn losses_finite_for_large_scores(s in proptest::collection::vec(-1e4f64..1e4, 1..8), n in -1e4f64..1e4) {
            let pos = sb(&s);
            prop_assert!(global_loss(&pos, &[sb(&[n])], 0.3).unwrap().is_finite());
            prop_assert!(local_loss(&pos, 0.3).unwrap().is_finite());
        }

        #[test]
        fn schedule_monotone_and_bounded(alpha in 0.0f64..2.0, t in 0usize..200) {
            let s = TemperatureSchedule::annealed(alpha);
            let a = s.temperature_at(t);
            prop_assert!((0.3..=1.0).contains(&a));
            prop_assert!(s.temperature_at(t + 1) <= a);
        }
    }
}
