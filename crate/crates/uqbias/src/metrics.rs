//! Evaluation statistics: AUROC and ROC curves for correctness ranking,
//! two-variable least-squares regression with t-test p-values, accuracy.
//!
//! Orientation convention: the positive class is "greedy prediction
//! incorrect" and scores are uncertainties, so higher score should mean
//! more likely wrong. Ties are handled with midranks, which makes the
//! rank-based AUROC agree exactly with the pairwise estimator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::uq::CorrectSet;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUROC needs at least one correct and one incorrect outcome")]
    SingleClass,
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("regression needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("regression x values are constant, slope undefined")]
    ConstantX,
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
}

/// One scored prediction: its uncertainty and whether the greedy answer
/// was wrong.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredOutcome {
    pub uncertainty_score: f64,
    pub is_incorrect: bool,
}

/// Slope/intercept/p-value of a two-variable least-squares fit.
///
/// The p-value is two-sided, from t = slope / SE(slope) with n - 2 degrees
/// of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Probability that a random incorrect outcome scores strictly higher than
/// a random correct one, counting ties half (Mann-Whitney with midranks).
pub fn auroc(outcomes: &[ScoredOutcome]) -> Result<f64, MetricsError> {
    validate_outcomes(outcomes)?;
    let n = outcomes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        outcomes[a]
            .uncertainty_score
            .partial_cmp(&outcomes[b].uncertainty_score)
            .expect("scores checked finite")
    });

    // Midranks: tied groups share the average of their 1-based ranks.
    // Midranks are multiples of 0.5, so the rank sum below is exact and
    // the result matches the pairwise estimator bit for bit.
    let mut rank_sum_incorrect = 0.0f64;
    let mut n_incorrect = 0usize;
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n
            && outcomes[order[end]].uncertainty_score
                == outcomes[order[start]].uncertainty_score
        {
            end += 1;
        }
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            if outcomes[idx].is_incorrect {
                rank_sum_incorrect += midrank;
                n_incorrect += 1;
            }
        }
        start = end;
    }

    let n_correct = n - n_incorrect;
    let u = rank_sum_incorrect - (n_incorrect * (n_incorrect + 1)) as f64 / 2.0;
    Ok(u / (n_incorrect as f64 * n_correct as f64))
}

/// ROC staircase from (0, 0) to (1, 1), one vertex per distinct threshold.
/// Its trapezoidal area equals [`auroc`] within 1e-12.
pub fn roc_curve(outcomes: &[ScoredOutcome]) -> Result<Vec<(f64, f64)>, MetricsError> {
    validate_outcomes(outcomes)?;
    let n = outcomes.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Descending: the most uncertain predictions are flagged first.
    order.sort_by(|&a, &b| {
        outcomes[b]
            .uncertainty_score
            .partial_cmp(&outcomes[a].uncertainty_score)
            .expect("scores checked finite")
    });

    let total_pos = outcomes.iter().filter(|o| o.is_incorrect).count();
    let total_neg = n - total_pos;
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n
            && outcomes[order[end]].uncertainty_score
                == outcomes[order[start]].uncertainty_score
        {
            end += 1;
        }
        for &idx in &order[start..end] {
            if outcomes[idx].is_incorrect {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        curve.push((fp as f64 / total_neg as f64, tp as f64 / total_pos as f64));
        start = end;
    }
    Ok(curve)
}

/// Area under a curve of (x, y) vertices by the trapezoidal rule.
pub fn trapezoid_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

fn validate_outcomes(outcomes: &[ScoredOutcome]) -> Result<(), MetricsError> {
    for (i, o) in outcomes.iter().enumerate() {
        if !o.uncertainty_score.is_finite() {
            return Err(MetricsError::NonFiniteScore(i));
        }
    }
    let n_incorrect = outcomes.iter().filter(|o| o.is_incorrect).count();
    if n_incorrect == 0 || n_incorrect == outcomes.len() {
        return Err(MetricsError::SingleClass);
    }
    Ok(())
}

/// Two-variable ordinary least squares with a two-sided t-test on the slope.
pub fn ols(x: &[f64], y: &[f64]) -> Result<OlsFit, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(MetricsError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mean_x: f64 = x.iter().sum::<f64>() / nf;
    let mean_y: f64 = y.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mean_x) * (xi - mean_x);
        sxy += (xi - mean_x) * (yi - mean_y);
    }
    if sxx == 0.0 {
        return Err(MetricsError::ConstantX);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;

    let df = (n - 2) as f64;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - (intercept + slope * xi);
            r * r
        })
        .sum();
    let se = (sse / df / sxx).sqrt();
    let p_value = if se == 0.0 {
        // Perfect fit: the slope is either exactly zero or infinitely
        // significant.
        if slope == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = slope / se;
        student_t_two_sided_p(t, df)
    };
    Ok(OlsFit {
        slope,
        intercept,
        p_value,
        n,
    })
}

/// Fraction of greedy answers that fall in their correct sets.
pub fn accuracy(greedy_answers: &[usize], correct_sets: &[CorrectSet]) -> Result<f64, MetricsError> {
    if greedy_answers.len() != correct_sets.len() {
        return Err(MetricsError::LengthMismatch(
            greedy_answers.len(),
            correct_sets.len(),
        ));
    }
    if greedy_answers.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = greedy_answers
        .iter()
        .zip(correct_sets)
        .filter(|(&a, c)| c.contains(a))
        .count();
    Ok(hits as f64 / greedy_answers.len() as f64)
}

/// Two-sided p-value for a Student-t statistic with `df` degrees of freedom,
/// via the regularized incomplete beta function.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

// Lanczos approximation, g = 7, n = 9.
#[allow(clippy::excessive_precision)]
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta I_x(a, b) by modified Lentz continued
/// fraction; absolute error well below 1e-8 over the t-test range.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
        + a * x.ln()
        + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        // Even step.
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
#[allow(clippy::excessive_precision)] // frozen oracle values keep full digits
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcomes(scores: &[f64], flags: &[bool]) -> Vec<ScoredOutcome> {
        scores
            .iter()
            .zip(flags)
            .map(|(&uncertainty_score, &is_incorrect)| ScoredOutcome {
                uncertainty_score,
                is_incorrect,
            })
            .collect()
    }

    /// O(n^2) pairwise oracle, independent of the rank-based path.
    fn auroc_brute_force(outcomes: &[ScoredOutcome]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for inc in outcomes.iter().filter(|o| o.is_incorrect) {
            for cor in outcomes.iter().filter(|o| !o.is_incorrect) {
                pairs += 1.0;
                if inc.uncertainty_score > cor.uncertainty_score {
                    wins += 1.0;
                } else if inc.uncertainty_score == cor.uncertainty_score {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_perfect_separation() {
        let o = outcomes(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        assert_eq!(auroc(&o).unwrap(), 1.0);
    }

    #[test]
    fn auroc_pure_ties() {
        let o = outcomes(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]);
        assert_eq!(auroc(&o).unwrap(), 0.5);
    }

    #[test]
    fn auroc_four_point_fixture() {
        let o = outcomes(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]);
        assert_eq!(auroc(&o).unwrap(), 0.75);
        assert_eq!(auroc_brute_force(&o), 0.75);
    }

    #[test]
    fn auroc_single_class_errors() {
        let o = outcomes(&[0.9, 0.8], &[true, true]);
        assert_eq!(auroc(&o), Err(MetricsError::SingleClass));
    }

    #[test]
    fn roc_perfect_separation_hits_corner() {
        let o = outcomes(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        let curve = roc_curve(&o).unwrap();
        assert!(curve.contains(&(0.0, 1.0)));
        assert_eq!(curve[0], (0.0, 0.0));
        assert_eq!(*curve.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn roc_all_ties_is_diagonal() {
        let o = outcomes(&[0.5, 0.5, 0.5], &[true, false, true]);
        let curve = roc_curve(&o).unwrap();
        assert_eq!(curve, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!((trapezoid_area(&curve) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn roc_area_matches_auroc_on_fixture() {
        let o = outcomes(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]);
        let curve = roc_curve(&o).unwrap();
        assert!((trapezoid_area(&curve) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn ols_exact_fit() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let fit = ols(&x, &y).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert!(fit.p_value < 1e-12);
    }

    #[test]
    fn ols_constant_y() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y = vec![3.5; 10];
        let fit = ols(&x, &y).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.p_value, 1.0);
    }

    #[test]
    fn ols_reference_fixture() {
        // slope/intercept/p frozen from an independent reference
        // implementation before the build.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.1, 3.9, 6.2, 7.8, 10.1];
        let fit = ols(&x, &y).unwrap();
        assert!((fit.slope - 1.99).abs() < 1e-6);
        assert!((fit.intercept - 0.0500000000000007).abs() < 1e-6);
        assert!((fit.p_value - 5.94153911175593e-05).abs() < 1e-6);
    }

    #[test]
    fn ols_rejects_bad_input() {
        assert_eq!(ols(&[1.0, 2.0], &[1.0, 2.0]), Err(MetricsError::TooFewPoints(2)));
        assert_eq!(
            ols(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(MetricsError::ConstantX)
        );
        assert_eq!(
            ols(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch(3, 2))
        );
    }

    #[test]
    fn t_distribution_reference_values() {
        // Frozen from an independent reference implementation.
        let cases = [
            (1.0, 3.0, 0.39100221895577053),
            (2.5, 8.0, 0.036942037713624067),
            (-1.2, 15.0, 0.24874978738802256),
            (0.0, 5.0, 1.0),
            (4.0, 2.0, 0.05719095841793663),
            (10.0, 30.0, 4.5752514082296097e-11),
            (0.3, 100.0, 0.76479988030030355),
        ];
        for (t, df, expected) in cases {
            let p = student_t_two_sided_p(t, df);
            assert!(
                (p - expected).abs() < 1e-10,
                "t={t} df={df}: got {p}, expected {expected}"
            );
        }
    }

    #[test]
    fn accuracy_examples() {
        let sets: Vec<CorrectSet> = vec![
            CorrectSet::new(&[0, 1]).unwrap(),
            CorrectSet::new(&[2, 3]).unwrap(),
            CorrectSet::new(&[0, 2]).unwrap(),
            CorrectSet::new(&[1, 3]).unwrap(),
        ];
        assert_eq!(accuracy(&[0, 2, 0, 1], &sets).unwrap(), 1.0);
        assert_eq!(accuracy(&[2, 0, 1, 0], &sets).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 2, 0, 0], &sets).unwrap(), 0.75);
        assert_eq!(
            accuracy(&[0], &sets),
            Err(MetricsError::LengthMismatch(1, 4))
        );
    }

    proptest! {
        #[test]
        fn auroc_equals_brute_force(
            raw in proptest::collection::vec((0u8..5, proptest::bool::ANY), 2..80)
        ) {
            // Coarse integer scores force plenty of ties.
            let o: Vec<ScoredOutcome> = raw
                .iter()
                .map(|&(s, f)| ScoredOutcome { uncertainty_score: s as f64, is_incorrect: f })
                .collect();
            match auroc(&o) {
                Ok(a) => prop_assert_eq!(a, auroc_brute_force(&o)),
                Err(MetricsError::SingleClass) => {}
                Err(e) => prop_assert!(false, "unexpected error {:?}", e),
            }
        }

        #[test]
        fn auroc_invariant_under_increasing_transform(
            raw in proptest::collection::vec((-50i32..50, proptest::bool::ANY), 2..60)
        ) {
            let o: Vec<ScoredOutcome> = raw
                .iter()
                .map(|&(s, f)| ScoredOutcome { uncertainty_score: s as f64, is_incorrect: f })
                .collect();
            let transformed: Vec<ScoredOutcome> = o
                .iter()
                .map(|v| ScoredOutcome {
                    uncertainty_score: (v.uncertainty_score / 10.0).exp() * 3.0 + 1.0,
                    is_incorrect: v.is_incorrect,
                })
                .collect();
            if let (Ok(a), Ok(b)) = (auroc(&o), auroc(&transformed)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn auroc_label_flip_complements(
            raw in proptest::collection::vec((0u8..7, proptest::bool::ANY), 2..60)
        ) {
            let o: Vec<ScoredOutcome> = raw
                .iter()
                .map(|&(s, f)| ScoredOutcome { uncertainty_score: s as f64, is_incorrect: f })
                .collect();
            let flipped: Vec<ScoredOutcome> = o
                .iter()
                .map(|v| ScoredOutcome { uncertainty_score: v.uncertainty_score, is_incorrect: !v.is_incorrect })
                .collect();
            if let (Ok(a), Ok(b)) = (auroc(&o), auroc(&flipped)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn roc_area_equals_auroc(
            raw in proptest::collection::vec((0u8..6, proptest::bool::ANY), 2..80)
        ) {
            let o: Vec<ScoredOutcome> = raw
                .iter()
                .map(|&(s, f)| ScoredOutcome { uncertainty_score: s as f64, is_incorrect: f })
                .collect();
            if let (Ok(a), Ok(curve)) = (auroc(&o), roc_curve(&o)) {
                prop_assert!((trapezoid_area(&curve) - a).abs() < 1e-12);
                // Staircase must be monotone nondecreasing.
                for w in curve.windows(2) {
                    prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
                }
            }
        }

        #[test]
        fn ols_recovers_exact_line(
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
            xs in proptest::collection::vec(-100i32..100, 3..40)
        ) {
            let x: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
            match ols(&x, &y) {
                Ok(fit) => {
                    prop_assert!((fit.slope - a).abs() < 1e-9);
                    prop_assert!((fit.intercept - b).abs() < 1e-8);
                }
                Err(MetricsError::ConstantX) => {}
                Err(e) => prop_assert!(false, "unexpected error {:?}", e),
            }
        }
    }
}
