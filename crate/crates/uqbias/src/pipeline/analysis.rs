//! Regressions of bias effects on bias-free confidence.
//!
//! For each bias and uncertainty kind, the per-instance effect of that
//! bias is regressed on the instance's bias-free confidence (or, in the
//! appendix variant, on its bias-free epistemic entropy, where higher
//! means less confident). Two effects per uncertainty kind:
//!
//! * impact: |E_single - E_free|, the magnitude of the shift;
//! * reduction: E_free - E_single, positive when the single prompt
//!   reports less entropy than the bias-free reference, i.e. bias-induced
//!   overconfidence.

use serde::{Deserialize, Serialize};

use crate::dataset::MeasurementRecord;
use crate::metrics::{self, MetricsError, OlsFit};
use crate::perturb::Bias;

/// Choice of independent variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    /// Summed bias-free probability of the correct options.
    Confidence,
    /// Bias-free epistemic entropy; higher = less confident.
    EpistemicInconfidence,
}

impl ConfidenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConfidenceKind::Confidence => "confidence",
            ConfidenceKind::EpistemicInconfidence => "epistemic_inconfidence",
        }
    }
}

/// Choice of dependent variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    AbsChangeEpistemic,
    AbsChangeAleatoric,
    ReductionEpistemic,
    ReductionAleatoric,
}

impl EffectKind {
    pub const ALL: [EffectKind; 4] = [
        EffectKind::AbsChangeEpistemic,
        EffectKind::AbsChangeAleatoric,
        EffectKind::ReductionEpistemic,
        EffectKind::ReductionAleatoric,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EffectKind::AbsChangeEpistemic => "abs_change_epistemic",
            EffectKind::AbsChangeAleatoric => "abs_change_aleatoric",
            EffectKind::ReductionEpistemic => "reduction_epistemic",
            EffectKind::ReductionAleatoric => "reduction_aleatoric",
        }
    }

    pub fn is_epistemic(self) -> bool {
        matches!(
            self,
            EffectKind::AbsChangeEpistemic | EffectKind::ReductionEpistemic
        )
    }

    /// The companion effect on the other uncertainty kind (impact pairs
    /// with impact, reduction with reduction).
    pub fn aleatoric_counterpart(self) -> EffectKind {
        match self {
            EffectKind::AbsChangeEpistemic => EffectKind::AbsChangeAleatoric,
            EffectKind::ReductionEpistemic => EffectKind::ReductionAleatoric,
            other => other,
        }
    }
}

/// One regression: (bias, x kind, y kind) with its fit or the reason it
/// could not be run.
#[derive(Debug)]
pub struct RegressionRow {
    pub bias: Bias,
    pub x_kind: ConfidenceKind,
    pub y_kind: EffectKind,
    pub outcome: Result<OlsFit, MetricsError>,
}

fn effect_value(record: &MeasurementRecord, bias: Bias, y_kind: EffectKind) -> Option<f64> {
    let single = record.single_breakdown?;
    let averaged = record.per_bias.get(&bias)?.averaged_breakdown?;
    let (e_single, e_free) = if y_kind.is_epistemic() {
        (single.epistemic_entropy, averaged.epistemic_entropy)
    } else {
        (single.aleatoric_entropy, averaged.aleatoric_entropy)
    };
    Some(match y_kind {
        EffectKind::AbsChangeEpistemic | EffectKind::AbsChangeAleatoric => {
            (e_single - e_free).abs()
        }
        EffectKind::ReductionEpistemic | EffectKind::ReductionAleatoric => e_free - e_single,
    })
}

fn x_value(record: &MeasurementRecord, bias: Bias, x_kind: ConfidenceKind) -> Option<f64> {
    let averaged = record.per_bias.get(&bias)?.averaged_breakdown?;
    Some(match x_kind {
        ConfidenceKind::Confidence => averaged.p_correct,
        ConfidenceKind::EpistemicInconfidence => averaged.epistemic_entropy,
    })
}

/// Runs all (bias, effect) regressions for one choice of x variable.
/// Instances missing either side (parse or extraction failures) are
/// dropped from the affected regressions.
pub fn analyze_bias_effects(
    records: &[MeasurementRecord],
    x_kind: ConfidenceKind,
) -> Vec<RegressionRow> {
    let biases: Vec<Bias> = Bias::ALL
        .into_iter()
        .filter(|b| records.iter().any(|r| r.per_bias.contains_key(b)))
        .collect();

    let mut rows = Vec::new();
    for &bias in &biases {
        for y_kind in EffectKind::ALL {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for record in records {
                if let (Some(xv), Some(yv)) = (
                    x_value(record, bias, x_kind),
                    effect_value(record, bias, y_kind),
                ) {
                    x.push(xv);
                    y.push(yv);
                }
            }
            rows.push(RegressionRow {
                bias,
                x_kind,
                y_kind,
                outcome: metrics::ols(&x, &y),
            });
        }
    }
    rows
}

/// slope_epistemic / slope_aleatoric for a (bias, effect) pair; the
/// headline figure of the regression tables.
pub fn ratio_epi_ale(rows: &[RegressionRow], bias: Bias, epistemic_kind: EffectKind) -> Option<f64> {
    debug_assert!(epistemic_kind.is_epistemic());
    let find = |kind: EffectKind| {
        rows.iter()
            .find(|r| r.bias == bias && r.y_kind == kind)
            .and_then(|r| r.outcome.as_ref().ok())
            .map(|fit| fit.slope)
    };
    let epi = find(epistemic_kind)?;
    let ale = find(epistemic_kind.aleatoric_counterpart())?;
    if ale == 0.0 {
        return None;
    }
    Some(epi / ale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BiasMeasurements, MEASUREMENT_SCHEMA_VERSION};
    use crate::uq::{self, AnswerDistribution, CorrectSet};
    use std::collections::BTreeMap;

    /// Builds a record whose single distribution and bias-averaged
    /// distribution are hand-picked.
    fn record(id: &str, single: [f64; 4], averaged: [f64; 4]) -> MeasurementRecord {
        let correct = CorrectSet::new(&[0, 1]).unwrap();
        let single_dist = AnswerDistribution::new(single).unwrap();
        let avg = AnswerDistribution::new(averaged).unwrap();
        let measurements = BiasMeasurements::from_replicates(
            vec![Some(avg)],
            vec![Some(0)],
            &correct,
        )
        .unwrap();
        MeasurementRecord {
            schema_version: MEASUREMENT_SCHEMA_VERSION,
            instance_id: id.to_string(),
            correct: correct.clone(),
            greedy_answer: Some(0),
            is_correct: Some(true),
            single_dist: Some(single_dist),
            single_breakdown: Some(uq::breakdown(&single_dist, &correct)),
            single_label_mass: Some(1.0),
            repetitive: None,
            per_bias: BTreeMap::from([(Bias::Phrasing, measurements)]),
        }
    }

    #[test]
    fn zero_effect_gives_zero_slope() {
        // Identical single and averaged distributions: every y is zero.
        let records: Vec<MeasurementRecord> = [
            [0.7, 0.2, 0.06, 0.04],
            [0.4, 0.3, 0.2, 0.1],
            [0.25, 0.25, 0.25, 0.25],
            [0.5, 0.3, 0.1, 0.1],
        ]
        .iter()
        .enumerate()
        .map(|(i, &p)| record(&format!("i{i}"), p, p))
        .collect();

        let rows = analyze_bias_effects(&records, ConfidenceKind::Confidence);
        assert_eq!(rows.len(), 4);
        for row in rows {
            let fit = row.outcome.unwrap();
            assert!(fit.slope.abs() < 1e-12);
            assert!((fit.p_value - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_confidence_surfaces_per_row_error() {
        let records: Vec<MeasurementRecord> = (0..4)
            .map(|i| record(&format!("i{i}"), [0.4, 0.3, 0.2, 0.1], [0.25; 4]))
            .collect();
        let rows = analyze_bias_effects(&records, ConfidenceKind::Confidence);
        for row in rows {
            assert_eq!(row.outcome.unwrap_err(), MetricsError::ConstantX);
        }
    }

    #[test]
    fn ratio_is_quotient_of_slopes() {
        // Three instances with varying confidence and effects.
        let records = vec![
            record("a", [0.9, 0.05, 0.03, 0.02], [0.6, 0.3, 0.06, 0.04]),
            record("b", [0.5, 0.2, 0.2, 0.1], [0.45, 0.35, 0.12, 0.08]),
            record("c", [0.3, 0.3, 0.2, 0.2], [0.35, 0.35, 0.15, 0.15]),
        ];
        let rows = analyze_bias_effects(&records, ConfidenceKind::Confidence);
        let slope = |kind: EffectKind| {
            rows.iter()
                .find(|r| r.y_kind == kind)
                .unwrap()
                .outcome
                .as_ref()
                .unwrap()
                .slope
        };
        let expected = slope(EffectKind::AbsChangeEpistemic) / slope(EffectKind::AbsChangeAleatoric);
        let got = ratio_epi_ale(&rows, Bias::Phrasing, EffectKind::AbsChangeEpistemic).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
}
