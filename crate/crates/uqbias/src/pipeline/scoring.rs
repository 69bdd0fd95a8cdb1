//! Turns measurement records into per-instance uncertainty scores for the
//! 25 methods of the evaluation: single-inference, repetitive, six bias
//! families times {prob, entropy, #answers}, and the two combined-entropy
//! methods.
//!
//! Every score is oriented "higher = more uncertain": probabilities are
//! negated, entropies and answer counts used as-is.

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dataset::{BiasMeasurements, MeasurementRecord};
use crate::perturb::Bias;
use crate::uq;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScoreKind {
    Prob,
    Entropy,
    NumAnswers,
}

impl ScoreKind {
    fn suffix(self) -> &'static str {
        match self {
            ScoreKind::Prob => "prob",
            ScoreKind::Entropy => "entropy",
            ScoreKind::NumAnswers => "num_answers",
        }
    }
}

/// Per-instance uncertainty scores of one method, plus how many model
/// queries the method costs per instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodScore {
    pub method_id: String,
    pub inference_count: u32,
    /// (instance_id, uncertainty score), in record order; instances whose
    /// required measurements are missing are left out.
    pub scores: Vec<(String, f64)>,
}

fn averaged_scores(
    records: &[MeasurementRecord],
    pick: impl Fn(&MeasurementRecord) -> Option<&BiasMeasurements>,
    kind: ScoreKind,
) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for record in records {
        let Some(measurements) = pick(record) else {
            continue;
        };
        let score = match kind {
            ScoreKind::Prob => match (measurements.averaged_dist.as_ref(), record.greedy_answer) {
                (Some(dist), Some(answer)) => {
                    Some(-uq::confidence_scores(dist, answer).prob_score)
                }
                _ => None,
            },
            ScoreKind::Entropy => measurements.averaged_dist.as_ref().map(uq::entropy),
            ScoreKind::NumAnswers => {
                let answers: Option<Vec<usize>> =
                    measurements.replicate_answers.iter().copied().collect();
                answers
                    .and_then(|a| uq::num_answers_score(&a).ok())
                    .map(|c| c as f64)
            }
        };
        if let Some(score) = score {
            out.push((record.instance_id.clone(), score));
        }
    }
    out
}

fn single_scores(records: &[MeasurementRecord], kind: ScoreKind) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for record in records {
        let Some(dist) = record.single_dist.as_ref() else {
            continue;
        };
        let score = match kind {
            ScoreKind::Prob => record
                .greedy_answer
                .map(|answer| -uq::confidence_scores(dist, answer).prob_score),
            ScoreKind::Entropy => Some(uq::entropy(dist)),
            ScoreKind::NumAnswers => None,
        };
        if let Some(score) = score {
            out.push((record.instance_id.clone(), score));
        }
    }
    out
}

/// Sum of the per-bias averaged entropies across `biases`; instances
/// missing any of the three are left out.
fn combined_entropy_scores(
    records: &[MeasurementRecord],
    biases: &[Bias],
) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for record in records {
        let mut total = 0.0;
        let mut complete = true;
        for bias in biases {
            match record
                .per_bias
                .get(bias)
                .and_then(|m| m.averaged_dist.as_ref())
            {
                Some(dist) => total += uq::entropy(dist),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            out.push((record.instance_id.clone(), total));
        }
    }
    out
}

/// Computes one method by id (`single_entropy`, `rephrase_prob`,
/// `text3_entropy`, ...). Errors if the records lack the bias run the
/// method needs.
pub fn score_method(
    records: &[MeasurementRecord],
    method_id: &str,
    n_perturbations: u32,
) -> Result<MethodScore, PipelineError> {
    let available: Vec<Bias> = Bias::ALL
        .into_iter()
        .filter(|b| records.iter().any(|r| r.per_bias.contains_key(b)))
        .collect();
    let all = build_methods(records, &available, n_perturbations);
    all.into_iter()
        .find(|m| m.method_id == method_id)
        .filter(|m| !m.scores.is_empty() || records.is_empty())
        .ok_or_else(|| PipelineError::MissingMethodData(method_id.to_string()))
}

/// Computes every method derivable from the records, in report order.
pub fn score_methods(
    records: &[MeasurementRecord],
    biases: &[Bias],
    n_perturbations: u32,
) -> Result<Vec<MethodScore>, PipelineError> {
    for bias in biases {
        if !records.iter().any(|r| r.per_bias.contains_key(bias)) {
            return Err(PipelineError::MissingMethodData(format!(
                "{}_entropy",
                bias.method_family()
            )));
        }
    }
    Ok(build_methods(records, biases, n_perturbations))
}

fn build_methods(
    records: &[MeasurementRecord],
    biases: &[Bias],
    n_perturbations: u32,
) -> Vec<MethodScore> {
    let n = n_perturbations;
    let mut methods = vec![
        MethodScore {
            method_id: "single_prob".to_string(),
            inference_count: 1,
            scores: single_scores(records, ScoreKind::Prob),
        },
        MethodScore {
            method_id: "single_entropy".to_string(),
            inference_count: 1,
            scores: single_scores(records, ScoreKind::Entropy),
        },
    ];
    for kind in [ScoreKind::Prob, ScoreKind::Entropy, ScoreKind::NumAnswers] {
        methods.push(MethodScore {
            method_id: format!("repetitive_{}", kind.suffix()),
            inference_count: n,
            scores: averaged_scores(records, |r| r.repetitive.as_ref(), kind),
        });
    }
    for &bias in biases {
        for kind in [ScoreKind::Prob, ScoreKind::Entropy, ScoreKind::NumAnswers] {
            methods.push(MethodScore {
                method_id: format!("{}_{}", bias.method_family(), kind.suffix()),
                inference_count: n,
                scores: averaged_scores(records, move |r| r.per_bias.get(&bias), kind),
            });
        }
    }
    // Combined methods exist for entropy only.
    if Bias::TEXT.iter().all(|b| biases.contains(b)) {
        methods.push(MethodScore {
            method_id: "text3_entropy".to_string(),
            inference_count: 3 * n,
            scores: combined_entropy_scores(records, &Bias::TEXT),
        });
    }
    if Bias::IMAGE.iter().all(|b| biases.contains(b)) {
        methods.push(MethodScore {
            method_id: "image3_entropy".to_string(),
            inference_count: 3 * n,
            scores: combined_entropy_scores(records, &Bias::IMAGE),
        });
    }
    methods
}
