//! Entropy decomposition over four-option answer distributions.
//!
//! Total entropy splits into an epistemic part (spread between the pooled
//! correct-option mass and each incorrect option) and an aleatoric part
//! (spread among the correct options), weighted by the correct-option mass:
//!
//! ```text
//! entropy = epistemic_entropy + p_correct * aleatoric_entropy
//! ```
//!
//! All entropies are in nats. Everything here is pure and reentrant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of answer options per question.
pub const OPTION_COUNT: usize = 4;

/// Tolerance for accepting a probability vector as normalized.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Correct-option mass below which the aleatoric term is defined as zero.
/// The decomposition identity is insensitive to this choice because the
/// aleatoric term enters weighted by that same mass.
const ZERO_MASS_CUTOFF: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum UqError {
    #[error("probability {value} at index {index} is negative or not finite")]
    InvalidProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1 within {SUM_TOLERANCE}")]
    NotNormalized { sum: f64 },
    #[error("correct set must be nonempty")]
    EmptyCorrectSet,
    #[error("option index {0} out of range 0..{OPTION_COUNT}")]
    IndexOutOfRange(usize),
    #[error("duplicate option index {0} in correct set")]
    DuplicateIndex(usize),
    #[error("no samples")]
    NoSamples,
}

/// Probability vector over the four canonical options of one question.
///
/// Entries are validated (nonnegative, summing to 1 within [`SUM_TOLERANCE`])
/// and then renormalized exactly at construction, so downstream math never
/// sees an unnormalized vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; OPTION_COUNT]", into = "[f64; OPTION_COUNT]")]
pub struct AnswerDistribution {
    probs: [f64; OPTION_COUNT],
}

impl AnswerDistribution {
    pub fn new(probs: [f64; OPTION_COUNT]) -> Result<Self, UqError> {
        let validated = Self::validated(probs)?;
        let sum: f64 = validated.probs.iter().sum();
        if sum == 1.0 {
            return Ok(validated);
        }
        let mut normalized = validated.probs;
        for p in &mut normalized {
            *p /= sum;
        }
        Ok(Self { probs: normalized })
    }

    /// Validation without renormalization; keeps persisted values bit for
    /// bit (renormalizing twice is not bit-stable).
    fn validated(probs: [f64; OPTION_COUNT]) -> Result<Self, UqError> {
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(UqError::InvalidProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(UqError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / OPTION_COUNT as f64; OPTION_COUNT],
        }
    }

    pub fn probs(&self) -> &[f64; OPTION_COUNT] {
        &self.probs
    }

    pub fn prob(&self, option: usize) -> f64 {
        self.probs[option]
    }
}

impl TryFrom<[f64; OPTION_COUNT]> for AnswerDistribution {
    type Error = UqError;
    fn try_from(probs: [f64; OPTION_COUNT]) -> Result<Self, Self::Error> {
        Self::validated(probs)
    }
}

impl From<AnswerDistribution> for [f64; OPTION_COUNT] {
    fn from(dist: AnswerDistribution) -> Self {
        dist.probs
    }
}

/// Nonempty subset of option indices holding the valid answers.
///
/// Ground truth: used only by analysis code, never by the confidence
/// scores themselves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CorrectSet {
    members: Vec<usize>,
}

impl CorrectSet {
    pub fn new(members: &[usize]) -> Result<Self, UqError> {
        if members.is_empty() {
            return Err(UqError::EmptyCorrectSet);
        }
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        for pair in sorted.windows(2) {
            if pair[0] == pair[1] {
                return Err(UqError::DuplicateIndex(pair[0]));
            }
        }
        if let Some(&max) = sorted.last() {
            if max >= OPTION_COUNT {
                return Err(UqError::IndexOutOfRange(max));
            }
        }
        Ok(Self { members: sorted })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, option: usize) -> bool {
        self.members.binary_search(&option).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<usize>> for CorrectSet {
    type Error = UqError;
    fn try_from(members: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(&members)
    }
}

impl From<CorrectSet> for Vec<usize> {
    fn from(set: CorrectSet) -> Self {
        set.members
    }
}

/// All four uncertainty quantities of one distribution at once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBreakdown {
    pub total_entropy: f64,
    pub epistemic_entropy: f64,
    pub aleatoric_entropy: f64,
    pub p_correct: f64,
}

/// Confidence scores computed from one distribution and the greedy answer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceScores {
    /// Probability assigned to the greedy answer. Higher = more confident.
    pub prob_score: f64,
    /// Total entropy of the distribution. Higher = more uncertain.
    pub entropy_score: f64,
}

// 0 * ln 0 := 0.
fn neg_p_ln_p(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy of the full distribution, in nats. Result in [0, ln 4].
pub fn entropy(dist: &AnswerDistribution) -> f64 {
    dist.probs().iter().copied().map(neg_p_ln_p).sum()
}

/// Summed probability of the valid answers.
pub fn p_correct(dist: &AnswerDistribution, correct: &CorrectSet) -> f64 {
    correct.members().iter().map(|&i| dist.prob(i)).sum()
}

/// Entropy over the pooled correct mass and each incorrect option.
pub fn epistemic_entropy(dist: &AnswerDistribution, correct: &CorrectSet) -> f64 {
    let pooled = neg_p_ln_p(p_correct(dist, correct));
    let incorrect: f64 = (0..OPTION_COUNT)
        .filter(|&i| !correct.contains(i))
        .map(|i| neg_p_ln_p(dist.prob(i)))
        .sum();
    (pooled + incorrect).max(0.0)
}

/// Entropy of the correct options renormalized by their total mass.
///
/// Defined as zero when the correct mass vanishes; the decomposition holds
/// regardless because the term is weighted by that mass.
pub fn aleatoric_entropy(dist: &AnswerDistribution, correct: &CorrectSet) -> f64 {
    let mass = p_correct(dist, correct);
    if mass < ZERO_MASS_CUTOFF {
        return 0.0;
    }
    let h: f64 = correct
        .members()
        .iter()
        .map(|&i| neg_p_ln_p(dist.prob(i) / mass))
        .sum();
    h.max(0.0)
}

/// Computes all four quantities; the decomposition identity holds within 1e-9.
pub fn breakdown(dist: &AnswerDistribution, correct: &CorrectSet) -> UncertaintyBreakdown {
    UncertaintyBreakdown {
        total_entropy: entropy(dist),
        epistemic_entropy: epistemic_entropy(dist, correct),
        aleatoric_entropy: aleatoric_entropy(dist, correct),
        p_correct: p_correct(dist, correct),
    }
}

/// Baseline confidence scores: probability of the greedy answer and total
/// entropy. Uncertainty ranking uses entropy ascending / probability
/// descending.
pub fn confidence_scores(dist: &AnswerDistribution, greedy_answer: usize) -> ConfidenceScores {
    ConfidenceScores {
        prob_score: dist.prob(greedy_answer),
        entropy_score: entropy(dist),
    }
}

/// Number of distinct answers among sampled inferences. Higher = more
/// uncertain. Errors on an empty sample list.
pub fn num_answers_score(samples: &[usize]) -> Result<usize, UqError> {
    if samples.is_empty() {
        return Err(UqError::NoSamples);
    }
    let mut seen = [false; OPTION_COUNT];
    for &s in samples {
        if s >= OPTION_COUNT {
            return Err(UqError::IndexOutOfRange(s));
        }
        seen[s] = true;
    }
    Ok(seen.iter().filter(|&&b| b).count())
}
