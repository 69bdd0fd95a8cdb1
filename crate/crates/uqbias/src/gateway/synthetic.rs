//! Deterministic synthetic biased model for offline runs.
//!
//! Each instance gets fixed bias-free logits over its canonical options.
//! A rendered prompt shifts those logits by a zero-mean, hash-derived
//! perturbation of the prompt's bias-relevant features (template choice,
//! permutations, image bytes), scaled by `bias_strength * (1 - P_free(correct))`:
//! low-confidence instances feel bias harder, which is the coupling the
//! real models exhibit. With `bias_strength = 0` every perturbed prompt
//! returns exactly the bias-free distribution.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GatewayError, QueryBackend, QueryRequest, TokenLogprobs};
use crate::dataset::QuestionInstance;
use crate::uq::{AnswerDistribution, CorrectSet, OPTION_COUNT};

/// Temperatures below this are treated as greedy decoding.
const GREEDY_TEMPERATURE_CUTOFF: f64 = 1e-6;

/// Ground truth the synthetic model answers from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticInstanceTruth {
    pub bias_free_logits: [f64; OPTION_COUNT],
    pub correct: CorrectSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticModelConfig {
    pub instances: BTreeMap<String, SyntheticInstanceTruth>,
    /// Coupling coefficient between bias magnitude and (1 - P_free(correct)).
    pub bias_strength: f64,
    pub feature_hash_seed: u64,
}

impl SyntheticModelConfig {
    /// Derives per-instance bias-free logits from a seeded stream. The
    /// correct options get a knowledge-dependent logit lift, so confidence
    /// varies widely across instances.
    pub fn derive(
        instances: &[QuestionInstance],
        feature_hash_seed: u64,
        bias_strength: f64,
    ) -> Self {
        let mut map = BTreeMap::new();
        for instance in instances {
            let mut rng = truth_rng(feature_hash_seed, &instance.instance_id);
            let knowledge: f64 = rng.random_range(-0.5..3.5);
            let mut logits = [0.0; OPTION_COUNT];
            for (i, logit) in logits.iter_mut().enumerate() {
                let base = if instance.correct.contains(i) {
                    knowledge
                } else {
                    0.0
                };
                *logit = base + rng.random_range(-0.75..0.75);
            }
            map.insert(
                instance.instance_id.clone(),
                SyntheticInstanceTruth {
                    bias_free_logits: logits,
                    correct: instance.correct.clone(),
                },
            );
        }
        Self {
            instances: map,
            bias_strength,
            feature_hash_seed,
        }
    }

    /// The distribution the model would emit with all bias removed.
    pub fn bias_free_distribution(&self, instance_id: &str) -> Option<AnswerDistribution> {
        let truth = self.instances.get(instance_id)?;
        Some(
            AnswerDistribution::new(softmax(truth.bias_free_logits))
                .expect("softmax is normalized"),
        )
    }
}

fn truth_rng(seed: u64, instance_id: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"uqbias.synthetic.truth.v1");
    hasher.update(seed.to_le_bytes());
    hasher.update(instance_id.as_bytes());
    ChaCha12Rng::from_seed(hasher.finalize().into())
}

fn softmax(logits: [f64; OPTION_COUNT]) -> [f64; OPTION_COUNT] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|l| (l - max).exp());
    let sum: f64 = exps.iter().sum();
    exps.map(|e| e / sum)
}

/// First 8 bytes of a SHA-256 over the inputs, mapped to [0, 1).
fn hash_unit(parts: &[&[u8]]) -> f64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
        hasher.update([0]);
    }
    let digest = hasher.finalize();
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(raw) as f64 / (u64::MAX as f64 + 1.0)
}

fn prompt_fingerprint(seed: u64, request: &QueryRequest) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"uqbias.synthetic.fp.v1");
    hasher.update(seed.to_le_bytes());
    hasher.update(request.text.as_bytes());
    hasher.update([0]);
    hasher.update(&request.image_png);
    hasher.finalize().into()
}

/// Answers one rendered prompt. Pure: identical prompt bytes and sampling
/// parameters give identical output.
pub fn synthetic_query(
    config: &SyntheticModelConfig,
    request: &QueryRequest,
) -> Result<TokenLogprobs, GatewayError> {
    let truth = config.instances.get(&request.instance_id).ok_or_else(|| {
        GatewayError::Protocol(format!(
            "synthetic model has no instance {:?}",
            request.instance_id
        ))
    })?;

    let bias_free = softmax(truth.bias_free_logits);
    let p_free_correct: f64 = truth
        .correct
        .members()
        .iter()
        .map(|&i| bias_free[i])
        .sum();

    let fingerprint = prompt_fingerprint(config.feature_hash_seed, request);
    let amplitude = config.bias_strength * (1.0 - p_free_correct);
    let mut logits = truth.bias_free_logits;
    if amplitude != 0.0 {
        for (option, logit) in logits.iter_mut().enumerate() {
            let noise = 2.0 * hash_unit(&[&fingerprint, &[option as u8]]) - 1.0;
            *logit += amplitude * noise;
        }
    }

    // The model reads labels off the prompt, so its answer space is the
    // displayed labels; express the canonical logits there.
    let mut displayed_logits = [0.0; OPTION_COUNT];
    for (label, displayed) in displayed_logits.iter_mut().enumerate() {
        *displayed = logits[request.canonical_map.option_for_label(label)];
    }
    let displayed = softmax(displayed_logits);

    let sampled_label = if request.temperature < GREEDY_TEMPERATURE_CUTOFF {
        argmax(&displayed)
    } else {
        sample_label(&displayed, request, &fingerprint)
    };

    Ok(TokenLogprobs {
        sampled_token: sampled_label.to_string(),
        top: displayed
            .iter()
            .enumerate()
            .map(|(label, &p)| (label.to_string(), p.ln()))
            .collect(),
    })
}

fn argmax(probs: &[f64; OPTION_COUNT]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Hash-derived draw from the (optionally nucleus-truncated) distribution.
fn sample_label(probs: &[f64; OPTION_COUNT], request: &QueryRequest, fingerprint: &[u8]) -> usize {
    let mut order: Vec<usize> = (0..OPTION_COUNT).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite"));

    let mut kept = Vec::new();
    let mut cumulative = 0.0;
    for &label in &order {
        kept.push(label);
        cumulative += probs[label];
        if cumulative >= request.top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|&l| probs[l]).sum();
    let u = hash_unit(&[
        fingerprint,
        b"sample",
        &request.temperature.to_bits().to_le_bytes(),
        &request.top_p.to_bits().to_le_bytes(),
    ]) * total;

    let mut acc = 0.0;
    for &label in &kept {
        acc += probs[label];
        if u < acc {
            return label;
        }
    }
    *kept.last().expect("kept nonempty")
}

/// [`QueryBackend`] wrapper around [`synthetic_query`].
pub struct SyntheticModel {
    config: SyntheticModelConfig,
}

impl SyntheticModel {
    pub fn new(config: SyntheticModelConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &SyntheticModelConfig {
        &self.config
    }
}

impl QueryBackend for SyntheticModel {
    fn model_tag(&self) -> String {
        format!(
            "synthetic:{}:{}",
            self.config.feature_hash_seed, self.config.bias_strength
        )
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn query(&self, request: &QueryRequest) -> Result<TokenLogprobs, GatewayError> {
        synthetic_query(&self.config, request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{extract_option_probs, LabelMatch, QueryPurpose};
    use crate::perturb::CanonicalMap;

    fn config(bias_strength: f64) -> SyntheticModelConfig {
        let mut instances = BTreeMap::new();
        for i in 0..30 {
            let mut rng = truth_rng(11, &format!("inst{i}"));
            let knowledge: f64 = rng.random_range(-0.5..3.5);
            let mut logits = [0.0; 4];
            for (k, l) in logits.iter_mut().enumerate() {
                *l = if k < 2 { knowledge } else { 0.0 } + rng.random_range(-0.75..0.75);
            }
            instances.insert(
                format!("inst{i}"),
                SyntheticInstanceTruth {
                    bias_free_logits: logits,
                    correct: CorrectSet::new(&[0, 1]).unwrap(),
                },
            );
        }
        SyntheticModelConfig {
            instances,
            bias_strength,
            feature_hash_seed: 11,
        }
    }

    fn request(instance: &str, text: &str, temperature: f64) -> QueryRequest {
        QueryRequest {
            instance_id: instance.to_string(),
            purpose: QueryPurpose::Greedy,
            text: text.to_string(),
            image_png: vec![1, 2, 3],
            canonical_map: CanonicalMap::identity(),
            temperature,
            top_p: 1.0,
        }
    }

    fn dist_of(config: &SyntheticModelConfig, req: &QueryRequest) -> AnswerDistribution {
        let reply = synthetic_query(config, req).unwrap();
        extract_option_probs(&reply, &req.canonical_map, LabelMatch::Strict)
            .unwrap()
            .dist
    }

    #[test]
    fn zero_bias_matches_bias_free_for_every_prompt() {
        let cfg = config(0.0);
        let free = cfg.bias_free_distribution("inst0").unwrap();
        for text in ["prompt a", "prompt b", "a very different prompt"] {
            let d = dist_of(&cfg, &request("inst0", text, 0.9));
            for k in 0..4 {
                assert!((d.prob(k) - free.prob(k)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_requests_get_identical_replies() {
        let cfg = config(2.0);
        let a = synthetic_query(&cfg, &request("inst1", "same prompt", 0.9)).unwrap();
        let b = synthetic_query(&cfg, &request("inst1", "same prompt", 0.9)).unwrap();
        assert_eq!(a, b);
        let c = synthetic_query(&cfg, &request("inst1", "other prompt", 0.9)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn greedy_temperature_returns_argmax_label() {
        let cfg = config(0.0);
        for inst in ["inst0", "inst3", "inst7"] {
            let req = request(inst, "greedy", 1e-15);
            let reply = synthetic_query(&cfg, &req).unwrap();
            let dist = cfg.bias_free_distribution(inst).unwrap();
            let best = (0..4)
                .max_by(|&a, &b| dist.prob(a).partial_cmp(&dist.prob(b)).unwrap())
                .unwrap();
            assert_eq!(reply.sampled_token, best.to_string());
        }
    }

    #[test]
    fn averaging_over_suites_approaches_bias_free() {
        // Mean of zero-mean logit noise: more perturbed prompts, closer to
        // the bias-free distribution.
        let cfg = config(1.5);
        let mean_l1 = |n_prompts: usize| -> f64 {
            let mut total = 0.0;
            for i in 0..30 {
                let id = format!("inst{i}");
                let free = cfg.bias_free_distribution(&id).unwrap();
                let mut mean = [0.0f64; 4];
                for p in 0..n_prompts {
                    let d = dist_of(&cfg, &request(&id, &format!("variant {p}"), 0.9));
                    for (k, m) in mean.iter_mut().enumerate() {
                        *m += d.prob(k) / n_prompts as f64;
                    }
                }
                total += (0..4).map(|k| (mean[k] - free.prob(k)).abs()).sum::<f64>();
            }
            total / 30.0
        };
        let coarse = mean_l1(4);
        let fine = mean_l1(32);
        assert!(
            fine < coarse,
            "mean L1 with 32 prompts ({fine}) should beat 4 prompts ({coarse})"
        );
    }

    #[test]
    fn unknown_instance_is_a_protocol_error() {
        let cfg = config(1.0);
        assert!(matches!(
            synthetic_query(&cfg, &request("missing", "p", 0.9)),
            Err(GatewayError::Protocol(_))
        ));
    }
}
