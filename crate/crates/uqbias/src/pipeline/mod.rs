//! Orchestration: the greedy correctness pass, per-bias perturbation
//! suites, the repetitive baseline, and persistence of one
//! [`MeasurementRecord`] per instance.
//!
//! Runs are deterministic on the synthetic endpoint (identical config and
//! seed give byte-identical run directories) and resumable: every query
//! lands in the write-once cache before anything is derived from it, and
//! derived files are rewritten wholesale from the cache.

mod analysis;
mod report;
mod scoring;

pub use analysis::{analyze_bias_effects, ConfidenceKind, EffectKind, RegressionRow};
pub use report::{emit_report, ReportBundle};
pub use scoring::{score_method, score_methods, MethodScore};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{
    self, BiasMeasurements, DatasetError, MeasurementRecord, QuestionInstance,
    MEASUREMENT_SCHEMA_VERSION,
};
use crate::gateway::{
    extract_option_probs, parse_greedy_answer, Gateway, GatewayError, HttpChatModel, LabelMatch,
    ModelEndpoint, QueryBackend, QueryCache, QueryOutcome, QueryPurpose, QueryRequest,
    SyntheticModel, SyntheticModelConfig,
};
use crate::metrics::MetricsError;
use crate::perturb::{self, Bias, PerturbationSpec, RenderedPrompt, ResizeMode};
use crate::uq;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Label mass below this marks an extraction as untrustworthy.
pub const LOW_LABEL_MASS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Perturb(#[from] crate::perturb::PerturbError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("method {0:?} needs a bias run that is not part of this experiment")]
    MissingMethodData(String),
    #[error(
        "output directory holds a run with config digest {found}, expected {expected}; \
         refusing to mix runs"
    )]
    ManifestMismatch { found: String, expected: String },
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointChoice {
    #[default]
    Synthetic,
    Real,
}

impl std::str::FromStr for EndpointChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "real" => Ok(Self::Real),
            other => Err(format!("expected 'real' or 'synthetic', got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticEndpointConfig {
    #[serde(default)]
    pub bias_strength: f64,
    #[serde(default)]
    pub feature_seed: u64,
}

impl Default for SyntheticEndpointConfig {
    fn default() -> Self {
        Self {
            bias_strength: 0.0,
            feature_seed: 0,
        }
    }
}

/// Everything a run needs. Defaults mirror the reference protocol: ten
/// perturbed prompts per bias, sampling at temperature 0.9 / top-p 1,
/// greedy decoding at temperature 1e-15, top-20 logprobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub endpoint: EndpointChoice,
    #[serde(default)]
    pub synthetic: SyntheticEndpointConfig,
    #[serde(default)]
    pub http: Option<ModelEndpoint>,
    pub master_seed: u64,
    #[serde(default = "default_biases")]
    pub biases: Vec<Bias>,
    #[serde(default = "default_n_perturbations")]
    pub n_perturbations: u32,
    #[serde(default = "default_sampling_temperature")]
    pub sampling_temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_greedy_temperature")]
    pub greedy_temperature: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub resize_mode: ResizeMode,
    #[serde(default)]
    pub label_match: LabelMatch,
    /// Default output directory; `--out` overrides it. Not part of the
    /// config digest, so replicate runs into different directories stay
    /// comparable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_biases() -> Vec<Bias> {
    Bias::ALL.to_vec()
}
fn default_n_perturbations() -> u32 {
    10
}
fn default_sampling_temperature() -> f64 {
    0.9
}
fn default_top_p() -> f64 {
    1.0
}
fn default_greedy_temperature() -> f64 {
    1e-15
}
fn default_concurrency() -> usize {
    4
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut config: RunConfig = serde_json::from_str(&raw)?;
        config.normalize();
        config.validate()?;
        Ok(config)
    }

    /// Sorts and dedups the bias list so method order is stable.
    pub fn normalize(&mut self) {
        self.biases.sort_unstable();
        self.biases.dedup();
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_perturbations == 0 {
            return Err(PipelineError::Config(
                "n_perturbations must be at least 1".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.top_p) || self.top_p == 0.0 {
            return Err(PipelineError::Config("top_p must be in (0, 1]".to_string()));
        }
        if self.sampling_temperature < 0.0 || self.greedy_temperature < 0.0 {
            return Err(PipelineError::Config(
                "temperatures must be nonnegative".to_string(),
            ));
        }
        if self.endpoint == EndpointChoice::Real && self.http.is_none() {
            return Err(PipelineError::Config(
                "endpoint is 'real' but no http section is configured".to_string(),
            ));
        }
        if let Some(http) = &self.http {
            // All four labels must be visible in the best case.
            if http.top_logprobs_k < 4 {
                return Err(PipelineError::Config(
                    "top_logprobs_k must be at least 4".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Digest over everything that shapes the outputs (excludes out_dir).
    pub fn digest(&self) -> String {
        let mut clean = self.clone();
        clean.out_dir = None;
        let bytes = serde_json::to_vec(&clean).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..16])
    }
}

/// Deterministic description of a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_digest: String,
    pub code_version: String,
    pub config: RunConfig,
    pub instance_count: usize,
    pub rejected_records: usize,
    pub greedy_parse_failures: usize,
    pub extraction_failures: usize,
    pub low_label_mass_queries: usize,
    pub total_queries: usize,
    pub notes: Vec<String>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub backend_calls: u64,
}

pub fn manifest_path(run_dir: &Path) -> PathBuf {
    run_dir.join("manifest.json")
}
pub fn queries_path(run_dir: &Path) -> PathBuf {
    run_dir.join("queries.jsonl")
}
pub fn measurements_path(run_dir: &Path) -> PathBuf {
    run_dir.join("measurements.jsonl")
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest, PipelineError> {
    let path = manifest_path(run_dir);
    let raw = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(serde_json::from_str(&raw)?)
}

fn build_backend(config: &RunConfig, instances: &[QuestionInstance]) -> Result<Box<dyn QueryBackend>, PipelineError> {
    match config.endpoint {
        EndpointChoice::Synthetic => {
            let synthetic_config = SyntheticModelConfig::derive(
                instances,
                config.synthetic.feature_seed,
                config.synthetic.bias_strength,
            );
            Ok(Box::new(SyntheticModel::new(synthetic_config)))
        }
        EndpointChoice::Real => {
            let endpoint = config
                .http
                .clone()
                .ok_or_else(|| PipelineError::Config("missing http section".to_string()))?;
            Ok(Box::new(HttpChatModel::new(endpoint)?))
        }
    }
}

struct InstancePlan {
    requests: Vec<QueryRequest>,
    /// (bias, replicate range start) per suite, in `requests` order after
    /// the greedy and repetitive blocks.
    suites: Vec<Bias>,
}

fn plan_instance(
    instance: &QuestionInstance,
    config: &RunConfig,
    suites: &BTreeMap<Bias, Vec<PerturbationSpec>>,
) -> Result<InstancePlan, PipelineError> {
    let n = config.n_perturbations;
    let vanilla = perturb::render_vanilla(&instance.options, &instance.image);
    let vanilla_png = perturb::encode_png(&vanilla.image);

    let mut requests = Vec::with_capacity(1 + n as usize * (1 + suites.len()));
    requests.push(QueryRequest {
        instance_id: instance.instance_id.clone(),
        purpose: QueryPurpose::Greedy,
        text: vanilla.text.clone(),
        image_png: vanilla_png.clone(),
        canonical_map: vanilla.canonical_map,
        temperature: config.greedy_temperature,
        top_p: config.top_p,
    });
    for replicate in 0..n {
        requests.push(QueryRequest {
            instance_id: instance.instance_id.clone(),
            purpose: QueryPurpose::Repetitive { replicate },
            text: vanilla.text.clone(),
            image_png: vanilla_png.clone(),
            canonical_map: vanilla.canonical_map,
            temperature: config.sampling_temperature,
            top_p: config.top_p,
        });
    }
    let mut suite_order = Vec::new();
    for (&bias, specs) in suites {
        suite_order.push(bias);
        for spec in specs {
            let rendered: RenderedPrompt =
                perturb::render(&instance.options, &instance.image, spec, config.resize_mode)?;
            requests.push(QueryRequest {
                instance_id: instance.instance_id.clone(),
                purpose: QueryPurpose::Suite {
                    bias,
                    replicate: spec.replicate_index,
                },
                text: rendered.text,
                image_png: perturb::encode_png(&rendered.image),
                canonical_map: rendered.canonical_map,
                temperature: config.sampling_temperature,
                top_p: config.top_p,
            });
        }
    }
    Ok(InstancePlan {
        requests,
        suites: suite_order,
    })
}

struct FailureCounters {
    greedy_parse_failures: usize,
    extraction_failures: usize,
    low_label_mass_queries: usize,
}

fn derive_record(
    instance: &QuestionInstance,
    plan: &InstancePlan,
    outcomes: &[QueryOutcome],
    config: &RunConfig,
    counters: &mut FailureCounters,
) -> Result<MeasurementRecord, PipelineError> {
    let n = config.n_perturbations as usize;
    let mode = config.label_match;

    let extract = |outcome: &QueryOutcome,
                       request: &QueryRequest,
                       counters: &mut FailureCounters|
     -> (Option<crate::uq::AnswerDistribution>, Option<f64>, Option<usize>) {
        match outcome {
            QueryOutcome::Reply(reply) => {
                let parsed =
                    parse_greedy_answer(&reply.sampled_token, &request.canonical_map, mode).ok();
                match extract_option_probs(reply, &request.canonical_map, mode) {
                    Ok(extraction) => {
                        if extraction.label_mass < LOW_LABEL_MASS {
                            counters.low_label_mass_queries += 1;
                        }
                        (Some(extraction.dist), Some(extraction.label_mass), parsed)
                    }
                    Err(_) => {
                        counters.extraction_failures += 1;
                        (None, None, parsed)
                    }
                }
            }
            QueryOutcome::ProtocolFailure(_) => {
                counters.extraction_failures += 1;
                (None, None, None)
            }
        }
    };

    // Greedy pass: correctness label and the single-prompt distribution.
    let (single_dist, single_label_mass, greedy_answer) =
        extract(&outcomes[0], &plan.requests[0], counters);
    if greedy_answer.is_none() {
        counters.greedy_parse_failures += 1;
    }
    let is_correct = greedy_answer.map(|a| instance.correct.contains(a));
    let single_breakdown = single_dist.map(|d| uq::breakdown(&d, &instance.correct));

    // Repetitive baseline block.
    let mut replicate_dists = Vec::with_capacity(n);
    let mut replicate_answers = Vec::with_capacity(n);
    for i in 0..n {
        let (dist, _, answer) = extract(&outcomes[1 + i], &plan.requests[1 + i], counters);
        replicate_dists.push(dist);
        replicate_answers.push(answer);
    }
    let repetitive = BiasMeasurements::from_replicates(
        replicate_dists,
        replicate_answers,
        &instance.correct,
    )?;

    // Per-bias suites.
    let mut per_bias = BTreeMap::new();
    let mut offset = 1 + n;
    for &bias in &plan.suites {
        let mut dists = Vec::with_capacity(n);
        let mut answers = Vec::with_capacity(n);
        for i in 0..n {
            let (dist, _, answer) =
                extract(&outcomes[offset + i], &plan.requests[offset + i], counters);
            dists.push(dist);
            answers.push(answer);
        }
        offset += n;
        per_bias.insert(
            bias,
            BiasMeasurements::from_replicates(dists, answers, &instance.correct)?,
        );
    }

    Ok(MeasurementRecord {
        schema_version: MEASUREMENT_SCHEMA_VERSION,
        instance_id: instance.instance_id.clone(),
        correct: instance.correct.clone(),
        greedy_answer,
        is_correct,
        single_dist,
        single_breakdown,
        single_label_mass,
        repetitive: Some(repetitive),
        per_bias,
    })
}

/// Runs the full experiment into `run_dir`.
///
/// Cached queries are never re-issued, so interrupting and re-running with
/// `resume` converges to the same directory as an uninterrupted run.
pub fn run_experiment(
    config: &RunConfig,
    run_dir: &Path,
    resume: bool,
) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let config_digest = config.digest();

    std::fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let manifest_file = manifest_path(run_dir);
    if manifest_file.exists() {
        let existing = read_manifest(run_dir)?;
        if existing.config_digest != config_digest {
            return Err(PipelineError::ManifestMismatch {
                found: existing.config_digest,
                expected: config_digest,
            });
        }
    } else if !resume && queries_path(run_dir).exists() {
        // A cache without a manifest means an interrupted first run.
        return Err(PipelineError::Config(format!(
            "{} holds a partial run; pass --resume to continue it",
            run_dir.display()
        )));
    }

    let ingest_report = dataset::ingest(&config.dataset, config.master_seed)?;
    let instances = ingest_report.instances;

    let backend = build_backend(config, &instances)?;
    let cache = QueryCache::open(&queries_path(run_dir))?;
    let mut gateway = Gateway::new(backend, cache, config.label_match, config.concurrency);

    let suites: BTreeMap<Bias, Vec<PerturbationSpec>> = config
        .biases
        .iter()
        .map(|&bias| {
            (
                bias,
                perturb::make_suite(bias, config.master_seed, config.n_perturbations),
            )
        })
        .collect();

    let mut counters = FailureCounters {
        greedy_parse_failures: 0,
        extraction_failures: 0,
        low_label_mass_queries: 0,
    };
    let mut records = Vec::with_capacity(instances.len());
    for instance in &instances {
        let plan = plan_instance(instance, config, &suites)?;
        let outcomes = gateway.run_batch(&plan.requests)?;
        records.push(derive_record(
            instance,
            &plan,
            &outcomes,
            config,
            &mut counters,
        )?);
    }

    dataset::write_measurements(&measurements_path(run_dir), &records)?;

    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_digest,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: {
            let mut clean = config.clone();
            clean.out_dir = None;
            clean
        },
        instance_count: records.len(),
        rejected_records: ingest_report.rejections.len(),
        greedy_parse_failures: counters.greedy_parse_failures,
        extraction_failures: counters.extraction_failures,
        low_label_mass_queries: counters.low_label_mass_queries,
        total_queries: gateway.cache_len(),
        notes: vec![
            "regressions use raw (unstandardized) x and y values".to_string(),
            "single-prompt distribution comes from the greedy query's top-k logprobs".to_string(),
        ],
    };
    let tmp = manifest_file.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, &manifest_file).map_err(|e| io_err(&manifest_file, e))?;

    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        manifest,
        backend_calls: gateway.backend_calls(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_match_protocol() {
        let raw = r#"{"dataset": "d.jsonl", "master_seed": 1}"#;
        let config: RunConfig = serde_json::from_str(raw).unwrap();
        assert_eq!(config.n_perturbations, 10);
        assert_eq!(config.sampling_temperature, 0.9);
        assert_eq!(config.top_p, 1.0);
        assert_eq!(config.greedy_temperature, 1e-15);
        assert_eq!(config.biases, Bias::ALL.to_vec());
        assert_eq!(config.endpoint, EndpointChoice::Synthetic);
        if let Some(http) = config.http {
            panic!("no http section expected, got {http:?}");
        }
    }

    #[test]
    fn http_defaults_match_protocol() {
        let raw = r#"{"base_url": "http://x", "model_name": "m", "api_key_env": "K"}"#;
        let endpoint: ModelEndpoint = serde_json::from_str(raw).unwrap();
        assert_eq!(endpoint.top_logprobs_k, 20);
        assert_eq!(endpoint.max_retries, 5);
    }

    #[test]
    fn config_digest_ignores_out_dir() {
        let mut a: RunConfig =
            serde_json::from_str(r#"{"dataset": "d.jsonl", "master_seed": 1}"#).unwrap();
        let mut b = a.clone();
        a.out_dir = Some(PathBuf::from("runs/here"));
        b.out_dir = Some(PathBuf::from("runs/there"));
        assert_eq!(a.digest(), b.digest());

        b.master_seed = 2;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn config_validation() {
        let mut config: RunConfig =
            serde_json::from_str(r#"{"dataset": "d.jsonl", "master_seed": 1}"#).unwrap();
        config.n_perturbations = 0;
        assert!(config.validate().is_err());
        config.n_perturbations = 10;
        config.endpoint = EndpointChoice::Real;
        assert!(config.validate().is_err(), "real endpoint needs http section");

        config.http = Some(
            serde_json::from_str(
                r#"{"base_url": "http://x", "model_name": "m", "api_key_env": "K",
                    "top_logprobs_k": 3}"#,
            )
            .unwrap(),
        );
        assert!(config.validate().is_err(), "top_logprobs_k below 4 rejected");
    }
}
