//! Canonical dataset schema, instance construction with seeded option
//! order, and the JSONL stores for derived measurements.
//!
//! Input records look like
//! `{"image_path": "images/x.png", "correct": ["...", "..."], "incorrect": ["...", "..."]}`
//! with image paths relative to the dataset file. The four descriptions
//! are shuffled into a canonical order drawn from a stream keyed by
//! (seed, record content), so ingestion is idempotent and order-stable.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::perturb::Bias;
use crate::uq::{
    self, AnswerDistribution, CorrectSet, UncertaintyBreakdown, UqError, OPTION_COUNT,
};

/// Correct descriptions per question in the v1 pipeline.
pub const CORRECT_PER_INSTANCE: usize = 2;

pub const MEASUREMENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Uq(#[from] UqError),
    #[error("no {bias} measurements for instance {instance_id}")]
    MissingBiasRun { instance_id: String, bias: Bias },
    #[error("empty distribution list")]
    EmptyAverage,
}

/// One multiple-choice question: image, four options in canonical order,
/// and which two of them are correct.
#[derive(Debug, Clone)]
pub struct QuestionInstance {
    pub instance_id: String,
    pub image_path: PathBuf,
    pub options: [String; OPTION_COUNT],
    pub correct: CorrectSet,
    /// Decoded at ingest; rendering works on this raster.
    pub image: RgbImage,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawRecord {
    image_path: String,
    correct: Vec<String>,
    incorrect: Vec<String>,
}

/// A rejected input record and why.
#[derive(Debug, Clone, Serialize)]
pub struct RecordRejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct IngestReport {
    pub instances: Vec<QuestionInstance>,
    pub rejections: Vec<RecordRejection>,
}

/// Reads a dataset file, validating and shuffling each record.
///
/// Bad records (wrong cardinalities, duplicate descriptions, unreadable
/// images) are rejected individually; file-level I/O problems abort.
pub fn ingest(path: &Path, seed: u64) -> Result<IngestReport, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut instances = Vec::new();
    let mut rejections = Vec::new();
    for (index, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match build_instance(&line, base_dir, seed) {
            Ok(instance) => instances.push(instance),
            Err(reason) => rejections.push(RecordRejection {
                line: line_no,
                reason,
            }),
        }
    }
    Ok(IngestReport {
        instances,
        rejections,
    })
}

fn build_instance(line: &str, base_dir: &Path, seed: u64) -> Result<QuestionInstance, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| format!("bad JSON: {e}"))?;
    if raw.correct.len() != CORRECT_PER_INSTANCE {
        return Err(format!(
            "expected {CORRECT_PER_INSTANCE} correct descriptions, got {}",
            raw.correct.len()
        ));
    }
    if raw.incorrect.len() != OPTION_COUNT - CORRECT_PER_INSTANCE {
        return Err(format!(
            "expected {} incorrect descriptions, got {}",
            OPTION_COUNT - CORRECT_PER_INSTANCE,
            raw.incorrect.len()
        ));
    }
    let mut all: Vec<&String> = raw.correct.iter().chain(raw.incorrect.iter()).collect();
    all.sort();
    if all.windows(2).any(|w| w[0] == w[1]) {
        return Err("duplicate descriptions".to_string());
    }

    let instance_id = instance_id_of(&raw);
    let image_path = base_dir.join(&raw.image_path);
    let image = image::open(&image_path)
        .map_err(|e| format!("image {}: {e}", image_path.display()))?
        .to_rgb8();

    // Canonical order: a seeded shuffle of (correct0, correct1,
    // incorrect0, incorrect1), keyed by record content so file order
    // does not matter.
    let mut slots = [0usize, 1, 2, 3];
    let mut rng = ingest_rng(seed, &instance_id);
    for i in (1..OPTION_COUNT).rev() {
        let j = rng.random_range(0..=i);
        slots.swap(i, j);
    }
    let description = |source_index: usize| -> String {
        if source_index < CORRECT_PER_INSTANCE {
            raw.correct[source_index].clone()
        } else {
            raw.incorrect[source_index - CORRECT_PER_INSTANCE].clone()
        }
    };
    let options = [
        description(slots[0]),
        description(slots[1]),
        description(slots[2]),
        description(slots[3]),
    ];
    let correct_positions: Vec<usize> = slots
        .iter()
        .enumerate()
        .filter(|(_, &src)| src < CORRECT_PER_INSTANCE)
        .map(|(pos, _)| pos)
        .collect();
    let correct = CorrectSet::new(&correct_positions).expect("two valid positions");

    Ok(QuestionInstance {
        instance_id,
        image_path,
        options,
        correct,
        image,
    })
}

fn instance_id_of(raw: &RawRecord) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"uqbias.instance.v1");
    hasher.update(raw.image_path.as_bytes());
    for text in raw.correct.iter().chain(raw.incorrect.iter()) {
        hasher.update([0]);
        hasher.update(text.as_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

fn ingest_rng(seed: u64, instance_id: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"uqbias.ingest.v1");
    hasher.update(seed.to_le_bytes());
    hasher.update(instance_id.as_bytes());
    ChaCha12Rng::from_seed(hasher.finalize().into())
}

/// Elementwise arithmetic mean; the mean of normalized vectors is
/// normalized.
pub fn average_distributions(
    dists: &[AnswerDistribution],
) -> Result<AnswerDistribution, DatasetError> {
    if dists.is_empty() {
        return Err(DatasetError::EmptyAverage);
    }
    let n = dists.len() as f64;
    let mut mean = [0.0f64; OPTION_COUNT];
    for dist in dists {
        for (m, p) in mean.iter_mut().zip(dist.probs()) {
            *m += p / n;
        }
    }
    Ok(AnswerDistribution::new(mean)?)
}

/// Everything measured for one bias family on one instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasMeasurements {
    /// One entry per replicate; None where extraction failed.
    pub replicate_dists: Vec<Option<AnswerDistribution>>,
    /// Sampled answer per replicate, canonical index; None on parse failure.
    pub replicate_answers: Vec<Option<usize>>,
    /// Mean of the replicate distributions; present only when every
    /// replicate extracted, so the average stays a 10-prompt average.
    pub averaged_dist: Option<AnswerDistribution>,
    pub averaged_breakdown: Option<UncertaintyBreakdown>,
    /// p_correct of the averaged distribution.
    pub bias_free_confidence: Option<f64>,
}

impl BiasMeasurements {
    pub fn from_replicates(
        replicate_dists: Vec<Option<AnswerDistribution>>,
        replicate_answers: Vec<Option<usize>>,
        correct: &CorrectSet,
    ) -> Result<Self, DatasetError> {
        let complete: Option<Vec<AnswerDistribution>> =
            replicate_dists.iter().copied().collect();
        let (averaged_dist, averaged_breakdown, bias_free_confidence) = match complete {
            Some(all) if !all.is_empty() => {
                let averaged = average_distributions(&all)?;
                let breakdown = uq::breakdown(&averaged, correct);
                (Some(averaged), Some(breakdown), Some(breakdown.p_correct))
            }
            _ => (None, None, None),
        };
        Ok(Self {
            replicate_dists,
            replicate_answers,
            averaged_dist,
            averaged_breakdown,
            bias_free_confidence,
        })
    }
}

/// Per-instance results of a full run: the greedy pass, the repetitive
/// baseline, and one [`BiasMeasurements`] per bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub schema_version: u32,
    pub instance_id: String,
    /// Ground truth; consumed only by analysis and reporting.
    pub correct: CorrectSet,
    pub greedy_answer: Option<usize>,
    pub is_correct: Option<bool>,
    /// Distribution extracted from the greedy query's top-k logprobs.
    pub single_dist: Option<AnswerDistribution>,
    pub single_breakdown: Option<UncertaintyBreakdown>,
    /// Label-token mass of the greedy reply before renormalization;
    /// below 0.5 most of the model's weight went elsewhere.
    pub single_label_mass: Option<f64>,
    pub repetitive: Option<BiasMeasurements>,
    pub per_bias: BTreeMap<Bias, BiasMeasurements>,
}

/// Mean per-bias confidence: p_correct of the bias-averaged distribution.
pub fn bias_free_confidence(record: &MeasurementRecord, bias: Bias) -> Result<f64, DatasetError> {
    record
        .per_bias
        .get(&bias)
        .and_then(|m| m.bias_free_confidence)
        .ok_or_else(|| DatasetError::MissingBiasRun {
            instance_id: record.instance_id.clone(),
            bias,
        })
}

pub fn write_measurements(
    path: &Path,
    records: &[MeasurementRecord],
) -> Result<(), DatasetError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut file = std::fs::File::create(&tmp).map_err(|source| DatasetError::Io {
            path: tmp.clone(),
            source,
        })?;
        for record in records {
            serde_json::to_writer(&mut file, record)?;
            file.write_all(b"\n").map_err(|source| DatasetError::Io {
                path: tmp.clone(),
                source,
            })?;
        }
        file.flush().map_err(|source| DatasetError::Io {
            path: tmp.clone(),
            source,
        })?;
    }
    std::fs::rename(&tmp, path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_measurements(path: &Path) -> Result<Vec<MeasurementRecord>, DatasetError> {
    let raw = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line)?);
    }
    Ok(records)
}

/// Writes a small self-contained corpus (JSONL plus PNG images) for demos
/// and offline tests. Deterministic in (n, seed).
pub fn write_synthetic_corpus(dir: &Path, n: usize, seed: u64) -> Result<PathBuf, DatasetError> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| DatasetError::Io {
        path: images_dir.clone(),
        source,
    })?;

    const COLORS: [&str; 8] = [
        "red", "blue", "green", "yellow", "purple", "orange", "teal", "gray",
    ];
    const OBJECTS: [&str; 8] = [
        "kite", "bicycle", "boat", "lantern", "umbrella", "ladder", "drum", "bench",
    ];
    const PLACES: [&str; 6] = [
        "on the beach",
        "in a park",
        "near a wall",
        "by the river",
        "under a tree",
        "on a rooftop",
    ];

    let jsonl_path = dir.join("sample.jsonl");
    let mut file = std::fs::File::create(&jsonl_path).map_err(|source| DatasetError::Io {
        path: jsonl_path.clone(),
        source,
    })?;

    for i in 0..n {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
        let image_name = format!("images/img_{i:04}.png");
        let image = synthetic_image(&mut rng, 48, 48);
        image
            .save(dir.join(&image_name))
            .map_err(|e| DatasetError::Record {
                line: i,
                message: format!("writing {image_name}: {e}"),
            })?;

        let mut pick = |tag: usize| -> String {
            let color = COLORS[rng.random_range(0..COLORS.len())];
            let object = OBJECTS[rng.random_range(0..OBJECTS.len())];
            let place = PLACES[rng.random_range(0..PLACES.len())];
            format!("a {color} {object} {place} ({i}-{tag})")
        };
        let record = RawRecord {
            image_path: image_name,
            correct: vec![pick(0), pick(1)],
            incorrect: vec![pick(2), pick(3)],
        };
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n").map_err(|source| DatasetError::Io {
            path: jsonl_path.clone(),
            source,
        })?;
    }
    Ok(jsonl_path)
}

fn synthetic_image(rng: &mut ChaCha12Rng, w: u32, h: u32) -> RgbImage {
    let base = [
        rng.random_range(30..220u8),
        rng.random_range(30..220u8),
        rng.random_range(30..220u8),
    ];
    let stripe = rng.random_range(3..9u32);
    RgbImage::from_fn(w, h, |x, y| {
        if (x / stripe + y / stripe) % 2 == 0 {
            Rgb(base)
        } else {
            Rgb([255 - base[0], 255 - base[1], 255 - base[2]])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize, seed: u64) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = write_synthetic_corpus(dir.path(), n, seed).unwrap();
        (dir, path)
    }

    #[test]
    fn ingest_builds_two_correct_instances() {
        let (_dir, path) = corpus(6, 3);
        let report = ingest(&path, 42).unwrap();
        assert_eq!(report.instances.len(), 6);
        assert!(report.rejections.is_empty());
        for instance in &report.instances {
            assert_eq!(instance.correct.len(), 2);
            assert_eq!(instance.options.len(), 4);
        }
    }

    #[test]
    fn ingest_is_deterministic_in_seed() {
        let (_dir, path) = corpus(5, 9);
        let a = ingest(&path, 7).unwrap();
        let b = ingest(&path, 7).unwrap();
        let c = ingest(&path, 8).unwrap();
        for (x, y) in a.instances.iter().zip(&b.instances) {
            assert_eq!(x.instance_id, y.instance_id);
            assert_eq!(x.options, y.options);
            assert_eq!(x.correct, y.correct);
        }
        // A different seed shuffles at least one instance differently.
        assert!(a
            .instances
            .iter()
            .zip(&c.instances)
            .any(|(x, y)| x.options != y.options));
    }

    #[test]
    fn ingest_is_order_stable() {
        // Canonical orders key off record content, not file position.
        let (_dir, path) = corpus(6, 21);
        let forward = ingest(&path, 5).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.reverse();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let reversed = ingest(&path, 5).unwrap();

        let by_id: std::collections::HashMap<&str, &QuestionInstance> = reversed
            .instances
            .iter()
            .map(|i| (i.instance_id.as_str(), i))
            .collect();
        for instance in &forward.instances {
            let other = by_id[instance.instance_id.as_str()];
            assert_eq!(instance.options, other.options);
            assert_eq!(instance.correct, other.correct);
        }
    }

    #[test]
    fn ingest_rejects_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        let (_imgdir, good_corpus) = corpus(1, 0);
        let good_line = std::fs::read_to_string(&good_corpus).unwrap();
        let good: RawRecord = serde_json::from_str(good_line.lines().next().unwrap()).unwrap();

        let img_src = good_corpus.parent().unwrap().join(&good.image_path);
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::copy(&img_src, dir.path().join(&good.image_path)).unwrap();

        let path = dir.path().join("data.jsonl");
        let three_correct = serde_json::json!({
            "image_path": good.image_path,
            "correct": ["a", "b", "c"],
            "incorrect": ["d"],
        });
        let duplicate = serde_json::json!({
            "image_path": good.image_path,
            "correct": ["same", "same"],
            "incorrect": ["x", "y"],
        });
        let missing_image = serde_json::json!({
            "image_path": "images/nowhere.png",
            "correct": ["a", "b"],
            "incorrect": ["c", "d"],
        });
        let content = format!(
            "{}\n{}\n{}\n{}\nnot json\n",
            good_line.trim_end(),
            three_correct,
            duplicate,
            missing_image
        );
        std::fs::write(&path, content).unwrap();

        let report = ingest(&path, 1).unwrap();
        assert_eq!(report.instances.len(), 1);
        assert_eq!(report.rejections.len(), 4);
        assert!(report.rejections[0].reason.contains("correct"));
        assert!(report.rejections[1].reason.contains("duplicate"));
        assert!(report.rejections[2].reason.contains("image"));
    }

    #[test]
    fn average_examples() {
        let a = AnswerDistribution::new([1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = AnswerDistribution::new([0.0, 1.0, 0.0, 0.0]).unwrap();
        let mean = average_distributions(&[a, b]).unwrap();
        assert_eq!(*mean.probs(), [0.5, 0.5, 0.0, 0.0]);

        let c = AnswerDistribution::new([0.4, 0.3, 0.2, 0.1]).unwrap();
        let d = AnswerDistribution::new([0.2, 0.5, 0.2, 0.1]).unwrap();
        let mean = average_distributions(&[c, d]).unwrap();
        for (got, want) in mean.probs().iter().zip([0.3, 0.4, 0.2, 0.1]) {
            assert!((got - want).abs() < 1e-12);
        }

        let same = average_distributions(&[c; 10]).unwrap();
        for (got, want) in same.probs().iter().zip(c.probs()) {
            assert!((got - want).abs() < 1e-12);
        }

        assert!(matches!(
            average_distributions(&[]),
            Err(DatasetError::EmptyAverage)
        ));
    }

    #[test]
    fn average_is_permutation_invariant() {
        let dists = [
            AnswerDistribution::new([0.7, 0.1, 0.1, 0.1]).unwrap(),
            AnswerDistribution::new([0.1, 0.7, 0.1, 0.1]).unwrap(),
            AnswerDistribution::new([0.25, 0.25, 0.25, 0.25]).unwrap(),
        ];
        let forward = average_distributions(&dists).unwrap();
        let reversed =
            average_distributions(&[dists[2], dists[1], dists[0]]).unwrap();
        assert_eq!(forward.probs(), reversed.probs());
    }

    #[test]
    fn measurements_round_trip_bit_for_bit() {
        let dist = AnswerDistribution::new([0.4, 0.3, 0.2, 0.1]).unwrap();
        let correct = CorrectSet::new(&[0, 2]).unwrap();
        let bias_m = BiasMeasurements::from_replicates(
            vec![Some(dist), Some(dist)],
            vec![Some(0), Some(2)],
            &correct,
        )
        .unwrap();
        let record = MeasurementRecord {
            schema_version: MEASUREMENT_SCHEMA_VERSION,
            instance_id: "abc".to_string(),
            correct: correct.clone(),
            greedy_answer: Some(0),
            is_correct: Some(true),
            single_dist: Some(dist),
            single_breakdown: Some(uq::breakdown(&dist, &correct)),
            single_label_mass: Some(0.97),
            repetitive: None,
            per_bias: BTreeMap::from([(Bias::Phrasing, bias_m)]),
        };

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("measurements.jsonl");
        write_measurements(&path, std::slice::from_ref(&record)).unwrap();
        let back = read_measurements(&path).unwrap();
        assert_eq!(back.len(), 1);

        // Re-deriving the stored breakdowns reproduces them bit for bit.
        let loaded = &back[0];
        let rederived = uq::breakdown(loaded.single_dist.as_ref().unwrap(), &loaded.correct);
        assert_eq!(
            rederived,
            loaded.single_breakdown.unwrap(),
        );
        let bias = loaded.per_bias.get(&Bias::Phrasing).unwrap();
        let redone = uq::breakdown(bias.averaged_dist.as_ref().unwrap(), &loaded.correct);
        assert_eq!(redone, bias.averaged_breakdown.unwrap());
    }

    #[test]
    fn bias_measurements_with_failures_have_no_average() {
        let dist = AnswerDistribution::new([0.4, 0.3, 0.2, 0.1]).unwrap();
        let correct = CorrectSet::new(&[0, 1]).unwrap();
        let m = BiasMeasurements::from_replicates(
            vec![Some(dist), None],
            vec![Some(0), None],
            &correct,
        )
        .unwrap();
        assert!(m.averaged_dist.is_none());
        assert!(m.bias_free_confidence.is_none());
    }
}
