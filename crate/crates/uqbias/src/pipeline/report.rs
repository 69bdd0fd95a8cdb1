//! Report emission: AUROC table, per-method ROC point lists, regression
//! tables with the epistemic/aleatoric slope ratio, per-prompt-family
//! accuracy, and a markdown summary.
//!
//! All files are plain UTF-8 CSV with a header row and `.` decimals, and
//! every emission is a pure function of the inputs, so re-emitting from
//! the same records is byte-identical. Output lands in `reports/` inside
//! the run directory; a failed emission removes the partial directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::analysis::{ratio_epi_ale, ConfidenceKind, EffectKind, RegressionRow};
use super::scoring::MethodScore;
use super::PipelineError;
use crate::dataset::MeasurementRecord;
use crate::metrics::{self, ScoredOutcome};
use crate::perturb::Bias;

#[derive(Debug)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

struct Emitter {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Emitter {
    fn write(&mut self, name: &str, content: &str) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        std::fs::write(&path, content).map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(path);
        Ok(())
    }
}

/// Joins method scores with correctness labels. Instances without a
/// correctness label (greedy parse failures) stay out of AUROC.
fn outcomes_for(
    score: &MethodScore,
    labels: &HashMap<&str, bool>,
) -> Vec<ScoredOutcome> {
    score
        .scores
        .iter()
        .filter_map(|(instance_id, uncertainty_score)| {
            labels.get(instance_id.as_str()).map(|&is_correct| ScoredOutcome {
                uncertainty_score: *uncertainty_score,
                is_incorrect: !is_correct,
            })
        })
        .collect()
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_p(v: f64) -> String {
    format!("{v:.6e}")
}

/// Per-method ROC curves keyed by method id.
type NamedCurves = Vec<(String, Vec<(f64, f64)>)>;

fn auroc_table(
    scores: &[MethodScore],
    labels: &HashMap<&str, bool>,
    dataset: &str,
    config_digest: &str,
) -> (String, NamedCurves) {
    let mut csv = String::from("method,inference_count,dataset,auroc,n,config_digest,note\n");
    let mut curves = Vec::new();
    for score in scores {
        let outcomes = outcomes_for(score, labels);
        let n = outcomes.len();
        let (auroc_cell, note) = match metrics::auroc(&outcomes) {
            Ok(a) => (fmt_f(a), String::new()),
            Err(e) => (String::new(), e.to_string()),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            score.method_id, score.inference_count, dataset, auroc_cell, n, config_digest, note
        );
        if let Ok(curve) = metrics::roc_curve(&outcomes) {
            curves.push((score.method_id.clone(), curve));
        }
    }
    (csv, curves)
}

fn roc_csv(curve: &[(f64, f64)]) -> String {
    let mut csv = String::from("false_positive_rate,true_positive_rate\n");
    for (fpr, tpr) in curve {
        let _ = writeln!(csv, "{fpr:.12},{tpr:.12}");
    }
    csv
}

fn regression_table(rows: &[RegressionRow], config_digest: &str) -> String {
    let mut csv = String::from(
        "bias,effect,epistemic_slope,epistemic_intercept,epistemic_p,\
         aleatoric_slope,aleatoric_intercept,aleatoric_p,ratio_epi_ale,n,config_digest,note\n",
    );
    let biases: Vec<Bias> = Bias::ALL
        .into_iter()
        .filter(|b| rows.iter().any(|r| r.bias == *b))
        .collect();
    for bias in biases {
        for epi_kind in [EffectKind::AbsChangeEpistemic, EffectKind::ReductionEpistemic] {
            let effect_name = match epi_kind {
                EffectKind::AbsChangeEpistemic => "impact",
                _ => "reduction",
            };
            let epi = rows
                .iter()
                .find(|r| r.bias == bias && r.y_kind == epi_kind)
                .expect("row exists");
            let ale = rows
                .iter()
                .find(|r| r.bias == bias && r.y_kind == epi_kind.aleatoric_counterpart())
                .expect("row exists");
            let mut note = String::new();
            let mut cells = |row: &RegressionRow| match &row.outcome {
                Ok(fit) => (fmt_f(fit.slope), fmt_f(fit.intercept), fmt_p(fit.p_value), fit.n),
                Err(e) => {
                    if note.is_empty() {
                        note = e.to_string();
                    }
                    (String::new(), String::new(), String::new(), 0)
                }
            };
            let (es, ei, ep, n) = cells(epi);
            let (als, ali, alp, _) = cells(ale);
            let ratio = ratio_epi_ale(rows, bias, epi_kind)
                .map(fmt_f)
                .unwrap_or_default();
            let _ = writeln!(
                csv,
                "{bias},{effect_name},{es},{ei},{ep},{als},{ali},{alp},{ratio},{n},{config_digest},{note}"
            );
        }
    }
    csv
}

/// Vanilla accuracy plus, per bias family, the mean accuracy of its
/// perturbed prompts (mean over replicates of per-replicate accuracy).
fn accuracy_table(records: &[MeasurementRecord], config_digest: &str) -> String {
    let mut csv = String::from("family,accuracy,n,config_digest\n");

    let mut default_hits = 0usize;
    let mut default_n = 0usize;
    for record in records {
        if let Some(answer) = record.greedy_answer {
            default_n += 1;
            if record.correct.contains(answer) {
                default_hits += 1;
            }
        }
    }
    if default_n > 0 {
        let _ = writeln!(
            csv,
            "default,{},{default_n},{config_digest}",
            fmt_f(default_hits as f64 / default_n as f64)
        );
    }

    for bias in Bias::ALL {
        if !records.iter().any(|r| r.per_bias.contains_key(&bias)) {
            continue;
        }
        let replicate_count = records
            .iter()
            .filter_map(|r| r.per_bias.get(&bias))
            .map(|m| m.replicate_answers.len())
            .max()
            .unwrap_or(0);
        let mut per_replicate = Vec::new();
        let mut total_answers = 0usize;
        for replicate in 0..replicate_count {
            let mut hits = 0usize;
            let mut n = 0usize;
            for record in records {
                if let Some(answer) = record
                    .per_bias
                    .get(&bias)
                    .and_then(|m| m.replicate_answers.get(replicate))
                    .copied()
                    .flatten()
                {
                    n += 1;
                    if record.correct.contains(answer) {
                        hits += 1;
                    }
                }
            }
            if n > 0 {
                per_replicate.push(hits as f64 / n as f64);
                total_answers += n;
            }
        }
        if !per_replicate.is_empty() {
            let mean = per_replicate.iter().sum::<f64>() / per_replicate.len() as f64;
            let _ = writeln!(csv, "{bias},{},{total_answers},{config_digest}", fmt_f(mean));
        }
    }
    csv
}

fn summary_markdown(
    dataset: &str,
    config_digest: &str,
    records: &[MeasurementRecord],
    auroc_csv: &str,
    regression_csvs: &[(ConfidenceKind, &str)],
    accuracy_csv: &str,
    notes: &[String],
) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Run summary\n");
    let _ = writeln!(md, "- dataset: `{dataset}`");
    let _ = writeln!(md, "- config digest: `{config_digest}`");
    let _ = writeln!(md, "- instances measured: {}", records.len());
    let labeled = records.iter().filter(|r| r.is_correct.is_some()).count();
    let _ = writeln!(md, "- instances with a correctness label: {labeled}");
    for note in notes {
        let _ = writeln!(md, "- note: {note}");
    }

    let _ = writeln!(md, "\n## AUROC (higher is better)\n");
    csv_to_md_table(&mut md, auroc_csv, &[0, 1, 3, 4]);
    for (x_kind, csv) in regression_csvs {
        let _ = writeln!(md, "\n## Regressions vs {}\n", x_kind.as_str());
        csv_to_md_table(&mut md, csv, &[0, 1, 2, 4, 5, 7, 8, 9]);
    }
    let _ = writeln!(md, "\n## Accuracy by prompt family\n");
    csv_to_md_table(&mut md, accuracy_csv, &[0, 1, 2]);
    md
}

fn csv_to_md_table(md: &mut String, csv: &str, keep_columns: &[usize]) {
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let picked: Vec<&str> = keep_columns
            .iter()
            .map(|&c| cells.get(c).copied().unwrap_or(""))
            .collect();
        let _ = writeln!(md, "| {} |", picked.join(" | "));
        if i == 0 {
            let _ = writeln!(md, "|{}|", vec!["---"; picked.len()].join("|"));
        }
    }
}

/// Writes the full bundle under `<run_dir>/reports`. The directory is
/// replaced atomically: a partial emission never survives.
pub fn emit_report(
    run_dir: &Path,
    records: &[MeasurementRecord],
    scores: &[MethodScore],
    regressions: &[(ConfidenceKind, Vec<RegressionRow>)],
    dataset: &str,
    config_digest: &str,
    notes: &[String],
) -> Result<ReportBundle, PipelineError> {
    let final_dir = run_dir.join("reports");
    let tmp_dir = run_dir.join("reports.tmp");
    if tmp_dir.exists() {
        std::fs::remove_dir_all(&tmp_dir).map_err(|source| PipelineError::Io {
            path: tmp_dir.clone(),
            source,
        })?;
    }
    std::fs::create_dir_all(&tmp_dir).map_err(|source| PipelineError::Io {
        path: tmp_dir.clone(),
        source,
    })?;

    let result = emit_into(&tmp_dir, records, scores, regressions, dataset, config_digest, notes);
    match result {
        Ok(files) => {
            if final_dir.exists() {
                std::fs::remove_dir_all(&final_dir).map_err(|source| PipelineError::Io {
                    path: final_dir.clone(),
                    source,
                })?;
            }
            std::fs::rename(&tmp_dir, &final_dir).map_err(|source| PipelineError::Io {
                path: final_dir.clone(),
                source,
            })?;
            let files = files
                .into_iter()
                .map(|f| final_dir.join(f.file_name().expect("named file")))
                .collect();
            Ok(ReportBundle {
                dir: final_dir,
                files,
            })
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&tmp_dir);
            Err(e)
        }
    }
}

fn emit_into(
    dir: &Path,
    records: &[MeasurementRecord],
    scores: &[MethodScore],
    regressions: &[(ConfidenceKind, Vec<RegressionRow>)],
    dataset: &str,
    config_digest: &str,
    notes: &[String],
) -> Result<Vec<PathBuf>, PipelineError> {
    let mut emitter = Emitter {
        dir: dir.to_path_buf(),
        files: Vec::new(),
    };

    let labels: HashMap<&str, bool> = records
        .iter()
        .filter_map(|r| r.is_correct.map(|c| (r.instance_id.as_str(), c)))
        .collect();

    let (auroc_csv, curves) = auroc_table(scores, &labels, dataset, config_digest);
    emitter.write("auroc_table.csv", &auroc_csv)?;
    for (method_id, curve) in &curves {
        emitter.write(&format!("roc_{method_id}.csv"), &roc_csv(curve))?;
    }

    let mut regression_csvs = Vec::new();
    for (x_kind, rows) in regressions {
        let csv = regression_table(rows, config_digest);
        emitter.write(&format!("regressions_{}.csv", x_kind.as_str()), &csv)?;
        regression_csvs.push((*x_kind, csv));
    }

    let accuracy_csv = accuracy_table(records, config_digest);
    emitter.write("accuracy_table.csv", &accuracy_csv)?;

    let regression_refs: Vec<(ConfidenceKind, &str)> = regression_csvs
        .iter()
        .map(|(k, c)| (*k, c.as_str()))
        .collect();
    let md = summary_markdown(
        dataset,
        config_digest,
        records,
        &auroc_csv,
        &regression_refs,
        &accuracy_csv,
        notes,
    );
    emitter.write("summary.md", &md)?;

    Ok(emitter.files)
}
