//! Python bindings for the core uncertainty math, the evaluation metrics
//! and the prompt-perturbation suites.
//!
//! Build: `cargo build -p uqbias-py --release`, then import the produced
//! `libuqbias_py.so` as the module `uqbias_py` (see python/smoke_test.py).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use uqbias::metrics::{self, ScoredOutcome};
use uqbias::perturb::{self, Bias, PerturbKind};
use uqbias::uq::{self, AnswerDistribution, CorrectSet};

fn value_err(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn distribution(probs: [f64; 4]) -> PyResult<AnswerDistribution> {
    AnswerDistribution::new(probs).map_err(value_err)
}

fn correct_set(members: Vec<usize>) -> PyResult<CorrectSet> {
    CorrectSet::new(&members).map_err(value_err)
}

/// Shannon entropy of a 4-option probability vector, in nats.
#[pyfunction]
fn entropy(probs: [f64; 4]) -> PyResult<f64> {
    Ok(uq::entropy(&distribution(probs)?))
}

/// Summed probability of the correct options.
#[pyfunction]
fn p_correct(probs: [f64; 4], correct: Vec<usize>) -> PyResult<f64> {
    Ok(uq::p_correct(&distribution(probs)?, &correct_set(correct)?))
}

#[pyfunction]
fn epistemic_entropy(probs: [f64; 4], correct: Vec<usize>) -> PyResult<f64> {
    Ok(uq::epistemic_entropy(
        &distribution(probs)?,
        &correct_set(correct)?,
    ))
}

#[pyfunction]
fn aleatoric_entropy(probs: [f64; 4], correct: Vec<usize>) -> PyResult<f64> {
    Ok(uq::aleatoric_entropy(
        &distribution(probs)?,
        &correct_set(correct)?,
    ))
}

/// All four uncertainty quantities as a dict: total_entropy,
/// epistemic_entropy, aleatoric_entropy, p_correct.
#[pyfunction]
fn breakdown(py: Python<'_>, probs: [f64; 4], correct: Vec<usize>) -> PyResult<Py<PyDict>> {
    let b = uq::breakdown(&distribution(probs)?, &correct_set(correct)?);
    let dict = PyDict::new(py);
    dict.set_item("total_entropy", b.total_entropy)?;
    dict.set_item("epistemic_entropy", b.epistemic_entropy)?;
    dict.set_item("aleatoric_entropy", b.aleatoric_entropy)?;
    dict.set_item("p_correct", b.p_correct)?;
    Ok(dict.unbind())
}

/// (prob_score, entropy_score) for a greedy answer index.
#[pyfunction]
fn confidence_scores(probs: [f64; 4], greedy_answer: usize) -> PyResult<(f64, f64)> {
    if greedy_answer >= 4 {
        return Err(value_err("greedy_answer must be in 0..4"));
    }
    let s = uq::confidence_scores(&distribution(probs)?, greedy_answer);
    Ok((s.prob_score, s.entropy_score))
}

/// Number of distinct answers among sampled option indices.
#[pyfunction]
fn num_answers_score(samples: Vec<usize>) -> PyResult<usize> {
    uq::num_answers_score(&samples).map_err(value_err)
}

fn outcomes(scores: Vec<f64>, is_incorrect: Vec<bool>) -> PyResult<Vec<ScoredOutcome>> {
    if scores.len() != is_incorrect.len() {
        return Err(value_err("scores and is_incorrect must have equal length"));
    }
    Ok(scores
        .into_iter()
        .zip(is_incorrect)
        .map(|(uncertainty_score, is_incorrect)| ScoredOutcome {
            uncertainty_score,
            is_incorrect,
        })
        .collect())
}

/// AUROC of uncertainty scores against incorrectness flags (ties counted
/// half).
#[pyfunction]
fn auroc(scores: Vec<f64>, is_incorrect: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&outcomes(scores, is_incorrect)?).map_err(value_err)
}

/// ROC staircase as a list of (false_positive_rate, true_positive_rate).
#[pyfunction]
fn roc_curve(scores: Vec<f64>, is_incorrect: Vec<bool>) -> PyResult<Vec<(f64, f64)>> {
    metrics::roc_curve(&outcomes(scores, is_incorrect)?).map_err(value_err)
}

/// Two-variable least squares; returns {slope, intercept, p_value, n}.
#[pyfunction]
fn ols(py: Python<'_>, x: Vec<f64>, y: Vec<f64>) -> PyResult<Py<PyDict>> {
    let fit = metrics::ols(&x, &y).map_err(value_err)?;
    let dict = PyDict::new(py);
    dict.set_item("slope", fit.slope)?;
    dict.set_item("intercept", fit.intercept)?;
    dict.set_item("p_value", fit.p_value)?;
    dict.set_item("n", fit.n)?;
    Ok(dict.unbind())
}

/// Fraction of greedy answers that fall in their correct sets.
#[pyfunction]
fn accuracy(greedy_answers: Vec<usize>, correct_sets: Vec<Vec<usize>>) -> PyResult<f64> {
    let sets: Vec<CorrectSet> = correct_sets
        .into_iter()
        .map(correct_set)
        .collect::<PyResult<_>>()?;
    metrics::accuracy(&greedy_answers, &sets).map_err(value_err)
}

/// Elementwise mean of probability vectors.
#[pyfunction]
fn average_distributions(dists: Vec<[f64; 4]>) -> PyResult<[f64; 4]> {
    let parsed: Vec<AnswerDistribution> = dists
        .into_iter()
        .map(distribution)
        .collect::<PyResult<_>>()?;
    let mean = uqbias::dataset::average_distributions(&parsed).map_err(value_err)?;
    Ok(*mean.probs())
}

/// Raw text of one of the ten phrasing templates (`<OPTIONS>` marks where
/// the option block goes).
#[pyfunction]
fn prompt_template(template_id: usize) -> PyResult<String> {
    perturb::template_text(template_id)
        .map(str::to_string)
        .ok_or_else(|| value_err(format!("template id {template_id} out of range 0..10")))
}

/// Fully rendered prompt text for four options under a given template.
#[pyfunction]
fn render_prompt_text(options: [String; 4], template_id: usize) -> PyResult<String> {
    let image = image_stub();
    let rendered = perturb::rephrase(&options, &image, template_id).map_err(value_err)?;
    Ok(rendered.text)
}

fn image_stub() -> uqbias::image::RgbImage {
    uqbias::image::RgbImage::new(1, 1)
}

/// The n-replicate perturbation suite for one bias, as a list of dicts.
#[pyfunction]
#[pyo3(signature = (bias, master_seed, n = 10))]
fn make_suite(
    py: Python<'_>,
    bias: &str,
    master_seed: u64,
    n: u32,
) -> PyResult<Vec<Py<PyDict>>> {
    let bias: Bias = bias.parse().map_err(value_err)?;
    let mut out = Vec::new();
    for spec in perturb::make_suite(bias, master_seed, n) {
        let dict = PyDict::new(py);
        dict.set_item("replicate_index", spec.replicate_index)?;
        dict.set_item("bias", spec.bias().as_str())?;
        match spec.kind {
            PerturbKind::Phrasing { template_id } => {
                dict.set_item("template_id", template_id)?;
            }
            PerturbKind::Positional { position_perm } => {
                dict.set_item("position_perm", position_perm.values().to_vec())?;
            }
            PerturbKind::Label { label_perm } => {
                dict.set_item("label_perm", label_perm.values().to_vec())?;
            }
            PerturbKind::Shape { aspect_ratio } => {
                dict.set_item("aspect_ratio", aspect_ratio)?;
            }
            PerturbKind::Orientation { angle_deg } => {
                dict.set_item("angle_deg", angle_deg)?;
            }
            PerturbKind::Lowlevel { noise_seed } => {
                dict.set_item("noise_seed", noise_seed)?;
            }
        }
        out.push(dict.unbind());
    }
    Ok(out)
}

#[pymodule]
fn uqbias_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(p_correct, m)?)?;
    m.add_function(wrap_pyfunction!(epistemic_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(aleatoric_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(breakdown, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_scores, m)?)?;
    m.add_function(wrap_pyfunction!(num_answers_score, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(ols, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(average_distributions, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_template, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt_text, m)?)?;
    m.add_function(wrap_pyfunction!(make_suite, m)?)?;
    Ok(())
}
