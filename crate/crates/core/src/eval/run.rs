//! Running a backend over a dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::backend::ModelBackend;
use crate::eval::dataset::LabeledDataset;
use crate::eval::extract::{extract_label, Prediction};
use crate::eval::metrics::{metrics_from_confusion, ClassMetrics, ConfusionMatrix};
use crate::eval::template::{render_prompt, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Worker threads; 1 runs sequentially.
    pub parallelism: usize,
    /// Backend failures tolerated before the run is aborted.
    pub error_budget: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            parallelism: 1,
            error_budget: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleError {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub template: String,
    pub labels: Vec<String>,
    /// Gold rows by predicted columns, last column unparseable (backend
    /// failures included).
    pub confusion: Vec<Vec<u64>>,
    pub sample_count: u64,
    pub correct: u64,
    /// Parsed to a wrong class.
    pub misclassified: u64,
    /// Generated text matched no class.
    pub unparseable: u64,
    /// The backend failed.
    pub errors: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub failed_samples: Vec<SampleError>,
    /// Seeds and settings that produced this report.
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn matrix(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_counts(&self.labels, self.confusion.clone())
    }
}

enum Outcome {
    Parsed(Prediction),
    Failed(String),
}

pub fn evaluate(
    backend: &dyn ModelBackend,
    dataset: &LabeledDataset,
    spec: &TaskSpec,
    opts: EvalOptions,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if dataset.labels != spec.labels {
        return Err(Error::Usage(format!(
            "dataset labels {:?} differ from task labels {:?}",
            dataset.labels, spec.labels
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", dataset.name)));
    }
    let threads = if backend.concurrent() {
        opts.parallelism.max(1)
    } else {
        1
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Backend(format!("thread pool: {e}")))?;

    let run_one = |i: usize| -> Outcome {
        let sample = &dataset.samples[i];
        let prompt = render_prompt(spec, &sample.text);
        match backend.generate(&prompt, spec.max_new_tokens) {
            Ok(text) => Outcome::Parsed(extract_label(&text, &spec.labels, spec.fold_accents)),
            Err(e) => Outcome::Failed(e.to_string()),
        }
    };

    let mut matrix = ConfusionMatrix::new(&spec.labels);
    let mut failed = Vec::new();
    let mut unparseable = 0u64;
    let chunk = (threads * 8).max(16);
    let n = dataset.len();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let outcomes: Vec<Outcome> =
            pool.install(|| (start..end).into_par_iter().map(run_one).collect());
        for (i, outcome) in (start..end).zip(outcomes) {
            let gold = dataset.samples[i].label;
            match outcome {
                Outcome::Parsed(p) => {
                    if p == Prediction::Unparseable {
                        unparseable += 1;
                    }
                    matrix.record(gold, p);
                }
                Outcome::Failed(message) => {
                    matrix.record(gold, Prediction::Unparseable);
                    failed.push(SampleError { index: i, message });
                    if failed.len() > opts.error_budget {
                        return Err(Error::Backend(format!(
                            "aborted after {} backend failures (budget {}); last at sample {i}: {}",
                            failed.len(),
                            opts.error_budget,
                            failed.last().expect("just pushed").message
                        )));
                    }
                }
            }
        }
        start = end;
    }

    let m = metrics_from_confusion(&matrix)?;
    let total = matrix.total();
    let correct = matrix.correct();
    let errors = failed.len() as u64;
    Ok(EvalReport {
        dataset: dataset.name.clone(),
        model: backend.name(),
        template: spec.template.id.to_string(),
        labels: spec.labels.clone(),
        sample_count: total,
        correct,
        misclassified: total - correct - unparseable - errors,
        unparseable,
        errors,
        accuracy: m.accuracy,
        per_class: m.per_class,
        macro_precision: m.macro_avg.precision,
        macro_recall: m.macro_avg.recall,
        macro_f1: m.macro_avg.f1,
        weighted_precision: m.weighted_avg.precision,
        weighted_recall: m.weighted_avg.recall,
        weighted_f1: m.weighted_avg.f1,
        confusion: matrix.counts,
        failed_samples: failed,
        provenance: BTreeMap::new(),
    })
}
