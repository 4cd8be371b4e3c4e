//! Prompt-based classification: datasets, templates, label extraction,
//! metrics, backends and reports.

pub mod backend;
pub mod dataset;
pub mod extract;
pub mod metrics;
pub mod report;
pub mod run;
pub mod template;

pub use backend::{EngineBackend, ModelBackend, RemoteBackend, ScriptedBackend};
pub use dataset::{
    load_dataset, parse_dataset, parse_label_list, DatasetFormat, LabeledDataset, Sample,
};
pub use extract::{extract_label, Prediction};
pub use metrics::{metrics_from_confusion, Averaging, ClassMetrics, ConfusionMatrix, Metrics};
pub use report::{emit_report, render_chart, Metric, ReportFormat};
pub use run::{evaluate, EvalOptions, EvalReport, SampleError};
pub use template::{render_prompt, template, TaskSpec, Template, TEMPLATES};
