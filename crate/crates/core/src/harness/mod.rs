//! Experiment orchestration: synthetic projects, k-fold splits, training to
//! the best validation loss, evaluation and report emission.

mod config;
mod evaluate;
mod experiment;
mod report;
mod split;
mod synth;
mod train;

pub use config::{DecodeConfig, ExperimentConfig, ProjectSource, SyntheticSpec, TrainHyper};
pub use evaluate::{evaluate, EvalReport, Evaluation, BASELINE};
pub use experiment::{encode_pair, run_experiment, ExperimentResults, PreparedData};
pub use report::{
    curves_csv, drift_csv, kw_csv, kw_markdown, kw_matrix, mean_drift, median_style, method_order, metric_table_csv,
    metric_table_markdown, summarize, topk_csv, KwCell, MethodSummary, RunRecord,
};
pub use split::{kfold_indices, kfold_split, FoldSplit, VALIDATION_FRACTION};
pub use synth::{
    generate_generic_projects, generate_synthetic_projects, ProjectStyle, SyntheticProject, MIN_PROJECT_SIZE,
    TEMPLATE_FLOOR,
};
pub use train::{train_to_best, validation_loss, EncodedPair, TrainOutcome};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::tuning::TuningError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{have} examples cannot fill {folds} folds")]
    TooFewExamples { have: usize, folds: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("bad dataset record on line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// A focal method and the developer-written test for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalExample {
    pub project_id: String,
    #[serde(default)]
    pub focal_id: String,
    pub focal_method: String,
    pub test_case: String,
}

/// Reads dataset JSONL. Missing focal ids become `<project>#<index>`.
pub fn parse_examples(text: &str) -> Result<Vec<FocalExample>> {
    let mut out: Vec<FocalExample> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut ex: FocalExample = serde_json::from_str(line).map_err(|e| HarnessError::Record {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if ex.focal_method.trim().is_empty() || ex.test_case.trim().is_empty() {
            return Err(HarnessError::Record {
                line: i + 1,
                msg: "empty focal method or test case".into(),
            });
        }
        if ex.focal_id.is_empty() {
            let n = out.iter().filter(|e| e.project_id == ex.project_id).count();
            ex.focal_id = format!("{}#{n:03}", ex.project_id);
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_examples(path: &Path) -> Result<Vec<FocalExample>> {
    parse_examples(&std::fs::read_to_string(path)?)
}

pub fn examples_to_jsonl(examples: &[FocalExample]) -> String {
    examples
        .iter()
        .map(|e| serde_json::to_string(e).expect("example serializes") + "\n")
        .collect()
}
