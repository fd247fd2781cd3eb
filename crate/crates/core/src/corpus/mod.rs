//! Project corpora, comment stripping, analysis tokens, the shared-token
//! matrix and the byte-level BPE vocabulary used by the model.

mod bpe;
mod matrix;
mod noise;
mod tokens;

pub use bpe::{pretokenize, SubwordVocabulary, BASE_VOCAB, BPE_VERSION};
pub use matrix::{shared_matrix, shared_matrix_from_sets, SharedTokenMatrix};
pub use noise::{license_header, strip_noise};
pub use tokens::{analysis_token_stream, analysis_tokens, is_java_keyword, JAVA_KEYWORDS, TOKENIZER_VERSION};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("need at least 2 projects, got {0}")]
    TooFewProjects(usize),
    #[error("project `{0}` has no tokens")]
    EmptyTokenSet(String),
    #[error("vocabulary size {requested} is below the minimum of {minimum}")]
    VocabularyTooSmall { requested: usize, minimum: usize },
    #[error("bad vocabulary: {0}")]
    Vocabulary(String),
    #[error("bad corpus record on line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// All source files of one project.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectCorpus {
    pub project_id: String,
    pub files: Vec<SourceFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub text: String,
}

/// One line of a corpus JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub project_id: String,
    pub path: String,
    pub text: String,
}

impl ProjectCorpus {
    pub fn new(project_id: impl Into<String>) -> Self {
        Self {
            project_id: project_id.into(),
            files: Vec::new(),
        }
    }

    pub fn push(&mut self, path: impl Into<String>, text: impl Into<String>) {
        self.files.push(SourceFile {
            path: path.into(),
            text: text.into(),
        });
    }

    /// Analysis-token occurrence counts over the comment-free files.
    pub fn token_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for f in &self.files {
            for t in analysis_token_stream(&strip_noise(&f.text)) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Unique analysis tokens.
    pub fn tokens(&self) -> BTreeSet<String> {
        self.files
            .iter()
            .flat_map(|f| analysis_tokens(&strip_noise(&f.text)))
            .collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.files.iter().map(|f| f.text.len()).sum()
    }
}

/// One project per immediate subdirectory; every regular file below it is
/// read, in path order.
pub fn load_dir(root: &Path) -> Result<Vec<ProjectCorpus>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let id = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut corpus = ProjectCorpus::new(id);
        let mut files: Vec<_> = walkdir::WalkDir::new(&dir)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .collect();
        files.sort_by(|a, b| a.path().cmp(b.path()));
        for f in files {
            let bytes = fs::read(f.path())?;
            let rel = f.path().strip_prefix(&dir).unwrap_or(f.path()).to_string_lossy().into_owned();
            corpus.push(rel, String::from_utf8_lossy(&bytes).into_owned());
        }
        out.push(corpus);
    }
    Ok(out)
}

/// Groups JSONL records by project, keeping first-seen project order.
pub fn parse_jsonl(text: &str) -> Result<Vec<ProjectCorpus>> {
    let mut out: Vec<ProjectCorpus> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| CorpusError::Record {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match out.iter_mut().find(|p| p.project_id == rec.project_id) {
            Some(p) => p.push(rec.path, rec.text),
            None => {
                let mut p = ProjectCorpus::new(rec.project_id);
                p.push(rec.path, rec.text);
                out.push(p);
            }
        }
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<ProjectCorpus>> {
    parse_jsonl(&fs::read_to_string(path)?)
}

pub fn to_jsonl(projects: &[ProjectCorpus]) -> String {
    let mut out = String::new();
    for p in projects {
        for f in &p.files {
            let rec = CorpusRecord {
                project_id: p.project_id.clone(),
                path: f.path.clone(),
                text: f.text.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}
