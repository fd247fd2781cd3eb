use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::report::{self, RunRecord};
use super::{
    evaluate, generate_generic_projects, generate_synthetic_projects, kfold_indices, load_examples, train_to_best,
    EncodedPair, EvalReport, ExperimentConfig, FocalExample, HarnessError, ProjectSource, Result, TrainHyper,
    TrainOutcome, BASELINE,
};
use crate::corpus::{shared_matrix, ProjectCorpus, SharedTokenMatrix, SubwordVocabulary, BPE_VERSION, TOKENIZER_VERSION};
use crate::metrics::Prediction;
use crate::model::{Seq2Seq, EOS};
use crate::tensor::Checkpoint;
use crate::tuning::{attach_prefix, drift_report, init_prefix, make_freeze_plan, PrefixBank, StrategyKind};

/// Source ids and end-terminated target ids, truncated to fit the model.
pub fn encode_pair(vocab: &SubwordVocabulary, ex: &FocalExample, max_positions: usize) -> EncodedPair {
    let mut src = vocab.encode(&ex.focal_method);
    let mut tgt = vocab.encode(&ex.test_case);
    if src.len() > max_positions || tgt.len() + 1 > max_positions {
        log::warn!("truncating {} to fit {max_positions} positions", ex.focal_id);
    }
    src.truncate(max_positions);
    tgt.truncate(max_positions - 1);
    tgt.push(EOS);
    (src, tgt)
}

/// Examples, corpora and vocabulary an experiment runs on.
pub struct PreparedData {
    pub vocab: SubwordVocabulary,
    pub generic: Vec<FocalExample>,
    pub generic_corpora: Vec<ProjectCorpus>,
    pub projects: Vec<(ProjectCorpus, Vec<FocalExample>)>,
}

fn group_examples(examples: Vec<FocalExample>) -> Vec<(ProjectCorpus, Vec<FocalExample>)> {
    let mut out: Vec<(ProjectCorpus, Vec<FocalExample>)> = Vec::new();
    for ex in examples {
        let i = match out.iter().position(|(c, _)| c.project_id == ex.project_id) {
            Some(i) => i,
            None => {
                out.push((ProjectCorpus::new(ex.project_id.clone()), Vec::new()));
                out.len() - 1
            }
        };
        let (corpus, list) = &mut out[i];
        corpus.push(format!("focal/{}", list.len()), ex.focal_method.clone());
        corpus.push(format!("test/{}", list.len()), ex.test_case.clone());
        list.push(ex);
    }
    out
}

impl PreparedData {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let (generic, projects) = match &cfg.source {
            ProjectSource::Synthetic(s) => {
                let generic =
                    generate_generic_projects(s.generic_projects, s.size_range, s.generic_examples_per_project, cfg.seed)?;
                let targets =
                    generate_synthetic_projects(s.projects, s.overlap, s.size_range, s.examples_per_project, cfg.seed)?;
                (
                    generic.into_iter().map(|p| (p.corpus, p.examples)).collect::<Vec<_>>(),
                    targets.into_iter().map(|p| (p.corpus, p.examples)).collect(),
                )
            }
            ProjectSource::Dataset { projects, generic } => {
                (group_examples(load_examples(generic)?), group_examples(load_examples(projects)?))
            }
        };
        if projects.is_empty() || generic.is_empty() {
            return Err(HarnessError::Config("no projects to run on".into()));
        }
        let texts: Vec<&str> = generic
            .iter()
            .flat_map(|(c, _)| c.files.iter().map(|f| f.text.as_str()))
            .collect();
        let vocab = SubwordVocabulary::train(&texts, cfg.model.vocab_size)?;
        Ok(Self {
            vocab,
            generic_corpora: generic.iter().map(|(c, _)| c.clone()).collect(),
            generic: generic.into_iter().flat_map(|(_, e)| e).collect(),
            projects,
        })
    }
}

/// Baseline evaluation on one project's test partition.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineEval {
    pub report: EvalReport,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

/// Everything an experiment produced; all tables are built from here.
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub vocab: SubwordVocabulary,
    pub projects: Vec<String>,
    pub pretrain: TrainOutcome,
    pub baseline: Vec<BaselineEval>,
    pub runs: Vec<RunRecord>,
    pub shared: Option<SharedTokenMatrix>,
}

fn cell_seed(seed: u64, parts: &[usize]) -> u64 {
    parts
        .iter()
        .fold(seed, |h, &p| h.wrapping_mul(0x100_0000_01b3).wrapping_add(p as u64 + 1))
}

fn with_lr(h: &TrainHyper, lr: Option<f64>) -> TrainHyper {
    TrainHyper {
        lr: lr.unwrap_or(h.lr),
        ..h.clone()
    }
}

fn train_corpus(project: &str, examples: &[&FocalExample]) -> ProjectCorpus {
    let mut c = ProjectCorpus::new(project);
    for (i, e) in examples.iter().enumerate() {
        c.push(format!("focal/{i}"), e.focal_method.clone());
        c.push(format!("test/{i}"), e.test_case.clone());
    }
    c
}

/// Pretrains the shared baseline, evaluates it per fold, then fine-tunes and
/// evaluates every (project, strategy, fold) cell. Cells run in parallel;
/// a failing cell is kept with its failure recorded.
pub fn run_experiment(cfg: &ExperimentConfig, checkpoint_dir: Option<&Path>) -> Result<ExperimentResults> {
    cfg.validate()?;
    let started = Instant::now();
    let data = PreparedData::from_config(cfg)?;
    let max_pos = cfg.model.max_positions;
    let vocab = &data.vocab;
    log::info!(
        "{} target projects, {} generic examples, vocabulary of {}",
        data.projects.len(),
        data.generic.len(),
        vocab.vocab_size()
    );

    // Baseline: generic corpus only.
    let mut generic: Vec<EncodedPair> = data.generic.iter().map(|e| encode_pair(vocab, e, max_pos)).collect();
    generic.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_val = ((generic.len() as f64 * super::VALIDATION_FRACTION).round() as usize).max(1);
    let generic_val = generic.split_off(generic.len() - n_val);
    let mut baseline = Seq2Seq::new(cfg.model.clone(), cfg.seed)?;
    let plan = make_freeze_plan(StrategyKind::Custom, &baseline.registry())?;
    let pretrain = train_to_best(&mut baseline, &plan, &generic, &generic_val, &cfg.pretrain, cfg.seed.wrapping_add(1))?;
    if let Some(reason) = &pretrain.failed {
        return Err(HarnessError::Config(format!("baseline pretraining failed: {reason}")));
    }
    log::info!(
        "baseline: val loss {:.4} after {} steps ({:.1}s)",
        pretrain.best_val_loss,
        pretrain.steps,
        started.elapsed().as_secs_f64()
    );

    let warm_bank: Option<PrefixBank> = if cfg.prefix_warm_start && cfg.strategies.contains(&StrategyKind::Prefix) {
        let mut m = baseline.clone();
        let merged = ProjectCorpus {
            project_id: "generic".into(),
            files: data.generic_corpora.iter().flat_map(|c| c.files.clone()).collect(),
        };
        let bank = init_prefix(&merged, &m, cfg.prefix_length, vocab)?;
        attach_prefix(&mut m, &bank)?;
        let plan = make_freeze_plan(StrategyKind::Prefix, &m.registry())?;
        let hyper = with_lr(&cfg.pretrain, cfg.prefix_lr);
        train_to_best(&mut m, &plan, &generic, &generic_val, &hyper, cfg.seed.wrapping_add(2))?;
        PrefixBank::from_model(&m)
    } else {
        None
    };

    let encoded: Vec<Vec<EncodedPair>> = data
        .projects
        .iter()
        .map(|(_, ex)| ex.iter().map(|e| encode_pair(vocab, e, max_pos)).collect())
        .collect();
    let splits = data
        .projects
        .iter()
        .enumerate()
        .map(|(pi, (_, ex))| kfold_indices(ex.len(), cfg.folds, cell_seed(cfg.seed, &[pi])))
        .collect::<Result<Vec<_>>>()?;

    let folds: Vec<(usize, usize)> = (0..data.projects.len())
        .flat_map(|p| (0..cfg.folds).map(move |f| (p, f)))
        .collect();
    let baseline_evals = folds
        .par_iter()
        .map(|&(pi, f)| {
            let (corpus, ex) = &data.projects[pi];
            let s = &splits[pi][f];
            let test: Vec<FocalExample> = s.test.iter().map(|&i| ex[i].clone()).collect();
            let enc: Vec<EncodedPair> = s.test.iter().map(|&i| encoded[pi][i].clone()).collect();
            let e = evaluate(&baseline, vocab, &test, &enc, &cfg.decode, &corpus.project_id, BASELINE, f)?;
            Ok(BaselineEval {
                report: e.report,
                predictions: e.predictions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("baseline evaluated ({:.1}s)", started.elapsed().as_secs_f64());

    let cells: Vec<(usize, usize, usize)> = folds
        .iter()
        .flat_map(|&(p, f)| (0..cfg.strategies.len()).map(move |s| (p, f, s)))
        .collect();
    let runs: Vec<RunRecord> = cells
        .par_iter()
        .map(|&(pi, f, si)| {
            let strategy = cfg.strategies[si];
            let (corpus, ex) = &data.projects[pi];
            let mut record = RunRecord {
                project: corpus.project_id.clone(),
                strategy,
                fold: f,
                best_val_loss: f64::NAN,
                best_step: 0,
                steps: 0,
                trainable_params: 0,
                ledger: Default::default(),
                report: None,
                drift: None,
                checkpoint: None,
                failed: None,
                predictions: Vec::new(),
            };
            let mut cell = || -> Result<()> {
                let s = &splits[pi][f];
                let pick = |ix: &[usize]| ix.iter().map(|&i| encoded[pi][i].clone()).collect::<Vec<_>>();
                let mut model = baseline.clone();
                let mut hyper = cfg.train.clone();
                if strategy == StrategyKind::Prefix {
                    let bank = match &warm_bank {
                        Some(b) => b.clone(),
                        None => {
                            let seen: Vec<&FocalExample> = s.train.iter().map(|&i| &ex[i]).collect();
                            init_prefix(&train_corpus(&corpus.project_id, &seen), &model, cfg.prefix_length, vocab)?
                        }
                    };
                    attach_prefix(&mut model, &bank)?;
                    hyper = with_lr(&cfg.train, cfg.prefix_lr);
                }
                let plan = make_freeze_plan(strategy, &model.registry())?;
                let before = Checkpoint::from_store(&model.store);
                let out = train_to_best(
                    &mut model,
                    &plan,
                    &pick(&s.train),
                    &pick(&s.val),
                    &hyper,
                    cell_seed(cfg.seed, &[pi, f, si, 7]),
                )?;
                record.best_val_loss = out.best_val_loss;
                record.best_step = out.best_step;
                record.steps = out.steps;
                record.ledger = out.ledger;
                record.failed = out.failed;
                record.trainable_params = model.store.trainable_elements();
                record.drift = Some(drift_report(&before, &Checkpoint::from_store(&model.store))?);
                if let Some(dir) = checkpoint_dir {
                    std::fs::create_dir_all(dir)?;
                    let stem = dir.join(format!("{}-{}-f{f}", corpus.project_id, strategy.name()));
                    Checkpoint::from_store(&model.store).save(&stem)?;
                    record.checkpoint = Some(stem);
                }
                let test: Vec<FocalExample> = s.test.iter().map(|&i| ex[i].clone()).collect();
                let e = evaluate(&model, vocab, &test, &pick(&s.test), &cfg.decode, &corpus.project_id, strategy.name(), f)?;
                record.report = Some(e.report);
                record.predictions = e.predictions;
                Ok(())
            };
            if let Err(err) = cell() {
                log::warn!("{} {} fold {f} failed: {err}", corpus.project_id, strategy);
                record.failed = Some(err.to_string());
            }
            log::info!(
                "{} {} fold {f}: {} steps, val {:.4}",
                record.project,
                strategy,
                record.steps,
                record.best_val_loss
            );
            record
        })
        .collect();
    log::info!("grid of {} cells done ({:.1}s)", runs.len(), started.elapsed().as_secs_f64());

    let corpora: Vec<ProjectCorpus> = data.projects.iter().map(|(c, _)| c.clone()).collect();
    Ok(ExperimentResults {
        config: cfg.clone(),
        vocab: data.vocab,
        projects: corpora.iter().map(|c| c.project_id.clone()).collect(),
        pretrain,
        baseline: baseline_evals,
        runs,
        shared: shared_matrix(&corpora).ok(),
    })
}

impl ExperimentResults {
    /// Baseline reports followed by every successful run's report.
    pub fn reports(&self) -> Vec<&EvalReport> {
        self.baseline
            .iter()
            .map(|b| &b.report)
            .chain(self.runs.iter().filter_map(|r| r.report.as_ref()))
            .collect()
    }

    pub fn methods(&self) -> Vec<String> {
        report::method_order(&self.config.strategies)
    }

    pub fn summaries(&self) -> Vec<report::MethodSummary> {
        report::summarize(&self.reports())
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.failed.is_some()).count()
    }

    pub fn manifest(&self) -> String {
        let mut m = String::new();
        writeln!(m, "experiment manifest").unwrap();
        writeln!(m, "crate_version={}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(m, "tokenizer_version={TOKENIZER_VERSION}").unwrap();
        writeln!(m, "bpe_version={BPE_VERSION}").unwrap();
        writeln!(m, "seed={}", self.config.seed).unwrap();
        writeln!(m, "projects={}", self.projects.join(",")).unwrap();
        let names: Vec<&str> = self.config.strategies.iter().map(|s| s.name()).collect();
        writeln!(m, "strategies={}", names.join(",")).unwrap();
        writeln!(m, "folds={}", self.config.folds).unwrap();
        writeln!(m, "vocab_size={}", self.vocab.vocab_size()).unwrap();
        writeln!(m, "runs={} failed={}", self.runs.len(), self.failed_runs()).unwrap();
        writeln!(m, "baseline=evaluated on every fold's test partition, tables average the folds").unwrap();
        writeln!(m, "pretrain_steps={}", self.pretrain.steps).unwrap();
        writeln!(m, "pretrain_best_val_loss={:.6}", self.pretrain.best_val_loss).unwrap();
        writeln!(m, "\n[config]\n{}", self.config.to_toml_string()).unwrap();
        m
    }

    /// Writes every table, CSV and the manifest; returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let methods = self.methods();
        let summaries = self.summaries();
        let reports = self.reports();
        let kw = report::kw_matrix(&summaries, &methods);
        let mut predictions = String::new();
        let tagged = self
            .baseline
            .iter()
            .map(|b| (&b.report.project, BASELINE, b.report.fold, &b.predictions))
            .chain(self.runs.iter().map(|r| (&r.project, r.strategy.name(), r.fold, &r.predictions)));
        for (project, method, fold, preds) in tagged {
            for p in preds {
                for rec in p.records() {
                    let line = serde_json::json!({
                        "project": project, "method": method, "fold": fold,
                        "focal_id": rec.focal_id, "rank": rec.rank, "text": rec.text, "score": rec.score,
                    });
                    predictions.push_str(&line.to_string());
                    predictions.push('\n');
                }
            }
        }
        let runs_jsonl: String = self
            .runs
            .iter()
            .map(|r| serde_json::to_string(r).expect("run record serializes") + "\n")
            .collect();
        let mut files: Vec<(&str, String)> = vec![
            ("metrics.md", report::metric_table_markdown(&summaries, &methods)),
            ("metrics.csv", report::metric_table_csv(&summaries)),
            ("kruskal_wallis.md", report::kw_markdown(&kw, &methods)),
            ("kruskal_wallis.csv", report::kw_csv(&kw)),
            ("topk.csv", report::topk_csv(&reports)),
            ("curves.csv", report::curves_csv(&self.runs)),
            ("drift.csv", report::drift_csv(&self.runs)),
            ("runs.jsonl", runs_jsonl),
            ("predictions.jsonl", predictions),
            ("vocab.json", self.vocab.to_json()),
            ("manifest.txt", self.manifest()),
        ];
        if let Some(d) = report::mean_drift(&self.runs, StrategyKind::Custom) {
            files.push(("drift_custom.csv", d.to_csv()));
        }
        if let Some(m) = &self.shared {
            files.push(("shared_tokens.csv", m.to_csv()));
        }
        let mut written = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            written.push(path);
        }
        Ok(written)
    }
}
