use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use projtune::compute::FlopModel;
use projtune::corpus::{load_dir, load_jsonl, shared_matrix, ProjectCorpus, SubwordVocabulary};
use projtune::harness::{
    encode_pair, evaluate, examples_to_jsonl, generate_synthetic_projects, load_examples, run_experiment,
    train_to_best, DecodeConfig, EncodedPair, ExperimentConfig, TrainHyper, VALIDATION_FRACTION,
};
use projtune::metrics::kruskal_wallis;
use projtune::model::{count_parameters, ModelConfig, Seq2Seq};
use projtune::tensor::{Checkpoint, OptimizerKind};
use projtune::tuning::{
    attach_prefix, drift_report, init_prefix, make_freeze_plan, StrategyKind, DEFAULT_PREFIX_LENGTH,
};

#[derive(Parser)]
#[command(name = "projtune", version, about = "Project-specific customization of code models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus statistics and the shared-token matrix.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Synthetic project generation.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Trainable-parameter accounting.
    #[command(subcommand)]
    Params(ParamsCmd),
    /// Per-token compute estimates.
    #[command(subcommand)]
    Flops(FlopsCmd),
    /// Fine-tune a model on a dataset with one strategy.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Statistical tests.
    #[command(subcommand)]
    Stats(StatsCmd),
    /// The full cross-validated grid.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Parameter drift between checkpoints.
    #[command(subcommand)]
    Drift(DriftCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Files, bytes and unique tokens per project.
    Stats { input: PathBuf },
    /// Pairwise shared-token ratios as CSV.
    Matrix {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Write a corpus JSONL and a dataset JSONL of synthetic projects.
    Gen {
        #[arg(long, default_value_t = 4)]
        projects: usize,
        #[arg(long, default_value_t = 0.13)]
        overlap: f64,
        #[arg(long, default_value_t = 60)]
        min_size: usize,
        #[arg(long, default_value_t = 90)]
        max_size: usize,
        #[arg(long, default_value_t = 40)]
        examples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ParamsCmd {
    /// Trainable parameters per strategy.
    Count {
        /// Model config TOML; the reference configuration if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PREFIX_LENGTH)]
        prefix_length: usize,
    },
}

#[derive(Subcommand)]
enum FlopsCmd {
    /// Forward and training FLOPs per token for every strategy.
    Estimate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_ctx: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_PREFIX_LENGTH)]
        prefix_length: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset JSONL of focal/test pairs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Starting checkpoint stem; a fresh model if omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Vocabulary JSON; trained on the dataset if omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value = "custom")]
    strategy: String,
    #[arg(long, default_value_t = 8)]
    prefix_length: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, default_value_t = 1000)]
    max_steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output checkpoint stem.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam_width: usize,
    #[arg(long, default_value_t = 80)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Kruskal-Wallis over a CSV with `group,value` rows.
    Kw { input: PathBuf },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Run the grid described by a config and write all reports.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoints: bool,
    },
    /// Print the toy experiment config.
    Config,
}

#[derive(Subcommand)]
enum DriftCmd {
    /// Mean absolute change per block as CSV.
    Report {
        before: PathBuf,
        after: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_corpora(input: &Path) -> Result<Vec<ProjectCorpus>> {
    let corpora = if input.is_dir() { load_dir(input)? } else { load_jsonl(input)? };
    Ok(corpora)
}

fn model_config(path: Option<&Path>, default: ModelConfig) -> Result<ModelConfig> {
    match path {
        Some(p) => Ok(ModelConfig::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => Ok(default),
    }
}

fn sidecar(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Stats { input } => {
            println!("project,files,bytes,unique_tokens");
            for c in load_corpora(&input)? {
                println!("{},{},{},{}", c.project_id, c.files.len(), c.total_bytes(), c.tokens().len());
            }
        }
        CorpusCmd::Matrix { input, out } => {
            let m = shared_matrix(&load_corpora(&input)?)?;
            emit(out.as_deref(), &m.to_csv())?;
            eprintln!("median off-diagonal ratio {:.4}", m.median_off_diagonal());
        }
    }
    Ok(())
}

fn synth(cmd: SynthCmd) -> Result<()> {
    let SynthCmd::Gen {
        projects,
        overlap,
        min_size,
        max_size,
        examples,
        seed,
        out,
    } = cmd;
    let ps = generate_synthetic_projects(projects, overlap, (min_size, max_size), examples, seed)?;
    fs::create_dir_all(&out)?;
    let corpora: Vec<ProjectCorpus> = ps.iter().map(|p| p.corpus.clone()).collect();
    fs::write(out.join("corpus.jsonl"), projtune::corpus::to_jsonl(&corpora))?;
    let all: Vec<_> = ps.iter().flat_map(|p| p.examples.clone()).collect();
    fs::write(out.join("dataset.jsonl"), examples_to_jsonl(&all))?;
    println!("{} projects, {} examples written to {}", ps.len(), all.len(), out.display());
    Ok(())
}

fn params(cmd: ParamsCmd) -> Result<()> {
    let ParamsCmd::Count { config, prefix_length } = cmd;
    let cfg = model_config(config.as_deref(), ModelConfig::bart_large())?;
    println!("strategy,trainable,total,trainable_pct");
    for s in StrategyKind::ALL {
        let c = count_parameters(&cfg, s, prefix_length)?;
        println!("{},{},{},{:.2}", s.title(), c.trainable, c.total, 100.0 * c.trainable_fraction());
    }
    Ok(())
}

fn flops(cmd: FlopsCmd) -> Result<()> {
    let FlopsCmd::Estimate {
        config,
        n_ctx,
        prefix_length,
    } = cmd;
    let cfg = model_config(config.as_deref(), ModelConfig::bart_large())?;
    let reg = projtune::model::ParameterRegistry::from_config(&cfg);
    println!("strategy,forward_per_token,train_per_token,train_over_forward");
    for s in StrategyKind::ALL {
        let mut fm = FlopModel::for_strategy(&cfg, s, prefix_length);
        if let Some(n) = n_ctx {
            fm = fm.with_context(n);
        }
        let plan = make_freeze_plan(s, &reg)?;
        let fwd = fm.forward_per_token();
        let train = fm.train_per_token(&plan);
        println!("{},{fwd:e},{train:e},{:.4}", s.title(), train / fwd);
    }
    Ok(())
}

fn split_pairs(mut pairs: Vec<EncodedPair>, seed: u64) -> (Vec<EncodedPair>, Vec<EncodedPair>) {
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((pairs.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let val = pairs.split_off(pairs.len() - n_val);
    (pairs, val)
}

fn train(a: TrainArgs) -> Result<()> {
    let strategy: StrategyKind = a.strategy.parse()?;
    let examples = load_examples(&a.data)?;
    if examples.len() < 2 {
        bail!("need at least two examples");
    }
    let (cfg, mut model) = match &a.init {
        Some(stem) => {
            let cfg = model_config(
                Some(a.model_config.clone().unwrap_or_else(|| sidecar(stem, ".model.toml")).as_path()),
                ModelConfig::toy(),
            )?;
            let store = Checkpoint::load(stem)?.to_store()?;
            (cfg.clone(), Seq2Seq::from_store(cfg, store)?)
        }
        None => {
            let cfg = model_config(a.model_config.as_deref(), ModelConfig::toy())?;
            (cfg.clone(), Seq2Seq::new(cfg, a.seed)?)
        }
    };
    let vocab = match &a.vocab {
        Some(p) => SubwordVocabulary::from_json(&fs::read_to_string(p)?)?,
        None => {
            let texts: Vec<&str> = examples
                .iter()
                .flat_map(|e| [e.focal_method.as_str(), e.test_case.as_str()])
                .collect();
            SubwordVocabulary::train(&texts, cfg.vocab_size)?
        }
    };
    let pairs: Vec<EncodedPair> = examples.iter().map(|e| encode_pair(&vocab, e, cfg.max_positions)).collect();
    let (train, val) = split_pairs(pairs, a.seed);
    if strategy == StrategyKind::Prefix {
        let mut c = ProjectCorpus::new("train");
        for e in &examples {
            c.push("focal", e.focal_method.clone());
            c.push("test", e.test_case.clone());
        }
        let bank = init_prefix(&c, &model, a.prefix_length, &vocab)?;
        attach_prefix(&mut model, &bank)?;
    }
    let plan = make_freeze_plan(strategy, &model.registry())?;
    let hyper = TrainHyper {
        lr: a.lr,
        batch_size: a.batch_size,
        patience: a.patience,
        eval_every: a.eval_every,
        max_steps: a.max_steps,
        optimizer: OptimizerKind::Adam,
    };
    let out = train_to_best(&mut model, &plan, &train, &val, &hyper, a.seed)?;
    if let Some(parent) = a.out.parent() {
        fs::create_dir_all(parent)?;
    }
    Checkpoint::from_store(&model.store).save(&a.out)?;
    fs::write(sidecar(&a.out, ".model.toml"), cfg.to_toml_string())?;
    fs::write(sidecar(&a.out, ".vocab.json"), vocab.to_json())?;
    let rows = projtune::compute::CurveRow::from_ledger(strategy.name(), "dataset", 0, &out.ledger);
    fs::write(sidecar(&a.out, ".curve.csv"), projtune::compute::curve_csv(&rows))?;
    println!(
        "steps {} best step {} best val loss {:.4} compute {:.3e} PF-s{}",
        out.steps,
        out.best_step,
        out.best_val_loss,
        out.ledger.pf_seconds(),
        out.failed.map(|f| format!(" FAILED: {f}")).unwrap_or_default()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg_path = a.model_config.clone().unwrap_or_else(|| sidecar(&a.checkpoint, ".model.toml"));
    let cfg = model_config(Some(&cfg_path), ModelConfig::toy())?;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| sidecar(&a.checkpoint, ".vocab.json"));
    let vocab = SubwordVocabulary::from_json(&fs::read_to_string(&vocab_path)?)?;
    let model = Seq2Seq::from_store(cfg.clone(), Checkpoint::load(&a.checkpoint)?.to_store()?)?;
    let examples = load_examples(&a.data)?;
    let mut by_project: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for e in examples {
        by_project.entry(e.project_id.clone()).or_default().push(e);
    }
    let decode = DecodeConfig {
        beam_width: a.beam_width,
        max_len: a.max_len,
    };
    fs::create_dir_all(&a.out)?;
    let mut reports = Vec::new();
    let mut preds = String::new();
    for (project, ex) in &by_project {
        let enc: Vec<EncodedPair> = ex.iter().map(|e| encode_pair(&vocab, e, cfg.max_positions)).collect();
        let e = evaluate(&model, &vocab, ex, &enc, &decode, project, "checkpoint", 0)?;
        for p in &e.predictions {
            for r in p.records() {
                preds.push_str(&serde_json::to_string(&r)?);
                preds.push('\n');
            }
        }
        reports.push(e.report);
    }
    let refs: Vec<_> = reports.iter().collect();
    let summaries = projtune::harness::summarize(&refs);
    fs::write(a.out.join("metrics.csv"), projtune::harness::metric_table_csv(&summaries))?;
    fs::write(a.out.join("topk.csv"), projtune::harness::topk_csv(&refs))?;
    fs::write(a.out.join("predictions.jsonl"), preds)?;
    for r in &reports {
        println!(
            "{}: bleu4 {:.4} perplexity {:.4} exact@1 {:.3} exact@5 {:.3} style {:.3}",
            r.project, r.bleu4, r.perplexity, r.exact_at[0], r.exact_at[4], r.style_similarity
        );
    }
    Ok(())
}

fn stats(cmd: StatsCmd) -> Result<()> {
    let StatsCmd::Kw { input } = cmd;
    let mut reader = csv::Reader::from_path(&input).with_context(|| format!("reading {}", input.display()))?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let (Some(g), Some(v)) = (row.get(0), row.get(1)) else {
            bail!("expected `group,value` rows");
        };
        groups.entry(g.to_string()).or_default().push(v.trim().parse()?);
    }
    let r = kruskal_wallis(&groups.into_values().collect::<Vec<_>>())?;
    println!("h,df,p_value\n{:.6},{},{:.6}", r.h, r.df, r.p_value);
    Ok(())
}

fn experiment(cmd: ExperimentCmd) -> Result<()> {
    match cmd {
        ExperimentCmd::Config => print!("{}", ExperimentConfig::toy().to_toml_string()),
        ExperimentCmd::Run { config, out, checkpoints } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::toy(),
            };
            let ckpt = checkpoints.then(|| out.join("checkpoints"));
            let results = run_experiment(&cfg, ckpt.as_deref())?;
            for p in results.write(&out)? {
                println!("wrote {}", p.display());
            }
            print!("{}", fs::read_to_string(out.join("metrics.md"))?);
            if results.failed_runs() > 0 {
                eprintln!("{} runs failed, see runs.jsonl", results.failed_runs());
            }
        }
    }
    Ok(())
}

fn drift(cmd: DriftCmd) -> Result<()> {
    let DriftCmd::Report { before, after, out } = cmd;
    let r = drift_report(&Checkpoint::load(&before)?, &Checkpoint::load(&after)?)?;
    emit(out.as_deref(), &r.to_csv())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Corpus(c) => corpus(c),
        Command::Synth(c) => synth(c),
        Command::Params(c) => params(c),
        Command::Flops(c) => flops(c),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Stats(c) => stats(c),
        Command::Experiment(c) => experiment(c),
        Command::Drift(c) => drift(c),
    }
}
