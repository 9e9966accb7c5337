//! The `vmask` command line: train, evaluate, explain, global-importance
//! and synth-gen.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vmask_core::checkpoint::{fingerprint_hex, Checkpoint};
use vmask_core::corpus::{self, fnv1a64, DatasetSplit, Example, SynthConfig};
use vmask_core::explainers::{self, Method};
use vmask_core::importance::ImportanceTable;
use vmask_core::metrics::{self, MetricsReport, WordScore};
use vmask_core::models::{self, Model};
use vmask_core::trainer;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "vmask", version, about = "Variational word masks for interpretable text classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier and write checkpoint, history and echoed config.
    Train(TrainArgs),
    /// Accuracy plus optional AOPC, post-hoc accuracy and Pearson r.
    Evaluate(EvaluateArgs),
    /// Attribute one prediction to its input tokens.
    Explain(ExplainArgs),
    /// Write the per-word global importance table as TSV.
    GlobalImportance(GlobalArgs),
    /// Write a synthetic planted-keyword corpus as TSV files.
    SynthGen(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Lime,
    Shapley,
    Exact,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Lime => Method::Lime,
            MethodArg::Shapley => Method::Shapley,
            MethodArg::Exact => Method::Exact,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Dev,
    Test,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training TSV; replaces `data.train` and disables `data.synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labeled TSV to evaluate instead of a configured split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Delete the top-n explained tokens for AOPC.
    #[arg(long)]
    pub aopc: Option<usize>,
    #[arg(long, value_enum)]
    pub explainer: Option<MethodArg>,
    /// LIME samples or Shapley permutations.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated k values for post-hoc accuracy.
    #[arg(long, value_delimiter = ',')]
    pub posthoc: Vec<usize>,
    #[arg(long)]
    pub pearson: bool,
    /// Number of top global words listed in the report.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Examples used for AOPC.
    #[arg(long)]
    pub slice: Option<usize>,
    /// Explainer seed; defaults to the training seed. Data are always
    /// rebuilt with the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw text to explain.
    #[arg(long, conflicts_with = "index")]
    pub text: Option<String>,
    /// Index into the configured split.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "lime")]
    pub method: MethodArg,
    /// LIME samples or Shapley permutations.
    #[arg(long, alias = "perms")]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the attribution JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run config (IBA needs the training set); defaults to the stored one.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Run config whose `data.synth` section is used; defaults apply otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error: 2 for a missing file, the checkpoint
/// error code for checkpoint failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vmask_core::Error>() {
            match e {
                vmask_core::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => return 2,
                vmask_core::Error::Checkpoint(c) => return c.code(),
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Explain(a) => cmd_explain(&a),
        Command::GlobalImportance(a) => cmd_global_importance(&a),
        Command::SynthGen(a) => cmd_synth_gen(&a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = &args.data {
        cfg.data.train = Some(p.clone());
        cfg.data.synth = None;
    }
    cfg.materialize(args.seed);
    let data = cfg.dataset()?;
    if cfg.model.num_classes != data.num_classes {
        log::info!("model.num_classes set to {} from the data", data.num_classes);
        cfg.model.num_classes = data.num_classes;
    }
    cfg.model.validate(data.max_len)?;
    cfg.train.validate()?;
    let seed = cfg.train.seed;
    let mut model = match &cfg.data.embeddings {
        Some(path) => {
            let (table, covered) =
                models::load_pretrained_embeddings(path, &data.vocab, cfg.model.embed_dim, cfg.model.freeze_embeddings, seed)?;
            log::info!("pretrained vectors cover {covered} of {} words", data.vocab.len() - corpus::NUM_RESERVED);
            Model::with_embedding(cfg.model.clone(), cfg.train.strategy, table, cfg.train.tau, seed)?
        }
        None => Model::new(cfg.model.clone(), cfg.train.strategy, data.vocab.len(), cfg.train.tau, seed)?,
    };
    let mut outcome = trainer::train(&mut model, &data, &cfg.train)?;
    let echoed = serde_json::to_value(&cfg)?;
    outcome.best.config = echoed.clone();

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    outcome.best.save(args.out.join("checkpoint.vmsk"))?;
    write(&args.out.join("history.jsonl"), trainer::history_jsonl(&outcome.history)?)?;
    write(&args.out.join("echoed-config.json"), serde_json::to_string_pretty(&echoed)? + "\n")?;

    println!(
        "trained {} for {} epochs; best epoch {} dev accuracy {:.2}%",
        cfg.train.strategy.name(),
        outcome.history.len(),
        outcome.best.epoch,
        outcome.best.dev_accuracy.unwrap_or(f64::NAN)
    );
    if !data.test.is_empty() {
        println!("test accuracy {:.2}%", metrics::accuracy(&outcome.best.model, &data.test)?);
    }
    Ok(())
}

/// The run config to use with a checkpoint: explicit file, else the one
/// stored at training time.
fn run_config_for(ckpt: &Checkpoint, path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => serde_json::from_value(ckpt.config.clone())
            .map_err(|e| anyhow!("checkpoint carries no usable run config ({e}); pass --config")),
    }
}

/// Rebuilds the dataset and checks it was encoded with the checkpoint's vocabulary.
fn dataset_for(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<DatasetSplit> {
    let data = cfg.dataset()?;
    ckpt.check_vocab(&data.vocab).context("the data vocabulary differs from the checkpoint's")?;
    Ok(data)
}

fn pick_split(data: DatasetSplit, split: SplitArg) -> Result<Vec<Example>> {
    let (name, part) = match split {
        SplitArg::Dev => ("dev", data.dev),
        SplitArg::Test => ("test", data.test),
    };
    if part.is_empty() {
        bail!("the {name} split is empty");
    }
    Ok(part)
}

fn encode_tsv(path: &Path, ckpt: &Checkpoint, max_len: usize) -> Result<Vec<Example>> {
    let items = corpus::load_tsv(path)?;
    Ok(items
        .iter()
        .map(|t| Example::encode(&t.tokens, t.label, &ckpt.vocab, max_len))
        .filter(|e| e.true_length > 0)
        .collect())
}

fn importance_table(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<ImportanceTable> {
    let model = &ckpt.model;
    let train = match model.strategy {
        models::Strategy::Iba => dataset_for(ckpt, cfg)?.train,
        _ => Vec::new(),
    };
    models::global_importance(model, &ckpt.vocab, &train)?.ok_or_else(|| {
        anyhow!(
            "no global importance table available for strategy {} (only vmask and iba define one)",
            model.strategy.name()
        )
    })
}

pub fn evaluate_report(args: &EvaluateArgs) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = run_config_for(&ckpt, args.config.as_deref())?;
    cfg.materialize(None);
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let examples = match &args.data {
        Some(p) => encode_tsv(p, &ckpt, cfg.max_len())?,
        None => pick_split(dataset_for(&ckpt, &cfg)?, args.split)?,
    };
    if examples.is_empty() {
        bail!("no examples to evaluate");
    }
    let model = &ckpt.model;
    let accuracy = metrics::accuracy(model, &examples)?;
    let config_fp = fingerprint_hex(fnv1a64(serde_json::to_string(&cfg)?.as_bytes()));
    let mut report = MetricsReport::new(
        model.strategy.name(),
        examples.len(),
        accuracy,
        fingerprint_hex(ckpt.vocab.fingerprint()),
        config_fp,
        seed,
    );

    if let Some(n) = args.aopc {
        let ex_cfg = cfg.eval.explainer_config(args.explainer.map(Into::into), args.samples);
        let slice = &examples[..examples.len().min(args.slice.unwrap_or(cfg.eval.slice_size).max(1))];
        let v = metrics::aopc(model, slice, &ex_cfg, &[n], seed)?[0];
        report.aopc.insert(format!("{}@{n}", ex_cfg.method.name()), v);
    }
    let needs_table = !args.posthoc.is_empty() || args.pearson;
    let table = if needs_table {
        Some(importance_table(&ckpt, &cfg)?)
    } else {
        importance_table(&ckpt, &cfg).ok()
    };
    if let Some(table) = &table {
        for &k in &args.posthoc {
            report
                .posthoc_acc
                .insert(k.to_string(), metrics::post_hoc_accuracy(model, &examples, table, k)?);
        }
        if args.pearson {
            report.pearson_r = Some(metrics::pearson_freq_importance(&ckpt.vocab, table)?);
        }
        let k = args.top.min(ckpt.vocab.len() - corpus::NUM_RESERVED);
        report.top_words = metrics::top_k_words(table, &ckpt.vocab, k)?
            .into_iter()
            .map(|(token, score)| WordScore { token, score })
            .collect();
    }
    report.validate()?;
    Ok(report)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let report = evaluate_report(args)?;
    let json = report.to_json()?;
    print!("{}", report.to_table());
    println!("{json}");
    if let Some(out) = &args.out {
        write(out, json + "\n")?;
    }
    Ok(())
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = match &args.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => run_config_for(&ckpt, None).ok(),
    };
    let ex = match (&args.text, args.index) {
        (Some(text), _) => {
            let tokens = corpus::tokenize(text);
            let max_len = cfg.as_ref().map_or(tokens.len(), |c| c.max_len()).max(1);
            Example::encode(&tokens, 0, &ckpt.vocab, max_len)
        }
        (None, Some(i)) => {
            let mut cfg = cfg
                .clone()
                .ok_or_else(|| anyhow!("--index needs a run config; pass --config"))?;
            cfg.materialize(None);
            let part = pick_split(dataset_for(&ckpt, &cfg)?, args.split)?;
            let n = part.len();
            part.into_iter()
                .nth(i)
                .ok_or_else(|| anyhow!("index {i} out of range for a split of {n} examples"))?
        }
        (None, None) => bail!("pass --text or --index"),
    };
    if ex.true_length == 0 {
        bail!("nothing to explain: the input has no tokens");
    }
    let eval = cfg.map(|c| c.eval).unwrap_or_default();
    let ex_cfg = eval.explainer_config(Some(args.method.into()), args.samples);
    let attribution = explainers::explain(&ckpt.model, &ex, &ex_cfg, args.seed)?;
    let json = attribution.to_json(&ckpt.vocab);

    let mut out = format!("method {} target class {}\n", ex_cfg.method.name(), attribution.target_class);
    for t in attribution.ranking() {
        writeln!(out, "{:>3}  {:<20} {:+.6}", t, json.tokens[t], attribution.scores[t])?;
    }
    print!("{out}");
    if let Some(path) = &args.out {
        write(path, serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(())
}

pub fn cmd_global_importance(args: &GlobalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let table = match ckpt.model.strategy {
        models::Strategy::Iba => {
            let mut cfg = run_config_for(&ckpt, args.config.as_deref())?;
            cfg.materialize(None);
            importance_table(&ckpt, &cfg)?
        }
        _ => importance_table(&ckpt, &RunConfig::default())?,
    };
    let mut tsv = table.to_tsv(&ckpt.vocab);
    match metrics::pearson_freq_importance(&ckpt.vocab, &table) {
        Ok(r) => writeln!(tsv, "# pearson_r\t{r}")?,
        Err(e) => writeln!(tsv, "# pearson_r\tNA\t{e}")?,
    }
    write(&args.out, tsv)?;
    println!("wrote {} words to {}", ckpt.vocab.len() - corpus::NUM_RESERVED, args.out.display());
    Ok(())
}

pub fn cmd_synth_gen(args: &SynthArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let synth = cfg.data.synth.clone().unwrap_or_else(SynthConfig::default);
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let docs = corpus::synth_docs(&synth, &synth.default_keywords(), seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    corpus::write_tsv(args.out.join("train.tsv"), &docs.train)?;
    corpus::write_tsv(args.out.join("dev.tsv"), &docs.dev)?;
    corpus::write_tsv(args.out.join("test.tsv"), &docs.test)?;
    let meta = serde_json::json!({ "seed": seed, "synth": synth, "keywords": docs.keywords });
    write(&args.out.join("keywords.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    println!(
        "wrote {} train, {} dev, {} test documents to {}",
        docs.train.len(),
        docs.dev.len(),
        docs.test.len(),
        args.out.display()
    );
    Ok(())
}
