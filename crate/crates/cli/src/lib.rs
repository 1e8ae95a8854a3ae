//! The `nesycap` command line: generate data, extract the knowledge base, train,
//! evaluate, explain single scenes and audit a model for context overuse.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::de::DeserializeOwned;
use thiserror::Error;

use nesycap::datagen::{self, DataError, Dataset, GenConfig};
use nesycap::kb::{
    self, build_cooccurrence_embeddings, extract_bias_prone_sets, KbError, KnowledgeBase,
};
use nesycap::losses::{CeScope, LossError};
use nesycap::model::{ModelError, ModelParams};
use nesycap::reasoner::{self, ReasonerError};
use nesycap::train::{self, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or inputs that do not fit together.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_)
            | DataError::UnknownSubclass(_)
            | DataError::UnknownStereotype(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<KbError> for CliError {
    fn from(e: KbError) -> Self {
        match e {
            KbError::Io(_) | KbError::Csv(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) | ModelError::Json(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(format!("checkpoint: {e}")),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_)
            | TrainError::InvalidKb(_)
            | TrainError::EmptyDataset
            | TrainError::UnknownSubclass(_)
            | TrainError::Loss(LossError::InvalidHyperParams(_)) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ReasonerError> for CliError {
    fn from(e: ReasonerError) -> Self {
        match e {
            ReasonerError::InvalidTheta(_)
            | ReasonerError::InvalidKb(_)
            | ReasonerError::UnknownScene(_)
            | ReasonerError::UnknownSubclass(_)
            | ReasonerError::UnknownClass(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "nesycap",
    version,
    about = "Knowledge-base constrained captioning with bias explanations"
)]
pub struct Cli {
    /// Worker threads for per-scene parallel work; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Leave wall-clock timestamps out of output files and logs.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test dataset directory.
    GenData(GenDataArgs),
    /// Extract the knowledge base of bias-prone sets from the training captions.
    BuildKb(BuildKbArgs),
    /// Train the captioner and write a checkpoint.
    Train(TrainArgs),
    /// Compute accuracy and bias metrics on a split.
    Eval(EvalArgs),
    /// Explain the prediction for one scene (JSON on standard output).
    Explain(ExplainArgs),
    /// Audit a model for context overuse and write a bias report.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct GenDataArgs {
    /// Generator config (TOML or JSON); defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds every random draw of the generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training scenes.
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    /// Test scenes.
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    /// Probability that a scene's own stereotype flag is raised.
    #[arg(long, default_value = "0.8")]
    pub bias_rho: f64,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct BuildKbArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Minimum cosine similarity between a sub-class and its class.
    #[arg(long, default_value = "0.7")]
    pub threshold: f64,
    /// Co-occurrence window radius.
    #[arg(long, default_value_t = kb::DEFAULT_WINDOW)]
    pub window: usize,
    /// Knowledge base output (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the PPMI embedding table as CSV.
    #[arg(long)]
    pub emb_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CeScopeArg {
    NonBiasProne,
    AllTokens,
}

impl From<CeScopeArg> for CeScope {
    fn from(a: CeScopeArg) -> Self {
        match a {
            CeScopeArg::NonBiasProne => CeScope::NonBiasProne,
            CeScopeArg::AllTokens => CeScope::AllTokens,
        }
    }
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Knowledge base written by build-kb.
    #[arg(long)]
    pub kb: PathBuf,
    /// Training config (TOML or JSON); explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// SGD learning rate.
    #[arg(long, default_value = "0.2")]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Hidden state width.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Seeds initialization and batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cross-entropy weight.
    #[arg(long, default_value = "1.0")]
    pub alpha: f64,
    /// Confidence-loss weight.
    #[arg(long, default_value = "0.1")]
    pub beta: f64,
    /// Confusion-loss weight.
    #[arg(long, default_value = "1.0")]
    pub mu: f64,
    /// Stabilizer in the confidence ratio.
    #[arg(long, default_value = "1e-6")]
    pub epsilon: f64,
    /// Tokens scored by cross-entropy.
    #[arg(long, value_enum, default_value = "non-bias-prone")]
    pub ce_scope: CeScopeArg,
    /// Per-step loss log (CSV).
    #[arg(long)]
    pub metrics_log: Option<PathBuf>,
    /// Also save a checkpoint every N steps, next to --out.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Knowledge base written by build-kb.
    #[arg(long)]
    pub kb: PathBuf,
    /// Metrics file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Split to process.
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct ExplainArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene_id: u64,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Knowledge base written by build-kb.
    #[arg(long)]
    pub kb: PathBuf,
    /// Margin above 1/J at which a masked prediction counts as context overuse.
    #[arg(long, default_value = "0.05")]
    pub theta: f64,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct AuditArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Knowledge base written by build-kb.
    #[arg(long)]
    pub kb: PathBuf,
    /// Bias report (JSON); a text summary goes to standard output.
    #[arg(long)]
    pub out: PathBuf,
    /// Margin above 1/J at which a masked prediction counts as context overuse.
    #[arg(long, default_value = "0.05")]
    pub theta: f64,
    /// Split to process.
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_VALIDATION;
        }
    };
    init_logging(cli.no_timestamp);
    match execute(&cli, &matches) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

fn init_logging(no_timestamp: bool) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    b.target(env_logger::Target::Stderr);
    if no_timestamp {
        b.format_timestamp(None);
    }
    // a second run in the same process keeps the first logger
    let _ = b.try_init();
}

fn execute(cli: &Cli, matches: &ArgMatches) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Validation("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let sub = matches
        .subcommand()
        .map(|(_, m)| m)
        .expect("subcommand is required");
    pool.install(|| match &cli.command {
        Command::GenData(a) => gen_data(a, sub, cli.no_timestamp),
        Command::BuildKb(a) => build_kb(a),
        Command::Train(a) => train_cmd(a, sub),
        Command::Eval(a) => eval_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Audit(a) => audit_cmd(a),
    })
}

/// Reads a TOML or JSON file, chosen by extension.
pub fn load_config<C: DeserializeOwned>(path: &Path) -> Result<C, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |e: String| CliError::Validation(format!("{}: {e}", path.display()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| bad(e.to_string())),
        Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string())),
        _ => Err(bad("config must have a .toml or .json extension".into())),
    }
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Applies a flag over a config value when the flag was given on the command line.
fn apply<V: PartialEq + std::fmt::Debug + Clone>(
    m: &ArgMatches,
    id: &str,
    from_file: bool,
    target: &mut V,
    flag: &V,
) {
    if !from_file {
        *target = flag.clone();
    } else if explicit(m, id) {
        if target != flag {
            info!(
                "--{} overrides the config value {target:?} with {flag:?}",
                id.replace('_', "-")
            );
        }
        *target = flag.clone();
    }
}

/// Rejects outputs that repeat or that would overwrite one of the inputs.
fn distinct(outputs: &[&Path], inputs: &[&Path]) -> Result<(), CliError> {
    for (i, a) in outputs.iter().enumerate() {
        if outputs[i + 1..].iter().any(|b| a == b) {
            return Err(CliError::Validation(format!(
                "output path {} is used twice",
                a.display()
            )));
        }
        if inputs.iter().any(|b| a == b) {
            return Err(CliError::Validation(format!(
                "output path {} would overwrite an input",
                a.display()
            )));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn gen_data(a: &GenDataArgs, m: &ArgMatches, no_timestamp: bool) -> Result<(), CliError> {
    let from_file = a.config.is_some();
    let mut cfg: GenConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => GenConfig::default(),
    };
    apply(m, "seed", from_file, &mut cfg.seed, &a.seed);
    apply(m, "n_train", from_file, &mut cfg.n_train, &a.n_train);
    apply(m, "n_test", from_file, &mut cfg.n_test, &a.n_test);
    apply(m, "bias_rho", from_file, &mut cfg.bias_rho, &a.bias_rho);
    cfg.validate()?;
    let data = datagen::generate_dataset(&cfg)?;
    let created = if no_timestamp {
        None
    } else {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs())
    };
    datagen::save_dataset_dir(&a.out, &data, created)?;
    info!(
        "wrote {} train and {} test scenes (vocabulary {}) to {}",
        data.train.len(),
        data.test.len(),
        data.train.vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn build_kb(a: &BuildKbArgs) -> Result<(), CliError> {
    let mut outs: Vec<&Path> = vec![&a.out];
    outs.extend(a.emb_csv.as_deref());
    distinct(&outs, &[&a.data])?;
    let data = load_data(&a.data)?;
    let corpus = data.train.kb_corpus();
    let emb = build_cooccurrence_embeddings(&corpus, &data.train.vocab, a.window)?;
    let ext = extract_bias_prone_sets(&emb, &data.train.vocab, a.threshold)?;
    for c in &ext.conflicts {
        warn!(
            "'{}' passed the threshold for several classes; assigned to '{}'",
            c.subclass, c.assigned
        );
    }
    for d in &ext.dropped {
        warn!("class '{d}' dropped: fewer than two sub-classes passed the threshold");
    }
    if ext.kb.classes.is_empty() {
        return Err(CliError::Validation(format!(
            "no bias-prone set passed threshold {}",
            a.threshold
        )));
    }
    let mut text = ext.kb.to_json();
    text.push('\n');
    write_text(&a.out, &text)?;
    if let Some(path) = &a.emb_csv {
        let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        emb.write_csv(&data.train.vocab, BufWriter::new(f))?;
    }
    for c in &ext.kb.classes {
        info!("{}: {}", c.class, c.members.join(", "));
    }
    Ok(())
}

fn load_kb(path: &Path) -> Result<KnowledgeBase, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    KnowledgeBase::from_json(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn load_ckpt(path: &Path) -> Result<ModelParams<f64>, CliError> {
    ModelParams::<f64>::load(path).map_err(|e| with_path(path, e.into()))
}

fn load_data(dir: &Path) -> Result<datagen::GeneratedData, CliError> {
    datagen::load_dataset_dir(dir).map_err(|e| with_path(dir, e.into()))
}

fn with_path(path: &Path, e: CliError) -> CliError {
    match e {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
    }
}

fn split(data: &datagen::GeneratedData, s: Split) -> &Dataset {
    match s {
        Split::Train => &data.train,
        Split::Test => &data.test,
    }
}

fn check_dims(params: &ModelParams<f64>, ds: &Dataset) -> Result<(), CliError> {
    let d = params.dims;
    let cfg = ds.config();
    if d.vocab != ds.vocab.len() || d.context != cfg.context_dim || d.evidence != cfg.evidence_dim {
        return Err(CliError::Validation(format!(
            "checkpoint dims {d:?} do not match the dataset (vocabulary {}, context {}, evidence {})",
            ds.vocab.len(),
            cfg.context_dim,
            cfg.evidence_dim
        )));
    }
    Ok(())
}

/// `model.json` + step 100 → `model.step100.json`.
pub fn step_checkpoint_path(out: &Path, step: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.step{step}.{}", ext.to_string_lossy()),
        None => format!("{stem}.step{step}"),
    };
    out.with_file_name(name)
}

pub fn resolve_train_config(a: &TrainArgs, m: &ArgMatches) -> Result<TrainConfig, CliError> {
    let from_file = a.config.is_some();
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    apply(m, "lr", from_file, &mut cfg.learning_rate, &a.lr);
    apply(m, "epochs", from_file, &mut cfg.epochs, &a.epochs);
    apply(
        m,
        "batch_size",
        from_file,
        &mut cfg.batch_size,
        &a.batch_size,
    );
    apply(m, "hidden", from_file, &mut cfg.hidden, &a.hidden);
    apply(m, "seed", from_file, &mut cfg.seed, &a.seed);
    apply(m, "alpha", from_file, &mut cfg.hp.alpha, &a.alpha);
    apply(m, "beta", from_file, &mut cfg.hp.beta, &a.beta);
    apply(m, "mu", from_file, &mut cfg.hp.mu, &a.mu);
    apply(m, "epsilon", from_file, &mut cfg.hp.epsilon, &a.epsilon);
    apply(
        m,
        "ce_scope",
        from_file,
        &mut cfg.hp.ce_scope,
        &a.ce_scope.into(),
    );
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs, m: &ArgMatches) -> Result<(), CliError> {
    let mut outs: Vec<&Path> = vec![&a.out];
    if let Some(log) = &a.metrics_log {
        outs.push(log);
    }
    let mut ins: Vec<&Path> = vec![&a.data, &a.kb];
    ins.extend(a.config.as_deref());
    distinct(&outs, &ins)?;
    if a.checkpoint_every == Some(0) {
        return Err(CliError::Validation(
            "--checkpoint-every must be at least 1".into(),
        ));
    }
    let cfg = resolve_train_config(a, m)?;
    let data = load_data(&a.data)?;
    let kb = load_kb(&a.kb)?;
    info!(
        "training on {} scenes: lr {}, batch {}, epochs {}, alpha {}, beta {}, mu {}",
        data.train.len(),
        cfg.learning_rate,
        cfg.batch_size,
        cfg.epochs,
        cfg.hp.alpha,
        cfg.hp.beta,
        cfg.hp.mu
    );

    let mut save_err = None;
    let mut observer =
        |step: usize, p: &ModelParams<f64>, _: &nesycap::losses::LossBreakdown<f64>| {
            if let Some(every) = a.checkpoint_every {
                if step.is_multiple_of(every) && save_err.is_none() {
                    if let Err(e) = p.save(&step_checkpoint_path(&a.out, step)) {
                        save_err = Some(e);
                    }
                }
            }
        };
    let result = train::train_observed::<f64, _>(&cfg, &data.train, &kb, &mut observer);
    if let Some(e) = save_err {
        return Err(e.into());
    }
    let (params, history) = match result {
        Ok(r) => r,
        Err(TrainError::DivergenceDetected {
            step,
            total,
            last_finite,
        }) => {
            let path = a.out.with_extension("diverged.json");
            last_finite.save(&path)?;
            return Err(CliError::Runtime(format!(
                "training diverged at step {step} (total loss {total}); last finite parameters saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    params.save(&a.out)?;
    if let Some(path) = &a.metrics_log {
        let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(f);
        train::write_history_csv(&history, &mut w)?;
        w.flush().map_err(|e| io_err(path, e))?;
    }
    if let Some(last) = history.last() {
        info!(
            "{} steps; final loss {:.6} (ce {:.6}, confusion {:.6}, confidence {:.6})",
            history.len(),
            last.total,
            last.ce,
            last.confusion,
            last.confidence
        );
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<(), CliError> {
    distinct(&[&a.out], &[&a.ckpt, &a.data, &a.kb])?;
    let params = load_ckpt(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let kb = load_kb(&a.kb)?;
    let ds = split(&data, a.split);
    check_dims(&params, ds)?;
    let metrics = train::evaluate(&params, ds, &kb)?;
    let mut text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    text.push('\n');
    write_text(&a.out, &text)?;
    info!(
        "subclass accuracy {:.4}, caption token accuracy {:.4}, masked mean confusion {:.4}",
        metrics.subclass_accuracy, metrics.caption_token_accuracy, metrics.masked_mean_confusion
    );
    Ok(())
}

fn explain_cmd(a: &ExplainArgs) -> Result<(), CliError> {
    let params = load_ckpt(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let kb = load_kb(&a.kb)?;
    let ds = if data.test.scene(a.scene_id).is_some() {
        &data.test
    } else {
        &data.train
    };
    check_dims(&params, ds)?;
    let e = reasoner::explain_by_id(&params, ds, &kb, a.scene_id, a.theta)?;
    let json = serde_json::to_string_pretty(&e).expect("explanation serializes");
    let mut out = std::io::stdout().lock();
    writeln!(out, "{json}").map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn audit_cmd(a: &AuditArgs) -> Result<(), CliError> {
    distinct(&[&a.out], &[&a.ckpt, &a.data, &a.kb])?;
    let params = load_ckpt(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let kb = load_kb(&a.kb)?;
    let ds = split(&data, a.split);
    check_dims(&params, ds)?;
    let report = reasoner::bias_audit(&params, ds, &kb, a.theta)?;
    let mut text = report.to_json();
    text.push('\n');
    write_text(&a.out, &text)?;
    let mut out = std::io::stdout().lock();
    write!(out, "{}", report.summary()).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}
