//! `accent-ge2e` command line: `synth`, `train`, `eval` and `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Every command writes a `run_manifest.json` into its output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checks::run_suite;
use crate::evaluation::{emit_report, evaluate_experiment, format_table, EvalError, Method};
use crate::experiment::ModelPreset;
use crate::features::{
    dataset_digest, generate_synthetic, read_dataset, split_by_speaker, write_dataset, FeatureError, SplitSpec,
    SyntheticConfig, UtteranceRecord,
};
use crate::losses::CentroidMode;
use crate::network::{load_checkpoint, save_checkpoint, CheckpointError, Model, ModelConfig, NetworkError};
use crate::numerics::GradCheckConfig;
use crate::training::{
    train_ce_with_observer, train_ge2e_with_observer, StepRecord, TrainConfig, TrainError, TrainObserver,
};

/// Directory under which runs without `--out` are created.
pub const RUN_ROOT_ENV: &str = "ACCENT_GE2E_RUN_ROOT";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const RUN_CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "accent-ge2e", version, about = "GE2E accent classification toolkit")]
pub struct Cli {
    /// Root for run directories of commands given no --out.
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic accent corpus in the portable feature format.
    Synth(SynthArgs),
    /// Train a CE, GE2E or adversarial GE2E accent model.
    Train(TrainArgs),
    /// Score a checkpoint on train and test splits and write reports.
    Eval(EvalArgs),
    /// Run the finite-difference gradient-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 6)]
    pub speakers_per_class: usize,
    /// Utterances per speaker.
    #[arg(long, default_value_t = 20)]
    pub utts: usize,
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub dims: usize,
    #[arg(long, default_value_t = 2.0)]
    pub accent_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    pub speaker_sep: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum MethodArg {
    Ce,
    Ge2e,
    #[value(name = "ge2e-a")]
    Ge2eA,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ce => Method::CeAc,
            MethodArg::Ge2e => Method::Ge2eAc,
            MethodArg::Ge2eA => Method::Ge2eAcA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum CentroidArg {
    LeaveOneOut,
    Literal,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Speakers per accent held out as the test split (0 keeps everything
    /// for training).
    #[arg(long, default_value_t = 0)]
    pub test_speakers: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl SplitArgs {
    fn spec(&self) -> SplitSpec {
        SplitSpec { test_speakers_per_class: self.test_speakers, seed: self.split_seed }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// CE minibatch size.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Utterances per class in a GE2E episode.
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lambda_sc: f64,
    /// Global gradient-norm ceiling [default: 1.0 for ce, 3.0 otherwise].
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModelPreset::Standard)]
    pub model: ModelPreset,
    /// JSON model configuration; overrides --model.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CentroidArg::LeaveOneOut)]
    pub centroid_mode: CentroidArg,
    /// Save a checkpoint every N epochs (0 disables).
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset the centroids are built from (the training split is taken
    /// from it with the same split flags as training).
    #[arg(long)]
    pub data: PathBuf,
    /// Separate test dataset; otherwise the held-out speakers of --data
    /// (or --data itself when no speakers are held out).
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Ge2e)]
    pub method: MethodArg,
    /// Feature label used in the report.
    #[arg(long, default_value = "features")]
    pub feature: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Finite-difference half-width.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::EmptyClass(_) => CliError::Data(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Network(_) | EvalError::ZeroNormCentroid { .. } | EvalError::ZeroNormQuery => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Config(m) => CliError::Usage(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

/// Provenance of a command's outputs.
#[derive(Debug, Serialize, serde::Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    /// SHA-256 over the input dataset, when there is one.
    pub dataset_digest: Option<String>,
    pub status: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

struct ManifestWriter {
    command: &'static str,
    args: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    started_at: String,
    dataset_digest: Option<String>,
}

impl ManifestWriter {
    fn new(command: &'static str, args: &[String], config: &impl Serialize, seed: u64) -> Self {
        Self {
            command,
            args: args.to_vec(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            started_at: now(),
            dataset_digest: None,
        }
    }

    fn write(&self, dir: &Path, status: &str) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: self.args.clone(),
            config_hash: config_hash(&self.config),
            config: self.config.clone(),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at.clone(),
            finished_at: now(),
            dataset_digest: self.dataset_digest.clone(),
            status: status.to_string(),
        };
        write_json(&dir.join(RUN_MANIFEST_FILE), &manifest)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn default_run_dir(root: &Path, prefix: &str) -> PathBuf {
    root.join(format!("{prefix}-{}", Utc::now().format("%Y%m%dT%H%M%S%.3fZ")))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> ! {
    std::process::exit(run(std::env::args_os()))
}

pub fn execute(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, argv),
        Command::Train(a) => cmd_train(a, &cli.run_root, argv).map(|_| ()),
        Command::Eval(a) => cmd_eval(a, &cli.run_root, argv).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

pub fn cmd_synth(args: &SynthArgs, argv: &[String]) -> Result<(), CliError> {
    let config = SyntheticConfig {
        classes: args.classes,
        speakers_per_class: args.speakers_per_class,
        utts_per_speaker: args.utts,
        frames: args.frames,
        dims: args.dims,
        accent_sep: args.accent_sep,
        speaker_sep: args.speaker_sep,
        noise: args.noise,
        seed: args.seed,
    };
    let mut manifest = ManifestWriter::new("synth", argv, &config, args.seed);
    let records = generate_synthetic(&config)?;
    write_dataset(&records, &args.out)?;
    manifest.dataset_digest = Some(dataset_digest(&args.out)?);
    manifest.write(&args.out, "ok")?;
    println!(
        "wrote {} utterances ({} accents x {} speakers x {} utterances, {}x{} features) to {}",
        records.len(),
        config.classes,
        config.speakers_per_class,
        config.utts_per_speaker,
        config.frames,
        config.dims,
        args.out.display()
    );
    Ok(())
}

/// Reads a dataset and splits off held-out speakers.
fn load_split(data: &Path, split: &SplitArgs) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>, crate::features::DatasetSummary), CliError> {
    let (records, summary) = read_dataset(data)?;
    let (train, test) = split_by_speaker(&records, split.spec())?;
    Ok((train, test, summary))
}

#[derive(Debug, Serialize)]
struct TrainRunConfig<'a> {
    method: &'a str,
    data: &'a Path,
    split: SplitSpec,
    train: &'a TrainConfig,
    model: &'a ModelConfig,
    checkpoint_every: usize,
}

struct RunLogger {
    dir: PathBuf,
    log: csv::Writer<fs::File>,
    checkpoint_every: usize,
    error: Option<String>,
}

impl TrainObserver for RunLogger {
    fn on_step(&mut self, record: &StepRecord) {
        if self.error.is_none() {
            if let Err(e) = self.log.serialize(record) {
                self.error = Some(e.to_string());
            }
        }
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &Model) -> Result<(), TrainError> {
        self.log.flush().map_err(|e| TrainError::Observer(e.to_string()))?;
        if let Some(e) = self.error.take() {
            return Err(TrainError::Observer(e));
        }
        if self.checkpoint_every > 0 && epoch.is_multiple_of(self.checkpoint_every) {
            let path = self.dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"));
            save_checkpoint(model, &path).map_err(|e| TrainError::Observer(e.to_string()))?;
        }
        Ok(())
    }
}

fn model_config_for(args: &TrainArgs, summary: &crate::features::DatasetSummary, dims: usize) -> Result<ModelConfig, CliError> {
    let (classes, speakers) = (summary.num_accents, summary.num_speakers);
    let config = match &args.model_config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => args.model.config(dims, classes, speakers),
    };
    let config: ModelConfig = config;
    if config.num_accents != classes || config.num_speakers != speakers || config.input_dim != dims {
        return Err(CliError::Data(format!(
            "model expects C={}, S={}, F={} but the dataset has C={classes}, S={speakers}, F={dims}",
            config.num_accents, config.num_speakers, config.input_dim
        )));
    }
    config.validate()?;
    Ok(config)
}

/// Trains and returns the run directory.
pub fn cmd_train(args: &TrainArgs, run_root: &Path, argv: &[String]) -> Result<PathBuf, CliError> {
    let method = Method::from(args.method);
    let (train, _, summary) = load_split(&args.data, &args.split)?;
    let dims = train.first().map(|r| r.features.dims()).ok_or_else(|| CliError::Data("empty training split".into()))?;
    let model_config = model_config_for(args, &summary, dims)?;
    let default_clip = if method == Method::CeAc { 1.0 } else { 3.0 };
    let clip = args.clip.unwrap_or(default_clip);
    let config = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size_ce: args.batch,
        utterances_per_class: args.m,
        lambda_sc: args.lambda_sc,
        clip_ce: clip,
        clip_ge2e: clip,
        seed: args.seed,
        centroid_mode: match args.centroid_mode {
            CentroidArg::LeaveOneOut => CentroidMode::LeaveOneOut,
            CentroidArg::Literal => CentroidMode::Literal,
        },
        ..TrainConfig::default()
    };
    config.validate()?;

    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(run_root, "train"));
    create_dir(&dir)?;
    let run_config = TrainRunConfig {
        method: method.label(),
        data: &args.data,
        split: args.split.spec(),
        train: &config,
        model: &model_config,
        checkpoint_every: args.checkpoint_every,
    };
    write_json(&dir.join(RUN_CONFIG_FILE), &run_config)?;
    let mut manifest = ManifestWriter::new("train", argv, &run_config, args.seed);
    manifest.dataset_digest = Some(dataset_digest(&args.data)?);

    let mut model = Model::new(model_config, args.seed)?;
    let log_path = dir.join(LOSS_LOG_FILE);
    let log = csv::Writer::from_path(&log_path).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    let mut logger = RunLogger { dir: dir.clone(), log, checkpoint_every: args.checkpoint_every, error: None };
    if args.epochs == 0 {
        logger.log.write_record(["step", "epoch", "loss", "grad_norm", "post_clip_norm"]).map_err(|e| CliError::Data(e.to_string()))?;
        logger.log.flush().map_err(|e| CliError::Data(e.to_string()))?;
    }

    let result = match method {
        Method::CeAc => train_ce_with_observer(&train, &mut model, &config, &mut logger),
        Method::Ge2eAc => train_ge2e_with_observer(&train, &mut model, &config, false, &mut logger),
        Method::Ge2eAcA => train_ge2e_with_observer(&train, &mut model, &config, true, &mut logger),
    };
    let _ = logger.log.flush();
    match result {
        Ok(history) => {
            save_checkpoint(&model, &dir.join(MODEL_FILE))?;
            manifest.write(&dir, "ok")?;
            match history.steps.last() {
                Some(last) => println!(
                    "{}: {} steps over {} epochs, final loss {:.6}; run directory {}",
                    method.label(),
                    history.steps.len(),
                    args.epochs,
                    last.loss,
                    dir.display()
                ),
                None => println!("{}: no steps taken; initial model saved to {}", method.label(), dir.display()),
            }
            Ok(dir)
        }
        Err(e) => {
            save_checkpoint(&model, &dir.join(LAST_GOOD_FILE))?;
            manifest.write(&dir, &format!("failed: {e}"))?;
            Err(e.into())
        }
    }
}

/// Evaluates and returns the report directory.
pub fn cmd_eval(args: &EvalArgs, run_root: &Path, argv: &[String]) -> Result<PathBuf, CliError> {
    let method = Method::from(args.method);
    let model = load_checkpoint(&args.checkpoint)?;
    let (train, held_out, summary) = load_split(&args.data, &args.split)?;
    let test = match &args.test_data {
        Some(dir) => read_dataset(dir)?.0,
        None if args.split.test_speakers > 0 => held_out,
        None => train.clone(),
    };
    if model.config.num_accents != summary.num_accents {
        return Err(CliError::Data(format!(
            "checkpoint has C={} but the dataset has C={}",
            model.config.num_accents, summary.num_accents
        )));
    }
    if let Some(r) = train.iter().chain(&test).find(|r| r.features.dims() != model.config.input_dim) {
        return Err(CliError::Data(format!(
            "utterance {} has F={} but the checkpoint expects F={}",
            r.id,
            r.features.dims(),
            model.config.input_dim
        )));
    }

    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(run_root, "eval"));
    create_dir(&dir)?;
    let mut manifest = ManifestWriter::new("eval", argv, args, 0);
    manifest.dataset_digest = Some(dataset_digest(&args.data)?);
    let result = evaluate_experiment(method, &args.feature, &model, &train, &test, summary.names.class_names.clone())?;
    emit_report(std::slice::from_ref(&result), &dir)?;
    manifest.write(&dir, "ok")?;
    print!("{}", format_table(std::slice::from_ref(&result)));
    println!(
        "train accuracy {:.1}% ({} utterances), test accuracy {:.1}% ({} utterances); reports in {}",
        100.0 * result.train.accuracy,
        result.train.n_samples(),
        100.0 * result.test.accuracy,
        result.test.n_samples(),
        dir.display()
    );
    Ok(dir)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    if !(args.tol > 0.0 && args.eps > 0.0) {
        return Err(CliError::Usage("--tol and --eps must be positive".into()));
    }
    let config = GradCheckConfig::new(args.eps, args.tol);
    let checks = run_suite(args.seed, &config).map_err(|e| CliError::Numeric(e.to_string()))?;
    for c in &checks {
        println!(
            "{:<24} {}  max relative error {:.3e}",
            c.name,
            if c.report.passed { "pass" } else { "FAIL" },
            c.report.max_relative_error
        );
    }
    let worst = checks
        .iter()
        .filter(|c| !c.report.passed)
        .max_by(|a, b| a.report.max_relative_error.total_cmp(&b.report.max_relative_error));
    match worst {
        None => {
            println!("all {} checks passed (seed {}, tol {:e})", checks.len(), args.seed, args.tol);
            Ok(())
        }
        Some(c) => {
            let entry = c.report.worst().map(|p| format!(" (parameter {}, entry {})", p.index, p.worst_entry));
            Err(CliError::Numeric(format!(
                "{} of {} checks failed; worst offender {} with relative error {:.3e}{}",
                checks.iter().filter(|c| !c.report.passed).count(),
                checks.len(),
                c.name,
                c.report.max_relative_error,
                entry.unwrap_or_default()
            )))
        }
    }
}
