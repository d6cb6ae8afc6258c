//! `morf` command line: `gen-data`, `train`, `eval`, `predict`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

pub mod archive;

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::backbone::Activation;
use crate::data::{load_csv, read_features_csv, save_csv, synthesize, Standardizer, SynthConfig};
use crate::error::{MorfError, Result};
use crate::evaluate::{evaluate, predict_rows};
use crate::meta::{Method, ModelConfig, TrainConfig, TrainData, Trainer};
use crate::metrics::RankMode;
use crate::params::OptimizerKind;

use archive::{config_hash, ModelArchive, TrainMetadata};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(err: &MorfError) -> i32 {
    match err {
        MorfError::Config(_) => EXIT_USAGE,
        MorfError::InputShape { .. }
        | MorfError::InvalidInput(_)
        | MorfError::Parse { .. }
        | MorfError::Schema(_)
        | MorfError::Io(_) => EXIT_DATA,
        MorfError::Numeric(_) | MorfError::InvalidState(_) => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "morf",
    version,
    about = "Ordinal regression forests with meta-learned tree weights"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic ordinal dataset as CSV
    GenData(GenDataArgs),
    /// Train a MORF or DORF model
    Train(TrainArgs),
    /// Score a model on a labelled CSV
    Eval(EvalArgs),
    /// Per-row predictions for a feature CSV
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Standard deviation of the latent noise
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log path (defaults to `<out>.log`)
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// TOML file with `[model]` and `[train]` tables; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub meta_lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the report to this file
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Use decoded classes instead of expected ranks for the tree spread
    #[arg(long)]
    pub decoded_variance: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write predictions here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Option<Method>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl std::str::FromStr for RunConfig {
    type Err = MorfError;

    fn from_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| MorfError::Config(format!("bad config file: {e}")))
    }
}

impl TrainArgs {
    /// Flags over config file over built-in defaults.
    pub fn resolve(&self) -> Result<(Method, ModelConfig, TrainConfig)> {
        let base: RunConfig = match &self.config {
            Some(path) => std::fs::read_to_string(path)?.parse()?,
            None => RunConfig::default(),
        };
        let mut model = base.model;
        let mut train = base.train;
        let method = self.method.or(base.method).unwrap_or(Method::Morf);
        if let Some(v) = self.trees {
            model.trees = v;
        }
        if let Some(v) = self.depth {
            model.depth = v;
        }
        if let Some(v) = self.feature_dim {
            model.feature_dim = v;
        }
        if let Some(v) = &self.hidden {
            model.hidden_dims = v.clone();
        }
        if let Some(v) = self.activation {
            model.activation = v;
        }
        if let Some(v) = self.epochs {
            train.epochs = v;
        }
        if let Some(v) = self.lr {
            train.learning_rate = v;
        }
        if let Some(v) = self.meta_lr {
            train.meta_lr = v;
        }
        if let Some(v) = self.batch {
            train.batch_size = v;
        }
        if let Some(v) = self.weight_decay {
            train.weight_decay = v;
        }
        if let Some(v) = self.optimizer {
            train.optimizer = v;
        }
        if let Some(v) = self.seed {
            train.seed = v;
        }
        train.validate()?;
        Ok((method, model, train))
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(stdout, "{}", e.render());
            return EXIT_OK;
        }
    };
    match execute(&cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args, stdout),
        Command::Train(args) => train(args, stdout),
        Command::Eval(args) => eval(args, stdout),
        Command::Predict(args) => predict(args, stdout),
    }
}

fn gen_data(args: &GenDataArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut config = SynthConfig::new(args.n, args.dim, args.noise, args.seed);
    config.classes = args.classes;
    let dataset = synthesize(&config)?;
    save_csv(&dataset, &args.out)?;
    writeln!(
        stdout,
        "wrote {} rows to {}",
        dataset.len(),
        args.out.display()
    )?;
    for (c, count) in dataset.class_histogram().iter().enumerate() {
        writeln!(
            stdout,
            "r{}\t{}\t{:.4}",
            c + 1,
            count,
            *count as f64 / dataset.len() as f64
        )?;
    }
    Ok(())
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log");
    PathBuf::from(name)
}

fn train(args: &TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let (method, model_config, train_config) = args.resolve()?;
    let raw = load_csv(&args.data, args.classes)?;
    let normalizer = Standardizer::fit(&raw)?;
    let dataset = normalizer.transform(&raw)?;
    writeln!(
        stdout,
        "method={method} lr={} batch={} weight_decay={} epochs={} trees={} depth={} seed={}",
        train_config.learning_rate,
        train_config.batch_size,
        train_config.weight_decay,
        train_config.epochs,
        model_config.trees,
        model_config.depth,
        train_config.seed
    )?;

    let data = TrainData::from_dataset(&dataset)?;
    let trainer = Trainer::new(
        method,
        &model_config,
        &train_config,
        data.input_dim(),
        data.classes,
    )?;
    let mut header = vec![format!("data = {:?}", args.data.display().to_string())];
    header.extend(
        toml::to_string(&model_config)
            .unwrap_or_default()
            .lines()
            .map(|l| format!("model.{l}")),
    );
    let (state, mut log) = trainer.fit(&data)?;
    header.append(&mut log.header);
    log.header = header;

    let metadata = TrainMetadata {
        method,
        seed: train_config.seed,
        epochs: state.epoch,
        config_hash: config_hash(&model_config, &train_config),
        model: model_config,
        train: train_config,
    };
    let weight_net = (method == Method::Morf).then_some(&state.weight_net);
    let archive = ModelArchive::from_model(&state.model, &normalizer, weight_net, metadata);
    archive.save(&args.out)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| default_log_path(&args.out));
    std::fs::write(&log_path, log.to_text())?;

    if let Some(last) = log.records.last() {
        writeln!(
            stdout,
            "epochs={} iterations={} final_train_loss={:.6} final_tree_variance={:.6}",
            state.epoch, state.iteration, last.train_loss, last.tree_variance
        )?;
    }
    writeln!(stdout, "saved model to {}", args.out.display())?;
    writeln!(stdout, "saved log to {}", log_path.display())?;
    Ok(())
}

fn load_for_inference(model: &Path) -> Result<(ModelArchive, crate::forest::ForestModel)> {
    let archive = ModelArchive::load(model)?;
    let forest = archive.to_model()?;
    Ok((archive, forest))
}

fn check_width(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(MorfError::Schema(format!(
            "model expects {expected} input features but the data has {got}"
        )));
    }
    Ok(())
}

fn eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let (archive, model) = load_for_inference(&args.model)?;
    let raw = load_csv(&args.data, archive.classes)?;
    check_width(archive.normalizer.dim(), raw.input_dim())?;
    let dataset = archive.normalizer.transform(&raw)?;
    let mode = if args.decoded_variance {
        RankMode::Decoded
    } else {
        RankMode::Expected
    };
    let result = evaluate(&model, &dataset, mode)?;
    let mut text = result.report.to_table();
    let _ = writeln!(text, "samples\t{}", dataset.len());
    let _ = writeln!(text, "mean_tree_variance\t{:.6}", result.mean_tree_variance);
    write!(stdout, "{text}")?;
    if let Some(path) = &args.report {
        std::fs::write(path, &text)?;
    }
    Ok(())
}

fn predict(args: &PredictArgs, stdout: &mut dyn Write) -> Result<()> {
    let (archive, model) = load_for_inference(&args.model)?;
    let file = std::fs::File::open(&args.data)?;
    let rows = read_features_csv(file)?;
    check_width(archive.normalizer.dim(), rows[0].len())?;
    let rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| archive.normalizer.transform_row(r))
        .collect();
    let predictions = predict_rows(&model, &rows)?;
    let trees = model.trees.len();
    let mut text = String::from("row,class,expected_rank");
    for t in 0..trees {
        let _ = write!(text, ",tree_{t}");
    }
    text.push('\n');
    for (i, p) in predictions.iter().enumerate() {
        let _ = write!(text, "{i},{},{:?}", p.class.rank(), p.expected_rank);
        for r in &p.tree_ranks {
            let _ = write!(text, ",{r:?}");
        }
        text.push('\n');
    }
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => write!(stdout, "{text}")?,
    }
    Ok(())
}
