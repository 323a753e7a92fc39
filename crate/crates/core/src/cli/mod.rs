//! The `latent-rul` command line.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{preset, DataFiles, DatasetId, PartialConfig, Preset, RunConfig, DEFAULT_K};

use crate::error::{Error, Result};
use crate::ingest::{attach_truth_rul, fit_minmax, read_cmapss_file, write_json, WindowedDataset};
use crate::metrics::EvaluationReport;
use crate::model::{EpochLog, Model};
use crate::pipeline;
use crate::similarity::PriorLibrary;
use crate::synth::{self, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "latent-rul", version, about = "RUL prediction from latent Markov priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw C-MAPSS files, fit normalization, write windowed datasets.
    Preprocess(RunArgs),
    /// Train the encoder/quantizer/decoder on preprocessed training windows.
    Train(RunArgs),
    /// Compute a prior for every training window and store the library.
    BuildLibrary(RunArgs),
    /// Predict the RUL of every test unit from its final-window prior.
    Predict(RunArgs),
    /// Score predictions against ground truth.
    Evaluate(RunArgs),
    /// Preprocess, train, build the library, predict and evaluate.
    Run(RunArgs),
    /// Generate a synthetic run-to-failure fleet in C-MAPSS format.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// C-MAPSS subset; selects the preset and the default file names.
    #[arg(long)]
    pub dataset: Option<DatasetId>,
    /// Directory holding train_FD00x.txt, test_FD00x.txt and RUL_FD00x.txt.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_file: Option<PathBuf>,
    #[arg(long)]
    pub test_file: Option<PathBuf>,
    #[arg(long)]
    pub rul_file: Option<PathBuf>,
    /// JSON file with any run settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Window length T.
    #[arg(long)]
    pub window: Option<usize>,
    /// Codebook size N_e.
    #[arg(long)]
    pub codebook: Option<usize>,
    /// EMA smoothing factor.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Transition-matrix regularization weight.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Number of nearest library entries averaged per prediction.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Model file (default: <out>/model.json).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Library file (default: <out>/library.json).
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Predictions CSV to evaluate (default: <out>/predictions.csv).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Also emit a prediction for every test window.
    #[arg(long)]
    pub intermediate_predictions: bool,
    /// Suppress per-epoch progress output.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "synthetic")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub train_units: usize,
    #[arg(long, default_value_t = 10)]
    pub test_units: usize,
    #[arg(long, default_value_t = 80)]
    pub min_life: u32,
    #[arg(long, default_value_t = 150)]
    pub max_life: u32,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// File name tag: train_<tag>.txt, test_<tag>.txt, RUL_<tag>.txt.
    #[arg(long, default_value = "SYN")]
    pub tag: String,
}

impl RunArgs {
    fn flag_overrides(&self) -> PartialConfig {
        PartialConfig {
            dataset: self.dataset,
            data_dir: self.data_dir.clone(),
            train_file: self.train_file.clone(),
            test_file: self.test_file.clone(),
            rul_file: self.rul_file.clone(),
            out: self.out.clone(),
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch,
            window_length: self.window,
            codebook_size: self.codebook,
            lambda: self.lambda,
            epsilon: self.epsilon,
            k: self.k,
            learning_rate: self.learning_rate,
            ..PartialConfig::default()
        }
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => PartialConfig::load(path)?,
            None => PartialConfig::default(),
        };
        RunConfig::resolve(base.overlay(self.flag_overrides()))
    }
}

/// Standard artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub out: PathBuf,
}

impl Artifacts {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }
    pub fn train_windows(&self) -> PathBuf {
        self.out.join("train_windows.json")
    }
    pub fn test_windows(&self) -> PathBuf {
        self.out.join("test_windows.json")
    }
    pub fn model(&self) -> PathBuf {
        self.out.join("model.json")
    }
    pub fn training_log(&self) -> PathBuf {
        self.out.join("training_log.csv")
    }
    pub fn library(&self) -> PathBuf {
        self.out.join("library.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.out.join("predictions.csv")
    }
    pub fn trajectories(&self) -> PathBuf {
        self.out.join("trajectories.csv")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.out.join("report.csv")
    }
    pub fn report_json(&self) -> PathBuf {
        self.out.join("report.json")
    }
    pub fn plot_table(&self) -> PathBuf {
        self.out.join("predictions_by_truth.csv")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_file(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let path = path.ok_or_else(|| Error::Usage(format!("no {what} given; use --dataset or --{what}")))?;
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        ));
    }
    Ok(path.clone())
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.out);
    ensure_dir(&cfg.out)?;
    let train_path = require_file(cfg.files.train.as_ref(), "train-file")?;
    let train = read_cmapss_file(&train_path)?;
    let stats = fit_minmax(&train, &cfg.feature_spec)?;
    let (t, cap) = (cfg.model.window_length, cfg.model.rul_cap);
    let train_ds = WindowedDataset::build(&train, t, &cfg.feature_spec, &stats, cap)?;
    train_ds.save(&art.train_windows())?;
    println!(
        "train: {} units, {} windows -> {}",
        train_ds.units.len(),
        train_ds.windows.len(),
        art.train_windows().display()
    );

    if let Some(test_path) = &cfg.files.test {
        let test_path = require_file(Some(test_path), "test-file")?;
        let rul_path = require_file(cfg.files.rul.as_ref(), "rul-file")?;
        let rul_text = std::fs::read_to_string(&rul_path).map_err(|e| Error::io(&rul_path, e))?;
        let test = attach_truth_rul(read_cmapss_file(&test_path)?, &rul_text)?;
        let test_ds = WindowedDataset::build(&test, t, &cfg.feature_spec, &stats, cap)?;
        test_ds.save(&art.test_windows())?;
        println!(
            "test: {} units, {} windows -> {}",
            test_ds.units.len(),
            test_ds.windows.len(),
            art.test_windows().display()
        );
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, args: &RunArgs) -> Result<Model> {
    let art = Artifacts::new(&cfg.out);
    let data = WindowedDataset::load(&art.train_windows())?;
    data.validate()?;
    if data.window_length != cfg.model.window_length {
        return Err(crate::error::validation(format!(
            "training windows have length {}, configuration asks for {}; rerun preprocess",
            data.window_length, cfg.model.window_length
        )));
    }
    if data.feature_spec != cfg.feature_spec {
        return Err(crate::error::validation(
            "training windows use a different feature selection; rerun preprocess",
        ));
    }
    let mut model = Model::init(cfg.model.clone(), data.feature_spec.clone(), data.stats.clone())?;
    let quiet = args.quiet;
    let epochs = cfg.model.epochs;
    model.fit(&data.windows, |log: &EpochLog| {
        if !quiet {
            eprintln!(
                "epoch {}/{epochs}: loss {:.6} (task {:.6}, codebook {:.6}, commitment {:.6}), {} codes",
                log.epoch, log.total, log.task, log.codebook, log.commitment, log.codes_used
            );
        }
    })?;
    let model_path = args.model.clone().unwrap_or_else(|| art.model());
    model.save(&model_path)?;
    let mut csv = String::from(EpochLog::CSV_HEADER);
    csv.push('\n');
    for log in &model.training_log {
        csv.push_str(&log.csv_row());
        csv.push('\n');
    }
    write_text(&art.training_log(), &csv)?;
    println!(
        "model: {} parameters, {} epochs -> {}",
        model.params().parameter_count(),
        epochs,
        model_path.display()
    );
    Ok(model)
}

fn load_model_for(cfg: &RunConfig, args: &RunArgs) -> Result<Model> {
    let art = Artifacts::new(&cfg.out);
    let model = Model::load(&args.model.clone().unwrap_or_else(|| art.model()))?;
    if model.config.codebook_size != cfg.model.codebook_size {
        return Err(crate::error::validation(format!(
            "model codebook has {} entries, configuration asks for {}",
            model.config.codebook_size, cfg.model.codebook_size
        )));
    }
    if model.config.window_length != cfg.model.window_length {
        return Err(crate::error::validation(format!(
            "model uses windows of length {}, configuration asks for {}",
            model.config.window_length, cfg.model.window_length
        )));
    }
    Ok(model)
}

pub fn cmd_build_library(cfg: &RunConfig, args: &RunArgs) -> Result<PriorLibrary> {
    let art = Artifacts::new(&cfg.out);
    let model = load_model_for(cfg, args)?;
    let data = WindowedDataset::load(&art.train_windows())?;
    let library = pipeline::build_library(&model, &data, cfg.prior)?;
    let path = args.library.clone().unwrap_or_else(|| art.library());
    library.save(&path)?;
    println!("library: {} entries -> {}", library.len(), path.display());
    Ok(library)
}

pub fn cmd_predict(cfg: &RunConfig, args: &RunArgs) -> Result<Vec<pipeline::UnitPrediction>> {
    let art = Artifacts::new(&cfg.out);
    let model = load_model_for(cfg, args)?;
    let library = PriorLibrary::load(&args.library.clone().unwrap_or_else(|| art.library()))?;
    let test = WindowedDataset::load(&art.test_windows())?;
    let preds = pipeline::predict(&model, &library, &test, cfg.prior, cfg.k, args.intermediate_predictions)?;
    let path = args.predictions.clone().unwrap_or_else(|| art.predictions());
    write_text(&path, &pipeline::predictions_csv(&preds))?;
    if args.intermediate_predictions {
        write_text(&art.trajectories(), &pipeline::trajectories_csv(&preds))?;
    }
    println!("predictions: {} units -> {}", preds.len(), path.display());
    Ok(preds)
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &RunArgs) -> Result<EvaluationReport> {
    let art = Artifacts::new(&cfg.out);
    let path = args.predictions.clone().unwrap_or_else(|| art.predictions());
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let preds = pipeline::parse_predictions_csv(&text)?;
    let test = WindowedDataset::load(&art.test_windows())?;
    let report = EvaluationReport::from_pairs(&preds, &pipeline::truths(&test)?)?;
    write_text(&art.report_csv(), &report.to_csv())?;
    write_json(&art.report_json(), &report)?;
    write_text(&art.plot_table(), &report.plot_table_csv())?;
    println!("RMSE {:.4}  Score {:.4}  ({} units)", report.rmse, report.score, report.n_test);
    Ok(report)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        train_units: args.train_units,
        test_units: args.test_units,
        min_life: args.min_life,
        max_life: args.max_life,
        noise: args.noise,
        seed: args.seed,
    };
    let files = synth::generate(&cfg)?.write(&args.out, &args.tag)?;
    println!(
        "wrote {}, {}, {}",
        files.train.display(),
        files.test.display(),
        files.rul.display()
    );
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(&a.resolve()?),
        Command::Train(a) => cmd_train(&a.resolve()?, a).map(drop),
        Command::BuildLibrary(a) => cmd_build_library(&a.resolve()?, a).map(drop),
        Command::Predict(a) => cmd_predict(&a.resolve()?, a).map(drop),
        Command::Evaluate(a) => cmd_evaluate(&a.resolve()?, a).map(drop),
        Command::Run(a) => {
            let cfg = a.resolve()?;
            cmd_preprocess(&cfg)?;
            cmd_train(&cfg, a)?;
            cmd_build_library(&cfg, a)?;
            cmd_predict(&cfg, a)?;
            if cfg.files.test.is_some() {
                cmd_evaluate(&cfg, a)?;
            }
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 usage or configuration error, 2 validation error,
/// 3 numeric failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
