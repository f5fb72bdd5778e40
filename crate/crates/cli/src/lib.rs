//! Subcommands of the `plasmo` binary, callable as plain functions.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure,
//! 4 corrupt or incompatible artifact.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use plasmo_core::data::{self, DatasetIndex, Label, Split, DEFAULT_FRACTIONS};
use plasmo_core::metrics::{classification_report, confusion_matrix, ClassificationReport};
use plasmo_core::train::{self, EpochRecord, PlateauConfig, TrainConfig, TrainHistory};
use plasmo_core::weights::{load_weights, save_weights, write_atomic};
use plasmo_core::xai::{self, Baseline, Explanation, LimeConfig, Method, Segmentation, ShapConfig};
use plasmo_core::{ArchitectureConfig, Error, Head, ModelGraph};

pub const WEIGHTS_FILE: &str = "weights.mcnn";
pub const HISTORY_FILE: &str = "history.csv";
pub const ARCHITECTURE_FILE: &str = "architecture.json";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::Diverged { .. } | Error::Singular { .. } => 3,
            Error::Corrupt(_) | Error::Incompatible(_) => 4,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Everything a run needs, read from a flat JSON object. Missing keys take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub fractions: [f64; 3],
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub head: Head,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_lr: f64,
    pub plateau_min_delta: f64,
    pub early_stop_accuracy: f64,
    pub segments: String,
    pub baseline: Baseline,
    pub lime_samples: usize,
    pub lime_kernel_width: f64,
    pub lime_ridge: f64,
    pub lime_top_k: usize,
    pub shap_samples: usize,
    pub shap_enumerate_below: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchitectureConfig::default();
        let train = TrainConfig::default();
        let lime = LimeConfig::default();
        let shap = ShapConfig::default();
        Self {
            seed: 0,
            data_root: None,
            index: None,
            fractions: DEFAULT_FRACTIONS,
            batch_size: train.batch_size,
            lr: train.lr,
            epochs: train.epochs,
            head: arch.head,
            bn_momentum: arch.bn_momentum,
            bn_epsilon: arch.bn_epsilon,
            plateau_factor: train.plateau.factor,
            plateau_patience: train.plateau.patience,
            plateau_min_lr: train.plateau.min_lr,
            plateau_min_delta: train.plateau.min_delta,
            early_stop_accuracy: train.early_stop_accuracy,
            segments: "grid:7".into(),
            baseline: Baseline::MeanColor,
            lime_samples: lime.n_samples,
            lime_kernel_width: lime.kernel_width,
            lime_ridge: lime.ridge,
            lime_top_k: xai::LIME_TOP_K,
            shap_samples: shap.n_samples,
            shap_enumerate_below: shap.enumerate_below,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn architecture(&self) -> ArchitectureConfig {
        ArchitectureConfig {
            head: self.head,
            bn_momentum: self.bn_momentum,
            bn_epsilon: self.bn_epsilon,
            ..Default::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            plateau: PlateauConfig {
                factor: self.plateau_factor,
                patience: self.plateau_patience,
                min_lr: self.plateau_min_lr,
                min_delta: self.plateau_min_delta,
            },
            early_stop_accuracy: self.early_stop_accuracy,
            ..Default::default()
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_png(path: &Path, img: &image::RgbImage) -> CliResult<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| usage(format!("cannot encode {}: {e}", path.display())))?;
    Ok(write_atomic(path, buf.get_ref())?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

// ---------------------------------------------------------------------------
// commands

/// Generates a synthetic dataset of `n` images per class.
pub fn cmd_synth(n: usize, seed: u64, out: &Path) -> CliResult<DatasetIndex> {
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    create_dir(out)?;
    Ok(data::generate_synthetic(n, seed, out)?)
}

/// Indexes `root`, assigns stratified splits and writes the index CSV.
pub fn cmd_prepare(root: &Path, seed: u64, fractions: [f64; 3], out: &Path) -> CliResult<DatasetIndex> {
    let root = root
        .canonicalize()
        .map_err(|e| usage(format!("dataset root {}: {e}", root.display())))?;
    let index = data::stratified_split(&data::index_dataset(&root)?, fractions, seed)?;
    let mut buf = Vec::new();
    index.write_csv(&mut buf)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_atomic(out, &buf)?;
    Ok(index)
}

pub struct TrainOutcome {
    pub model: ModelGraph,
    pub history: TrainHistory,
    pub weights: PathBuf,
}

/// Trains from the prepared index and writes weights, history and the
/// architecture into `out_dir`.
pub fn cmd_train(config: &RunConfig, out_dir: &Path, on_epoch: impl FnMut(&EpochRecord)) -> CliResult<TrainOutcome> {
    let index = match (&config.index, &config.data_root) {
        (Some(path), _) => {
            DatasetIndex::load_csv(path).map_err(|e| usage(format!("cannot load index {}: {e}", path.display())))?
        }
        // split on the fly with the configured fractions and seed
        (None, Some(root)) => {
            let raw = data::index_dataset(root).map_err(|e| usage(format!("cannot index {}: {e}", root.display())))?;
            data::stratified_split(&raw, config.fractions, config.seed)?
        }
        (None, None) => return Err(usage("no data given; pass --index from `prepare` or set \"index\" or \"data_root\"")),
    };
    let arch = config.architecture();
    let model = ModelGraph::new(arch.clone(), config.seed)?;
    create_dir(out_dir)?;
    let (model, history) = train::train_with(model, &index, &config.train_config(), on_epoch)?;
    let weights = out_dir.join(WEIGHTS_FILE);
    save_weights(&model, &weights)?;
    write_json(&out_dir.join(ARCHITECTURE_FILE), &arch)?;
    let mut csv = Vec::new();
    history.write_csv(&mut csv)?;
    write_atomic(&out_dir.join(HISTORY_FILE), &csv)?;
    Ok(TrainOutcome {
        model,
        history,
        weights,
    })
}

/// Architecture for a weight file: `arch` if given, else the
/// `architecture.json` beside the weights, else the default.
pub fn load_model(weights: &Path, arch: Option<&Path>) -> CliResult<ModelGraph> {
    let sibling = weights.with_file_name(ARCHITECTURE_FILE);
    let arch_path = arch.map(Path::to_path_buf).or_else(|| sibling.exists().then_some(sibling));
    let config: ArchitectureConfig = match arch_path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("bad architecture {}: {e}", p.display())))?
        }
        None => ArchitectureConfig::default(),
    };
    let mut model = ModelGraph::new(config, 0)?;
    if !weights.exists() {
        return Err(usage(format!("weight file {} not found", weights.display())));
    }
    load_weights(&mut model, weights)?;
    Ok(model)
}

/// Classification report of `model` on one split of the index.
pub fn cmd_evaluate(model: &ModelGraph, index: &DatasetIndex, split: Split, out: Option<&Path>) -> CliResult<ClassificationReport> {
    if index.count(split, None) == 0 {
        return Err(usage(format!("{split} split of the index is empty")));
    }
    let eval = train::evaluate(model, index, split, data::DEFAULT_BATCH_SIZE, train::DEFAULT_CLAMP)?;
    let report = classification_report(&confusion_matrix(&eval.y_true, &eval.y_pred)?)?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ExplainRequest {
    pub image: PathBuf,
    pub method: Method,
    pub seed: u64,
    pub segments: Segmentation,
    /// Target class; the predicted class if `None` (SHAP always does both).
    pub class: Option<usize>,
    pub out_dir: PathBuf,
}

/// Writes overlay PNGs and explanation JSON files; returns the paths.
pub fn cmd_explain(model: &ModelGraph, req: &ExplainRequest, config: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let image = data::load_and_preprocess(&req.image)?;
    let stem = req
        .image
        .file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    create_dir(&req.out_dir)?;
    let batch = image.reshape(&[1, data::IMAGE_SIZE, data::IMAGE_SIZE, data::CHANNELS])?;
    let predicted = train::predict_labels(&model.predict_proba(&batch, 1)?, model.head())[0];
    let class = match req.class {
        Some(c) => {
            Label::from_index(c).map_err(|_| usage(format!("--class must be 0 or 1, got {c}")))?;
            c
        }
        None => predicted.index(),
    };
    let mut written = Vec::new();
    let mut emit = |name: String, explanation: &Explanation, overlay: &image::RgbImage| -> CliResult<()> {
        let png = req.out_dir.join(format!("{name}.png"));
        let json = req.out_dir.join(format!("{name}.json"));
        write_png(&png, overlay)?;
        write_json(&json, explanation)?;
        written.push(png);
        written.push(json);
        Ok(())
    };
    match req.method {
        Method::Saliency => {
            let heat = xai::saliency_map(model, &image, class)?;
            let e = Explanation::from_saliency(&heat, class);
            emit(format!("{stem}_saliency"), &e, &xai::render_saliency(&image, &heat)?)?;
        }
        Method::Lime => {
            let segments = xai::segment_image(&image, &req.segments)?;
            let mut setfn = xai::make_set_function(model, &image, &segments, class, config.baseline)?;
            let lime = LimeConfig {
                n_samples: config.lime_samples,
                kernel_width: config.lime_kernel_width,
                ridge: config.lime_ridge,
                seed: req.seed,
            };
            let fit = xai::lime_explain(&mut setfn, &lime)?;
            let e = Explanation::from_lime(&fit, class, req.seed, &segments);
            let overlay = xai::render_lime(&image, &segments, &e.values, config.lime_top_k)?;
            emit(format!("{stem}_lime"), &e, &overlay)?;
        }
        Method::Shap => {
            let segments = xai::segment_image(&image, &req.segments)?;
            let shap = ShapConfig {
                enumerate_below: config.shap_enumerate_below,
                n_samples: config.shap_samples,
                seed: req.seed,
            };
            // two classes: the second set function reuses the first's model calls
            let mut setfn = xai::make_set_function(model, &image, &segments, 0, config.baseline)?;
            let values0 = xai::kernel_shap(&mut setfn, &shap)?;
            let mut other = setfn.map_values(|p| 1.0 - p);
            let values1 = xai::kernel_shap(&mut other, &shap)?;
            for (c, values) in [values0, values1].iter().enumerate() {
                let e = Explanation::from_shap(values, c, req.seed, &segments);
                let overlay = xai::render_shap(&image, &segments, &e.values)?;
                emit(format!("{stem}_shap_class{c}"), &e, &overlay)?;
            }
        }
    }
    Ok(written)
}

pub fn cmd_summary(head: Head) -> CliResult<String> {
    let config = ArchitectureConfig {
        head,
        ..Default::default()
    };
    Ok(ModelGraph::new(config, 0)?.summary())
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(name = "plasmo", version, about = "Malaria cell classifier: data prep, training, evaluation, explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index a dataset root and assign train/val/test splits
    Prepare {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "index.csv")]
        out: PathBuf,
        /// Train, validation and test fractions
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = DEFAULT_FRACTIONS)]
        fractions: Vec<f64>,
    },
    /// Train the network from a prepared index
    Train(TrainArgs),
    /// Classification report on one split
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Architecture JSON (default: the one saved beside the weights)
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Report path (default: report_<split>.json beside the weights)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explain one image with saliency, LIME or SHAP
    Explain(ExplainArgs),
    /// Write a synthetic dataset of stained-cell images
    Synth {
        /// Images per class
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the layer table and parameter counts
    Summary {
        #[arg(long, default_value = "softmax2")]
        head: String,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub bn_momentum: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub method: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// grid[:N] or slic[:N]
    #[arg(long)]
    pub segments: Option<String>,
    #[arg(long)]
    pub class: Option<usize>,
    /// LIME or SHAP sample budget
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> CliResult<T> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn print_epoch(r: &EpochRecord) {
    eprintln!(
        "epoch {:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:.2e}",
        r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
    );
}

/// Runs one parsed command, printing its results.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare {
            root,
            seed,
            out,
            fractions,
        } => {
            let fractions: [f64; 3] = fractions.try_into().map_err(|_| usage("--fractions takes three values"))?;
            let index = cmd_prepare(&root, seed, fractions, &out)?;
            println!(
                "{} images: train {}, val {}, test {} -> {}",
                index.len(),
                index.count(Split::Train, None),
                index.count(Split::Val, None),
                index.count(Split::Test, None),
                out.display()
            );
        }
        Command::Train(args) => {
            let mut config = match &args.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(i) = args.index {
                config.index = Some(i);
            }
            if let Some(e) = args.epochs {
                config.epochs = e;
            }
            if let Some(s) = args.seed {
                config.seed = s;
            }
            if let Some(h) = &args.head {
                config.head = parse(h)?;
            }
            if let Some(m) = args.bn_momentum {
                config.bn_momentum = m;
            }
            let out_dir = args.out_dir.unwrap_or_else(|| config.out_dir.clone());
            let outcome = cmd_train(&config, &out_dir, print_epoch)?;
            match outcome.history.last() {
                Some(r) => println!(
                    "final epoch {}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
                    r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
                ),
                None => println!("no epochs run; initial weights saved"),
            }
            println!("weights -> {}", outcome.weights.display());
        }
        Command::Evaluate {
            weights,
            index,
            split,
            arch,
            out,
        } => {
            let split: Split = parse(&split)?;
            let model = load_model(&weights, arch.as_deref())?;
            let index = DatasetIndex::load_csv(&index).map_err(|e| usage(format!("cannot load index {}: {e}", index.display())))?;
            let out = out.unwrap_or_else(|| weights.with_file_name(format!("report_{split}.json")));
            let report = cmd_evaluate(&model, &index, split, Some(&out))?;
            print!("{}", report.to_table());
            println!("report -> {}", out.display());
        }
        Command::Explain(args) => {
            let mut config = match &args.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let method: Method = parse(&args.method)?;
            if let Some(n) = args.samples {
                config.lime_samples = n;
                config.shap_samples = n;
            }
            let segments: Segmentation = parse(args.segments.as_deref().unwrap_or(&config.segments))?;
            let model = load_model(&args.weights, args.arch.as_deref())?;
            let req = ExplainRequest {
                image: args.image,
                method,
                seed: args.seed,
                segments,
                class: args.class,
                out_dir: args.out_dir,
            };
            for path in cmd_explain(&model, &req, &config)? {
                println!("{}", path.display());
            }
        }
        Command::Synth { n, seed, out } => {
            let index = cmd_synth(n, seed, &out)?;
            println!("{} images -> {}", index.len(), out.display());
        }
        Command::Summary { head } => print!("{}", cmd_summary(parse(&head)?)?),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"epochs": 3, "head": "sigmoid1"}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.head, Head::Sigmoid1);
        assert_eq!(partial.lr, 0.001);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn defaults_carry_the_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.fractions, [0.82, 0.09, 0.09]);
        assert_eq!((c.batch_size, c.lr, c.early_stop_accuracy), (32, 0.001, 0.99));
        assert_eq!(c.head, Head::Softmax2);
        let t = c.train_config();
        assert_eq!(t.plateau, PlateauConfig::default());
    }

    #[test]
    fn error_codes() {
        let code = |e: Error| CliError::from(e).code;
        assert_eq!(code(Error::Corrupt("x".into())), 4);
        assert_eq!(code(Error::Incompatible("x".into())), 4);
        assert_eq!(code(Error::NonFinite("x".into())), 3);
        assert_eq!(
            code(Error::Diverged {
                epoch: 1,
                batch: 2,
                detail: "nan".into()
            }),
            3
        );
        assert_eq!(code(Error::InvalidInput("x".into())), 2);
    }

    #[test]
    fn summary_totals() {
        assert!(cmd_summary(Head::Softmax2).unwrap().trim_end().ends_with("Total params: 625,378"));
        assert!(cmd_summary(Head::Sigmoid1).unwrap().trim_end().ends_with("Total params: 625,313"));
    }
}
