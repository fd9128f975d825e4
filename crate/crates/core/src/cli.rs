//! Command-line front end: `split`, `train`, `augment`, `evaluate`.
//!
//! Every stage reads and writes fixed file names inside a working directory:
//! `train.csv`, `test.csv`, `split_summary.txt`, `model.json`, `loss.csv`,
//! `balanced.csv`, `report.json` and `table.txt`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use thiserror::Error;

use crate::augment::{balance, AugmentError, Augmenter, Identity};
use crate::baselines::Oversampler;
use crate::dataio::{
    class_counts, load_csv, save_csv, train_test_split, DataError, Dataset, LabelPolicy, Schema,
};
use crate::eval::{
    render_table, ClassScheme, EvalContext, EvalError, EvalSettings, DEFAULT_DRAWS,
    DEFAULT_REPETITIONS,
};
use crate::forest::ForestConfig;
use crate::gan::{write_loss_csv, GanError, GanModel, Preset, TrainConfig};
use crate::seed;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_LOSS_STRIDE: usize = 100;
pub const DEFAULT_K_NEIGHBORS: usize = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read `{path}`: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid run configuration `{path}`: {source}")]
    Config {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: DataError,
    },
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmenterKind {
    None,
    Smote,
    Adasyn,
    Comfortgan,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: GanError| e.to_string())
}

fn parse_scheme(s: &str) -> std::result::Result<ClassScheme, String> {
    s.parse().map_err(|e: EvalError| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "comfortgan",
    version,
    about = "Class balancing and evaluation for tabular data"
)]
pub struct Cli {
    /// JSON run configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Schema JSON describing the dataset columns.
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    /// Directory holding the split, model and reports.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// `original` or `reduced3`.
    #[arg(long, global = true, value_parser = parse_scheme)]
    pub scheme: Option<ClassScheme>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random train/test split of a CSV file.
    Split {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Round non-integer labels to the nearest integer instead of rejecting them.
        #[arg(long)]
        round_labels: bool,
    },
    /// Train the conditional GAN on `train.csv`.
    Train {
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        n_critic: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        gp_lambda: Option<f64>,
        /// Keep every n-th iteration in `loss.csv`.
        #[arg(long)]
        loss_stride: Option<usize>,
    },
    /// Balance `train.csv` with one augmenter.
    Augment {
        #[arg(long, value_enum)]
        augmenter: Option<AugmenterKind>,
        #[arg(long)]
        k_neighbors: Option<usize>,
    },
    /// Compare augmenters against the baseline on the test split.
    Evaluate {
        #[arg(long, value_enum, value_delimiter = ',')]
        augmenters: Option<Vec<AugmenterKind>>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
        /// Worker threads for repetitions.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        dataset_name: Option<String>,
        #[arg(long)]
        k_neighbors: Option<usize>,
    },
}

/// Values a `--config` file may supply. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scheme: Option<ClassScheme>,
    pub train_fraction: Option<f64>,
    pub round_labels: Option<bool>,
    pub preset: Option<String>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub n_critic: Option<usize>,
    pub latent_dim: Option<usize>,
    pub learning_rate: Option<f64>,
    pub gp_lambda: Option<f64>,
    pub loss_stride: Option<usize>,
    pub augmenter: Option<AugmenterKind>,
    pub augmenters: Option<Vec<AugmenterKind>>,
    pub k_neighbors: Option<usize>,
    pub repetitions: Option<usize>,
    pub draws: Option<usize>,
    pub jobs: Option<usize>,
    pub dataset_name: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|source| CliError::Config {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.schema, &mut cfg.workdir] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }
}

struct Common {
    seed: u64,
    schema: Schema,
    workdir: PathBuf,
    scheme: ClassScheme,
}

fn existing(path: Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    let path = path.ok_or_else(|| CliError::Usage(format!("missing {what}; pass {flag}")))?;
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{what} `{}` does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn load_split_file(common: &Common, name: &str) -> Result<Dataset> {
    let path = common.workdir.join(name);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "`{}` not found; run `comfortgan split` first",
            path.display()
        )));
    }
    let (ds, _) =
        load_csv(&path, &common.schema, LabelPolicy::Exact).map_err(|source| CliError::Data {
            path: path.clone(),
            source,
        })?;
    Ok(common.scheme.apply(&ds)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_model(common: &Common, train: &Dataset) -> Result<GanModel> {
    let path = common.workdir.join("model.json");
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "`{}` not found; run `comfortgan train` first",
            path.display()
        )));
    }
    let model = GanModel::load(&path)?;
    let classes = class_counts(train).classes();
    if model.codec.label_vocab() != classes.as_slice() {
        return Err(CliError::Usage(format!(
            "model classes {:?} differ from the training classes {:?}; retrain with the same --scheme",
            model.codec.label_vocab(),
            classes
        )));
    }
    Ok(model)
}

fn augmenter(
    kind: AugmenterKind,
    k: usize,
    common: &Common,
    train: &Dataset,
) -> Result<Box<dyn Augmenter>> {
    Ok(match kind {
        AugmenterKind::None => Box::new(Identity),
        AugmenterKind::Smote => Box::new(Oversampler::smote(k)),
        AugmenterKind::Adasyn => Box::new(Oversampler::adasyn(k)),
        AugmenterKind::Comfortgan => Box::new(load_model(common, train)?),
    })
}

/// Runs one parsed command and returns the text it reports on stdout.
pub fn run(cli: Cli) -> Result<String> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let schema_path = existing(cli.schema.or(file.schema.clone()), "schema", "--schema")?;
    let schema = Schema::load(&schema_path).map_err(|source| CliError::Data {
        path: schema_path.clone(),
        source,
    })?;
    let workdir = cli
        .workdir
        .or(file.workdir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let common = Common {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        schema,
        workdir,
        scheme: cli.scheme.or(file.scheme).unwrap_or(ClassScheme::Original),
    };
    match cli.command {
        Command::Split {
            data,
            train_fraction,
            round_labels,
        } => {
            let data = existing(data.or(file.data), "dataset", "--data")?;
            let fraction = train_fraction
                .or(file.train_fraction)
                .unwrap_or(DEFAULT_TRAIN_FRACTION);
            let policy = if round_labels || file.round_labels.unwrap_or(false) {
                LabelPolicy::Round
            } else {
                LabelPolicy::Exact
            };
            cmd_split(&common, &data, fraction, policy)
        }
        Command::Train {
            preset,
            iterations,
            batch_size,
            n_critic,
            latent_dim,
            learning_rate,
            gp_lambda,
            loss_stride,
        } => {
            let preset = match preset {
                Some(p) => p,
                None => match &file.preset {
                    Some(name) => name.parse()?,
                    None => Preset::Controlled,
                },
            };
            let mut cfg = TrainConfig::preset(preset, seed::derive(common.seed, "train"));
            if let Some(v) = iterations.or(file.iterations) {
                cfg.iterations = v;
            }
            if let Some(v) = batch_size.or(file.batch_size) {
                cfg.batch_size = v;
            }
            if let Some(v) = n_critic.or(file.n_critic) {
                cfg.n_critic = v;
            }
            if let Some(v) = latent_dim.or(file.latent_dim) {
                cfg.latent_dim = v;
            }
            if let Some(v) = learning_rate.or(file.learning_rate) {
                cfg.learning_rate = v;
            }
            if let Some(v) = gp_lambda.or(file.gp_lambda) {
                cfg.gp_lambda = v;
            }
            let stride = loss_stride
                .or(file.loss_stride)
                .unwrap_or(DEFAULT_LOSS_STRIDE);
            cmd_train(&common, cfg, stride)
        }
        Command::Augment {
            augmenter,
            k_neighbors,
        } => {
            let kind = augmenter
                .or(file.augmenter)
                .ok_or_else(|| CliError::Usage("missing --augmenter".into()))?;
            let k = k_neighbors
                .or(file.k_neighbors)
                .unwrap_or(DEFAULT_K_NEIGHBORS);
            cmd_augment(&common, kind, k)
        }
        Command::Evaluate {
            augmenters,
            repetitions,
            draws,
            jobs,
            dataset_name,
            k_neighbors,
        } => {
            let kinds = augmenters.or(file.augmenters).unwrap_or_default();
            let settings = EvalSettings {
                repetitions: repetitions
                    .or(file.repetitions)
                    .unwrap_or(DEFAULT_REPETITIONS),
                draws_per_class: draws.or(file.draws).unwrap_or(DEFAULT_DRAWS),
                forest: ForestConfig::default(),
                seed: seed::derive(common.seed, "evaluate"),
                jobs: jobs.or(file.jobs).unwrap_or(0),
            };
            let name = dataset_name
                .or(file.dataset_name)
                .unwrap_or_else(|| "dataset".into());
            let k = k_neighbors
                .or(file.k_neighbors)
                .unwrap_or(DEFAULT_K_NEIGHBORS);
            cmd_evaluate(&common, &kinds, settings, &name, k)
        }
    }
}

fn cmd_split(common: &Common, data: &Path, fraction: f64, policy: LabelPolicy) -> Result<String> {
    let (ds, report) = load_csv(data, &common.schema, policy).map_err(|source| CliError::Data {
        path: data.to_path_buf(),
        source,
    })?;
    let ds = common.scheme.apply(&ds)?;
    let (train, test) = train_test_split(&ds, fraction, seed::derive(common.seed, "split"))
        .map_err(|source| CliError::Data {
            path: data.to_path_buf(),
            source,
        })?;
    fs::create_dir_all(&common.workdir)?;
    for (name, part) in [("train.csv", &train), ("test.csv", &test)] {
        let path = common.workdir.join(name);
        save_csv(part, &path).map_err(|source| CliError::Data { path, source })?;
    }
    let summary = format!(
        "rows: {} retained, {} dropped\ntrain: {} rows\n{}test: {} rows\n{}",
        report.retained,
        report.dropped,
        train.len(),
        class_counts(&train),
        test.len(),
        class_counts(&test)
    );
    fs::write(common.workdir.join("split_summary.txt"), &summary)?;
    Ok(summary)
}

fn cmd_train(common: &Common, cfg: TrainConfig, loss_stride: usize) -> Result<String> {
    let train = load_split_file(common, "train.csv")?;
    let model = GanModel::fit(&train, cfg)?;
    model.save(common.workdir.join("model.json"))?;
    let loss = BufWriter::new(File::create(common.workdir.join("loss.csv"))?);
    write_loss_csv(&model.history, loss_stride, loss)?;
    let last = model.history.last().map_or_else(
        || "no iterations run".to_string(),
        |r| format!("final g_loss {:.4}, d_loss {:.4}", r.g_loss, r.d_loss),
    );
    Ok(format!(
        "trained {} iterations (batch {}, critic steps {}, latent {}); {last}\n",
        model.config.iterations,
        model.config.batch_size,
        model.config.n_critic,
        model.config.latent_dim
    ))
}

fn cmd_augment(common: &Common, kind: AugmenterKind, k: usize) -> Result<String> {
    let train = load_split_file(common, "train.csv")?;
    let aug = augmenter(kind, k, common, &train)?;
    let balanced = balance(&train, aug.as_ref(), seed::derive(common.seed, "augment"))?;
    let path = common.workdir.join("balanced.csv");
    balanced
        .write_csv(BufWriter::new(File::create(&path)?))
        .map_err(|source| CliError::Data { path, source })?;
    Ok(format!(
        "{}: {} real + {} generated rows\n{}",
        aug.name(),
        balanced.n_real,
        balanced.data.len() - balanced.n_real,
        class_counts(&balanced.data)
    ))
}

fn cmd_evaluate(
    common: &Common,
    kinds: &[AugmenterKind],
    settings: EvalSettings,
    dataset: &str,
    k: usize,
) -> Result<String> {
    let train = load_split_file(common, "train.csv")?;
    let test = load_split_file(common, "test.csv")?;
    let augs = kinds
        .iter()
        .filter(|&&k| k != AugmenterKind::None)
        .map(|&kind| augmenter(kind, k, common, &train))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn Augmenter> = augs.iter().map(|a| a.as_ref()).collect();
    let ctx = EvalContext::new(train, &test, settings)?;
    let report = ctx.compare(dataset, common.scheme, &refs)?;
    write_json(&common.workdir.join("report.json"), &report)?;
    let table = render_table(&report);
    fs::write(common.workdir.join("table.txt"), &table)?;
    Ok(table)
}
