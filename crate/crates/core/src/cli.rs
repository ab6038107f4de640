//! Command-line front end: config parsing, verbs, exit codes.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datasets::{format_split, scan_dataset, synth_dataset};
use crate::error::{Error, Result};
use crate::models::{load_weights, save_weights, NetworkWeights};
use crate::pipelines::{
    apply_split, cluster_eval, encoder_prefix, evaluate_fewshot, load_dataset, subset_records, train_matching,
    train_siamese, train_ssm, ClusterSubset, Dataset, MetricsReport, RunConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ssmnet", version, about = "Few-shot metric learning with Siamese and Matching networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Dataset root (overrides `data_root`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` config overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a dataset, split its classes and write the split file.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Where to write the split (default `<data>/split.txt`).
        #[arg(long)]
        split_out: Option<PathBuf>,
    },
    /// Generate a procedural dataset under `--data`.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
    },
    /// Contrastive training of the Siamese encoder.
    TrainSiamese {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights_out: PathBuf,
    },
    /// Episodic training of a Matching Network.
    TrainMatching {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights_out: PathBuf,
    },
    /// Train a Matching head over a frozen Siamese encoder.
    TrainSsm {
        #[command(flatten)]
        common: Common,
        /// Trained Siamese weights.
        #[arg(long)]
        siamese: PathBuf,
        #[arg(long)]
        weights_out: PathBuf,
    },
    /// Few-shot evaluation on held-out episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// k-means plus silhouette over encoder embeddings.
    ClusterScore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Export encoder embeddings as CSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Prepare { common, .. }
            | Command::Synth { common, .. }
            | Command::TrainSiamese { common, .. }
            | Command::TrainMatching { common, .. }
            | Command::TrainSsm { common, .. }
            | Command::Eval { common, .. }
            | Command::ClusterScore { common, .. }
            | Command::Embed { common, .. } => common,
        }
    }

    pub fn verb(&self) -> &'static str {
        match self {
            Command::Prepare { .. } => "prepare",
            Command::Synth { .. } => "synth",
            Command::TrainSiamese { .. } => "train-siamese",
            Command::TrainMatching { .. } => "train-matching",
            Command::TrainSsm { .. } => "train-ssm",
            Command::Eval { .. } => "eval",
            Command::ClusterScore { .. } => "cluster-score",
            Command::Embed { .. } => "embed",
        }
    }
}

/// Apply `key = value` lines to `config`. Blank lines and `#` comments are skipped.
pub fn apply_config_text(config: &mut RunConfig, text: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(line, Some(n + 1), "expected `key = value`"));
        };
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::config(key, Some(n + 1), "duplicate key"));
        }
        config.set(key, value.trim(), Some(n + 1))?;
    }
    Ok(())
}

/// Defaults, then the config file (if any), then `key=value` overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", None, format!("cannot read {}: {e}", path.display())))?;
        apply_config_text(&mut config, &text)?;
    }
    for o in overrides {
        let Some((key, value)) = o.split_once('=') else {
            return Err(Error::config(o.as_str(), None, "override must be `key=value`"));
        };
        config.set(key.trim(), value.trim(), None)?;
    }
    config.validate()?;
    Ok(config)
}

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut config = parse_config(common.config.as_deref(), &common.overrides)?;
    if let Some(data) = &common.data {
        config.data_root = data.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn require_paths(config: &RunConfig) -> Result<()> {
    for (key, path) in [("split_file", &config.split_file), ("initial_weights", &config.initial_weights)] {
        if let Some(p) = path {
            if !p.exists() {
                return Err(Error::Data(format!("{key} {} does not exist", p.display())));
            }
        }
    }
    Ok(())
}

fn initial_weights(config: &RunConfig) -> Result<Option<NetworkWeights>> {
    config.initial_weights.as_ref().map(load_weights).transpose()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("csv: {other:?}")),
    }
}

/// CSV of encoder embeddings for every original record, in manifest order.
/// Returns the number of rows written.
pub fn embed_export(config: &RunConfig, data: &Dataset, weights: &NetworkWeights, out: &Path) -> Result<usize> {
    let prefix = encoder_prefix(weights);
    let spec = config.backbone();
    spec.check_weights(weights, prefix)?;
    let records = subset_records(&data.manifest, ClusterSubset::All);
    let table = data.embed(&spec, weights, prefix, &records)?;
    let mut writer = csv::Writer::from_path(out).map_err(csv_error)?;
    let mut header = vec!["path".to_string(), "class".to_string()];
    header.extend((0..spec.embedding_dim).map(|j| format!("e{j}")));
    writer.write_record(&header).map_err(csv_error)?;
    for (row, &r) in records.iter().enumerate() {
        let rec = &data.manifest.records[r];
        let mut fields = vec![rec.path.display().to_string(), rec.class_name.clone()];
        fields.extend(table.row(row).iter().map(|v| v.to_string()));
        writer.write_record(&fields).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(records.len())
}

/// Execute one command and write its report.
pub fn run(command: &Command) -> Result<MetricsReport> {
    let common = command.common();
    let config = effective_config(common)?;
    require_paths(&config)?;
    let mut report = match command {
        Command::Synth { classes, per_class, .. } => {
            let manifest = synth_dataset(&config.data_root, *classes, *per_class, config.image_size, config.seed)?;
            let mut r = MetricsReport::new("synth", &config);
            r.notes.push(format!("{} images in {} classes", manifest.len(), manifest.num_classes()));
            r
        }
        Command::Prepare { split_out, .. } => {
            if !config.data_root.exists() {
                return Err(Error::Data(format!("dataset root {} does not exist", config.data_root.display())));
            }
            let manifest = apply_split(&scan_dataset(&config.data_root, config.image_size)?, &config)?;
            let target = split_out.clone().unwrap_or_else(|| config.data_root.join("split.txt"));
            std::fs::write(&target, format_split(&manifest))?;
            let mut r = MetricsReport::new("prepare", &config);
            r.notes.push(format!(
                "{} images, {} classes: base {}, validation {}, test {}",
                manifest.len(),
                manifest.num_classes(),
                manifest.split.base.len(),
                manifest.split.validation.len(),
                manifest.split.test.len()
            ));
            r.notes.extend(manifest.skipped.iter().map(|s| format!("skipped {}: {}", s.path.display(), s.reason)));
            r.notes.push(format!("split written to {}", target.display()));
            r
        }
        Command::TrainSiamese { weights_out, .. } => {
            let data = load_dataset(&config)?;
            let out = train_siamese(&config, &data, initial_weights(&config)?.as_ref())?;
            save_weights(&out.weights, weights_out)?;
            out.report
        }
        Command::TrainMatching { weights_out, .. } => {
            let data = load_dataset(&config)?;
            let out = train_matching(&config, &data, initial_weights(&config)?.as_ref())?;
            save_weights(&out.weights, weights_out)?;
            out.report
        }
        Command::TrainSsm { siamese, weights_out, .. } => {
            let data = load_dataset(&config)?;
            let out = train_ssm(&config, &data, &load_weights(siamese)?)?;
            save_weights(&out.weights, weights_out)?;
            out.report
        }
        Command::Eval { weights, .. } => {
            let data = load_dataset(&config)?;
            evaluate_fewshot(&config, &data, &load_weights(weights)?)?.report
        }
        Command::ClusterScore { weights, .. } => {
            let data = load_dataset(&config)?;
            let k = (config.cluster_k > 0).then_some(config.cluster_k);
            cluster_eval(&config, &data, &load_weights(weights)?, config.cluster_subset, k)?
        }
        Command::Embed { weights, csv, .. } => {
            let data = load_dataset(&config)?;
            let rows = embed_export(&config, &data, &load_weights(weights)?, csv)?;
            let mut r = MetricsReport::new("embed", &config);
            r.notes.push(format!("{rows} rows written to {}", csv.display()));
            r
        }
    };
    report.command = command.verb().to_string();
    report.validate()?;
    report.write(&common.out)?;
    Ok(report)
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Data(_) | Error::Image { .. } | Error::Format(_) | Error::Io(_) => EXIT_DATA,
        Error::Numeric { .. } | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(report) => {
            log::info!("{} finished; report at {}", report.command, cli.command.common().out.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
