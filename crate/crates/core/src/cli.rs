//! The `mcl` command line: corrupted-set generation, training, evaluation
//! and effect reports.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::imgops::{Factor, Image};
use crate::trainer::{self, metrics_csv, MetricsRow, TrainConfig, METRICS_HEADER};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

#[derive(Debug, Parser)]
#[command(name = "mcl", version, about = "Meta-causal feature learning for single-domain generalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a corrupted copy of a dataset at one severity level.
    GenCorrupt(GenCorruptArgs),
    /// Train from a JSON config.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on one or more datasets.
    Eval(EvalArgs),
    /// Per-sample mapping weights and effect norms.
    Effects(EffectsArgs),
}

#[derive(Debug, Args)]
pub struct GenCorruptArgs {
    /// IDX image file (`*images-idx3*`) or dataset manifest.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub factor: Factor,
    #[arg(long, allow_negative_numbers = true)]
    pub severity: i64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// File stem; defaults to `<factor>-s<severity>`.
    #[arg(long)]
    pub name: Option<String>,
    /// Use only the first N input samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub dataset: Vec<PathBuf>,
    /// CSV to append rows to; defaults to `metrics.csv` beside the checkpoint.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EffectsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report path (JSON); a CSV with the same stem is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mcl: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenCorrupt(a) => {
            let path = cmd_gen_corrupt(&a)?;
            writeln!(out, "{}", path.display())?;
        }
        Command::Train(a) => {
            let metrics = cmd_train(&a)?;
            write!(out, "{}", metrics_table(&metrics))?;
        }
        Command::Eval(a) => {
            let rows = cmd_eval(&a)?;
            write!(out, "{}", metrics_table(&rows))?;
        }
        Command::Effects(a) => {
            let report = cmd_effects(&a)?;
            writeln!(out, "{}", a.out.display())?;
            let means: Vec<String> = report
                .catalog
                .iter()
                .zip(&report.mean_weights)
                .map(|(f, w)| format!("{f}={w:.4}"))
                .collect();
            writeln!(out, "mean weights: {}", means.join(" "))?;
        }
    }
    Ok(())
}

fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut s = format!("{:>5}  {:<28} {:>9} {:>9} {:>9} {:>8}\n", "epoch", "split", "loss_c", "loss_ac", "loss_am", "acc%");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for r in rows {
        s.push_str(&format!(
            "{:>5}  {:<28} {:>9.4} {:>9} {:>9} {:>8.2}\n",
            r.epoch,
            r.split,
            r.loss_c,
            opt(r.loss_ac),
            opt(r.loss_am),
            r.accuracy
        ));
    }
    s
}

pub fn cmd_gen_corrupt(a: &GenCorruptArgs) -> Result<PathBuf> {
    let severity = u8::try_from(a.severity)
        .ok()
        .filter(|s| (1..=5).contains(s))
        .ok_or_else(|| Error::Config(format!("--severity {} outside the valid range 1..=5", a.severity)))?;
    let spec = CorruptionSpec { factor: a.factor, severity, seed: a.seed };
    spec.degree()?;
    let source = data::load_path(&a.input, a.limit)?;
    let corrupted = data::make_corrupted(&source, &spec)?;
    let stem = a.name.clone().unwrap_or_else(|| format!("{}-s{}", a.factor, severity));
    data::save_dataset(&corrupted, &a.out, &stem)
}

/// Train, then evaluate on `source_test` and every target. Returns all rows.
pub fn cmd_train(a: &TrainArgs) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(&a.config)?;
    let config = TrainConfig::from_json(&text)?;
    let source = data::load_path(&config.source_train, config.train_limit)?;
    let mut evals: Vec<Dataset> = Vec::new();
    if let Some(p) = &config.source_test {
        let mut ds = data::load_path(p, config.test_limit)?;
        ds.name = "source-test".into();
        evals.push(ds);
    }
    for p in &config.targets {
        let mut ds = data::load_path(p, config.test_limit)?;
        ds.name = format!("target:{}", dataset_label(p));
        evals.push(ds);
    }
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join(RESOLVED_CONFIG_FILE), config.to_json())?;
    let quiet = a.quiet;
    let outcome = trainer::train_with(&config, &source, |row| {
        if !quiet {
            eprintln!(
                "epoch {} loss_c {:.4} loss_ac {:.4} loss_am {:.4} acc {:.2}%",
                row.epoch,
                row.loss_c,
                row.loss_ac.unwrap_or(0.0),
                row.loss_am.unwrap_or(0.0),
                row.accuracy
            );
        }
    })?;
    let mut rows = outcome.metrics;
    for ds in &evals {
        check_compatible(&outcome.checkpoint, ds)?;
        rows.push(trainer::evaluate(&outcome.checkpoint, ds)?);
    }
    outcome.checkpoint.save(&a.out_dir.join(CHECKPOINT_FILE))?;
    fs::write(a.out_dir.join(METRICS_FILE), metrics_csv(&rows))?;
    Ok(rows)
}

fn dataset_label(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// Image shape and label range must fit the model; mismatches are format errors.
fn check_compatible(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    let s = &ckpt.network.spec;
    if let Some(shape) = ds.image_shape() {
        if shape != (s.height, s.width, s.channels) {
            return Err(Error::format(
                0,
                format!(
                    "dataset {} has {}x{}x{} images, model expects {}x{}x{}",
                    ds.name, shape.0, shape.1, shape.2, s.height, s.width, s.channels
                ),
            ));
        }
    }
    if let Some(&l) = ds.labels.iter().find(|&&l| l as usize >= s.classes) {
        return Err(Error::format(0, format!("dataset {} has label {l}, model has {} classes", ds.name, s.classes)));
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<MetricsRow>> {
    if a.dataset.is_empty() {
        return Err(Error::Config("no --dataset given".into()));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut rows = Vec::with_capacity(a.dataset.len());
    for p in &a.dataset {
        let mut ds = data::load_path(p, a.limit)?;
        ds.name = format!("eval:{}", dataset_label(p));
        check_compatible(&ckpt, &ds)?;
        rows.push(trainer::evaluate(&ckpt, &ds)?);
    }
    let csv = a
        .metrics
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join(METRICS_FILE));
    let fresh = !csv.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&csv)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    for r in &rows {
        writeln!(f, "{}", r.csv_line())?;
    }
    Ok(rows)
}

/// One analyzed sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub sample_id: usize,
    pub true_label: Option<u8>,
    pub predicted_label: usize,
    /// Mapping weights in catalog order.
    pub weights: Vec<f64>,
    /// L1 norm of each factor's effect, catalog order.
    pub effect_l1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectsReport {
    pub dataset: String,
    pub catalog: Vec<Factor>,
    pub records: Vec<EffectRecord>,
    pub mean_weights: Vec<f64>,
}

impl EffectsReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("sample_id,true_label,predicted_label");
        for f in &self.catalog {
            s.push_str(&format!(",w_{f}"));
        }
        for f in &self.catalog {
            s.push_str(&format!(",e_{f}"));
        }
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{}",
                r.sample_id,
                r.true_label.map(|l| l.to_string()).unwrap_or_default(),
                r.predicted_label
            ));
            for v in r.weights.iter().chain(&r.effect_l1) {
                s.push_str(&format!(",{v:.8}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn mean_weight(&self, factor: Factor) -> Option<f64> {
        self.catalog.iter().position(|&f| f == factor).map(|k| self.mean_weights[k])
    }
}

const EFFECT_CHUNK: usize = 32;

/// Analyze every sample through the causal path, whatever the variant.
pub fn effects_report(ckpt: &Checkpoint, ds: &Dataset) -> Result<EffectsReport> {
    check_compatible(ckpt, ds)?;
    let k = ckpt.catalog.len();
    let mut records = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EFFECT_CHUNK) {
        let images: Vec<&Image> = chunk.iter().map(|&i| &ds.images[i]).collect();
        let ids: Vec<u64> = chunk.iter().map(|&i| trainer::eval_sample_id(ckpt, i)).collect();
        for (inf, &i) in trainer::infer_batch(ckpt, &images, &ids, true)?.into_iter().zip(chunk) {
            records.push(EffectRecord {
                sample_id: i,
                true_label: Some(ds.labels[i]),
                predicted_label: inf.label,
                weights: inf.weights.values().to_vec(),
                effect_l1: inf.effect_norms.unwrap_or_default(),
            });
        }
    }
    let mut mean_weights = vec![0.0; k];
    for r in &records {
        for (m, w) in mean_weights.iter_mut().zip(&r.weights) {
            *m += w;
        }
    }
    let n = records.len().max(1) as f64;
    mean_weights.iter_mut().for_each(|m| *m /= n);
    Ok(EffectsReport { dataset: ds.name.clone(), catalog: ckpt.catalog.clone(), records, mean_weights })
}

pub fn cmd_effects(a: &EffectsArgs) -> Result<EffectsReport> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut ds = data::load_path(&a.dataset, a.limit)?;
    ds.name = dataset_label(&a.dataset);
    if ds.is_empty() {
        return Err(Error::Config(format!("{}: no samples", a.dataset.display())));
    }
    let report = effects_report(&ckpt, &ds)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(&a.out, json)?;
    fs::write(a.out.with_extension("csv"), report.csv())?;
    Ok(report)
}
