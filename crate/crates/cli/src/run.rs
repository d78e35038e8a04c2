//! The subcommands. Every one writes `resolved_config.txt` and a
//! `summary.json` into its output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cen_autograd::Element;
use cen_core::batch::TargetKind;
use cen_core::harness::{
    evaluate, lane_label, load_checkpoint, metrics_header, metrics_row, record_trace, save_checkpoint, trace_rows,
    trace_summary_rows, Checkpoint, EvalReport, Metric, Trainer, TRACE_HEADER, TRACE_SUMMARY_HEADER,
};
use cen_core::models::{build_model, ModelAssembly, Variant};
use cen_core::synthdata::{
    complementarity_certificate, load_dataset, make_dataset_with, save_dataset, CertificateFeatures, Dataset,
};
use cen_core::CenError;
use serde::Serialize;

use crate::config::{ExperimentConfig, Knob, Precision};
use crate::error::{CliError, Result};

/// Command-line values that replace config entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub out: Option<PathBuf>,
    pub rows: Option<Vec<String>>,
    pub seeds: Option<u64>,
}

/// Loads `path` (defaults when absent) and applies `ov`.
pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = ov.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = &ov.variant {
        cfg.model.variant = v.clone();
    }
    if let Some(o) = &ov.out {
        cfg.output.dir = o.to_string_lossy().into_owned();
    }
    if let Some(r) = &ov.rows {
        cfg.ablate.rows = r.clone();
    }
    if let Some(s) = ov.seeds {
        cfg.ablate.seeds = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("summary serializes");
    s.push('\n');
    write_file(path, s)
}

fn start_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("resolved_config.txt"), cfg.echo())
}

/// The configured dataset file, or a freshly generated dataset for the
/// training seed.
pub fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let kind = cfg.kind()?;
    let data = match cfg.dataset_file() {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found")));
            }
            load_dataset(&path)?
        }
        None => make_dataset_with(kind, cfg.data.n_train, cfg.data.n_val, cfg.train.seed, &cfg.data_params())?,
    };
    if data.kind != kind {
        return Err(CliError::Usage(format!("dataset holds {} but the config asks for {kind}", data.kind)));
    }
    Ok(data)
}

pub fn build<T: Element>(cfg: &ExperimentConfig, data: &Dataset) -> Result<ModelAssembly<T>> {
    let kind = cfg.kind()?;
    let variant = cfg.variant()?;
    let tc = cfg.train_config(kind);
    if let Variant::Unimodal(m) = variant {
        if m >= data.num_inputs() {
            return Err(CliError::Usage(format!("variant {variant} needs modality {m}, the dataset has {}", data.num_inputs())));
        }
    }
    let mut options = variant.options(tc.theta);
    options.rule = cfg.rule().map_err(CliError::Usage)?;
    let topology = variant.topology(cfg.topology(kind));
    Ok(build_model(&cfg.net_spec(), topology, &data.target_kinds, &options, tc.seed)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub loss: f64,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub miou: Option<f64>,
}

impl From<&Metric> for MetricSummary {
    fn from(m: &Metric) -> Self {
        MetricSummary { loss: m.loss, mse: m.mse, mae: m.mae, miou: m.miou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LaneSummary {
    pub lane: String,
    pub alpha: f64,
    pub metrics: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSummary {
    pub task: usize,
    pub target: String,
    pub ensemble: MetricSummary,
    pub lanes: Vec<LaneSummary>,
}

fn target_name(k: TargetKind) -> String {
    match k {
        TargetKind::Regression => "regression".into(),
        TargetKind::Classes(c) => format!("classes:{c}"),
    }
}

fn task_summaries<T: Element>(assembly: &ModelAssembly<T>, report: &EvalReport) -> Vec<TaskSummary> {
    report
        .tasks
        .iter()
        .map(|t| {
            let alphas = assembly.scores.alphas(&assembly.store, t.task);
            TaskSummary {
                task: t.task,
                target: target_name(t.kind),
                ensemble: (&t.ensemble).into(),
                lanes: t
                    .lanes
                    .iter()
                    .zip(alphas)
                    .map(|((lane, m), alpha)| LaneSummary { lane: lane_label(assembly, *lane), alpha, metrics: m.into() })
                    .collect(),
            }
        })
        .collect()
}

/// Final metrics of one training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub kind: String,
    pub variant: String,
    pub topology: String,
    pub precision: String,
    pub seed: u64,
    pub lambda: f64,
    pub theta: f64,
    pub steps: u64,
    pub norm_sets: usize,
    pub generator_parameters: usize,
    pub exchanged_fraction: f64,
    pub tasks: Vec<TaskSummary>,
}

impl RunSummary {
    /// Mean ensemble validation loss over tasks.
    pub fn ensemble_loss(&self) -> f64 {
        self.tasks.iter().map(|t| t.ensemble.loss).sum::<f64>() / self.tasks.len() as f64
    }
}

fn run_summary<T: Element>(
    cfg: &ExperimentConfig,
    assembly: &mut ModelAssembly<T>,
    data: &Dataset,
    step: u64,
) -> Result<RunSummary> {
    let kind = cfg.kind()?;
    let tc = cfg.train_config(kind);
    let report = evaluate(assembly, data, &data.val, tc.batch_size)?;
    Ok(RunSummary {
        kind: kind.name().into(),
        variant: cfg.variant()?.to_string(),
        topology: assembly.topology.name().into(),
        precision: cfg.train.precision.clone(),
        seed: tc.seed,
        lambda: tc.lambda,
        theta: tc.theta,
        steps: step,
        norm_sets: assembly.count_norm_sets(),
        generator_parameters: assembly.count_parameters().generator(),
        exchanged_fraction: record_trace(assembly, step)?.max_exchanged_fraction(),
        tasks: task_summaries(assembly, &report),
    })
}

fn open(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn train_typed<T: Element>(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let kind = cfg.kind()?;
    let tc = cfg.train_config(kind);
    let echo = cfg.echo();
    let mut trainer = Trainer::new(build::<T>(cfg, data)?, tc.clone())?;
    if let Some(p) = resume {
        let (step, _) = load_checkpoint(&mut trainer.assembly, p)?;
        trainer.step = step;
    }
    let total = trainer.total_steps(data.train.len);
    let ckpt_dir = dir.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }

    let mut metrics = open(&dir.join("metrics.csv"))?;
    let mut trace = open(&dir.join("trace.csv"))?;
    let mut summary = open(&dir.join("trace_summary.csv"))?;
    let header = metrics_header(&trainer.assembly);
    let io = |e: std::io::Error| CliError::from(CenError::Io(e));
    metrics.write_all(header.as_bytes()).map_err(io)?;
    trace.write_all(TRACE_HEADER.as_bytes()).map_err(io)?;
    summary.write_all(TRACE_SUMMARY_HEADER.as_bytes()).map_err(io)?;
    if trainer.step == 0 {
        let t = record_trace(&trainer.assembly, 0)?;
        trace.write_all(trace_rows(&t).as_bytes()).map_err(io)?;
        summary.write_all(trace_summary_rows(&t).as_bytes()).map_err(io)?;
    }

    let every = cfg.train.checkpoint_every;
    let result = trainer.run(data, |tr, record| {
        metrics.write_all(metrics_row(record).as_bytes())?;
        let step = tr.step;
        if step % tc.trace_every as u64 == 0 || step == total {
            let t = record_trace(&tr.assembly, step)?;
            trace.write_all(trace_rows(&t).as_bytes())?;
            summary.write_all(trace_summary_rows(&t).as_bytes())?;
        }
        if every > 0 && step % every == 0 {
            save_checkpoint(&tr.assembly, step, &echo, &ckpt_dir.join(format!("step_{step}.bin")))?;
        }
        Ok(())
    });
    // Rows written before a failure stay on disk.
    for w in [&mut metrics, &mut trace, &mut summary] {
        w.flush().map_err(io)?;
    }
    result?;

    let step = trainer.step;
    save_checkpoint(&trainer.assembly, step, &echo, &dir.join("checkpoint.bin"))?;
    let s = run_summary(cfg, &mut trainer.assembly, data, step)?;
    write_json(&dir.join("summary.json"), &s)?;
    Ok(s)
}

/// Trains into `dir`, optionally continuing from a checkpoint.
pub fn train_in(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    start_dir(cfg, dir)?;
    match cfg.precision().map_err(CliError::Usage)? {
        Precision::F32 => train_typed::<f32>(cfg, data, dir, resume),
        Precision::F64 => train_typed::<f64>(cfg, data, dir, resume),
    }
}

pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunSummary> {
    let data = dataset(cfg)?;
    train_in(cfg, &data, Path::new(&cfg.output.dir), resume)
}

#[derive(Serialize)]
struct CertificateSummary {
    features: String,
    single: Vec<f64>,
    joint: f64,
    min_ratio: f64,
}

#[derive(Serialize)]
struct DataSummary {
    kind: String,
    seed: u64,
    n_train: usize,
    n_val: usize,
    height: usize,
    width: usize,
    inputs: usize,
    targets: Vec<String>,
    certificates: Vec<CertificateSummary>,
}

/// Writes `dataset.bin` and the complementarity certificates when the
/// dataset has several inputs and a regression target.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let dir = Path::new(&cfg.output.dir);
    start_dir(cfg, dir)?;
    let data = dataset(cfg)?;
    save_dataset(&data, &dir.join("dataset.bin"))?;
    let mut certificates = Vec::new();
    if data.num_inputs() >= 2 && data.target_kinds.first() == Some(&TargetKind::Regression) {
        for (name, f) in [
            ("pixel_linear", CertificateFeatures::PixelLinear),
            ("neighborhood_quadratic", CertificateFeatures::NeighborhoodQuadratic),
        ] {
            let c = complementarity_certificate(&data, f)?;
            certificates.push(CertificateSummary {
                features: name.into(),
                single: c.single.clone(),
                joint: c.joint,
                min_ratio: c.min_ratio(),
            });
        }
    }
    let s = DataSummary {
        kind: data.kind.name().into(),
        seed: cfg.train.seed,
        n_train: data.train.len,
        n_val: data.val.len,
        height: data.height,
        width: data.width,
        inputs: data.num_inputs(),
        targets: data.target_kinds.iter().map(|&k| target_name(k)).collect(),
        certificates,
    };
    write_json(&dir.join("summary.json"), &s)
}

fn eval_typed<T: Element>(cfg: &ExperimentConfig, data: &Dataset, checkpoint: &Path) -> Result<RunSummary> {
    let bytes = fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let ck = Checkpoint::<T>::from_bytes(&bytes)?;
    let trained = ExperimentConfig::parse(&ck.config, checkpoint)?;
    if (&trained.data, &trained.model, &trained.train) != (&cfg.data, &cfg.model, &cfg.train) {
        return Err(CliError::Usage(format!(
            "{} was trained with a different data, model or train configuration",
            checkpoint.display()
        )));
    }
    let mut assembly = build::<T>(cfg, data)?;
    ck.restore(&mut assembly)?;
    run_summary(cfg, &mut assembly, data, ck.step)
}

/// Evaluates a checkpoint (default `<out>/checkpoint.bin`) on the
/// validation split and writes `eval.json`.
pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunSummary> {
    let dir = Path::new(&cfg.output.dir);
    let checkpoint = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join("checkpoint.bin"));
    let data = dataset(cfg)?;
    create_dir(dir)?;
    let s = match cfg.precision().map_err(CliError::Usage)? {
        Precision::F32 => eval_typed::<f32>(cfg, &data, &checkpoint)?,
        Precision::F64 => eval_typed::<f64>(cfg, &data, &checkpoint)?,
    };
    write_json(&dir.join("eval.json"), &s)?;
    Ok(s)
}

#[derive(Serialize)]
pub struct SweepEntry {
    pub dir: String,
    pub lambda: f64,
    pub theta: f64,
    pub ensemble_loss: f64,
    pub exchanged_fraction: f64,
}

/// One training run per (lambda, theta) pair, each in its own subdirectory.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepEntry>> {
    let root = PathBuf::from(&cfg.output.dir);
    start_dir(cfg, &root)?;
    let data = dataset(cfg)?;
    let thetas = if cfg.sweep.thetas.is_empty() {
        vec![cfg.train_config(cfg.kind()?).theta]
    } else {
        cfg.sweep.thetas.clone()
    };
    let mut entries = Vec::new();
    for &lambda in &cfg.sweep.lambdas {
        for &theta in &thetas {
            let mut c = cfg.clone();
            c.train.lambda = Knob::Value(lambda);
            c.train.theta = Knob::Value(theta);
            let name = format!("lambda_{lambda}_theta_{theta}");
            c.output.dir = root.join(&name).to_string_lossy().into_owned();
            let s = train_in(&c, &data, Path::new(&c.output.dir), None)?;
            entries.push(SweepEntry {
                dir: name,
                lambda,
                theta,
                ensemble_loss: s.ensemble_loss(),
                exchanged_fraction: s.exchanged_fraction,
            });
        }
    }
    write_json(&root.join("summary.json"), &serde_json::json!({ "runs": entries }))?;
    Ok(entries)
}

#[derive(Serialize)]
pub struct AblateRow {
    pub row: String,
    pub variant: String,
    pub seeds: Vec<u64>,
    /// Mean ensemble validation loss over tasks, per seed.
    pub ensemble_loss: Vec<f64>,
    /// Seeds on which the first row's loss is at most this row's.
    pub first_row_not_worse: usize,
    pub runs: Vec<RunSummary>,
}

/// Every row on every seed, seed-paired: seed `s` uses the dataset and the
/// initialization of seed `s` for all rows.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<AblateRow>> {
    let root = PathBuf::from(&cfg.output.dir);
    start_dir(cfg, &root)?;
    let seeds: Vec<u64> = (cfg.train.seed..cfg.train.seed + cfg.ablate.seeds).collect();
    let mut rows: Vec<AblateRow> = Vec::new();
    for row in &cfg.ablate.rows {
        let mut c = cfg.clone();
        c.model.variant = row.clone();
        rows.push(AblateRow {
            row: row.clone(),
            variant: c.variant()?.to_string(),
            seeds: seeds.clone(),
            ensemble_loss: Vec::new(),
            first_row_not_worse: 0,
            runs: Vec::new(),
        });
    }
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let data = dataset(&c)?;
        for r in &mut rows {
            c.model.variant = r.row.clone();
            let dir = root.join(&r.row).join(format!("seed_{seed}"));
            c.output.dir = dir.to_string_lossy().into_owned();
            let s = train_in(&c, &data, &dir, None)?;
            r.ensemble_loss.push(s.ensemble_loss());
            r.runs.push(s);
        }
    }
    let first = rows[0].ensemble_loss.clone();
    for r in &mut rows {
        r.first_row_not_worse = first.iter().zip(&r.ensemble_loss).filter(|(a, b)| a <= b).count();
    }
    write_json(&root.join("summary.json"), &serde_json::json!({ "rows": rows }))?;
    Ok(rows)
}
