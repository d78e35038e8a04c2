//! Experiment configuration: a TOML file with the sections `data`, `model`,
//! `train`, `sweep`, `ablate` and `output`. Every key is optional; unknown
//! keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use cen_core::exchange::ThresholdRule;
use cen_core::harness::TrainConfig;
use cen_core::models::{DecoderStage, EncoderStage, ExchangeSide, NetSpec, Topology, Variant};
use cen_core::normalization::NormMode;
use cen_core::synthdata::{DataParams, TaskKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// A number, or `"auto"` for the task's own default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KnobRepr", into = "KnobRepr")]
pub enum Knob {
    Auto,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KnobRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<KnobRepr> for Knob {
    type Error = String;

    fn try_from(r: KnobRepr) -> std::result::Result<Self, String> {
        match r {
            KnobRepr::Number(v) => Ok(Knob::Value(v)),
            KnobRepr::Text(s) if s == "auto" => Ok(Knob::Auto),
            KnobRepr::Text(s) => Err(format!("expected a number or \"auto\", got \"{s}\"")),
        }
    }
}

impl From<Knob> for KnobRepr {
    fn from(k: Knob) -> Self {
        match k {
            Knob::Auto => KnobRepr::Text("auto".into()),
            Knob::Value(v) => KnobRepr::Number(v),
        }
    }
}

impl Knob {
    fn or(self, default: f64) -> f64 {
        match self {
            Knob::Auto => default,
            Knob::Value(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: String,
    pub n_train: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub bumps: usize,
    pub coarse_sigma: f64,
    pub edge_sigma: f64,
    pub noisy_sigma: f64,
    /// Saved dataset to load instead of generating one; empty generates.
    pub file: String,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = DataParams::default();
        DataSection {
            kind: TaskKind::FusionRegression.name().into(),
            n_train: 256,
            n_val: 64,
            height: p.height,
            width: p.width,
            bumps: p.bumps,
            coarse_sigma: p.coarse_sigma,
            edge_sigma: p.edge_sigma,
            noisy_sigma: p.noisy_sigma,
            file: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    /// Cycle topology only: one decoder for all three tasks.
    pub shared_decoder: bool,
    pub norm: String,
    pub exchange_on: String,
    pub rule: String,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let spec = NetSpec::default();
        ModelSection {
            variant: "cen".into(),
            shared_decoder: true,
            norm: "batch".into(),
            exchange_on: "auto".into(),
            rule: "magnitude".into(),
            encoder_channels: spec.encoder.iter().map(|s| s.channels).collect(),
            decoder_channels: spec.decoder.iter().map(|s| s.channels).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub precision: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_scores: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: Knob,
    pub theta: Knob,
    pub lr_decay_epoch: usize,
    pub random_flow: bool,
    pub trace_every: usize,
    /// Extra checkpoints every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            precision: "f32".into(),
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_encoder: t.lr_encoder,
            lr_decoder: t.lr_decoder,
            lr_scores: t.lr_scores,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lambda: Knob::Auto,
            theta: Knob::Auto,
            lr_decay_epoch: t.lr_decay_epoch,
            random_flow: t.random_flow,
            trace_every: t.trace_every,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    /// Empty uses the resolved training theta.
    pub thetas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { lambdas: vec![1e-4, 1e-3, 1e-2], thetas: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub rows: Vec<String>,
    /// Seeds `train.seed .. train.seed + seeds`.
    pub seeds: u64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { rows: vec!["exchange".into(), "no-exchange".into()], seeds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs/default".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub ablate: AblateSection,
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Where a value came from, for error messages.
struct Source<'a> {
    path: &'a Path,
    text: &'a str,
}

impl Source<'_> {
    /// Line of `key` inside `[section]`, 1-based.
    fn line_of(&self, section: &str, key: &str) -> Option<usize> {
        let mut current = String::new();
        for (i, line) in self.text.lines().enumerate() {
            let t = line.trim();
            if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                current = name.trim().to_string();
            } else if current == section {
                if let Some((k, _)) = t.split_once('=') {
                    if k.trim() == key {
                        return Some(i + 1);
                    }
                }
            }
        }
        None
    }

    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> CliError {
        CliError::Config { path: self.path.to_path_buf(), line: self.line_of(section, key), message: message.into() }
    }
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    /// Parses and validates `text`; `path` is only used in messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_at(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate_in(&Source { path, text })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Re-checks constraints after command-line overrides.
    pub fn validate(&self) -> Result<()> {
        self.validate_in(&Source { path: Path::new("<resolved>"), text: "" })
    }

    fn validate_in(&self, src: &Source) -> Result<()> {
        let kind = self.kind().map_err(|e| src.err("data", "kind", e.to_string()))?;
        let d = &self.data;
        for (key, v) in [("n_train", d.n_train), ("n_val", d.n_val), ("bumps", d.bumps)] {
            if v == 0 {
                return Err(src.err("data", key, format!("{key} must be >= 1")));
            }
        }
        for (key, v) in [("height", d.height), ("width", d.width)] {
            if v < 8 {
                return Err(src.err("data", key, format!("{key} must be >= 8, got {v}")));
            }
        }
        for (key, v) in [("coarse_sigma", d.coarse_sigma), ("edge_sigma", d.edge_sigma), ("noisy_sigma", d.noisy_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(src.err("data", key, format!("{key} must be >= 0, got {v}")));
            }
        }

        let m = &self.model;
        self.variant().map_err(|e| src.err("model", "variant", e.to_string()))?;
        self.norm_mode().map_err(|e| src.err("model", "norm", e))?;
        self.exchange_side().map_err(|e| src.err("model", "exchange_on", e.to_string()))?;
        self.rule().map_err(|e| src.err("model", "rule", e))?;
        if m.encoder_channels.is_empty() || m.encoder_channels.contains(&0) {
            return Err(src.err("model", "encoder_channels", "encoder_channels must be non-empty and positive"));
        }
        if m.decoder_channels.contains(&0) {
            return Err(src.err("model", "decoder_channels", "decoder_channels must be positive"));
        }
        let factor = 1usize << m.encoder_channels.len().min(16);
        if d.height % factor != 0 || d.width % factor != 0 {
            return Err(src.err(
                "model",
                "encoder_channels",
                format!("{} encoder stages need height and width divisible by {factor}", m.encoder_channels.len()),
            ));
        }

        self.precision().map_err(|e| src.err("train", "precision", e))?;
        let t = &self.train;
        for (key, k) in [("lambda", t.lambda), ("theta", t.theta)] {
            if let Knob::Value(v) = k {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(src.err("train", key, format!("{key} must be >= 0, got {v}")));
                }
            }
        }
        let tc = self.train_config(kind);
        tc.validate().map_err(|e| {
            let msg = e.to_string();
            let key = ["lr_encoder", "lr_decoder", "lr_scores", "weight_decay", "momentum", "batch_size", "epochs"]
                .into_iter()
                .find(|k| msg.contains(k))
                .unwrap_or("trace_every");
            src.err("train", key, msg)
        })?;

        for (key, vals) in [("lambdas", &self.sweep.lambdas), ("thetas", &self.sweep.thetas)] {
            if let Some(v) = vals.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(src.err("sweep", key, format!("{key} must be >= 0, got {v}")));
            }
        }
        if self.sweep.lambdas.is_empty() {
            return Err(src.err("sweep", "lambdas", "lambdas must not be empty"));
        }
        if self.ablate.rows.is_empty() {
            return Err(src.err("ablate", "rows", "rows must not be empty"));
        }
        for r in &self.ablate.rows {
            r.parse::<Variant>().map_err(|e| src.err("ablate", "rows", e.to_string()))?;
        }
        if self.ablate.seeds == 0 {
            return Err(src.err("ablate", "seeds", "seeds must be >= 1"));
        }
        if self.output.dir.is_empty() {
            return Err(src.err("output", "dir", "dir must not be empty"));
        }
        Ok(())
    }

    /// The TOML echo written to `resolved_config.txt`.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn kind(&self) -> cen_core::Result<TaskKind> {
        self.data.kind.parse()
    }

    pub fn variant(&self) -> cen_core::Result<Variant> {
        self.model.variant.parse()
    }

    pub fn precision(&self) -> std::result::Result<Precision, String> {
        match self.train.precision.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            p => Err(format!("precision must be \"f32\" or \"f64\", got \"{p}\"")),
        }
    }

    fn norm_mode(&self) -> std::result::Result<NormMode, String> {
        match self.model.norm.as_str() {
            "batch" => Ok(NormMode::Batch),
            "instance" => Ok(NormMode::Instance),
            n => Err(format!("norm must be \"batch\" or \"instance\", got \"{n}\"")),
        }
    }

    fn exchange_side(&self) -> cen_core::Result<ExchangeSide> {
        self.model.exchange_on.parse()
    }

    pub fn rule(&self) -> std::result::Result<ThresholdRule, String> {
        match self.model.rule.as_str() {
            "magnitude" => Ok(ThresholdRule::Magnitude),
            "signed" => Ok(ThresholdRule::Signed),
            r => Err(format!("rule must be \"magnitude\" or \"signed\", got \"{r}\"")),
        }
    }

    pub fn data_params(&self) -> DataParams {
        let d = &self.data;
        DataParams {
            height: d.height,
            width: d.width,
            bumps: d.bumps,
            coarse_sigma: d.coarse_sigma,
            edge_sigma: d.edge_sigma,
            noisy_sigma: d.noisy_sigma,
        }
    }

    pub fn dataset_file(&self) -> Option<PathBuf> {
        (!self.data.file.is_empty()).then(|| PathBuf::from(&self.data.file))
    }

    /// Encoder stages halve the resolution; the decoder stages and the head
    /// double it back.
    pub fn net_spec(&self) -> NetSpec {
        let m = &self.model;
        let enc = m.encoder_channels.len();
        let dec = m.decoder_channels.len();
        let encoder = m.encoder_channels.iter().map(|&channels| EncoderStage { channels, kernel: 3, stride: 2 }).collect();
        // Upsampling is spread so the output matches the input size.
        let mut ups: Vec<usize> = vec![1; dec + 1];
        for i in 0..enc {
            let slot = (dec + 1).saturating_sub(enc) + i;
            ups[slot.min(dec)] *= 2;
        }
        let decoder =
            m.decoder_channels.iter().zip(&ups).map(|(&channels, &upsample)| DecoderStage { channels, kernel: 3, upsample }).collect();
        NetSpec {
            encoder,
            decoder,
            head_upsample: ups[dec],
            norm_mode: self.norm_mode().unwrap(),
            exchange_on: self.exchange_side().unwrap(),
            ..NetSpec::default()
        }
    }

    pub fn topology(&self, kind: TaskKind) -> Topology {
        match kind.default_topology() {
            Topology::Cycle { .. } => Topology::Cycle { shared_decoder: self.model.shared_decoder },
            t => t,
        }
    }

    pub fn train_config(&self, kind: TaskKind) -> TrainConfig {
        let t = &self.train;
        let regime = TrainConfig::for_task(kind);
        TrainConfig {
            lr_encoder: t.lr_encoder,
            lr_decoder: t.lr_decoder,
            lr_scores: t.lr_scores,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lambda: t.lambda.or(regime.lambda),
            theta: t.theta.or(regime.theta),
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr_decay_epoch: t.lr_decay_epoch,
            seed: t.seed,
            random_flow: t.random_flow,
            trace_every: t.trace_every,
        }
    }
}
