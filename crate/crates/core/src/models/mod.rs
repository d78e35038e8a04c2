//! Encoder-decoder assemblies for multimodal fusion, cycle fusion,
//! multitask learning and multimodal multitask learning.
//!
//! Every assembly keeps convolution weights in one [`ParamStore`] and
//! normalization layers in private [`NormBank`]s. A *lane* is one stream:
//! an input modality pushed through an encoder and a decoder with the
//! norm layers of one bank. Lanes that exchange channels at a layer form an
//! [`ExchangeGroup`]; a *flow* is the set of lanes that must run together.

mod build;
mod forward;

use std::fmt;
use std::str::FromStr;

use cen_autograd::Element;

pub use build::build_model;
pub use forward::{update_decision_scores, FlowOutput, ForwardContext, TaskOutput, TaskValues};

use crate::batch::TargetKind;
use crate::error::{CenError, Result};
use crate::exchange::{ExchangePlan, ExchangeVariant, ThresholdRule};
use crate::normalization::{NormBank, NormMode};
use crate::params::{ParamId, ParamRole, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderStage {
    pub channels: usize,
    pub kernel: usize,
    /// Nearest-neighbour factor applied before the convolution.
    pub upsample: usize,
}

/// Where channel exchange happens. `Auto` picks the topology's own side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExchangeSide {
    Auto,
    Encoder,
    Decoder,
    Both,
    None,
}

impl ExchangeSide {
    pub fn name(self) -> &'static str {
        match self {
            ExchangeSide::Auto => "auto",
            ExchangeSide::Encoder => "encoder",
            ExchangeSide::Decoder => "decoder",
            ExchangeSide::Both => "both",
            ExchangeSide::None => "none",
        }
    }
}

impl FromStr for ExchangeSide {
    type Err = CenError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => ExchangeSide::Auto,
            "encoder" => ExchangeSide::Encoder,
            "decoder" => ExchangeSide::Decoder,
            "both" => ExchangeSide::Both,
            "none" => ExchangeSide::None,
            _ => return Err(CenError::Config(format!("unknown exchange side '{s}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub in_channels: usize,
    pub encoder: Vec<EncoderStage>,
    /// Normalized decoder stages; the head follows them.
    pub decoder: Vec<DecoderStage>,
    pub head_kernel: usize,
    pub head_upsample: usize,
    pub norm_mode: NormMode,
    pub exchange_on: ExchangeSide,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            in_channels: 1,
            encoder: vec![
                EncoderStage { channels: 8, kernel: 3, stride: 2 },
                EncoderStage { channels: 16, kernel: 3, stride: 2 },
                EncoderStage { channels: 32, kernel: 3, stride: 2 },
            ],
            decoder: vec![
                DecoderStage { channels: 16, kernel: 3, upsample: 2 },
                DecoderStage { channels: 8, kernel: 3, upsample: 2 },
            ],
            head_kernel: 3,
            head_upsample: 2,
            norm_mode: NormMode::Batch,
            exchange_on: ExchangeSide::Auto,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// `m1` inputs, one output.
    Multimodal { m1: usize },
    /// Three modalities; task `j` predicts modality `j` from the other two.
    /// `shared_decoder = false` gives one decoder per task.
    Cycle { shared_decoder: bool },
    /// One input, `m2` outputs.
    Multitask { m2: usize },
    /// `m1` inputs, `m2` outputs.
    MmMt { m1: usize, m2: usize },
}

impl Topology {
    pub fn name(&self) -> &'static str {
        match self {
            Topology::Multimodal { .. } => "multimodal",
            Topology::Cycle { .. } => "cycle",
            Topology::Multitask { .. } => "multitask",
            Topology::MmMt { .. } => "mm_mt",
        }
    }

    pub fn num_tasks(&self) -> usize {
        match *self {
            Topology::Multimodal { .. } => 1,
            Topology::Cycle { .. } => 3,
            Topology::Multitask { m2 } | Topology::MmMt { m2, .. } => m2,
        }
    }

    fn default_side(&self) -> ExchangeSide {
        match self {
            Topology::Multimodal { .. } | Topology::Cycle { .. } => ExchangeSide::Encoder,
            Topology::Multitask { .. } => ExchangeSide::Decoder,
            Topology::MmMt { .. } => ExchangeSide::Both,
        }
    }
}

/// What happens at an exchange site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fusion {
    Exchange(ExchangeVariant),
    None,
    Average,
    /// Concatenate all streams and mix back with a shared 1x1 convolution.
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptions {
    pub fusion: Fusion,
    /// Whether the L1 penalty on scaling factors applies.
    pub sparsity: bool,
    /// Penalize and exchange over all channels instead of per-stream blocks.
    pub all_channels: bool,
    /// One norm bank for every stream.
    pub shared_norms: bool,
    /// One encoder per stream.
    pub unshared_convs: bool,
    /// Restrict a multimodal model to these dataset inputs.
    pub input_modalities: Option<Vec<usize>>,
    pub theta: f64,
    pub rule: ThresholdRule,
}

impl ModelOptions {
    pub fn cen(theta: f64) -> Self {
        ModelOptions {
            fusion: Fusion::Exchange(ExchangeVariant::Threshold),
            sparsity: true,
            all_channels: false,
            shared_norms: false,
            unshared_convs: false,
            input_modalities: None,
            theta,
            rule: ThresholdRule::Magnitude,
        }
    }
}

/// Named model configurations compared in the ablations.
#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    /// Threshold exchange with block-restricted L1.
    Cen,
    /// Block-restricted L1, no exchange.
    NoExchange,
    ZeroOut,
    /// L1 and the threshold rule over all channels.
    AllChannel,
    Fixed(f64),
    Random(f64),
    /// Shared convolutions and shared norms, no exchange.
    SharedNorms,
    /// Private convolutions and norms, no exchange.
    Unshared,
    Concat,
    Average,
    /// Single-input model on one modality.
    Unimodal(usize),
}

impl Variant {
    pub fn options(&self, theta: f64) -> ModelOptions {
        let base = ModelOptions::cen(theta);
        let plain = ModelOptions { sparsity: false, fusion: Fusion::None, ..base.clone() };
        match *self {
            Variant::Cen => base,
            Variant::NoExchange => ModelOptions { fusion: Fusion::None, ..base },
            Variant::ZeroOut => ModelOptions { fusion: Fusion::Exchange(ExchangeVariant::ZeroOut), ..base },
            Variant::AllChannel => {
                ModelOptions { fusion: Fusion::Exchange(ExchangeVariant::NoDivide), all_channels: true, ..base }
            }
            Variant::Fixed(p) => ModelOptions { fusion: Fusion::Exchange(ExchangeVariant::FixedFraction(p)), ..plain },
            Variant::Random(p) => ModelOptions { fusion: Fusion::Exchange(ExchangeVariant::RandomFraction(p)), ..plain },
            Variant::SharedNorms => ModelOptions { shared_norms: true, ..plain },
            Variant::Unshared => ModelOptions { unshared_convs: true, ..plain },
            Variant::Concat => ModelOptions { fusion: Fusion::Concat, ..plain },
            Variant::Average => ModelOptions { fusion: Fusion::Average, ..plain },
            Variant::Unimodal(m) => ModelOptions { input_modalities: Some(vec![m]), ..plain },
        }
    }

    /// Topology actually built for this variant.
    pub fn topology(&self, requested: Topology) -> Topology {
        match (self, requested) {
            (Variant::Unimodal(_), Topology::Multimodal { .. }) => Topology::Multimodal { m1: 1 },
            _ => requested,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Cen => write!(f, "cen"),
            Variant::NoExchange => write!(f, "no-exchange"),
            Variant::ZeroOut => write!(f, "zero-out"),
            Variant::AllChannel => write!(f, "all-channel"),
            Variant::Fixed(p) => write!(f, "fixed:{p}"),
            Variant::Random(p) => write!(f, "random:{p}"),
            Variant::SharedNorms => write!(f, "shared-norms"),
            Variant::Unshared => write!(f, "unshared"),
            Variant::Concat => write!(f, "concat"),
            Variant::Average => write!(f, "average"),
            Variant::Unimodal(m) => write!(f, "unimodal:{m}"),
        }
    }
}

impl FromStr for Variant {
    type Err = CenError;

    fn from_str(s: &str) -> Result<Self> {
        let fraction = |p: &str| -> Result<f64> {
            match ExchangeVariant::from_str(&format!("fixed:{p}"))? {
                ExchangeVariant::FixedFraction(v) => Ok(v),
                _ => unreachable!(),
            }
        };
        Ok(match s {
            "cen" | "exchange" => Variant::Cen,
            "no-exchange" => Variant::NoExchange,
            "zero-out" => Variant::ZeroOut,
            "all-channel" => Variant::AllChannel,
            "shared-norms" => Variant::SharedNorms,
            "unshared" => Variant::Unshared,
            "concat" => Variant::Concat,
            "average" => Variant::Average,
            _ => {
                if let Some(p) = s.strip_prefix("fixed:") {
                    Variant::Fixed(fraction(p)?)
                } else if let Some(p) = s.strip_prefix("random:") {
                    Variant::Random(fraction(p)?)
                } else if let Some(m) = s.strip_prefix("unimodal:") {
                    Variant::Unimodal(m.parse().map_err(|_| CenError::Config(format!("bad modality in '{s}'")))?)
                } else {
                    return Err(CenError::Config(format!("unknown variant '{s}'")));
                }
            }
        })
    }
}

/// One convolution, optionally preceded by nearest upsampling.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub upsample: usize,
}

/// Encoder stages, or decoder stages followed by the head.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

/// One stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lane {
    /// Index into the batch inputs.
    pub modality: usize,
    pub task: usize,
    pub encoder: usize,
    pub decoder: usize,
    /// Banks holding this lane's encoder and decoder norm layers.
    pub enc_bank: usize,
    pub dec_bank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
}

impl Part {
    pub fn tag(self) -> &'static str {
        match self {
            Part::Encoder => "enc",
            Part::Decoder => "dec",
        }
    }
}

/// Lanes fused with each other at every normalized layer of one part.
/// Lane order fixes region order.
#[derive(Clone, Debug)]
pub struct ExchangeGroup {
    pub part: Part,
    pub lanes: Vec<usize>,
    pub plan: ExchangePlan,
    /// False when the part is not an exchange site for this model.
    pub active: bool,
}

/// Lanes that run in one forward pass.
#[derive(Clone, Debug)]
pub struct Flow {
    pub lanes: Vec<usize>,
    pub groups: Vec<ExchangeGroup>,
}

/// Softmax-weighted ensemble over the lanes of each task.
#[derive(Clone, Debug)]
pub struct DecisionScores {
    /// Logit parameter per task, one entry per lane in `lanes[task]`.
    pub logits: Vec<ParamId>,
    pub lanes: Vec<Vec<usize>>,
}

impl DecisionScores {
    /// `alpha = softmax(logits)` for `task`.
    pub fn alphas<T: Element>(&self, store: &ParamStore<T>, task: usize) -> Vec<f64> {
        softmax(&store.value(self.logits[task]).iter().map(|v| v.as_f64()).collect::<Vec<_>>())
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Deduplicated parameter totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub conv: usize,
    pub norm: usize,
    pub fusion: usize,
    pub scores: usize,
}

impl ParamCounts {
    /// Everything except the decision scores.
    pub fn generator(&self) -> usize {
        self.conv + self.norm + self.fusion
    }

    pub fn total(&self) -> usize {
        self.generator() + self.scores
    }
}

/// A built model: parameters, banks, lanes, flows and decision scores.
#[derive(Clone, Debug)]
pub struct ModelAssembly<T: Element> {
    pub spec: NetSpec,
    pub topology: Topology,
    pub options: ModelOptions,
    pub tasks: Vec<TargetKind>,
    pub store: ParamStore<T>,
    pub encoders: Vec<ConvStack>,
    pub decoders: Vec<ConvStack>,
    pub banks: Vec<NormBank<T>>,
    /// Shared 1x1 mixing convolutions of the concat baseline, per part and layer.
    pub fusers: Vec<(Part, usize, ConvLayer)>,
    pub lanes: Vec<Lane>,
    pub flows: Vec<Flow>,
    pub scores: DecisionScores,
    /// Exchange side after resolving `Auto`.
    pub side: ExchangeSide,
}

impl<T: Element> ModelAssembly<T> {
    pub fn num_flows(&self) -> usize {
        self.flows.len()
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let is_fuser = |name: &str| name.starts_with("fuse.");
        ParamCounts {
            conv: self.store.count_where(|p| {
                matches!(p.role, ParamRole::ConvWeight | ParamRole::ConvBias) && !is_fuser(&p.name)
            }),
            norm: self.store.count_where(|p| matches!(p.role, ParamRole::Gamma | ParamRole::Beta)),
            fusion: self.store.count_where(|p| is_fuser(&p.name)),
            scores: self.store.count_where(|p| p.role == ParamRole::ScoreLogit),
        }
    }

    /// Number of private (modality, task) norm banks.
    pub fn count_norm_sets(&self) -> usize {
        self.banks.iter().filter(|b| b.private).count()
    }

    /// Gamma parameters of `lane` at every normalized layer of `part`.
    pub fn lane_gammas(&self, lane: usize, part: Part) -> Vec<ParamId> {
        let l = &self.lanes[lane];
        match part {
            Part::Encoder => self.banks[l.enc_bank].encoder.iter().map(|n| n.gamma).collect(),
            Part::Decoder => self.banks[l.dec_bank].decoder.iter().map(|n| n.gamma).collect(),
        }
    }

    /// Every exchange group of every flow, with its flow index.
    pub fn groups(&self) -> impl Iterator<Item = (usize, &ExchangeGroup)> {
        self.flows.iter().enumerate().flat_map(|(f, flow)| flow.groups.iter().map(move |g| (f, g)))
    }
}
