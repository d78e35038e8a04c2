use std::collections::HashMap;

use cen_autograd::{Element, Tensor};

use super::{
    ConvLayer, ConvStack, DecisionScores, ExchangeGroup, ExchangeSide, Flow, Fusion, Lane, ModelAssembly, ModelOptions,
    NetSpec, Part, Topology,
};
use crate::batch::TargetKind;
use crate::error::{CenError, Result};
use crate::exchange::ExchangePlan;
use crate::normalization::{BankKey, NormBank, NormParams};
use crate::params::{ParamRole, ParamStore, Side};
use crate::rng::{tags, Rng};

struct LanePlan {
    modality: usize,
    task: usize,
    encoder: usize,
    decoder: usize,
    enc_key: BankKey,
    dec_key: BankKey,
}

fn key(modality: Option<usize>, task: Option<usize>) -> BankKey {
    BankKey { modality, task }
}

/// Heads start near zero so the first losses stay at the target scale.
const HEAD_GAIN: f64 = 0.01;

fn conv_param<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    side: Side,
    (cout, cin, k): (usize, usize, usize),
    stride: usize,
    upsample: usize,
    gain: f64,
) -> ConvLayer {
    // Normal weights with variance gain / fan_in, zero bias.
    let std = (gain / (cin * k * k) as f64).sqrt();
    let w = Tensor::from_fn([cout, cin, k, k], |_| T::from_f64_lossy(std * rng.normal()));
    let weight = store.add(format!("{prefix}.weight"), ParamRole::ConvWeight, side, w);
    let bias = store.add(format!("{prefix}.bias"), ParamRole::ConvBias, side, Tensor::zeros([cout]));
    ConvLayer { weight, bias, stride, padding: k / 2, upsample }
}

fn validate_spec(spec: &NetSpec) -> Result<()> {
    if spec.in_channels == 0 || spec.encoder.is_empty() {
        return Err(CenError::Config("network needs input channels and at least one encoder stage".into()));
    }
    let kernels = spec.encoder.iter().map(|s| s.kernel).chain(spec.decoder.iter().map(|s| s.kernel));
    for k in kernels.chain([spec.head_kernel]) {
        if k == 0 || k % 2 == 0 {
            return Err(CenError::Config(format!("kernel sizes must be odd, got {k}")));
        }
    }
    if spec.encoder.iter().any(|s| s.stride == 0 || s.channels == 0)
        || spec.decoder.iter().any(|s| s.upsample == 0 || s.channels == 0)
        || spec.head_upsample == 0
    {
        return Err(CenError::Config("strides, upsample factors and channel counts must be positive".into()));
    }
    Ok(())
}

/// Builds the lanes, banks, exchange groups and parameters of a topology.
///
/// `tasks` gives the output kind of each task; `seed` drives weight
/// initialization.
pub fn build_model<T: Element>(
    spec: &NetSpec,
    topology: Topology,
    tasks: &[TargetKind],
    options: &ModelOptions,
    seed: u64,
) -> Result<ModelAssembly<T>> {
    validate_spec(spec)?;
    if tasks.len() != topology.num_tasks() {
        return Err(CenError::Config(format!(
            "{} topology has {} tasks, got {} task kinds",
            topology.name(),
            topology.num_tasks(),
            tasks.len()
        )));
    }
    let side = match spec.exchange_on {
        ExchangeSide::Auto => topology.default_side(),
        s => s,
    };
    let enc_site = matches!(side, ExchangeSide::Encoder | ExchangeSide::Both);
    let dec_site = matches!(side, ExchangeSide::Decoder | ExchangeSide::Both);
    let unshared = options.unshared_convs;

    // Lanes per flow, and which lanes of a flow form each group.
    let mut plans: Vec<LanePlan> = Vec::new();
    let mut flows_lanes: Vec<Vec<usize>> = Vec::new();
    let mut flow_groups: Vec<Vec<(Part, Vec<usize>)>> = Vec::new();
    match topology {
        Topology::Multimodal { m1 } => {
            if m1 == 0 {
                return Err(CenError::Config("multimodal topology needs at least one input".into()));
            }
            let mods = match &options.input_modalities {
                Some(m) if m.len() != m1 => {
                    return Err(CenError::Config(format!("{} input modalities for {m1} streams", m.len())))
                }
                Some(m) => m.clone(),
                None => (0..m1).collect(),
            };
            for (i, &m) in mods.iter().enumerate() {
                let enc_key = if options.shared_norms { key(None, Some(0)) } else { key(Some(m), Some(0)) };
                let dec_key = if dec_site { enc_key } else { key(None, Some(0)) };
                plans.push(LanePlan {
                    modality: m,
                    task: 0,
                    encoder: if unshared { i } else { 0 },
                    decoder: 0,
                    enc_key,
                    dec_key,
                });
            }
            let all: Vec<usize> = (0..m1).collect();
            flows_lanes.push(all.clone());
            flow_groups.push(vec![(Part::Encoder, all.clone()), (Part::Decoder, all)]);
        }
        Topology::Cycle { shared_decoder } => {
            if options.input_modalities.is_some() || options.shared_norms {
                return Err(CenError::Config("cycle topology does not support this variant".into()));
            }
            for j in 0..3 {
                let mut lanes = Vec::new();
                for m in (0..3).filter(|&m| m != j) {
                    let enc_key = key(Some(m), Some(j));
                    let dec_key = if dec_site {
                        enc_key
                    } else if shared_decoder {
                        key(None, None)
                    } else {
                        key(None, Some(j))
                    };
                    lanes.push(plans.len());
                    plans.push(LanePlan {
                        modality: m,
                        task: j,
                        encoder: if unshared { m } else { 0 },
                        decoder: if shared_decoder { 0 } else { j },
                        enc_key,
                        dec_key,
                    });
                }
                flow_groups.push(vec![(Part::Encoder, lanes.clone()), (Part::Decoder, lanes.clone())]);
                flows_lanes.push(lanes);
            }
        }
        Topology::Multitask { m2 } => {
            if m2 == 0 {
                return Err(CenError::Config("multitask topology needs at least one task".into()));
            }
            if enc_site {
                return Err(CenError::Config("multitask topology has a single encoder stream; exchange on the decoder".into()));
            }
            if options.input_modalities.is_some() || options.shared_norms || unshared {
                return Err(CenError::Config("multitask topology does not support this variant".into()));
            }
            for t in 0..m2 {
                plans.push(LanePlan {
                    modality: 0,
                    task: t,
                    encoder: 0,
                    decoder: t,
                    enc_key: key(Some(0), None),
                    dec_key: key(Some(0), Some(t)),
                });
            }
            let all: Vec<usize> = (0..m2).collect();
            flows_lanes.push(all.clone());
            flow_groups.push(vec![(Part::Decoder, all)]);
        }
        Topology::MmMt { m1, m2 } => {
            if m1 == 0 || m2 == 0 {
                return Err(CenError::Config("mm_mt topology needs at least one input and one task".into()));
            }
            if options.input_modalities.is_some() || options.shared_norms {
                return Err(CenError::Config("mm_mt topology does not support this variant".into()));
            }
            for t in 0..m2 {
                for m in 0..m1 {
                    let k = key(Some(m), Some(t));
                    plans.push(LanePlan {
                        modality: m,
                        task: t,
                        encoder: if unshared { m } else { 0 },
                        decoder: t,
                        enc_key: k,
                        dec_key: k,
                    });
                }
            }
            let mut groups = Vec::new();
            for t in 0..m2 {
                groups.push((Part::Encoder, (0..m1).map(|m| t * m1 + m).collect()));
            }
            for m in 0..m1 {
                groups.push((Part::Decoder, (0..m2).map(|t| t * m1 + m).collect()));
            }
            flows_lanes.push((0..m1 * m2).collect());
            flow_groups.push(groups);
        }
    }

    let mut rng = Rng::stream(seed, &[tags::INIT]);
    let mut store = ParamStore::new();

    // Encoders.
    let n_enc = plans.iter().map(|p| p.encoder).max().unwrap() + 1;
    let mut encoders = Vec::with_capacity(n_enc);
    for e in 0..n_enc {
        let mut cin = spec.in_channels;
        let mut layers = Vec::new();
        for (l, s) in spec.encoder.iter().enumerate() {
            let prefix = if n_enc == 1 { format!("enc.conv{l}") } else { format!("enc{e}.conv{l}") };
            layers.push(conv_param(&mut store, &mut rng, &prefix, Side::Encoder, (s.channels, cin, s.kernel), s.stride, 1, 2.0));
            cin = s.channels;
        }
        encoders.push(ConvStack { layers });
    }

    // Decoders, with head width taken from the tasks they serve.
    let n_dec = plans.iter().map(|p| p.decoder).max().unwrap() + 1;
    let mut decoders = Vec::with_capacity(n_dec);
    for d in 0..n_dec {
        let mut outs = plans.iter().filter(|p| p.decoder == d).map(|p| tasks[p.task].out_channels());
        let out = outs.next().unwrap();
        if outs.any(|o| o != out) {
            return Err(CenError::Config(format!("decoder {d} is shared by tasks with different output widths")));
        }
        let mut cin = spec.encoder.last().unwrap().channels;
        let mut layers = Vec::new();
        let tag = if n_dec == 1 { "dec".to_string() } else { format!("dec{d}") };
        for (l, s) in spec.decoder.iter().enumerate() {
            let prefix = format!("{tag}.conv{l}");
            layers.push(conv_param(&mut store, &mut rng, &prefix, Side::Decoder, (s.channels, cin, s.kernel), 1, s.upsample, 2.0));
            cin = s.channels;
        }
        let prefix = format!("{tag}.head");
        layers.push(conv_param(&mut store, &mut rng, &prefix, Side::Decoder, (out, cin, spec.head_kernel), 1, spec.head_upsample, HEAD_GAIN));
        decoders.push(ConvStack { layers });
    }

    // Norm banks in order of first use.
    let mut bank_index: HashMap<BankKey, usize> = HashMap::new();
    let mut bank_parts: Vec<(BankKey, bool, bool)> = Vec::new();
    let mut lane_banks = Vec::with_capacity(plans.len());
    for p in &plans {
        let mut slot = |k: BankKey, enc: bool| {
            let i = *bank_index.entry(k).or_insert_with(|| {
                bank_parts.push((k, false, false));
                bank_parts.len() - 1
            });
            if enc {
                bank_parts[i].1 = true;
            } else {
                bank_parts[i].2 = true;
            }
            i
        };
        let e = slot(p.enc_key, true);
        let d = slot(p.dec_key, false);
        lane_banks.push((e, d));
    }
    let mode = spec.norm_mode;
    let banks: Vec<NormBank<T>> = bank_parts
        .iter()
        .map(|&(k, enc, dec)| {
            let label = k.label();
            let encoder = if enc {
                spec.encoder
                    .iter()
                    .enumerate()
                    .map(|(l, s)| NormParams::new(&mut store, &format!("bank.{label}.enc{l}"), s.channels, mode, Side::Encoder))
                    .collect()
            } else {
                Vec::new()
            };
            let decoder = if dec {
                spec.decoder
                    .iter()
                    .enumerate()
                    .map(|(l, s)| NormParams::new(&mut store, &format!("bank.{label}.dec{l}"), s.channels, mode, Side::Decoder))
                    .collect()
            } else {
                Vec::new()
            };
            NormBank { key: k, private: k.modality.is_some() && k.task.is_some(), encoder, decoder }
        })
        .collect();

    let lanes: Vec<Lane> = plans
        .iter()
        .zip(&lane_banks)
        .map(|(p, &(e, d))| Lane {
            modality: p.modality,
            task: p.task,
            encoder: p.encoder,
            decoder: p.decoder,
            enc_bank: e,
            dec_bank: d,
        })
        .collect();

    // Exchange groups.
    let mut flows = Vec::with_capacity(flows_lanes.len());
    for (lanes_f, groups) in flows_lanes.into_iter().zip(flow_groups) {
        let mut out = Vec::new();
        for (part, members) in groups {
            let site = match part {
                Part::Encoder => enc_site,
                Part::Decoder => dec_site,
            };
            let plan = ExchangePlan {
                num_streams: members.len(),
                theta: options.theta,
                rule: options.rule,
                all_channels: options.all_channels,
            };
            plan.validate()?;
            let active = site && members.len() >= 2;
            if active {
                let widths: Vec<usize> = match part {
                    Part::Encoder => spec.encoder.iter().map(|s| s.channels).collect(),
                    Part::Decoder => spec.decoder.iter().map(|s| s.channels).collect(),
                };
                for c in widths {
                    plan.region(0, c)?;
                }
            }
            out.push(ExchangeGroup { part, lanes: members, plan, active });
        }
        flows.push(Flow { lanes: lanes_f, groups: out });
    }
    // Concat mixers: one shared 1x1 convolution per fused layer.
    let mut fusers = Vec::new();
    if options.fusion == Fusion::Concat {
        for part in [Part::Encoder, Part::Decoder] {
            let Some(width) = flows.iter().flat_map(|f| &f.groups).find(|g| g.active && g.part == part).map(|g| g.lanes.len())
            else {
                continue;
            };
            let channels: Vec<usize> = match part {
                Part::Encoder => spec.encoder.iter().map(|s| s.channels).collect(),
                Part::Decoder => spec.decoder.iter().map(|s| s.channels).collect(),
            };
            let side = if part == Part::Encoder { Side::Encoder } else { Side::Decoder };
            for (l, c) in channels.into_iter().enumerate() {
                let prefix = format!("fuse.{}{l}", part.tag());
                fusers.push((part, l, conv_param(&mut store, &mut rng, &prefix, side, (c, width * c, 1), 1, 1, 1.0)));
            }
        }
    }

    // Decision scores, zero logits.
    let mut score_lanes = vec![Vec::new(); tasks.len()];
    for (i, l) in lanes.iter().enumerate() {
        score_lanes[l.task].push(i);
    }
    let logits = score_lanes
        .iter()
        .enumerate()
        .map(|(t, ls)| store.add(format!("scores.t{t}.logits"), ParamRole::ScoreLogit, Side::Scores, Tensor::zeros([ls.len()])))
        .collect();

    Ok(ModelAssembly {
        spec: spec.clone(),
        topology,
        options: options.clone(),
        tasks: tasks.to_vec(),
        store,
        encoders,
        decoders,
        banks,
        fusers,
        lanes,
        flows,
        scores: DecisionScores { logits, lanes: score_lanes },
        side,
    })
}
