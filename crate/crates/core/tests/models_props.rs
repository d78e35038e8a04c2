use std::collections::HashSet;

use cen_autograd::Tensor;
use cen_core::batch::{Batch, Target, TargetKind};
use cen_core::harness::{train_step, TrainConfig};
use cen_core::models::{
    build_model, softmax, update_decision_scores, ExchangeSide, ForwardContext, ModelAssembly, NetSpec, Part, Topology,
    Variant,
};
use cen_core::normalization::StatsMode;
use cen_core::params::Side;
use cen_core::synthdata::{make_dataset, TaskKind};
use cen_core::CenError;

const REG: TargetKind = TargetKind::Regression;

fn model(topology: Topology, variant: &Variant, tasks: &[TargetKind], seed: u64) -> ModelAssembly<f64> {
    build_model(&NetSpec::default(), variant.topology(topology), tasks, &variant.options(1e-2), seed).unwrap()
}

fn probe_ctx() -> ForwardContext {
    ForwardContext::new(StatsMode::Probe)
}

#[test]
fn norm_bank_counts_follow_the_topology() {
    let seg = TargetKind::Classes(4);
    let cases: [(Topology, Vec<TargetKind>, usize); 5] = [
        (Topology::Multimodal { m1: 2 }, vec![REG], 2),
        (Topology::Cycle { shared_decoder: true }, vec![REG; 3], 6),
        (Topology::Cycle { shared_decoder: false }, vec![REG; 3], 6),
        (Topology::Multitask { m2: 2 }, vec![REG, REG], 2),
        (Topology::MmMt { m1: 2, m2: 2 }, vec![REG, seg], 4),
    ];
    for (topo, tasks, banks) in cases {
        let a = model(topo, &Variant::Cen, &tasks, 0);
        assert_eq!(a.count_norm_sets(), banks, "{topo:?}");
    }
}

#[test]
fn three_stream_fusion_needs_channels_divisible_by_three() {
    let mut spec = NetSpec::default();
    for (s, c) in spec.encoder.iter_mut().zip([12, 24, 48]) {
        s.channels = c;
    }
    let opts = Variant::Cen.options(1e-2);
    let a = build_model::<f64>(&spec, Topology::Multimodal { m1: 3 }, &[REG], &opts, 0).unwrap();
    assert_eq!(a.count_norm_sets(), 3);
    let r = build_model::<f64>(&NetSpec::default(), Topology::Multimodal { m1: 3 }, &[REG], &opts, 0);
    assert!(matches!(r, Err(CenError::Config(_))));
}

#[test]
fn shared_cycle_needs_about_a_third_of_three_pairs() {
    let cycle = model(Topology::Cycle { shared_decoder: true }, &Variant::Cen, &[REG; 3], 0).count_parameters();
    let pair = model(Topology::Multimodal { m1: 2 }, &Variant::Cen, &[REG], 0).count_parameters();
    let ratio = cycle.generator() as f64 / (3 * pair.generator()) as f64;
    assert!(ratio < 0.40, "{ratio}");
    assert!(ratio > 1.0 / 3.0);
    // Exact arithmetic: both keep one shared decoder norm set (gamma and beta
    // of the 16- and 8-channel stages); the cycle has one conv store and six
    // encoder banks where three pairs have three stores and six banks.
    let dec_norms = 2 * (16 + 8);
    assert_eq!(cycle.generator(), pair.conv + 3 * (pair.norm - dec_norms) + dec_norms);
    let unshared = model(Topology::Cycle { shared_decoder: false }, &Variant::Cen, &[REG; 3], 0).count_parameters();
    assert!(unshared.generator() > cycle.generator());
}

#[test]
fn multimodal_pair_wiring() {
    let a = model(Topology::Multimodal { m1: 2 }, &Variant::Cen, &[REG], 0);
    assert_eq!((a.encoders.len(), a.decoders.len(), a.lanes.len()), (1, 1, 2));
    assert_eq!(a.side, ExchangeSide::Encoder);
    let groups: Vec<_> = a.groups().map(|(_, g)| g).filter(|g| g.active).collect();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].part, Part::Encoder);
    assert_eq!(groups[0].plan.region(0, 8).unwrap(), 0..4);
    assert_eq!(groups[0].plan.region(1, 8).unwrap(), 4..8);
    assert_ne!(a.lanes[0].enc_bank, a.lanes[1].enc_bank);
}

#[test]
fn multitask_exchanges_in_decoders_only() {
    let a = model(Topology::Multitask { m2: 2 }, &Variant::Cen, &[REG, REG], 0);
    assert_eq!(a.side, ExchangeSide::Decoder);
    assert_eq!(a.encoders.len(), 1);
    assert_eq!(a.decoders.len(), 2);
    let active: Vec<_> = a.groups().map(|(_, g)| g).filter(|g| g.active).collect();
    assert!(!active.is_empty());
    assert!(active.iter().all(|g| g.part == Part::Decoder));
    assert_eq!(a.lanes[0].enc_bank, a.lanes[1].enc_bank);
}

#[test]
fn banks_never_alias() {
    for (topo, tasks) in [
        (Topology::Cycle { shared_decoder: true }, vec![REG; 3]),
        (Topology::MmMt { m1: 2, m2: 2 }, vec![REG, REG]),
    ] {
        let a = model(topo, &Variant::Cen, &tasks, 0);
        let mut seen = HashSet::new();
        for bank in &a.banks {
            for n in bank.encoder.iter().chain(&bank.decoder) {
                assert!(seen.insert(n.gamma) && seen.insert(n.beta), "{topo:?}: shared norm parameter");
            }
        }
    }
}

#[test]
fn indivisible_channels_are_configuration_errors() {
    let mut spec = NetSpec::default();
    spec.encoder[0].channels = 9;
    let r = build_model::<f64>(&spec, Topology::Multimodal { m1: 2 }, &[REG], &Variant::Cen.options(1e-2), 0);
    assert!(matches!(r, Err(CenError::Config(_))));
}

fn fusion_batch(seed: u64, n: usize) -> Batch<f64> {
    let data = make_dataset(TaskKind::FusionRegression, n, 1, seed).unwrap();
    data.batch(&data.train, &(0..n).collect::<Vec<_>>()).unwrap()
}

#[test]
fn zero_threshold_fresh_model_runs_independent_streams() {
    let batch = fusion_batch(1, 4);
    let mut cen = model(Topology::Multimodal { m1: 2 }, &Variant::Cen, &[REG], 3);
    cen.options.theta = 0.0;
    for g in cen.flows.iter_mut().flat_map(|f| f.groups.iter_mut()) {
        g.plan.theta = 0.0;
    }
    let mut plain = model(Topology::Multimodal { m1: 2 }, &Variant::NoExchange, &[REG], 3);
    let a = cen.predict(&batch, &probe_ctx()).unwrap();
    let b = plain.predict(&batch, &probe_ctx()).unwrap();
    assert_eq!(a[0].predictions, b[0].predictions);
    assert_eq!(a[0].ensemble, b[0].ensemble);
}

#[test]
fn identical_inputs_give_identical_streams() {
    let mut batch = fusion_batch(2, 3);
    batch.inputs[1] = batch.inputs[0].clone();
    for variant in [Variant::Cen, Variant::SharedNorms] {
        let mut a = model(Topology::Multimodal { m1: 2 }, &variant, &[REG], 5);
        let out = a.predict(&batch, &probe_ctx()).unwrap();
        assert_eq!(out[0].predictions[0], out[0].predictions[1], "{variant}");
        assert_eq!(out[0].ensemble, out[0].predictions[0], "{variant}");
    }
    // Shared norms keep streams identical through training as well.
    let mut a = model(Topology::Multimodal { m1: 2 }, &Variant::SharedNorms, &[REG], 5);
    assert_eq!(a.count_norm_sets(), 0);
    let cfg = TrainConfig::for_task(TaskKind::FusionRegression);
    train_step(&mut a, &fusion_batch(4, 4), &cfg, 0, 1.0).unwrap();
    let out = a.predict(&batch, &probe_ctx()).unwrap();
    assert_eq!(out[0].predictions[0], out[0].predictions[1]);
}

#[test]
fn ensemble_is_the_alpha_weighted_sum() {
    let batch = fusion_batch(6, 4);
    let mut a = model(Topology::Multimodal { m1: 2 }, &Variant::Cen, &[REG], 6);
    let cfg = TrainConfig::for_task(TaskKind::FusionRegression);
    train_step(&mut a, &batch, &cfg, 0, 1.0).unwrap();
    let id = a.scores.logits[0];
    a.store.get_mut(id).value.data_mut().copy_from_slice(&[0.7, -0.4]);
    let alpha = a.scores.alphas(&a.store, 0);
    let out = a.predict(&batch, &probe_ctx()).unwrap();
    let (p0, p1) = (out[0].predictions[0].data(), out[0].predictions[1].data());
    for (i, &e) in out[0].ensemble.data().iter().enumerate() {
        assert!((e - (alpha[0] * p0[i] + alpha[1] * p1[i])).abs() < 1e-12);
    }
}

#[test]
fn decision_scores_favor_the_exact_stream() {
    let mut a = model(Topology::Multimodal { m1: 2 }, &Variant::Cen, &[REG], 7);
    let alpha = a.scores.alphas(&a.store, 0);
    assert_eq!(alpha, vec![0.5, 0.5]);
    let target = Tensor::from_fn([2, 1, 4, 4], |i| (i as f64 * 0.37).sin());
    let off = Tensor::from_fn([2, 1, 4, 4], |i| (i as f64 * 0.37).sin() + 0.3 * (i as f64).cos());
    let preds = [target.clone(), off];
    let t = Target::Regression(target);
    let mut last = 0.5;
    for step in 0..100 {
        a.score_step(0, &preds, &t, 0.05).unwrap();
        let alpha = a.scores.alphas(&a.store, 0);
        assert!(alpha[0] > last, "step {step}: {alpha:?}");
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        last = alpha[0];
    }
}

#[test]
fn score_updates_leave_subnetworks_untouched() {
    let data = make_dataset(TaskKind::MmMtQuad, 4, 1, 8).unwrap();
    let batch = data.batch::<f64>(&data.train, &[0, 1, 2, 3]).unwrap();
    let mut a: ModelAssembly<f64> = build_model(
        &NetSpec::default(),
        TaskKind::MmMtQuad.default_topology(),
        &data.target_kinds,
        &Variant::Cen.options(1e-2),
        8,
    )
    .unwrap();
    let subnet = |a: &ModelAssembly<f64>| a.store.checksum_where(|p| p.side != Side::Scores);
    let scores = |a: &ModelAssembly<f64>| a.store.checksum_where(|p| p.side == Side::Scores);
    let banks: Vec<_> = a.banks.iter().map(|b| (b.encoder.clone(), b.decoder.clone())).collect();
    let (before, before_scores) = (subnet(&a), scores(&a));
    for _ in 0..5 {
        update_decision_scores(&mut a, &batch, 0.05).unwrap();
        assert_eq!(subnet(&a), before);
        for t in 0..2 {
            let alpha = a.scores.alphas(&a.store, t);
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(alpha.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }
    assert_ne!(scores(&a), before_scores);
    for (b, (enc, dec)) in a.banks.iter().zip(banks) {
        for (n, m) in b.encoder.iter().zip(&enc).chain(b.decoder.iter().zip(&dec)) {
            assert_eq!((&n.running_mean, &n.running_var), (&m.running_mean, &m.running_var));
        }
    }
}

#[test]
fn softmax_is_on_the_simplex_for_extreme_logits() {
    for z in [vec![0.0, 0.0, 0.0], vec![800.0, -800.0], vec![1e-3, 50.0, -20.0, 3.0]] {
        let a = softmax(&z);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn out_of_range_flow_is_a_validation_error() {
    let mut a = model(Topology::Multimodal { m1: 2 }, &Variant::Cen, &[REG], 0);
    let batch = fusion_batch(0, 2);
    let mut g = cen_autograd::Graph::new();
    let mut bind = cen_core::params::Bindings::new(&a.store);
    let inputs: Vec<_> = batch.inputs.iter().map(|x| g.constant(x.clone())).collect();
    assert!(matches!(a.forward(&mut g, &mut bind, &inputs, 3, &probe_ctx()), Err(CenError::Validation(_))));
    assert!(matches!(a.forward(&mut g, &mut bind, &inputs[..1], 0, &probe_ctx()), Err(CenError::Validation(_))));
}
