//! Acceptance run: one PASS/FAIL line per criterion, followed by the
//! measurements behind it. A failed criterion is reported, not hidden; the
//! process still exits 0 so the workspace test run completes.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use cen_autograd::{Element, Tensor};
use cen_core::batch::TargetKind;
use cen_core::harness::{
    metrics_header, metrics_row, record_trace, trace_rows, Checkpoint, RecoveryTracker, TrainConfig, Trainer,
};
use cen_core::models::{build_model, update_decision_scores, ModelAssembly, NetSpec, Topology, Variant};
use cen_core::params::Side;
use cen_core::rng::Rng;
use cen_core::synthdata::{
    complementarity_certificate, make_dataset, make_dataset_with, CertificateFeatures, DataParams, Dataset, TaskKind,
};
use common::{
    exchange_oracle_sweep, random_mask, routing_sensitivities, run_gradient_suite, tensor, GRAD_SEEDS, GRAD_TOL,
};

const KIND: TaskKind = TaskKind::FusionRegression;
const SEEDS: u64 = 5;
const N_TRAIN: usize = 256;
const N_VAL: usize = 64;

struct Report {
    passed: usize,
    total: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        self.total += 1;
        self.passed += pass as usize;
        println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn info(s: String) {
    println!("       {s}");
}

/// Outcome of one 60-epoch fusion run.
struct Run {
    ensemble_mse: f64,
    ensemble_loss: f64,
    lane_mse: Vec<f64>,
    exchanged_fraction: f64,
    fallen: usize,
    recovered: usize,
    /// Largest |sum(alpha) - 1| seen after any step, and the smallest alpha.
    simplex_error: f64,
    min_alpha: f64,
    secs: f64,
    assembly: ModelAssembly<f32>,
}

/// Datasets and finished runs keyed by (variant, seed, lambda).
struct Runs {
    data: BTreeMap<u64, Dataset>,
    runs: BTreeMap<(String, u64, u64), Run>,
}

impl Runs {
    fn new() -> Self {
        Runs { data: BTreeMap::new(), runs: BTreeMap::new() }
    }

    fn data(&mut self, seed: u64) -> &Dataset {
        self.data.entry(seed).or_insert_with(|| make_dataset(KIND, N_TRAIN, N_VAL, seed).unwrap())
    }

    fn get(&mut self, variant: &str, seed: u64, lambda: f64) -> &Run {
        let key = (variant.to_string(), seed, lambda.to_bits());
        if !self.runs.contains_key(&key) {
            let data = self.data(seed).clone();
            let run = train_run(&variant.parse().unwrap(), seed, lambda, &data);
            self.runs.insert(key.clone(), run);
        }
        &self.runs[&key]
    }

    fn train_secs(&self) -> f64 {
        self.runs.values().map(|r| r.secs).sum()
    }
}

fn default_lambda() -> f64 {
    TrainConfig::for_task(KIND).lambda
}

fn train_run(variant: &Variant, seed: u64, lambda: f64, data: &Dataset) -> Run {
    let t0 = Instant::now();
    let cfg = TrainConfig { seed, lambda, ..TrainConfig::for_task(KIND) };
    let topology = variant.topology(KIND.default_topology());
    let assembly =
        build_model::<f32>(&NetSpec::default(), topology, &data.target_kinds, &variant.options(cfg.theta), seed).unwrap();
    let mut trainer = Trainer::new(assembly, cfg).unwrap();
    let mut tracker = RecoveryTracker::new(200);
    let (mut simplex_error, mut min_alpha) = (0.0f64, 1.0f64);
    trainer
        .run(data, |tr, _| {
            tracker.observe(&tr.assembly, tr.step)?;
            let a = tr.assembly.scores.alphas(&tr.assembly.store, 0);
            simplex_error = simplex_error.max((a.iter().sum::<f64>() - 1.0).abs());
            min_alpha = a.iter().cloned().fold(min_alpha, f64::min);
            Ok(())
        })
        .unwrap();
    let mut assembly = trainer.assembly;
    let report = cen_core::harness::evaluate(&mut assembly, data, &data.val, 16).unwrap();
    let task = &report.tasks[0];
    let step = trainer.step;
    Run {
        ensemble_mse: task.ensemble.mse.unwrap(),
        ensemble_loss: task.ensemble.loss,
        lane_mse: task.lanes.iter().map(|(_, m)| m.mse.unwrap()).collect(),
        exchanged_fraction: record_trace(&assembly, step).unwrap().max_exchanged_fraction(),
        fallen: tracker.fallen(),
        recovered: tracker.recovered(),
        simplex_error,
        min_alpha,
        secs: t0.elapsed().as_secs_f64(),
        assembly,
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(" ")
}

fn gradient_suite(r: &mut Report) {
    let (results, secs) = run_gradient_suite(GRAD_SEEDS);
    let worst = results.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    let failing: Vec<&str> = results.iter().filter(|c| !(c.worst < GRAD_TOL)).map(|c| c.name.as_str()).collect();
    let pass = failing.is_empty() && secs < 60.0;
    r.line(
        1,
        "gradient suite",
        pass,
        format!(
            "{} cases x {GRAD_SEEDS} seeds at f64, worst rel err {:.2e} ({} seed {}), limit {GRAD_TOL:.0e}, {secs:.2}s (limit 60s)",
            results.len(),
            worst.worst,
            worst.name,
            worst.worst_seed
        ),
    );
    if !failing.is_empty() {
        info(format!("failing cases: {failing:?}"));
    }
}

fn exchange_oracle(r: &mut Report) {
    let failures = exchange_oracle_sweep(100, 2024);
    // Detachment: a replaced channel reads nothing from its own stream and
    // 1/(M-1) from each donor, measured by finite differences.
    let (mut checked, mut worst, mut own_leak) = (0usize, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let mut rng = Rng::stream(seed, &[7]);
        let m_count = 2 + rng.below(3);
        let c_count = [4, 6, 8, 12].into_iter().filter(|c| c % m_count == 0).nth(rng.below(2)).unwrap_or(2 * m_count);
        let mask = random_mask(&mut rng, m_count, c_count);
        let xs: Vec<Tensor<f64>> = (0..m_count).map(|_| tensor(&mut rng, &[1, c_count, 2, 2])).collect();
        for m in 0..m_count {
            for c in mask.replaced_channels(m) {
                let share = 1.0 / (m_count - 1) as f64;
                for (k, (a, n)) in routing_sensitivities(&xs, &mask, m, c).into_iter().enumerate() {
                    let expect = if k == m { 0.0 } else { share };
                    worst = worst.max((a - expect).abs()).max((n - expect).abs());
                    if k == m {
                        own_leak = own_leak.max(a.abs());
                    }
                    checked += 1;
                }
            }
        }
    }
    let pass = failures.is_empty() && worst < 1e-9 && own_leak == 0.0 && checked > 0;
    r.line(
        2,
        "exchange oracle",
        pass,
        format!(
            "100 random cases (M in 2..=4, C in {{4,6,8,12}}): {} mismatches; {checked} routing sensitivities, worst deviation {worst:.1e}, own-channel gradient {own_leak}",
            failures.len()
        ),
    );
    for f in failures.iter().take(5) {
        info(f.clone());
    }
}

fn structural_counts(r: &mut Report) {
    let t0 = Instant::now();
    let reg = TargetKind::Regression;
    let opts = Variant::Cen.options(1e-2);
    let spec = NetSpec::default();
    let cycle = build_model::<f64>(&spec, Topology::Cycle { shared_decoder: true }, &[reg; 3], &opts, 0).unwrap();
    let mm_mt =
        build_model::<f64>(&spec, Topology::MmMt { m1: 2, m2: 2 }, &[reg, TargetKind::Classes(4)], &opts, 0).unwrap();
    let pair = build_model::<f64>(&spec, Topology::Multimodal { m1: 2 }, &[reg], &opts, 0).unwrap();
    let ratio = cycle.count_parameters().generator() as f64 / (3 * pair.count_parameters().generator()) as f64;
    let secs = t0.elapsed().as_secs_f64();
    let pass = cycle.count_norm_sets() == 6 && mm_mt.count_norm_sets() == 4 && ratio < 0.40 && secs < 1.0;
    r.line(
        3,
        "structural counts",
        pass,
        format!(
            "cycle norm banks {} (want 6), mm_mt(2,2) {} (want 4), shared cycle / 3 pairs = {} / {} = {ratio:.4} (want < 0.40), {secs:.3}s",
            cycle.count_norm_sets(),
            mm_mt.count_norm_sets(),
            cycle.count_parameters().generator(),
            3 * pair.count_parameters().generator()
        ),
    );
}

fn fusion_benefit(r: &mut Report, runs: &mut Runs) {
    let lambda = default_lambda();
    let before = runs.train_secs();
    let (mut wins, mut beat_uni, mut beat_concat) = (0, 0, 0);
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let (cen, lanes) = {
            let run = runs.get("cen", seed, lambda);
            (run.ensemble_mse, fmt_list(&run.lane_mse))
        };
        let u0 = runs.get("unimodal:0", seed, lambda).ensemble_mse;
        let u1 = runs.get("unimodal:1", seed, lambda).ensemble_mse;
        let concat = runs.get("concat", seed, lambda).ensemble_mse;
        let (a, b) = (cen < u0.min(u1), cen < concat);
        beat_uni += a as usize;
        beat_concat += b as usize;
        wins += (a && b) as usize;
        rows.push(format!("seed {seed}: cen {cen:.5} (lanes {lanes}) unimodal {u0:.5} / {u1:.5} concat {concat:.5}"));
    }
    let secs = runs.train_secs() - before;
    let pass = wins >= 4 && secs < 600.0;
    r.line(
        4,
        "fusion benefit",
        pass,
        format!(
            "CEN ensemble MSE below both unimodal and concat on {wins}/5 seeds (want >= 4); below unimodal {beat_uni}/5, below concat {beat_concat}/5; {secs:.0}s training (target 600s)"
        ),
    );
    for row in rows {
        info(row);
    }
    let fr: Vec<f64> = (0..SEEDS).map(|s| runs.get("cen", s, lambda).exchanged_fraction).collect();
    info(format!("CEN final exchanged fraction per seed at lambda {lambda}: {}", fmt_list(&fr)));
}

fn ablation_ordering(r: &mut Report, runs: &mut Runs) {
    let lambda = default_lambda();
    let losses = |runs: &mut Runs, v: &str| (0..SEEDS).map(|s| runs.get(v, s, lambda).ensemble_loss).collect::<Vec<_>>();
    let cen = losses(runs, "cen");
    let none = losses(runs, "no-exchange");
    let zero = losses(runs, "zero-out");
    let all = losses(runs, "all-channel");
    let count = |f: &dyn Fn(usize) -> bool| (0..SEEDS as usize).filter(|&i| f(i)).count();
    let vs_none = count(&|i| cen[i] <= none[i]);
    let vs_zero = count(&|i| zero[i] > cen[i]);
    let vs_all = count(&|i| cen[i] <= all[i]);
    let pass = vs_none >= 4 && vs_zero >= 4 && vs_all >= 3;
    r.line(
        5,
        "ablation ordering",
        pass,
        format!(
            "exchange <= no-exchange on {vs_none}/5 (want >= 4); zero-out > exchange on {vs_zero}/5 (want >= 4); half-channel <= all-channel on {vs_all}/5 (want >= 3)"
        ),
    );
    info(format!("exchange     {}", fmt_list(&cen)));
    info(format!("no-exchange  {}", fmt_list(&none)));
    info(format!("zero-out     {}", fmt_list(&zero)));
    info(format!("all-channel  {}", fmt_list(&all)));
    let ties = count(&|i| zero[i] == cen[i] && none[i] == cen[i]);
    info(format!("seeds where exchange, zero-out and no-exchange are bit-identical: {ties}/5"));
}

fn sparsity_dynamics(r: &mut Report, runs: &mut Runs) {
    let strong = runs.get("cen", 0, 5e-3);
    let (strong_frac, strong_fallen, strong_rec) = (strong.exchanged_fraction, strong.fallen, strong.recovered);
    let sweep: Vec<f64> = [1e-4, 1e-3, 1e-2].iter().map(|&l| runs.get("cen", 0, l).exchanged_fraction).collect();
    let monotone = sweep.windows(2).all(|w| w[0] <= w[1]);
    let default = runs.get("cen", 0, default_lambda());
    let (fallen, recovered) = (default.fallen, default.recovered);
    let frac = if fallen == 0 { 0.0 } else { recovered as f64 / fallen as f64 };
    let pass = strong_frac > 0.0 && monotone && frac < 0.05;
    r.line(
        6,
        "sparsity dynamics",
        pass,
        format!(
            "lambda 5e-3 final exchanged fraction {strong_frac:.4} (want > 0); lambda 1e-4/1e-3/1e-2 fractions {} (want non-decreasing); default run: {recovered} of {fallen} sub-threshold factors recovered above 2 theta (want < 5%)",
            fmt_list(&sweep)
        ),
    );
    if fallen == 0 {
        info("the default run has no factor at or below theta after step 200, so non-recovery holds vacuously".into());
    }
    info(format!(
        "lambda 5e-3 run: {strong_rec} of {strong_fallen} sub-threshold factors recovered ({:.2}%)",
        if strong_fallen == 0 { 0.0 } else { 100.0 * strong_rec as f64 / strong_fallen as f64 }
    ));
}

fn decision_scores(r: &mut Report, runs: &mut Runs) {
    let lambda = default_lambda();
    let mut simplex = 0.0f64;
    let mut min_alpha = 1.0f64;
    for v in ["cen", "concat", "no-exchange", "zero-out", "all-channel"] {
        for s in 0..SEEDS {
            let run = runs.get(v, s, lambda);
            simplex = simplex.max(run.simplex_error);
            min_alpha = min_alpha.min(run.min_alpha);
        }
    }
    // Score updates on trained and fresh assemblies leave every other
    // parameter and every running statistic untouched.
    let data = runs.data(0).clone();
    let batch32 = data.batch::<f32>(&data.val, &(0..16).collect::<Vec<_>>()).unwrap();
    let mut trained = runs.get("cen", 0, lambda).assembly.clone();
    let mut invariant = checksums_hold(&mut trained, &batch32, &mut simplex);
    let quad = make_dataset(TaskKind::MmMtQuad, 8, 4, 3).unwrap();
    let batch64 = quad.batch::<f64>(&quad.train, &(0..8).collect::<Vec<_>>()).unwrap();
    let mut fresh: ModelAssembly<f64> = build_model(
        &NetSpec::default(),
        TaskKind::MmMtQuad.default_topology(),
        &quad.target_kinds,
        &Variant::Cen.options(2e-2),
        3,
    )
    .unwrap();
    invariant &= checksums_hold(&mut fresh, &batch64, &mut simplex);
    let pass = simplex < 1e-12 && min_alpha >= 0.0 && invariant;
    r.line(
        7,
        "decision scores",
        pass,
        format!(
            "max |sum(alpha) - 1| = {simplex:.1e} over every training step of 25 runs and 20 score updates (want < 1e-12), min alpha {min_alpha:.3e}; subnetwork checksums and running statistics unchanged: {invariant}"
        ),
    );
}

fn checksums_hold<T: Element>(a: &mut ModelAssembly<T>, batch: &cen_core::batch::Batch<T>, simplex: &mut f64) -> bool {
    let subnet = |a: &ModelAssembly<T>| a.store.checksum_where(|p| p.side != Side::Scores);
    let stats = |a: &ModelAssembly<T>| {
        a.banks.iter().map(|b| b.encoder.iter().chain(&b.decoder).map(|n| (n.running_mean.clone(), n.running_var.clone())).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let (before, before_stats) = (subnet(a), stats(a));
    let mut ok = true;
    for _ in 0..10 {
        update_decision_scores(a, batch, 0.05).unwrap();
        ok &= subnet(a) == before && stats(a) == before_stats;
        for t in 0..a.tasks.len() {
            let alpha = a.scores.alphas(&a.store, t);
            *simplex = simplex.max((alpha.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ok
}

/// Metrics CSV and trace rows of a short 64-bit run.
fn short_run(data: &Dataset, checkpoint_at: Option<u64>) -> (String, Vec<u8>) {
    let cfg = TrainConfig { epochs: 2, seed: 5, trace_every: 1, ..TrainConfig::for_task(KIND) };
    let build = || {
        build_model::<f64>(&NetSpec::default(), KIND.default_topology(), &data.target_kinds, &Variant::Cen.options(cfg.theta), 5)
            .unwrap()
    };
    let mut tr = Trainer::new(build(), cfg.clone()).unwrap();
    let mut csv = metrics_header(&tr.assembly);
    let log = |tr: &Trainer<f64>, rec: &cen_core::harness::MetricsRecord, csv: &mut String| {
        csv.push_str(&metrics_row(rec));
        csv.push_str(&trace_rows(&record_trace(&tr.assembly, tr.step).unwrap()));
    };
    let total = tr.total_steps(data.train.len);
    let mut bytes = Vec::new();
    match checkpoint_at {
        None => tr.run(data, |tr, rec| Ok(log(tr, rec, &mut csv))).unwrap(),
        Some(stop) => {
            tr.run_until(data, stop, |tr, rec| Ok(log(tr, rec, &mut csv))).unwrap();
            bytes = Checkpoint::capture(&tr.assembly, tr.step, "acceptance").to_bytes().unwrap();
            // Continue in a fresh trainer restored from the bytes.
            let ck = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
            let mut resumed = Trainer::new(build(), cfg).unwrap();
            ck.restore(&mut resumed.assembly).unwrap();
            resumed.step = ck.step;
            resumed.run_until(data, total, |tr, rec| Ok(log(tr, rec, &mut csv))).unwrap();
        }
    }
    (csv, bytes)
}

fn determinism(r: &mut Report) {
    let params = DataParams { height: 16, width: 16, ..DataParams::default() };
    let data = make_dataset_with(KIND, 24, 8, 5, &params).unwrap();
    let (a, _) = short_run(&data, None);
    let (b, _) = short_run(&data, None);
    let (resumed, ck) = short_run(&data, Some(3));
    let identical = a.as_bytes() == b.as_bytes();
    let continued = a == resumed;
    let first_diff = a.lines().zip(resumed.lines()).position(|(x, y)| x != y);
    r.line(
        8,
        "determinism and persistence",
        identical && continued,
        format!(
            "two runs byte-identical over {} bytes of metrics and trace rows: {identical}; run checkpointed after step 3 ({} bytes) and resumed from a fresh model matches the uninterrupted run: {continued}",
            a.len(),
            ck.len()
        ),
    );
    if let Some(line) = first_diff {
        info(format!("first differing line: {line}"));
    }
}

fn certificate(r: &mut Report, runs: &mut Runs) {
    let mut quad = Vec::new();
    let mut linear = Vec::new();
    for seed in 0..SEEDS {
        let d = runs.data(seed);
        quad.push(complementarity_certificate(d, CertificateFeatures::NeighborhoodQuadratic).unwrap().min_ratio());
        linear.push(complementarity_certificate(d, CertificateFeatures::PixelLinear).unwrap().ratios());
    }
    let worst = quad.iter().cloned().fold(f64::INFINITY, f64::min);
    r.line(
        9,
        "complementarity certificate",
        worst >= 1.5,
        format!(
            "single-modality / joint ridge MSE (3x3 neighbourhood quadratic features) min ratio per seed {} (want >= 1.5)",
            fmt_list(&quad)
        ),
    );
    let lin: Vec<String> = linear.iter().map(|r| format!("{:.3}/{:.3}", r[0], r[1])).collect();
    info(format!("single-pixel linear ridge ratios coarse/edge per seed: {}", lin.join(" ")));
}

fn main() {
    let t0 = Instant::now();
    let mut r = Report { passed: 0, total: 0 };
    let mut runs = Runs::new();
    gradient_suite(&mut r);
    exchange_oracle(&mut r);
    structural_counts(&mut r);
    fusion_benefit(&mut r, &mut runs);
    ablation_ordering(&mut r, &mut runs);
    sparsity_dynamics(&mut r, &mut runs);
    decision_scores(&mut r, &mut runs);
    determinism(&mut r);
    certificate(&mut r, &mut runs);
    println!("acceptance: {}/{} criteria passed in {:.0}s", r.passed, r.total, t0.elapsed().as_secs_f64());
}
