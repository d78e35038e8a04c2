#![allow(dead_code)]

use std::time::Instant;

use cen_autograd::{finite_diff_check, Graph, Result as GraphResult, Tensor, TensorError, Var, DEFAULT_EPS};
use cen_core::exchange::{channel_exchange, compute_exchange_mask, ExchangeMask, ExchangePlan, Fill, ThresholdRule};
use cen_core::normalization::{normalize, NormMode, NormParams, StatsMode};
use cen_core::params::{ParamStore, Side};
use cen_core::rng::Rng;

pub const GRAD_SEEDS: u64 = 10;
pub const GRAD_TOL: f64 = 1e-6;

/// Uniform in [-1, 1).
pub fn tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

/// Contracts `y` against a random probe so every gradient entry is O(1).
pub fn probe(g: &mut Graph<f64>, y: Var, rng: &mut Rng) -> GraphResult<Var> {
    let r = g.constant(tensor(rng, g.shape(y)));
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

/// Probe with weights in [0.5, 1.5): sums of probe weights cannot cancel, so
/// linear routing gradients stay well above rounding noise.
fn positive_probe(g: &mut Graph<f64>, y: Var, rng: &mut Rng) -> GraphResult<Var> {
    let n: usize = g.shape(y).iter().product();
    let r = Tensor::new(g.shape(y).to_vec(), (0..n).map(|_| rng.uniform_in(0.5, 1.5)).collect())?;
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

fn lift<T>(r: cen_core::Result<T>) -> GraphResult<T> {
    r.map_err(|e| TensorError::Validation(e.to_string()))
}

/// Random mask over `m` streams and `c` channels with roughly 40% of each
/// region replaced.
pub fn random_mask(rng: &mut Rng, m: usize, c: usize) -> ExchangeMask {
    let plan = ExchangePlan::contiguous(m, 1e-2, ThresholdRule::Magnitude);
    let gammas: Vec<Vec<f64>> =
        (0..m).map(|_| (0..c).map(|_| if rng.uniform() < 0.4 { rng.uniform_in(-0.01, 0.01) } else { 1.0 }).collect()).collect();
    let refs: Vec<&[f64]> = gammas.iter().map(|v| v.as_slice()).collect();
    compute_exchange_mask(&refs, &plan).unwrap()
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, Var, &mut Rng) -> GraphResult<Var>>;

pub struct GradCase {
    pub name: String,
    pub shape: Vec<usize>,
    f: CaseFn,
}

fn case(name: impl Into<String>, shape: &[usize], f: impl Fn(&mut Graph<f64>, Var, &mut Rng) -> GraphResult<Var> + 'static) -> GradCase {
    GradCase { name: name.into(), shape: shape.to_vec(), f: Box::new(f) }
}

fn norm_params(c: usize, mode: NormMode) -> NormParams<f64> {
    NormParams::new(&mut ParamStore::new(), "n", c, mode, Side::Encoder)
}

/// Stream `k` of `m` is the argument; the other streams are constants.
fn exchange_case(m: usize, k: usize, fill: Fill) -> GradCase {
    let name = format!("exchange/{}/m{m}/stream{k}", if fill == Fill::Mean { "mean" } else { "zero" });
    case(name, &[2, 2 * m, 2, 3], move |g, x, rng| {
        let shape = g.shape(x).to_vec();
        let mask = random_mask(rng, m, shape[1]);
        let xs: Vec<Var> = (0..m).map(|j| if j == k { x } else { g.constant(tensor(rng, &shape)) }).collect();
        let outs = lift(channel_exchange(g, &xs, &mask, fill))?;
        let mut total = positive_probe(g, outs[0], rng)?;
        for &o in &outs[1..] {
            let p = positive_probe(g, o, rng)?;
            total = g.add(total, p)?;
        }
        Ok(total)
    })
}

/// Every differentiable operation, including the normalization and
/// exchange paths built on top of the graph engine.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = vec![
        case("conv2d/input", &[2, 2, 5, 5], |g, x, rng| {
            let w = g.constant(tensor(rng, &[3, 2, 3, 3]));
            let b = g.constant(tensor(rng, &[3]));
            let y = g.conv2d(x, w, b, 2, 1)?;
            probe(g, y, rng)
        }),
        case("conv2d/weight", &[3, 2, 3, 3], |g, w, rng| {
            let x = g.constant(tensor(rng, &[2, 2, 6, 6]));
            let b = g.constant(tensor(rng, &[3]));
            let y = g.conv2d(x, w, b, 1, 1)?;
            probe(g, y, rng)
        }),
        case("conv2d/bias", &[3], |g, b, rng| {
            let x = g.constant(tensor(rng, &[1, 2, 4, 4]));
            let w = g.constant(tensor(rng, &[3, 2, 1, 1]));
            let y = g.conv2d(x, w, b, 1, 0)?;
            probe(g, y, rng)
        }),
        case("add", &[2, 3, 2, 2], |g, x, rng| {
            let c = g.constant(tensor(rng, &[2, 3, 2, 2]));
            let y = g.add(x, c)?;
            probe(g, y, rng)
        }),
        case("mul", &[2, 3, 2, 2], |g, x, rng| {
            let c = g.constant(tensor(rng, &[2, 3, 2, 2]));
            let y = g.mul(x, c)?;
            probe(g, y, rng)
        }),
        case("relu", &[2, 3, 4, 4], |g, x, rng| {
            let y = g.relu(x);
            probe(g, y, rng)
        }),
        case("scale_shift/x", &[2, 3, 2, 2], |g, x, rng| {
            let s = g.constant(tensor(rng, &[3]));
            let t = g.constant(tensor(rng, &[3]));
            let y = g.scale_shift(x, s, t)?;
            probe(g, y, rng)
        }),
        case("scale", &[2, 5], |g, x, rng| {
            let y = g.scale(x, 0.37);
            probe(g, y, rng)
        }),
        case("mean_all", &[2, 2, 3, 3], |g, x, _| Ok(g.mean_all(x))),
        case("upsample_nearest", &[1, 2, 3, 3], |g, x, rng| {
            let y = g.upsample_nearest(x, 2)?;
            probe(g, y, rng)
        }),
        case("l1_sum/subset", &[8], |g, x, _| g.l1_sum(x, Some(&[1, 2, 5]))),
        case("concat_channels", &[2, 2, 3, 3], |g, x, rng| {
            let c = g.constant(tensor(rng, &[2, 1, 3, 3]));
            let y = g.concat_channels(&[c, x])?;
            probe(g, y, rng)
        }),
        case("softmax+weighted_sum/weights", &[3], |g, z, rng| {
            let parts: Vec<Var> = (0..3).map(|_| g.constant(tensor(rng, &[1, 1, 2, 3]))).collect();
            let a = g.softmax(z);
            let y = g.weighted_sum(&parts, a)?;
            probe(g, y, rng)
        }),
        case("weighted_sum/parts", &[1, 1, 2, 3], |g, x, rng| {
            let other = g.constant(tensor(rng, &[1, 1, 2, 3]));
            let w = g.constant(tensor(rng, &[2]));
            let y = g.weighted_sum(&[x, other], w)?;
            probe(g, y, rng)
        }),
        case("mse_loss/pred", &[2, 1, 3, 3], |g, x, rng| {
            let t = g.constant(tensor(rng, &[2, 1, 3, 3]));
            g.mse_loss(x, t)
        }),
        case("cross_entropy", &[2, 4, 3, 3], |g, x, rng| {
            let labels: Vec<usize> = (0..18).map(|_| rng.below(4)).collect();
            g.cross_entropy_pixelwise(x, &labels)
        }),
    ];

    for (mode, tag) in [(NormMode::Batch, "batch"), (NormMode::Instance, "instance")] {
        for stats in [StatsMode::Train, StatsMode::Eval] {
            cases.push(case(format!("norm/{tag}/{stats:?}/x"), &[3, 2, 3, 2], move |g, x, rng| {
                let mut p = norm_params(2, mode);
                p.running_mean = vec![0.3, -0.2];
                p.running_var = vec![1.7, 0.6];
                let xhat = lift(normalize(g, &mut p, x, stats))?;
                let s = g.constant(tensor(rng, &[2]));
                let t = g.constant(tensor(rng, &[2]));
                let y = g.scale_shift(xhat, s, t)?;
                probe(g, y, rng)
            }));
        }
        cases.push(case(format!("norm/{tag}/gamma"), &[3], move |g, gamma, rng| {
            let x = g.constant(tensor(rng, &[2, 3, 2, 2]));
            let xhat = lift(normalize(g, &mut norm_params(3, mode), x, StatsMode::Train))?;
            let beta = g.constant(tensor(rng, &[3]));
            let y = g.scale_shift(xhat, gamma, beta)?;
            probe(g, y, rng)
        }));
        cases.push(case(format!("norm/{tag}/beta"), &[3], move |g, beta, rng| {
            let x = g.constant(tensor(rng, &[2, 3, 2, 2]));
            let xhat = lift(normalize(g, &mut norm_params(3, mode), x, StatsMode::Train))?;
            let gamma = g.constant(tensor(rng, &[3]));
            let y = g.scale_shift(xhat, gamma, beta)?;
            probe(g, y, rng)
        }));
    }

    for m in 2..=4 {
        for k in 0..m {
            cases.push(exchange_case(m, k, Fill::Mean));
        }
    }
    cases.push(exchange_case(2, 1, Fill::Zero));

    // Donor path through a normalization layer: stream 1's pre-norm input.
    cases.push(case("norm+exchange/donor", &[2, 4, 2, 2], |g, x, rng| {
        let mask = random_mask(rng, 2, 4);
        let own = g.constant(tensor(rng, &[2, 4, 2, 2]));
        let a = lift(normalize(g, &mut norm_params(4, NormMode::Batch), own, StatsMode::Train))?;
        let b = lift(normalize(g, &mut norm_params(4, NormMode::Batch), x, StatsMode::Train))?;
        let outs = lift(channel_exchange(g, &[a, b], &mask, Fill::Mean))?;
        let y = g.relu(outs[0]);
        let t = g.constant(tensor(rng, &[2, 4, 2, 2]));
        g.mse_loss(y, t)
    }));
    cases
}

pub struct CaseResult {
    pub name: String,
    pub worst: f64,
    pub worst_seed: u64,
}

/// Runs `case` over `seeds` seeds; input values and constants come from
/// independent streams per seed.
pub fn run_case(case: &GradCase, seeds: u64) -> CaseResult {
    let mut worst = 0.0f64;
    let mut worst_seed = 0;
    for seed in 0..seeds {
        let x = tensor(&mut Rng::stream(seed, &[100]), &case.shape);
        let report = finite_diff_check(|g, v| (case.f)(g, v, &mut Rng::stream(seed, &[200])), &x, DEFAULT_EPS)
            .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", case.name));
        if report.max_rel_error > worst {
            worst = report.max_rel_error;
            worst_seed = seed;
        }
    }
    CaseResult { name: case.name.clone(), worst, worst_seed }
}

/// All cases over `seeds` seeds, with the elapsed wall time in seconds.
pub fn run_gradient_suite(seeds: u64) -> (Vec<CaseResult>, f64) {
    let start = Instant::now();
    let results = gradient_cases().iter().map(|c| run_case(c, seeds)).collect();
    (results, start.elapsed().as_secs_f64())
}

/// Replaced channels of stream `m` take `(1/(M-1)) * sum_{k != m} x_k`,
/// everything else is copied; written directly over flat NCHW buffers.
pub fn exchange_oracle(xs: &[Vec<f64>], mask: &ExchangeMask, n: usize, hw: usize) -> Vec<Vec<f64>> {
    let m_count = xs.len();
    let c_count = mask.channels;
    let share = 1.0 / (m_count - 1) as f64;
    let mut outs = xs.to_vec();
    for m in 0..m_count {
        for s in 0..n {
            for c in 0..c_count {
                if !mask.is_replaced(m, c) {
                    continue;
                }
                for p in 0..hw {
                    let i = (s * c_count + c) * hw + p;
                    let mut sum = 0.0;
                    for k in 0..m_count {
                        if k != m {
                            sum += xs[k][i];
                        }
                    }
                    outs[m][i] = sum * share;
                }
            }
        }
    }
    outs
}

/// `cases` random layouts compared against [`exchange_oracle`]; returns a
/// description of every mismatch.
pub fn exchange_oracle_sweep(cases: usize, seed: u64) -> Vec<String> {
    let mut failures = Vec::new();
    let mut rng = Rng::stream(seed, &[300]);
    for case in 0..cases {
        let m_count = 2 + rng.below(3);
        let widths: Vec<usize> = [4, 6, 8, 12].into_iter().filter(|c| c % m_count == 0).collect();
        let c_count = widths[rng.below(widths.len())];
        let (n, h, w) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
        let theta = rng.uniform_in(0.0, 0.5);
        let gammas: Vec<Vec<f64>> = (0..m_count).map(|_| (0..c_count).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
        let refs: Vec<&[f64]> = gammas.iter().map(|v| v.as_slice()).collect();
        let plan = ExchangePlan::contiguous(m_count, theta, ThresholdRule::Magnitude);
        let mask = compute_exchange_mask(&refs, &plan).unwrap();
        let shape = [n, c_count, h, w];
        let xs: Vec<Vec<f64>> = (0..m_count).map(|_| tensor(&mut rng, &shape).data().to_vec()).collect();

        // The mask itself, recomputed from the rule.
        for m in 0..m_count {
            let region = plan.region(m, c_count).unwrap();
            for c in 0..c_count {
                let expect = region.contains(&c) && gammas[m][c].abs() <= theta;
                if mask.is_replaced(m, c) != expect {
                    failures.push(format!("case {case}: mask ({m}, {c}) = {}", mask.is_replaced(m, c)));
                }
            }
        }

        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(Tensor::new(shape.to_vec(), x.clone()).unwrap())).collect();
        let outs = channel_exchange(&mut g, &vars, &mask, Fill::Mean).unwrap();
        let oracle = exchange_oracle(&xs, &mask, n, h * w);
        for m in 0..m_count {
            let got = g.data(outs[m]);
            if got != oracle[m].as_slice() {
                failures.push(format!("case {case}: M={m_count} C={c_count} stream {m} differs from the oracle"));
            }
            // Outside its region a stream is never touched.
            let region = plan.region(m, c_count).unwrap();
            for s in 0..n {
                for c in (0..c_count).filter(|c| !region.contains(c)) {
                    let block = (s * c_count + c) * h * w..(s * c_count + c + 1) * h * w;
                    if got[block.clone()] != xs[m][block] {
                        failures.push(format!("case {case}: stream {m} channel {c} changed outside its region"));
                    }
                }
            }
        }
    }
    failures
}

/// Finite-difference sensitivity of stream `m`'s output at `(c, pixel 0)`
/// to the same position in every input stream: `(analytic, numeric)`.
pub fn routing_sensitivities(xs: &[Tensor<f64>], mask: &ExchangeMask, m: usize, c: usize) -> Vec<(f64, f64)> {
    let shape = xs[0].shape().to_vec();
    let hw = shape[2] * shape[3];
    let index = c * hw;
    (0..xs.len())
        .map(|k| {
            let f = |g: &mut Graph<f64>, x: Var| -> GraphResult<Var> {
                let vars: Vec<Var> = (0..xs.len()).map(|j| if j == k { x } else { g.constant(xs[j].clone()) }).collect();
                let outs = lift(channel_exchange(g, &vars, mask, Fill::Mean))?;
                let mut pick = vec![0.0; xs[0].numel()];
                pick[index] = 1.0;
                let pick = g.constant(Tensor::new(shape.clone(), pick)?);
                let y = g.mul(outs[m], pick)?;
                Ok(g.sum_all(y))
            };
            let r = finite_diff_check(f, &xs[k], DEFAULT_EPS).unwrap();
            (r.analytic[index], r.numeric[index])
        })
        .collect()
}
