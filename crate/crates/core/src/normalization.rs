//! Batch and instance normalization with private parameter banks, and the
//! L1 penalty on scaling factors.

use cen_autograd::{Element, Graph, Operation, Tensor, TensorError, Var};

use crate::error::{CenError, Result};
use crate::exchange::ExchangePlan;
use crate::params::{Bindings, ParamId, ParamRole, ParamStore, Side};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Instance,
}

/// Statistics used by a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left alone.
    Probe,
    /// Running statistics.
    Eval,
}

impl StatsMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, StatsMode::Eval)
    }
}

/// One normalization layer: trainable `gamma`/`beta` in the parameter store
/// plus private running statistics.
#[derive(Clone, Debug)]
pub struct NormParams<T: Element> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: NormMode,
}

impl<T: Element> NormParams<T> {
    /// Registers `gamma = 1`, `beta = 0` under `prefix`.
    pub fn new(store: &mut ParamStore<T>, prefix: &str, channels: usize, mode: NormMode, side: Side) -> Self {
        let gamma = store.add(format!("{prefix}.gamma"), ParamRole::Gamma, side, Tensor::full([channels], T::one()));
        let beta = store.add(format!("{prefix}.beta"), ParamRole::Beta, side, Tensor::zeros([channels]));
        NormParams {
            gamma,
            beta,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: NORM_EPS,
            momentum: NORM_MOMENTUM,
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Identifies the (modality, task) pairing a bank serves; `None` marks a
/// set shared across that axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BankKey {
    pub modality: Option<usize>,
    pub task: Option<usize>,
}

impl BankKey {
    pub fn label(&self) -> String {
        let part = |v: Option<usize>| v.map_or_else(|| "shared".to_string(), |i| i.to_string());
        format!("m{}_t{}", part(self.modality), part(self.task))
    }
}

/// Normalization layers owned by one (modality, task) pairing.
#[derive(Clone, Debug)]
pub struct NormBank<T: Element> {
    pub key: BankKey,
    /// Counts as one of the topology's private norm sets.
    pub private: bool,
    pub encoder: Vec<NormParams<T>>,
    pub decoder: Vec<NormParams<T>>,
}

#[derive(Clone, Copy)]
struct Layout {
    n: usize,
    c: usize,
    hw: usize,
    mode: NormMode,
}

impl Layout {
    fn groups(&self) -> usize {
        match self.mode {
            NormMode::Batch => self.c,
            NormMode::Instance => self.n * self.c,
        }
    }

    fn group_len(&self) -> usize {
        match self.mode {
            NormMode::Batch => self.n * self.hw,
            NormMode::Instance => self.hw,
        }
    }

    /// Contiguous `hw` blocks making up group `g`.
    fn blocks(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        let (start, step, count) = match self.mode {
            NormMode::Batch => (g, self.c, self.n),
            NormMode::Instance => (g, 1, 1),
        };
        (0..count).map(move |i| (start + i * step) * self.hw)
    }

    fn channel(&self, g: usize) -> usize {
        match self.mode {
            NormMode::Batch => g,
            NormMode::Instance => g % self.c,
        }
    }
}

/// `xhat = (x - mu) * inv_std` per group. With batch statistics `mu` and
/// `inv_std` depend on `x`; with running statistics they are constants.
struct NormalizeOp<T> {
    layout: Layout,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Element> Operation<T> for NormalizeOp<T> {
    fn name(&self) -> &'static str {
        "normalize"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let l = self.layout;
        let xhat = out.data();
        let mut dx = vec![T::zero(); g.len()];
        for grp in 0..l.groups() {
            let inv = self.inv_std[grp];
            if !self.batch_stats {
                for b in l.blocks(grp) {
                    for i in b..b + l.hw {
                        dx[i] = g[i] * inv;
                    }
                }
                continue;
            }
            let n = T::from_usize(l.group_len()).unwrap();
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for b in l.blocks(grp) {
                for i in b..b + l.hw {
                    sg += g[i];
                    sgx += g[i] * xhat[i];
                }
            }
            let scale = inv / n;
            for b in l.blocks(grp) {
                for i in b..b + l.hw {
                    dx[i] = scale * (n * g[i] - sg - xhat[i] * sgx);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Normalizes `x` and applies the affine `gamma * xhat + beta`.
///
/// Biased variance normalizes the batch; the running variance is updated
/// with the unbiased estimate. Instance mode keeps running statistics by
/// averaging per-sample statistics over the batch.
pub fn norm_forward<T: Element>(
    g: &mut Graph<T>,
    bind: &mut Bindings,
    store: &ParamStore<T>,
    params: &mut NormParams<T>,
    x: Var,
    stats: StatsMode,
) -> Result<Var> {
    let xhat = normalize(g, params, x, stats)?;
    let gamma = bind.bind(g, store, params.gamma);
    let beta = bind.bind(g, store, params.beta);
    Ok(g.scale_shift(xhat, gamma, beta)?)
}

/// The pre-affine half of [`norm_forward`].
pub fn normalize<T: Element>(g: &mut Graph<T>, params: &mut NormParams<T>, x: Var, stats: StatsMode) -> Result<Var> {
    let [n, c, h, w] = g.value(x).dims4("norm_forward")?;
    if c != params.channels() {
        return Err(TensorError::Dimension { op: "norm_forward", axis: "C", expected: params.channels(), found: c }.into());
    }
    let layout = Layout { n, c, hw: h * w, mode: params.mode };
    if params.mode == NormMode::Instance && h * w < 2 {
        return Err(CenError::Validation(format!("instance norm needs at least 2 spatial positions, got {h}x{w}")));
    }
    if stats.uses_batch_stats() && layout.group_len() < 2 {
        return Err(CenError::Validation(format!(
            "batch norm needs at least 2 values per channel, got N*H*W = {}",
            layout.group_len()
        )));
    }

    let src = g.data(x);
    let groups = layout.groups();
    let mut mean = vec![0.0f64; groups];
    let mut var = vec![0.0f64; groups];
    if stats.uses_batch_stats() {
        let len = layout.group_len() as f64;
        for grp in 0..groups {
            let mut s = 0.0;
            for b in layout.blocks(grp) {
                s += src[b..b + layout.hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = s / len;
            let mut ss = 0.0;
            for b in layout.blocks(grp) {
                ss += src[b..b + layout.hw].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
            }
            mean[grp] = m;
            var[grp] = ss / len;
        }
    } else {
        for grp in 0..groups {
            let ch = layout.channel(grp);
            mean[grp] = params.running_mean[ch].as_f64();
            var[grp] = params.running_var[ch].as_f64();
        }
    }

    let inv_std: Vec<T> = var.iter().map(|v| T::from_f64_lossy(1.0 / (v + params.eps).sqrt())).collect();
    let mut out = vec![T::zero(); src.len()];
    for grp in 0..groups {
        let m = T::from_f64_lossy(mean[grp]);
        let inv = inv_std[grp];
        for b in layout.blocks(grp) {
            for i in b..b + layout.hw {
                out[i] = (src[i] - m) * inv;
            }
        }
    }

    if stats == StatsMode::Train {
        let len = layout.group_len() as f64;
        let unbias = len / (len - 1.0);
        let per_channel = groups / c;
        for ch in 0..c {
            let (mut m, mut v) = (0.0, 0.0);
            for k in 0..per_channel {
                let grp = k * c + ch;
                m += mean[grp];
                v += var[grp] * unbias;
            }
            m /= per_channel as f64;
            v /= per_channel as f64;
            let mo = params.momentum;
            let rm = &mut params.running_mean[ch];
            *rm = T::from_f64_lossy((1.0 - mo) * rm.as_f64() + mo * m);
            let rv = &mut params.running_var[ch];
            *rv = T::from_f64_lossy((1.0 - mo) * rv.as_f64() + mo * v);
        }
    }

    let value = Tensor::new([n, c, h, w], out)?;
    let op = NormalizeOp { layout, inv_std, batch_stats: stats.uses_batch_stats() };
    Ok(g.push_op(value, vec![x], Box::new(op)))
}

/// `lambda * sum_streams sum_layers sum_{c in region} |gamma_c|`.
///
/// `streams[m]` lists the gamma parameters of stream `m` at each
/// exchange-enabled layer; the plan supplies the region of each stream.
/// With `lambda == 0` the result is a detached zero.
pub fn sparsity_penalty<T: Element>(
    g: &mut Graph<T>,
    bind: &mut Bindings,
    store: &ParamStore<T>,
    streams: &[Vec<ParamId>],
    plan: &ExchangePlan,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(CenError::Validation(format!("sparsity weight must satisfy lambda >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let mut total: Option<Var> = None;
    for (m, layers) in streams.iter().enumerate() {
        for &gamma in layers {
            let channels = store.get(gamma).value.numel();
            let region = plan.penalty_region(m, channels)?;
            if region.is_empty() {
                continue;
            }
            let v = bind.bind(g, store, gamma);
            let term = g.l1_sum(v, Some(&region))?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(match total {
        Some(t) => g.scale(t, T::from_f64_lossy(lambda)),
        None => g.constant(Tensor::scalar(T::zero())),
    })
}
