//! Threshold-gated channel exchange between streams.
//!
//! Stream `m` owns the contiguous channel block `[m*C/M, (m+1)*C/M)`. Inside
//! its block, a channel whose scaling factor satisfies the threshold rule is
//! replaced by the mean of the other streams' normalized outputs at that
//! channel. The replaced value carries no gradient back to stream `m`'s own
//! channel; each donor receives `1/(M-1)` of it.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use cen_autograd::{Element, Graph, Operation, Tensor, TensorError, Var};

use crate::error::{CenError, Result};
use crate::rng::Rng;

/// Replacement condition on a scaling factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdRule {
    /// Replace when `|gamma| <= theta`.
    Magnitude,
    /// Replace when `gamma <= theta`, so large negative factors are replaced too.
    Signed,
}

impl ThresholdRule {
    pub fn replaces(self, gamma: f64, theta: f64) -> bool {
        match self {
            ThresholdRule::Magnitude => gamma.abs() <= theta,
            ThresholdRule::Signed => gamma <= theta,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExchangePlan {
    pub num_streams: usize,
    pub theta: f64,
    pub rule: ThresholdRule,
    /// Every stream is eligible (and penalized) on every channel instead of
    /// on its own block.
    pub all_channels: bool,
}

impl ExchangePlan {
    pub fn contiguous(num_streams: usize, theta: f64, rule: ThresholdRule) -> Self {
        ExchangePlan { num_streams, theta, rule, all_channels: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_streams == 0 {
            return Err(CenError::Config("exchange plan needs at least one stream".into()));
        }
        if !(self.theta >= 0.0) {
            return Err(CenError::Config(format!("threshold must satisfy theta >= 0, got {}", self.theta)));
        }
        Ok(())
    }

    /// The block of `channels` owned by stream `m`.
    pub fn region(&self, m: usize, channels: usize) -> Result<Range<usize>> {
        let k = self.num_streams;
        if m >= k {
            return Err(CenError::Validation(format!("stream {m} out of range for {k} streams")));
        }
        if channels % k != 0 {
            return Err(CenError::Config(format!("{channels} channels cannot be divided into {k} equal regions")));
        }
        let size = channels / k;
        Ok(m * size..(m + 1) * size)
    }

    /// Channels where stream `m` may be replaced.
    pub fn eligible(&self, m: usize, channels: usize) -> Result<Range<usize>> {
        if self.all_channels {
            self.region(m, channels)?;
            Ok(0..channels)
        } else {
            self.region(m, channels)
        }
    }

    /// Channel indices whose scaling factors stream `m` is penalized on.
    pub fn penalty_region(&self, m: usize, channels: usize) -> Result<Vec<usize>> {
        Ok(self.eligible(m, channels)?.collect())
    }
}

/// Per-stream replaced flags for one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExchangeMask {
    pub streams: usize,
    pub channels: usize,
    replaced: Vec<bool>,
    eligible: Vec<Range<usize>>,
}

impl ExchangeMask {
    pub fn empty(plan: &ExchangePlan, channels: usize) -> Result<Self> {
        let eligible = (0..plan.num_streams).map(|m| plan.eligible(m, channels)).collect::<Result<_>>()?;
        Ok(ExchangeMask { streams: plan.num_streams, channels, replaced: vec![false; plan.num_streams * channels], eligible })
    }

    pub fn is_replaced(&self, m: usize, c: usize) -> bool {
        self.replaced[m * self.channels + c]
    }

    /// Marks `(m, c)`; channels outside the stream's eligible set are refused.
    pub fn set(&mut self, m: usize, c: usize) -> Result<()> {
        if !self.eligible[m].contains(&c) {
            return Err(CenError::Validation(format!("channel {c} is outside the region of stream {m}")));
        }
        self.replaced[m * self.channels + c] = true;
        Ok(())
    }

    pub fn eligible(&self, m: usize) -> Range<usize> {
        self.eligible[m].clone()
    }

    pub fn replaced_channels(&self, m: usize) -> Vec<usize> {
        (0..self.channels).filter(|&c| self.is_replaced(m, c)).collect()
    }

    /// Replaced fraction of stream `m`'s eligible channels.
    pub fn stream_fraction(&self, m: usize) -> f64 {
        let r = &self.eligible[m];
        if r.is_empty() {
            return 0.0;
        }
        r.clone().filter(|&c| self.is_replaced(m, c)).count() as f64 / r.len() as f64
    }

    /// Replaced fraction over all eligible (stream, channel) pairs.
    pub fn exchanged_fraction(&self) -> f64 {
        let total: usize = self.eligible.iter().map(|r| r.len()).sum();
        if total == 0 {
            return 0.0;
        }
        self.replaced.iter().filter(|&&b| b).count() as f64 / total as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.replaced.iter().any(|&b| b)
    }
}

/// Applies the threshold rule of `plan` inside each stream's eligible set.
pub fn compute_exchange_mask<T: Element>(gammas: &[&[T]], plan: &ExchangePlan) -> Result<ExchangeMask> {
    plan.validate()?;
    if gammas.len() != plan.num_streams {
        return Err(CenError::Validation(format!("{} gamma vectors for {} streams", gammas.len(), plan.num_streams)));
    }
    let channels = gammas[0].len();
    if let Some(bad) = gammas.iter().find(|g| g.len() != channels) {
        return Err(TensorError::Dimension { op: "compute_exchange_mask", axis: "C", expected: channels, found: bad.len() }.into());
    }
    let mut mask = ExchangeMask::empty(plan, channels)?;
    for (m, gamma) in gammas.iter().enumerate() {
        for c in mask.eligible(m) {
            if plan.rule.replaces(gamma[c].as_f64(), plan.theta) {
                mask.set(m, c)?;
            }
        }
    }
    Ok(mask)
}

/// What a replaced channel receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fill {
    /// Mean of the other streams at that channel.
    Mean,
    Zero,
}

struct ExchangeOp {
    stream: usize,
    replaced: Vec<bool>,
    fill: Fill,
    n: usize,
    channels: usize,
    hw: usize,
}

impl<T: Element> Operation<T> for ExchangeOp {
    fn name(&self) -> &'static str {
        "channel_exchange"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let streams = inputs.len();
        let share = T::one() / T::from_usize(streams.saturating_sub(1).max(1)).unwrap();
        let mut out: Vec<Option<Vec<T>>> = needs.iter().map(|&n| n.then(|| vec![T::zero(); g.len()])).collect();
        for s in 0..self.n {
            for c in 0..self.channels {
                let block = (s * self.channels + c) * self.hw..(s * self.channels + c + 1) * self.hw;
                if !self.replaced[c] {
                    if let Some(d) = out[self.stream].as_mut() {
                        d[block.clone()].copy_from_slice(&g[block]);
                    }
                    continue;
                }
                if self.fill == Fill::Zero {
                    continue;
                }
                for (m, d) in out.iter_mut().enumerate() {
                    if m == self.stream {
                        continue;
                    }
                    if let Some(d) = d.as_mut() {
                        for i in block.clone() {
                            d[i] = g[i] * share;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Replaces masked channels of each stream. Streams with nothing replaced
/// are returned as the same node.
pub fn channel_exchange<T: Element>(g: &mut Graph<T>, xs: &[Var], mask: &ExchangeMask, fill: Fill) -> Result<Vec<Var>> {
    let m_count = xs.len();
    if fill == Fill::Mean && m_count < 2 {
        return Err(CenError::Config(format!("channel exchange needs at least 2 streams, got {m_count}")));
    }
    if mask.streams != m_count {
        return Err(CenError::Validation(format!("mask for {} streams applied to {m_count}", mask.streams)));
    }
    let dims @ [n, c, h, w] = g.value(xs[0]).dims4("channel_exchange")?;
    for &x in &xs[1..] {
        let d = g.value(x).dims4("channel_exchange")?;
        for (axis, (a, b)) in ["N", "C", "H", "W"].into_iter().zip(dims.iter().zip(d.iter())) {
            if a != b {
                return Err(TensorError::Dimension { op: "channel_exchange", axis, expected: *a, found: *b }.into());
            }
        }
    }
    if c != mask.channels {
        return Err(TensorError::Dimension { op: "channel_exchange", axis: "C", expected: mask.channels, found: c }.into());
    }
    let hw = h * w;
    let share = T::one() / T::from_usize((m_count - 1).max(1)).unwrap();
    let mut outs = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let replaced: Vec<bool> = (0..c).map(|ch| mask.is_replaced(m, ch)).collect();
        if !replaced.iter().any(|&r| r) {
            outs.push(xs[m]);
            continue;
        }
        let mut out = g.data(xs[m]).to_vec();
        for s in 0..n {
            for ch in (0..c).filter(|&ch| replaced[ch]) {
                let block = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                match fill {
                    Fill::Zero => out[block].fill(T::zero()),
                    Fill::Mean => {
                        for i in block {
                            let mut acc = T::zero();
                            for (k, &x) in xs.iter().enumerate() {
                                if k != m {
                                    acc += g.data(x)[i];
                                }
                            }
                            out[i] = acc * share;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        let op = ExchangeOp { stream: m, replaced, fill, n, channels: c, hw };
        outs.push(g.push_op(value, xs.to_vec(), Box::new(op)));
    }
    Ok(outs)
}

/// Ablations of the exchange rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExchangeVariant {
    /// Threshold rule with mean fill.
    Threshold,
    /// The `round(p * |region|)` channels of smallest `|gamma|`.
    FixedFraction(f64),
    /// A uniformly drawn subset of `round(p * |region|)` channels.
    RandomFraction(f64),
    /// Threshold rule, replaced channels set to zero.
    ZeroOut,
    /// Threshold rule over all channels for every stream.
    NoDivide,
}

impl fmt::Display for ExchangeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExchangeVariant::Threshold => write!(f, "threshold"),
            ExchangeVariant::FixedFraction(p) => write!(f, "fixed:{p}"),
            ExchangeVariant::RandomFraction(p) => write!(f, "random:{p}"),
            ExchangeVariant::ZeroOut => write!(f, "zero-out"),
            ExchangeVariant::NoDivide => write!(f, "no-divide"),
        }
    }
}

fn parse_fraction(s: &str) -> Result<f64> {
    let p: f64 = s.parse().map_err(|_| CenError::Config(format!("bad exchange fraction '{s}'")))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(CenError::Config(format!("exchange fraction must lie in [0, 1], got {p}")));
    }
    Ok(p)
}

impl FromStr for ExchangeVariant {
    type Err = CenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(ExchangeVariant::Threshold),
            "zero-out" => Ok(ExchangeVariant::ZeroOut),
            "no-divide" => Ok(ExchangeVariant::NoDivide),
            _ => {
                if let Some(p) = s.strip_prefix("fixed:") {
                    Ok(ExchangeVariant::FixedFraction(parse_fraction(p)?))
                } else if let Some(p) = s.strip_prefix("random:") {
                    Ok(ExchangeVariant::RandomFraction(parse_fraction(p)?))
                } else {
                    Err(CenError::Config(format!("unknown exchange variant '{s}'")))
                }
            }
        }
    }
}

/// Builds the mask a variant uses. `rng` is consulted only by
/// [`ExchangeVariant::RandomFraction`].
pub fn variant_mask<T: Element>(
    gammas: &[&[T]],
    plan: &ExchangePlan,
    variant: ExchangeVariant,
    rng: &mut Rng,
) -> Result<ExchangeMask> {
    match variant {
        ExchangeVariant::Threshold | ExchangeVariant::ZeroOut => compute_exchange_mask(gammas, plan),
        ExchangeVariant::NoDivide => {
            let plan = ExchangePlan { all_channels: true, ..plan.clone() };
            compute_exchange_mask(gammas, &plan)
        }
        ExchangeVariant::FixedFraction(p) | ExchangeVariant::RandomFraction(p) => {
            plan.validate()?;
            let channels = gammas.first().map_or(0, |g| g.len());
            let mut mask = ExchangeMask::empty(plan, channels)?;
            for (m, gamma) in gammas.iter().enumerate() {
                let region: Vec<usize> = mask.eligible(m).collect();
                let k = (p * region.len() as f64).round() as usize;
                let chosen: Vec<usize> = if matches!(variant, ExchangeVariant::FixedFraction(_)) {
                    let mut order = region.clone();
                    order.sort_by(|&a, &b| gamma[a].abs().partial_cmp(&gamma[b].abs()).unwrap().then(a.cmp(&b)));
                    order.truncate(k);
                    order
                } else {
                    rng.sample_indices(region.len(), k).into_iter().map(|i| region[i]).collect()
                };
                for c in chosen {
                    mask.set(m, c)?;
                }
            }
            Ok(mask)
        }
    }
}

/// Mask from [`variant_mask`] followed by the variant's fill.
pub fn exchange_variant<T: Element>(
    g: &mut Graph<T>,
    xs: &[Var],
    gammas: &[&[T]],
    plan: &ExchangePlan,
    variant: ExchangeVariant,
    rng: &mut Rng,
) -> Result<Vec<Var>> {
    let mask = variant_mask(gammas, plan, variant, rng)?;
    let fill = if variant == ExchangeVariant::ZeroOut { Fill::Zero } else { Fill::Mean };
    channel_exchange(g, xs, &mask, fill)
}

/// Every stream receives the mean of all streams.
pub fn average_streams<T: Element>(g: &mut Graph<T>, xs: &[Var]) -> Result<Vec<Var>> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    let mean = g.scale(acc, T::one() / T::from_usize(xs.len()).unwrap());
    Ok(vec![mean; xs.len()])
}
