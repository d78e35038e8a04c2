use cen_autograd::Element;

use crate::error::Result;
use crate::exchange::compute_exchange_mask;
use crate::models::{ModelAssembly, Part};

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub layer: String,
    pub stream: usize,
    pub channel: usize,
    pub gamma: f64,
    pub replaced: bool,
}

/// Per-stream view of one layer. Categories split the stream's eligible
/// channels: `a` own |gamma| <= theta, `b` own above and every other stream
/// at or below, `c` own and some other stream above.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSummary {
    pub stream: usize,
    pub exchanged_fraction: f64,
    pub a: usize,
    pub b: usize,
    pub c: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub step: u64,
    pub layer: String,
    pub exchanged_fraction: f64,
    pub streams: Vec<StreamSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTrace {
    pub step: u64,
    pub rows: Vec<TraceRow>,
    pub layers: Vec<LayerSummary>,
}

impl ChannelTrace {
    pub fn max_exchanged_fraction(&self) -> f64 {
        self.layers.iter().map(|l| l.exchanged_fraction).fold(0.0, f64::max)
    }
}

/// One gamma snapshot of an exchange site: label, gammas per stream, plan.
struct Site {
    label: String,
    gammas: Vec<Vec<f64>>,
    plan: crate::exchange::ExchangePlan,
}

fn sites<T: Element>(assembly: &ModelAssembly<T>) -> Vec<Site> {
    let active: Vec<_> = assembly.groups().filter(|(_, g)| g.active).collect();
    let mut out = Vec::new();
    for (gi, (_, group)) in active.iter().enumerate() {
        let several = active.iter().filter(|(_, g)| g.part == group.part).count() > 1;
        let layers = match group.part {
            Part::Encoder => assembly.spec.encoder.len(),
            Part::Decoder => assembly.spec.decoder.len(),
        };
        for layer in 0..layers {
            let gammas = group
                .lanes
                .iter()
                .map(|&l| assembly.store.value(assembly.lane_gammas(l, group.part)[layer]).iter().map(|v| v.as_f64()).collect())
                .collect();
            let label = if several {
                format!("g{gi}.{}{layer}", group.part.tag())
            } else {
                format!("{}{layer}", group.part.tag())
            };
            out.push(Site { label, gammas, plan: group.plan.clone() });
        }
    }
    out
}

/// Gamma snapshot and replacement state of every exchange-enabled layer.
pub fn record_trace<T: Element>(assembly: &ModelAssembly<T>, step: u64) -> Result<ChannelTrace> {
    let theta = assembly.options.theta;
    let mut rows = Vec::new();
    let mut layers = Vec::new();
    for site in sites(assembly) {
        let refs: Vec<&[f64]> = site.gammas.iter().map(Vec::as_slice).collect();
        let mask = compute_exchange_mask(&refs, &site.plan)?;
        let mut streams = Vec::new();
        for (m, gam) in site.gammas.iter().enumerate() {
            for (c, &v) in gam.iter().enumerate() {
                rows.push(TraceRow { step, layer: site.label.clone(), stream: m, channel: c, gamma: v, replaced: mask.is_replaced(m, c) });
            }
            let (mut a, mut b, mut cc) = (0, 0, 0);
            for ch in mask.eligible(m) {
                let other_high = site.gammas.iter().enumerate().any(|(k, g)| k != m && g[ch].abs() > theta);
                if gam[ch].abs() <= theta {
                    a += 1;
                } else if other_high {
                    cc += 1;
                } else {
                    b += 1;
                }
            }
            streams.push(StreamSummary { stream: m, exchanged_fraction: mask.stream_fraction(m), a, b, c: cc });
        }
        layers.push(LayerSummary { step, layer: site.label, exchanged_fraction: mask.exchanged_fraction(), streams });
    }
    Ok(ChannelTrace { step, rows, layers })
}

/// Tracks eligible scaling factors that drop to |gamma| <= theta from
/// `start` on and counts those that later climb above twice theta.
#[derive(Clone, Debug)]
pub struct RecoveryTracker {
    pub start: u64,
    /// `(label, stream, channel)` -> recovered since falling.
    fallen: std::collections::BTreeMap<(String, usize, usize), bool>,
}

impl RecoveryTracker {
    pub fn new(start: u64) -> Self {
        RecoveryTracker { start, fallen: Default::default() }
    }

    pub fn observe<T: Element>(&mut self, assembly: &ModelAssembly<T>, step: u64) -> Result<()> {
        if step < self.start {
            return Ok(());
        }
        let theta = assembly.options.theta;
        for site in sites(assembly) {
            for (m, gam) in site.gammas.iter().enumerate() {
                for c in site.plan.eligible(m, gam.len())? {
                    let key = (site.label.clone(), m, c);
                    let v = gam[c].abs();
                    match self.fallen.get_mut(&key) {
                        Some(recovered) => *recovered |= v > 2.0 * theta,
                        None if v <= theta => {
                            self.fallen.insert(key, false);
                        }
                        None => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn fallen(&self) -> usize {
        self.fallen.len()
    }

    pub fn recovered(&self) -> usize {
        self.fallen.values().filter(|&&r| r).count()
    }

    pub fn recovered_fraction(&self) -> f64 {
        if self.fallen.is_empty() {
            0.0
        } else {
            self.recovered() as f64 / self.fallen() as f64
        }
    }
}
