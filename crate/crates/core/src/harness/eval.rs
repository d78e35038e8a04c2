use cen_autograd::{Element, Tensor};

use crate::batch::{Target, TargetKind};
use crate::error::Result;
use crate::models::{ForwardContext, ModelAssembly};
use crate::normalization::StatsMode;
use crate::synthdata::{Dataset, Split};

/// Per-class intersection and union counts.
#[derive(Clone, Debug, PartialEq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        IouCounts { intersection: vec![0; classes], union: vec![0; classes] }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) {
        for (&p, &t) in pred.iter().zip(gt) {
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn mean(&self) -> Option<f64> {
        let ious: Vec<f64> = self
            .intersection
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn mean_iou(pred: &[usize], gt: &[usize], classes: usize) -> Option<f64> {
    let mut c = IouCounts::new(classes);
    c.add(pred, gt);
    c.mean()
}

/// Per-pixel argmax over the channel axis of `[N,C,H,W]` logits.
pub fn argmax_channels<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let s = logits.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Running sums for one prediction source.
#[derive(Clone, Debug)]
struct Accum {
    sq: f64,
    abs: f64,
    ce: f64,
    pixels: u64,
    iou: Option<IouCounts>,
}

impl Accum {
    fn new(kind: TargetKind) -> Self {
        let iou = match kind {
            TargetKind::Classes(c) => Some(IouCounts::new(c)),
            TargetKind::Regression => None,
        };
        Accum { sq: 0.0, abs: 0.0, ce: 0.0, pixels: 0, iou }
    }

    fn add<T: Element>(&mut self, pred: &Tensor<T>, target: &Target<T>) {
        match target {
            Target::Regression(t) => {
                for (p, y) in pred.data().iter().zip(t.data()) {
                    let e = p.as_f64() - y.as_f64();
                    self.sq += e * e;
                    self.abs += e.abs();
                }
                self.pixels += t.numel() as u64;
            }
            Target::Classes { labels, .. } => {
                let s = pred.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let d = pred.data();
                for (i, &label) in labels.iter().enumerate() {
                    let (b, p) = (i / hw, i % hw);
                    let at = |k: usize| d[(b * c + k) * hw + p].as_f64();
                    let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + (0..c).map(|k| (at(k) - max).exp()).sum::<f64>().ln();
                    self.ce += lse - at(label);
                }
                self.pixels += labels.len() as u64;
                if let Some(iou) = &mut self.iou {
                    iou.add(&argmax_channels(pred), labels);
                }
            }
        }
    }

    fn finish(&self) -> Metric {
        let n = self.pixels.max(1) as f64;
        match &self.iou {
            None => Metric { loss: self.sq / n, mse: Some(self.sq / n), mae: Some(self.abs / n), miou: None },
            Some(iou) => Metric { loss: self.ce / n, mse: None, mae: None, miou: iou.mean() },
        }
    }
}

/// Errors of one prediction source. `loss` is the training loss of the
/// task (MSE or mean pixel cross-entropy).
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub loss: f64,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub task: usize,
    pub kind: TargetKind,
    /// `(lane, metric)` for every stream predicting this task.
    pub lanes: Vec<(usize, Metric)>,
    pub ensemble: Metric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
}

impl EvalReport {
    pub fn ensemble_loss(&self, task: usize) -> f64 {
        self.tasks[task].ensemble.loss
    }
}

/// Metrics of `split` with running statistics and frozen parameters,
/// processed in order in chunks of `batch` samples.
pub fn evaluate<T: Element>(
    assembly: &mut ModelAssembly<T>,
    data: &Dataset,
    split: &Split,
    batch: usize,
) -> Result<EvalReport> {
    let ctx = ForwardContext::new(StatsMode::Eval);
    let mut lane_acc: Vec<Vec<Accum>> =
        assembly.scores.lanes.iter().zip(&assembly.tasks).map(|(ls, &k)| vec![Accum::new(k); ls.len()]).collect();
    let mut ens_acc: Vec<Accum> = assembly.tasks.iter().map(|&k| Accum::new(k)).collect();
    let idx: Vec<usize> = (0..split.len).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let b = data.batch::<T>(split, chunk)?;
        for t in assembly.predict(&b, &ctx)? {
            let target = &b.targets[t.task];
            for (acc, p) in lane_acc[t.task].iter_mut().zip(&t.predictions) {
                acc.add(p, target);
            }
            ens_acc[t.task].add(&t.ensemble, target);
        }
    }
    let tasks = (0..assembly.tasks.len())
        .map(|task| TaskEval {
            task,
            kind: assembly.tasks[task],
            lanes: assembly.scores.lanes[task].iter().copied().zip(lane_acc[task].iter().map(Accum::finish)).collect(),
            ensemble: ens_acc[task].finish(),
        })
        .collect();
    Ok(EvalReport { tasks })
}
