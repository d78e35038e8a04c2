use cen_autograd::{Element, Graph, Tensor, Var};

use super::eval::{argmax_channels, IouCounts};
use super::optim::Sgd;
use crate::batch::{task_loss, Batch, Target};
use crate::error::{CenError, Result};
use crate::models::{ForwardContext, ModelAssembly};
use crate::normalization::{sparsity_penalty, StatsMode};
use crate::params::{Bindings, Side};
use crate::rng::{tags, Rng};
use crate::synthdata::{Dataset, TaskKind};

/// Optimization settings. `theta` is read when the assembly is built.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_scores: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub theta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch from which every rate is halved; 0 disables the decay.
    pub lr_decay_epoch: usize,
    pub seed: u64,
    /// Train one randomly drawn flow per step instead of all flows.
    pub random_flow: bool,
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_encoder: 0.05,
            lr_decoder: 0.05,
            lr_scores: 0.05,
            momentum: 0.9,
            weight_decay: 1e-5,
            lambda: 1e-3,
            theta: 1e-2,
            batch_size: 8,
            epochs: 60,
            lr_decay_epoch: 30,
            seed: 0,
            random_flow: false,
            trace_every: 50,
        }
    }
}

impl TrainConfig {
    /// Sparsity regime of the task: `lambda = 5e-3, theta = 2e-2` with class
    /// targets, `1e-3, 1e-2` otherwise.
    pub fn for_task(kind: TaskKind) -> Self {
        let (lambda, theta) = if kind.is_segmentation() { (5e-3, 2e-2) } else { (1e-3, 1e-2) };
        TrainConfig { lambda, theta, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [("lr_encoder", self.lr_encoder), ("lr_decoder", self.lr_decoder), ("lr_scores", self.lr_scores)];
        for (name, v) in rates.into_iter().chain([("weight_decay", self.weight_decay)]) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CenError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CenError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(CenError::Config(format!("theta must be >= 0, got {}", self.theta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CenError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.trace_every == 0 {
            return Err(CenError::Config("batch_size, epochs and trace_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Sgd {
        Sgd { momentum: self.momentum, weight_decay: self.weight_decay }
    }

    pub fn lr_scale(&self, epoch: usize) -> f64 {
        if self.lr_decay_epoch > 0 && epoch >= self.lr_decay_epoch {
            0.5
        } else {
            1.0
        }
    }

    pub fn rate(&self, side: Side, scale: f64) -> f64 {
        scale
            * match side {
                Side::Encoder => self.lr_encoder,
                Side::Decoder => self.lr_decoder,
                Side::Scores => self.lr_scores,
            }
    }
}

/// Losses of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    /// Task loss of every lane, `None` for lanes not run this step.
    pub lane_losses: Vec<Option<f64>>,
    /// Ensemble loss per task before the step.
    pub ensemble_losses: Vec<Option<f64>>,
    /// Batch mean IoU of the ensemble over class tasks.
    pub miou: Option<f64>,
    pub sparsity: f64,
    pub total: f64,
}

/// Gradients of one step and everything needed to finish it.
pub struct StepGradients<T: Element> {
    pub grads: Vec<Option<Vec<T>>>,
    pub record: MetricsRecord,
    /// Detached lane predictions of each task that was run.
    pub predictions: Vec<Option<Vec<Tensor<T>>>>,
}

fn flows_for_step<T: Element>(assembly: &ModelAssembly<T>, cfg: &TrainConfig, step: u64) -> Vec<usize> {
    let n = assembly.num_flows();
    if cfg.random_flow && n > 1 {
        vec![Rng::stream(cfg.seed, &[tags::FLOW, step]).below(n)]
    } else {
        (0..n).collect()
    }
}

/// Name of the first parameter holding a non-finite value, else of the
/// first one with a non-finite gradient.
fn first_non_finite<T: Element>(assembly: &ModelAssembly<T>, grads: Option<&[Option<Vec<T>>]>) -> Option<String> {
    if let Some((_, p)) = assembly.store.iter().find(|(_, p)| !p.value.all_finite()) {
        return Some(p.name.clone());
    }
    let grads = grads?;
    assembly
        .store
        .iter()
        .find(|(id, _)| matches!(grads.get(id.index()), Some(Some(g)) if g.iter().any(|v| !v.as_f64().is_finite())))
        .map(|(_, p)| format!("{} (gradient)", p.name))
}

/// Forward and backward pass of one step: the sum of every run lane's task
/// loss plus the L1 term on the scaling factors of each active exchange
/// group, differentiated with respect to all parameters.
pub fn step_gradients<T: Element>(
    assembly: &mut ModelAssembly<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepGradients<T>> {
    let lambda = if assembly.options.sparsity { cfg.lambda } else { 0.0 };
    let ctx = ForwardContext { stats: StatsMode::Train, step, seed: cfg.seed };
    let mut g = Graph::new();
    let mut bind = Bindings::new(&assembly.store);
    let inputs: Vec<Var> = batch.inputs.iter().map(|x| g.constant(x.clone())).collect();
    let ntasks = assembly.tasks.len();
    let mut lane_losses = vec![None; assembly.lanes.len()];
    let mut ensemble_losses = vec![None; ntasks];
    let mut predictions = vec![None; ntasks];
    let mut ious: Vec<Option<IouCounts>> = vec![None; ntasks];
    let mut terms = Vec::new();
    let mut penalties = Vec::new();

    for flow in flows_for_step(assembly, cfg, step) {
        let out = assembly.forward(&mut g, &mut bind, &inputs, flow, &ctx)?;
        for t in &out.tasks {
            let target = &batch.targets[t.task];
            for (&lane, &p) in t.lanes.iter().zip(&t.predictions) {
                let l = task_loss(&mut g, p, target)?;
                lane_losses[lane] = Some(g.item(l).as_f64());
                terms.push(l);
            }
            let e = task_loss(&mut g, t.ensemble, target)?;
            ensemble_losses[t.task] = Some(g.item(e).as_f64());
            predictions[t.task] = Some(t.predictions.iter().map(|&p| g.value(p).clone()).collect());
            if let Target::Classes { labels, classes } = target {
                let mut c = IouCounts::new(*classes);
                c.add(&argmax_channels(g.value(t.ensemble)), labels);
                ious[t.task] = Some(c);
            }
        }
        for group in assembly.flows[flow].groups.clone() {
            if !group.active || lambda == 0.0 {
                continue;
            }
            let streams: Vec<_> = group.lanes.iter().map(|&l| assembly.lane_gammas(l, group.part)).collect();
            penalties.push(sparsity_penalty(&mut g, &mut bind, &assembly.store, &streams, &group.plan, lambda)?);
        }
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let mut sparsity = 0.0;
    for &p in &penalties {
        sparsity += g.item(p).as_f64();
        total = g.add(total, p)?;
    }
    let total_value = g.item(total).as_f64();
    let miou_parts: Vec<f64> = ious.iter().flatten().filter_map(IouCounts::mean).collect();
    let record = MetricsRecord {
        step,
        epoch: 0,
        lane_losses,
        ensemble_losses,
        miou: (!miou_parts.is_empty()).then(|| miou_parts.iter().sum::<f64>() / miou_parts.len() as f64),
        sparsity,
        total: total_value,
    };
    if !total_value.is_finite() {
        let param = first_non_finite(assembly, None).unwrap_or_else(|| "loss".into());
        return Err(CenError::NonFinite { step, param });
    }
    g.backward(total)?;
    let grads = bind.gradients(&g, &assembly.store);
    Ok(StepGradients { grads, record, predictions })
}

/// One optimization step: subnetwork SGD on the summed loss, then one
/// decision-score step per task on the detached predictions of the same
/// pass, with the subnetworks held fixed.
pub fn train_step<T: Element>(
    assembly: &mut ModelAssembly<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    step: u64,
    lr_scale: f64,
) -> Result<MetricsRecord> {
    let StepGradients { grads, record, predictions } = step_gradients(assembly, batch, cfg, step)?;
    if let Some(param) = first_non_finite(assembly, Some(&grads)) {
        return Err(CenError::NonFinite { step, param });
    }
    cfg.optimizer().step(&mut assembly.store, &grads, |side| cfg.rate(side, lr_scale));
    let lr = cfg.rate(Side::Scores, lr_scale);
    for (task, preds) in predictions.into_iter().enumerate() {
        if let Some(preds) = preds {
            assembly.score_step(task, &preds, &batch.targets[task], lr)?;
        }
    }
    Ok(record)
}

/// Epoch loop state: the step counter fully determines the next batch.
pub struct Trainer<T: Element> {
    pub assembly: ModelAssembly<T>,
    pub config: TrainConfig,
    pub step: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(assembly: ModelAssembly<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { assembly, config, step: 0 })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        (self.steps_per_epoch(n) * self.config.epochs) as u64
    }

    /// Epoch and sample indices of `step`; each epoch is a fresh shuffle.
    pub fn batch_indices(&self, n: usize, step: u64) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch(n) as u64;
        let epoch = (step / spe) as usize;
        let offset = (step % spe) as usize * self.config.batch_size;
        let mut order: Vec<usize> = (0..n).collect();
        Rng::stream(self.config.seed, &[tags::SHUFFLE, epoch as u64]).shuffle(&mut order);
        let end = (offset + self.config.batch_size).min(n);
        (epoch, order[offset..end].to_vec())
    }

    pub fn step_once(&mut self, data: &Dataset) -> Result<MetricsRecord> {
        let (epoch, idx) = self.batch_indices(data.train.len, self.step);
        let batch = data.batch::<T>(&data.train, &idx)?;
        let scale = self.config.lr_scale(epoch);
        let mut record = train_step(&mut self.assembly, &batch, &self.config, self.step, scale)?;
        record.epoch = epoch;
        self.step += 1;
        Ok(record)
    }

    /// Steps until `until` (exclusive), calling `observe` after each.
    pub fn run_until(
        &mut self,
        data: &Dataset,
        until: u64,
        mut observe: impl FnMut(&Self, &MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let record = self.step_once(data)?;
            observe(self, &record)?;
        }
        Ok(())
    }

    /// The full schedule of `config.epochs` epochs.
    pub fn run(&mut self, data: &Dataset, observe: impl FnMut(&Self, &MetricsRecord) -> Result<()>) -> Result<()> {
        let total = self.total_steps(data.train.len);
        self.run_until(data, total, observe)
    }
}
