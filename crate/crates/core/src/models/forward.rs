use cen_autograd::{Element, Graph, Tensor, Var};

use super::{ExchangeGroup, Fusion, ModelAssembly, Part};
use crate::batch::{task_loss, Batch, Target};
use crate::error::{CenError, Result};
use crate::exchange::{average_streams, exchange_variant};
use crate::normalization::{norm_forward, StatsMode};
use crate::params::{Bindings, ParamId};
use crate::rng::{tags, Rng};

/// Per-pass settings. `step` and `seed` key the random-exchange ablation.
#[derive(Clone, Copy, Debug)]
pub struct ForwardContext {
    pub stats: StatsMode,
    pub step: u64,
    pub seed: u64,
}

impl ForwardContext {
    pub fn new(stats: StatsMode) -> Self {
        ForwardContext { stats, step: 0, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TaskOutput {
    pub task: usize,
    pub lanes: Vec<usize>,
    pub predictions: Vec<Var>,
    /// Decision scores used for `ensemble`, treated as constants.
    pub alphas: Vec<f64>,
    pub ensemble: Var,
}

#[derive(Clone, Debug)]
pub struct FlowOutput {
    pub flow: usize,
    pub tasks: Vec<TaskOutput>,
}

/// Concrete predictions of one task.
#[derive(Clone, Debug)]
pub struct TaskValues<T: Element> {
    pub task: usize,
    pub lanes: Vec<usize>,
    pub predictions: Vec<Tensor<T>>,
    pub ensemble: Tensor<T>,
}

impl<T: Element> ModelAssembly<T> {
    fn conv(
        &self,
        g: &mut Graph<T>,
        bind: &mut Bindings,
        x: Var,
        layer: &super::ConvLayer,
    ) -> Result<Var> {
        let x = if layer.upsample > 1 { g.upsample_nearest(x, layer.upsample)? } else { x };
        let w = bind.bind(g, &self.store, layer.weight);
        let b = bind.bind(g, &self.store, layer.bias);
        Ok(g.conv2d(x, w, b, layer.stride, layer.padding)?)
    }

    fn gamma_of(&self, lane: usize, part: Part, layer: usize) -> ParamId {
        let l = &self.lanes[lane];
        match part {
            Part::Encoder => self.banks[l.enc_bank].encoder[layer].gamma,
            Part::Decoder => self.banks[l.dec_bank].decoder[layer].gamma,
        }
    }

    fn fuse(
        &self,
        g: &mut Graph<T>,
        group: &ExchangeGroup,
        group_id: u64,
        layer: usize,
        xs: &[Var],
        ctx: &ForwardContext,
    ) -> Result<Vec<Var>> {
        match self.options.fusion {
            Fusion::None => Ok(xs.to_vec()),
            Fusion::Average => average_streams(g, xs),
            Fusion::Exchange(variant) => {
                let ids: Vec<ParamId> = group.lanes.iter().map(|&l| self.gamma_of(l, group.part, layer)).collect();
                let gammas: Vec<&[T]> = ids.iter().map(|&id| self.store.value(id)).collect();
                let path = [tags::RANDOM_EXCHANGE, ctx.step, group_id, layer as u64];
                let mut rng = Rng::stream(ctx.seed, &path);
                exchange_variant(g, xs, &gammas, &group.plan, variant, &mut rng)
            }
            // Mixed before normalization, see `concat_mix`.
            Fusion::Concat => Ok(xs.to_vec()),
        }
    }

    /// Concatenates every stream's convolution output (own first, then the
    /// others in order) and maps it back to one stream's width with the
    /// shared 1x1 mixer of this layer.
    fn concat_mix(&self, g: &mut Graph<T>, bind: &mut Bindings, part: Part, layer: usize, xs: &[Var]) -> Result<Vec<Var>> {
        let (_, _, mixer) = self
            .fusers
            .iter()
            .find(|(p, l, _)| *p == part && *l == layer)
            .ok_or_else(|| CenError::Config(format!("no concat mixer for {}{layer}", part.tag())))?;
        let mixer = mixer.clone();
        let mut outs = Vec::with_capacity(xs.len());
        for i in 0..xs.len() {
            let mut parts = vec![xs[i]];
            parts.extend(xs.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &x)| x));
            let cat = g.concat_channels(&parts)?;
            outs.push(self.conv(g, bind, cat, &mixer)?);
        }
        Ok(outs)
    }

    /// Runs every lane of `flow` on `inputs` (one node per modality).
    ///
    /// Each lane passes through its encoder and decoder with its own norm
    /// layers; active exchange groups fuse normalized features before the
    /// activation. Ensembles weight lane predictions by the current decision
    /// scores.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        bind: &mut Bindings,
        inputs: &[Var],
        flow: usize,
        ctx: &ForwardContext,
    ) -> Result<FlowOutput> {
        if flow >= self.flows.len() {
            return Err(CenError::Validation(format!("flow {flow} out of range for {} flows", self.flows.len())));
        }
        let def = self.flows[flow].clone();
        for &l in &def.lanes {
            let m = self.lanes[l].modality;
            if m >= inputs.len() {
                return Err(CenError::Validation(format!("lane {l} reads modality {m}, only {} inputs given", inputs.len())));
            }
        }

        // Lanes with the same input, encoder and encoder bank share one encoder pass.
        let rep: Vec<usize> = def
            .lanes
            .iter()
            .map(|&l| {
                let a = &self.lanes[l];
                *def.lanes
                    .iter()
                    .find(|&&k| {
                        let b = &self.lanes[k];
                        (b.modality, b.encoder, b.enc_bank) == (a.modality, a.encoder, a.enc_bank)
                    })
                    .unwrap()
            })
            .collect();
        let pos = |lane: usize| def.lanes.iter().position(|&l| l == lane).unwrap();
        let mut feat: Vec<Option<Var>> = vec![None; self.lanes.len()];
        for (i, &l) in def.lanes.iter().enumerate() {
            if rep[i] == l {
                feat[l] = Some(inputs[self.lanes[l].modality]);
            }
        }

        for layer in 0..self.spec.encoder.len() {
            let mut normed: Vec<Option<Var>> = vec![None; self.lanes.len()];
            for (i, &l) in def.lanes.iter().enumerate() {
                if rep[i] == l {
                    let conv = self.encoders[self.lanes[l].encoder].layers[layer].clone();
                    normed[l] = Some(self.conv(g, bind, feat[l].unwrap(), &conv)?);
                }
            }
            if self.options.fusion == Fusion::Concat {
                for group in def.groups.iter().filter(|gr| gr.part == Part::Encoder && gr.active) {
                    let xs: Vec<Var> = group.lanes.iter().map(|&l| normed[rep[pos(l)]].unwrap()).collect();
                    for (&l, v) in group.lanes.iter().zip(self.concat_mix(g, bind, Part::Encoder, layer, &xs)?) {
                        normed[rep[pos(l)]] = Some(v);
                    }
                }
            }
            for (i, &l) in def.lanes.iter().enumerate() {
                if rep[i] == l {
                    let params = &mut self.banks[self.lanes[l].enc_bank].encoder[layer];
                    normed[l] = Some(norm_forward(g, bind, &self.store, params, normed[l].unwrap(), ctx.stats)?);
                }
            }
            for (gi, group) in def.groups.iter().enumerate() {
                if group.part != Part::Encoder || !group.active {
                    continue;
                }
                let xs: Vec<Var> = group.lanes.iter().map(|&l| normed[rep[pos(l)]].unwrap()).collect();
                let fused = self.fuse(g, group, (flow * 64 + gi) as u64, layer, &xs, ctx)?;
                for (&l, v) in group.lanes.iter().zip(fused) {
                    normed[rep[pos(l)]] = Some(v);
                }
            }
            for &l in &def.lanes {
                if let Some(v) = normed[l] {
                    feat[l] = Some(g.relu(v));
                }
            }
        }

        let mut dec: Vec<Option<Var>> = vec![None; self.lanes.len()];
        for (i, &l) in def.lanes.iter().enumerate() {
            dec[l] = feat[rep[i]];
        }
        for layer in 0..self.spec.decoder.len() {
            let mut normed: Vec<Option<Var>> = vec![None; self.lanes.len()];
            for &l in &def.lanes {
                let conv = self.decoders[self.lanes[l].decoder].layers[layer].clone();
                normed[l] = Some(self.conv(g, bind, dec[l].unwrap(), &conv)?);
            }
            if self.options.fusion == Fusion::Concat {
                for group in def.groups.iter().filter(|gr| gr.part == Part::Decoder && gr.active) {
                    let xs: Vec<Var> = group.lanes.iter().map(|&l| normed[l].unwrap()).collect();
                    for (&l, v) in group.lanes.iter().zip(self.concat_mix(g, bind, Part::Decoder, layer, &xs)?) {
                        normed[l] = Some(v);
                    }
                }
            }
            for &l in &def.lanes {
                let params = &mut self.banks[self.lanes[l].dec_bank].decoder[layer];
                normed[l] = Some(norm_forward(g, bind, &self.store, params, normed[l].unwrap(), ctx.stats)?);
            }
            for (gi, group) in def.groups.iter().enumerate() {
                if group.part != Part::Decoder || !group.active {
                    continue;
                }
                let xs: Vec<Var> = group.lanes.iter().map(|&l| normed[l].unwrap()).collect();
                let fused = self.fuse(g, group, (flow * 64 + gi) as u64, layer, &xs, ctx)?;
                for (&l, v) in group.lanes.iter().zip(fused) {
                    normed[l] = Some(v);
                }
            }
            for &l in &def.lanes {
                dec[l] = Some(g.relu(normed[l].unwrap()));
            }
        }

        let mut preds: Vec<Option<Var>> = vec![None; self.lanes.len()];
        for &l in &def.lanes {
            let head = self.decoders[self.lanes[l].decoder].layers.last().unwrap().clone();
            preds[l] = Some(self.conv(g, bind, dec[l].unwrap(), &head)?);
        }

        let mut tasks: Vec<usize> = def.lanes.iter().map(|&l| self.lanes[l].task).collect();
        tasks.sort_unstable();
        tasks.dedup();
        let mut outs = Vec::with_capacity(tasks.len());
        for task in tasks {
            let lanes = self.scores.lanes[task].clone();
            let predictions: Vec<Var> = lanes.iter().map(|&l| preds[l].unwrap()).collect();
            let alphas = self.scores.alphas(&self.store, task);
            let ensemble = if predictions.len() == 1 {
                predictions[0]
            } else {
                let a = g.constant(Tensor::from_fn([alphas.len()], |i| T::from_f64_lossy(alphas[i])));
                g.weighted_sum(&predictions, a)?
            };
            outs.push(TaskOutput { task, lanes, predictions, alphas, ensemble });
        }
        Ok(FlowOutput { flow, tasks: outs })
    }

    /// Predictions for every task with all parameters frozen.
    pub fn predict(&mut self, batch: &Batch<T>, ctx: &ForwardContext) -> Result<Vec<TaskValues<T>>> {
        let mut out = Vec::new();
        for flow in 0..self.flows.len() {
            let mut g = Graph::new();
            let mut bind = Bindings::frozen(&self.store);
            let inputs: Vec<Var> = batch.inputs.iter().map(|x| g.constant(x.clone())).collect();
            let res = self.forward(&mut g, &mut bind, &inputs, flow, ctx)?;
            for t in res.tasks {
                out.push(TaskValues {
                    task: t.task,
                    lanes: t.lanes,
                    predictions: t.predictions.iter().map(|&p| g.value(p).clone()).collect(),
                    ensemble: g.value(t.ensemble).clone(),
                });
            }
        }
        out.sort_by_key(|t| t.task);
        Ok(out)
    }

    /// One plain gradient step on the logits of `task` through the loss of
    /// the ensemble of fixed `predictions`. Returns the ensemble loss before
    /// the step.
    pub fn score_step(&mut self, task: usize, predictions: &[Tensor<T>], target: &Target<T>, lr: f64) -> Result<f64> {
        let id = self.scores.logits[task];
        let mut g = Graph::new();
        let z = g.leaf(self.store.get(id).value.clone());
        let a = g.softmax(z);
        let parts: Vec<Var> = predictions.iter().map(|p| g.constant(p.clone())).collect();
        let ens = g.weighted_sum(&parts, a)?;
        let loss = task_loss(&mut g, ens, target)?;
        let value = g.item(loss).as_f64();
        if predictions.len() > 1 {
            g.backward(loss)?;
            let grad = g.grad(z).map(|d| d.to_vec()).unwrap_or_default();
            let lr = T::from_f64_lossy(lr);
            for (w, d) in self.store.get_mut(id).value.data_mut().iter_mut().zip(grad) {
                *w -= lr * d;
            }
        }
        Ok(value)
    }
}

/// Decision-score update with the subnetworks frozen: a fresh forward pass
/// with batch statistics (running statistics untouched), predictions held
/// constant, and one step on every task's logits.
pub fn update_decision_scores<T: Element>(assembly: &mut ModelAssembly<T>, batch: &Batch<T>, lr: f64) -> Result<()> {
    let values = assembly.predict(batch, &ForwardContext::new(StatsMode::Probe))?;
    for t in values {
        assembly.score_step(t.task, &t.predictions, &batch.targets[t.task], lr)?;
    }
    Ok(())
}
