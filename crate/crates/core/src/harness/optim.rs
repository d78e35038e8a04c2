use cen_autograd::Element;

use crate::params::{Param, ParamRole, ParamStore, Side};

/// SGD with heavy-ball momentum and L2 weight decay on convolution weights:
/// `g += wd * w; v = mu * v + g; w -= lr * v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// Updates every encoder and decoder parameter that has a gradient.
    /// Decision-score logits are left alone.
    pub fn step<T: Element>(&self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: impl Fn(Side) -> f64) {
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        for (id, p) in store.iter_mut() {
            if p.side == Side::Scores {
                continue;
            }
            let Some(Some(grad)) = grads.get(id.index()) else {
                continue;
            };
            let decay = p.role == ParamRole::ConvWeight && self.weight_decay != 0.0;
            let rate = T::from_f64_lossy(lr(p.side));
            let Param { value, velocity, .. } = p;
            for ((w, v), &d) in value.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
                let d = if decay { d + wd * *w } else { d };
                *v = mu * *v + d;
                *w -= rate * *v;
            }
        }
    }
}
