//! Mini-batches fed to an assembly.

use cen_autograd::{Element, Graph, Tensor, Var};

use crate::error::{CenError, Result};

/// What a task predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// One real-valued channel, trained with MSE.
    Regression,
    /// Per-pixel class labels, trained with cross-entropy over `classes` logits.
    Classes(usize),
}

impl TargetKind {
    pub fn out_channels(self) -> usize {
        match self {
            TargetKind::Regression => 1,
            TargetKind::Classes(c) => c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target<T: Element> {
    Regression(Tensor<T>),
    Classes { labels: Vec<usize>, classes: usize },
}

impl<T: Element> Target<T> {
    pub fn kind(&self) -> TargetKind {
        match self {
            Target::Regression(_) => TargetKind::Regression,
            Target::Classes { classes, .. } => TargetKind::Classes(*classes),
        }
    }
}

/// Inputs per modality (`[N,1,H,W]` each) and one target per task.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Element> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Target<T>>,
}

impl<T: Element> Batch<T> {
    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// MSE for regression targets, pixel cross-entropy for class targets.
pub fn task_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &Target<T>) -> Result<Var> {
    match target {
        Target::Regression(t) => {
            let t = g.constant(t.clone());
            Ok(g.mse_loss(pred, t)?)
        }
        Target::Classes { labels, classes } => {
            if g.shape(pred)[1] != *classes {
                return Err(CenError::Validation(format!(
                    "prediction has {} channels for a {classes}-class target",
                    g.shape(pred)[1]
                )));
            }
            Ok(g.cross_entropy_pixelwise(pred, labels)?)
        }
    }
}
