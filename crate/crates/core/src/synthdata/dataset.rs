use std::fmt;
use std::str::FromStr;

use cen_autograd::{Element, Tensor};

use super::{derive_modality, gen_latent, sobel_magnitude, ViewKind, DEFAULT_BUMPS, DEFAULT_SIZE};
use crate::batch::{Batch, Target, TargetKind};
use crate::error::{CenError, Result};
use crate::models::Topology;
use crate::rng::Rng;

pub(crate) const SEG_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    FusionRegression,
    FusionSegmentation,
    CycleTriplet,
    MultitaskPair,
    MmMtQuad,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::FusionRegression,
        TaskKind::FusionSegmentation,
        TaskKind::CycleTriplet,
        TaskKind::MultitaskPair,
        TaskKind::MmMtQuad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::FusionRegression => "fusion_regression",
            TaskKind::FusionSegmentation => "fusion_segmentation",
            TaskKind::CycleTriplet => "cycle_triplet",
            TaskKind::MultitaskPair => "multitask_pair",
            TaskKind::MmMtQuad => "mm_mt_quad",
        }
    }

    pub(crate) fn code(self) -> u32 {
        TaskKind::ALL.iter().position(|&k| k == self).unwrap() as u32
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        TaskKind::ALL.get(code as usize).copied()
    }

    pub fn input_views(self) -> Vec<ViewKind> {
        match self {
            TaskKind::CycleTriplet => vec![ViewKind::Coarse, ViewKind::Edge, ViewKind::Noisy],
            TaskKind::MultitaskPair => vec![ViewKind::Noisy],
            _ => vec![ViewKind::Coarse, ViewKind::Edge],
        }
    }

    pub fn targets(self) -> Vec<TargetKind> {
        match self {
            TaskKind::FusionRegression => vec![TargetKind::Regression],
            TaskKind::FusionSegmentation => vec![TargetKind::Classes(SEG_CLASSES)],
            TaskKind::CycleTriplet => vec![TargetKind::Regression; 3],
            TaskKind::MultitaskPair => vec![TargetKind::Regression; 2],
            TaskKind::MmMtQuad => vec![TargetKind::Regression, TargetKind::Classes(SEG_CLASSES)],
        }
    }

    pub fn default_topology(self) -> Topology {
        match self {
            TaskKind::FusionRegression | TaskKind::FusionSegmentation => Topology::Multimodal { m1: 2 },
            TaskKind::CycleTriplet => Topology::Cycle { shared_decoder: true },
            TaskKind::MultitaskPair => Topology::Multitask { m2: 2 },
            TaskKind::MmMtQuad => Topology::MmMt { m1: 2, m2: 2 },
        }
    }

    /// Segmentation-style tasks use the stronger sparsity regime.
    pub fn is_segmentation(self) -> bool {
        self.targets().iter().any(|t| matches!(t, TargetKind::Classes(_)))
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = CenError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| CenError::Config(format!("unknown task kind '{s}'")))
    }
}

/// Generation knobs; `Default` gives 32x32 fields with 6 bumps and the
/// standard noise levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataParams {
    pub height: usize,
    pub width: usize,
    pub bumps: usize,
    pub coarse_sigma: f64,
    pub edge_sigma: f64,
    pub noisy_sigma: f64,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams {
            height: DEFAULT_SIZE,
            width: DEFAULT_SIZE,
            bumps: DEFAULT_BUMPS,
            coarse_sigma: ViewKind::Coarse.default_sigma(),
            edge_sigma: ViewKind::Edge.default_sigma(),
            noisy_sigma: ViewKind::Noisy.default_sigma(),
        }
    }
}

impl DataParams {
    fn sigma(&self, kind: ViewKind) -> f64 {
        match kind {
            ViewKind::Coarse => self.coarse_sigma,
            ViewKind::Edge => self.edge_sigma,
            ViewKind::Noisy => self.noisy_sigma,
            ViewKind::Quantized(_) => 0.0,
        }
    }
}

/// Samples of one split, stored per modality and per target as contiguous
/// `[N,1,H,W]` arrays. Class targets hold label indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub len: usize,
    pub inputs: Vec<Vec<f32>>,
    pub targets: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub height: usize,
    pub width: usize,
    pub target_kinds: Vec<TargetKind>,
    pub train: Split,
    pub val: Split,
}

impl Dataset {
    pub fn num_inputs(&self) -> usize {
        self.train.inputs.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Samples `indices` of `split` gathered into one batch.
    pub fn batch<T: Element>(&self, split: &Split, indices: &[usize]) -> Result<Batch<T>> {
        let hw = self.pixels();
        let n = indices.len();
        if n == 0 {
            return Err(CenError::Validation("empty batch".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= split.len) {
            return Err(CenError::Validation(format!("sample {bad} out of range for {} samples", split.len)));
        }
        let gather = |src: &[f32]| -> Vec<f32> {
            let mut out = Vec::with_capacity(n * hw);
            for &i in indices {
                out.extend_from_slice(&src[i * hw..(i + 1) * hw]);
            }
            out
        };
        let shape = [n, 1, self.height, self.width];
        let inputs = split
            .inputs
            .iter()
            .map(|m| Tensor::new(shape, gather(m).into_iter().map(|v| T::from_f64_lossy(v as f64)).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut targets = Vec::with_capacity(self.target_kinds.len());
        for (t, kind) in split.targets.iter().zip(&self.target_kinds) {
            let v = gather(t);
            targets.push(match *kind {
                TargetKind::Regression => {
                    Target::Regression(Tensor::new(shape, v.into_iter().map(|x| T::from_f64_lossy(x as f64)).collect())?)
                }
                TargetKind::Classes(classes) => Target::Classes { labels: v.into_iter().map(|x| x as usize).collect(), classes },
            });
        }
        Ok(Batch { inputs, targets })
    }

    /// The whole split as one batch.
    pub fn full_batch<T: Element>(&self, split: &Split) -> Result<Batch<T>> {
        let idx: Vec<usize> = (0..split.len).collect();
        self.batch(split, &idx)
    }
}

fn sample(kind: TaskKind, params: &DataParams, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let z = gen_latent(seed, params.height, params.width, params.bumps)?;
    let view = |k: ViewKind| derive_modality(&z, k, seed, params.sigma(k)).data.data().to_vec();
    let inputs: Vec<Vec<f64>> = kind.input_views().into_iter().map(view).collect();
    let quant = || derive_modality(&z, ViewKind::Quantized(SEG_CLASSES), seed, 0.0).data.data().to_vec();
    let targets = match kind {
        TaskKind::FusionRegression => vec![z.values().to_vec()],
        TaskKind::FusionSegmentation => vec![quant()],
        TaskKind::CycleTriplet => inputs.clone(),
        TaskKind::MultitaskPair => vec![z.values().to_vec(), sobel_magnitude(z.values(), params.height, params.width)],
        TaskKind::MmMtQuad => vec![z.values().to_vec(), quant()],
    };
    Ok((inputs, targets))
}

fn make_split(kind: TaskKind, params: &DataParams, seed: u64, tag: u64, n: usize) -> Result<Split> {
    let (ni, nt) = (kind.input_views().len(), kind.targets().len());
    let mut split = Split { len: n, inputs: vec![Vec::new(); ni], targets: vec![Vec::new(); nt] };
    for i in 0..n {
        let s = Rng::stream(seed, &[tag, i as u64]).next_u64();
        let (inputs, targets) = sample(kind, params, s)?;
        for (dst, src) in split.inputs.iter_mut().zip(inputs) {
            dst.extend(src.into_iter().map(|v| v as f32));
        }
        for (dst, src) in split.targets.iter_mut().zip(targets) {
            dst.extend(src.into_iter().map(|v| v as f32));
        }
    }
    Ok(split)
}

pub fn make_dataset(kind: TaskKind, n_train: usize, n_val: usize, seed: u64) -> Result<Dataset> {
    make_dataset_with(kind, n_train, n_val, seed, &DataParams::default())
}

/// Every sample draws its own seed from `(seed, split, index)`, so a sample
/// does not depend on the split sizes.
pub fn make_dataset_with(kind: TaskKind, n_train: usize, n_val: usize, seed: u64, params: &DataParams) -> Result<Dataset> {
    if n_train == 0 || n_val == 0 {
        return Err(CenError::Validation(format!("need at least one train and one val sample, got {n_train}/{n_val}")));
    }
    Ok(Dataset {
        kind,
        height: params.height,
        width: params.width,
        target_kinds: kind.targets(),
        train: make_split(kind, params, seed, 0, n_train)?,
        val: make_split(kind, params, seed, 1, n_val)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_by_name() {
        for k in TaskKind::ALL {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
            assert_eq!(TaskKind::from_code(k.code()), Some(k));
        }
        assert!("rgbd".parse::<TaskKind>().is_err());
    }

    #[test]
    fn batch_shapes_follow_kind() {
        let d = make_dataset(TaskKind::MmMtQuad, 3, 2, 9).unwrap();
        let b: Batch<f64> = d.batch(&d.train, &[2, 0]).unwrap();
        assert_eq!(b.inputs.len(), 2);
        assert_eq!(b.inputs[0].shape(), &[2, 1, 32, 32]);
        assert!(matches!(&b.targets[1], Target::Classes { labels, classes: 4 } if labels.len() == 2 * 1024));
        assert!(d.batch::<f64>(&d.val, &[2]).is_err());
        assert!(make_dataset(TaskKind::MmMtQuad, 0, 2, 9).is_err());
    }
}
