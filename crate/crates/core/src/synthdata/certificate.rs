//! Pre-training check that no single modality suffices.
//!
//! A ridge regressor predicts the target at each pixel from features of
//! each modality alone and of all modalities together; the certificate is
//! the ratio of the single-modality validation errors to the joint one.

use cen_autograd::{gemm, MatView};
use nalgebra::{DMatrix, DVector};

use super::dataset::{Dataset, Split};
use crate::batch::TargetKind;
use crate::error::{CenError, Result};

pub const CERTIFICATE_RIDGE: f64 = 1e-3;

/// Per-pixel regressor inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CertificateFeatures {
    /// The pixel's own value in each modality.
    PixelLinear,
    /// The 3x3 neighbourhood (replicate padding) of each modality plus all
    /// pairwise products of those values. Fit on every other row and
    /// column of the training images.
    NeighborhoodQuadratic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub features: CertificateFeatures,
    /// Validation MSE using modality `m` alone.
    pub single: Vec<f64>,
    /// Validation MSE using every modality.
    pub joint: f64,
}

impl Certificate {
    pub fn ratios(&self) -> Vec<f64> {
        self.single.iter().map(|s| s / self.joint).collect()
    }

    pub fn min_ratio(&self) -> f64 {
        self.ratios().into_iter().fold(f64::INFINITY, f64::min)
    }
}

fn neighbourhood(img: &[f32], h: usize, w: usize, y: usize, x: usize, out: &mut Vec<f64>) {
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
            out.push(img[yy * w + xx] as f64);
        }
    }
}

/// Design rows for one image of `split`; each row ends with a bias 1.
fn design(
    d: &Dataset,
    split: &Split,
    sample: usize,
    modalities: &[usize],
    features: CertificateFeatures,
    subsample: bool,
) -> (Vec<f64>, Vec<f64>, usize) {
    let (h, w, hw) = (d.height, d.width, d.pixels());
    let step = if subsample { 2 } else { 1 };
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    let mut lin = Vec::new();
    let mut cols = 0;
    for y in (0..h).step_by(step) {
        for x in (0..w).step_by(step) {
            lin.clear();
            for &m in modalities {
                let img = &split.inputs[m][sample * hw..(sample + 1) * hw];
                match features {
                    CertificateFeatures::PixelLinear => lin.push(img[y * w + x] as f64),
                    CertificateFeatures::NeighborhoodQuadratic => neighbourhood(img, h, w, y, x, &mut lin),
                }
            }
            let start = rows.len();
            rows.extend_from_slice(&lin);
            if features == CertificateFeatures::NeighborhoodQuadratic {
                for i in 0..lin.len() {
                    for j in i..lin.len() {
                        rows.push(lin[i] * lin[j]);
                    }
                }
            }
            rows.push(1.0);
            cols = rows.len() - start;
            ys.push(split.targets[0][sample * hw + y * w + x] as f64);
        }
    }
    (rows, ys, cols)
}

fn fit(d: &Dataset, modalities: &[usize], features: CertificateFeatures) -> Result<DVector<f64>> {
    let subsample = features == CertificateFeatures::NeighborhoodQuadratic;
    let mut p = 0;
    let mut ata = Vec::new();
    let mut aty = Vec::new();
    for s in 0..d.train.len {
        let (f, y, cols) = design(d, &d.train, s, modalities, features, subsample);
        if ata.is_empty() {
            p = cols;
            ata = vec![0.0; p * p];
            aty = vec![0.0; p];
        }
        let n = y.len();
        gemm(&f, MatView::transposed(n, p), &f, MatView::row_major(n, p), 1.0, &mut ata, MatView::row_major(p, p));
        gemm(&f, MatView::transposed(n, p), &y, MatView::row_major(n, 1), 1.0, &mut aty, MatView::row_major(p, 1));
    }
    let mut a = DMatrix::from_row_slice(p, p, &ata);
    for i in 0..p {
        a[(i, i)] += CERTIFICATE_RIDGE;
    }
    let chol = a.cholesky().ok_or_else(|| CenError::Validation("certificate normal equations are not positive definite".into()))?;
    Ok(chol.solve(&DVector::from_vec(aty)))
}

fn validation_mse(d: &Dataset, modalities: &[usize], features: CertificateFeatures, coef: &DVector<f64>) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for s in 0..d.val.len {
        let (f, y, cols) = design(d, &d.val, s, modalities, features, false);
        for (row, t) in f.chunks_exact(cols).zip(&y) {
            let pred: f64 = row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
            total += (pred - t).powi(2);
            count += 1;
        }
    }
    total / count as f64
}

/// Ridge fits of the first target on each input alone and on all inputs.
pub fn complementarity_certificate(d: &Dataset, features: CertificateFeatures) -> Result<Certificate> {
    if d.num_inputs() < 2 {
        return Err(CenError::Validation(format!("certificate needs at least two inputs, {} has {}", d.kind, d.num_inputs())));
    }
    if d.target_kinds.first() != Some(&TargetKind::Regression) {
        return Err(CenError::Validation(format!("certificate needs a regression target, {} has none first", d.kind)));
    }
    let mut single = Vec::with_capacity(d.num_inputs());
    for m in 0..d.num_inputs() {
        let coef = fit(d, &[m], features)?;
        single.push(validation_mse(d, &[m], features, &coef));
    }
    let all: Vec<usize> = (0..d.num_inputs()).collect();
    let coef = fit(d, &all, features)?;
    let joint = validation_mse(d, &all, features, &coef);
    Ok(Certificate { features, single, joint })
}
