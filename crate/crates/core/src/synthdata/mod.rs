//! Synthetic multimodal dense-prediction data with complementary views.
//!
//! A latent field `z` is a min-max normalized sum of Gaussian bumps. Views
//! derived from it each lose something: the coarse view keeps levels but
//! blurs boundaries, the edge view keeps boundaries but drops levels.

mod certificate;
mod dataset;
mod io;

use std::fmt;
use std::str::FromStr;

use cen_autograd::Tensor;

pub use certificate::{complementarity_certificate, Certificate, CertificateFeatures, CERTIFICATE_RIDGE};
pub use dataset::{make_dataset, make_dataset_with, DataParams, Dataset, Split, TaskKind};
pub use io::{load_dataset, save_dataset, DATASET_MAGIC};

use crate::error::{CenError, Result};
use crate::rng::{tags, Rng};

pub const DEFAULT_SIZE: usize = 32;
pub const DEFAULT_BUMPS: usize = 6;
pub const COARSE_SIGMA: f64 = 0.05;
pub const EDGE_SIGMA: f64 = 0.05;
pub const NOISY_SIGMA: f64 = 0.25;

/// One Gaussian bump `amplitude * exp(-d^2 / (2 sigma^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub cy: f64,
    pub cx: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Smooth field in [0, 1], stored as `[1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentField {
    pub z: Tensor<f64>,
}

impl LatentField {
    pub fn height(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.z.shape()[2]
    }

    pub fn values(&self) -> &[f64] {
        self.z.data()
    }

    /// Mean absolute difference between 4-neighbours.
    pub fn roughness(&self) -> f64 {
        let (h, w, z) = (self.height(), self.width(), self.values());
        let (mut total, mut count) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    total += (z[y * w + x] - z[y * w + x + 1]).abs();
                    count += 1;
                }
                if y + 1 < h {
                    total += (z[y * w + x] - z[(y + 1) * w + x]).abs();
                    count += 1;
                }
            }
        }
        total / count as f64
    }
}

/// Sum of bumps, min-max normalized; a flat sum maps to zeros.
pub fn latent_from_bumps(h: usize, w: usize, bumps: &[Bump]) -> LatentField {
    let mut z = vec![0.0; h * w];
    for b in bumps {
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2);
                z[y * w + x] += b.amplitude * (-d2 * inv).exp();
            }
        }
    }
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut z {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    LatentField { z: Tensor::new([1, h, w], z).unwrap() }
}

/// `k` bumps with centers uniform over the grid, widths uniform in
/// [1, 3] pixels and amplitudes uniform in [0.2, 1].
pub fn gen_latent(seed: u64, h: usize, w: usize, k: usize) -> Result<LatentField> {
    if h < 8 || w < 8 || k == 0 {
        return Err(CenError::Validation(format!("latent field needs H, W >= 8 and K >= 1, got {h}x{w}, K={k}")));
    }
    let mut rng = Rng::stream(seed, &[tags::LATENT]);
    let bumps: Vec<Bump> = (0..k)
        .map(|_| {
            let cy = rng.uniform_in(0.0, h as f64);
            let cx = rng.uniform_in(0.0, w as f64);
            let sigma = rng.uniform_in(1.0, 3.0);
            let amplitude = rng.uniform_in(0.2, 1.0);
            Bump { cy, cx, sigma, amplitude }
        })
        .collect();
    Ok(latent_from_bumps(h, w, &bumps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    /// 5x5 box blur (in-bounds average) plus noise.
    Coarse,
    /// Sobel magnitude over replicate padding, scaled to max 1, plus noise.
    Edge,
    /// `z` plus noise.
    Noisy,
    /// Class map `min(floor(z * C), C - 1)`.
    Quantized(usize),
}

impl ViewKind {
    fn code(self) -> u64 {
        match self {
            ViewKind::Coarse => 0,
            ViewKind::Edge => 1,
            ViewKind::Noisy => 2,
            ViewKind::Quantized(_) => 3,
        }
    }

    pub fn default_sigma(self) -> f64 {
        match self {
            ViewKind::Coarse => COARSE_SIGMA,
            ViewKind::Edge => EDGE_SIGMA,
            ViewKind::Noisy => NOISY_SIGMA,
            ViewKind::Quantized(_) => 0.0,
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewKind::Coarse => write!(f, "coarse"),
            ViewKind::Edge => write!(f, "edge"),
            ViewKind::Noisy => write!(f, "noisy"),
            ViewKind::Quantized(c) => write!(f, "quantized:{c}"),
        }
    }
}

impl FromStr for ViewKind {
    type Err = CenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(ViewKind::Coarse),
            "edge" => Ok(ViewKind::Edge),
            "noisy" => Ok(ViewKind::Noisy),
            _ => match s.strip_prefix("quantized:").map(str::parse::<usize>) {
                Some(Ok(c)) if c >= 1 => Ok(ViewKind::Quantized(c)),
                _ => Err(CenError::Config(format!("unknown view kind '{s}'"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityView {
    pub kind: ViewKind,
    pub data: Tensor<f64>,
    pub noise_sigma: f64,
}

fn box_blur(z: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    s += z[yy * w + xx];
                }
            }
            out[y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

/// Sobel gradient magnitude with replicate padding, divided by its maximum.
pub fn sobel_magnitude(z: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        z[y * w + x]
    };
    let mut m = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            m[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = m.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut m {
            *v /= max;
        }
    }
    m
}

/// Class of `v` among `classes` equal-width bins of [0, 1].
pub fn quantize(v: f64, classes: usize) -> usize {
    ((v * classes as f64).floor().max(0.0) as usize).min(classes - 1)
}

/// Derives one view of `z`; noise is drawn from a stream keyed by `seed`
/// and the view kind.
pub fn derive_modality(z: &LatentField, kind: ViewKind, seed: u64, noise_sigma: f64) -> ModalityView {
    let (h, w) = (z.height(), z.width());
    let zv = z.values();
    let mut data = match kind {
        ViewKind::Coarse => box_blur(zv, h, w, 2),
        ViewKind::Edge => sobel_magnitude(zv, h, w),
        ViewKind::Noisy => zv.to_vec(),
        ViewKind::Quantized(c) => zv.iter().map(|&v| quantize(v, c) as f64).collect(),
    };
    if noise_sigma > 0.0 && !matches!(kind, ViewKind::Quantized(_)) {
        let mut rng = Rng::stream(seed, &[tags::VIEW, kind.code()]);
        for v in &mut data {
            *v += noise_sigma * rng.normal();
        }
    }
    ModalityView { kind, data: Tensor::new([1, h, w], data).unwrap(), noise_sigma }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bump_peaks_at_center() {
        let z = latent_from_bumps(16, 16, &[Bump { cy: 8.0, cx: 8.0, sigma: 2.0, amplitude: 0.7 }]);
        let v = z.values();
        let argmax = (0..v.len()).max_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap()).unwrap();
        assert_eq!(argmax, 8 * 16 + 8);
        assert_eq!(v[argmax], 1.0);
    }

    #[test]
    fn same_seed_same_field() {
        assert_eq!(gen_latent(5, 32, 32, 6).unwrap(), gen_latent(5, 32, 32, 6).unwrap());
        assert!(gen_latent(5, 4, 32, 6).is_err());
        assert!(gen_latent(5, 32, 32, 0).is_err());
    }

    #[test]
    fn constant_field_views() {
        let z = LatentField { z: Tensor::full([1, 8, 8], 0.37) };
        let e = derive_modality(&z, ViewKind::Edge, 1, 0.0);
        assert!(e.data.data().iter().all(|&v| v == 0.0));
        let c = derive_modality(&z, ViewKind::Coarse, 1, 0.0);
        assert!(c.data.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn quantized_matches_direct_binning() {
        let vals: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        let z = LatentField { z: Tensor::new([1, 8, 8], vals.clone()).unwrap() };
        let q = derive_modality(&z, ViewKind::Quantized(4), 0, 0.0);
        for (v, l) in vals.iter().zip(q.data.data()) {
            let expect = if *v < 0.25 {
                0.0
            } else if *v < 0.5 {
                1.0
            } else if *v < 0.75 {
                2.0
            } else {
                3.0
            };
            assert_eq!(*l, expect);
        }
    }

    #[test]
    fn view_names() {
        assert_eq!("quantized:4".parse::<ViewKind>().unwrap(), ViewKind::Quantized(4));
        assert!(matches!("depth".parse::<ViewKind>(), Err(CenError::Config(_))));
    }
}
