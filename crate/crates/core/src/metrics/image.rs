use ndarray::{Array2, ArrayView, ArrayView2, Dimension};
use serde::{Deserialize, Serialize};

use crate::ingest::ContrastVolume;
use crate::{Error, Result};

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("image shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` in dB; identical images give `+inf`.
pub fn psnr<D: Dimension>(a: ArrayView<f32, D>, b: ArrayView<f32, D>, peak: f64) -> Result<f64> {
    check_shapes(a.shape(), b.shape())?;
    if !(peak > 0.0) {
        return Err(Error::Data(format!("peak must be positive, got {peak}")));
    }
    if a.is_empty() {
        return Err(Error::Data("empty images".into()));
    }
    let sse: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl SsimParams {
    /// Standard constants with the window chosen for the image side.
    pub fn for_size(side: usize) -> Self {
        Self {
            window: default_ssim_window(side),
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

pub fn default_ssim_window(side: usize) -> usize {
    if side >= 128 {
        11
    } else {
        7
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable weighted average over every fully contained window position.
fn filter_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(y, x)| taps.iter().enumerate().map(|(i, t)| t * img[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| taps.iter().enumerate().map(|(i, t)| t * rows[[y + i, x]]).sum::<f64>())
}

/// Mean local SSIM over all window positions that fit inside the image.
pub fn ssim(a: ArrayView2<f32>, b: ArrayView2<f32>, p: &SsimParams) -> Result<f64> {
    check_shapes(a.shape(), b.shape())?;
    let (h, w) = a.dim();
    if p.window == 0 || p.window > h || p.window > w {
        return Err(Error::Data(format!("SSIM window {} does not fit {h}x{w}", p.window)));
    }
    let taps = gaussian_window(p.window, p.sigma);
    let a = a.mapv(|v| v as f64);
    let b = b.mapv(|v| v as f64);
    let mu_a = filter_valid(&a, &taps);
    let mu_b = filter_valid(&b, &taps);
    let e_aa = filter_valid(&(&a * &a), &taps);
    let e_bb = filter_valid(&(&b * &b), &taps);
    let e_ab = filter_valid(&(&a * &b), &taps);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let var_a = e_aa.as_slice().unwrap()[i] - ma * ma;
        let var_b = e_bb.as_slice().unwrap()[i] - mb * mb;
        let cov = e_ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Slice-averaged SSIM of two volumes.
pub fn ssim_volume(a: &ContrastVolume, b: &ContrastVolume, p: &SsimParams) -> Result<f64> {
    check_shapes(a.voxels().shape(), b.voxels().shape())?;
    let mut sum = 0.0;
    for z in 0..a.depth() {
        sum += ssim(a.slice(z), b.slice(z), p)?;
    }
    Ok(sum / a.depth() as f64)
}
