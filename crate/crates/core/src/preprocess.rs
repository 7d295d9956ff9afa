//! Intensity normalization chain: bias-field correction, edge-preserving
//! diffusion, then whitening and [0, 1] scaling. All steps are per slice
//! except whitening, which uses whole-volume statistics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::ingest::{read_labels, write_labels, write_volume, Catalog, Channel, Contrast, ContrastVolume};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Total degree of the log-domain polynomial field.
    pub bias_poly_order: usize,
    /// Robust reweighting rounds; 0 skips bias correction.
    pub bias_max_iters: usize,
    /// Explicit Euler steps; 0 skips diffusion.
    pub diffusion_iters: usize,
    /// Gradient scale of the conductance.
    pub diffusion_kappa: f64,
    /// Time step, at most 0.25 for the 4-neighbour scheme.
    pub diffusion_dt: f64,
    /// Volumes with a smaller standard deviation cannot be whitened.
    pub epsilon_std: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            bias_poly_order: 2,
            bias_max_iters: 5,
            diffusion_iters: 10,
            diffusion_kappa: 0.1,
            diffusion_dt: 0.2,
            epsilon_std: 1e-8,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.diffusion_dt > 0.0 && self.diffusion_dt <= 0.25) {
            return Err(Error::Config(format!(
                "diffusion_dt = {} outside the stable range (0, 0.25]",
                self.diffusion_dt
            )));
        }
        if !(self.diffusion_kappa > 0.0) || !self.diffusion_kappa.is_finite() {
            return Err(Error::Config("diffusion_kappa must be positive".into()));
        }
        if !(self.epsilon_std >= 0.0) {
            return Err(Error::Config("epsilon_std must be >= 0".into()));
        }
        if self.bias_poly_order > 6 {
            return Err(Error::Config(format!("bias_poly_order {} > 6", self.bias_poly_order)));
        }
        Ok(())
    }
}

fn check_finite(vol: &ContrastVolume) -> Result<()> {
    if let Some(v) = vol.voxels().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{} of {} has non-finite voxel {v}", vol.contrast(), vol.subject_id())));
    }
    Ok(())
}

fn map_slices(vol: &ContrastVolume, mut f: impl FnMut(ArrayView2<f32>) -> Array2<f32>) -> Result<ContrastVolume> {
    let mut out = Array3::<f32>::zeros(vol.voxels().dim());
    for (z, mut dst) in out.axis_iter_mut(Axis(0)).enumerate() {
        dst.assign(&f(vol.slice(z)));
    }
    vol.with_voxels(out)
}

/// Monomials `u^i v^j` with `1 <= i + j <= order`; the constant is left out
/// because the field is normalized to unit mean afterwards.
fn monomials(order: usize) -> Vec<(i32, i32)> {
    let mut out = Vec::new();
    for total in 1..=order as i32 {
        for i in (0..=total).rev() {
            out.push((i, total - i));
        }
    }
    out
}

/// Estimates the multiplicative field of one slice by fitting polynomial
/// finite differences to the finite differences of the log image, with
/// robust rejection of pairs that straddle tissue edges. The result has
/// unit mean.
pub fn estimate_bias_field(slice: ArrayView2<f32>, cfg: &PreprocessConfig) -> Array2<f64> {
    let (h, w) = slice.dim();
    let ones = Array2::ones((h, w));
    if cfg.bias_max_iters == 0 || cfg.bias_poly_order == 0 || h < 2 || w < 2 {
        return ones;
    }
    let img = slice.mapv(|v| v as f64);
    let max = img.iter().cloned().fold(f64::MIN, f64::max);
    let min = img.iter().cloned().fold(f64::MAX, f64::min);
    if max <= 0.0 {
        return ones;
    }
    let shift = if min <= 0.0 { 1e-3 * max - min } else { 0.0 };
    let log = img.mapv(|v| (v + shift).ln());
    let foreground = 0.1 * max;

    let terms = monomials(cfg.bias_poly_order);
    let coord = |i: usize, n: usize| 2.0 * i as f64 / (n - 1) as f64 - 1.0;
    let basis = |y: usize, x: usize| -> Vec<f64> {
        let (u, v) = (coord(x, w), coord(y, h));
        terms.iter().map(|&(i, j)| u.powi(i) * v.powi(j)).collect()
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let a = img[[y, x]];
            if a <= foreground {
                continue;
            }
            let ba = basis(y, x);
            for (yy, xx) in [(y, x + 1), (y + 1, x)] {
                if yy >= h || xx >= w || img[[yy, xx]] <= foreground {
                    continue;
                }
                let bb = basis(yy, xx);
                rows.push(bb.iter().zip(&ba).map(|(p, q)| p - q).collect());
                targets.push(log[[yy, xx]] - log[[y, x]]);
                let m = a.min(img[[yy, xx]]);
                weights.push(m * m);
            }
        }
    }
    let k = terms.len();
    if rows.len() < 4 * k {
        return ones;
    }

    let mut inlier = vec![true; rows.len()];
    let mut coef = DVector::<f64>::zeros(k);
    for _ in 0..cfg.bias_max_iters {
        let mut ata = DMatrix::<f64>::zeros(k, k);
        let mut atb = DVector::<f64>::zeros(k);
        for (idx, row) in rows.iter().enumerate() {
            if !inlier[idx] {
                continue;
            }
            let wt = weights[idx];
            for p in 0..k {
                atb[p] += wt * row[p] * targets[idx];
                for q in 0..k {
                    ata[(p, q)] += wt * row[p] * row[q];
                }
            }
        }
        let scale = ata.diagonal().max().max(1e-300);
        for p in 0..k {
            ata[(p, p)] += 1e-12 * scale;
        }
        let Some(solved) = ata.cholesky().map(|c| c.solve(&atb)) else {
            break;
        };
        coef = solved;
        let residuals: Vec<f64> = rows
            .iter()
            .zip(&targets)
            .map(|(row, t)| t - row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mut abs: Vec<f64> = residuals
            .iter()
            .zip(&inlier)
            .filter(|(_, &keep)| keep)
            .map(|(r, _)| r.abs())
            .collect();
        abs.sort_by(f64::total_cmp);
        let mad = abs[abs.len() / 2];
        let threshold = (3.0 * 1.4826 * mad).max(0.05);
        let next: Vec<bool> = residuals.iter().map(|r| r.abs() <= threshold).collect();
        if next == inlier || next.iter().filter(|&&b| b).count() < 4 * k {
            break;
        }
        inlier = next;
    }

    let mut field = Array2::from_shape_fn((h, w), |(y, x)| {
        basis(y, x).iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>().exp()
    });
    let mean = field.mean().expect("non-empty");
    field.mapv_inplace(|f| f / mean);
    field
}

/// Divides each slice by its estimated unit-mean bias field.
pub fn correct_bias(vol: &ContrastVolume, cfg: &PreprocessConfig) -> Result<ContrastVolume> {
    cfg.validate()?;
    check_finite(vol)?;
    map_slices(vol, |slice| {
        let field = estimate_bias_field(slice, cfg);
        ndarray::Zip::from(&slice).and(&field).map_collect(|&v, &f| (v as f64 / f) as f32)
    })
}

/// Perona-Malik diffusion of one slice, conductance `exp(-(d/kappa)^2)` on
/// each of the four neighbour differences and zero flux across the border.
pub fn diffuse_slice(slice: ArrayView2<f32>, iters: usize, kappa: f64, dt: f64) -> Array2<f32> {
    let (h, w) = slice.dim();
    let mut cur = slice.mapv(|v| v as f64);
    let g = |d: f64| (-(d / kappa) * (d / kappa)).exp();
    let mut delta = Array2::<f64>::zeros((h, w));
    for _ in 0..iters {
        delta.fill(0.0);
        for y in 0..h {
            for x in 0..w {
                let c = cur[[y, x]];
                if x + 1 < w {
                    let d = cur[[y, x + 1]] - c;
                    let flux = g(d) * d;
                    delta[[y, x]] += flux;
                    delta[[y, x + 1]] -= flux;
                }
                if y + 1 < h {
                    let d = cur[[y + 1, x]] - c;
                    let flux = g(d) * d;
                    delta[[y, x]] += flux;
                    delta[[y + 1, x]] -= flux;
                }
            }
        }
        cur.scaled_add(dt, &delta);
    }
    cur.mapv(|v| v as f32)
}

pub fn diffuse(vol: &ContrastVolume, cfg: &PreprocessConfig) -> Result<ContrastVolume> {
    cfg.validate()?;
    map_slices(vol, |slice| {
        diffuse_slice(slice, cfg.diffusion_iters, cfg.diffusion_kappa, cfg.diffusion_dt)
    })
}

/// Z-scores the whole volume, then maps it affinely onto [0, 1] so the
/// minimum is exactly 0 and the maximum exactly 1.
pub fn whiten_and_scale(vol: &ContrastVolume, epsilon_std: f64) -> Result<ContrastVolume> {
    check_finite(vol)?;
    let n = vol.voxels().len() as f64;
    let mean = vol.voxels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol.voxels().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > epsilon_std) || n == 0.0 {
        return Err(Error::DegenerateInput(format!(
            "{} of {} has std {std:e}; cannot whiten",
            vol.contrast(),
            vol.subject_id()
        )));
    }
    let z = vol.voxels().mapv(|v| (v as f64 - mean) / std);
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::DegenerateInput(format!("{} of {} is constant", vol.contrast(), vol.subject_id())));
    }
    vol.with_voxels(z.mapv(|v| ((v - lo) / span) as f32))
}

/// bias correction, diffusion, whitening/scaling, in that order.
pub fn preprocess_volume(vol: &ContrastVolume, cfg: &PreprocessConfig) -> Result<ContrastVolume> {
    let corrected = correct_bias(vol, cfg)?;
    let smoothed = diffuse(&corrected, cfg)?;
    whiten_and_scale(&smoothed, cfg.epsilon_std)
}

/// Preprocesses every subject of `input` into `out_dir`, keeping the file
/// layout. Whitening statistics are per subject volume (all slices).
pub fn preprocess_dataset(input: &Catalog, out_dir: &Path, cfg: &PreprocessConfig) -> Result<Catalog> {
    cfg.validate()?;
    let mut out = Catalog::new(out_dir, input.image_size, input.spacing);
    for subject in input.subject_ids() {
        let entries = input.slices(&subject)?.to_vec();
        for contrast in Contrast::ALL {
            let slices: Vec<ContrastVolume> =
                entries.iter().map(|e| input.read_slice_volume(e, contrast)).collect::<Result<_>>()?;
            let views: Vec<ArrayView2<f32>> = slices.iter().map(|v| v.slice(0)).collect();
            let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::Consistency(e.to_string()))?;
            let vol = ContrastVolume::new(stacked, contrast, slices[0].provenance(), subject.clone(), slices[0].spacing())?;
            let processed = preprocess_volume(&vol, cfg)?;
            for (z, entry) in entries.iter().enumerate() {
                let one = ContrastVolume::from_slice(
                    processed.slice(z).to_owned(),
                    contrast,
                    processed.provenance(),
                    subject.clone(),
                    processed.spacing(),
                )?;
                let path = out_dir.join(entry.file(Channel::Image(contrast)));
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                write_volume(&one, &path)?;
            }
        }
        for entry in &entries {
            let labels = read_labels(&input.resolve(&entry.labels))?;
            write_labels(&labels, &out_dir.join(&entry.labels))?;
            out.add_slice(&subject, entry.clone());
        }
    }
    out.save()?;
    Ok(out)
}
