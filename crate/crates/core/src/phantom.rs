//! Co-registered multi-contrast thigh phantoms with exact tissue labels.
//!
//! Anatomy is a set of concentric disks (subcutaneous fat ring, muscle, cortical
//! bone ring, marrow) with per-subject radii and center, plus a small per-slice
//! radius jitter. Each contrast maps tissues to fixed mean intensities; a
//! smooth order-2 polynomial bias field and Gaussian noise degrade the image.
//! Slices are uniformly spaced (1 mm); variable slice thickness is not modelled.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::IoContext;
use crate::ingest::{write_labels, write_volume, Catalog, Contrast, ContrastVolume, Provenance, SliceEntry, Tissue, TissueLabelMap};
use crate::seed::derive_seed;
use crate::{Error, Result};

pub const SPACING: [f64; 3] = [1.0, 1.0, 1.0];

/// Per-tissue mean intensity for each contrast, indexed `[contrast][tissue]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastIntensityModel {
    pub means: [[f64; Tissue::COUNT]; 3],
}

impl Default for ContrastIntensityModel {
    fn default() -> Self {
        // background, muscle, fat, bone, marrow
        Self {
            means: [
                [0.02, 0.55, 0.20, 0.10, 0.35],
                [0.02, 0.45, 0.90, 0.15, 0.75],
                [0.02, 0.25, 0.85, 0.10, 0.60],
            ],
        }
    }
}

impl ContrastIntensityModel {
    pub fn mean(&self, contrast: Contrast, tissue: Tissue) -> f64 {
        self.means[contrast.index()][tissue as usize]
    }

    pub fn validate(&self) -> Result<()> {
        for c in Contrast::ALL {
            let row = &self.means[c.index()];
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("{c} means must lie in [0, 1]")));
            }
            for i in 0..Tissue::COUNT {
                for j in i + 1..Tissue::COUNT {
                    if (row[i] - row[j]).abs() < 1e-3 {
                        return Err(Error::Config(format!(
                            "{c} gives {} and {} the same intensity; thresholding could not separate them",
                            Tissue::ALL[i].name(),
                            Tissue::ALL[j].name()
                        )));
                    }
                }
            }
        }
        if self.mean(Contrast::Mri1, Tissue::Fat) >= self.mean(Contrast::Mri1, Tissue::Muscle) {
            return Err(Error::Config("MRI1 is fat-suppressed: fat must be darker than muscle".into()));
        }
        if self.mean(Contrast::Mri3, Tissue::Muscle) >= self.mean(Contrast::Mri3, Tissue::Fat) {
            return Err(Error::Config("MRI3 is water-suppressed: muscle must be darker than fat".into()));
        }
        Ok(())
    }

    /// Nearest-mean labelling of a single contrast; exact at zero degradation.
    pub fn threshold_segment(&self, contrast: Contrast, image: &Array2<f32>) -> Array2<u8> {
        let row = &self.means[contrast.index()];
        image.mapv(|v| {
            let mut best = 0;
            for t in 1..Tissue::COUNT {
                if (row[t] - v as f64).abs() < (row[best] - v as f64).abs() {
                    best = t;
                }
            }
            best as u8
        })
    }
}

/// Radius bounds as fractions of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueRadii {
    pub thigh: [f64; 2],
    pub muscle: [f64; 2],
    pub bone: [f64; 2],
    pub marrow: [f64; 2],
}

impl Default for TissueRadii {
    fn default() -> Self {
        Self {
            thigh: [0.38, 0.45],
            muscle: [0.27, 0.33],
            bone: [0.10, 0.13],
            marrow: [0.05, 0.075],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    #[serde(default)]
    pub tissue_radii_range: TissueRadii,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub seed: u64,
    #[serde(default)]
    pub intensity: ContrastIntensityModel,
}

impl Default for PhantomSpec {
    /// Desk scale: 64x64, 10 subjects, 4 slices each.
    fn default() -> Self {
        Self {
            image_size: 64,
            n_subjects: 10,
            slices_per_subject: 4,
            tissue_radii_range: TissueRadii::default(),
            noise_sigma: 0.02,
            bias_amplitude: 0.1,
            seed: 2022,
            intensity: ContrastIntensityModel::default(),
        }
    }
}

impl PhantomSpec {
    /// Subject/scan counts of the original study: 50 subjects, 3 contrasts each.
    pub fn paper_scale() -> Self {
        Self {
            n_subjects: 50,
            slices_per_subject: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} too small", self.image_size)));
        }
        if self.slices_per_subject == 0 {
            return Err(Error::Config("slices_per_subject must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_amplitude >= 0.0) || self.bias_amplitude >= 1.0 {
            return Err(Error::Config("noise_sigma must be >= 0 and bias_amplitude in [0, 1)".into()));
        }
        let r = &self.tissue_radii_range;
        let ordered = [r.marrow, r.bone, r.muscle, r.thigh];
        if ordered.iter().any(|[lo, hi]| !(*lo > 0.0 && lo <= hi)) {
            return Err(Error::Config("radius ranges must satisfy 0 < min <= max".into()));
        }
        if ordered.windows(2).any(|w| w[0][1] >= w[1][0]) || r.thigh[1] > 0.5 {
            return Err(Error::Config(
                "radius ranges must be disjoint and ordered marrow < bone < muscle < thigh <= 0.5".into(),
            ));
        }
        self.intensity.validate()
    }

    pub fn subject_id(index: usize) -> String {
        format!("sub-{index:03}")
    }

    fn check_indices(&self, subject: usize, slice: usize) -> Result<()> {
        if subject >= self.n_subjects || slice >= self.slices_per_subject {
            return Err(Error::Bounds(format!(
                "(subject {subject}, slice {slice}) outside {}x{}",
                self.n_subjects, self.slices_per_subject
            )));
        }
        Ok(())
    }
}

/// Sampled anatomy of one slice, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceAnatomy {
    pub center: (f64, f64),
    /// thigh, muscle, bone, marrow
    pub radii: [f64; 4],
}

impl SliceAnatomy {
    pub fn label_at(&self, y: usize, x: usize) -> Tissue {
        let d = ((y as f64 - self.center.0).powi(2) + (x as f64 - self.center.1).powi(2)).sqrt();
        let [thigh, muscle, bone, marrow] = self.radii;
        if d <= marrow {
            Tissue::Marrow
        } else if d <= bone {
            Tissue::Bone
        } else if d <= muscle {
            Tissue::Muscle
        } else if d <= thigh {
            Tissue::Fat
        } else {
            Tissue::Background
        }
    }
}

fn sample_in(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn slice_anatomy(spec: &PhantomSpec, subject: usize, slice: usize) -> Result<SliceAnatomy> {
    spec.check_indices(subject, slice)?;
    let size = spec.image_size as f64;
    let r = &spec.tissue_radii_range;
    let mut subject_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xA11A, subject as u64]));
    let ranges = [r.thigh, r.muscle, r.bone, r.marrow];
    let base: Vec<f64> = ranges.iter().map(|&range| sample_in(&mut subject_rng, range)).collect();
    let thigh_px = base[0] * size;
    let max_shift = (0.5 * size - thigh_px - 1.0).clamp(0.0, 0.05 * size);
    let center = (
        0.5 * size - 0.5 + subject_rng.random_range(-1.0..=1.0) * max_shift,
        0.5 * size - 0.5 + subject_rng.random_range(-1.0..=1.0) * max_shift,
    );
    let mut slice_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x511CE, subject as u64, slice as u64]));
    let mut radii = [0.0; 4];
    for (i, range) in ranges.iter().enumerate() {
        let jittered = base[i] * (1.0 + slice_rng.random_range(-0.03..=0.03));
        radii[i] = jittered.clamp(range[0], range[1]) * size;
    }
    Ok(SliceAnatomy { center, radii })
}

/// Multiplicative order-2 polynomial field with unit mean and peak deviation
/// `amplitude` over the image.
pub fn bias_field(spec: &PhantomSpec, subject: usize, contrast: Contrast) -> Array2<f64> {
    let n = spec.image_size;
    if spec.bias_amplitude == 0.0 {
        return Array2::ones((n, n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xB1A5, subject as u64, contrast.index() as u64]));
    let c: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let coord = |i: usize| 2.0 * i as f64 / (n - 1) as f64 - 1.0;
    let poly = Array2::from_shape_fn((n, n), |(y, x)| {
        let (v, u) = (coord(y), coord(x));
        c[0] * u + c[1] * v + c[2] * u * u + c[3] * u * v + c[4] * v * v
    });
    let mean = poly.mean().expect("non-empty");
    let centered = poly.mapv(|p| p - mean);
    let peak = centered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Array2::ones((n, n));
    }
    centered.mapv(|p| 1.0 + spec.bias_amplitude * p / peak)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSlice {
    /// MRI1, MRI2, MRI3.
    pub volumes: [ContrastVolume; 3],
    pub labels: TissueLabelMap,
}

pub fn generate_phantom_slice(spec: &PhantomSpec, subject: usize, slice: usize) -> Result<PhantomSlice> {
    spec.validate()?;
    let anatomy = slice_anatomy(spec, subject, slice)?;
    let n = spec.image_size;
    let labels = Array2::from_shape_fn((n, n), |(y, x)| anatomy.label_at(y, x).id());
    let subject_id = PhantomSpec::subject_id(subject);
    let hi = 1.0 + spec.bias_amplitude;
    let make = |contrast: Contrast| -> Result<ContrastVolume> {
        let field = bias_field(spec, subject, contrast);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            spec.seed,
            &[0x0015E, subject as u64, slice as u64, contrast.index() as u64],
        ));
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        let means = &spec.intensity.means[contrast.index()];
        let mut img = Array2::<f32>::zeros((n, n));
        for ((y, x), v) in img.indexed_iter_mut() {
            let clean = means[labels[[y, x]] as usize] * field[[y, x]];
            let noisy = if spec.noise_sigma > 0.0 { clean + noise.sample(&mut rng) } else { clean };
            *v = noisy.clamp(0.0, hi) as f32;
        }
        ContrastVolume::from_slice(img, contrast, Provenance::Real, subject_id.clone(), SPACING)
    };
    Ok(PhantomSlice {
        volumes: [make(Contrast::Mri1)?, make(Contrast::Mri2)?, make(Contrast::Mri3)?],
        labels: TissueLabelMap::from_slice(labels, subject_id.clone(), SPACING)?,
    })
}

fn slice_file(subject: &str, slice: usize, what: &str) -> PathBuf {
    PathBuf::from(subject).join(format!("slice{slice:02}_{what}.nii"))
}

/// Writes every slice of every subject under `out_dir` and returns the saved
/// catalog. The `PhantomSpec` is stored next to it as `phantom.json`.
pub fn generate_phantom_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<Catalog> {
    spec.validate()?;
    if spec.n_subjects < 5 {
        return Err(Error::Config(format!(
            "n_subjects = {} but 5-fold splitting needs at least 5",
            spec.n_subjects
        )));
    }
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut catalog = Catalog::new(out_dir, [spec.image_size; 2], SPACING);
    for subject in 0..spec.n_subjects {
        let id = PhantomSpec::subject_id(subject);
        let dir = out_dir.join(&id);
        std::fs::create_dir_all(&dir).at(&dir)?;
        for slice in 0..spec.slices_per_subject {
            let generated = generate_phantom_slice(spec, subject, slice)?;
            let entry = SliceEntry {
                slice,
                mri1: slice_file(&id, slice, "MRI1"),
                mri2: slice_file(&id, slice, "MRI2"),
                mri3: slice_file(&id, slice, "MRI3"),
                labels: slice_file(&id, slice, "labels"),
            };
            for vol in &generated.volumes {
                write_volume(vol, &out_dir.join(entry.file(crate::ingest::Channel::Image(vol.contrast()))))?;
            }
            write_labels(&generated.labels, &out_dir.join(&entry.labels))?;
            catalog.add_slice(&id, entry);
        }
    }
    let spec_path = out_dir.join("phantom.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec).expect("spec serializes")).at(&spec_path)?;
    catalog.save()?;
    Ok(catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_spec() -> PhantomSpec {
        PhantomSpec {
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn zero_degradation_gives_exact_model_means() {
        let spec = clean_spec();
        let s = generate_phantom_slice(&spec, 2, 1).unwrap();
        for vol in &s.volumes {
            for (v, &l) in vol.voxels().iter().zip(s.labels.labels()) {
                assert_eq!(*v, spec.intensity.means[vol.contrast().index()][l as usize] as f32);
            }
        }
    }

    #[test]
    fn determinism() {
        let spec = PhantomSpec::default();
        assert_eq!(generate_phantom_slice(&spec, 3, 2).unwrap(), generate_phantom_slice(&spec, 3, 2).unwrap());
        assert_ne!(
            generate_phantom_slice(&spec, 3, 2).unwrap().volumes[0],
            generate_phantom_slice(&spec, 3, 1).unwrap().volumes[0]
        );
    }

    #[test]
    fn noisy_tissue_means_match_model() {
        let spec = PhantomSpec {
            noise_sigma: 0.02,
            bias_amplitude: 0.0,
            ..PhantomSpec::default()
        };
        let s = generate_phantom_slice(&spec, 0, 0).unwrap();
        for vol in &s.volumes {
            for t in Tissue::ALL {
                let vals: Vec<f64> = vol
                    .voxels()
                    .iter()
                    .zip(s.labels.labels())
                    .filter(|(_, &l)| l == t.id())
                    .map(|(v, _)| *v as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let want = spec.intensity.mean(vol.contrast(), t);
                assert!((mean - want).abs() < 0.01, "{} {}: {mean} vs {want}", vol.contrast(), t.name());
            }
        }
    }

    #[test]
    fn every_class_in_every_slice_and_radii_ordered() {
        let spec = PhantomSpec::default();
        for subject in 0..spec.n_subjects {
            for slice in 0..spec.slices_per_subject {
                let a = slice_anatomy(&spec, subject, slice).unwrap();
                let [thigh, muscle, bone, marrow] = a.radii;
                assert!(0.0 < marrow && marrow < bone && bone < muscle && muscle < thigh);
                assert!(thigh <= 0.5 * spec.image_size as f64);
                let s = generate_phantom_slice(&spec, subject, slice).unwrap();
                for t in Tissue::ALL {
                    assert!(s.labels.labels().iter().any(|&l| l == t.id()), "{} missing", t.name());
                }
            }
        }
    }

    #[test]
    fn thresholding_any_contrast_recovers_labels_and_cross_contrast_map() {
        let spec = clean_spec();
        let s = generate_phantom_slice(&spec, 4, 0).unwrap();
        for vol in &s.volumes {
            let img = vol.slice(0).to_owned();
            let seg = spec.intensity.threshold_segment(vol.contrast(), &img);
            assert_eq!(seg.view(), s.labels.slice(0));
        }
        // MRI1 -> label -> MRI3 lookup is exact.
        let seg = spec.intensity.threshold_segment(Contrast::Mri1, &s.volumes[0].slice(0).to_owned());
        let mapped = seg.mapv(|l| spec.intensity.means[2][l as usize] as f32);
        assert_eq!(mapped.view(), s.volumes[2].slice(0));
    }

    #[test]
    fn bias_field_unit_mean_and_peak() {
        let spec = PhantomSpec {
            bias_amplitude: 0.2,
            ..PhantomSpec::default()
        };
        let f = bias_field(&spec, 1, Contrast::Mri2);
        assert!((f.mean().unwrap() - 1.0).abs() < 1e-12);
        let peak = f.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        assert!((peak - 0.2).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_indices() {
        let spec = PhantomSpec::default();
        assert!(matches!(generate_phantom_slice(&spec, 10, 0), Err(Error::Bounds(_))));
        assert!(matches!(generate_phantom_slice(&spec, 0, 4), Err(Error::Bounds(_))));
    }

    #[test]
    fn intensity_model_contract() {
        let m = ContrastIntensityModel::default();
        m.validate().unwrap();
        let mut triples: Vec<[u64; 3]> = Tissue::ALL
            .iter()
            .map(|&t| Contrast::ALL.map(|c| m.mean(c, t).to_bits()))
            .collect();
        triples.sort();
        triples.dedup();
        assert_eq!(triples.len(), Tissue::COUNT);
    }

    #[test]
    fn dataset_counts_and_precondition() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            n_subjects: 5,
            slices_per_subject: 1,
            image_size: 16,
            ..PhantomSpec::default()
        };
        let catalog = generate_phantom_dataset(&spec, dir.path()).unwrap();
        assert_eq!(catalog.entry_count(), 5);
        assert_eq!(catalog.file_count(), 20);
        let nii = walk_count(dir.path());
        assert_eq!(nii, 20);
        let spec4 = PhantomSpec { n_subjects: 4, ..spec };
        assert!(generate_phantom_dataset(&spec4, dir.path()).is_err());
    }

    fn walk_count(dir: &Path) -> usize {
        std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| {
                if p.is_dir() {
                    walk_count(&p)
                } else {
                    usize::from(p.extension().is_some_and(|e| e == "nii"))
                }
            })
            .sum()
    }
}
