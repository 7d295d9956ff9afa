//! Volumes, label maps, NIfTI-1 I/O, the dataset catalog and subject-level
//! cross-validation folds.

mod access;
mod catalog;
mod folds;
pub mod nifti;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use access::{AccessContext, AccessLog, AccessRecord, DataSource, Phase};
pub use catalog::{Catalog, Channel, SliceEntry};
pub use folds::{make_folds, Fold, FoldPlan, SplitRatios};
pub use nifti::{read_labels, read_volume, write_labels, write_volume};

/// The three T1-weighted acquisitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Contrast {
    /// Fat-suppressed.
    #[serde(rename = "MRI1")]
    Mri1,
    /// Water and fat.
    #[serde(rename = "MRI2")]
    Mri2,
    /// Water-suppressed.
    #[serde(rename = "MRI3")]
    Mri3,
}

impl Contrast {
    pub const ALL: [Contrast; 3] = [Contrast::Mri1, Contrast::Mri2, Contrast::Mri3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Contrast::Mri1 => "MRI1",
            Contrast::Mri2 => "MRI2",
            Contrast::Mri3 => "MRI3",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Contrast::Mri1 => "fat-suppressed",
            Contrast::Mri2 => "water-fat",
            Contrast::Mri3 => "water-suppressed",
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MRI1" | "1" => Ok(Contrast::Mri1),
            "MRI2" | "2" => Ok(Contrast::Mri2),
            "MRI3" | "3" => Ok(Contrast::Mri3),
            other => Err(Error::Config(format!("unknown contrast {other:?}"))),
        }
    }
}

/// Whether a volume was acquired or generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthesized { source: Contrast },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Real => f.write_str("real"),
            Provenance::Synthesized { source } => write!(f, "synthesized({source})"),
        }
    }
}

/// Label classes of a [`TissueLabelMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    Background = 0,
    Muscle = 1,
    Fat = 2,
    Bone = 3,
    Marrow = 4,
}

impl Tissue {
    pub const COUNT: usize = 5;
    pub const ALL: [Tissue; 5] = [
        Tissue::Background,
        Tissue::Muscle,
        Tissue::Fat,
        Tissue::Bone,
        Tissue::Marrow,
    ];
    /// Tissues reported in the result tables, in column order.
    pub const FOREGROUND: [Tissue; 4] = [Tissue::Muscle, Tissue::Fat, Tissue::Bone, Tissue::Marrow];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "background",
            Tissue::Muscle => "muscle",
            Tissue::Fat => "fat",
            Tissue::Bone => "bone",
            Tissue::Marrow => "marrow",
        }
    }

    /// Upper-case heading used in the tables.
    pub fn heading(self) -> &'static str {
        match self {
            Tissue::Background => "BACKGROUND",
            Tissue::Muscle => "MUSCLE",
            Tissue::Fat => "FAT",
            Tissue::Bone => "BONE",
            Tissue::Marrow => "BONE MARROW",
        }
    }
}

impl FromStr for Tissue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "background" => Ok(Tissue::Background),
            "muscle" => Ok(Tissue::Muscle),
            "fat" => Ok(Tissue::Fat),
            "bone" => Ok(Tissue::Bone),
            "marrow" | "bone_marrow" | "bone marrow" => Ok(Tissue::Marrow),
            other => Err(Error::Config(format!("unknown tissue {other:?}"))),
        }
    }
}

/// One subject's image for one contrast: a stack of 2D slices `(z, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastVolume {
    voxels: Array3<f32>,
    contrast: Contrast,
    provenance: Provenance,
    subject_id: String,
    spacing: [f64; 3],
}

impl ContrastVolume {
    pub fn new(
        voxels: Array3<f32>,
        contrast: Contrast,
        provenance: Provenance,
        subject_id: impl Into<String>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        if let Some(v) = voxels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite voxel value {v}")));
        }
        if let Provenance::Synthesized { source } = provenance {
            if source == contrast {
                return Err(Error::Data(format!(
                    "synthesized {contrast} cannot have itself as source"
                )));
            }
        }
        Ok(Self {
            voxels,
            contrast,
            provenance,
            subject_id: subject_id.into(),
            spacing,
        })
    }

    /// Single-slice volume.
    pub fn from_slice(
        slice: Array2<f32>,
        contrast: Contrast,
        provenance: Provenance,
        subject_id: impl Into<String>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let (h, w) = slice.dim();
        let voxels = slice.into_shape_with_order((1, h, w)).expect("contiguous slice");
        Self::new(voxels, contrast, provenance, subject_id, spacing)
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, f32> {
        self.voxels.index_axis(ndarray::Axis(0), z)
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    /// `(height, width)` of each slice.
    pub fn slice_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.voxels.dim();
        (h, w)
    }

    pub fn contrast(&self) -> Contrast {
        self.contrast
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Same metadata, new voxels of identical shape.
    pub fn with_voxels(&self, voxels: Array3<f32>) -> Result<Self> {
        if voxels.dim() != self.voxels.dim() {
            return Err(Error::Consistency(format!(
                "voxel shape {:?} does not match {:?}",
                voxels.dim(),
                self.voxels.dim()
            )));
        }
        Self::new(voxels, self.contrast, self.provenance, self.subject_id.clone(), self.spacing)
    }

    pub fn with_provenance(mut self, contrast: Contrast, provenance: Provenance) -> Result<Self> {
        self.contrast = contrast;
        self.provenance = provenance;
        Self::new(self.voxels, self.contrast, self.provenance, self.subject_id, self.spacing)
    }
}

/// Integer tissue mask `(z, y, x)` with values in `0..=4`.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueLabelMap {
    labels: Array3<u8>,
    subject_id: String,
    spacing: [f64; 3],
}

impl TissueLabelMap {
    pub fn new(labels: Array3<u8>, subject_id: impl Into<String>, spacing: [f64; 3]) -> Result<Self> {
        if let Some(v) = labels.iter().find(|&&v| v as usize >= Tissue::COUNT) {
            return Err(Error::Data(format!("label {v} outside class set 0..=4")));
        }
        Ok(Self {
            labels,
            subject_id: subject_id.into(),
            spacing,
        })
    }

    pub fn from_slice(labels: Array2<u8>, subject_id: impl Into<String>, spacing: [f64; 3]) -> Result<Self> {
        let (h, w) = labels.dim();
        Self::new(
            labels.into_shape_with_order((1, h, w)).expect("contiguous slice"),
            subject_id,
            spacing,
        )
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, u8> {
        self.labels.index_axis(ndarray::Axis(0), z)
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    /// Errors unless `vol` has the same voxel grid.
    pub fn check_pairs_with(&self, vol: &ContrastVolume) -> Result<()> {
        if self.labels.dim() != vol.voxels().dim() {
            return Err(Error::Consistency(format!(
                "label shape {:?} does not match {} volume shape {:?}",
                self.labels.dim(),
                vol.contrast(),
                vol.voxels().dim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesized_source_must_differ() {
        let err = ContrastVolume::from_slice(
            Array2::zeros((4, 4)),
            Contrast::Mri2,
            Provenance::Synthesized { source: Contrast::Mri2 },
            "s",
            [1.0; 3],
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_voxels_rejected() {
        let mut a = Array2::zeros((2, 2));
        a[[1, 1]] = f32::NAN;
        assert!(ContrastVolume::from_slice(a, Contrast::Mri1, Provenance::Real, "s", [1.0; 3]).is_err());
    }

    #[test]
    fn labels_outside_class_set_rejected() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 1]] = 5u8;
        assert!(TissueLabelMap::from_slice(a, "s", [1.0; 3]).is_err());
    }

    #[test]
    fn contrast_parsing() {
        assert_eq!("mri3".parse::<Contrast>().unwrap(), Contrast::Mri3);
        assert_eq!("2".parse::<Contrast>().unwrap(), Contrast::Mri2);
        assert!("MRI4".parse::<Contrast>().is_err());
        assert_eq!(serde_json::to_string(&Contrast::Mri1).unwrap(), "\"MRI1\"");
    }
}
