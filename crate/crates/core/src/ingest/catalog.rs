use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti::{read_labels, read_volume};
use super::{Contrast, ContrastVolume, TissueLabelMap};
use crate::error::IoContext;
use crate::{Error, Result};

/// One of the four files stored per slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Image(Contrast),
    Labels,
}

/// Files of one 2D slice, relative to the catalog directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub slice: usize,
    #[serde(rename = "MRI1")]
    pub mri1: PathBuf,
    #[serde(rename = "MRI2")]
    pub mri2: PathBuf,
    #[serde(rename = "MRI3")]
    pub mri3: PathBuf,
    pub labels: PathBuf,
}

impl SliceEntry {
    pub fn file(&self, channel: Channel) -> &Path {
        match channel {
            Channel::Image(Contrast::Mri1) => &self.mri1,
            Channel::Image(Contrast::Mri2) => &self.mri2,
            Channel::Image(Contrast::Mri3) => &self.mri3,
            Channel::Labels => &self.labels,
        }
    }

    pub fn files(&self) -> [&Path; 4] {
        [&self.mri1, &self.mri2, &self.mri3, &self.labels]
    }
}

/// Dataset index: subject id → slices, persisted as `catalog.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(skip)]
    root: PathBuf,
    /// `(height, width)` of every slice.
    pub image_size: [usize; 2],
    pub spacing: [f64; 3],
    pub subjects: BTreeMap<String, Vec<SliceEntry>>,
}

impl Catalog {
    pub const FILE_NAME: &'static str = "catalog.json";

    pub fn new(root: impl Into<PathBuf>, image_size: [usize; 2], spacing: [f64; 3]) -> Self {
        Self {
            root: root.into(),
            image_size,
            spacing,
            subjects: BTreeMap::new(),
        }
    }

    /// Loads `catalog.json` from a directory or an explicit file path.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(Self::FILE_NAME) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).at(&file)?;
        let mut catalog: Catalog = serde_json::from_str(&text)
            .map_err(|e| Error::Consistency(format!("{}: {e}", file.display())))?;
        catalog.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(catalog)
    }

    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root).at(&self.root)?;
        let file = self.root.join(Self::FILE_NAME);
        let text = serde_json::to_string_pretty(self).expect("catalog serializes");
        fs::write(&file, text).at(&file)?;
        Ok(file)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn add_slice(&mut self, subject: &str, entry: SliceEntry) {
        let slices = self.subjects.entry(subject.to_string()).or_default();
        slices.push(entry);
        slices.sort_by_key(|e| e.slice);
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.keys().cloned().collect()
    }

    pub fn slices(&self, subject: &str) -> Result<&[SliceEntry]> {
        self.subjects
            .get(subject)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Spec(format!("subject {subject} not in catalog")))
    }

    pub fn entry_count(&self) -> usize {
        self.subjects.values().map(Vec::len).sum()
    }

    pub fn file_count(&self) -> usize {
        self.entry_count() * 4
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    /// Reads one slice file and checks its grid against the catalog.
    pub fn read_slice_volume(&self, entry: &SliceEntry, contrast: Contrast) -> Result<ContrastVolume> {
        let path = self.resolve(entry.file(Channel::Image(contrast)));
        if !path.exists() {
            return Err(Error::Spec(format!("missing {contrast} file {}", path.display())));
        }
        let vol = read_volume(&path)?;
        self.check_grid(&path, vol.slice_shape(), vol.spacing())?;
        if vol.contrast() != contrast {
            return Err(Error::Consistency(format!(
                "{} holds {} but catalog lists it as {contrast}",
                path.display(),
                vol.contrast()
            )));
        }
        Ok(vol)
    }

    pub fn read_slice_labels(&self, entry: &SliceEntry) -> Result<TissueLabelMap> {
        let path = self.resolve(&entry.labels);
        let labels = read_labels(&path)?;
        let (_, h, w) = labels.dim();
        self.check_grid(&path, (h, w), labels.spacing())?;
        Ok(labels)
    }

    fn check_grid(&self, path: &Path, shape: (usize, usize), spacing: [f64; 3]) -> Result<()> {
        if [shape.0, shape.1] != self.image_size {
            return Err(Error::Consistency(format!(
                "{}: shape {shape:?} differs from catalog {:?}",
                path.display(),
                self.image_size
            )));
        }
        if spacing.iter().zip(self.spacing).any(|(a, b)| (a - b).abs() > 1e-4) {
            return Err(Error::Consistency(format!(
                "{}: spacing {spacing:?} differs from catalog {:?}",
                path.display(),
                self.spacing
            )));
        }
        Ok(())
    }
}
