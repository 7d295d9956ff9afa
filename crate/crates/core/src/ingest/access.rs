//! Logged data access. Every file the pipeline opens is recorded with the
//! phase and fold it was opened for, so fold hygiene can be audited afterwards.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use super::{Catalog, Contrast, ContrastVolume, TissueLabelMap};
use crate::error::IoContext;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Preprocess,
    SynthesisTrain,
    SynthesisValidate,
    SegmentationTrain,
    SegmentationValidate,
    Evaluate,
}

impl Phase {
    /// Phases that fit or select a model; test subjects are off limits here.
    pub fn is_training(self) -> bool {
        matches!(
            self,
            Phase::SynthesisTrain
                | Phase::SynthesisValidate
                | Phase::SegmentationTrain
                | Phase::SegmentationValidate
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub path: String,
    pub subject: String,
    pub phase: Phase,
    pub fold: Option<usize>,
    pub job: String,
}

/// Thread-safe record of opened files, optionally mirrored to a JSONL file.
#[derive(Debug, Default)]
pub struct AccessLog {
    records: Mutex<Vec<AccessRecord>>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl AccessLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path` in addition to keeping records in memory.
    pub fn with_file(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self {
            records: Mutex::default(),
            sink: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn record(&self, record: AccessRecord) {
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().expect("access log poisoned");
            let line = serde_json::to_string(&record).expect("record serializes");
            // The log is an audit aid; a failed append must not abort training.
            let _ = writeln!(w, "{line}").and_then(|_| w.flush());
        }
        self.records.lock().expect("access log poisoned").push(record);
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.records.lock().expect("access log poisoned").clone()
    }

    pub fn load_file(path: &Path) -> Result<Vec<AccessRecord>> {
        let file = File::open(path).at(path)?;
        BufReader::new(file)
            .lines()
            .map(|line| {
                let line = line.at(path)?;
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            })
            .collect()
    }
}

/// Context attached to every access.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessContext {
    pub phase: Phase,
    pub fold: Option<usize>,
    pub job: String,
}

impl AccessContext {
    pub fn new(phase: Phase, fold: Option<usize>, job: impl Into<String>) -> Self {
        Self {
            phase,
            fold,
            job: job.into(),
        }
    }

    pub fn with_phase(&self, phase: Phase) -> Self {
        Self {
            phase,
            ..self.clone()
        }
    }
}

/// A catalog plus the access log every read goes through.
#[derive(Clone, Debug)]
pub struct DataSource {
    catalog: Catalog,
    log: Arc<AccessLog>,
}

impl DataSource {
    pub fn new(catalog: Catalog, log: Arc<AccessLog>) -> Self {
        Self { catalog, log }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn log(&self) -> &Arc<AccessLog> {
        &self.log
    }

    fn note(&self, path: PathBuf, subject: &str, ctx: &AccessContext) {
        self.log.record(AccessRecord {
            path: path.to_string_lossy().into_owned(),
            subject: subject.to_string(),
            phase: ctx.phase,
            fold: ctx.fold,
            job: ctx.job.clone(),
        });
    }

    /// All slices of one subject's contrast stacked along z.
    pub fn volume(&self, subject: &str, contrast: Contrast, ctx: &AccessContext) -> Result<ContrastVolume> {
        let entries = self.catalog.slices(subject)?;
        let mut slices = Vec::with_capacity(entries.len());
        for entry in entries {
            self.note(self.catalog.resolve(entry.file(super::Channel::Image(contrast))), subject, ctx);
            slices.push(self.catalog.read_slice_volume(entry, contrast).map_err(|e| match e {
                Error::Spec(msg) => Error::Spec(format!("subject {subject}, contrast {contrast}: {msg}")),
                other => other,
            })?);
        }
        let first = slices.first().ok_or_else(|| Error::Spec(format!("subject {subject} has no slices")))?;
        let views: Vec<_> = slices.iter().map(|v| v.voxels().view()).collect();
        let voxels = concatenate(Axis(0), &views).map_err(|e| Error::Consistency(e.to_string()))?;
        ContrastVolume::new(voxels, contrast, first.provenance(), subject, first.spacing())
    }

    pub fn labels(&self, subject: &str, ctx: &AccessContext) -> Result<TissueLabelMap> {
        let entries = self.catalog.slices(subject)?;
        let mut maps = Vec::with_capacity(entries.len());
        for entry in entries {
            self.note(self.catalog.resolve(&entry.labels), subject, ctx);
            maps.push(self.catalog.read_slice_labels(entry)?);
        }
        let views: Vec<_> = maps.iter().map(|m| m.labels().view()).collect();
        let labels = concatenate(Axis(0), &views).map_err(|e| Error::Consistency(e.to_string()))?;
        TissueLabelMap::new(labels, subject, maps[0].spacing())
    }
}
