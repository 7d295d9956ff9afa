use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::IoContext;
use crate::ingest::{Contrast, SplitRatios};
use crate::phantom::PhantomSpec;
use crate::preprocess::PreprocessConfig;
use crate::segmentation::SegmentationConfig;
use crate::synthesis::SynthesisConfig;
use crate::{Error, Result};

/// Environment variable capping the number of concurrent jobs.
pub const WORKERS_ENV: &str = "SYNTHSEG_WORKERS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Existing `catalog.json` (or its directory); empty means generate the
    /// phantom described by `phantom`.
    pub catalog: String,
    pub phantom: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixConfig {
    pub folds: usize,
    pub fold_seed: u64,
    pub split: SplitRatios,
    /// Adds the optional mixed real/synthesized single-input row.
    pub include_mixed: bool,
    pub mixed_contrast: Contrast,
    pub mixed_source: Contrast,
    /// 0 uses every available core.
    pub workers: usize,
    /// Fail instead of training a synthesis model that is not cached.
    pub offline: bool,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            fold_seed: 2022,
            split: SplitRatios::default(),
            include_mixed: false,
            mixed_contrast: Contrast::Mri3,
            mixed_source: Contrast::Mri1,
            workers: 0,
            offline: false,
        }
    }
}

impl MatrixConfig {
    /// Configured worker count, capped by `SYNTHSEG_WORKERS` when set.
    pub fn effective_workers(&self) -> usize {
        let auto = std::thread::available_parallelism().map_or(1, usize::from);
        let mut n = if self.workers == 0 { auto } else { self.workers };
        if let Some(cap) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
            if cap > 0 {
                n = n.min(cap);
            }
        }
        n.max(1)
    }
}

/// One file describing a full reproduction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessConfig,
    pub synthesis: SynthesisConfig,
    pub segmentation: SegmentationConfig,
    pub matrix: MatrixConfig,
}

fn unknown_keys(user: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match known.get(key) {
            None => out.push(path),
            Some(toml::Value::Table(k)) => {
                if let toml::Value::Table(u) = value {
                    unknown_keys(u, k, &path, out);
                }
            }
            Some(_) => {}
        }
    }
}

impl Config {
    /// Parses TOML, rejecting unknown keys (all of them are listed).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let known: toml::Table =
            toml::Table::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        let mut bad = Vec::new();
        unknown_keys(&user, &known, "", &mut bad);
        if !bad.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", bad.join(", "))));
        }
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.catalog.is_empty() {
            self.dataset.phantom.validate()?;
        }
        self.preprocess.validate()?;
        self.synthesis.validate()?;
        self.segmentation.validate()?;
        let m = &self.matrix;
        if m.folds < 2 {
            return Err(Error::Config(format!("matrix.folds = {} must be at least 2", m.folds)));
        }
        if m.mixed_contrast == m.mixed_source {
            return Err(Error::Config("matrix.mixed_source must differ from matrix.mixed_contrast".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_files() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        let partial = Config::from_toml_str("[synthesis]\nepochs = 3\n[matrix]\ninclude_mixed = true\n").unwrap();
        assert_eq!(partial.synthesis.epochs, 3);
        assert!(partial.matrix.include_mixed);
        assert_eq!(partial.segmentation, SegmentationConfig::default());
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = Config::from_toml_str("[synthesis]\nepoch = 3\n[matrx]\nfolds = 5\n[dataset.phantom]\nsize = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("synthesis.epoch"), "{err}");
        assert!(err.contains("matrx"), "{err}");
        assert!(err.contains("dataset.phantom.size"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml_str("[preprocess]\ndiffusion_dt = 0.5\n").is_err());
        assert!(Config::from_toml_str("[matrix]\nfolds = 1\n").is_err());
    }
}
