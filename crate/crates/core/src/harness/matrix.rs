use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::MatrixConfig;
use crate::ingest::Contrast;
use crate::{Error, Result};

/// Where the training volumes of one input channel come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelSource {
    Real,
    Synthesized { source: Contrast },
    /// Subject-level mix: a `ratio` share of training subjects get the
    /// synthesized volume, the rest the real one.
    Mixed { source: Contrast, ratio: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub contrast: Contrast,
    pub source: ChannelSource,
}

impl ChannelSpec {
    pub fn real(contrast: Contrast) -> Self {
        Self { contrast, source: ChannelSource::Real }
    }

    pub fn synthesized(contrast: Contrast, source: Contrast) -> Self {
        Self {
            contrast,
            source: ChannelSource::Synthesized { source },
        }
    }

    /// Generator direction this channel depends on, if any.
    pub fn synthesis_source(&self) -> Option<Contrast> {
        match self.source {
            ChannelSource::Real => None,
            ChannelSource::Synthesized { source } | ChannelSource::Mixed { source, .. } => Some(source),
        }
    }

    fn short(&self) -> String {
        let n = self.contrast.index() + 1;
        match self.source {
            ChannelSource::Real => format!("R{n}"),
            ChannelSource::Synthesized { source } => format!("F{n}from{}", source.index() + 1),
            ChannelSource::Mixed { source, .. } => format!("M{n}from{}", source.index() + 1),
        }
    }
}

impl fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.source {
            ChannelSource::Real => write!(f, "R {}", self.contrast),
            ChannelSource::Synthesized { source } => write!(f, "F {}(\u{2190}R {source})", self.contrast),
            ChannelSource::Mixed { source, ratio } => {
                write!(f, "R+F {}(\u{2190}R {source}, {:.0}% F)", self.contrast, ratio * 100.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Single,
    Multi,
}

/// One row of the result tables: how the segmentor's training channels are
/// produced. Testing always uses the real contrasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    pub mode: InputMode,
    pub channels: Vec<ChannelSpec>,
}

impl ExperimentSpec {
    pub fn new(mode: InputMode, channels: Vec<ChannelSpec>) -> Result<Self> {
        let prefix = match mode {
            InputMode::Single => "single",
            InputMode::Multi => "multi",
        };
        let parts: Vec<String> = channels.iter().map(ChannelSpec::short).collect();
        let spec = Self {
            id: format!("{prefix}_{}", parts.join("_")),
            mode,
            channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.mode {
            InputMode::Single => 1,
            InputMode::Multi => 3,
        };
        if self.channels.len() != want {
            return Err(Error::Spec(format!("{}: {:?} mode needs {want} channels", self.id, self.mode)));
        }
        if self.channels.windows(2).any(|p| p[0].contrast >= p[1].contrast) {
            return Err(Error::Spec(format!("{}: channels must be ordered MRI1 < MRI2 < MRI3", self.id)));
        }
        for ch in &self.channels {
            if ch.synthesis_source() == Some(ch.contrast) {
                return Err(Error::Spec(format!("{}: {} is synthesized from itself", self.id, ch.contrast)));
            }
            if let ChannelSource::Mixed { ratio, .. } = ch.source {
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::Spec(format!("{}: mixed ratio {ratio} outside [0, 1]", self.id)));
                }
            }
        }
        Ok(())
    }

    /// Contrasts fed to the segmentor, also the real test channels.
    pub fn contrasts(&self) -> Vec<Contrast> {
        self.channels.iter().map(|c| c.contrast).collect()
    }

    /// Table label, e.g. `F MRI1(<-R MRI2)`.
    pub fn label(&self) -> String {
        self.channels.iter().map(ToString::to_string).collect::<Vec<_>>().join(" + ")
    }

    /// `(source, target)` generator directions required for training.
    pub fn synthesis_directions(&self) -> Vec<(Contrast, Contrast)> {
        self.channels
            .iter()
            .filter_map(|c| c.synthesis_source().map(|s| (s, c.contrast)))
            .collect()
    }

    pub fn is_all_real(&self) -> bool {
        self.channels.iter().all(|c| c.source == ChannelSource::Real)
    }
}

/// 9 single-input rows (per contrast: real, then synthesized from each other
/// contrast), the all-real multi-input row and the 8 fully synthesized
/// multi-input combinations, plus the optional mixed row.
pub fn expand_experiment_matrix(cfg: &MatrixConfig, mixed_ratio: f64) -> Result<Vec<ExperimentSpec>> {
    let mut out = Vec::new();
    for c in Contrast::ALL {
        out.push(ExperimentSpec::new(InputMode::Single, vec![ChannelSpec::real(c)])?);
        for s in Contrast::ALL.into_iter().filter(|&s| s != c) {
            out.push(ExperimentSpec::new(InputMode::Single, vec![ChannelSpec::synthesized(c, s)])?);
        }
    }
    out.push(ExperimentSpec::new(InputMode::Multi, Contrast::ALL.map(ChannelSpec::real).to_vec())?);
    let others = |c: Contrast| -> Vec<Contrast> { Contrast::ALL.into_iter().filter(|&s| s != c).collect() };
    for &s1 in &others(Contrast::Mri1) {
        for &s2 in &others(Contrast::Mri2) {
            for &s3 in &others(Contrast::Mri3) {
                out.push(ExperimentSpec::new(
                    InputMode::Multi,
                    vec![
                        ChannelSpec::synthesized(Contrast::Mri1, s1),
                        ChannelSpec::synthesized(Contrast::Mri2, s2),
                        ChannelSpec::synthesized(Contrast::Mri3, s3),
                    ],
                )?);
            }
        }
    }
    if cfg.include_mixed {
        out.push(ExperimentSpec::new(
            InputMode::Single,
            vec![ChannelSpec {
                contrast: cfg.mixed_contrast,
                source: ChannelSource::Mixed {
                    source: cfg.mixed_source,
                    ratio: mixed_ratio,
                },
            }],
        )?);
    }
    Ok(out)
}
