//! Conditional-GAN translation between contrasts: a U-Net generator and a
//! patch critic trained with an adversarial term plus a pixel reconstruction
//! term, one model per directed contrast pair.

mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::ingest::Contrast;
use crate::seed::derive_seed;
use crate::{Error, Result};

pub use loss::{check_finite_loss, discriminator_loss, generator_loss, LOG_FLOOR};
pub use model::{CriticArch, DiscriminatorModel, GeneratorArch, GeneratorModel};
pub use train::{curves_csv, train_pix2pix, EpochLosses, PairedSlices, SynthesisOutcome, SynthesisQuality};

/// Pixel term of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reconstruction {
    /// Mean absolute error.
    #[default]
    L1,
    /// Mean squared error.
    L2,
}

/// The `[synthesis]` configuration section shared by all directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    pub batch_size: usize,
    /// Weight of the reconstruction term.
    pub lambda_l1: f64,
    pub reconstruction: Reconstruction,
    pub generator: GeneratorArch,
    pub critic: CriticArch,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.5,
            batch_size: 1,
            lambda_l1: 100.0,
            reconstruction: Reconstruction::L1,
            generator: GeneratorArch::default(),
            critic: CriticArch::default(),
            seed: 7,
        }
    }
}

impl SynthesisConfig {
    /// Schedule of the original study: 250 epochs at learning rate 1e-4.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 250,
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("synthesis.batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config("synthesis.learning_rate must be >= 0 and beta1 in [0, 1)".into()));
        }
        if !(self.lambda_l1 >= 0.0) {
            return Err(Error::Config(format!("synthesis.lambda_l1 = {} must be >= 0", self.lambda_l1)));
        }
        self.generator.validate()?;
        self.critic.validate()
    }
}

/// One directed translation `source -> target` with everything needed to
/// train and later reload it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisTask {
    pub source: Contrast,
    pub target: Contrast,
    pub lambda_l1: f64,
    pub reconstruction: Reconstruction,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub generator: GeneratorArch,
    pub critic: CriticArch,
    pub seed: u64,
}

impl SynthesisTask {
    pub fn new(source: Contrast, target: Contrast, cfg: &SynthesisConfig) -> Result<Self> {
        if source == target {
            return Err(Error::Task(format!("source and target are both {source}")));
        }
        cfg.validate()?;
        Ok(Self {
            source,
            target,
            lambda_l1: cfg.lambda_l1,
            reconstruction: cfg.reconstruction,
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            batch_size: cfg.batch_size,
            generator: cfg.generator.clone(),
            critic: cfg.critic.clone(),
            seed: derive_seed(cfg.seed, &[source.index() as u64, target.index() as u64]),
        })
    }

    /// Same task with a seed specific to one cross-validation fold.
    pub fn for_fold(&self, fold: usize) -> Self {
        Self {
            seed: derive_seed(self.seed, &[0xF01D, fold as u64]),
            ..self.clone()
        }
    }

    /// `MRI1->MRI2` style identifier.
    pub fn name(&self) -> String {
        format!("{}->{}", self.source, self.target)
    }

    /// Table label of the synthesized contrast, e.g. `F MRI2(<-R MRI1)`.
    pub fn label(&self) -> String {
        format!("F {}(\u{2190}R {})", self.target, self.source)
    }
}

/// All six ordered pairs of distinct contrasts.
pub fn plan_synthesis_directions(cfg: &SynthesisConfig) -> Result<Vec<SynthesisTask>> {
    let mut out = Vec::with_capacity(6);
    for source in Contrast::ALL {
        for target in Contrast::ALL {
            if source != target {
                out.push(SynthesisTask::new(source, target, cfg)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_distinct_directions() {
        let tasks = plan_synthesis_directions(&SynthesisConfig::default()).unwrap();
        let names: Vec<String> = tasks.iter().map(SynthesisTask::name).collect();
        assert_eq!(
            names,
            ["MRI1->MRI2", "MRI1->MRI3", "MRI2->MRI1", "MRI2->MRI3", "MRI3->MRI1", "MRI3->MRI2"]
        );
        assert!(tasks.iter().all(|t| t.source != t.target));
        assert_eq!(tasks.len() * 5, 30);
    }

    #[test]
    fn identical_contrasts_rejected() {
        let err = SynthesisTask::new(Contrast::Mri2, Contrast::Mri2, &SynthesisConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Task(_)));
    }

    #[test]
    fn fold_seeds_differ() {
        let t = SynthesisTask::new(Contrast::Mri1, Contrast::Mri3, &SynthesisConfig::default()).unwrap();
        assert_ne!(t.for_fold(0).seed, t.for_fold(1).seed);
    }
}
