use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use synthseg_nn::{Graph, ParamStore, PatchDiscriminator, PatchDiscriminatorConfig, Tensor, UNet, UNetConfig, Var};

use super::SynthesisTask;
use crate::checkpoint::{check_layout, read_checkpoint, write_checkpoint};
use crate::ingest::{ContrastVolume, Provenance};
use crate::seed::{derive_seed, hash_str};
use crate::{Error, Result};

const GENERATOR_KIND: &str = "pix2pix-generator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorArch {
    pub base_width: usize,
    pub depth: usize,
    /// Dropout on the innermost decoder level, active at training and
    /// inference; it is the generator's only source of randomness.
    pub dropout: f64,
    /// Leaky activations keep a decoder level from dying early in training,
    /// which would leave the head emitting a constant image.
    pub negative_slope: f64,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            base_width: 8,
            depth: 3,
            dropout: 0.1,
            negative_slope: 0.2,
        }
    }
}

impl GeneratorArch {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.depth == 0 || !(0.0..1.0).contains(&self.dropout)
            || !(0.0..1.0).contains(&self.negative_slope)
        {
            return Err(Error::Config(
                "generator needs base_width > 0, depth > 0, dropout and negative_slope in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: self.base_width,
            depth: self.depth,
            dropout: self.dropout,
            negative_slope: self.negative_slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticArch {
    pub base_width: usize,
    /// Stride-2 blocks; with the scoring layer, 2 gives 22-pixel patches.
    pub downsamples: usize,
}

impl Default for CriticArch {
    fn default() -> Self {
        Self {
            base_width: 16,
            downsamples: 2,
        }
    }
}

impl CriticArch {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.downsamples == 0 {
            return Err(Error::Config("critic needs base_width > 0 and downsamples > 0".into()));
        }
        Ok(())
    }
}

/// Maps `[0, 1]` intensities to the generator's `[-1, 1]` domain.
/// Whitened volumes put every background voxel exactly at the lower end of
/// the range. Under a plain `tanh` that is an asymptote: the L1 term keeps
/// pushing background pre-activations down and can saturate the whole head.
pub const OUTPUT_GAIN: f64 = 1.1;

pub(crate) fn to_signed(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| 2.0 * v - 1.0)
}

pub(crate) fn stack_slices(slices: &[ArrayView2<f32>]) -> Tensor<f32> {
    let (h, w) = slices[0].dim();
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        data.extend(s.iter().copied());
    }
    Tensor::from_vec([slices.len(), 1, h, w], data)
}

/// Trained generator `G` for one direction.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    task: SynthesisTask,
    net: UNet,
    store: ParamStore<f32>,
}

impl PartialEq for GeneratorModel {
    fn eq(&self, other: &Self) -> bool {
        self.task == other.task && self.store == other.store
    }
}

impl GeneratorModel {
    pub fn new(task: SynthesisTask, rng: &mut dyn RngCore) -> Result<Self> {
        task.generator.validate()?;
        let mut store = ParamStore::new();
        let net = UNet::new(task.generator.unet(), &mut store, rng);
        Ok(Self { task, net, store })
    }

    pub fn task(&self) -> &SynthesisTask {
        &self.task
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Raw forward pass on `[-1, 1]` input, returning `OUTPUT_GAIN * tanh` so
    /// the target range `[-1, 1]` is reached at finite pre-activations.
    pub(crate) fn forward(&self, g: &mut Graph<f32>, x: Var, dropout: &mut dyn RngCore) -> Var {
        let raw = self.net.forward(g, &self.store, x, Some(dropout));
        let t = g.tanh(raw);
        g.affine(t, OUTPUT_GAIN, 0.0)
    }

    /// Translates `[0, 1]` slices, returning `[0, 1]` slices. Dropout draws
    /// come from `rng`.
    pub fn translate(&self, slices: &[ArrayView2<f32>], rng: &mut dyn RngCore) -> Result<Vec<Array2<f32>>> {
        if slices.is_empty() {
            return Ok(Vec::new());
        }
        let (h, w) = slices[0].dim();
        let m = 1 << self.task.generator.depth;
        if h % m != 0 || w % m != 0 || slices.iter().any(|s| s.dim() != (h, w)) {
            return Err(Error::Data(format!("slices must share a shape divisible by {m}, got {h}x{w}")));
        }
        let mut g = Graph::inference();
        let x = g.input(to_signed(&stack_slices(slices)));
        let y = self.forward(&mut g, x, rng);
        let out = g.take_value(y);
        Ok((0..slices.len())
            .map(|i| {
                let v: Vec<f32> = out.item_slice(i).iter().map(|&v| (0.5 * v + 0.5).clamp(0.0, 1.0)).collect();
                Array2::from_shape_vec((h, w), v).expect("plane size")
            })
            .collect())
    }

    /// Dropout stream used when synthesizing slice `z` of `subject`.
    pub fn inference_rng(&self, subject: &str, z: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.task.seed, &[0x1AFE, hash_str(subject), z as u64]))
    }

    /// Synthesizes the task's target contrast from a real source volume.
    pub fn synthesize(&self, source: &ContrastVolume) -> Result<ContrastVolume> {
        if source.contrast() != self.task.source {
            return Err(Error::Task(format!(
                "model translates {} but the input is {}",
                self.task.name(),
                source.contrast()
            )));
        }
        let mut out = ndarray::Array3::<f32>::zeros(source.voxels().dim());
        for z in 0..source.depth() {
            let mut rng = self.inference_rng(source.subject_id(), z);
            let slice = self.translate(&[source.slice(z)], &mut rng)?.remove(0);
            out.index_axis_mut(ndarray::Axis(0), z).assign(&slice);
        }
        ContrastVolume::new(
            out,
            self.task.target,
            Provenance::Synthesized { source: self.task.source },
            source.subject_id(),
            source.spacing(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, GENERATOR_KIND, &self.task, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (task, store): (SynthesisTask, _) = read_checkpoint(path, GENERATOR_KIND)?;
        let mut fresh = Self::new(task, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&store, &fresh.store)?;
        fresh.store.copy_values_from(&store);
        Ok(fresh)
    }
}

/// Patch critic `D` scoring `(source, target)` pairs.
#[derive(Clone, Debug)]
pub struct DiscriminatorModel {
    net: PatchDiscriminator,
    store: ParamStore<f32>,
}

impl DiscriminatorModel {
    pub fn new(arch: &CriticArch, rng: &mut dyn RngCore) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let net = PatchDiscriminator::new(
            PatchDiscriminatorConfig {
                in_channels: 2,
                base_width: arch.base_width,
                downsamples: arch.downsamples,
            },
            &mut store,
            rng,
        );
        Ok(Self { net, store })
    }

    pub fn receptive_field(&self) -> usize {
        self.net.receptive_field()
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Per-patch probabilities that `(x, y)` is a real pair; inputs in `[-1, 1]`.
    pub fn score(&self, g: &mut Graph<f32>, x: Var, y: Var) -> Var {
        let pair = g.concat(x, y);
        let logits = self.net.forward(g, &self.store, pair);
        g.sigmoid(logits)
    }
}
