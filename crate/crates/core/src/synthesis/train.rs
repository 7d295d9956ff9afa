use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use synthseg_nn::{Adam, AdamConfig, Graph};

use super::loss::{check_finite_loss, discriminator_loss, generator_loss};
use super::model::{stack_slices, to_signed, DiscriminatorModel, GeneratorModel};
use super::SynthesisTask;
use crate::metrics::{embed_features, fid, psnr, ssim, RandomConvEmbedder, SsimParams};
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Seed of the feature extractor used for every FID value.
pub const FID_EMBEDDER_SEED: u64 = 0xF1D;

/// Co-registered source/target slices with their origin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedSlices {
    pub subjects: Vec<String>,
    pub z: Vec<usize>,
    pub source: Vec<Array2<f32>>,
    pub target: Vec<Array2<f32>>,
}

impl PairedSlices {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn push(&mut self, subject: &str, z: usize, source: Array2<f32>, target: Array2<f32>) -> Result<()> {
        if source.dim() != target.dim() {
            return Err(Error::Consistency(format!(
                "{subject} slice {z}: source {:?} and target {:?} differ",
                source.dim(),
                target.dim()
            )));
        }
        if let Some(first) = self.source.first() {
            if first.dim() != source.dim() {
                return Err(Error::Consistency(format!("{subject} slice {z} has shape {:?}", source.dim())));
            }
        }
        self.subjects.push(subject.to_string());
        self.z.push(z);
        self.source.push(source);
        self.target.push(target);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub discriminator: f64,
    pub generator_adversarial: f64,
    pub generator_reconstruction: f64,
    /// Mean absolute error on validation slices, intensities in [0, 1].
    pub validation_l1: f64,
}

/// One row per epoch under an `epoch,discriminator,...` header.
pub fn curves_csv(curves: &[EpochLosses]) -> String {
    let mut out = String::from("epoch,discriminator,generator_adversarial,generator_reconstruction,validation_l1\n");
    for c in curves {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.epoch, c.discriminator, c.generator_adversarial, c.generator_reconstruction, c.validation_l1
        ));
    }
    out
}

/// Image quality of synthesized validation volumes against the real ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisQuality {
    #[serde(with = "crate::report::float_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub fid: f64,
    /// FID covariance needed the small-sample ridge.
    pub fid_shrinkage: bool,
}

#[derive(Clone, Debug)]
pub struct SynthesisOutcome {
    /// Generator from the epoch with the lowest validation L1.
    pub model: GeneratorModel,
    pub best_epoch: usize,
    pub curves: Vec<EpochLosses>,
    pub quality: SynthesisQuality,
}

fn validation_outputs(model: &GeneratorModel, data: &PairedSlices) -> Result<Vec<Array2<f32>>> {
    (0..data.len())
        .map(|i| {
            let mut rng = model.inference_rng(&data.subjects[i], data.z[i]);
            Ok(model.translate(&[data.source[i].view()], &mut rng)?.remove(0))
        })
        .collect()
}

fn mean_abs(outputs: &[Array2<f32>], targets: &[Array2<f32>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (o, t) in outputs.iter().zip(targets) {
        sum += o.iter().zip(t).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>();
        n += o.len();
    }
    sum / n as f64
}

/// PSNR and SSIM per subject volume, averaged over subjects; FID over all
/// slices pooled.
pub fn measure_quality(data: &PairedSlices, outputs: &[Array2<f32>]) -> Result<SynthesisQuality> {
    let mut subjects: Vec<&str> = data.subjects.iter().map(String::as_str).collect();
    subjects.dedup();
    subjects.sort_unstable();
    subjects.dedup();
    let (h, w) = data.target[0].dim();
    let params = SsimParams::for_size(h.min(w));
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for s in &subjects {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.subjects[i] == *s).collect();
        let stack = |v: &[Array2<f32>]| {
            let views: Vec<ArrayView2<f32>> = idx.iter().map(|&i| v[i].view()).collect();
            ndarray::stack(ndarray::Axis(0), &views).expect("equal shapes")
        };
        let (real, fake): (Array3<f32>, Array3<f32>) = (stack(&data.target), stack(outputs));
        psnr_sum += psnr(fake.view(), real.view(), 1.0)?;
        let mut s_sum = 0.0;
        for &i in &idx {
            s_sum += ssim(outputs[i].view(), data.target[i].view(), &params)?;
        }
        ssim_sum += s_sum / idx.len() as f64;
    }
    let embedder = RandomConvEmbedder::new(FID_EMBEDDER_SEED);
    let real: Vec<ArrayView2<f32>> = data.target.iter().map(|a| a.view()).collect();
    let fake: Vec<ArrayView2<f32>> = outputs.iter().map(|a| a.view()).collect();
    let (fr, ff) = (embed_features(&real, &embedder)?, embed_features(&fake, &embedder)?);
    Ok(SynthesisQuality {
        psnr: psnr_sum / subjects.len() as f64,
        ssim: ssim_sum / subjects.len() as f64,
        fid: fid(&fr, &ff)?,
        fid_shrinkage: fr.needs_shrinkage(),
    })
}

/// Alternating critic/generator updates per batch. Returns the generator
/// checkpoint with the best validation L1 and its validation quality.
pub fn train_pix2pix(task: &SynthesisTask, train: &PairedSlices, validation: &PairedSlices) -> Result<SynthesisOutcome> {
    if train.is_empty() || validation.len() < 2 {
        return Err(Error::Data(format!(
            "need training slices and at least 2 validation slices, got {} and {}",
            train.len(),
            validation.len()
        )));
    }
    if task.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, &[0x1417]));
    let mut generator = GeneratorModel::new(task.clone(), &mut init_rng)?;
    let mut critic = DiscriminatorModel::new(&task.critic, &mut init_rng)?;
    let adam = AdamConfig::new(task.learning_rate).with_betas(task.beta1, 0.999);
    let mut opt_g = Adam::new(adam, generator.params());
    let mut opt_d = Adam::new(adam, critic.params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, &[0x7EA1]));

    let mut best = (0usize, f64::INFINITY, generator.clone());
    let mut curves = Vec::with_capacity(task.epochs);
    if task.epochs == 0 {
        let outputs = validation_outputs(&generator, validation)?;
        best.1 = mean_abs(&outputs, &validation.target);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=task.epochs {
        order.shuffle(&mut rng);
        let (mut d_sum, mut adv_sum, mut rec_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (batch, chunk) in order.chunks(task.batch_size).enumerate() {
            let diverged = |message: String| Error::Divergence { epoch, batch, message };
            let src: Vec<ArrayView2<f32>> = chunk.iter().map(|&i| train.source[i].view()).collect();
            let tgt: Vec<ArrayView2<f32>> = chunk.iter().map(|&i| train.target[i].view()).collect();
            let target01 = stack_slices(&tgt);
            let x = to_signed(&stack_slices(&src));
            let y = to_signed(&target01);

            let mut gg = Graph::new();
            let xv = gg.input(x.clone());
            let fake = generator.forward(&mut gg, xv, &mut rng);
            let fake_value = gg.value(fake).clone();

            let mut gd = Graph::new();
            let (dx, dy, df) = (gd.input(x), gd.input(y), gd.input(fake_value));
            let p_real = critic.score(&mut gd, dx, dy);
            let p_fake = critic.score(&mut gd, dx, df);
            let ld = discriminator_loss(&mut gd, p_real, p_fake);
            let d_value = check_finite_loss(&gd, ld, batch).map_err(|e| diverged(e.to_string()))?;
            let grads = gd.backward(ld);
            if !grads.all_finite() {
                return Err(diverged("non-finite critic gradient".into()));
            }
            opt_d.step(critic.params_mut(), &grads);

            let p = critic.score(&mut gg, xv, fake);
            let fake01 = gg.affine(fake, 0.5, 0.5);
            let real01 = gg.input(target01);
            let lg = generator_loss(&mut gg, p, fake01, real01, task.lambda_l1, task.reconstruction);
            let g_value = check_finite_loss(&gg, lg, batch).map_err(|e| diverged(e.to_string()))?;
            let diff = gg.sub(fake01, real01);
            let pixel = match task.reconstruction {
                super::Reconstruction::L1 => gg.abs(diff),
                super::Reconstruction::L2 => gg.square(diff),
            };
            let rec = gg.mean(pixel);
            let rec_value = gg.value(rec).item() as f64;
            let grads = gg.backward(lg);
            if !grads.all_finite() {
                return Err(diverged("non-finite generator gradient".into()));
            }
            opt_g.step(generator.params_mut(), &grads);

            d_sum += d_value;
            rec_sum += rec_value;
            adv_sum += g_value - task.lambda_l1 * rec_value;
            batches += 1;
        }
        let outputs = validation_outputs(&generator, validation)?;
        let val_l1 = mean_abs(&outputs, &validation.target);
        if !val_l1.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: batches,
                message: "validation output is not finite".into(),
            });
        }
        let n = batches as f64;
        curves.push(EpochLosses {
            epoch,
            discriminator: d_sum / n,
            generator_adversarial: adv_sum / n,
            generator_reconstruction: rec_sum / n,
            validation_l1: val_l1,
        });
        if val_l1 < best.1 {
            best = (epoch, val_l1, generator.clone());
        }
    }
    let (best_epoch, _, model) = best;
    let outputs = validation_outputs(&model, validation)?;
    let quality = measure_quality(validation, &outputs)?;
    Ok(SynthesisOutcome {
        model,
        best_epoch,
        curves,
        quality,
    })
}
