//! Multi-tissue U-Net segmentor on one contrast or a channel stack of all
//! three, trained with pixelwise softmax cross-entropy and early stopping.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use synthseg_nn::{softmax_channels, Adam, AdamConfig, Graph, ParamStore, Tensor, UNet, UNetConfig, Var};

use crate::checkpoint::{check_layout, read_checkpoint, write_checkpoint};
use crate::ingest::{Contrast, ContrastVolume, Tissue, TissueLabelMap};
use crate::seed::derive_seed;
use crate::synthesis::check_finite_loss;
use crate::{Error, Result};

const SEGMENTOR_KIND: &str = "unet-segmentor";

/// The `[segmentation]` configuration section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Upper bound on epochs; early stopping usually ends sooner.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub base_width: usize,
    pub depth: usize,
    /// Fraction of training subjects whose mixed channel is synthesized.
    pub mixed_ratio: f64,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 2e-3,
            batch_size: 2,
            patience: 10,
            base_width: 8,
            depth: 3,
            mixed_ratio: 0.5,
            seed: 11,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.base_width == 0 || self.depth == 0 {
            return Err(Error::Config("segmentation batch_size, base_width and depth must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("segmentation.learning_rate must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mixed_ratio) {
            return Err(Error::Config(format!("segmentation.mixed_ratio = {} outside [0, 1]", self.mixed_ratio)));
        }
        Ok(())
    }
}

/// Co-registered volumes of one subject fed to the network as channels,
/// always in MRI1, MRI2, MRI3 order.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStack {
    volumes: Vec<ContrastVolume>,
}

impl InputStack {
    pub fn new(volumes: Vec<ContrastVolume>) -> Result<Self> {
        let first = volumes.first().ok_or_else(|| Error::Spec("empty input stack".into()))?;
        for pair in volumes.windows(2) {
            if pair[0].contrast() >= pair[1].contrast() {
                return Err(Error::Spec(format!(
                    "input channels must be ordered MRI1 < MRI2 < MRI3, got {} before {}",
                    pair[0].contrast(),
                    pair[1].contrast()
                )));
            }
        }
        for v in &volumes[1..] {
            if v.voxels().dim() != first.voxels().dim() || v.subject_id() != first.subject_id() {
                return Err(Error::Consistency(format!(
                    "{} of {} does not match {} of {}",
                    v.contrast(),
                    v.subject_id(),
                    first.contrast(),
                    first.subject_id()
                )));
            }
        }
        Ok(Self { volumes })
    }

    pub fn contrasts(&self) -> Vec<Contrast> {
        self.volumes.iter().map(ContrastVolume::contrast).collect()
    }

    pub fn volumes(&self) -> &[ContrastVolume] {
        &self.volumes
    }

    pub fn subject_id(&self) -> &str {
        self.volumes[0].subject_id()
    }

    pub fn depth(&self) -> usize {
        self.volumes[0].depth()
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        self.volumes[0].slice_shape()
    }

    /// Channel-major values of slice `z`, mapped from [0, 1] to [-1, 1].
    pub fn slice_input(&self, z: usize) -> Vec<f32> {
        let mut out = Vec::new();
        for v in &self.volumes {
            out.extend(v.slice(z).iter().map(|&x| 2.0 * x - 1.0));
        }
        out
    }
}

/// Slices ready for training: inputs `[channels, h, w]` and labels `[h, w]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentationData {
    pub channels: usize,
    pub shape: (usize, usize),
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<Vec<u8>>,
}

impl SegmentationData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push_subject(&mut self, stack: &InputStack, labels: &TissueLabelMap) -> Result<()> {
        for v in stack.volumes() {
            labels.check_pairs_with(v)?;
        }
        let channels = stack.volumes().len();
        if self.is_empty() {
            self.channels = channels;
            self.shape = stack.slice_shape();
        } else if self.channels != channels || self.shape != stack.slice_shape() {
            return Err(Error::Consistency(format!(
                "{} has {} channels of {:?}, expected {} of {:?}",
                stack.subject_id(),
                channels,
                stack.slice_shape(),
                self.channels,
                self.shape
            )));
        }
        for z in 0..stack.depth() {
            self.inputs.push(stack.slice_input(z));
            self.labels.push(labels.slice(z).iter().copied().collect());
        }
        Ok(())
    }

    fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<u8>) {
        let (h, w) = self.shape;
        let mut x = Vec::with_capacity(idx.len() * self.channels * h * w);
        let mut y = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i]);
            y.extend_from_slice(&self.labels[i]);
        }
        (Tensor::from_vec([idx.len(), self.channels, h, w], x), y)
    }
}

/// Mean per-pixel `-ln softmax(logits)[label]`.
pub fn cross_entropy_loss(g: &mut Graph<impl synthseg_nn::Float>, logits: Var, labels: &[u8]) -> Result<Var> {
    let [n, c, h, w] = g.value(logits).shape();
    if labels.len() != n * h * w {
        return Err(Error::Data(format!("{} labels for {n}x{h}x{w} logits", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!("label {bad} outside class set 0..{c}")));
    }
    Ok(g.softmax_cross_entropy(logits, labels))
}

/// Per-pixel argmax over class probabilities of `[n, c, h, w]`; ties go to
/// the lowest class index.
pub fn argmax_classes(probs: &[f32], shape: [usize; 4]) -> Vec<u8> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        for px in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if probs[(i * c + ch) * hw + px] > probs[(i * c + best) * hw + px] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SegmentorHeader {
    contrasts: Vec<Contrast>,
    base_width: usize,
    depth: usize,
}

#[derive(Clone, Debug)]
pub struct SegmentorModel {
    header: SegmentorHeader,
    net: UNet,
    store: ParamStore<f32>,
}

impl PartialEq for SegmentorModel {
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header && self.store == other.store
    }
}

impl SegmentorModel {
    /// Fresh network for inputs stacked in `contrasts` order.
    pub fn new(contrasts: &[Contrast], base_width: usize, depth: usize, seed: u64) -> Result<Self> {
        if contrasts.is_empty() || contrasts.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Spec(format!("channels {contrasts:?} must be non-empty and ordered MRI1 < MRI2 < MRI3")));
        }
        let header = SegmentorHeader {
            contrasts: contrasts.to_vec(),
            base_width,
            depth,
        };
        Self::from_header(header, seed)
    }

    fn from_header(header: SegmentorHeader, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = UNet::new(
            UNetConfig {
                in_channels: header.contrasts.len(),
                out_channels: Tissue::COUNT,
                base_width: header.base_width,
                depth: header.depth,
                dropout: 0.0,
                negative_slope: 0.0,
            },
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        Ok(Self { header, net, store })
    }

    pub fn in_channels(&self) -> usize {
        self.header.contrasts.len()
    }

    pub fn contrasts(&self) -> &[Contrast] {
        &self.header.contrasts
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn logits(&self, g: &mut Graph<f32>, x: Var) -> Var {
        self.net.forward(g, &self.store, x, None)
    }

    fn check_stack(&self, stack: &InputStack) -> Result<()> {
        if stack.volumes().len() != self.in_channels() {
            return Err(Error::Spec(format!(
                "model takes {} channels, stack has {}",
                self.in_channels(),
                stack.volumes().len()
            )));
        }
        if stack.contrasts() != self.header.contrasts {
            return Err(Error::Spec(format!(
                "model channels {:?} but stack holds {:?}",
                self.header.contrasts,
                stack.contrasts()
            )));
        }
        let (h, w) = stack.slice_shape();
        let m = 1 << self.header.depth;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Data(format!("slice {h}x{w} not divisible by {m}")));
        }
        Ok(())
    }

    /// Mean cross-entropy over all slices of `data`.
    pub fn evaluate_loss(&self, data: &SegmentationData) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..data.len() {
            let (x, y) = data.batch(&[i]);
            let mut g = Graph::inference();
            let xv = g.input(x);
            let logits = self.logits(&mut g, xv);
            let loss = cross_entropy_loss(&mut g, logits, &y)?;
            sum += check_finite_loss(&g, loss, i)?;
        }
        Ok(sum / data.len() as f64)
    }

    pub fn predict(&self, stack: &InputStack) -> Result<TissueLabelMap> {
        self.check_stack(stack)?;
        let (h, w) = stack.slice_shape();
        let mut labels = Array3::<u8>::zeros((stack.depth(), h, w));
        for z in 0..stack.depth() {
            let mut g = Graph::inference();
            let x = g.input(Tensor::from_vec([1, self.in_channels(), h, w], stack.slice_input(z)));
            let logits = self.logits(&mut g, x);
            let lv = g.value(logits);
            let classes = argmax_classes(&softmax_channels(lv), lv.shape());
            labels
                .index_axis_mut(ndarray::Axis(0), z)
                .assign(&Array2::from_shape_vec((h, w), classes).expect("plane size"));
        }
        let vol = &stack.volumes()[0];
        TissueLabelMap::new(labels, vol.subject_id(), vol.spacing())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, SEGMENTOR_KIND, &self.header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store): (SegmentorHeader, _) = read_checkpoint(path, SEGMENTOR_KIND)?;
        let mut fresh = Self::from_header(header, 0)?;
        check_layout(&store, &fresh.store)?;
        fresh.store.copy_values_from(&store);
        Ok(fresh)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

pub fn curve_csv(curve: &[SegmentationEpoch]) -> String {
    let mut out = String::from("epoch,train_loss,validation_loss\n");
    for e in curve {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.validation_loss));
    }
    out
}

#[derive(Clone, Debug)]
pub struct SegmentationOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: SegmentorModel,
    pub best_epoch: usize,
    pub curve: Vec<SegmentationEpoch>,
}

/// Adam on shuffled mini-batches, keeping the best validation checkpoint and
/// stopping after `patience` epochs without improvement.
pub fn train_segmentor(
    contrasts: &[Contrast],
    cfg: &SegmentationConfig,
    seed: u64,
    train: &SegmentationData,
    validation: &SegmentationData,
) -> Result<SegmentationOutcome> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data("segmentation needs training and validation slices".into()));
    }
    if train.channels != contrasts.len() || validation.channels != contrasts.len() {
        return Err(Error::Spec(format!(
            "{} input channels requested but data has {}",
            contrasts.len(),
            train.channels
        )));
    }
    let mut model = SegmentorModel::new(contrasts, cfg.base_width, cfg.depth, derive_seed(seed, &[0x1417]))?;
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5E6]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (0usize, f64::INFINITY, model.clone());
    let mut curve = Vec::new();
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(chunk);
            let mut g = Graph::new();
            let xv = g.input(x);
            let logits = model.logits(&mut g, xv);
            let loss = cross_entropy_loss(&mut g, logits, &y)?;
            let value = check_finite_loss(&g, loss, batch).map_err(|e| Error::Divergence {
                epoch,
                batch,
                message: e.to_string(),
            })?;
            let grads = g.backward(loss);
            if !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    message: "non-finite gradient".into(),
                });
            }
            opt.step(&mut model.store, &grads);
            sum += value;
            batches += 1;
        }
        let validation_loss = model.evaluate_loss(validation)?;
        curve.push(SegmentationEpoch {
            epoch,
            train_loss: sum / batches as f64,
            validation_loss,
        });
        if validation_loss < best.1 {
            best = (epoch, validation_loss, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, _, model) = best;
    Ok(SegmentationOutcome { model, best_epoch, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Provenance;

    fn vol(c: Contrast, subject: &str, v: f32) -> ContrastVolume {
        ContrastVolume::from_slice(Array2::from_elem((8, 8), v), c, Provenance::Real, subject, [1.0; 3]).unwrap()
    }

    #[test]
    fn stack_order_enforced() {
        assert!(InputStack::new(vec![vol(Contrast::Mri1, "a", 0.1), vol(Contrast::Mri2, "a", 0.2)]).is_ok());
        let err = InputStack::new(vec![vol(Contrast::Mri2, "a", 0.1), vol(Contrast::Mri1, "a", 0.2)]).unwrap_err();
        assert!(matches!(err, Error::Spec(_)));
        let err = InputStack::new(vec![vol(Contrast::Mri1, "a", 0.1), vol(Contrast::Mri2, "b", 0.2)]).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
        assert!(SegmentorModel::new(&[Contrast::Mri3, Contrast::Mri1], 4, 1, 0).is_err());
    }

    #[test]
    fn argmax_tie_break_and_forced_class() {
        // one pixel, 5 classes, tie between 1 and 3
        let probs = [0.1f32, 0.3, 0.1, 0.3, 0.2];
        assert_eq!(argmax_classes(&probs, [1, 5, 1, 1]), vec![1]);
        let mut forced = vec![0.0f32; 5 * 4];
        for px in 0..4 {
            forced[2 * 4 + px] = 1.0;
        }
        assert_eq!(argmax_classes(&forced, [1, 5, 2, 2]), vec![2; 4]);
    }

    #[test]
    fn uniform_logits_give_ln5_and_bad_labels_rejected() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::full([1, 5, 2, 2], 0.7));
        let loss = cross_entropy_loss(&mut g, logits, &[0, 1, 2, 4]).unwrap();
        assert!((g.value(loss).item() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy_loss(&mut g, logits, &[0, 1, 5, 4]), Err(Error::Data(_))));
    }

    #[test]
    fn zero_epochs_is_identity_and_predict_checks_channels() {
        let mut data = SegmentationData::default();
        let labels = TissueLabelMap::from_slice(Array2::from_elem((8, 8), 1), "a", [1.0; 3]).unwrap();
        let stack = InputStack::new(vec![vol(Contrast::Mri2, "a", 0.5)]).unwrap();
        data.push_subject(&stack, &labels).unwrap();
        let cfg = SegmentationConfig { epochs: 0, base_width: 4, depth: 1, ..Default::default() };
        let out = train_segmentor(&[Contrast::Mri2], &cfg, 5, &data, &data).unwrap();
        let init = SegmentorModel::new(&[Contrast::Mri2], 4, 1, derive_seed(5, &[0x1417])).unwrap();
        assert_eq!(out.model, init);
        assert!(out.curve.is_empty());
        let wrong = InputStack::new(vec![vol(Contrast::Mri1, "a", 0.5), vol(Contrast::Mri2, "a", 0.5)]).unwrap();
        assert!(matches!(out.model.predict(&wrong), Err(Error::Spec(_))));
        let pred = out.model.predict(&stack).unwrap();
        assert_eq!(pred, out.model.predict(&stack).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        out.model.save(&path).unwrap();
        assert_eq!(SegmentorModel::load(&path).unwrap(), out.model);
    }
}
