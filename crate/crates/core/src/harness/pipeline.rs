use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::audit::{audit_access, AuditReport};
use super::config::Config;
use super::matrix::{expand_experiment_matrix, ChannelSource, ExperimentSpec, InputMode};
use crate::error::IoContext;
use crate::ingest::{
    make_folds, AccessContext, AccessLog, Catalog, Contrast, ContrastVolume, DataSource, Fold, FoldPlan, Phase,
    Provenance, Tissue,
};
use crate::metrics::{ConfusionCounts, MetricQuad};
use crate::phantom::{generate_phantom_dataset, PhantomSpec};
use crate::preprocess::{preprocess_dataset, PreprocessConfig};
use crate::report::{
    aggregate_report, render_table, segmentation_table, synthesis_table, DirectionQuality, ExperimentReport, FoldReport,
    TableFormat, TissueResult,
};
use crate::seed::{derive_seed, hash_str};
use crate::segmentation::{curve_csv, train_segmentor, InputStack, SegmentationData, SegmentationEpoch, SegmentorModel};
use crate::synthesis::{
    curves_csv, plan_synthesis_directions, train_pix2pix, EpochLosses, GeneratorModel, PairedSlices, SynthesisQuality,
    SynthesisTask,
};
use crate::{Error, Result};

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("value serializes")
}

/// Pretty JSON with a trailing newline, written through a temporary file.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    let tmp = path.with_extension("json.partial");
    std::fs::write(&tmp, text).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.column() as u64,
        message: e.to_string(),
    })
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, text).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

/// Sidecar of a cached generator checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub direction: String,
    pub fold: usize,
    pub cache_key: String,
    pub best_epoch: usize,
    pub quality: SynthesisQuality,
    pub curves: Vec<EpochLosses>,
    /// Wall-clock training time.
    #[serde(default)]
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRecord {
    pub experiment_id: String,
    pub fold: usize,
    pub best_epoch: usize,
    pub curve: Vec<SegmentationEpoch>,
    #[serde(default)]
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub job: String,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct MatrixOutcome {
    pub reports: Vec<ExperimentReport>,
    pub failures: Vec<JobFailure>,
    pub tables: Vec<PathBuf>,
}

impl MatrixOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// A work directory holding data, fold plan, model cache, reports and tables
/// for one configuration.
pub struct Pipeline {
    config: Config,
    root: PathBuf,
    data: DataSource,
    plan: FoldPlan,
    plan_hash: String,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Pipeline {
    /// Generates or loads the dataset, preprocesses it, and creates or
    /// verifies the shared fold plan.
    pub fn prepare(config: Config, root: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(root).at(root)?;
        let raw = if config.dataset.catalog.is_empty() {
            let dir = root.join("data").join("raw");
            let spec_path = dir.join("phantom.json");
            if spec_path.exists() && dir.join(Catalog::FILE_NAME).exists() {
                let existing: PhantomSpec = read_json(&spec_path)?;
                if existing != config.dataset.phantom {
                    return Err(Error::Consistency(format!(
                        "{} holds a phantom generated from different settings",
                        dir.display()
                    )));
                }
                Catalog::load(&dir)?
            } else {
                log::info!("generating phantom dataset in {}", dir.display());
                generate_phantom_dataset(&config.dataset.phantom, &dir)?
            }
        } else {
            Catalog::load(Path::new(&config.dataset.catalog))?
        };

        let pre_dir = root.join("data").join("preprocessed");
        let pre_cfg_path = pre_dir.join("preprocess.json");
        let raw_id = sha_hex(&[&json(&raw.subjects), &json(&raw.root())]);
        let stamp = (raw_id, config.preprocess.clone());
        let fresh = pre_cfg_path.exists()
            && pre_dir.join(Catalog::FILE_NAME).exists()
            && read_json::<(String, PreprocessConfig)>(&pre_cfg_path).ok().as_ref() == Some(&stamp);
        let catalog = if fresh {
            Catalog::load(&pre_dir)?
        } else {
            log::info!("preprocessing into {}", pre_dir.display());
            let c = preprocess_dataset(&raw, &pre_dir, &config.preprocess)?;
            write_json_atomic(&pre_cfg_path, &stamp)?;
            c
        };

        let m = &config.matrix;
        let plan_path = root.join("folds.json");
        let subjects = catalog.subject_ids();
        let expected = make_folds(&subjects, m.folds, m.split, m.fold_seed)?;
        let plan = if plan_path.exists() {
            let existing = FoldPlan::load(&plan_path)?;
            if existing != expected {
                return Err(Error::Consistency(format!(
                    "{} was made for a different subject set or split settings",
                    plan_path.display()
                )));
            }
            existing
        } else {
            expected.save(&plan_path)?;
            expected
        };
        let plan_hash = plan.hash();
        let log = Arc::new(AccessLog::with_file(&root.join("access.jsonl"))?);
        write_text_atomic(&root.join("run_config.toml"), &config.to_toml())?;
        Ok(Self {
            config,
            root: root.to_path_buf(),
            data: DataSource::new(catalog, log),
            plan,
            plan_hash,
            locks: Mutex::default(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn plan(&self) -> &FoldPlan {
        &self.plan
    }

    pub fn plan_hash(&self) -> &str {
        &self.plan_hash
    }

    pub fn data(&self) -> &DataSource {
        &self.data
    }

    pub fn experiments(&self) -> Result<Vec<ExperimentSpec>> {
        expand_experiment_matrix(&self.config.matrix, self.config.segmentation.mixed_ratio)
    }

    pub fn experiment(&self, id: &str) -> Result<ExperimentSpec> {
        self.experiments()?
            .into_iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Spec(format!("no experiment {id:?} in the matrix")))
    }

    pub fn report_path(&self, id: &str, fold: usize) -> PathBuf {
        self.root.join("reports").join(id).join(format!("fold{fold}.json"))
    }

    pub fn segmentor_path(&self, id: &str, fold: usize) -> PathBuf {
        self.root.join("models").join("segmentation").join(id).join(format!("fold{fold}.ckpt"))
    }

    pub fn generator_path(&self, source: Contrast, target: Contrast, fold: usize) -> PathBuf {
        self.root
            .join("models")
            .join("synthesis")
            .join(format!("{source}-{target}"))
            .join(format!("fold{fold}.ckpt"))
    }

    fn lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("lock map poisoned").entry(key.to_string()).or_default().clone()
    }

    pub fn synthesis_task(&self, source: Contrast, target: Contrast, fold: usize) -> Result<SynthesisTask> {
        Ok(SynthesisTask::new(source, target, &self.config.synthesis)?.for_fold(fold))
    }

    fn synthesis_key(&self, task: &SynthesisTask, fold: usize) -> String {
        sha_hex(&[&json(task), &fold.to_le_bytes(), self.plan_hash.as_bytes(), &json(&self.config.preprocess)])
    }

    fn paired(&self, task: &SynthesisTask, subjects: &[String], ctx: &AccessContext) -> Result<PairedSlices> {
        let mut out = PairedSlices::default();
        for s in subjects {
            let src = self.data.volume(s, task.source, ctx)?;
            let tgt = self.data.volume(s, task.target, ctx)?;
            for z in 0..src.depth() {
                out.push(s, z, src.slice(z).to_owned(), tgt.slice(z).to_owned())?;
            }
        }
        Ok(out)
    }

    /// Cached generator for `source -> target` on `fold`, trained on demand
    /// unless the matrix runs offline.
    pub fn synthesis_model(&self, source: Contrast, target: Contrast, fold: usize) -> Result<(GeneratorModel, SynthesisRecord)> {
        let task = self.synthesis_task(source, target, fold)?;
        let f = self.plan.fold(fold)?;
        let key = self.synthesis_key(&task, fold);
        let ckpt = self.generator_path(source, target, fold);
        let sidecar = ckpt.with_extension("json");
        let lock = self.lock(&ckpt.to_string_lossy());
        let _guard = lock.lock().expect("job lock poisoned");
        if ckpt.exists() && sidecar.exists() {
            if let Ok(record) = read_json::<SynthesisRecord>(&sidecar) {
                if record.cache_key == key {
                    let model = GeneratorModel::load(&ckpt)?;
                    if model.task() == &task {
                        let csv = ckpt.with_extension("curves.csv");
                        if !csv.exists() {
                            write_text_atomic(&csv, &curves_csv(&record.curves))?;
                        }
                        return Ok((model, record));
                    }
                }
            }
        }
        if self.config.matrix.offline {
            return Err(Error::Dependency(format!(
                "no cached synthesis model for task {} fold {fold} (offline mode)",
                task.name()
            )));
        }
        let job = format!("synthesis:{}:fold{fold}", task.name());
        log::info!("training {job}");
        let started = Instant::now();
        let train = self.paired(&task, &f.train, &AccessContext::new(Phase::SynthesisTrain, Some(fold), &job))?;
        let val = self.paired(&task, &f.validation, &AccessContext::new(Phase::SynthesisValidate, Some(fold), &job))?;
        let outcome = train_pix2pix(&task, &train, &val)?;
        outcome.model.save(&ckpt)?;
        let record = SynthesisRecord {
            direction: task.name(),
            fold,
            cache_key: key,
            best_epoch: outcome.best_epoch,
            quality: outcome.quality,
            curves: outcome.curves,
            train_seconds: started.elapsed().as_secs_f64(),
        };
        write_text_atomic(&ckpt.with_extension("curves.csv"), &curves_csv(&record.curves))?;
        write_json_atomic(&sidecar, &record)?;
        Ok((outcome.model, record))
    }

    fn config_hash(&self, spec: &ExperimentSpec) -> String {
        let synth: Vec<SynthesisTask> = spec
            .synthesis_directions()
            .iter()
            .map(|&(s, t)| SynthesisTask::new(s, t, &self.config.synthesis))
            .collect::<Result<_>>()
            .unwrap_or_default();
        sha_hex(&[
            &json(spec),
            &json(&self.config.segmentation),
            &json(&synth),
            &json(&self.config.preprocess),
        ])
    }

    /// Subjects whose mixed channel uses the synthesized volume.
    fn mixed_subjects(&self, spec: &ExperimentSpec, fold: usize, subjects: &[String], ratio: f64) -> BTreeSet<String> {
        let mut ids = subjects.to_vec();
        ids.sort();
        let seed = derive_seed(self.config.segmentation.seed, &[0x313ED, hash_str(&spec.id), fold as u64]);
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = (ids.len() as f64 * ratio).round() as usize;
        ids.into_iter().take(n).collect()
    }

    fn training_stack(
        &self,
        spec: &ExperimentSpec,
        subject: &str,
        ctx: &AccessContext,
        generators: &HashMap<(Contrast, Contrast), GeneratorModel>,
        synthesized_subjects: &BTreeSet<String>,
    ) -> Result<InputStack> {
        let mut volumes = Vec::with_capacity(spec.channels.len());
        for ch in &spec.channels {
            let use_synth = match ch.source {
                ChannelSource::Real => None,
                ChannelSource::Synthesized { source } => Some(source),
                ChannelSource::Mixed { source, .. } => synthesized_subjects.contains(subject).then_some(source),
            };
            let vol = match use_synth {
                None => self.data.volume(subject, ch.contrast, ctx)?,
                Some(source) => {
                    let real_source = self.data.volume(subject, source, ctx)?;
                    generators[&(source, ch.contrast)].synthesize(&real_source)?
                }
            };
            volumes.push(vol);
        }
        InputStack::new(volumes)
    }

    fn split_data(
        &self,
        spec: &ExperimentSpec,
        fold: &Fold,
        subjects: &[String],
        phase: Phase,
        job: &str,
        generators: &HashMap<(Contrast, Contrast), GeneratorModel>,
    ) -> Result<SegmentationData> {
        let ctx = AccessContext::new(phase, Some(fold.index), job);
        let ratio = spec
            .channels
            .iter()
            .find_map(|c| match c.source {
                ChannelSource::Mixed { ratio, .. } => Some(ratio),
                _ => None,
            })
            .unwrap_or(0.0);
        let synthesized = self.mixed_subjects(spec, fold.index, subjects, ratio);
        let mut data = SegmentationData::default();
        for s in subjects {
            let stack = self.training_stack(spec, s, &ctx, generators, &synthesized)?;
            let labels = self.data.labels(s, &ctx)?;
            data.push_subject(&stack, &labels)?;
        }
        Ok(data)
    }

    /// Runs (or loads from the report store) one experiment on one fold.
    pub fn run_fold(&self, spec: &ExperimentSpec, fold_index: usize) -> Result<FoldReport> {
        spec.validate()?;
        let fold = self.plan.fold(fold_index)?.clone();
        let config_hash = self.config_hash(spec);
        let path = self.report_path(&spec.id, fold_index);
        if path.exists() {
            if let Ok(cached) = read_json::<FoldReport>(&path) {
                if cached.fold_plan_hash == self.plan_hash && cached.config_hash == config_hash {
                    return Ok(cached);
                }
            }
        }
        let job = format!("segmentation:{}:fold{fold_index}", spec.id);
        let mut generators = HashMap::new();
        let mut synthesis = Vec::new();
        for (source, target) in spec.synthesis_directions() {
            let (model, record) = self.synthesis_model(source, target, fold_index)?;
            synthesis.push(DirectionQuality {
                direction: record.direction.clone(),
                quality: record.quality.clone(),
            });
            generators.insert((source, target), model);
        }
        log::info!("training {job}");
        let started = Instant::now();
        let train = self.split_data(spec, &fold, &fold.train, Phase::SegmentationTrain, &job, &generators)?;
        let val = self.split_data(spec, &fold, &fold.validation, Phase::SegmentationValidate, &job, &generators)?;
        let seed = derive_seed(self.config.segmentation.seed, &[hash_str(&spec.id), fold_index as u64]);
        let outcome = train_segmentor(&spec.contrasts(), &self.config.segmentation, seed, &train, &val)?;
        let seg_path = self.segmentor_path(&spec.id, fold_index);
        outcome.model.save(&seg_path)?;
        write_text_atomic(&seg_path.with_extension("curve.csv"), &curve_csv(&outcome.curve))?;
        write_json_atomic(
            &self.segmentor_path(&spec.id, fold_index).with_extension("json"),
            &SegmentationRecord {
                experiment_id: spec.id.clone(),
                fold: fold_index,
                best_epoch: outcome.best_epoch,
                curve: outcome.curve.clone(),
                train_seconds: started.elapsed().as_secs_f64(),
            },
        )?;

        let tissues = self.evaluate(&outcome.model, spec, &fold, &job)?;
        let report = FoldReport {
            experiment_id: spec.id.clone(),
            label: spec.label(),
            fold: fold_index,
            fold_plan_hash: self.plan_hash.clone(),
            config_hash,
            test_subjects: fold.test.clone(),
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.curve.len(),
            tissues,
            synthesis,
        };
        write_json_atomic(&path, &report)?;
        Ok(report)
    }

    /// Metrics on the real test volumes, averaged over test subjects.
    fn evaluate(&self, model: &SegmentorModel, spec: &ExperimentSpec, fold: &Fold, job: &str) -> Result<Vec<TissueResult>> {
        let ctx = AccessContext::new(Phase::Evaluate, Some(fold.index), job);
        let mut sums = vec![[0.0f64; 4]; Tissue::FOREGROUND.len()];
        let mut empty = vec![0usize; Tissue::FOREGROUND.len()];
        for s in &fold.test {
            let volumes: Vec<ContrastVolume> =
                spec.contrasts().iter().map(|&c| self.data.volume(s, c, &ctx)).collect::<Result<_>>()?;
            if let Some(v) = volumes.iter().find(|v| v.provenance() != Provenance::Real) {
                return Err(Error::Consistency(format!(
                    "test channel {} of {s} is {}; test inputs must be real",
                    v.contrast(),
                    v.provenance()
                )));
            }
            let pred = model.predict(&InputStack::new(volumes)?)?;
            let gt = self.data.labels(s, &ctx)?;
            for (i, &t) in Tissue::FOREGROUND.iter().enumerate() {
                let counts = ConfusionCounts::from_labels(pred.labels().view(), gt.labels().view(), t.id())?;
                let q = MetricQuad::from_counts(&counts).as_array();
                for m in 0..4 {
                    sums[i][m] += q[m];
                }
                for z in 0..gt.dim().0 {
                    if ConfusionCounts::from_labels(pred.slice(z), gt.slice(z), t.id())?.is_empty_pair() {
                        empty[i] += 1;
                    }
                }
            }
        }
        let n = fold.test.len() as f64;
        Ok(Tissue::FOREGROUND
            .iter()
            .enumerate()
            .map(|(i, &tissue)| TissueResult {
                tissue,
                metrics: MetricQuad {
                    dsc: sums[i][0] / n,
                    accuracy: sums[i][1] / n,
                    sensitivity: sums[i][2] / n,
                    specificity: sums[i][3] / n,
                },
                empty_slices: empty[i],
            })
            .collect())
    }

    fn summary_path(&self, id: &str) -> PathBuf {
        self.root.join("reports").join(id).join("summary.json")
    }

    /// All folds of one experiment, then the aggregate.
    pub fn run_experiment(&self, spec: &ExperimentSpec) -> Result<ExperimentReport> {
        let folds = (0..self.plan.k).map(|k| self.run_fold(spec, k)).collect::<Result<Vec<_>>>()?;
        let report = aggregate_report(folds)?;
        write_json_atomic(&self.summary_path(&spec.id), &report)?;
        Ok(report)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.matrix.effective_workers())
            .build()
            .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))
    }

    /// Trains every needed generator, then every (experiment, fold) job, on
    /// a worker pool; failed jobs are collected rather than aborting the run.
    pub fn run_matrix(&self, specs: &[ExperimentSpec]) -> Result<MatrixOutcome> {
        let k = self.plan.k;
        let directions: BTreeSet<(Contrast, Contrast)> =
            specs.iter().flat_map(ExperimentSpec::synthesis_directions).collect();
        let synth_jobs: Vec<(Contrast, Contrast, usize)> =
            directions.iter().flat_map(|&(s, t)| (0..k).map(move |f| (s, t, f))).collect();
        let seg_jobs: Vec<(usize, usize)> = (0..specs.len()).flat_map(|i| (0..k).map(move |f| (i, f))).collect();
        let pool = self.pool()?;
        let mut failures = Vec::new();
        let synth_results: Vec<Result<()>> = pool.install(|| {
            synth_jobs
                .par_iter()
                .map(|&(s, t, f)| self.synthesis_model(s, t, f).map(|_| ()))
                .collect()
        });
        for (&(s, t, f), r) in synth_jobs.iter().zip(synth_results) {
            if let Err(e) = r {
                failures.push(JobFailure {
                    job: format!("synthesis:{s}->{t}:fold{f}"),
                    error: e.to_string(),
                });
            }
        }
        let seg_results: Vec<Result<FoldReport>> =
            pool.install(|| seg_jobs.par_iter().map(|&(i, f)| self.run_fold(&specs[i], f)).collect());
        let mut per_spec: Vec<Vec<FoldReport>> = vec![Vec::new(); specs.len()];
        for (&(i, f), r) in seg_jobs.iter().zip(seg_results) {
            match r {
                Ok(rep) => per_spec[i].push(rep),
                Err(e) => failures.push(JobFailure {
                    job: format!("segmentation:{}:fold{f}", specs[i].id),
                    error: e.to_string(),
                }),
            }
        }
        let mut reports = Vec::new();
        for (spec, folds) in specs.iter().zip(per_spec) {
            if folds.len() == k {
                let report = aggregate_report(folds)?;
                write_json_atomic(&self.summary_path(&spec.id), &report)?;
                reports.push(report);
            }
        }
        let tables = self.write_tables(&reports)?;
        Ok(MatrixOutcome { reports, failures, tables })
    }

    /// Completed experiment reports found in the report store.
    pub fn load_reports(&self, specs: &[ExperimentSpec]) -> Result<Vec<ExperimentReport>> {
        let mut out = Vec::new();
        for spec in specs {
            let folds: Vec<FoldReport> = (0..self.plan.k)
                .map(|f| self.report_path(&spec.id, f))
                .filter(|p| p.exists())
                .map(|p| read_json(&p))
                .collect::<Result<_>>()?;
            if folds.len() == self.plan.k {
                out.push(aggregate_report(folds)?);
            }
        }
        Ok(out)
    }

    /// Per-direction validation quality over all cached folds.
    pub fn synthesis_quality(&self) -> Result<Vec<(String, Vec<SynthesisQuality>)>> {
        let mut rows = Vec::new();
        for task in plan_synthesis_directions(&self.config.synthesis)? {
            let mut qs = Vec::new();
            for f in 0..self.plan.k {
                let p = self.generator_path(task.source, task.target, f).with_extension("json");
                if p.exists() {
                    qs.push(read_json::<SynthesisRecord>(&p)?.quality);
                }
            }
            if !qs.is_empty() {
                rows.push((task.label(), qs));
            }
        }
        Ok(rows)
    }

    /// Renders `tables/segmentation_{single,multi}` and `tables/synthesis` as
    /// CSV and Markdown, plus `tables/notes.md`.
    pub fn write_tables(&self, reports: &[ExperimentReport]) -> Result<Vec<PathBuf>> {
        let dir = self.root.join("tables");
        let specs = self.experiments()?;
        let mode_of = |id: &str| specs.iter().find(|s| s.id == id).map(|s| s.mode);
        let single: Vec<ExperimentReport> =
            reports.iter().filter(|r| mode_of(&r.experiment_id) == Some(InputMode::Single)).cloned().collect();
        let multi: Vec<ExperimentReport> =
            reports.iter().filter(|r| mode_of(&r.experiment_id) == Some(InputMode::Multi)).cloned().collect();
        let mut written = Vec::new();
        let tables = [
            ("segmentation_single", segmentation_table(&single)),
            ("segmentation_multi", segmentation_table(&multi)),
            ("synthesis", synthesis_table(&self.synthesis_quality()?)),
        ];
        for (name, table) in &tables {
            for (ext, format) in [("csv", TableFormat::Csv), ("md", TableFormat::Markdown)] {
                let path = dir.join(format!("{name}.{ext}"));
                write_text_atomic(&path, &render_table(table, format))?;
                written.push(path);
            }
        }
        let notes = dir.join("notes.md");
        write_text_atomic(&notes, &annotations(&specs, reports))?;
        written.push(notes);
        Ok(written)
    }

    pub fn segmentation_record(&self, id: &str, fold: usize) -> Result<SegmentationRecord> {
        read_json(&self.segmentor_path(id, fold).with_extension("json"))
    }

    pub fn synthesis_record(&self, source: Contrast, target: Contrast, fold: usize) -> Result<SynthesisRecord> {
        read_json(&self.generator_path(source, target, fold).with_extension("json"))
    }

    pub fn audit(&self) -> Result<AuditReport> {
        let records = AccessLog::load_file(&self.root.join("access.jsonl"))?;
        Ok(audit_access(&records, &self.plan))
    }
}

/// Per tissue, best synthesized single-input DSC against the best real one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueComparison {
    pub tissue: Tissue,
    pub best_real: (String, f64),
    pub best_synthesized: (String, f64),
}

impl TissueComparison {
    pub fn gap(&self) -> f64 {
        self.best_real.1 - self.best_synthesized.1
    }
}

pub fn compare_single_input(specs: &[ExperimentSpec], reports: &[ExperimentReport]) -> Vec<TissueComparison> {
    let kind = |id: &str| {
        specs
            .iter()
            .find(|s| s.id == id && s.mode == InputMode::Single)
            .map(|s| matches!(s.channels[0].source, ChannelSource::Real))
    };
    let best = |tissue: Tissue, real: bool| {
        reports
            .iter()
            .filter(|r| kind(&r.experiment_id) == Some(real))
            .filter_map(|r| r.mean(tissue).map(|m| (r.label.clone(), m.dsc)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    };
    Tissue::FOREGROUND
        .iter()
        .filter_map(|&t| {
            Some(TissueComparison {
                tissue: t,
                best_real: best(t, true)?,
                best_synthesized: best(t, false)?,
            })
        })
        .collect()
}

fn annotations(specs: &[ExperimentSpec], reports: &[ExperimentReport]) -> String {
    use crate::report::format_fixed;
    let mut out = String::from("# Notes\n\n## Best single-input rows per tissue (DSC)\n\n");
    for c in compare_single_input(specs, reports) {
        out.push_str(&format!(
            "- {}: real {} ({}), synthesized {} ({}), gap {}\n",
            c.tissue.heading(),
            format_fixed(c.best_real.1, 4),
            c.best_real.0,
            format_fixed(c.best_synthesized.1, 4),
            c.best_synthesized.0,
            format_fixed(c.gap(), 4)
        ));
    }
    let is_multi = |r: &&ExperimentReport| {
        specs.iter().any(|s| s.id == r.experiment_id && s.mode == InputMode::Multi)
    };
    let real_multi = reports.iter().filter(is_multi).find(|r| {
        specs.iter().any(|s| s.id == r.experiment_id && s.is_all_real())
    });
    if let Some(real) = real_multi {
        let muscle = |r: &ExperimentReport| r.mean(Tissue::Muscle).map_or(f64::NAN, |m| m.dsc);
        let beaten: Vec<&ExperimentReport> = reports
            .iter()
            .filter(is_multi)
            .filter(|r| r.experiment_id != real.experiment_id && muscle(r) > muscle(real))
            .collect();
        out.push_str("\n## Multi-input muscle DSC ordering\n\n");
        if beaten.is_empty() {
            out.push_str(&format!(
                "- all-real input ({}) is at least as good as every synthesized combination\n",
                format_fixed(muscle(real), 4)
            ));
        } else {
            for r in beaten {
                out.push_str(&format!(
                    "- {} ({}) exceeds the all-real input ({})\n",
                    r.label,
                    format_fixed(muscle(r), 4),
                    format_fixed(muscle(real), 4)
                ));
            }
        }
    }
    out
}

