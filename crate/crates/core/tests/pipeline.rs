use std::path::Path;

use synthseg::harness::{Config, Pipeline};
use synthseg::ingest::{Contrast, Phase, SplitRatios, Tissue};
use synthseg::Error;

fn tiny_config() -> Config {
    let mut c = Config::default();
    c.dataset.phantom.image_size = 32;
    c.dataset.phantom.n_subjects = 6;
    c.dataset.phantom.slices_per_subject = 2;
    c.synthesis.epochs = 1;
    c.segmentation.epochs = 2;
    c.matrix.folds = 2;
    c.matrix.split = SplitRatios {
        train: 0.3,
        validation: 0.2,
        test: 0.5,
    };
    c.matrix.workers = 2;
    c
}

fn mtime(p: &Path) -> std::time::SystemTime {
    std::fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn matrix_subset_runs_resumes_and_audits_clean() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::prepare(tiny_config(), dir.path()).unwrap();
    let all = p.experiments().unwrap();
    assert_eq!(all.len(), 18);
    let chosen: Vec<_> = all
        .into_iter()
        .filter(|s| ["single_R1", "single_F2from1", "multi_R1_R2_R3"].contains(&s.id.as_str()))
        .collect();
    assert_eq!(chosen.len(), 3);

    let out = p.run_matrix(&chosen).unwrap();
    assert!(out.succeeded(), "{:?}", out.failures);
    assert_eq!(out.reports.len(), 3);
    for r in &out.reports {
        r.verify().unwrap();
        assert_eq!(r.folds.len(), 2);
        for f in &r.folds {
            assert_eq!(f.tissues.len(), Tissue::FOREGROUND.len());
            for t in &f.tissues {
                for v in t.metrics.as_array() {
                    assert!((0.0..=1.0).contains(&v), "{v}");
                }
            }
        }
    }
    let synth_row = out.reports.iter().find(|r| r.experiment_id == "single_F2from1").unwrap();
    assert_eq!(synth_row.folds[0].synthesis.len(), 1);
    assert_eq!(synth_row.folds[0].synthesis[0].direction, "MRI1->MRI2");
    for name in ["segmentation_single.csv", "segmentation_multi.md", "synthesis.csv", "notes.md"] {
        assert!(dir.path().join("tables").join(name).exists(), "{name}");
    }

    let audit = p.audit().unwrap();
    assert!(audit.training_reads > 0);
    assert!(audit.is_clean(), "{:?}", audit.violations);
    let records = synthseg::ingest::AccessLog::load_file(&dir.path().join("access.jsonl")).unwrap();
    assert!(records.iter().any(|r| r.phase == Phase::Evaluate));

    // Second pass reuses every cached artifact.
    let ckpt = p.generator_path(Contrast::Mri1, Contrast::Mri2, 0);
    let report = p.report_path("single_R1", 1);
    let (t_ckpt, t_report) = (mtime(&ckpt), mtime(&report));
    drop(p);
    let p = Pipeline::prepare(tiny_config(), dir.path()).unwrap();
    let again = p.run_matrix(&chosen).unwrap();
    assert!(again.succeeded());
    assert_eq!(mtime(&ckpt), t_ckpt);
    assert_eq!(mtime(&report), t_report);
    for (a, b) in out.reports.iter().zip(&again.reports) {
        assert_eq!(a.checksum, b.checksum);
    }
}

#[test]
fn offline_miss_names_task_and_fold() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.matrix.offline = true;
    let p = Pipeline::prepare(c, dir.path()).unwrap();
    match p.synthesis_model(Contrast::Mri3, Contrast::Mri1, 1) {
        Err(Error::Dependency(msg)) => {
            assert!(msg.contains("MRI3->MRI1"), "{msg}");
            assert!(msg.contains("fold 1"), "{msg}");
        }
        other => panic!("expected a dependency error, got {:?}", other.map(|(_, r)| r)),
    }
}

#[test]
fn changed_split_settings_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::prepare(tiny_config(), dir.path()).unwrap();
    let mut c = tiny_config();
    c.matrix.fold_seed += 1;
    assert!(matches!(Pipeline::prepare(c, dir.path()), Err(Error::Consistency(_))));
    let mut c = tiny_config();
    c.dataset.phantom.seed += 1;
    assert!(matches!(Pipeline::prepare(c, dir.path()), Err(Error::Consistency(_))));
}

#[test]
fn unknown_experiment_is_a_spec_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::prepare(tiny_config(), dir.path()).unwrap();
    assert!(matches!(p.experiment("single_R4"), Err(Error::Spec(_))));
}
