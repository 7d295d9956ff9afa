use serde::{Deserialize, Serialize};

use crate::ingest::{AccessRecord, FoldPlan};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records: usize,
    pub training_reads: usize,
    /// Training-phase reads of a subject in that fold's test set, or
    /// training-phase reads not attributed to a valid fold.
    pub violations: Vec<AccessRecord>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn audit_access(records: &[AccessRecord], plan: &FoldPlan) -> AuditReport {
    let mut report = AuditReport {
        records: records.len(),
        ..AuditReport::default()
    };
    for r in records.iter().filter(|r| r.phase.is_training()) {
        report.training_reads += 1;
        let leaked = match r.fold.and_then(|k| plan.folds.get(k)) {
            Some(fold) => fold.is_test_subject(&r.subject),
            None => true,
        };
        if leaked {
            report.violations.push(r.clone());
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{make_folds, Phase, SplitRatios};

    #[test]
    fn flags_test_subject_reads_during_training_only() {
        let subjects: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let plan = make_folds(&subjects, 5, SplitRatios::default(), 1).unwrap();
        let test_subject = plan.folds[0].test[0].clone();
        let train_subject = plan.folds[0].train[0].clone();
        let rec = |subject: &str, phase, fold| AccessRecord {
            path: "p".into(),
            subject: subject.into(),
            phase,
            fold,
            job: "j".into(),
        };
        let records = vec![
            rec(&train_subject, Phase::SegmentationTrain, Some(0)),
            rec(&test_subject, Phase::Evaluate, Some(0)),
            rec(&test_subject, Phase::Preprocess, None),
        ];
        let clean = audit_access(&records, &plan);
        assert!(clean.is_clean());
        assert_eq!(clean.training_reads, 1);
        let mut dirty = records.clone();
        dirty.push(rec(&test_subject, Phase::SynthesisValidate, Some(0)));
        dirty.push(rec(&train_subject, Phase::SynthesisTrain, None));
        assert_eq!(audit_access(&dirty, &plan).violations.len(), 2);
    }
}
