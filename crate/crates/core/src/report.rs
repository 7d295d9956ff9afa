//! Per-fold and aggregated experiment reports, and their rendering as CSV
//! or Markdown tables.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ingest::Tissue;
use crate::metrics::MetricQuad;
use crate::synthesis::SynthesisQuality;
use crate::{Error, Result};

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`
/// so PSNR of identical images survives a JSON round trip.
pub mod float_or_inf {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(D::Error::custom(format!("expected a number or \"inf\", got {other:?}"))),
            },
        }
    }
}

/// Fixed-point rendering with `places` decimals, rounding half up on the
/// shortest decimal representation of `v` (so 0.94675 gives "0.9468" even
/// though its binary value is slightly below the midpoint).
pub fn format_fixed(v: f64, places: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let negative = v < 0.0;
    let repr = format!("{}", v.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();
    let frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    digits.extend((0..places).map(|i| frac.get(i).copied().unwrap_or(0)));
    if frac.get(places).is_some_and(|&d| d >= 5) {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - places;
    let int_s: String = digits[..split].iter().map(|d| (b'0' + d) as char).collect();
    let frac_s: String = digits[split..].iter().map(|d| (b'0' + d) as char).collect();
    let body = if places == 0 { int_s } else { format!("{int_s}.{frac_s}") };
    let is_zero = digits.iter().all(|&d| d == 0);
    if negative && !is_zero {
        format!("-{body}")
    } else {
        body
    }
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueResult {
    pub tissue: Tissue,
    /// Mean over test subjects of the per-volume metrics.
    pub metrics: MetricQuad,
    /// Test slices where the tissue is absent from both prediction and
    /// ground truth.
    pub empty_slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionQuality {
    pub direction: String,
    pub quality: SynthesisQuality,
}

/// Outcome of one (experiment, fold) job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub experiment_id: String,
    pub label: String,
    pub fold: usize,
    pub fold_plan_hash: String,
    /// Hash of everything that determines the result besides the fold plan.
    pub config_hash: String,
    pub test_subjects: Vec<String>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub tissues: Vec<TissueResult>,
    pub synthesis: Vec<DirectionQuality>,
}

impl FoldReport {
    pub fn metrics(&self, tissue: Tissue) -> Option<&MetricQuad> {
        self.tissues.iter().find(|t| t.tissue == tissue).map(|t| &t.metrics)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueAggregate {
    pub tissue: Tissue,
    pub mean: MetricQuad,
    /// Population standard deviation across folds.
    pub std: MetricQuad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub label: String,
    pub fold_plan_hash: String,
    pub folds: Vec<FoldReport>,
    pub aggregate: Vec<TissueAggregate>,
    /// SHA-256 of the serialized fold rows.
    pub checksum: String,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fold_checksum(folds: &[FoldReport]) -> String {
    let bytes = serde_json::to_vec(folds).expect("fold reports serialize");
    hex::encode(Sha256::digest(&bytes))
}

fn quad(values: [f64; 4]) -> MetricQuad {
    MetricQuad {
        dsc: values[0],
        accuracy: values[1],
        sensitivity: values[2],
        specificity: values[3],
    }
}

/// Averages fold rows per tissue and metric.
pub fn aggregate_report(mut folds: Vec<FoldReport>) -> Result<ExperimentReport> {
    let first = folds.first().ok_or_else(|| Error::Data("no fold reports to aggregate".into()))?.clone();
    for f in &folds {
        if f.experiment_id != first.experiment_id || f.fold_plan_hash != first.fold_plan_hash {
            return Err(Error::Consistency(format!(
                "fold {} of {} (plan {}) cannot be aggregated with {} (plan {})",
                f.fold, f.experiment_id, f.fold_plan_hash, first.experiment_id, first.fold_plan_hash
            )));
        }
    }
    folds.sort_by_key(|f| f.fold);
    let mut aggregate = Vec::new();
    for t in first.tissues.iter().map(|t| t.tissue) {
        let per_fold: Vec<[f64; 4]> = folds
            .iter()
            .map(|f| f.metrics(t).map(MetricQuad::as_array))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Consistency(format!("a fold of {} lacks {}", first.experiment_id, t.name())))?;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for m in 0..4 {
            let column: Vec<f64> = per_fold.iter().map(|v| v[m]).collect();
            (mean[m], std[m]) = mean_std(&column);
        }
        aggregate.push(TissueAggregate {
            tissue: t,
            mean: quad(mean),
            std: quad(std),
        });
    }
    Ok(ExperimentReport {
        experiment_id: first.experiment_id.clone(),
        label: first.label.clone(),
        fold_plan_hash: first.fold_plan_hash.clone(),
        checksum: fold_checksum(&folds),
        folds,
        aggregate,
    })
}

impl ExperimentReport {
    /// Recomputes aggregates and checksum from the fold rows.
    pub fn verify(&self) -> Result<()> {
        let again = aggregate_report(self.folds.clone())?;
        if again.aggregate != self.aggregate || again.checksum != self.checksum {
            return Err(Error::Consistency(format!(
                "stored aggregate of {} does not match its fold rows",
                self.experiment_id
            )));
        }
        Ok(())
    }

    pub fn mean(&self, tissue: Tissue) -> Option<&MetricQuad> {
        self.aggregate.iter().find(|a| a.tissue == tissue).map(|a| &a.mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    /// `Avg.` or `Std.`
    pub stat: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    /// Decimal places per column.
    pub places: Vec<usize>,
}

/// Rows: `Avg.` and `Std.` per experiment; columns: DSC, ACC, SENS, SPEC for
/// muscle, fat, bone and bone marrow.
pub fn segmentation_table(reports: &[ExperimentReport]) -> ResultTable {
    let mut columns = Vec::new();
    for t in Tissue::FOREGROUND {
        for m in MetricQuad::NAMES {
            columns.push(format!("{} {m}", t.heading()));
        }
    }
    let mut rows = Vec::new();
    for r in reports {
        let pick = |mean: bool| -> Vec<f64> {
            Tissue::FOREGROUND
                .iter()
                .flat_map(|&t| {
                    let a = r.aggregate.iter().find(|a| a.tissue == t);
                    a.map_or([f64::NAN; 4], |a| if mean { a.mean.as_array() } else { a.std.as_array() })
                })
                .collect()
        };
        rows.push(TableRow { label: r.label.clone(), stat: "Avg.".into(), values: pick(true) });
        rows.push(TableRow { label: r.label.clone(), stat: "Std.".into(), values: pick(false) });
    }
    ResultTable { places: vec![4; columns.len()], columns, rows }
}

/// Rows per direction label, columns PSNR, SSIM, FID.
pub fn synthesis_table(rows_in: &[(String, Vec<SynthesisQuality>)]) -> ResultTable {
    let columns: Vec<String> = ["PSNR", "SSIM", "FID"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for (label, qs) in rows_in {
        let stats: Vec<(f64, f64)> = [
            qs.iter().map(|q| q.psnr).collect::<Vec<_>>(),
            qs.iter().map(|q| q.ssim).collect(),
            qs.iter().map(|q| q.fid).collect(),
        ]
        .iter()
        .map(|v| mean_std(v))
        .collect();
        rows.push(TableRow { label: label.clone(), stat: "Avg.".into(), values: stats.iter().map(|s| s.0).collect() });
        rows.push(TableRow { label: label.clone(), stat: "Std.".into(), values: stats.iter().map(|s| s.1).collect() });
    }
    ResultTable { columns, rows, places: vec![4, 4, 6] }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_table(table: &ResultTable, format: TableFormat) -> String {
    let mut header = vec!["Experiment".to_string(), "Stat".to_string()];
    header.extend(table.columns.iter().cloned());
    let cells = |row: &TableRow| -> Vec<String> {
        let mut c = vec![row.label.clone(), row.stat.clone()];
        c.extend(row.values.iter().zip(&table.places).map(|(v, &p)| format_fixed(*v, p)));
        c
    };
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","));
            out.push('\n');
            for row in &table.rows {
                out.push_str(&cells(row).iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            let align: Vec<&str> = header.iter().enumerate().map(|(i, _)| if i < 2 { ":--" } else { "--:" }).collect();
            out.push_str(&format!("|{}|\n", align.join("|")));
            for row in &table.rows {
                out.push_str(&format!("| {} |\n", cells(row).join(" | ")));
            }
        }
    }
    out
}
