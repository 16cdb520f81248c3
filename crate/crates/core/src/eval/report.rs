use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::latency::{LatencyStats, TimingComparison};
use super::metrics::MetricsReport;
use crate::error::{Error, Result};
use crate::fusion::FusedModel;
use crate::runtime::Environment;
use crate::tensor::Element;
use crate::{efficientvit, shufflenet};

/// Version of every JSON document written here.
pub const SCHEMA_VERSION: u32 = 1;

pub const REPORT_JSON: &str = "report.json";
pub const LATENCY_JSON: &str = "latency.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const CONFUSION_NORMALIZED_CSV: &str = "confusion_normalized.csv";
pub const PER_CLASS_CSV: &str = "per_class.csv";
pub const TIMING_JSON: &str = "timing_comparison.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Sum of element counts over (trainable) parameter tensors.
pub fn count_params<E: Element>(model: &FusedModel<E>, trainable_only: bool) -> usize {
    model.params.count(trainable_only)
}

/// Parameter counts split by component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub total: usize,
    pub trainable: usize,
    pub shufflenet: usize,
    pub efficientvit: usize,
    pub head: usize,
}

impl ParamSummary {
    pub fn of<E: Element>(model: &FusedModel<E>) -> Self {
        let p = &model.params;
        Self {
            total: p.count(false),
            trainable: p.count(true),
            shufflenet: p.count_prefix(&format!("{}.", shufflenet::PREFIX), false),
            efficientvit: p.count_prefix(&format!("{}.", efficientvit::PREFIX), false),
            head: p.count_prefix(&format!("{}.", model.net.head_prefix()), false),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub metrics: MetricsReport,
    /// Row-normalized confusion matrix (fractions of each true class).
    pub confusion_normalized: Vec<Vec<f64>>,
    pub params: Option<ParamSummary>,
    pub latency: Option<LatencyStats>,
    pub environment: Environment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyDocument {
    pub schema_version: u32,
    pub stats: LatencyStats,
    pub environment: Environment,
}

fn write(path: PathBuf, text: String, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn csv_rows<T: ToString>(rows: &[Vec<T>]) -> String {
    rows.iter()
        .map(|r| r.iter().map(T::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

/// Writes the requested artifacts into `dir` and returns their paths.
///
/// JSON: `report.json` and, with latency, `latency.json`.
/// CSV: `confusion.csv` and `confusion_normalized.csv` (K rows of K values,
/// no header) and `per_class.csv`.
pub fn emit_report(
    dir: &Path,
    metrics: &MetricsReport,
    latency: Option<&LatencyStats>,
    params: Option<&ParamSummary>,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let env = Environment::detect();
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Json) {
        let doc = ReportDocument {
            schema_version: SCHEMA_VERSION,
            metrics: metrics.clone(),
            confusion_normalized: metrics.row_normalized(),
            params: params.cloned(),
            latency: latency.cloned(),
            environment: env.clone(),
        };
        write(dir.join(REPORT_JSON), serde_json::to_string_pretty(&doc)?, &mut written)?;
        if let Some(stats) = latency {
            write_latency(dir, stats, &env, &mut written)?;
        }
    }
    if formats.contains(&ReportFormat::Csv) {
        write(dir.join(CONFUSION_CSV), csv_rows(&metrics.confusion), &mut written)?;
        write(dir.join(CONFUSION_NORMALIZED_CSV), csv_rows(&metrics.row_normalized()), &mut written)?;
        let mut per_class = String::from("class,precision,recall,f1\n");
        for c in 0..metrics.num_classes {
            let name = metrics.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            per_class += &format!("{name},{},{},{}\n", metrics.precision[c], metrics.recall[c], metrics.f1[c]);
        }
        write(dir.join(PER_CLASS_CSV), per_class, &mut written)?;
    }
    Ok(written)
}

fn write_latency(dir: &Path, stats: &LatencyStats, env: &Environment, written: &mut Vec<PathBuf>) -> Result<()> {
    let doc = LatencyDocument {
        schema_version: SCHEMA_VERSION,
        stats: stats.clone(),
        environment: env.clone(),
    };
    write(dir.join(LATENCY_JSON), serde_json::to_string_pretty(&doc)?, written)
}

/// `latency.json` alone.
pub fn emit_latency(dir: &Path, stats: &LatencyStats) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    write_latency(dir, stats, &Environment::detect(), &mut written)?;
    Ok(written.remove(0))
}

/// `timing_comparison.json`.
pub fn emit_timing(dir: &Path, timing: &TimingComparison) -> Result<PathBuf> {
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        #[serde(flatten)]
        timing: &'a TimingComparison,
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let doc = Doc {
        schema_version: SCHEMA_VERSION,
        timing,
    };
    write(dir.join(TIMING_JSON), serde_json::to_string_pretty(&doc)?, &mut written)?;
    Ok(written.remove(0))
}

pub fn read_report(path: &Path) -> Result<ReportDocument> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_csv_shape() {
        let y = [0, 0, 1, 1, 2, 2];
        let m = MetricsReport::from_predictions(&y, &y, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &m, None, None, &[ReportFormat::Json, ReportFormat::Csv]).unwrap();
        let text = fs::read_to_string(dir.path().join(CONFUSION_CSV)).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows, vec!["2,0,0", "0,2,0", "0,0,2"]);
        let back = read_report(&dir.path().join(REPORT_JSON)).unwrap();
        assert_eq!(back.metrics, m);
        assert_eq!(back.schema_version, SCHEMA_VERSION);
    }
}
