use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsReport};
use super::report::{emit_report, ReportFormat, SCHEMA_VERSION};
use crate::data::{load_dataset, DatasetIndex};
use crate::error::{config_err, Error, Result};
use crate::train::{fit, initial_state, prepare_run_with, Protocol, TrainConfig};

pub const CROSSVAL_JSON: &str = "crossval.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_indices: Vec<usize>,
    pub metrics: MetricsReport,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub schema_version: u32,
    pub k: usize,
    pub folds: Vec<FoldResult>,
    /// Unweighted mean of fold accuracies.
    pub mean_accuracy: f64,
    /// Population standard deviation of fold accuracies.
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    /// False when a fold failed and the report holds only the folds before it.
    pub complete: bool,
}

impl CrossValReport {
    fn from_folds(k: usize, folds: Vec<FoldResult>, complete: bool) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / n;
        let var = folds.iter().map(|f| (f.metrics.accuracy - mean).powi(2)).sum::<f64>() / n;
        Self {
            schema_version: SCHEMA_VERSION,
            k,
            mean_macro_f1: folds.iter().map(|f| f.metrics.macro_f1).sum::<f64>() / n,
            folds,
            mean_accuracy: mean,
            std_accuracy: var.sqrt(),
            complete,
        }
    }
}

fn write_summary(dir: Option<&Path>, report: &CrossValReport) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CROSSVAL_JSON);
        fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// k rounds of train-on-(k-1)-folds, evaluate-on-the-held-out-fold. Each fold
/// reports the model after its final epoch. With `out_dir`, fold `i` writes
/// its history, checkpoints and report to `fold-i/` and the aggregate goes to
/// `crossval.json`; if a fold fails, the folds completed so far are still
/// written before the error is returned.
pub fn run_cross_validation(cfg: &TrainConfig, k: usize, out_dir: Option<&Path>) -> Result<CrossValReport> {
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| config_err!("dataset_root is not set"))?;
    let index = load_dataset(root, &cfg.loading)?;
    run_cross_validation_on(cfg, k, index, out_dir)
}

pub fn run_cross_validation_on(cfg: &TrainConfig, k: usize, index: DatasetIndex, out_dir: Option<&Path>) -> Result<CrossValReport> {
    let mut cfg = cfg.clone();
    cfg.split.protocol = Protocol::KFold;
    cfg.split.k = k;
    cfg.split.round = 0;
    cfg.validate()?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let result = (|| -> Result<FoldResult> {
            let data = prepare_run_with(&cfg, index.clone(), fold)?;
            let fold_dir = out_dir.map(|d| d.join(format!("fold-{fold}")));
            let mut fold_cfg = cfg.clone();
            fold_cfg.split.round = fold;
            let state = initial_state::<f32>(&fold_cfg)?;
            let mut outcome = fit(state, &data.loader, &data.train, &data.val, &fold_cfg, fold_dir.as_deref())?;
            let metrics = evaluate(&mut outcome.model, &data.loader, &data.test, cfg.num_classes, cfg.eval_batch_size)?
                .with_class_names(&data.index.classes);
            if let Some(dir) = &fold_dir {
                emit_report(dir, &metrics, None, None, &[ReportFormat::Json, ReportFormat::Csv])?;
            }
            log::info!("fold {}/{k}: accuracy {:.4}", fold + 1, metrics.accuracy);
            Ok(FoldResult {
                fold,
                train_size: data.train.len(),
                test_indices: data.test,
                metrics,
                out_dir: fold_dir,
            })
        })();
        match result {
            Ok(r) => folds.push(r),
            Err(e) => {
                write_summary(out_dir, &CrossValReport::from_folds(k, folds, false))?;
                return Err(e);
            }
        }
    }
    let report = CrossValReport::from_folds(k, folds, true);
    write_summary(out_dir, &report)?;
    Ok(report)
}
