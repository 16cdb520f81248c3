use serde::{Deserialize, Serialize};

use crate::data::Loader;
use crate::error::{config_err, Error, Result};
use crate::fusion::FusedModel;
use crate::graph::Mode;
use crate::tensor::Element;

/// Averaging used for the summary precision / recall / F1.
pub const AVERAGING: &str = "macro";

/// Confusion matrix (rows = true class, columns = predicted) and the
/// statistics derived from it. Undefined ratios (zero denominators) are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub n_samples: usize,
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub averaging: String,
    #[serde(default)]
    pub class_names: Vec<String>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_predictions(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(config_err!("cannot evaluate an empty sample set"));
        }
        if labels.len() != preds.len() {
            return Err(Error::Data(format!("{} labels but {} predictions", labels.len(), preds.len())));
        }
        if let Some(bad) = labels.iter().chain(preds).find(|&&c| c >= num_classes) {
            return Err(Error::Data(format!("class {bad} out of range for {num_classes} classes")));
        }
        let k = num_classes;
        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in labels.iter().zip(preds) {
            confusion[t][p] += 1;
        }
        let diag: Vec<u64> = (0..k).map(|c| confusion[c][c]).collect();
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..k).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
        let precision: Vec<f64> = (0..k).map(|c| ratio(diag[c], cols[c])).collect();
        let recall: Vec<f64> = (0..k).map(|c| ratio(diag[c], rows[c])).collect();
        let f1: Vec<f64> = precision
            .iter()
            .zip(&recall)
            .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
        Ok(Self {
            num_classes: k,
            n_samples: labels.len(),
            accuracy: ratio(diag.iter().sum(), labels.len() as u64),
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            confusion,
            precision,
            recall,
            f1,
            averaging: AVERAGING.into(),
            class_names: Vec::new(),
        })
    }

    pub fn with_class_names(mut self, names: &[String]) -> Self {
        self.class_names = names.to_vec();
        self
    }

    /// Each row divided by its sum (empty rows stay zero).
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter().map(|&v| ratio(v, total)).collect()
            })
            .collect()
    }
}

/// Arg-max class predictions for `indices`, in Eval mode.
pub fn predict<E: Element>(model: &mut FusedModel<E>, loader: &Loader, indices: &[usize], batch: usize) -> Result<Vec<usize>> {
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let mut preds = Vec::with_capacity(indices.len());
    let result = (|| {
        for chunk in indices.chunks(batch.max(1)) {
            let b = loader.batch(chunk, None)?;
            let logits = model.forward(&b.images.cast::<E>(), 0)?;
            preds.extend(logits.argmax_rows()?);
        }
        Ok(())
    })();
    model.set_mode(previous);
    result.map(|_| preds)
}

/// Metrics of `model` over `indices`.
pub fn evaluate<E: Element>(
    model: &mut FusedModel<E>,
    loader: &Loader,
    indices: &[usize],
    num_classes: usize,
    batch: usize,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(config_err!("cannot evaluate an empty sample set"));
    }
    let preds = predict(model, loader, indices, batch)?;
    let labels: Vec<usize> = indices.iter().map(|&i| loader.labels()[i]).collect();
    MetricsReport::from_predictions(&labels, &preds, num_classes)
}
