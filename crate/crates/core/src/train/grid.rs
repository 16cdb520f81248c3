use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::train;
use crate::error::{config_err, Error, Result};

pub const RESULTS_FILE: &str = "grid_results.csv";

/// Candidate values per hyperparameter (dotted config keys). Points are the
/// cartesian product with keys in sorted order and the last key varying
/// fastest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub params: std::collections::BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub overrides: Vec<(String, toml::Value)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: GridPoint,
    pub val_accuracy: Option<f64>,
    pub error: Option<String>,
    pub out_dir: Option<PathBuf>,
}

impl GridSpec {
    /// Reads a TOML table of `key = [values...]`, optionally nested under `[grid]`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        if let Some(toml::Value::Table(inner)) = table.remove("grid") {
            table = inner;
        }
        let mut params = std::collections::BTreeMap::new();
        for (key, value) in table {
            let values = match value {
                toml::Value::Array(values) => values,
                single => vec![single],
            };
            params.insert(key, values);
        }
        let spec = Self { params };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(config_err!("grid file {} does not exist", path.display()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(config_err!("grid has no parameters"));
        }
        if let Some((k, _)) = self.params.iter().find(|(_, v)| v.is_empty()) {
            return Err(config_err!("grid parameter {k} has no candidate values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.values().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let keys: Vec<&String> = self.params.keys().collect();
        (0..self.len())
            .map(|index| {
                let mut rest = index;
                let mut overrides: Vec<(String, toml::Value)> = keys
                    .iter()
                    .rev()
                    .map(|k| {
                        let values = &self.params[*k];
                        let v = values[rest % values.len()].clone();
                        rest /= values.len();
                        ((*k).clone(), v)
                    })
                    .collect();
                overrides.reverse();
                GridPoint { index, overrides }
            })
            .collect()
    }
}

/// Index of the first maximal score; failed points (`None`) never win.
pub fn select_best(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = s.filter(|s| !s.is_nan()) {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Trains every grid point with `evaluate` and ranks by validation accuracy.
/// A failing point is recorded and the search continues. Up to `jobs` points
/// run at once, each with its own output directory and random streams, so the
/// results do not depend on `jobs`.
pub fn grid_search_with<F>(base: &TrainConfig, spec: &GridSpec, jobs: usize, evaluate: F) -> Result<(Vec<GridResult>, Option<usize>)>
where
    F: Fn(&GridPoint, &TrainConfig) -> Result<(f64, Option<PathBuf>)> + Sync,
{
    spec.validate()?;
    let points = spec.points();
    let slots: Mutex<Vec<Option<GridResult>>> = Mutex::new(vec![None; points.len()]);
    let next = AtomicUsize::new(0);
    let run = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(point) = points.get(i) else { break };
        let outcome = base.with_overrides(&point.overrides).and_then(|cfg| {
            cfg.validate()?;
            evaluate(point, &cfg)
        });
        let result = match outcome {
            Ok((acc, out_dir)) => GridResult {
                point: point.clone(),
                val_accuracy: Some(acc),
                error: None,
                out_dir,
            },
            Err(e) => {
                log::warn!("grid point {i} failed: {e}");
                GridResult {
                    point: point.clone(),
                    val_accuracy: None,
                    error: Some(e.to_string()),
                    out_dir: None,
                }
            }
        };
        slots.lock().expect("no panics while holding the lock")[i] = Some(result);
    };
    let workers = jobs.clamp(1, points.len().max(1));
    std::thread::scope(|s| {
        for _ in 1..workers {
            s.spawn(run);
        }
        run();
    });
    let results: Vec<GridResult> = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every point visited"))
        .collect();
    let best = select_best(&results.iter().map(|r| r.val_accuracy).collect::<Vec<_>>());
    Ok((results, best))
}

/// [`grid_search_with`] using full training runs under `out_dir/point-NNN`,
/// then writes `grid_results.csv`. Returns the results, the best index and
/// its resolved config.
pub fn grid_search(
    base: &TrainConfig,
    spec: &GridSpec,
    out_dir: &Path,
    jobs: usize,
) -> Result<(Vec<GridResult>, Option<usize>, Option<TrainConfig>)> {
    let (results, best) = grid_search_with(base, spec, jobs, |point, cfg| {
        let dir = out_dir.join(format!("point-{:03}", point.index));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&dir, e))?;
        let (outcome, _) = train(cfg, Some(&dir))?;
        let acc = outcome
            .best_val_accuracy
            .ok_or_else(|| config_err!("run produced no validation accuracy"))?;
        Ok((acc, Some(dir)))
    })?;
    write_results(&out_dir.join(RESULTS_FILE), spec, &results, best)?;
    let best_cfg = match best {
        Some(i) => Some(base.with_overrides(&results[i].point.overrides)?),
        None => None,
    };
    Ok((results, best, best_cfg))
}

pub fn write_results(path: &Path, spec: &GridSpec, results: &[GridResult], best: Option<usize>) -> Result<()> {
    let io = |e: csv::Error| Error::Serialization(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["index".to_string()];
    header.extend(spec.params.keys().cloned());
    header.extend(["val_accuracy", "best", "error"].map(String::from));
    w.write_record(&header).map_err(io)?;
    for r in results {
        let mut row = vec![r.point.index.to_string()];
        row.extend(r.point.overrides.iter().map(|(_, v)| v.to_string()));
        row.push(r.val_accuracy.map(|a| a.to_string()).unwrap_or_default());
        row.push((best == Some(r.point.index)).to_string());
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_enumeration() {
        let spec = GridSpec::from_toml_str("[grid]\nlearning_rate = [1e-3, 1e-4]\nbatch_size = [32, 128]\n").unwrap();
        let pts = spec.points();
        assert_eq!(pts.len(), 4);
        let first: Vec<String> = pts[1].overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        assert_eq!(first, vec!["batch_size=32", "learning_rate=0.0001"]);
    }

    #[test]
    fn first_max_wins() {
        assert_eq!(select_best(&[Some(0.7), Some(0.9), Some(0.9), Some(0.8)]), Some(1));
        assert_eq!(select_best(&[None, Some(0.1)]), Some(1));
        assert_eq!(select_best(&[None]), None);
    }

    #[test]
    fn failures_are_recorded() {
        let spec = GridSpec::from_toml_str("epochs = [1, 2, 3]").unwrap();
        let (results, best) = grid_search_with(&TrainConfig::default(), &spec, 2, |p, _| {
            if p.index == 1 {
                Err(config_err!("boom"))
            } else {
                Ok((p.index as f64, None))
            }
        })
        .unwrap();
        assert_eq!(results.len(), 3);
        assert!(results[1].error.is_some());
        assert_eq!(best, Some(2));
    }
}
