use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadReport};
use super::config::{Protocol, TrainConfig};
use crate::data::{
    carve_validation, load_dataset, make_split, make_subject_split, AugmentDraw, DatasetIndex, Loader, SplitPlan,
};
use crate::error::{config_err, Error, Result};
use crate::eval::predict;
use crate::fusion::{build_model, FusedModel};
use crate::graph::{Mode, Module};
use crate::ops::cross_entropy;
use crate::runtime::derive_seed;
use crate::tensor::{Element, Tensor};
use crate::{efficientvit, shufflenet};

const DROPOUT_STREAM: u64 = 0x4452_4f50;

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` for epochs skipped by `eval_every`.
    pub val_accuracy: Option<f64>,
}

/// A resolved dataset with its train / validation / test indices.
pub struct RunData {
    pub index: DatasetIndex,
    pub loader: Loader,
    pub plan: Option<SplitPlan>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Loads the dataset named by the config and resolves the split.
///
/// k-fold: train on the other folds, validate and test on fold `round`.
/// Hold-out: test on the held-out part, validate on a stratified carve-out of
/// the training part. `Protocol::None`: everything is train, validation and test.
pub fn prepare_run(cfg: &TrainConfig) -> Result<RunData> {
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| config_err!("dataset_root is not set"))?;
    let index = load_dataset(root, &cfg.loading)?;
    let round = match cfg.split.protocol {
        Protocol::KFold => cfg.split.round,
        _ => 0,
    };
    prepare_run_with(cfg, index, round)
}

/// [`prepare_run`] on an already indexed dataset, for fold `round`.
pub fn prepare_run_with(cfg: &TrainConfig, index: DatasetIndex, round: usize) -> Result<RunData> {
    if index.num_classes() != cfg.num_classes {
        return Err(config_err!(
            "dataset {} has {} classes but num_classes = {}",
            index.root.display(),
            index.num_classes(),
            cfg.num_classes
        ));
    }
    let labels = index.labels();
    let plan = match cfg.split.kind() {
        Some(kind) if cfg.split.subject_disjoint => Some(make_subject_split(&labels, &index.subjects(), kind, cfg.seed)?),
        Some(kind) => Some(make_split(&labels, kind, cfg.seed)?),
        None => None,
    };
    let (train, val, test) = match (&plan, cfg.split.protocol) {
        (Some(p), Protocol::KFold) => {
            let (train, test) = p.train_test(round)?;
            (train, test.clone(), test)
        }
        (Some(p), _) => {
            let (train, test) = p.train_test(0)?;
            let (train, val) = carve_validation(&train, &labels, cfg.split.validation_fraction, cfg.seed)?;
            (train, val, test)
        }
        (None, _) => {
            let all: Vec<usize> = (0..index.len()).collect();
            (all.clone(), all.clone(), all)
        }
    };
    if train.is_empty() {
        return Err(config_err!("the training split is empty"));
    }
    let loader = Loader::from_index(&index, cfg.model.input_size(), cfg.normalization.clone(), cfg.cache_images)?;
    Ok(RunData {
        index,
        loader,
        plan,
        train,
        val,
        test,
    })
}

/// Model, optimizer and progress at the start of training.
pub struct TrainState<E: Element> {
    pub model: FusedModel<E>,
    pub optimizer: AdamState<E>,
    /// Epochs already completed.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_val_accuracy: Option<f64>,
    pub init_report: Option<LoadReport>,
}

/// Builds the model from `cfg.seed`, applies `init_from` / `resume_from` and
/// the backbone freeze.
pub fn initial_state<E: Element>(cfg: &TrainConfig) -> Result<TrainState<E>> {
    cfg.validate()?;
    let mut model = build_model::<E>(&cfg.model_config(), cfg.seed)?;
    let mut init_report = None;
    if let Some(path) = &cfg.init_from {
        let ckpt: Checkpoint<E> = load_checkpoint(path)?;
        let report = ckpt.apply(&mut model.params, cfg.partial_init)?;
        if !report.missing.is_empty() || !report.unexpected.is_empty() {
            log::info!(
                "initialized {} tensors from {}; {} left at random init, {} ignored",
                report.loaded.len(),
                path.display(),
                report.missing.len(),
                report.unexpected.len()
            );
        }
        init_report = Some(report);
    }
    if cfg.freeze_backbones {
        freeze_backbones(&mut model);
    }
    let mut state = TrainState {
        optimizer: AdamState::new(model.params.len()),
        model,
        epoch: 0,
        history: Vec::new(),
        best_val_accuracy: None,
        init_report,
    };
    if let Some(path) = &cfg.resume_from {
        let ckpt: Checkpoint<E> = load_checkpoint(path)?;
        ckpt.apply(&mut state.model.params, false)?;
        state.optimizer = ckpt.optimizer_state(&state.model.params)?;
        state.epoch = ckpt.epoch;
        state.history = ckpt.history;
        state.best_val_accuracy = ckpt.best_val_accuracy;
    }
    Ok(state)
}

/// Marks every backbone parameter as frozen; returns how many tensors changed.
pub fn freeze_backbones<E: Element>(model: &mut FusedModel<E>) -> usize {
    model.params.set_trainable_prefix(&format!("{}.", shufflenet::PREFIX), false)
        + model.params.set_trainable_prefix(&format!("{}.", efficientvit::PREFIX), false)
}

/// One optimization step on a batch; returns the loss before the update.
pub fn train_step<E: Element>(
    model: &mut FusedModel<E>,
    optimizer: &mut AdamState<E>,
    images: &Tensor<E>,
    labels: &[usize],
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<f64> {
    model.set_mode(Mode::Train);
    let (loss, grads) = {
        let (net, mut ctx) = model.session(dropout_seed);
        let x = ctx.input(images.clone());
        let logits = net.forward(&mut ctx, x)?;
        let loss = cross_entropy(&mut ctx.tape, logits, labels)?;
        let value = ctx.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {value}")));
        }
        (value, ctx.backward(loss)?)
    };
    adam_step(&mut model.params, &grads, optimizer, cfg.learning_rate, &cfg.optimizer)?;
    Ok(loss)
}

/// Accuracy of `model` on `indices` (Eval mode, no augmentation).
pub fn accuracy<E: Element>(model: &mut FusedModel<E>, loader: &Loader, indices: &[usize], batch: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(config_err!("cannot measure accuracy on an empty set"));
    }
    let preds = predict(model, loader, indices, batch)?;
    let correct = preds.iter().zip(indices).filter(|(p, &i)| **p == loader.labels()[i]).count();
    Ok(correct as f64 / indices.len() as f64)
}

pub struct TrainOutcome<E: Element> {
    pub model: FusedModel<E>,
    pub history: Vec<EpochRecord>,
    pub best_val_accuracy: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

struct HistoryWriter {
    file: Option<(PathBuf, fs::File)>,
}

impl HistoryWriter {
    fn open(dir: Option<&Path>, existing: &[EpochRecord]) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { file: None });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(HISTORY_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            file: Some((path, file)),
        };
        w.line("epoch,train_loss,val_accuracy")?;
        for r in existing {
            w.record(r)?;
        }
        Ok(w)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{text}").and_then(|_| f.flush()).map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        let acc = r.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
        self.line(&format!("{},{},{}", r.epoch, r.train_loss, acc))
    }
}

/// Trains for the remaining epochs of `state`, validating on `val`.
///
/// With `out_dir`, writes `history.csv` (flushed every epoch, so a diverged
/// run keeps its completed epochs), `best.ckpt` whenever validation accuracy
/// strictly improves, and `last.ckpt` at the end.
pub fn fit<E: Element>(
    mut state: TrainState<E>,
    loader: &Loader,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(config_err!("the training split is empty"));
    }
    let mut history_out = HistoryWriter::open(out_dir, &state.history)?;
    let snapshot = |state: &TrainState<E>, val_accuracy: Option<f64>| -> Checkpoint<E> {
        let mut ck = Checkpoint::capture(&state.model.params, &state.model.net.config).with_optimizer(&state.model.params, &state.optimizer);
        ck.train_config = Some(cfg.clone());
        ck.epoch = state.epoch;
        ck.seed = cfg.seed;
        ck.history = state.history.clone();
        ck.best_val_accuracy = state.best_val_accuracy;
        ck.val_accuracy = val_accuracy;
        ck
    };
    let mut best_checkpoint = None;
    let started = Instant::now();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let batches = crate::data::epoch_batches(train, cfg.batch_size, cfg.seed, epoch as u64, true);
        let draw = AugmentDraw {
            policy: &cfg.augment,
            seed: cfg.seed,
            epoch: epoch as u64,
        };
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch = loader.batch(idx, Some(draw))?;
            let images = batch.images.cast::<E>();
            let seed = derive_seed(cfg.seed, &[DROPOUT_STREAM, epoch as u64, b as u64]);
            let loss = train_step(&mut state.model, &mut state.optimizer, &images, &batch.labels, cfg, seed)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {}, batch {b}: {m}", epoch + 1)),
                    other => other,
                })?;
            loss_sum += loss * idx.len() as f64;
        }
        state.epoch += 1;
        let evaluate = state.epoch % cfg.eval_every == 0 || state.epoch == cfg.epochs;
        let val_accuracy = if evaluate && !val.is_empty() {
            Some(accuracy(&mut state.model, loader, val, cfg.eval_batch_size)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy,
        };
        log::info!(
            "epoch {}/{}: loss {:.5}{} ({:.1}s)",
            record.epoch,
            cfg.epochs,
            record.train_loss,
            val_accuracy.map(|a| format!(", val acc {a:.4}")).unwrap_or_default(),
            started.elapsed().as_secs_f64()
        );
        history_out.record(&record)?;
        state.history.push(record);
        if let Some(acc) = val_accuracy {
            if state.best_val_accuracy.map_or(true, |b| acc > b) {
                state.best_val_accuracy = Some(acc);
                if let Some(dir) = out_dir {
                    let path = dir.join(BEST_CHECKPOINT);
                    save_checkpoint(&path, &snapshot(&state, Some(acc)))?;
                    best_checkpoint = Some(path);
                }
            }
        }
    }
    let mut last_checkpoint = None;
    if let Some(dir) = out_dir {
        let last_val = state.history.last().and_then(|r| r.val_accuracy);
        let path = dir.join(LAST_CHECKPOINT);
        save_checkpoint(&path, &snapshot(&state, last_val))?;
        last_checkpoint = Some(path);
        if best_checkpoint.is_none() && dir.join(BEST_CHECKPOINT).is_file() {
            best_checkpoint = Some(dir.join(BEST_CHECKPOINT));
        }
    }
    state.model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        model: state.model,
        history: state.history,
        best_val_accuracy: state.best_val_accuracy,
        best_checkpoint,
        last_checkpoint,
    })
}

/// Loads the dataset, resolves the split and trains in `f32`.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<(TrainOutcome<f32>, RunData)> {
    cfg.validate()?;
    let data = prepare_run(cfg)?;
    if let (Some(dir), Some(plan)) = (out_dir, &data.plan) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths: Vec<PathBuf> = data.index.entries.iter().map(|e| e.path.clone()).collect();
        let path = dir.join(SPLIT_FILE);
        fs::write(&path, plan.to_json(&paths)?).map_err(|e| Error::io(&path, e))?;
    }
    let state = initial_state::<f32>(cfg)?;
    let outcome = fit(state, &data.loader, &data.train, &data.val, cfg, out_dir)?;
    Ok((outcome, data))
}
