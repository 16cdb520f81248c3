use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::config::TrainConfig;
use super::trainer::EpochRecord;
use crate::error::{CheckpointError, Error, Result};
use crate::fusion::{build_model, FusedModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"DFERCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// magic, version (u32), metadata length (u64), payload length (u64)
const HEADER_LEN: usize = 8 + 4 + 8 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset inside the payload.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    dtype: String,
    model: ModelConfig,
    train_config: Option<TrainConfig>,
    epoch: usize,
    seed: u64,
    history: Vec<EpochRecord>,
    best_val_accuracy: Option<f64>,
    val_accuracy: Option<f64>,
    tensors: Vec<TensorRecord>,
    adam_step: Option<u64>,
    adam_m: Vec<TensorRecord>,
    adam_v: Vec<TensorRecord>,
    payload_sha256: String,
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot<E: Element> {
    pub t: u64,
    pub m: Vec<(String, Tensor<E>)>,
    pub v: Vec<(String, Tensor<E>)>,
}

/// Model weights, running statistics, optimizer state and training progress.
///
/// All randomness in training is derived from `(seed, epoch, ...)`, so `seed`
/// and `epoch` are the complete random state needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<E: Element = f32> {
    pub model: ModelConfig,
    pub train_config: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_val_accuracy: Option<f64>,
    /// Validation accuracy of exactly these weights, if measured.
    pub val_accuracy: Option<f64>,
    pub tensors: Vec<(String, Tensor<E>)>,
    pub optimizer: Option<OptimizerSnapshot<E>>,
}

/// Outcome of copying checkpoint tensors into a model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// In the model, absent from the checkpoint.
    pub missing: Vec<String>,
    /// In the checkpoint, absent from the model.
    pub unexpected: Vec<String>,
}

impl<E: Element> Checkpoint<E> {
    /// Snapshot of every parameter and running statistic in `store`.
    pub fn capture(store: &ParamStore<E>, model: &ModelConfig) -> Self {
        Self {
            model: model.clone(),
            train_config: None,
            epoch: 0,
            seed: 0,
            history: Vec::new(),
            best_val_accuracy: None,
            val_accuracy: None,
            tensors: store.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            optimizer: None,
        }
    }

    pub fn with_optimizer(mut self, store: &ParamStore<E>, state: &AdamState<E>) -> Self {
        let pick = |moments: &[Option<Tensor<E>>]| -> Vec<(String, Tensor<E>)> {
            store
                .params()
                .iter()
                .zip(moments)
                .filter_map(|(p, m)| m.as_ref().map(|m| (p.name.clone(), m.clone())))
                .collect()
        };
        self.optimizer = Some(OptimizerSnapshot {
            t: state.t,
            m: pick(&state.m),
            v: pick(&state.v),
        });
        self
    }

    /// Copies tensors into `store` by name. Without `partial`, the name sets
    /// must match exactly; with it, the intersection is loaded and the rest
    /// reported. A shape disagreement is always an error.
    pub fn apply(&self, store: &mut ParamStore<E>, partial: bool) -> Result<LoadReport> {
        let model_names: Vec<String> = store.named_tensors().into_iter().map(|(n, _)| n).collect();
        let model_set: BTreeSet<&str> = model_names.iter().map(String::as_str).collect();
        let ckpt_set: BTreeSet<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
        let missing: Vec<String> = model_set.difference(&ckpt_set).map(|s| s.to_string()).collect();
        let unexpected: Vec<String> = ckpt_set.difference(&model_set).map(|s| s.to_string()).collect();
        if !partial && (!missing.is_empty() || !unexpected.is_empty()) {
            return Err(CheckpointError::NameMismatch { missing, unexpected }.into());
        }
        for (name, t) in &self.tensors {
            if let Some(slot) = store.named_slot_mut(name) {
                if slot.shape() != t.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        found: t.shape().to_vec(),
                        expected: slot.shape().to_vec(),
                    }
                    .into());
                }
            }
        }
        let mut loaded = Vec::new();
        for (name, t) in &self.tensors {
            if let Some(slot) = store.named_slot_mut(name) {
                slot.data_mut().copy_from_slice(t.data());
                loaded.push(name.clone());
            }
        }
        Ok(LoadReport {
            loaded,
            missing,
            unexpected,
        })
    }

    /// Optimizer state aligned with `store`, or a fresh state if none was saved.
    pub fn optimizer_state(&self, store: &ParamStore<E>) -> Result<AdamState<E>> {
        let mut state = AdamState::new(store.len());
        let Some(opt) = &self.optimizer else {
            return Ok(state);
        };
        let index: HashMap<&str, usize> = store.params().iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
        state.t = opt.t;
        for (moments, slots) in [(&opt.m, &mut state.m), (&opt.v, &mut state.v)] {
            for (name, t) in moments {
                let i = *index.get(name.as_str()).ok_or_else(|| CheckpointError::NameMismatch {
                    missing: vec![],
                    unexpected: vec![format!("optimizer state for {name}")],
                })?;
                if store.params()[i].tensor.shape() != t.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        found: t.shape().to_vec(),
                        expected: store.params()[i].tensor.shape().to_vec(),
                    }
                    .into());
                }
                slots[i] = Some(t.clone());
            }
        }
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut write = |list: &[(String, Tensor<E>)]| -> Vec<TensorRecord> {
            list.iter()
                .map(|(name, t)| {
                    let offset = payload.len() as u64;
                    t.data().iter().for_each(|&v| v.write_le(&mut payload));
                    TensorRecord {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        offset,
                        nbytes: payload.len() as u64 - offset,
                    }
                })
                .collect()
        };
        let tensors = write(&self.tensors);
        let (adam_step, adam_m, adam_v) = match &self.optimizer {
            Some(o) => (Some(o.t), write(&o.m), write(&o.v)),
            None => (None, Vec::new(), Vec::new()),
        };
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            dtype: E::DTYPE.to_string(),
            model: self.model.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            history: self.history.clone(),
            best_val_accuracy: self.best_val_accuracy,
            val_accuracy: self.val_accuracy,
            tensors,
            adam_step,
            adam_m,
            adam_v,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a container, checking magic, version, length, checksum and
    /// metadata in that order.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            }
            .into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let payload_len = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
        let expected = (HEADER_LEN as u64)
            .checked_add(meta_len)
            .and_then(|v| v.checked_add(payload_len))
            .and_then(|v| v.checked_add(DIGEST_LEN as u64))
            .ok_or_else(|| CheckpointError::Malformed("section lengths overflow".into()))?;
        if (bytes.len() as u64) < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: bytes.len() as u64,
            }
            .into());
        }
        if bytes.len() as u64 != expected {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() as u64 - expected)).into());
        }
        let body = &bytes[..bytes.len() - DIGEST_LEN];
        if Sha256::digest(body).as_slice() != &bytes[body.len()..] {
            return Err(CheckpointError::ChecksumMismatch.into());
        }
        let meta_end = HEADER_LEN + meta_len as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let payload = &body[meta_end..];
        if meta.dtype != E::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                found: meta.dtype,
                expected: E::DTYPE.into(),
            }
            .into());
        }
        if hex::encode(Sha256::digest(payload)) != meta.payload_sha256 {
            return Err(CheckpointError::ChecksumMismatch.into());
        }
        let read = |records: &[TensorRecord]| -> Result<Vec<(String, Tensor<E>)>> {
            records
                .iter()
                .map(|r| {
                    let numel: usize = r.shape.iter().product();
                    let (start, end) = (r.offset as usize, (r.offset + r.nbytes) as usize);
                    if numel * E::BYTES != r.nbytes as usize || end > payload.len() || start > end {
                        return Err(Error::from(CheckpointError::Malformed(format!("bad extent for {}", r.name))));
                    }
                    let data = payload[start..end].chunks_exact(E::BYTES).map(E::read_le).collect();
                    Ok((r.name.clone(), Tensor::new(r.shape.clone(), data)?))
                })
                .collect()
        };
        let optimizer = match meta.adam_step {
            Some(t) => Some(OptimizerSnapshot {
                t,
                m: read(&meta.adam_m)?,
                v: read(&meta.adam_v)?,
            }),
            None => None,
        };
        Ok(Self {
            tensors: read(&meta.tensors)?,
            optimizer,
            model: meta.model,
            train_config: meta.train_config,
            epoch: meta.epoch,
            seed: meta.seed,
            history: meta.history,
            best_val_accuracy: meta.best_val_accuracy,
            val_accuracy: meta.val_accuracy,
        })
    }
}

/// Writes through a temporary sibling file and renames, so readers never see
/// a partially written checkpoint.
pub fn save_checkpoint<E: Element>(path: impl AsRef<Path>, ckpt: &Checkpoint<E>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, ckpt.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<E: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<E>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Rebuilds the model described by a checkpoint and loads its tensors.
pub fn restore_model<E: Element>(ckpt: &Checkpoint<E>) -> Result<FusedModel<E>> {
    let mut model = build_model::<E>(&ckpt.model, 0)?;
    ckpt.apply(&mut model.params, false)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ParamStore<f64>, Checkpoint<f64>) {
        let mut store = ParamStore::<f64>::new();
        store.add_param("a.weight", Tensor::from_fn([2, 3], |i| i as f64 * 0.5), true).unwrap();
        store.add_stats("a.bn", 2).unwrap();
        let ck = Checkpoint::capture(&store, &ModelConfig::default());
        (store, ck)
    }

    #[test]
    fn bytes_round_trip() {
        let (store, ck) = small();
        let mut state = AdamState::new(store.len());
        state.t = 3;
        state.m[0] = Some(Tensor::full([2, 3], 0.25));
        state.v[0] = Some(Tensor::full([2, 3], 0.5));
        let ck = ck.with_optimizer(&store, &state);
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.optimizer_state(&store).unwrap(), state);
    }

    #[test]
    fn metadata_floats_keep_every_bit() {
        let (_, mut ck) = small();
        for k in 1..24 {
            let acc = k as f64 / 24.0;
            ck.val_accuracy = Some(acc);
            ck.best_val_accuracy = Some(1.0 - acc);
            let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back.val_accuracy.map(f64::to_bits), Some(acc.to_bits()));
            assert_eq!(back.best_val_accuracy.map(f64::to_bits), Some((1.0 - acc).to_bits()));
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        let (_, ck) = small();
        let bytes = ck.to_bytes().unwrap();
        let err = |b: &[u8]| match Checkpoint::<f64>::from_bytes(b) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected a checkpoint error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(err(&bad), CheckpointError::BadMagic));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(err(&bad), CheckpointError::VersionMismatch { found: 9, .. }));
        assert!(matches!(err(&bytes[..bytes.len() - 5]), CheckpointError::Truncated { .. }));
        let mut bad = bytes.clone();
        let last = bad.len() - 40;
        bad[last] ^= 1;
        assert!(matches!(err(&bad), CheckpointError::ChecksumMismatch));
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::DtypeMismatch { .. }))
        ));
    }

    #[test]
    fn strict_apply_rejects_other_names() {
        let (_, ck) = small();
        let mut other = ParamStore::<f64>::new();
        other.add_param("b.weight", Tensor::zeros([2, 3]), true).unwrap();
        assert!(matches!(
            ck.apply(&mut other, false),
            Err(Error::Checkpoint(CheckpointError::NameMismatch { .. }))
        ));
        let report = ck.apply(&mut other, true).unwrap();
        assert!(report.loaded.is_empty());
        assert_eq!(report.missing, vec!["b.weight".to_string()]);
        assert_eq!(report.unexpected.len(), 3);
    }
}
