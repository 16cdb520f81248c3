//! Named parameter and running-statistics storage shared by every model graph.

use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::ops::{BatchNormSpec, RunningStats};
use crate::tensor::{Element, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Index of a batch-norm statistics pair inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// A named parameter tensor. Frozen parameters (`trainable == false`) never
/// receive gradients.
#[derive(Clone, Debug)]
pub struct LayerParams<E: Element = f32> {
    pub name: String,
    pub tensor: Arc<Tensor<E>>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct NamedStats<E: Element> {
    pub name: String,
    pub stats: RunningStats<E>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element = f32> {
    params: Vec<LayerParams<E>>,
    stats: Vec<NamedStats<E>>,
    names: HashMap<String, usize>,
}

/// Suffixes used when running statistics are flattened to named tensors.
pub const RUNNING_MEAN: &str = "running_mean";
pub const RUNNING_VAR: &str = "running_var";

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            stats: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(config_err!("duplicate parameter name {name}"));
        }
        self.names.insert(name.to_string(), self.names.len());
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<E>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name)?;
        self.params.push(LayerParams {
            name,
            tensor: Arc::new(tensor),
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> Result<StatsId> {
        let name = name.into();
        self.claim(&format!("{name}.{RUNNING_MEAN}"))?;
        self.claim(&format!("{name}.{RUNNING_VAR}"))?;
        self.stats.push(NamedStats {
            name,
            stats: RunningStats::new(channels),
        });
        Ok(StatsId(self.stats.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[LayerParams<E>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &LayerParams<E> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].tensor
    }

    /// Mutable access; copies the tensor only if a tape still shares it.
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        Arc::make_mut(&mut self.params[id.0].tensor)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<E> {
        &self.stats[id.0].stats
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats<E> {
        &mut self.stats[id.0].stats
    }

    /// Total element count over (trainable) parameters. Running statistics are
    /// buffers, not parameters, and are never counted.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Element count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix) && (p.trainable || !trainable_only))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Freezes or unfreezes every parameter under `prefix`; returns how many changed scope.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    /// Every parameter and running-statistics tensor under its full name,
    /// in registration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> =
            self.params.iter().map(|p| (p.name.clone(), &*p.tensor)).collect();
        for s in &self.stats {
            out.push((format!("{}.{RUNNING_MEAN}", s.name), &s.stats.mean));
            out.push((format!("{}.{RUNNING_VAR}", s.name), &s.stats.var));
        }
        out
    }

    /// Mutable slot for a named tensor (parameter or running statistic).
    pub(crate) fn named_slot_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
            return Some(Arc::make_mut(&mut p.tensor));
        }
        for s in &mut self.stats {
            if let Some(rest) = name.strip_prefix(s.name.as_str()).and_then(|r| r.strip_prefix('.')) {
                match rest {
                    RUNNING_MEAN => return Some(&mut s.stats.mean),
                    RUNNING_VAR => return Some(&mut s.stats.var),
                    _ => {}
                }
            }
        }
        None
    }
}

/// Registers parameters under a dotted name prefix and initializes them.
pub struct ParamBuilder<'a, E: Element> {
    store: &'a mut ParamStore<E>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    pub(crate) bn: BatchNormSpec,
}

impl<'a, E: Element> ParamBuilder<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut ChaCha8Rng, bn: BatchNormSpec) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            bn,
        }
    }

    /// Builder scoped one level deeper (`prefix.name`).
    pub fn sub(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_, E> {
        ParamBuilder {
            prefix: self.path(&name.to_string()),
            store: self.store,
            rng: self.rng,
            bn: self.bn,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, tensor: Tensor<E>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add_param(path, tensor, true)
    }

    pub fn stats(&mut self, channels: usize) -> Result<StatsId> {
        let path = self.prefix.clone();
        self.store.add_stats(path, channels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.add_param("a.weight", Tensor::zeros([2]), true).unwrap();
        assert!(store.add_param("a.weight", Tensor::zeros([2]), true).is_err());
        store.add_stats("bn", 3).unwrap();
        assert!(store.add_param("bn.running_mean", Tensor::zeros([3]), true).is_err());
    }

    #[test]
    fn counts_respect_trainable_flag() {
        let mut store = ParamStore::<f32>::new();
        store.add_param("x.w", Tensor::zeros([4, 3]), true).unwrap();
        store.add_param("x.b", Tensor::zeros([3]), true).unwrap();
        store.add_param("y.w", Tensor::zeros([5]), true).unwrap();
        store.add_stats("y.bn", 5).unwrap();
        assert_eq!(store.count(false), 20);
        store.set_trainable_prefix("y.", false);
        assert_eq!(store.count(true), 15);
        assert_eq!(store.count_prefix("x.", true), 15);
    }

    #[test]
    fn builder_nests_prefixes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, BatchNormSpec::default());
        let mut stage = pb.sub("stage2");
        let mut unit = stage.sub(0);
        unit.param("weight", Tensor::zeros([1])).unwrap();
        assert!(store.find("stage2.0.weight").is_some());
    }
}
