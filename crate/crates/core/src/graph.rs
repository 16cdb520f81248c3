//! Forward contexts, the [`Module`] trait, and [`ModelGraph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, StatsId};
use crate::tensor::{Element, Tensor};

/// Train mode enables dropout and batch statistics; Eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Gradients aligned with a [`ParamStore`]; `None` for parameters that did
/// not take part in the pass or are frozen.
#[derive(Debug)]
pub struct ParamGrads<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> ParamGrads<E> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<E>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// One forward (and optional backward) pass over a parameter store.
pub struct Ctx<'p, E: Element> {
    pub tape: Tape<E>,
    pub(crate) params: &'p mut ParamStore<E>,
    bindings: Vec<Option<Var>>,
    mode: Mode,
    pub(crate) rng: ChaCha8Rng,
}

impl<'p, E: Element> Ctx<'p, E> {
    /// `grad` controls whether the tape records backward rules.
    pub fn new(params: &'p mut ParamStore<E>, mode: Mode, seed: u64, grad: bool) -> Self {
        let n = params.len();
        Self {
            tape: if grad { Tape::new() } else { Tape::no_grad() },
            params,
            bindings: vec![None; n],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn params(&self) -> &ParamStore<E> {
        self.params
    }

    /// Places parameter `id` on the tape (once per pass).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bindings[id.0] {
            return v;
        }
        let p = self.params.param(id);
        let v = self.tape.leaf_shared(p.tensor.clone(), p.trainable);
        self.bindings[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor<E>) -> Var {
        self.tape.leaf(x, false)
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut crate::ops::RunningStats<E> {
        self.params.stats_mut(id)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.tape.value(v)
    }

    /// Backpropagates `loss` and returns gradients for every trainable parameter used.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads<E>> {
        let mut grads = self.tape.backward(loss)?;
        let grads = self
            .bindings
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        Ok(ParamGrads { grads })
    }
}

/// A network that maps one input value to one output value.
pub trait Module<E: Element> {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var>;
}

/// A network together with its named parameters and current mode.
#[derive(Clone, Debug)]
pub struct ModelGraph<M, E: Element = f32> {
    pub params: ParamStore<E>,
    pub net: M,
    mode: Mode,
}

impl<M: Module<E>, E: Element> ModelGraph<M, E> {
    pub fn new(params: ParamStore<E>, net: M) -> Self {
        Self {
            params,
            net,
            mode: Mode::Eval,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// The network and a gradient-recording context in the current mode.
    pub fn session(&mut self, seed: u64) -> (&M, Ctx<'_, E>) {
        (&self.net, Ctx::new(&mut self.params, self.mode, seed, true))
    }

    /// Inference pass (no gradients recorded) in the current mode.
    pub fn forward(&mut self, x: &Tensor<E>, seed: u64) -> Result<Tensor<E>> {
        let mut ctx = Ctx::new(&mut self.params, self.mode, seed, false);
        let input = ctx.input(x.clone());
        let out = self.net.forward(&mut ctx, input)?;
        let value = ctx.tape.value(out).clone();
        value.check_finite("model output")?;
        Ok(value)
    }

    /// Inference over the leading axis in chunks of `batch` rows.
    pub fn forward_batched(&mut self, x: &Tensor<E>, batch: usize) -> Result<Tensor<E>> {
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let n = x.shape().first().copied().unwrap_or(0);
        let mut outs = Vec::new();
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            outs.push(self.forward(&x.slice_batch(start, len)?, 0)?);
            start += len;
        }
        Tensor::concat_batch(&outs)
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.params.count(trainable_only)
    }
}
