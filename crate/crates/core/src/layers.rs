//! Parameterized building blocks shared by the backbones and the classifier.

use crate::autograd::Var;
use crate::error::Result;
use crate::graph::{Ctx, Module};
use crate::ops::{self, BatchNormSpec, Conv2dSpec};
use crate::params::{ParamBuilder, ParamId, StatsId};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// Fan-out scaled normal init: `std = sqrt(2 / (out * k * k / groups))`.
    pub fn new<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        let fan_out = cout * kernel * kernel / spec.groups;
        let std = (2.0 / fan_out as f64).sqrt();
        let w = Tensor::randn([cout, cin / spec.groups, kernel, kernel], std, pb.rng());
        let weight = pb.param("weight", w)?;
        let bias = if bias {
            Some(pb.param("bias", Tensor::zeros([cout]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }
}

impl<E: Element> Module<E> for Conv2d {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ops::conv2d(&mut ctx.tape, x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub spec: BatchNormSpec,
}

impl BatchNorm {
    pub fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, channels: usize) -> Result<Self> {
        Self::with_gamma(pb, channels, 1.0)
    }

    /// `gamma_init = 0` makes the layer output exactly `beta = 0` at init.
    pub fn with_gamma<E: Element>(pb: &mut ParamBuilder<'_, E>, channels: usize, gamma_init: f64) -> Result<Self> {
        let gamma = pb.param("weight", Tensor::full([channels], E::from_f64_lossy(gamma_init)))?;
        let beta = pb.param("bias", Tensor::zeros([channels]))?;
        let stats = pb.stats(channels)?;
        Ok(Self {
            gamma,
            beta,
            stats,
            spec: pb.bn,
        })
    }
}

impl<E: Element> Module<E> for BatchNorm {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let mode = ctx.mode();
        let stats = ctx.params.stats_mut(self.stats);
        ops::batch_norm(&mut ctx.tape, x, g, b, stats, mode, self.spec)
    }
}

/// Bias-free convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn new<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        Self::with_gamma(pb, cin, cout, kernel, spec, 1.0)
    }

    pub fn with_gamma<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        gamma_init: f64,
    ) -> Result<Self> {
        let conv = Conv2d::new(&mut pb.sub("conv"), cin, cout, kernel, spec, false)?;
        let bn = BatchNorm::with_gamma(&mut pb.sub("bn"), cout, gamma_init)?;
        Ok(Self { conv, bn })
    }

    /// 1x1 convolution + BN.
    pub fn pointwise<E: Element>(pb: &mut ParamBuilder<'_, E>, cin: usize, cout: usize, gamma_init: f64) -> Result<Self> {
        Self::with_gamma(pb, cin, cout, 1, Conv2dSpec::default(), gamma_init)
    }

    /// Depthwise `k x k` convolution + BN with "same" padding for odd `k`.
    pub fn depthwise<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        channels: usize,
        kernel: usize,
        stride: usize,
        gamma_init: f64,
    ) -> Result<Self> {
        let spec = Conv2dSpec::new(stride, kernel / 2, channels);
        Self::with_gamma(pb, channels, channels, kernel, spec, gamma_init)
    }
}

impl<E: Element> Module<E> for ConvBn {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `+-1/sqrt(in_dim)`, stored as `in_dim x out_dim`.
    pub fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::uniform([in_dim, out_dim], bound, pb.rng());
        let b = Tensor::uniform([out_dim], bound, pb.rng());
        Ok(Self {
            weight: pb.param("weight", w)?,
            bias: Some(pb.param("bias", b)?),
            in_dim,
            out_dim,
        })
    }
}

impl<E: Element> Module<E> for Linear {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ops::linear(&mut ctx.tape, x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
}

impl<E: Element> Module<E> for Dropout {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let mode = ctx.mode();
        ops::dropout(&mut ctx.tape, x, self.p, mode, &mut ctx.rng)
    }
}

/// Channel gating: `x * sigmoid(W2 relu(W1 avgpool(x)))`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, channels: usize, reduced: usize) -> Result<Self> {
        Ok(Self {
            reduce: Linear::new(&mut pb.sub("reduce"), channels, reduced)?,
            expand: Linear::new(&mut pb.sub("expand"), reduced, channels)?,
        })
    }
}

impl<E: Element> Module<E> for SqueezeExcite {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let pooled = ops::global_avg_pool(&mut ctx.tape, x)?;
        let h = self.reduce.forward(ctx, pooled)?;
        let h = ops::relu(&mut ctx.tape, h);
        let h = self.expand.forward(ctx, h)?;
        let gate = ops::sigmoid(&mut ctx.tape, h);
        ops::scale_channels(&mut ctx.tape, x, gate)
    }
}
