//! ShuffleNet V2 (1.0x) feature extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Ctx, ModelGraph, Module};
use crate::layers::ConvBn;
use crate::ops::{self, BatchNormSpec, Conv2dSpec};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Element;

/// Parameter-name prefix of the ShuffleNet backbone.
pub const PREFIX: &str = "shufflenet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleNetConfig {
    /// Units per stage (stage2, stage3, stage4).
    pub stage_repeats: [usize; 3],
    /// Stem, stage2, stage3, stage4 and final 1x1 conv widths.
    pub stage_out_channels: [usize; 5],
    pub input_size: usize,
}

impl Default for ShuffleNetConfig {
    fn default() -> Self {
        Self {
            stage_repeats: [4, 8, 4],
            stage_out_channels: [24, 116, 232, 464, 1024],
            input_size: 224,
        }
    }
}

impl ShuffleNetConfig {
    pub fn feature_dim(&self) -> usize {
        self.stage_out_channels[4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_repeats.iter().any(|&r| r == 0) {
            return Err(config_err!("every ShuffleNet stage needs at least one unit"));
        }
        if self.stage_out_channels.iter().any(|&c| c == 0) {
            return Err(config_err!("ShuffleNet channel counts must be positive"));
        }
        // channel split halves the stage width and the shuffle uses two groups
        if let Some(c) = self.stage_out_channels[1..4].iter().find(|&&c| c % 2 != 0) {
            return Err(config_err!("ShuffleNet stage width {c} must be even"));
        }
        if self.input_size < 32 {
            return Err(config_err!("ShuffleNet input size {} is below the 32x downsampling factor", self.input_size));
        }
        Ok(())
    }
}

/// 1x1 conv-BN-ReLU, depthwise 3x3 conv-BN, 1x1 conv-BN-ReLU.
#[derive(Clone, Debug)]
pub struct Branch {
    pw1: ConvBn,
    dw: ConvBn,
    pw2: ConvBn,
}

impl Branch {
    fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, cin: usize, width: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            pw1: ConvBn::pointwise(&mut pb.sub("pw1"), cin, width, 1.0)?,
            dw: ConvBn::depthwise(&mut pb.sub("dw"), width, 3, stride, 1.0)?,
            pw2: ConvBn::pointwise(&mut pb.sub("pw2"), width, width, 1.0)?,
        })
    }
}

impl<E: Element> Module<E> for Branch {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let y = self.pw1.forward(ctx, x)?;
        let y = ops::relu(&mut ctx.tape, y);
        let y = self.dw.forward(ctx, y)?;
        let y = self.pw2.forward(ctx, y)?;
        Ok(ops::relu(&mut ctx.tape, y))
    }
}

/// A ShuffleNet V2 unit.
#[derive(Clone, Debug)]
pub enum ShuffleUnit {
    /// Channel split; half passes through, half goes through the branch.
    /// Shape preserving.
    Basic { branch: Branch },
    /// Both halves see the full input at stride 2; output width doubles
    /// relative to each branch and spatial extent halves.
    Downsample {
        shortcut_dw: ConvBn,
        shortcut_pw: ConvBn,
        branch: Branch,
    },
}

impl ShuffleUnit {
    fn basic<E: Element>(pb: &mut ParamBuilder<'_, E>, channels: usize) -> Result<Self> {
        let half = channels / 2;
        Ok(Self::Basic {
            branch: Branch::new(&mut pb.sub("branch"), half, half, 1)?,
        })
    }

    fn downsample<E: Element>(pb: &mut ParamBuilder<'_, E>, cin: usize, cout: usize) -> Result<Self> {
        let half = cout / 2;
        Ok(Self::Downsample {
            shortcut_dw: ConvBn::depthwise(&mut pb.sub("shortcut_dw"), cin, 3, 2, 1.0)?,
            shortcut_pw: ConvBn::pointwise(&mut pb.sub("shortcut_pw"), cin, half, 1.0)?,
            branch: Branch::new(&mut pb.sub("branch"), cin, half, 2)?,
        })
    }
}

impl<E: Element> Module<E> for ShuffleUnit {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let joined = match self {
            ShuffleUnit::Basic { branch } => {
                let c = ctx.tape.shape(x)[1];
                let kept = ops::narrow(&mut ctx.tape, x, 0, c / 2)?;
                let active = ops::narrow(&mut ctx.tape, x, c / 2, c - c / 2)?;
                let y = branch.forward(ctx, active)?;
                ops::concat(&mut ctx.tape, &[kept, y])?
            }
            ShuffleUnit::Downsample {
                shortcut_dw,
                shortcut_pw,
                branch,
            } => {
                let s = shortcut_dw.forward(ctx, x)?;
                let s = shortcut_pw.forward(ctx, s)?;
                let s = ops::relu(&mut ctx.tape, s);
                let y = branch.forward(ctx, x)?;
                ops::concat(&mut ctx.tape, &[s, y])?
            }
        };
        ops::channel_shuffle(&mut ctx.tape, joined, 2)
    }
}

/// Stem, three stages of shuffle units, final 1x1 conv and global pooling.
/// Produces `(N, feature_dim)` features with no classification head.
#[derive(Clone, Debug)]
pub struct ShuffleNetV2 {
    pub config: ShuffleNetConfig,
    stem: ConvBn,
    stages: Vec<Vec<ShuffleUnit>>,
    head_conv: ConvBn,
}

impl ShuffleNetV2 {
    pub fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, config: &ShuffleNetConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_out_channels;
        let stem = ConvBn::new(&mut pb.sub("stem"), 3, ch[0], 3, Conv2dSpec::new(2, 1, 1))?;
        let mut stages = Vec::with_capacity(3);
        let mut cin = ch[0];
        for (s, &repeats) in config.stage_repeats.iter().enumerate() {
            let cout = ch[s + 1];
            let mut stage_pb = pb.sub(format!("stage{}", s + 2));
            let mut units = Vec::with_capacity(repeats);
            units.push(ShuffleUnit::downsample(&mut stage_pb.sub(0), cin, cout)?);
            for u in 1..repeats {
                units.push(ShuffleUnit::basic(&mut stage_pb.sub(u), cout)?);
            }
            stages.push(units);
            cin = cout;
        }
        let head_conv = ConvBn::pointwise(&mut pb.sub("conv5"), cin, ch[4], 1.0)?;
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            head_conv,
        })
    }

    /// Features plus the output of each of the three stages.
    pub fn forward_with_stages<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<(Var, Vec<Var>)> {
        let s = self.config.input_size;
        match ctx.tape.shape(x) {
            [_, 3, h, w] if *h == s && *w == s => {}
            other => {
                return Err(dim_err!(
                    "ShuffleNet expects (N, 3, {s}, {s}) input, got {:?}",
                    other
                ))
            }
        }
        let y = self.stem.forward(ctx, x)?;
        let y = ops::relu(&mut ctx.tape, y);
        let mut y = ops::max_pool2d(&mut ctx.tape, y, 3, 2, 1)?;
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for unit in stage {
                y = unit.forward(ctx, y)?;
            }
            stage_outputs.push(y);
        }
        let y = self.head_conv.forward(ctx, y)?;
        let y = ops::relu(&mut ctx.tape, y);
        Ok((ops::global_avg_pool(&mut ctx.tape, y)?, stage_outputs))
    }

    pub fn unit(&self, stage: usize, index: usize) -> Option<&ShuffleUnit> {
        self.stages.get(stage).and_then(|s| s.get(index))
    }
}

impl<E: Element> Module<E> for ShuffleNetV2 {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        self.forward_with_stages(ctx, x).map(|(f, _)| f)
    }
}

/// Standalone ShuffleNet feature extractor with parameters under `shufflenet.`.
pub fn build_shufflenet<E: Element>(config: &ShuffleNetConfig, seed: u64) -> Result<ModelGraph<ShuffleNetV2, E>> {
    build_shufflenet_with(config, seed, BatchNormSpec::default())
}

pub fn build_shufflenet_with<E: Element>(
    config: &ShuffleNetConfig,
    seed: u64,
    bn: BatchNormSpec,
) -> Result<ModelGraph<ShuffleNetV2, E>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, bn);
        ShuffleNetV2::new(&mut pb.sub(PREFIX), config)?
    };
    Ok(ModelGraph::new(store, net))
}
