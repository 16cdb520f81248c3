//! EfficientViT feature extractor: sandwich blocks around cascaded group attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Ctx, ModelGraph, Module};
use crate::layers::{BatchNorm, ConvBn, SqueezeExcite};
use crate::ops::{self, BatchNormSpec, Conv2dSpec};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Parameter-name prefix of the EfficientViT backbone.
pub const PREFIX: &str = "efficientvit";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EfficientVitConfig {
    pub embed_dims: [usize; 3],
    pub depths: [usize; 3],
    pub heads: [usize; 3],
    pub key_dim: usize,
    /// Depthwise kernel applied to each head's queries.
    pub query_kernel: usize,
    pub ffn_ratio: usize,
    pub input_size: usize,
    /// Learned per-head `L x L` attention bias tables.
    pub attention_bias: bool,
    /// Depthwise convolution on the queries (a local, position-aware term).
    pub query_conv: bool,
    /// Feed each head's output into the next head's input.
    pub cascade: bool,
    /// Zero the last BN scale of every residual branch so blocks start as identities.
    pub zero_init_residual: bool,
}

impl Default for EfficientVitConfig {
    fn default() -> Self {
        Self {
            embed_dims: [168, 192, 192],
            depths: [1, 2, 3],
            heads: [4, 4, 4],
            key_dim: 16,
            query_kernel: 5,
            ffn_ratio: 2,
            input_size: 224,
            attention_bias: true,
            query_conv: true,
            cascade: true,
            zero_init_residual: true,
        }
    }
}

impl EfficientVitConfig {
    pub fn feature_dim(&self) -> usize {
        self.embed_dims[2]
    }

    /// Token grid side per stage: `input / 16`, then halved (rounding up) twice.
    pub fn resolutions(&self) -> [usize; 3] {
        let r0 = self.input_size / 16;
        let r1 = (r0 + 1) / 2;
        let r2 = (r1 + 1) / 2;
        [r0, r1, r2]
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..3 {
            let (e, h) = (self.embed_dims[s], self.heads[s]);
            if e == 0 || h == 0 || e % h != 0 {
                return Err(config_err!("stage {s}: embed dim {e} is not divisible by {h} heads"));
            }
            if self.depths[s] == 0 {
                return Err(config_err!("stage {s} needs at least one block"));
            }
        }
        if self.embed_dims[0] % 8 != 0 {
            return Err(config_err!("first embed dim {} must be divisible by 8", self.embed_dims[0]));
        }
        if self.key_dim == 0 || self.ffn_ratio == 0 {
            return Err(config_err!("key_dim and ffn_ratio must be positive"));
        }
        if self.query_kernel % 2 == 0 {
            return Err(config_err!("query kernel {} must be odd", self.query_kernel));
        }
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return Err(config_err!("input size {} must be a positive multiple of 16", self.input_size));
        }
        Ok(())
    }

    fn residual_gamma(&self) -> f64 {
        if self.zero_init_residual {
            0.0
        } else {
            1.0
        }
    }
}

/// `x + f(x)`.
#[derive(Clone, Debug)]
pub struct Residual<M> {
    pub inner: M,
}

impl<E: Element, M: Module<E>> Module<E> for Residual<M> {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let y = self.inner.forward(ctx, x)?;
        ops::add(&mut ctx.tape, x, y)
    }
}

/// Pointwise expand, ReLU, pointwise project.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub expand: ConvBn,
    pub project: ConvBn,
}

impl Ffn {
    fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, dim: usize, hidden: usize, gamma: f64) -> Result<Self> {
        Ok(Self {
            expand: ConvBn::pointwise(&mut pb.sub("expand"), dim, hidden, 1.0)?,
            project: ConvBn::pointwise(&mut pb.sub("project"), hidden, dim, gamma)?,
        })
    }
}

impl<E: Element> Module<E> for Ffn {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let h = self.expand.forward(ctx, x)?;
        let h = ops::relu(&mut ctx.tape, h);
        self.project.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
struct Head {
    qkv: ConvBn,
    query_conv: Option<ConvBn>,
    bias: Option<ParamId>,
}

/// Multi-head attention where head `i` sees channel group `i` plus the
/// output of head `i - 1`. Head outputs are concatenated, passed through ReLU
/// and projected back to the input width.
#[derive(Clone, Debug)]
pub struct CascadedGroupAttention {
    heads: Vec<Head>,
    proj: ConvBn,
    key_dim: usize,
    value_dim: usize,
    resolution: usize,
    scale: f64,
    cascade: bool,
}

impl CascadedGroupAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        dim: usize,
        heads: usize,
        key_dim: usize,
        resolution: usize,
        cfg: &EfficientVitConfig,
        proj_gamma: f64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("{dim} channels cannot be split across {heads} heads"));
        }
        let value_dim = dim / heads;
        let tokens = resolution * resolution;
        let mut hs = Vec::with_capacity(heads);
        for i in 0..heads {
            let mut hb = pb.sub(format!("heads.{i}"));
            let qkv = ConvBn::pointwise(&mut hb.sub("qkv"), value_dim, 2 * key_dim + value_dim, 1.0)?;
            let query_conv = if cfg.query_conv {
                Some(ConvBn::depthwise(&mut hb.sub("query_conv"), key_dim, cfg.query_kernel, 1, 1.0)?)
            } else {
                None
            };
            let bias = if cfg.attention_bias {
                Some(hb.param("attention_bias", Tensor::zeros([tokens, tokens]))?)
            } else {
                None
            };
            hs.push(Head { qkv, query_conv, bias });
        }
        let proj = ConvBn::pointwise(&mut pb.sub("proj"), dim, dim, proj_gamma)?;
        Ok(Self {
            heads: hs,
            proj,
            key_dim,
            value_dim,
            resolution,
            scale: 1.0 / (key_dim as f64).sqrt(),
            cascade: cfg.cascade,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Per-head outputs `(N, C/heads, H, W)` before concatenation. When
    /// `ablate` names a head, that head's output is replaced by zeros before it
    /// is cascaded into the next head. `maps` collects the attention
    /// probabilities `(N, L, L)` of every head.
    pub fn head_outputs<E: Element>(
        &self,
        ctx: &mut Ctx<'_, E>,
        x: Var,
        ablate: Option<usize>,
        mut maps: Option<&mut Vec<Tensor<E>>>,
    ) -> Result<Vec<Var>> {
        let shape = ctx.tape.shape(x).to_vec();
        match shape[..] {
            [_, c, h, w] if c == self.value_dim * self.heads.len() && h == self.resolution && w == self.resolution => {}
            _ => {
                return Err(dim_err!(
                    "attention expects (N, {}, {r}, {r}), got {:?}",
                    self.value_dim * self.heads.len(),
                    shape,
                    r = self.resolution
                ))
            }
        }
        let groups = ops::chunk(&mut ctx.tape, x, self.heads.len())?;
        let kd = self.key_dim;
        let mut outs: Vec<Var> = Vec::with_capacity(self.heads.len());
        for (i, (head, group)) in self.heads.iter().zip(groups).enumerate() {
            let input = match outs.last() {
                Some(&prev) if self.cascade => ops::add(&mut ctx.tape, group, prev)?,
                _ => group,
            };
            let qkv = head.qkv.forward(ctx, input)?;
            let mut q = ops::narrow(&mut ctx.tape, qkv, 0, kd)?;
            let k = ops::narrow(&mut ctx.tape, qkv, kd, kd)?;
            let v = ops::narrow(&mut ctx.tape, qkv, 2 * kd, self.value_dim)?;
            if let Some(conv) = &head.query_conv {
                q = conv.forward(ctx, q)?;
            }
            let bias = head.bias.map(|b| ctx.param(b));
            if let Some(maps) = maps.as_deref_mut() {
                maps.push(ops::attention_weights(
                    ctx.tape.value(q),
                    ctx.tape.value(k),
                    bias.map(|b| ctx.tape.value(b)),
                    self.scale,
                )?);
            }
            let mut out = ops::attention(&mut ctx.tape, q, k, v, bias, self.scale)?;
            if ablate == Some(i) {
                let zeros = Tensor::zeros(ctx.tape.shape(out).to_vec());
                out = ctx.input(zeros);
            }
            outs.push(out);
        }
        Ok(outs)
    }

    fn project<E: Element>(&self, ctx: &mut Ctx<'_, E>, outs: &[Var]) -> Result<Var> {
        let cat = ops::concat(&mut ctx.tape, outs)?;
        let cat = ops::relu(&mut ctx.tape, cat);
        self.proj.forward(ctx, cat)
    }

    /// Forward pass that also returns every head's attention probabilities.
    pub fn forward_with_maps<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<(Var, Vec<Tensor<E>>)> {
        let mut maps = Vec::new();
        let outs = self.head_outputs(ctx, x, None, Some(&mut maps))?;
        Ok((self.project(ctx, &outs)?, maps))
    }
}

impl<E: Element> Module<E> for CascadedGroupAttention {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let outs = self.head_outputs(ctx, x, None, None)?;
        self.project(ctx, &outs)
    }
}

/// Depthwise mixer + FFN, attention, depthwise mixer + FFN; every sub-layer
/// is residual.
#[derive(Clone, Debug)]
pub struct SandwichBlock {
    dw0: Residual<ConvBn>,
    ffn0: Residual<Ffn>,
    attn: Residual<CascadedGroupAttention>,
    dw1: Residual<ConvBn>,
    ffn1: Residual<Ffn>,
}

impl SandwichBlock {
    pub fn new<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        dim: usize,
        heads: usize,
        resolution: usize,
        cfg: &EfficientVitConfig,
    ) -> Result<Self> {
        let g = cfg.residual_gamma();
        let hidden = dim * cfg.ffn_ratio;
        Ok(Self {
            dw0: Residual {
                inner: ConvBn::depthwise(&mut pb.sub("dw0"), dim, 3, 1, g)?,
            },
            ffn0: Residual {
                inner: Ffn::new(&mut pb.sub("ffn0"), dim, hidden, g)?,
            },
            attn: Residual {
                inner: CascadedGroupAttention::new(&mut pb.sub("attn"), dim, heads, cfg.key_dim, resolution, cfg, g)?,
            },
            dw1: Residual {
                inner: ConvBn::depthwise(&mut pb.sub("dw1"), dim, 3, 1, g)?,
            },
            ffn1: Residual {
                inner: Ffn::new(&mut pb.sub("ffn1"), dim, hidden, g)?,
            },
        })
    }

    pub fn attention(&self) -> &CascadedGroupAttention {
        &self.attn.inner
    }
}

impl<E: Element> Module<E> for SandwichBlock {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let x = self.dw0.forward(ctx, x)?;
        let x = self.ffn0.forward(ctx, x)?;
        let x = self.attn.forward(ctx, x)?;
        let x = self.dw1.forward(ctx, x)?;
        self.ffn1.forward(ctx, x)
    }
}

/// Inverted-residual downsampler: expand x4, depthwise stride 2, SE, project.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    expand: ConvBn,
    dw: ConvBn,
    se: SqueezeExcite,
    project: ConvBn,
}

impl PatchMerging {
    fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, cin: usize, cout: usize) -> Result<Self> {
        let hidden = 4 * cin;
        Ok(Self {
            expand: ConvBn::pointwise(&mut pb.sub("expand"), cin, hidden, 1.0)?,
            dw: ConvBn::depthwise(&mut pb.sub("dw"), hidden, 3, 2, 1.0)?,
            se: SqueezeExcite::new(&mut pb.sub("se"), hidden, hidden / 4)?,
            project: ConvBn::pointwise(&mut pb.sub("project"), hidden, cout, 1.0)?,
        })
    }
}

impl<E: Element> Module<E> for PatchMerging {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let h = self.expand.forward(ctx, x)?;
        let h = ops::relu(&mut ctx.tape, h);
        let h = self.dw.forward(ctx, h)?;
        let h = ops::relu(&mut ctx.tape, h);
        let h = self.se.forward(ctx, h)?;
        self.project.forward(ctx, h)
    }
}

/// Local mixing at the old width, patch merging, local mixing at the new width.
#[derive(Clone, Debug)]
pub struct Downsample {
    dw0: Residual<ConvBn>,
    ffn0: Residual<Ffn>,
    merge: PatchMerging,
    dw1: Residual<ConvBn>,
    ffn1: Residual<Ffn>,
}

impl Downsample {
    fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, cin: usize, cout: usize, cfg: &EfficientVitConfig) -> Result<Self> {
        let g = cfg.residual_gamma();
        Ok(Self {
            dw0: Residual {
                inner: ConvBn::depthwise(&mut pb.sub("dw0"), cin, 3, 1, g)?,
            },
            ffn0: Residual {
                inner: Ffn::new(&mut pb.sub("ffn0"), cin, cin * cfg.ffn_ratio, g)?,
            },
            merge: PatchMerging::new(&mut pb.sub("merge"), cin, cout)?,
            dw1: Residual {
                inner: ConvBn::depthwise(&mut pb.sub("dw1"), cout, 3, 1, g)?,
            },
            ffn1: Residual {
                inner: Ffn::new(&mut pb.sub("ffn1"), cout, cout * cfg.ffn_ratio, g)?,
            },
        })
    }
}

impl<E: Element> Module<E> for Downsample {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let x = self.dw0.forward(ctx, x)?;
        let x = self.ffn0.forward(ctx, x)?;
        let x = self.merge.forward(ctx, x)?;
        let x = self.dw1.forward(ctx, x)?;
        self.ffn1.forward(ctx, x)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<Downsample>,
    blocks: Vec<SandwichBlock>,
}

/// Patch embedding, three stages and a final batch norm over pooled features.
/// Produces `(N, feature_dim)` features with no classification head.
#[derive(Clone, Debug)]
pub struct EfficientVit {
    pub config: EfficientVitConfig,
    patch_embed: Vec<ConvBn>,
    stages: Vec<Stage>,
    norm: BatchNorm,
}

impl EfficientVit {
    pub fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, config: &EfficientVitConfig) -> Result<Self> {
        config.validate()?;
        let ed = config.embed_dims;
        let widths = [3, ed[0] / 8, ed[0] / 4, ed[0] / 2, ed[0]];
        let mut patch_embed = Vec::with_capacity(4);
        {
            let mut pe = pb.sub("patch_embed");
            for i in 0..4 {
                patch_embed.push(ConvBn::new(
                    &mut pe.sub(i),
                    widths[i],
                    widths[i + 1],
                    3,
                    Conv2dSpec::new(2, 1, 1),
                )?);
            }
        }
        let res = config.resolutions();
        let mut stages = Vec::with_capacity(3);
        for s in 0..3 {
            let mut sb = pb.sub(format!("stage{s}"));
            let down = if s > 0 {
                Some(Downsample::new(&mut sb.sub("down"), ed[s - 1], ed[s], config)?)
            } else {
                None
            };
            let blocks = (0..config.depths[s])
                .map(|b| SandwichBlock::new(&mut sb.sub(format!("blocks.{b}")), ed[s], config.heads[s], res[s], config))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
        }
        let norm = BatchNorm::new(&mut pb.sub("norm"), ed[2])?;
        Ok(Self {
            config: config.clone(),
            patch_embed,
            stages,
            norm,
        })
    }

    pub fn block(&self, stage: usize, index: usize) -> Option<&SandwichBlock> {
        self.stages.get(stage).and_then(|s| s.blocks.get(index))
    }

    /// Token map after the patch embedding.
    pub fn embed<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let s = self.config.input_size;
        match ctx.tape.shape(x) {
            [_, 3, h, w] if *h == s && *w == s => {}
            other => return Err(dim_err!("EfficientViT expects (N, 3, {s}, {s}) input, got {:?}", other)),
        }
        let mut y = x;
        for (i, layer) in self.patch_embed.iter().enumerate() {
            if i > 0 {
                y = ops::relu(&mut ctx.tape, y);
            }
            y = layer.forward(ctx, y)?;
        }
        Ok(y)
    }

    /// Features plus the token map at the end of each stage.
    pub fn forward_with_stages<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut y = self.embed(ctx, x)?;
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                y = down.forward(ctx, y)?;
            }
            for block in &stage.blocks {
                y = block.forward(ctx, y)?;
            }
            outs.push(y);
        }
        let pooled = ops::global_avg_pool(&mut ctx.tape, y)?;
        Ok((self.norm.forward(ctx, pooled)?, outs))
    }
}

impl<E: Element> Module<E> for EfficientVit {
    fn forward(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        self.forward_with_stages(ctx, x).map(|(f, _)| f)
    }
}

/// Standalone EfficientViT feature extractor with parameters under `efficientvit.`.
pub fn build_efficientvit<E: Element>(config: &EfficientVitConfig, seed: u64) -> Result<ModelGraph<EfficientVit, E>> {
    build_efficientvit_with(config, seed, BatchNormSpec::default())
}

pub fn build_efficientvit_with<E: Element>(
    config: &EfficientVitConfig,
    seed: u64,
    bn: BatchNormSpec,
) -> Result<ModelGraph<EfficientVit, E>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, bn);
        EfficientVit::new(&mut pb.sub(PREFIX), config)?
    };
    Ok(ModelGraph::new(store, net))
}
