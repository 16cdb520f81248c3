//! Feature fusion `Z = X ⊕ Y` and the three-layer classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::efficientvit::{self, EfficientVit, EfficientVitConfig};
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Ctx, Mode, ModelGraph, Module};
use crate::layers::{BatchNorm, Dropout, Linear};
use crate::ops::{self, BatchNormSpec};
use crate::params::{ParamBuilder, ParamStore};
use crate::shufflenet::{self, ShuffleNetConfig, ShuffleNetV2};
use crate::tensor::{Element, Tensor};

/// Parameter-name prefix of the three-layer classifier.
pub const CLASSIFIER_PREFIX: &str = "classifier";
/// Parameter-name prefix of a single linear head.
pub const LINEAR_HEAD_PREFIX: &str = "head";

/// Which backbones feed the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backbones {
    #[default]
    Fused,
    ShuffleNet,
    EfficientVit,
}

/// Head placed on the (fused) features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// FC-BN-ReLU-Dropout, FC-BN-ReLU-Dropout, FC.
    #[default]
    Classifier,
    /// A single fully connected layer.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: [usize; 2],
    pub dropout: [f64; 2],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: [384, 128],
            dropout: [0.5, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbones: Backbones,
    pub head: HeadKind,
    pub num_classes: usize,
    pub shufflenet: ShuffleNetConfig,
    pub efficientvit: EfficientVitConfig,
    pub classifier: ClassifierConfig,
    pub batch_norm: BatchNormSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbones: Backbones::Fused,
            head: HeadKind::Classifier,
            num_classes: 6,
            shufflenet: ShuffleNetConfig::default(),
            efficientvit: EfficientVitConfig::default(),
            classifier: ClassifierConfig::default(),
            batch_norm: BatchNormSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    /// Width of the head input: `d1 + d2` for the fused model.
    pub fn feature_dim(&self) -> usize {
        match self.backbones {
            Backbones::Fused => self.shufflenet.feature_dim() + self.efficientvit.feature_dim(),
            Backbones::ShuffleNet => self.shufflenet.feature_dim(),
            Backbones::EfficientVit => self.efficientvit.feature_dim(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self.backbones {
            Backbones::EfficientVit => self.efficientvit.input_size,
            _ => self.shufflenet.input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.classifier.hidden.contains(&0) {
            return Err(config_err!("classifier hidden dims must be positive"));
        }
        if let Some(p) = self.classifier.dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(config_err!("dropout probability {p} outside [0, 1)"));
        }
        if self.backbones == Backbones::Fused && self.shufflenet.input_size != self.efficientvit.input_size {
            return Err(config_err!(
                "backbone input sizes differ: {} vs {}",
                self.shufflenet.input_size,
                self.efficientvit.input_size
            ));
        }
        if !(self.batch_norm.eps > 0.0) || !(0.0..=1.0).contains(&self.batch_norm.momentum) {
            return Err(config_err!("batch norm needs eps > 0 and momentum in [0, 1]"));
        }
        Ok(())
    }
}

/// Ordered concatenation of two `(N, d)` feature matrices: `X` first.
pub fn fuse<E: Element>(tape: &mut Tape<E>, x: Var, y: Var) -> Result<Var> {
    let (xs, ys) = (tape.shape(x), tape.shape(y));
    if xs.len() != 2 || ys.len() != 2 || xs[0] != ys[0] {
        return Err(dim_err!("fuse needs (N, d1) and (N, d2), got {:?} and {:?}", xs, ys));
    }
    ops::concat(tape, &[x, y])
}

/// Tensor-level [`fuse`].
pub fn fuse_tensors<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    let mut tape = Tape::no_grad();
    let (xv, yv) = (tape.leaf(x.clone(), false), tape.leaf(y.clone(), false));
    let z = fuse(&mut tape, xv, yv)?;
    Ok(tape.value(z).clone())
}

/// Inverse of [`fuse_tensors`]: the first `d1` columns and the rest.
pub fn unfuse<E: Element>(z: &Tensor<E>, d1: usize) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, d) = z.dims2()?;
    if d1 > d {
        return Err(dim_err!("cannot take {d1} leading columns of a width-{d} matrix"));
    }
    let mut x = Vec::with_capacity(n * d1);
    let mut y = Vec::with_capacity(n * (d - d1));
    for row in z.data().chunks(d) {
        x.extend_from_slice(&row[..d1]);
        y.extend_from_slice(&row[d1..]);
    }
    Ok((Tensor::new([n, d1], x)?, Tensor::new([n, d - d1], y)?))
}

/// Layer kinds in execution order, for structural checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    FullyConnected,
    BatchNorm,
    Relu,
    Dropout,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    fc1: Linear,
    bn1: BatchNorm,
    drop1: Dropout,
    fc2: Linear,
    bn2: BatchNorm,
    drop2: Dropout,
    fc3: Linear,
}

impl Classifier {
    pub fn new<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        in_dim: usize,
        cfg: &ClassifierConfig,
        num_classes: usize,
    ) -> Result<Self> {
        let [h1, h2] = cfg.hidden;
        Ok(Self {
            fc1: Linear::new(&mut pb.sub("fc1"), in_dim, h1)?,
            bn1: BatchNorm::new(&mut pb.sub("bn1"), h1)?,
            drop1: Dropout { p: cfg.dropout[0] },
            fc2: Linear::new(&mut pb.sub("fc2"), h1, h2)?,
            bn2: BatchNorm::new(&mut pb.sub("bn2"), h2)?,
            drop2: Dropout { p: cfg.dropout[1] },
            fc3: Linear::new(&mut pb.sub("fc3"), h2, num_classes)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.fc3.out_dim
    }

    pub fn layers(&self) -> Vec<LayerKind> {
        use LayerKind::*;
        vec![
            FullyConnected,
            BatchNorm,
            Relu,
            Dropout,
            FullyConnected,
            BatchNorm,
            Relu,
            Dropout,
            FullyConnected,
        ]
    }
}

impl<E: Element> Module<E> for Classifier {
    fn forward(&self, ctx: &mut Ctx<'_, E>, z: Var) -> Result<Var> {
        match ctx.tape.shape(z) {
            [_, d] if *d == self.in_dim() => {}
            other => return Err(dim_err!("classifier expects (N, {}), got {:?}", self.in_dim(), other)),
        }
        let h = self.fc1.forward(ctx, z)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ops::relu(&mut ctx.tape, h);
        let h = self.drop1.forward(ctx, h)?;
        let h = self.fc2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let h = ops::relu(&mut ctx.tape, h);
        let h = self.drop2.forward(ctx, h)?;
        self.fc3.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Classifier(Classifier),
    Linear(Linear),
}

impl<E: Element> Module<E> for Head {
    fn forward(&self, ctx: &mut Ctx<'_, E>, z: Var) -> Result<Var> {
        match self {
            Head::Classifier(c) => c.forward(ctx, z),
            Head::Linear(l) => {
                match ctx.tape.shape(z) {
                    [_, d] if *d == l.in_dim => {}
                    other => return Err(dim_err!("linear head expects (N, {}), got {:?}", l.in_dim, other)),
                }
                l.forward(ctx, z)
            }
        }
    }
}

/// Backbone features of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub x: Option<Var>,
    pub y: Option<Var>,
    /// Head input: `X ⊕ Y`, or the single backbone's features.
    pub z: Var,
}

/// One or two backbones plus a head. The default configuration is the fused
/// ShuffleNet V2 + EfficientViT model with the three-layer classifier.
#[derive(Clone, Debug)]
pub struct FerNet {
    pub config: ModelConfig,
    pub shufflenet: Option<ShuffleNetV2>,
    pub efficientvit: Option<EfficientVit>,
    pub head: Head,
}

impl FerNet {
    pub fn new<E: Element>(pb: &mut ParamBuilder<'_, E>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let uses_shufflenet = matches!(config.backbones, Backbones::Fused | Backbones::ShuffleNet);
        let uses_vit = matches!(config.backbones, Backbones::Fused | Backbones::EfficientVit);
        let shufflenet = if uses_shufflenet {
            Some(ShuffleNetV2::new(&mut pb.sub(shufflenet::PREFIX), &config.shufflenet)?)
        } else {
            None
        };
        let efficientvit = if uses_vit {
            Some(EfficientVit::new(&mut pb.sub(efficientvit::PREFIX), &config.efficientvit)?)
        } else {
            None
        };
        let d = config.feature_dim();
        let head = match config.head {
            HeadKind::Classifier => Head::Classifier(Classifier::new(
                &mut pb.sub(CLASSIFIER_PREFIX),
                d,
                &config.classifier,
                config.num_classes,
            )?),
            HeadKind::Linear => Head::Linear(Linear::new(&mut pb.sub(LINEAR_HEAD_PREFIX), d, config.num_classes)?),
        };
        Ok(Self {
            config: config.clone(),
            shufflenet,
            efficientvit,
            head,
        })
    }

    pub fn head_prefix(&self) -> &'static str {
        match self.head {
            Head::Classifier(_) => CLASSIFIER_PREFIX,
            Head::Linear(_) => LINEAR_HEAD_PREFIX,
        }
    }

    pub fn features<E: Element>(&self, ctx: &mut Ctx<'_, E>, images: Var) -> Result<Features> {
        let x = match &self.shufflenet {
            Some(net) => Some(net.forward(ctx, images)?),
            None => None,
        };
        let y = match &self.efficientvit {
            Some(net) => Some(net.forward(ctx, images)?),
            None => None,
        };
        let z = match (x, y) {
            (Some(x), Some(y)) => fuse(&mut ctx.tape, x, y)?,
            (Some(f), None) | (None, Some(f)) => f,
            (None, None) => return Err(config_err!("model has no backbone")),
        };
        Ok(Features { x, y, z })
    }

    pub fn classify<E: Element>(&self, ctx: &mut Ctx<'_, E>, z: Var) -> Result<Var> {
        self.head.forward(ctx, z)
    }
}

impl<E: Element> Module<E> for FerNet {
    fn forward(&self, ctx: &mut Ctx<'_, E>, images: Var) -> Result<Var> {
        let f = self.features(ctx, images)?;
        self.classify(ctx, f.z)
    }
}

/// A complete expression-recognition model with its parameters.
pub type FusedModel<E = f32> = ModelGraph<FerNet, E>;

pub fn build_model<E: Element>(config: &ModelConfig, seed: u64) -> Result<FusedModel<E>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, config.batch_norm);
        FerNet::new(&mut pb, config)?
    };
    Ok(ModelGraph::new(store, net))
}

/// Logits for `images (N, 3, S, S)` in the given mode, without recording gradients.
pub fn fused_forward<E: Element>(model: &mut FusedModel<E>, images: &Tensor<E>, mode: Mode, seed: u64) -> Result<Tensor<E>> {
    let mut ctx = Ctx::new(&mut model.params, mode, seed, false);
    let x = ctx.input(images.clone());
    let logits = model.net.forward(&mut ctx, x)?;
    let out = ctx.tape.value(logits).clone();
    out.check_finite("logits")?;
    Ok(out)
}

/// Head-only pass on precomputed features `z (N, feature_dim)`.
pub fn classify<E: Element>(model: &mut FusedModel<E>, z: &Tensor<E>, mode: Mode, seed: u64) -> Result<Tensor<E>> {
    let mut ctx = Ctx::new(&mut model.params, mode, seed, false);
    let zv = ctx.input(z.clone());
    let logits = model.net.classify(&mut ctx, zv)?;
    Ok(ctx.tape.value(logits).clone())
}

/// Backbone features `(X, Y, Z)` as tensors, in the given mode.
pub fn extract_features<E: Element>(
    model: &mut FusedModel<E>,
    images: &Tensor<E>,
    mode: Mode,
) -> Result<(Option<Tensor<E>>, Option<Tensor<E>>, Tensor<E>)> {
    let mut ctx = Ctx::new(&mut model.params, mode, 0, false);
    let x = ctx.input(images.clone());
    let f = model.net.features(&mut ctx, x)?;
    let get = |v: Option<Var>| v.map(|v| ctx.tape.value(v).clone());
    Ok((get(f.x), get(f.y), ctx.tape.value(f.z).clone()))
}
