//! Classifier families behind one interface: a residual CNN, the residual
//! CNN with channel and spatial attention, a ViT-style encoder, and the
//! convolutional-stem transformer ("ours").

pub mod gradcheck;
pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use layers::{Builder, Conv, Mlp, Norm, SpatialGate, SqueezeExcite, TransformerBlock, HEAD_STD};
use remission_nn::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input batch has shape {actual:?}, expected [B, {size}, {size}, 3]")]
    ShapeMismatch { size: usize, actual: Vec<usize> },
    #[error("unknown model preset {0:?}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resnet,
    ResnetA,
    Vit,
    Ours,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Resnet => "resnet",
            Family::ResnetA => "resnet_a",
            Family::Vit => "vit",
            Family::Ours => "ours",
        }
    }
}

/// Architecture hyperparameters. Fields irrelevant to `family` are ignored
/// (but still part of the serialized form, so configs round-trip exactly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub input_size: usize,
    pub num_classes: usize,
    /// Residual families: channel width of each stage.
    pub widths: Vec<usize>,
    /// Residual families: basic blocks per stage.
    pub blocks: Vec<usize>,
    /// `resnet_a`: squeeze-excitation reduction ratio.
    pub se_reduction: usize,
    /// Token families: patch edge in pixels.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// `ours`: width of the first stem convolution.
    pub stem_width: usize,
    /// Hidden sizes of the classifier MLP, between the pooled feature and the
    /// logits.
    pub head_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Resnet,
            input_size: 64,
            num_classes: 2,
            widths: vec![16, 32, 64, 128],
            blocks: vec![2, 2, 2, 2],
            se_reduction: 4,
            patch_size: 16,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            stem_width: 64,
            head_hidden: vec![],
        }
    }
}

/// Named presets accepted by [`ModelConfig::preset`].
pub const PRESETS: &[&str] = &[
    "resnet-desk",
    "resnet-efficient-desk",
    "resnet_a-desk",
    "vit-desk",
    "vit-large-desk",
    "ours-desk",
    "resnet-tiny",
    "resnet_a-tiny",
    "vit-tiny",
    "ours-tiny",
    "resnet-101",
    "vit-base",
    "vit-large",
];

impl ModelConfig {
    pub fn resnet_desk() -> Self {
        Self::default()
    }

    /// Narrow, shallow-early residual net standing in for EfficientNet-B0.
    pub fn resnet_efficient_desk() -> Self {
        Self { widths: vec![16, 24, 40, 80], blocks: vec![1, 2, 2, 2], ..Self::default() }
    }

    pub fn resnet_a_desk() -> Self {
        Self { family: Family::ResnetA, widths: vec![12, 24, 48, 96], ..Self::default() }
    }

    pub fn vit_desk() -> Self {
        Self { family: Family::Vit, patch_size: 16, embed_dim: 128, depth: 4, heads: 4, ..Self::default() }
    }

    pub fn vit_large_desk() -> Self {
        Self { family: Family::Vit, patch_size: 16, embed_dim: 192, depth: 6, heads: 6, ..Self::default() }
    }

    pub fn ours_desk() -> Self {
        Self {
            family: Family::Ours,
            patch_size: 8,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            stem_width: 64,
            head_hidden: vec![64],
            ..Self::default()
        }
    }

    /// Gradient-check scale: 16x16 input and a few thousand parameters.
    pub fn tiny(family: Family) -> Self {
        let base = Self { family, input_size: 16, ..Self::default() };
        match family {
            Family::Resnet => Self { widths: vec![4, 8], blocks: vec![1, 1], ..base },
            Family::ResnetA => Self { widths: vec![3, 6], blocks: vec![1, 1], se_reduction: 2, ..base },
            Family::Vit => Self { patch_size: 4, embed_dim: 16, depth: 1, heads: 2, ..base },
            Family::Ours => Self { patch_size: 4, embed_dim: 12, depth: 2, heads: 2, stem_width: 6, head_hidden: vec![8], ..base },
        }
    }

    /// Look up a named preset (see [`PRESETS`]). The full-scale presets are
    /// accepted for completeness but are far too large to train here.
    pub fn preset(name: &str) -> Result<Self, ModelError> {
        Ok(match name {
            "resnet-desk" => Self::resnet_desk(),
            "resnet-efficient-desk" => Self::resnet_efficient_desk(),
            "resnet_a-desk" => Self::resnet_a_desk(),
            "vit-desk" => Self::vit_desk(),
            "vit-large-desk" => Self::vit_large_desk(),
            "ours-desk" => Self::ours_desk(),
            "resnet-tiny" => Self::tiny(Family::Resnet),
            "resnet_a-tiny" => Self::tiny(Family::ResnetA),
            "vit-tiny" => Self::tiny(Family::Vit),
            "ours-tiny" => Self::tiny(Family::Ours),
            "resnet-101" => Self { input_size: 224, widths: vec![64, 128, 256, 512], blocks: vec![3, 4, 23, 3], ..Self::default() },
            "vit-base" => Self { family: Family::Vit, input_size: 224, embed_dim: 768, depth: 12, heads: 12, mlp_ratio: 4, ..Self::default() },
            "vit-large" => Self { family: Family::Vit, input_size: 224, embed_dim: 1024, depth: 24, heads: 16, mlp_ratio: 4, ..Self::default() },
            _ => return Err(ModelError::UnknownPreset(name.to_string())),
        })
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_classes != 2 {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.input_size < 8 {
            return bad(format!("input_size {} is below 8", self.input_size));
        }
        if self.head_hidden.contains(&0) {
            return bad("head_hidden sizes must be positive".into());
        }
        match self.family {
            Family::Resnet | Family::ResnetA => {
                if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
                    return bad(format!("widths {:?} and blocks {:?} must be nonempty and equally long", self.widths, self.blocks));
                }
                if self.widths.contains(&0) || self.blocks.contains(&0) {
                    return bad("stage widths and block counts must be positive".into());
                }
                if self.family == Family::ResnetA && self.se_reduction == 0 {
                    return bad("se_reduction must be positive".into());
                }
            }
            Family::Vit | Family::Ours => {
                let p = self.patch_size;
                if p == 0 || self.input_size % p != 0 {
                    return bad(format!("patch size {p} does not divide input size {}", self.input_size));
                }
                if self.family == Family::Ours && (p < 2 || p % 2 != 0) {
                    return bad(format!("ours needs an even patch size >= 2, got {p}"));
                }
                if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
                    return bad(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
                }
                if self.depth == 0 || self.mlp_ratio == 0 {
                    return bad("depth and mlp_ratio must be positive".into());
                }
                if self.family == Family::Ours && self.depth < 2 {
                    return bad("ours needs at least 2 attention blocks".into());
                }
                if self.family == Family::Ours && self.stem_width == 0 {
                    return bad("stem_width must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Number of tokens entering the encoder (including the class token for vit).
    pub fn num_tokens(&self) -> Option<usize> {
        let grid = self.input_size / self.patch_size;
        match self.family {
            Family::Vit => Some(grid * grid + 1),
            Family::Ours => Some(grid * grid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BasicBlock {
    stride: usize,
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    proj: Option<(Conv, Norm)>,
}

impl BasicBlock {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.conv1.apply(g, x, self.stride, 1);
        let h = self.norm1.apply(g, h);
        let h = g.relu(h);
        let h = self.conv2.apply(g, h, 1, 1);
        let h = self.norm2.apply(g, h);
        let skip = match &self.proj {
            Some((c, n)) => {
                let s = c.apply(g, x, self.stride, 0);
                n.apply(g, s)
            }
            None => x,
        };
        let y = g.add(h, skip);
        g.relu(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    blocks: Vec<BasicBlock>,
    attention: Option<(SqueezeExcite, SpatialGate)>,
}

#[derive(Debug, Clone, PartialEq)]
struct Residual {
    stem: Conv,
    stem_norm: Norm,
    stages: Vec<Stage>,
    head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
struct Vit {
    patch: Conv,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: Norm,
    head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
struct Ours {
    stem1: Conv,
    stem2: Conv,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: Norm,
    head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
enum Arch {
    Residual(Residual),
    Vit(Vit),
    Ours(Ours),
}

/// A built classifier: config, named parameters and the layer layout.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    arch: Arch,
}

fn head_dims(input: usize, cfg: &ModelConfig) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(&cfg.head_hidden);
    dims.push(cfg.num_classes);
    dims
}

fn build_residual<T: Scalar, R: Rng>(b: &mut Builder<T, R>, cfg: &ModelConfig) -> Residual {
    let w0 = cfg.widths[0];
    let stem = b.conv("stem", 3, 3, w0, false);
    let stem_norm = b.norm("stem.norm", w0);
    let mut cin = w0;
    let mut stages = Vec::new();
    for (s, (&w, &n)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
        let mut blocks = Vec::new();
        for i in 0..n {
            let name = format!("stage{s}.block{i}");
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            let conv1 = b.conv(&format!("{name}.conv1"), 3, cin, w, false);
            let norm1 = b.norm(&format!("{name}.norm1"), w);
            let conv2 = b.conv(&format!("{name}.conv2"), 3, w, w, false);
            let norm2 = b.norm(&format!("{name}.norm2"), w);
            let proj = (stride != 1 || cin != w).then(|| (b.conv(&format!("{name}.proj"), 1, cin, w, false), b.norm(&format!("{name}.proj.norm"), w)));
            blocks.push(BasicBlock { stride, conv1, norm1, conv2, norm2, proj });
            cin = w;
        }
        let attention = (cfg.family == Family::ResnetA).then(|| {
            let se = SqueezeExcite::new(b, &format!("stage{s}.se"), w, cfg.se_reduction);
            let sp = SpatialGate { conv: b.conv(&format!("stage{s}.spatial"), 3, w, 1, true) };
            (se, sp)
        });
        stages.push(Stage { blocks, attention });
    }
    let head = Mlp::new(b, "head", &head_dims(cin, cfg), HEAD_STD);
    Residual { stem, stem_norm, stages, head }
}

fn build_vit<T: Scalar, R: Rng>(b: &mut Builder<T, R>, cfg: &ModelConfig) -> Vit {
    let d = cfg.embed_dim;
    let n = cfg.num_tokens().expect("token family");
    Vit {
        patch: b.conv("patch", cfg.patch_size, 3, d, true),
        cls: b.embedding("cls", &[d]),
        pos: b.embedding("pos", &[n, d]),
        blocks: (0..cfg.depth).map(|i| TransformerBlock::new(b, &format!("block{i}"), d, cfg.heads, cfg.mlp_ratio)).collect(),
        norm: b.norm("norm", d),
        head: Mlp::new(b, "head", &head_dims(d, cfg), HEAD_STD),
    }
}

fn build_ours<T: Scalar, R: Rng>(b: &mut Builder<T, R>, cfg: &ModelConfig) -> Ours {
    let d = cfg.embed_dim;
    let n = cfg.num_tokens().expect("token family");
    Ours {
        stem1: b.conv("stem1", 3, 3, cfg.stem_width, true),
        stem2: b.conv("stem2", cfg.patch_size / 2, cfg.stem_width, d, true),
        pos: b.embedding("pos", &[n, d]),
        blocks: (0..cfg.depth).map(|i| TransformerBlock::new(b, &format!("block{i}"), d, cfg.heads, cfg.mlp_ratio)).collect(),
        norm: b.norm("norm", d),
        head: Mlp::new(b, "head", &head_dims(d, cfg), HEAD_STD),
    }
}

/// Build and initialize a network. Deterministic in `(config, seed)`.
pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Network<T>, ModelError> {
    config.validate()?;
    let mut params = ParamStore::new();
    let mut rng = seed::rng_for(seed, "model-init");
    let mut b = Builder { store: &mut params, rng: &mut rng };
    let arch = match config.family {
        Family::Resnet | Family::ResnetA => Arch::Residual(build_residual(&mut b, config)),
        Family::Vit => Arch::Vit(build_vit(&mut b, config)),
        Family::Ours => Arch::Ours(build_ours(&mut b, config)),
    };
    Ok(Network { config: config.clone(), params, arch })
}

/// Exact number of scalar parameters.
pub fn param_count<T: Scalar>(net: &Network<T>) -> usize {
    net.params.num_scalars()
}

impl<T: Scalar> Network<T> {
    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { config: self.config.clone(), params: self.params.cast(), arch: self.arch.clone() }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 || shape[0] == 0 {
            return Err(ModelError::ShapeMismatch { size: s, actual: shape.to_vec() });
        }
        Ok(())
    }

    /// Record the forward pass for an NHWC batch node and return the logits
    /// node `[B, 2]`. The input shape must already be validated.
    pub fn logits(&self, g: &mut Graph<T>, x: Var) -> Var {
        match &self.arch {
            Arch::Residual(r) => {
                let mut h = r.stem.apply(g, x, 2, 1);
                h = r.stem_norm.apply(g, h);
                h = g.relu(h);
                for stage in &r.stages {
                    for blk in &stage.blocks {
                        h = blk.apply(g, h);
                    }
                    if let Some((se, sp)) = &stage.attention {
                        h = se.apply(g, h);
                        h = sp.apply(g, h);
                    }
                }
                let pooled = g.mean_tokens(h);
                r.head.apply(g, pooled)
            }
            Arch::Vit(v) => {
                let h = v.patch.apply(g, x, self.config.patch_size, 0);
                let mut h = self.to_tokens(g, h);
                let cls = g.param(v.cls);
                h = g.prepend_token(cls, h);
                let pos = g.param(v.pos);
                h = g.add_broadcast(h, pos);
                for blk in &v.blocks {
                    h = blk.apply(g, h);
                }
                h = v.norm.apply(g, h);
                let c = g.take_token(h, 0);
                v.head.apply(g, c)
            }
            Arch::Ours(o) => {
                let mut h = self.ours_stem(g, o, x);
                for blk in &o.blocks {
                    h = blk.apply(g, h);
                }
                h = o.norm.apply(g, h);
                let pooled = g.mean_tokens(h);
                o.head.apply(g, pooled)
            }
        }
    }

    fn to_tokens(&self, g: &mut Graph<T>, h: Var) -> Var {
        let s = g.shape(h).to_vec();
        g.reshape(h, &[s[0], s[1] * s[2], s[3]])
    }

    fn ours_stem(&self, g: &mut Graph<T>, o: &Ours, x: Var) -> Var {
        let h = o.stem1.apply(g, x, 2, 1);
        let h = g.relu(h);
        let k = self.config.patch_size / 2;
        let h = o.stem2.apply(g, h, k, 0);
        let h = self.to_tokens(g, h);
        let pos = g.param(o.pos);
        g.add_broadcast(h, pos)
    }

    /// Transformer blocks of the token families (empty for residual nets).
    pub fn attention_blocks(&self) -> &[TransformerBlock] {
        match &self.arch {
            Arch::Vit(v) => &v.blocks,
            Arch::Ours(o) => &o.blocks,
            Arch::Residual(_) => &[],
        }
    }

    /// Tokens entering the first attention block of an `ours` network.
    pub fn ours_tokens(&self, g: &mut Graph<T>, x: Var) -> Option<Var> {
        match &self.arch {
            Arch::Ours(o) => Some(self.ours_stem(g, o, x)),
            _ => None,
        }
    }

    /// Eval-mode forward pass returning logits `[B, 2]`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new(&self.params);
        let x = g.input(batch.clone());
        let y = self.logits(&mut g, x);
        Ok(g.value(y).clone())
    }

    /// Row-wise softmax of [`Network::forward`].
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(softmax_rows(&self.forward(batch)?))
    }
}

/// Numerically stable softmax over the last axis of a 2-D tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = *logits.shape().last().expect("rank >= 1");
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Tensor::from_vec(logits.shape().to_vec(), out).expect("same shape")
}
