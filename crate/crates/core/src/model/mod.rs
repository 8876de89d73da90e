//! The three-component multimodal model: vision encoder, projector and causal
//! language model, with manual forward/backward passes.
//!
//! All numerics are generic over [`Float`] so training can run in `f32` while
//! gradient checks run in `f64`.

pub mod layers;
mod network;
pub mod vocab;

use std::fmt;

use ndarray::Array2;
use num_traits::FromPrimitive;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::check_dims;

pub use network::{
    backward_sample, encode_image, forward, forward_sample, generate, image_patches, label_embedding, Gradients,
    next_token_logits, pooled_visual_embedding, project, ForwardTrace, SampleInput,
};
pub use vocab::Vocabulary;

pub trait Float: ndarray::NdFloat + FromPrimitive + Default {}
impl<T: ndarray::NdFloat + FromPrimitive + Default> Float for T {}

pub(crate) fn lit<T: Float>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub lm_dim: usize,
    pub encoder_layers: usize,
    pub lm_layers: usize,
    pub heads: usize,
    pub n_visual_tokens: usize,
    /// Longest sequence (visual tokens plus text) the language model accepts.
    pub max_seq_len: usize,
    pub vocab: Vocabulary,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            encoder_dim: 64,
            lm_dim: 64,
            encoder_layers: 2,
            lm_layers: 2,
            heads: 4,
            n_visual_tokens: 16,
            max_seq_len: 96,
            vocab: Vocabulary::standard(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 8,
            encoder_dim: 16,
            lm_dim: 16,
            encoder_layers: 2,
            lm_layers: 2,
            heads: 2,
            n_visual_tokens: 4,
            max_seq_len: 80,
            vocab: Vocabulary::standard(),
            init_seed: 0,
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.image_size, self.image_size)?;
        let fail = |m: String| Err(Error::domain(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.n_visual_tokens == 0 || self.n_patches() < self.n_visual_tokens {
            return fail(format!(
                "{} patches cannot pool into {} visual tokens",
                self.n_patches(),
                self.n_visual_tokens
            ));
        }
        if self.heads == 0 || self.encoder_dim % self.heads != 0 || self.lm_dim % self.heads != 0 {
            return fail(format!("{} heads must divide encoder_dim and lm_dim", self.heads));
        }
        if self.max_seq_len <= self.n_visual_tokens {
            return fail("max_seq_len must exceed n_visual_tokens".into());
        }
        if self.vocab.is_empty() || self.vocab.len() > vocab::MAX_VOCAB {
            return fail(format!("vocabulary size {} outside 1..={}", self.vocab.len(), vocab::MAX_VOCAB));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Encoder,
    Projector,
    Lm,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Encoder, Component::Projector, Component::Lm];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Projector => "projector",
            Component::Lm => "lm",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a tensor sits in the network; finer than [`Component`] inside the LM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Encoder,
    Projector,
    /// Token and positional embeddings.
    LmInput,
    LmBlock(usize),
    /// Final norm and head.
    LmOutput,
}

impl Stage {
    pub fn component(self) -> Component {
        match self {
            Stage::Encoder => Component::Encoder,
            Stage::Projector => Component::Projector,
            _ => Component::Lm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub stage: Stage,
    pub kind: TensorKind,
    pub shape: [usize; 2],
}

impl TensorMeta {
    pub fn component(&self) -> Component {
        self.stage.component()
    }
}

/// Language-model part of a [`ComponentMask`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmActivation {
    None,
    Full,
    /// Last `k` blocks plus final norm and head.
    Partial(usize),
}

/// Which components receive gradients and optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ComponentMask {
    pub encoder: bool,
    pub projector: bool,
    pub lm: LmActivation,
}

impl ComponentMask {
    pub const ALL: ComponentMask = ComponentMask {
        encoder: true,
        projector: true,
        lm: LmActivation::Full,
    };
    pub const NONE: ComponentMask = ComponentMask {
        encoder: false,
        projector: false,
        lm: LmActivation::None,
    };

    pub fn any(&self) -> bool {
        self.encoder || self.projector || self.lm != LmActivation::None
    }

    pub fn is_active(&self, meta: &TensorMeta, lm_layers: usize) -> bool {
        match meta.stage {
            Stage::Encoder => self.encoder,
            Stage::Projector => self.projector,
            Stage::LmInput => self.lm == LmActivation::Full,
            Stage::LmOutput => self.lm != LmActivation::None,
            Stage::LmBlock(i) => match self.lm {
                LmActivation::None => false,
                LmActivation::Full => true,
                LmActivation::Partial(k) => i + k >= lm_layers,
            },
        }
    }

    /// Parses the comma-separated grammar `encoder,projector,lm|lm-partial`.
    /// `lm-partialK` keeps the last `K` blocks; `none` is the empty mask.
    pub fn parse(text: &str) -> Result<Self> {
        let mut mask = ComponentMask::NONE;
        if text.trim() == "none" {
            return Ok(mask);
        }
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let lm = match part {
                "encoder" => {
                    mask.encoder = true;
                    continue;
                }
                "projector" => {
                    mask.projector = true;
                    continue;
                }
                "lm" => LmActivation::Full,
                "lm-partial" => LmActivation::Partial(1),
                other => match other.strip_prefix("lm-partial").and_then(|k| k.parse::<usize>().ok()) {
                    Some(k) if k > 0 => LmActivation::Partial(k),
                    _ => return Err(Error::Config(format!("unknown component {other:?} in activation mask"))),
                },
            };
            if mask.lm != LmActivation::None {
                return Err(Error::Config("`lm` and `lm-partial` are mutually exclusive".into()));
            }
            mask.lm = lm;
        }
        Ok(mask)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.encoder {
            parts.push("encoder".to_string());
        }
        if self.projector {
            parts.push("projector".to_string());
        }
        match self.lm {
            LmActivation::None => {}
            LmActivation::Full => parts.push("lm".into()),
            LmActivation::Partial(1) => parts.push("lm-partial".into()),
            LmActivation::Partial(k) => parts.push(format!("lm-partial{k}")),
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

impl TryFrom<String> for ComponentMask {
    type Error = Error;

    fn try_from(text: String) -> Result<Self> {
        Self::parse(&text)
    }
}

impl From<ComponentMask> for String {
    fn from(mask: ComponentMask) -> String {
        mask.label()
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIx {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIx {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIx {
    pub ln1: NormIx,
    pub query: LinearIx,
    pub key: LinearIx,
    pub value: LinearIx,
    pub out: LinearIx,
    pub ln2: NormIx,
    pub fc1: LinearIx,
    pub fc2: LinearIx,
}

/// Tensor indices resolved from a config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub patch: LinearIx,
    pub encoder_pos: usize,
    pub encoder_blocks: Vec<BlockIx>,
    pub pool: usize,
    pub projection: LinearIx,
    pub token_embedding: usize,
    pub lm_pos: usize,
    pub lm_blocks: Vec<BlockIx>,
    pub final_norm: NormIx,
    pub head: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Pool,
}

struct SchemaBuilder {
    metas: Vec<TensorMeta>,
    inits: Vec<Init>,
}

impl SchemaBuilder {
    fn push(&mut self, name: String, stage: Stage, kind: TensorKind, shape: [usize; 2], init: Init) -> usize {
        self.metas.push(TensorMeta {
            name,
            stage,
            kind,
            shape,
        });
        self.inits.push(init);
        self.metas.len() - 1
    }

    fn linear(&mut self, prefix: &str, stage: Stage, fan_in: usize, fan_out: usize) -> LinearIx {
        LinearIx {
            weight: self.push(format!("{prefix}.weight"), stage, TensorKind::Weight, [fan_in, fan_out], Init::Normal),
            bias: self.push(format!("{prefix}.bias"), stage, TensorKind::Bias, [1, fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, stage: Stage, dim: usize) -> NormIx {
        NormIx {
            gamma: self.push(format!("{prefix}.gamma"), stage, TensorKind::Norm, [1, dim], Init::Ones),
            beta: self.push(format!("{prefix}.beta"), stage, TensorKind::Norm, [1, dim], Init::Zeros),
        }
    }

    fn block(&mut self, prefix: &str, stage: Stage, dim: usize) -> BlockIx {
        BlockIx {
            ln1: self.norm(&format!("{prefix}.ln1"), stage, dim),
            query: self.linear(&format!("{prefix}.attn.query"), stage, dim, dim),
            key: self.linear(&format!("{prefix}.attn.key"), stage, dim, dim),
            value: self.linear(&format!("{prefix}.attn.value"), stage, dim, dim),
            out: self.linear(&format!("{prefix}.attn.out"), stage, dim, dim),
            ln2: self.norm(&format!("{prefix}.ln2"), stage, dim),
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), stage, dim, 4 * dim),
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), stage, 4 * dim, dim),
        }
    }
}

fn build_schema(config: &ModelConfig) -> (Vec<TensorMeta>, Vec<Init>, Layout) {
    let mut b = SchemaBuilder {
        metas: Vec::new(),
        inits: Vec::new(),
    };
    let (de, dl) = (config.encoder_dim, config.lm_dim);
    let patch = b.linear("encoder.patch", Stage::Encoder, config.patch_dim(), de);
    let encoder_pos = b.push("encoder.pos".into(), Stage::Encoder, TensorKind::Embedding, [config.n_patches(), de], Init::Normal);
    let encoder_blocks = (0..config.encoder_layers)
        .map(|i| b.block(&format!("encoder.blocks.{i}"), Stage::Encoder, de))
        .collect();
    let pool = b.push(
        "projector.pool".into(),
        Stage::Projector,
        TensorKind::Weight,
        [config.n_visual_tokens, config.n_patches()],
        Init::Pool,
    );
    let projection = b.linear("projector.linear", Stage::Projector, de, dl);
    let token_embedding = b.push("lm.embed".into(), Stage::LmInput, TensorKind::Embedding, [config.vocab.len(), dl], Init::Normal);
    let lm_pos = b.push("lm.pos".into(), Stage::LmInput, TensorKind::Embedding, [config.max_seq_len, dl], Init::Normal);
    let lm_blocks = (0..config.lm_layers)
        .map(|i| b.block(&format!("lm.blocks.{i}"), Stage::LmBlock(i), dl))
        .collect();
    let final_norm = b.norm("lm.final_norm", Stage::LmOutput, dl);
    let head = b.push("lm.head".into(), Stage::LmOutput, TensorKind::Weight, [dl, config.vocab.len()], Init::Normal);
    let layout = Layout {
        patch,
        encoder_pos,
        encoder_blocks,
        pool,
        projection,
        token_embedding,
        lm_pos,
        lm_blocks,
        final_norm,
        head,
    };
    (b.metas, b.inits, layout)
}

/// Ordered tensor schema `(name, component, shape)` derived from a config.
pub fn tensor_schema(config: &ModelConfig) -> Vec<TensorMeta> {
    build_schema(config).0
}

/// Averaging matrix assigning each visual token a contiguous run of patches.
fn pooling_init<T: Float>(tokens: usize, patches: usize) -> Array2<T> {
    let mut m = Array2::zeros((tokens, patches));
    for t in 0..tokens {
        let (lo, hi) = (t * patches / tokens, (t + 1) * patches / tokens);
        let w = lit::<T>(1.0 / (hi - lo) as f64);
        for p in lo..hi {
            m[[t, p]] = w;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct Parameters<T> {
    config: ModelConfig,
    layout: Layout,
    metas: Vec<TensorMeta>,
    values: Vec<Array2<T>>,
}

// Layout is derived from the config, so it takes no part in equality.
impl<T: PartialEq> PartialEq for Parameters<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.metas == other.metas && self.values == other.values
    }
}

impl<T: Float> Parameters<T> {
    /// Normal(0, 0.02) weights and embeddings, zero biases, identity norms and
    /// an averaging pool, drawn in schema order from `init_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (metas, inits, layout) = build_schema(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let values = metas
            .iter()
            .zip(&inits)
            .map(|(m, init)| {
                let shape = (m.shape[0], m.shape[1]);
                match init {
                    Init::Normal => Array2::from_shape_simple_fn(shape, || lit(normal.sample(&mut rng))),
                    Init::Zeros => Array2::zeros(shape),
                    Init::Ones => Array2::ones(shape),
                    Init::Pool => pooling_init(shape.0, shape.1),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            metas,
            values,
        })
    }

    /// Builds parameters from explicit tensor values in schema order.
    pub fn from_values(config: &ModelConfig, values: Vec<Array2<T>>) -> Result<Self> {
        config.validate()?;
        let (metas, _, layout) = build_schema(config);
        if values.len() != metas.len() {
            return Err(Error::domain(format!("expected {} tensors, got {}", metas.len(), values.len())));
        }
        for (m, v) in metas.iter().zip(&values) {
            if v.dim() != (m.shape[0], m.shape[1]) {
                return Err(Error::domain(format!("tensor {} has shape {:?}, expected {:?}", m.name, v.dim(), m.shape)));
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            metas,
            values,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Array2<T> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<T> {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.metas.iter().position(|m| m.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Same parameters in another float type.
    pub fn cast<U: Float>(&self) -> Parameters<U> {
        Parameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            metas: self.metas.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f64(x.to_f64().expect("finite")).expect("castable")))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::tiny();
        let a = Parameters::<f32>::init(&cfg).unwrap();
        assert_eq!(a, Parameters::<f32>::init(&cfg).unwrap());
        let other = ModelConfig {
            init_seed: 1,
            ..cfg
        };
        let b = Parameters::<f32>::init(&other).unwrap();
        assert!(a.values().iter().zip(b.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn schema_matches_config() {
        let cfg = ModelConfig::default();
        let p = Parameters::<f32>::init(&cfg).unwrap();
        // patch(2) + pos + 2 blocks * 16 | pool + linear(2) | embed + pos + 2 * 16 + norm(2) + head
        assert_eq!(p.len(), 3 + 2 * 16 + 3 + 2 + 2 * 16 + 3);
        assert_eq!(p.get(p.layout().patch.weight).dim(), (768, 64));
        assert_eq!(p.get(p.layout().pool).dim(), (16, 16));
        assert_eq!(p.get(p.layout().head).dim(), (64, cfg.vocab.len()));
        for (m, v) in p.metas().iter().zip(p.values()) {
            assert_eq!(v.dim(), (m.shape[0], m.shape[1]), "{}", m.name);
        }
        let names: std::collections::BTreeSet<&str> = p.metas().iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names.len(), p.len());
    }

    #[test]
    fn init_statistics() {
        let p = Parameters::<f64>::init(&ModelConfig::default()).unwrap();
        let w = p.get(p.layout().patch.weight);
        let n = w.len() as f64;
        let std = (w.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        assert!((std - INIT_STD).abs() < 0.001, "{std}");
        let ln = p.layout().encoder_blocks[0].ln1;
        assert!(p.get(ln.gamma).iter().all(|&g| g == 1.0));
        assert!(p.get(ln.beta).iter().all(|&b| b == 0.0));
        assert!(p.get(p.layout().pool).iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn config_validation() {
        let bad_heads = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let too_many_tokens = ModelConfig {
            n_visual_tokens: 17,
            ..ModelConfig::default()
        };
        assert!(too_many_tokens.validate().is_err());
        let bad_patch = ModelConfig {
            patch_size: 12,
            ..ModelConfig::default()
        };
        assert!(bad_patch.validate().is_err());
    }

    #[test]
    fn mask_grammar() {
        let m = ComponentMask::parse("encoder,projector").unwrap();
        assert!(m.encoder && m.projector && m.lm == LmActivation::None);
        assert_eq!(ComponentMask::parse("lm-partial").unwrap().lm, LmActivation::Partial(1));
        assert!(ComponentMask::parse("lm,lm-partial").is_err());
        assert!(ComponentMask::parse("decoder").is_err());
        for text in ["encoder", "projector", "lm", "encoder,projector", "encoder,lm-partial", "projector,lm"] {
            assert_eq!(ComponentMask::parse(text).unwrap().label(), text);
        }
    }

    #[test]
    fn partial_mask_covers_last_block_and_output() {
        let p = Parameters::<f32>::init(&ModelConfig::default()).unwrap();
        let mask = ComponentMask::parse("lm-partial").unwrap();
        for m in p.metas() {
            let expect = m.name.starts_with("lm.blocks.1.") || m.name.starts_with("lm.final_norm") || m.name == "lm.head";
            assert_eq!(mask.is_active(m, 2), expect, "{}", m.name);
        }
    }
}
