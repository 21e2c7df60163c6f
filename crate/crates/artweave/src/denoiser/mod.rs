//! The toy U-Net noise predictor with cross-art attention wiring.
//!
//! Every self-attention block runs shared attention over the target stream
//! (optionally joined by recorded semantic projections) followed by a
//! decoupled text cross-attention branch. A mean-pooled image embedding,
//! when present, conditions the network through the time embedding.
//! Parameters live in one flat vector with a documented layout so training,
//! checkpointing, and gradient checking all see the same bytes.

mod checkpoint;
mod dataset;
mod layers;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, LAYOUT_VERSION};
pub use dataset::{make_synthetic_dataset, style_family_of, StyleFamily};
pub use train::{epsilon_loss, epsilon_loss_and_grad, train_toy, TrainReport};

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::attention::ArtBnDirection;
use crate::diffusion::GuidanceConfig;
use crate::encoders::{ImageEmbedding, TextEmbedding};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Architecture hyperparameters. The parameter count is a pure function of
/// this struct; input resolution only selects which attention blocks run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of downsampling stages.
    pub depth: usize,
    /// Spatial sizes at which attention blocks are active.
    pub attn_resolutions: BTreeSet<usize>,
    pub heads: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 2,
            attn_resolutions: BTreeSet::from([16, 8]),
            heads: 4,
            time_embed_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig(
                "base_channels, depth, and heads must be positive".into(),
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(
                "time_embed_dim must be a positive even number".into(),
            ));
        }
        for level in 0..=self.depth {
            let ch = self.base_channels << level;
            if ch % self.heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "channel count {ch} at level {level} is not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Smallest input side the config can process.
    pub fn min_resolution(&self) -> usize {
        1 << self.depth
    }
}

/// Flat parameters plus the config that gives them meaning.
#[derive(Debug, Clone)]
pub struct DenoiserState {
    pub config: DenoiserConfig,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl DenoiserState {
    /// Seed-initialized state; identical `(config, seed)` pairs produce
    /// identical parameter vectors.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = net::ParamLayout::of(&config);
        Ok(Self {
            params: layout.init_params(seed),
            config,
            seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn layout(&self) -> net::ParamLayout {
        net::ParamLayout::of(&self.config)
    }

    /// Parameter count implied by a config without building a state.
    pub fn param_count_for(config: &DenoiserConfig) -> usize {
        net::ParamLayout::of(config).total
    }
}

/// Raw query/key/value projections captured at one attention layer of the
/// semantic stream.
#[derive(Debug, Clone)]
pub struct SemanticProjections {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

/// Everything the attention wiring consumes besides the latent: recorded
/// semantic projections, text embedding, optional image embedding, guidance
/// scales, and the diagnostic switches.
#[derive(Debug, Clone)]
pub struct CrossArtContext {
    pub semantic_features: Option<Vec<SemanticProjections>>,
    pub text_embedding: TextEmbedding,
    pub image_embedding: Option<ImageEmbedding>,
    pub guidance: GuidanceConfig,
    pub heads: usize,
    pub style_normalization: bool,
    pub artbn_direction: ArtBnDirection,
}

impl CrossArtContext {
    /// Target-only context: no semantic stream, normalization on.
    pub fn minimal(text_embedding: TextEmbedding, guidance: GuidanceConfig) -> Self {
        Self {
            semantic_features: None,
            text_embedding,
            image_embedding: None,
            guidance,
            heads: DenoiserConfig::default().heads,
            style_normalization: true,
            artbn_direction: ArtBnDirection::default(),
        }
    }

    pub fn with_image(mut self, image: ImageEmbedding) -> Self {
        self.image_embedding = Some(image);
        self
    }

    pub fn with_semantic(mut self, features: Vec<SemanticProjections>) -> Self {
        self.semantic_features = Some(features);
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }
}

fn check_input(state: &DenoiserState, z_t: &ImageTensor) -> Result<()> {
    let (_, c, h, w) = z_t.dims();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "denoiser operates on 3-channel tensors, got {c}"
        )));
    }
    let div = state.config.min_resolution();
    if h % div != 0 || w % div != 0 {
        return Err(Error::ShapeMismatch(format!(
            "resolution ({h}, {w}) must be divisible by 2^depth = {div}"
        )));
    }
    Ok(())
}

/// Predict the noise component of `z_t` at timestep `t` under the given
/// cross-art context. Deterministic in `(state, z_t, t, ctx)`.
pub fn denoise(
    state: &DenoiserState,
    z_t: &ImageTensor,
    t: usize,
    ctx: &CrossArtContext,
) -> Result<ImageTensor> {
    forward(state, z_t, t, ctx, false)
}

/// Diagnostic build: identical weights, but every active attention block is
/// an independently coded plain self-attention (no renormalization, no text
/// branch, no semantic stream).
pub fn denoise_vanilla(
    state: &DenoiserState,
    z_t: &ImageTensor,
    t: usize,
    ctx: &CrossArtContext,
) -> Result<ImageTensor> {
    forward(state, z_t, t, ctx, true)
}

fn forward(
    state: &DenoiserState,
    z_t: &ImageTensor,
    t: usize,
    ctx: &CrossArtContext,
    vanilla: bool,
) -> Result<ImageTensor> {
    check_input(state, z_t)?;
    let layout = state.layout();
    let (n, _, h, w) = z_t.dims();
    let mut out = ndarray::Array4::zeros(z_t.dims());
    for i in 0..n {
        let x = z_t.data().index_axis(ndarray::Axis(0), i).to_owned();
        let fwd = net::forward_single(
            &state.config,
            &layout,
            &state.params,
            &x,
            t,
            ctx,
            false,
            false,
            vanilla,
        )?;
        out.index_axis_mut(ndarray::Axis(0), i).assign(&fwd.eps);
    }
    debug_assert_eq!(out.dim(), (n, 3, h, w));
    ImageTensor::new(out)
}

/// Run the denoiser on the semantic stream and capture the raw q/k/v
/// projections at every active attention layer, in forward order.
///
/// The context must not itself carry semantic features, and the latent must
/// be a single sample at the same resolution the target pass will use.
pub fn record_semantic_pass(
    state: &DenoiserState,
    semantic_z_t: &ImageTensor,
    t: usize,
    ctx_minimal: &CrossArtContext,
) -> Result<Vec<SemanticProjections>> {
    check_input(state, semantic_z_t)?;
    let (n, ..) = semantic_z_t.dims();
    if n != 1 {
        return Err(Error::Context(format!(
            "semantic recording expects a single sample, got N = {n}"
        )));
    }
    let layout = state.layout();
    let x = semantic_z_t
        .data()
        .index_axis(ndarray::Axis(0), 0)
        .to_owned();
    let fwd = net::forward_single(
        &state.config,
        &layout,
        &state.params,
        &x,
        t,
        ctx_minimal,
        true,
        false,
        false,
    )?;
    Ok(fwd.captured.expect("recording pass returns captures"))
}

/// Number of attention layers that will run for a given input size.
pub fn attention_layer_count(config: &DenoiserConfig, height: usize, width: usize) -> usize {
    net::active_attention_count(config, height, width)
}
