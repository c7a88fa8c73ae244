//! Frozen text encoder, hierarchical visual encoder with mid- and
//! high-level taps, low-rank adapters and projection heads into the joint
//! embedding space.
//!
//! All parameters of both encoders live in one [`ParamStore`] owned by
//! [`Model`]; the encoders hold typed handles into it.

mod block;
mod lora;
mod text;
mod visual;

use serde::{Deserialize, Serialize};

pub use lora::{lora_apply, AdapterIds, LoraAdapter};
pub use text::TextEncoder;
pub use visual::{VisualEncoder, VisualNodes};

use crate::autodiff::Graph;
use crate::error::{ensure, Result};
use crate::params::{ParamId, ParamStore};
use crate::synth::{TokenId, VideoClip, Vocabulary, NUM_JOINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub joints: usize,
    pub num_classes: usize,
    /// Width of visual frame tokens.
    pub visual_width: usize,
    pub visual_layers: usize,
    /// Block after which the mid-level feature is tapped; `None` means
    /// `ceil(visual_layers / 2)`.
    pub mid_layer: Option<usize>,
    pub heads: usize,
    /// MLP hidden width as a multiple of the token width.
    pub mlp_ratio: usize,
    /// Joint embedding dimension shared by video and text.
    pub embed_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Train the visual MLP sublayers alongside the adapters.
    pub train_mlp: bool,
    /// Train every visual parameter instead of adapters + MLPs.
    pub train_from_scratch: bool,
    /// Keypoints are centred on the rest pose and multiplied by this.
    pub input_scale: f64,
    pub text_width: usize,
    /// `0` selects bag-of-tokens mode: projected mean of token embeddings.
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            joints: NUM_JOINTS,
            num_classes: 16,
            visual_width: 32,
            visual_layers: 2,
            mid_layer: None,
            heads: 2,
            mlp_ratio: 4,
            embed_dim: 64,
            lora_rank: 8,
            lora_alpha: 8.0,
            train_mlp: true,
            train_from_scratch: false,
            input_scale: 100.0,
            text_width: 32,
            text_layers: 1,
            text_heads: 2,
            text_max_len: 16,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn mid_tap(&self) -> usize {
        self.mid_layer.unwrap_or(self.visual_layers.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.frames >= 2, Config, "frames must be >= 2, got {}", self.frames);
        ensure!(self.joints >= 1, Config, "joints must be >= 1");
        ensure!(self.num_classes >= 1, Config, "num_classes must be >= 1");
        ensure!(
            self.visual_layers >= 2,
            Config,
            "visual_layers = {} leaves no room for a mid-level tap (need 1 <= mid < layers)",
            self.visual_layers
        );
        let m = self.mid_tap();
        ensure!(
            m >= 1 && m < self.visual_layers,
            Config,
            "mid_layer {m} must satisfy 1 <= mid_layer < visual_layers ({})",
            self.visual_layers
        );
        ensure!(
            self.heads >= 1 && self.visual_width.is_multiple_of(self.heads),
            Config,
            "visual_width {} must be divisible by heads {}",
            self.visual_width,
            self.heads
        );
        ensure!(
            self.text_heads >= 1 && self.text_width.is_multiple_of(self.text_heads),
            Config,
            "text_width {} must be divisible by text_heads {}",
            self.text_width,
            self.text_heads
        );
        ensure!(self.mlp_ratio >= 1, Config, "mlp_ratio must be >= 1");
        ensure!(self.embed_dim >= 1, Config, "embed_dim must be >= 1");
        ensure!(self.lora_rank >= 1, Config, "lora_rank must be >= 1");
        ensure!(
            self.lora_alpha > 0.0 && self.lora_alpha.is_finite(),
            Config,
            "lora_alpha must be > 0"
        );
        ensure!(
            self.input_scale > 0.0 && self.input_scale.is_finite(),
            Config,
            "input_scale must be > 0"
        );
        ensure!(self.text_max_len >= 1, Config, "text_max_len must be >= 1");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    FineGrained,
    Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEmbedding {
    pub vector: Vec<f64>,
    pub kind: EmbeddingKind,
}

/// Per-clip features; see [`VisualEncoder::forward`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalFeatures {
    pub f_mid: Vec<f64>,
    pub f_high: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Text encoder, visual encoder and their shared parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
}

impl Model {
    /// Validates `config` and initializes every parameter from
    /// `config.init_seed`. The two encoders draw from separate streams, so
    /// the text encoder does not depend on visual settings.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let text = TextEncoder::register(&mut params, &config, Vocabulary::global().len());
        let visual = VisualEncoder::register(&mut params, &config);
        Ok(Self {
            config,
            params,
            text,
            visual,
        })
    }

    /// Every parameter the optimizer may touch.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        self.params.trainable_ids()
    }

    pub fn encode_text(&self, tokens: &[TokenId], kind: EmbeddingKind) -> Result<SemanticEmbedding> {
        self.text.encode(&self.params, tokens, kind)
    }

    /// Inference forward pass of one clip.
    pub fn encode_video(&self, clip: &VideoClip) -> Result<HierarchicalFeatures> {
        self.encode_video_with(clip, true)
    }

    /// Like [`Model::encode_video`]; `use_adapters = false` bypasses every
    /// adapter.
    pub fn encode_video_with(&self, clip: &VideoClip, use_adapters: bool) -> Result<HierarchicalFeatures> {
        let mut g = Graph::inference();
        let nodes = self.visual.forward(&mut g, &self.params, &[clip], use_adapters)?;
        Ok(HierarchicalFeatures {
            f_mid: g.value(nodes.f_mid).row(0).to_vec(),
            f_high: g.value(nodes.f_high).row(0).to_vec(),
            logits: g.value(nodes.logits).row(0).to_vec(),
        })
    }
}
