use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{block_forward, init_weight, register_block, BlockIds, Trainability};
use super::lora::linear;
use super::{EmbeddingKind, ModelConfig, SemanticEmbedding};
use crate::autodiff::Graph;
use crate::error::{ensure, Result};
use crate::params::{ParamId, ParamStore};
use crate::synth::TokenId;
use crate::tensor::Matrix;

const FROZEN: Trainability = Trainability {
    attention: false,
    mlp: false,
    norms: false,
};

/// Randomly initialized, permanently frozen text encoder: token and
/// position tables, `text_layers` transformer blocks, mean pooling and a
/// projection into the joint space.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    token_table: ParamId,
    positions: ParamId,
    blocks: Vec<BlockIds>,
    projection: ParamId,
    vocab_size: usize,
    max_len: usize,
    heads: usize,
}

impl TextEncoder {
    pub(crate) fn register(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        rng.set_stream(1);
        let w = cfg.text_width;
        let token_table = store.insert("text.token_table", init_weight(&mut rng, vocab_size, w, 1), false, false);
        let positions = store.insert(
            "text.positions",
            init_weight(&mut rng, cfg.text_max_len, w, 1).scaled(0.1),
            false,
            false,
        );
        let blocks = (0..cfg.text_layers)
            .map(|i| register_block(store, &mut rng, &format!("text.block{i}"), w, w * cfg.mlp_ratio, FROZEN, None))
            .collect();
        let projection = store.insert("text.projection", init_weight(&mut rng, cfg.embed_dim, w, w), false, true);
        Self {
            token_table,
            positions,
            blocks,
            projection,
            vocab_size,
            max_len: cfg.text_max_len,
            heads: cfg.text_heads,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Mean-pooled, projected embedding of `tokens`. With zero blocks this
    /// is exactly `projection · mean(token rows)`.
    pub fn encode(&self, store: &ParamStore, tokens: &[TokenId], kind: EmbeddingKind) -> Result<SemanticEmbedding> {
        ensure!(!tokens.is_empty(), InvalidArgument, "cannot encode an empty token sequence");
        ensure!(
            tokens.len() <= self.max_len,
            InvalidArgument,
            "{} tokens exceed text_max_len {}",
            tokens.len(),
            self.max_len
        );
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(crate::Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = store.value(self.token_table);
        let pos = store.value(self.positions);
        let width = table.cols();
        let mut x = Matrix::zeros(tokens.len(), width);
        for (i, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            row.copy_from_slice(table.row(t as usize));
            if !self.blocks.is_empty() {
                for (r, p) in row.iter_mut().zip(pos.row(i)) {
                    *r += p;
                }
            }
        }
        let mut g = Graph::inference();
        let mut h = g.constant(x);
        for b in &self.blocks {
            h = block_forward(&mut g, store, b, h, tokens.len(), self.heads, false)?;
        }
        let pooled = g.segment_mean(h, tokens.len())?;
        let out = linear(&mut g, store, pooled, self.projection, None, None)?;
        let vector = g.value(out).row(0).to_vec();
        ensure!(
            vector.iter().all(|v| v.is_finite()),
            DegenerateInput,
            "text embedding is not finite"
        );
        Ok(SemanticEmbedding { vector, kind })
    }
}
