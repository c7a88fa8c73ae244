use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{block_forward, init_weight, register_block, BlockIds, LoraSpec, Trainability};
use super::lora::linear;
use super::ModelConfig;
use crate::autodiff::{Graph, NodeId};
use crate::error::{ensure, Result};
use crate::params::{ParamId, ParamStore};
use crate::synth::render::REST_POSE;
use crate::synth::{VideoClip, NUM_JOINTS};
use crate::tensor::Matrix;

/// Frame-token transformer over keypoint clips.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    embed_weight: ParamId,
    embed_bias: ParamId,
    positions: ParamId,
    blocks: Vec<BlockIds>,
    proj_mid: ParamId,
    proj_high: ParamId,
    cls_weight: ParamId,
    cls_bias: ParamId,
    mid_tap: usize,
    frames: usize,
    joints: usize,
    heads: usize,
    input_center: Vec<f64>,
    input_scale: f64,
}

/// Graph handles of a batched visual forward pass; each is `B × ·`.
#[derive(Clone, Copy, Debug)]
pub struct VisualNodes {
    pub f_mid: NodeId,
    pub f_high: NodeId,
    pub logits: NodeId,
}

impl VisualEncoder {
    pub(crate) fn register(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        rng.set_stream(2);
        let scratch = cfg.train_from_scratch;
        let w = cfg.visual_width;
        let input = cfg.joints * 2;
        let embed_weight = store.insert("visual.embed.weight", init_weight(&mut rng, w, input, input), scratch, true);
        let embed_bias = store.insert("visual.embed.bias", Matrix::zeros(1, w), scratch, false);
        let positions = store.insert(
            "visual.positions",
            init_weight(&mut rng, cfg.frames, w, 1).scaled(0.1),
            scratch,
            false,
        );
        let train = Trainability {
            attention: scratch,
            mlp: scratch || cfg.train_mlp,
            norms: scratch,
        };
        let lora = LoraSpec {
            rank: cfg.lora_rank,
            alpha: cfg.lora_alpha,
        };
        let blocks = (0..cfg.visual_layers)
            .map(|i| {
                register_block(
                    store,
                    &mut rng,
                    &format!("visual.block{i}"),
                    w,
                    w * cfg.mlp_ratio,
                    train,
                    Some(lora),
                )
            })
            .collect();
        let e = cfg.embed_dim;
        let proj_mid = store.insert("visual.proj_mid", init_weight(&mut rng, e, w, w), true, true);
        let proj_high = store.insert("visual.proj_high", init_weight(&mut rng, e, w, w), true, true);
        let cls_weight = store.insert(
            "visual.cls.weight",
            init_weight(&mut rng, cfg.num_classes, e, e),
            true,
            true,
        );
        let cls_bias = store.insert("visual.cls.bias", Matrix::zeros(1, cfg.num_classes), true, false);

        let input_center = if cfg.joints == NUM_JOINTS {
            REST_POSE.iter().flatten().copied().collect()
        } else {
            vec![0.0; input]
        };
        Self {
            embed_weight,
            embed_bias,
            positions,
            blocks,
            proj_mid,
            proj_high,
            cls_weight,
            cls_bias,
            mid_tap: cfg.mid_tap(),
            frames: cfg.frames,
            joints: cfg.joints,
            heads: cfg.heads,
            input_center,
            input_scale: cfg.input_scale,
        }
    }

    pub fn mid_tap(&self) -> usize {
        self.mid_tap
    }

    pub fn proj_mid(&self) -> ParamId {
        self.proj_mid
    }

    pub fn proj_high(&self) -> ParamId {
        self.proj_high
    }

    /// `(B·T) × 2J` input rows, centred and scaled.
    fn input_rows(&self, clips: &[&VideoClip]) -> Result<Matrix> {
        ensure!(!clips.is_empty(), InvalidArgument, "empty clip batch");
        let width = self.joints * 2;
        let mut data = Vec::with_capacity(clips.len() * self.frames * width);
        for c in clips {
            ensure!(
                c.frames() == self.frames && c.joints() == self.joints,
                InvalidArgument,
                "clip is {}x{} but the encoder expects {}x{}",
                c.frames(),
                c.joints(),
                self.frames,
                self.joints
            );
            for (i, &v) in c.coords().iter().enumerate() {
                data.push((f64::from(v) - self.input_center[i % width]) * self.input_scale);
            }
        }
        Matrix::from_vec(clips.len() * self.frames, width, data)
    }

    /// Batched forward pass.
    ///
    /// `f_mid` is `P_mid` applied to the frame-mean after block `mid_tap`,
    /// `f_high` is `P_high` applied to the frame-mean after the last block,
    /// and the logits come from the classification head on `f_high`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        clips: &[&VideoClip],
        use_adapters: bool,
    ) -> Result<VisualNodes> {
        let x = g.constant(self.input_rows(clips)?);
        let h = linear(g, store, x, self.embed_weight, Some(self.embed_bias), None)?;
        let pos = g.param(store, self.positions);
        let mut h = g.add_tiled(h, pos)?;
        let mut mid = None;
        for (i, b) in self.blocks.iter().enumerate() {
            h = block_forward(g, store, b, h, self.frames, self.heads, use_adapters)?;
            if i + 1 == self.mid_tap {
                mid = Some(g.segment_mean(h, self.frames)?);
            }
        }
        let mid = mid.expect("mid tap validated at construction");
        let high = g.segment_mean(h, self.frames)?;
        let f_mid = linear(g, store, mid, self.proj_mid, None, None)?;
        let f_high = linear(g, store, high, self.proj_high, None, None)?;
        let logits = linear(g, store, f_high, self.cls_weight, Some(self.cls_bias), None)?;
        Ok(VisualNodes { f_mid, f_high, logits })
    }
}
