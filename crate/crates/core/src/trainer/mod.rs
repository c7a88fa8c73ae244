//! Two-stage training: category-level objectives first, the fine-grained
//! alignment added in the second stage.

mod optim;
mod run;
mod schedule;

use std::collections::HashMap;

use rayon::prelude::*;

pub use optim::{clip_gradients, AdamW, Moments};
pub use run::{checkpoint_path, metrics_path, run_training, BestMarker, EpochMeta, RunOptions, TrainOutcome};
pub use schedule::{lr_at, stage_of, Components, FgTextMode, TrainConfig};

use crate::autodiff::Graph;
use crate::encoders::{EmbeddingKind, Model};
use crate::error::{ensure, Error, Result};
use crate::objectives::{total_loss, DupMask, LossBreakdown, LossParts, LossWeights, Stage};
use crate::params::{Gradients, ParamStore};
use crate::synth::{DatasetSplit, Sample, TokenId, VideoClip};
use crate::tensor::Matrix;

/// Frozen text embeddings used as alignment targets: the K category
/// prototypes followed by every distinct fine-grained text.
#[derive(Clone, Debug)]
pub struct TextTargets {
    prototypes: Matrix,
    fine: Matrix,
    fine_index: HashMap<Vec<TokenId>, usize>,
}

impl TextTargets {
    pub fn build(model: &Model, ds: &DatasetSplit) -> Result<Self> {
        let protos = ds
            .category_texts
            .iter()
            .map(|t| Ok(model.encode_text(&t.tokens, EmbeddingKind::Category)?.vector))
            .collect::<Result<Vec<_>>>()?;
        let mut fine_index = HashMap::new();
        let mut fine = Vec::new();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            if !fine_index.contains_key(&s.fg_text.tokens) {
                fine_index.insert(s.fg_text.tokens.clone(), fine.len());
                fine.push(model.encode_text(&s.fg_text.tokens, EmbeddingKind::FineGrained)?.vector);
            }
        }
        Ok(Self {
            prototypes: Matrix::from_rows(&protos)?,
            fine: Matrix::from_rows(&fine)?,
            fine_index,
        })
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    fn fine_row(&self, s: &Sample) -> Result<usize> {
        self.fine_index
            .get(&s.fg_text.tokens)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no embedding for text {:?}", s.fg_text.text)))
    }

    /// Text row targeted by the fine-grained objective for `s`, and the
    /// matrix it indexes.
    fn target(&self, s: &Sample, mode: FgTextMode) -> Result<(usize, &Matrix)> {
        match mode {
            FgTextMode::FineGrained => Ok((self.fine_row(s)?, &self.fine)),
            FgTextMode::ClassLevel => {
                let c = s.category_id();
                ensure!(
                    c < self.prototypes.rows(),
                    InvalidArgument,
                    "category {c} has no prototype"
                );
                Ok((c, &self.prototypes))
            }
        }
    }

    /// Bank of candidate texts for retrieval under `mode`, plus each
    /// sample's true row.
    pub fn retrieval_bank(&self, samples: &[Sample], mode: FgTextMode) -> Result<(Matrix, Vec<usize>)> {
        let pairing = samples
            .iter()
            .map(|s| Ok(self.target(s, mode)?.0))
            .collect::<Result<Vec<_>>>()?;
        let bank = match mode {
            FgTextMode::FineGrained => self.fine.clone(),
            FgTextMode::ClassLevel => self.prototypes.clone(),
        };
        Ok((bank, pairing))
    }
}

/// Loss weights actually in force once ablation switches are applied.
pub fn effective_weights(cfg: &TrainConfig) -> LossWeights {
    let mut w = cfg.loss.clone();
    if !cfg.components.fg_sa {
        w.lambda_fg = 0.0;
    }
    if !cfg.components.cp_a {
        w.lambda_cp = 0.0;
    }
    w
}

/// Forward pass of one micro-batch and, when `with_grads`, the gradients
/// of the stage-masked total.
pub fn batch_loss(
    model: &Model,
    targets: &TextTargets,
    batch: &[&Sample],
    cfg: &TrainConfig,
    stage: Stage,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    ensure!(!batch.is_empty(), InvalidArgument, "empty micro-batch");
    let mut g = if with_grads { Graph::new() } else { Graph::inference() };
    let clips: Vec<&VideoClip> = batch.iter().map(|s| &s.clip).collect();
    let nodes = model.visual.forward(&mut g, &model.params, &clips, true)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.category_id()).collect();
    let mode = cfg.components.fg_text;

    let mut keys = Vec::with_capacity(batch.len());
    let mut rows = Vec::with_capacity(batch.len());
    for s in batch {
        let (k, m) = targets.target(s, mode)?;
        keys.push(k);
        rows.push(m.row(k).to_vec());
    }
    let t_fg = g.constant(Matrix::from_rows(&rows)?);
    let w = effective_weights(cfg);
    let exclusions = w.mask_duplicates.then(|| DupMask::from_keys(&keys).exclusions());
    let diag: Vec<usize> = (0..batch.len()).collect();
    let mut l_fg = g.info_nce(nodes.f_mid, t_fg, &diag, exclusions.as_deref(), w.fg_temperature())?;
    if w.symmetric {
        let back = g.info_nce(t_fg, nodes.f_mid, &diag, exclusions.as_deref(), w.fg_temperature())?;
        l_fg = g.weighted_sum(&[(l_fg, 0.5), (back, 0.5)])?;
    }
    let protos = g.constant(targets.prototypes.clone());
    let l_cp = g.info_nce(nodes.f_high, protos, &labels, None, w.cp_temperature())?;
    let l_cls = g.cross_entropy(nodes.logits, &labels)?;

    let parts = LossParts {
        l_cls: g.scalar(l_cls),
        l_fg: g.scalar(l_fg),
        l_cp: g.scalar(l_cp),
    };
    let breakdown = total_loss(parts, &w, stage);
    let fg_weight = if stage == Stage::Stage2 { w.lambda_fg } else { 0.0 };
    let total = g.weighted_sum(&[(l_cls, 1.0), (l_fg, fg_weight), (l_cp, w.lambda_cp)])?;
    let grads = if with_grads {
        Some(g.backward(total, model.params.len())?)
    } else {
        None
    };
    Ok((breakdown, grads))
}

/// Optimizer position plus everything needed to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: u64,
    /// Next epoch to run.
    pub epoch: usize,
    pub stage: Stage,
    pub optimizer: AdamW,
    pub best: Option<(usize, f64)>,
    pub val_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            epoch: 0,
            stage: stage_of(0, cfg),
            optimizer: AdamW::new(params),
            best: None,
            val_history: Vec::new(),
        }
    }

    /// Records a validation score; strictly better scores replace the best,
    /// so ties keep the earliest epoch. Returns whether `epoch` is now best.
    pub fn observe_validation(&mut self, epoch: usize, top1: f64) -> bool {
        self.val_history.push(top1);
        let better = self.best.is_none_or(|(_, b)| top1 > b);
        if better {
            self.best = Some((epoch, top1));
        }
        better
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimizer step over `micro_batches` (gradient accumulation).
///
/// Micro-batch gradients are computed in parallel and summed in order, so
/// the result does not depend on scheduling.
pub fn train_step(
    model: &mut Model,
    targets: &TextTargets,
    micro_batches: &[Vec<&Sample>],
    state: &mut TrainState,
    cfg: &TrainConfig,
    train_len: usize,
) -> Result<StepOutcome> {
    ensure!(!micro_batches.is_empty(), InvalidArgument, "train_step needs a micro-batch");
    let stage = state.stage;
    let results = micro_batches
        .par_iter()
        .map(|mb| batch_loss(model, targets, mb, cfg, stage, true))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mut grads = Gradients::new(model.params.len());
    let mut sum = LossParts {
        l_cls: 0.0,
        l_fg: 0.0,
        l_cp: 0.0,
    };
    for (b, g) in &results {
        sum.l_cls += b.l_cls;
        sum.l_fg += b.l_fg;
        sum.l_cp += b.l_cp;
        grads.merge(g.as_ref().expect("requested gradients"));
    }
    grads.scale(1.0 / n);
    let parts = LossParts {
        l_cls: sum.l_cls / n,
        l_fg: sum.l_fg / n,
        l_cp: sum.l_cp / n,
    };
    let loss = total_loss(parts, &effective_weights(cfg), stage);
    if ![loss.l_cls, loss.l_fg, loss.l_cp, loss.total].iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence {
            step: state.step,
            detail: format!("non-finite loss {loss:?}"),
        });
    }
    let lr = cfg.lr_for_step(state.step as usize, train_len)?;
    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm).map_err(|e| match e {
        Error::Divergence { detail, .. } => {
            let names: Vec<&str> = grads
                .iter()
                .filter(|(_, g)| !g.is_finite())
                .map(|(id, _)| model.params.get(id).name.as_str())
                .collect();
            Error::Divergence {
                step: state.step,
                detail: format!("{detail}; offending parameters: {names:?}"),
            }
        }
        other => other,
    })?;
    state.optimizer.step(&mut model.params, &grads, lr, cfg);
    state.step += 1;
    Ok(StepOutcome { loss, lr, grad_norm })
}
