use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stage_of, train_step, AdamW, Moments, TextTargets, TrainConfig, TrainState};
use crate::checkpoint::{self, ContainerKind};
use crate::encoders::Model;
use crate::error::{ensure, Error, Result};
use crate::eval::{evaluate_split, EvalMetrics};
use crate::fsutil;
use crate::metrics::{self, MetricsRecord, MetricsWriter, RecordKind};
use crate::objectives::{LossBreakdown, Stage};
use crate::synth::{DatasetSplit, Sample};
use crate::tensor::Matrix;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub run_id: String,
    /// Where checkpoints, metrics and the best-checkpoint marker go. `None`
    /// keeps everything in memory.
    pub run_dir: Option<PathBuf>,
    /// Continue from the newest complete epoch checkpoint in `run_dir`.
    pub resume: bool,
    /// Return after this epoch as if interrupted (checkpoints are written).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_top1: f64,
    /// Test metrics of the selected checkpoint; `None` when stopped early.
    pub test: Option<EvalMetrics>,
    pub val_history: Vec<f64>,
    pub best_model: Model,
    /// Records produced in this session (after resume truncation).
    pub records: Vec<MetricsRecord>,
    pub completed: bool,
}

/// Stored in every epoch checkpoint's header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMeta {
    pub run_id: String,
    pub epoch: usize,
    pub step: u64,
    pub stage: Stage,
    pub val_top1: f64,
    pub train: TrainConfig,
}

/// Stored in the optimizer sidecar header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimMeta {
    step: u64,
    next_epoch: usize,
    best: Option<(usize, f64)>,
    val_history: Vec<f64>,
    /// Update counts per parameter name.
    counts: BTreeMap<String, u64>,
}

/// Marker pointing at the selected checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMarker {
    pub epoch: usize,
    pub val_top1: f64,
    pub checkpoint: String,
    pub test: Option<EvalMetrics>,
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch-{epoch:03}.ckpt"))
}

fn optim_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch-{epoch:03}.optim"))
}

pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.jsonl")
}

/// Training order of epoch `epoch`: a permutation seeded by `(seed, epoch)`.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn encode_optimizer(model: &Model, state: &TrainState) -> Result<Vec<u8>> {
    let mut names = Vec::new();
    let mut counts = BTreeMap::new();
    for (id, p) in model.params.iter() {
        if let Some(m) = state.optimizer.get(id) {
            names.push((format!("{}.m", p.name), &m.m));
            names.push((format!("{}.v", p.name), &m.v));
            counts.insert(p.name.clone(), m.t);
        }
    }
    let tensors: Vec<(&str, &Matrix)> = names.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    let meta = OptimMeta {
        step: state.step,
        next_epoch: state.epoch,
        best: state.best,
        val_history: state.val_history.clone(),
        counts,
    };
    checkpoint::encode(
        ContainerKind::Optimizer,
        &model.config,
        &tensors,
        serde_json::to_value(meta)?,
    )
}

fn decode_optimizer(bytes: &[u8], model: &Model, cfg: &TrainConfig) -> Result<TrainState> {
    let (header, tensors) = checkpoint::decode(bytes)?;
    ensure!(
        header.kind == ContainerKind::Optimizer && header.model_config == model.config,
        Checkpoint,
        "optimizer sidecar does not belong to this model"
    );
    let meta: OptimMeta = serde_json::from_value(header.meta)
        .map_err(|e| Error::Checkpoint(format!("optimizer metadata: {e}")))?;
    let mut by_name: BTreeMap<String, Matrix> = tensors.into_iter().collect();
    let mut moments = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        if !p.trainable {
            moments.push(None);
            continue;
        }
        let mut take = |suffix: &str| {
            let key = format!("{}.{suffix}", p.name);
            by_name
                .remove(&key)
                .filter(|m| m.shape() == p.value.shape())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer sidecar lacks a valid {key}")))
        };
        let m = take("m")?;
        let v = take("v")?;
        let t = *meta
            .counts
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("no update count for {}", p.name)))?;
        moments.push(Some(Moments { m, v, t }));
    }
    ensure!(
        by_name.is_empty(),
        Checkpoint,
        "optimizer sidecar has unexpected tensors {:?}",
        by_name.keys().collect::<Vec<_>>()
    );
    Ok(TrainState {
        step: meta.step,
        epoch: meta.next_epoch,
        stage: stage_of(meta.next_epoch.min(cfg.epochs - 1), cfg),
        optimizer: AdamW { moments },
        best: meta.best,
        val_history: meta.val_history,
    })
}

fn latest_epoch(run_dir: &Path, epochs: usize) -> Option<usize> {
    (0..epochs)
        .rev()
        .find(|&e| checkpoint_path(run_dir, e).exists() && optim_path(run_dir, e).exists())
}

fn mean_loss(losses: &[LossBreakdown], stage: Stage) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    let mut out = LossBreakdown {
        l_cls: 0.0,
        l_fg: 0.0,
        l_cp: 0.0,
        total: 0.0,
        stage,
    };
    for l in losses {
        out.l_cls += l.l_cls;
        out.l_fg += l.l_fg;
        out.l_cp += l.l_cp;
        out.total += l.total;
    }
    out.l_cls /= n;
    out.l_fg /= n;
    out.l_cp /= n;
    out.total /= n;
    out
}

struct Sink {
    writer: Option<MetricsWriter>,
    records: Vec<MetricsRecord>,
}

impl Sink {
    fn emit(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.write(&r)?;
        }
        self.records.push(r);
        Ok(())
    }
}

fn check_compatible(model: &Model, ds: &DatasetSplit) -> Result<()> {
    let c = &model.config;
    ensure!(
        c.num_classes == ds.num_categories() && c.frames == ds.frames() && c.joints == ds.joints(),
        Config,
        "model expects {} classes, {} frames, {} joints but the dataset has {}, {}, {}",
        c.num_classes,
        c.frames,
        c.joints,
        ds.num_categories(),
        ds.frames(),
        ds.joints()
    );
    Ok(())
}

/// Full training run with per-epoch validation and best-checkpoint
/// selection (highest validation top-1, earliest epoch on ties).
pub fn run_training(cfg: &TrainConfig, ds: &DatasetSplit, mut model: Model, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&model, ds)?;
    ensure!(!ds.train.is_empty() && !ds.val.is_empty(), Config, "train and val splits must be non-empty");
    let targets = TextTargets::build(&model, ds)?;
    let mode = cfg.components.fg_text;
    let train_len = ds.train.len();

    let mut state = TrainState::new(&model.params, cfg);
    let mut best_params = None;
    let mut writer = None;
    if let Some(dir) = &opts.run_dir {
        fsutil::create_dir_all(&dir.join("checkpoints"))?;
        let mpath = metrics_path(dir);
        let resume_from = if opts.resume { latest_epoch(dir, cfg.epochs) } else { None };
        if let Some(e) = resume_from {
            let (loaded, _) = checkpoint::load_model(&checkpoint_path(dir, e), Some(&model.config))?;
            model = loaded;
            state = decode_optimizer(&fsutil::read(&optim_path(dir, e))?, &model, cfg)
                .map_err(|err| Error::Checkpoint(format!("{}: {err}", optim_path(dir, e).display())))?;
            if let Some((b, _)) = state.best {
                let (bm, _) = checkpoint::load_model(&checkpoint_path(dir, b), Some(&model.config))?;
                best_params = Some(bm.params);
            }
            metrics::truncate_records(&mpath, |r| r.kind != RecordKind::Final && r.epoch <= e)?;
        } else {
            fsutil::atomic_write(&mpath, b"")?;
        }
        writer = Some(MetricsWriter::append_to(&mpath)?);
    }
    let mut sink = Sink {
        writer,
        records: Vec::new(),
    };

    let mut last_lr = 0.0;
    for epoch in state.epoch..cfg.epochs {
        state.stage = stage_of(epoch, cfg);
        let order = epoch_order(cfg.seed, epoch, train_len);
        let micro: Vec<Vec<&Sample>> = order
            .chunks(cfg.batch_size)
            .map(|c| c.iter().map(|&i| &ds.train[i]).collect())
            .collect();
        let mut losses = Vec::new();
        for group in micro.chunks(cfg.grad_accum_steps) {
            let out = train_step(&mut model, &targets, group, &mut state, cfg, train_len)?;
            last_lr = out.lr;
            losses.push(out.loss);
            sink.emit(MetricsRecord::new(
                &opts.run_id,
                RecordKind::Step,
                state.step,
                epoch,
                out.lr,
                &out.loss,
            ))?;
        }
        let val = evaluate_split(&model, &targets, &ds.val, mode)?;
        if state.observe_validation(epoch, val.top1) {
            best_params = Some(model.params.clone());
        }
        state.epoch = epoch + 1;
        let mut rec = MetricsRecord::new(
            &opts.run_id,
            RecordKind::Epoch,
            state.step,
            epoch,
            last_lr,
            &mean_loss(&losses, state.stage),
        );
        rec.eval = Some(val.keyed("val"));
        sink.emit(rec)?;

        if let Some(dir) = &opts.run_dir {
            let meta = EpochMeta {
                run_id: opts.run_id.clone(),
                epoch,
                step: state.step,
                stage: state.stage,
                val_top1: val.top1,
                train: cfg.clone(),
            };
            fsutil::atomic_write_all(&[
                (optim_path(dir, epoch), encode_optimizer(&model, &state)?),
                (
                    checkpoint_path(dir, epoch),
                    checkpoint::encode_model(&model, serde_json::to_value(meta)?)?,
                ),
            ])?;
        }
        if opts.stop_after_epoch == Some(epoch) && epoch + 1 < cfg.epochs {
            let (best_epoch, best_val_top1) = state.best.expect("validated at least once");
            let mut best_model = model.clone();
            best_model.params = best_params.expect("best recorded");
            return Ok(TrainOutcome {
                best_epoch,
                best_val_top1,
                test: None,
                val_history: state.val_history,
                best_model,
                records: sink.records,
                completed: false,
            });
        }
    }

    let (best_epoch, best_val_top1) = state
        .best
        .ok_or_else(|| Error::Config("no epoch was run".into()))?;
    let mut best_model = model.clone();
    best_model.params = best_params.expect("best recorded with state.best");
    let test = if ds.test.is_empty() {
        None
    } else {
        Some(evaluate_split(&best_model, &targets, &ds.test, mode)?)
    };
    let last = sink.records.last().cloned();
    let mut fin = MetricsRecord::new(
        &opts.run_id,
        RecordKind::Final,
        state.step,
        best_epoch,
        last.as_ref().map_or(0.0, |r| r.lr),
        &LossBreakdown {
            l_cls: last.as_ref().map_or(0.0, |r| r.l_cls),
            l_fg: last.as_ref().map_or(0.0, |r| r.l_fg),
            l_cp: last.as_ref().map_or(0.0, |r| r.l_cp),
            total: last.as_ref().map_or(0.0, |r| r.total),
            stage: stage_of(best_epoch, cfg),
        },
    );
    let mut eval = BTreeMap::from([("best_val_top1".to_string(), best_val_top1)]);
    if let Some(t) = &test {
        eval.extend(t.keyed("test"));
    }
    fin.eval = Some(eval);
    sink.emit(fin)?;

    if let Some(dir) = &opts.run_dir {
        let marker = BestMarker {
            epoch: best_epoch,
            val_top1: best_val_top1,
            checkpoint: format!("checkpoints/epoch-{best_epoch:03}.ckpt"),
            test,
        };
        let best_bytes = fsutil::read(&checkpoint_path(dir, best_epoch))?;
        fsutil::atomic_write_all(&[
            (dir.join("best.ckpt"), best_bytes),
            (dir.join("best.json"), serde_json::to_vec_pretty(&marker)?),
        ])?;
    }
    Ok(TrainOutcome {
        best_epoch,
        best_val_top1,
        test,
        val_history: state.val_history,
        best_model,
        records: sink.records,
        completed: true,
    })
}
