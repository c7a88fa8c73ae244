use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mgalign_core::checkpoint;
use mgalign_core::config::resolve;
use mgalign_core::eval::{evaluate_split, run_ablation};
use mgalign_core::fsutil;
use mgalign_core::synth::{build_dataset, io as dsio, DatasetSplit, Split};
use mgalign_core::trainer::{run_training, EpochMeta, RunOptions, TextTargets};
use mgalign_core::{Error, FgTextMode, Model, RunConfig};
use serde_json::json;

use crate::{Cli, Command, ConfigArgs};

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(x) = self.stage1_fraction {
            overrides.push(format!("train.stage1_fraction={x:?}"));
        }
        if let Some(n) = self.epochs {
            overrides.push(format!("train.epochs={n}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
            overrides.push(format!("model.init_seed={s}"));
        }
        if let Some(id) = &self.run_id {
            overrides.push(format!("run_id={}", toml_string(id)));
        }
        Ok(resolve(self.preset.as_deref(), self.config.as_deref(), &overrides)?)
    }

    fn is_empty(&self) -> bool {
        self.config.is_none()
            && self.preset.is_none()
            && self.overrides.is_empty()
            && self.stage1_fraction.is_none()
            && self.epochs.is_none()
            && self.seed.is_none()
            && self.run_id.is_none()
    }
}

/// A TOML basic string; JSON string escaping is a subset of it.
fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::Generate { cfg, out } => generate(&root, &cfg, out),
        Command::Train {
            cfg,
            dataset,
            run_dir,
            resume,
            stop_after_epoch,
        } => train(&root, &cfg, dataset, run_dir, resume, stop_after_epoch),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            cfg,
        } => eval(&root, &checkpoint, dataset, &split, &cfg),
        Command::Ablate { cfg, parallel, out } => ablate(&root, &cfg, parallel, out),
        Command::InspectCheckpoint { checkpoint } => inspect(&checkpoint),
    }
}

fn generate(root: &Path, args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = out.unwrap_or_else(|| root.join("dataset"));
    let ds = build_dataset(&cfg.dataset)?;
    let digest = dsio::write_dataset(&dir, &ds)?;
    print_json(&json!({
        "dataset": dir.display().to_string(),
        "digest": digest,
        "categories": ds.num_categories(),
        "train": ds.train.len(),
        "val": ds.val.len(),
        "test": ds.test.len(),
    }))
}

/// Reads the dataset at `dir` and checks it was generated from `cfg`.
fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<(DatasetSplit, String)> {
    if !dir.join(dsio::MANIFEST_FILE).exists() {
        return Err(Error::StaleDataset(format!(
            "no dataset manifest in {} (run `mgalign generate` first)",
            dir.display()
        ))
        .into());
    }
    let (ds, digest) = dsio::read_dataset(dir)?;
    if ds.config != cfg.dataset {
        return Err(Error::StaleDataset(format!(
            "dataset in {} was generated from a different dataset config; regenerate it",
            dir.display()
        ))
        .into());
    }
    if let Some(want) = &cfg.dataset_digest {
        if *want != digest {
            return Err(Error::StaleDataset(format!("manifest digest {digest} does not match dataset_digest {want}")).into());
        }
    }
    Ok((ds, digest))
}

fn train(
    root: &Path,
    args: &ConfigArgs,
    dataset: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    resume: bool,
    stop_after_epoch: Option<usize>,
) -> Result<()> {
    let cfg = args.resolve()?;
    let ds_dir = dataset.unwrap_or_else(|| root.join("dataset"));
    let (ds, digest) = load_dataset(&ds_dir, &cfg)?;
    let run_dir = run_dir.unwrap_or_else(|| root.join("runs").join(&cfg.run_id));

    let resolved = cfg.to_toml()?;
    eprintln!("# resolved config\n{resolved}");
    fsutil::create_dir_all(&run_dir)?;
    fsutil::atomic_write(&run_dir.join("config.resolved.toml"), resolved.as_bytes())?;

    let model = Model::new(cfg.model.clone())?;
    let opts = RunOptions {
        run_id: cfg.run_id.clone(),
        run_dir: Some(run_dir.clone()),
        resume,
        stop_after_epoch,
    };
    let out = run_training(&cfg.train, &ds, model, &opts)
        .with_context(|| format!("training run {}", cfg.run_id))?;
    print_json(&json!({
        "run_id": cfg.run_id,
        "run_dir": run_dir.display().to_string(),
        "dataset_digest": digest,
        "completed": out.completed,
        "best_epoch": out.best_epoch,
        "best_val_top1": out.best_val_top1,
        "test": out.test.map(|t| t.keyed("test")),
        "best_checkpoint": out.completed.then(|| run_dir.join("best.ckpt").display().to_string()),
    }))
}

fn eval(root: &Path, ckpt: &Path, dataset: Option<PathBuf>, split: &str, args: &ConfigArgs) -> Result<()> {
    let split: Split = split.parse()?;
    let expected = if args.is_empty() { None } else { Some(args.resolve()?.model) };
    let (model, meta) = checkpoint::load_model(ckpt, expected.as_ref())?;
    let meta: Option<EpochMeta> = serde_json::from_value(meta).ok();
    let mode = meta.as_ref().map_or(FgTextMode::FineGrained, |m| m.train.components.fg_text);

    let ds_dir = dataset.unwrap_or_else(|| root.join("dataset"));
    if !ds_dir.join(dsio::MANIFEST_FILE).exists() {
        return Err(Error::StaleDataset(format!("no dataset manifest in {}", ds_dir.display())).into());
    }
    let (ds, digest) = dsio::read_dataset(&ds_dir)?;
    let c = &model.config;
    if c.num_classes != ds.num_categories() || c.frames != ds.frames() || c.joints != ds.joints() {
        return Err(Error::StaleDataset(format!(
            "checkpoint expects {} classes x {} frames x {} joints, dataset has {} x {} x {}",
            c.num_classes,
            c.frames,
            c.joints,
            ds.num_categories(),
            ds.frames(),
            ds.joints()
        ))
        .into());
    }
    let targets = TextTargets::build(&model, &ds)?;
    let metrics = evaluate_split(&model, &targets, ds.split(split), mode)?;
    let mut out = serde_json::Map::new();
    out.insert("checkpoint".into(), json!(ckpt.display().to_string()));
    out.insert("split".into(), json!(split.name()));
    out.insert("dataset_digest".into(), json!(digest));
    out.insert("fg_text".into(), json!(mode.to_string()));
    if let Some(m) = &meta {
        out.insert("epoch".into(), json!(m.epoch));
        out.insert("recorded_val_top1".into(), json!(m.val_top1));
    }
    for (k, v) in metrics.keyed(split.name()) {
        out.insert(k, json!(v));
    }
    print_json(&serde_json::Value::Object(out))
}

fn ablate(root: &Path, args: &ConfigArgs, parallel: usize, out: Option<PathBuf>) -> Result<()> {
    let cfg = args.resolve()?;
    cfg.ablation.validate()?;
    let dir = out.unwrap_or_else(|| root.join("ablation").join(&cfg.run_id));
    fsutil::create_dir_all(&dir)?;
    let ds = build_dataset(&cfg.dataset)?;
    let report = run_ablation(&cfg.ablation_base(), &cfg.ablation, &ds, parallel)?;
    let table = report.render_table();
    fsutil::atomic_write_all(&[
        (dir.join("report.json"), serde_json::to_vec_pretty(&report)?),
        (dir.join("report.txt"), table.clone().into_bytes()),
    ])?;
    print!("{table}");
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let (header, _) = checkpoint::read(path)?;
    let tensors: Vec<_> = header
        .tensors
        .iter()
        .map(|t| json!({"name": t.name, "shape": t.shape, "offset": t.offset, "nbytes": t.nbytes}))
        .collect();
    print_json(&json!({
        "format_version": header.format_version,
        "kind": header.kind,
        "model_config": header.model_config,
        "tensor_count": header.tensors.len(),
        "parameters": header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum::<usize>(),
        "meta": header.meta,
        "tensors": tensors,
    }))
}
