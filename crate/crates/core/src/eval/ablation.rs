use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{Model, ModelConfig};
use crate::error::{ensure, Error, Result};
use crate::synth::{DatasetConfig, DatasetSplit};
use crate::trainer::{run_training, Components, FgTextMode, RunOptions, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub components: Components,
}

impl AblationCell {
    pub fn new(name: &str, components: Components) -> Self {
        Self {
            name: name.to_string(),
            components,
        }
    }
}

/// Cells × seeds to train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixSpec {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl Default for MatrixSpec {
    /// The full method, each component removed in turn, and class-level
    /// text in place of the fine-grained descriptions.
    fn default() -> Self {
        let full = Components::default();
        Self {
            seeds: vec![0, 1, 2],
            cells: vec![
                AblationCell::new("full", full),
                AblationCell::new("no_fg_sa", Components { fg_sa: false, ..full }),
                AblationCell::new("no_cp_a", Components { cp_a: false, ..full }),
                AblationCell::new("no_ml_co", Components { ml_co: false, ..full }),
                AblationCell::new(
                    "class_level_text",
                    Components {
                        fg_text: FgTextMode::ClassLevel,
                        ..full
                    },
                ),
            ],
        }
    }
}

impl MatrixSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.cells.is_empty(), Config, "ablation.cells is empty");
        ensure!(!self.seeds.is_empty(), Config, "ablation.seeds is empty");
        let full = self.cells.iter().filter(|c| c.components.is_full()).count();
        ensure!(
            full == 1,
            Config,
            "the full configuration must appear exactly once in ablation.cells (found {full})"
        );
        for (i, a) in self.cells.iter().enumerate() {
            for b in &self.cells[i + 1..] {
                ensure!(a.name != b.name, Config, "duplicate ablation cell name {:?}", a.name);
                ensure!(
                    a.components != b.components,
                    Config,
                    "ablation cells {:?} and {:?} are identical",
                    a.name,
                    b.name
                );
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        ensure!(seeds.len() == self.seeds.len(), Config, "duplicate seeds in ablation.seeds");
        Ok(())
    }
}

/// Everything shared by all cells. Each run overrides the init seed, the
/// training seed and the component switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationBase {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_top1: Option<f64>,
    pub best_val_top1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub name: String,
    pub components: Components,
    pub runs: Vec<SeedResult>,
    /// Median test top-1 over successful runs.
    pub median_test_top1: Option<f64>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub cell: String,
    /// `">"` or `">="`: how the full cell's median must compare.
    pub relation: String,
    pub full_median: Option<f64>,
    pub cell_median: Option<f64>,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub base: AblationBase,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellReport>,
    pub verdicts: Vec<Verdict>,
}

pub(crate) fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn run_cell(base: &AblationBase, ds: &DatasetSplit, cell: &AblationCell, seed: u64) -> SeedResult {
    let attempt = || -> Result<(f64, f64, usize)> {
        let model = Model::new(ModelConfig {
            init_seed: seed,
            ..base.model.clone()
        })?;
        let train = TrainConfig {
            seed,
            components: cell.components,
            ..base.train.clone()
        };
        let opts = RunOptions {
            run_id: format!("{}-seed{seed}", cell.name),
            ..RunOptions::default()
        };
        let out = run_training(&train, ds, model, &opts)?;
        let test = out
            .test
            .ok_or_else(|| Error::Config("dataset has no test split".into()))?;
        Ok((test.top1, out.best_val_top1, out.best_epoch))
    };
    match attempt() {
        Ok((t, v, e)) => SeedResult {
            seed,
            test_top1: Some(t),
            best_val_top1: Some(v),
            best_epoch: Some(e),
            error: None,
        },
        Err(err) => SeedResult {
            seed,
            test_top1: None,
            best_val_top1: None,
            best_epoch: None,
            error: Some(err.to_string()),
        },
    }
}

/// Trains every (cell, seed) pair from identical initialization per seed.
///
/// Runs are spread over `parallel` worker threads; results are gathered in
/// matrix order, so the report does not depend on `parallel`.
pub fn run_ablation(base: &AblationBase, spec: &MatrixSpec, ds: &DatasetSplit, parallel: usize) -> Result<AblationReport> {
    spec.validate()?;
    ensure!(parallel >= 1, Config, "parallel must be >= 1");
    let jobs: Vec<(usize, u64)> = (0..spec.cells.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<SeedResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| run_cell(base, ds, &spec.cells[c], s))
            .collect()
    });

    let per_cell = spec.seeds.len();
    let cells: Vec<CellReport> = spec
        .cells
        .iter()
        .zip(results.chunks(per_cell))
        .map(|(cell, runs)| {
            let ok: Vec<f64> = runs.iter().filter_map(|r| r.test_top1).collect();
            CellReport {
                name: cell.name.clone(),
                components: cell.components,
                runs: runs.to_vec(),
                median_test_top1: median(&ok),
                failed: runs.iter().any(|r| r.error.is_some()),
            }
        })
        .collect();
    let full = cells.iter().find(|c| c.components.is_full()).expect("validated");
    let verdicts = cells
        .iter()
        .filter(|c| !c.components.is_full())
        .map(|c| {
            // Dropping only the curriculum may tie; every other change must lose.
            let only_ml_co = Components {
                ml_co: false,
                ..Components::default()
            } == c.components;
            let relation = if only_ml_co { ">=" } else { ">" };
            let holds = match (full.median_test_top1, c.median_test_top1) {
                (Some(f), Some(x)) if only_ml_co => f >= x,
                (Some(f), Some(x)) => f > x,
                _ => false,
            };
            Verdict {
                cell: c.name.clone(),
                relation: relation.to_string(),
                full_median: full.median_test_top1,
                cell_median: c.median_test_top1,
                holds,
            }
        })
        .collect();
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        base: base.clone(),
        seeds: spec.seeds.clone(),
        cells,
        verdicts,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl AblationReport {
    /// Plain-text table: one row per cell with its switches, per-seed test
    /// top-1 and median, followed by the directional verdicts.
    pub fn render_table(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|x| format!("s{x}")).collect();
        let _ = writeln!(
            s,
            "{:<18} {:>5} {:>5} {:>5}  {:<12} {:>8}  {}",
            "cell",
            "FG-SA",
            "CP-A",
            "ML-CO",
            "FG-Text",
            "median",
            seeds.join(" ")
        );
        for c in &self.cells {
            let runs: Vec<String> = c.runs.iter().map(|r| pct(r.test_top1)).collect();
            let _ = writeln!(
                s,
                "{:<18} {:>5} {:>5} {:>5}  {:<12} {:>8}  {}",
                c.name,
                on(c.components.fg_sa),
                on(c.components.cp_a),
                on(c.components.ml_co),
                c.components.fg_text.to_string(),
                pct(c.median_test_top1),
                runs.join(" ")
            );
        }
        s.push('\n');
        for v in &self.verdicts {
            let _ = writeln!(
                s,
                "{}  median(full) {} median({})  [{} vs {}]",
                if v.holds { "PASS" } else { "FAIL" },
                v.relation,
                v.cell,
                pct(v.full_median),
                pct(v.cell_median)
            );
        }
        s
    }
}
