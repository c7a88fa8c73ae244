use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attributes::{AdmissibleSet, SemanticAttributes};
use super::gesture::{instance_for, GestureInstance, MotionRanges};
use super::render::{render_clip, VideoClip, DEFAULT_FRAMES, NUM_JOINTS};
use super::text::{compose_category_text, compose_fg_text, CategoryText, FineGrainedText};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of categories `K`; takes the first `K` default tuples unless
    /// `admissible` lists them explicitly.
    pub categories: usize,
    pub admissible: Option<Vec<SemanticAttributes>>,
    pub frames: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub train_seed_base: u64,
    pub val_seed_base: u64,
    pub test_seed_base: u64,
    pub motion: MotionRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            categories: 16,
            admissible: None,
            frames: DEFAULT_FRAMES,
            train_size: 1024,
            val_size: 256,
            test_size: 256,
            train_seed_base: 0,
            val_seed_base: 1 << 32,
            test_seed_base: 2 << 32,
            motion: MotionRanges::default(),
        }
    }
}

impl DatasetConfig {
    pub fn category_map(&self) -> Result<AdmissibleSet> {
        let map = match &self.admissible {
            Some(tuples) => AdmissibleSet::new(tuples.clone())?,
            None => AdmissibleSet::default_prefix(self.categories)?,
        };
        ensure!(
            map.len() == self.categories,
            Config,
            "categories = {} but the admissible set has {} tuples",
            self.categories,
            map.len()
        );
        Ok(map)
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
            Split::Test => self.test_size,
        }
    }

    pub fn seed_base(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train_seed_base,
            Split::Val => self.val_seed_base,
            Split::Test => self.test_seed_base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.categories >= 2, Config, "need at least 2 categories, got {}", self.categories);
        ensure!(self.frames >= 2, Config, "frames must be >= 2, got {}", self.frames);
        self.motion.validate()?;
        self.category_map()?;
        for split in Split::ALL {
            let n = self.split_size(split);
            ensure!(
                n >= self.categories,
                Config,
                "{split} split has {n} samples, so some of the {} categories would have zero samples",
                self.categories
            );
            self.seed_base(split)
                .checked_add(n as u64)
                .ok_or_else(|| Error::Config(format!("{split} seed range overflows u64")))?;
        }
        for (i, a) in Split::ALL.iter().enumerate() {
            for b in &Split::ALL[i + 1..] {
                let (a0, a1) = (self.seed_base(*a), self.seed_base(*a) + self.split_size(*a) as u64);
                let (b0, b1) = (self.seed_base(*b), self.seed_base(*b) + self.split_size(*b) as u64);
                ensure!(
                    a1 <= b0 || b1 <= a0,
                    Config,
                    "seed ranges of {a} [{a0}, {a1}) and {b} [{b0}, {b1}) overlap"
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub instance: GestureInstance,
    pub clip: VideoClip,
    pub fg_text: FineGrainedText,
}

impl Sample {
    pub fn category_id(&self) -> usize {
        self.instance.category_id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub config: DatasetConfig,
    pub category_map: AdmissibleSet,
    pub category_texts: Vec<CategoryText>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn num_categories(&self) -> usize {
        self.category_map.len()
    }

    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn joints(&self) -> usize {
        NUM_JOINTS
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Sample `index` of a split: category `index mod K`, seed `base + index`.
pub(crate) fn make_sample(cfg: &DatasetConfig, map: &AdmissibleSet, split: Split, index: usize) -> Result<Sample> {
    let category_id = index % map.len();
    let attributes = map.tuples()[category_id];
    let seed = cfg.seed_base(split) + index as u64;
    let instance = instance_for(seed, attributes, category_id, &cfg.motion);
    let clip = render_clip(&instance, cfg.frames)?;
    Ok(Sample {
        fg_text: compose_fg_text(&instance.attributes),
        instance,
        clip,
    })
}

/// Builds all three splits. Reproducible from `cfg` alone.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let map = cfg.category_map()?;
    let category_texts = (0..map.len())
        .map(|c| compose_category_text(c, &map))
        .collect::<Result<Vec<_>>>()?;
    let build = |split: Split| -> Result<Vec<Sample>> {
        (0..cfg.split_size(split))
            .into_par_iter()
            .map(|i| make_sample(cfg, &map, split, i))
            .collect()
    };
    Ok(DatasetSplit {
        train: build(Split::Train)?,
        val: build(Split::Val)?,
        test: build(Split::Test)?,
        config: cfg.clone(),
        category_map: map,
        category_texts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            categories: 4,
            train_size: 32,
            val_size: 8,
            test_size: 8,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn sizes_and_coverage() {
        let ds = build_dataset(&small()).unwrap();
        for split in Split::ALL {
            let samples = ds.split(split);
            assert_eq!(samples.len(), small().split_size(split));
            for c in 0..4 {
                assert!(samples.iter().any(|s| s.category_id() == c), "{split} misses {c}");
            }
        }
    }

    #[test]
    fn seed_ranges_are_disjoint() {
        let ds = build_dataset(&small()).unwrap();
        let train: std::collections::HashSet<u64> = ds.train.iter().map(|s| s.instance.seed).collect();
        assert!(ds.test.iter().all(|s| !train.contains(&s.instance.seed)));
        assert!(ds.val.iter().all(|s| !train.contains(&s.instance.seed)));
    }

    #[test]
    fn overlapping_seed_ranges_are_rejected() {
        let cfg = DatasetConfig {
            val_seed_base: 10,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn split_smaller_than_k_leaves_a_category_empty() {
        let cfg = DatasetConfig {
            test_size: 3,
            ..small()
        };
        assert!(matches!(build_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn k_must_match_admissible_list() {
        let cfg = DatasetConfig {
            admissible: Some(AdmissibleSet::default_set().tuples()[..3].to_vec()),
            ..small()
        };
        assert!(cfg.validate().is_err());
        let cfg = DatasetConfig {
            categories: 1,
            admissible: Some(AdmissibleSet::default_set().tuples()[..1].to_vec()),
            ..small()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rebuild_is_identical() {
        assert_eq!(build_dataset(&small()).unwrap(), build_dataset(&small()).unwrap());
    }
}
