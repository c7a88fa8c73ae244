//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json   config echo, K, split sizes, category map, file hashes
//! <dir>/<split>.bin     little-endian records (see below)
//! <dir>/<split>.jsonl   one JSON object per sample with its text fields
//! ```
//!
//! Binary split file:
//!
//! ```text
//! header:  b"MGDS"  u32 version  u32 T  u32 J  u64 count
//! record:  u64 seed  u8[4] attribute codes  u32 category_id  f32[T·J·2] coords
//! ```
//!
//! Coordinates are row-major: frame, then joint, then (x, y).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::attributes::{AdmissibleSet, SemanticAttributes};
use super::dataset::{make_sample, DatasetConfig, DatasetSplit, Sample, Split};
use super::render::VideoClip;
use super::text::{compose_category_text, compose_fg_text};
use crate::error::{ensure, Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"MGDS";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: usize,
    #[serde(flatten)]
    pub attributes: SemanticAttributes,
    pub name: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub split: Split,
    pub count: usize,
    pub binary: String,
    pub binary_sha256: String,
    pub text: String,
    pub text_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub num_categories: usize,
    pub frames: usize,
    pub joints: usize,
    pub splits: Vec<SplitEntry>,
    pub category_map: Vec<CategoryEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRecord {
    index: usize,
    seed: u64,
    category_id: usize,
    fg_text: String,
    fg_tokens: Vec<u32>,
    category_text: String,
}

pub fn encode_split_binary(samples: &[Sample], frames: usize, joints: usize) -> Vec<u8> {
    let per = 8 + 4 + 4 + frames * joints * 2 * 4;
    let mut out = Vec::with_capacity(HEADER_LEN + per * samples.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(joints as u32).to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.instance.seed.to_le_bytes());
        out.extend_from_slice(&s.instance.attributes.codes());
        out.extend_from_slice(&(s.instance.category_id as u32).to_le_bytes());
        for c in s.clip.coords() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

/// One decoded binary record.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryRecord {
    pub seed: u64,
    pub attributes: SemanticAttributes,
    pub category_id: usize,
    pub clip: VideoClip,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::StaleDataset(format!("truncated split file at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_split_binary(bytes: &[u8]) -> Result<(usize, usize, Vec<BinaryRecord>)> {
    let mut r = Reader { bytes, pos: 0 };
    ensure!(r.take(4)? == MAGIC, StaleDataset, "bad split file magic");
    let version = r.u32()?;
    ensure!(
        version == FORMAT_VERSION,
        StaleDataset,
        "unsupported split format version {version}"
    );
    let frames = r.u32()? as usize;
    let joints = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let seed = r.u64()?;
        let codes: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let attributes = SemanticAttributes::from_codes(codes)
            .map_err(|e| Error::StaleDataset(format!("record with seed {seed}: {e}")))?;
        let category_id = r.u32()? as usize;
        let coords = r
            .take(frames * joints * 2 * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let clip = VideoClip::from_coords(frames, joints, coords)
            .map_err(|e| Error::StaleDataset(format!("record with seed {seed}: {e}")))?;
        records.push(BinaryRecord {
            seed,
            attributes,
            category_id,
            clip,
        });
    }
    ensure!(r.pos == bytes.len(), StaleDataset, "trailing bytes after {count} records");
    Ok((frames, joints, records))
}

fn encode_split_text(ds: &DatasetSplit, samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (index, s) in samples.iter().enumerate() {
        let rec = TextRecord {
            index,
            seed: s.instance.seed,
            category_id: s.instance.category_id,
            fg_text: s.fg_text.text.clone(),
            fg_tokens: s.fg_text.tokens.clone(),
            category_text: ds.category_texts[s.instance.category_id].text.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn manifest_bytes(m: &DatasetManifest) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(m)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Serialized files of a dataset, manifest last. Returns the manifest and
/// its digest along with the `(path, bytes)` list.
/// `(path, bytes)` pairs ready for [`fsutil::atomic_write_all`].
pub type FileSet = Vec<(PathBuf, Vec<u8>)>;

pub fn encode_dataset(dir: &Path, ds: &DatasetSplit) -> Result<(DatasetManifest, String, FileSet)> {
    let mut files = Vec::new();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let samples = ds.split(split);
        let bin = encode_split_binary(samples, ds.frames(), ds.joints());
        let txt = encode_split_text(ds, samples)?;
        let entry = SplitEntry {
            split,
            count: samples.len(),
            binary: format!("{split}.bin"),
            binary_sha256: fsutil::sha256_hex(&bin),
            text: format!("{split}.jsonl"),
            text_sha256: fsutil::sha256_hex(&txt),
        };
        files.push((dir.join(&entry.binary), bin));
        files.push((dir.join(&entry.text), txt));
        splits.push(entry);
    }
    let category_map = ds
        .category_map
        .tuples()
        .iter()
        .enumerate()
        .map(|(id, &attributes)| {
            Ok(CategoryEntry {
                id,
                attributes,
                name: super::text::category_name(id, &ds.category_map)?,
                text: ds.category_texts[id].text.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        config: ds.config.clone(),
        num_categories: ds.num_categories(),
        frames: ds.frames(),
        joints: ds.joints(),
        splits,
        category_map,
    };
    let bytes = manifest_bytes(&manifest)?;
    let digest = fsutil::sha256_hex(&bytes);
    files.push((dir.join(MANIFEST_FILE), bytes));
    Ok((manifest, digest, files))
}

/// Writes the dataset under `dir` and returns the manifest digest.
pub fn write_dataset(dir: &Path, ds: &DatasetSplit) -> Result<String> {
    fsutil::create_dir_all(dir)?;
    let (_, digest, files) = encode_dataset(dir, ds)?;
    fsutil::atomic_write_all(&files)?;
    Ok(digest)
}

/// Reads and hashes the manifest only.
pub fn read_manifest(dir: &Path) -> Result<(DatasetManifest, String)> {
    let bytes = fsutil::read(&dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::StaleDataset(format!("unreadable manifest: {e}")))?;
    Ok((manifest, fsutil::sha256_hex(&bytes)))
}

/// Loads a dataset written by [`write_dataset`], checking every file hash
/// and that each record agrees with the generator.
pub fn read_dataset(dir: &Path) -> Result<(DatasetSplit, String)> {
    let (manifest, digest) = read_manifest(dir)?;
    ensure!(
        manifest.format_version == FORMAT_VERSION,
        StaleDataset,
        "manifest format version {} (expected {FORMAT_VERSION})",
        manifest.format_version
    );
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let map: AdmissibleSet = cfg.category_map()?;
    ensure!(
        map.len() == manifest.num_categories,
        StaleDataset,
        "manifest lists {} categories, config implies {}",
        manifest.num_categories,
        map.len()
    );
    let category_texts = (0..map.len())
        .map(|c| compose_category_text(c, &map))
        .collect::<Result<Vec<_>>>()?;

    let mut splits: Vec<Vec<Sample>> = Vec::new();
    for split in Split::ALL {
        let entry = manifest
            .splits
            .iter()
            .find(|e| e.split == split)
            .ok_or_else(|| Error::StaleDataset(format!("manifest has no {split} split")))?;
        let bin = fsutil::read(&dir.join(&entry.binary))?;
        ensure!(
            fsutil::sha256_hex(&bin) == entry.binary_sha256,
            StaleDataset,
            "{} does not match its manifest hash",
            entry.binary
        );
        let txt = fsutil::read(&dir.join(&entry.text))?;
        ensure!(
            fsutil::sha256_hex(&txt) == entry.text_sha256,
            StaleDataset,
            "{} does not match its manifest hash",
            entry.text
        );
        let (frames, _joints, records) = decode_split_binary(&bin)?;
        ensure!(
            frames == cfg.frames && records.len() == entry.count,
            StaleDataset,
            "{split} split shape disagrees with manifest"
        );
        let mut samples = Vec::with_capacity(records.len());
        for (i, rec) in records.into_iter().enumerate() {
            let expected = make_sample(&cfg, &map, split, i)?;
            ensure!(
                rec.seed == expected.instance.seed
                    && rec.attributes == expected.instance.attributes
                    && rec.category_id == expected.instance.category_id,
                StaleDataset,
                "{split} record {i} disagrees with the generator"
            );
            samples.push(Sample {
                fg_text: compose_fg_text(&rec.attributes),
                instance: expected.instance,
                clip: rec.clip,
            });
        }
        splits.push(samples);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok((
        DatasetSplit {
            config: cfg,
            category_map: map,
            category_texts,
            train,
            val,
            test,
        },
        digest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::dataset::build_dataset;

    fn cfg() -> DatasetConfig {
        DatasetConfig {
            categories: 4,
            train_size: 16,
            val_size: 8,
            test_size: 8,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn write_then_read_reproduces_the_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&cfg()).unwrap();
        let digest = write_dataset(dir.path(), &ds).unwrap();
        let (back, digest2) = read_dataset(dir.path()).unwrap();
        assert_eq!(digest, digest2);
        assert_eq!(back, ds);
    }

    #[test]
    fn identical_config_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let da = write_dataset(a.path(), &build_dataset(&cfg()).unwrap()).unwrap();
        let db = write_dataset(b.path(), &build_dataset(&cfg()).unwrap()).unwrap();
        assert_eq!(da, db);
        for name in ["train.bin", "val.jsonl", "manifest.json"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn header_layout_is_little_endian() {
        let ds = build_dataset(&cfg()).unwrap();
        let bin = encode_split_binary(&ds.train, 8, 15);
        assert_eq!(&bin[..4], b"MGDS");
        assert_eq!(u32::from_le_bytes(bin[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bin[8..12].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bin[12..16].try_into().unwrap()), 15);
        assert_eq!(u64::from_le_bytes(bin[16..24].try_into().unwrap()), 16);
        assert_eq!(bin.len(), 24 + 16 * (8 + 4 + 4 + 8 * 15 * 2 * 4));
        let first_seed = u64::from_le_bytes(bin[24..32].try_into().unwrap());
        assert_eq!(first_seed, ds.train[0].instance.seed);
    }

    #[test]
    fn tampered_split_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &build_dataset(&cfg()).unwrap()).unwrap();
        let path = dir.path().join("val.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::StaleDataset(_))));
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let ds = build_dataset(&cfg()).unwrap();
        let bin = encode_split_binary(&ds.val, 8, 15);
        assert!(decode_split_binary(&bin[..bin.len() - 3]).is_err());
        assert!(decode_split_binary(&bin[..10]).is_err());
    }
}
