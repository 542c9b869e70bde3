//! Datasets in memory and on disk (PGM pairs plus a JSON index).

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Result, SptError};
use crate::pgm;
use crate::synth::{generate_dataset, GeneratorSpec, SampleMeta, Split, SyntheticSample};

pub const INDEX_FILE: &str = "index.json";
const FORMAT: &str = "spt-dataset";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        let spec = GeneratorSpec::training(cfg.size, cfg.min_area);
        Ok(Dataset {
            train: generate_dataset(cfg.seed, Split::Train, cfg.n_train, &spec)?,
            eval: generate_dataset(cfg.seed, Split::Eval, cfg.n_eval, &spec)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub size: usize,
    pub min_area: usize,
    pub samples: Vec<IndexEntry>,
}

impl DatasetIndex {
    /// Parses and checks an index: format tag, version, and relative paths
    /// that stay inside the dataset directory.
    pub fn parse(text: &str) -> Result<Self> {
        let idx: DatasetIndex = serde_json::from_str(text).map_err(|e| SptError::Parse(format!("dataset index: {e}")))?;
        if idx.format != FORMAT || idx.version != VERSION {
            return Err(SptError::Schema(format!(
                "dataset index is {} v{}, expected {FORMAT} v{VERSION}",
                idx.format, idx.version
            )));
        }
        for e in &idx.samples {
            for p in [&e.image, &e.mask] {
                let ok = !p.is_empty() && Path::new(p).components().all(|c| matches!(c, Component::Normal(_)));
                if !ok {
                    return Err(SptError::Parse(format!("dataset index: path {p:?} must be relative and inside the dataset")));
                }
            }
        }
        Ok(idx)
    }
}

fn entry_paths(split: Split, index: usize) -> (String, String) {
    (
        format!("{}/{index:05}.pgm", split.name()),
        format!("{}/{index:05}_mask.pgm", split.name()),
    )
}

pub fn write_dataset(dir: &Path, data: &Dataset, cfg: &DataConfig) -> Result<DatasetIndex> {
    let mut samples = Vec::new();
    for (split, list) in [(Split::Train, &data.train), (Split::Eval, &data.eval)] {
        std::fs::create_dir_all(dir.join(split.name()))?;
        for s in list {
            let (image, mask) = entry_paths(split, s.meta.index);
            std::fs::write(dir.join(&image), pgm::image_to_pgm(&s.image))?;
            std::fs::write(dir.join(&mask), pgm::mask_to_pgm(&s.gt_mask))?;
            samples.push(IndexEntry {
                split,
                index: s.meta.index,
                seed: s.meta.seed,
                image,
                mask,
            });
        }
    }
    let index = DatasetIndex {
        format: FORMAT.to_string(),
        version: VERSION,
        seed: cfg.seed,
        size: cfg.size,
        min_area: cfg.min_area,
        samples,
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(dir.join(INDEX_FILE), text + "\n")?;
    Ok(index)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetIndex, Dataset)> {
    let index = DatasetIndex::parse(&std::fs::read_to_string(dir.join(INDEX_FILE))?)?;
    let mut data = Dataset::default();
    for e in &index.samples {
        let path = |p: &str| -> PathBuf { dir.join(p) };
        let image = pgm::read_image(&path(&e.image))?;
        let gt_mask = pgm::read_mask(&path(&e.mask))?;
        if image.width() != index.size || image.height() != index.size || !gt_mask_matches(&gt_mask, index.size) {
            return Err(SptError::Schema(format!("{} is not {}x{}", e.image, index.size, index.size)));
        }
        let sample = SyntheticSample {
            image,
            gt_mask,
            meta: SampleMeta {
                seed: e.seed,
                split: e.split,
                index: e.index,
                attempts: 0,
                defects: Vec::new(),
            },
        };
        match e.split {
            Split::Train => data.train.push(sample),
            Split::Eval => data.eval.push(sample),
        }
    }
    Ok((index, data))
}

fn gt_mask_matches(m: &crate::mask::Mask, size: usize) -> bool {
    m.width() == size && m.height() == size
}
