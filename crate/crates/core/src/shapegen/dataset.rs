//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.jsonl
//! <root>/images/<split>/<index>.png
//! ```
//!
//! Each manifest line is one JSON object with `image`, `split`, `objects`,
//! `query` and `aligned` fields.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{generate_example, label_alignment, GenerationConfig, Query, SceneExample, ShapeObject};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub const PAPER: SplitCounts = SplitCounts {
        train: 4000,
        val: 500,
        test: 500,
    };
    pub const DESK: SplitCounts = SplitCounts {
        train: 1500,
        val: 250,
        test: 250,
    };

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl FromStr for SplitCounts {
    type Err = Error;

    /// Parses `TRAIN,VAL,TEST`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad split counts `{s}`: {e}")))?;
        match parts[..] {
            [train, val, test] => Ok(SplitCounts { train, val, test }),
            _ => Err(Error::InvalidArgument(format!(
                "split counts must be TRAIN,VAL,TEST, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub split: Split,
    pub objects: Vec<ShapeObject>,
    pub query: String,
    pub aligned: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.aligned.len() != rec.objects.len() {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!(
                        "{} alignment flags for {} objects",
                        rec.aligned.len(),
                        rec.objects.len()
                    ),
                });
            }
            records.push(rec);
        }
        Ok(DatasetManifest { root, records })
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for rec in &self.records {
            let line = serde_json::to_string(rec).expect("manifest records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// `(manifest index, record)` pairs of one split, in manifest order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn image_path(&self, rec: &ManifestRecord) -> PathBuf {
        self.root.join(&rec.image)
    }

    pub fn load_image(&self, rec: &ManifestRecord) -> Result<RgbImage> {
        let path = self.image_path(rec);
        let img = image::open(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(img.to_rgb8())
    }

    pub fn load_example(&self, rec: &ManifestRecord) -> Result<SceneExample> {
        let query = Query::parse(&rec.query).ok_or_else(|| Error::Manifest {
            line: 0,
            message: format!("query `{}` is outside the query grammar", rec.query),
        })?;
        Ok(SceneExample {
            image: self.load_image(rec)?,
            objects: rec.objects.clone(),
            query,
            aligned: rec.aligned.clone(),
        })
    }
}

/// Generate `counts.total()` scenes with seeds `root_seed + index`, write
/// them under `out_dir` and return the manifest.
pub fn generate_dataset(
    root_seed: u64,
    counts: SplitCounts,
    cfg: &GenerationConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let root = out_dir.as_ref().to_path_buf();
    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = root.join("images").join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::with_capacity(counts.total());
    for index in 0..counts.total() {
        let split = counts.split_of(index);
        let ex = generate_example(root_seed.wrapping_add(index as u64), cfg)?;
        debug_assert_eq!(ex.aligned, label_alignment(&ex.objects, &ex.query));
        let rel = format!("images/{}/{index}.png", split.as_str());
        let path = root.join(&rel);
        ex.image.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        records.push(ManifestRecord {
            image: rel,
            split,
            objects: ex.objects,
            query: ex.query.text,
            aligned: ex.aligned,
        });
    }
    let manifest = DatasetManifest { root, records };
    manifest.write()?;
    Ok(manifest)
}
