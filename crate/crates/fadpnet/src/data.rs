//! Manifests, paired samples and deterministic batch order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fadpnet_core::resample::{prepare_pair, Pair};
use fadpnet_core::{synth, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::image_io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
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

impl FromStr for Split {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(HarnessError::Data(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub split: Split,
}

/// Image list with split assignments; paths are relative to `root` unless absolute.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub seed: u64,
}

impl Manifest {
    /// Reads a `path,split` CSV, rejecting a path listed under two splits
    /// and listing every referenced file that does not exist.
    pub fn load(path: &Path, root: &Path, seed: u64) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| HarnessError::Data(format!("cannot open manifest {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for row in reader.deserialize::<RawRecord>() {
            let row = row.map_err(|e| HarnessError::Data(format!("malformed manifest {}: {e}", path.display())))?;
            records.push(Record { path: PathBuf::from(row.path), split: row.split.parse()? });
        }
        let m = Self { root: root.to_path_buf(), records, seed };
        m.check_disjoint()?;
        let missing: Vec<String> = m
            .records
            .iter()
            .map(|r| m.resolve(&r.path))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(HarnessError::Data(format!("{} missing files: {}", missing.len(), missing.join(", "))));
        }
        Ok(m)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&Path, Split> = HashMap::new();
        for r in &self.records {
            if let Some(prev) = seen.insert(&r.path, r.split) {
                return Err(HarnessError::Data(format!(
                    "{} listed twice (splits {prev} and {})",
                    r.path.display(),
                    r.split
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut c: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for r in &self.records {
            *c.entry(r.split).or_default() += 1;
        }
        c
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| HarnessError::Data(format!("cannot write {}: {e}", path.display())))?;
        for r in &self.records {
            w.serialize(RawRecord { path: r.path.display().to_string(), split: r.split.to_string() })
                .map_err(|e| HarnessError::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    path: String,
    split: String,
}

/// A degraded input and its target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub source_id: String,
    pub split: Split,
    pub pair: Pair<f32>,
}

/// Samples of one split. Files that cannot be decoded or are too small are
/// skipped; their paths and reasons come back in the second list.
pub fn load_split(m: &Manifest, split: Split, size: usize, scale: usize) -> Result<(Vec<Sample>, Vec<String>)> {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for r in m.split(split) {
        let path = m.resolve(&r.path);
        let img = match image_io::read_rgb::<f32>(&path) {
            Ok(img) => img,
            Err(e) => {
                skipped.push(format!("{}: {e}", path.display()));
                continue;
            }
        };
        match prepare_pair(&img, size, scale) {
            Ok(pair) => out.push(Sample { source_id: source_id(&r.path), split, pair }),
            Err(fadpnet_core::Error::Degenerate(why)) => skipped.push(format!("{}: {why}", path.display())),
            Err(e) => return Err(e.into()),
        }
    }
    Ok((out, skipped))
}

/// File stem used as the image id in metric tables.
pub fn source_id(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// Shuffled sample order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Index batches of one epoch; the last one may be short.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    epoch_order(n, seed, epoch).chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Stacks the chosen samples into `(input, target)` batch tensors.
pub fn collate(pairs: &[&Pair<f32>]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let x: Vec<Tensor<f32>> = pairs.iter().map(|p| p.lr_up.clone()).collect();
    let y: Vec<Tensor<f32>> = pairs.iter().map(|p| p.hr.clone()).collect();
    Ok((Tensor::stack_batch(&x)?, Tensor::stack_batch(&y)?))
}

/// Writes procedurally drawn faces as PNGs under `dir` with a matching
/// `manifest.csv`, and returns the manifest.
pub fn write_synthetic(dir: &Path, counts: [(Split, usize); 3], size: usize, seed: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for (split, n) in counts {
        for i in 0..n {
            let img = synth::face(size, &mut rng);
            let rel = PathBuf::from(format!("{split}_{i:04}.png"));
            image_io::write_png(&img, &dir.join(&rel))?;
            records.push(Record { path: rel, split });
        }
    }
    let m = Manifest { root: dir.to_path_buf(), records, seed };
    m.write(&dir.join("manifest.csv"))?;
    Ok(m)
}
