//! Classification datasets: synthetic Gaussian blobs plus CSV and IDX readers.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Dataset(format!(
                "{} feature values do not form {} rows of {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { features, labels, dim, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows selected by `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        let (features, labels) = self.gather(idx);
        Dataset { features, labels, dim: self.dim, classes: self.classes }
    }

    /// Deterministic shuffled split into `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test.min(self.len()));
        (self.subset(train), self.subset(test))
    }
}

/// Isotropic Gaussian clusters: class centers drawn from `N(0, spread^2)`,
/// samples from `N(center, noise^2)`.
pub fn blobs(classes: usize, dim: usize, per_class: usize, spread: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || per_class == 0 {
        return Err(Error::Dataset("blobs need at least 2 classes, 1 feature and 1 sample per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center_dist = Normal::new(0.0, spread).map_err(|e| Error::Dataset(e.to_string()))?;
    let noise_dist = Normal::new(0.0, noise).map_err(|e| Error::Dataset(e.to_string()))?;
    let centers: Vec<f64> = (0..classes * dim).map(|_| center_dist.sample(&mut rng)).collect();
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for c in 0..classes {
            for j in 0..dim {
                features.push(centers[c * dim + j] + noise_dist.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, dim, classes)
}

/// Reads `label,feature...` rows. Blank lines, `#` comments and a
/// non-numeric header row are skipped.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let label = match record[0].parse::<usize>() {
            Ok(y) => y,
            Err(_) if line == 0 => continue,
            Err(_) => return Err(Error::Dataset(format!("{} row {}: invalid label {:?}", path.display(), line + 1, &record[0]))),
        };
        let row = record
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Dataset(format!("{} row {}: {e}", path.display(), line + 1)))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Dataset(format!(
                    "{} row {}: expected {d} features, found {}",
                    path.display(),
                    line + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        features.extend(row);
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| Error::Dataset(format!("{}: no rows", path.display())))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(features, labels, dim, classes)
}

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Dataset(format!("{}: {msg}", path.display()));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned-byte IDX payloads are supported"));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(bad(&format!("expected {n} payload bytes, found {}", bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Reads an IDX image archive and its label file. Pixels are scaled to [0, 1].
pub fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images)?;
    let (ldims, lbytes) = read_idx(labels)?;
    if idims.is_empty() || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Dataset(format!("image dims {idims:?} do not match label dims {ldims:?}")));
    }
    let dim: usize = idims[1..].iter().product::<usize>().max(1);
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(features, labels, dim, classes)
}

/// Dataset source as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Blobs {
        classes: usize,
        features: usize,
        per_class: usize,
        #[serde(with = "crate::reals")]
        spread: f64,
        #[serde(with = "crate::reals")]
        noise: f64,
        seed: u64,
        #[serde(with = "crate::reals")]
        test_fraction: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(with = "crate::reals")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(with = "crate::reals")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl DataSpec {
    /// Loads and splits into `(train, test)`. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let (all, frac, seed) = match self {
            DataSpec::Blobs { classes, features, per_class, spread, noise, seed, test_fraction } => {
                (blobs(*classes, *features, *per_class, *spread, *noise, *seed)?, *test_fraction, *seed)
            }
            DataSpec::Csv { path, test_fraction, seed } => (read_csv(&resolve(path))?, *test_fraction, *seed),
            DataSpec::Idx { images, labels, test_fraction, seed } => {
                (read_idx_pair(&resolve(images), &resolve(labels))?, *test_fraction, *seed)
            }
        };
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {frac}")));
        }
        let (train, test) = all.split(frac, seed ^ 0x5eed);
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        Ok((train, test))
    }
}
