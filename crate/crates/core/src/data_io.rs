//! Datasets (MNIST IDX files and synthetic vectors) and the JSON-lines store
//! of experiment records.

use crate::rng;
use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_LABELS: &str = "train-labels-idx1-ubyte";
/// Largest deviation of a normalized input's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad IDX magic {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("requested {requested} samples but only {available} are available")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("record serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Inputs as columns of an `M₀ × S` matrix with one scalar target each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub normalized: bool,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>, normalize: bool) -> Result<Self> {
        if inputs.ncols() != targets.len() {
            return Err(DataError::InvalidInput(format!(
                "{} inputs but {} targets",
                inputs.ncols(),
                targets.len()
            )));
        }
        let mut ds = Self {
            inputs,
            targets,
            normalized: false,
        };
        if normalize {
            ds.normalize()?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.nrows()
    }

    /// Scales every input to unit Euclidean norm.
    pub fn normalize(&mut self) -> Result<()> {
        for (j, mut col) in self.inputs.column_iter_mut().enumerate() {
            let n = col.norm();
            if !(n.is_finite() && n > 0.0) {
                return Err(DataError::InvalidInput(format!(
                    "input {j} has norm {n} and cannot be normalized"
                )));
            }
            col /= n;
        }
        self.normalized = true;
        Ok(())
    }

    /// Gram matrix `XᵀX` of the inputs.
    pub fn gram(&self) -> DMatrix<f64> {
        self.inputs.transpose() * &self.inputs
    }

    /// The first `count` samples.
    pub fn head(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Self {
            inputs: self.inputs.columns(0, count).into_owned(),
            targets: self.targets.rows(0, count).into_owned(),
            normalized: self.normalized,
        }
    }

    /// SHA-256 over dimensions, inputs and targets.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for v in self.inputs.iter().chain(self.targets.iter()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Scalar regression target for an MNIST digit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelEncoding {
    /// `digit / 9`, in `[0, 1]`.
    #[default]
    DigitScaled,
    /// The digit itself.
    Digit,
}

impl LabelEncoding {
    pub fn encode(self, digit: u8) -> f64 {
        match self {
            Self::DigitScaled => digit as f64 / 9.0,
            Self::Digit => digit as f64,
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(DataError::Truncated {
        needed: offset + 4,
        have: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

/// Images of an IDX3 file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok((n, rows, cols, &bytes[16..needed]))
}

/// Labels of an IDX1 file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok(&bytes[8..needed])
}

/// Seeded sample of `count` MNIST training images from the IDX files in `dir`.
///
/// Pixels are scaled to `[0, 1]` before optional unit-norm scaling.
pub fn load_mnist_subset(
    dir: &Path,
    count: usize,
    seed: u64,
    normalize: bool,
    encoding: LabelEncoding,
) -> Result<Dataset> {
    let images_path = dir.join(MNIST_IMAGES);
    let labels_path = dir.join(MNIST_LABELS);
    let image_bytes = std::fs::read(&images_path).map_err(io_err(&images_path))?;
    let label_bytes = std::fs::read(&labels_path).map_err(io_err(&labels_path))?;
    mnist_subset_from_bytes(&image_bytes, &label_bytes, count, seed, normalize, encoding)
}

pub fn mnist_subset_from_bytes(
    image_bytes: &[u8],
    label_bytes: &[u8],
    count: usize,
    seed: u64,
    normalize: bool,
    encoding: LabelEncoding,
) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(DataError::InvalidInput(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if count > n {
        return Err(DataError::NotEnoughSamples {
            requested: count,
            available: n,
        });
    }
    let dim = rows * cols;
    let picks = index::sample(&mut rng::stream(seed, 0), n, count);
    let mut inputs = DMatrix::zeros(dim, count);
    let mut targets = DVector::zeros(count);
    for (j, i) in picks.iter().enumerate() {
        let img = &pixels[i * dim..(i + 1) * dim];
        for (k, &p) in img.iter().enumerate() {
            inputs[(k, j)] = p as f64 / 255.0;
        }
        targets[j] = encoding.encode(labels[i]);
    }
    Dataset::new(inputs, targets, normalize)
}

/// Serializes images and labels in IDX format (used for fixtures).
pub fn write_idx(images: &[Vec<u8>], labels: &[u8], rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend((images.len() as u32).to_be_bytes());
    img.extend((rows as u32).to_be_bytes());
    img.extend((cols as u32).to_be_bytes());
    for im in images {
        img.extend(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend(labels);
    (img, lab)
}

fn unit_vector(dim: usize, seed: u64, stream: u64) -> DVector<f64> {
    let v = DVector::from_vec(rng::normals(&mut rng::stream(seed, stream), dim));
    let n = v.norm();
    v / n
}

/// Two unit vectors with `x_sᵀx_r = c`, by Gram–Schmidt on two random draws.
pub fn synthetic_pair(dim: usize, c: f64, seed: u64) -> Result<(DVector<f64>, DVector<f64>)> {
    if dim < 2 {
        return Err(DataError::InvalidInput(format!("dimension must be at least 2, got {dim}")));
    }
    if !(-1.0..=1.0).contains(&c) {
        return Err(DataError::InvalidInput(format!("covariance {c} outside [-1, 1]")));
    }
    let e1 = unit_vector(dim, seed, 0);
    let mut w = unit_vector(dim, seed, 1);
    for _ in 0..2 {
        let proj = w.dot(&e1);
        w.axpy(-proj, &e1, 1.0);
        let n = w.norm();
        w /= n;
    }
    let x_r = &e1 * c + &w * (1.0 - c * c).sqrt();
    Ok((e1, x_r))
}

/// `count` unit vectors sharing a common direction, so that pairwise
/// covariances concentrate around `covariance` for large `dim`. Targets are
/// random digits encoded with `encoding`.
pub fn synthetic_dataset(
    dim: usize,
    count: usize,
    covariance: f64,
    seed: u64,
    encoding: LabelEncoding,
) -> Result<Dataset> {
    if dim == 0 {
        return Err(DataError::InvalidInput("dimension must be positive".into()));
    }
    if !(0.0..=1.0).contains(&covariance) {
        return Err(DataError::InvalidInput(format!("covariance {covariance} outside [0, 1]")));
    }
    let shared = unit_vector(dim, seed, 0);
    let noise = rng::normals(&mut rng::stream(seed, 1), dim * count);
    let mut inputs = DMatrix::from_vec(dim, count, noise);
    let (a, b) = (covariance.sqrt(), (1.0 - covariance).sqrt() / (dim as f64).sqrt());
    for mut col in inputs.column_iter_mut() {
        col *= b;
        col.axpy(a, &shared, 1.0);
    }
    let mut label_rng = rng::stream(seed, 2);
    let targets = DVector::from_fn(count, |_, _| {
        encoding.encode(rand::Rng::random_range(&mut label_rng, 0..10u8))
    });
    Dataset::new(inputs, targets, true)
}

/// Gram matrix of `count` unit vectors with every pairwise covariance `c`.
pub fn equicorrelated_gram(count: usize, c: f64) -> DMatrix<f64> {
    DMatrix::from_fn(count, count, |i, j| if i == j { 1.0 } else { c })
}

/// One experiment outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub activation: String,
    pub sigma_w_sq: f64,
    pub sigma_b_sq: f64,
    pub depth: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Further parameters (covariance, sample count, grid indices, …).
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub stats: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
    pub code_version: String,
}

impl RunRecord {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            activation: String::new(),
            sigma_w_sq: 0.0,
            sigma_b_sq: 0.0,
            depth: 0,
            width: 0,
            learning_rate: 0.0,
            steps: 0,
            seed: 0,
            params: BTreeMap::new(),
            stats: BTreeMap::new(),
            wall_clock_secs: 0.0,
            code_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Equality filters on record fields; `None` matches everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordFilter {
    pub kind: Option<String>,
    pub activation: Option<String>,
    pub sigma_w_sq: Option<f64>,
    pub sigma_b_sq: Option<f64>,
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub seed: Option<u64>,
}

impl RecordFilter {
    pub fn matches(&self, r: &RunRecord) -> bool {
        fn eq<T: PartialEq>(want: &Option<T>, have: &T) -> bool {
            want.as_ref().is_none_or(|w| w == have)
        }
        eq(&self.kind, &r.kind)
            && eq(&self.activation, &r.activation)
            && eq(&self.sigma_w_sq, &r.sigma_w_sq)
            && eq(&self.sigma_b_sq, &r.sigma_b_sq)
            && eq(&self.depth, &r.depth)
            && eq(&self.width, &r.width)
            && eq(&self.seed, &r.seed)
    }
}

/// Appends one JSON line and flushes.
pub fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(line.as_bytes()).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub records: Vec<RunRecord>,
    /// Lines that failed to parse and were skipped.
    pub malformed: usize,
}

/// Records in `path` that pass `filter`. A missing store is empty.
pub fn query_records(path: &Path, filter: &RecordFilter) -> Result<QueryResult> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(QueryResult {
                records: Vec::new(),
                malformed: 0,
            })
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut records = Vec::new();
    let mut malformed = 0;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(&line) {
            Ok(r) if filter.matches(&r) => records.push(r),
            Ok(_) => {}
            Err(e) => {
                warn!("{}:{}: skipping malformed record: {e}", path.display(), n + 1);
                malformed += 1;
            }
        }
    }
    Ok(QueryResult { records, malformed })
}

/// Header of [`write_records_csv`].
pub const RECORD_CSV_HEADER: [&str; 11] = [
    "kind",
    "activation",
    "sigma_w_sq",
    "sigma_b_sq",
    "depth",
    "width",
    "learning_rate",
    "steps",
    "seed",
    "statistic",
    "value",
];

/// Long-format CSV: one row per record and statistic.
pub fn write_records_csv<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_CSV_HEADER)?;
    for r in records {
        for (name, value) in &r.stats {
            w.write_record([
                r.kind.clone(),
                r.activation.clone(),
                r.sigma_w_sq.to_string(),
                r.sigma_b_sq.to_string(),
                r.depth.to_string(),
                r.width.to_string(),
                r.learning_rate.to_string(),
                r.steps.to_string(),
                r.seed.to_string(),
                name.clone(),
                value.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| DataError::Csv(e.into()))?;
    Ok(())
}
