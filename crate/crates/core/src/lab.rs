//! Configured sweeps over hyperparameter grids.
//!
//! A [`SweepConfig`] expands into grid cells that run in parallel with seeds
//! derived from the cell's content. Each finished cell appends its
//! [`RunRecord`]s to `records.jsonl`; once every cell is done the rows are
//! written, in grid order, to a long-format CSV with header [`CSV_HEADER`].

use crate::activation::ActivationKind;
use crate::data_io::{
    append_record, load_mnist_subset, synthetic_dataset, DataError, Dataset, LabelEncoding, RunRecord,
};
use crate::empirical_ntk::{
    default_probe, default_snapshot_steps, empirical_kernel, init_variance_ratio, training_drift,
    DriftStat, EmpiricalError,
};
use crate::finite_net::{Mlp, NetError, TrainConfig};
use crate::meanfield::{classify_phase, locate_eoc, InitHyper, MeanFieldError, Phase};
use crate::ntk_theory::{
    condition_ratio, predict_variance, trained_output, variance_exact, variance_oracle_mc, InputConvention,
    KernelModel, NtkError,
};
use crate::rng::derive_seed;
use log::info;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

/// Columns of every sweep CSV. Cells that do not apply are left empty.
pub const CSV_HEADER: [&str; 12] = [
    "experiment",
    "activation",
    "sigma_w_sq",
    "sigma_b_sq",
    "depth",
    "width",
    "covariance",
    "samples",
    "replicate",
    "step",
    "statistic",
    "value",
];
pub const RECORDS_FILE: &str = "records.jsonl";
/// Environment variable naming the default MNIST directory.
pub const DATA_DIR_ENV: &str = "NTKLAB_DATA_DIR";

const TAG_PROBE: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_DATA: u64 = 3;
const TAG_TRAIN: u64 = 4;
const TAG_MC: u64 = 5;
const TAG_END_TO_END: u64 = 6;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Ntk(#[from] NtkError),
    #[error(transparent)]
    Empirical(#[from] EmpiricalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    /// 1 for configuration errors, 2 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    PhaseDiagram,
    InitVariance,
    LmCurves,
    TrainDrift,
    KappaCurves,
    PredictVariance,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::PhaseDiagram,
        Experiment::InitVariance,
        Experiment::LmCurves,
        Experiment::TrainDrift,
        Experiment::KappaCurves,
        Experiment::PredictVariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::PhaseDiagram => "phase-diagram",
            Experiment::InitVariance => "init-variance",
            Experiment::LmCurves => "lm-curves",
            Experiment::TrainDrift => "train-drift",
            Experiment::KappaCurves => "kappa-curves",
            Experiment::PredictVariance => "predict-variance",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment '{s}'"))
    }
}

/// A list of values or an inclusive arithmetic range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Values(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl Grid {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            Grid::Values(v) => Ok(v.clone()),
            Grid::Range { start, stop, step } => {
                if !(start.is_finite() && stop.is_finite() && step.is_finite() && *step > 0.0 && stop >= start) {
                    return Err(config_err(format!("invalid range {start}:{stop}:{step}")));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                // rounding keeps 0.1-steps printable as 0.3 rather than 0.30000000000000004
                Ok((0..=n)
                    .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                    .collect())
            }
        }
    }
}

impl FromStr for Grid {
    type Err = String;

    /// `a,b,c` or `start:stop:step`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("bad number '{t}': {e}"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.len() {
            1 => Ok(Grid::Values(s.split(',').map(num).collect::<std::result::Result<_, _>>()?)),
            3 => Ok(Grid::Range {
                start: num(parts[0])?,
                stop: num(parts[1])?,
                step: num(parts[2])?,
            }),
            _ => Err(format!("expected 'a,b,c' or 'start:stop:step', got '{s}'")),
        }
    }
}

/// Parses `a,b,c` or `start:stop[:step]` into integers.
pub fn parse_usize_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad integer '{t}': {e}"));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.len() {
        1 => s.split(',').map(num).collect(),
        2 | 3 => {
            let (a, b) = (num(parts[0])?, num(parts[1])?);
            let step = if parts.len() == 3 { num(parts[2])? } else { 1 };
            if step == 0 || b < a {
                return Err(format!("invalid range '{s}'"));
            }
            Ok((a..=b).step_by(step).collect())
        }
        _ => Err(format!("expected 'a,b,c' or 'start:stop[:step]', got '{s}'")),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory with the MNIST IDX files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Pairwise input covariance of synthetic data.
    pub covariance: f64,
    pub labels: LabelEncoding,
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: None,
            covariance: 0.5,
            labels: LabelEncoding::DigitScaled,
            normalize: true,
        }
    }
}

/// Everything a sweep needs. Fields not given in the config file keep the
/// experiment's defaults from [`SweepConfig::defaults`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub experiment: Experiment,
    pub activation: ActivationKind,
    pub seed: u64,
    pub sigma_w_sq: Grid,
    pub sigma_b_sq: Grid,
    /// Explicit `(σ_w², σ_b²)` pairs; when non-empty they replace the two grids.
    pub hypers: Vec<(f64, f64)>,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    /// Replicate networks per cell.
    pub n_seeds: usize,
    /// Input covariances for κ-curves.
    pub covariances: Vec<f64>,
    /// Training-set sizes.
    pub samples: Vec<usize>,
    pub input_dim: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub snapshot_steps: Vec<usize>,
    pub reference_covariance: f64,
    pub convention: InputConvention,
    pub mc_samples: usize,
    /// Networks per cell for the empirical output variance; 0 skips it.
    pub end_to_end_seeds: usize,
}

impl SweepConfig {
    /// Desk-scale defaults for `experiment`.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            activation: ActivationKind::Relu,
            seed: 0,
            sigma_w_sq: Grid::Values(vec![1.0]),
            sigma_b_sq: Grid::Values(vec![1.0]),
            hypers: Vec::new(),
            depths: vec![2, 4, 8, 16, 32],
            widths: vec![64],
            n_seeds: 200,
            covariances: vec![0.5],
            samples: vec![128],
            input_dim: 784,
            data: DataConfig::default(),
            train: TrainConfig {
                max_steps: 2000,
                ..TrainConfig::default()
            },
            snapshot_steps: default_snapshot_steps(),
            reference_covariance: 0.5,
            convention: InputConvention::RawInput,
            mc_samples: 100_000,
            end_to_end_seeds: 0,
        };
        match experiment {
            Experiment::PhaseDiagram => Self {
                activation: ActivationKind::Erf,
                sigma_w_sq: Grid::Range {
                    start: 0.5,
                    stop: 3.0,
                    step: 0.1,
                },
                sigma_b_sq: Grid::Values(vec![0.0, 0.25, 0.5, 1.0, 2.0]),
                ..base
            },
            Experiment::InitVariance => Self {
                sigma_w_sq: Grid::Range {
                    start: 0.5,
                    stop: 4.0,
                    step: 0.5,
                },
                ..base
            },
            Experiment::LmCurves => Self {
                hypers: vec![(1.0, 1.0), (1.5, 1.0), (2.0, 0.0), (3.0, 1.0)],
                widths: vec![64, 128, 256],
                ..base
            },
            Experiment::TrainDrift => Self {
                activation: ActivationKind::Tanh,
                sigma_w_sq: Grid::Values(vec![1.0, 1.5, 2.0, 2.5, 3.0]),
                depths: vec![3, 10, 20],
                widths: vec![256],
                n_seeds: 1,
                ..base
            },
            Experiment::KappaCurves => Self {
                activation: ActivationKind::Erf,
                hypers: vec![(1.0, 1.0), (3.0, 1.0)],
                covariances: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
                depths: (1..=50).collect(),
                ..base
            },
            Experiment::PredictVariance => Self {
                activation: ActivationKind::Erf,
                hypers: vec![(3.0, 1.0)],
                depths: vec![8],
                widths: vec![1024],
                samples: vec![16, 32],
                n_seeds: 20,
                ..base
            },
        }
    }

    /// Parses a TOML config on top of the defaults of its experiment.
    ///
    /// `experiment` (from the command line) fills in a missing `experiment`
    /// key and must agree with it when both are present.
    pub fn from_toml_str(text: &str, experiment: Option<Experiment>) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let named = match user.get("experiment") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| config_err("experiment must be a string"))?
                    .parse::<Experiment>()
                    .map_err(config_err)?,
            ),
            None => None,
        };
        let exp = match (named, experiment) {
            (Some(a), Some(b)) if a != b => {
                return Err(config_err(format!("config is for {a}, but {b} was requested")))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(config_err("no experiment given")),
        };
        let mut merged = toml::Table::try_from(Self::defaults(exp)).map_err(|e| config_err(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `(σ_w², σ_b²)` pairs in grid order (σ_w² outer).
    pub fn hyper_pairs(&self) -> Result<Vec<(f64, f64)>> {
        if !self.hypers.is_empty() {
            return Ok(self.hypers.clone());
        }
        let bs = self.sigma_b_sq.values()?;
        Ok(self
            .sigma_w_sq
            .values()?
            .into_iter()
            .flat_map(|w| bs.iter().map(move |&b| (w, b)))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = self.hyper_pairs()?;
        if pairs.is_empty() {
            return Err(config_err("empty hyperparameter grid"));
        }
        for &(w, b) in &pairs {
            InitHyper::new(w, b, self.activation).map_err(|e| config_err(e.to_string()))?;
        }
        let nonempty = |name: &str, len: usize| {
            if len == 0 {
                Err(config_err(format!("{name} must not be empty")))
            } else {
                Ok(())
            }
        };
        let exp = self.experiment;
        if exp != Experiment::PhaseDiagram {
            nonempty("depths", self.depths.len())?;
            if self.depths.contains(&0) {
                return Err(config_err("depths must be at least 1"));
            }
        }
        if matches!(
            exp,
            Experiment::InitVariance | Experiment::LmCurves | Experiment::TrainDrift | Experiment::PredictVariance
        ) {
            nonempty("widths", self.widths.len())?;
            if self.widths.contains(&0) {
                return Err(config_err("widths must be positive"));
            }
            if self.input_dim < 2 {
                return Err(config_err("input_dim must be at least 2"));
            }
        }
        match exp {
            Experiment::InitVariance | Experiment::LmCurves if self.n_seeds < 2 => {
                return Err(config_err("n_seeds must be at least 2"));
            }
            Experiment::TrainDrift if self.n_seeds == 0 => {
                return Err(config_err("n_seeds must be at least 1"));
            }
            _ => {}
        }
        if matches!(exp, Experiment::TrainDrift | Experiment::PredictVariance) {
            nonempty("samples", self.samples.len())?;
            if self.samples.contains(&0) {
                return Err(config_err("samples must be positive"));
            }
        }
        if exp == Experiment::KappaCurves {
            nonempty("covariances", self.covariances.len())?;
        }
        if self.covariances.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(config_err("covariances must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.data.covariance) {
            return Err(config_err("data.covariance must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.reference_covariance) {
            return Err(config_err("reference_covariance must lie in [0, 1]"));
        }
        if self.snapshot_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("snapshot_steps must be strictly increasing"));
        }
        self.train.validate().map_err(|e| config_err(e.to_string()))?;
        if exp == Experiment::PredictVariance && self.mc_samples < 2 {
            return Err(config_err("mc_samples must be at least 2"));
        }
        let uses_data = matches!(exp, Experiment::TrainDrift | Experiment::PredictVariance);
        if uses_data && self.data.source == DataSource::Mnist && self.data.dir.is_none() {
            return Err(config_err(format!(
                "MNIST data needs data.dir, --data-dir or {DATA_DIR_ENV}"
            )));
        }
        Ok(())
    }

    /// Grid cells in output order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let pairs = self.hyper_pairs()?;
        let mut cells = Vec::new();
        let base = |(w, b): (f64, f64)| Cell {
            sigma_w_sq: w,
            sigma_b_sq: b,
            depth: None,
            width: None,
            covariance: None,
            samples: None,
        };
        for &p in &pairs {
            match self.experiment {
                Experiment::PhaseDiagram => cells.push(base(p)),
                Experiment::InitVariance | Experiment::LmCurves => {
                    for &m in &self.widths {
                        for &l in &self.depths {
                            cells.push(Cell {
                                depth: Some(l),
                                width: Some(m),
                                ..base(p)
                            });
                        }
                    }
                }
                Experiment::TrainDrift => {
                    for &m in &self.widths {
                        for &l in &self.depths {
                            for &s in &self.samples {
                                cells.push(Cell {
                                    depth: Some(l),
                                    width: Some(m),
                                    samples: Some(s),
                                    ..base(p)
                                });
                            }
                        }
                    }
                }
                Experiment::KappaCurves => {
                    for &c in &self.covariances {
                        for &l in &self.depths {
                            cells.push(Cell {
                                depth: Some(l),
                                covariance: Some(c),
                                ..base(p)
                            });
                        }
                    }
                }
                Experiment::PredictVariance => {
                    for &l in &self.depths {
                        for &s in &self.samples {
                            cells.push(Cell {
                                depth: Some(l),
                                width: Some(self.widths[0]),
                                covariance: Some(self.data.covariance),
                                samples: Some(s),
                                ..base(p)
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }

    /// Number of independent jobs (cells times replicates).
    pub fn job_count(&self) -> Result<usize> {
        let cells = self.cells()?.len();
        Ok(match self.experiment {
            Experiment::InitVariance | Experiment::LmCurves | Experiment::TrainDrift => cells * self.n_seeds,
            Experiment::PredictVariance => cells * (1 + self.end_to_end_seeds),
            _ => cells,
        })
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// One grid point. Fields that the experiment does not vary are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub sigma_w_sq: f64,
    pub sigma_b_sq: f64,
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub covariance: Option<f64>,
    pub samples: Option<usize>,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub experiment: Experiment,
    pub activation: ActivationKind,
    pub sigma_w_sq: Option<f64>,
    pub sigma_b_sq: f64,
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub covariance: Option<f64>,
    pub samples: Option<usize>,
    pub replicate: Option<usize>,
    pub step: Option<usize>,
    pub statistic: String,
    pub value: String,
}

impl Row {
    fn fields(&self) -> [String; 12] {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        [
            self.experiment.to_string(),
            self.activation.to_string(),
            opt(self.sigma_w_sq),
            self.sigma_b_sq.to_string(),
            opt(self.depth),
            opt(self.width),
            opt(self.covariance),
            opt(self.samples),
            opt(self.replicate),
            opt(self.step),
            self.statistic.clone(),
            self.value.clone(),
        ]
    }

    /// The value as a number; phase labels and other text give `None`.
    pub fn number(&self) -> Option<f64> {
        self.value.parse().ok()
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| LabError::Io {
        path: PathBuf::from("<csv>"),
        source: e,
    })?;
    Ok(())
}

/// Result of one cell: CSV rows in a fixed order and the records to store.
#[derive(Debug, Default)]
struct CellOutput {
    rows: Vec<Row>,
    records: Vec<RunRecord>,
}

struct Emitter<'a> {
    cfg: &'a SweepConfig,
    cell: Cell,
    rows: Vec<Row>,
}

impl<'a> Emitter<'a> {
    fn new(cfg: &'a SweepConfig, cell: Cell) -> Self {
        Self {
            cfg,
            cell,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, replicate: Option<usize>, step: Option<usize>, statistic: &str, value: String) {
        self.rows.push(Row {
            experiment: self.cfg.experiment,
            activation: self.cfg.activation,
            sigma_w_sq: Some(self.cell.sigma_w_sq),
            sigma_b_sq: self.cell.sigma_b_sq,
            depth: self.cell.depth,
            width: self.cell.width,
            covariance: self.cell.covariance,
            samples: self.cell.samples,
            replicate,
            step,
            statistic: statistic.into(),
            value,
        });
    }

    fn num(&mut self, statistic: &str, value: f64) {
        self.push(None, None, statistic, value.to_string());
    }
}

/// Sweep results and where they were written.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<Row>,
    pub jobs: usize,
    pub csv_path: PathBuf,
    pub records_path: PathBuf,
}

/// Runs `cfg` and writes `<out_dir>/records.jsonl` (appended as cells finish)
/// and `<out_dir>/<experiment>.csv`.
pub fn run_sweep(cfg: &SweepConfig, out_dir: &Path) -> Result<SweepOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let records_path = out_dir.join(RECORDS_FILE);
    let rows = execute(cfg, Some(&records_path))?;
    let csv_path = out_dir.join(format!("{}.csv", cfg.experiment));
    let file = std::fs::File::create(&csv_path).map_err(|e| LabError::Io {
        path: csv_path.clone(),
        source: e,
    })?;
    write_csv(std::io::BufWriter::new(file), &rows)?;
    Ok(SweepOutcome {
        rows,
        jobs: cfg.job_count()?,
        csv_path,
        records_path,
    })
}

/// Runs every cell of `cfg` and returns the CSV rows in grid order. Records
/// are appended to `records` as cells finish.
pub fn execute(cfg: &SweepConfig, records: Option<&Path>) -> Result<Vec<Row>> {
    cfg.validate()?;
    let cells = cfg.cells()?;
    info!(
        "{}: {} cells, {} jobs",
        cfg.experiment,
        cells.len(),
        cfg.job_count()?
    );
    let datasets = load_datasets(cfg)?;
    let store = Mutex::new(());
    let outputs = cells
        .par_iter()
        .map(|&cell| {
            let out = run_cell(cfg, cell, &datasets)?;
            if let Some(path) = records {
                let _guard = store.lock().unwrap_or_else(|e| e.into_inner());
                for r in &out.records {
                    append_record(path, r)?;
                }
            }
            Ok(out.rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<Row> = outputs.into_iter().flatten().collect();
    if cfg.experiment == Experiment::PhaseDiagram {
        rows.extend(eoc_rows(cfg, &rows)?);
    }
    Ok(rows)
}

/// Training sets keyed by sample count.
fn load_datasets(cfg: &SweepConfig) -> Result<BTreeMap<usize, Dataset>> {
    if !matches!(cfg.experiment, Experiment::TrainDrift | Experiment::PredictVariance) {
        return Ok(BTreeMap::new());
    }
    let mut out = BTreeMap::new();
    for &s in &cfg.samples {
        // predict-variance adds a held-out test point
        let count = if cfg.experiment == Experiment::PredictVariance { s + 1 } else { s };
        let seed = derive_seed(cfg.seed, &[TAG_DATA, count as u64]);
        let ds = match cfg.data.source {
            DataSource::Mnist => {
                let dir = cfg.data.dir.as_ref().ok_or_else(|| config_err("missing data directory"))?;
                load_mnist_subset(dir, count, seed, cfg.data.normalize, cfg.data.labels)?
            }
            DataSource::Synthetic => synthetic_dataset(cfg.input_dim, count, cfg.data.covariance, seed, cfg.data.labels)?,
        };
        out.insert(s, ds);
    }
    Ok(out)
}

fn run_cell(cfg: &SweepConfig, cell: Cell, datasets: &BTreeMap<usize, Dataset>) -> Result<CellOutput> {
    let hyper = InitHyper::new(cell.sigma_w_sq, cell.sigma_b_sq, cfg.activation)?;
    match cfg.experiment {
        Experiment::PhaseDiagram => phase_cell(cfg, cell, hyper),
        Experiment::InitVariance | Experiment::LmCurves => init_variance_cell(cfg, cell, hyper),
        Experiment::TrainDrift => train_drift_cell(cfg, cell, hyper, &datasets[&cell.samples.unwrap()]),
        Experiment::KappaCurves => kappa_cell(cfg, cell, hyper),
        Experiment::PredictVariance => predict_variance_cell(cfg, cell, hyper, &datasets[&cell.samples.unwrap()]),
    }
}

fn record_for(cfg: &SweepConfig, cell: Cell, seed: u64) -> RunRecord {
    let mut r = RunRecord::new(cfg.experiment.name());
    r.activation = cfg.activation.to_string();
    r.sigma_w_sq = cell.sigma_w_sq;
    r.sigma_b_sq = cell.sigma_b_sq;
    r.depth = cell.depth.unwrap_or(0);
    r.width = cell.width.unwrap_or(0);
    r.seed = seed;
    if let Some(c) = cell.covariance {
        r.params.insert("covariance".into(), c);
    }
    if let Some(s) = cell.samples {
        r.params.insert("samples".into(), s as f64);
    }
    r
}

fn phase_cell(cfg: &SweepConfig, cell: Cell, hyper: InitHyper) -> Result<CellOutput> {
    let start = Instant::now();
    let label = classify_phase(&hyper)?;
    let mut e = Emitter::new(cfg, cell);
    e.num("chi1", label.chi1_fixed_point);
    if let Some(q) = label.q_fixed_point {
        e.num("q_star", q);
    }
    e.push(None, None, "phase", label.phase.to_string());
    let mut r = record_for(cfg, cell, cfg.seed);
    r.stats.insert("chi1".into(), label.chi1_fixed_point);
    if let Some(q) = label.q_fixed_point {
        r.stats.insert("q_star".into(), q);
    }
    r.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(CellOutput {
        rows: e.rows,
        records: vec![r],
    })
}

/// For each σ_b² row of a phase diagram, the bisected border `σ_w²` inside
/// the first bracket where `χ₁ − 1` changes sign.
fn eoc_rows(cfg: &SweepConfig, rows: &[Row]) -> Result<Vec<Row>> {
    if !cfg.hypers.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for b in cfg.sigma_b_sq.values()? {
        let chi: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.statistic == "chi1" && r.sigma_b_sq == b)
            .filter_map(|r| Some((r.sigma_w_sq?, r.number()?)))
            .collect();
        let border = if let Some(&(w, _)) = chi.iter().find(|(_, c)| (c - 1.0).abs() < crate::meanfield::EOC_TOLERANCE) {
            Some(w)
        } else {
            match chi.windows(2).find(|p| (p[0].1 - 1.0).signum() != (p[1].1 - 1.0).signum()) {
                Some(p) => Some(locate_eoc(cfg.activation, b, p[0].0, p[1].0)?),
                None => None,
            }
        };
        if let Some(w) = border {
            out.push(Row {
                experiment: cfg.experiment,
                activation: cfg.activation,
                sigma_w_sq: None,
                sigma_b_sq: b,
                depth: None,
                width: None,
                covariance: None,
                samples: None,
                replicate: None,
                step: None,
                statistic: "eoc_sigma_w_sq".into(),
                value: w.to_string(),
            });
        }
    }
    Ok(out)
}

fn init_variance_cell(cfg: &SweepConfig, cell: Cell, hyper: InitHyper) -> Result<CellOutput> {
    let start = Instant::now();
    let (l, m) = (cell.depth.unwrap(), cell.width.unwrap());
    let widths = Mlp::uniform_widths(cfg.input_dim, m, l);
    let x = default_probe(cfg.input_dim, derive_seed(cfg.seed, &[TAG_PROBE]));
    // replicate seeds ignore (σ_w², σ_b²) so neighbouring cells share weight draws
    let seed = derive_seed(cfg.seed, &[TAG_INIT, m as u64, l as u64]);
    let stat = init_variance_ratio(&widths, hyper, &x, cfg.n_seeds, seed)?;
    let theory = KernelModel::for_network(hyper, &widths)
        .and_then(|model| model.theta_star(&DMatrix::from_element(1, 1, x.norm_squared()), cfg.reference_covariance))
        .ok()
        .map(|t| t.matrix[(0, 0)])
        .filter(|v| v.is_finite());
    let mut e = Emitter::new(cfg, cell);
    let mut stats = vec![
        ("ratio", stat.ratio),
        ("standard_error", stat.standard_error),
        ("mean", stat.mean),
        ("second_moment", stat.second_moment),
        ("n_failed", stat.n_failed as f64),
        ("l_over_m", l as f64 / m as f64),
    ];
    if let Some(t) = theory {
        stats.push(("theory_mean", t));
    }
    let mut r = record_for(cfg, cell, seed);
    r.params.insert("n_seeds".into(), cfg.n_seeds as f64);
    for (name, v) in stats {
        e.num(name, v);
        r.stats.insert(name.into(), v);
    }
    r.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(CellOutput {
        rows: e.rows,
        records: vec![r],
    })
}

/// Seed of replicate `r` of a training cell. Cells that differ only in
/// `(σ_w², σ_b²)` share it, which pairs ordered and chaotic runs.
pub fn train_seed(base: u64, width: usize, depth: usize, samples: usize, replicate: usize) -> u64 {
    derive_seed(
        base,
        &[TAG_TRAIN, width as u64, depth as u64, samples as u64, replicate as u64],
    )
}

fn train_drift_cell(cfg: &SweepConfig, cell: Cell, hyper: InitHyper, data: &Dataset) -> Result<CellOutput> {
    let (l, m, s) = (cell.depth.unwrap(), cell.width.unwrap(), cell.samples.unwrap());
    let widths = Mlp::uniform_widths(data.dim(), m, l);
    let runs = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|rep| {
            let start = Instant::now();
            let seed = train_seed(cfg.seed, m, l, s, rep);
            let mut net = Mlp::init(&widths, hyper, seed)?;
            let (stat, diverged) =
                match training_drift(&mut net, &data.inputs, &data.targets, &cfg.train, &cfg.snapshot_steps) {
                    Ok(d) => (d, false),
                    Err(EmpiricalError::Divergence { partial, .. }) => (*partial, true),
                    Err(e) => return Err(e.into()),
                };
            Ok((rep, seed, stat, diverged, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<(usize, u64, DriftStat, bool, f64)>>>()?;
    let mut e = Emitter::new(cfg, cell);
    let mut records = Vec::new();
    for (rep, seed, stat, diverged, secs) in &runs {
        for (&t, &d) in stat.steps.iter().zip(&stat.rel_change) {
            e.push(Some(*rep), Some(t), "drift", d.to_string());
        }
        let summary = [
            ("final_drift", stat.final_drift()),
            ("initial_loss", stat.initial_loss),
            ("final_loss", stat.final_loss),
            ("steps_run", stat.steps_run as f64),
            ("diverged", if *diverged { 1.0 } else { 0.0 }),
        ];
        let mut r = record_for(cfg, cell, *seed);
        r.learning_rate = cfg.train.learning_rate;
        r.steps = stat.steps_run;
        r.params.insert("replicate".into(), *rep as f64);
        r.params.insert("max_steps".into(), cfg.train.max_steps as f64);
        // JSON has no infinities; the CSV keeps them.
        for (name, v) in summary {
            e.push(Some(*rep), None, name, v.to_string());
            if v.is_finite() {
                r.stats.insert(name.into(), v);
            }
        }
        for (&t, &d) in stat.steps.iter().zip(&stat.rel_change) {
            if d.is_finite() {
                r.stats.insert(format!("drift_{t}"), d);
            }
        }
        r.wall_clock_secs = *secs;
        records.push(r);
    }
    let n = runs.len() as f64;
    e.num("mean_final_drift", runs.iter().map(|r| r.2.final_drift()).sum::<f64>() / n);
    e.num("mean_final_loss", runs.iter().map(|r| r.2.final_loss).sum::<f64>() / n);
    e.num("n_diverged", runs.iter().filter(|r| r.3).count() as f64);
    Ok(CellOutput { rows: e.rows, records })
}

fn kappa_cell(cfg: &SweepConfig, cell: Cell, hyper: InitHyper) -> Result<CellOutput> {
    let start = Instant::now();
    let model = KernelModel::uniform(hyper, cell.depth.unwrap(), 1.0, cfg.convention)?;
    let k = model.kappas(1.0, cell.covariance.unwrap())?;
    let ratio = k.kappa1 / k.kappa2;
    let mut e = Emitter::new(cfg, cell);
    let mut r = record_for(cfg, cell, cfg.seed);
    for (name, v) in [("kappa1", k.kappa1), ("kappa2", k.kappa2), ("kappa_ratio", ratio)] {
        e.num(name, v);
        r.stats.insert(name.into(), v);
    }
    r.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(CellOutput {
        rows: e.rows,
        records: vec![r],
    })
}

/// Splits a kernel on `{x} ∪ X` (test point first) into `Θ(X)` and `Θ(X, x)`.
fn split_test_point(joint: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let s = joint.nrows() - 1;
    (
        joint.view((1, 1), (s, s)).into_owned(),
        joint.view((1, 0), (s, 1)).column(0).into_owned(),
    )
}

fn predict_variance_cell(cfg: &SweepConfig, cell: Cell, hyper: InitHyper, data: &Dataset) -> Result<CellOutput> {
    let start = Instant::now();
    let (l, m, s) = (cell.depth.unwrap(), cell.width.unwrap(), cell.samples.unwrap());
    let gram = data.gram();
    let model = KernelModel::uniform(hyper, l, m as f64, cfg.convention)?;
    let limits = model.reference_limits(cfg.reference_covariance)?;
    let prediction = predict_variance(&limits.kappas, limits.q_bar_l, limits.q_bar_sr_l, s)?;
    let ratio = condition_ratio(&limits.kappas, s);
    let theta_joint = model.theta_star(&gram, cfg.reference_covariance)?.matrix;
    let nngp = model.nngp_matrix(&gram)?;
    let (theta, theta_x) = split_test_point(&theta_joint);
    let mc_seed = derive_seed(cfg.seed, &[TAG_MC, l as u64, s as u64]);
    let mc = variance_oracle_mc(&theta, &theta_x, &nngp, cfg.mc_samples, mc_seed)?;
    let exact = variance_exact(&theta, &theta_x, &nngp)?;
    let mut stats = vec![
        ("kappa_ratio", ratio.ratio),
        ("A", prediction.a),
        ("q_bar_l", prediction.q_bar_l),
        ("q_bar_sr_l", prediction.q_bar_sr_l),
        ("predicted_variance", prediction.variance),
        ("oracle_variance", mc.variance),
        ("oracle_standard_error", mc.standard_error),
        ("exact_variance", exact),
        ("relative_error", (prediction.variance - mc.variance).abs() / mc.variance),
    ];
    if cfg.end_to_end_seeds > 0 {
        let (variance, mean) = end_to_end_variance(cfg, hyper, l, m, data)?;
        stats.push(("end_to_end_mean", mean));
        stats.push(("end_to_end_variance", variance));
        stats.push((
            "end_to_end_relative_error",
            (variance - prediction.variance).abs() / prediction.variance,
        ));
    }
    let mut e = Emitter::new(cfg, cell);
    let mut r = record_for(cfg, cell, mc_seed);
    r.params.insert("mc_samples".into(), cfg.mc_samples as f64);
    r.params.insert("end_to_end_seeds".into(), cfg.end_to_end_seeds as f64);
    for (name, v) in stats {
        e.num(name, v);
        r.stats.insert(name.into(), v);
    }
    r.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(CellOutput {
        rows: e.rows,
        records: vec![r],
    })
}

/// Sample variance and mean, over independently initialized width-`m`
/// networks, of the converged output at the held-out point (column 0 of
/// `data`). Each network is trained in closed form under its own initial
/// empirical kernel.
fn end_to_end_variance(cfg: &SweepConfig, hyper: InitHyper, l: usize, m: usize, data: &Dataset) -> Result<(f64, f64)> {
    let s = data.len() - 1;
    let widths = Mlp::uniform_widths(data.dim(), m, l);
    let y = data.targets.rows(1, s).into_owned();
    let outputs = (0..cfg.end_to_end_seeds)
        .into_par_iter()
        .map(|rep| {
            let net = Mlp::init(&widths, hyper, derive_seed(cfg.seed, &[TAG_END_TO_END, l as u64, s as u64, rep as u64]))?;
            let joint = empirical_kernel(&net, &data.inputs)?.matrix;
            let (theta, theta_x) = split_test_point(&joint);
            let f0 = net.forward_batch(&data.inputs)?;
            let f0_train = DVector::from_iterator(s, f0.iter().skip(1).copied());
            Ok(trained_output(&theta, &theta_x, f0[0], &f0_train, &y)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = outputs.len() as f64;
    let mean = outputs.iter().sum::<f64>() / n;
    let variance = outputs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((variance, mean))
}

/// Phase labels of a phase-diagram CSV keyed by `(σ_w², σ_b²)` bit patterns.
pub fn phase_labels(rows: &[Row]) -> BTreeMap<(u64, u64), Phase> {
    rows.iter()
        .filter(|r| r.statistic == "phase")
        .filter_map(|r| {
            let phase = match r.value.as_str() {
                "ordered" => Phase::Ordered,
                "chaotic" => Phase::Chaotic,
                "EOC" => Phase::EdgeOfChaos,
                _ => return None,
            };
            Some(((r.sigma_w_sq?.to_bits(), r.sigma_b_sq.to_bits()), phase))
        })
        .collect()
}
