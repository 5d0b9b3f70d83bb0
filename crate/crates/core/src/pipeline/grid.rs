use std::collections::{HashMap, HashSet};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{load_dataset, Dataset, Split};
use super::inference::{evaluate_pipeline, EvalOptions, Link};
use crate::defense::DenoiseSpec;
use crate::error::{Error, Result};
use crate::model::SplitModel;
use crate::perturb::Perturbation;
use crate::train::{Checkpoint, Metrics};

/// Column names of the results CSV, in order.
pub const CSV_HEADER: [&str; 9] = [
    "config_id",
    "perturbation",
    "defense",
    "acc_pct",
    "size_kb_mean",
    "size_kb_std",
    "est_bits_mean",
    "latency_s_mean",
    "error",
];

/// One evaluation: a checkpoint on a dataset, optionally perturbed and
/// denoised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Explicit row id; derived from the other fields when absent.
    #[serde(default)]
    pub id: Option<String>,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
    #[serde(default)]
    pub defense: Option<DenoiseSpec>,
    #[serde(default)]
    pub link: Link,
    #[serde(default)]
    pub sample_limit: Option<usize>,
    /// Mixed into every random draw of the perturbation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Results CSV the row is appended to.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_split() -> Split {
    Split::Test
}

fn default_batch() -> usize {
    EvalOptions::default().batch_size
}

pub fn perturbation_descriptor(p: Option<&Perturbation>) -> String {
    p.map_or_else(|| "clean".to_string(), Perturbation::descriptor)
}

pub fn defense_descriptor(d: Option<&DenoiseSpec>) -> String {
    d.map_or_else(|| "none".to_string(), DenoiseSpec::descriptor)
}

impl ExperimentConfig {
    pub fn new(checkpoint: impl Into<PathBuf>, dataset: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            id: None,
            checkpoint: checkpoint.into(),
            dataset: dataset.into(),
            split: Split::Test,
            perturbation: None,
            defense: None,
            link: Link::default(),
            sample_limit: None,
            seed: 0,
            batch_size: default_batch(),
            output: None,
        }
    }

    pub fn config_id(&self) -> String {
        if let Some(id) = &self.id {
            return id.clone();
        }
        let stem = self.checkpoint.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let limit = self.sample_limit.map_or_else(|| "all".to_string(), |n| n.to_string());
        format!(
            "{stem}|{}|{}|n{limit}|s{}",
            perturbation_descriptor(self.perturbation.as_ref()),
            defense_descriptor(self.defense.as_ref()),
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("checkpoint", &self.checkpoint), ("dataset", &self.dataset)] {
            if !p.exists() {
                return Err(Error::Config(format!("{what} {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.perturbation {
            p.validate()?;
        }
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.link.validate()
    }

    /// The perturbation with the experiment seed mixed in.
    pub fn seeded_perturbation(&self) -> Option<Perturbation> {
        self.perturbation.map(|p| p.reseeded(self.seed))
    }
}

/// Cartesian product of checkpoints, perturbations and defenses over one
/// dataset. `null` entries in `perturbations` / `defenses` mean clean input
/// and no defense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub checkpoints: Vec<PathBuf>,
    pub dataset: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default = "clean_only")]
    pub perturbations: Vec<Option<Perturbation>>,
    #[serde(default = "no_defense")]
    pub defenses: Vec<Option<DenoiseSpec>>,
    #[serde(default)]
    pub link: Link,
    #[serde(default)]
    pub sample_limit: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub output: PathBuf,
}

fn clean_only() -> Vec<Option<Perturbation>> {
    vec![None]
}

fn no_defense() -> Vec<Option<DenoiseSpec>> {
    vec![None]
}

impl GridSpec {
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for ck in &self.checkpoints {
            for p in &self.perturbations {
                for d in &self.defenses {
                    out.push(ExperimentConfig {
                        id: None,
                        checkpoint: ck.clone(),
                        dataset: self.dataset.clone(),
                        split: self.split,
                        perturbation: *p,
                        defense: *d,
                        link: self.link,
                        sample_limit: self.sample_limit,
                        seed: self.seed,
                        batch_size: self.batch_size,
                        output: Some(self.output.clone()),
                    });
                }
            }
        }
        out
    }
}

/// One line of the results CSV. Numeric fields are empty when the cell
/// failed; `error` is empty when it succeeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_id: String,
    pub perturbation: String,
    pub defense: String,
    pub acc_pct: Option<f64>,
    pub size_kb_mean: Option<f64>,
    pub size_kb_std: Option<f64>,
    pub est_bits_mean: Option<f64>,
    pub latency_s_mean: Option<f64>,
    pub error: String,
    /// Measured run time; kept out of the CSV so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl ResultRow {
    pub fn from_metrics(cfg: &ExperimentConfig, m: &Metrics, wall_time_s: f64) -> Self {
        ResultRow {
            config_id: cfg.config_id(),
            perturbation: perturbation_descriptor(cfg.perturbation.as_ref()),
            defense: defense_descriptor(cfg.defense.as_ref()),
            acc_pct: Some(m.accuracy_pct),
            size_kb_mean: Some(m.size_kb_mean),
            size_kb_std: Some(m.size_kb_std),
            est_bits_mean: Some(m.est_bits_mean),
            latency_s_mean: Some(m.latency_s_mean),
            error: String::new(),
            wall_time_s,
        }
    }

    pub fn failed(cfg: &ExperimentConfig, err: &Error, wall_time_s: f64) -> Self {
        ResultRow {
            config_id: cfg.config_id(),
            perturbation: perturbation_descriptor(cfg.perturbation.as_ref()),
            defense: defense_descriptor(cfg.defense.as_ref()),
            acc_pct: None,
            size_kb_mean: None,
            size_kb_std: None,
            est_bits_mean: None,
            latency_s_mean: None,
            error: err.to_string(),
            wall_time_s,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_empty()
    }
}

/// Loaded checkpoints and datasets shared between grid cells.
#[derive(Default)]
pub struct Resources {
    models: HashMap<PathBuf, SplitModel>,
    datasets: HashMap<(PathBuf, Split), Dataset>,
}

impl Resources {
    pub fn model(&mut self, path: &Path) -> Result<&SplitModel> {
        if !self.models.contains_key(path) {
            let ck = Checkpoint::load(path)?;
            self.models.insert(path.to_path_buf(), ck.model);
        }
        Ok(&self.models[path])
    }

    pub fn dataset(&mut self, path: &Path, split: Split) -> Result<&Dataset> {
        let key = (path.to_path_buf(), split);
        if !self.datasets.contains_key(&key) {
            self.datasets.insert(key.clone(), load_dataset(path, split)?);
        }
        Ok(&self.datasets[&key])
    }

    /// Evaluates one cell.
    pub fn evaluate(&mut self, cfg: &ExperimentConfig) -> Result<Metrics> {
        cfg.validate()?;
        let data = self.dataset(&cfg.dataset, cfg.split)?.clone();
        let data = match cfg.sample_limit {
            Some(n) if n > data.len() => {
                return Err(Error::Config(format!("sample_limit {n} exceeds {} images", data.len())))
            }
            Some(n) => data.take(n),
            None => data,
        };
        let model = self.model(&cfg.checkpoint)?;
        let opts = EvalOptions { batch_size: cfg.batch_size, link: cfg.link };
        evaluate_pipeline(model, &data, cfg.seeded_perturbation().as_ref(), cfg.defense.as_ref(), &opts)
    }

    /// Evaluates one cell, turning failures into an error row.
    pub fn run_cell(&mut self, cfg: &ExperimentConfig) -> ResultRow {
        let start = Instant::now();
        match self.evaluate(cfg) {
            Ok(m) => ResultRow::from_metrics(cfg, &m, start.elapsed().as_secs_f64()),
            Err(e) => ResultRow::failed(cfg, &e, start.elapsed().as_secs_f64()),
        }
    }
}

/// Rows of an existing results CSV (empty when the file does not exist).
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    reader.deserialize().map(|r| r.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("results csv: {e}"))
}

/// Appends rows to a results CSV, writing the header for a new file.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every cell whose id is not yet in `output`, appending one row per
/// cell as it finishes. Returns the new rows.
pub fn run_grid(
    cells: &[ExperimentConfig],
    output: &Path,
    resources: &mut Resources,
    mut on_row: impl FnMut(&ResultRow),
) -> Result<Vec<ResultRow>> {
    let mut done: HashSet<String> = read_results(output)?.into_iter().map(|r| r.config_id).collect();
    let mut rows = Vec::new();
    for cell in cells {
        let id = cell.config_id();
        if !done.insert(id) {
            continue;
        }
        let row = resources.run_cell(cell);
        append_results(output, std::slice::from_ref(&row))?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
