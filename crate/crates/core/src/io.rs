//! File formats: logged datasets, policies, result tables and experiment configs.
//!
//! All numbers are written with Rust's shortest round-trip float formatting,
//! so reading a file back reproduces every value exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::BaselineMode;
use crate::evaluation::{OpeExperimentConfig, OpeResultRow};
use crate::learning::{OptimizerConfig, TrainingExperimentConfig, TrainingRun};
use crate::policy::{LinearSoftmaxPolicy, LoggedDataset, LoggedInteraction, Policy};
use crate::simulator::EnvironmentConfig;

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a sibling temp file and renames it into place, so a
/// reader never sees a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path `{}` has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn csv_error(path: &str, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.record() as usize);
    Error::Parse {
        path: path.to_string(),
        row,
        column: String::new(),
        reason: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Logged datasets

const ACTION: &str = "action";
const REWARD: &str = "reward";
const PROPENSITY: &str = "propensity";

struct DatasetColumns {
    features: Vec<usize>,
    action: usize,
    reward: usize,
    propensity: usize,
}

fn dataset_columns(path: &str, header: &csv::StringRecord) -> Result<DatasetColumns> {
    let header_error = |column: &str, reason: String| Error::Header {
        path: path.to_string(),
        column: column.to_string(),
        reason,
    };
    let find = |name: &str| -> Result<usize> {
        let mut hits = header.iter().enumerate().filter(|(_, h)| h.trim() == name);
        match (hits.next(), hits.next()) {
            (Some((i, _)), None) => Ok(i),
            (None, _) => Err(header_error(name, "required column is missing".into())),
            (Some(_), Some(_)) => Err(header_error(name, "column appears more than once".into())),
        }
    };
    let action = find(ACTION)?;
    let reward = find(REWARD)?;
    let propensity = find(PROPENSITY)?;
    let mut features: Vec<(usize, usize)> = Vec::new();
    for (i, name) in header.iter().enumerate() {
        let name = name.trim();
        if [ACTION, REWARD, PROPENSITY].contains(&name) {
            continue;
        }
        let index = name
            .strip_prefix("x_")
            .and_then(|j| j.parse::<usize>().ok())
            .ok_or_else(|| header_error(name, "unexpected column (expected x_<j>, action, reward, propensity)".into()))?;
        features.push((index, i));
    }
    features.sort_unstable();
    for (expected, &(index, _)) in features.iter().enumerate() {
        if index != expected {
            return Err(header_error(
                &format!("x_{expected}"),
                "feature columns must be x_0, x_1, ... without gaps or repeats".into(),
            ));
        }
    }
    if features.is_empty() {
        return Err(header_error("x_0", "at least one feature column is required".into()));
    }
    Ok(DatasetColumns {
        features: features.into_iter().map(|(_, i)| i).collect(),
        action,
        reward,
        propensity,
    })
}

/// Parses a logged dataset. The header fixes `d`; `K` is one more than the
/// largest logged action.
pub fn parse_dataset<R: Read>(reader: R, source: &str) -> Result<LoggedDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    let cols = dataset_columns(source, &header)?;
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            path: source.to_string(),
            row,
            column: String::new(),
            reason: e.to_string(),
        })?;
        let field = |col: usize| -> Result<&str> {
            record.get(col).map(str::trim).ok_or_else(|| Error::Parse {
                path: source.to_string(),
                row,
                column: header[col].to_string(),
                reason: "missing field".into(),
            })
        };
        let float = |col: usize| -> Result<f64> {
            let raw = field(col)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    path: source.to_string(),
                    row,
                    column: header[col].to_string(),
                    reason: format!("`{raw}` is not a finite number"),
                })
        };
        let context = cols.features.iter().map(|&c| float(c)).collect::<Result<Vec<_>>>()?;
        let raw_action = field(cols.action)?;
        let action = raw_action.parse::<usize>().map_err(|_| Error::Parse {
            path: source.to_string(),
            row,
            column: ACTION.into(),
            reason: format!("`{raw_action}` is not a non-negative integer"),
        })?;
        let reward = float(cols.reward)?;
        let propensity = float(cols.propensity)?;
        if propensity <= 0.0 {
            return Err(Error::CommonSupport { row, propensity });
        }
        if propensity > 1.0 {
            return Err(Error::Parse {
                path: source.to_string(),
                row,
                column: PROPENSITY.into(),
                reason: format!("{propensity} is not in (0, 1]"),
            });
        }
        rows.push(LoggedInteraction {
            context,
            action,
            reward,
            propensity,
        });
    }
    let num_actions = rows.iter().map(|r| r.action + 1).max().unwrap_or(1);
    LoggedDataset::new(cols.features.len(), num_actions, rows)
}

pub fn read_dataset(path: &Path) -> Result<LoggedDataset> {
    parse_dataset(open(path)?, &path.display().to_string())
}

pub fn format_dataset(dataset: &LoggedDataset) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..dataset.context_dim()).map(|j| format!("x_{j}")).collect();
    header.extend([ACTION, REWARD, PROPENSITY].map(String::from));
    let sink_error = |e: csv::Error| Error::numeric("write_dataset", e.to_string());
    wtr.write_record(&header).map_err(sink_error)?;
    let mut fields = Vec::with_capacity(header.len());
    for row in dataset.interactions() {
        fields.clear();
        fields.extend(row.context.iter().map(|v| v.to_string()));
        fields.push(row.action.to_string());
        fields.push(row.reward.to_string());
        fields.push(row.propensity.to_string());
        wtr.write_record(&fields).map_err(sink_error)?;
    }
    wtr.into_inner()
        .map_err(|e| Error::numeric("write_dataset", e.to_string()))
}

pub fn write_dataset(path: &Path, dataset: &LoggedDataset) -> Result<()> {
    write_atomic(path, &format_dataset(dataset)?)
}

// ---------------------------------------------------------------------------
// Policies: first line `K,d`, then K lines of d weights.

pub fn format_policy(policy: &LinearSoftmaxPolicy) -> String {
    let (k, d) = (policy.num_actions(), policy.context_dim());
    let mut out = format!("{k},{d}\n");
    for a in 0..k {
        let row: Vec<String> = policy.weight_row(a).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_policy(text: &str, source: &str) -> Result<LinearSoftmaxPolicy> {
    let parse_error = |row: usize, column: String, reason: String| Error::Parse {
        path: source.to_string(),
        row,
        column,
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| parse_error(0, "k,d".into(), "empty policy file".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_error(0, "k,d".into(), format!("header `{header}` is not two integers `K,d`")))?;
    let [k, d] = dims[..] else {
        return Err(parse_error(0, "k,d".into(), format!("header `{header}` is not two integers `K,d`")));
    };
    let mut weights = Vec::with_capacity(k * d);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let values: Vec<&str> = line.split(',').collect();
        if values.len() != d {
            return Err(parse_error(row, String::new(), format!("expected {d} weights, found {}", values.len())));
        }
        for (j, raw) in values.iter().enumerate() {
            let v = raw
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(row, format!("w_{j}"), format!("`{raw}` is not a finite number")))?;
            weights.push(v);
        }
        rows += 1;
    }
    if rows != k {
        return Err(parse_error(rows, String::new(), format!("expected {k} weight rows, found {rows}")));
    }
    LinearSoftmaxPolicy::from_weights(k, d, weights)
}

pub fn read_policy(path: &Path) -> Result<LinearSoftmaxPolicy> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_policy(&text, &path.display().to_string())
}

pub fn write_policy(path: &Path, policy: &LinearSoftmaxPolicy) -> Result<()> {
    write_atomic(path, format_policy(policy).as_bytes())
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TestValue,
    GradVariance,
    Mse,
    BiasSq,
    EstVariance,
    RelAbsError,
    BetaUsed,
}

/// One tidy row of a results file. Column names and order are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub estimator: String,
    pub seed: u64,
    /// Empty for rows that are not tied to a training epoch.
    pub epoch: Option<usize>,
    pub k_actions: usize,
    pub inv_temperature: f64,
    pub n_logged: usize,
    pub metric_name: Metric,
    pub metric_value: f64,
}

pub const RESULTS_HEADER: [&str; 9] = [
    "experiment",
    "estimator",
    "seed",
    "epoch",
    "k_actions",
    "inv_temperature",
    "n_logged",
    "metric_name",
    "metric_value",
];

pub fn format_results(records: &[ResultRecord]) -> Result<Vec<u8>> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let sink_error = |e: csv::Error| Error::numeric("write_results", e.to_string());
    wtr.write_record(RESULTS_HEADER).map_err(sink_error)?;
    for r in records {
        wtr.serialize(r).map_err(sink_error)?;
    }
    wtr.into_inner()
        .map_err(|e| Error::numeric("write_results", e.to_string()))
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    write_atomic(path, &format_results(records)?)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let source = path.display().to_string();
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let header = rdr.headers().map_err(|e| csv_error(&source, e))?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::Header {
            path: source,
            column: header.iter().collect::<Vec<_>>().join(","),
            reason: format!("expected exactly `{}`", RESULTS_HEADER.join(",")),
        });
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                path: source.clone(),
                row: i + 1,
                column: String::new(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Per-epoch `test_value`, `grad_variance` and `beta_used` rows of training runs.
pub fn training_records(
    experiment: &str,
    environment: &EnvironmentConfig,
    runs: &[TrainingRun],
) -> Vec<ResultRecord> {
    let mut out = Vec::new();
    for run in runs {
        let estimator = run.report.mode.to_string();
        for rec in &run.report.records {
            let metrics = [
                (Metric::TestValue, Some(rec.test_value)),
                (Metric::GradVariance, rec.grad_variance),
                (Metric::BetaUsed, rec.beta_used),
            ];
            for (metric_name, value) in metrics {
                if let Some(metric_value) = value {
                    out.push(ResultRecord {
                        experiment: experiment.to_string(),
                        estimator: estimator.clone(),
                        seed: run.seed,
                        epoch: Some(rec.epoch),
                        k_actions: environment.num_actions,
                        inv_temperature: environment.inverse_temperature,
                        n_logged: environment.dataset_size,
                        metric_name,
                        metric_value,
                    });
                }
            }
        }
    }
    out
}

/// `mse`, `bias_sq` and `est_variance` rows of an evaluation grid.
pub fn ope_records(experiment: &str, seed: u64, rows: &[OpeResultRow]) -> Vec<ResultRecord> {
    rows.iter()
        .flat_map(|row| {
            [
                (Metric::Mse, row.mse),
                (Metric::BiasSq, row.bias_squared),
                (Metric::EstVariance, row.variance),
            ]
            .map(|(metric_name, metric_value)| ResultRecord {
                experiment: experiment.to_string(),
                estimator: row.estimator.clone(),
                seed,
                epoch: None,
                k_actions: row.k_actions,
                inv_temperature: row.inv_temperature,
                n_logged: row.n_logged,
                metric_name,
                metric_value,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Experiment configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub test_contexts: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            test_contexts: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub dataset: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    /// On-policy value the estimates are compared against.
    pub reference_value: Option<f64>,
    pub estimators: Vec<BaselineMode>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            policy: None,
            reference_value: None,
            estimators: OpeExperimentConfig::default().estimators,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Main output file of the subcommand; `--out` overrides it.
    pub path: Option<PathBuf>,
    /// Directory for the final policies of `train`, one file per run and estimator.
    pub policy_dir: Option<PathBuf>,
}

/// The whole configuration file. Every field has a default, unknown keys are
/// rejected, and [`ExperimentConfig::to_toml`] writes every effective value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub environment: EnvironmentConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingExperimentConfig,
    pub ope: OpeExperimentConfig,
    pub sweep: SweepConfig,
    pub evaluate: EvaluateConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Sets the top-level seed, which drives logged data, shuffling and the
    /// evaluation grid. `environment.seed` fixes the reward function and is
    /// left alone.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.optimizer.seed = seed;
        self.ope.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the effective configuration, as lowercase hex.
    pub fn digest(&self) -> Result<String> {
        let hash = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }
}
