//! Batch experiments: configuration files, seed sweeps, per-run CSV and
//! checkpoint output, and the aggregated summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{load_feature_csv, make_gaussian_mixture_task, AugmentSpec, OpenSetDataset, SyntheticTask};
use crate::error::{Error, Result};
use crate::eval::{EvalContext, MetricsRecord};
use crate::nn::NetworkDims;
use crate::train::{run_epoch, select_best_checkpoint, ClosedSetHead, Mode, RunState, TrainConfig};

pub const SUMMARY_FILE: &str = "summary.json";
pub const SUMMARY_FORMAT: &str = "iomatch-summary-v1";

/// The on-disk configuration: one flat TOML table. Every key is optional and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,

    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub mu: usize,
    pub lr: f64,
    pub momentum: f64,
    pub cosine_decay: bool,
    pub tau_p: f64,
    pub tau_q: f64,
    pub lambda_mb: f64,
    pub lambda_ui: f64,
    pub lambda_op: f64,
    pub da_enabled: bool,
    pub hard_labels: bool,
    pub closed_eval_head: ClosedSetHead,

    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_mask_frac: f64,

    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub projector_hidden: usize,
    pub proj_dim: usize,

    pub k_seen: usize,
    pub k_unseen: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub n_labeled: usize,
    pub class_sep: f64,

    /// Setting any of the three CSV paths switches from the synthetic task
    /// to file input; then all three are required.
    pub labeled_csv: Option<PathBuf>,
    pub unlabeled_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let t = TrainConfig::default();
        let task = SyntheticTask::default();
        Self {
            modes: Mode::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            epochs: t.epochs,
            iters_per_epoch: t.iters_per_epoch,
            batch_size: t.batch_size,
            mu: t.mu,
            lr: t.lr,
            momentum: t.momentum,
            cosine_decay: t.cosine_decay,
            tau_p: t.tau_p,
            tau_q: t.tau_q,
            lambda_mb: t.lambda_mb,
            lambda_ui: t.lambda_ui,
            lambda_op: t.lambda_op,
            da_enabled: t.da_enabled,
            hard_labels: t.hard_labels,
            closed_eval_head: t.closed_eval_head,
            weak_sigma: t.augment.weak_sigma,
            strong_sigma: t.augment.strong_sigma,
            strong_mask_frac: t.augment.strong_mask_frac,
            encoder_hidden: t.dims.encoder_hidden,
            feature_dim: t.dims.feature_dim,
            projector_hidden: t.dims.projector_hidden,
            proj_dim: t.dims.proj_dim,
            k_seen: task.k_seen,
            k_unseen: task.k_unseen,
            input_dim: task.input_dim,
            n_per_class: task.n_per_class,
            n_labeled: task.n_labeled,
            class_sep: task.class_sep,
            labeled_csv: None,
            unlabeled_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Rebuilt per seed with `SyntheticTask::seed` set to the run seed.
    Synthetic(SyntheticTask),
    Csv {
        labeled: PathBuf,
        unlabeled: PathBuf,
        test: PathBuf,
    },
}

impl DataSource {
    pub fn build(&self, seed: u64) -> Result<OpenSetDataset> {
        match self {
            DataSource::Synthetic(task) => make_gaussian_mixture_task(&SyntheticTask { seed, ..task.clone() }),
            DataSource::Csv {
                labeled,
                unlabeled,
                test,
            } => load_feature_csv(labeled, unlabeled, test),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    /// Training settings; `mode` and `seed` are overridden per run.
    pub train: TrainConfig,
    pub data: DataSource,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub out_dir: PathBuf,
    /// The fully defaulted configuration, echoed into the summary.
    pub echo: ConfigFile,
}

impl ExperimentSpec {
    /// Validates `file` and resolves relative CSV paths against `base_dir`.
    pub fn from_config(file: ConfigFile, base_dir: &Path) -> Result<Self> {
        if file.seeds.is_empty() {
            return Err(Error::range("seeds", "must list at least one seed"));
        }
        if file.modes.is_empty() {
            return Err(Error::range("modes", "must list at least one mode"));
        }
        let mut distinct = file.modes.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() != file.modes.len() {
            return Err(Error::range("modes", "must not repeat a mode"));
        }

        let train = TrainConfig {
            mode: file.modes[0],
            seed: file.seeds[0],
            epochs: file.epochs,
            iters_per_epoch: file.iters_per_epoch,
            batch_size: file.batch_size,
            mu: file.mu,
            lr: file.lr,
            momentum: file.momentum,
            cosine_decay: file.cosine_decay,
            tau_p: file.tau_p,
            tau_q: file.tau_q,
            lambda_mb: file.lambda_mb,
            lambda_ui: file.lambda_ui,
            lambda_op: file.lambda_op,
            da_enabled: file.da_enabled,
            hard_labels: file.hard_labels,
            closed_eval_head: file.closed_eval_head,
            augment: AugmentSpec {
                weak_sigma: file.weak_sigma,
                strong_sigma: file.strong_sigma,
                strong_mask_frac: file.strong_mask_frac,
            },
            dims: NetworkDims {
                input_dim: file.input_dim,
                encoder_hidden: file.encoder_hidden.clone(),
                feature_dim: file.feature_dim,
                projector_hidden: file.projector_hidden,
                proj_dim: file.proj_dim,
            },
        };
        train.validate()?;

        let data = match (&file.labeled_csv, &file.unlabeled_csv, &file.test_csv) {
            (None, None, None) => {
                let task = SyntheticTask {
                    seed: 0,
                    k_seen: file.k_seen,
                    k_unseen: file.k_unseen,
                    input_dim: file.input_dim,
                    n_per_class: file.n_per_class,
                    n_labeled: file.n_labeled,
                    class_sep: file.class_sep,
                };
                validate_task(&task)?;
                DataSource::Synthetic(task)
            }
            (Some(l), Some(u), Some(t)) => DataSource::Csv {
                labeled: base_dir.join(l),
                unlabeled: base_dir.join(u),
                test: base_dir.join(t),
            },
            _ => {
                return Err(Error::range(
                    "labeled_csv",
                    "labeled_csv, unlabeled_csv and test_csv must be given together",
                ))
            }
        };

        Ok(Self {
            train,
            data,
            seeds: file.seeds.clone(),
            modes: file.modes.clone(),
            out_dir: file.out_dir.clone(),
            echo: file,
        })
    }
}

fn validate_task(task: &SyntheticTask) -> Result<()> {
    if task.k_seen < 2 {
        return Err(Error::range("k_seen", "must be >= 2"));
    }
    if task.input_dim == 0 {
        return Err(Error::range("input_dim", "must be >= 1"));
    }
    if !(task.class_sep > 0.0 && task.class_sep.is_finite()) {
        return Err(Error::range("class_sep", "must be finite and > 0"));
    }
    let n_train = task.n_per_class - (task.n_per_class as f64 * crate::data::TEST_FRACTION).floor() as usize;
    if task.n_labeled == 0 || task.n_labeled > n_train {
        return Err(Error::range("n_labeled", format!("must lie in [1, {n_train}]")));
    }
    Ok(())
}

/// Parses a TOML document. An empty document yields the full default
/// configuration.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentSpec> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    ExperimentSpec::from_config(file, base_dir)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_str(&text, base).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Aggregate {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub best_closed_acc: Aggregate,
    pub best_open_ba: Aggregate,
    pub final_util_rate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub config: ConfigFile,
    pub modes: Vec<ModeSummary>,
}

/// Outcome of one `(mode, seed)` run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub history: Vec<MetricsRecord>,
    pub best_epoch: usize,
}

impl RunRecord {
    pub fn best_closed_acc(&self) -> f64 {
        self.history[self.best_epoch].closed_acc
    }

    pub fn best_open_ba(&self) -> f64 {
        self.history.iter().map(|r| r.open_ba).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_util_rate(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.util_rate)
    }
}

pub fn run_file_stem(mode: Mode, seed: u64) -> String {
    format!("{mode}_seed{seed}")
}

/// Trains one run, appending a CSV row per epoch and writing the best
/// checkpoint at the end. On failure the partial CSV stays on disk next to a
/// `.FAILED` marker holding the error.
pub fn run_single(
    dataset: &OpenSetDataset,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<RunRecord> {
    let stem = run_file_stem(config.mode, config.seed);
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let marker = out_dir.join(format!("{stem}.FAILED"));
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }

    let result = (|| -> Result<RunRecord> {
        let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", csv_path.display()));

        let view = dataset.train_view();
        let ctx = EvalContext::from_dataset(dataset);
        let mut state = RunState::new(config, dataset.input_dim(), dataset.num_seen())?;
        for _ in 0..config.epochs {
            let record = run_epoch(&mut state, &view, &ctx, config)?;
            writer.serialize(record).map_err(csv_err)?;
            writer.flush().map_err(|e| Error::io(&csv_path, e))?;
        }

        let (params, best_epoch, _) = select_best_checkpoint(&state)?;
        params.save(out_dir.join(format!("{stem}.ckpt.json")))?;
        Ok(RunRecord {
            mode: config.mode,
            seed: config.seed,
            history: state.history,
            best_epoch,
        })
    })();

    if let Err(e) = &result {
        fs::write(&marker, format!("{e}\n")).map_err(|io| Error::io(&marker, io))?;
    }
    result
}

/// Every `(mode, seed)` pair of `spec`, then `summary.json`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Summary> {
    let out = &spec.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut runs: Vec<RunRecord> = Vec::new();
    for &seed in &spec.seeds {
        let dataset = spec.data.build(seed)?;
        for &mode in &spec.modes {
            let config = TrainConfig {
                mode,
                seed,
                ..spec.train.clone()
            };
            info!("training {mode} seed {seed}");
            runs.push(run_single(&dataset, &config, out)?);
        }
    }

    let summary = summarize(spec, &runs);
    let path = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

pub fn summarize(spec: &ExperimentSpec, runs: &[RunRecord]) -> Summary {
    let modes = spec
        .modes
        .iter()
        .map(|&mode| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.mode == mode).collect();
            ModeSummary {
                mode,
                seeds: mine.iter().map(|r| r.seed).collect(),
                best_closed_acc: Aggregate::from_values(mine.iter().map(|r| r.best_closed_acc()).collect()),
                best_open_ba: Aggregate::from_values(mine.iter().map(|r| r.best_open_ba()).collect()),
                final_util_rate: Aggregate::from_values(mine.iter().map(|r| r.final_util_rate()).collect()),
            }
        })
        .collect();
    Summary {
        format: SUMMARY_FORMAT.to_string(),
        config: spec.echo.clone(),
        modes,
    }
}

pub fn load_summary(out_dir: impl AsRef<Path>) -> Result<Summary> {
    let path = out_dir.as_ref().join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: Summary = serde_json::from_str(&text)?;
    if summary.format != SUMMARY_FORMAT {
        return Err(Error::Data(format!(
            "{}: unsupported summary format {:?}",
            path.display(),
            summary.format
        )));
    }
    Ok(summary)
}

/// Mode × metric table, `*` marking the best mean in each column.
pub fn format_report(summary: &Summary) -> Result<String> {
    let columns: [(&str, fn(&ModeSummary) -> &Aggregate); 3] = [
        ("closed_acc", |m| &m.best_closed_acc),
        ("open_ba", |m| &m.best_open_ba),
        ("util_rate", |m| &m.final_util_rate),
    ];
    for m in &summary.modes {
        for (name, get) in &columns {
            let a = get(m);
            if !(a.mean.is_finite() && a.std.is_finite()) {
                return Err(Error::Data(format!("non-finite {name} for mode {}", m.mode)));
            }
        }
    }
    let best: Vec<Option<usize>> = columns
        .iter()
        .map(|(_, get)| {
            let means: Vec<f64> = summary.modes.iter().map(|m| get(m).mean).collect();
            crate::train::best_epoch(&means).map(|(i, _)| i)
        })
        .collect();

    let mut out = String::new();
    let _ = write!(out, "{:<12}", "mode");
    for (name, _) in &columns {
        let _ = write!(out, "{name:<20}");
    }
    out.truncate(out.trim_end().len());
    out.push('\n');
    for (row, m) in summary.modes.iter().enumerate() {
        let _ = write!(out, "{:<12}", m.mode.name());
        for (col, (_, get)) in columns.iter().enumerate() {
            let a = get(m);
            let flag = if best[col] == Some(row) && summary.modes.len() > 1 { "*" } else { "" };
            let cell = format!("{:.4} ± {:.4}{flag}", a.mean, a.std);
            let _ = write!(out, "{cell:<20}");
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
    }
    Ok(out)
}

/// Loads `summary.json` from `out_dir` and renders the report table.
pub fn emit_report(out_dir: impl AsRef<Path>) -> Result<String> {
    format_report(&load_summary(out_dir)?)
}
