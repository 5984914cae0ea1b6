//! Reproducible experiment runs: a declarative [`ExperimentSpec`], the
//! length and `λ` sweeps built on it, and the preset protocols.
//!
//! Everything random is derived from [`ExperimentSpec::seed`] through named
//! streams, so a spec plus a seed fully determines every output.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Activation, DeepSets, Gru, InputEncoding, Link, Model, Rnn};
use crate::regularizers::SamplerConfig;
use crate::rng;
use crate::tasks::{gen_arithmetic, gen_parity, SequenceDataset, TaskKind};
use crate::training::{
    holdout_select, train, LossKind, Metric, Regularizer, RunReport, TrainingConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Rnn,
    Gru,
    Deepsets,
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(Architecture::Rnn),
            "gru" => Ok(Architecture::Gru),
            "deepsets" => Ok(Architecture::Deepsets),
            other => Err(Error::config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Which data to generate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub count: usize,
    /// Arithmetic tasks need `min_len == max_len`.
    pub min_len: usize,
    pub max_len: usize,
    /// Largest element value; parity forces 1.
    pub alphabet_max: i64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            task: TaskKind::Parity,
            count: 1000,
            min_len: 2,
            max_len: 10,
            alphabet_max: 1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("task count must be at least 1"));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "lengths need 1 <= min <= max, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.task != TaskKind::Parity && self.min_len != self.max_len {
            return Err(Error::config(format!(
                "{} data has one fixed length; got {}..={}",
                self.task.name(),
                self.min_len,
                self.max_len
            )));
        }
        if self.task != TaskKind::Parity && self.alphabet_max < 1 {
            return Err(Error::config("alphabet_max must be at least 1"));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<SequenceDataset> {
        self.validate()?;
        match self.task {
            TaskKind::Parity => gen_parity(self.count, self.min_len, self.max_len, seed),
            task => gen_arithmetic(task, self.count, self.min_len, self.alphabet_max, seed),
        }
    }

    /// Same task at one fixed length with `count` examples.
    pub fn at_length(&self, len: usize, count: usize) -> TaskSpec {
        TaskSpec {
            count,
            min_len: len,
            max_len: len,
            ..*self
        }
    }

    fn effective_alphabet_max(&self) -> i64 {
        match self.task {
            TaskKind::Parity => 1,
            _ => self.alphabet_max,
        }
    }
}

/// Architecture and size of a freshly initialised model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub width: usize,
    /// RNN cell activation; unused by GRU and DeepSets.
    pub activation: Activation,
    /// `None` scales by the task's largest element value.
    pub encoding: Option<InputEncoding>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            arch: Architecture::Rnn,
            width: 20,
            activation: Activation::Tanh,
            encoding: None,
        }
    }
}

impl ModelSpec {
    /// Classification tasks get a logistic link, regression an identity one.
    pub fn build(&self, task: &TaskSpec, seed: u64) -> Result<Model> {
        if self.width == 0 {
            return Err(Error::config("model width must be at least 1"));
        }
        let encoding = self.encoding.unwrap_or(InputEncoding::Scalar {
            divisor: task.effective_alphabet_max() as f64,
        });
        if let InputEncoding::Scalar { divisor } = encoding {
            if !(divisor.is_finite() && divisor != 0.0) {
                return Err(Error::config(format!("bad encoding divisor {divisor}")));
            }
        }
        let link = if task.task.is_classification() {
            Link::Logistic
        } else {
            Link::Identity
        };
        let mut r = rng::stream(seed, "experiments.init");
        Ok(match self.arch {
            Architecture::Rnn => Model::Rnn(Rnn::init(
                encoding,
                self.width,
                self.activation,
                link,
                &mut r,
            )),
            Architecture::Gru => Model::Gru(Gru::init(encoding, self.width, link, &mut r)),
            Architecture::Deepsets => {
                Model::DeepSets(DeepSets::init(encoding, self.width, link, &mut r))
            }
        })
    }
}

/// Grid for [`run_sweep`]. Exactly one of the two lists must be non-empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Train once, then test at each of these lengths.
    pub lengths: Vec<usize>,
    /// Train one model per `λ` under `training.regularizer` and select on
    /// a holdout split.
    pub lambdas: Vec<f64>,
    /// Test examples per grid point.
    pub test_count: usize,
}

/// A complete, self-describing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub task: TaskSpec,
    pub model: ModelSpec,
    /// `seed` and `sampler.seed` are overwritten from the experiment seed.
    pub training: TrainingConfig,
    pub sweep: SweepSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            seed: 0,
            out_dir: None,
            task: TaskSpec::default(),
            model: ModelSpec::default(),
            training: TrainingConfig::default(),
            sweep: SweepSpec {
                test_count: 1000,
                ..SweepSpec::default()
            },
        }
    }
}

impl ExperimentSpec {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot encode spec: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("cannot parse spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.training.validate()?;
        if self.model.width == 0 {
            return Err(Error::config("model width must be at least 1"));
        }
        Ok(())
    }

    /// The training config with all seeds derived from `seed`.
    pub fn training_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            seed: rng::derive_seed(seed, "experiments.shuffle"),
            sampler: SamplerConfig {
                seed: rng::derive_seed(seed, "experiments.penalty"),
                ..self.training.sampler
            },
            ..self.training
        }
    }

    pub fn train_set(&self, seed: u64) -> Result<SequenceDataset> {
        self.task
            .generate(rng::derive_seed(seed, "experiments.train"))
    }

    /// Independent test set at `len`, or at the training lengths when `None`.
    pub fn test_set(&self, seed: u64, len: Option<usize>) -> Result<SequenceDataset> {
        let count = self.sweep.test_count;
        match len {
            Some(l) => self
                .task
                .at_length(l, count)
                .generate(rng::derive_seed(seed, &format!("experiments.test.{l}"))),
            None => {
                TaskSpec { count, ..self.task }.generate(rng::derive_seed(seed, "experiments.test"))
            }
        }
    }

    pub fn build_model(&self, seed: u64) -> Result<Model> {
        self.model.build(&self.task, seed)
    }
}

/// Result of [`train_one`].
pub struct TrainedRun {
    pub model: Model,
    pub report: RunReport,
    pub train_metric: f64,
}

/// Generates the training set for `seed`, trains one model on all of it and
/// reports the final training metric.
pub fn train_one(spec: &ExperimentSpec, seed: u64) -> Result<TrainedRun> {
    spec.validate()?;
    let data = spec.train_set(seed)?;
    let cfg = spec.training_config(seed);
    let mut model = spec.build_model(seed)?;
    let report = train(&mut model, &data, None, &cfg)?;
    let train_metric = cfg.metric.evaluate(&model, &data)?;
    Ok(TrainedRun {
        model,
        report,
        train_metric,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Length,
    Lambda,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Length => "length",
            GridKind::Lambda => "lambda",
        }
    }
}

/// One grid point of one seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub grid: GridKind,
    pub point: f64,
    pub regularizer: Regularizer,
    pub lambda: f64,
    pub train_metric: f64,
    /// NaN for length sweeps, which use no holdout.
    pub holdout_metric: f64,
    pub test_metric: f64,
    /// The holdout winner of its seed; always true in length sweeps.
    pub selected: bool,
}

pub const SWEEP_CSV_HEADER: &str =
    "seed,grid,point,regularizer,lambda,train_metric,holdout_metric,test_metric,selected";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{},{:?},{:?},{:?},{:?},{}",
            self.seed,
            self.grid.name(),
            self.point,
            self.regularizer.name(),
            self.lambda,
            self.train_metric,
            self.holdout_metric,
            self.test_metric,
            self.selected
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{SWEEP_CSV_HEADER}").unwrap();
    for r in rows {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

/// Trains once and evaluates on an independent test set per length.
pub fn length_sweep(spec: &ExperimentSpec, seed: u64) -> Result<Vec<SweepRow>> {
    if spec.sweep.lengths.is_empty() {
        return Err(Error::config("length grid is empty"));
    }
    let run = train_one(spec, seed)?;
    let cfg = &run.report.config;
    spec.sweep
        .lengths
        .iter()
        .map(|&len| {
            let test = spec.test_set(seed, Some(len))?;
            Ok(SweepRow {
                seed,
                grid: GridKind::Length,
                point: len as f64,
                regularizer: cfg.regularizer,
                lambda: cfg.lambda,
                train_metric: run.train_metric,
                holdout_metric: f64::NAN,
                test_metric: cfg.metric.evaluate(&run.model, &test)?,
                selected: true,
            })
        })
        .collect()
}

/// One model per `λ`, all from the same initialisation, trained on 80% of
/// the data; the holdout winner is flagged `selected`.
pub fn lambda_sweep(spec: &ExperimentSpec, seed: u64) -> Result<Vec<SweepRow>> {
    if spec.sweep.lambdas.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    spec.validate()?;
    let base = spec.training_config(seed);
    let configs: Vec<TrainingConfig> = spec
        .sweep
        .lambdas
        .iter()
        .map(|&lambda| TrainingConfig { lambda, ..base })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let data = spec.train_set(seed)?;
    let test = spec.test_set(seed, None)?;
    let split_seed = rng::derive_seed(seed, "experiments.split");
    let sel = holdout_select(&configs, &data, split_seed, |_| spec.build_model(seed))?;
    configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let model = &sel.models[i];
            Ok(SweepRow {
                seed,
                grid: GridKind::Lambda,
                point: c.lambda,
                regularizer: c.regularizer,
                lambda: c.lambda,
                train_metric: sel.reports[i].last().map_or(f64::NAN, |r| r.train_metric),
                holdout_metric: sel.scores[i],
                test_metric: c.metric.evaluate(model, &test)?,
                selected: i == sel.best,
            })
        })
        .collect()
}

/// Runs the spec's grid for every seed, up to `jobs` seeds at a time. Rows
/// come back in seed order whatever `jobs` is.
pub fn run_sweep(spec: &ExperimentSpec, seeds: &[u64], jobs: usize) -> Result<Vec<SweepRow>> {
    let one = |seed: u64| match (spec.sweep.lengths.is_empty(), spec.sweep.lambdas.is_empty()) {
        (false, true) => length_sweep(spec, seed),
        (true, false) => lambda_sweep(spec, seed),
        (true, true) => Err(Error::config("sweep grid is empty")),
        (false, false) => Err(Error::config(
            "sweep takes either a length grid or a lambda grid, not both",
        )),
    };
    if seeds.is_empty() {
        return Err(Error::config("no seeds given"));
    }
    let jobs = jobs.max(1);
    let mut rows = Vec::new();
    for chunk in seeds.chunks(jobs) {
        let results: Vec<Result<Vec<SweepRow>>> = if chunk.len() == 1 {
            vec![one(chunk[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|&sd| s.spawn(move || one(sd))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("sweep worker panicked"))
                    .collect()
            })
        };
        for r in results {
            rows.extend(r?);
        }
    }
    Ok(rows)
}

/// Mean test metric of the `selected` rows.
pub fn mean_selected_test(rows: &[SweepRow]) -> f64 {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.selected)
        .map(|r| r.test_metric)
        .collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

/// Named protocols.
pub mod presets {
    use super::*;

    pub const NAMES: [&str; 6] = [
        "parity-rnn",
        "parity-deepsets",
        "sum-none",
        "sum-sire",
        "sum-sub",
        "half-range",
    ];

    pub fn by_name(name: &str) -> Result<ExperimentSpec> {
        match name {
            "parity-rnn" => Ok(parity_rnn()),
            "parity-deepsets" => Ok(parity_deepsets()),
            "sum-none" => Ok(sum(Regularizer::None)),
            "sum-sire" => Ok(sum(Regularizer::Sire)),
            "sum-sub" => Ok(sum(Regularizer::Sub)),
            "half-range" => Ok(half_range()),
            other => Err(Error::config(format!(
                "unknown preset `{other}`; known: {}",
                NAMES.join(", ")
            ))),
        }
    }

    fn parity_base() -> ExperimentSpec {
        ExperimentSpec {
            task: TaskSpec::default(),
            training: TrainingConfig {
                loss: LossKind::CrossEntropy,
                metric: Metric::Accuracy,
                ..TrainingConfig::default()
            },
            sweep: SweepSpec {
                lengths: vec![10, 20, 50, 100],
                lambdas: Vec::new(),
                test_count: 3000,
            },
            ..ExperimentSpec::default()
        }
    }

    /// Width-20 ReLU RNN on 1000 bit sequences of length 2..=10.
    pub fn parity_rnn() -> ExperimentSpec {
        let mut s = parity_base();
        s.model = ModelSpec {
            arch: Architecture::Rnn,
            width: 20,
            activation: Activation::Relu,
            encoding: Some(InputEncoding::raw()),
        };
        s.training.epochs = 200;
        s
    }

    /// Width-100 DeepSets on the same data.
    pub fn parity_deepsets() -> ExperimentSpec {
        let mut s = parity_base();
        s.model = ModelSpec {
            arch: Architecture::Deepsets,
            width: 100,
            activation: Activation::Relu,
            encoding: Some(InputEncoding::raw()),
        };
        s.training.epochs = 300;
        s
    }

    /// 200 sequences of length 10 over `0..=19`, ReLU RNN on raw integers.
    /// The `λ` grid is `{0.001, 0.01, 0.1}`, or `{0}` unregularized.
    pub fn sum(reg: Regularizer) -> ExperimentSpec {
        ExperimentSpec {
            task: TaskSpec {
                task: TaskKind::Sum,
                count: 200,
                min_len: 10,
                max_len: 10,
                alphabet_max: 19,
            },
            model: ModelSpec {
                arch: Architecture::Rnn,
                width: 20,
                activation: Activation::Relu,
                encoding: Some(InputEncoding::raw()),
            },
            training: TrainingConfig {
                learning_rate: 1e-4,
                regularizer: reg,
                ..TrainingConfig::default()
            },
            sweep: SweepSpec {
                lengths: Vec::new(),
                lambdas: match reg {
                    Regularizer::None => vec![0.0],
                    _ => vec![0.001, 0.01, 0.1],
                },
                test_count: 1000,
            },
            ..ExperimentSpec::default()
        }
    }

    /// 500 sequences of length 10 over `0..=9`, GRU, SIRE at `λ ∈ {0, 0.01}`.
    pub fn half_range() -> ExperimentSpec {
        ExperimentSpec {
            task: TaskSpec {
                task: TaskKind::HalfRange,
                count: 500,
                min_len: 10,
                max_len: 10,
                alphabet_max: 9,
            },
            model: ModelSpec {
                arch: Architecture::Gru,
                width: 20,
                activation: Activation::Tanh,
                encoding: None,
            },
            training: TrainingConfig {
                learning_rate: 3e-3,
                regularizer: Regularizer::Sire,
                ..TrainingConfig::default()
            },
            sweep: SweepSpec {
                lengths: Vec::new(),
                lambdas: vec![0.0, 0.01],
                test_count: 1000,
            },
            ..ExperimentSpec::default()
        }
    }
}
