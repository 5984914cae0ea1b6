//! Training loop, optimizers, metrics and holdout selection.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sum_all, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{bind, run_sequence, Link, Model, Parameterized, SequenceModel};
use crate::regularizers::{
    sample_provenance, sire_penalty_at, sub_penalty, BankGradient, SamplerConfig, SireOptions,
};
use crate::rng;
use crate::tasks::{SequenceDataset, TaskKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    None,
    Sire,
    Sub,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Sire => "sire",
            Regularizer::Sub => "sub",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    L1,
    /// Binary cross-entropy on a logit output.
    CrossEntropy,
    Mse,
}

/// Per-epoch model quality measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Higher is better.
    Accuracy,
    /// Lower is better.
    Rmse,
}

impl Metric {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Variance => Metric::Rmse,
            _ => Metric::Accuracy,
        }
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Accuracy => a > b,
            Metric::Rmse => a < b,
        }
    }

    pub fn evaluate<M: SequenceModel + ?Sized>(
        self,
        model: &M,
        ds: &SequenceDataset,
    ) -> Result<f64> {
        match self {
            Metric::Accuracy => evaluate_accuracy(model, ds),
            Metric::Rmse => evaluate_rmse(model, ds),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub loss: LossKind,
    pub metric: Metric,
    /// Seeds the SIRE/SUB draws; each step uses a fresh child seed.
    pub sampler: SamplerConfig,
    pub bank_gradient: BankGradient,
    /// Global gradient-norm cap for recurrent models. Written as `0` when
    /// off so the text form round-trips.
    #[serde(with = "clip_serde")]
    pub clip_norm: Option<f64>,
    /// Seeds batch shuffling.
    pub seed: u64,
}

mod clip_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 1000,
            batch_size: 32,
            lambda: 0.0,
            regularizer: Regularizer::None,
            loss: LossKind::L1,
            metric: Metric::Accuracy,
            sampler: SamplerConfig::default(),
            bank_gradient: BankGradient::Rematerialize,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::config("epochs and batch size must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        self.sampler.validate()
    }

    /// Whether the penalty enters the objective at all.
    pub fn penalized(&self) -> bool {
        self.regularizer != Regularizer::None && self.lambda > 0.0
    }
}

/// Checks loss, link and labels against each other.
pub fn check_compatible(model: &Model, ds: &SequenceDataset, cfg: &TrainingConfig) -> Result<()> {
    match (cfg.loss, model.link()) {
        (LossKind::CrossEntropy, Link::Logistic) => {
            if let Some(y) = ds.labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(Error::config(format!(
                    "cross-entropy needs 0/1 labels, found {y}"
                )));
            }
        }
        (LossKind::CrossEntropy, Link::Identity) => {
            return Err(Error::config("cross-entropy needs a logistic-link model"));
        }
        (LossKind::L1 | LossKind::Mse, Link::Logistic) => {
            return Err(Error::config("L1/MSE losses need an identity-link model"));
        }
        (LossKind::L1 | LossKind::Mse, Link::Identity) => {}
    }
    if cfg.regularizer != Regularizer::None && model.as_recurrent().is_none() {
        return Err(Error::config(format!(
            "{} regularizer needs a recurrent model, got {}",
            cfg.regularizer.name(),
            model.kind()
        )));
    }
    Ok(())
}

fn example_loss<'t>(y: Var<'t>, label: f64, loss: LossKind) -> Result<Var<'t>> {
    Ok(match loss {
        LossKind::L1 => y.affine(1.0, -label).abs().sum(),
        LossKind::Mse => y.affine(1.0, -label).square().sum(),
        LossKind::CrossEntropy => y.sum().bce_with_logits(label)?,
    })
}

/// Data the penalties sample from.
pub struct RegContext<'a> {
    pub train: &'a SequenceDataset,
    /// Element multiset of `train`.
    pub elements: Vec<i64>,
}

impl<'a> RegContext<'a> {
    pub fn new(train: &'a SequenceDataset) -> Self {
        RegContext {
            train,
            elements: train.elements(),
        }
    }
}

/// Pieces of one batch objective.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub task: Var<'t>,
    /// `None` when the penalty was skipped.
    pub penalty: Option<Var<'t>>,
    /// Raw outputs, one per example.
    pub outputs: Vec<f64>,
}

/// Mean task loss over `batch`, plus `λ·penalty` when a regularizer is
/// active and `λ > 0`. `penalty_seed` drives the penalty's sampling.
pub fn total_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    p: &[Var<'t>],
    batch: &[(&[i64], f64)],
    cfg: &TrainingConfig,
    ctx: &RegContext<'_>,
    penalty_seed: u64,
) -> Result<LossParts<'t>> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for &(xs, label) in batch {
        let y = model.forward(tape, p, xs)?;
        outputs.push(y.value()[0]);
        terms.push(example_loss(y, label, cfg.loss)?);
    }
    let task = sum_all(&terms)?.scale(1.0 / batch.len() as f64);
    if !cfg.penalized() {
        return Ok(LossParts {
            total: task,
            task,
            penalty: None,
            outputs,
        });
    }
    let rec = model.as_recurrent().ok_or_else(|| {
        Error::config(format!(
            "regularizer needs a recurrent model, got {}",
            model.kind()
        ))
    })?;
    let sampler = cfg.sampler.with_seed(penalty_seed);
    let penalty = match cfg.regularizer {
        Regularizer::Sire => {
            let provenance = sample_provenance(ctx.train, &sampler)?;
            let s0 = rec.initial_state(tape, p);
            let states = provenance
                .iter()
                .map(|pr| {
                    let s = run_sequence(rec, tape, p, s0, &pr.inputs)?;
                    Ok(match cfg.bank_gradient {
                        BankGradient::Rematerialize => s,
                        BankGradient::Detached => tape.vector(s.value()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let opts = SireOptions {
                pairs_per_state: cfg.sampler.pairs_per_state,
                gradient: cfg.bank_gradient,
                seed: penalty_seed,
            };
            sire_penalty_at(rec, tape, p, &states, &ctx.elements, &opts)?
        }
        Regularizer::Sub => sub_penalty(rec, tape, p, ctx.train, &sampler)?,
        Regularizer::None => unreachable!("penalized() is false for None"),
    };
    Ok(LossParts {
        total: task.add(penalty.scale(cfg.lambda))?,
        task,
        penalty: Some(penalty),
        outputs,
    })
}

/// Adam moments for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

fn check_grads(params: &[&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape {
            op: "optimizer step",
            left: params.iter().map(|p| p.len()).collect(),
            right: grads.iter().map(Vec::len).collect(),
        });
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], st: &mut AdamState) -> Result<()> {
    check_grads(params, grads)?;
    st.t += 1;
    let c1 = 1.0 - st.beta1.powi(st.t as i32);
    let c2 = 1.0 - st.beta2.powi(st.t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut st.m[k], &mut st.v[k]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
            *w -= st.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + st.eps);
        }
    }
    Ok(())
}

/// `p ← p − lr·g`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, gi) in p.data_mut().iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
    Ok(())
}

pub enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(lr, shapes)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        match self {
            Optimizer::Adam(st) => adam_step(params, grads, st),
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Rounds half away from zero.
pub fn round_prediction(y: f64) -> f64 {
    y.round()
}

fn prediction_correct(link: Link, raw: f64, label: f64, classify: bool) -> bool {
    let y = link.apply(raw);
    if classify {
        (y >= 0.5) == (label >= 0.5)
    } else {
        round_prediction(y) == label
    }
}

const EVAL_CHUNK: usize = 64;

/// Raw outputs for every example, evaluated in chunks on fresh tapes.
pub fn raw_outputs<M: SequenceModel + ?Sized>(model: &M, ds: &SequenceDataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.sequences.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let p = bind(&tape, model);
        for xs in chunk {
            let y = model.forward(&tape, &p, xs)?;
            out.push(crate::models::scalar_of(y)?);
        }
    }
    Ok(out)
}

/// Fraction of exact matches. Parity predictions threshold the linked
/// output at 0.5; regression predictions round it half away from zero.
pub fn evaluate_accuracy<M: SequenceModel + ?Sized>(
    model: &M,
    ds: &SequenceDataset,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("accuracy of an empty dataset"));
    }
    let classify = ds.task.is_classification();
    let link = model.link();
    let hits = raw_outputs(model, ds)?
        .into_iter()
        .zip(&ds.labels)
        .filter(|&(raw, &y)| prediction_correct(link, raw, y, classify))
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Root mean squared error of linked outputs against labels.
pub fn evaluate_rmse<M: SequenceModel + ?Sized>(model: &M, ds: &SequenceDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("RMSE of an empty dataset"));
    }
    let link = model.link();
    let sq: f64 = raw_outputs(model, ds)?
        .into_iter()
        .zip(&ds.labels)
        .map(|(raw, y)| (link.apply(raw) - y).powi(2))
        .sum();
    Ok((sq / ds.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean task loss over the epoch's batches, weighted by batch size.
    pub task_loss: f64,
    /// Mean penalty value over batches; 0 when the penalty is skipped.
    pub reg_value: f64,
    /// Metric on the training predictions made during the epoch.
    pub train_metric: f64,
    /// Metric on the holdout set after the epoch; NaN without one.
    pub holdout_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainingConfig,
    pub rows: Vec<EpochRow>,
    pub final_test_metric: Option<f64>,
    /// Not part of any deterministic output.
    pub wall_seconds: f64,
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "epoch,task_loss,reg_value,train_metric,holdout_metric";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                r.epoch, r.task_loss, r.reg_value, r.train_metric, r.holdout_metric
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

fn train_metric(metric: Metric, model: &Model, batch_out: &[(f64, f64)], task: TaskKind) -> f64 {
    let n = batch_out.len() as f64;
    match metric {
        Metric::Accuracy => {
            let link = model.link();
            let classify = task.is_classification();
            batch_out
                .iter()
                .filter(|&&(raw, y)| prediction_correct(link, raw, y, classify))
                .count() as f64
                / n
        }
        Metric::Rmse => {
            let link = model.link();
            (batch_out
                .iter()
                .map(|&(raw, y)| (link.apply(raw) - y).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
        }
    }
}

/// Mini-batch training of `model` on `train`.
///
/// Each epoch reshuffles the examples. Gradients of recurrent models are
/// clipped to `cfg.clip_norm`. A non-finite loss aborts with
/// [`Error::NonFinite`].
pub fn train(
    model: &mut Model,
    train: &SequenceDataset,
    holdout: Option<&SequenceDataset>,
    cfg: &TrainingConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    check_compatible(model, train, cfg)?;
    let started = Instant::now();
    let shapes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &shapes);
    let mut shuffle_rng = rng::stream(cfg.seed, "training.shuffle");
    let mut penalty_rng = rng::stream(cfg.sampler.seed, "training.penalty");
    let clip = if model.as_recurrent().is_some() {
        cfg.clip_norm
    } else {
        None
    };
    let ctx = RegContext::new(train);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut task_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut batches = 0usize;
        let mut seen = Vec::with_capacity(train.len());
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[i64], f64)> = idx
                .iter()
                .map(|&i| (train.sequences[i].as_slice(), train.labels[i]))
                .collect();
            let penalty_seed = if cfg.penalized() {
                penalty_rng.gen()
            } else {
                0
            };
            let tape = Tape::new();
            let p = bind(&tape, model);
            let parts = total_loss(model, &tape, &p, &batch, cfg, &ctx, penalty_seed)?;
            let total = parts.total.item();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {total} at epoch {epoch}, batch {batches}"
                )));
            }
            task_sum += parts.task.item() * batch.len() as f64;
            reg_sum += parts.penalty.map_or(0.0, |v| v.item());
            batches += 1;
            seen.extend(parts.outputs.iter().zip(&batch).map(|(&o, &(_, y))| (o, y)));

            let grads = tape.backward(parts.total)?;
            let mut g: Vec<Vec<f64>> = p.iter().map(|&v| grads.wrt(v)).collect();
            drop(grads);
            if let Some(c) = clip {
                clip_global_norm(&mut g, c);
            }
            opt.step(&mut model.params_mut(), &g)?;
        }
        let holdout_metric = match holdout {
            Some(h) => cfg.metric.evaluate(model, h)?,
            None => f64::NAN,
        };
        rows.push(EpochRow {
            epoch,
            task_loss: task_sum / train.len() as f64,
            reg_value: reg_sum / batches as f64,
            train_metric: train_metric(cfg.metric, model, &seen, train.task),
            holdout_metric,
        });
    }
    Ok(RunReport {
        config: *cfg,
        rows,
        final_test_metric: None,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Deterministic split into `(train, holdout)` with `holdout_fraction` of
/// the examples held out.
pub fn split_holdout(
    ds: &SequenceDataset,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(SequenceDataset, SequenceDataset)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::config(format!(
            "holdout fraction must be in [0, 1), got {holdout_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "training.holdout"));
    let n_hold = (ds.len() as f64 * holdout_fraction).round() as usize;
    let (hold, rest) = idx.split_at(n_hold);
    if rest.is_empty() || hold.is_empty() {
        return Err(Error::contract(format!(
            "holdout split of {} examples leaves an empty side",
            ds.len()
        )));
    }
    Ok((ds.select(rest), ds.select(hold)))
}

pub struct Selection {
    pub best: usize,
    /// Final holdout metric per config.
    pub scores: Vec<f64>,
    pub reports: Vec<RunReport>,
    pub models: Vec<Model>,
}

impl Selection {
    pub fn best_model(&self) -> &Model {
        &self.models[self.best]
    }

    pub fn best_config(&self) -> &TrainingConfig {
        &self.reports[self.best].config
    }
}

/// Trains one fresh model per config on an 80% split of `ds` and keeps the
/// one with the best final holdout metric. Ties go to the smaller `λ`, then
/// to the earlier config.
pub fn holdout_select<F>(
    configs: &[TrainingConfig],
    ds: &SequenceDataset,
    split_seed: u64,
    mut build: F,
) -> Result<Selection>
where
    F: FnMut(&TrainingConfig) -> Result<Model>,
{
    if configs.is_empty() {
        return Err(Error::config("holdout selection needs at least one config"));
    }
    let (train_set, hold) = split_holdout(ds, 0.2, split_seed)?;
    let mut reports = Vec::with_capacity(configs.len());
    let mut models = Vec::with_capacity(configs.len());
    let mut scores = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut model = build(cfg)?;
        let report = train(&mut model, &train_set, Some(&hold), cfg)?;
        scores.push(report.last().map_or(f64::NAN, |r| r.holdout_metric));
        reports.push(report);
        models.push(model);
    }
    let mut best = 0;
    for i in 1..configs.len() {
        let (s, b) = (scores[i], scores[best]);
        let metric = configs[i].metric;
        if metric.better(s, b) || (s == b && configs[i].lambda < configs[best].lambda) {
            best = i;
        }
    }
    Ok(Selection {
        best,
        scores,
        reports,
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::parity_rnn;
    use crate::models::{Activation, DeepSets, InputEncoding, Mlp, Rnn, RnnParams};
    use crate::tasks::{gen_arithmetic, gen_parity};

    fn small_rnn(seed: u64, link: Link) -> Model {
        let mut r = rng::stream(seed, "test.init");
        Model::Rnn(Rnn::init(
            InputEncoding::Scalar { divisor: 9.0 },
            4,
            Activation::Tanh,
            link,
            &mut r,
        ))
    }

    /// `s' = s + x`, identity head: the exact summing model.
    fn perfect_sum() -> Model {
        let cell = RnnParams::new(
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::vector(vec![0.0]),
            Tensor::vector(vec![0.0]),
            Activation::Identity,
        )
        .unwrap();
        Model::Rnn(Rnn::new(cell, Mlp::identity(), InputEncoding::raw(), Link::Identity).unwrap())
    }

    fn batch_of(ds: &SequenceDataset) -> Vec<(&[i64], f64)> {
        ds.iter().collect()
    }

    #[test]
    fn perfect_sum_model_has_zero_loss_and_full_accuracy() {
        let ds = gen_arithmetic(TaskKind::Sum, 20, 6, 9, 1).unwrap();
        let model = perfect_sum();
        let tape = Tape::new();
        let p = bind(&tape, &model);
        let parts = total_loss(
            &model,
            &tape,
            &p,
            &batch_of(&ds),
            &TrainingConfig::default(),
            &RegContext::new(&ds),
            0,
        )
        .unwrap();
        assert_eq!(parts.total.item(), 0.0);
        assert_eq!(evaluate_accuracy(&model, &ds).unwrap(), 1.0);
        assert_eq!(evaluate_rmse(&model, &ds).unwrap(), 0.0);
    }

    #[test]
    fn zero_lambda_total_is_task_loss() {
        let ds = gen_arithmetic(TaskKind::Sum, 10, 5, 9, 2).unwrap();
        let model = small_rnn(1, Link::Identity);
        let cfg = TrainingConfig {
            regularizer: Regularizer::Sire,
            ..TrainingConfig::default()
        };
        let tape = Tape::new();
        let p = bind(&tape, &model);
        let parts = total_loss(
            &model,
            &tape,
            &p,
            &batch_of(&ds),
            &cfg,
            &RegContext::new(&ds),
            3,
        )
        .unwrap();
        assert!(parts.penalty.is_none());
        assert_eq!(parts.total.item(), parts.task.item());
    }

    #[test]
    fn parity_rnn_penalty_vanishes_under_sire() {
        let ds = gen_parity(20, 2, 8, 0).unwrap();
        let model = Model::Rnn(parity_rnn());
        let cfg = TrainingConfig {
            regularizer: Regularizer::Sire,
            lambda: 0.7,
            ..TrainingConfig::default()
        };
        let tape = Tape::new();
        let p = bind(&tape, &model);
        let parts = total_loss(
            &model,
            &tape,
            &p,
            &batch_of(&ds),
            &cfg,
            &RegContext::new(&ds),
            5,
        )
        .unwrap();
        assert_eq!(parts.penalty.unwrap().item(), 0.0);
        assert_eq!(parts.total.item(), parts.task.item());
    }

    #[test]
    fn incompatible_configs_are_rejected() {
        let parity = gen_parity(10, 2, 4, 0).unwrap();
        let sum = gen_arithmetic(TaskKind::Sum, 10, 4, 9, 0).unwrap();
        let ce = TrainingConfig {
            loss: LossKind::CrossEntropy,
            ..TrainingConfig::default()
        };
        assert!(check_compatible(&small_rnn(0, Link::Logistic), &sum, &ce).is_err());
        assert!(check_compatible(&small_rnn(0, Link::Identity), &parity, &ce).is_err());
        assert!(check_compatible(
            &small_rnn(0, Link::Logistic),
            &parity,
            &TrainingConfig::default()
        )
        .is_err());
        check_compatible(&small_rnn(0, Link::Logistic), &parity, &ce).unwrap();
        let ds_model = Model::DeepSets(DeepSets::init(
            InputEncoding::raw(),
            3,
            Link::Identity,
            &mut rng::stream(0, "t"),
        ));
        let sire = TrainingConfig {
            regularizer: Regularizer::Sire,
            lambda: 0.1,
            ..TrainingConfig::default()
        };
        assert!(matches!(
            check_compatible(&ds_model, &sum, &sire),
            Err(Error::Config(_))
        ));
        let bad = TrainingConfig {
            learning_rate: 0.0,
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut t = Tensor::vector(vec![1.0, -2.0]);
        let before = t.clone();
        let mut st = AdamState::new(0.1, &[2]);
        adam_step(&mut [&mut t], &[vec![0.0, 0.0]], &mut st).unwrap();
        assert_eq!(t, before);
        sgd_step(&mut [&mut t], &[vec![0.0, 0.0]], 0.1).unwrap();
        assert_eq!(t, before);
        assert!(sgd_step(&mut [&mut t], &[vec![0.0]], 0.1).is_err());
    }

    #[test]
    fn sgd_descends_a_parabola() {
        let mut t = Tensor::vector(vec![3.0]);
        let mut prev = 3.0;
        for _ in 0..50 {
            let g = 2.0 * t.data()[0];
            sgd_step(&mut [&mut t], &[vec![g]], 0.05).unwrap();
            assert!(t.data()[0] < prev && t.data()[0] > 0.0);
            prev = t.data()[0];
        }
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε)
        for g in [1e-4, 0.3, 250.0, -7.0] {
            let mut t = Tensor::vector(vec![0.0]);
            let mut st = AdamState::new(1e-3, &[1]);
            adam_step(&mut [&mut t], &[vec![g]], &mut st).unwrap();
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((t.data()[0] - expected).abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1]]);
    }

    #[test]
    fn rounding_rule() {
        assert!(prediction_correct(Link::Identity, 5.4, 5.0, false));
        assert!(!prediction_correct(Link::Identity, 5.6, 5.0, false));
        assert_eq!(round_prediction(2.5), 3.0);
        assert_eq!(round_prediction(-2.5), -3.0);
        assert!(prediction_correct(Link::Logistic, 0.0, 1.0, true));
        assert!(!prediction_correct(Link::Logistic, -0.1, 1.0, true));
    }

    #[test]
    fn constant_model_rmse_is_label_std() {
        let ds = SequenceDataset::labelled(TaskKind::Sum, 9, 0, vec![vec![1], vec![3], vec![5]])
            .unwrap();
        let mean = Model::Rnn(
            Rnn::new(
                RnnParams::new(
                    Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                    Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                    Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                    Tensor::vector(vec![0.0]),
                    Tensor::vector(vec![0.0]),
                    Activation::Identity,
                )
                .unwrap(),
                Mlp::linear(vec![0.0], 3.0),
                InputEncoding::raw(),
                Link::Identity,
            )
            .unwrap(),
        );
        let std = (8.0f64 / 3.0).sqrt();
        assert!((evaluate_rmse(&mean, &ds).unwrap() - std).abs() < 1e-12);
    }

    #[test]
    fn one_full_batch_step_decreases_a_smooth_loss() {
        let ds = gen_arithmetic(TaskKind::Sum, 16, 4, 9, 3).unwrap();
        let mut model = small_rnn(2, Link::Identity);
        let cfg = TrainingConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-4,
            epochs: 1,
            batch_size: 16,
            loss: LossKind::Mse,
            clip_norm: None,
            ..TrainingConfig::default()
        };
        let loss_of = |m: &Model| {
            let tape = Tape::new();
            let p = bind(&tape, m);
            total_loss(m, &tape, &p, &batch_of(&ds), &cfg, &RegContext::new(&ds), 0)
                .unwrap()
                .total
                .item()
        };
        let before = loss_of(&model);
        train(&mut model, &ds, None, &cfg).unwrap();
        assert!(loss_of(&model) < before);
    }

    #[test]
    fn training_is_deterministic_and_reports_every_epoch() {
        let ds = gen_arithmetic(TaskKind::Sum, 40, 5, 9, 4).unwrap();
        let (tr, ho) = split_holdout(&ds, 0.2, 1).unwrap();
        assert_eq!((tr.len(), ho.len()), (32, 8));
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 8,
            regularizer: Regularizer::Sire,
            lambda: 0.1,
            ..TrainingConfig::default()
        };
        let run = || {
            let mut m = small_rnn(7, Link::Identity);
            let rep = train(&mut m, &tr, Some(&ho), &cfg).unwrap();
            (m.to_text(), rep.to_csv())
        };
        let (m1, csv1) = run();
        assert_eq!((m1, csv1.clone()), run());
        assert_eq!(csv1.lines().count(), 4);
        assert!(csv1.starts_with(RunReport::CSV_HEADER));
    }

    #[test]
    fn zero_lambda_sire_matches_unregularized_bitwise() {
        let ds = gen_arithmetic(TaskKind::Sum, 24, 5, 9, 5).unwrap();
        let base = TrainingConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainingConfig::default()
        };
        let with_sire = TrainingConfig {
            regularizer: Regularizer::Sire,
            ..base
        };
        let mut a = small_rnn(3, Link::Identity);
        let mut b = small_rnn(3, Link::Identity);
        let ra = train(&mut a, &ds, None, &base).unwrap();
        let rb = train(&mut b, &ds, None, &with_sire).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(ra.to_csv(), rb.to_csv());
    }

    #[test]
    fn holdout_selection_rules() {
        let ds = gen_arithmetic(TaskKind::Sum, 30, 4, 9, 6).unwrap();
        let cfg = TrainingConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainingConfig::default()
        };
        let build = |_: &TrainingConfig| Ok(small_rnn(1, Link::Identity));
        let one = holdout_select(&[cfg], &ds, 0, build).unwrap();
        assert_eq!(one.best, 0);
        assert_eq!(one.best_config(), &cfg);
        // identical runs tie; the smaller lambda wins even when listed later
        let grid = [
            TrainingConfig {
                lambda: 0.1,
                regularizer: Regularizer::None,
                ..cfg
            },
            TrainingConfig {
                lambda: 0.01,
                regularizer: Regularizer::None,
                ..cfg
            },
        ];
        let sel = holdout_select(&grid, &ds, 0, build).unwrap();
        assert_eq!(sel.scores[0], sel.scores[1]);
        assert_eq!(sel.best, 1);
        assert!(holdout_select(&[], &ds, 0, build).is_err());
    }

    #[test]
    fn nan_loss_aborts() {
        let ds = gen_arithmetic(TaskKind::Sum, 8, 3, 9, 0).unwrap();
        let mut model = small_rnn(0, Link::Identity);
        if let Model::Rnn(r) = &mut model {
            r.cell.b.data_mut()[0] = f64::NAN;
        }
        let cfg = TrainingConfig {
            epochs: 1,
            ..TrainingConfig::default()
        };
        assert!(matches!(
            train(&mut model, &ds, None, &cfg),
            Err(Error::NonFinite(_))
        ));
    }
}
