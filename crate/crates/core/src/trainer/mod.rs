//! Training loops for HiDAC and the fine-tuning baselines.

mod checkpoint;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with, read_manifest, save_checkpoint, CheckpointManifest, LoadedModel, ModelKind,
    Saveable,
};

use crate::adapters::AdapterStack;
use crate::backbone::{load_encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, instance_scl, label_centered_scl, momentum_update, LossWeights, NegativeQueue,
};
use crate::model::{BaselineModel, GradientRouting, HidacConfig, HidacModel, RelationClassifier};
use crate::relsdata::{OrderingStrategy, RelationInstance, UnifiedLabel};
use crate::tensor::{self, Dropout, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    HidacLabelCentered,
    HidacInstance,
    BaselineFull,
    BaselineUnfreeze,
}

impl TrainMode {
    pub fn is_hidac(self) -> bool {
        matches!(self, TrainMode::HidacLabelCentered | TrainMode::HidacInstance)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "HIDAC_LABEL_CENTERED" | "HIDAC" => Ok(Self::HidacLabelCentered),
            "HIDAC_INSTANCE" => Ok(Self::HidacInstance),
            "BASELINE_FULL" => Ok(Self::BaselineFull),
            "BASELINE_UNFREEZE" | "BASELINE" => Ok(Self::BaselineUnfreeze),
            _ => Err(Error::Config(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warmup {
    Epochs(f64),
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCriterion {
    DevAccuracy,
    DevLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr_peak: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps; the schedule spans `min(cap, epochs · steps)`.
    pub max_steps: Option<usize>,
    pub warmup: Warmup,
    pub weight_decay: f64,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub criterion: StopCriterion,
    pub clip_norm: f64,
    pub seed: u64,
    pub unfreeze_ratio: f64,
    pub ordering: OrderingStrategy,
    pub loss: LossWeights,
    pub momentum: f64,
    pub queue_size: usize,
    /// Leave same-label entries out of the instance loss denominator.
    pub queue_label_filter: bool,
    pub include_masked: bool,
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        let hidac = Self {
            mode,
            lr_peak: 2e-5,
            batch_size: 32,
            max_epochs: 10,
            max_steps: None,
            warmup: Warmup::Epochs(2.0),
            weight_decay: 0.01,
            patience: Some(2),
            criterion: StopCriterion::DevAccuracy,
            clip_norm: 1.0,
            seed: 42,
            unfreeze_ratio: 0.0,
            ordering: OrderingStrategy::Natural,
            loss: LossWeights::default(),
            momentum: 0.999,
            queue_size: 4096,
            queue_label_filter: false,
            include_masked: false,
        };
        match mode {
            TrainMode::HidacLabelCentered | TrainMode::HidacInstance => hidac,
            TrainMode::BaselineFull | TrainMode::BaselineUnfreeze => Self {
                lr_peak: 3e-5,
                max_epochs: 20,
                warmup: Warmup::Ratio(0.1),
                patience: Some(3),
                criterion: StopCriterion::DevLoss,
                unfreeze_ratio: if mode == TrainMode::BaselineFull { 1.0 } else { 0.5 },
                loss: LossWeights {
                    lambda_cl: 0.0,
                    smoothing: 0.0,
                    ..LossWeights::default()
                },
                ..hidac
            },
        }
    }

    /// Desk-scale overrides for toy encoders: larger steps, smaller batches,
    /// a 200-step budget and no early stopping.
    pub fn toy(mode: TrainMode) -> Self {
        Self {
            lr_peak: 1e-2,
            batch_size: 16,
            max_epochs: 50,
            max_steps: Some(200),
            patience: None,
            queue_size: 64,
            momentum: 0.99,
            ..Self::for_mode(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if !(self.lr_peak > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.unfreeze_ratio) || !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("unfreeze ratio and momentum must lie in [0, 1]".into()));
        }
        if self.mode == TrainMode::HidacInstance && self.queue_size == 0 {
            return Err(Error::Config("instance mode needs a positive queue size".into()));
        }
        Ok(())
    }

    /// Total optimizer steps and warmup steps for `n_train` instances.
    pub fn step_plan(&self, n_train: usize) -> (usize, usize) {
        let per_epoch = n_train.div_ceil(self.batch_size);
        let mut total = per_epoch * self.max_epochs;
        if let Some(cap) = self.max_steps {
            total = total.min(cap);
        }
        let warmup = match self.warmup {
            Warmup::Epochs(e) => (e * per_epoch as f64).round() as usize,
            Warmup::Ratio(r) => (r * total as f64).round() as usize,
        };
        (total, warmup)
    }
}

/// Linear warmup to `peak`, then cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

pub fn make_schedule(lr_peak: f64, warmup_steps: usize, total_steps: usize) -> Result<Schedule> {
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!(
            "warmup of {warmup_steps} steps does not fit in {total_steps} total steps"
        )));
    }
    Ok(Schedule {
        peak: lr_peak,
        warmup: warmup_steps,
        total: total_steps,
    })
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// True once the criterion has gone `patience` consecutive epochs without
/// strictly improving on its best value.
pub fn early_stop(values: &[f64], patience: usize, criterion: StopCriterion) -> bool {
    let Some(&first) = values.first() else {
        return false;
    };
    let better = |a: f64, b: f64| match criterion {
        StopCriterion::DevAccuracy => a > b,
        StopCriterion::DevLoss => a < b,
    };
    let mut best = first;
    let mut stale = 0;
    for &v in &values[1..] {
        if better(v, best) {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_lcl: f64,
    pub l_total: f64,
    pub dev_accuracy: Option<f64>,
    pub dev_loss: Option<f64>,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub schedule_total: usize,
    pub schedule_warmup: usize,
}

impl TrainHistory {
    pub fn dev_accuracies(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.dev_accuracy).collect()
    }
}

/// Accuracy and mean unsmoothed cross-entropy on `data`.
pub fn evaluate_classifier(
    model: &dyn RelationClassifier,
    data: &[RelationInstance],
    batch: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let refs: Vec<&RelationInstance> = data.iter().collect();
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    for chunk in refs.chunks(batch.max(1)) {
        let logits = model.logits(chunk, Mode::Eval)?;
        let targets: Vec<usize> = chunk.iter().map(|i| i.label.index()).collect();
        loss_sum += tensor::to_scalar(&cross_entropy(&logits, &targets, 0.0)?)? * chunk.len() as f64;
        for (row, inst) in logits.to_vec2::<f64>()?.iter().zip(chunk) {
            if crate::model::argmax_label(row)? == inst.label {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / data.len() as f64, loss_sum / data.len() as f64))
}

/// Squared gradient norms by parameter group after one single-loss backward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradProbe {
    pub lower: f64,
    pub upper: f64,
    pub head: f64,
    pub prototypes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeLoss {
    CrossEntropy,
    LabelCentered,
}

/// Backpropagates one loss alone, without any parameter mask, and reports
/// where gradient arrived. A parameter absent from the graph counts as zero.
pub fn gradient_probe(
    model: &HidacModel,
    batch: &[&RelationInstance],
    loss: ProbeLoss,
    weights: &LossWeights,
) -> Result<GradProbe> {
    let out = model.forward_batch(batch, Mode::Eval)?;
    let labels: Vec<UnifiedLabel> = batch.iter().map(|i| i.label).collect();
    let l = match loss {
        ProbeLoss::CrossEntropy => {
            let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
            cross_entropy(&out.logits, &idx, weights.smoothing)?
        }
        ProbeLoss::LabelCentered => label_centered_scl(&out.h, model.prototypes(), &labels, weights.tau)?,
    };
    let grads = l.backward()?;
    let norm = |vars: Vec<(String, Var)>| -> Result<f64> {
        vars.iter()
            .map(|(_, v)| grads.get(v.as_tensor()).map_or(Ok(0.0), tensor::sq_norm))
            .sum()
    };
    Ok(GradProbe {
        lower: norm(model.lower_vars())?,
        upper: norm(model.upper_vars())?,
        head: norm(model.head_vars())?,
        prototypes: norm(model.prototype_vars())?,
    })
}

/// Losses of one step plus the routed gradients.
struct StepOutput {
    grads: GradStore,
    l_ce: f64,
    l_cl: f64,
}

trait Fit {
    fn vars(&self) -> Vec<(String, Var)>;
    fn step(&mut self, batch: &[&RelationInstance], dropout: &Dropout) -> Result<StepOutput>;
    fn after_step(&mut self) -> Result<()> {
        Ok(())
    }
    fn classifier(&self) -> &dyn RelationClassifier;
}

fn ids(vars: &[(String, Var)]) -> HashSet<candle_core::TensorId> {
    vars.iter().map(|(_, v)| v.as_tensor().id()).collect()
}

/// Keeps only gradients of `allowed` parameters in `store`.
fn mask_store(store: &mut GradStore, all: &[(String, Var)], allowed: &HashSet<candle_core::TensorId>) {
    for (_, v) in all {
        if !allowed.contains(&v.as_tensor().id()) {
            store.remove(v.as_tensor());
        }
    }
}

/// Two masked backward passes in strict mode, one joint pass in soft mode.
fn routed_grads(
    model: &HidacModel,
    l_ce: &Tensor,
    l_cl: Option<&Tensor>,
    w: &LossWeights,
) -> Result<GradStore> {
    let all = model.trainable_vars();
    match model.config().routing {
        GradientRouting::Soft => {
            let total = match l_cl {
                Some(c) => ((l_ce * w.lambda_ce)? + (c * w.lambda_cl)?)?,
                None => (l_ce * w.lambda_ce)?,
            };
            Ok(total.backward()?)
        }
        GradientRouting::Strict => {
            let mut ce_vars = model.upper_vars();
            ce_vars.extend(model.head_vars());
            let mut cl_vars = model.lower_vars();
            cl_vars.extend(model.prototype_vars());
            let mut store = (l_ce * w.lambda_ce)?.backward()?;
            mask_store(&mut store, &all, &ids(&ce_vars));
            if let Some(c) = l_cl {
                if w.lambda_cl > 0.0 {
                    let cl_store = (c * w.lambda_cl)?.backward()?;
                    for (_, v) in &cl_vars {
                        if let Some(g) = cl_store.get(v.as_tensor()) {
                            let merged = match store.get(v.as_tensor()) {
                                Some(prev) => (prev + g)?,
                                None => g.clone(),
                            };
                            store.insert(v.as_tensor(), merged);
                        }
                    }
                }
            }
            Ok(store)
        }
    }
}

struct HidacFit<'a> {
    model: &'a HidacModel,
    weights: LossWeights,
    instance: Option<InstanceState>,
}

struct InstanceState {
    key: AdapterStack,
    queue: NegativeQueue,
    momentum: f64,
    label_filter: bool,
}

impl Fit for HidacFit<'_> {
    fn vars(&self) -> Vec<(String, Var)> {
        self.model.trainable_vars()
    }

    fn step(&mut self, batch: &[&RelationInstance], dropout: &Dropout) -> Result<StepOutput> {
        let mode = Mode::Train(dropout);
        let out = self.model.forward_batch(batch, mode)?;
        let labels: Vec<UnifiedLabel> = batch.iter().map(|i| i.label).collect();
        let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let l_ce = cross_entropy(&out.logits, &idx, self.weights.smoothing)?;
        let l_cl = match &mut self.instance {
            None => Some(label_centered_scl(&out.h, self.model.prototypes(), &labels, self.weights.tau)?),
            Some(state) => {
                let keys = self.model.contrastive_repr(batch, &state.key, mode)?.detach();
                let loss = if state.queue.is_empty() {
                    None
                } else {
                    let filter = state.label_filter.then_some(labels.as_slice());
                    Some(instance_scl(&out.h, &keys, &state.queue, self.weights.tau, filter)?)
                };
                let keep = keys.dims()[0].min(state.queue.capacity());
                state
                    .queue
                    .push(&keys.narrow(0, 0, keep)?, Some(&labels[..keep]))?;
                loss
            }
        };
        let grads = routed_grads(self.model, &l_ce, l_cl.as_ref(), &self.weights)?;
        Ok(StepOutput {
            grads,
            l_ce: tensor::to_scalar(&l_ce)?,
            l_cl: l_cl.as_ref().map_or(Ok(0.0), tensor::to_scalar)?,
        })
    }

    fn after_step(&mut self) -> Result<()> {
        if let Some(state) = &self.instance {
            let key: Vec<Var> = state.key.named_vars().into_iter().map(|(_, v)| v).collect();
            let query: Vec<Var> = self.model.adapters().named_vars().into_iter().map(|(_, v)| v).collect();
            momentum_update(&key, &query, state.momentum)?;
        }
        Ok(())
    }

    fn classifier(&self) -> &dyn RelationClassifier {
        self.model
    }
}

struct BaselineFit<'a> {
    model: &'a BaselineModel,
    smoothing: f64,
}

impl Fit for BaselineFit<'_> {
    fn vars(&self) -> Vec<(String, Var)> {
        self.model.trainable_vars()
    }

    fn step(&mut self, batch: &[&RelationInstance], dropout: &Dropout) -> Result<StepOutput> {
        let logits = self.model.logits(batch, Mode::Train(dropout))?;
        let idx: Vec<usize> = batch.iter().map(|i| i.label.index()).collect();
        let l_ce = cross_entropy(&logits, &idx, self.smoothing)?;
        Ok(StepOutput {
            grads: l_ce.backward()?,
            l_ce: tensor::to_scalar(&l_ce)?,
            l_cl: 0.0,
        })
    }

    fn classifier(&self) -> &dyn RelationClassifier {
        self.model
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before and after.
fn clip_grads(store: &mut GradStore, vars: &[(String, Var)], max_norm: f64) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    for (_, v) in vars {
        if let Some(g) = store.get(v.as_tensor()) {
            sq += tensor::sq_norm(g)?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient norm is not finite".into()));
    }
    if norm <= max_norm {
        return Ok((norm, norm));
    }
    let scale = max_norm / norm;
    let mut sq_after = 0.0;
    for (_, v) in vars {
        if let Some(g) = store.get(v.as_tensor()) {
            let scaled = (g * scale)?;
            sq_after += tensor::sq_norm(&scaled)?;
            store.insert(v.as_tensor(), scaled);
        }
    }
    Ok((norm, sq_after.sqrt()))
}

fn snapshot(vars: &[(String, Var)]) -> Result<Vec<Tensor>> {
    vars.iter().map(|(_, v)| Ok(v.as_tensor().copy()?)).collect()
}

fn restore(vars: &[(String, Var)], saved: &[Tensor]) -> Result<()> {
    for ((_, v), t) in vars.iter().zip(saved) {
        v.set(t)?;
    }
    Ok(())
}

fn run(
    fit: &mut dyn Fit,
    config: &TrainConfig,
    train: &[RelationInstance],
    dev: &[RelationInstance],
    metrics: Option<&Path>,
) -> Result<TrainHistory> {
    config.validate()?;
    let train: Vec<&RelationInstance> = train.iter().filter(|i| config.include_masked || !i.masked).collect();
    let dev: Vec<RelationInstance> = dev.iter().filter(|i| !i.masked).cloned().collect();
    if train.is_empty() {
        return Err(Error::Input("no trainable instances".into()));
    }
    if config.patience.is_some() && dev.is_empty() {
        return Err(Error::Config("early stopping needs a non-empty dev set".into()));
    }
    let vars = fit.vars();
    if vars.is_empty() {
        return Err(Error::Config("nothing to train: every parameter is frozen".into()));
    }
    let (total, warmup) = config.step_plan(train.len());
    let schedule = make_schedule(config.lr_peak, warmup, total)?;
    let mut opt = AdamW::new(
        vars.iter().map(|(_, v)| v.clone()).collect(),
        ParamsAdamW {
            lr: 0.0,
            weight_decay: config.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut sink = match metrics {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };

    let dropout = Dropout::new(tensor::sub_seed(config.seed, "dropout"));
    let mut order_rng = tensor::seeded_rng(tensor::sub_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory {
        schedule_total: total,
        schedule_warmup: warmup,
        ..TrainHistory::default()
    };
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut step = 0;

    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut ce_sum, mut cl_sum, mut seen, mut steps_in_epoch) = (0.0, 0.0, 0usize, 0);
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            if step >= total {
                break;
            }
            let batch: Vec<&RelationInstance> = chunk.iter().map(|&i| train[i]).collect();
            let mut out = fit.step(&batch, &dropout)?;
            let (pre, post) = clip_grads(&mut out.grads, &vars, config.clip_norm)?;
            lr = schedule.lr(step);
            opt.set_learning_rate(lr);
            opt.step(&out.grads)?;
            fit.after_step()?;
            history.steps.push(StepRecord {
                step,
                lr,
                grad_norm: pre,
                clipped_norm: post,
            });
            ce_sum += out.l_ce * batch.len() as f64;
            cl_sum += out.l_cl * batch.len() as f64;
            seen += batch.len();
            steps_in_epoch += 1;
            step += 1;
        }
        if steps_in_epoch == 0 {
            break;
        }
        let (l_ce, l_lcl) = (ce_sum / seen as f64, cl_sum / seen as f64);
        let dev_eval = if dev.is_empty() {
            None
        } else {
            Some(evaluate_classifier(fit.classifier(), &dev, config.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            l_ce,
            l_lcl,
            l_total: crate::losses::total_loss(l_ce, l_lcl, &config.loss),
            dev_accuracy: dev_eval.map(|d| d.0),
            dev_loss: dev_eval.map(|d| d.1),
            lr,
            steps: steps_in_epoch,
        };
        log::info!(
            "epoch {epoch}: l_ce {:.4} l_cl {:.4} dev_acc {:?} dev_loss {:?}",
            record.l_ce,
            record.l_lcl,
            record.dev_accuracy,
            record.dev_loss
        );
        if let Some(w) = sink.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w).map_err(|e| Error::io(metrics.expect("sink has path"), e))?;
        }
        if let Some((acc, loss)) = dev_eval {
            let score = match config.criterion {
                StopCriterion::DevAccuracy => acc,
                StopCriterion::DevLoss => -loss,
            };
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, snapshot(&vars)?));
                history.best_epoch = Some(epoch);
            }
        }
        history.epochs.push(record);
        if let Some(p) = config.patience {
            let series: Vec<f64> = history
                .epochs
                .iter()
                .filter_map(|e| match config.criterion {
                    StopCriterion::DevAccuracy => e.dev_accuracy,
                    StopCriterion::DevLoss => e.dev_loss,
                })
                .collect();
            if early_stop(&series, p, config.criterion) {
                history.stopped_early = true;
                break 'epochs;
            }
        }
    }
    if let Some(w) = sink.as_mut() {
        w.flush().map_err(|e| Error::io(metrics.expect("sink has path"), e))?;
    }
    if let Some((_, saved)) = &best {
        restore(&vars, saved)?;
    }
    Ok(history)
}

/// Trains a HiDAC model in place. Base encoder weights are never updated.
pub fn fit_hidac(
    model: &HidacModel,
    config: &TrainConfig,
    train: &[RelationInstance],
    dev: &[RelationInstance],
    metrics: Option<&Path>,
) -> Result<TrainHistory> {
    if !config.mode.is_hidac() {
        return Err(Error::Config(format!("{:?} is not a HiDAC mode", config.mode)));
    }
    let instance = match config.mode {
        TrainMode::HidacInstance => Some(InstanceState {
            key: model.adapters().deep_copy()?,
            queue: NegativeQueue::new(config.queue_size, model.hidden_dim())?,
            momentum: config.momentum,
            label_filter: config.queue_label_filter,
        }),
        _ => None,
    };
    let mut fit = HidacFit {
        model,
        weights: config.loss,
        instance,
    };
    run(&mut fit, config, train, dev, metrics)
}

pub fn fit_baseline(
    model: &BaselineModel,
    config: &TrainConfig,
    train: &[RelationInstance],
    dev: &[RelationInstance],
    metrics: Option<&Path>,
) -> Result<TrainHistory> {
    if config.mode.is_hidac() {
        return Err(Error::Config(format!("{:?} is not a baseline mode", config.mode)));
    }
    let mut fit = BaselineFit {
        model,
        smoothing: config.loss.smoothing,
    };
    run(&mut fit, config, train, dev, metrics)
}

pub enum TrainedModel {
    Hidac(HidacModel),
    Baseline(BaselineModel),
}

impl TrainedModel {
    pub fn classifier(&self) -> &dyn RelationClassifier {
        match self {
            TrainedModel::Hidac(m) => m,
            TrainedModel::Baseline(m) => m,
        }
    }
}

/// Builds the model the mode calls for and trains it.
pub fn train(
    config: &TrainConfig,
    encoder: &EncoderSpec,
    hidac: &HidacConfig,
    train_data: &[RelationInstance],
    dev_data: &[RelationInstance],
    metrics: Option<&Path>,
) -> Result<(TrainedModel, TrainHistory)> {
    let enc = load_encoder(encoder)?;
    if config.mode.is_hidac() {
        let mut cfg = hidac.clone();
        cfg.ordering = config.ordering;
        cfg.seed = config.seed;
        let model = HidacModel::new(enc, cfg)?;
        let history = fit_hidac(&model, config, train_data, dev_data, metrics)?;
        Ok((TrainedModel::Hidac(model), history))
    } else {
        let ratio = match config.mode {
            TrainMode::BaselineFull => 1.0,
            _ => config.unfreeze_ratio,
        };
        let model = BaselineModel::new(enc, ratio, config.ordering, config.seed)?;
        let history = fit_baseline(&model, config, train_data, dev_data, metrics)?;
        Ok((TrainedModel::Baseline(model), history))
    }
}

/// Current values of named variables, for checkpointing.
pub(crate) fn tensors_of(vars: &[(String, Var)]) -> HashMap<String, Tensor> {
    vars.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect()
}
