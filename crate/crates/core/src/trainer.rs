//! Multi-task fine-tuning: each mini-batch trains one uniformly sampled stage.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::cascade::CascadeModel;
use crate::data::QuestionGroup;
use crate::encoder::{Mode, TokenBatch, TokenSequence};
use crate::error::{Error, Result};
use crate::evaluate::stage_metrics;
use crate::metrics::MetricSummary;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_updates: usize,
    /// End of the decay leg; derived from the epoch count when `None`.
    pub total_updates: Option<usize>,
    /// Examples per mini-batch.
    pub batch_size: usize,
    /// When set, batches are filled up to this many (padded) tokens instead.
    pub batch_token_budget: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            warmup_updates: 400,
            total_updates: None,
            batch_size: 32,
            batch_token_budget: None,
            adam: AdamConfig::default(),
            seed: 7,
            epochs: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.batch_token_budget == Some(0) {
            return Err(Error::Config("batch_token_budget must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if let Some(total) = self.total_updates {
            self.schedule(total)?;
        }
        Ok(())
    }

    /// The learning-rate schedule ending at `total` updates.
    pub fn schedule(&self, total: usize) -> Result<LrSchedule> {
        if self.warmup_updates >= total {
            return Err(Error::Config(format!(
                "warmup_updates {} must be below total_updates {total}",
                self.warmup_updates
            )));
        }
        Ok(LrSchedule {
            peak: self.peak_lr,
            warmup: self.warmup_updates,
            total,
        })
    }
}

/// Triangular schedule: linear ramp to `peak`, then linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, update: usize) -> f64 {
        if update <= self.warmup {
            if self.warmup == 0 {
                return self.peak;
            }
            return self.peak * update as f64 / self.warmup as f64;
        }
        if update >= self.total {
            return 0.0;
        }
        self.peak * (self.total - update) as f64 / (self.total - self.warmup) as f64
    }
}

/// Uniform over `0..n_stages`.
pub fn sample_stage<R: Rng + ?Sized>(rng: &mut R, n_stages: usize) -> usize {
    rng.random_range(0..n_stages)
}

/// Adam with moments kept in `f64`. Only parameters that receive a gradient
/// in a step are touched by it, each with its own step count.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    slots: Vec<Option<AdamSlot>>,
}

#[derive(Clone, Debug)]
struct AdamSlot {
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: Vec::new(),
        }
    }

    /// First and second moments of a parameter, once it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.slots
            .get(id.index())
            .and_then(Option::as_ref)
            .map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// Apply one update from the gradient buffers held in `store`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), None);
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, p) in store.iter_mut() {
            let Some(grad) = p.grad.as_ref() else { continue };
            if !p.requires_grad {
                continue;
            }
            if grad.shape() != p.value.shape() {
                return Err(Error::dim("adam", grad.shape(), p.value.shape()));
            }
            let n = p.value.numel();
            let slot = self.slots[id.index()].get_or_insert_with(|| AdamSlot {
                steps: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            slot.steps += 1;
            let c1 = 1.0 - beta1.powi(slot.steps as i32);
            let c2 = 1.0 - beta2.powi(slot.steps as i32);
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.iter_mut())
                .zip(slot.v.iter_mut())
            {
                let g = g.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = T::cast_from(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Mutable training progress.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub update: usize,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Mean training loss per stage over the current epoch.
    pub stage_loss: Vec<RunningMean>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, n_stages: usize) -> Self {
        TrainState {
            update: 0,
            adam: Adam::new(cfg.adam.clone()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            stage_loss: vec![RunningMean::default(); n_stages],
        }
    }

    /// Continue from a saved update count; optimizer moments start afresh.
    pub fn resume(cfg: &TrainConfig, n_stages: usize, update: usize) -> Self {
        TrainState {
            update,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ (update as u64).rotate_left(32)),
            ..TrainState::new(cfg, n_stages)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningMean {
    pub sum: f64,
    pub count: usize,
}

impl RunningMean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub stage: usize,
    pub lr: f64,
    pub embedding_grad_norm: f64,
}

/// One optimizer step on the loss of `stage` alone.
pub fn train_step<T: Scalar>(
    model: &mut CascadeModel<T>,
    batch: &TokenBatch,
    labels: &[usize],
    stage: usize,
    state: &mut TrainState,
    schedule: &LrSchedule,
) -> Result<StepReport> {
    if labels.is_empty() || batch.batch_size() == 0 {
        return Err(Error::Usage("train_step needs at least one example".into()));
    }
    if labels.len() != batch.batch_size() {
        return Err(Error::dim("train_step labels", &[labels.len()], &[batch.batch_size()]));
    }
    let (loss, grads) = {
        let mut g = Graph::with_params(model.store());
        let logits = model.stage_logits_graph(&mut g, batch, stage, &mut Mode::Train(&mut state.rng))?;
        let loss = g.cross_entropy(logits, labels)?;
        let value = g.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} at update {}", state.update + 1)));
        }
        (value, g.backward(loss)?.param_grads())
    };
    let tokens = model.encoder().tokens;
    let store = model.store_mut();
    store.zero_grad();
    for (id, grad) in grads {
        grad.check_finite(&store.get(id).name)?;
        store.get_mut(id).grad = Some(grad);
    }
    let embedding_grad_norm = store.get(tokens).grad.as_ref().map_or(0.0, |g| g.sum_squares().sqrt());
    let lr = schedule.lr_at(state.update + 1);
    state.adam.step(store, lr)?;
    state.update += 1;
    if let Some(m) = state.stage_loss.get_mut(stage) {
        m.push(loss);
    }
    Ok(StepReport {
        loss,
        stage,
        lr,
        embedding_grad_norm,
    })
}

/// A mini-batch as `(group, example)` index pairs.
pub type BatchIndex = Vec<(usize, usize)>;

/// Shuffle every example and cut the stream into mini-batches.
pub fn make_batches<R: Rng + ?Sized>(groups: &[QuestionGroup], cfg: &TrainConfig, rng: &mut R) -> Vec<BatchIndex> {
    let mut all: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| (0..g.len()).map(move |ei| (gi, ei)))
        .collect();
    all.shuffle(rng);
    match cfg.batch_token_budget {
        None => all.chunks(cfg.batch_size).map(<[_]>::to_vec).collect(),
        Some(budget) => {
            let len = |&(gi, ei): &(usize, usize)| {
                let e = &groups[gi].examples[ei];
                e.question.len() + e.candidate.len() + 2
            };
            let mut batches = Vec::new();
            let mut current: BatchIndex = Vec::new();
            let mut longest = 0;
            for item in all {
                let l = len(&item);
                let padded = (current.len() + 1) * longest.max(l);
                if !current.is_empty() && padded > budget {
                    batches.push(std::mem::take(&mut current));
                    longest = 0;
                }
                longest = longest.max(l);
                current.push(item);
            }
            if !current.is_empty() {
                batches.push(current);
            }
            batches
        }
    }
}

/// Token batch and labels for one mini-batch.
pub fn assemble<T: Scalar>(model: &CascadeModel<T>, groups: &[QuestionGroup], index: &[(usize, usize)]) -> Result<(TokenBatch, Vec<usize>)> {
    let examples: Vec<_> = index.iter().map(|&(gi, ei)| &groups[gi].examples[ei]).collect();
    let seqs: Vec<TokenSequence> = examples.iter().map(|e| e.sequence()).collect();
    let labels = examples.iter().map(|e| e.label as usize).collect();
    Ok((TokenBatch::new(&seqs, model.encoder_config())?, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub updates: usize,
    pub mean_loss: f64,
    pub stage_loss: Vec<Option<f64>>,
    pub dev: Vec<MetricSummary>,
}

impl EpochRecord {
    pub fn log_header(n_stages: usize) -> String {
        let mut cols = vec!["epoch".to_string(), "updates".into(), "train_loss".into()];
        for s in 1..=n_stages {
            cols.extend(MetricSummary::HEADER.iter().map(|m| format!("stage{s}_{m}")));
        }
        cols.join("\t")
    }

    pub fn log_line(&self) -> String {
        let mut cols = vec![self.epoch.to_string(), self.updates.to_string(), format!("{:.6}", self.mean_loss)];
        for m in &self.dev {
            cols.extend(m.values().iter().map(|v| format!("{v:.6}")));
        }
        cols.join("\t")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar = f32> {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the best final-stage dev MAP.
    pub best_epoch: usize,
    pub best_model: CascadeModel<T>,
    pub best_update: usize,
}

/// Called after every epoch with the record, the current model and whether
/// it is the best so far.
pub type EpochHook<'h, T> = dyn FnMut(&EpochRecord, &CascadeModel<T>, &TrainState, bool) -> Result<()> + 'h;

/// Train for `cfg.epochs` epochs, evaluating every stage on `dev` after each.
pub fn train<T: Scalar>(
    train_groups: &[QuestionGroup],
    dev_groups: &[QuestionGroup],
    model: &mut CascadeModel<T>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    for (name, groups) in [("training", train_groups), ("dev", dev_groups)] {
        if !groups.iter().any(|g| g.n_positive() > 0) {
            return Err(Error::Data(format!("{name} data has no positive label")));
        }
    }
    crate::data::validate_for(train_groups, model.encoder_config())?;
    crate::data::validate_for(dev_groups, model.encoder_config())?;

    let per_epoch = make_batches(train_groups, cfg, &mut state.rng.clone()).len();
    let total = cfg.total_updates.unwrap_or(state.update + per_epoch * cfg.epochs);
    let schedule = cfg.schedule(total)?;
    let n_stages = model.n_stages();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, usize, CascadeModel<T>)> = None;
    for epoch in 1..=cfg.epochs {
        state.stage_loss = vec![RunningMean::default(); n_stages];
        let mut epoch_loss = RunningMean::default();
        let batches = make_batches(train_groups, cfg, &mut state.rng);
        for index in &batches {
            let (batch, labels) = assemble(model, train_groups, index)?;
            let stage = sample_stage(&mut state.rng, n_stages);
            let report = train_step(model, &batch, &labels, stage, state, &schedule)?;
            epoch_loss.push(report.loss);
        }
        let dev = stage_metrics(model, dev_groups)?;
        let record = EpochRecord {
            epoch,
            updates: state.update,
            mean_loss: epoch_loss.mean().unwrap_or(f64::NAN),
            stage_loss: state.stage_loss.iter().map(RunningMean::mean).collect(),
            dev,
        };
        let final_map = record.dev.last().expect("at least one stage").map;
        let improved = best.as_ref().is_none_or(|(m, ..)| final_map > *m);
        if improved {
            best = Some((final_map, epoch, state.update, model.clone()));
        }
        on_epoch(&record, model, state, improved)?;
        records.push(record);
    }
    let (_, best_epoch, best_update, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        epochs: records,
        best_epoch,
        best_model,
        best_update,
    })
}

#[cfg(test)]
mod tests;
