//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::cascade::CascadeModel;
use crate::encoder::{Mode, TokenBatch};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Absolute error below which a coordinate passes regardless of relative error.
pub const ABS_TOLERANCE: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-4;

/// `true` when an analytic derivative agrees with its numeric estimate.
pub fn agrees(analytic: f64, numeric: f64) -> bool {
    let abs = (analytic - numeric).abs();
    abs < ABS_TOLERANCE || abs / analytic.abs().max(numeric.abs()) < REL_TOLERANCE
}

/// `(f(x+h) − f(x−h)) / 2h`
pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    /// Largest relative error among coordinates above the absolute floor.
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }

    fn record(&mut self, param: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let abs = (analytic - numeric).abs();
        if abs >= ABS_TOLERANCE {
            self.max_rel_error = self.max_rel_error.max(abs / analytic.abs().max(numeric.abs()));
        }
        if !agrees(analytic, numeric) {
            self.mismatches.push(Mismatch {
                param: param.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

/// Multi-task loss used by the model check: the sum of every stage's
/// cross-entropy. With `dropout_seed` set, each evaluation replays the same
/// dropout masks.
pub fn model_loss(
    model: &CascadeModel<f64>,
    batch: &TokenBatch,
    labels: &[usize],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<(ParamId, Tensor<f64>)>)> {
    let mut g = Graph::with_params(model.store());
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut total = None;
    for stage in 0..model.n_stages() {
        let mut mode = match rng.as_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let logits = model.stage_logits_graph(&mut g, batch, stage, &mut mode)?;
        let ce = g.cross_entropy(logits, labels)?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    let loss = total.ok_or_else(|| Error::Config("model has no stages".into()))?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    Ok((value, grads.param_grads()))
}

/// Compare analytic and numeric gradients of [`model_loss`] on up to
/// `per_param` randomly chosen coordinates of every parameter tensor.
pub fn check_model(
    model: &CascadeModel<f64>,
    batch: &TokenBatch,
    labels: &[usize],
    per_param: usize,
    h: f64,
    seed: u64,
) -> Result<Report> {
    let dropout_seed = Some(seed ^ 0x5eed);
    let (_, grads) = model_loss(model, batch, labels, dropout_seed)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        let numel = model.store().value(id).numel();
        let analytic = grads.iter().find(|(pid, _)| *pid == id).map(|(_, t)| t);
        let picks = sample(&mut rng, numel, per_param.min(numel));
        for index in picks.iter() {
            let original = model.store().value(id).data()[index];
            let numeric = central_difference(h, |delta| {
                probe.store_mut().value_mut(id).data_mut()[index] = original + delta;
                Ok(model_loss(&probe, batch, labels, dropout_seed)?.0)
            })?;
            probe.store_mut().value_mut(id).data_mut()[index] = original;
            let a = analytic.map_or(0.0, |t| t.data()[index]);
            report.record(&model.store().get(id).name, index, a, numeric);
        }
    }
    Ok(report)
}
