//! Layer-batch cost accounting for pruned, sequential and monolithic inference.
//!
//! The unit of cost is one example passing one encoder layer. Embedding and
//! head costs are not counted.

use crate::error::{Error, Result};

/// Slack added before flooring `α·k` so that products such as `0.3·90`,
/// which land a hair below the integer in binary floating point, round to it.
const FLOOR_SLACK: f64 = 1e-9;

/// Per-stage drop ratios for every stage but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct DropSchedule {
    ratios: Vec<f64>,
}

impl DropSchedule {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if let Some(bad) = ratios.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return Err(Error::Config(format!("drop ratio {bad} outside [0, 1)")));
        }
        Ok(DropSchedule { ratios })
    }

    /// The same ratio before each of the first `n_stages − 1` stages' cuts.
    pub fn uniform(alpha: f64, n_stages: usize) -> Result<Self> {
        if n_stages == 0 {
            return Err(Error::Config("a schedule needs at least one stage".into()));
        }
        Self::new(vec![alpha; n_stages - 1])
    }

    /// No pruning anywhere.
    pub fn zero(n_stages: usize) -> Self {
        DropSchedule {
            ratios: vec![0.0; n_stages.saturating_sub(1)],
        }
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn n_stages(&self) -> usize {
        self.ratios.len() + 1
    }

    /// Candidates entering each stage, starting from `b0`.
    pub fn stage_sizes(&self, b0: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.n_stages());
        let mut k = b0;
        sizes.push(k);
        for &alpha in &self.ratios {
            k -= drop_count(alpha, k);
            sizes.push(k);
        }
        sizes
    }
}

/// `⌊α·k⌋`, capped so that at least one of `k ≥ 1` candidates survives.
pub fn drop_count(alpha: f64, k: usize) -> usize {
    if k == 0 {
        return 0;
    }
    let dropped = (alpha * k as f64 + FLOOR_SLACK).floor() as usize;
    dropped.min(k - 1)
}

fn check_schedule(schedule: &DropSchedule, rho: &[usize]) -> Result<usize> {
    if schedule.n_stages() != rho.len() {
        return Err(Error::Config(format!(
            "{} drop ratios need {} stages, got a layer schedule of {}",
            schedule.ratios.len(),
            schedule.n_stages(),
            rho.len()
        )));
    }
    if rho.is_empty() || rho[0] == 0 || rho.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("layer schedule {rho:?} must be strictly increasing from 1")));
    }
    Ok(*rho.last().expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    /// 1.0 is a full-depth pass over the same batch.
    pub relative_cost: f64,
    pub average_batch_size: f64,
    /// Examples processed at each encoder layer, layer 1 first.
    pub layer_batch_sizes: Vec<usize>,
    pub stage_sizes: Vec<usize>,
    pub throughput_gain: Option<f64>,
}

impl CostReport {
    pub fn from_layer_sizes(layer_batch_sizes: Vec<usize>, stage_sizes: Vec<usize>, b0: usize) -> Self {
        let total: usize = layer_batch_sizes.iter().sum();
        let l_full = layer_batch_sizes.len() as f64;
        CostReport {
            relative_cost: total as f64 / (l_full * b0 as f64),
            average_batch_size: total as f64 / l_full,
            layer_batch_sizes,
            stage_sizes,
            throughput_gain: None,
        }
    }

    pub fn total_layer_passes(&self) -> usize {
        self.layer_batch_sizes.iter().sum()
    }

    /// Signed percentage change against the full-depth pass.
    pub fn change_percent(&self) -> f64 {
        (self.relative_cost - 1.0) * 100.0
    }
}

/// `L / L_full`
pub fn relative_cost_monolithic(layers: usize, l_full: usize) -> Result<f64> {
    if layers == 0 || layers > l_full {
        return Err(Error::Config(format!("layers {layers} outside 1..={l_full}")));
    }
    Ok(layers as f64 / l_full as f64)
}

/// Per-layer batch sizes when stage `i` reads layer `rho[i]` of one shared stack.
pub fn cascade_layer_sizes(stage_sizes: &[usize], rho: &[usize]) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(rho.last().copied().unwrap_or(0));
    let mut prev = 0;
    for (&k, &layer) in stage_sizes.iter().zip(rho) {
        sizes.extend(std::iter::repeat_n(k, layer - prev));
        prev = layer;
    }
    sizes
}

pub fn relative_cost_cascade(b0: usize, schedule: &DropSchedule, rho: &[usize]) -> Result<CostReport> {
    if b0 == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    check_schedule(schedule, rho)?;
    let stages = schedule.stage_sizes(b0);
    Ok(CostReport::from_layer_sizes(cascade_layer_sizes(&stages, rho), stages, b0))
}

/// Every stage re-encodes its survivors from layer 1 with its own model.
pub fn relative_cost_sequential(b0: usize, schedule: &DropSchedule, rho: &[usize]) -> Result<CostReport> {
    if b0 == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let l_full = check_schedule(schedule, rho)?;
    let stages = schedule.stage_sizes(b0);
    let mut layer_sizes = vec![0usize; l_full];
    for (&k, &layer) in stages.iter().zip(rho) {
        for size in &mut layer_sizes[..layer] {
            *size += k;
        }
    }
    Ok(CostReport::from_layer_sizes(layer_sizes, stages, b0))
}

/// Mean per-layer batch size of a cascade given explicit stage sizes.
pub fn average_batch_size(stage_sizes: &[usize], rho: &[usize]) -> f64 {
    let sizes = cascade_layer_sizes(stage_sizes, rho);
    sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
}

/// Hand-listed stage sizes for `b0 = 128`, `α = 0.3`; after the second
/// stage they are not what the floor rule produces.
pub const WORKED_EXAMPLE_STAGE_SIZES: [usize; 5] = [128, 90, 63, 44, 28];

/// Largest `b0` whose average per-layer batch fits under `ceiling`, and the
/// throughput gain `b0 / ceiling`.
pub fn max_feasible_batch(ceiling: usize, schedule: &DropSchedule, rho: &[usize]) -> Result<(usize, f64)> {
    if ceiling == 0 {
        return Err(Error::Config("memory ceiling must be at least 1".into()));
    }
    let l_full = check_schedule(schedule, rho)?;
    let fits = |b0: usize| average_batch_size(&schedule.stage_sizes(b0), rho) <= ceiling as f64;
    // The average is non-decreasing in b0 and at least b0·rho[0]/l_full.
    let (mut lo, mut hi) = (ceiling, ceiling * l_full / rho[0] + 1);
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, throughput_gain(lo, ceiling)))
}

pub fn throughput_gain(b0: usize, ceiling: usize) -> f64 {
    b0 as f64 / ceiling as f64
}
