//! Inference engines: pruned cascade, sequential reranking over separate
//! models, and single-depth ranking.

use crate::cascade::CascadeModel;
use crate::cost::{cascade_layer_sizes, drop_count, CostReport, DropSchedule};
use crate::encoder::{TokenBatch, TokenSequence};
use crate::error::{Error, Result};
use crate::metrics::rank_by_scores;
use crate::tensor::Scalar;

/// What one stage saw and decided. Candidate ids are original positions.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub input_size: usize,
    /// Candidates scored at this stage, in original order.
    pub candidates: Vec<usize>,
    /// Stage scores aligned with `candidates`.
    pub scores: Vec<f64>,
    pub survivors: Vec<usize>,
    pub survivor_scores: Vec<f64>,
    pub dropped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub stages: Vec<StageRecord>,
    /// Examples that passed each encoder layer, summed over every model used.
    pub layer_batch_sizes: Vec<usize>,
}

impl StageTrace {
    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.input_size).collect()
    }

    pub fn layer_passes(&self) -> usize {
        self.layer_batch_sizes.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankOutcome {
    /// Every candidate, best first.
    pub ranking: Vec<usize>,
    pub trace: StageTrace,
}

impl RankOutcome {
    /// Final-stage scores of the candidates that reached the last stage.
    pub fn final_scores(&self) -> Vec<(usize, f64)> {
        let last = self.trace.stages.last().expect("at least one stage");
        last.candidates.iter().copied().zip(last.scores.iter().copied()).collect()
    }
}

/// Positions (into `scores`) of the `keep` best scores, ties to the lower
/// position, returned in ascending position order.
pub fn select_survivors(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut best: Vec<usize> = rank_by_scores(scores).into_iter().take(keep).collect();
    best.sort_unstable();
    best
}

/// The shared pruning loop. `score_stage(i, alive)` returns stage-`i` scores
/// for the candidates in `alive` (original ids, ascending).
pub fn run_pruning<F>(n_candidates: usize, schedule: &DropSchedule, mut score_stage: F) -> Result<(Vec<usize>, Vec<StageRecord>)>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    if n_candidates == 0 {
        return Err(Error::Data("cannot rank an empty candidate group".into()));
    }
    let n_stages = schedule.n_stages();
    let mut alive: Vec<usize> = (0..n_candidates).collect();
    let mut records = Vec::with_capacity(n_stages);
    for stage in 0..n_stages {
        let scores = score_stage(stage, &alive)?;
        if scores.len() != alive.len() {
            return Err(Error::dim("stage scores", &[scores.len()], &[alive.len()]));
        }
        let k = alive.len();
        let dropped_n = match schedule.ratios().get(stage) {
            Some(&alpha) => drop_count(alpha, k),
            None => 0,
        };
        let keep = select_survivors(&scores, k - dropped_n);
        let mut is_kept = vec![false; k];
        keep.iter().for_each(|&p| is_kept[p] = true);
        let survivors: Vec<usize> = keep.iter().map(|&p| alive[p]).collect();
        let survivor_scores: Vec<f64> = keep.iter().map(|&p| scores[p]).collect();
        let dropped: Vec<usize> = (0..k).filter(|&p| !is_kept[p]).map(|p| alive[p]).collect();
        records.push(StageRecord {
            input_size: k,
            candidates: alive.clone(),
            scores,
            survivors: survivors.clone(),
            survivor_scores,
            dropped,
        });
        alive = survivors;
    }
    Ok((final_ranking(&records), records))
}

/// Survivors by final score, then dropped candidates: later stages first,
/// each stage's by the score that dropped them. Ties go to the lower id.
pub fn final_ranking(records: &[StageRecord]) -> Vec<usize> {
    let mut ranking = Vec::new();
    let last = records.last().expect("at least one stage");
    for p in rank_by_scores(&last.survivor_scores) {
        ranking.push(last.survivors[p]);
    }
    for rec in records.iter().rev() {
        if rec.dropped.is_empty() {
            continue;
        }
        let dropped_scores: Vec<f64> = rec
            .dropped
            .iter()
            .map(|id| rec.scores[rec.candidates.binary_search(id).expect("dropped from candidates")])
            .collect();
        for p in rank_by_scores(&dropped_scores) {
            ranking.push(rec.dropped[p]);
        }
    }
    ranking
}

fn batch_for<T: Scalar>(model: &CascadeModel<T>, sequences: &[TokenSequence]) -> Result<TokenBatch> {
    if sequences.is_empty() {
        return Err(Error::Data("cannot rank an empty candidate group".into()));
    }
    TokenBatch::new(sequences, model.encoder_config())
}

/// Pruned inference over one question's candidates, reusing partial
/// encodings between stages.
pub fn cascade_infer<T: Scalar>(sequences: &[TokenSequence], model: &CascadeModel<T>, schedule: &DropSchedule) -> Result<RankOutcome> {
    if schedule.n_stages() != model.n_stages() {
        return Err(Error::Config(format!(
            "schedule has {} stages, model has {}",
            schedule.n_stages(),
            model.n_stages()
        )));
    }
    let batch = batch_for(model, sequences)?;
    let mut state = model.embed(batch)?;
    let mut rows: Vec<usize> = (0..sequences.len()).collect();
    let mut depth = 0;
    let (ranking, stages) = run_pruning(sequences.len(), schedule, |stage, alive| {
        if alive.len() != rows.len() {
            let positions: Vec<usize> = alive
                .iter()
                .map(|id| rows.binary_search(id).expect("survivor was alive"))
                .collect();
            state.retain(&positions)?;
            rows = alive.to_vec();
        }
        let layer = model.stage_layer(stage)?;
        model.encode_to_layer(&mut state, depth, layer)?;
        depth = layer;
        model.stage_scores(&state, stage)
    })?;
    Ok(RankOutcome {
        ranking,
        trace: StageTrace {
            stages,
            layer_batch_sizes: state.layer_batch_sizes().to_vec(),
        },
    })
}

/// Sequential reranking: stage `i` re-encodes its survivors from scratch
/// with `models[i]`, whose depth must be `rho[i]`. Each model ranks with its
/// final stage.
pub fn sequential_rerank<T: Scalar>(
    sequences: &[TokenSequence],
    models: &[CascadeModel<T>],
    schedule: &DropSchedule,
    rho: &[usize],
) -> Result<RankOutcome> {
    if models.len() != schedule.n_stages() || rho.len() != models.len() {
        return Err(Error::Config(format!(
            "sequential reranking needs {} models and layer entries, got {} and {}",
            schedule.n_stages(),
            models.len(),
            rho.len()
        )));
    }
    for (i, (m, &layer)) in models.iter().zip(rho).enumerate() {
        if m.n_layers() != layer {
            return Err(Error::Config(format!(
                "model {i} has {} layers but stage {i} needs {layer}",
                m.n_layers()
            )));
        }
    }
    let l_full = *rho.iter().max().expect("non-empty");
    let mut layer_sizes = vec![0usize; l_full];
    let full = batch_for(&models[0], sequences)?;
    let (ranking, stages) = run_pruning(sequences.len(), schedule, |stage, alive| {
        let model = &models[stage];
        let mut state = model.embed(full.select(alive))?;
        model.encode_to_layer(&mut state, 0, model.n_layers())?;
        for (total, n) in layer_sizes.iter_mut().zip(state.layer_batch_sizes()) {
            *total += n;
        }
        model.stage_scores(&state, model.n_stages() - 1)
    })?;
    Ok(RankOutcome {
        ranking,
        trace: StageTrace {
            stages,
            layer_batch_sizes: layer_sizes,
        },
    })
}

/// Rank every candidate by the classifier reading layer `layers`.
pub fn monolithic_rank<T: Scalar>(sequences: &[TokenSequence], model: &CascadeModel<T>, layers: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let stage = model
        .config()
        .layer_schedule
        .iter()
        .position(|&l| l == layers)
        .ok_or_else(|| {
            Error::Config(format!(
                "no classifier reads layer {layers}; available: {:?}",
                model.config().layer_schedule
            ))
        })?;
    let mut state = model.embed(batch_for(model, sequences)?)?;
    model.encode_to_layer(&mut state, 0, layers)?;
    let scores = model.stage_scores(&state, stage)?;
    Ok((rank_by_scores(&scores), scores))
}

/// Every stage's scores for one group, from a single unpruned pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    /// `scores[stage][candidate]`
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn compute<T: Scalar>(sequences: &[TokenSequence], model: &CascadeModel<T>) -> Result<Self> {
        let batch = batch_for(model, sequences)?;
        Ok(ScoreTable {
            scores: model.forward_all_stages(&batch)?,
        })
    }

    pub fn n_candidates(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// Pruned ranking replayed from stored scores. Because pruning never
    /// changes a survivor's score, this matches [`cascade_infer`].
    pub fn replay(&self, schedule: &DropSchedule, rho: &[usize]) -> Result<RankOutcome> {
        if schedule.n_stages() != self.scores.len() || rho.len() != self.scores.len() {
            return Err(Error::Config(format!(
                "schedule has {} stages, score table has {}",
                schedule.n_stages(),
                self.scores.len()
            )));
        }
        let (ranking, stages) = run_pruning(self.n_candidates(), schedule, |stage, alive| {
            Ok(alive.iter().map(|&id| self.scores[stage][id]).collect())
        })?;
        let sizes: Vec<usize> = stages.iter().map(|s| s.input_size).collect();
        Ok(RankOutcome {
            ranking,
            trace: StageTrace {
                stages,
                layer_batch_sizes: cascade_layer_sizes(&sizes, rho),
            },
        })
    }
}

impl StageTrace {
    /// Cost of this pass relative to a full-depth pass of `l_full` layers.
    pub fn cost_report(&self, l_full: usize) -> CostReport {
        let b0 = self.stages.first().map_or(0, |s| s.input_size);
        let mut sizes = self.layer_batch_sizes.clone();
        sizes.resize(l_full.max(sizes.len()), 0);
        CostReport::from_layer_sizes(sizes, self.stage_sizes(), b0)
    }
}

#[cfg(test)]
mod tests;
