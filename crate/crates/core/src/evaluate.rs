//! Dataset-level evaluation of the inference engines, and the drop-ratio
//! grid search.

use crate::cascade::CascadeModel;
use crate::cost::DropSchedule;
use crate::data::QuestionGroup;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_query, rank_by_scores, LabeledRanking, MetricSummary};
use crate::ranker::{cascade_infer, monolithic_rank, sequential_rerank, RankOutcome, ScoreTable};
use crate::tensor::Scalar;

/// Metrics plus the measured cost of ranking a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: MetricSummary,
    /// Example-layer passes summed over groups.
    pub layer_passes: usize,
    /// Candidates summed over groups.
    pub candidates: usize,
    /// `layer_passes / (l_full · candidates)`.
    pub relative_cost: f64,
}

fn labeled(group: &QuestionGroup, ranking: Vec<usize>) -> Result<LabeledRanking> {
    LabeledRanking::from_binary(ranking, &group.labels())
}

fn collect<F>(groups: &[QuestionGroup], l_full: usize, mut rank: F) -> Result<EvalReport>
where
    F: FnMut(&QuestionGroup) -> Result<(Vec<usize>, usize)>,
{
    let mut per_query = Vec::with_capacity(groups.len());
    let (mut layer_passes, mut candidates) = (0, 0);
    for group in groups {
        let (ranking, passes) = rank(group)?;
        per_query.push(evaluate_query(&labeled(group, ranking)?));
        layer_passes += passes;
        candidates += group.len();
    }
    Ok(EvalReport {
        metrics: aggregate(per_query)?,
        layer_passes,
        candidates,
        relative_cost: layer_passes as f64 / (l_full * candidates) as f64,
    })
}

fn from_outcome(out: RankOutcome) -> (Vec<usize>, usize) {
    let passes = out.trace.layer_passes();
    (out.ranking, passes)
}

pub fn evaluate_cascade<T: Scalar>(model: &CascadeModel<T>, groups: &[QuestionGroup], schedule: &DropSchedule) -> Result<EvalReport> {
    collect(groups, model.n_layers(), |g| {
        cascade_infer(&g.sequences(), model, schedule).map(from_outcome)
    })
}

/// Rank with the single classifier reading layer `layers`.
pub fn evaluate_monolithic<T: Scalar>(model: &CascadeModel<T>, groups: &[QuestionGroup], layers: usize) -> Result<EvalReport> {
    collect(groups, model.n_layers(), |g| {
        monolithic_rank(&g.sequences(), model, layers).map(|(r, _)| (r, layers * g.len()))
    })
}

pub fn evaluate_sequential<T: Scalar>(
    models: &[CascadeModel<T>],
    groups: &[QuestionGroup],
    schedule: &DropSchedule,
    rho: &[usize],
) -> Result<EvalReport> {
    let l_full = rho.iter().copied().max().unwrap_or(0);
    collect(groups, l_full, |g| {
        sequential_rerank(&g.sequences(), models, schedule, rho).map(from_outcome)
    })
}

/// Per-group score tables for repeated replay.
pub fn score_tables<T: Scalar>(model: &CascadeModel<T>, groups: &[QuestionGroup]) -> Result<Vec<ScoreTable>> {
    groups.iter().map(|g| ScoreTable::compute(&g.sequences(), model)).collect()
}

/// Each stage used alone as a full ranker over every candidate.
pub fn stage_metrics<T: Scalar>(model: &CascadeModel<T>, groups: &[QuestionGroup]) -> Result<Vec<MetricSummary>> {
    let tables = score_tables(model, groups)?;
    (0..model.n_stages())
        .map(|stage| {
            let per_query = groups
                .iter()
                .zip(&tables)
                .map(|(g, t)| labeled(g, rank_by_scores(&t.scores[stage])).map(|r| evaluate_query(&r)))
                .collect::<Result<Vec<_>>>()?;
            aggregate(per_query)
        })
        .collect()
}

/// Cascade evaluation replayed from precomputed score tables.
pub fn replay_cascade(tables: &[ScoreTable], groups: &[QuestionGroup], schedule: &DropSchedule, rho: &[usize]) -> Result<EvalReport> {
    if tables.len() != groups.len() {
        return Err(Error::dim("score tables", &[tables.len()], &[groups.len()]));
    }
    let l_full = rho.iter().copied().max().unwrap_or(0);
    let mut tables = tables.iter();
    collect(groups, l_full, |_| {
        tables.next().expect("one table per group").replay(schedule, rho).map(from_outcome)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRecord {
    pub ratios: Vec<f64>,
    pub report: EvalReport,
}

impl GridRecord {
    pub fn header(n_ratios: usize) -> String {
        let mut cols: Vec<String> = (1..=n_ratios).map(|i| format!("alpha_p{i}")).collect();
        cols.extend(["relative_cost", "MAP", "nDCG@10", "P@1", "MRR"].map(String::from));
        cols.join("\t")
    }

    pub fn line(&self) -> String {
        let m = &self.report.metrics;
        let mut cols: Vec<String> = self.ratios.iter().map(|a| format!("{a:.2}")).collect();
        cols.extend([self.report.relative_cost, m.map, m.ndcg_at_10, m.p_at_1, m.mrr].map(|v| format!("{v:.6}")));
        cols.join("\t")
    }
}

/// Every schedule in the Cartesian product of `grid[i]` (values for drop
/// ratio `i`), sorted by ascending measured cost. Ties keep product order.
pub fn grid_search<T: Scalar>(model: &CascadeModel<T>, groups: &[QuestionGroup], grid: &[Vec<f64>]) -> Result<Vec<GridRecord>> {
    let n_ratios = model.n_stages() - 1;
    if grid.len() != n_ratios {
        return Err(Error::Usage(format!("grid has {} axes, model needs {n_ratios}", grid.len())));
    }
    if grid.iter().any(Vec::is_empty) {
        return Err(Error::Usage("every grid axis needs at least one value".into()));
    }
    for &a in grid.iter().flatten() {
        if !(0.0..1.0).contains(&a) {
            return Err(Error::Config(format!("drop ratio {a} outside [0, 1)")));
        }
    }
    let tables = score_tables(model, groups)?;
    let rho = &model.config().layer_schedule;
    let mut records = Vec::new();
    for ratios in cartesian(grid) {
        let schedule = DropSchedule::new(ratios.clone())?;
        let report = replay_cascade(&tables, groups, &schedule, rho)?;
        records.push(GridRecord { ratios, report });
    }
    records.sort_by(|a, b| a.report.relative_cost.total_cmp(&b.report.relative_cost));
    Ok(records)
}

/// Lexicographic Cartesian product, last axis fastest.
pub fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// `{0.1, 0.2, …, 0.6}` on every axis.
pub fn default_grid(n_ratios: usize) -> Vec<Vec<f64>> {
    vec![(1..=6).map(|i| i as f64 / 10.0).collect(); n_ratios]
}
