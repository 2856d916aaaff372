//! Ranking quality: MAP, MRR, P@1 and nDCG@10.

use crate::error::{Error, Result};

/// A ranked list of candidates with binary relevance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledRanking {
    order: Vec<usize>,
    labels: Vec<bool>,
}

impl LabeledRanking {
    /// `order` lists candidate ids best first; `labels[id]` is the relevance of candidate `id`.
    pub fn new(order: Vec<usize>, labels: Vec<bool>) -> Result<Self> {
        let mut seen = vec![false; labels.len()];
        if order.len() != labels.len() {
            return Err(Error::Eval(format!(
                "ranking of {} ids for {} candidates",
                order.len(),
                labels.len()
            )));
        }
        for &id in &order {
            if id >= labels.len() || std::mem::replace(&mut seen[id], true) {
                return Err(Error::Eval(format!("ranking is not a permutation: {order:?}")));
            }
        }
        Ok(LabeledRanking { order, labels })
    }

    /// Parse 0/1 labels.
    pub fn from_binary(order: Vec<usize>, labels: &[u8]) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {bad} is not 0 or 1")));
        }
        Self::new(order, labels.iter().map(|&l| l == 1).collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Relevance in rank order.
    pub fn ranked_relevance(&self) -> impl Iterator<Item = bool> + '_ {
        self.order.iter().map(|&id| self.labels[id])
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// `None` when the ranking has no positive candidate.
pub fn average_precision(r: &LabeledRanking) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, rel) in r.ranked_relevance().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// `1 / rank` of the first positive, or 0 without positives.
pub fn reciprocal_rank(r: &LabeledRanking) -> f64 {
    r.ranked_relevance()
        .position(|rel| rel)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

pub fn precision_at_1(r: &LabeledRanking) -> f64 {
    match r.ranked_relevance().next() {
        Some(true) => 1.0,
        _ => 0.0,
    }
}

pub const NDCG_CUTOFF: usize = 10;

/// Binary-gain nDCG truncated at rank 10, or 0 without positives.
pub fn ndcg_at_10(r: &LabeledRanking) -> f64 {
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = r
        .ranked_relevance()
        .take(NDCG_CUTOFF)
        .enumerate()
        .filter(|(_, rel)| *rel)
        .map(|(rank, _)| discount(rank))
        .sum();
    let ideal: f64 = (0..r.n_positive().min(NDCG_CUTOFF)).map(discount).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryMetrics {
    pub average_precision: f64,
    pub reciprocal_rank: f64,
    pub precision_at_1: f64,
    pub ndcg_at_10: f64,
}

/// All four metrics, or `None` for a query without positives.
pub fn evaluate_query(r: &LabeledRanking) -> Option<QueryMetrics> {
    Some(QueryMetrics {
        average_precision: average_precision(r)?,
        reciprocal_rank: reciprocal_rank(r),
        precision_at_1: precision_at_1(r),
        ndcg_at_10: ndcg_at_10(r),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub map: f64,
    pub mrr: f64,
    pub p_at_1: f64,
    pub ndcg_at_10: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

impl MetricSummary {
    pub const HEADER: [&'static str; 4] = ["MAP", "MRR", "P@1", "nDCG@10"];

    pub fn values(&self) -> [f64; 4] {
        [self.map, self.mrr, self.p_at_1, self.ndcg_at_10]
    }
}

/// Means over evaluable queries; `None` entries are counted as skipped.
pub fn aggregate<I>(per_query: I) -> Result<MetricSummary>
where
    I: IntoIterator<Item = Option<QueryMetrics>>,
{
    let mut sums = [0.0f64; 4];
    let (mut evaluated, mut skipped) = (0usize, 0usize);
    for q in per_query {
        match q {
            Some(q) => {
                evaluated += 1;
                sums[0] += q.average_precision;
                sums[1] += q.reciprocal_rank;
                sums[2] += q.precision_at_1;
                sums[3] += q.ndcg_at_10;
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::Eval(format!(
            "no evaluable queries ({skipped} skipped for lacking a positive)"
        )));
    }
    let n = evaluated as f64;
    Ok(MetricSummary {
        map: sums[0] / n,
        mrr: sums[1] / n,
        p_at_1: sums[2] / n,
        ndcg_at_10: sums[3] / n,
        evaluated,
        skipped,
    })
}

/// Candidate ids sorted by descending score, ties to the lower id.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ranking(order: &[usize], labels: &[u8]) -> LabeledRanking {
        LabeledRanking::from_binary(order.to_vec(), labels).unwrap()
    }

    /// AP straight from the definition: for every positive position p,
    /// count the positives among the first p entries.
    fn oracle_ap(rel: &[bool]) -> Option<f64> {
        let positions: Vec<usize> = (1..=rel.len()).filter(|&p| rel[p - 1]).collect();
        if positions.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &p in &positions {
            let mut count = 0;
            for r in rel.iter().take(p) {
                if *r {
                    count += 1;
                }
            }
            total += count as f64 / p as f64;
        }
        Some(total / positions.len() as f64)
    }

    fn oracle_rr(rel: &[bool]) -> f64 {
        for (i, r) in rel.iter().enumerate() {
            if *r {
                return 1.0 / (i as f64 + 1.0);
            }
        }
        0.0
    }

    /// nDCG with explicit `2^rel − 1` gains and a sorted ideal list.
    fn oracle_ndcg(rel: &[bool]) -> f64 {
        let gains: Vec<f64> = rel.iter().map(|&r| 2f64.powi(r as i32) - 1.0).collect();
        let dcg = |g: &[f64]| -> f64 {
            g.iter()
                .take(10)
                .enumerate()
                .map(|(i, v)| v / (i as f64 + 2.0).ln() * std::f64::consts::LN_2)
                .sum()
        };
        let mut ideal = gains.clone();
        ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let best = dcg(&ideal);
        if best == 0.0 {
            0.0
        } else {
            dcg(&gains) / best
        }
    }

    #[test]
    fn perfect_ranking_has_unit_ap() {
        let r = ranking(&[2, 0, 1, 3], &[1, 0, 1, 0]);
        assert_eq!(average_precision(&r), Some(1.0));
    }

    #[test]
    fn single_positive_at_rank_two() {
        let r = ranking(&[0, 1, 2], &[0, 1, 0]);
        assert_eq!(average_precision(&r), Some(0.5));
        assert_eq!(reciprocal_rank(&r), 0.5);
        assert_eq!(precision_at_1(&r), 0.0);
    }

    #[test]
    fn first_positive_at_rank_one() {
        let r = ranking(&[1, 0], &[0, 1]);
        assert_eq!(reciprocal_rank(&r), 1.0);
        assert_eq!(precision_at_1(&r), 1.0);
    }

    #[test]
    fn ndcg_single_positive_at_rank_three() {
        let mut labels = [0u8; 10];
        labels[2] = 1;
        let r = ranking(&(0..10).collect::<Vec<_>>(), &labels);
        assert!((ndcg_at_10(&r) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_positive_conventions() {
        let r = ranking(&[0, 1], &[0, 0]);
        assert_eq!(average_precision(&r), None);
        assert_eq!(reciprocal_rank(&r), 0.0);
        assert_eq!(precision_at_1(&r), 0.0);
        assert_eq!(ndcg_at_10(&r), 0.0);
        assert_eq!(evaluate_query(&r), None);
    }

    #[test]
    fn invalid_rankings() {
        assert!(LabeledRanking::from_binary(vec![0, 0], &[1, 0]).is_err());
        assert!(LabeledRanking::from_binary(vec![0, 2], &[1, 0]).is_err());
        assert!(LabeledRanking::from_binary(vec![0], &[1, 0]).is_err());
        assert!(matches!(LabeledRanking::from_binary(vec![0, 1], &[2, 0]), Err(Error::Data(_))));
    }

    fn q(ap: f64) -> Option<QueryMetrics> {
        Some(QueryMetrics {
            average_precision: ap,
            reciprocal_rank: ap,
            precision_at_1: ap,
            ndcg_at_10: ap,
        })
    }

    #[test]
    fn aggregate_means_and_skips() {
        let one = aggregate([q(0.4)]).unwrap();
        assert_eq!(one.map, 0.4);
        assert_eq!(aggregate([q(1.0), q(0.5)]).unwrap().map, 0.75);
        let s = aggregate([q(1.0), None, q(0.5)]).unwrap();
        assert_eq!((s.evaluated, s.skipped, s.map), (2, 1, 0.75));
        assert!(matches!(aggregate([None, None]), Err(Error::Eval(_))));
    }

    #[test]
    fn score_ranking_tie_rule() {
        assert_eq!(rank_by_scores(&[0.2, 0.9, 0.9]), vec![1, 2, 0]);
        assert_eq!(rank_by_scores(&[0.7]), vec![0]);
    }

    fn labeled_ranking() -> impl Strategy<Value = LabeledRanking> {
        (1usize..40)
            .prop_flat_map(|n| {
                let ids: Vec<usize> = (0..n).collect();
                (Just(ids).prop_shuffle(), proptest::collection::vec(any::<bool>(), n))
            })
            .prop_map(|(order, labels)| LabeledRanking::new(order, labels).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metrics_match_direct_formulas(r in labeled_ranking()) {
            let rel: Vec<bool> = r.ranked_relevance().collect();
            match (average_precision(&r), oracle_ap(&rel)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
            prop_assert!((reciprocal_rank(&r) - oracle_rr(&rel)).abs() < 1e-9);
            prop_assert_eq!(precision_at_1(&r), if rel[0] { 1.0 } else { 0.0 });
            prop_assert!((ndcg_at_10(&r) - oracle_ndcg(&rel)).abs() < 1e-9);
        }

        #[test]
        fn metrics_in_unit_interval(r in labeled_ranking()) {
            for v in [
                average_precision(&r).unwrap_or(0.0),
                reciprocal_rank(&r),
                precision_at_1(&r),
                ndcg_at_10(&r),
            ] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn promoting_a_positive_never_hurts(r in labeled_ranking(), pick in any::<prop::sample::Index>(), dist in 1usize..10) {
            let rel: Vec<bool> = r.ranked_relevance().collect();
            let positives: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
            prop_assume!(!positives.is_empty());
            let from = positives[pick.index(positives.len())];
            let to = from.saturating_sub(dist);
            let mut order = r.order().to_vec();
            let id = order.remove(from);
            order.insert(to, id);
            let moved = LabeledRanking::new(order, r.labels().to_vec()).unwrap();
            prop_assert!(average_precision(&moved).unwrap() >= average_precision(&r).unwrap() - 1e-12);
            prop_assert!(reciprocal_rank(&moved) >= reciprocal_rank(&r));
            prop_assert!(ndcg_at_10(&moved) >= ndcg_at_10(&r) - 1e-12);
        }
    }
}
