use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cascade::CascadeConfig;
use crate::cost::relative_cost_cascade;
use crate::encoder::EncoderConfig;

const RHO: [usize; 5] = [4, 6, 8, 10, 12];

fn tiny_encoder(n_layers: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        vocab_size: 60,
        dropout_rate: 0.1,
        layer_norm_eps: 1e-5,
    }
}

fn tiny_cascade(seed: u64) -> CascadeModel {
    let cfg = CascadeConfig {
        head_hidden: 16,
        ..CascadeConfig::default()
    };
    CascadeModel::new(tiny_encoder(12), cfg, seed).unwrap()
}

fn random_group(n: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q: Vec<u32> = (0..rng.random_range(1..4)).map(|_| rng.random_range(3..60)).collect();
            let c: Vec<u32> = (0..rng.random_range(1..7)).map(|_| rng.random_range(3..60)).collect();
            TokenSequence::pair(&q, &c)
        })
        .collect()
}

fn uniform(alpha: f64) -> DropSchedule {
    DropSchedule::uniform(alpha, 5).unwrap()
}

fn random_table(n: usize, seed: u64) -> ScoreTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScoreTable {
        scores: (0..5).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect(),
    }
}

#[test]
fn survivors_break_ties_by_lower_index() {
    assert_eq!(select_survivors(&[0.5, 0.9, 0.5, 0.5], 2), vec![0, 1]);
    assert_eq!(select_survivors(&[0.1, 0.2, 0.3], 3), vec![0, 1, 2]);
}

#[test]
fn canonical_sizes_for_128_at_point_three() {
    let out = random_table(128, 1).replay(&uniform(0.3), &RHO).unwrap();
    assert_eq!(out.trace.stage_sizes(), [128, 90, 63, 45, 32]);
    assert_eq!(out.trace.layer_batch_sizes, [128, 128, 128, 128, 90, 90, 63, 63, 45, 45, 32, 32]);
    assert_eq!(out.ranking.len(), 128);
}

#[test]
fn single_candidate_survives_everything() {
    let out = random_table(1, 2).replay(&uniform(0.6), &RHO).unwrap();
    assert_eq!(out.trace.stage_sizes(), [1; 5]);
    assert_eq!(out.ranking, [0]);
}

#[test]
fn zero_alpha_replay_is_final_stage_sort() {
    let table = random_table(40, 3);
    let out = table.replay(&uniform(0.0), &RHO).unwrap();
    assert_eq!(out.ranking, rank_by_scores(&table.scores[4]));
}

#[test]
fn dropped_candidates_follow_survivors_later_stage_first() {
    // Two stages, half dropped at the first.
    let table = ScoreTable {
        scores: vec![vec![0.1, 0.8, 0.3, 0.7], vec![0.0, 0.2, 0.0, 0.9]],
    };
    let out = table.replay(&DropSchedule::new(vec![0.5]).unwrap(), &[1, 2]).unwrap();
    assert_eq!(out.trace.stages[0].survivors, [1, 3]);
    assert_eq!(out.trace.stages[0].dropped, [0, 2]);
    assert_eq!(out.ranking, [3, 1, 2, 0]);

    // Three stages: stage-2 drops rank ahead of stage-1 drops.
    let table = ScoreTable {
        scores: vec![
            vec![0.9, 0.8, 0.1, 0.2],
            vec![0.3, 0.4, 0.0, 0.0],
            vec![0.0, 0.5, 0.0, 0.0],
        ],
    };
    let out = table.replay(&DropSchedule::new(vec![0.5, 0.5]).unwrap(), &[1, 2, 3]).unwrap();
    assert_eq!(out.ranking, [1, 0, 3, 2]);
}

#[test]
fn empty_group_is_data_error() {
    let m = tiny_cascade(1);
    assert!(matches!(cascade_infer(&[], &m, &uniform(0.3)), Err(Error::Data(_))));
    assert!(matches!(
        run_pruning(0, &uniform(0.3), |_, _| Ok(vec![])),
        Err(Error::Data(_))
    ));
}

#[test]
fn schedule_must_match_model() {
    let m = tiny_cascade(1);
    let group = random_group(4, 1);
    let short = DropSchedule::uniform(0.3, 3).unwrap();
    assert!(matches!(cascade_infer(&group, &m, &short), Err(Error::Config(_))));
}

#[test]
fn zero_alpha_cascade_equals_monolithic_ranking() {
    let m = tiny_cascade(2);
    let group = random_group(20, 2);
    let out = cascade_infer(&group, &m, &uniform(0.0)).unwrap();
    let (mono, mono_scores) = monolithic_rank(&group, &m, 12).unwrap();
    assert_eq!(out.ranking, mono);
    for (id, s) in out.final_scores() {
        assert!((s - mono_scores[id]).abs() <= 1e-6);
    }
}

#[test]
fn live_cascade_matches_replay_and_cost_model() {
    let m = tiny_cascade(3);
    let group = random_group(37, 3);
    let table = ScoreTable::compute(&group, &m).unwrap();
    for alpha in [0.0, 0.3, 0.5] {
        let live = cascade_infer(&group, &m, &uniform(alpha)).unwrap();
        let replay = table.replay(&uniform(alpha), &RHO).unwrap();
        assert_eq!(live.ranking, replay.ranking, "alpha {alpha}");
        for (a, b) in live.trace.stages.iter().zip(&replay.trace.stages) {
            assert_eq!(a.survivors, b.survivors);
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
        let expected = relative_cost_cascade(37, &uniform(alpha), &RHO).unwrap();
        assert_eq!(live.trace.layer_batch_sizes, expected.layer_batch_sizes);
        assert_eq!(live.trace.layer_passes(), expected.total_layer_passes());
        assert_eq!(live.trace.cost_report(12).relative_cost, expected.relative_cost);
    }
}

#[test]
fn each_layer_range_runs_once_per_survivor() {
    let m = tiny_cascade(4);
    let group = random_group(30, 4);
    let out = cascade_infer(&group, &m, &uniform(0.4)).unwrap();
    let sizes = out.trace.stage_sizes();
    let mut prev = 0;
    for (stage, &layer) in RHO.iter().enumerate() {
        for l in prev..layer {
            assert_eq!(out.trace.layer_batch_sizes[l], sizes[stage]);
        }
        prev = layer;
    }
}

#[test]
fn monolithic_rank_basics() {
    let m = tiny_cascade(5);
    let group = random_group(1, 5);
    assert_eq!(monolithic_rank(&group, &m, 12).unwrap().0, [0]);
    assert_eq!(monolithic_rank(&group, &m, 4).unwrap().0, [0]);
    assert!(matches!(monolithic_rank(&group, &m, 5), Err(Error::Config(_))));
    assert_eq!(rank_by_scores(&[0.2, 0.9, 0.9]), [1, 2, 0]);
}

fn sr_models() -> Vec<CascadeModel> {
    RHO.iter()
        .enumerate()
        .map(|(i, &l)| {
            let cfg = CascadeConfig::monolithic(l, 16);
            CascadeModel::new(tiny_encoder(l), cfg, 100 + i as u64).unwrap()
        })
        .collect()
}

#[test]
fn sequential_halving_and_full_reencoding() {
    let models = sr_models();
    let group = random_group(128, 6);
    let out = sequential_rerank(&group, &models, &uniform(0.5), &RHO).unwrap();
    let sizes = out.trace.stage_sizes();
    assert_eq!(sizes, [128, 64, 32, 16, 8]);
    let expected: usize = RHO.iter().zip(&sizes).map(|(r, k)| r * k).sum();
    assert_eq!(out.trace.layer_passes(), expected);
    assert_eq!(out.trace.layer_batch_sizes[0], 128 + 64 + 32 + 16 + 8);
    assert_eq!(out.trace.layer_batch_sizes[11], 8);
}

#[test]
fn sequential_zero_alpha_equals_last_model() {
    let models = sr_models();
    let group = random_group(25, 7);
    let out = sequential_rerank(&group, &models, &uniform(0.0), &RHO).unwrap();
    let (mono, _) = monolithic_rank(&group, &models[4], 12).unwrap();
    assert_eq!(out.ranking, mono);
}

#[test]
fn sequential_depth_mismatch_is_config_error() {
    let mut models = sr_models();
    models.swap(0, 1);
    let group = random_group(3, 8);
    assert!(matches!(
        sequential_rerank(&group, &models, &uniform(0.3), &RHO),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        sequential_rerank(&group, &models[..4], &uniform(0.3), &RHO),
        Err(Error::Config(_))
    ));
}

/// Brute-force top-k: sort (−score, index) pairs and keep the first k.
fn oracle_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| (-scores[a], a).partial_cmp(&(-scores[b], b)).unwrap());
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

fn scores_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..200).prop_flat_map(|n| {
        // Coarse values make ties common.
        proptest::collection::vec(proptest::collection::vec((0u8..20).prop_map(|v| v as f64 / 20.0), n), 5)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pruning_semantics(scores in scores_strategy(), other in scores_strategy(), ratios in proptest::collection::vec(0.0f64..0.95, 4)) {
        let schedule = DropSchedule::new(ratios.clone()).unwrap();
        let table = ScoreTable { scores };
        let n = table.n_candidates();
        let out = table.replay(&schedule, &RHO).unwrap();
        let mut prev: Vec<usize> = (0..n).collect();
        for (i, rec) in out.trace.stages.iter().enumerate() {
            prop_assert_eq!(&rec.candidates, &prev);
            let k = rec.input_size;
            let expected_k = match ratios.get(i) {
                Some(a) => k - (a * k as f64 + 1e-9).floor().min((k - 1) as f64) as usize,
                None => k,
            };
            prop_assert_eq!(rec.survivors.len(), expected_k);
            prop_assert!(!rec.survivors.is_empty());
            prop_assert!(rec.survivors.iter().all(|s| prev.contains(s)));
            let positions = oracle_top_k(&rec.scores, expected_k);
            let oracle: Vec<usize> = positions.iter().map(|&p| rec.candidates[p]).collect();
            prop_assert_eq!(&rec.survivors, &oracle);
            prev = rec.survivors.clone();
        }
        let mut all = out.ranking.clone();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());

        // Sizes never depend on the scores.
        let mut other = other;
        for row in &mut other {
            row.resize(n, 0.5);
        }
        let alt = ScoreTable { scores: other }.replay(&schedule, &RHO).unwrap();
        prop_assert_eq!(alt.trace.stage_sizes(), out.trace.stage_sizes());
        prop_assert_eq!(alt.trace.layer_batch_sizes, out.trace.layer_batch_sizes);
    }
}
