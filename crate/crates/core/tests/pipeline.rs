//! End-to-end use of the public API on a small model: data on disk, a short
//! training run, then every evaluation route.

use std::sync::OnceLock;

use proptest::prelude::*;

use cascade_core::cascade::{CascadeConfig, CascadeModel};
use cascade_core::cost::{relative_cost_cascade, DropSchedule};
use cascade_core::data::{generate_synthetic, read_tsv, split, write_tsv, QuestionGroup, SyntheticConfig};
use cascade_core::encoder::EncoderConfig;
use cascade_core::evaluate::{
    evaluate_cascade, evaluate_monolithic, replay_cascade, score_tables, stage_metrics, EvalReport,
};
use cascade_core::metrics::MetricSummary;
use cascade_core::ranker::ScoreTable;
use cascade_core::trainer::{train, TrainConfig, TrainState};

struct Fixture {
    model: CascadeModel,
    dev: Vec<QuestionGroup>,
    tables: Vec<ScoreTable>,
    epochs: usize,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let synth = SyntheticConfig {
            n_questions: 40,
            cands_per_q: 12,
            positives_per_q: 2,
            vocab_size: 64,
            ..SyntheticConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let splits = split(&generate_synthetic(&synth).unwrap(), [0.75, 0.25, 0.0], 3).unwrap();
        let train_path = dir.path().join("train.tsv.gz");
        let dev_path = dir.path().join("dev.tsv");
        write_tsv(&train_path, &splits.train).unwrap();
        write_tsv(&dev_path, &splits.dev).unwrap();
        let train_groups = read_tsv(&train_path).unwrap();
        let dev = read_tsv(&dev_path).unwrap();
        assert_eq!(train_groups, splits.train);

        let enc = EncoderConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 16,
            vocab_size: 64,
            ..EncoderConfig::default()
        };
        let cas = CascadeConfig {
            head_hidden: 16,
            ..CascadeConfig::default()
        };
        let mut model = CascadeModel::new(enc, cas, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            warmup_updates: 10,
            peak_lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&cfg, model.n_stages());
        let mut seen = 0;
        let outcome = train(&train_groups, &dev, &mut model, &cfg, &mut state, &mut |rec, _, _, _| {
            seen += 1;
            assert_eq!(rec.epoch, seen);
            Ok(())
        })
        .unwrap();
        let tables = score_tables(&outcome.best_model, &dev).unwrap();
        Fixture {
            model: outcome.best_model,
            dev,
            tables,
            epochs: outcome.epochs.len(),
        }
    })
}

fn same_metrics(a: &MetricSummary, b: &MetricSummary) -> bool {
    a.values() == b.values() && a.evaluated == b.evaluated && a.skipped == b.skipped
}

fn same_report(a: &EvalReport, b: &EvalReport) -> bool {
    same_metrics(&a.metrics, &b.metrics) && a.layer_passes == b.layer_passes && a.candidates == b.candidates
}

#[test]
fn training_runs_every_epoch() {
    assert_eq!(fixture().epochs, 3);
}

#[test]
fn zero_drop_cascade_equals_full_depth() {
    let f = fixture();
    let cascade = evaluate_cascade(&f.model, &f.dev, &DropSchedule::zero(5)).unwrap();
    let full = evaluate_monolithic(&f.model, &f.dev, 12).unwrap();
    assert!(same_report(&cascade, &full));
    assert_eq!(cascade.relative_cost, 1.0);
}

#[test]
fn per_stage_metrics_match_monolithic_depths() {
    let f = fixture();
    let stages = stage_metrics(&f.model, &f.dev).unwrap();
    for (stage, layers) in [4, 6, 8, 10, 12].into_iter().enumerate() {
        let mono = evaluate_monolithic(&f.model, &f.dev, layers).unwrap();
        assert!(same_metrics(&stages[stage], &mono.metrics), "stage {stage}");
        assert!((mono.relative_cost - layers as f64 / 12.0).abs() < 1e-12);
    }
}

#[test]
fn measured_cost_of_uniform_groups_matches_nominal_cost() {
    let f = fixture();
    for alpha in [0.2, 0.3, 0.5] {
        let sched = DropSchedule::uniform(alpha, 5).unwrap();
        let measured = evaluate_cascade(&f.model, &f.dev, &sched).unwrap();
        let nominal = relative_cost_cascade(12, &sched, &[4, 6, 8, 10, 12]).unwrap();
        assert!((measured.relative_cost - nominal.relative_cost).abs() < 1e-12, "alpha {alpha}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn replay_matches_live_pruning(ratios in prop::collection::vec(0.0f64..0.95, 4)) {
        let f = fixture();
        let sched = DropSchedule::new(ratios).unwrap();
        let live = evaluate_cascade(&f.model, &f.dev, &sched).unwrap();
        let replay = replay_cascade(&f.tables, &f.dev, &sched, &[4, 6, 8, 10, 12]).unwrap();
        prop_assert!(same_report(&live, &replay));
    }
}
