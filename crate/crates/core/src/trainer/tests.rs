use super::*;
use crate::cascade::CascadeConfig;
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::tensor::Tensor;

fn tiny_model(seed: u64) -> CascadeModel {
    let enc = EncoderConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        vocab_size: 64,
        ..EncoderConfig::default()
    };
    let cfg = CascadeConfig {
        head_hidden: 16,
        ..CascadeConfig::default()
    };
    CascadeModel::new(enc, cfg, seed).unwrap()
}

fn toy_groups(n: usize, seed: u64) -> Vec<QuestionGroup> {
    generate_synthetic(&SyntheticConfig {
        n_questions: n,
        cands_per_q: 8,
        positives_per_q: 2,
        vocab_size: 64,
        n_topics: 6,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn schedule(warmup: usize, total: usize) -> LrSchedule {
    TrainConfig {
        peak_lr: 1e-3,
        warmup_updates: warmup,
        ..TrainConfig::default()
    }
    .schedule(total)
    .unwrap()
}

#[test]
fn lr_schedule_points() {
    let s = schedule(100, 500);
    assert_eq!(s.lr_at(0), 0.0);
    assert_eq!(s.lr_at(100), 1e-3);
    assert!((s.lr_at(300) - 5e-4).abs() < 1e-9);
    assert_eq!(s.lr_at(500), 0.0);
    assert_eq!(s.lr_at(900), 0.0);
    assert!((s.lr_at(50) - 5e-4).abs() < 1e-12);
}

#[test]
fn lr_schedule_shape() {
    let s = schedule(40, 200);
    let lrs: Vec<f64> = (0..260).map(|u| s.lr_at(u)).collect();
    assert!(lrs.iter().all(|&l| l >= 0.0 && l <= 1e-3));
    assert_eq!(lrs.iter().cloned().fold(0.0, f64::max), 1e-3);
    // Piecewise linear: constant first differences on each leg.
    let step_up = 1e-3 / 40.0;
    let step_down = 1e-3 / 160.0;
    for u in 1..=40 {
        assert!((lrs[u] - lrs[u - 1] - step_up).abs() < 1e-15);
    }
    for u in 41..=200 {
        assert!((lrs[u - 1] - lrs[u] - step_down).abs() < 1e-15);
    }
}

#[test]
fn warmup_must_precede_total() {
    let cfg = TrainConfig {
        warmup_updates: 10,
        total_updates: Some(10),
        ..TrainConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn stage_sampling_is_uniform_and_reproducible() {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..10_000).map(|_| sample_stage(&mut rng, 5)).collect::<Vec<_>>()
    };
    let draws = draw(11);
    for stage in 0..5 {
        let freq = draws.iter().filter(|&&s| s == stage).count() as f64 / 10_000.0;
        assert!((0.18..=0.22).contains(&freq), "stage {stage}: {freq}");
    }
    assert_eq!(draws, draw(11));
}

/// Textbook Adam on one scalar.
fn reference_adam(w0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut w) = (0.0, 0.0, w0);
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);
        out.push(w);
    }
    out
}

#[test]
fn adam_matches_reference_on_a_scalar() {
    let grads = [0.5, -1.2, 0.3, 2.0, -0.7, 0.01, 0.9, -0.4, 1.5, -2.2];
    let expected = reference_adam(0.25, &grads, 0.01);
    let mut store32 = ParamStore::<f32>::new();
    let mut store64 = ParamStore::<f64>::new();
    let id32 = store32.insert("w", Tensor::scalar(0.25)).unwrap();
    let id64 = store64.insert("w", Tensor::scalar(0.25)).unwrap();
    let mut adam32 = Adam::new(AdamConfig::default());
    let mut adam64 = Adam::new(AdamConfig::default());
    for (g, want) in grads.iter().zip(&expected) {
        store32.get_mut(id32).grad = Some(Tensor::scalar(*g as f32));
        store64.get_mut(id64).grad = Some(Tensor::scalar(*g));
        adam32.step(&mut store32, 0.01).unwrap();
        adam64.step(&mut store64, 0.01).unwrap();
        assert!((store64.value(id64).item().unwrap() - want).abs() < 1e-12);
        assert!((store32.value(id32).item().unwrap() as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn adam_skips_parameters_without_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.insert("a", Tensor::scalar(1.0)).unwrap();
    let b = store.insert("b", Tensor::scalar(1.0)).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    store.get_mut(a).grad = Some(Tensor::scalar(1.0));
    adam.step(&mut store, 0.1).unwrap();
    assert!(store.value(a).item().unwrap() < 1.0);
    assert_eq!(store.value(b).item().unwrap(), 1.0);
    assert!(adam.moments(b).is_none());
}

fn toy_batch(model: &CascadeModel, n: usize) -> (TokenBatch, Vec<usize>) {
    let groups = toy_groups(n, 5);
    let index: Vec<(usize, usize)> = (0..n).flat_map(|g| (0..4).map(move |e| (g, e))).collect();
    assemble(model, &groups, &index).unwrap()
}

#[test]
fn one_step_touches_one_head_and_reaches_embeddings() {
    for stage in 0..5 {
        let mut model = tiny_model(1);
        let before = model.clone();
        let (batch, labels) = toy_batch(&model, 4);
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(&cfg, 5);
        let report = train_step(&mut model, &batch, &labels, stage, &mut state, &schedule(0, 100)).unwrap();
        assert!(report.loss.is_finite());
        assert!(report.embedding_grad_norm > 0.0);
        assert_eq!(state.update, 1);

        let tokens = model.encoder().tokens;
        let emb_grad = model.store().get(tokens).grad.as_ref().unwrap();
        let d = model.encoder_config().d_model;
        for &id in batch.ids() {
            let row = &emb_grad.data()[id as usize * d..(id as usize + 1) * d];
            assert!(row.iter().any(|&x| x != 0.0), "token {id}");
        }

        for (s, head) in model.heads().iter().enumerate() {
            for id in head.param_ids() {
                let same = model.store().value(id).data() == before.store().value(id).data();
                let grad = model.store().get(id).grad.as_ref();
                if s == stage {
                    assert!(!same, "stage {stage}: own head unchanged");
                    assert!(grad.unwrap().sum_squares() > 0.0);
                } else {
                    assert!(same, "stage {stage}: head {s} changed");
                    assert!(grad.is_none());
                }
            }
        }
    }
}

#[test]
fn empty_batch_is_usage_error() {
    let mut model = tiny_model(1);
    let (batch, _) = toy_batch(&model, 1);
    let mut state = TrainState::new(&TrainConfig::default(), 5);
    let res = train_step(&mut model, &batch, &[], 0, &mut state, &schedule(0, 10));
    assert!(matches!(res, Err(Error::Usage(_))));
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let mut model = tiny_model(2);
    let (batch, labels) = toy_batch(&model, 4);
    let cfg = TrainConfig {
        peak_lr: 1e-3,
        ..TrainConfig::default()
    };
    let sched = LrSchedule {
        peak: cfg.peak_lr,
        warmup: 0,
        total: 1000,
    };
    let mut state = TrainState::new(&cfg, 5);
    let losses: Vec<f64> = (0..50)
        .map(|_| train_step(&mut model, &batch, &labels, 4, &mut state, &sched).unwrap().loss)
        .collect();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

fn short_run(seed: u64) -> (Vec<EpochRecord>, CascadeModel) {
    let groups = toy_groups(12, 9);
    let (train_g, dev_g) = groups.split_at(9);
    let mut model = tiny_model(seed);
    let cfg = TrainConfig {
        peak_lr: 2e-3,
        warmup_updates: 5,
        batch_size: 8,
        epochs: 3,
        seed,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg, 5);
    let mut seen = Vec::new();
    let out = train(train_g, dev_g, &mut model, &cfg, &mut state, &mut |rec, _, _, best| {
        seen.push((rec.epoch, best));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen[0].1);
    assert_eq!(state.update, 3 * 9);
    assert!(out.best_epoch >= 1 && out.best_epoch <= 3);
    (out.epochs, out.best_model)
}

#[test]
fn training_is_deterministic_under_seed() {
    let (a, ma) = short_run(3);
    let (b, mb) = short_run(3);
    assert_eq!(a, b);
    for ((_, p), (_, q)) in ma.store().iter().zip(mb.store().iter()) {
        assert_eq!(p.value.data(), q.value.data());
    }
    let rec = &a[0];
    assert_eq!(rec.dev.len(), 5);
    assert_eq!(rec.log_line().split('\t').count(), 3 + 5 * 4);
    assert_eq!(EpochRecord::log_header(5).split('\t').count(), 3 + 5 * 4);
}

#[test]
fn no_positive_labels_is_data_error() {
    let mut groups = toy_groups(4, 1);
    for g in &mut groups {
        for e in &mut g.examples {
            e.label = 0;
        }
    }
    let mut model = tiny_model(1);
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(&cfg, 5);
    let res = train(&groups, &groups, &mut model, &cfg, &mut state, &mut |_, _, _, _| Ok(()));
    assert!(matches!(res, Err(Error::Data(_))));
}

#[test]
fn token_budget_batches_respect_budget() {
    let groups = toy_groups(5, 2);
    let cfg = TrainConfig {
        batch_token_budget: Some(60),
        ..TrainConfig::default()
    };
    let batches = make_batches(&groups, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let total: usize = batches.iter().map(Vec::len).sum();
    assert_eq!(total, 40);
    // Sequences are 12 tokens long: 5 per batch.
    assert!(batches.iter().all(|b| b.len() * 12 <= 60));
    assert_eq!(batches.len(), 8);
}
