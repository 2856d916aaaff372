use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
encoder.d_model = 16
encoder.n_heads = 2
encoder.d_ff = 32
cascade.head_hidden = 16
data.n_questions = 20
data.cands_per_q = 8
data.positives_per_q = 2
train.epochs = 2
train.warmup_updates = 2
train.batch_size = 16
";

fn cascade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cascade(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    cascade(args).status.code().expect("exit code")
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn conf(&self) -> PathBuf {
        self.path("tiny.conf")
    }

    fn gen(&self) -> PathBuf {
        let data = self.path("data");
        ok(&["gen-data", "--config", s(&self.conf()), "--out-dir", s(&data)]);
        data
    }

    fn train(&self, run: &str) -> PathBuf {
        let data = self.gen();
        let out = self.path(run);
        ok(&[
            "train",
            "--config",
            s(&self.conf()),
            "--train",
            s(&data.join("train.tsv")),
            "--dev",
            s(&data.join("dev.tsv")),
            "--out-dir",
            s(&out),
        ]);
        out
    }
}

#[test]
fn gen_data_writes_splits_and_config_deterministically() {
    let f = Fixture::new();
    let a = f.gen();
    for name in ["train.tsv", "dev.tsv", "test.tsv", "config.txt"] {
        assert!(a.join(name).exists(), "{name}");
    }
    let b = f.path("again");
    ok(&["gen-data", "--config", s(&f.conf()), "--out-dir", s(&b)]);
    for name in ["train.tsv", "dev.tsv", "test.tsv", "config.txt"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = f.path("other");
    ok(&["gen-data", "--config", s(&f.conf()), "--seed", "99", "--out-dir", s(&c)]);
    assert_ne!(std::fs::read(a.join("train.tsv")).unwrap(), std::fs::read(c.join("train.tsv")).unwrap());
    let config = std::fs::read_to_string(c.join("config.txt")).unwrap();
    assert!(config.contains("seed = 99\n"));
    assert!(config.contains("data.n_questions = 20\n"));
}

#[test]
fn default_gen_data_matches_requested_shape() {
    let f = Fixture::new();
    let out = ok(&["gen-data", "--out-dir", s(&f.path("full"))]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("160 questions\t5120 examples"), "{out}");
    assert!(lines[1].contains("20 questions"));
    assert!(lines[2].contains("20 questions"));
}

#[test]
fn invalid_fractions_exit_2() {
    let f = Fixture::new();
    let out = cascade(&["gen-data", "--set", "data.split=0.5,0.6,0.1", "--out-dir", s(&f.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fraction"));
    assert_eq!(code(&["gen-data", "--set", "no.such=1", "--out-dir", s(&f.path("y"))]), 2);
}

#[test]
fn cost_worked_example() {
    let out = ok(&[
        "cost",
        "--alpha",
        "0.3",
        "--batch",
        "128",
        "--ceiling",
        "84",
        "--stage-sizes",
        "128,90,63,44,28",
    ]);
    assert_eq!(field(&out, "stage_sizes"), "128,90,63,45,32");
    assert_eq!(field(&out, "average_batch_size"), "81.00");
    assert_eq!(field(&out, "fits_ceiling"), "true");
    assert_eq!(field(&out, "given_average_batch_size"), "80.17");
    let gain: f64 = field(&out, "given_throughput_gain").parse().unwrap();
    assert!((gain - 128.0 / 84.0).abs() < 1e-4);
    assert_eq!(field(&out, "max_feasible_batch").parse::<usize>().unwrap() >= 128, true);
}

#[test]
fn cost_zero_alpha_and_monolithic() {
    let out = ok(&["cost", "--alpha", "0"]);
    assert_eq!(field(&out, "relative_cost"), "1.000000");
    let out = ok(&["cost", "--layers", "6"]);
    assert_eq!(field(&out, "cost_change_percent"), "-50.0");
    let out = ok(&["cost", "--alpha", "0.5", "--mode", "sr"]);
    assert_eq!(field(&out, "relative_cost"), format!("{:.6}", 1408.0 / 1536.0));
    assert_eq!(code(&["cost", "--alpha", "1.2"]), 2);
    assert_eq!(code(&["cost", "--alpha", "0.3", "--mode", "weird"]), 2);
}

#[test]
fn train_writes_log_checkpoints_and_resumes() {
    let f = Fixture::new();
    let run = f.train("run");
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3, "{log}");
    for l in &lines {
        assert_eq!(l.split('\t').count(), 3 + 5 * 4);
    }
    assert!(lines[0].starts_with("epoch\tupdates\ttrain_loss\tstage1_MAP"));
    assert!(run.join("best.ckpt").exists() && run.join("last.ckpt").exists());
    assert!(run.join("config.txt").exists());
    // 16 training questions × 8 candidates in batches of 16.
    let updates_after_first: usize = lines[2].split('\t').nth(1).unwrap().parse().unwrap();
    assert_eq!(updates_after_first, 16);

    let data = f.path("data");
    let resumed = f.path("resumed");
    ok(&[
        "train",
        "--config",
        s(&f.conf()),
        "--train",
        s(&data.join("train.tsv")),
        "--dev",
        s(&data.join("dev.tsv")),
        "--resume",
        s(&run.join("last.ckpt")),
        "--out-dir",
        s(&resumed),
    ]);
    let log = std::fs::read_to_string(resumed.join("train_log.tsv")).unwrap();
    let first: usize = log.lines().nth(1).unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert_eq!(first, 16 + 8);

    // Reruns are byte-identical.
    let again = f.train("run2");
    for name in ["train_log.tsv", "best.ckpt", "last.ckpt"] {
        assert_eq!(std::fs::read(run.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn train_missing_data_exit_2() {
    let f = Fixture::new();
    let missing = f.path("nope.tsv");
    assert_eq!(code(&["train", "--train", s(&missing), "--dev", s(&missing)]), 2);
}

#[test]
fn evaluate_modes_and_errors() {
    let f = Fixture::new();
    let run = f.train("run");
    let ck = run.join("best.ckpt");
    let dev = f.path("data").join("dev.tsv");
    let eval = |extra: &[&str]| {
        let mut args = vec!["evaluate", "--checkpoint", s(&ck), "--data", s(&dev)];
        args.extend_from_slice(extra);
        ok(&args)
    };
    let cascade0 = eval(&["--alpha", "0"]);
    let mono = eval(&["--mode", "monolithic-12"]);
    for key in ["MAP", "nDCG@10", "P@1", "MRR"] {
        assert_eq!(field(&cascade0, key), field(&mono, key), "{key}");
    }
    let half = eval(&["--alpha", "0.5", "--batch", "128"]);
    assert_eq!(field(&half, "cost_change_percent"), "-51.0");
    let six = eval(&["--mode", "monolithic", "--layers", "6"]);
    assert_eq!(field(&six, "cost_change_percent"), "-50.0");

    let bad = |extra: &[&str]| {
        let mut args = vec!["evaluate", "--checkpoint", s(&ck), "--data", s(&dev)];
        args.extend_from_slice(extra);
        code(&args)
    };
    assert_eq!(bad(&["--alpha", "1.0"]), 2);
    assert_eq!(bad(&["--alpha", "-0.1"]), 2);
    assert_eq!(bad(&["--mode", "sr"]), 2);
    assert_eq!(bad(&["--mode", "monolithic-5"]), 2);
}

#[test]
fn evaluate_sequential_reranker() {
    let f = Fixture::new();
    let data = f.gen();
    let mut cks = Vec::new();
    for depth in [4, 6, 8, 10, 12] {
        let out = f.path(&format!("sr{depth}"));
        ok(&[
            "train",
            "--config",
            s(&f.conf()),
            "--set",
            &format!("encoder.n_layers={depth}"),
            "--set",
            &format!("cascade.layer_schedule={depth}"),
            "--set",
            "train.epochs=1",
            "--train",
            s(&data.join("train.tsv")),
            "--dev",
            s(&data.join("dev.tsv")),
            "--out-dir",
            s(&out),
        ]);
        cks.push(out.join("best.ckpt"));
    }
    let mut args = vec!["evaluate", "--mode", "sr", "--alpha", "0.5", "--data"];
    let dev = data.join("dev.tsv");
    args.push(s(&dev));
    for c in &cks {
        args.push("--checkpoint");
        args.push(s(c));
    }
    let out = ok(&args);
    assert_eq!(field(&out, "mode"), "sr");
    assert_eq!(field(&out, "relative_cost"), format!("{:.6}", 1408.0 / 1536.0));
    let mut short = args.clone();
    short.truncate(args.len() - 2);
    assert_eq!(code(&short), 2);
}

#[test]
fn infer_lists_every_candidate() {
    let f = Fixture::new();
    let run = f.train("run");
    let dev = f.path("data").join("dev.tsv");
    let out = ok(&["infer", "--checkpoint", s(&run.join("best.ckpt")), "--data", s(&dev), "--alpha", "0.3"]);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 8);
    // With 8 candidates and α = 0.3: 8 → 6 → 5 → 4 → 3, so the top three reach stage 5.
    let stages: Vec<&str> = rows[..8].iter().map(|r| r.split('\t').nth(4).unwrap()).collect();
    assert_eq!(stages, ["5", "5", "5", "4", "3", "2", "1", "1"]);
}

#[test]
fn grid_search_default_grid() {
    let f = Fixture::new();
    let run = f.train("run");
    let ck = run.join("best.ckpt");
    let dev = f.path("data").join("dev.tsv");
    let out_dir = f.path("grid");
    ok(&["grid-search", "--checkpoint", s(&ck), "--data", s(&dev), "--out-dir", s(&out_dir)]);
    let text = std::fs::read_to_string(out_dir.join("grid.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 1296);
    let costs: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(costs.windows(2).all(|w| w[0] <= w[1]));

    for alpha in ["0.3", "0.4", "0.5"] {
        let a = format!("{:.2}", alpha.parse::<f64>().unwrap());
        let row = rows.iter().find(|r| r[..4].iter().all(|x| *x == a)).expect("uniform row");
        let eval = ok(&["evaluate", "--checkpoint", s(&ck), "--data", s(&dev), "--alpha", alpha]);
        assert_eq!(row[4], field(&eval, "measured_relative_cost"));
        assert_eq!(row[5], field(&eval, "MAP"));
        assert_eq!(row[6], field(&eval, "nDCG@10"));
        assert_eq!(row[7], field(&eval, "P@1"));
        assert_eq!(row[8], field(&eval, "MRR"));
    }
}
