//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cascade_core::cascade::CascadeModel;
use cascade_core::cost::{
    average_batch_size, max_feasible_batch, relative_cost_cascade, relative_cost_monolithic, relative_cost_sequential,
    throughput_gain, CostReport,
};
use cascade_core::data::{generate_synthetic, read_tsv, split, write_tsv, DatasetStats, QuestionGroup};
use cascade_core::evaluate::{evaluate_cascade, evaluate_monolithic, evaluate_sequential, grid_search, EvalReport, GridRecord};
use cascade_core::metrics::MetricSummary;
use cascade_core::ranker::cascade_infer;
use cascade_core::trainer::{train, EpochRecord, TrainState};
use cascade_core::{Error, Result};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cascade", version, about = "Cascaded transformer reranking experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Override one configuration key (`key=value`); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct Schedule {
    /// Drop ratio; give once for a uniform schedule or once per pruning stage.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Vec<f64>,
    /// Nominal candidates per question for analytic cost figures.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and split it into train/dev/test.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a cascade and keep the checkpoint with the best final-stage dev MAP.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank a dataset and report metrics with relative cost.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: Schedule,
        /// One checkpoint, or one per stage for `sr`.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// `cascade`, `sr`, `monolithic-L` or `monolithic` with `--layers`.
        #[arg(long, default_value = "cascade")]
        mode: String,
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Print the pruned ranking of every question.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Analytic cost of a drop schedule; needs no model.
    Cost {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: Schedule,
        /// Memory ceiling in examples per layer.
        #[arg(long)]
        ceiling: Option<usize>,
        /// Cost of a monolithic model of this depth instead.
        #[arg(long)]
        layers: Option<usize>,
        /// `cascade` or `sr`.
        #[arg(long, default_value = "cascade")]
        mode: String,
        /// Explicit per-stage sizes to assess alongside the computed ones.
        #[arg(long, value_delimiter = ',')]
        stage_sizes: Vec<usize>,
    },
    /// Evaluate every drop-ratio combination on a dev set.
    GridSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Values tried on every axis.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6")]
        grid: Vec<f64>,
    },
}

fn resolve(common: &Common, schedule: Option<&Schedule>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(s) = schedule {
        if !s.alpha.is_empty() {
            let list: Vec<String> = s.alpha.iter().map(ToString::to_string).collect();
            cfg.set("eval.alpha", &list.join(","))?;
        }
        if let Some(b) = s.batch {
            cfg.set("eval.batch", &b.to_string())?;
        }
    }
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out_dir.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_data(path: &Path) -> Result<Vec<QuestionGroup>> {
    if !path.exists() {
        return Err(Error::Usage(format!("data file {} does not exist", path.display())));
    }
    read_tsv(path)
}

/// Run one subcommand, returning what it prints.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            train,
            dev,
            resume,
        } => train_cmd(&common, &train, &dev, resume.as_deref()),
        Command::Evaluate {
            common,
            schedule,
            checkpoint,
            data,
            mode,
            layers,
        } => evaluate_cmd(&common, &schedule, &checkpoint, &data, &mode, layers),
        Command::Infer {
            common,
            schedule,
            checkpoint,
            data,
        } => infer_cmd(&common, &schedule, &checkpoint, &data),
        Command::Cost {
            common,
            schedule,
            ceiling,
            layers,
            mode,
            stage_sizes,
        } => cost_cmd(&common, &schedule, ceiling, layers, &mode, &stage_sizes),
        Command::GridSearch {
            common,
            checkpoint,
            data,
            grid,
        } => grid_cmd(&common, &checkpoint, &data, &grid),
    }
}

fn gen_data(common: &Common) -> Result<String> {
    let cfg = resolve(common, None)?;
    let synth = cfg.synthetic()?;
    let fractions = cfg.split_fractions()?;
    let groups = generate_synthetic(&synth)?;
    let splits = split(&groups, fractions, synth.seed)?;
    let dir = out_dir(common, "data");
    cfg.write_to(&dir)?;
    let mut out = String::new();
    for (name, part) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        let path = dir.join(format!("{name}.tsv"));
        write_tsv(&path, part)?;
        let s = DatasetStats::of(part);
        writeln!(
            out,
            "{}\t{} questions\t{} examples\t{:.2} positives per question",
            path.display(),
            s.questions,
            s.examples,
            s.mean_positives
        )
        .unwrap();
    }
    Ok(out)
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.tsv";

fn train_cmd(common: &Common, train_path: &Path, dev_path: &Path, resume: Option<&Path>) -> Result<String> {
    let cfg = resolve(common, None)?;
    let tcfg = cfg.train()?;
    let train_groups = load_data(train_path)?;
    let dev_groups = load_data(dev_path)?;
    let (mut model, mut state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let n = ck.model.n_stages();
            (ck.model, TrainState::resume(&tcfg, n, ck.updates as usize))
        }
        None => {
            let model = CascadeModel::new(cfg.encoder()?, cfg.cascade()?, cfg.seed()?)?;
            let n = model.n_stages();
            (model, TrainState::new(&tcfg, n))
        }
    };
    let dir = out_dir(common, "run");
    cfg.write_to(&dir)?;
    let n_stages = model.n_stages();
    let mut log = EpochRecord::log_header(n_stages) + "\n";
    std::fs::write(dir.join(TRAIN_LOG), &log)?;
    let seed = tcfg.seed;
    let outcome = train(&train_groups, &dev_groups, &mut model, &tcfg, &mut state, &mut |rec, m, st, best| {
        log.push_str(&rec.log_line());
        log.push('\n');
        std::fs::write(dir.join(TRAIN_LOG), &log)?;
        eprintln!("{}{}", rec.log_line(), if best { "\t*" } else { "" });
        if best {
            Checkpoint::new(m.clone(), seed, st.update as u64).save(dir.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    })?;
    Checkpoint::new(model, seed, state.update as u64).save(dir.join(LAST_CHECKPOINT))?;
    let best = &outcome.epochs[outcome.best_epoch - 1];
    let last = best.dev.last().expect("at least one stage");
    Ok(format!(
        "best epoch {} (update {}): final-stage dev MAP {:.4} P@1 {:.4}\ncheckpoint {}\n",
        outcome.best_epoch,
        outcome.best_update,
        last.map,
        last.p_at_1,
        dir.join(BEST_CHECKPOINT).display()
    ))
}

fn report_lines(mode: &str, alphas: &[f64], report: &EvalReport, nominal: Option<(usize, &CostReport)>) -> String {
    let m: &MetricSummary = &report.metrics;
    let mut out = String::new();
    let alpha: Vec<String> = alphas.iter().map(ToString::to_string).collect();
    let mut line = |k: &str, v: String| writeln!(out, "{k}\t{v}").unwrap();
    line("mode", mode.to_string());
    line("alpha", alpha.join(","));
    line("MAP", format!("{:.6}", m.map));
    line("nDCG@10", format!("{:.6}", m.ndcg_at_10));
    line("P@1", format!("{:.6}", m.p_at_1));
    line("MRR", format!("{:.6}", m.mrr));
    line("questions", m.evaluated.to_string());
    line("skipped", m.skipped.to_string());
    line("measured_relative_cost", format!("{:.6}", report.relative_cost));
    if let Some((b0, cost)) = nominal {
        line("nominal_batch", b0.to_string());
        line("relative_cost", format!("{:.6}", cost.relative_cost));
        line("cost_change_percent", format!("{:+.1}", cost.change_percent()));
    }
    out
}

fn parse_mode(mode: &str, layers: Option<usize>) -> Result<(&'static str, Option<usize>)> {
    match mode {
        "cascade" => Ok(("cascade", None)),
        "sr" => Ok(("sr", None)),
        "monolithic" => layers
            .map(|l| ("monolithic", Some(l)))
            .ok_or_else(|| Error::Usage("monolithic mode needs --layers".into())),
        m => match m.strip_prefix("monolithic-").map(str::parse::<usize>) {
            Some(Ok(l)) => Ok(("monolithic", Some(l))),
            _ => Err(Error::Usage(format!(
                "unknown mode {m:?}; expected cascade, sr or monolithic-L"
            ))),
        },
    }
}

fn evaluate_cmd(
    common: &Common,
    schedule: &Schedule,
    checkpoints: &[PathBuf],
    data: &Path,
    mode: &str,
    layers: Option<usize>,
) -> Result<String> {
    let cfg = resolve(common, Some(schedule))?;
    let (mode, layers) = parse_mode(mode, layers)?;
    let b0 = cfg.eval_batch()?;
    let expected = if mode == "sr" { cfg.cascade()?.n_stages() } else { 1 };
    if checkpoints.len() != expected {
        return Err(Error::Usage(format!(
            "mode {mode} needs {expected} checkpoint(s), got {}",
            checkpoints.len()
        )));
    }
    let groups = load_data(data)?;
    let models = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| c.model))
        .collect::<Result<Vec<_>>>()?;
    let (text, label) = match mode {
        "cascade" => {
            let model = &models[0];
            let sched = cfg.drop_schedule(model.n_stages())?;
            let report = evaluate_cascade(model, &groups, &sched)?;
            let nominal = relative_cost_cascade(b0, &sched, &model.config().layer_schedule)?;
            (report_lines(mode, sched.ratios(), &report, Some((b0, &nominal))), "cascade".to_string())
        }
        "sr" => {
            let rho: Vec<usize> = models.iter().map(CascadeModel::n_layers).collect();
            let sched = cfg.drop_schedule(models.len())?;
            let report = evaluate_sequential(&models, &groups, &sched, &rho)?;
            let nominal = relative_cost_sequential(b0, &sched, &rho)?;
            (report_lines(mode, sched.ratios(), &report, Some((b0, &nominal))), "sr".to_string())
        }
        _ => {
            let l = layers.expect("monolithic depth");
            let model = &models[0];
            let report = evaluate_monolithic(model, &groups, l)?;
            let rel = relative_cost_monolithic(l, model.n_layers())?;
            let nominal = CostReport::from_layer_sizes(
                (0..model.n_layers()).map(|j| if j < l { b0 } else { 0 }).collect(),
                vec![b0],
                b0,
            );
            debug_assert!((nominal.relative_cost - rel).abs() < 1e-12);
            let label = format!("monolithic-{l}");
            (report_lines(&label, &[], &report, Some((b0, &nominal))), label)
        }
    };
    if let Some(dir) = &common.out_dir {
        cfg.write_to(dir)?;
        std::fs::write(dir.join(format!("eval_{label}.tsv")), &text)?;
    }
    Ok(text)
}

fn infer_cmd(common: &Common, schedule: &Schedule, checkpoint: &Path, data: &Path) -> Result<String> {
    let cfg = resolve(common, Some(schedule))?;
    let model = Checkpoint::load(checkpoint)?.model;
    let sched = cfg.drop_schedule(model.n_stages())?;
    let groups = load_data(data)?;
    let mut out = String::from("question_id\trank\tcandidate\tlabel\tlast_stage\tscore\n");
    for g in &groups {
        let outcome = cascade_infer(&g.sequences(), &model, &sched)?;
        // Stage at which each candidate was last scored, and that score.
        let mut last = vec![(0usize, 0.0f64); g.len()];
        for (s, rec) in outcome.trace.stages.iter().enumerate() {
            for (&id, &score) in rec.candidates.iter().zip(&rec.scores) {
                last[id] = (s + 1, score);
            }
        }
        for (rank, &id) in outcome.ranking.iter().enumerate() {
            let (stage, score) = last[id];
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.6}",
                g.question_id,
                rank + 1,
                id,
                g.examples[id].label,
                stage,
                score
            )
            .unwrap();
        }
    }
    if let Some(dir) = &common.out_dir {
        cfg.write_to(dir)?;
        std::fs::write(dir.join("rankings.tsv"), &out)?;
    }
    Ok(out)
}

fn sizes_line(sizes: &[usize]) -> String {
    sizes.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn cost_cmd(
    common: &Common,
    schedule: &Schedule,
    ceiling: Option<usize>,
    layers: Option<usize>,
    mode: &str,
    stage_sizes: &[usize],
) -> Result<String> {
    let cfg = resolve(common, Some(schedule))?;
    let enc = cfg.encoder()?;
    let cascade = cfg.cascade()?;
    let rho = &cascade.layer_schedule;
    let l_full = enc.n_layers;
    let b0 = cfg.eval_batch()?;
    let mut out = String::new();
    let mut line = |k: &str, v: String| writeln!(out, "{k}\t{v}").unwrap();

    if let Some(l) = layers {
        let rel = relative_cost_monolithic(l, l_full)?;
        line("mode", format!("monolithic-{l}"));
        line("relative_cost", format!("{rel:.6}"));
        line("cost_change_percent", format!("{:+.1}", (rel - 1.0) * 100.0));
        return Ok(out);
    }
    let sched = cfg.drop_schedule(cascade.n_stages())?;
    let report = match mode {
        "cascade" => relative_cost_cascade(b0, &sched, rho)?,
        "sr" => relative_cost_sequential(b0, &sched, rho)?,
        m => return Err(Error::Usage(format!("unknown cost mode {m:?}; expected cascade or sr"))),
    };
    line("mode", mode.to_string());
    line("alpha", join_f64(sched.ratios()));
    line("batch", b0.to_string());
    line("stage_sizes", sizes_line(&report.stage_sizes));
    line("layer_batch_sizes", sizes_line(&report.layer_batch_sizes));
    line("relative_cost", format!("{:.6}", report.relative_cost));
    line("cost_change_percent", format!("{:+.1}", report.change_percent()));
    line("average_batch_size", format!("{:.2}", report.average_batch_size));
    if let Some(c) = ceiling.or(cfg.ceiling()?) {
        line("ceiling", c.to_string());
        line("fits_ceiling", (report.average_batch_size <= c as f64).to_string());
        if mode == "cascade" {
            let (best, gain) = max_feasible_batch(c, &sched, rho)?;
            line("max_feasible_batch", best.to_string());
            line("throughput_gain", format!("{gain:.4}"));
        }
    }
    if !stage_sizes.is_empty() {
        if stage_sizes.len() != rho.len() {
            return Err(Error::Usage(format!(
                "--stage-sizes needs {} values, got {}",
                rho.len(),
                stage_sizes.len()
            )));
        }
        let avg = average_batch_size(stage_sizes, rho);
        line("given_stage_sizes", sizes_line(stage_sizes));
        line("given_average_batch_size", format!("{avg:.2}"));
        if let Some(c) = ceiling.or(cfg.ceiling()?) {
            line("given_fits_ceiling", (avg <= c as f64).to_string());
            line("given_throughput_gain", format!("{:.4}", throughput_gain(stage_sizes[0], c)));
        }
    }
    Ok(out)
}

fn join_f64(ratios: &[f64]) -> String {
    ratios.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn grid_cmd(common: &Common, checkpoint: &Path, data: &Path, values: &[f64]) -> Result<String> {
    let cfg = resolve(common, None)?;
    let model = Checkpoint::load(checkpoint)?.model;
    let groups = load_data(data)?;
    let grid = vec![values.to_vec(); model.n_stages() - 1];
    let records = grid_search(&model, &groups, &grid)?;
    let mut out = GridRecord::header(model.n_stages() - 1) + "\n";
    for r in &records {
        out.push_str(&r.line());
        out.push('\n');
    }
    let dir = out_dir(common, "grid");
    cfg.write_to(&dir)?;
    std::fs::write(dir.join("grid.tsv"), &out)?;
    Ok(format!("{} configurations written to {}\n", records.len(), dir.join("grid.tsv").display()))
}
