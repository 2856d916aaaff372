//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use cascade_core::cascade::{CascadeConfig, Pooling};
use cascade_core::cost::DropSchedule;
use cascade_core::data::SyntheticConfig;
use cascade_core::encoder::EncoderConfig;
use cascade_core::trainer::{AdamConfig, TrainConfig};
use cascade_core::{Error, Result};

pub const CONFIG_FILE: &str = "config.txt";

/// Every setting a command can read, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|s| parse_value(key, s)).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        let enc = EncoderConfig::default();
        let cascade = CascadeConfig::default();
        let train = TrainConfig::default();
        let mut v = BTreeMap::new();
        let mut put = |k: &str, val: String| {
            v.insert(k.to_string(), val);
        };
        put("seed", data.seed.to_string());

        put("data.n_questions", data.n_questions.to_string());
        put("data.cands_per_q", data.cands_per_q.to_string());
        put("data.positives_per_q", data.positives_per_q.to_string());
        put("data.vocab_size", data.vocab_size.to_string());
        put("data.noise", data.noise.to_string());
        put("data.n_topics", data.n_topics.to_string());
        put("data.topic_size", data.topic_size.to_string());
        put("data.question_len", data.question_len.to_string());
        put("data.candidate_len", data.candidate_len.to_string());
        put("data.overlap_threshold", data.overlap_threshold.to_string());
        put("data.split", "0.8,0.1,0.1".into());

        put("encoder.n_layers", enc.n_layers.to_string());
        put("encoder.d_model", enc.d_model.to_string());
        put("encoder.n_heads", enc.n_heads.to_string());
        put("encoder.d_ff", enc.d_ff.to_string());
        put("encoder.max_seq_len", enc.max_seq_len.to_string());
        put("encoder.vocab_size", enc.vocab_size.to_string());
        put("encoder.dropout_rate", enc.dropout_rate.to_string());
        put("encoder.layer_norm_eps", enc.layer_norm_eps.to_string());

        put("cascade.layer_schedule", join(&cascade.layer_schedule));
        put("cascade.head_hidden", cascade.head_hidden.to_string());
        put("cascade.head_depth", cascade.head_depth.to_string());
        put("cascade.final_pooling", cascade.final_pooling.name().into());

        put("train.peak_lr", train.peak_lr.to_string());
        put("train.warmup_updates", train.warmup_updates.to_string());
        put("train.total_updates", train.total_updates.unwrap_or(0).to_string());
        put("train.batch_size", train.batch_size.to_string());
        put("train.batch_token_budget", train.batch_token_budget.unwrap_or(0).to_string());
        put("train.adam_beta1", train.adam.beta1.to_string());
        put("train.adam_beta2", train.adam.beta2.to_string());
        put("train.adam_eps", train.adam.eps.to_string());
        put("train.epochs", train.epochs.to_string());

        put("eval.alpha", "0".into());
        put("eval.batch", "128".into());
        put("eval.ceiling", "0".into());
        RunConfig { values: v }
    }
}

impl RunConfig {
    /// Defaults overlaid with a config file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.merge_text(&text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        parse_value(key, self.get(key))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        parse_list(key, self.get(key))
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Only the lines under `prefix.`.
    pub fn section_text(&self, prefix: &str) -> String {
        let p = format!("{prefix}.");
        self.values
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Write the resolved configuration into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        std::fs::write(dir.as_ref().join(CONFIG_FILE), self.to_text())?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig> {
        let cfg = SyntheticConfig {
            n_questions: self.parse("data.n_questions")?,
            cands_per_q: self.parse("data.cands_per_q")?,
            positives_per_q: self.parse("data.positives_per_q")?,
            vocab_size: self.parse("data.vocab_size")?,
            noise: self.parse("data.noise")?,
            seed: self.seed()?,
            n_topics: self.parse("data.n_topics")?,
            topic_size: self.parse("data.topic_size")?,
            question_len: self.parse("data.question_len")?,
            candidate_len: self.parse("data.candidate_len")?,
            overlap_threshold: self.parse("data.overlap_threshold")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_fractions(&self) -> Result<[f64; 3]> {
        let f: Vec<f64> = self.list("data.split")?;
        f.try_into()
            .map_err(|_| Error::Config("data.split needs three fractions".into()))
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            n_layers: self.parse("encoder.n_layers")?,
            d_model: self.parse("encoder.d_model")?,
            n_heads: self.parse("encoder.n_heads")?,
            d_ff: self.parse("encoder.d_ff")?,
            max_seq_len: self.parse("encoder.max_seq_len")?,
            vocab_size: self.parse("encoder.vocab_size")?,
            dropout_rate: self.parse("encoder.dropout_rate")?,
            layer_norm_eps: self.parse("encoder.layer_norm_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cascade(&self) -> Result<CascadeConfig> {
        let cfg = CascadeConfig {
            layer_schedule: self.list("cascade.layer_schedule")?,
            head_hidden: self.parse("cascade.head_hidden")?,
            head_depth: self.parse("cascade.head_depth")?,
            final_pooling: Pooling::parse(self.get("cascade.final_pooling"))?,
        };
        cfg.validate(&self.encoder()?)?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let nonzero = |v: usize| (v > 0).then_some(v);
        let cfg = TrainConfig {
            peak_lr: self.parse("train.peak_lr")?,
            warmup_updates: self.parse("train.warmup_updates")?,
            total_updates: nonzero(self.parse("train.total_updates")?),
            batch_size: self.parse("train.batch_size")?,
            batch_token_budget: nonzero(self.parse("train.batch_token_budget")?),
            adam: AdamConfig {
                beta1: self.parse("train.adam_beta1")?,
                beta2: self.parse("train.adam_beta2")?,
                eps: self.parse("train.adam_eps")?,
            },
            seed: self.seed()?,
            epochs: self.parse("train.epochs")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One ratio broadcasts to every pruning stage; otherwise one per stage.
    pub fn drop_schedule(&self, n_stages: usize) -> Result<DropSchedule> {
        let alphas: Vec<f64> = self.list("eval.alpha")?;
        match alphas.as_slice() {
            [a] => DropSchedule::uniform(*a, n_stages),
            _ if alphas.len() + 1 == n_stages => DropSchedule::new(alphas),
            _ => Err(Error::Config(format!(
                "{} drop ratios given for {} stages",
                alphas.len(),
                n_stages
            ))),
        }
    }

    /// Nominal group size for analytic cost figures.
    pub fn eval_batch(&self) -> Result<usize> {
        let b: usize = self.parse("eval.batch")?;
        if b == 0 {
            return Err(Error::Config("eval.batch must be positive".into()));
        }
        Ok(b)
    }

    pub fn ceiling(&self) -> Result<Option<usize>> {
        let c: usize = self.parse("eval.ceiling")?;
        Ok((c > 0).then_some(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_valid_configs() {
        let c = RunConfig::default();
        assert_eq!(c.encoder().unwrap(), EncoderConfig::default());
        assert_eq!(c.cascade().unwrap(), CascadeConfig::default());
        assert_eq!(c.synthetic().unwrap(), SyntheticConfig::default());
        let t = c.train().unwrap();
        assert_eq!(t, TrainConfig { seed: 17, ..TrainConfig::default() });
        assert_eq!(c.split_fractions().unwrap(), [0.8, 0.1, 0.1]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("train.peak_lr", "0.00015").unwrap();
        c.set("cascade.layer_schedule", "2,4").unwrap();
        let mut d = RunConfig::default();
        d.merge_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn comments_and_errors() {
        let mut c = RunConfig::default();
        c.merge_text("# comment\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(c.seed().unwrap(), 5);
        assert!(matches!(c.merge_text("nonsense"), Err(Error::Config(_))));
        assert!(matches!(c.set("no.such.key", "1"), Err(Error::Config(_))));
        c.set("encoder.d_model", "abc").unwrap();
        assert!(matches!(c.encoder(), Err(Error::Config(_))));
    }

    #[test]
    fn alpha_broadcasts_or_lists() {
        let mut c = RunConfig::default();
        c.set("eval.alpha", "0.3").unwrap();
        assert_eq!(c.drop_schedule(5).unwrap().ratios(), [0.3; 4]);
        c.set("eval.alpha", "0.1,0.2,0.3,0.4").unwrap();
        assert_eq!(c.drop_schedule(5).unwrap().ratios(), [0.1, 0.2, 0.3, 0.4]);
        c.set("eval.alpha", "0.1,0.2").unwrap();
        assert!(matches!(c.drop_schedule(5), Err(Error::Config(_))));
        c.set("eval.alpha", "1.0").unwrap();
        assert!(matches!(c.drop_schedule(5), Err(Error::Config(_))));
    }
}
