//! Question-grouped ranking data: TSV I/O, splits and a synthetic generator.
//!
//! Row format: `question_id \t label \t question ids \t candidate ids`, token
//! ids separated by single spaces. Paths ending in `.gz` are gzip streams.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, TokenSequence, FIRST_REGULAR_ID};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingExample {
    pub question_id: String,
    pub question: Vec<u32>,
    pub candidate: Vec<u32>,
    pub label: u8,
}

impl RankingExample {
    pub fn sequence(&self) -> TokenSequence {
        TokenSequence::pair(&self.question, &self.candidate)
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// Candidates of one question; the unit of cascaded inference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionGroup {
    pub question_id: String,
    pub examples: Vec<RankingExample>,
}

impl QuestionGroup {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn n_positive(&self) -> usize {
        self.examples.iter().filter(|e| e.is_positive()).count()
    }

    pub fn sequences(&self) -> Vec<TokenSequence> {
        self.examples.iter().map(RankingExample::sequence).collect()
    }
}

/// Check ids and lengths against an encoder configuration.
pub fn validate_for(groups: &[QuestionGroup], config: &EncoderConfig) -> Result<()> {
    for g in groups {
        for e in &g.examples {
            let len = e.question.len() + e.candidate.len() + 2;
            if len > config.max_seq_len {
                return Err(Error::Data(format!(
                    "question {}: sequence length {len} exceeds max_seq_len {}",
                    g.question_id, config.max_seq_len
                )));
            }
            if let Some(bad) = e.question.iter().chain(&e.candidate).find(|&&t| t as usize >= config.vocab_size) {
                return Err(Error::Data(format!(
                    "question {}: token id {bad} outside vocab of {}",
                    g.question_id, config.vocab_size
                )));
            }
        }
    }
    Ok(())
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn parse_ids(field: &str, line: usize, what: &str) -> Result<Vec<u32>> {
    field
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad {what} token id {s:?}"),
            })
        })
        .collect()
}

/// Parse rows, grouping by question id in order of first appearance.
pub fn parse_tsv<R: BufRead>(reader: R) -> Result<Vec<QuestionGroup>> {
    let mut groups: Vec<QuestionGroup> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let label = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        };
        if fields[0].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty question id".into(),
            });
        }
        let example = RankingExample {
            question_id: fields[0].to_string(),
            question: parse_ids(fields[2], line_no, "question")?,
            candidate: parse_ids(fields[3], line_no, "candidate")?,
            label,
        };
        let slot = *index.entry(example.question_id.clone()).or_insert_with(|| {
            groups.push(QuestionGroup {
                question_id: example.question_id.clone(),
                examples: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].examples.push(example);
    }
    if groups.is_empty() {
        return Err(Error::Data("dataset contains no rows".into()));
    }
    Ok(groups)
}

pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<QuestionGroup>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_tsv(BufReader::new(reader))
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn format_tsv<W: Write>(groups: &[QuestionGroup], mut out: W) -> Result<()> {
    for g in groups {
        for e in &g.examples {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.question_id,
                e.label,
                join_ids(&e.question),
                join_ids(&e.candidate)
            )?;
        }
    }
    Ok(())
}

pub fn write_tsv(path: impl AsRef<Path>, groups: &[QuestionGroup]) -> Result<()> {
    let path = path.as_ref();
    let file = BufWriter::new(File::create(path)?);
    if is_gzip(path) {
        let mut gz = GzEncoder::new(file, Compression::default());
        format_tsv(groups, &mut gz)?;
        gz.finish()?.flush()?;
    } else {
        let mut file = file;
        format_tsv(groups, &mut file)?;
        file.flush()?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_questions: usize,
    pub cands_per_q: usize,
    pub positives_per_q: usize,
    pub vocab_size: usize,
    /// Probability that a filler token is uniform noise rather than a
    /// distractor-topic token.
    pub noise: f64,
    pub seed: u64,
    /// Disjoint topics shared by all questions.
    pub n_topics: usize,
    pub topic_size: usize,
    pub question_len: usize,
    pub candidate_len: usize,
    /// Minimum question tokens a positive candidate shares.
    pub overlap_threshold: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_questions: 200,
            cands_per_q: 32,
            positives_per_q: 4,
            vocab_size: 1024,
            noise: 0.1,
            seed: 17,
            n_topics: 6,
            topic_size: 4,
            question_len: 4,
            candidate_len: 6,
            overlap_threshold: 3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_questions == 0 || self.cands_per_q == 0 {
            return fail("n_questions and cands_per_q must be positive".into());
        }
        if self.positives_per_q > self.cands_per_q {
            return fail(format!(
                "positives_per_q {} exceeds cands_per_q {}",
                self.positives_per_q, self.cands_per_q
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return fail(format!("noise {} outside [0, 1]", self.noise));
        }
        if self.topic_size == 0 || self.question_len == 0 || self.question_len > self.topic_size {
            return fail("question_len must lie in 1..=topic_size".into());
        }
        if self.overlap_threshold == 0 || self.overlap_threshold > self.question_len {
            return fail("overlap_threshold must lie in 1..=question_len".into());
        }
        if self.candidate_len < self.question_len {
            return fail("candidate_len must be at least question_len".into());
        }
        if self.n_topics < 2 {
            return fail("n_topics must be at least 2".into());
        }
        let needed = FIRST_REGULAR_ID as usize + self.n_topics * self.topic_size;
        if self.vocab_size < needed {
            return fail(format!(
                "vocab_size {} too small for {} disjoint topics of {} (needs {needed})",
                self.vocab_size, self.n_topics, self.topic_size
            ));
        }
        Ok(())
    }

    fn topic_tokens(&self, topic: usize) -> std::ops::Range<u32> {
        let start = FIRST_REGULAR_ID as usize + topic * self.topic_size;
        start as u32..(start + self.topic_size) as u32
    }
}

/// Number of distinct question tokens that occur in the candidate.
pub fn overlap(question: &[u32], candidate: &[u32]) -> usize {
    let mut q: Vec<u32> = question.to_vec();
    q.sort_unstable();
    q.dedup();
    q.iter().filter(|t| candidate.contains(t)).count()
}

/// The generator's labelling rule.
pub fn synthetic_label(question: &[u32], candidate: &[u32], threshold: usize) -> u8 {
    u8::from(overlap(question, candidate) >= threshold)
}

/// Topic-overlap corpus: positives share at least `overlap_threshold`
/// question tokens, negatives fewer. Candidate order within a group is
/// shuffled.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<QuestionGroup>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_topics = cfg.n_topics;
    let regular = FIRST_REGULAR_ID..cfg.vocab_size as u32;
    let width = (cfg.n_questions.max(1) - 1).to_string().len().max(4);
    let mut groups = Vec::with_capacity(cfg.n_questions);
    for qi in 0..cfg.n_questions {
        let topic = rng.random_range(0..n_topics);
        let own = cfg.topic_tokens(topic);
        let topic_tokens: Vec<u32> = own.clone().collect();
        let question: Vec<u32> = topic_tokens.choose_multiple(&mut rng, cfg.question_len).copied().collect();
        let question_id = format!("q{qi:0width$}");

        let mut examples = Vec::with_capacity(cfg.cands_per_q);
        for ci in 0..cfg.cands_per_q {
            let positive = ci < cfg.positives_per_q;
            let shared = if positive {
                rng.random_range(cfg.overlap_threshold..=cfg.question_len)
            } else {
                rng.random_range(0..cfg.overlap_threshold)
            };
            let mut candidate: Vec<u32> = question.choose_multiple(&mut rng, shared).copied().collect();
            let distractor = loop {
                let t = rng.random_range(0..n_topics);
                if t != topic {
                    break t;
                }
            };
            let distractor_tokens: Vec<u32> = cfg.topic_tokens(distractor).collect();
            while candidate.len() < cfg.candidate_len {
                let token = if rng.random_bool(cfg.noise) {
                    loop {
                        let t = rng.random_range(regular.clone());
                        if !own.contains(&t) {
                            break t;
                        }
                    }
                } else {
                    *distractor_tokens.choose(&mut rng).expect("topic is non-empty")
                };
                candidate.push(token);
            }
            candidate.shuffle(&mut rng);
            examples.push(RankingExample {
                question_id: question_id.clone(),
                question: question.clone(),
                candidate,
                label: u8::from(positive),
            });
        }
        examples.shuffle(&mut rng);
        groups.push(QuestionGroup { question_id, examples });
    }
    Ok(groups)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<QuestionGroup>,
    pub dev: Vec<QuestionGroup>,
    pub test: Vec<QuestionGroup>,
}

/// Shuffle questions and cut them into train/dev/test by largest remainder.
pub fn split(groups: &[QuestionGroup], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n = groups.len();
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in by_remainder.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for (i, name) in ["train", "dev", "test"].iter().enumerate() {
        if fractions[i] > 0.0 && counts[i] == 0 {
            return Err(Error::Config(format!("{name} split receives zero of {n} questions")));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| -> Vec<QuestionGroup> {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| groups[i].clone()).collect()
    };
    let (a, b) = (counts[0], counts[0] + counts[1]);
    Ok(Splits {
        train: take(0..a),
        dev: take(a..b),
        test: take(b..n),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub questions: usize,
    pub examples: usize,
    pub mean_candidates: f64,
    pub mean_positives: f64,
}

impl DatasetStats {
    pub fn of(groups: &[QuestionGroup]) -> Self {
        let questions = groups.len();
        let examples: usize = groups.iter().map(QuestionGroup::len).sum();
        let positives: usize = groups.iter().map(QuestionGroup::n_positive).sum();
        let mean = |total: usize| if questions == 0 { 0.0 } else { total as f64 / questions as f64 };
        DatasetStats {
            questions,
            examples,
            mean_candidates: mean(examples),
            mean_positives: mean(positives),
        }
    }
}
