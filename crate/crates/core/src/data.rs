//! Classification datasets: a seeded synthetic generator and TSV ingestion.
//!
//! Token layout used by the synthetic generator (and expected of TSV data):
//! id 0 is padding (never emitted), id `cls` starts every sequence, the next
//! `num_labels` ids are the label words, and everything after that is content.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_labels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Checks label and token ranges against a model's vocabulary.
    pub fn validate(&self, vocab_size: usize, max_seq_len: usize, cls: usize) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            if e.label >= self.num_labels {
                return Err(Error::Dataset(format!(
                    "example {i}: label {} not below {}",
                    e.label, self.num_labels
                )));
            }
            if e.tokens.is_empty() || e.tokens.len() > max_seq_len {
                return Err(Error::Dataset(format!(
                    "example {i}: length {} outside 1..={max_seq_len}",
                    e.tokens.len()
                )));
            }
            if e.tokens[0] != cls {
                return Err(Error::Dataset(format!(
                    "example {i}: does not start with CLS {cls}"
                )));
            }
            if let Some(t) = e.tokens.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Dataset(format!(
                    "example {i}: token {t} outside vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let toks: Vec<String> = e.tokens.iter().map(|t| t.to_string()).collect();
            out.push_str(&toks.join(" "));
            out.push('\t');
            out.push_str(&e.label.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses `tokens<TAB>label` lines (or other columns via `columns`).
    pub fn from_tsv(text: &str, num_labels: usize, columns: TsvColumns) -> Result<Self> {
        let mut examples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let field = |idx: usize| {
                fields.get(idx).copied().ok_or_else(|| {
                    Error::Dataset(format!("line {}: missing column {idx}", lineno + 1))
                })
            };
            let tokens = field(columns.tokens)?
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>().map_err(|_| {
                        Error::Dataset(format!("line {}: bad token {t:?}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let raw = field(columns.label)?.trim();
            let label = raw
                .parse::<usize>()
                .map_err(|_| Error::Dataset(format!("line {}: bad label {raw:?}", lineno + 1)))?;
            if label >= num_labels {
                return Err(Error::Dataset(format!(
                    "line {}: label {label} not below {num_labels}",
                    lineno + 1
                )));
            }
            examples.push(Example { tokens, label });
        }
        Ok(Dataset {
            examples,
            num_labels,
        })
    }

    pub fn load_tsv(path: &Path, num_labels: usize, columns: TsvColumns) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, num_labels, columns)
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TsvColumns {
    pub tokens: usize,
    pub label: usize,
}

impl Default for TsvColumns {
    fn default() -> Self {
        TsvColumns {
            tokens: 0,
            label: 1,
        }
    }
}

/// Parameters of the synthetic majority-class task.
///
/// Content tokens are split into `num_labels` groups by a seeded shuffle;
/// a sequence's label is the group contributing the most tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    /// Total length including the leading CLS token.
    pub seq_len: usize,
    pub num_labels: usize,
    pub rule_seed: u64,
    pub train_samples: usize,
    pub dev_samples: usize,
    pub cls_token_id: usize,
    /// Smallest share of content tokens drawn from the label's group.
    pub min_majority: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 64,
            seq_len: 16,
            num_labels: 2,
            rule_seed: 0,
            train_samples: 4096,
            dev_samples: 1024,
            cls_token_id: 1,
            min_majority: 0.6,
        }
    }
}

impl SyntheticSpec {
    pub fn content_start(&self) -> usize {
        self.cls_token_id + 1 + self.num_labels
    }

    fn content_len(&self) -> usize {
        self.seq_len - 1
    }

    /// Fewest majority-group tokens a sequence may contain.
    fn min_majority_count(&self) -> usize {
        let n = self.content_len();
        let strict = n / self.num_labels + 1;
        ((self.min_majority * n as f64).ceil() as usize).max(strict)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::Config(
                "synthetic task needs at least 2 labels".into(),
            ));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(
                "seq_len must leave room for content after CLS".into(),
            ));
        }
        let content = self.vocab_size.saturating_sub(self.content_start());
        if content < self.num_labels {
            return Err(Error::Config(format!(
                "vocabulary of {} leaves {content} content tokens for {} labels",
                self.vocab_size, self.num_labels
            )));
        }
        if !(0.0..=1.0).contains(&self.min_majority) {
            return Err(Error::Config(format!(
                "min_majority {} outside [0, 1]",
                self.min_majority
            )));
        }
        if self.min_majority_count() > self.content_len() {
            return Err(Error::Config(
                "seq_len too short for a strict majority".into(),
            ));
        }
        if self.train_samples == 0 || self.dev_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        Ok(())
    }

    /// Group index of every content token, keyed by `token - content_start`.
    pub fn token_groups(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rule_seed);
        let mut tokens: Vec<usize> = (0..self.vocab_size - self.content_start()).collect();
        tokens.shuffle(&mut rng);
        let mut groups = vec![0; tokens.len()];
        for (pos, &t) in tokens.iter().enumerate() {
            groups[t] = pos % self.num_labels;
        }
        groups
    }

    /// The labelling rule: the group with the most tokens, `None` on a tie.
    pub fn rule_label(&self, tokens: &[usize]) -> Option<usize> {
        let groups = self.token_groups();
        let mut counts = vec![0usize; self.num_labels];
        for &t in tokens.iter().filter(|&&t| t >= self.content_start()) {
            counts[groups[t - self.content_start()]] += 1;
        }
        let max = *counts.iter().max()?;
        let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
        let first = winners.next()?.0;
        winners.next().is_none().then_some(first)
    }

    /// Deterministic `(train, dev)` split.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let groups = self.token_groups();
        let start = self.content_start();
        let mut members: Vec<Vec<usize>> = vec![vec![]; self.num_labels];
        for (offset, &g) in groups.iter().enumerate() {
            members[g].push(start + offset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.rule_seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let train = self.sample_split(&members, self.train_samples, &mut rng);
        let dev = self.sample_split(&members, self.dev_samples, &mut rng);
        Ok((train, dev))
    }

    fn sample_split(&self, members: &[Vec<usize>], count: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let mut labels: Vec<usize> = (0..count).map(|i| i % self.num_labels).collect();
        labels.shuffle(rng);
        let n = self.content_len();
        let lo = self.min_majority_count();
        let examples = labels
            .into_iter()
            .map(|label| {
                let content = loop {
                    let major = rng.gen_range(lo..=n);
                    let mut counts = vec![0usize; self.num_labels];
                    counts[label] = major;
                    for _ in major..n {
                        let mut g = rng.gen_range(0..self.num_labels - 1);
                        if g >= label {
                            g += 1;
                        }
                        counts[g] += 1;
                    }
                    if counts
                        .iter()
                        .enumerate()
                        .all(|(g, &c)| g == label || c < major)
                    {
                        let mut content = Vec::with_capacity(n);
                        for (g, &c) in counts.iter().enumerate() {
                            for _ in 0..c {
                                content.push(*members[g].choose(rng).expect("non-empty group"));
                            }
                        }
                        content.shuffle(rng);
                        break content;
                    }
                };
                let mut tokens = Vec::with_capacity(n + 1);
                tokens.push(self.cls_token_id);
                tokens.extend(content);
                Example { tokens, label }
            })
            .collect();
        Dataset {
            examples,
            num_labels: self.num_labels,
        }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
