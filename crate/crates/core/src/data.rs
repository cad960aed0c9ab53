//! Corpora: synthetic archetype and Markov generators, character-level text
//! ingestion, the on-disk dataset format and nested training-fraction subsets.
//!
//! Every sequence in a dataset is distinct from every other one, across and
//! within splits, which keeps train and test disjoint under any subsetting.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::uddm::{CategoricalDist, TokenSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Generator descriptor and seed, single line.
    pub provenance: String,
}

impl Dataset {
    /// Checks shapes and pairwise distinctness.
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InvalidArgument("dataset has an empty training split".into()));
        }
        let mut seen = HashSet::new();
        for s in self.train.iter().chain(&self.test) {
            if s.len() != self.seq_len {
                return Err(Error::DimensionMismatch { expected: self.seq_len, found: s.len() });
            }
            if s.vocab_size() != self.vocab_size {
                return Err(Error::DimensionMismatch { expected: self.vocab_size, found: s.vocab_size() });
            }
            if !seen.insert(s.tokens()) {
                return Err(Error::Malformed { what: "dataset", detail: format!("duplicate sequence {:?}", s.tokens()) });
            }
        }
        if self.provenance.contains('\n') {
            return Err(Error::Malformed { what: "dataset", detail: "provenance spans several lines".into() });
        }
        Ok(())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "DDAM-DATA v1 K={} L={} n_train={} n_test={} provenance={}\n",
            self.vocab_size,
            self.seq_len,
            self.train.len(),
            self.test.len(),
            self.provenance
        );
        let line = |s: &TokenSequence| {
            let tokens: Vec<String> = s.tokens().iter().map(usize::to_string).collect();
            tokens.join(" ") + "\n"
        };
        self.train.iter().for_each(|s| out.push_str(&line(s)));
        out.push_str("---\n");
        self.test.iter().for_each(|s| out.push_str(&line(s)));
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Malformed { what: "dataset file", detail };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let rest = header.strip_prefix("DDAM-DATA v1 ").ok_or_else(|| bad(format!("unexpected header {header:?}")))?;
        let (fields, provenance) = rest.split_once("provenance=").ok_or_else(|| bad("header lacks provenance".into()))?;
        let get = |key: &str| -> Result<usize> {
            fields
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| bad(format!("header lacks {key}")))?
                .parse()
                .map_err(|e| bad(format!("header field {key}: {e}")))
        };
        let (k, l, n_train, n_test) = (get("K")?, get("L")?, get("n_train")?, get("n_test")?);
        let parse_line = |line: &str| -> Result<TokenSequence> {
            let tokens = line
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| bad(format!("token {t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            TokenSequence::new(tokens, k)
        };
        let mut train = Vec::with_capacity(n_train);
        let mut test = Vec::with_capacity(n_test);
        let mut in_test = false;
        for line in lines {
            if line == "---" {
                if in_test {
                    return Err(bad("second split separator".into()));
                }
                in_test = true;
            } else if in_test {
                test.push(parse_line(line)?);
            } else {
                train.push(parse_line(line)?);
            }
        }
        if !in_test {
            return Err(bad("missing `---` separator".into()));
        }
        if train.len() != n_train || test.len() != n_test {
            return Err(bad(format!(
                "header announces {n_train}/{n_test} sequences, found {}/{}",
                train.len(),
                test.len()
            )));
        }
        let dataset = Self { train, test, vocab_size: k, seq_len: l, provenance: provenance.to_string() };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Draws `n_train + n_test` pairwise-distinct sequences, rejecting repeats.
fn draw_distinct<F>(n_train: usize, n_test: usize, mut draw: F) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)>
where
    F: FnMut() -> Result<TokenSequence>,
{
    let needed = n_train + n_test;
    let max_attempts = 100 * needed;
    let mut seen = HashSet::with_capacity(needed);
    let mut out = Vec::with_capacity(needed);
    let mut attempts = 0;
    while out.len() < needed {
        if attempts == max_attempts {
            return Err(Error::DisjointnessExhausted { needed, attempts });
        }
        attempts += 1;
        let s = draw()?;
        if seen.insert(s.tokens().to_vec()) {
            out.push(s);
        }
    }
    let test = out.split_off(n_train);
    Ok((out, test))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchetypeConfig {
    pub archetypes: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub resample_prob: f64,
}

impl Default for ArchetypeConfig {
    fn default() -> Self {
        Self { archetypes: 8, seq_len: 16, vocab_size: 16, n_train: 512, n_test: 128, resample_prob: 0.1 }
    }
}

/// Noisy copies of `M` uniformly drawn template sequences; each example picks a
/// template uniformly and resamples each token uniformly with probability `r`.
pub fn gen_archetype_dataset(config: &ArchetypeConfig, seed: u64) -> Result<Dataset> {
    let ArchetypeConfig { archetypes, seq_len, vocab_size, n_train, n_test, resample_prob } = *config;
    if !(0.0..=0.5).contains(&resample_prob) {
        return Err(Error::InvalidArgument(format!("resample probability {resample_prob} outside [0, 0.5]")));
    }
    if n_train == 0 || n_test == 0 || archetypes == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument("archetype count, L, n_train and n_test must all be positive".into()));
    }
    let mut rng = seed::stream(seed, "archetype", 0);
    let templates = (0..archetypes)
        .map(|_| TokenSequence::uniform_random(seq_len, vocab_size, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = draw_distinct(n_train, n_test, || {
        let template = &templates[rng.random_range(0..archetypes)];
        let tokens = template
            .tokens()
            .iter()
            .map(|&tok| if rng.random::<f64>() < resample_prob { rng.random_range(0..vocab_size) } else { tok })
            .collect();
        TokenSequence::new(tokens, vocab_size)
    })?;
    Ok(Dataset {
        train,
        test,
        vocab_size,
        seq_len,
        provenance: format!(
            "archetype M={archetypes} L={seq_len} K={vocab_size} r={resample_prob} n_train={n_train} n_test={n_test} seed={seed}"
        ),
    })
}

/// Sequences from a first-order chain with uniform initial state.
pub fn gen_markov_dataset(transition: &[Vec<f64>], n_train: usize, n_test: usize, seq_len: usize, seed: u64) -> Result<Dataset> {
    let k = transition.len();
    let rows = transition
        .iter()
        .map(|row| {
            if row.len() != k {
                return Err(Error::DimensionMismatch { expected: k, found: row.len() });
            }
            CategoricalDist::new(row.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    if n_train == 0 || n_test == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument("L, n_train and n_test must all be positive".into()));
    }
    let mut rng = seed::stream(seed, "markov", 0);
    let (train, test) = draw_distinct(n_train, n_test, || {
        let mut tokens = Vec::with_capacity(seq_len);
        tokens.push(rng.random_range(0..k));
        while tokens.len() < seq_len {
            let prev = tokens[tokens.len() - 1];
            tokens.push(rows[prev].sample(&mut rng));
        }
        TokenSequence::new(tokens, k)
    })?;
    Ok(Dataset {
        train,
        test,
        vocab_size: k,
        seq_len,
        provenance: format!("markov K={k} L={seq_len} n_train={n_train} n_test={n_test} seed={seed}"),
    })
}

pub const TEXT_VOCAB: usize = 96;
const NEWLINE_TOKEN: usize = 95;

/// Printable ASCII 32..=126 maps to 0..=94 and `\n` to 95; anything else is dropped.
pub fn tokenize_byte(b: u8) -> Option<usize> {
    match b {
        32..=126 => Some(usize::from(b - 32)),
        b'\n' => Some(NEWLINE_TOKEN),
        _ => None,
    }
}

pub fn detokenize(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| if t == NEWLINE_TOKEN { '\n' } else { char::from(t as u8 + 32) })
        .collect()
}

/// Splits the usable characters of `bytes` into non-overlapping length-`L`
/// blocks (dropping the tail and repeated blocks), shuffles them and holds
/// out `max(1, floor(n / 10))` as the test split.
pub fn ingest_bytes(bytes: &[u8], seq_len: usize, seed: u64, source: &str) -> Result<Dataset> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("L must be positive".into()));
    }
    let usable: Vec<usize> = bytes.iter().filter_map(|&b| tokenize_byte(b)).collect();
    if usable.len() < 2 * seq_len {
        return Err(Error::InsufficientText { found: usable.len(), needed: 2 * seq_len });
    }
    let mut seen = HashSet::new();
    let mut blocks: Vec<TokenSequence> = Vec::new();
    for chunk in usable.chunks_exact(seq_len) {
        if seen.insert(chunk) {
            blocks.push(TokenSequence::new(chunk.to_vec(), TEXT_VOCAB)?);
        }
    }
    if blocks.len() < 2 {
        return Err(Error::InsufficientText { found: blocks.len() * seq_len, needed: 2 * seq_len });
    }
    blocks.shuffle(&mut seed::stream(seed, "ingest", 0));
    let n_test = (blocks.len() / 10).max(1);
    let train = blocks.split_off(n_test);
    Ok(Dataset {
        train,
        test: blocks,
        vocab_size: TEXT_VOCAB,
        seq_len,
        provenance: format!("text source={} L={seq_len} seed={seed}", source.replace(['\n', '\r'], " ")),
    })
}

pub fn ingest_text(path: &Path, seq_len: usize, seed: u64) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ingest_bytes(&bytes, seq_len, seed, &path.display().to_string())
}

/// Training subset of size `max(1, floor(fraction * n_train))`, taken as a
/// prefix of one seeded permutation so that subsets are nested in `fraction`.
pub fn dataset_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.train.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot subsample an empty training split".into()));
    }
    let size = ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, "fraction-permutation", 0));
    Ok(Dataset {
        train: order[..size].iter().map(|&i| dataset.train[i].clone()).collect(),
        test: dataset.test.clone(),
        vocab_size: dataset.vocab_size,
        seq_len: dataset.seq_len,
        provenance: format!("{} fraction={fraction} fraction_seed={seed}", dataset.provenance),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionSchedule {
    fractions: Vec<f64>,
}

impl FractionSchedule {
    pub fn new(fractions: Vec<f64>) -> Result<Self> {
        if fractions.is_empty() {
            return Err(Error::InvalidArgument("fraction schedule is empty".into()));
        }
        if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::InvalidArgument("fractions must lie in (0, 1]".into()));
        }
        if fractions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("fractions must be strictly increasing".into()));
        }
        Ok(Self { fractions })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn len(&self) -> usize {
        self.fractions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fractions.is_empty()
    }

    /// Keeps `n` points at evenly spaced indices, always including the first and last.
    pub fn truncate_evenly(&self, n: usize) -> Self {
        let len = self.fractions.len();
        if n >= len {
            return self.clone();
        }
        if n <= 1 {
            return Self { fractions: vec![self.fractions[len - 1]] };
        }
        let mut idx: Vec<usize> = (0..n).map(|i| ((i * (len - 1)) as f64 / (n - 1) as f64).round() as usize).collect();
        idx.dedup();
        Self { fractions: idx.into_iter().map(|i| self.fractions[i]).collect() }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,fraction\n");
        for (i, f) in self.fractions.iter().enumerate() {
            let _ = writeln!(out, "{i},{f}");
        }
        out
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
}

/// Union of 17 points from 1e-4 to 1e-2, 7 points from 1e-2 to 0.07 and
/// `0.01 + 0.03 k` up to 1, capped at and ending with 1.0, deduplicated.
pub fn default_fraction_schedule() -> FractionSchedule {
    let mut all: Vec<f64> = linspace(1e-4, 1e-2, 17)
        .chain(linspace(0.01, 0.07, 7))
        .chain((0..).map(|k| 0.01 + 0.03 * f64::from(k)).take_while(|f| *f < 1.0))
        .chain(std::iter::once(1.0))
        .collect();
    all.sort_by(f64::total_cmp);
    let mut fractions: Vec<f64> = Vec::with_capacity(all.len());
    for f in all {
        match fractions.last() {
            Some(&last) if (f - last).abs() <= 1e-9 => {}
            _ => fractions.push(f),
        }
    }
    FractionSchedule { fractions }
}
