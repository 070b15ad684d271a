//! Corpus ingestion, packing into fixed-length batches, and the synthetic
//! world used for desk-scale pretraining and probe tasks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bpe::{pretokenize, SpecialKind, TokenId, Vocab};
use crate::{Error, Result};

/// One line of plain text.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Document {
    text: String,
}

impl Document {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Empty("document"));
        }
        if text.contains(['\n', '\r']) {
            return Err(Error::Parse(format!("document contains a line break: {text:?}")));
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidUtf8 {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
}

/// One document per non-blank line, in file order.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let text = read_utf8(path)?;
    lines(&text).map(|(_, l)| Document::new(l)).collect()
}

/// Token ids laid out as `rows × seq_len`, padding flagged as not attended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<TokenId>,
    pub attention: Vec<bool>,
    pub rows: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn non_pad_count(&self) -> usize {
        self.attention.iter().filter(|a| **a).count()
    }
}

pub fn tokenize_corpus(docs: &[Document], vocab: &Vocab) -> Vec<Vec<TokenId>> {
    docs.iter().map(|d| vocab.encode(d.text())).collect()
}

/// Split the packed stream (each document followed by a separator) into
/// chunks of `seq_len` tokens that each open with `cls`, the same way
/// fine-tuning inputs start. The final chunk keeps whatever is left.
pub fn pack_chunks(tokenized: &[Vec<TokenId>], cls: TokenId, sep: TokenId, seq_len: usize) -> Vec<Vec<TokenId>> {
    let stream: Vec<TokenId> = tokenized
        .iter()
        .flat_map(|d| d.iter().copied().chain(std::iter::once(sep)))
        .collect();
    stream
        .chunks(seq_len - 1)
        .map(|c| std::iter::once(cls).chain(c.iter().copied()).collect())
        .collect()
}

/// Shuffle packed chunks with `seed` and group them into batches.
pub fn batches_from_chunks(
    chunks: &[Vec<TokenId>],
    pad: TokenId,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|group| {
            let mut ids = Vec::with_capacity(group.len() * seq_len);
            let mut attention = Vec::with_capacity(group.len() * seq_len);
            for &c in group {
                let chunk = &chunks[c];
                ids.extend_from_slice(chunk);
                ids.extend(std::iter::repeat_n(pad, seq_len - chunk.len()));
                attention.extend((0..seq_len).map(|i| i < chunk.len()));
            }
            Batch {
                ids,
                attention,
                rows: group.len(),
                seq_len,
            }
        })
        .collect()
}

/// Pack the corpus into shuffled batches. Pure in all arguments.
pub fn make_batches(docs: &[Document], vocab: &Vocab, seq_len: usize, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if seq_len < 2 {
        return Err(Error::Config(format!("seq_len must be at least 2, got {seq_len}")));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cls = vocab.require_special(SpecialKind::Cls)?;
    let sep = vocab.require_special(SpecialKind::Sep)?;
    let pad = vocab.require_special(SpecialKind::Pad)?;
    let chunks = pack_chunks(&tokenize_corpus(docs, vocab), cls, sep, seq_len);
    Ok(batches_from_chunks(&chunks, pad, seq_len, batch_size, seed))
}

// ---------------------------------------------------------------------------
// Synthetic world

pub const NUM_TOPICS: usize = 8;
pub const DEFAULT_INVENTORY: usize = 600;
const WORLD_SEED: u64 = 0x5eed_0f_a11;
const FUNCTION_WORDS: usize = 24;
const TOPIC_BOOST: f64 = 40.0;

/// Fixed word inventory with one skewed unigram distribution per topic.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    words: Vec<String>,
    function_words: Vec<String>,
    /// Cumulative weights over `words`, one table per topic.
    topic_cdf: Vec<Vec<f64>>,
}

fn random_word<R: Rng>(rng: &mut R, len: usize) -> String {
    (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
}

impl SyntheticWorld {
    /// The world depends only on the inventory size, never on a user seed,
    /// so corpora and probe tasks drawn with different seeds share words.
    pub fn new(inventory: usize) -> Self {
        let inventory = inventory.max(NUM_TOPICS * 4);
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED ^ inventory as u64);
        let mut seen = std::collections::HashSet::new();
        let mut function_words = Vec::with_capacity(FUNCTION_WORDS);
        while function_words.len() < FUNCTION_WORDS {
            let len = 1 + function_words.len() % 3;
            let w = random_word(&mut rng, len);
            if seen.insert(w.clone()) {
                function_words.push(w);
            }
        }
        let mut words = Vec::with_capacity(inventory);
        while words.len() < inventory {
            // lengths cycle through 2..=12 so every length is represented;
            // 1-letter content words would exhaust the alphabet quickly
            let len = 2 + words.len() % 11;
            let w = random_word(&mut rng, len);
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        words.shuffle(&mut rng);
        let topic_cdf = (0..NUM_TOPICS)
            .map(|t| {
                let mut acc = 0.0;
                words
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        let zipf = 1.0 / (1.0 + (i / NUM_TOPICS) as f64).sqrt();
                        let boost = if i % NUM_TOPICS == t { TOPIC_BOOST } else { 1.0 };
                        acc += zipf * boost;
                        acc
                    })
                    .collect()
            })
            .collect();
        Self {
            words,
            function_words,
            topic_cdf,
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn function_words(&self) -> &[String] {
        &self.function_words
    }

    /// Topic that word `i` of the inventory is boosted under.
    pub fn topic_of(&self, i: usize) -> usize {
        i % NUM_TOPICS
    }

    pub fn sample_content<R: Rng>(&self, topic: usize, rng: &mut R) -> &str {
        let cdf = &self.topic_cdf[topic];
        let u = rng.random::<f64>() * cdf[cdf.len() - 1];
        let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        &self.words[i]
    }

    /// Word sequence for one document on `topic`.
    pub fn sample_words<R: Rng>(&self, topic: usize, len: usize, rng: &mut R) -> Vec<&str> {
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    self.function_words[rng.random_range(0..self.function_words.len())].as_str()
                } else {
                    self.sample_content(topic, rng)
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticCorpusSpec {
    /// Number of content words in the inventory.
    pub vocab_size_hint: usize,
    pub size: usize,
    pub seed: u64,
}

/// Topical documents of 8 to 24 words each, one topic per document.
pub fn gen_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<Document>> {
    if spec.size == 0 {
        return Err(Error::Config("synthetic corpus size must be at least 1".into()));
    }
    let world = SyntheticWorld::new(spec.vocab_size_hint);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.size)
        .map(|_| {
            let topic = rng.random_range(0..NUM_TOPICS);
            let len = rng.random_range(8..=24);
            Document::new(world.sample_words(topic, len, &mut rng).join(" "))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Span,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub num_labels: usize,
    pub seed: u64,
    pub size: usize,
    pub vocab_size_hint: usize,
}

impl SyntheticTaskSpec {
    pub fn classification(num_labels: usize, size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Classification,
            num_labels,
            seed,
            size,
            vocab_size_hint: DEFAULT_INVENTORY,
        }
    }

    pub fn span(size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Span,
            num_labels: 1,
            seed,
            size,
            vocab_size_hint: DEFAULT_INVENTORY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSample {
    pub text: String,
    pub label: usize,
}

/// Extractive sample; `start..=end` index tokens of the encoded passage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanSample {
    pub passage: String,
    pub question: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProbeData {
    Classification(Vec<ClassSample>),
    Span(Vec<SpanSample>),
}

impl ProbeData {
    pub fn len(&self) -> usize {
        match self {
            ProbeData::Classification(s) => s.len(),
            ProbeData::Span(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw a probe dataset from the synthetic world.
///
/// Classification: short documents whose label is the generating topic, so
/// the label is carried by which words occur, not by length. Span: the
/// question is one word of the passage that occurs there exactly once; the
/// gold span covers that word's tokens.
pub fn gen_probe_task(spec: &SyntheticTaskSpec, vocab: &Vocab) -> Result<ProbeData> {
    let world = SyntheticWorld::new(spec.vocab_size_hint);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        TaskKind::Classification => {
            if spec.num_labels < 2 {
                return Err(Error::Config("classification needs at least 2 labels".into()));
            }
            if spec.num_labels > NUM_TOPICS {
                return Err(Error::Config(format!(
                    "num_labels {} exceeds the {NUM_TOPICS} synthetic topics",
                    spec.num_labels
                )));
            }
            let samples = (0..spec.size)
                .map(|_| {
                    let label = rng.random_range(0..spec.num_labels);
                    let len = rng.random_range(6..=16);
                    ClassSample {
                        text: world.sample_words(label, len, &mut rng).join(" "),
                        label,
                    }
                })
                .collect();
            Ok(ProbeData::Classification(samples))
        }
        TaskKind::Span => {
            let mut samples = Vec::with_capacity(spec.size);
            while samples.len() < spec.size {
                let topic = rng.random_range(0..NUM_TOPICS);
                let len = rng.random_range(6..=14);
                let words = world.sample_words(topic, len, &mut rng);
                let j = rng.random_range(0..words.len());
                if words.iter().filter(|w| **w == words[j]).count() != 1 {
                    continue;
                }
                let passage = words.join(" ");
                let pieces = pretokenize(&passage);
                let mut start = 0;
                for p in &pieces[..j] {
                    start += vocab.encode(p).len();
                }
                let width = vocab.encode(pieces[j]).len();
                samples.push(SpanSample {
                    question: words[j].to_string(),
                    passage,
                    start,
                    end: start + width - 1,
                });
            }
            Ok(ProbeData::Span(samples))
        }
    }
}

// ---------------------------------------------------------------------------
// Tab-separated task files

fn field<'a>(parts: &[&'a str], i: usize, path: &Path, lineno: usize) -> Result<&'a str> {
    parts
        .get(i)
        .copied()
        .ok_or_else(|| Error::Parse(format!("{}:{}: missing field {}", path.display(), lineno + 1, i + 1)))
}

fn parse_usize(s: &str, path: &Path, lineno: usize) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{}:{}: expected a non-negative integer, got {s:?}", path.display(), lineno + 1)))
}

/// `text<TAB>label_id` per line.
pub fn load_classification_tsv(path: &Path) -> Result<Vec<ClassSample>> {
    let text = read_utf8(path)?;
    lines(&text)
        .map(|(n, l)| {
            let parts: Vec<&str> = l.split('\t').collect();
            if parts.len() != 2 {
                return Err(Error::Parse(format!("{}:{}: expected 2 tab-separated fields", path.display(), n + 1)));
            }
            Ok(ClassSample {
                text: field(&parts, 0, path, n)?.to_string(),
                label: parse_usize(field(&parts, 1, path, n)?, path, n)?,
            })
        })
        .collect()
}

/// `passage<TAB>question<TAB>start_token<TAB>end_token` per line.
pub fn load_span_tsv(path: &Path) -> Result<Vec<SpanSample>> {
    let text = read_utf8(path)?;
    lines(&text)
        .map(|(n, l)| {
            let parts: Vec<&str> = l.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::Parse(format!("{}:{}: expected 4 tab-separated fields", path.display(), n + 1)));
            }
            let start = parse_usize(parts[2], path, n)?;
            let end = parse_usize(parts[3], path, n)?;
            if end < start {
                return Err(Error::Parse(format!("{}:{}: span end before start", path.display(), n + 1)));
            }
            Ok(SpanSample {
                passage: parts[0].to_string(),
                question: parts[1].to_string(),
                start,
                end,
            })
        })
        .collect()
}

pub fn write_probe_tsv(data: &ProbeData, path: &Path) -> Result<()> {
    let mut out = String::new();
    match data {
        ProbeData::Classification(s) => {
            for x in s {
                writeln!(out, "{}\t{}", x.text, x.label).expect("string write");
            }
        }
        ProbeData::Span(s) => {
            for x in s {
                writeln!(out, "{}\t{}\t{}\t{}", x.passage, x.question, x.start, x.end).expect("string write");
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(d.text());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
