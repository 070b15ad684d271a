//! Masked objectives and the label spaces they induce over a vocabulary.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::bpe::{TokenId, Vocab, SPACE_MARKER};
use crate::{Error, Result};

/// Target value for positions that are not training targets.
pub const IGNORE_LABEL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    First,
    Last,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::First => "first",
            Direction::Last => "last",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "first" => Ok(Direction::First),
            "last" => Ok(Direction::Last),
            other => Err(Error::Parse(format!("unknown direction {other:?} (expected first or last)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectiveSpec {
    Mlm,
    FirstChar29,
    LastChar29,
    NChars { direction: Direction, n: usize },
}

impl ObjectiveSpec {
    pub fn n_chars(direction: Direction, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parse("n must be at least 1".into()));
        }
        Ok(ObjectiveSpec::NChars { direction, n })
    }

    pub fn direction(&self) -> Option<Direction> {
        match self {
            ObjectiveSpec::Mlm => None,
            ObjectiveSpec::FirstChar29 => Some(Direction::First),
            ObjectiveSpec::LastChar29 => Some(Direction::Last),
            ObjectiveSpec::NChars { direction, .. } => Some(*direction),
        }
    }

    pub fn n(&self) -> Option<usize> {
        match self {
            ObjectiveSpec::NChars { n, .. } => Some(*n),
            _ => None,
        }
    }

    /// Short human-readable name ("MLM", "First Char", "First 4 Chars").
    pub fn label(&self) -> String {
        match self {
            ObjectiveSpec::Mlm => "MLM".into(),
            ObjectiveSpec::FirstChar29 => "First Char".into(),
            ObjectiveSpec::LastChar29 => "Last Char".into(),
            ObjectiveSpec::NChars { direction, n } => {
                let d = match direction {
                    Direction::First => "First",
                    Direction::Last => "Last",
                };
                if *n == 1 {
                    format!("{d} 1 Char")
                } else {
                    format!("{d} {n} Chars")
                }
            }
        }
    }
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveSpec::Mlm => f.write_str("mlm"),
            ObjectiveSpec::FirstChar29 => f.write_str("firstchar29"),
            ObjectiveSpec::LastChar29 => f.write_str("lastchar29"),
            ObjectiveSpec::NChars { direction, n } => write!(f, "{}:{n}", direction.as_str()),
        }
    }
}

impl FromStr for ObjectiveSpec {
    type Err = Error;

    /// Accepts `mlm`, `firstchar29`, `lastchar29` and `first:N` / `last:N`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "mlm" => return Ok(ObjectiveSpec::Mlm),
            "firstchar29" | "firstchar" => return Ok(ObjectiveSpec::FirstChar29),
            "lastchar29" | "lastchar" => return Ok(ObjectiveSpec::LastChar29),
            _ => {}
        }
        let bad = || Error::Parse(format!("unknown objective {s:?} (expected mlm, firstchar29, lastchar29, first:N or last:N)"));
        let (d, n) = t.split_once(':').ok_or_else(bad)?;
        let direction: Direction = d.parse().map_err(|_| bad())?;
        let n: usize = n.parse().map_err(|_| bad())?;
        ObjectiveSpec::n_chars(direction, n).map_err(|_| bad())
    }
}

/// Token text with one leading whitespace marker removed.
pub fn strip_marker(token: &str) -> &str {
    token.strip_prefix(SPACE_MARKER).unwrap_or(token)
}

/// First or last `n` characters of the stripped token; shorter tokens yield
/// the whole remainder, and a bare marker yields the empty label.
pub fn token_label(token: &str, direction: Direction, n: usize) -> String {
    let body = strip_marker(token);
    match direction {
        Direction::First => body.chars().take(n).collect(),
        Direction::Last => {
            let count = body.chars().count();
            body.chars().skip(count.saturating_sub(n)).collect()
        }
    }
}

pub const CLASS29_DIGIT: u32 = 26;
pub const CLASS29_PUNCT: u32 = 27;
pub const CLASS29_OTHER: u32 = 28;

fn class29_name(id: u32) -> String {
    match id {
        0..=25 => ((b'a' + id as u8) as char).to_string(),
        CLASS29_DIGIT => "<digit>".into(),
        CLASS29_PUNCT => "<punct>".into(),
        _ => "<other>".into(),
    }
}

/// 29-way class of the first or last character: 26 case-folded letters, one
/// digit class, one punctuation class, and everything else.
pub fn classify_char_29(token: &str, direction: Direction) -> u32 {
    let body = strip_marker(token);
    let c = match direction {
        Direction::First => body.chars().next(),
        Direction::Last => body.chars().next_back(),
    };
    match c {
        Some(c) if c.is_ascii_alphabetic() => (c.to_ascii_lowercase() as u8 - b'a') as u32,
        Some(c) if c.is_ascii_digit() => CLASS29_DIGIT,
        Some(c) if c.is_ascii_punctuation() => CLASS29_PUNCT,
        _ => CLASS29_OTHER,
    }
}

/// Token-to-label lookup for one objective over one vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    spec: ObjectiveSpec,
    token_to_label: Vec<u32>,
    labels: Vec<String>,
}

impl LabelMap {
    pub fn spec(&self) -> ObjectiveSpec {
        self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_to_label.len()
    }

    /// Label of `id`, or [`IGNORE_LABEL`] for special tokens.
    pub fn label(&self, id: TokenId) -> u32 {
        self.token_to_label[id as usize]
    }

    pub fn label_text(&self, label: u32) -> Option<&str> {
        self.labels.get(label as usize).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn token_to_label(&self) -> &[u32] {
        &self.token_to_label
    }

    /// CSV `token_id,label_id,label_text`; special tokens are omitted.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["token_id", "label_id", "label_text"]).map_err(csv_err)?;
        for (tok, &label) in self.token_to_label.iter().enumerate() {
            if label == IGNORE_LABEL {
                continue;
            }
            w.write_record([tok.to_string(), label.to_string(), self.labels[label as usize].clone()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse(format!("{other:?}")),
        })
}

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new().from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    })
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

pub fn build_label_map(vocab: &Vocab, spec: ObjectiveSpec) -> LabelMap {
    let mut token_to_label = vec![IGNORE_LABEL; vocab.len()];
    let labels = match spec {
        ObjectiveSpec::Mlm => {
            for (id, slot) in token_to_label.iter_mut().enumerate() {
                if !vocab.is_special(id as TokenId) {
                    *slot = id as u32;
                }
            }
            vocab.tokens().to_vec()
        }
        ObjectiveSpec::FirstChar29 | ObjectiveSpec::LastChar29 => {
            let dir = spec.direction().expect("char objectives have a direction");
            for (id, tok) in vocab.tokens().iter().enumerate() {
                if !vocab.is_special(id as TokenId) {
                    token_to_label[id] = classify_char_29(tok, dir);
                }
            }
            (0..29).map(class29_name).collect()
        }
        ObjectiveSpec::NChars { direction, n } => {
            let mut index: HashMap<String, u32> = HashMap::new();
            let mut labels = Vec::new();
            for (id, tok) in vocab.tokens().iter().enumerate() {
                if vocab.is_special(id as TokenId) {
                    continue;
                }
                let text = token_label(tok, direction, n);
                let next = labels.len() as u32;
                let label = *index.entry(text.clone()).or_insert_with(|| {
                    labels.push(text);
                    next
                });
                token_to_label[id] = label;
            }
            labels
        }
    };
    LabelMap {
        spec,
        token_to_label,
        labels,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCount {
    pub direction: Direction,
    pub n: usize,
    pub num_classes: usize,
}

fn non_special_tokens(vocab: &Vocab) -> impl Iterator<Item = &str> {
    vocab
        .tokens()
        .iter()
        .enumerate()
        .filter(|(id, _)| !vocab.is_special(*id as TokenId))
        .map(|(_, t)| t.as_str())
}

/// Number of distinct marker-stripped texts among non-special tokens: the
/// ceiling every n-Chars label space approaches as n grows.
pub fn distinct_stripped_texts(vocab: &Vocab) -> usize {
    non_special_tokens(vocab).map(strip_marker).collect::<HashSet<_>>().len()
}

/// Class counts for every (direction, n) pair, sorted by direction then n.
pub fn count_classes_sweep(vocab: &Vocab, directions: &[Direction], n_values: &[usize]) -> Result<Vec<ClassCount>> {
    if n_values.is_empty() {
        return Err(Error::Empty("n sweep"));
    }
    if n_values.contains(&0) {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut dirs = directions.to_vec();
    dirs.sort();
    dirs.dedup();
    let mut ns = n_values.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let mut out = Vec::with_capacity(dirs.len() * ns.len());
    for &direction in &dirs {
        for &n in &ns {
            let num_classes = non_special_tokens(vocab)
                .map(|t| token_label(t, direction, n))
                .collect::<HashSet<_>>()
                .len();
            out.push(ClassCount { direction, n, num_classes });
        }
    }
    Ok(out)
}

/// CSV `direction,n,num_classes`.
pub fn write_sweep_csv(rows: &[ClassCount], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["direction", "n", "num_classes"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.direction.as_str().to_string(), r.n.to_string(), r.num_classes.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VocabCharStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

/// Character-length statistics of marker-stripped, non-special tokens.
pub fn vocab_char_stats(vocab: &Vocab) -> Result<VocabCharStats> {
    let lens: Vec<f64> = non_special_tokens(vocab)
        .map(|t| strip_marker(t).chars().count() as f64)
        .collect();
    if lens.is_empty() {
        return Err(Error::Empty("vocabulary"));
    }
    let n = lens.len() as f64;
    let mean = lens.iter().sum::<f64>() / n;
    let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Ok(VocabCharStats {
        mean,
        std: var.sqrt(),
        count: lens.len(),
    })
}
