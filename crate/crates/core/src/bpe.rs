//! Byte-level byte-pair encoding.
//!
//! Token surface forms use the usual byte-to-printable-character table, so a
//! leading space shows up as `Ġ` and every one of the 256 byte values is a
//! single visible character. Special tokens sit at the lowest ids of trained
//! vocabularies and never take part in merges.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use crate::corpus::Document;
use crate::{Error, Result};

pub type TokenId = u32;

/// Whitespace marker: the rendered form of the space byte.
pub const SPACE_MARKER: char = 'Ġ';

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpecialKind {
    Pad,
    Cls,
    Sep,
    Unk,
    Mask,
    /// Recognised control token with no role here (e.g. `<|endoftext|>`).
    Other,
}

/// Surface forms given to special tokens in trained vocabularies, in id order.
pub const DEFAULT_SPECIALS: [(&str, SpecialKind); 5] = [
    ("<pad>", SpecialKind::Pad),
    ("<s>", SpecialKind::Cls),
    ("</s>", SpecialKind::Sep),
    ("<unk>", SpecialKind::Unk),
    ("<mask>", SpecialKind::Mask),
];

fn special_kind_of(token: &str) -> Option<SpecialKind> {
    Some(match token {
        "<pad>" | "[PAD]" => SpecialKind::Pad,
        "<s>" | "[CLS]" => SpecialKind::Cls,
        "</s>" | "[SEP]" => SpecialKind::Sep,
        "<unk>" | "[UNK]" => SpecialKind::Unk,
        "<mask>" | "[MASK]" => SpecialKind::Mask,
        "<|endoftext|>" => SpecialKind::Other,
        _ => return None,
    })
}

struct ByteTable {
    to_char: [char; 256],
    to_byte: HashMap<char, u8>,
}

fn byte_table() -> &'static ByteTable {
    static TABLE: OnceLock<ByteTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        let mut to_char = ['\0'; 256];
        let mut extra = 0u32;
        for b in 0..256u32 {
            let c = if printable(b) {
                b
            } else {
                extra += 1;
                255 + extra
            };
            to_char[b as usize] = char::from_u32(c).expect("valid scalar");
        }
        let to_byte = to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        ByteTable { to_char, to_byte }
    })
}

/// Printable character standing for byte `b` in token surface forms.
pub fn byte_char(b: u8) -> char {
    byte_table().to_char[b as usize]
}

/// Inverse of [`byte_char`].
pub fn char_byte(c: char) -> Option<u8> {
    byte_table().to_byte.get(&c).copied()
}

/// Render raw bytes with the byte-level alphabet.
pub fn render_bytes(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| byte_char(b)).collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Number,
    Other,
    Space,
}

fn class_of(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Number
    } else {
        CharClass::Other
    }
}

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

/// Split text into pre-tokens: contractions, runs of letters / digits / other
/// symbols (each optionally carrying one leading space), and whitespace runs.
/// The pieces concatenate back to the input exactly.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(off, _)| off);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let rest = &text[start..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
            out.push(&text[start..start + c.len()]);
            i += c.chars().count();
            continue;
        }
        let mut j = i;
        if chars[i].1 == ' ' && j + 1 < chars.len() && class_of(chars[j + 1].1) != CharClass::Space {
            j += 1;
        }
        let cls = class_of(chars[j].1);
        if cls != CharClass::Space {
            let mut k = j + 1;
            while k < chars.len() && class_of(chars[k].1) == cls {
                k += 1;
            }
            out.push(&text[start..end_of(k)]);
            i = k;
            continue;
        }
        let mut k = i + 1;
        while k < chars.len() && class_of(chars[k].1) == CharClass::Space {
            k += 1;
        }
        if k < chars.len() && k - i >= 2 {
            // leave the final whitespace character to prefix the next piece
            k -= 1;
        }
        out.push(&text[start..end_of(k)]);
        i = k;
    }
    out
}

/// Byte-level BPE vocabulary: dense ids, unique surface forms, ordered merges.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    specials: BTreeMap<TokenId, SpecialKind>,
    byte_ids: [Option<TokenId>; 256],
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges
    }
}

impl Vocab {
    /// Build from surface forms (id = position) and merges in rank order.
    pub fn new(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        let mut specials = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
            if let Some(kind) = special_kind_of(tok) {
                specials.insert(id as TokenId, kind);
            }
        }
        let mut byte_ids = [None; 256];
        for b in 0..=255u8 {
            byte_ids[b as usize] = index.get(&byte_char(b).to_string()).copied();
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let (Some(&li), Some(&ri)) = (index.get(l), index.get(r)) else {
                return Err(Error::Vocab(format!("merge {l:?} {r:?} refers to unknown tokens")));
            };
            let Some(&mi) = index.get(&format!("{l}{r}")) else {
                return Err(Error::Vocab(format!("merge result {l}{r:?} missing from vocabulary")));
            };
            merge_ranks.entry((li, ri)).or_insert((rank, mi));
        }
        Ok(Self {
            tokens,
            index,
            merges,
            merge_ranks,
            specials,
            byte_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn special_kind(&self, id: TokenId) -> Option<SpecialKind> {
        self.specials.get(&id).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.specials.contains_key(&id)
    }

    pub fn special(&self, kind: SpecialKind) -> Option<TokenId> {
        self.specials.iter().find(|(_, k)| **k == kind).map(|(id, _)| *id)
    }

    pub fn require_special(&self, kind: SpecialKind) -> Result<TokenId> {
        self.special(kind)
            .ok_or_else(|| Error::Vocab(format!("vocabulary has no {kind:?} token")))
    }

    pub fn special_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.specials.keys().copied()
    }

    pub fn has_all_bytes(&self) -> bool {
        self.byte_ids.iter().all(Option::is_some)
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<TokenId>) {
        let unk = self.special(SpecialKind::Unk);
        let mut syms: Vec<TokenId> = piece
            .bytes()
            .filter_map(|b| self.byte_ids[b as usize].or(unk))
            .collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).copied())
                .min_by_key(|&(rank, _)| rank);
            let Some((rank, merged)) = best else { break };
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len()
                    && self
                        .merge_ranks
                        .get(&(syms[i], syms[i + 1]))
                        .is_some_and(|&(r, _)| r == rank)
                {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            syms = next;
        }
        out.extend(syms);
    }

    /// Encode text by applying the learned merges in rank order inside each pre-token.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut cache: HashMap<&str, Vec<TokenId>> = HashMap::new();
        let mut out = Vec::with_capacity(text.len() / 3);
        for piece in pretokenize(text) {
            if let Some(ids) = cache.get(piece) {
                out.extend_from_slice(ids);
                continue;
            }
            let mut ids = Vec::new();
            self.encode_piece(piece, &mut ids);
            out.extend_from_slice(&ids);
            cache.insert(piece, ids);
        }
        out
    }

    /// Raw bytes behind a token sequence. Special tokens contribute their literal text.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 4);
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?;
            if self.is_special(id) {
                out.extend_from_slice(tok.as_bytes());
                continue;
            }
            for c in tok.chars() {
                match char_byte(c) {
                    Some(b) => out.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Text behind a token sequence; invalid UTF-8 (possible only for
    /// arbitrary id sequences) is replaced with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Write `vocab.txt` (one token per line, line number = id) and `merges.txt`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut vocab = String::new();
        for tok in &self.tokens {
            if tok.contains(['\n', '\r']) || tok.is_empty() {
                return Err(Error::Vocab(format!("token {tok:?} cannot be stored one per line")));
            }
            vocab.push_str(tok);
            vocab.push('\n');
        }
        let merges: String = self.merges.iter().map(|(l, r)| format!("{l} {r}\n")).collect();
        let vp = dir.join("vocab.txt");
        fs::write(&vp, vocab).map_err(|e| Error::io(&vp, e))?;
        let mp = dir.join("merges.txt");
        fs::write(&mp, merges).map_err(|e| Error::io(&mp, e))?;
        Ok(())
    }

    /// Load a directory written by [`Vocab::save_dir`], or any vocabulary
    /// file accepted by [`load_external_vocab`] (merges are then absent).
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_dir() {
            return load_external_vocab(path);
        }
        let vp = path.join("vocab.txt");
        let tokens = load_external_vocab(&vp)?.tokens;
        let mp = path.join("merges.txt");
        let merges = if mp.exists() { read_merges(&mp)? } else { Vec::new() };
        Vocab::new(tokens, merges)
    }
}

/// Read a merges file: one `left right` pair per line, `#` header lines ignored.
pub fn read_merges(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut merges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with("#version") || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                merges.push((l.to_string(), r.to_string()))
            }
            _ => {
                return Err(Error::Parse(format!(
                    "{}:{}: expected `left right`",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(merges)
}

/// Load an externally produced vocabulary.
///
/// Accepted layouts: a JSON object mapping token to id, `token<TAB>id` lines,
/// or one token per line with the line number as id.
pub fn load_external_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trimmed = text.trim_start();
    let pairs: Option<Vec<(String, i64)>> = if trimmed.starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(trimmed).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut pairs = Vec::with_capacity(map.len());
        for (tok, v) in map {
            let id = v
                .as_i64()
                .ok_or_else(|| Error::Parse(format!("{}: id of {tok:?} is not an integer", path.display())))?;
            pairs.push((tok, id));
        }
        Some(pairs)
    } else {
        let lines: Vec<&str> = text.lines().collect();
        let kv = !lines.is_empty()
            && lines.iter().all(|l| {
                l.rsplit_once('\t')
                    .is_some_and(|(t, id)| !t.is_empty() && id.parse::<i64>().is_ok())
            });
        if kv {
            Some(
                lines
                    .iter()
                    .map(|l| {
                        let (t, id) = l.rsplit_once('\t').expect("checked above");
                        (t.to_string(), id.parse().expect("checked above"))
                    })
                    .collect(),
            )
        } else {
            None
        }
    };
    let tokens = match pairs {
        None => {
            let tokens: Vec<String> = text.lines().map(str::to_string).collect();
            let mut seen = HashSet::new();
            for t in &tokens {
                if !seen.insert(t.as_str()) {
                    return Err(Error::Vocab(format!("duplicate token {t:?} in {}", path.display())));
                }
            }
            tokens
        }
        Some(mut pairs) => {
            pairs.sort_by_key(|(_, id)| *id);
            let mut seen = HashSet::new();
            for (i, (tok, id)) in pairs.iter().enumerate() {
                if !seen.insert(tok.as_str()) {
                    return Err(Error::Vocab(format!("duplicate token {tok:?} in {}", path.display())));
                }
                if *id != i as i64 {
                    return Err(Error::Vocab(format!(
                        "ids in {} are not dense: expected {i}, found {id} for {tok:?}",
                        path.display()
                    )));
                }
            }
            pairs.into_iter().map(|(t, _)| t).collect()
        }
    };
    Vocab::new(tokens, Vec::new())
}

/// Learn a byte-level BPE vocabulary of at most `target_size` tokens.
///
/// Each step merges the most frequent adjacent pair (ties go to the
/// lexicographically smallest pair of surface forms); training stops at the
/// target size or when no pair occurs at least twice.
pub fn train_bpe(corpus: &[Document], target_size: usize) -> Result<Vocab> {
    let base = DEFAULT_SPECIALS.len() + 256;
    if target_size < base {
        return Err(Error::Config(format!(
            "target vocabulary size {target_size} below the {base} reserved tokens"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut tokens: Vec<String> = DEFAULT_SPECIALS.iter().map(|(s, _)| s.to_string()).collect();
    tokens.extend((0..=255u8).map(|b| byte_char(b).to_string()));
    let mut index: HashMap<String, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();
    let byte_id = |b: u8| (DEFAULT_SPECIALS.len() + b as usize) as TokenId;

    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for doc in corpus {
        for piece in pretokenize(doc.text()) {
            *counts.entry(piece).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<TokenId>, i64)> = counts
        .into_iter()
        .map(|(w, c)| (w.bytes().map(byte_id).collect(), c))
        .collect();

    let mut pair_counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    let mut occurs: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += c;
            occurs.entry((w[0], w[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while tokens.len() < target_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some(pair) = best else { break };
        let merged_text = format!("{}{}", tokens[pair.0 as usize], tokens[pair.1 as usize]);
        if special_kind_of(&merged_text).is_some() {
            pair_counts.remove(&pair);
            continue;
        }
        let merged = match index.get(&merged_text) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as TokenId;
                tokens.push(merged_text.clone());
                index.insert(merged_text, id);
                id
            }
        };
        merges.push((tokens[pair.0 as usize].clone(), tokens[pair.1 as usize].clone()));

        let mut affected: Vec<usize> = occurs.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            let c = *c;
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                if let Some(v) = pair_counts.get_mut(&p) {
                    *v -= c;
                }
                if p != pair {
                    if let Some(set) = occurs.get_mut(&p) {
                        set.remove(&wi);
                    }
                }
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            *syms = next;
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_default() += c;
                occurs.entry(p).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }
    Vocab::new(tokens, merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(lines: &[&str]) -> Vec<Document> {
        lines.iter().map(|l| Document::new(*l).unwrap()).collect()
    }

    #[test]
    fn byte_table_is_a_bijection_with_space_marker() {
        let chars: HashSet<char> = (0..=255u8).map(byte_char).collect();
        assert_eq!(chars.len(), 256);
        assert_eq!(byte_char(b' '), SPACE_MARKER);
        assert_eq!(byte_char(b'a'), 'a');
        for b in 0..=255u8 {
            assert_eq!(char_byte(byte_char(b)), Some(b));
        }
    }

    #[test]
    fn pretokenize_attaches_single_space() {
        assert_eq!(pretokenize("hello hello"), vec!["hello", " hello"]);
        assert_eq!(pretokenize("a  b"), vec!["a", " ", " b"]);
        assert_eq!(pretokenize("it's 42!\n"), vec!["it", "'s", " 42", "!", "\n"]);
        assert_eq!(pretokenize("x\ny"), vec!["x", "\n", "y"]);
    }

    #[test]
    fn first_merge_of_aaaa_is_a_a() {
        let v = train_bpe(&docs(&["aaaa"]), 1000).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn minimum_target_gives_byte_only_vocab() {
        let v = train_bpe(&docs(&["aaaa bbbb"]), 256 + DEFAULT_SPECIALS.len()).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 261);
        assert!(v.has_all_bytes());
    }

    #[test]
    fn target_below_reserved_is_rejected() {
        assert!(matches!(train_bpe(&docs(&["a"]), 100), Err(Error::Config(_))));
        assert!(matches!(train_bpe(&[], 1000), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn specials_occupy_lowest_ids() {
        let v = train_bpe(&docs(&["abc"]), 300).unwrap();
        for (i, (name, kind)) in DEFAULT_SPECIALS.iter().enumerate() {
            assert_eq!(v.token(i as TokenId), Some(*name));
            assert_eq!(v.special(*kind), Some(i as TokenId));
        }
    }

    #[test]
    fn second_word_carries_marker() {
        let v = train_bpe(&docs(&["hello hello hello world"]), 400).unwrap();
        let ids = v.encode("hello hello");
        let first_of_second = ids
            .iter()
            .map(|&i| v.token(i).unwrap())
            .find(|t| t.starts_with(SPACE_MARKER));
        assert!(first_of_second.is_some(), "{ids:?}");
        assert!(!v.token(ids[0]).unwrap().starts_with(SPACE_MARKER));
    }

    #[test]
    fn decode_edge_cases() {
        let v = train_bpe(&docs(&["abc"]), 300).unwrap();
        assert_eq!(v.decode(&[]).unwrap(), "");
        let all: Vec<TokenId> = (0..=255u8).map(|b| v.id_of(&byte_char(b).to_string()).unwrap()).collect();
        assert_eq!(v.decode_bytes(&all).unwrap(), (0..=255u8).collect::<Vec<_>>());
        assert!(matches!(v.decode(&[9999]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let err = Vocab::new(vec!["a".into(), "b".into(), "a".into()], vec![]).unwrap_err();
        assert!(err.to_string().contains("\"a\""));
    }
}
