use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use mlmlab::bpe::{byte_char, pretokenize, train_bpe, Vocab, DEFAULT_SPECIALS};
use mlmlab::corpus::{gen_synthetic_corpus, Document, SyntheticCorpusSpec, DEFAULT_INVENTORY};
use proptest::prelude::*;

fn synthetic_docs() -> &'static Vec<Document> {
    static DOCS: OnceLock<Vec<Document>> = OnceLock::new();
    DOCS.get_or_init(|| {
        gen_synthetic_corpus(&SyntheticCorpusSpec {
            vocab_size_hint: DEFAULT_INVENTORY,
            size: 600,
            seed: 5,
        })
        .unwrap()
    })
}

fn trained(target: usize) -> Vocab {
    train_bpe(synthetic_docs(), target).unwrap()
}

fn shared_vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| trained(700))
}

/// Textbook BPE: recount every adjacent pair from scratch at each step,
/// pick the most frequent (count ≥ 2, smallest surface pair on ties) and
/// rewrite every word left to right.
fn brute_force_merges(docs: &[Document], target: usize) -> Vec<(String, String)> {
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for d in docs {
        for piece in pretokenize(d.text()) {
            *counts.entry(piece).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, i64)> = counts
        .into_iter()
        .map(|(w, c)| (w.bytes().map(|b| byte_char(b).to_string()).collect(), c))
        .collect();
    let mut known: BTreeSet<String> = (0..=255u8).map(|b| byte_char(b).to_string()).collect();
    let mut size = DEFAULT_SPECIALS.len() + 256;
    let mut merges = Vec::new();
    while size < target {
        let mut pairs: BTreeMap<(String, String), i64> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].clone(), w[1].clone())).or_default() += c;
            }
        }
        let max = pairs.values().copied().max().unwrap_or(0);
        if max < 2 {
            break;
        }
        let (l, r) = pairs.into_iter().find(|(_, c)| *c == max).unwrap().0;
        let merged = format!("{l}{r}");
        for (syms, _) in &mut words {
            let mut out = Vec::new();
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(merged) {
            size += 1;
        }
        merges.push((l, r));
    }
    merges
}

fn docs(lines: &[String]) -> Vec<Document> {
    lines.iter().filter_map(|l| Document::new(l.as_str()).ok()).collect()
}

#[test]
fn classic_example_merges() {
    let d = docs(&["aaabdaaabac".to_string()]);
    let v = train_bpe(&d, 1000).unwrap();
    let expect = [("a", "a"), ("a", "b"), ("aa", "ab")];
    let got: Vec<(&str, &str)> = v.merges().iter().map(|(l, r)| (l.as_str(), r.as_str())).collect();
    assert_eq!(got, expect);
    assert_eq!(v.merges(), brute_force_merges(&d, 1000).as_slice());
    // "aaabdaaabac" -> aaab d aaab a c
    assert_eq!(v.encode("aaabdaaabac").len(), 5);
}

#[test]
fn training_is_deterministic() {
    let a = trained(600);
    let b = trained(600);
    assert_eq!(a.tokens(), b.tokens());
    assert_eq!(a.merges(), b.merges());
}

#[test]
fn smaller_vocab_merges_are_a_prefix() {
    let small = trained(450);
    let big = shared_vocab();
    assert!(big.merges().starts_with(small.merges()));
    assert!(big.tokens().starts_with(small.tokens()));
}

#[test]
fn synthetic_corpus_matches_brute_force() {
    let d = &synthetic_docs()[..120];
    let v = train_bpe(d, 400).unwrap();
    assert_eq!(v.merges(), brute_force_merges(d, 400).as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode(s in "\\PC{0,40}|[ a-z\\n\\t]{0,40}") {
        let v = shared_vocab();
        let ids = v.encode(&s);
        prop_assert_eq!(v.decode(&ids).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn incremental_trainer_matches_brute_force(
        lines in prop::collection::vec("[abc]{1,5}( [abc]{1,5}){0,5}", 1..8),
        extra in 0usize..40,
    ) {
        let d = docs(&lines);
        let target = DEFAULT_SPECIALS.len() + 256 + extra;
        let v = train_bpe(&d, target).unwrap();
        let expected = brute_force_merges(&d, target);
        prop_assert_eq!(v.merges(), expected.as_slice());
    }

    #[test]
    fn more_merges_never_lengthen_an_encoding(s in "[a-z ]{0,60}") {
        let small = trained(450);
        let big = shared_vocab();
        prop_assert!(big.encode(&s).len() <= small.encode(&s).len());
    }
}
