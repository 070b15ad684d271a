use std::collections::BTreeSet;

use mlmlab::bpe::{char_byte, load_external_vocab, train_bpe, TokenId, Vocab};
use mlmlab::corpus::{gen_synthetic_corpus, SyntheticCorpusSpec, DEFAULT_INVENTORY};
use mlmlab::objective::{build_label_map, count_classes_sweep, Direction, ObjectiveSpec};
use proptest::prelude::*;

mod common;

/// Count labels by working on raw bytes: strip one leading space byte,
/// keep the first or last n bytes.
fn brute_force_count(vocab: &Vocab, direction: Direction, n: usize) -> usize {
    let mut seen = BTreeSet::new();
    for (id, tok) in vocab.tokens().iter().enumerate() {
        if vocab.is_special(id as TokenId) {
            continue;
        }
        let mut bytes: Vec<u8> = tok.chars().map(|c| char_byte(c).expect("byte-level token")).collect();
        if bytes.first() == Some(&b' ') {
            bytes.remove(0);
        }
        let keep = n.min(bytes.len());
        let label = match direction {
            Direction::First => bytes[..keep].to_vec(),
            Direction::Last => bytes[bytes.len() - keep..].to_vec(),
        };
        seen.insert(label);
    }
    seen.len()
}

fn synthetic_vocab(size: usize, seed: u64) -> Vocab {
    let docs = gen_synthetic_corpus(&SyntheticCorpusSpec {
        vocab_size_hint: DEFAULT_INVENTORY,
        size: 300,
        seed,
    })
    .unwrap();
    train_bpe(&docs, size).unwrap()
}

#[test]
fn synthetic_sweep_matches_brute_force() {
    let v = synthetic_vocab(800, 2);
    let ns: Vec<usize> = (1..=9).collect();
    for c in count_classes_sweep(&v, &[Direction::First, Direction::Last], &ns).unwrap() {
        assert_eq!(c.num_classes, brute_force_count(&v, c.direction, c.n), "{c:?}");
    }
}

#[test]
fn reference_vocab_counts() {
    let v = load_external_vocab(&common::vocab_fixture()).unwrap();
    let sweep = count_classes_sweep(&v, &[Direction::First, Direction::Last], &[1, 2, 3, 4, 5, 9, 100]).unwrap();
    let got: Vec<(Direction, usize, usize)> = sweep.iter().map(|c| (c.direction, c.n, c.num_classes)).collect();
    // frozen from the byte-level brute-force count above
    let expected = [
        (Direction::First, 1, 256),
        (Direction::First, 2, 2355),
        (Direction::First, 3, 9502),
        (Direction::First, 4, 20479),
        (Direction::First, 5, 28677),
        (Direction::First, 9, 40125),
        (Direction::First, 100, 41720),
        (Direction::Last, 1, 256),
        (Direction::Last, 2, 2527),
        (Direction::Last, 3, 8939),
        (Direction::Last, 4, 17936),
        (Direction::Last, 5, 26595),
        (Direction::Last, 9, 40599),
        (Direction::Last, 100, 41720),
    ];
    assert_eq!(got, expected);
    for &(d, n, c) in &expected[..3] {
        assert_eq!(brute_force_count(&v, d, n), c);
    }
    for spec in [ObjectiveSpec::FirstChar29, ObjectiveSpec::LastChar29] {
        assert_eq!(build_label_map(&v, spec).num_classes(), 29);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn counts_grow_with_n_and_stay_below_vocab(size in 300usize..700, seed in 0u64..4) {
        let v = synthetic_vocab(size, seed);
        for d in [Direction::First, Direction::Last] {
            let sweep = count_classes_sweep(&v, &[d], &(1..=8).collect::<Vec<_>>()).unwrap();
            for w in sweep.windows(2) {
                prop_assert!(w[0].num_classes <= w[1].num_classes);
            }
            prop_assert!(sweep.last().unwrap().num_classes <= v.len());
        }
    }

    #[test]
    fn every_ordinary_token_gets_a_label(size in 300usize..500) {
        let v = synthetic_vocab(size, 9);
        for spec in [ObjectiveSpec::Mlm, ObjectiveSpec::FirstChar29, ObjectiveSpec::NChars { direction: Direction::Last, n: 3 }] {
            let lm = build_label_map(&v, spec);
            for id in 0..v.len() as TokenId {
                let l = lm.label(id);
                if v.is_special(id) {
                    prop_assert_eq!(l, mlmlab::objective::IGNORE_LABEL);
                } else {
                    prop_assert!((l as usize) < lm.num_classes());
                }
            }
        }
    }
}
