mod common;

use mlmlab::bpe::train_bpe;
use mlmlab::corpus::{make_batches, Document};
use mlmlab::masking::{apply_masking, MaskingConfig};
use mlmlab::objective::{build_label_map, ObjectiveSpec, IGNORE_LABEL};
use proptest::prelude::*;

#[test]
fn corpus_scale_rates() {
    let st = common::masking_statistics(100_000, 1);
    assert!(st.eligible >= 100_000, "{st:?}");
    let rate = st.selected as f64 / st.eligible as f64;
    assert!((rate - 0.15).abs() <= 0.005, "{rate}");
    let sel = st.selected as f64;
    for (got, want) in [(st.mask, 0.8), (st.random, 0.1), (st.keep, 0.1)] {
        assert!((got as f64 / sel - want).abs() <= 0.01, "{st:?}");
    }
    assert_eq!(st.unflagged_changed, 0);
    assert_eq!(st.specials_selected, 0);
    assert_eq!(st.special_replacements, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn targets_follow_original_tokens(text in "[a-e ]{5,80}", seed in 0u64..1000) {
        let Ok(doc) = Document::new(text.trim()) else { return Ok(()) };
        let docs = vec![doc];
        let vocab = train_bpe(&docs, 280).unwrap();
        let labels = build_label_map(&vocab, ObjectiveSpec::FirstChar29);
        for b in make_batches(&docs, &vocab, 16, 4, seed).unwrap() {
            let cfg = MaskingConfig { mask_prob: 0.5, seed, ..MaskingConfig::default() };
            let m = apply_masking(&b, &vocab, &labels, &cfg).unwrap();
            let again = apply_masking(&b, &vocab, &labels, &cfg).unwrap();
            prop_assert_eq!(&m, &again);
            for i in 0..b.ids.len() {
                if m.flags[i] {
                    prop_assert_eq!(m.targets[i], labels.label(b.ids[i]));
                } else {
                    prop_assert_eq!(m.targets[i], IGNORE_LABEL);
                    prop_assert_eq!(m.ids[i], b.ids[i]);
                }
            }
        }
    }
}
