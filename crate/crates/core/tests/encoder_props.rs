use mlmlab::bpe::train_bpe;
use mlmlab::corpus::{gen_synthetic_corpus, SyntheticCorpusSpec, DEFAULT_INVENTORY};
use mlmlab::encoder::{encode_forward, init_params, EncoderConfig, EncoderInput, HeadSpec, ModelParams};
use mlmlab::objective::ObjectiveSpec;
use mlmlab::trainer::{pretrain, Checkpoint, PretrainConfig};
use proptest::prelude::*;

fn micro() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 8,
        ffn_dim: 16,
        max_seq_len: 12,
        vocab_size: 20,
        dropout: 0.0,
    }
}

fn params() -> ModelParams<f64> {
    init_params(&micro(), &HeadSpec::linear(3), 11).unwrap()
}

fn run(p: &ModelParams<f64>, ids: &[u32], attention: &[bool], rows: usize, seq_len: usize) -> Vec<f64> {
    encode_forward(p, &micro(), EncoderInput { ids, attention, rows, seq_len })
        .unwrap()
        .into_data()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rows_do_not_interact(a in prop::collection::vec(0u32..20, 6), b in prop::collection::vec(0u32..20, 6)) {
        let p = params();
        let att = vec![true; 12];
        let ab = run(&p, &[a.clone(), b.clone()].concat(), &att, 2, 6);
        let ba = run(&p, &[b, a].concat(), &att, 2, 6);
        let h = 8 * 6;
        for i in 0..h {
            prop_assert!((ab[i] - ba[h + i]).abs() < 1e-12);
            prop_assert!((ab[h + i] - ba[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_is_invisible(ids in prop::collection::vec(1u32..20, 1..8), pad in 1usize..4, filler in 0u32..20) {
        let p = params();
        let n = ids.len();
        let plain = run(&p, &ids, &vec![true; n], 1, n);
        let mut padded_ids = ids.clone();
        padded_ids.extend(std::iter::repeat(filler).take(pad));
        let mut att = vec![true; n];
        att.extend(std::iter::repeat(false).take(pad));
        let padded = run(&p, &padded_ids, &att, 1, n + pad);
        for i in 0..n * 8 {
            prop_assert!((plain[i] - padded[i]).abs() < 1e-12);
        }
    }
}

fn tiny_run(seed: u64) -> Checkpoint {
    let docs = gen_synthetic_corpus(&SyntheticCorpusSpec {
        vocab_size_hint: DEFAULT_INVENTORY,
        size: 200,
        seed: 3,
    })
    .unwrap();
    let vocab = train_bpe(&docs, 400).unwrap();
    let mut enc = EncoderConfig::desk(vocab.len());
    enc.max_seq_len = 32;
    let cfg = PretrainConfig {
        total_steps: 6,
        warmup_steps: 2,
        seq_len: 32,
        batch_size: 4,
        seed,
        ..PretrainConfig::desk()
    };
    let objective = ObjectiveSpec::NChars { direction: mlmlab::objective::Direction::Last, n: 2 };
    pretrain(&docs, &vocab, objective, &enc, &cfg).unwrap().checkpoint
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let ck = tiny_run(1);
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    ck.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn pretraining_is_reproducible_per_seed() {
    let a = tiny_run(4).to_bytes().unwrap();
    let b = tiny_run(4).to_bytes().unwrap();
    let c = tiny_run(5).to_bytes().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let bytes = tiny_run(1).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}
