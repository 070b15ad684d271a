//! BERT-style input corruption with objective-specific targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bpe::{SpecialKind, TokenId, Vocab};
use crate::corpus::Batch;
use crate::objective::{LabelMap, IGNORE_LABEL};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    pub replace_with_mask: f64,
    pub replace_with_random: f64,
    pub keep_original: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            replace_with_mask: 0.8,
            replace_with_random: 0.1,
            keep_original: 0.1,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mask_prob", self.mask_prob),
            ("replace_with_mask", self.replace_with_mask),
            ("replace_with_random", self.replace_with_random),
            ("keep_original", self.keep_original),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let total = self.replace_with_mask + self.replace_with_random + self.keep_original;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("replacement fractions must sum to 1, got {total}")));
        }
        Ok(())
    }
}

/// How a selected position was corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub ids: Vec<TokenId>,
    pub attention: Vec<bool>,
    /// True where the position is a training target.
    pub flags: Vec<bool>,
    /// Label of the original token where flagged, [`IGNORE_LABEL`] elsewhere.
    pub targets: Vec<u32>,
    /// Corruption applied at each flagged position.
    pub corruption: Vec<Option<Corruption>>,
    pub rows: usize,
    pub seq_len: usize,
}

impl MaskedBatch {
    pub fn num_flagged(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

/// Select each eligible position (attended, non-special) with probability
/// `mask_prob` and corrupt it 80/10/10 (by default) to the mask token, a
/// uniformly drawn non-special token, or itself.
pub fn apply_masking(batch: &Batch, vocab: &Vocab, labels: &LabelMap, cfg: &MaskingConfig) -> Result<MaskedBatch> {
    cfg.validate()?;
    if labels.vocab_size() != vocab.len() {
        return Err(Error::LengthMismatch {
            left: labels.vocab_size(),
            right: vocab.len(),
        });
    }
    let mask_id = vocab.require_special(SpecialKind::Mask)?;
    let pool: Vec<TokenId> = (0..vocab.len() as TokenId).filter(|&t| !vocab.is_special(t)).collect();
    if pool.is_empty() {
        return Err(Error::Vocab("no non-special tokens to draw replacements from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = batch.ids.len();
    let mut out = MaskedBatch {
        ids: batch.ids.clone(),
        attention: batch.attention.clone(),
        flags: vec![false; n],
        targets: vec![IGNORE_LABEL; n],
        corruption: vec![None; n],
        rows: batch.rows,
        seq_len: batch.seq_len,
    };
    for i in 0..n {
        let id = batch.ids[i];
        if id as usize >= vocab.len() {
            return Err(Error::TokenOutOfRange { id, size: vocab.len() });
        }
        if !batch.attention[i] || vocab.is_special(id) {
            continue;
        }
        if rng.random::<f64>() >= cfg.mask_prob {
            continue;
        }
        out.flags[i] = true;
        out.targets[i] = labels.label(id);
        let u = rng.random::<f64>();
        let kind = if u < cfg.replace_with_mask {
            out.ids[i] = mask_id;
            Corruption::Mask
        } else if u < cfg.replace_with_mask + cfg.replace_with_random {
            out.ids[i] = pool[rng.random_range(0..pool.len())];
            Corruption::Random
        } else {
            Corruption::Keep
        };
        out.corruption[i] = Some(kind);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{build_label_map, ObjectiveSpec};

    fn setup() -> (Vocab, Batch) {
        let toks = ["<pad>", "<s>", "</s>", "<unk>", "<mask>", "a", "b", "c"];
        let v = Vocab::new(toks.iter().map(|s| s.to_string()).collect(), vec![]).unwrap();
        let ids = vec![5, 6, 7, 2, 0, 0, 5, 5];
        let attention = vec![true, true, true, true, false, false, true, true];
        (v, Batch { ids, attention, rows: 2, seq_len: 4 })
    }

    #[test]
    fn zero_probability_is_identity() {
        let (v, b) = setup();
        let m = build_label_map(&v, ObjectiveSpec::Mlm);
        let cfg = MaskingConfig {
            mask_prob: 0.0,
            ..Default::default()
        };
        let out = apply_masking(&b, &v, &m, &cfg).unwrap();
        assert_eq!(out.ids, b.ids);
        assert_eq!(out.num_flagged(), 0);
    }

    #[test]
    fn full_probability_never_touches_specials() {
        let (v, b) = setup();
        let m = build_label_map(&v, ObjectiveSpec::Mlm);
        let cfg = MaskingConfig {
            mask_prob: 1.0,
            ..Default::default()
        };
        let out = apply_masking(&b, &v, &m, &cfg).unwrap();
        assert_eq!(out.flags, [true, true, true, false, false, false, true, true]);
        for i in 0..8 {
            if out.flags[i] {
                assert_eq!(out.targets[i], b.ids[i]);
                assert!(!v.is_special(out.ids[i]) || out.ids[i] == 4);
            } else {
                assert_eq!(out.ids[i], b.ids[i]);
                assert_eq!(out.targets[i], IGNORE_LABEL);
            }
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        let (v, b) = setup();
        let m = build_label_map(&v, ObjectiveSpec::Mlm);
        let cfg = MaskingConfig {
            replace_with_mask: 0.7,
            ..Default::default()
        };
        assert!(matches!(apply_masking(&b, &v, &m, &cfg), Err(Error::Config(_))));
    }
}
