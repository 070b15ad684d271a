//! Analytic training-cost model.
//!
//! Counts 2 FLOPs per multiply-add for every matrix product in the encoder
//! and head. Elementwise work (norms, activations, softmax, residuals) is
//! excluded unless requested.

use std::path::Path;

use crate::encoder::{EncoderConfig, HeadKind, HeadSpec};
use crate::objective::{csv_err, csv_reader, csv_writer, Direction, ObjectiveSpec};
use crate::{Error, Result};

/// Which sequence positions the objective head is evaluated at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadScope {
    /// Every position (what a standard implementation computes).
    AllPositions,
    /// Only the given fraction of positions.
    MaskedPositions(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsOptions {
    pub head_scope: HeadScope,
    /// Add elementwise operations to the matrix-product count.
    pub elementwise: bool,
}

impl Default for FlopsOptions {
    fn default() -> Self {
        Self {
            head_scope: HeadScope::AllPositions,
            elementwise: false,
        }
    }
}

/// FLOPs for one sequence's forward pass, split by component, plus the
/// training totals once [`estimate_training_flops`] has filled them in.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlopsBreakdown {
    pub embedding: f64,
    pub attention: f64,
    pub ffn: f64,
    pub head: f64,
    pub multiplier: f64,
    pub steps: u64,
    pub batch_size: u64,
    pub grand_total: f64,
}

impl FlopsBreakdown {
    pub fn forward_total(&self) -> f64 {
        self.embedding + self.attention + self.ffn + self.head
    }
}

// elementwise costs per element, used only with `elementwise`
const LN_PER_ELEM: f64 = 5.0;
const GELU_PER_ELEM: f64 = 8.0;
const SOFTMAX_PER_ELEM: f64 = 5.0;

pub fn estimate_forward_flops(cfg: &EncoderConfig, head: &HeadSpec, seq_len: usize, opts: &FlopsOptions) -> Result<FlopsBreakdown> {
    cfg.validate()?;
    let s = seq_len as f64;
    let h = cfg.hidden_dim as f64;
    let f = cfg.ffn_dim as f64;
    let a = cfg.num_heads as f64;
    let l = cfg.num_layers as f64;
    let k = head.num_classes as f64;
    let positions = match opts.head_scope {
        HeadScope::AllPositions => s,
        HeadScope::MaskedPositions(frac) => {
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::Config(format!("masked fraction {frac} outside [0, 1]")));
            }
            frac * s
        }
    };

    // Q, K, V, O projections and the score / context products
    let mut attention = l * (8.0 * s * h * h + 4.0 * s * s * h);
    let mut ffn = l * 4.0 * s * h * f;
    let transform = match head.kind {
        HeadKind::Mlm => 2.0 * h * h,
        HeadKind::Linear => 0.0,
    };
    let mut head_flops = positions * (transform + 2.0 * h * k);
    let mut embedding = 0.0;

    if opts.elementwise {
        // token + position add, embedding norm
        embedding += s * h * (1.0 + LN_PER_ELEM);
        // biases (q, v, o), score scaling, softmax, residual, norm
        attention += l * (3.0 * s * h + a * s * s * (1.0 + SOFTMAX_PER_ELEM) + s * h * (1.0 + LN_PER_ELEM));
        // biases, activation, residual, norm
        ffn += l * (s * f * (1.0 + GELU_PER_ELEM) + s * h * (2.0 + LN_PER_ELEM));
        head_flops += positions * k;
        if head.kind == HeadKind::Mlm {
            head_flops += positions * h * (1.0 + GELU_PER_ELEM + LN_PER_ELEM);
        }
    }
    Ok(FlopsBreakdown {
        embedding,
        attention,
        ffn,
        head: head_flops,
        multiplier: 1.0,
        steps: 1,
        batch_size: 1,
        grand_total: 0.0,
    })
}

/// Forward FLOPs per sequence × batch × steps × multiplier (3 by
/// convention: the backward pass costs about twice the forward pass).
pub fn estimate_training_flops(forward: &FlopsBreakdown, steps: u64, batch_size: u64, multiplier: f64) -> Result<FlopsBreakdown> {
    if multiplier < 1.0 {
        return Err(Error::Config(format!("backward multiplier must be at least 1, got {multiplier}")));
    }
    Ok(FlopsBreakdown {
        multiplier,
        steps,
        batch_size,
        grand_total: forward.forward_total() * batch_size as f64 * steps as f64 * multiplier,
        ..*forward
    })
}

/// `100 × (value − baseline) / baseline`, unrounded.
pub fn relative_difference(value: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * (value - baseline) / baseline)
}

/// Round to `decimals` places, halves away from zero.
pub fn round_half_away(x: f64, decimals: i32) -> f64 {
    let p = 10f64.powi(decimals);
    let r = (x * p).round() / p;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Class counts of the 50,265-token byte-level reference vocabulary (the
/// same surface forms as the 50,257-entry file plus eight added specials),
/// keyed by (direction, n). Reproduced from the vocabulary fixture by the
/// test suite.
pub const REFERENCE_VOCAB_SIZE: usize = 50_265;
pub const REFERENCE_CLASS_COUNTS: [(Direction, usize, usize); 12] = [
    (Direction::First, 1, 256),
    (Direction::First, 2, 2_355),
    (Direction::First, 3, 9_502),
    (Direction::First, 4, 20_479),
    (Direction::First, 5, 28_677),
    (Direction::First, 9, 40_125),
    (Direction::Last, 1, 256),
    (Direction::Last, 2, 2_527),
    (Direction::Last, 3, 8_939),
    (Direction::Last, 4, 17_936),
    (Direction::Last, 5, 26_595),
    (Direction::Last, 9, 40_599),
];

pub fn reference_num_classes(objective: ObjectiveSpec) -> Option<usize> {
    match objective {
        ObjectiveSpec::Mlm => Some(REFERENCE_VOCAB_SIZE),
        ObjectiveSpec::FirstChar29 | ObjectiveSpec::LastChar29 => Some(29),
        ObjectiveSpec::NChars { direction, n } => REFERENCE_CLASS_COUNTS
            .iter()
            .find(|(d, m, _)| *d == direction && *m == n)
            .map(|(_, _, c)| *c),
    }
}

/// A full cost setup: encoder shape, sequence length, batch, steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsPreset {
    pub encoder: EncoderConfig,
    pub seq_len: usize,
    pub batch_size: u64,
    pub steps: u64,
    pub multiplier: f64,
    pub options: FlopsOptions,
}

impl FlopsPreset {
    /// 12 × 768 encoder, sequence 512, batch 128, 500k steps.
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::bert_base(REFERENCE_VOCAB_SIZE),
            seq_len: 512,
            batch_size: 128,
            steps: 500_000,
            multiplier: 3.0,
            options: FlopsOptions::default(),
        }
    }

    /// Micro configuration used for CPU runs.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::desk(vocab_size),
            seq_len: 128,
            batch_size: 16,
            steps: 2_000,
            multiplier: 3.0,
            options: FlopsOptions::default(),
        }
    }

    pub fn training_flops(&self, objective: ObjectiveSpec, num_classes: usize) -> Result<FlopsBreakdown> {
        let head = crate::trainer::head_for(objective, num_classes);
        let fwd = estimate_forward_flops(&self.encoder, &head, self.seq_len, &self.options)?;
        estimate_training_flops(&fwd, self.steps, self.batch_size, self.multiplier)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsRow {
    pub objective: ObjectiveSpec,
    pub num_classes: usize,
    pub total_flops: f64,
    /// Relative difference from the MLM row, in percent (negative = cheaper).
    pub relative_reduction_pct: f64,
}

/// FLOPs for each objective plus its relative difference from MLM.
/// `classes` supplies the label-space size of each objective.
pub fn flops_table(preset: &FlopsPreset, objectives: &[(ObjectiveSpec, usize)], mlm_classes: usize) -> Result<Vec<FlopsRow>> {
    let base = preset.training_flops(ObjectiveSpec::Mlm, mlm_classes)?.grand_total;
    objectives
        .iter()
        .map(|&(objective, num_classes)| {
            let total = preset.training_flops(objective, num_classes)?.grand_total;
            Ok(FlopsRow {
                objective,
                num_classes,
                total_flops: total,
                relative_reduction_pct: relative_difference(total, base)?,
            })
        })
        .collect()
}

/// CSV `objective,direction,n,num_classes,total_flops,relative_reduction_pct`.
pub fn write_flops_csv(rows: &[FlopsRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["objective", "direction", "n", "num_classes", "total_flops", "relative_reduction_pct"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.objective.to_string(),
            r.objective.direction().map_or(String::new(), |d| d.as_str().to_string()),
            r.objective.n().map_or(String::new(), |n| n.to_string()),
            r.num_classes.to_string(),
            format!("{:e}", r.total_flops),
            format!("{:.1}", round_half_away(r.relative_reduction_pct, 1)),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read back a file written by [`write_flops_csv`].
pub fn read_flops_csv(path: &Path) -> Result<Vec<FlopsRow>> {
    let mut rdr = csv_reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::Parse(format!("{}:{}: invalid {what}", path.display(), i + 2));
        if rec.len() != 6 {
            return Err(bad("row width"));
        }
        out.push(FlopsRow {
            objective: rec[0].parse().map_err(|_| bad("objective"))?,
            num_classes: rec[3].parse().map_err(|_| bad("num_classes"))?,
            total_flops: rec[4].parse().map_err(|_| bad("total_flops"))?,
            relative_reduction_pct: rec[5].parse().map_err(|_| bad("relative_reduction_pct"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            num_heads: 1,
            hidden_dim: 4,
            ffn_dim: 8,
            max_seq_len: 2,
            vocab_size: 1,
            dropout: 0.0,
        }
    }

    #[test]
    fn micro_hand_count() {
        // attention: 4 projections × 2·s·h·h = 256, scores + context 2 × 2·s·s·h = 64
        // ffn: 2 × 2·s·h·f = 256; head: s × 2·h·1 = 16
        let b = estimate_forward_flops(&micro(), &HeadSpec::linear(1), 2, &FlopsOptions::default()).unwrap();
        assert_eq!((b.attention, b.ffn, b.head, b.embedding), (320.0, 256.0, 16.0, 0.0));
        assert_eq!(b.forward_total(), 592.0);
        let t = estimate_training_flops(&b, 10, 4, 3.0).unwrap();
        assert_eq!(t.grand_total, 592.0 * 120.0);
    }

    #[test]
    fn head_term_is_linear_in_classes() {
        let cfg = EncoderConfig::desk(100);
        let opts = FlopsOptions::default();
        let h1 = estimate_forward_flops(&cfg, &HeadSpec::linear(50), 64, &opts).unwrap().head;
        let h2 = estimate_forward_flops(&cfg, &HeadSpec::linear(100), 64, &opts).unwrap().head;
        assert_eq!(h2, 2.0 * h1);
    }

    #[test]
    fn masked_scope_scales_head_only() {
        let cfg = EncoderConfig::desk(100);
        let all = estimate_forward_flops(&cfg, &HeadSpec::linear(100), 64, &FlopsOptions::default()).unwrap();
        let some = estimate_forward_flops(
            &cfg,
            &HeadSpec::linear(100),
            64,
            &FlopsOptions {
                head_scope: HeadScope::MaskedPositions(0.25),
                elementwise: false,
            },
        )
        .unwrap();
        assert_eq!(some.head * 4.0, all.head);
        assert_eq!(some.attention, all.attention);
    }

    #[test]
    fn relative_difference_examples() {
        assert_eq!(round_half_away(relative_difference(78.9, 80.8).unwrap(), 1), -2.4);
        assert_eq!(round_half_away(relative_difference(88.4, 88.1).unwrap(), 1), 0.3);
        assert_eq!(relative_difference(3.0, 3.0).unwrap(), 0.0);
        assert!(matches!(relative_difference(1.0, 0.0), Err(Error::ZeroBaseline)));
        assert_eq!(round_half_away(-0.04, 1).to_string(), "0");
    }
}
