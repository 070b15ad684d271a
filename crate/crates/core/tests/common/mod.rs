//! Shared helpers for the integration tests: gradient-check cases, brute-force
//! metric oracles and fixture locations.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;

use mlmlab::autodiff::{grad_check, GradCheckConfig, Graph, NodeId, Tensor};
use mlmlab::encoder::{init_params_with_std, masked_loss_graph, Bound, EncoderConfig, EncoderInput, HeadSpec};
use mlmlab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The 50k byte-level vocabulary; `MLMLAB_VOCAB_FIXTURE` points elsewhere.
pub fn vocab_fixture() -> PathBuf {
    match std::env::var_os("MLMLAB_VOCAB_FIXTURE") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/byte-bpe-50k.json"),
    }
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// `‖y·r‖²` for a fixed random `r`: a curved scalar that touches every
/// element of `y` with a distinct weight.
pub fn project_loss(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let c = g.value(y).last_dim();
    let rows = g.value(y).len() / c;
    let flat = g.reshape(y, vec![rows, c])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = g.constant(random_tensor(&mut rng, vec![c, 1], 1.0));
    let v = g.matmul(flat, r, false, false)?;
    let q = g.matmul(v, v, true, false)?;
    g.sum(q)
}

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, p| {
            let y = g.matmul(p[0], p[1], false, false)?;
            project_loss(g, y, 1)
        })),
        ("matmul_ta", vec![vec![4, 3], vec![4, 2]], Box::new(|g, p| {
            let y = g.matmul(p[0], p[1], true, false)?;
            project_loss(g, y, 2)
        })),
        ("matmul_tb", vec![vec![3, 4], vec![2, 4]], Box::new(|g, p| {
            let y = g.matmul(p[0], p[1], false, true)?;
            project_loss(g, y, 3)
        })),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 3]], Box::new(|g, p| {
            let y = g.matmul(p[0], p[1], false, false)?;
            project_loss(g, y, 4)
        })),
        ("matmul_batched_tb", vec![vec![2, 3, 4], vec![2, 3, 4]], Box::new(|g, p| {
            let y = g.matmul(p[0], p[1], false, true)?;
            project_loss(g, y, 5)
        })),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, p| {
            let y = g.add(p[0], p[1])?;
            project_loss(g, y, 6)
        })),
        ("add_bias", vec![vec![3, 4], vec![4]], Box::new(|g, p| {
            let y = g.add_bias(p[0], p[1])?;
            project_loss(g, y, 7)
        })),
        ("scale", vec![vec![3, 4]], Box::new(|g, p| {
            let y = g.scale(p[0], -0.7)?;
            project_loss(g, y, 8)
        })),
        ("embedding", vec![vec![5, 3]], Box::new(|g, p| {
            let y = g.embedding(p[0], &[4, 0, 4, 2])?;
            project_loss(g, y, 9)
        })),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], Box::new(|g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-12)?;
            project_loss(g, y, 10)
        })),
        ("gelu", vec![vec![3, 4]], Box::new(|g, p| {
            let y = g.gelu(p[0])?;
            project_loss(g, y, 11)
        })),
        ("softmax", vec![vec![3, 4]], Box::new(|g, p| {
            let y = g.softmax(p[0])?;
            project_loss(g, y, 12)
        })),
        ("masked_softmax", vec![vec![2, 4]], Box::new(|g, p| {
            let m = g.add_mask(p[0], vec![true, false, true, true, false, true, true, false])?;
            let y = g.softmax(m)?;
            project_loss(g, y, 13)
        })),
        ("dropout", vec![vec![4, 4]], Box::new(|g, p| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let y = g.dropout(p[0], 0.3, &mut rng)?;
            project_loss(g, y, 14)
        })),
        ("reshape", vec![vec![2, 6]], Box::new(|g, p| {
            let y = g.reshape(p[0], vec![3, 4])?;
            project_loss(g, y, 15)
        })),
        ("permute", vec![vec![2, 3, 4]], Box::new(|g, p| {
            let y = g.permute(p[0], &[2, 0, 1])?;
            project_loss(g, y, 16)
        })),
        ("gather_rows", vec![vec![4, 3]], Box::new(|g, p| {
            let y = g.gather_rows(p[0], &[3, 1, 3])?;
            project_loss(g, y, 17)
        })),
        ("cross_entropy_masked", vec![vec![4, 5]], Box::new(|g, p| {
            g.cross_entropy_masked(p[0], &[1, 4, 0, 2], &[true, false, true, true])
        })),
        ("sum", vec![vec![3, 4]], Box::new(|g, p| {
            let y = g.gelu(p[0])?;
            g.sum(y)
        })),
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], Box::new(|g, p| {
            let y = g.linear(p[0], p[1], p[2])?;
            project_loss(g, y, 18)
        })),
    ]
}

/// Max relative gradient error per primitive (float64, central differences,
/// eps 1e-6).
pub fn primitive_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    primitive_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let params: Vec<Tensor<f64>> = shapes.into_iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect();
            let report = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
            (name, report.max_rel_error)
        })
        .collect()
}

/// Max relative gradient error of the whole micro encoder plus masked
/// cross-entropy, for an MLM head and a small linear head.
pub fn encoder_gradient_errors() -> Vec<(String, f64)> {
    let cfg = EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 4,
        ffn_dim: 8,
        max_seq_len: 4,
        vocab_size: 7,
        dropout: 0.0,
    };
    let ids = [1u32, 5, 2, 0, 3, 6, 4, 0];
    let attention = [true, true, true, false, true, true, true, true];
    let targets = [0u32, 2, 1, 0, 1, 0, 2, 0];
    let flags = [true, false, true, false, false, true, true, false];
    [HeadSpec::mlm(7), HeadSpec::linear(3)]
        .into_iter()
        .map(|head| {
            let params = init_params_with_std::<f64>(&cfg, &head, 3, 0.5).unwrap();
            let report = grad_check(
                |g, nodes| {
                    let p = Bound::new(&params, nodes.to_vec())?;
                    let input = EncoderInput {
                        ids: &ids,
                        attention: &attention,
                        rows: 2,
                        seq_len: 4,
                    };
                    masked_loss_graph(g, &cfg, &head, &p, input, &targets, &flags, None)
                },
                params.tensors(),
                &GradCheckConfig::default(),
            )
            .unwrap();
            (head.to_string(), report.max_rel_error)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// brute-force metric oracles, written from the textbook definitions

pub fn oracle_accuracy(p: &[usize], g: &[usize]) -> f64 {
    let mut hits = 0.0;
    for i in 0..p.len() {
        if p[i] == g[i] {
            hits += 1.0;
        }
    }
    hits / p.len() as f64
}

/// MCC from its covariance form: cov(p, g) / sqrt(var p · var g).
pub fn oracle_mcc(p: &[usize], g: &[usize]) -> f64 {
    let n = p.len() as f64;
    let pf: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    let gf: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    let mp = pf.iter().sum::<f64>() / n;
    let mg = gf.iter().sum::<f64>() / n;
    let cov: f64 = pf.iter().zip(&gf).map(|(a, b)| (a - mp) * (b - mg)).sum();
    let vp: f64 = pf.iter().map(|a| (a - mp).powi(2)).sum();
    let vg: f64 = gf.iter().map(|b| (b - mg).powi(2)).sum();
    if vp == 0.0 || vg == 0.0 {
        0.0
    } else {
        cov / (vp * vg).sqrt()
    }
}

/// Spearman ρ via O(n²) rank counting: rank = 1 + #smaller + (#equal − 1)/2.
pub fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let smaller = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                1.0 + smaller + (equal - 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..x.len() {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx).powi(2);
        dy += (ry[i] - my).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        0.0
    } else {
        num / (dx * dy).sqrt()
    }
}

/// Token-position F1 of two inclusive spans, by enumerating positions.
pub fn oracle_span_f1(p: (usize, usize), g: (usize, usize)) -> f64 {
    let ps: HashSet<usize> = (p.0..=p.1).collect();
    let gs: HashSet<usize> = (g.0..=g.1).collect();
    let common = ps.intersection(&gs).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let prec = common / ps.len() as f64;
    let rec = common / gs.len() as f64;
    2.0 * prec * rec / (prec + rec)
}

/// (miss rate, mean F1 with misses, mean F1 over hits only)
pub fn oracle_miss(p: &[(usize, usize)], g: &[(usize, usize)]) -> (f64, f64, f64) {
    let f1s: Vec<f64> = p.iter().zip(g).map(|(a, b)| oracle_span_f1(*a, *b)).collect();
    let hits: Vec<f64> = f1s.iter().copied().filter(|f| *f > 0.0).collect();
    let n = p.len() as f64;
    (
        (p.len() - hits.len()) as f64 / n,
        f1s.iter().sum::<f64>() / n,
        if hits.is_empty() { 0.0 } else { hits.iter().sum::<f64>() / hits.len() as f64 },
    )
}

/// Outcome of comparing the crate's metrics with the oracles on random
/// instances: worst absolute difference per metric.
pub fn metric_oracle_gaps(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    use mlmlab::metrics::{accuracy, matthews_corr, miss_rate, spearman_rho, Span};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaps = [("accuracy", 0.0f64), ("matthews", 0.0), ("spearman", 0.0), ("span_f1", 0.0), ("miss_rate", 0.0)];
    for _ in 0..instances {
        let n = rng.random_range(2..12);
        let k = rng.random_range(2..5);
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        gaps[0].1 = gaps[0].1.max((accuracy(&p, &g).unwrap() - oracle_accuracy(&p, &g)).abs());

        let pb: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let gb: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        gaps[1].1 = gaps[1].1.max((matthews_corr(&pb, &gb).unwrap() - oracle_mcc(&pb, &gb)).abs());

        // small integer grid so ties are common
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        gaps[2].1 = gaps[2].1.max((spearman_rho(&x, &y).unwrap().r - oracle_spearman(&x, &y)).abs());

        let span = |rng: &mut ChaCha8Rng| {
            let s = rng.random_range(0..10);
            (s, s + rng.random_range(0..4))
        };
        let ps: Vec<(usize, usize)> = (0..n).map(|_| span(&mut rng)).collect();
        let gs: Vec<(usize, usize)> = (0..n).map(|_| span(&mut rng)).collect();
        for (a, b) in ps.iter().zip(&gs) {
            let f = Span::new(a.0, a.1).f1(&Span::new(b.0, b.1));
            gaps[3].1 = gaps[3].1.max((f - oracle_span_f1(*a, *b)).abs());
        }
        let sp: Vec<Span> = ps.iter().map(|a| Span::new(a.0, a.1)).collect();
        let sg: Vec<Span> = gs.iter().map(|a| Span::new(a.0, a.1)).collect();
        let got = miss_rate(&sp, &sg).unwrap();
        let want = oracle_miss(&ps, &gs);
        let d = (got.miss_rate - want.0)
            .abs()
            .max((got.f1_with_miss - want.1).abs())
            .max((got.f1_without_miss - want.2).abs());
        gaps[4].1 = gaps[4].1.max(d);
    }
    gaps.to_vec()
}

// ---------------------------------------------------------------------------
// masking statistics

#[derive(Debug, Default)]
pub struct MaskStats {
    pub eligible: usize,
    pub selected: usize,
    pub mask: usize,
    pub random: usize,
    pub keep: usize,
    /// Unflagged positions whose id or attention changed.
    pub unflagged_changed: usize,
    /// Flagged positions that held a special or padding token.
    pub specials_selected: usize,
    /// Random replacements that drew a special token.
    pub special_replacements: usize,
}

/// Mask a whole synthetic corpus in batches and tally what happened.
pub fn masking_statistics(min_eligible: usize, seed: u64) -> MaskStats {
    use mlmlab::bpe::train_bpe;
    use mlmlab::corpus::{gen_synthetic_corpus, make_batches, SyntheticCorpusSpec, DEFAULT_INVENTORY};
    use mlmlab::masking::{apply_masking, Corruption, MaskingConfig};
    use mlmlab::objective::{build_label_map, ObjectiveSpec};

    let docs = gen_synthetic_corpus(&SyntheticCorpusSpec {
        vocab_size_hint: DEFAULT_INVENTORY,
        size: 8000,
        seed,
    })
    .unwrap();
    let vocab = train_bpe(&docs[..1000], 800).unwrap();
    let labels = build_label_map(&vocab, ObjectiveSpec::Mlm);
    let batches = make_batches(&docs, &vocab, 64, 32, seed).unwrap();
    let mut st = MaskStats::default();
    for (bi, b) in batches.iter().enumerate() {
        let cfg = MaskingConfig {
            seed: seed.wrapping_mul(1000).wrapping_add(bi as u64),
            ..MaskingConfig::default()
        };
        let m = apply_masking(b, &vocab, &labels, &cfg).unwrap();
        for i in 0..b.ids.len() {
            let special = vocab.is_special(b.ids[i]);
            if b.attention[i] && !special {
                st.eligible += 1;
            }
            if m.flags[i] {
                st.selected += 1;
                if special || !b.attention[i] {
                    st.specials_selected += 1;
                }
                match m.corruption[i] {
                    Some(Corruption::Mask) => st.mask += 1,
                    Some(Corruption::Random) => {
                        st.random += 1;
                        if vocab.is_special(m.ids[i]) {
                            st.special_replacements += 1;
                        }
                    }
                    Some(Corruption::Keep) => st.keep += 1,
                    None => panic!("flagged position without a corruption record"),
                }
            } else if m.ids[i] != b.ids[i] || m.attention[i] != b.attention[i] {
                st.unflagged_changed += 1;
            }
        }
        if st.eligible >= min_eligible {
            break;
        }
    }
    st
}
