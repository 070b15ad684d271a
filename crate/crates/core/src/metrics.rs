//! Evaluation metrics for the probe tasks and the analysis reports.

use std::collections::HashSet;
use std::hash::Hash;

use crate::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::Empty("prediction list"));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Matthews correlation for binary labels (0/1). Any zero marginal gives 0.
pub fn matthews_corr(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let (mut tp, mut tn, mut fp, mut fneg) = (0f64, 0f64, 0f64, 0f64);
    for (&p, &g) in preds.iter().zip(golds) {
        if p > 1 || g > 1 {
            return Err(Error::LabelOutOfRange {
                label: p.max(g),
                num_labels: 2,
            });
        }
        match (p, g) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (1, 0) => fp += 1.0,
            _ => fneg += 1.0,
        }
    }
    let denom = (tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fneg) / denom.sqrt())
}

/// Correlation value plus whether an input was constant (value forced to 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub degenerate: bool,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    Ok(Correlation {
        // one square root: sqrt(a)*sqrt(a) need not round back to a
        r: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// 1-based ranks with ties given their average rank.
pub fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of mid-ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    pearson(&mid_ranks(xs), &mid_ranks(ys))
}

/// Token-overlap F1 between two token sets. Both empty gives 1, one empty 0.
pub fn set_f1<T: Eq + Hash>(pred: &[T], gold: &[T]) -> f64 {
    let p: HashSet<&T> = pred.iter().collect();
    let g: HashSet<&T> = gold.iter().collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let common = p.intersection(&g).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / p.len() as f64;
    let recall = common / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Inclusive token span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlap(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if hi >= lo {
            hi - lo + 1
        } else {
            0
        }
    }

    pub fn f1(&self, gold: &Span) -> f64 {
        let common = self.overlap(gold) as f64;
        if common == 0.0 {
            return 0.0;
        }
        let p = common / self.len() as f64;
        let r = common / gold.len() as f64;
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MissReport {
    /// Fraction of samples whose prediction shares no token with the gold span.
    pub miss_rate: f64,
    /// Mean F1 over all samples.
    pub f1_with_miss: f64,
    /// Mean F1 over non-miss samples (0 when every sample is a miss).
    pub f1_without_miss: f64,
}

pub fn miss_rate(preds: &[Span], golds: &[Span]) -> Result<MissReport> {
    check_lengths(preds.len(), golds.len())?;
    let mut misses = 0usize;
    let mut total = 0.0;
    let mut hit_total = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        let f = p.f1(g);
        total += f;
        if p.overlap(g) == 0 {
            misses += 1;
        } else {
            hit_total += f;
        }
    }
    let n = preds.len();
    let hits = n - misses;
    Ok(MissReport {
        miss_rate: misses as f64 / n as f64,
        f1_with_miss: total / n as f64,
        f1_without_miss: if hits == 0 { 0.0 } else { hit_total / hits as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_fixtures() {
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn rank_correlation_is_exact_on_integer_ranks() {
        // 1 - 6*8/(5*24) = 0.6 with no rounding slack
        let r = spearman_rho(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 5.0, 3.0]).unwrap().r;
        assert_eq!(r, 0.6);
    }

    #[test]
    fn mcc_fixtures() {
        // TP=2, TN=2, FP=1, FN=1
        let p = [1, 1, 1, 0, 0, 0];
        let g = [1, 1, 0, 0, 0, 1];
        assert!((matthews_corr(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(matthews_corr(&[1, 1, 1], &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(matthews_corr(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn spearman_with_ties() {
        assert_eq!(mid_ranks(&[1.0, 2.0, 2.0, 4.0]), [1.0, 2.5, 2.5, 4.0]);
        let r = spearman_rho(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r.r - 0.9486832980505138).abs() < 1e-12, "{r:?}");
        let c = spearman_rho(&[1.0, 1.0], &[1.0, 2.0]).unwrap();
        assert!(c.degenerate && c.r == 0.0);
    }

    #[test]
    fn f1_fixtures() {
        assert!((set_f1(&['b', 'c'], &['b', 'c', 'd']) - 0.8).abs() < 1e-12);
        assert_eq!(set_f1::<u8>(&[], &[]), 1.0);
        assert_eq!(set_f1(&[1], &[]), 0.0);
        assert!((Span::new(1, 2).f1(&Span::new(1, 3)) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn miss_fixtures() {
        let g = [Span::new(0, 1), Span::new(2, 3)];
        let r = miss_rate(&g, &g).unwrap();
        assert_eq!((r.miss_rate, r.f1_with_miss, r.f1_without_miss), (0.0, 1.0, 1.0));
        let p = [Span::new(0, 1), Span::new(5, 6)];
        let r = miss_rate(&p, &g).unwrap();
        assert_eq!((r.miss_rate, r.f1_with_miss, r.f1_without_miss), (0.5, 0.5, 1.0));
    }
}
