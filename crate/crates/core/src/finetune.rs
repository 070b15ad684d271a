//! Downstream probing: sequence classification and extractive span heads on
//! top of a pretrained encoder, with early stopping and per-seed aggregation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::bpe::{SpecialKind, TokenId, Vocab};
use crate::corpus::{ClassSample, SpanSample};
use crate::encoder::{bind, encode_graph, init_tensors, Bound, EncoderConfig, EncoderInput, ModelParams, INIT_STD};
use crate::metrics::{accuracy, matthews_corr, miss_rate, Span};
use crate::objective::{csv_err, csv_reader, csv_writer, ObjectiveSpec};
use crate::trainer::{adamw_update, clip_grad_norm, lr_schedule, AdamState, AdamWConfig, Checkpoint};
use crate::{Error, Result};

/// Longest answer span considered when decoding, in tokens beyond the start.
pub const MAX_ANSWER_SPAN: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Stop once the dev metric has not improved for this fraction of total steps.
    pub patience_fraction: f64,
    pub dropout: f64,
    pub max_seq_len: usize,
    /// Share of the training set held out for early stopping.
    pub dev_fraction: f64,
    /// Train only the task head (linear probing).
    pub freeze_encoder: bool,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl FinetuneConfig {
    /// Classification reference: batch 32, 20 epochs, lr 3e-5, 6% warmup.
    pub fn glue() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 20,
            lr: 3e-5,
            warmup_fraction: 0.06,
            weight_decay: 0.01,
            patience_fraction: 0.05,
            dropout: 0.1,
            max_seq_len: 128,
            dev_fraction: 0.1,
            freeze_encoder: false,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }

    /// Span reference: batch 24, 10 epochs, sequence 384.
    pub fn squad() -> Self {
        Self {
            batch_size: 24,
            max_epochs: 10,
            max_seq_len: 384,
            ..Self::glue()
        }
    }

    /// Micro-run defaults.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 10,
            lr: 1e-3,
            max_seq_len: 64,
            ..Self::glue()
        }
    }

    /// Micro-run linear probe: the encoder stays frozen and only the task
    /// head trains, so scores reflect what pretraining put into the
    /// first-token representation.
    pub fn probe() -> Self {
        Self {
            max_epochs: 30,
            lr: 1e-2,
            patience_fraction: 0.5,
            freeze_encoder: true,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_seq_len < 3 {
            return Err(Error::Config("finetune batch_size must be positive and max_seq_len at least 3".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("finetune lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [
            ("warmup_fraction", self.warmup_fraction),
            ("patience_fraction", self.patience_fraction),
            ("dev_fraction", self.dev_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Metrics from one fine-tuning run; fields absent for other task kinds are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub accuracy: Option<f64>,
    pub matthews: Option<f64>,
    pub spearman: Option<f64>,
    pub span_f1_with_miss: Option<f64>,
    pub span_f1_without_miss: Option<f64>,
    pub miss_rate: Option<f64>,
}

impl RunMetrics {
    fn named(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("accuracy", self.accuracy),
            ("matthews", self.matthews),
            ("spearman", self.spearman),
            ("span_f1_with_miss", self.span_f1_with_miss),
            ("span_f1_without_miss", self.span_f1_without_miss),
            ("miss_rate", self.miss_rate),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Stat {
            mean,
            std,
            count: values.len(),
        })
    }
}

/// Per-metric mean and spread over seeds for one (objective, task) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub objective: ObjectiveSpec,
    pub num_classes: usize,
    pub task: String,
    pub metrics: Vec<(String, Stat)>,
}

impl MetricReport {
    pub fn aggregate(objective: ObjectiveSpec, num_classes: usize, task: &str, runs: &[RunMetrics]) -> Self {
        let mut metrics = Vec::new();
        for (i, (name, _)) in RunMetrics::default().named().iter().enumerate() {
            let values: Vec<f64> = runs.iter().filter_map(|r| r.named()[i].1).collect();
            if let Some(s) = Stat::of(&values) {
                metrics.push((name.to_string(), s));
            }
        }
        Self {
            objective,
            num_classes,
            task: task.to_string(),
            metrics,
        }
    }

    pub fn get(&self, metric: &str) -> Option<Stat> {
        self.metrics.iter().find(|(m, _)| m == metric).map(|(_, s)| *s)
    }

    pub fn csv_rows(&self) -> Vec<[String; 9]> {
        let kind = match self.objective {
            ObjectiveSpec::Mlm => "mlm",
            ObjectiveSpec::FirstChar29 => "firstchar29",
            ObjectiveSpec::LastChar29 => "lastchar29",
            ObjectiveSpec::NChars { .. } => "nchars",
        };
        let dir = self.objective.direction().map_or("", |d| d.as_str());
        let n = self.objective.n().map_or(String::new(), |n| n.to_string());
        self.metrics
            .iter()
            .map(|(m, s)| {
                [
                    kind.to_string(),
                    dir.to_string(),
                    n.clone(),
                    self.num_classes.to_string(),
                    self.task.clone(),
                    m.clone(),
                    s.mean.to_string(),
                    s.std.to_string(),
                    s.count.to_string(),
                ]
            })
            .collect()
    }
}

pub const METRIC_CSV_HEADER: [&str; 9] = [
    "objective",
    "direction",
    "n",
    "num_classes",
    "task",
    "metric",
    "mean",
    "std",
    "seed_count",
];

/// CSV `objective,direction,n,num_classes,task,metric,mean,std,seed_count`.
pub fn write_metric_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(METRIC_CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        for row in r.csv_rows() {
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a file written by [`write_metric_csv`], grouping rows back into
/// reports in file order.
pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(METRIC_CSV_HEADER) {
        return Err(Error::Parse(format!("{}: not a metric CSV (header {:?})", path.display(), header)));
    }
    let mut out: Vec<MetricReport> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::Parse(format!("{}:{}: invalid {what}", path.display(), i + 2));
        let objective: ObjectiveSpec = if &rec[0] == "nchars" {
            format!("{}:{}", &rec[1], &rec[2]).parse().map_err(|_| bad("objective"))?
        } else {
            rec[0].parse().map_err(|_| bad("objective"))?
        };
        let num_classes: usize = rec[3].parse().map_err(|_| bad("num_classes"))?;
        let stat = Stat {
            mean: rec[6].parse().map_err(|_| bad("mean"))?,
            std: rec[7].parse().map_err(|_| bad("std"))?,
            count: rec[8].parse().map_err(|_| bad("seed_count"))?,
        };
        let task = &rec[4];
        match out.iter_mut().find(|r| r.objective == objective && r.task == task) {
            Some(r) => r.metrics.push((rec[5].to_string(), stat)),
            None => out.push(MetricReport {
                objective,
                num_classes,
                task: task.to_string(),
                metrics: vec![(rec[5].to_string(), stat)],
            }),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// shared machinery

struct Specials {
    cls: TokenId,
    sep: TokenId,
    pad: TokenId,
}

fn specials(vocab: &Vocab) -> Result<Specials> {
    Ok(Specials {
        cls: vocab.require_special(SpecialKind::Cls)?,
        sep: vocab.require_special(SpecialKind::Sep)?,
        pad: vocab.require_special(SpecialKind::Pad)?,
    })
}

/// Right-padded rectangular batch of variable-length sequences.
struct Padded {
    ids: Vec<u32>,
    attention: Vec<bool>,
    rows: usize,
    seq_len: usize,
}

fn pad_batch(seqs: &[&[u32]], pad: u32) -> Padded {
    let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
    let mut ids = Vec::with_capacity(seqs.len() * seq_len);
    let mut attention = Vec::with_capacity(seqs.len() * seq_len);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(pad, seq_len - s.len()));
        attention.extend((0..seq_len).map(|i| i < s.len()));
    }
    Padded {
        ids,
        attention,
        rows: seqs.len(),
        seq_len,
    }
}

impl Padded {
    fn input(&self) -> EncoderInput<'_> {
        EncoderInput {
            ids: &self.ids,
            attention: &self.attention,
            rows: self.rows,
            seq_len: self.seq_len,
        }
    }
}

struct Model {
    cfg: EncoderConfig,
    params: ModelParams<f32>,
}

fn start_model(checkpoint: &Checkpoint, task_head: Vec<(String, Vec<usize>)>, cfg: &FinetuneConfig) -> Result<Model> {
    let mut params = checkpoint.params.without_prefix("head.");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    params.extend(init_tensors(task_head, INIT_STD, rng.random()))?;
    let mut enc = checkpoint.encoder;
    enc.dropout = cfg.dropout;
    Ok(Model { cfg: enc, params })
}

fn max_len(model: &Model, cfg: &FinetuneConfig) -> usize {
    cfg.max_seq_len.min(model.cfg.max_seq_len)
}

/// Generic loop: `loss_fn` builds the loss for a batch of example indices;
/// `score_fn` evaluates the dev split (higher is better).
fn train_loop(
    model: &mut Model,
    n_train: usize,
    cfg: &FinetuneConfig,
    loss_fn: &dyn Fn(&mut Graph<f32>, &Bound<'_, f32>, &EncoderConfig, &[usize], Option<&mut ChaCha8Rng>) -> Result<NodeId>,
    score_fn: &dyn Fn(&Model) -> Result<f64>,
) -> Result<usize> {
    let steps_per_epoch = n_train.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.max_epochs;
    if total == 0 {
        return Ok(0);
    }
    let warmup = ((total as f64) * cfg.warmup_fraction).round() as usize;
    let warmup = warmup.min(total - 1);
    // never stop before a full epoch has gone by without improvement
    let patience = ((total as f64 * cfg.patience_fraction).ceil() as usize).max(steps_per_epoch);
    let eval_every = patience.div_ceil(2).max(1);
    let adam = AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-6,
        weight_decay: cfg.weight_decay,
    };
    let frozen = |name: &str| cfg.freeze_encoder && !name.starts_with("task.");
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut best = (score_fn(model)?, model.params.clone());
    let mut since_best = 0;
    let mut step = 0;
    'outer: for _ in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut g = Graph::<f32>::new();
            let bound = bind(&mut g, &model.params, frozen);
            let loss = loss_fn(&mut g, &bound, &model.cfg, idx, Some(&mut drop_rng))?;
            g.backward(loss)?;
            let mut grads: Vec<Vec<f32>> = bound
                .nodes()
                .iter()
                .zip(model.params.tensors())
                .map(|(&n, t)| g.grad(n).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
                .collect();
            drop(g);
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            step += 1;
            let lr = lr_schedule(step, cfg.lr, warmup, total)?;
            adamw_update(&mut model.params, &grads, &mut state, lr, &adam)?;
            since_best += 1;
            if step % eval_every == 0 || step == total {
                let s = score_fn(model)?;
                if s > best.0 {
                    best = (s, model.params.clone());
                    since_best = 0;
                } else if since_best >= patience {
                    break 'outer;
                }
            }
        }
    }
    model.params = best.1;
    Ok(step)
}

fn split_dev<T: Clone>(train: &[T], cfg: &FinetuneConfig) -> (Vec<T>, Vec<T>) {
    let mut items = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    items.shuffle(&mut rng);
    let n_dev = ((items.len() as f64) * cfg.dev_fraction).round() as usize;
    let n_dev = if cfg.dev_fraction > 0.0 { n_dev.max(1).min(items.len().saturating_sub(1)) } else { 0 };
    let train = items.split_off(n_dev);
    (train, items)
}

// ---------------------------------------------------------------------------
// classification

pub struct ClassifierOutcome {
    pub metrics: RunMetrics,
    pub params: ModelParams<f32>,
    pub encoder: EncoderConfig,
    pub steps: usize,
}

fn encode_class(samples: &[ClassSample], vocab: &Vocab, sp: &Specials, max_len: usize) -> Vec<Vec<u32>> {
    samples
        .iter()
        .map(|s| {
            let mut ids = vec![sp.cls];
            ids.extend(vocab.encode(&s.text).into_iter().take(max_len - 2));
            ids.push(sp.sep);
            ids
        })
        .collect()
}

fn class_logits(
    g: &mut Graph<f32>,
    p: &Bound<'_, f32>,
    cfg: &EncoderConfig,
    batch: &Padded,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let hidden = encode_graph(g, cfg, p, batch.input(), rng.as_deref_mut())?;
    let flat = g.reshape(hidden, vec![batch.rows * batch.seq_len, cfg.hidden_dim])?;
    let rows: Vec<usize> = (0..batch.rows).map(|r| r * batch.seq_len).collect();
    let pooled = g.gather_rows(flat, &rows)?;
    let pooled = match rng {
        Some(r) => g.dropout(pooled, cfg.dropout, r)?,
        None => pooled,
    };
    g.linear(pooled, p.node("task.classifier.weight")?, p.node("task.classifier.bias")?)
}

fn predict_class(model: &Model, seqs: &[Vec<u32>], pad: u32) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = pad_batch(&refs, pad);
        let mut g = Graph::new();
        let bound = bind(&mut g, &model.params, |_| true);
        let logits = class_logits(&mut g, &bound, &model.cfg, &batch, None)?;
        let k = g.value(logits).last_dim();
        for row in g.value(logits).data().chunks(k) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            preds.push(best.0);
        }
    }
    Ok(preds)
}

fn class_metrics(preds: &[usize], golds: &[usize], num_labels: usize) -> Result<RunMetrics> {
    Ok(RunMetrics {
        accuracy: Some(accuracy(preds, golds)?),
        matthews: if num_labels == 2 { Some(matthews_corr(preds, golds)?) } else { None },
        ..Default::default()
    })
}

/// Fine-tune a first-token classifier on `train` and report metrics on `eval`.
pub fn finetune_classifier(
    checkpoint: &Checkpoint,
    vocab: &Vocab,
    train: &[ClassSample],
    eval: &[ClassSample],
    num_labels: usize,
    cfg: &FinetuneConfig,
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if num_labels < 2 {
        return Err(Error::Config("classification needs at least 2 labels".into()));
    }
    if let Some(s) = train.iter().chain(eval).find(|s| s.label >= num_labels) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            num_labels,
        });
    }
    let sp = specials(vocab)?;
    let h = checkpoint.encoder.hidden_dim;
    let mut model = start_model(
        checkpoint,
        vec![
            ("task.classifier.weight".into(), vec![h, num_labels]),
            ("task.classifier.bias".into(), vec![num_labels]),
        ],
        cfg,
    )?;
    let ml = max_len(&model, cfg);
    let (train, dev) = split_dev(train, cfg);
    let train_ids = encode_class(&train, vocab, &sp, ml);
    let train_labels: Vec<u32> = train.iter().map(|s| s.label as u32).collect();
    let dev_ids = encode_class(&dev, vocab, &sp, ml);
    let dev_labels: Vec<usize> = dev.iter().map(|s| s.label).collect();
    let pad = sp.pad;

    let loss_fn = |g: &mut Graph<f32>, p: &Bound<'_, f32>, enc: &EncoderConfig, idx: &[usize], rng: Option<&mut ChaCha8Rng>| {
        let refs: Vec<&[u32]> = idx.iter().map(|&i| train_ids[i].as_slice()).collect();
        let batch = pad_batch(&refs, pad);
        let logits = class_logits(g, p, enc, &batch, rng)?;
        let targets: Vec<u32> = idx.iter().map(|&i| train_labels[i]).collect();
        g.cross_entropy_masked(logits, &targets, &vec![true; idx.len()])
    };
    let score_fn = |m: &Model| -> Result<f64> {
        if dev_ids.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let preds = predict_class(m, &dev_ids, pad)?;
        if num_labels == 2 {
            // headline metric for binary tasks; accuracy breaks ties
            Ok(matthews_corr(&preds, &dev_labels)? + 1e-3 * accuracy(&preds, &dev_labels)?)
        } else {
            accuracy(&preds, &dev_labels)
        }
    };
    let steps = train_loop(&mut model, train_ids.len(), cfg, &loss_fn, &score_fn)?;
    let eval_ids = encode_class(eval, vocab, &sp, ml);
    let golds: Vec<usize> = eval.iter().map(|s| s.label).collect();
    let preds = predict_class(&model, &eval_ids, pad)?;
    Ok(ClassifierOutcome {
        metrics: class_metrics(&preds, &golds, num_labels)?,
        params: model.params,
        encoder: model.cfg,
        steps,
    })
}

// ---------------------------------------------------------------------------
// span extraction

struct SpanExample {
    ids: Vec<u32>,
    /// Positions (in `ids`) of the passage tokens.
    passage: std::ops::Range<usize>,
    gold: Option<Span>,
}

fn encode_span(s: &SpanSample, vocab: &Vocab, sp: &Specials, max_len: usize) -> SpanExample {
    let passage = vocab.encode(&s.passage);
    let question = vocab.encode(&s.question);
    let room = max_len.saturating_sub(3 + question.len().min(max_len / 4)).max(1);
    let p_len = passage.len().min(room);
    let mut ids = vec![sp.cls];
    ids.extend_from_slice(&passage[..p_len]);
    ids.push(sp.sep);
    let q_room = max_len.saturating_sub(ids.len() + 1);
    ids.extend(question.iter().take(q_room));
    ids.push(sp.sep);
    let gold = (s.end < p_len).then(|| Span::new(s.start + 1, s.end + 1));
    SpanExample {
        ids,
        passage: 1..1 + p_len,
        gold,
    }
}

/// Start/end logits `[rows, 2, seq]` with non-passage positions masked.
fn span_logits(
    g: &mut Graph<f32>,
    p: &Bound<'_, f32>,
    cfg: &EncoderConfig,
    examples: &[&SpanExample],
    pad: u32,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(NodeId, usize)> {
    let refs: Vec<&[u32]> = examples.iter().map(|e| e.ids.as_slice()).collect();
    let batch = pad_batch(&refs, pad);
    let hidden = encode_graph(g, cfg, p, batch.input(), rng)?;
    let logits = g.linear(hidden, p.node("task.span.weight")?, p.node("task.span.bias")?)?;
    let logits = g.permute(logits, &[0, 2, 1])?;
    let s = batch.seq_len;
    let mut allowed = Vec::with_capacity(examples.len() * 2 * s);
    for e in examples {
        for _ in 0..2 {
            allowed.extend((0..s).map(|i| e.passage.contains(&i)));
        }
    }
    let logits = g.add_mask(logits, allowed)?;
    Ok((logits, s))
}

/// Best `(start, end)` with `start ≤ end ≤ start + MAX_ANSWER_SPAN` by summed logits.
pub fn decode_span(start_logits: &[f32], end_logits: &[f32], allowed: std::ops::Range<usize>) -> Span {
    let mut best = (f32::NEG_INFINITY, Span::new(allowed.start, allowed.start));
    for s in allowed.clone() {
        for e in s..allowed.end.min(s + MAX_ANSWER_SPAN + 1) {
            let v = start_logits[s] + end_logits[e];
            if v > best.0 {
                best = (v, Span::new(s, e));
            }
        }
    }
    best.1
}

fn predict_spans(model: &Model, examples: &[SpanExample], pad: u32) -> Result<Vec<Span>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let refs: Vec<&SpanExample> = chunk.iter().collect();
        let mut g = Graph::new();
        let bound = bind(&mut g, &model.params, |_| true);
        let (logits, s) = span_logits(&mut g, &bound, &model.cfg, &refs, pad, None)?;
        let data = g.value(logits).data();
        for (r, e) in chunk.iter().enumerate() {
            let base = r * 2 * s;
            out.push(decode_span(&data[base..base + s], &data[base + s..base + 2 * s], e.passage.clone()));
        }
    }
    Ok(out)
}

pub struct SpanOutcome {
    pub metrics: RunMetrics,
    pub params: ModelParams<f32>,
    pub steps: usize,
}

pub fn finetune_span(
    checkpoint: &Checkpoint,
    vocab: &Vocab,
    train: &[SpanSample],
    eval: &[SpanSample],
    cfg: &FinetuneConfig,
) -> Result<SpanOutcome> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let sp = specials(vocab)?;
    let h = checkpoint.encoder.hidden_dim;
    let mut model = start_model(
        checkpoint,
        vec![("task.span.weight".into(), vec![h, 2]), ("task.span.bias".into(), vec![2])],
        cfg,
    )?;
    let ml = max_len(&model, cfg);
    let (train, dev) = split_dev(train, cfg);
    let train_ex: Vec<SpanExample> = train
        .iter()
        .map(|s| encode_span(s, vocab, &sp, ml))
        .filter(|e| e.gold.is_some())
        .collect();
    if train_ex.is_empty() {
        return Err(Error::Empty("span training set after truncation"));
    }
    let dev_ex: Vec<SpanExample> = dev.iter().map(|s| encode_span(s, vocab, &sp, ml)).collect();
    let pad = sp.pad;

    let loss_fn = |g: &mut Graph<f32>, p: &Bound<'_, f32>, enc: &EncoderConfig, idx: &[usize], rng: Option<&mut ChaCha8Rng>| {
        let ex: Vec<&SpanExample> = idx.iter().map(|&i| &train_ex[i]).collect();
        let (logits, _) = span_logits(g, p, enc, &ex, pad, rng)?;
        let mut targets = Vec::with_capacity(2 * ex.len());
        for e in &ex {
            let gold = e.gold.expect("filtered above");
            targets.push(gold.start as u32);
            targets.push(gold.end as u32);
        }
        g.cross_entropy_masked(logits, &targets, &vec![true; targets.len()])
    };
    let score_fn = |m: &Model| -> Result<f64> {
        if dev_ex.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let preds = predict_spans(m, &dev_ex, pad)?;
        let golds: Vec<Span> = dev_ex.iter().map(|e| e.gold.unwrap_or(Span::new(0, 0))).collect();
        Ok(miss_rate(&preds, &golds)?.f1_with_miss)
    };
    let steps = train_loop(&mut model, train_ex.len(), cfg, &loss_fn, &score_fn)?;
    let eval_ex: Vec<SpanExample> = eval.iter().map(|s| encode_span(s, vocab, &sp, ml)).collect();
    let preds = predict_spans(&model, &eval_ex, pad)?;
    // a gold span lost to truncation can never be hit
    let golds: Vec<Span> = eval_ex.iter().map(|e| e.gold.unwrap_or(Span::new(0, 0))).collect();
    let report = miss_rate(&preds, &golds)?;
    Ok(SpanOutcome {
        metrics: RunMetrics {
            span_f1_with_miss: Some(report.f1_with_miss),
            span_f1_without_miss: Some(report.f1_without_miss),
            miss_rate: Some(report.miss_rate),
            ..Default::default()
        },
        params: model.params,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_of_seeds() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.count), (2.0, 1.0, 3));
        assert_eq!(Stat::of(&[5.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn span_decoding_respects_window() {
        let start = [0.0, 5.0, 0.0, 0.0];
        let end = [0.0, 0.0, 0.0, 9.0];
        assert_eq!(decode_span(&start, &end, 1..4), Span::new(1, 3));
        // end before start is never chosen
        let start = [0.0, 0.0, 0.0, 5.0];
        let end = [0.0, 9.0, 0.0, 0.0];
        let s = decode_span(&start, &end, 0..4);
        assert!(s.start <= s.end);
        let wide: Vec<f32> = (0..40).map(|i| if i == 39 { 100.0 } else { 0.0 }).collect();
        let st: Vec<f32> = (0..40).map(|i| if i == 0 { 100.0 } else { 0.0 }).collect();
        let s = decode_span(&st, &wide, 0..40);
        assert!(s.end - s.start <= MAX_ANSWER_SPAN);
    }

    #[test]
    fn report_rows() {
        let runs = [
            RunMetrics {
                accuracy: Some(0.5),
                ..Default::default()
            },
            RunMetrics {
                accuracy: Some(0.7),
                ..Default::default()
            },
        ];
        let r = MetricReport::aggregate(ObjectiveSpec::n_chars(crate::objective::Direction::First, 4).unwrap(), 100, "probe", &runs);
        let rows = r.csv_rows();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0][..6], ["nchars", "first", "4", "100", "probe", "accuracy"]);
        assert_eq!(rows[0][8], "2");
    }
}
