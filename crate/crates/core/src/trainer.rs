//! Pretraining: warmup/decay schedule, AdamW, the training loop, and the
//! checkpoint file format.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Tensor};
use crate::bpe::{SpecialKind, Vocab};
use crate::corpus::{batches_from_chunks, pack_chunks, tokenize_corpus, Batch, Document};
use crate::encoder::{bind, decays, init_params, manifest_get, masked_loss_graph, EncoderConfig, EncoderInput, HeadKind, HeadSpec, ModelParams};
use crate::masking::{apply_masking, MaskingConfig};
use crate::objective::{build_label_map, ObjectiveSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seq_len: usize,
    pub mask_prob: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Record the loss every this many updates (the first update is always recorded).
    pub log_every: usize,
    /// Hand a checkpoint to the caller every this many updates (0 = only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl PretrainConfig {
    /// Reference hyperparameters (batch 128, 500k steps, 10k warmup, peak 2e-4).
    pub fn paper() -> Self {
        Self {
            batch_size: 128,
            total_steps: 500_000,
            peak_lr: 2e-4,
            warmup_steps: 10_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-6,
            weight_decay: 0.01,
            dropout: 0.1,
            seq_len: 512,
            mask_prob: 0.15,
            clip_norm: Some(1.0),
            log_every: 1000,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    /// Reference hyperparameters for a given objective: Last Char uses a peak of 1e-4.
    pub fn paper_for(objective: ObjectiveSpec) -> Self {
        let mut cfg = Self::paper();
        if objective == ObjectiveSpec::LastChar29 {
            cfg.peak_lr = 1e-4;
        }
        cfg
    }

    /// Micro-run defaults: batch 16, 2,000 steps, sequence 128, 5% warmup.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            total_steps: 2_000,
            peak_lr: 1e-3,
            warmup_steps: 100,
            seq_len: 128,
            log_every: 10,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 || self.seq_len < 2 {
            return Err(Error::Config("batch_size, total_steps must be positive and seq_len at least 2".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        for (name, v) in [("peak_lr", self.peak_lr), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> Vec<(String, String)> {
        vec![
            ("pretrain.batch_size".into(), self.batch_size.to_string()),
            ("pretrain.total_steps".into(), self.total_steps.to_string()),
            ("pretrain.peak_lr".into(), self.peak_lr.to_string()),
            ("pretrain.warmup_steps".into(), self.warmup_steps.to_string()),
            ("pretrain.adam_beta1".into(), self.adam_beta1.to_string()),
            ("pretrain.adam_beta2".into(), self.adam_beta2.to_string()),
            ("pretrain.adam_eps".into(), self.adam_eps.to_string()),
            ("pretrain.weight_decay".into(), self.weight_decay.to_string()),
            ("pretrain.dropout".into(), self.dropout.to_string()),
            ("pretrain.seq_len".into(), self.seq_len.to_string()),
            ("pretrain.mask_prob".into(), self.mask_prob.to_string()),
            (
                "pretrain.clip_norm".into(),
                self.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string()),
            ),
            ("pretrain.log_every".into(), self.log_every.to_string()),
            ("pretrain.checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("pretrain.seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_manifest(kv: &HashMap<String, String>) -> Result<Self> {
        let clip: String = manifest_get(kv, "pretrain.clip_norm")?;
        Ok(Self {
            batch_size: manifest_get(kv, "pretrain.batch_size")?,
            total_steps: manifest_get(kv, "pretrain.total_steps")?,
            peak_lr: manifest_get(kv, "pretrain.peak_lr")?,
            warmup_steps: manifest_get(kv, "pretrain.warmup_steps")?,
            adam_beta1: manifest_get(kv, "pretrain.adam_beta1")?,
            adam_beta2: manifest_get(kv, "pretrain.adam_beta2")?,
            adam_eps: manifest_get(kv, "pretrain.adam_eps")?,
            weight_decay: manifest_get(kv, "pretrain.weight_decay")?,
            dropout: manifest_get(kv, "pretrain.dropout")?,
            seq_len: manifest_get(kv, "pretrain.seq_len")?,
            mask_prob: manifest_get(kv, "pretrain.mask_prob")?,
            clip_norm: if clip == "none" {
                None
            } else {
                Some(clip.parse().map_err(|_| Error::Checkpoint(format!("invalid clip_norm {clip:?}")))?)
            },
            log_every: manifest_get(kv, "pretrain.log_every")?,
            checkpoint_every: manifest_get(kv, "pretrain.checkpoint_every")?,
            seed: manifest_get(kv, "pretrain.seed")?,
        })
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `total`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize, total: usize) -> Result<f64> {
    if step > total {
        return Err(Error::Config(format!("step {step} beyond total_steps {total}")));
    }
    if warmup > 0 && step <= warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    Ok(peak * (total - step) as f64 / (total - warmup) as f64)
}

pub fn lr_at_step(step: usize, cfg: &PretrainConfig) -> Result<f64> {
    lr_schedule(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&PretrainConfig> for AdamWConfig {
    fn from(c: &PretrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.len()];
        Self {
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One decoupled-decay AdamW update with bias correction. Weight decay
/// skips biases and normalisation parameters. Nothing is modified when any
/// gradient is non-finite.
pub fn adamw_update<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    for ((name, t), g) in params.iter().zip(grads) {
        if g.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                lhs: t.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<bool> = params.names().iter().map(|n| decays(n)).collect();
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let decay = if names[i] { lr * cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j].as_f64();
            let mj = cfg.beta1 * m[j].as_f64() + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j].as_f64() + (1.0 - cfg.beta2) * g * g;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let mut x = p.as_f64();
            x -= decay * x;
            x -= lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *p = T::from_f64(x);
        }
    }
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn push(&mut self, step: usize, loss: f64) {
        debug_assert!(self.points.last().is_none_or(|(s, _)| *s < step));
        self.points.push((step, loss));
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.points {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8] = b"MLMLAB01\n";
const END_MANIFEST: &str = "end_manifest";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub head: HeadSpec,
    pub objective: ObjectiveSpec,
    pub pretrain: Option<PretrainConfig>,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamState<f32>>,
    /// Free-form provenance entries kept verbatim.
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.as_ref().map_or(0, |o| o.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest: Vec<(String, String)> = self.encoder.to_manifest();
        manifest.push(("head".into(), self.head.to_string()));
        manifest.push(("objective".into(), self.objective.to_string()));
        if let Some(p) = &self.pretrain {
            manifest.extend(p.to_manifest());
        }
        for (k, v) in &self.meta {
            manifest.push((format!("meta.{k}"), v.clone()));
        }
        if let Some(o) = &self.optimizer {
            manifest.push(("optimizer.step".into(), o.step.to_string()));
        }
        let mut out = MAGIC.to_vec();
        for (k, v) in &manifest {
            if k.contains(['=', '\n']) || v.contains('\n') || k.trim() != k {
                return Err(Error::Checkpoint(format!("manifest entry {k:?} cannot be stored")));
            }
            writeln!(out, "{k} = {v}").expect("vec write");
        }
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(out, "param {name} {}", dims.join(",")).expect("vec write");
        }
        writeln!(out, "{END_MANIFEST}").expect("vec write");
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(o) = &self.optimizer {
            for buf in o.m.iter().chain(&o.v) {
                for v in buf {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Checkpoint("bad magic header".into()))?;
        let mut kv = HashMap::new();
        let mut meta = Vec::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut pos = 0;
        loop {
            let nl = rest[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Checkpoint("manifest not terminated".into()))?;
            let line = std::str::from_utf8(&rest[pos..pos + nl])
                .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
            pos += nl + 1;
            if line == END_MANIFEST {
                break;
            }
            if let Some(p) = line.strip_prefix("param ") {
                let (name, dims) = p
                    .rsplit_once(' ')
                    .ok_or_else(|| Error::Checkpoint(format!("bad param line {line:?}")))?;
                let dims = if dims.is_empty() {
                    vec![]
                } else {
                    dims.split(',')
                        .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}"))))
                        .collect::<Result<Vec<usize>>>()?
                };
                shapes.push((name.to_string(), dims));
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("bad manifest line {line:?}")))?;
            if let Some(m) = k.strip_prefix("meta.") {
                meta.push((m.to_string(), v.to_string()));
            }
            kv.insert(k.to_string(), v.to_string());
        }
        let encoder = EncoderConfig::from_manifest(&kv)?;
        let head: HeadSpec = manifest_get::<String>(&kv, "head")?
            .parse()
            .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
        let objective: ObjectiveSpec = manifest_get::<String>(&kv, "objective")?
            .parse()
            .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
        let pretrain = if kv.contains_key("pretrain.batch_size") {
            Some(PretrainConfig::from_manifest(&kv)?)
        } else {
            None
        };
        let blob = &rest[pos..];
        let mut floats = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        if blob.len() % 4 != 0 {
            return Err(Error::Checkpoint("blob length not a multiple of 4".into()));
        }
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let has_opt = kv.contains_key("optimizer.step");
        let expected = if has_opt { 3 * total } else { total };
        if blob.len() / 4 != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} floats after the manifest, found {}",
                blob.len() / 4
            )));
        }
        let mut entries = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            entries.push((name.clone(), Tensor::new(shape.clone(), data)?));
        }
        let params = ModelParams::from_parts(entries)?;
        let optimizer = if has_opt {
            let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f32>>();
            let m: Vec<Vec<f32>> = shapes.iter().map(|(_, s)| take(s.iter().product())).collect();
            let v: Vec<Vec<f32>> = shapes.iter().map(|(_, s)| take(s.iter().product())).collect();
            Some(AdamState {
                m,
                v,
                step: manifest_get(&kv, "optimizer.step")?,
            })
        } else {
            None
        };
        Ok(Self {
            encoder,
            head,
            objective,
            pretrain,
            params,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Training loop

/// Head used for an objective: the full MLM head for MLM, a linear map otherwise.
pub fn head_for(objective: ObjectiveSpec, num_classes: usize) -> HeadSpec {
    match objective {
        ObjectiveSpec::Mlm => HeadSpec::mlm(num_classes),
        _ => HeadSpec::linear(num_classes),
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: LossCurve,
    /// Batches dropped because masking selected no position.
    pub skipped_batches: usize,
}

pub fn pretrain(
    corpus: &[Document],
    vocab: &Vocab,
    objective: ObjectiveSpec,
    encoder: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    pretrain_with(corpus, vocab, objective, encoder, cfg, |_| Ok(()))
}

/// [`pretrain`] with a callback receiving intermediate checkpoints every
/// `checkpoint_every` updates.
pub fn pretrain_with(
    corpus: &[Document],
    vocab: &Vocab,
    objective: ObjectiveSpec,
    encoder: &EncoderConfig,
    cfg: &PretrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut encoder = *encoder;
    encoder.dropout = cfg.dropout;
    encoder.validate()?;
    if encoder.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "encoder vocab_size {} differs from vocabulary size {}",
            encoder.vocab_size,
            vocab.len()
        )));
    }
    if cfg.seq_len > encoder.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: cfg.seq_len,
            max: encoder.max_seq_len,
        });
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let labels = build_label_map(vocab, objective);
    let head = head_for(objective, labels.num_classes());
    let mut params = init_params::<f32>(&encoder, &head, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let adam = AdamWConfig::from(cfg);

    let sep = vocab.require_special(SpecialKind::Sep)?;
    let pad = vocab.require_special(SpecialKind::Pad)?;
    let cls = vocab.require_special(SpecialKind::Cls)?;
    let chunks = pack_chunks(&tokenize_corpus(corpus, vocab), cls, sep, cfg.seq_len);
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    seeds.set_stream(1);
    let mut epoch: Vec<Batch> = Vec::new();
    let mut cursor = 0;

    let mut curve = LossCurve::default();
    let mut skipped = 0usize;
    let mut update = 0usize;
    let make_ckpt = |params: &ModelParams<f32>, state: &AdamState<f32>| Checkpoint {
        encoder,
        head,
        objective,
        pretrain: Some(*cfg),
        params: params.clone(),
        optimizer: Some(state.clone()),
        meta: Vec::new(),
    };
    while update < cfg.total_steps {
        if cursor == epoch.len() {
            epoch = batches_from_chunks(&chunks, pad, cfg.seq_len, cfg.batch_size, seeds.random());
            cursor = 0;
        }
        let batch = &epoch[cursor];
        cursor += 1;
        let mask_cfg = MaskingConfig {
            mask_prob: cfg.mask_prob,
            seed: seeds.random(),
            ..Default::default()
        };
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds.random());
        let masked = apply_masking(batch, vocab, &labels, &mask_cfg)?;
        if masked.num_flagged() == 0 {
            skipped += 1;
            if skipped > 100 * cfg.total_steps {
                return Err(Error::NoMaskedPositions);
            }
            continue;
        }
        let mut g = Graph::<f32>::new();
        let bound = bind(&mut g, &params, |_| false);
        let loss = masked_loss_graph(
            &mut g,
            &encoder,
            &head,
            &bound,
            EncoderInput {
                ids: &masked.ids,
                attention: &masked.attention,
                rows: masked.rows,
                seq_len: masked.seq_len,
            },
            &masked.targets,
            &masked.flags,
            Some(&mut dropout_rng),
        )?;
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss at update {}", update + 1)));
        }
        g.backward(loss)?;
        let mut grads: Vec<Vec<f32>> = bound
            .nodes()
            .iter()
            .zip(params.tensors())
            .map(|(&n, t)| g.grad(n).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
            .collect();
        drop(g);
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at_step(update + 1, cfg)?;
        adamw_update(&mut params, &grads, &mut state, lr, &adam)?;
        update += 1;
        if update == 1 || update % cfg.log_every == 0 || update == cfg.total_steps {
            curve.push(update, loss_value);
        }
        if cfg.checkpoint_every > 0 && update % cfg.checkpoint_every == 0 && update < cfg.total_steps {
            on_checkpoint(&make_ckpt(&params, &state))?;
        }
    }
    let checkpoint = make_ckpt(&params, &state);
    on_checkpoint(&checkpoint)?;
    Ok(PretrainOutcome {
        checkpoint,
        curve,
        skipped_batches: skipped,
    })
}

/// Parameters of the encoder body only (the pretraining head dropped).
pub fn encoder_params(params: &ModelParams<f32>) -> ModelParams<f32> {
    params.without_prefix("head.")
}

/// Whether a head kind carries the transform block.
pub fn has_transform(head: &HeadSpec) -> bool {
    head.kind == HeadKind::Mlm
}
