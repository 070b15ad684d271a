//! Post-norm transformer encoder with two head shapes: the usual MLM head
//! (dense transform, GELU, norm, projection) and a bare linear head.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// 12 layers, 12 heads, 768 hidden, 3072 feed-forward, 512 positions.
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            hidden_dim: 768,
            ffn_dim: 3072,
            max_seq_len: 512,
            vocab_size,
            dropout: 0.1,
        }
    }

    /// Micro configuration for CPU runs.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            max_seq_len: 128,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `key = value` pairs under the `encoder.` prefix.
    pub fn to_manifest(&self) -> Vec<(String, String)> {
        vec![
            ("encoder.num_layers".into(), self.num_layers.to_string()),
            ("encoder.num_heads".into(), self.num_heads.to_string()),
            ("encoder.hidden_dim".into(), self.hidden_dim.to_string()),
            ("encoder.ffn_dim".into(), self.ffn_dim.to_string()),
            ("encoder.max_seq_len".into(), self.max_seq_len.to_string()),
            ("encoder.vocab_size".into(), self.vocab_size.to_string()),
            ("encoder.dropout".into(), self.dropout.to_string()),
        ]
    }

    pub fn from_manifest(kv: &HashMap<String, String>) -> Result<Self> {
        let cfg = Self {
            num_layers: manifest_get(kv, "encoder.num_layers")?,
            num_heads: manifest_get(kv, "encoder.num_heads")?,
            hidden_dim: manifest_get(kv, "encoder.hidden_dim")?,
            ffn_dim: manifest_get(kv, "encoder.ffn_dim")?,
            max_seq_len: manifest_get(kv, "encoder.max_seq_len")?,
            vocab_size: manifest_get(kv, "encoder.vocab_size")?,
            dropout: manifest_get(kv, "encoder.dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn manifest_get<V: FromStr>(kv: &HashMap<String, String>, key: &str) -> Result<V> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("manifest value for `{key}` is invalid: {raw:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Mlm,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn mlm(num_classes: usize) -> Self {
        Self {
            kind: HeadKind::Mlm,
            num_classes,
        }
    }

    pub fn linear(num_classes: usize) -> Self {
        Self {
            kind: HeadKind::Linear,
            num_classes,
        }
    }
}

impl fmt::Display for HeadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            HeadKind::Mlm => "mlm",
            HeadKind::Linear => "linear",
        };
        write!(f, "{k}:{}", self.num_classes)
    }
}

impl FromStr for HeadSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("invalid head spec {s:?}"));
        let (k, n) = s.split_once(':').ok_or_else(bad)?;
        let num_classes: usize = n.parse().map_err(|_| bad())?;
        match k {
            "mlm" => Ok(HeadSpec::mlm(num_classes)),
            "linear" => Ok(HeadSpec::linear(num_classes)),
            _ => Err(bad()),
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_parts(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Drop every parameter under `prefix` (used to swap heads).
    pub fn without_prefix(&self, prefix: &str) -> Self {
        let kept = self
            .iter()
            .filter(|(n, _)| !n.starts_with(prefix))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Self::from_parts(kept).expect("names stay unique")
    }

    pub fn extend(&mut self, other: ModelParams<T>) -> Result<()> {
        for (name, t) in other.names.into_iter().zip(other.tensors) {
            if self.index.contains_key(&name) {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            self.index.insert(name.clone(), self.tensors.len());
            self.names.push(name);
            self.tensors.push(t);
        }
        Ok(())
    }
}

/// Whether weight decay applies: never to biases or normalisation parameters.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains(".norm.") || name.starts_with("norm."))
}

fn shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let mut out = vec![
        ("embeddings.token".to_string(), vec![cfg.vocab_size, h]),
        ("embeddings.position".to_string(), vec![cfg.max_seq_len, h]),
        ("embeddings.norm.gamma".to_string(), vec![h]),
        ("embeddings.norm.beta".to_string(), vec![h]),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layer.{l}.{s}");
        out.extend([
            (p("attention.query.weight"), vec![h, h]),
            (p("attention.query.bias"), vec![h]),
            // no key bias: softmax is invariant to it, so its gradient is identically zero
            (p("attention.key.weight"), vec![h, h]),
            (p("attention.value.weight"), vec![h, h]),
            (p("attention.value.bias"), vec![h]),
            (p("attention.output.weight"), vec![h, h]),
            (p("attention.output.bias"), vec![h]),
            (p("attention.norm.gamma"), vec![h]),
            (p("attention.norm.beta"), vec![h]),
            (p("ffn.in.weight"), vec![h, f]),
            (p("ffn.in.bias"), vec![f]),
            (p("ffn.out.weight"), vec![f, h]),
            (p("ffn.out.bias"), vec![h]),
            (p("ffn.norm.gamma"), vec![h]),
            (p("ffn.norm.beta"), vec![h]),
        ]);
    }
    out
}

/// Shapes of the parameters a head adds on top of the encoder.
pub fn head_shapes(hidden: usize, head: &HeadSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    if head.kind == HeadKind::Mlm {
        out.extend([
            ("head.transform.weight".to_string(), vec![hidden, hidden]),
            ("head.transform.bias".to_string(), vec![hidden]),
            ("head.norm.gamma".to_string(), vec![hidden]),
            ("head.norm.beta".to_string(), vec![hidden]),
        ]);
    }
    out.extend([
        ("head.decoder.weight".to_string(), vec![hidden, head.num_classes]),
        ("head.decoder.bias".to_string(), vec![head.num_classes]),
    ]);
    out
}

/// Initialise parameters for `shapes`: truncated normal (±2σ) weights,
/// zero biases and norm shifts, unit norm gains.
pub fn init_tensors<T: Scalar>(shapes: Vec<(String, Vec<usize>)>, std: f64, seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    let entries = shapes
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".gamma") {
                vec![T::one(); n]
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                vec![T::zero(); n]
            } else {
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break T::from_f64(v);
                        }
                    })
                    .collect()
            };
            (name, Tensor::new(shape, data).expect("shape matches"))
        })
        .collect();
    ModelParams::from_parts(entries).expect("generated names are unique")
}

pub fn init_params<T: Scalar>(cfg: &EncoderConfig, head: &HeadSpec, seed: u64) -> Result<ModelParams<T>> {
    init_params_with_std(cfg, head, seed, INIT_STD)
}

pub fn init_params_with_std<T: Scalar>(cfg: &EncoderConfig, head: &HeadSpec, seed: u64, std: f64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    if head.num_classes == 0 {
        return Err(Error::Config("head needs at least one class".into()));
    }
    let mut all = shapes(cfg);
    all.extend(head_shapes(cfg.hidden_dim, head));
    Ok(init_tensors(all, std, seed))
}

/// Parameter tensors bound into a graph, addressable by name.
pub struct Bound<'a, T> {
    params: &'a ModelParams<T>,
    nodes: Vec<NodeId>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    /// Pair `params` with graph nodes already holding their values, in order.
    pub fn new(params: &'a ModelParams<T>, nodes: Vec<NodeId>) -> Result<Self> {
        if nodes.len() != params.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: nodes.len(),
            });
        }
        Ok(Self { params, nodes })
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.params
            .index_of(name)
            .map(|i| self.nodes[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Add every parameter as a trainable leaf (or as a constant when `frozen`
/// returns true for its name).
pub fn bind<'a, T: Scalar>(g: &mut Graph<T>, params: &'a ModelParams<T>, frozen: impl Fn(&str) -> bool) -> Bound<'a, T> {
    let nodes = params
        .iter()
        .map(|(name, t)| {
            if frozen(name) {
                g.constant(t.clone())
            } else {
                g.param(t.clone())
            }
        })
        .collect();
    Bound { params, nodes }
}

/// Rows × seq_len token ids plus attention flags (false = padding).
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub ids: &'a [u32],
    pub attention: &'a [bool],
    pub rows: usize,
    pub seq_len: usize,
}

/// Build the encoder stack in `g`; returns hidden states `[rows, seq_len, hidden]`.
///
/// Dropout is active only when `rng` is given.
pub fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    p: &Bound<'_, T>,
    input: EncoderInput<'_>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let EncoderInput {
        ids,
        attention,
        rows,
        seq_len,
    } = input;
    if seq_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: seq_len,
            max: cfg.max_seq_len,
        });
    }
    if ids.len() != rows * seq_len || attention.len() != ids.len() {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: vec![rows, seq_len],
            rhs: vec![ids.len(), attention.len()],
        });
    }
    let h = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let d = cfg.head_dim();
    let rate = if rng.is_some() { cfg.dropout } else { 0.0 };
    let mut drop = |g: &mut Graph<T>, x: NodeId| -> Result<NodeId> {
        match rng.as_deref_mut() {
            Some(r) => g.dropout(x, rate, r),
            None => Ok(x),
        }
    };

    let tok = g.embedding(p.node("embeddings.token")?, ids)?;
    let positions: Vec<u32> = (0..rows).flat_map(|_| 0..seq_len as u32).collect();
    let pos = g.embedding(p.node("embeddings.position")?, &positions)?;
    let x = g.add(tok, pos)?;
    let x = g.layer_norm(
        x,
        p.node("embeddings.norm.gamma")?,
        p.node("embeddings.norm.beta")?,
        LAYER_NORM_EPS,
    )?;
    let x = drop(g, x)?;
    let mut x = g.reshape(x, vec![rows, seq_len, h])?;

    let mut allowed = Vec::with_capacity(rows * heads * seq_len * seq_len);
    for r in 0..rows {
        let keys = &attention[r * seq_len..(r + 1) * seq_len];
        for _ in 0..heads * seq_len {
            allowed.extend_from_slice(keys);
        }
    }
    let split = |g: &mut Graph<T>, t: NodeId| -> Result<NodeId> {
        let t = g.reshape(t, vec![rows, seq_len, heads, d])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, vec![rows * heads, seq_len, d])
    };

    for l in 0..cfg.num_layers {
        let n = |s: &str| p.node(&format!("layer.{l}.{s}"));
        let q = g.linear(x, n("attention.query.weight")?, n("attention.query.bias")?)?;
        let k = g.matmul(x, n("attention.key.weight")?, false, false)?;
        let v = g.linear(x, n("attention.value.weight")?, n("attention.value.bias")?)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.matmul(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let scores = g.add_mask(scores, allowed.clone())?;
        let probs = g.softmax(scores)?;
        let probs = drop(g, probs)?;
        let ctx = g.matmul(probs, v, false, false)?;
        let ctx = g.reshape(ctx, vec![rows, heads, seq_len, d])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![rows, seq_len, h])?;
        let out = g.linear(ctx, n("attention.output.weight")?, n("attention.output.bias")?)?;
        let out = drop(g, out)?;
        let res = g.add(x, out)?;
        let x1 = g.layer_norm(res, n("attention.norm.gamma")?, n("attention.norm.beta")?, LAYER_NORM_EPS)?;

        let f = g.linear(x1, n("ffn.in.weight")?, n("ffn.in.bias")?)?;
        let f = g.gelu(f)?;
        let f = g.linear(f, n("ffn.out.weight")?, n("ffn.out.bias")?)?;
        let f = drop(g, f)?;
        let res = g.add(x1, f)?;
        x = g.layer_norm(res, n("ffn.norm.gamma")?, n("ffn.norm.beta")?, LAYER_NORM_EPS)?;
    }
    Ok(x)
}

/// Apply the head to hidden states of any rank ≥ 2; output keeps the
/// leading axes and ends in `num_classes`.
pub fn head_graph<T: Scalar>(g: &mut Graph<T>, head: &HeadSpec, p: &Bound<'_, T>, hidden: NodeId) -> Result<NodeId> {
    let w = p.node("head.decoder.weight")?;
    let ws = g.shape(w).to_vec();
    let hs = g.shape(hidden).to_vec();
    if ws != [*hs.last().unwrap_or(&0), head.num_classes] {
        return Err(Error::ShapeMismatch {
            op: "head",
            lhs: hs,
            rhs: ws,
        });
    }
    let mut x = hidden;
    if head.kind == HeadKind::Mlm {
        x = g.linear(x, p.node("head.transform.weight")?, p.node("head.transform.bias")?)?;
        x = g.gelu(x)?;
        x = g.layer_norm(x, p.node("head.norm.gamma")?, p.node("head.norm.beta")?, LAYER_NORM_EPS)?;
    }
    g.linear(x, w, p.node("head.decoder.bias")?)
}

/// Inference-mode encoder pass (no dropout).
pub fn encode_forward<T: Scalar>(params: &ModelParams<T>, cfg: &EncoderConfig, input: EncoderInput<'_>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, |_| true);
    let h = encode_graph(&mut g, cfg, &p, input, None)?;
    Ok(g.value(h).clone())
}

pub fn head_forward<T: Scalar>(params: &ModelParams<T>, head: &HeadSpec, hidden: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, |_| true);
    let h = g.constant(hidden.clone());
    let out = head_graph(&mut g, head, &p, h)?;
    Ok(g.value(out).clone())
}

/// Masked cross-entropy of the objective head, evaluated only at flagged
/// positions (the head never sees the others).
pub fn masked_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    head: &HeadSpec,
    p: &Bound<'_, T>,
    input: EncoderInput<'_>,
    targets: &[u32],
    flags: &[bool],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let rows: Vec<usize> = flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let hidden = encode_graph(g, cfg, p, input, rng)?;
    let flat = g.reshape(hidden, vec![input.rows * input.seq_len, cfg.hidden_dim])?;
    let picked = g.gather_rows(flat, &rows)?;
    let logits = head_graph(g, head, p, picked)?;
    let picked_targets: Vec<u32> = rows.iter().map(|&r| targets[r]).collect();
    g.cross_entropy_masked(logits, &picked_targets, &vec![true; rows.len()])
}


#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};

    #[test]
    fn full_pipeline_matches_finite_differences() {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 4,
            ffn_dim: 8,
            max_seq_len: 4,
            vocab_size: 7,
            dropout: 0.0,
        };
        for (head, std) in [(HeadSpec::mlm(7), 0.5), (HeadSpec::linear(3), 0.5)] {
            let params = init_params_with_std::<f64>(&cfg, &head, 3, std).unwrap();
            let ids = [1u32, 5, 2, 0, 3, 6, 4, 0];
            let attention = [true, true, true, false, true, true, true, true];
            let targets = [0u32, 2, 1, 0, 1, 0, 2, 0];
            let flags = [true, false, true, false, false, true, true, false];
            let names = params.names().to_vec();
            let report = grad_check(
                |g, nodes| {
                    let p = Bound::new(&params, nodes.to_vec())?;
                    masked_loss_graph(
                        g,
                        &cfg,
                        &head,
                        &p,
                        EncoderInput { ids: &ids, attention: &attention, rows: 2, seq_len: 4 },
                        &targets,
                        &flags,
                        None,
                    )
                },
                params.tensors(),
                &GradCheckConfig::default(),
            )
            .unwrap();
            eprintln!("{head}: {report:?} worst {}", names[report.worst.0]);
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
