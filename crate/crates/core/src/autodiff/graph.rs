use rand::Rng;

use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct View {
    rs: isize,
    cs: isize,
}

impl View {
    fn row_major(cols: usize) -> Self {
        View {
            rs: cols as isize,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_step: usize,
    b_step: usize,
    a_view: View,
    b_view: View,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        dims: MatMulDims,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    AddMask {
        x: NodeId,
        allowed: Vec<bool>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    Reshape {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        rows: Vec<usize>,
        targets: Vec<u32>,
        probs: Vec<T>,
    },
    Sum {
        x: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across `backward` calls.
    grad: Option<Vec<T>>,
}

/// Computation graph built by the forward pass and consumed by [`Graph::backward`].
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf, `None` before any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Replace the value of a leaf in place (used by finite differences).
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) || node.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_leaf_value",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    // ------------------------------------------------------------------
    // forward operations
    // ------------------------------------------------------------------

    /// Matrix product `op(a)·op(b)`, where `op` optionally transposes the last two axes.
    ///
    /// Supported forms: `a` of any rank ≥ 2 times a rank-2 `b` (leading axes of
    /// `a` are flattened into rows; `a` must be rank 2 when transposed), and
    /// batched rank-3 × rank-3 with equal batch sizes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 || sb.len() > 3 {
            return Err(mismatch());
        }
        let (batch, a_rows, a_cols, mut out_lead) = if sb.len() == 2 {
            if ta && sa.len() != 2 {
                return Err(mismatch());
            }
            let cols = sa[sa.len() - 1];
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let lead = if ta {
                vec![]
            } else {
                sa[..sa.len() - 1].to_vec()
            };
            (1, rows, cols, lead)
        } else {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(mismatch());
            }
            (sa[0], sa[1], sa[2], vec![sa[0]])
        };
        let (b_rows, b_cols) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
        let (kb, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
        if k != kb {
            return Err(mismatch());
        }
        if sb.len() == 2 {
            if ta {
                out_lead.push(m);
            }
        } else {
            out_lead.push(m);
        }
        out_lead.push(n);
        let a_view = if ta {
            View::row_major(a_cols).t()
        } else {
            View::row_major(a_cols)
        };
        let b_view = if tb {
            View::row_major(b_cols).t()
        } else {
            View::row_major(b_cols)
        };
        let dims = MatMulDims {
            batch,
            m,
            k,
            n,
            a_step: if batch > 1 || sa.len() == 3 { m * k } else { 0 },
            b_step: if sb.len() == 3 { k * n } else { 0 },
            a_view,
            b_view,
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[bi * dims.a_step..],
                    a_view,
                    &bv[bi * dims.b_step..],
                    b_view,
                    &mut out[bi * m * n..],
                    View::row_major(n),
                    T::zero(),
                );
            }
        }
        let value = Tensor::new(out_lead, out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, dims }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// `x + bias` with `bias` broadcast over every row of the trailing axis.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let f = T::from_f64(factor);
        let data = self.value(x).data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Scale { x, factor: f }, rg))
    }

    /// Row lookup: `table[ids[i], :]` for every `i`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    size: rows,
                });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Normalise each row of the trailing axis to zero mean and unit variance, then apply `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Gelu { x }, rg))
    }

    /// Softmax over the trailing axis. Rows that are entirely `-inf` become zeros.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Additive mask: `-inf` wherever `allowed` is false, unchanged elsewhere.
    pub fn add_mask(&mut self, x: NodeId, allowed: Vec<bool>) -> Result<NodeId> {
        if allowed.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "add_mask",
                lhs: self.shape(x).to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&allowed)
            .map(|(&v, &ok)| if ok { v } else { T::neg_infinity() })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::AddMask { x, allowed }, rg))
    }

    /// Inverted dropout. A rate of zero returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        permute_copy(src, &shape, perm, &mut out, false);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Select rows of `x` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        let total = self.value(x).len() / d.max(1);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= total {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![r],
                });
            }
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows whose flag is set.
    ///
    /// `logits` is viewed as `[rows, classes]`. Unflagged rows are never read,
    /// so they contribute nothing to the value or to the gradient.
    pub fn cross_entropy_masked(&mut self, logits: NodeId, targets: &[u32], flags: &[bool]) -> Result<NodeId> {
        let k = self.value(logits).last_dim();
        let rows = self.value(logits).len() / k.max(1);
        if targets.len() != rows || flags.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_masked",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), flags.len()],
            });
        }
        let selected: Vec<usize> = (0..rows).filter(|&r| flags[r]).collect();
        if selected.is_empty() {
            return Err(Error::NoMaskedPositions);
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(selected.len() * k);
        let mut picked = Vec::with_capacity(selected.len());
        let mut total = T::zero();
        for &r in &selected {
            let t = targets[r] as usize;
            if t >= k {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    num_labels: k,
                });
            }
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
            let log_z = max + sum.ln();
            total = total + (log_z - row[t]);
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
            picked.push(targets[r]);
        }
        let count = T::from_f64(selected.len() as f64);
        let value = Tensor::scalar(total / count);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                rows: selected,
                targets: picked,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, rg))
    }

    /// `x·w + b` for `x` of any rank ≥ 2.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w, false, false)?;
        self.add_bias(y, b)
    }

    // ------------------------------------------------------------------
    // reverse pass
    // ------------------------------------------------------------------

    /// Propagate d(loss)/d(node) to every leaf that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`];
    /// intermediate gradients are rebuilt from scratch on every call.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by backward"),
            Op::MatMul { a, b, dims } => {
                let d = *dims;
                let a_val = self.value(*a).data();
                let b_val = self.value(*b).data();
                let c_view = View::row_major(d.n);
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..d.batch {
                        gemm(
                            d.m,
                            d.n,
                            d.k,
                            &g[bi * d.m * d.n..],
                            c_view,
                            &b_val[bi * d.b_step..],
                            d.b_view.t(),
                            &mut ga[bi * d.a_step..],
                            d.a_view,
                            T::one(),
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..d.batch {
                        gemm(
                            d.k,
                            d.m,
                            d.n,
                            &a_val[bi * d.a_step..],
                            d.a_view.t(),
                            &g[bi * d.m * d.n..],
                            c_view,
                            &mut gb[bi * d.b_step..],
                            d.b_view,
                            T::one(),
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(s) = self.slot(grads, id) {
                        s.iter_mut().zip(g).for_each(|(s, &v)| *s = *s + v);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, &v)| *s = *s + v);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    let d = s.len();
                    for row in g.chunks(d) {
                        s.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, &v)| *s = *s + v * *factor);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                if let Some(s) = self.slot(grads, *table) {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        let dst = &mut s[id as usize * d..(id as usize + 1) * d];
                        dst.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                if let Some(s) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] = s[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for grow in g.chunks(d) {
                        s.iter_mut().zip(grow).for_each(|(s, &v)| *s = *s + v);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let dn = T::from_f64(d as f64);
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hrow[j];
                        }
                        let scale = rstd[r] / dn;
                        let dst = &mut s[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            dst[j] = dst[j] + scale * (dn * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, &v), &gv) in s.iter_mut().zip(xv).zip(g) {
                        *s = *s + gv * gelu_grad(v);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(s) = self.slot(grads, *x) {
                    for ((dst, yrow), grow) in s.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot = yrow
                            .iter()
                            .zip(grow)
                            .fold(T::zero(), |acc, (&yy, &gg)| acc + yy * gg);
                        for j in 0..d {
                            dst[j] = dst[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::AddMask { x, allowed } => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, &v), &ok) in s.iter_mut().zip(g).zip(allowed) {
                        if ok {
                            *s = *s + v;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, &v), &m) in s.iter_mut().zip(g).zip(mask) {
                        *s = *s + v * m;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, &v)| *s = *s + v);
                }
            }
            Op::Permute { x, perm } => {
                let in_shape = self.shape(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    // scatter the output gradient back through the same index map
                    permute_copy(g, &in_shape, perm, s, true);
                }
            }
            Op::GatherRows { x, rows } => {
                let d = self.value(*x).last_dim();
                if let Some(s) = self.slot(grads, *x) {
                    for (grow, &r) in g.chunks(d).zip(rows) {
                        let dst = &mut s[r * d..(r + 1) * d];
                        dst.iter_mut().zip(grow).for_each(|(s, &v)| *s = *s + v);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let k = self.value(*logits).last_dim();
                let coef = g[0] / T::from_f64(rows.len() as f64);
                if let Some(s) = self.slot(grads, *logits) {
                    for (idx, &r) in rows.iter().enumerate() {
                        let p = &probs[idx * k..(idx + 1) * k];
                        let dst = &mut s[r * k..(r + 1) * k];
                        for j in 0..k {
                            dst[j] = dst[j] + coef * p[j];
                        }
                        let t = targets[idx] as usize;
                        dst[t] = dst[t] - coef;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|s| *s = *s + g[0]);
                }
            }
        }
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Copy `src` (shape `shape`) into `dst` with axes permuted. With `reverse`
/// set, data flows the other way and is accumulated: `dst` is in the input
/// layout, `src` in the permuted layout.
fn permute_copy<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T], reverse: bool) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the input layout for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let total: usize = shape.iter().product();
    let mut in_off = 0usize;
    for out_off in 0..total {
        if reverse {
            dst[in_off] = dst[in_off] + src[out_off];
        } else {
            dst[out_off] = src[in_off];
        }
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            in_off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            in_off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    c: &mut [T],
    cv: View,
    beta: T,
) {
    let extent = |v: View, r: usize, cl: usize| -> usize {
        if r == 0 || cl == 0 {
            0
        } else {
            (r - 1) * v.rs as usize + (cl - 1) * v.cs as usize + 1
        }
    };
    assert!(extent(av, m, k) <= a.len(), "gemm: lhs view out of bounds");
    assert!(extent(bv, k, n) <= b.len(), "gemm: rhs view out of bounds");
    assert!(extent(cv, m, n) <= c.len(), "gemm: output view out of bounds");
    // SAFETY: the asserts above bound every index reachable through the views.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}
