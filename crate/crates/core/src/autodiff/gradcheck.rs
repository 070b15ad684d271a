use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates checked per parameter tensor; tensors at or below this size are checked exhaustively.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords_per_param: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>], with_grad: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    if g.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape(loss).to_vec()));
    }
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {value}")));
    }
    let mut grads = Vec::new();
    if with_grad {
        g.backward(loss)?;
        for (id, p) in ids.iter().zip(params) {
            grads.push(
                g.grad(*id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.len()]),
            );
        }
    }
    Ok((value, grads))
}

/// Compare reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives a fresh graph and the parameter nodes and must return a scalar
/// loss node; it is re-run for every perturbation, so it has to be
/// deterministic. The error for one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(cfg.eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {}", cfg.eps)));
    }
    let (_, analytic) = evaluate(&f, params, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= cfg.max_coords_per_param {
            (0..p.len()).collect()
        } else {
            let mut c = sample(&mut rng, p.len(), cfg.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + cfg.eps;
            let (plus, _) = evaluate(&f, &work, false)?;
            work[pi].data_mut()[c] = orig - cfg.eps;
            let (minus, _) = evaluate(&f, &work, false)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[pi][c];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {pi} at {c}")));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, c);
            }
        }
    }
    Ok(report)
}
