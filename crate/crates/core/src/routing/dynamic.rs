use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::trace::{IterationRecord, RoutingTrace};
use super::RoutingKind;

/// Added to `‖s‖²` under the square root so the zero vector squashes to zero.
pub const SQUASH_EPS: f64 = 1e-12;

/// `v = ‖s‖² / (1 + ‖s‖²) · s / ‖s‖` over the last axis.
pub fn squash<T: Float>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    let sq = g.square(s)?;
    let n2 = g.sum_axis(sq, -1, true)?;
    let one_plus = g.add_scalar(n2, 1.0)?;
    let guarded = g.add_scalar(n2, SQUASH_EPS)?;
    let norm = g.sqrt(guarded)?;
    let den = g.mul(one_plus, norm)?;
    let factor = g.div(n2, den)?;
    g.mul(s, factor)
}

/// Dynamic routing over `votes: [P, h, l, d]`.
///
/// Logits `b` start at zero on every call. Each iteration takes
/// `c = softmax_j(b)`, `s_j = Σ_i c_ij û_{j|i}`, `v_j = squash(s_j)` and,
/// except after the last iteration, `b_ij += û_{j|i} · v_j`.
pub fn dynamic_route<T: Float>(
    g: &mut Graph<T>,
    votes: Var,
    iterations: usize,
    record: bool,
) -> Result<(Var, Option<RoutingTrace<T>>)> {
    let shape = g.shape(votes).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid("dynamic_route", format!("votes must be [P, h, l, d], got {shape:?}")));
    }
    if iterations == 0 {
        return Err(Error::Config("routing iterations must be at least 1".into()));
    }
    let (p, h, l, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut logits = g.constant(Tensor::zeros([p, h, l]));
    let mut trace = record.then(|| RoutingTrace {
        kind: RoutingKind::Dynamic,
        iterations: Vec::with_capacity(iterations),
    });
    let mut v = votes;
    for t in 0..iterations {
        let c = g.softmax(logits, -1)?;
        let c4 = g.reshape(c, &[p, h, l, 1])?;
        let weighted = g.mul(c4, votes)?;
        let s = g.sum_axis(weighted, 1, false)?;
        v = squash(g, s)?;
        if let Some(tr) = trace.as_mut() {
            tr.iterations.push(IterationRecord {
                assignments: g.value(c).clone(),
                outputs: g.value(v).clone(),
                variances: None,
                activations: None,
            });
        }
        if t + 1 < iterations {
            let v4 = g.reshape(v, &[p, 1, l, d])?;
            let prod = g.mul(votes, v4)?;
            let agreement = g.sum_axis(prod, -1, false)?;
            logits = g.add(logits, agreement)?;
        }
    }
    Ok((v, trace))
}
