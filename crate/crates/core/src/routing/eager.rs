//! Tensor-in, tensor-out wrappers for routing without gradient tracking.

use crate::autodiff::Graph;
use crate::error::Result;
use crate::tensor::{Float, Tensor};

use super::{EmBetas, RoutingConfig, RoutingTrace, VoteMode};

pub fn squash<T: Float>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let out = super::squash(&mut g, v)?;
    Ok(g.value(out).clone())
}

pub fn compute_votes<T: Float>(u: &Tensor<T>, transforms: &[Vec<Tensor<T>>], mode: VoteMode) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vu = g.constant(u.clone());
    let w: Vec<Vec<_>> = transforms
        .iter()
        .map(|row| row.iter().map(|t| g.constant(t.clone())).collect())
        .collect();
    let out = super::compute_votes(&mut g, vu, &w, mode)?;
    Ok(g.value(out).clone())
}

pub fn dynamic_route<T: Float>(votes: &Tensor<T>, iterations: usize) -> Result<(Tensor<T>, RoutingTrace<T>)> {
    let mut g = Graph::new();
    let v = g.constant(votes.clone());
    let (out, trace) = super::dynamic_route(&mut g, v, iterations, true)?;
    Ok((g.value(out).clone(), trace.expect("recorded")))
}

pub fn em_route<T: Float>(
    votes: &Tensor<T>,
    cfg: &RoutingConfig,
    beta_alpha: &Tensor<T>,
    beta_mu: &Tensor<T>,
) -> Result<(Tensor<T>, RoutingTrace<T>)> {
    let mut g = Graph::new();
    let v = g.constant(votes.clone());
    let betas = EmBetas {
        alpha: g.constant(beta_alpha.clone()),
        mu: g.constant(beta_mu.clone()),
    };
    let (out, trace) = super::em_route(&mut g, v, cfg, betas, true)?;
    Ok((g.value(out).clone(), trace.expect("recorded")))
}
