use std::f64::consts::PI;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::trace::{IterationRecord, RoutingTrace};
use super::{RoutingConfig, RoutingKind};

/// `(1 + ln 2π) / 2`, the per-dimension Gaussian cost offset.
pub const GAUSSIAN_COST_CONST: f64 = 0.5 * (1.0 + 1.837_877_066_409_345_3);

/// Lower bound on the assignment mass `Σ_i c_ij` used as a divisor.
const MASS_FLOOR: f64 = 1e-12;

/// Learned per-output-capsule scalars, each `[l]`.
#[derive(Clone, Copy, Debug)]
pub struct EmBetas {
    pub alpha: Var,
    pub mu: Var,
}

/// Output of one M-step.
#[derive(Clone, Copy, Debug)]
pub struct MStep {
    /// Means `μ`, `[P, l, d]`; these double as the output capsules.
    pub mu: Var,
    /// Floored variances `σ²`, `[P, l, d]`.
    pub var: Var,
    /// `ln α`, `[P, l]`.
    pub log_alpha: Var,
    /// `α`, `[P, l]`.
    pub alpha: Var,
    /// Per-dimension costs, `[P, l, d]`.
    pub cost: Var,
}

/// Gaussian fit of each output capsule with the assignments `c` held fixed,
/// followed by the activation `α_j = logistic(λ(β_α − β_μ Σ_i c_ij − Σ_h cost_j^h))`.
pub fn em_m_step<T: Float>(
    g: &mut Graph<T>,
    votes: Var,
    c: Var,
    betas: EmBetas,
    lambda: f64,
    variance_floor: f64,
) -> Result<MStep> {
    let (p, h, l, d) = dims(g, votes, "em_m_step")?;
    if g.shape(c) != [p, h, l] {
        return Err(Error::shape("em_m_step", &[p, h, l], g.shape(c)));
    }
    for b in [betas.alpha, betas.mu] {
        if g.shape(b) != [l] {
            return Err(Error::shape("em_m_step", &[l], g.shape(b)));
        }
    }
    let c4 = g.reshape(c, &[p, h, l, 1])?;
    let mass = g.sum_axis(c, 1, false)?;
    let mass = g.clamp_min(mass, MASS_FLOOR)?;
    let mass3 = g.reshape(mass, &[p, l, 1])?;

    let weighted = g.mul(c4, votes)?;
    let num = g.sum_axis(weighted, 1, false)?;
    let mu = g.div(num, mass3)?;

    let mu4 = g.reshape(mu, &[p, 1, l, d])?;
    let diff = g.sub(votes, mu4)?;
    let sq = g.square(diff)?;
    let wsq = g.mul(c4, sq)?;
    let spread = g.sum_axis(wsq, 1, false)?;
    let var = g.div(spread, mass3)?;
    let var = g.clamp_min(var, variance_floor)?;

    let log_var = g.log(var)?;
    let log_sigma = g.scale(log_var, 0.5)?;
    let per_dim = g.add_scalar(log_sigma, GAUSSIAN_COST_CONST)?;
    let cost = g.mul(per_dim, mass3)?;
    let total_cost = g.sum_axis(cost, -1, false)?;

    let usage = g.mul(betas.mu, mass)?;
    let z = g.sub(betas.alpha, usage)?;
    let z = g.sub(z, total_cost)?;
    let z = g.scale(z, lambda)?;
    let log_alpha = g.log_sigmoid(z)?;
    let alpha = g.sigmoid(z)?;
    Ok(MStep { mu, var, log_alpha, alpha, cost })
}

/// Assignment update `c_ij = α_j p_j / Σ_k α_k p_k`, where `p_j` is the
/// product over dimensions of Gaussian densities of `û_{j|i}`. Computed
/// in log space.
pub fn em_e_step<T: Float>(g: &mut Graph<T>, votes: Var, mu: Var, var: Var, alpha: Var) -> Result<Var> {
    let log_alpha = g.log(alpha)?;
    em_e_step_log(g, votes, mu, var, log_alpha)
}

pub(crate) fn em_e_step_log<T: Float>(
    g: &mut Graph<T>,
    votes: Var,
    mu: Var,
    var: Var,
    log_alpha: Var,
) -> Result<Var> {
    let (p, _, l, d) = dims(g, votes, "em_e_step")?;
    if g.shape(mu) != [p, l, d] || g.shape(var) != [p, l, d] {
        return Err(Error::shape("em_e_step", &[p, l, d], g.shape(mu)));
    }
    if g.shape(log_alpha) != [p, l] {
        return Err(Error::shape("em_e_step", &[p, l], g.shape(log_alpha)));
    }
    // Σ_d −½ ln(2π σ²_jd)
    let log_var = g.log(var)?;
    let norm = g.add_scalar(log_var, (2.0 * PI).ln())?;
    let norm = g.sum_axis(norm, -1, false)?;
    let norm = g.scale(norm, -0.5)?;
    let norm = g.reshape(norm, &[p, 1, l])?;

    // Σ_d −(û − μ)² / (2σ²)
    let mu4 = g.reshape(mu, &[p, 1, l, d])?;
    let var4 = g.reshape(var, &[p, 1, l, d])?;
    let diff = g.sub(votes, mu4)?;
    let sq = g.square(diff)?;
    let z = g.div(sq, var4)?;
    let z = g.sum_axis(z, -1, false)?;
    let quad = g.scale(z, -0.5)?;

    let log_p = g.add(quad, norm)?;
    let la = g.reshape(log_alpha, &[p, 1, l])?;
    let logits = g.add(log_p, la)?;
    g.softmax(logits, -1)
}

/// EM routing: uniform initial assignments, then M-step / E-step
/// alternation ending on an M-step. Returns the means `μ` as the output
/// capsules; `α` is only recorded in the trace.
pub fn em_route<T: Float>(
    g: &mut Graph<T>,
    votes: Var,
    cfg: &RoutingConfig,
    betas: EmBetas,
    record: bool,
) -> Result<(Var, Option<RoutingTrace<T>>)> {
    let (p, h, l, _) = dims(g, votes, "em_route")?;
    if (h, l) != (cfg.h, cfg.l) {
        return Err(Error::shape("em_route", &[cfg.h, cfg.l], &[h, l]));
    }
    let hyper = cfg.em_hyper()?;
    if cfg.iterations == 0 || hyper.lambda_schedule.len() != cfg.iterations {
        return Err(Error::Config(format!(
            "{} iterations with a lambda schedule of length {}",
            cfg.iterations,
            hyper.lambda_schedule.len()
        )));
    }
    let floor = hyper.floor::<T>();
    let mut c = g.constant(Tensor::full([p, h, l], T::one() / T::of(l as f64)));
    let mut trace = record.then(|| RoutingTrace {
        kind: RoutingKind::Em,
        iterations: Vec::with_capacity(cfg.iterations),
    });
    let mut out = None;
    for (t, &lambda) in hyper.lambda_schedule.iter().enumerate() {
        let m = em_m_step(g, votes, c, betas, lambda, floor)?;
        if let Some(tr) = trace.as_mut() {
            tr.iterations.push(IterationRecord {
                assignments: g.value(c).clone(),
                outputs: g.value(m.mu).clone(),
                variances: Some(g.value(m.var).clone()),
                activations: Some(g.value(m.alpha).clone()),
            });
        }
        if t + 1 < cfg.iterations {
            c = em_e_step_log(g, votes, m.mu, m.var, m.log_alpha)?;
        }
        out = Some(m.mu);
    }
    Ok((out.expect("at least one iteration"), trace))
}

fn dims<T: Float>(g: &Graph<T>, votes: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *g.shape(votes) {
        [p, h, l, d] => Ok((p, h, l, d)),
        ref s => Err(Error::invalid(op, format!("votes must be [P, h, l, d], got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::eager;

    #[test]
    fn cost_constant() {
        assert!((GAUSSIAN_COST_CONST - (1.0 + (2.0 * PI).ln()) / 2.0).abs() < 1e-15);
        assert!((GAUSSIAN_COST_CONST - 1.41894).abs() < 1e-5);
    }

    fn m_step(votes: &Tensor<f64>, c: &Tensor<f64>, lambda: f64, floor: f64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let l = votes.shape()[2];
        let mut g = Graph::new();
        let v = g.constant(votes.clone());
        let cv = g.constant(c.clone());
        let betas = EmBetas {
            alpha: g.constant(Tensor::zeros([l])),
            mu: g.constant(Tensor::zeros([l])),
        };
        let m = em_m_step(&mut g, v, cv, betas, lambda, floor).unwrap();
        (g.value(m.mu).clone(), g.value(m.var).clone(), g.value(m.cost).clone(), g.value(m.alpha).clone())
    }

    #[test]
    fn degenerate_cluster_hits_variance_floor() {
        let votes = Tensor::<f64>::full([1, 3, 2, 2], 0.75);
        let c = Tensor::full([1, 3, 2], 0.5);
        let (mu, var, _, _) = m_step(&votes, &c, 0.01, 1e-8);
        assert!(mu.data().iter().all(|&m| (m - 0.75).abs() < 1e-15));
        assert!(var.data().iter().all(|&s| s == 1e-8));
    }

    #[test]
    fn two_vote_hand_example() {
        // h = 2, l = 2, d = 1; both capsules receive votes 0 and 2 with c = 1/2.
        let votes = Tensor::<f64>::from_f64([1, 2, 2, 1], &[0.0, 0.0, 2.0, 2.0]).unwrap();
        let c = Tensor::full([1, 2, 2], 0.5);
        let (mu, var, cost, _) = m_step(&votes, &c, 0.01, 1e-8);
        assert!(mu.data().iter().all(|&m| (m - 1.0).abs() < 1e-15));
        assert!(var.data().iter().all(|&s| (s - 1.0).abs() < 1e-15));
        assert!(cost.data().iter().all(|&k| (k - 1.418_938_533_204_672_7).abs() < 1e-12));
    }

    #[test]
    fn tiny_lambda_gives_half_activation() {
        let votes = Tensor::<f64>::from_fn([2, 3, 2, 4], |k| (k as f64 * 0.7).sin() * 3.0);
        let c = Tensor::full([2, 3, 2], 0.5);
        let (_, _, _, alpha) = m_step(&votes, &c, 1e-12, 1e-8);
        assert!(alpha.data().iter().all(|&a| (a - 0.5).abs() < 1e-9));
    }

    fn e_step(votes: &Tensor<f64>, mu: &Tensor<f64>, var: &Tensor<f64>, alpha: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let ids = [votes, mu, var, alpha].map(|t| g.constant(t.clone()));
        let c = em_e_step(&mut g, ids[0], ids[1], ids[2], ids[3]).unwrap();
        g.value(c).clone()
    }

    #[test]
    fn equal_densities_give_activation_weights() {
        // Every output capsule has the same Gaussian and the same vote.
        let votes = Tensor::<f64>::full([1, 2, 3, 2], 0.3);
        let mu = Tensor::full([1, 3, 2], 0.1);
        let var = Tensor::full([1, 3, 2], 0.4);
        let alpha = Tensor::from_f64([1, 3], &[0.2, 0.5, 0.9]).unwrap();
        let c = e_step(&votes, &mu, &var, &alpha);
        for i in 0..2 {
            for (j, a) in [0.2, 0.5, 0.9].iter().enumerate() {
                assert!((c.at(&[0, i, j]) - a / 1.6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sharp_gaussian_captures_its_vote() {
        let votes = Tensor::<f64>::from_f64([1, 1, 3, 1], &[1.0, 1.0, 1.0]).unwrap();
        let mu = Tensor::from_f64([1, 3, 1], &[1.0, 5.0, -5.0]).unwrap();
        let var = Tensor::from_f64([1, 3, 1], &[1e-4, 1.0, 1.0]).unwrap();
        let alpha = Tensor::full([1, 3], 0.5);
        let c = e_step(&votes, &mu, &var, &alpha);
        // Oracle: compare log-densities directly.
        let logp = |m: f64, s2: f64| -0.5 * (2.0 * PI * s2).ln() - (1.0 - m).powi(2) / (2.0 * s2);
        let lp = [logp(1.0, 1e-4), logp(5.0, 1.0), logp(-5.0, 1.0)];
        let mx = lp.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = lp.iter().map(|x| (x - mx).exp()).sum();
        for j in 0..3 {
            assert!((c.at(&[0, 0, j]) - (lp[j] - mx).exp() / z).abs() < 1e-12);
        }
        assert!(c.at(&[0, 0, 0]) > 0.9999);
    }

    #[test]
    fn far_votes_never_underflow_to_nan() {
        // Every density underflows in linear space.
        let votes = Tensor::<f64>::from_f64([1, 1, 2, 1], &[1e3, 1e3]).unwrap();
        let mu = Tensor::from_f64([1, 2, 1], &[0.0, 1.0]).unwrap();
        let var = Tensor::full([1, 2, 1], 1e-3);
        let c = e_step(&votes, &mu, &var, &Tensor::full([1, 2], 0.5));
        assert!(c.is_finite());
        assert!((c.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_output_capsule_gets_everything() {
        let votes = Tensor::<f64>::from_fn([2, 3, 1, 2], |k| k as f64);
        let mu = Tensor::full([2, 1, 2], 0.0);
        let var = Tensor::full([2, 1, 2], 1.0);
        let c = e_step(&votes, &mu, &var, &Tensor::full([2, 1], 0.3));
        assert!(c.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn one_iteration_is_uniform_average() {
        let votes = Tensor::<f64>::from_fn([2, 4, 3, 2], |k| (k as f64 * 1.3).cos());
        let cfg = RoutingConfig::new(RoutingKind::Em, 12, 4, 3, 1).unwrap();
        let (v, trace) = eager::em_route(&votes, &cfg, &Tensor::zeros([3]), &Tensor::zeros([3])).unwrap();
        for p in 0..2 {
            for j in 0..3 {
                for c in 0..2 {
                    let mean = (0..4).map(|i| votes.at(&[p, i, j, c])).sum::<f64>() / 4.0;
                    assert!((v.at(&[p, j, c]) - mean).abs() < 1e-12);
                }
            }
        }
        assert_eq!(trace.iterations.len(), 1);
    }

    #[test]
    fn identical_votes_reproduce_the_shared_vote() {
        let shared = [0.4, -0.2, 0.9, 0.1];
        let votes = Tensor::<f64>::from_fn([1, 4, 4, 1], |k| shared[k % 4]);
        let cfg = RoutingConfig::new(RoutingKind::Em, 4, 4, 4, 3).unwrap();
        let (v, _) = eager::em_route(&votes, &cfg, &Tensor::zeros([4]), &Tensor::zeros([4])).unwrap();
        for j in 0..4 {
            assert!((v.at(&[0, j, 0]) - shared[j]).abs() < 1e-12);
        }
    }
}
