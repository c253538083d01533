use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::RoutingKind;

/// State of one routing iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord<T> {
    /// Assignment probabilities `c`, `[P, h, l]`.
    pub assignments: Tensor<T>,
    /// Output capsules `v` (EM: the means `μ`), `[P, l, d_out]`.
    pub outputs: Tensor<T>,
    /// EM only: `σ²`, `[P, l, d_out]`.
    pub variances: Option<Tensor<T>>,
    /// EM only: activation probabilities `α`, `[P, l]`.
    pub activations: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace<T> {
    pub kind: RoutingKind,
    pub iterations: Vec<IterationRecord<T>>,
}

impl<T: Float> RoutingTrace<T> {
    pub fn positions(&self) -> usize {
        self.iterations.first().map_or(0, |r| r.assignments.shape()[0])
    }

    /// Largest `|Σ_j c_ij − 1|` over every iteration, position and input.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for rec in &self.iterations {
            let l = rec.assignments.shape()[2];
            for row in rec.assignments.data().chunks(l) {
                let s: f64 = row.iter().map(|x| x.as_f64()).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    /// Checks that every assignment row is a probability distribution.
    pub fn check_assignments(&self, tol: f64) -> Result<()> {
        for (t, rec) in self.iterations.iter().enumerate() {
            if let Some(bad) = rec.assignments.data().iter().find(|x| x.as_f64() < 0.0) {
                return Err(Error::invalid("routing_trace", format!("iteration {t}: negative assignment {bad}")));
            }
        }
        let err = self.max_row_sum_error();
        if err > tol {
            return Err(Error::invalid(
                "routing_trace",
                format!("assignment rows deviate from 1 by {err:e} (tolerance {tol:e})"),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> RoutingTrace<U> {
        RoutingTrace {
            kind: self.kind,
            iterations: self
                .iterations
                .iter()
                .map(|r| IterationRecord {
                    assignments: r.assignments.cast(),
                    outputs: r.outputs.cast(),
                    variances: r.variances.as_ref().map(Tensor::cast),
                    activations: r.activations.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }
}
