//! Central finite-difference checks of analytic gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor for the relative error. Below it the comparison is
/// effectively absolute, at `tolerance · REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < tol)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.blocks.extend(other.blocks);
    }
}

/// Options for [`check`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per block, chosen at random.
    pub max_per_block: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: DEFAULT_EPS,
            max_per_block: None,
            seed: 0,
        }
    }
}

/// Compares the gradient of the scalar built by `f` against central
/// differences, for each named input block.
pub fn check<F>(inputs: &[(String, Tensor<f64>)], f: F, opts: &CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (b, (name, t)) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match opts.max_per_block {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = values[b].data()[i];
            values[b].data_mut()[i] = orig + opts.eps;
            let plus = eval(&values)?;
            values[b].data_mut()[i] = orig - opts.eps;
            let minus = eval(&values)?;
            values[b].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic[b].data()[i], numeric));
        }
        report.blocks.push(BlockReport {
            name: name.clone(),
            max_rel_err: worst,
            checked: coords.len(),
        });
    }
    Ok(report)
}
