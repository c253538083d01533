//! Routing-by-agreement between head capsules and output capsules.
//!
//! At every token position the `h` attention-head outputs are input
//! capsules of width `d_model / h`. Each one votes for each of the `l`
//! output capsules (width `d_model / l`) through a learned transform, and
//! an iterative routing procedure decides how the votes are combined.
//! Positions are routed independently; all functions operate on a leading
//! position axis.

mod dynamic;
mod em;
pub mod eager;
mod trace;
mod votes;

pub use dynamic::{dynamic_route, squash, SQUASH_EPS};
pub use em::{em_e_step, em_m_step, em_route, EmBetas, MStep, GAUSSIAN_COST_CONST};
pub use trace::{IterationRecord, RoutingTrace};
pub use votes::{compute_votes, is_perfect_square, VoteMode};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Routing iterations when nothing else is configured.
pub const DEFAULT_ITERATIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoutingKind {
    Dynamic,
    Em,
}

impl RoutingKind {
    pub fn name(self) -> &'static str {
        match self {
            RoutingKind::Dynamic => "dynamic",
            RoutingKind::Em => "em",
        }
    }
}

impl std::str::FromStr for RoutingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(RoutingKind::Dynamic),
            "em" => Ok(RoutingKind::Em),
            other => Err(Error::Config(format!("unknown routing kind '{other}'"))),
        }
    }
}

/// Fixed EM hyper-parameters. The learned `β_α`, `β_μ` live with the layer
/// parameters (see [`EmBetas`]).
#[derive(Clone, Debug, PartialEq)]
pub struct EmHyper {
    /// Inverse temperature per iteration.
    pub lambda_schedule: Vec<f64>,
    /// Variance floor; `None` uses the element type's default.
    pub variance_floor: Option<f64>,
}

impl EmHyper {
    /// `λ_t = 0.01 · (t + 1)`.
    pub fn default_schedule(iterations: usize) -> Self {
        EmHyper {
            lambda_schedule: (0..iterations).map(|t| 0.01 * (t + 1) as f64).collect(),
            variance_floor: None,
        }
    }

    pub fn floor<T: Float>(&self) -> f64 {
        self.variance_floor.unwrap_or(T::VARIANCE_FLOOR)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingConfig {
    pub kind: RoutingKind,
    pub d_model: usize,
    /// Input capsules (attention heads).
    pub h: usize,
    /// Output capsules.
    pub l: usize,
    pub iterations: usize,
    pub em: Option<EmHyper>,
    /// Force a vote mode; `None` picks [`RoutingConfig::vote_mode`]'s default.
    pub vote_mode: Option<VoteMode>,
}

impl RoutingConfig {
    pub fn new(kind: RoutingKind, d_model: usize, h: usize, l: usize, iterations: usize) -> Result<Self> {
        let cfg = RoutingConfig {
            kind,
            d_model,
            h,
            l,
            iterations,
            em: (kind == RoutingKind::Em).then(|| EmHyper::default_schedule(iterations)),
            vote_mode: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dynamic(d_model: usize, h: usize, l: usize) -> Result<Self> {
        Self::new(RoutingKind::Dynamic, d_model, h, l, DEFAULT_ITERATIONS)
    }

    pub fn em(d_model: usize, h: usize, l: usize) -> Result<Self> {
        Self::new(RoutingKind::Em, d_model, h, l, DEFAULT_ITERATIONS)
    }

    pub fn d_in(&self) -> usize {
        self.d_model / self.h
    }

    pub fn d_out(&self) -> usize {
        self.d_model / self.l
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.h == 0 || self.l == 0 || self.d_model % self.h != 0 || self.d_model % self.l != 0 {
            return bad(format!(
                "d_model {} must be divisible by input capsules {} and output capsules {}",
                self.d_model, self.h, self.l
            ));
        }
        if self.iterations == 0 {
            return bad("routing iterations must be at least 1".into());
        }
        if self.kind == RoutingKind::Em {
            let Some(em) = &self.em else {
                return bad("EM routing needs EM hyper-parameters".into());
            };
            if em.lambda_schedule.len() != self.iterations {
                return bad(format!(
                    "lambda schedule has {} entries for {} iterations",
                    em.lambda_schedule.len(),
                    self.iterations
                ));
            }
            if em.lambda_schedule.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                return bad("lambda schedule values must be positive".into());
            }
            if em.variance_floor.is_some_and(|f| !(f > 0.0)) {
                return bad("variance floor must be positive".into());
            }
        }
        if self.vote_mode == Some(VoteMode::Pose) {
            self.check_pose()?;
        }
        Ok(())
    }

    fn check_pose(&self) -> Result<()> {
        if self.d_in() != self.d_out() || !is_perfect_square(self.d_in()) {
            return Err(Error::Config(format!(
                "pose votes need equal square capsule widths, got d_in {} and d_out {}",
                self.d_in(),
                self.d_out()
            )));
        }
        Ok(())
    }

    /// Dynamic routing always uses vector votes. EM uses pose-matrix votes
    /// when `l == h` and the capsule width is a perfect square, and falls
    /// back to vector votes otherwise.
    pub fn vote_mode(&self) -> VoteMode {
        if let Some(mode) = self.vote_mode {
            return mode;
        }
        match self.kind {
            RoutingKind::Em if self.l == self.h && is_perfect_square(self.d_in()) => VoteMode::Pose,
            _ => VoteMode::Vector,
        }
    }

    /// Shape of each `W_ij`.
    pub fn transform_shape(&self) -> [usize; 2] {
        match self.vote_mode() {
            VoteMode::Vector => [self.d_in(), self.d_out()],
            VoteMode::Pose => {
                let n = isqrt(self.d_in());
                [n, n]
            }
        }
    }

    pub(crate) fn em_hyper(&self) -> Result<&EmHyper> {
        self.em
            .as_ref()
            .ok_or_else(|| Error::Config("EM routing needs EM hyper-parameters".into()))
    }
}

pub(crate) fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Runs the configured routing on `votes: [P, h, l, d_out]`, returning the
/// output capsules `[P, l, d_out]` and, with `record`, the full trace.
pub fn route<T: Float>(
    g: &mut Graph<T>,
    votes: Var,
    cfg: &RoutingConfig,
    betas: Option<EmBetas>,
    record: bool,
) -> Result<(Var, Option<RoutingTrace<T>>)> {
    match cfg.kind {
        RoutingKind::Dynamic => dynamic_route(g, votes, cfg.iterations, record),
        RoutingKind::Em => {
            let betas = betas.ok_or_else(|| Error::Config("EM routing needs beta parameters".into()))?;
            em_route(g, votes, cfg, betas, record)
        }
    }
}
