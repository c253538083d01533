//! Finite-difference gradient checks of each building block and of the
//! whole model, in 64-bit.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_attention, AttentionMask, HeadProjections, MultiHeadConfig};
use crate::autodiff::{Graph, Var};
use crate::capsule_layer::{capsule_layer_forward, CapsuleLayerConfig, CapsuleLayerParams};
use crate::error::{Error, Result};
use crate::gradcheck::{self, CheckOptions, GradCheckReport};
use crate::model::{Batch, Encoded, Model, ModelConfig, PlacementMap};
use crate::params::{Bindings, ParamStore};
use crate::routing::{self, EmBetas, RoutingConfig, RoutingKind};
use crate::tensor::Tensor;

/// Every check must stay below this relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Squash,
    Attention,
    DynamicRoute,
    EmRoute,
    CapsuleLayer,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 6] = [
        Scope::Squash,
        Scope::Attention,
        Scope::DynamicRoute,
        Scope::EmRoute,
        Scope::CapsuleLayer,
        Scope::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Squash => "squash",
            Scope::Attention => "attention",
            Scope::DynamicRoute => "dynamic_route",
            Scope::EmRoute => "em_route",
            Scope::CapsuleLayer => "capsule_layer",
            Scope::Full => "full",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Scope::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown scope '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-a..a))
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(out, r)?;
    g.sum_all(p)
}

fn named(prefix: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (prefix.to_string(), t)
}

/// Runs one scope with inputs drawn from `seed`.
pub fn run(scope: Scope, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CheckOptions {
        seed,
        ..CheckOptions::default()
    };
    match scope {
        Scope::Squash => {
            let s = uniform(&mut rng, &[6, 8], 1.5);
            let r = uniform(&mut rng, &[6, 8], 1.0);
            gradcheck::check(&[named("s", s)], |g, v| {
                let out = routing::squash(g, v[0])?;
                project(g, out, &r)
            }, &opts)
        }
        Scope::Attention => {
            let (n, q, s, d, h) = (2, 3, 4, 8, 2);
            let dk = d / h;
            let mut inputs = vec![
                named("x", uniform(&mut rng, &[n, q, d], 1.0)),
                named("memory", uniform(&mut rng, &[n, s, d], 1.0)),
            ];
            for w in ["w_q", "w_k", "w_v"] {
                for i in 0..h {
                    inputs.push(named(&format!("{w}.{i}"), uniform(&mut rng, &[d, dk], 0.7)));
                }
            }
            let r = uniform(&mut rng, &[n, q, d], 1.0);
            let valid = vec![vec![true, true, false, true], vec![true, false, false, false]];
            let mask = AttentionMask::padding(&valid, q)?;
            let cfg = MultiHeadConfig::new(d, h)?;
            gradcheck::check(&inputs, |g, v| {
                let proj = HeadProjections {
                    w_q: v[2..2 + h].to_vec(),
                    w_k: v[2 + h..2 + 2 * h].to_vec(),
                    w_v: v[2 + 2 * h..2 + 3 * h].to_vec(),
                };
                let out = multi_head_attention(g, v[0], v[1], v[1], &cfg, &proj, &mask)?;
                project(g, out.concat, &r)
            }, &opts)
        }
        Scope::DynamicRoute => {
            let votes = uniform(&mut rng, &[3, 4, 4, 6], 1.0);
            let r = uniform(&mut rng, &[3, 4, 6], 1.0);
            gradcheck::check(&[named("votes", votes)], |g, v| {
                let (out, _) = routing::dynamic_route(g, v[0], 3, false)?;
                project(g, out, &r)
            }, &opts)
        }
        Scope::EmRoute => {
            let cfg = RoutingConfig::em(16, 4, 4)?;
            let inputs = [
                named("votes", uniform(&mut rng, &[3, 4, 4, 4], 1.0)),
                named("beta_alpha", uniform(&mut rng, &[4], 1.0)),
                named("beta_mu", uniform(&mut rng, &[4], 1.0)),
            ];
            let r = uniform(&mut rng, &[3, 4, 4], 1.0);
            let mut report = gradcheck::check(&inputs, |g, v| {
                let betas = EmBetas { alpha: v[1], mu: v[2] };
                let (out, _) = routing::em_route(g, v[0], &cfg, betas, false)?;
                project(g, out, &r)
            }, &opts)?;
            // Larger λ so the activations visibly steer the assignments.
            let mut sharp = cfg.clone();
            sharp.em.as_mut().expect("em config").lambda_schedule = vec![0.5, 1.0, 1.5];
            let more = gradcheck::check(&inputs, |g, v| {
                let betas = EmBetas { alpha: v[1], mu: v[2] };
                let (out, _) = routing::em_route(g, v[0], &sharp, betas, false)?;
                project(g, out, &r)
            }, &opts)?;
            for mut b in more.blocks {
                b.name = format!("{}@sharp", b.name);
                report.blocks.push(b);
            }
            Ok(report)
        }
        Scope::CapsuleLayer => {
            let mut report = GradCheckReport::default();
            for kind in [RoutingKind::Dynamic, RoutingKind::Em] {
                report.merge(prefixed(kind.name(), capsule_layer_check(kind, &mut rng, &opts)?));
            }
            Ok(report)
        }
        Scope::Full => {
            let mut report = GradCheckReport::default();
            for routing in [None, Some(RoutingKind::Dynamic), Some(RoutingKind::Em)] {
                let name = routing.map_or("none", RoutingKind::name);
                let cfg = ModelConfig {
                    src_vocab: 12,
                    tgt_vocab: 12,
                    max_len: 8,
                    ..ModelConfig::toy(12, routing)
                };
                report.merge(prefixed(name, full_model(&cfg, seed, Some(4))?));
            }
            Ok(report)
        }
    }
}

fn prefixed(prefix: &str, mut r: GradCheckReport) -> GradCheckReport {
    for b in &mut r.blocks {
        b.name = format!("{prefix}/{}", b.name);
    }
    r
}

fn capsule_layer_check(kind: RoutingKind, rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<GradCheckReport> {
    let cfg = CapsuleLayerConfig::new(RoutingConfig::new(kind, 16, 4, 4, 3)?, 12)?;
    let prefix = "cap";
    let store = ParamStore::<f64>::init(&cfg.param_specs(prefix), rng.gen())?;
    let mut inputs: Vec<(String, Tensor<f64>)> =
        (0..4).map(|i| (format!("head.{i}"), uniform(rng, &[2, 3, 4], 1.0))).collect();
    let n_heads = inputs.len();
    for (name, t) in store.iter() {
        // Nonzero biases and betas so every block has a nontrivial gradient.
        let t = if t.data().iter().all(|&x| x == 0.0) { uniform(rng, t.shape(), 0.3) } else { t.clone() };
        inputs.push((name.to_string(), t));
    }
    let r = uniform(rng, &[2, 3, 16], 1.0);
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    gradcheck::check(&inputs, |g, v| {
        let b: Bindings = names[n_heads..].iter().cloned().zip(v[n_heads..].iter().copied()).collect();
        let params = CapsuleLayerParams::from_bindings(&b, prefix, &cfg)?;
        let (out, _) = capsule_layer_forward(g, &v[..n_heads], &params, &cfg, false)?;
        project(g, out, &r)
    }, opts)
}

/// Loss gradient of a freshly initialized model on a two-token pair, for
/// every parameter block (at most `per_block` random coordinates each).
pub fn full_model(cfg: &ModelConfig, seed: u64, per_block: Option<usize>) -> Result<GradCheckReport> {
    let model = Model::<f64>::build(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let vocab = cfg.src_vocab.min(cfg.tgt_vocab);
    let mut tok = || rng.gen_range(crate::model::FIRST_CONTENT..vocab);
    let batch = Batch::new(vec![vec![tok(), tok()]], vec![vec![tok(), tok()]])?;
    let enc = Encoded::new(&batch, cfg)?;
    let mut inputs: Vec<(String, Tensor<f64>)> = Vec::new();
    let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for (name, t) in model.params.iter() {
        // Perturb zero-initialized biases, betas and norms off their
        // special values.
        let t = if t.data().iter().all(|&x| x == 0.0 || x == 1.0) {
            t.map(|x| x + prng.gen_range(-0.2..0.2))
        } else {
            t.clone()
        };
        inputs.push((name.to_string(), t));
    }
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let opts = CheckOptions {
        max_per_block: per_block,
        seed,
        ..CheckOptions::default()
    };
    gradcheck::check(&inputs, |g, v| {
        let b: Bindings = names.iter().cloned().zip(v.iter().copied()).collect();
        let (loss, _) = model.forward_loss(g, &b, &enc, 0.0)?;
        Ok(loss)
    }, &opts)
}

/// Full-model check for an arbitrary placement at toy dims.
pub fn placement_check(base: &ModelConfig, placement: &PlacementMap, seed: u64, per_block: usize) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        placement: placement.clone(),
        ..base.clone()
    };
    full_model(&cfg, seed, Some(per_block))
}
