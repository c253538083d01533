//! The capsule sub-layer: head outputs → votes → routing → concat → FFN,
//! with a residual connection back to the concatenated heads.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamSpec};
use crate::routing::{self, EmBetas, RoutingConfig, RoutingKind, RoutingTrace};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleLayerConfig {
    pub routing: RoutingConfig,
    /// Inner width of the layer's FFN.
    pub ffn_hidden: usize,
}

impl CapsuleLayerConfig {
    pub fn new(routing: RoutingConfig, ffn_hidden: usize) -> Result<Self> {
        let cfg = CapsuleLayerConfig { routing, ffn_hidden };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn d_model(&self) -> usize {
        self.routing.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.routing.validate()?;
        if self.ffn_hidden == 0 {
            return Err(Error::Config("capsule FFN width must be positive".into()));
        }
        if self.routing.d_out() * self.routing.l != self.d_model() {
            return Err(Error::Config(format!(
                "{} output capsules of width {} do not fill d_model {}",
                self.routing.l,
                self.routing.d_out(),
                self.d_model()
            )));
        }
        Ok(())
    }

    /// Parameters of one layer, named under `prefix` (e.g. `dec.1.capsule`).
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let r = &self.routing;
        let ts = r.transform_shape();
        let (d, f) = (self.d_model(), self.ffn_hidden);
        let mut specs = Vec::new();
        for i in 0..r.h {
            for j in 0..r.l {
                specs.push(ParamSpec::new(format!("{prefix}.w_vote.{i}.{j}"), &ts, Init::fan_in(ts[0])));
            }
        }
        specs.push(ParamSpec::new(format!("{prefix}.ffn.w1"), &[d, f], Init::xavier(d, f)));
        specs.push(ParamSpec::new(format!("{prefix}.ffn.b1"), &[f], Init::Zeros));
        specs.push(ParamSpec::new(format!("{prefix}.ffn.w2"), &[f, d], Init::xavier(f, d)));
        specs.push(ParamSpec::new(format!("{prefix}.ffn.b2"), &[d], Init::Zeros));
        if r.kind == RoutingKind::Em {
            specs.push(ParamSpec::new(format!("{prefix}.beta_alpha"), &[r.l], Init::Zeros));
            specs.push(ParamSpec::new(format!("{prefix}.beta_mu"), &[r.l], Init::Zeros));
        }
        specs
    }

    /// Learnable scalars added by one layer.
    pub fn param_count(&self) -> usize {
        let r = &self.routing;
        let [a, b] = r.transform_shape();
        let (d, f) = (self.d_model(), self.ffn_hidden);
        let betas = if r.kind == RoutingKind::Em { 2 * r.l } else { 0 };
        r.h * r.l * a * b + betas + d * f + f + f * d + d
    }
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct CapsuleLayerParams {
    /// `W_ij`, indexed `[i][j]`.
    pub transforms: Vec<Vec<Var>>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub betas: Option<EmBetas>,
}

impl CapsuleLayerParams {
    pub fn from_bindings(b: &Bindings, prefix: &str, cfg: &CapsuleLayerConfig) -> Result<Self> {
        let r = &cfg.routing;
        let transforms = (0..r.h)
            .map(|i| (0..r.l).map(|j| b.get(&format!("{prefix}.w_vote.{i}.{j}"))).collect())
            .collect::<Result<_>>()?;
        let betas = match r.kind {
            RoutingKind::Em => Some(EmBetas {
                alpha: b.get(&format!("{prefix}.beta_alpha"))?,
                mu: b.get(&format!("{prefix}.beta_mu"))?,
            }),
            RoutingKind::Dynamic => None,
        };
        Ok(CapsuleLayerParams {
            transforms,
            w1: b.get(&format!("{prefix}.ffn.w1"))?,
            b1: b.get(&format!("{prefix}.ffn.b1"))?,
            w2: b.get(&format!("{prefix}.ffn.w2"))?,
            b2: b.get(&format!("{prefix}.ffn.b2"))?,
            betas,
        })
    }
}

/// `O = u + FFN(v)` with `u = Concat(u_1..u_h)` and `v` the concatenated
/// routed output capsules. Heads are `[.., d/h]` with identical leading
/// axes; every leading index is routed independently. Returns `O` with the
/// heads' leading axes and width `d_model`.
pub fn capsule_layer_forward<T: Float>(
    g: &mut Graph<T>,
    heads: &[Var],
    params: &CapsuleLayerParams,
    cfg: &CapsuleLayerConfig,
    record: bool,
) -> Result<(Var, Option<RoutingTrace<T>>)> {
    let r = &cfg.routing;
    if heads.len() != r.h {
        return Err(Error::Config(format!("{} head outputs for {} input capsules", heads.len(), r.h)));
    }
    let lead = g.shape(heads[0]).to_vec();
    let Some((&width, outer)) = lead.split_last() else {
        return Err(Error::invalid("capsule_layer", "head outputs must have rank >= 1"));
    };
    if width != r.d_in() {
        return Err(Error::shape("capsule_layer", &[r.d_in()], &[width]));
    }
    for &u in heads {
        if g.shape(u) != lead {
            return Err(Error::shape("capsule_layer", &lead, g.shape(u)));
        }
    }
    let p: usize = outer.iter().product();
    let d = cfg.d_model();

    let cols: Vec<Var> = heads
        .iter()
        .map(|&u| g.reshape(u, &[p, 1, width]))
        .collect::<Result<_>>()?;
    let caps = g.concat(&cols, 1)?;
    let u = g.reshape(caps, &[p, d])?;

    let votes = routing::compute_votes(g, caps, &params.transforms, r.vote_mode())?;
    let (v, trace) = routing::route(g, votes, r, params.betas, record)?;
    let v = g.reshape(v, &[p, d])?;

    let hidden = g.matmul(v, params.w1)?;
    let hidden = g.add(hidden, params.b1)?;
    let hidden = g.relu(hidden)?;
    let ffn = g.matmul(hidden, params.w2)?;
    let ffn = g.add(ffn, params.b2)?;
    let o = g.add(u, ffn)?;

    let mut out_shape = outer.to_vec();
    out_shape.push(d);
    Ok((g.reshape(o, &out_shape)?, trace))
}
