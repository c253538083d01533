//! Post-LN encoder–decoder transformer with capsule layers at chosen sites.
//!
//! Parameter names:
//! `src_embed`, `tgt_embed`, `out.w`, `out.b`,
//! `enc.{layer}.self_attn.{w_q,w_k,w_v}.{head}`, `enc.{layer}.self_attn.w_o`,
//! `dec.{layer}.cross_attn.*`, `{enc,dec}.{layer}.ffn.{w1,b1,w2,b2}`,
//! `{enc,dec}.{layer}.ln{k}.{gamma,beta}` and `{site}.capsule.*` (see
//! [`CapsuleLayerConfig::param_specs`]). Layers count from 1.

mod config;
mod placement;

pub use config::{parse_kv, ModelConfig};
pub use placement::{PlacementMap, Site, SiteKind};

use std::collections::BTreeMap;

use crate::attention::{multi_head_attention, AttentionMask, HeadProjections, MultiHeadConfig};
use crate::autodiff::{Graph, Var};
use crate::capsule_layer::{capsule_layer_forward, CapsuleLayerConfig, CapsuleLayerParams};
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamSpec, ParamStore};
use crate::routing::RoutingTrace;
use crate::tensor::{Float, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available to task content.
pub const FIRST_CONTENT: usize = 3;

const LN_EPS: f64 = 1e-6;

/// Source and target content sequences, without begin/end markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(src: Vec<Vec<usize>>, tgt: Vec<Vec<usize>>) -> Result<Self> {
        if src.is_empty() || src.len() != tgt.len() {
            return Err(Error::invalid("batch", format!("{} sources for {} targets", src.len(), tgt.len())));
        }
        if src.iter().any(Vec::is_empty) {
            return Err(Error::invalid("batch", "empty source sequence"));
        }
        Ok(Batch { src, tgt })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// A batch laid out as padded id grids.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[batch · src_len]`
    pub src_ids: Vec<usize>,
    pub src_valid: Vec<Vec<bool>>,
    /// `[BOS, y..]`, `[batch · tgt_len]`
    pub tgt_in: Vec<usize>,
    pub tgt_valid: Vec<Vec<bool>>,
    /// `[y.., EOS]`; `None` at padding.
    pub targets: Vec<Option<usize>>,
}

impl Encoded {
    pub fn new(b: &Batch, cfg: &ModelConfig) -> Result<Self> {
        let src_len = b.src.iter().map(Vec::len).max().unwrap_or(0);
        let tgt_len = b.tgt.iter().map(|t| t.len() + 1).max().unwrap_or(0);
        Self::with_lengths(b, cfg, src_len, tgt_len)
    }

    fn with_lengths(b: &Batch, cfg: &ModelConfig, src_len: usize, tgt_len: usize) -> Result<Self> {
        if src_len > cfg.max_len || tgt_len > cfg.max_len {
            return Err(Error::invalid(
                "batch",
                format!("sequence length {} exceeds max_len {}", src_len.max(tgt_len), cfg.max_len),
            ));
        }
        let check = |seq: &[usize], vocab: usize, side: &str| -> Result<()> {
            match seq.iter().find(|&&t| t < FIRST_CONTENT || t >= vocab) {
                Some(t) => Err(Error::invalid(
                    "batch",
                    format!("{side} token {t} outside content range {FIRST_CONTENT}..{vocab}"),
                )),
                None => Ok(()),
            }
        };
        let n = b.len();
        let mut e = Encoded {
            batch: n,
            src_len,
            tgt_len,
            src_ids: vec![PAD; n * src_len],
            src_valid: vec![vec![false; src_len]; n],
            tgt_in: vec![PAD; n * tgt_len],
            tgt_valid: vec![vec![false; tgt_len]; n],
            targets: vec![None; n * tgt_len],
        };
        for (r, (s, t)) in b.src.iter().zip(&b.tgt).enumerate() {
            check(s, cfg.src_vocab, "source")?;
            check(t, cfg.tgt_vocab, "target")?;
            for (k, &id) in s.iter().enumerate() {
                e.src_ids[r * src_len + k] = id;
                e.src_valid[r][k] = true;
            }
            for k in 0..=t.len() {
                e.tgt_in[r * tgt_len + k] = if k == 0 { BOS } else { t[k - 1] };
                e.tgt_valid[r][k] = true;
                e.targets[r * tgt_len + k] = Some(if k < t.len() { t[k] } else { EOS });
            }
        }
        Ok(e)
    }
}

/// Teacher-forced accuracy counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accuracy {
    pub correct_tokens: usize,
    pub tokens: usize,
    pub correct_seqs: usize,
    pub seqs: usize,
}

impl Accuracy {
    pub fn token_acc(&self) -> f64 {
        self.correct_tokens as f64 / self.tokens.max(1) as f64
    }

    pub fn seq_acc(&self) -> f64 {
        self.correct_seqs as f64 / self.seqs.max(1) as f64
    }

    pub fn add(&mut self, o: Accuracy) {
        self.correct_tokens += o.correct_tokens;
        self.tokens += o.tokens;
        self.correct_seqs += o.correct_seqs;
        self.seqs += o.seqs;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Compares `logits: [batch · tgt_len, vocab]` row argmaxes with the targets.
pub fn accuracy<T: Float>(logits: &Tensor<T>, enc: &Encoded) -> Accuracy {
    let vocab = logits.shape()[1];
    let mut acc = Accuracy {
        seqs: enc.batch,
        ..Accuracy::default()
    };
    for r in 0..enc.batch {
        let mut all = true;
        for k in 0..enc.tgt_len {
            let row = r * enc.tgt_len + k;
            let Some(t) = enc.targets[row] else { continue };
            acc.tokens += 1;
            if argmax(&logits.data()[row * vocab..(row + 1) * vocab]) == t {
                acc.correct_tokens += 1;
            } else {
                all = false;
            }
        }
        acc.correct_seqs += usize::from(all);
    }
    acc
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(..)`.
pub fn positional_encoding<T: Float>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn([len, d], |k| {
        let (pos, c) = (k / d, k % d);
        let angle = pos as f64 / 10000f64.powf((c - c % 2) as f64 / d as f64);
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Outputs of one forward pass.
#[derive(Debug)]
pub struct Forward<T> {
    /// `[batch · tgt_len, tgt_vocab]`
    pub logits: Var,
    pub traces: BTreeMap<Site, RoutingTrace<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn attn_specs(prefix: &str, d: usize, h: usize, out: &mut Vec<ParamSpec>) {
    let dk = d / h;
    for w in ["w_q", "w_k", "w_v"] {
        for i in 0..h {
            out.push(ParamSpec::new(format!("{prefix}.{w}.{i}"), &[d, dk], Init::xavier(d, dk)));
        }
    }
    out.push(ParamSpec::new(format!("{prefix}.w_o"), &[d, d], Init::xavier(d, d)));
}

fn ffn_specs(prefix: &str, d: usize, f: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec::new(format!("{prefix}.w1"), &[d, f], Init::xavier(d, f)));
    out.push(ParamSpec::new(format!("{prefix}.b1"), &[f], Init::Zeros));
    out.push(ParamSpec::new(format!("{prefix}.w2"), &[f, d], Init::xavier(f, d)));
    out.push(ParamSpec::new(format!("{prefix}.b2"), &[d], Init::Zeros));
}

fn ln_specs(prefix: &str, d: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec::new(format!("{prefix}.gamma"), &[d], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.beta"), &[d], Init::Zeros));
}

/// Every parameter of the model described by `cfg`.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let (d, h, f) = (cfg.d_model, cfg.heads, cfg.d_ff);
    let mut s = Vec::new();
    s.push(ParamSpec::new("src_embed", &[cfg.src_vocab, d], Init::fan_in(d)));
    s.push(ParamSpec::new("tgt_embed", &[cfg.tgt_vocab, d], Init::fan_in(d)));
    s.push(ParamSpec::new("out.w", &[d, cfg.tgt_vocab], Init::xavier(d, cfg.tgt_vocab)));
    s.push(ParamSpec::new("out.b", &[cfg.tgt_vocab], Init::Zeros));
    for n in 1..=cfg.depth {
        attn_specs(&format!("enc.{n}.self_attn"), d, h, &mut s);
        ln_specs(&format!("enc.{n}.ln1"), d, &mut s);
        ffn_specs(&format!("enc.{n}.ffn"), d, f, &mut s);
        ln_specs(&format!("enc.{n}.ln2"), d, &mut s);
        attn_specs(&format!("dec.{n}.self_attn"), d, h, &mut s);
        ln_specs(&format!("dec.{n}.ln1"), d, &mut s);
        attn_specs(&format!("dec.{n}.cross_attn"), d, h, &mut s);
        ln_specs(&format!("dec.{n}.ln2"), d, &mut s);
        ffn_specs(&format!("dec.{n}.ffn"), d, f, &mut s);
        ln_specs(&format!("dec.{n}.ln3"), d, &mut s);
    }
    if let Some(cap) = cfg.capsule_layer()? {
        for site in cfg.active_placement().iter() {
            s.extend(cap.param_specs(&format!("{site}.capsule")));
        }
    }
    Ok(s)
}

/// Per-forward constants shared by every layer.
struct Ctx<'a> {
    attn: MultiHeadConfig,
    capsule: Option<CapsuleLayerConfig>,
    placement: PlacementMap,
    b: &'a Bindings,
    record: bool,
}

impl<T: Float> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&param_specs(&config)?, seed)?;
        Ok(Model { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let specs = param_specs(&config)?;
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let t = params.get(&s.name).map_err(|_| Error::Checkpoint(format!("missing tensor '{}'", s.name)))?;
            if t.shape() != s.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Forward pass on bound parameters (see [`ParamStore::bind`]).
    pub fn forward(&self, g: &mut Graph<T>, b: &Bindings, enc: &Encoded, record: bool) -> Result<Forward<T>> {
        let cfg = &self.config;
        let ctx = Ctx {
            attn: cfg.attention()?,
            capsule: cfg.capsule_layer()?,
            placement: cfg.active_placement(),
            b,
            record,
        };
        let mut traces = BTreeMap::new();
        let (n, s, t, d) = (enc.batch, enc.src_len, enc.tgt_len, cfg.d_model);

        let src_mask = AttentionMask::padding(&enc.src_valid, s)?;
        let mut x = embed(g, &ctx, "src_embed", &enc.src_ids, n, s, d)?;
        for layer in 1..=cfg.depth {
            let p = format!("enc.{layer}");
            let site = Site::new(SiteKind::Enc, layer);
            let a = attention_block(g, &ctx, &format!("{p}.self_attn"), site, x, x, &src_mask, &mut traces)?;
            x = add_norm(g, b, &format!("{p}.ln1"), x, a)?;
            let f = ffn(g, b, &format!("{p}.ffn"), x)?;
            x = add_norm(g, b, &format!("{p}.ln2"), x, f)?;
        }
        let memory = x;

        let self_mask = AttentionMask::causal_padding(&enc.tgt_valid)?;
        let cross_mask = AttentionMask::padding(&enc.src_valid, t)?;
        let mut y = embed(g, &ctx, "tgt_embed", &enc.tgt_in, n, t, d)?;
        for layer in 1..=cfg.depth {
            let p = format!("dec.{layer}");
            let site = Site::new(SiteKind::Dec, layer);
            let a = attention_block(g, &ctx, &format!("{p}.self_attn"), site, y, y, &self_mask, &mut traces)?;
            y = add_norm(g, b, &format!("{p}.ln1"), y, a)?;
            let site = Site::new(SiteKind::Ed, layer);
            let c = attention_block(g, &ctx, &format!("{p}.cross_attn"), site, y, memory, &cross_mask, &mut traces)?;
            y = add_norm(g, b, &format!("{p}.ln2"), y, c)?;
            let f = ffn(g, b, &format!("{p}.ffn"), y)?;
            y = add_norm(g, b, &format!("{p}.ln3"), y, f)?;
        }
        let y = g.reshape(y, &[n * t, d])?;
        let logits = g.matmul(y, b.get("out.w")?)?;
        let logits = g.add(logits, b.get("out.b")?)?;
        Ok(Forward { logits, traces })
    }

    /// Mean cross-entropy over non-padding target positions.
    pub fn forward_loss(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        enc: &Encoded,
        smoothing: f64,
    ) -> Result<(Var, Forward<T>)> {
        let fwd = self.forward(g, b, enc, false)?;
        let loss = g.cross_entropy(fwd.logits, &enc.targets, smoothing)?;
        Ok((loss, fwd))
    }

    /// Loss and teacher-forced accuracy without gradient tracking.
    pub fn evaluate(&self, batch: &Batch) -> Result<(f64, Accuracy)> {
        let enc = Encoded::new(batch, &self.config)?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let (loss, fwd) = self.forward_loss(&mut g, &b, &enc, 0.0)?;
        Ok((g.value(loss).item().as_f64(), accuracy(g.value(fwd.logits), &enc)))
    }

    /// Logits `[tgt_len, vocab]` for one source and decoder prefix.
    pub fn logits(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor<T>> {
        let batch = Batch::new(vec![src.to_vec()], vec![tgt.to_vec()])?;
        let enc = Encoded::new(&batch, &self.config)?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let fwd = self.forward(&mut g, &b, &enc, false)?;
        Ok(g.value(fwd.logits).clone())
    }

    /// Appends the argmax over the end symbol and content ids (ties to the
    /// lowest id) until the end symbol or `max_len` tokens. The end symbol
    /// is not returned.
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let vocab = self.config.tgt_vocab;
        let mut out: Vec<usize> = Vec::new();
        while out.len() < max_len {
            let batch = Batch::new(vec![src.to_vec()], vec![out.clone()])?;
            let enc = Encoded::new(&batch, &self.config)?;
            let mut g = Graph::new();
            let b = self.params.bind_frozen(&mut g);
            let fwd = self.forward(&mut g, &b, &enc, false)?;
            let logits = g.value(fwd.logits).data();
            let last = out.len();
            // Padding and begin-of-sequence are never valid outputs.
            let next = EOS + argmax(&logits[last * vocab + EOS..(last + 1) * vocab]);
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Errors, listing the available sites, unless `site` has a capsule layer.
    pub fn check_site(&self, site: Site) -> Result<()> {
        let placement = self.config.active_placement();
        if !placement.contains(site) {
            return Err(Error::Placement(format!(
                "site {site} has no capsule layer; available: {placement}"
            )));
        }
        Ok(())
    }

    /// Routing trace at `site` for one source and decoder prefix. Trace
    /// positions are the site's query positions.
    pub fn trace(&self, site: Site, src: &[usize], tgt: &[usize]) -> Result<RoutingTrace<T>> {
        self.check_site(site)?;
        let batch = Batch::new(vec![src.to_vec()], vec![tgt.to_vec()])?;
        let enc = Encoded::new(&batch, &self.config)?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let mut fwd = self.forward(&mut g, &b, &enc, true)?;
        fwd.traces
            .remove(&site)
            .ok_or_else(|| Error::Placement(format!("no trace recorded at {site}")))
    }
}

fn embed<T: Float>(
    g: &mut Graph<T>,
    ctx: &Ctx<'_>,
    table: &str,
    ids: &[usize],
    n: usize,
    len: usize,
    d: usize,
) -> Result<Var> {
    let e = g.embedding(ctx.b.get(table)?, ids)?;
    let e = g.scale(e, (d as f64).sqrt())?;
    let e = g.reshape(e, &[n, len, d])?;
    let pe = g.constant(positional_encoding(len, d));
    g.add(e, pe)
}

/// Multi-head attention, aggregated by the capsule layer when `site` is
/// placed and by plain concatenation otherwise, then projected by `W^O`.
#[allow(clippy::too_many_arguments)]
fn attention_block<T: Float>(
    g: &mut Graph<T>,
    ctx: &Ctx<'_>,
    prefix: &str,
    site: Site,
    x: Var,
    memory: Var,
    mask: &AttentionMask,
    traces: &mut BTreeMap<Site, RoutingTrace<T>>,
) -> Result<Var> {
    let h = ctx.attn.heads;
    let names = |w: &str| -> Result<Vec<Var>> { (0..h).map(|i| ctx.b.get(&format!("{prefix}.{w}.{i}"))).collect() };
    let proj = HeadProjections {
        w_q: names("w_q")?,
        w_k: names("w_k")?,
        w_v: names("w_v")?,
    };
    let mh = multi_head_attention(g, x, memory, memory, &ctx.attn, &proj, mask)?;
    let agg = match &ctx.capsule {
        Some(cap) if ctx.placement.contains(site) => {
            let prefix = format!("{site}.capsule");
            let params = CapsuleLayerParams::from_bindings(ctx.b, &prefix, cap)?;
            let (o, trace) = capsule_layer_forward(g, &mh.heads, &params, cap, ctx.record)?;
            if let Some(tr) = trace {
                traces.insert(site, tr);
            }
            o
        }
        _ => mh.concat,
    };
    g.matmul(agg, ctx.b.get(&format!("{prefix}.w_o"))?)
}

fn add_norm<T: Float>(g: &mut Graph<T>, b: &Bindings, prefix: &str, x: Var, sub: Var) -> Result<Var> {
    let s = g.add(x, sub)?;
    g.layer_norm(s, b.get(&format!("{prefix}.gamma"))?, b.get(&format!("{prefix}.beta"))?, LN_EPS)
}

fn ffn<T: Float>(g: &mut Graph<T>, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, b.get(&format!("{prefix}.w1"))?)?;
    let h = g.add(h, b.get(&format!("{prefix}.b1"))?)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, b.get(&format!("{prefix}.w2"))?)?;
    g.add(o, b.get(&format!("{prefix}.b2"))?)
}
