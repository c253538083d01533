//! Scaled dot-product attention and multi-head projection.
//!
//! Per-head outputs are returned individually as well as concatenated,
//! since the capsule layer consumes them as separate input capsules.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Additive logit for masked positions.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl MultiHeadConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be a positive multiple of head count {heads}"
            )));
        }
        Ok(MultiHeadConfig { d_model, heads })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn d_v(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Causal,
    Padding,
    CausalPadding,
}

/// Keep/drop pattern over `[batch, queries, keys]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    kind: MaskKind,
    batch: usize,
    queries: usize,
    keys: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    pub fn from_pattern(kind: MaskKind, batch: usize, queries: usize, keys: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * queries * keys {
            return Err(Error::invalid(
                "attention_mask",
                format!("pattern has {} entries, expected {batch}x{queries}x{keys}", keep.len()),
            ));
        }
        if let Some(row) = keep.chunks(keys).position(|r| !r.iter().any(|&k| k)) {
            return Err(Error::invalid(
                "attention_mask",
                format!("query row {} (batch {}) masks every key", row % queries, row / queries),
            ));
        }
        Ok(AttentionMask { kind, batch, queries, keys, keep })
    }

    pub fn none(queries: usize, keys: usize) -> Self {
        AttentionMask {
            kind: MaskKind::None,
            batch: 1,
            queries,
            keys,
            keep: vec![true; queries * keys],
        }
    }

    pub fn causal(len: usize) -> Self {
        let keep = (0..len * len).map(|i| i % len <= i / len).collect();
        AttentionMask {
            kind: MaskKind::Causal,
            batch: 1,
            queries: len,
            keys: len,
            keep,
        }
    }

    /// Masks padded keys; `key_valid[b][s]` is false for padding.
    pub fn padding(key_valid: &[Vec<bool>], queries: usize) -> Result<Self> {
        Self::build(key_valid, queries, false)
    }

    /// Causal mask combined with key padding (decoder self-attention).
    pub fn causal_padding(key_valid: &[Vec<bool>]) -> Result<Self> {
        let len = key_valid.first().map_or(0, Vec::len);
        Self::build(key_valid, len, true)
    }

    fn build(key_valid: &[Vec<bool>], queries: usize, causal: bool) -> Result<Self> {
        let keys = key_valid.first().map_or(0, Vec::len);
        if key_valid.iter().any(|v| v.len() != keys) {
            return Err(Error::invalid("attention_mask", "ragged key validity rows"));
        }
        let mut keep = Vec::with_capacity(key_valid.len() * queries * keys);
        for valid in key_valid {
            for q in 0..queries {
                keep.extend(valid.iter().enumerate().map(|(s, &ok)| ok && (!causal || s <= q)));
            }
        }
        let kind = if causal { MaskKind::CausalPadding } else { MaskKind::Padding };
        Self::from_pattern(kind, key_valid.len(), queries, keys, keep)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn keeps(&self, batch: usize, query: usize, key: usize) -> bool {
        self.keep[(batch * self.queries + query) * self.keys + key]
    }

    /// `0` where kept and [`MASK_LOGIT`] where dropped; shaped `[q, s]` for
    /// a single pattern and `[batch, q, s]` otherwise.
    pub fn additive<T: Float>(&self) -> Tensor<T> {
        let data = self
            .keep
            .iter()
            .map(|&k| if k { T::zero() } else { T::of(MASK_LOGIT) })
            .collect();
        let shape = if self.batch == 1 {
            vec![self.queries, self.keys]
        } else {
            vec![self.batch, self.queries, self.keys]
        };
        Tensor::from_parts(shape, data)
    }
}

/// `softmax(Q Kᵀ / √d_k) V`, returning `(output, weights)`.
pub fn scaled_dot_attention<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() < 2 || ks.len() < 2 || vs.len() < 2 {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let d_k = qs[qs.len() - 1];
    if ks[ks.len() - 1] != d_k {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let s = ks[ks.len() - 2];
    if vs[vs.len() - 2] != s {
        return Err(Error::shape("attention", &ks, &vs));
    }
    let nq = qs[qs.len() - 2];
    if mask.queries != nq || mask.keys != s {
        return Err(Error::shape("attention_mask", &[nq, s], &[mask.queries, mask.keys]));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    if mask.kind != MaskKind::None {
        let m = g.constant(mask.additive());
        logits = g.add(logits, m)?;
    }
    let weights = g.softmax(logits, -1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Per-head projection matrices, each `[d_model, d_k]`.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
}

/// `(Q W^Q_i, K W^K_i, V W^V_i)` for each head `i`.
pub fn project_heads<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    proj: &HeadProjections,
) -> Result<Vec<(Var, Var, Var)>> {
    let h = proj.w_q.len();
    if proj.w_k.len() != h || proj.w_v.len() != h || h == 0 {
        return Err(Error::invalid("project_heads", "projection lists differ in length"));
    }
    let w0 = g.shape(proj.w_q[0]).to_vec();
    for &w in proj.w_q.iter().chain(&proj.w_k).chain(&proj.w_v) {
        if g.shape(w) != w0 {
            return Err(Error::shape("project_heads", &w0, g.shape(w)));
        }
    }
    // One product against the side-by-side head matrices, then split.
    let mut fused = |x: Var, ws: &[Var]| -> Result<Vec<Var>> {
        let w = g.concat(ws, -1)?;
        let y = g.matmul(x, w)?;
        g.split(y, -1, h)
    };
    let qs = fused(q, &proj.w_q)?;
    let ks = fused(k, &proj.w_k)?;
    let vs = fused(v, &proj.w_v)?;
    Ok((0..h).map(|i| (qs[i], ks[i], vs[i])).collect())
}

#[derive(Clone, Debug)]
pub struct MultiHeadOutput {
    /// `u_1 .. u_h`, each `[.., q, d_v]`.
    pub heads: Vec<Var>,
    /// `Concat(u_1 .. u_h)`, `[.., q, d_model]`.
    pub concat: Var,
    pub weights: Vec<Var>,
}

pub fn multi_head_attention<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    cfg: &MultiHeadConfig,
    proj: &HeadProjections,
    mask: &AttentionMask,
) -> Result<MultiHeadOutput> {
    if proj.w_q.len() != cfg.heads {
        return Err(Error::Config(format!(
            "{} projection triples for {} heads",
            proj.w_q.len(),
            cfg.heads
        )));
    }
    for &w in proj.w_q.iter().chain(&proj.w_k).chain(&proj.w_v) {
        if g.shape(w) != [cfg.d_model, cfg.d_k()] {
            return Err(Error::shape("project_heads", g.shape(w), &[cfg.d_model, cfg.d_k()]));
        }
    }
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for (qi, ki, vi) in project_heads(g, q, k, v, proj)? {
        let (u, w) = scaled_dot_attention(g, qi, ki, vi, mask)?;
        heads.push(u);
        weights.push(w);
    }
    let concat = g.concat(&heads, -1)?;
    Ok(MultiHeadOutput { heads, concat, weights })
}
