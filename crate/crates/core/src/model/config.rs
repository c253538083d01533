use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::MultiHeadConfig;
use crate::capsule_layer::CapsuleLayerConfig;
use crate::error::{Error, Result};
use crate::routing::{EmHyper, RoutingConfig, RoutingKind, DEFAULT_ITERATIONS};

use super::placement::PlacementMap;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub d_ff: usize,
    /// Longest source or decoder-input sequence.
    pub max_len: usize,
    /// `None` builds the stock transformer regardless of `placement`.
    pub routing: Option<RoutingKind>,
    /// Output capsules `l`.
    pub capsules: usize,
    pub iterations: usize,
    /// Inner width of the capsule layer's FFN.
    pub capsule_ffn: usize,
    pub placement: PlacementMap,
    /// EM inverse-temperature schedule; `None` uses the default.
    pub em_lambda: Option<Vec<f64>>,
    pub variance_floor: Option<f64>,
}

impl ModelConfig {
    /// N=2, d=64, h=l=4, d_ff=128, placement `{ED_N, Dec_N}`.
    pub fn toy(vocab: usize, routing: Option<RoutingKind>) -> Self {
        ModelConfig {
            src_vocab: vocab,
            tgt_vocab: vocab,
            d_model: 64,
            heads: 4,
            depth: 2,
            d_ff: 128,
            max_len: 64,
            routing,
            capsules: 4,
            iterations: DEFAULT_ITERATIONS,
            capsule_ffn: 128,
            placement: PlacementMap::last_layer(2),
            em_lambda: None,
            variance_floor: None,
        }
    }

    /// N=6, d=512, h=l=8, d_ff=2048.
    pub fn base(vocab: usize, routing: Option<RoutingKind>) -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            depth: 6,
            d_ff: 2048,
            capsules: 8,
            capsule_ffn: 2048,
            placement: PlacementMap::last_layer(6),
            max_len: 256,
            ..Self::toy(vocab, routing)
        }
    }

    pub fn attention(&self) -> Result<MultiHeadConfig> {
        MultiHeadConfig::new(self.d_model, self.heads)
    }

    /// The capsule layer used at every placement site, if routing is on.
    pub fn capsule_layer(&self) -> Result<Option<CapsuleLayerConfig>> {
        let Some(kind) = self.routing else { return Ok(None) };
        let mut r = RoutingConfig::new(kind, self.d_model, self.heads, self.capsules, self.iterations)?;
        if kind == RoutingKind::Em {
            let mut hyper = EmHyper::default_schedule(self.iterations);
            if let Some(l) = &self.em_lambda {
                hyper.lambda_schedule = l.clone();
            }
            hyper.variance_floor = self.variance_floor;
            r.em = Some(hyper);
            r.validate()?;
        }
        Ok(Some(CapsuleLayerConfig::new(r, self.capsule_ffn)?))
    }

    /// The sites that actually get a capsule layer.
    pub fn active_placement(&self) -> PlacementMap {
        match self.routing {
            Some(_) => self.placement.clone(),
            None => PlacementMap::empty(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_vocab < 3 || self.tgt_vocab < 3 {
            return Err(Error::Config("vocabularies need at least 3 ids (pad, begin, end)".into()));
        }
        for (name, v) in [("depth", self.depth), ("d_ff", self.d_ff), ("max_len", self.max_len)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.attention()?;
        self.capsule_layer()?;
        self.placement.validate(self.depth)
    }

    /// One `key=value` line per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        line("src_vocab", self.src_vocab.to_string());
        line("tgt_vocab", self.tgt_vocab.to_string());
        line("d_model", self.d_model.to_string());
        line("heads", self.heads.to_string());
        line("depth", self.depth.to_string());
        line("d_ff", self.d_ff.to_string());
        line("max_len", self.max_len.to_string());
        line("routing", self.routing.map_or("none", RoutingKind::name).to_string());
        line("capsules", self.capsules.to_string());
        line("iterations", self.iterations.to_string());
        line("capsule_ffn", self.capsule_ffn.to_string());
        line("placement", self.placement.to_string());
        if let Some(l) = &self.em_lambda {
            line("em_lambda", l.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        }
        if let Some(f) = self.variance_floor {
            line("variance_floor", f.to_string());
        }
        s
    }

    /// Reads the keys written by [`ModelConfig::to_kv`]; other keys are ignored.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Config(format!("missing key '{k}'")));
        let num = |k: &str| -> Result<usize> { parse_value(k, get(k)?) };
        let routing = match get("routing")?.as_str() {
            "none" => None,
            other => Some(other.parse()?),
        };
        let em_lambda = map
            .get("em_lambda")
            .map(|s| s.split(',').map(|x| parse_value("em_lambda", x)).collect::<Result<Vec<f64>>>())
            .transpose()?;
        let variance_floor = map.get("variance_floor").map(|s| parse_value("variance_floor", s)).transpose()?;
        let cfg = ModelConfig {
            src_vocab: num("src_vocab")?,
            tgt_vocab: num("tgt_vocab")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            depth: num("depth")?,
            d_ff: num("d_ff")?,
            max_len: num("max_len")?,
            routing,
            capsules: num("capsules")?,
            iterations: num("iterations")?,
            capsule_ffn: num("capsule_ffn")?,
            placement: PlacementMap::parse(get("placement")?)?,
            em_lambda,
            variance_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value<V: FromStr>(key: &str, s: &str) -> Result<V> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{s}' for key '{key}'")))
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: repeated key '{}'", n + 1, k.trim())));
        }
    }
    Ok(map)
}
