use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which attention sub-layer of a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    /// Encoder self-attention.
    Enc,
    /// Decoder self-attention.
    Dec,
    /// Encoder–decoder attention.
    Ed,
}

impl SiteKind {
    pub fn name(self) -> &'static str {
        match self {
            SiteKind::Enc => "enc",
            SiteKind::Dec => "dec",
            SiteKind::Ed => "ed",
        }
    }
}

/// A capsule insertion site, `layer` counted from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub kind: SiteKind,
    pub layer: usize,
}

impl Site {
    pub fn new(kind: SiteKind, layer: usize) -> Self {
        Site { kind, layer }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.name(), self.layer)
    }
}

/// Accepts `ed2`, `ED_2`, `Enc1`, `dec6`, ...
impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('_', "");
        let split = lower.find(|c: char| c.is_ascii_digit()).unwrap_or(lower.len());
        let (kind, num) = lower.split_at(split);
        let kind = match kind {
            "enc" => SiteKind::Enc,
            "dec" => SiteKind::Dec,
            "ed" => SiteKind::Ed,
            _ => return Err(Error::Placement(format!("unknown site '{s}' (expected enc<i>, dec<i> or ed<i>)"))),
        };
        let layer: usize = num
            .parse()
            .map_err(|_| Error::Placement(format!("site '{s}' has no layer number")))?;
        if layer == 0 {
            return Err(Error::Placement(format!("site '{s}': layers are numbered from 1")));
        }
        Ok(Site { kind, layer })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PlacementMap {
    sites: BTreeSet<Site>,
}

impl PlacementMap {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Rejects duplicate sites.
    pub fn new(sites: impl IntoIterator<Item = Site>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for s in sites {
            if !set.insert(s) {
                return Err(Error::Placement(format!("duplicate site {s}")));
            }
        }
        Ok(PlacementMap { sites: set })
    }

    /// `{ED_N, Dec_N}`.
    pub fn last_layer(depth: usize) -> Self {
        PlacementMap {
            sites: [Site::new(SiteKind::Ed, depth), Site::new(SiteKind::Dec, depth)].into(),
        }
    }

    /// Comma-separated sites; an empty string or `none` is the empty map.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::empty());
        }
        Self::new(s.split(',').map(str::parse).collect::<Result<Vec<Site>>>()?)
    }

    pub fn contains(&self, site: Site) -> bool {
        self.sites.contains(&site)
    }

    pub fn iter(&self) -> impl Iterator<Item = Site> + '_ {
        self.sites.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn max_layer(&self) -> usize {
        self.sites.iter().map(|s| s.layer).max().unwrap_or(0)
    }

    /// Errors listing every site deeper than `depth`.
    pub fn validate(&self, depth: usize) -> Result<()> {
        let bad: Vec<String> = self.sites.iter().filter(|s| s.layer > depth).map(Site::to_string).collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Placement(format!(
                "sites beyond model depth {depth}: {}",
                bad.join(", ")
            )))
        }
    }
}

impl fmt::Display for PlacementMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.sites.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<String> = self.sites.iter().map(Site::to_string).collect();
        f.write_str(&names.join(","))
    }
}
