//! Placement and capsule-count sweeps: every variant is gradient-checked
//! and trained with the same schedule and seeds, and summarized in one
//! table row.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::checks;
use crate::error::{Error, Result};
use crate::model::PlacementMap;
use crate::train::{self, RunConfig};

/// The placement grid: eleven variants plus the empty baseline.
pub const PLACEMENT_GRID: [&str; 12] = [
    "none",
    "enc1",
    "enc1,enc2",
    "enc5,enc6",
    "ed1",
    "ed6",
    "ed5,ed6",
    "dec1",
    "dec6",
    "dec5,dec6",
    "ed6,dec6",
    "ed5,ed6,dec5,dec6",
];

/// Model depth of the placement grid.
pub const PLACEMENT_DEPTH: usize = 6;

pub const CAPSULE_COUNTS: [usize; 4] = [2, 4, 8, 16];

pub const TABLE_HEADER: &str = "variant,status,capsule_width,params,grad_err,loss,token_acc,seq_acc,wall_secs";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Placement,
    CapsuleCount,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Placement => "placement",
            SweepKind::CapsuleCount => "capsule_count",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "placement" => Ok(SweepKind::Placement),
            "capsule_count" | "capsule-count" => Ok(SweepKind::CapsuleCount),
            other => Err(Error::Config(format!(
                "unknown sweep '{other}' (expected placement or capsule_count)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub run: RunConfig,
}

/// A requested variant that could not be built.
#[derive(Clone, Debug)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Plan {
    pub variants: Vec<Variant>,
    pub skipped: Vec<Skipped>,
}

/// Expands `requested` (or the default grid when empty) into run
/// configurations derived from `base`. Duplicates collapse to the first
/// occurrence; invalid entries are kept as [`Skipped`].
pub fn plan(kind: SweepKind, base: &RunConfig, requested: &[String]) -> Plan {
    let defaults: Vec<String> = match kind {
        SweepKind::Placement => PLACEMENT_GRID.iter().map(|s| s.to_string()).collect(),
        SweepKind::CapsuleCount => CAPSULE_COUNTS.iter().map(|l| l.to_string()).collect(),
    };
    let requested = if requested.is_empty() { &defaults[..] } else { requested };
    let mut plan = Plan::default();
    for raw in requested {
        let built = match kind {
            SweepKind::Placement => placement_variant(base, raw),
            SweepKind::CapsuleCount => capsule_variant(base, raw),
        };
        match built {
            Ok(v) => {
                if !plan.variants.iter().any(|w| w.name == v.name) {
                    plan.variants.push(v);
                }
            }
            Err(e) => {
                let name = raw.trim().to_string();
                if !plan.skipped.iter().any(|s| s.name == name) {
                    plan.skipped.push(Skipped { name, reason: e.to_string() });
                }
            }
        }
    }
    plan
}

fn placement_variant(base: &RunConfig, raw: &str) -> Result<Variant> {
    let placement = PlacementMap::parse(raw.trim())?;
    let mut run = base.clone();
    run.model.depth = PLACEMENT_DEPTH;
    run.model.placement = placement;
    if run.model.routing.is_none() && !run.model.placement.is_empty() {
        return Err(Error::Config("placement sweep needs a routing kind".into()));
    }
    run.validate()?;
    Ok(Variant {
        name: run.model.placement.to_string().replace(',', "+"),
        run,
    })
}

fn capsule_variant(base: &RunConfig, raw: &str) -> Result<Variant> {
    let l: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("capsule count '{raw}' is not a positive integer")))?;
    let mut run = base.clone();
    if run.model.routing.is_none() {
        return Err(Error::Config("capsule_count sweep needs a routing kind".into()));
    }
    run.model.capsules = l;
    run.validate()?;
    Ok(Variant { name: format!("l={l}"), run })
}

/// Coordinates checked per parameter block in each variant's gradient check.
pub const GRADCHECK_PER_BLOCK: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Ok,
    Skipped(String),
    Failed(String),
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Ok => f.write_str("ok"),
            Status::Skipped(r) => write!(f, "skipped: {r}"),
            Status::Failed(r) => write!(f, "failed: {r}"),
        }
    }
}

/// One table row; losses and accuracies are means over seeds, wall time
/// the total.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub status: Status,
    pub capsule_width: Option<usize>,
    pub params: Option<usize>,
    /// Largest relative error over seeds and blocks.
    pub grad_err: Option<f64>,
    pub loss: Option<f64>,
    pub token_acc: Option<f64>,
    pub seq_acc: Option<f64>,
    pub wall_secs: f64,
}

impl SweepRow {
    fn skipped(s: &Skipped) -> Self {
        SweepRow {
            variant: s.name.clone(),
            status: Status::Skipped(s.reason.clone()),
            capsule_width: None,
            params: None,
            grad_err: None,
            loss: None,
            token_acc: None,
            seq_acc: None,
            wall_secs: 0.0,
        }
    }

    pub fn to_csv(&self) -> String {
        fn opt<V: fmt::Display>(v: Option<V>) -> String {
            v.map_or(String::new(), |v| v.to_string())
        }
        let f6 = |v: Option<f64>| opt(v.map(|x| format!("{x:.6}")));
        let status = self.status.to_string().replace(',', ";");
        format!(
            "{},{},{},{},{},{},{},{},{:.1}",
            self.variant,
            status,
            opt(self.capsule_width),
            opt(self.params),
            opt(self.grad_err.map(|x| format!("{x:.3e}"))),
            f6(self.loss),
            f6(self.token_acc),
            f6(self.seq_acc),
            self.wall_secs
        )
    }
}

/// Runs every planned variant for every seed under `out/{variant}/seed{s}`
/// and writes `out/sweep.csv`. Skipped variants appear as rows too.
pub fn run(plan: &Plan, seeds: &[u64], out: &Path, mut on_row: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for s in &plan.skipped {
        let row = SweepRow::skipped(s);
        on_row(&row);
        rows.push(row);
    }
    for v in &plan.variants {
        let row = run_variant(v, seeds, out);
        on_row(&row);
        rows.push(row);
    }
    let mut csv = String::from(TABLE_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(rows)
}

fn run_variant(v: &Variant, seeds: &[u64], out: &Path) -> SweepRow {
    let started = Instant::now();
    let capsule_width = v.run.model.routing.map(|_| v.run.model.d_model / v.run.model.capsules);
    let mut row = SweepRow {
        variant: v.name.clone(),
        status: Status::Ok,
        capsule_width,
        params: None,
        grad_err: None,
        loss: None,
        token_acc: None,
        seq_acc: None,
        wall_secs: 0.0,
    };
    let mut grad_err: f64 = 0.0;
    let (mut loss, mut tok, mut seq) = (0.0, 0.0, 0.0);
    for &seed in seeds {
        let mut run = v.run.clone();
        run.train.seed = seed;
        let result = checks::full_model(&run.model, seed, Some(GRADCHECK_PER_BLOCK)).and_then(|report| {
            grad_err = grad_err.max(report.max_rel_err());
            let dir = out.join(&v.name).join(format!("seed{seed}"));
            train::train(&run, &dir, None, |_| {})
        });
        match result {
            Ok(s) => {
                row.params = Some(s.num_params);
                loss += s.last.loss;
                tok += s.last.token_acc;
                seq += s.last.seq_acc;
            }
            Err(e) => {
                row.status = Status::Failed(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    row.grad_err = Some(grad_err);
    if row.status == Status::Ok {
        if grad_err >= checks::TOLERANCE {
            row.status = Status::Failed(format!("gradient check error {grad_err:.3e}"));
        }
        let n = seeds.len() as f64;
        row.loss = Some(loss / n);
        row.token_acc = Some(tok / n);
        row.seq_acc = Some(seq / n);
    }
    row.wall_secs = started.elapsed().as_secs_f64();
    row
}
