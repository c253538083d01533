//! Routing traces as JSON lines, one object per (iteration, position).

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::routing::RoutingTrace;
use crate::tensor::Float;

/// Tolerance on `Σ_j c_ij = 1` checked before anything is written.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub site: String,
    pub routing: &'static str,
    /// 1-based.
    pub iteration: usize,
    pub position: usize,
    /// `c[i][j]`, input capsule by output capsule.
    pub c: Vec<Vec<f64>>,
    /// `v[j]` (EM: the means).
    pub v: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

fn rows_of<T: Float>(data: &[T], width: usize) -> Vec<Vec<f64>> {
    data.chunks(width).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
}

/// Flattens a trace, failing if any assignment row is not a distribution.
pub fn trace_rows<T: Float>(trace: &RoutingTrace<T>, site: &str) -> Result<Vec<TraceRow>> {
    trace.check_assignments(ROW_SUM_TOLERANCE)?;
    let mut out = Vec::new();
    for (t, rec) in trace.iterations.iter().enumerate() {
        let [p, h, l] = rec.assignments.shape()[..] else { unreachable!("assignments are [P, h, l]") };
        let d_out = rec.outputs.shape()[2];
        for pos in 0..p {
            let c = &rec.assignments.data()[pos * h * l..(pos + 1) * h * l];
            let v = &rec.outputs.data()[pos * l * d_out..(pos + 1) * l * d_out];
            out.push(TraceRow {
                site: site.to_string(),
                routing: trace.kind.name(),
                iteration: t + 1,
                position: pos,
                c: rows_of(c, l),
                v: rows_of(v, d_out),
                sigma2: rec
                    .variances
                    .as_ref()
                    .map(|s| rows_of(&s.data()[pos * l * d_out..(pos + 1) * l * d_out], d_out)),
                alpha: rec
                    .activations
                    .as_ref()
                    .map(|a| a.data()[pos * l..(pos + 1) * l].iter().map(|x| x.as_f64()).collect()),
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
