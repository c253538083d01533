use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

use super::isqrt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VoteMode {
    /// `û_{j|i} = u_i W_ij` with `W_ij: [d_in, d_out]`.
    Vector,
    /// `û_{j|i} = M_i W_ij` where `M_i` is `u_i` reshaped to `n × n` and
    /// `W_ij: [n, n]`; the product is flattened back to width `n²`.
    Pose,
}

pub fn is_perfect_square(n: usize) -> bool {
    let r = isqrt(n);
    r * r == n
}

/// Votes `[P, h, l, d_out]` from input capsules `u: [P, h, d_in]` and
/// transforms indexed `transforms[i][j]`, shared across positions.
pub fn compute_votes<T: Float>(
    g: &mut Graph<T>,
    u: Var,
    transforms: &[Vec<Var>],
    mode: VoteMode,
) -> Result<Var> {
    let us = g.shape(u).to_vec();
    if us.len() != 3 {
        return Err(Error::invalid("compute_votes", format!("capsules must be [P, h, d_in], got {us:?}")));
    }
    let (p, h, d_in) = (us[0], us[1], us[2]);
    if transforms.len() != h || transforms.iter().any(|row| row.len() != transforms[0].len()) || transforms[0].is_empty() {
        return Err(Error::invalid("compute_votes", format!("need an h×l grid of transforms for h = {h}")));
    }
    let l = transforms[0].len();
    let w0 = g.shape(transforms[0][0]).to_vec();
    for &w in transforms.iter().flatten() {
        if g.shape(w) != w0 {
            return Err(Error::shape("compute_votes", &w0, g.shape(w)));
        }
    }

    // Stack W into [h, rows, l * cols]: for each i the j-transforms side by side.
    let mut stacked = Vec::with_capacity(h);
    for row in transforms {
        let wi = g.concat(row, -1)?;
        let s = g.shape(wi).to_vec();
        stacked.push(g.reshape(wi, &[1, s[0], s[1]])?);
    }
    let w = g.concat(&stacked, 0)?;

    match mode {
        VoteMode::Vector => {
            if w0 != [d_in, w0[1]] {
                return Err(Error::shape("compute_votes", &[d_in, w0[1]], &w0));
            }
            let d_out = w0[1];
            let ut = g.permute(u, &[1, 0, 2])?;
            let y = g.matmul(ut, w)?;
            let y = g.reshape(y, &[h, p, l, d_out])?;
            g.permute(y, &[1, 0, 2, 3])
        }
        VoteMode::Pose => {
            if !is_perfect_square(d_in) {
                return Err(Error::Config(format!("pose votes need a square capsule width, got {d_in}")));
            }
            let n = isqrt(d_in);
            if w0 != [n, n] {
                return Err(Error::Config(format!("pose transforms must be {n}x{n}, got {w0:?}")));
            }
            let m = g.reshape(u, &[p, h, n, n])?;
            let m = g.permute(m, &[1, 0, 2, 3])?;
            let m = g.reshape(m, &[h, p * n, n])?;
            let y = g.matmul(m, w)?;
            let y = g.reshape(y, &[h, p, n, l, n])?;
            let y = g.permute(y, &[1, 0, 3, 2, 4])?;
            g.reshape(y, &[p, h, l, d_in])
        }
    }
}
