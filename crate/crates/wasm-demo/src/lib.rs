//! Browser bindings for three routing operations: the squash curve,
//! dynamic routing and EM routing on synthetic votes. Each export returns
//! a JSON string for the page in `web/`.

use capsule_attn::routing::{eager, EmHyper, RoutingConfig, RoutingKind, RoutingTrace};
use capsule_attn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct SquashCurve {
    pub norm_in: Vec<f64>,
    pub norm_out: Vec<f64>,
}

/// `‖squash(s)‖` against `‖s‖` on `points` evenly spaced norms in `[0, max_norm]`.
pub fn squash_curve(max_norm: f64, points: usize) -> Result<SquashCurve, String> {
    if !(max_norm > 0.0 && max_norm.is_finite()) || points < 2 {
        return Err("need max_norm > 0 and at least two points".into());
    }
    let norm_in: Vec<f64> = (0..points).map(|k| max_norm * k as f64 / (points - 1) as f64).collect();
    let s = Tensor::from_fn([points, 2], |k| if k % 2 == 0 { norm_in[k / 2] } else { 0.0 });
    let v = eager::squash(&s).map_err(|e| e.to_string())?;
    let norm_out = v.data().chunks(2).map(|r| r[0].hypot(r[1])).collect();
    Ok(SquashCurve { norm_in, norm_out })
}

/// Votes `[1, h, l, d]`: every agreeing head votes for capsule `j` near a
/// shared centre `m_j` (spread `noise`); the last `dissent` heads vote at
/// random.
pub fn synthetic_votes(h: usize, l: usize, d: usize, noise: f64, dissent: usize, seed: u64) -> Result<Tensor<f64>, String> {
    if h == 0 || l == 0 || d == 0 || h > 16 || l > 16 || d > 64 {
        return Err("h and l must be in 1..=16 and d in 1..=64".into());
    }
    if !(noise >= 0.0 && noise.is_finite()) || dissent > h {
        return Err("noise must be >= 0 and dissent <= h".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut data = Vec::with_capacity(h * l * d);
    for i in 0..h {
        for k in 0..l * d {
            let e: f64 = rng.gen_range(-1.0..1.0);
            data.push(if i + dissent >= h { 2.0 * e } else { centres[k] + noise * e });
        }
    }
    Tensor::new([1, h, l, d], data).map_err(|e| e.to_string())
}

#[derive(Serialize)]
pub struct IterationView {
    /// `c[i][j]`.
    pub c: Vec<Vec<f64>>,
    /// `‖v_j‖` (EM: norm of the mean).
    pub norms: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    /// EM: mean `σ²` per capsule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_variance: Option<Vec<f64>>,
}

#[derive(Serialize)]
pub struct RoutingView {
    pub kind: &'static str,
    pub h: usize,
    pub l: usize,
    pub d: usize,
    pub iterations: Vec<IterationView>,
}

fn view(trace: &RoutingTrace<f64>, h: usize, l: usize, d: usize) -> RoutingView {
    let iterations = trace
        .iterations
        .iter()
        .map(|rec| IterationView {
            c: rec.assignments.data().chunks(l).map(<[f64]>::to_vec).collect(),
            norms: rec.outputs.data().chunks(d).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect(),
            alpha: rec.activations.as_ref().map(|a| a.data().to_vec()),
            mean_variance: rec
                .variances
                .as_ref()
                .map(|s| s.data().chunks(d).map(|r| r.iter().sum::<f64>() / d as f64).collect()),
        })
        .collect();
    RoutingView { kind: trace.kind.name(), h, l, d, iterations }
}

pub fn dynamic_demo(
    h: usize,
    l: usize,
    d: usize,
    iterations: usize,
    noise: f64,
    dissent: usize,
    seed: u64,
) -> Result<RoutingView, String> {
    if !(1..=10).contains(&iterations) {
        return Err("iterations must be in 1..=10".into());
    }
    let votes = synthetic_votes(h, l, d, noise, dissent, seed)?;
    let (_, trace) = eager::dynamic_route(&votes, iterations).map_err(|e| e.to_string())?;
    Ok(view(&trace, h, l, d))
}

/// EM routing with `λ_t = lambda_step · (t + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn em_demo(
    h: usize,
    l: usize,
    d: usize,
    iterations: usize,
    noise: f64,
    dissent: usize,
    seed: u64,
    lambda_step: f64,
) -> Result<RoutingView, String> {
    if !(1..=10).contains(&iterations) {
        return Err("iterations must be in 1..=10".into());
    }
    if !(lambda_step > 0.0 && lambda_step.is_finite()) {
        return Err("lambda step must be positive".into());
    }
    let votes = synthetic_votes(h, l, d, noise, dissent, seed)?;
    let mut cfg = RoutingConfig::new(RoutingKind::Em, l * d, h, l, iterations).map_err(|e| e.to_string())?;
    cfg.em = Some(EmHyper {
        lambda_schedule: (0..iterations).map(|t| lambda_step * (t + 1) as f64).collect(),
        variance_floor: None,
    });
    let beta = Tensor::zeros(vec![l]);
    let (_, trace) = eager::em_route(&votes, &cfg, &beta, &beta).map_err(|e| e.to_string())?;
    Ok(view(&trace, h, l, d))
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = squashCurve)]
pub fn squash_curve_js(max_norm: f64, points: usize) -> Result<String, JsValue> {
    to_js(squash_curve(max_norm, points))
}

#[wasm_bindgen(js_name = dynamicRouting)]
pub fn dynamic_routing_js(
    h: usize,
    l: usize,
    d: usize,
    iterations: usize,
    noise: f64,
    dissent: usize,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(dynamic_demo(h, l, d, iterations, noise, dissent, seed as u64))
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = emRouting)]
pub fn em_routing_js(
    h: usize,
    l: usize,
    d: usize,
    iterations: usize,
    noise: f64,
    dissent: usize,
    seed: u32,
    lambda_step: f64,
) -> Result<String, JsValue> {
    to_js(em_demo(h, l, d, iterations, noise, dissent, seed as u64, lambda_step))
}
