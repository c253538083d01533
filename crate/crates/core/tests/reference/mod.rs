//! Straight-line `f64` reference implementations of routing, the capsule
//! layer and the transformer, plus drivers that report the largest
//! deviation of the library from them.
#![allow(dead_code)]

use std::f64::consts::PI;

use capsule_attn::autodiff::Graph;
use capsule_attn::capsule_layer::{capsule_layer_forward, CapsuleLayerConfig, CapsuleLayerParams};
use capsule_attn::model::{Batch, Encoded, Model, ModelConfig, Site, SiteKind};
use capsule_attn::params::ParamStore;
use capsule_attn::routing::{eager, EmHyper, RoutingConfig, RoutingKind, VoteMode};
use capsule_attn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let k = n2 / (1.0 + n2) / n2.sqrt();
    s.iter().map(|x| x * k).collect()
}

/// `votes[i][j]` is the vote of input `i` for output `j`. Returns the final
/// outputs and, per iteration, `(c, v)`.
pub fn dynamic_ref(votes: &[Vec<Vec<f64>>], iters: usize) -> (Mat, Vec<(Mat, Mat)>) {
    let (h, l) = (votes.len(), votes[0].len());
    let d = votes[0][0].len();
    let mut b = vec![vec![0.0; l]; h];
    let mut v = vec![vec![0.0; d]; l];
    let mut hist = Vec::new();
    for t in 0..iters {
        let c: Mat = b.iter().map(|row| softmax(row)).collect();
        for j in 0..l {
            let mut s = vec![0.0; d];
            for i in 0..h {
                for k in 0..d {
                    s[k] += c[i][j] * votes[i][j][k];
                }
            }
            v[j] = squash(&s);
        }
        hist.push((c, v.clone()));
        if t + 1 < iters {
            for i in 0..h {
                for j in 0..l {
                    b[i][j] += (0..d).map(|k| votes[i][j][k] * v[j][k]).sum::<f64>();
                }
            }
        }
    }
    (v, hist)
}

pub struct EmIter {
    pub c: Mat,
    pub mu: Mat,
    pub var: Mat,
    pub alpha: Vec<f64>,
}

pub fn em_ref(votes: &[Vec<Vec<f64>>], beta_a: &[f64], beta_m: &[f64], lambdas: &[f64], floor: f64) -> (Mat, Vec<EmIter>) {
    let (h, l) = (votes.len(), votes[0].len());
    let d = votes[0][0].len();
    let mut c = vec![vec![1.0 / l as f64; l]; h];
    let mut hist = Vec::new();
    let mut out = Vec::new();
    for (t, &lambda) in lambdas.iter().enumerate() {
        let mut mu = vec![vec![0.0; d]; l];
        let mut var = vec![vec![0.0; d]; l];
        let mut alpha = vec![0.0; l];
        for j in 0..l {
            let mass = (0..h).map(|i| c[i][j]).sum::<f64>().max(1e-12);
            for k in 0..d {
                mu[j][k] = (0..h).map(|i| c[i][j] * votes[i][j][k]).sum::<f64>() / mass;
                let spread: f64 = (0..h).map(|i| c[i][j] * (votes[i][j][k] - mu[j][k]).powi(2)).sum();
                var[j][k] = (spread / mass).max(floor);
            }
            let cost: f64 = (0..d).map(|k| (0.5 * var[j][k].ln() + 0.5 * (1.0 + (2.0 * PI).ln())) * mass).sum();
            let z = lambda * (beta_a[j] - beta_m[j] * mass - cost);
            alpha[j] = 1.0 / (1.0 + (-z).exp());
        }
        hist.push(EmIter { c: c.clone(), mu: mu.clone(), var: var.clone(), alpha: alpha.clone() });
        if t + 1 < lambdas.len() {
            for i in 0..h {
                let logits: Vec<f64> = (0..l)
                    .map(|j| {
                        let lp: f64 = (0..d)
                            .map(|k| {
                                -0.5 * (2.0 * PI * var[j][k]).ln()
                                    - (votes[i][j][k] - mu[j][k]).powi(2) / (2.0 * var[j][k])
                            })
                            .sum();
                        lp + alpha[j].ln()
                    })
                    .collect();
                c[i] = softmax(&logits);
            }
        }
        out = mu;
    }
    (out, hist)
}

pub fn nested(votes: &[f64], h: usize, l: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..h)
        .map(|i| (0..l).map(|j| votes[(i * l + j) * d..(i * l + j + 1) * d].to_vec()).collect())
        .collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.concat()
}

pub fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; cols];
    for (r, &xr) in x.iter().enumerate() {
        for c in 0..cols {
            y[c] += xr * w[r * cols + c];
        }
    }
    y
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Capsule layer at one position: votes, routing, concat, FFN, residual.
pub fn capsule_ref(u: &[Vec<f64>], params: &ParamStore<f64>, prefix: &str, cfg: &RoutingConfig) -> Vec<f64> {
    let (h, l) = (cfg.h, cfg.l);
    let d_in = u[0].len();
    let get = |n: &str| params.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
    let votes: Vec<Vec<Vec<f64>>> = (0..h)
        .map(|i| {
            (0..l)
                .map(|j| {
                    let w = get(&format!("w_vote.{i}.{j}"));
                    match cfg.vote_mode() {
                        VoteMode::Vector => matvec(&u[i], &w, cfg.d_out()),
                        VoteMode::Pose => {
                            let n = (d_in as f64).sqrt() as usize;
                            let mut out = vec![0.0; n * n];
                            for r in 0..n {
                                let row = matvec(&u[i][r * n..(r + 1) * n], &w, n);
                                out[r * n..(r + 1) * n].copy_from_slice(&row);
                            }
                            out
                        }
                    }
                })
                .collect()
        })
        .collect();
    let v = match cfg.kind {
        RoutingKind::Dynamic => dynamic_ref(&votes, cfg.iterations).0,
        RoutingKind::Em => {
            let hyper = cfg.em.as_ref().unwrap();
            em_ref(&votes, &get("beta_alpha"), &get("beta_mu"), &hyper.lambda_schedule, 1e-8).0
        }
    };
    let v = flat(&v);
    let hidden: Vec<f64> = add(&matvec(&v, &get("ffn.w1"), get("ffn.b1").len()), &get("ffn.b1"))
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();
    let ffn = add(&matvec(&hidden, &get("ffn.w2"), v.len()), &get("ffn.b2"));
    add(&u.concat(), &ffn)
}

/// Replaces all-zero tensors (biases, betas) with small random values.
pub fn enliven(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        if t.data().iter().all(|&x| x == 0.0) {
            for x in t.data_mut() {
                *x = rng.gen_range(-0.3..0.3);
            }
        }
    }
}

pub struct RefModel<'a> {
    pub cfg: &'a ModelConfig,
    pub p: &'a ParamStore<f64>,
}

impl RefModel<'_> {
    fn w(&self, name: &str) -> &[f64] {
        self.p.get(name).unwrap().data()
    }

    fn linear(&self, x: &[f64], w: &str, cols: usize) -> Vec<f64> {
        matvec(x, self.w(w), cols)
    }

    fn layer_norm(&self, x: &[f64], prefix: &str) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (g, b) = (self.w(&format!("{prefix}.gamma")), self.w(&format!("{prefix}.beta")));
        x.iter()
            .enumerate()
            .map(|(k, v)| (v - mean) / (var + 1e-6).sqrt() * g[k] + b[k])
            .collect()
    }

    fn ffn(&self, x: &[f64], prefix: &str) -> Vec<f64> {
        let f = self.cfg.d_ff;
        let hdn: Vec<f64> = add(&self.linear(x, &format!("{prefix}.w1"), f), self.w(&format!("{prefix}.b1")))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        add(&self.linear(&hdn, &format!("{prefix}.w2"), self.cfg.d_model), self.w(&format!("{prefix}.b2")))
    }

    /// `keep(q, k)` says whether query `q` may attend to key `k`.
    fn attention(&self, x: &[Vec<f64>], mem: &[Vec<f64>], prefix: &str, site: Site, keep: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
        let (d, h) = (self.cfg.d_model, self.cfg.heads);
        let dk = d / h;
        let mut per_pos_heads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); x.len()];
        for i in 0..h {
            let proj = |rows: &[Vec<f64>], w: &str| -> Vec<Vec<f64>> {
                rows.iter().map(|r| self.linear(r, &format!("{prefix}.{w}.{i}"), dk)).collect()
            };
            let (q, k, v) = (proj(x, "w_q"), proj(mem, "w_k"), proj(mem, "w_v"));
            for (qi, qrow) in q.iter().enumerate() {
                let keys: Vec<usize> = (0..mem.len()).filter(|&kj| keep(qi, kj)).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&kj| qrow.iter().zip(&k[kj]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                let mut out = vec![0.0; dk];
                for (wt, &kj) in a.iter().zip(&keys) {
                    for c in 0..dk {
                        out[c] += wt * v[kj][c];
                    }
                }
                per_pos_heads[qi].push(out);
            }
        }
        let placed = self.cfg.routing.is_some() && self.cfg.active_placement().contains(site);
        per_pos_heads
            .iter()
            .map(|heads| {
                let agg = if placed {
                    let routing = self.cfg.capsule_layer().unwrap().unwrap().routing;
                    capsule_ref(heads, self.p, &format!("{site}.capsule"), &routing)
                } else {
                    heads.concat()
                };
                self.linear(&agg, &format!("{prefix}.w_o"), d)
            })
            .collect()
    }

    fn embed(&self, table: &str, ids: &[usize]) -> Vec<Vec<f64>> {
        let d = self.cfg.d_model;
        let e = self.w(table);
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|c| {
                        let angle = pos as f64 / 10000f64.powf((c - c % 2) as f64 / d as f64);
                        let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                        e[id * d + c] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    /// Logits for one padded sequence pair, `[tgt positions][vocab]`.
    pub fn forward(&self, src: &[usize], src_valid: &[bool], tgt_in: &[usize], tgt_valid: &[bool]) -> Vec<Vec<f64>> {
        let mut x = self.embed("src_embed", src);
        for n in 1..=self.cfg.depth {
            let a = self.attention(&x, &x, &format!("enc.{n}.self_attn"), Site::new(SiteKind::Enc, n), |_, k| src_valid[k]);
            x = x.iter().zip(&a).map(|(r, s)| self.layer_norm(&add(r, s), &format!("enc.{n}.ln1"))).collect();
            x = x.iter().map(|r| self.layer_norm(&add(r, &self.ffn(r, &format!("enc.{n}.ffn"))), &format!("enc.{n}.ln2"))).collect();
        }
        let mut y = self.embed("tgt_embed", tgt_in);
        for n in 1..=self.cfg.depth {
            let a = self.attention(&y, &y, &format!("dec.{n}.self_attn"), Site::new(SiteKind::Dec, n), |q, k| k <= q && tgt_valid[k]);
            y = y.iter().zip(&a).map(|(r, s)| self.layer_norm(&add(r, s), &format!("dec.{n}.ln1"))).collect();
            let c = self.attention(&y, &x, &format!("dec.{n}.cross_attn"), Site::new(SiteKind::Ed, n), |_, k| src_valid[k]);
            y = y.iter().zip(&c).map(|(r, s)| self.layer_norm(&add(r, s), &format!("dec.{n}.ln2"))).collect();
            y = y.iter().map(|r| self.layer_norm(&add(r, &self.ffn(r, &format!("dec.{n}.ffn"))), &format!("dec.{n}.ln3"))).collect();
        }
        y.iter()
            .map(|r| add(&self.linear(r, "out.w", self.cfg.tgt_vocab), self.w("out.b")))
            .collect()
    }
}


/// Largest deviation of outputs and per-iteration `(c, v)` from the
/// reference over `n` random dynamic routing instances.
pub fn dynamic_instances(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (p, h, l, d) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=6));
        let iters = rng.gen_range(1..=4);
        let scale = [0.05, 1.0, 3.0][rng.gen_range(0..3)];
        let votes = rand_vec(&mut rng, p * h * l * d, scale);
        let t = Tensor::new([p, h, l, d], votes.clone()).unwrap();
        let (v, trace) = eager::dynamic_route(&t, iters).unwrap();
        assert_eq!(trace.iterations.len(), iters);
        let chunk = h * l * d;
        for q in 0..p {
            let (want, hist) = dynamic_ref(&nested(&votes[q * chunk..(q + 1) * chunk], h, l, d), iters);
            worst = worst.max(max_abs_diff(&v.data()[q * l * d..(q + 1) * l * d], &flat(&want)));
            for (rec, (c, vv)) in trace.iterations.iter().zip(&hist) {
                worst = worst.max(max_abs_diff(&rec.assignments.data()[q * h * l..(q + 1) * h * l], &flat(c)));
                worst = worst.max(max_abs_diff(&rec.outputs.data()[q * l * d..(q + 1) * l * d], &flat(vv)));
            }
        }
    }
    worst
}

/// Same for EM routing: outputs, and per iteration `c`, `μ`, `σ²` and `α`.
/// Even instances use the default `λ` schedule, odd ones random values.
pub fn em_instances(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..n {
        let (p, l, d) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=6));
        let heads: Vec<usize> = (1..=5).filter(|h| (l * d) % h == 0).collect();
        let h = heads[rng.gen_range(0..heads.len())];
        let iters = rng.gen_range(1..=4);
        let lambdas: Vec<f64> = if case % 2 == 0 {
            (0..iters).map(|t| 0.01 * (t + 1) as f64).collect()
        } else {
            (0..iters).map(|_| rng.gen_range(0.05..2.0)).collect()
        };
        let votes = rand_vec(&mut rng, p * h * l * d, 1.5);
        let (ba, bm) = (rand_vec(&mut rng, l, 1.0), rand_vec(&mut rng, l, 1.0));
        let mut cfg = RoutingConfig::new(RoutingKind::Em, l * d, h, l, iters).unwrap();
        cfg.em = Some(EmHyper { lambda_schedule: lambdas.clone(), variance_floor: None });
        let t = Tensor::new([p, h, l, d], votes.clone()).unwrap();
        let (ta, tm) = (Tensor::new([l], ba.clone()).unwrap(), Tensor::new([l], bm.clone()).unwrap());
        let (mu, trace) = eager::em_route(&t, &cfg, &ta, &tm).unwrap();
        let chunk = h * l * d;
        for q in 0..p {
            let (want, hist) = em_ref(&nested(&votes[q * chunk..(q + 1) * chunk], h, l, d), &ba, &bm, &lambdas, 1e-8);
            let (cs, vs, ps) = (q * h * l..(q + 1) * h * l, q * l * d..(q + 1) * l * d, q * l..(q + 1) * l);
            worst = worst.max(max_abs_diff(&mu.data()[vs.clone()], &flat(&want)));
            for (rec, it) in trace.iterations.iter().zip(&hist) {
                let var = rec.variances.as_ref().unwrap();
                let alpha = rec.activations.as_ref().unwrap();
                worst = worst
                    .max(max_abs_diff(&rec.assignments.data()[cs.clone()], &flat(&it.c)))
                    .max(max_abs_diff(&rec.outputs.data()[vs.clone()], &flat(&it.mu)))
                    .max(max_abs_diff(&var.data()[vs.clone()], &flat(&it.var)))
                    .max(max_abs_diff(&alpha.data()[ps.clone()], &it.alpha));
            }
        }
    }
    worst
}

/// Largest deviation of `capsule_layer_forward` from the per-position
/// composition over a few positions.
pub fn capsule_layer_max_diff(kind: RoutingKind, d: usize, h: usize, l: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = 5;
    let cfg = CapsuleLayerConfig::new(RoutingConfig::new(kind, d, h, l, 3).unwrap(), 24).unwrap();
    let mut store = ParamStore::<f64>::init(&cfg.param_specs("cap"), rng.gen()).unwrap();
    enliven(&mut store, &mut rng);
    let w = d / h;
    let heads: Vec<Vec<f64>> = (0..h).map(|_| rand_vec(&mut rng, positions * w, 1.0)).collect();

    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let hv: Vec<_> = heads
        .iter()
        .map(|x| g.constant(Tensor::new([positions, w], x.clone()).unwrap()))
        .collect();
    let params = CapsuleLayerParams::from_bindings(&b, "cap", &cfg).unwrap();
    let (o, _) = capsule_layer_forward(&mut g, &hv, &params, &cfg, false).unwrap();
    let got = g.value(o).data();

    let mut worst = 0.0f64;
    for pos in 0..positions {
        let u: Vec<Vec<f64>> = heads.iter().map(|x| x[pos * w..(pos + 1) * w].to_vec()).collect();
        let want = capsule_ref(&u, &store, "cap", &cfg.routing);
        worst = worst.max(max_abs_diff(&got[pos * d..(pos + 1) * d], &want));
    }
    worst
}

/// Largest deviation of `Model::forward` logits from `RefModel` on a padded
/// two-sequence batch. Zero-initialised parameters are randomised first.
pub fn model_max_diff(cfg: &ModelConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::build(cfg.clone(), seed).unwrap();
    enliven(&mut model.params, &mut rng);
    let batch = Batch::new(vec![vec![5, 7, 3, 9], vec![4, 6]], vec![vec![5, 7, 3], vec![4, 6, 8, 10, 11]]).unwrap();
    let enc = Encoded::new(&batch, cfg).unwrap();
    let mut g = Graph::new();
    let b = model.params.bind_frozen(&mut g);
    let fwd = model.forward(&mut g, &b, &enc, false).unwrap();
    let logits = g.value(fwd.logits).data();

    let r = RefModel { cfg, p: &model.params };
    let (s, t, v) = (enc.src_len, enc.tgt_len, cfg.tgt_vocab);
    let mut worst = 0.0f64;
    for row in 0..enc.batch {
        let want = r.forward(
            &enc.src_ids[row * s..(row + 1) * s],
            &enc.src_valid[row],
            &enc.tgt_in[row * t..(row + 1) * t],
            &enc.tgt_valid[row],
        );
        worst = worst.max(max_abs_diff(&logits[row * t * v..(row + 1) * t * v], &want.concat()));
    }
    worst
}
