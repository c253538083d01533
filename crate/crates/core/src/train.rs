//! Training loop, metrics stream and checkpoints.
//!
//! A run directory holds `config.txt` (model and training keys),
//! `metrics.csv`, periodic `ckpt_{step}.caps` files and `final.caps`.
//! Checkpoints carry the optimizer moments (`optim.m.*`, `optim.v.*`) and
//! step count (`optim.step`) next to the model parameters, so a run can be
//! resumed; training batches are keyed by step, which makes the resumed
//! run continue exactly where the original left off.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{parse_kv, Accuracy, Batch, Encoded, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::task::{TaskKind, TaskSpec};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,loss,token_acc,seq_acc";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.caps";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.caps";

/// Salt separating the held-out stream from the training stream.
const EVAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub lr_scale: f64,
    pub warmup: u64,
    pub label_smoothing: f64,
    /// Held-out evaluation (and one metrics row) every this many steps.
    pub eval_every: u64,
    pub eval_size: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Stop once held-out token accuracy reaches this value.
    pub stop_at_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::Copy,
            min_len: 1,
            max_len: 12,
            batch_size: 32,
            steps: 5000,
            seed: 42,
            lr_scale: 1.0,
            warmup: 400,
            label_smoothing: 0.0,
            eval_every: 100,
            eval_size: 256,
            checkpoint_every: 1000,
            stop_at_acc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn task(&self) -> Result<TaskSpec> {
        if self.model.src_vocab != self.model.tgt_vocab {
            return Err(Error::Config("synthetic tasks need equal source and target vocabularies".into()));
        }
        TaskSpec::new(self.train.task, self.model.src_vocab, self.train.min_len, self.train.max_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task()?;
        let t = &self.train;
        if t.batch_size == 0 || t.eval_every == 0 || t.eval_size == 0 {
            return Err(Error::Config("batch_size, eval_every and eval_size must be positive".into()));
        }
        if t.max_len + 1 > self.model.max_len {
            return Err(Error::Config(format!(
                "task length {} does not fit model max_len {}",
                t.max_len, self.model.max_len
            )));
        }
        if !(t.lr_scale >= 0.0 && t.lr_scale.is_finite()) || !(0.0..1.0).contains(&t.label_smoothing) {
            return Err(Error::Config("lr_scale must be >= 0 and label_smoothing in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let t = &self.train;
        let mut s = self.model.to_kv();
        let _ = write!(
            s,
            "task={}\nmin_len={}\ntask_max_len={}\nbatch_size={}\nsteps={}\nseed={}\nlr_scale={}\nwarmup={}\n\
             label_smoothing={}\neval_every={}\neval_size={}\ncheckpoint_every={}\n",
            t.task,
            t.min_len,
            t.max_len,
            t.batch_size,
            t.steps,
            t.seed,
            t.lr_scale,
            t.warmup,
            t.label_smoothing,
            t.eval_every,
            t.eval_size,
            t.checkpoint_every
        );
        if let Some(a) = t.stop_at_acc {
            let _ = writeln!(s, "stop_at_acc={a}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let model = ModelConfig::from_kv(&map)?;
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Config(format!("missing key '{k}'")));
        fn num<V: std::str::FromStr>(k: &str, s: &str) -> Result<V> {
            s.parse().map_err(|_| Error::Config(format!("bad value '{s}' for key '{k}'")))
        }
        let train = TrainConfig {
            task: get("task")?.parse()?,
            min_len: num("min_len", get("min_len")?)?,
            max_len: num("task_max_len", get("task_max_len")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            steps: num("steps", get("steps")?)?,
            seed: num("seed", get("seed")?)?,
            lr_scale: num("lr_scale", get("lr_scale")?)?,
            warmup: num("warmup", get("warmup")?)?,
            label_smoothing: num("label_smoothing", get("label_smoothing")?)?,
            eval_every: num("eval_every", get("eval_every")?)?,
            eval_size: num("eval_size", get("eval_size")?)?,
            checkpoint_every: num("checkpoint_every", get("checkpoint_every")?)?,
            stop_at_acc: map.get("stop_at_acc").map(|s| num("stop_at_acc", s)).transpose()?,
        };
        let run = RunConfig { model, train };
        run.validate()?;
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.step, self.loss, self.token_acc, self.seq_acc)
    }
}

/// Model plus optimizer state for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub run: RunConfig,
    pub task: TaskSpec,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    eval_set: Vec<Batch>,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let model = Model::build(run.model.clone(), run.train.seed)?;
        Self::assemble(run, model, None)
    }

    fn assemble(run: RunConfig, model: Model<f32>, adam: Option<Adam<f32>>) -> Result<Self> {
        let task = run.task()?;
        let adam = adam.unwrap_or_else(|| Adam::new(adam_config(&run), &model.params));
        let eval_seed = run.train.seed ^ EVAL_SALT;
        let mut eval_set = Vec::new();
        let mut start = 0;
        while start < run.train.eval_size {
            let n = EVAL_CHUNK.min(run.train.eval_size - start);
            eval_set.push(task.batch(eval_seed, start as u64, n)?);
            start += n;
        }
        Ok(Trainer { run, task, model, adam, eval_set })
    }

    /// Restores model and optimizer state from a checkpoint written by
    /// [`Trainer::save`].
    pub fn resume(run: RunConfig, path: &Path) -> Result<Self> {
        run.validate()?;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut step = None;
        for (name, t) in checkpoint::load(path)? {
            if let Some(k) = name.strip_prefix("optim.m.") {
                m.insert(k, t)?;
            } else if let Some(k) = name.strip_prefix("optim.v.") {
                v.insert(k, t)?;
            } else if name == "optim.step" {
                step = Some(t.item() as u64);
            } else {
                params.insert(&name, t)?;
            }
        }
        let step = step.ok_or_else(|| Error::Checkpoint("no optimizer state in checkpoint".into()))?;
        let model = Model::from_params(run.model.clone(), params)?;
        for store in [&m, &v] {
            if store.len() != model.params.len() {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
        }
        let adam = Adam { config: adam_config(&run), step, m, v };
        Self::assemble(run, model, Some(adam))
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn train_batch(&self, step: u64) -> Result<Batch> {
        let n = self.run.train.batch_size;
        self.task.batch(self.run.train.seed, step * n as u64, n)
    }

    /// One optimizer update; returns the training loss. A non-finite loss,
    /// gradient or updated parameter leaves the state untouched and returns
    /// [`Error::Diverged`].
    pub fn step(&mut self) -> Result<f64> {
        let step = self.adam.step;
        let batch = self.train_batch(step)?;
        let enc = Encoded::new(&batch, &self.model.config)?;
        let mut g = Graph::new();
        let b = self.model.params.bind(&mut g);
        let (loss, _) = self
            .model
            .forward_loss(&mut g, &b, &enc, self.run.train.label_smoothing)
            .map_err(|e| as_divergence(e, step))?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {value}"),
            });
        }
        g.backward(loss).map_err(|e| as_divergence(e, step))?;
        let grads = b.grads(&g);
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite gradient for '{name}'"),
            });
        }
        let (params, adam) = (self.model.params.clone(), self.adam.clone());
        self.adam.update(&mut self.model.params, &grads)?;
        let bad = self.model.params.iter().find(|(_, t)| !t.is_finite()).map(|(k, _)| k.to_string());
        if let Some(name) = bad {
            let detail = format!("update made '{name}' non-finite");
            self.model.params = params;
            self.adam = adam;
            return Err(Error::Diverged { step, detail });
        }
        Ok(value)
    }

    /// Held-out loss (token-weighted mean) and teacher-forced accuracy.
    pub fn evaluate(&self) -> Result<MetricsRow> {
        let mut acc = Accuracy::default();
        let mut loss = 0.0;
        for batch in &self.eval_set {
            let (l, a) = self.model.evaluate(batch)?;
            loss += l * a.tokens as f64;
            acc.add(a);
        }
        Ok(MetricsRow {
            step: self.adam.step,
            loss: loss / acc.tokens.max(1) as f64,
            token_acc: acc.token_acc(),
            seq_acc: acc.seq_acc(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let step = Tensor::<f32>::scalar(self.adam.step as f32);
        let m: Vec<(String, &Tensor<f32>)> = self.adam.m.iter().map(|(k, t)| (format!("optim.m.{k}"), t)).collect();
        let v: Vec<(String, &Tensor<f32>)> = self.adam.v.iter().map(|(k, t)| (format!("optim.v.{k}"), t)).collect();
        let mut entries: Vec<(&str, &Tensor<f32>)> = self.model.params.entries();
        entries.extend(m.iter().map(|(k, t)| (k.as_str(), *t)));
        entries.extend(v.iter().map(|(k, t)| (k.as_str(), *t)));
        entries.push(("optim.step", &step));
        checkpoint::save(path, &entries)
    }
}

/// Op-level overflow during training is divergence, not a bug.
fn as_divergence(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        e => e,
    }
}

fn adam_config(run: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr_scale: run.train.lr_scale,
        warmup: run.train.warmup,
        ..AdamConfig::new(run.model.d_model)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.caps"))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: MetricsRow,
    /// First evaluated step whose token accuracy met `stop_at_acc`.
    pub reached_at: Option<u64>,
    pub wall_secs: f64,
    pub num_params: usize,
}

/// Trains into `out`, optionally resuming from a checkpoint. `on_row` sees
/// every metrics row as it is written.
pub fn train(
    run: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainSummary> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), run.to_kv())?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(run.clone(), p)?,
        None => Trainer::new(run.clone())?,
    };
    let start = trainer.step_count();
    let metrics_path = out.join(METRICS_FILE);
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    if start > 0 {
        if let Ok(old) = fs::read_to_string(&metrics_path) {
            for line in old.lines().skip(1) {
                let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                if step <= start {
                    csv.push_str(line);
                    csv.push('\n');
                }
            }
        }
    }
    fs::write(&metrics_path, &csv)?;
    let mut metrics = fs::OpenOptions::new().append(true).open(&metrics_path)?;

    let cfg = &run.train;
    let mut reached_at = None;
    let mut emit = |row: MetricsRow, reached_at: &mut Option<u64>| -> Result<bool> {
        writeln!(metrics, "{}", row.to_csv())?;
        on_row(&row);
        let hit = cfg.stop_at_acc.is_some_and(|a| row.token_acc >= a);
        if hit && reached_at.is_none() {
            *reached_at = Some(row.step);
        }
        Ok(hit)
    };

    let mut last = trainer.evaluate()?;
    let mut stop = false;
    if start == 0 {
        stop = emit(last, &mut reached_at)?;
    }
    while !stop && trainer.step_count() < cfg.steps {
        if let Err(e) = trainer.step() {
            if matches!(e, Error::Diverged { .. }) {
                trainer.save(&out.join(LAST_GOOD_CHECKPOINT))?;
            }
            return Err(e);
        }
        let s = trainer.step_count();
        if cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 {
            trainer.save(&checkpoint_path(out, s))?;
        }
        if s % cfg.eval_every == 0 || s == cfg.steps {
            last = match trainer.evaluate().map_err(|e| as_divergence(e, s)) {
                Err(e @ Error::Diverged { .. }) => {
                    trainer.save(&out.join(LAST_GOOD_CHECKPOINT))?;
                    return Err(e);
                }
                r => r?,
            };
            stop = emit(last, &mut reached_at)?;
        }
    }
    trainer.save(&out.join(FINAL_CHECKPOINT))?;
    Ok(TrainSummary {
        steps: trainer.step_count(),
        last,
        reached_at,
        wall_secs: started.elapsed().as_secs_f64(),
        num_params: trainer.model.num_params(),
    })
}

/// Loads the model saved in a checkpoint, reading the run configuration
/// from `config.txt` next to it unless one is given.
pub fn load_model(ckpt: &Path, config: Option<&Path>) -> Result<Model<f32>> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let text = fs::read_to_string(&cfg_path)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", cfg_path.display())))?;
    let model_cfg = ModelConfig::from_kv(&parse_kv(&text)?)?;
    let mut params = ParamStore::new();
    for (name, t) in checkpoint::load(ckpt)? {
        if !name.starts_with("optim.") {
            params.insert(&name, t)?;
        }
    }
    Model::from_params(model_cfg, params)
}

/// Parses the metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config(format!("{} lacks the metrics header", path.display())));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Config(format!("bad metrics row '{l}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                token_acc: f[2].parse().map_err(|_| bad())?,
                seq_acc: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
