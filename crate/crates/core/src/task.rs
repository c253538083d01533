//! Synthetic sequence tasks. Every sample is a pure function of
//! `(seed, index)`, so batches can be regenerated in any order.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, FIRST_CONTENT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        }
    }

    pub fn target(self, src: &[usize]) -> Vec<usize> {
        let mut t = src.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => t.reverse(),
            TaskKind::Sort => t.sort_unstable(),
        }
        t
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Includes the reserved pad/begin/end ids.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab: usize, min_len: usize, max_len: usize) -> Result<Self> {
        let spec = TaskSpec { kind, vocab, min_len, max_len };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FIRST_CONTENT {
            return Err(Error::Config(format!(
                "task vocabulary {} leaves no content ids after the {FIRST_CONTENT} reserved ones",
                self.vocab
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "empty length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Sample `index` of the stream `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let len = rng.gen_range(self.min_len..=self.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(FIRST_CONTENT..self.vocab)).collect();
        let tgt = self.kind.target(&src);
        (src, tgt)
    }

    /// Samples `start .. start + count`.
    pub fn batch(&self, seed: u64, start: u64, count: usize) -> Result<Batch> {
        let (src, tgt) = (start..start + count as u64).map(|i| self.sample(seed, i)).unzip();
        Batch::new(src, tgt)
    }
}
