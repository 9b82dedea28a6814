//! Query–reference pair sampling.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CianError, Result};
use crate::mask::ImageLabelSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PairMode {
    /// References share at least one foreground class with the query.
    #[default]
    Common,
    /// References drawn from all other images regardless of labels.
    Random,
    /// The query is its own only reference.
    SelfPair,
}

impl PairMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PairMode::Common => "common",
            PairMode::Random => "random",
            PairMode::SelfPair => "self",
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairMode {
    type Err = CianError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "common" => Ok(PairMode::Common),
            "random" => Ok(PairMode::Random),
            "self" => Ok(PairMode::SelfPair),
            other => Err(CianError::invalid(format!("unknown pair mode {other:?}"))),
        }
    }
}

/// References for each query of a batch; ids are positions in the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub query_ids: Vec<usize>,
    pub reference_ids: Vec<Vec<usize>>,
    pub mode: PairMode,
}

impl PairBatch {
    /// Audit lines `query<TAB>reference<TAB>mode`, one per pair.
    pub fn write_log(&self, names: &[String], out: &mut impl Write) -> Result<()> {
        for (q, refs) in self.query_ids.iter().zip(&self.reference_ids) {
            for r in refs {
                let name = |i: usize| {
                    names
                        .get(i)
                        .cloned()
                        .ok_or_else(|| CianError::invalid(format!("no name for image {i}")))
                };
                writeln!(out, "{}\t{}\t{}", name(*q)?, name(*r)?, self.mode)?;
            }
        }
        Ok(())
    }
}

/// Foreground classes common to both sets.
pub fn shared_classes(a: &ImageLabelSet, b: &ImageLabelSet) -> ImageLabelSet {
    a.intersection(b)
}

/// Stateful sampler; one per training run.
#[derive(Clone, Debug)]
pub struct PairSampler {
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(seed: u64) -> Self {
        PairSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Draw `n` references (with replacement) for every query in `batch`
    /// from the whole of `index`.
    pub fn sample(
        &mut self,
        index: &[ImageLabelSet],
        batch: &[usize],
        mode: PairMode,
        n: usize,
    ) -> Result<PairBatch> {
        if index.is_empty() {
            return Err(CianError::invalid("cannot pair within an empty dataset"));
        }
        if n == 0 {
            return Err(CianError::invalid("need at least one reference per query"));
        }
        let mut reference_ids = Vec::with_capacity(batch.len());
        for &q in batch {
            let labels = index.get(q).ok_or_else(|| {
                CianError::invalid(format!("query {q} outside dataset of {}", index.len()))
            })?;
            let candidates: Vec<usize> = match mode {
                PairMode::SelfPair => Vec::new(),
                PairMode::Random => (0..index.len()).filter(|&i| i != q).collect(),
                PairMode::Common => (0..index.len())
                    .filter(|&i| i != q && !shared_classes(labels, &index[i]).is_empty())
                    .collect(),
            };
            let refs = (0..n)
                .map(|_| *candidates.choose(&mut self.rng).unwrap_or(&q))
                .collect();
            reference_ids.push(refs);
        }
        Ok(PairBatch {
            query_ids: batch.to_vec(),
            reference_ids,
            mode,
        })
    }
}

/// One-shot [`PairSampler::sample`] with a fresh seed.
pub fn sample_pairs(
    index: &[ImageLabelSet],
    batch: &[usize],
    mode: PairMode,
    n: usize,
    seed: u64,
) -> Result<PairBatch> {
    PairSampler::new(seed).sample(index, batch, mode, n)
}
