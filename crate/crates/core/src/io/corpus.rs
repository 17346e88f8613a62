//! Seeded synthetic token streams standing in for natural-text calibration data.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_VOCAB: usize = 256;

/// The transition table of `markov2` is a property of the "language", not of
/// the sample, so it is drawn from a fixed seed. The user seed only drives
/// the stream.
const MARKOV2_TABLE_SEED: u64 = 0x6d61_726b_6f76_3200;
/// Probability that a `markov2` step follows its table entry.
const MARKOV2_FOLLOW: f64 = 0.85;
/// Contexts are (previous token, token before it mod this).
const MARKOV2_LAG_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRule {
    /// Order-2 Markov chain with a sparse transition structure.
    Markov2,
    /// I.i.d. uniform tokens: a null control.
    Uniform,
}

impl FromStr for CorpusRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov2" => Ok(CorpusRule::Markov2),
            "uniform" => Ok(CorpusRule::Uniform),
            other => Err(Error::invalid(format!(
                "unknown corpus rule {other:?} (expected markov2 or uniform)"
            ))),
        }
    }
}

impl fmt::Display for CorpusRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusRule::Markov2 => "markov2",
            CorpusRule::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub tokens: Vec<u32>,
    pub vocab_size: usize,
    pub rule: CorpusRule,
    pub seed: u64,
}

impl SyntheticCorpus {
    /// Consecutive non-overlapping sequences of `len` tokens; a short tail is
    /// dropped.
    pub fn sequences(&self, len: usize) -> Vec<Vec<u32>> {
        if len == 0 {
            return Vec::new();
        }
        self.tokens.chunks_exact(len).map(<[u32]>::to_vec).collect()
    }
}

pub fn generate_corpus(
    rule: CorpusRule,
    seed: u64,
    length: usize,
    vocab_size: usize,
) -> Result<SyntheticCorpus> {
    if length == 0 {
        return Err(Error::invalid("corpus length must be at least 1"));
    }
    if vocab_size < 2 || vocab_size > u32::MAX as usize {
        return Err(Error::invalid(format!(
            "unsupported vocabulary size {vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab_size as u32;
    let tokens = match rule {
        CorpusRule::Uniform => (0..length).map(|_| rng.gen_range(0..v)).collect(),
        CorpusRule::Markov2 => {
            let table = markov2_table(vocab_size);
            let mut out = Vec::with_capacity(length);
            for t in 0..length {
                let tok = if t < 2 || !rng.gen_bool(MARKOV2_FOLLOW) {
                    rng.gen_range(0..v)
                } else {
                    let lag = out[t - 2] as usize % MARKOV2_LAG_CLASSES;
                    table[lag * vocab_size + out[t - 1] as usize]
                };
                out.push(tok);
            }
            out
        }
    };
    Ok(SyntheticCorpus {
        tokens,
        vocab_size,
        rule,
        seed,
    })
}

fn markov2_table(vocab_size: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(MARKOV2_TABLE_SEED ^ vocab_size as u64);
    (0..MARKOV2_LAG_CLASSES * vocab_size)
        .map(|_| rng.gen_range(0..vocab_size as u32))
        .collect()
}
