use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token 0 opens every sequence.
pub const BOS: usize = 0;
/// Token 1 separates a sequence's source from its answer.
pub const SEP: usize = 1;
/// First symbol token.
const FIRST_SYMBOL: usize = 2;

/// Generator rule of a [`ToyCorpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", try_from = "String")]
pub enum CorpusRule {
    /// `BOS a_1 .. a_k SEP a_1 .. a_k`
    Copy,
    /// `BOS a b (a+b mod m) a' b' (a'+b' mod m) ..`
    ModAdd,
}

impl CorpusRule {
    pub const ALL: [CorpusRule; 2] = [CorpusRule::Copy, CorpusRule::ModAdd];

    pub fn name(self) -> &'static str {
        match self {
            CorpusRule::Copy => "copy",
            CorpusRule::ModAdd => "mod_add",
        }
    }
}

impl fmt::Display for CorpusRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorpusRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorpusRule::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            let valid: Vec<_> = CorpusRule::ALL.iter().map(|r| r.name()).collect();
            Error::Config(format!("unknown corpus rule {s:?}; valid rules: {}", valid.join(", ")))
        })
    }
}

impl TryFrom<String> for CorpusRule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Deterministic synthetic training sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpus {
    pub rule: CorpusRule,
    /// Number of distinct symbols drawn (must fit in the vocabulary).
    pub symbols: usize,
    pub seq_len: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for ToyCorpus {
    fn default() -> Self {
        Self {
            rule: CorpusRule::Copy,
            symbols: 8,
            seq_len: 10,
            samples: 512,
            seed: 0,
        }
    }
}

impl ToyCorpus {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.symbols < 2 || FIRST_SYMBOL + self.symbols > vocab_size {
            return Err(Error::Config(format!(
                "{} symbols do not fit a vocabulary of {vocab_size}",
                self.symbols
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config("corpus needs at least one sample".into()));
        }
        match self.rule {
            CorpusRule::Copy if self.seq_len < 4 || !self.seq_len.is_multiple_of(2) => Err(Error::Config(format!(
                "copy sequences need an even length of at least 4, got {}",
                self.seq_len
            ))),
            CorpusRule::ModAdd if self.seq_len < 4 => Err(Error::Config(format!(
                "mod_add sequences need a length of at least 4, got {}",
                self.seq_len
            ))),
            _ => Ok(()),
        }
    }

    /// Every sample, regenerated from `(rule, seed)`.
    pub fn generate(&self, vocab_size: usize) -> Result<Vec<Vec<usize>>> {
        self.validate(vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let sym = |rng: &mut ChaCha8Rng| FIRST_SYMBOL + rng.random_range(0..self.symbols);
        Ok((0..self.samples)
            .map(|_| match self.rule {
                CorpusRule::Copy => {
                    let k = (self.seq_len - 2) / 2;
                    let src: Vec<usize> = (0..k).map(|_| sym(&mut rng)).collect();
                    let mut s = Vec::with_capacity(self.seq_len);
                    s.push(BOS);
                    s.extend(&src);
                    s.push(SEP);
                    s.extend(&src);
                    s
                }
                CorpusRule::ModAdd => {
                    let mut s = vec![BOS];
                    while s.len() < self.seq_len {
                        let (a, b) = (sym(&mut rng) - FIRST_SYMBOL, sym(&mut rng) - FIRST_SYMBOL);
                        s.push(FIRST_SYMBOL + a);
                        s.push(FIRST_SYMBOL + b);
                        s.push(FIRST_SYMBOL + (a + b) % self.symbols);
                    }
                    s.truncate(self.seq_len);
                    s
                }
            })
            .collect())
    }
}
