//! Block-granular KV storage shared between models.
//!
//! Full blocks of [`BLOCK_SIZE`] positions are content-addressed by a chain
//! hash of `(parent hash, chunk tokens)` under a namespace. The namespace is
//! what decides who can share: every ICaRus model writes and reads the one
//! [`SHARED`] namespace, while a conventionally fine-tuned model gets its own
//! (see [`namespace_for`]).
//!
//! ```
//! use icarus::cache::{namespace_for, CacheMode, KvPool, MemoryBudget, BLOCK_SIZE};
//!
//! let mut pool: KvPool<()> = KvPool::new(MemoryBudget::unlimited(), 64);
//! let prompt: Vec<usize> = (0..64).collect();
//! let a = namespace_for(CacheMode::Icarus, 0);
//! let b = namespace_for(CacheMode::Icarus, 1);
//! pool.commit(a, &prompt, 0, None, |_, _| ()).unwrap();
//! let hit = pool.lookup_prefix(b, &prompt, 1);
//! assert_eq!(hit.matched, 64);
//! assert_eq!(hit.blocks.len(), 64 / BLOCK_SIZE);
//! pool.release(&hit.blocks);
//! ```

mod pool;

pub use pool::{chunk_hash, BlockId, CommitOutcome, EvictOutcome, KvPool, Lookup, PoolStats, Residency};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions per block.
pub const BLOCK_SIZE: usize = 16;

/// Index scope of a cached prefix.
pub type Namespace = u64;

/// The namespace every ICaRus model shares.
pub const SHARED: Namespace = 0;

/// How models map onto cache namespaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// One namespace per model.
    Baseline,
    /// One namespace for all models.
    Icarus,
}

impl CacheMode {
    pub fn name(self) -> &'static str {
        match self {
            CacheMode::Baseline => "baseline",
            CacheMode::Icarus => "icarus",
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(CacheMode::Baseline),
            "icarus" => Ok(CacheMode::Icarus),
            _ => Err(Error::Mode(format!("unknown mode {s:?} (expected baseline or icarus)"))),
        }
    }
}

/// Namespace used by `model` under `mode`.
pub fn namespace_for(mode: CacheMode, model: usize) -> Namespace {
    match mode {
        CacheMode::Icarus => SHARED,
        CacheMode::Baseline => model as Namespace + 1,
    }
}

/// What happens to an evicted block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionPolicy {
    /// Drop it; the next request that needs it recomputes.
    Recompute,
    /// Move it to swap space while room remains, otherwise drop it.
    Swap,
}

impl EvictionPolicy {
    pub fn name(self) -> &'static str {
        match self {
            EvictionPolicy::Recompute => "recompute",
            EvictionPolicy::Swap => "swap",
        }
    }
}

impl fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvictionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recompute" => Ok(EvictionPolicy::Recompute),
            "swap" => Ok(EvictionPolicy::Swap),
            _ => Err(Error::Mode(format!(
                "unknown eviction policy {s:?} (expected recompute or swap)"
            ))),
        }
    }
}

/// KV byte budget of a pool, its swap space, and the policy applied when it
/// runs out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryBudget {
    pub kv_bytes: u64,
    pub swap_bytes: u64,
    pub policy: EvictionPolicy,
    /// Charged per token recomputed because its block had been evicted.
    pub recompute_cost_per_token: f64,
    /// Charged per byte moved in either direction between pool and swap.
    pub swap_cost_per_byte: f64,
}

impl Default for MemoryBudget {
    fn default() -> Self {
        Self::unlimited()
    }
}

impl MemoryBudget {
    pub fn unlimited() -> Self {
        Self {
            kv_bytes: u64::MAX,
            swap_bytes: 0,
            policy: EvictionPolicy::Recompute,
            recompute_cost_per_token: 1.0,
            swap_cost_per_byte: 0.0,
        }
    }

    pub fn bytes(kv_bytes: u64, policy: EvictionPolicy) -> Self {
        Self {
            kv_bytes,
            policy,
            ..Self::unlimited()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kv_bytes == 0 || !(self.recompute_cost_per_token >= 0.0) || !(self.swap_cost_per_byte >= 0.0) {
            return Err(Error::Config(
                "memory budget and costs must be non-negative, budget positive".into(),
            ));
        }
        Ok(())
    }
}
