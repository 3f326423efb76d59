//! Multi-agent serving simulation.
//!
//! Requests from an agent workflow are played through a single FIFO server
//! on a simulated clock. Every turn runs against a [`KvPool`](crate::cache::KvPool):
//! in baseline mode each agent has its own namespace, in ICaRus mode all
//! agents share one. Service time is charged from the work each turn
//! actually did (tokens computed, weight passes, KV bytes read, blocks
//! swapped).
//!
//! Two engines serve turns. [`ModelEngine`] runs real generation sessions
//! and stores real keys and values in the pool; [`AccountingEngine`] tracks
//! the same pool with empty payloads and takes decode counters from a
//! measured [`DecodeProfile`]. Both produce identical records on the same
//! trace, so sweeps use the accounting engine.
//!
//! ```
//! use icarus::cache::CacheMode;
//! use icarus::sim::{SimConfig, LenRange};
//!
//! let mut cfg = SimConfig::default();
//! cfg.workload.num_agents = 4;
//! cfg.workload.requests = 8;
//! cfg.workload.turns = LenRange::fixed(4);
//! let base = cfg.run_cell(CacheMode::Baseline, 0.5, 4).unwrap();
//! let shared = cfg.run_cell(CacheMode::Icarus, 0.5, 4).unwrap();
//! assert!(shared.prefill_tokens < base.prefill_tokens);
//! assert!(shared.cross_model_hits > 0);
//! ```

mod cost;
mod engine;
mod report;
mod run;
mod workload;

pub use cost::CostModel;
pub use engine::{AccountingEngine, DecodeProfile, Engine, ModelEngine, TurnRecord};
pub use report::{summary_json, table_csv, CSV_HEADER, SCHEMA_VERSION};
pub use run::{percentile, run, RunReport};
pub use workload::{
    generate_workload, LenRange, Pattern, Request, Routing, Turn, TurnKind, WorkloadConfig, WorkloadTrace,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheMode, EvictionPolicy, MemoryBudget};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::runtime::DecodePath;

/// Which engine serves the turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Accounting,
    Model,
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineKind::Accounting => "accounting",
            EngineKind::Model => "model",
        })
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accounting" => Ok(EngineKind::Accounting),
            "model" => Ok(EngineKind::Model),
            _ => Err(Error::Mode(format!(
                "unknown engine {s:?} (expected accounting or model)"
            ))),
        }
    }
}

/// Everything a sweep needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub workload: WorkloadConfig,
    pub cost: CostModel,
    pub budget: MemoryBudget,
    pub path: DecodePath,
    pub engine: EngineKind,
    pub modes: Vec<CacheMode>,
    pub qps: Vec<f64>,
    pub agents: Vec<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            workload: WorkloadConfig::default(),
            cost: CostModel::default(),
            budget: MemoryBudget {
                kv_bytes: 64 << 20,
                swap_bytes: 64 << 20,
                policy: EvictionPolicy::Recompute,
                recompute_cost_per_token: CostModel::default().prefill_token_cost,
                swap_cost_per_byte: 5e-10,
            },
            path: DecodePath::Fused,
            engine: EngineKind::Accounting,
            modes: vec![CacheMode::Baseline, CacheMode::Icarus],
            qps: vec![0.1, 0.2, 0.4, 0.8, 1.6, 3.2],
            agents: vec![8],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.workload.validate()?;
        self.cost.validate()?;
        self.budget.validate()?;
        if self.workload.vocab_size > self.model.vocab_size {
            return Err(Error::Config(format!(
                "workload vocabulary {} exceeds the model's {}",
                self.workload.vocab_size, self.model.vocab_size
            )));
        }
        if self.agents.contains(&0) || self.qps.iter().any(|q| !(*q > 0.0)) {
            return Err(Error::Config("agent counts and qps values must be positive".into()));
        }
        Ok(())
    }

    /// One run at the given mode, arrival rate and agent count.
    pub fn run_cell(&self, mode: CacheMode, qps: f64, agents: usize) -> Result<RunReport> {
        let workload = WorkloadConfig {
            qps,
            num_agents: agents,
            ..self.workload.clone()
        };
        let cfg = SimConfig {
            workload,
            ..self.clone()
        };
        cfg.validate()?;
        let trace = generate_workload(&cfg.workload)?;
        match cfg.engine {
            EngineKind::Accounting => {
                let mut e = AccountingEngine::new(&cfg.model, mode, cfg.path, cfg.budget)?;
                run(&trace, &mut e, &cfg.budget, &cfg.cost)
            }
            EngineKind::Model => {
                let mut e = ModelEngine::new(&cfg.model, mode, cfg.path, cfg.budget, agents, cfg.workload.seed)?;
                run(&trace, &mut e, &cfg.budget, &cfg.cost)
            }
        }
    }

    /// Every (agents, qps, mode) cell, in that nesting order.
    pub fn sweep(&self) -> Result<Vec<RunReport>> {
        self.validate()?;
        let mut out = Vec::new();
        for &n in &self.agents {
            for &q in &self.qps {
                for &m in &self.modes {
                    out.push(self.run_cell(m, q, n)?);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            workload: WorkloadConfig {
                requests: 12,
                turns: LenRange::new(2, 5),
                ..WorkloadConfig::default()
            },
            ..SimConfig::default()
        }
    }

    #[test]
    fn empty_qps_list_gives_empty_table() {
        let cfg = SimConfig { qps: vec![], ..small() };
        assert!(cfg.sweep().unwrap().is_empty());
    }

    #[test]
    fn single_agent_modes_are_identical() {
        let cfg = small();
        let a = cfg.run_cell(CacheMode::Baseline, 0.3, 1).unwrap();
        let b = cfg.run_cell(CacheMode::Icarus, 0.3, 1).unwrap();
        assert_eq!(
            RunReport {
                mode: CacheMode::Icarus,
                ..a
            },
            b
        );
    }

    #[test]
    fn prefill_and_hit_tokens_cover_every_prompt_token() {
        for mode in [CacheMode::Baseline, CacheMode::Icarus] {
            let r = small().run_cell(mode, 0.3, 4).unwrap();
            assert_eq!(r.prefill_tokens + r.prefix_hit_tokens, r.prompt_tokens);
        }
    }

    #[test]
    fn reruns_are_identical() {
        let cfg = small();
        assert_eq!(cfg.sweep().unwrap(), cfg.sweep().unwrap());
    }

    #[test]
    fn infeasible_budget_is_a_config_error() {
        let mut cfg = small();
        cfg.budget.kv_bytes = 1024;
        let err = cfg.run_cell(CacheMode::Icarus, 0.3, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
