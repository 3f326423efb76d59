use serde::{Deserialize, Serialize};

use crate::cache::MemoryBudget;
use crate::error::{Error, Result};

use super::engine::TurnRecord;

/// Simulated seconds charged per unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Per prompt token computed (projections and FFN).
    pub prefill_token_cost: f64,
    /// Per query-key pair scored.
    pub attention_pair_cost: f64,
    /// Per full pass over the base weights.
    pub param_read_cost: f64,
    /// Per KV byte read during decode.
    pub kv_byte_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            prefill_token_cost: 1e-4,
            attention_pair_cost: 2e-8,
            param_read_cost: 4e-3,
            kv_byte_cost: 1e-9,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.prefill_token_cost,
            self.attention_pair_cost,
            self.param_read_cost,
            self.kv_byte_cost,
        ];
        if all.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::Config("costs must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Service time of one turn. Tokens recomputed after an eviction are
    /// charged the budget's recompute rate instead of the prefill rate.
    pub fn turn_seconds(&self, rec: &TurnRecord, budget: &MemoryBudget) -> f64 {
        let fresh = rec.computed_tokens - rec.recompute_tokens;
        self.prefill_token_cost * fresh as f64
            + budget.recompute_cost_per_token * rec.recompute_tokens as f64
            + self.attention_pair_cost * (rec.prefill_attention_pairs + rec.decode_attention_pairs) as f64
            + self.param_read_cost * (rec.prefill_param_reads + rec.decode_param_reads) as f64
            + self.kv_byte_cost * rec.decode_kv_bytes as f64
            + budget.swap_cost_per_byte * rec.swap_bytes as f64
    }
}
