//! Event counters shared by the runtime, the cache pool and the simulator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::WeightId;

/// Counters for a single forward call (one prefill or one decode step).
///
/// A "parameter-read event" is one full sweep over the base weights. Each
/// weight matrix records how often it was streamed; the event count is the
/// largest of those, so a batch-of-2 projection that touches `W_q` once
/// counts once and a second, separate pass over the same weights counts
/// twice. KV reads are counted the same way, per layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepLedger {
    weight_reads: BTreeMap<WeightId, u32>,
    param_bytes_read: u64,
    kv_reads: BTreeMap<usize, u32>,
    kv_bytes_read: u64,
    kv_bytes_written: u64,
    attention_calls: u32,
    tokens_computed: u64,
}

impl StepLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_weight_read(&mut self, id: WeightId, bytes: usize) {
        *self.weight_reads.entry(id).or_default() += 1;
        self.param_bytes_read += bytes as u64;
    }

    pub fn record_kv_read(&mut self, layer: usize, bytes: usize) {
        *self.kv_reads.entry(layer).or_default() += 1;
        self.kv_bytes_read += bytes as u64;
    }

    pub fn record_kv_write(&mut self, bytes: usize) {
        self.kv_bytes_written += bytes as u64;
    }

    pub fn record_attention_call(&mut self) {
        self.attention_calls += 1;
    }

    pub fn record_tokens(&mut self, n: usize) {
        self.tokens_computed += n as u64;
    }

    /// Number of full passes over the base parameters.
    pub fn param_read_events(&self) -> u32 {
        self.weight_reads.values().copied().max().unwrap_or(0)
    }

    /// Reads of a particular weight matrix.
    pub fn weight_reads(&self, id: WeightId) -> u32 {
        self.weight_reads.get(&id).copied().unwrap_or(0)
    }

    /// Distinct weight matrices touched.
    pub fn weights_touched(&self) -> usize {
        self.weight_reads.len()
    }

    /// Number of full passes over the cached KV.
    pub fn kv_read_events(&self) -> u32 {
        self.kv_reads.values().copied().max().unwrap_or(0)
    }

    pub fn param_bytes_read(&self) -> u64 {
        self.param_bytes_read
    }

    pub fn kv_bytes_read(&self) -> u64 {
        self.kv_bytes_read
    }

    pub fn kv_bytes_written(&self) -> u64 {
        self.kv_bytes_written
    }

    pub fn attention_calls(&self) -> u32 {
        self.attention_calls
    }

    pub fn tokens_computed(&self) -> u64 {
        self.tokens_computed
    }
}

/// Cumulative counters over many calls.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub prefill_calls: u64,
    pub prefill_tokens: u64,
    pub prefix_hit_tokens: u64,
    pub decode_steps: u64,
    pub param_read_events: u64,
    pub param_bytes_read: u64,
    pub kv_read_events: u64,
    pub kv_bytes_read: u64,
    pub kv_bytes_written: u64,
    pub attention_calls: u64,
}

impl MetricsLedger {
    pub fn absorb_prefill(&mut self, step: &StepLedger, hit_tokens: usize) {
        self.prefill_calls += 1;
        self.prefill_tokens += step.tokens_computed;
        self.prefix_hit_tokens += hit_tokens as u64;
        self.absorb(step);
    }

    pub fn absorb_decode(&mut self, step: &StepLedger) {
        self.decode_steps += 1;
        self.absorb(step);
    }

    fn absorb(&mut self, step: &StepLedger) {
        self.param_read_events += step.param_read_events() as u64;
        self.param_bytes_read += step.param_bytes_read;
        self.kv_read_events += step.kv_read_events() as u64;
        self.kv_bytes_read += step.kv_bytes_read;
        self.kv_bytes_written += step.kv_bytes_written;
        self.attention_calls += step.attention_calls as u64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WeightKind;

    #[test]
    fn events_are_max_over_weights() {
        let mut s = StepLedger::new();
        assert_eq!(s.param_read_events(), 0);
        s.record_weight_read(WeightId::layer(0, WeightKind::Q), 10);
        s.record_weight_read(WeightId::layer(1, WeightKind::Q), 10);
        assert_eq!(s.param_read_events(), 1);
        s.record_weight_read(WeightId::layer(0, WeightKind::Q), 10);
        assert_eq!(s.param_read_events(), 2);
        assert_eq!(s.param_bytes_read(), 30);
        s.record_kv_read(0, 8);
        s.record_kv_read(1, 8);
        assert_eq!(s.kv_read_events(), 1);
    }

    #[test]
    fn cumulative_ledger_is_monotone() {
        let mut m = MetricsLedger::default();
        let mut s = StepLedger::new();
        s.record_tokens(5);
        s.record_weight_read(WeightId::global(WeightKind::Embed), 4);
        m.absorb_prefill(&s, 16);
        m.absorb_decode(&s);
        assert_eq!(m.prefill_tokens, 5);
        assert_eq!(m.prefix_hit_tokens, 16);
        assert_eq!(m.param_read_events, 2);
        assert_eq!(m.decode_steps, 1);
    }
}
