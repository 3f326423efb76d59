use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheMode, EvictionPolicy, MemoryBudget, PoolStats};
use crate::error::{Error, Result};

use super::cost::CostModel;
use super::engine::{Engine, TurnRecord};
use super::workload::WorkloadTrace;

/// Outcome of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: CacheMode,
    pub eviction: EvictionPolicy,
    pub agents: usize,
    pub qps: f64,
    pub requests: usize,
    /// End-to-end latency of every request, by request id.
    pub latencies: Vec<f64>,
    pub p95_latency: f64,
    pub mean_latency: f64,
    /// Completed requests per simulated second, up to the last completion.
    pub throughput: f64,
    pub makespan: f64,
    pub evictions: u64,
    pub recompute_tokens: u64,
    pub swap_bytes: u64,
    pub peak_kv_bytes: u64,
    pub cross_model_hits: u64,
    pub prompt_tokens: u64,
    pub prefill_tokens: u64,
    pub prefix_hit_tokens: u64,
    pub decode_steps: u64,
    pub pool: PoolStats,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(sample: &[f64], p: f64) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

#[derive(Debug, PartialEq)]
struct Ready {
    time: f64,
    request: usize,
    turn: usize,
}

impl Eq for Ready {}

impl Ord for Ready {
    // earliest first on a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.request.cmp(&self.request))
            .then(other.turn.cmp(&self.turn))
    }
}

impl PartialOrd for Ready {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Play `trace` through `engine` on a single FIFO server. Turns become
/// ready at request arrival or one tool latency after the previous turn.
pub fn run<E: Engine>(
    trace: &WorkloadTrace,
    engine: &mut E,
    budget: &MemoryBudget,
    cost: &CostModel,
) -> Result<RunReport> {
    cost.validate()?;
    budget.validate()?;
    let n = trace.requests.len();
    let mut heap: BinaryHeap<Ready> = trace
        .requests
        .iter()
        .filter(|r| !r.turns.is_empty())
        .map(|r| Ready {
            time: r.arrival,
            request: r.id,
            turn: 0,
        })
        .collect();
    let mut contexts: Vec<Vec<usize>> = vec![trace.system.clone(); n];
    let mut latencies = vec![0.0; n];
    let mut total = TurnRecord::default();
    let mut server_free: f64 = 0.0;
    let mut last_done: f64 = 0.0;
    while let Some(Ready { time, request, turn }) = heap.pop() {
        let req = &trace.requests[request];
        let t = &req.turns[turn];
        let ctx = &mut contexts[request];
        ctx.extend(&t.append);
        let rec = engine
            .serve(t.agent, ctx, &t.output)
            .map_err(|e| Error::Config(format!("request {request} turn {turn}: {e}")))?;
        ctx.extend(&t.output);
        accumulate(&mut total, &rec);
        let finish = server_free.max(time) + cost.turn_seconds(&rec, budget);
        server_free = finish;
        if turn + 1 < req.turns.len() {
            heap.push(Ready {
                time: finish + trace.config.tool_latency,
                request,
                turn: turn + 1,
            });
        } else {
            if trace.config.retire_finished {
                let agents: Vec<usize> = req.turns.iter().map(|t| t.agent).collect();
                engine.retire(&agents, &contexts[request], trace.system.len());
            }
            latencies[request] = finish - req.arrival;
            last_done = last_done.max(finish);
        }
    }
    let pool = engine.stats();
    let completed = trace.requests.iter().filter(|r| !r.turns.is_empty()).count();
    Ok(RunReport {
        mode: engine.mode(),
        eviction: budget.policy,
        agents: trace.config.num_agents,
        qps: trace.config.qps,
        requests: n,
        p95_latency: percentile(&latencies, 95.0),
        mean_latency: if n == 0 {
            0.0
        } else {
            latencies.iter().sum::<f64>() / n as f64
        },
        throughput: if last_done > 0.0 {
            completed as f64 / last_done
        } else {
            0.0
        },
        makespan: last_done,
        latencies,
        evictions: pool.evictions,
        recompute_tokens: total.recompute_tokens,
        swap_bytes: pool.swap_in_bytes + pool.swap_out_bytes,
        peak_kv_bytes: pool.peak_bytes,
        cross_model_hits: pool.cross_model_hits,
        prompt_tokens: total.prompt_tokens,
        prefill_tokens: total.computed_tokens,
        prefix_hit_tokens: total.hit_tokens,
        decode_steps: total.decode_steps,
        pool,
    })
}

fn accumulate(total: &mut TurnRecord, r: &TurnRecord) {
    total.prompt_tokens += r.prompt_tokens;
    total.hit_tokens += r.hit_tokens;
    total.computed_tokens += r.computed_tokens;
    total.recompute_tokens += r.recompute_tokens;
    total.prefill_param_reads += r.prefill_param_reads;
    total.prefill_attention_pairs += r.prefill_attention_pairs;
    total.decode_steps += r.decode_steps;
    total.decode_param_reads += r.decode_param_reads;
    total.decode_kv_bytes += r.decode_kv_bytes;
    total.decode_attention_pairs += r.decode_attention_pairs;
    total.swap_bytes += r.swap_bytes;
    total.evictions += r.evictions;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&s, 95.0), 19.0);
        assert_eq!(percentile(&s, 100.0), 20.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
        assert_eq!(percentile(&[], 95.0), 0.0);
        let s: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        assert_eq!(percentile(&s, 95.0), 95.0);
    }

    #[test]
    fn ready_heap_pops_earliest_then_lowest_request() {
        let mut h = BinaryHeap::new();
        for (time, request) in [(2.0, 0), (1.0, 3), (1.0, 1)] {
            h.push(Ready { time, request, turn: 0 });
        }
        let order: Vec<usize> = std::iter::from_fn(|| h.pop().map(|r| r.request)).collect();
        assert_eq!(order, [1, 3, 0]);
    }
}
