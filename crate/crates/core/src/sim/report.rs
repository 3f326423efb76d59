use serde_json::json;

use super::run::RunReport;

/// Bumped whenever a column or summary field changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "schema_version,mode,eviction,agents,qps,requests,p95_latency,mean_latency,throughput,makespan,evictions,recompute_tokens,swap_bytes,peak_kv_bytes,cross_model_hits,prompt_tokens,prefill_tokens,prefix_hit_tokens,decode_steps";

/// One row per report, fixed-precision floats.
pub fn table_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{SCHEMA_VERSION},{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.eviction,
            r.agents,
            r.qps,
            r.requests,
            r.p95_latency,
            r.mean_latency,
            r.throughput,
            r.makespan,
            r.evictions,
            r.recompute_tokens,
            r.swap_bytes,
            r.peak_kv_bytes,
            r.cross_model_hits,
            r.prompt_tokens,
            r.prefill_tokens,
            r.prefix_hit_tokens,
            r.decode_steps,
        ));
    }
    out
}

/// Pretty JSON summary: one entry per cell without the per-request
/// latencies, plus final pool counters.
pub fn summary_json(reports: &[RunReport]) -> String {
    let cells: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "mode": r.mode,
                "eviction": r.eviction,
                "agents": r.agents,
                "qps": r.qps,
                "p95_latency": round(r.p95_latency),
                "throughput": round(r.throughput),
                "evictions": r.evictions,
                "peak_kv_bytes": r.peak_kv_bytes,
                "cross_model_hits": r.cross_model_hits,
                "pool": r.pool,
            })
        })
        .collect();
    let v = json!({ "schema_version": SCHEMA_VERSION, "cells": cells });
    serde_json::to_string_pretty(&v).expect("summary serialises") + "\n"
}

fn round(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}
