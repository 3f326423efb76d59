use icarus::cache::{CacheMode, EvictionPolicy, MemoryBudget};
use icarus::model::ModelConfig;
use icarus::runtime::DecodePath;
use icarus::sim::{
    generate_workload, run, AccountingEngine, CostModel, Engine, LenRange, ModelEngine, Pattern, SimConfig,
    WorkloadConfig,
};

fn small_workload(agents: usize) -> WorkloadConfig {
    WorkloadConfig {
        num_agents: agents,
        requests: 6,
        qps: 2.0,
        system_len: 20,
        input_len: LenRange::new(8, 24),
        output_len: LenRange::new(2, 6),
        observation_len: LenRange::new(4, 18),
        turns: LenRange::new(2, 5),
        vocab_size: 24,
        retire_finished: false,
        ..WorkloadConfig::default()
    }
}

fn both(
    mode: CacheMode,
    path: DecodePath,
    budget: MemoryBudget,
    workload: &WorkloadConfig,
) -> (icarus::sim::RunReport, icarus::sim::RunReport) {
    let model = ModelConfig::tiny();
    let trace = generate_workload(workload).unwrap();
    let cost = CostModel::default();
    let mut m = ModelEngine::new(&model, mode, path, budget, workload.num_agents, 3).unwrap();
    let mut a = AccountingEngine::new(&model, mode, path, budget).unwrap();
    let rm = run(&trace, &mut m, &budget, &cost).unwrap();
    let ra = run(&trace, &mut a, &budget, &cost).unwrap();
    (rm, ra)
}

#[test]
fn accounting_engine_matches_model_engine() {
    let bpt = ModelConfig::tiny().kv_bytes_per_token();
    let tight = |policy| MemoryBudget {
        kv_bytes: bpt * 16 * 14,
        swap_bytes: bpt * 16 * 4,
        policy,
        recompute_cost_per_token: 1e-4,
        swap_cost_per_byte: 1e-9,
    };
    let cases = [
        (CacheMode::Icarus, DecodePath::Fused, MemoryBudget::unlimited()),
        (
            CacheMode::Icarus,
            DecodePath::Sequential,
            tight(EvictionPolicy::Recompute),
        ),
        (CacheMode::Baseline, DecodePath::Fused, tight(EvictionPolicy::Recompute)),
        (CacheMode::Baseline, DecodePath::Fused, tight(EvictionPolicy::Swap)),
        (CacheMode::Icarus, DecodePath::Fused, tight(EvictionPolicy::Swap)),
    ];
    let mut saw_eviction = false;
    for (mode, path, budget) in cases {
        let (m, a) = both(mode, path, budget, &small_workload(3));
        assert_eq!(m, a, "{mode} {path} {:?}", budget.policy);
        saw_eviction |= m.evictions > 0;
    }
    assert!(saw_eviction, "tight budgets should evict");
}

#[test]
fn reflexion_trace_matches_too() {
    let w = WorkloadConfig {
        pattern: Pattern::Reflexion,
        ..small_workload(2)
    };
    let (m, a) = both(CacheMode::Icarus, DecodePath::Fused, MemoryBudget::unlimited(), &w);
    assert_eq!(m, a);
}

#[test]
fn sequential_path_costs_more_than_fused() {
    let w = small_workload(3);
    let (fused, _) = both(CacheMode::Icarus, DecodePath::Fused, MemoryBudget::unlimited(), &w);
    let (seq, _) = both(CacheMode::Icarus, DecodePath::Sequential, MemoryBudget::unlimited(), &w);
    assert_eq!(fused.prefill_tokens, seq.prefill_tokens);
    assert!(seq.p95_latency > fused.p95_latency);
}

#[test]
fn conventional_models_do_not_share_kv() {
    let model = ModelConfig::tiny();
    let budget = MemoryBudget::unlimited();
    let mut e = ModelEngine::new(&model, CacheMode::Baseline, DecodePath::Fused, budget, 2, 1).unwrap();
    let prompt: Vec<usize> = (0..32).map(|i| 2 + i % 20).collect();
    e.serve(0, &prompt, &[5, 6]).unwrap();
    let r = e.serve(1, &prompt, &[5, 6]).unwrap();
    assert_eq!(r.hit_tokens, 0);
    assert_eq!(e.stats().cross_model_hits, 0);
}

#[test]
fn benefit_grows_with_agent_count() {
    let cfg = SimConfig {
        qps: vec![0.8],
        agents: vec![2, 4, 8],
        ..SimConfig::default()
    };
    let reports = cfg.sweep().unwrap();
    let ratios: Vec<f64> = reports
        .chunks(2)
        .map(|pair| pair[0].p95_latency / pair[1].p95_latency)
        .collect();
    assert!(
        ratios.windows(2).all(|w| w[1] > w[0]),
        "baseline/icarus p95 ratios {ratios:?}"
    );
}
