//! End-to-end acceptance checks. Each test writes one `criterion N ... PASS|FAIL`
//! line straight to stderr so the lines show up without `--nocapture`.

use std::io::Write;
use std::path::Path;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icarus::cache::{CacheMode, EvictionPolicy, MemoryBudget};
use icarus::cli::{execute, Cli, RunManifest, MANIFEST_FILE};
use icarus::model::checkpoint::decode_adapters;
use icarus::model::{AdapterSet, BaseWeights, ModelConfig};
use icarus::runtime::{DecodePath, GenerationSession};
use icarus::sim::{
    generate_workload, AccountingEngine, Engine, ModelEngine, Routing, RunReport, SimConfig, WorkloadConfig,
};
use icarus::tensor::{finite_difference_grad, Precision, Tensor};
use icarus::train::{icarus_loss, icarus_loss_and_grads, train_loop, ToyCorpus, TrainConfig, TrainMode, Trainable};

const KV_CASES: usize = 24;
const DECODE_STEPS: usize = 1000;
const LOGIT_REL_TOL: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const PARITY_STEPS: usize = 500;
const PARITY_REL_GAP: f64 = 0.10;
const MIN_LOSS_DROP: f64 = 0.50;
const FINAL_WINDOW: usize = 20;
const SHARED_PROMPT: usize = 256;
/// Budget headroom over the ICaRus peak at the highest swept rate.
const BUDGET_HEADROOM: f64 = 1.15;
/// Largest baseline throughput gain between consecutive rates after the
/// first eviction that still counts as a plateau.
const PLATEAU_TOL: f64 = 0.05;
const SKEW: f64 = 0.5;
const SKEW_TOL: f64 = 0.02;
const SKEW_TURNS: usize = 10_000;
const DETERMINISM_TRAIN_STEPS: &str = "40";

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {name:<24} {tag}  {detail}");
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn random_prompt(rng: &mut ChaCha8Rng, vocab: usize, max: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn c01_encoder_purity() {
    let model = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = Vec::new();
    for case in 0..KV_CASES {
        // half the adapters come out of real training, half are random
        let seed = (case / 6) as u64;
        let base = BaseWeights::<f32>::init(&model, seed).unwrap();
        let adapter = if case % 2 == 0 {
            let cfg = TrainConfig {
                steps: 8,
                seed,
                ..TrainConfig::default()
            };
            decode_adapters::<f32>(&train_loop(&model, &cfg).unwrap().checkpoint)
                .unwrap()
                .0
        } else {
            AdapterSet::random(&model, "c1", 8, 16.0, rng.random(), 0.3).unwrap()
        };
        assert!(!adapter.is_noop());
        let prompt = random_prompt(&mut rng, model.vocab_size, 64);
        let mut task = GenerationSession::icarus(&base, &adapter, prompt.clone());
        let mut plain = GenerationSession::base(&base, prompt);
        let mut t = task.prefill().unwrap().token;
        plain.prefill().unwrap();
        for _ in 0..rng.random_range(0..6) {
            let next = task.decode_step_fused(t).unwrap().token;
            plain.decode_step_single(t).unwrap();
            t = next;
        }
        if !task.cache().bitwise_eq(plain.cache()) {
            mismatches.push(case);
        }
    }
    report(
        1,
        "encoder purity",
        mismatches.is_empty(),
        &format!("{KV_CASES} triples, mismatching cases {mismatches:?}"),
    );
}

#[test]
fn c02_fused_decode_equivalence() {
    let model = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = BaseWeights::<f32>::init(&model, 2).unwrap();
    let (mut steps, mut worst, mut ties, mut bad_tokens) = (0, 0.0f64, Vec::new(), 0);
    while steps < DECODE_STEPS {
        let adapter = AdapterSet::random(&model, "c2", 8, 16.0, rng.random(), 0.3).unwrap();
        let prompt = random_prompt(&mut rng, model.vocab_size, 48);
        let mut f = GenerationSession::icarus(&base, &adapter, prompt.clone());
        let mut s = GenerationSession::icarus(&base, &adapter, prompt);
        let mut t = f.prefill().unwrap().token;
        s.prefill().unwrap();
        for _ in 0..40 {
            let a = f.decode_step_fused(t).unwrap();
            let b = s.decode_step_sequential(t).unwrap();
            let la: Vec<f64> = a.logits.data().iter().map(|&x| x as f64).collect();
            let lb: Vec<f64> = b.logits.data().iter().map(|&x| x as f64).collect();
            let scale = lb.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let err = la.iter().zip(&lb).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
            worst = worst.max(err);
            if a.token != b.token {
                let mut sorted = lb.clone();
                sorted.sort_by(|x, y| y.total_cmp(x));
                if (sorted[0] - sorted[1]) / scale < LOGIT_REL_TOL {
                    ties.push(steps);
                } else {
                    bad_tokens += 1;
                }
            }
            steps += 1;
            t = a.token;
        }
    }
    let ok = worst <= LOGIT_REL_TOL && bad_tokens == 0;
    report(
        2,
        "fused decode equivalence",
        ok,
        &format!("{steps} steps, worst rel logit err {worst:.2e}, token mismatches {bad_tokens}, logged ties {ties:?}"),
    );
}

#[test]
fn c03_ledger_asymmetry() {
    let model = ModelConfig::default();
    let base = BaseWeights::<f32>::init(&model, 3).unwrap();
    let adapter = AdapterSet::random(&model, "c3", 8, 16.0, 3, 0.3).unwrap();
    let mut s = GenerationSession::icarus(&base, &adapter, vec![5, 6, 7]);
    let mut t = s.prefill().unwrap().token;
    let mut seen = Vec::new();
    for i in 0..64 {
        let path = if i % 2 == 0 {
            DecodePath::Fused
        } else {
            DecodePath::Sequential
        };
        let out = s.decode_step(t, path).unwrap();
        seen.push((path, out.ledger.param_read_events(), out.ledger.kv_read_events()));
        t = out.token;
    }
    let expected = |p| if p == DecodePath::Fused { 1 } else { 2 };
    let bad: Vec<_> = seen
        .iter()
        .filter(|&&(p, params, kv)| kv != 1 || params != expected(p))
        .take(3)
        .collect();
    let ok = bad.is_empty();
    report(
        3,
        "ledger asymmetry",
        ok,
        &format!("64 steps, fused 1/1 sequential 2/1; first offenders {bad:?}"),
    );
}

#[test]
fn c04_gradient_partition() {
    let model = ModelConfig {
        precision: Precision::F64,
        ..ModelConfig::tiny()
    };
    assert_eq!(model.num_layers, 2);
    let base = BaseWeights::<f64>::init(&model, 4).unwrap();
    let batch = ToyCorpus {
        samples: 3,
        seq_len: 10,
        seed: 4,
        ..ToyCorpus::default()
    }
    .generate(model.vocab_size)
    .unwrap();
    let adapters = AdapterSet::<f64>::random(&model, "c4", 2, 4.0, 4, 0.2).unwrap();
    let r = icarus_loss_and_grads(&base, &adapters, &batch).unwrap();
    let nonzero_base: Vec<&str> = r
        .base
        .iter()
        .filter(|(_, g)| g.max_abs() != 0.0)
        .map(|(n, _)| n.as_str())
        .collect();
    let mut worst = 0.0f64;
    for (i, (_, g)) in r.adapter.iter().enumerate() {
        let p0: Tensor<f64> = adapters.params()[i].1.clone();
        let fd = finite_difference_grad(
            |p| {
                let mut a = adapters.clone();
                *a.params_mut()[i] = p.clone();
                icarus_loss(&base, &a, &batch)
            },
            &p0,
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(rel_l2(g.data(), fd.data()));
    }
    let ok = nonzero_base.is_empty() && !r.base.is_empty() && worst <= GRAD_REL_TOL;
    report(
        4,
        "gradient partition",
        ok,
        &format!(
            "{} base grads, nonzero {nonzero_base:?}; {} adapter tensors, worst rel err vs FD {worst:.2e}",
            r.base.len(),
            r.adapter.len()
        ),
    );
}

#[test]
fn c05_loss_parity() {
    let model = ModelConfig::default();
    let run = |mode| {
        let cfg = TrainConfig {
            mode,
            steps: PARITY_STEPS,
            ..TrainConfig::default()
        };
        train_loop(&model, &cfg).unwrap().trace
    };
    let ic = run(TrainMode::Icarus);
    let conv = run(TrainMode::Conventional);
    let (ic0, icf) = (ic.first().unwrap(), ic.tail_mean(FINAL_WINDOW).unwrap());
    let (cv0, cvf) = (conv.first().unwrap(), conv.tail_mean(FINAL_WINDOW).unwrap());
    let gap = (icf - cvf).abs() / cvf;
    let ok = gap <= PARITY_REL_GAP && icf <= (1.0 - MIN_LOSS_DROP) * ic0 && cvf <= (1.0 - MIN_LOSS_DROP) * cv0;
    report(
        5,
        "loss parity",
        ok,
        &format!(
            "icarus {ic0:.3} -> {icf:.3}, conventional {cv0:.3} -> {cvf:.3}, gap {:.1}%",
            gap * 100.0
        ),
    );
}

#[test]
fn c06_namespace_theorem() {
    let model = ModelConfig::default();
    let bpt = model.kv_bytes_per_token();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prompt: Vec<usize> = (0..SHARED_PROMPT)
        .map(|_| rng.random_range(0..model.vocab_size))
        .collect();
    let mut lines = Vec::new();
    let mut ok = true;
    for n in [2usize, 4, 8] {
        let serve_all = |mode| {
            let mut e = ModelEngine::new(&model, mode, DecodePath::Fused, MemoryBudget::unlimited(), n, 6).unwrap();
            let computed: u64 = (0..n).map(|a| e.serve(a, &prompt, &[1]).unwrap().computed_tokens).sum();
            (e.stats().peak_bytes, computed)
        };
        let (bp, bt) = serve_all(CacheMode::Baseline);
        let (ip, it) = serve_all(CacheMode::Icarus);
        // one copy of the prompt, n copies
        let expect = (SHARED_PROMPT as u64 * bpt, n as u64 * SHARED_PROMPT as u64 * bpt);
        let ratio = bp as f64 / ip as f64;
        ok &= (n - 1) as f64 <= ratio && ratio <= n as f64 && bt == n as u64 * it && (ip, bp) == expect;
        lines.push(format!("N={n} ratio {ratio:.2} prefill {bt}/{it}"));
    }
    report(6, "namespace theorem", ok, &lines.join(", "));
}

struct Trend {
    ok: bool,
    detail: String,
}

/// The serving-trend checks shared by criteria 7 to 9.
fn serving_trend(cfg: &SimConfig) -> Trend {
    let mut unbounded = cfg.clone();
    unbounded.budget.kv_bytes = u64::MAX;
    let top = *cfg.qps.last().unwrap();
    let agents = cfg.agents[0];
    let peak = unbounded
        .run_cell(CacheMode::Icarus, top, agents)
        .unwrap()
        .peak_kv_bytes;
    let mut cfg = cfg.clone();
    cfg.budget.kv_bytes = (peak as f64 * BUDGET_HEADROOM) as u64;
    let reports = cfg.sweep().unwrap();
    let pick = |m| -> Vec<&RunReport> { reports.iter().filter(|r| r.mode == m).collect() };
    let (base, ic) = (pick(CacheMode::Baseline), pick(CacheMode::Icarus));
    let mut problems = Vec::new();
    let first = base.iter().position(|r| r.evictions > 0);
    if first.is_none() {
        problems.push("baseline never evicts".to_string());
    }
    for (b, i) in base.iter().zip(&ic).filter(|(b, _)| b.evictions > 0) {
        if i.evictions != 0 {
            problems.push(format!("icarus evicts at qps {}", i.qps));
        }
        if i.p95_latency >= b.p95_latency {
            problems.push(format!("p95 not lower at qps {}", i.qps));
        }
        if i.throughput <= b.throughput {
            problems.push(format!("throughput not higher at qps {}", i.qps));
        }
    }
    if let Some(k) = first {
        for w in base[k..].windows(2) {
            if w[1].throughput > (1.0 + PLATEAU_TOL) * w[0].throughput {
                problems.push(format!("baseline throughput still climbing at qps {}", w[1].qps));
            }
        }
    }
    for w in ic.windows(2) {
        if w[1].throughput < w[0].throughput {
            problems.push(format!("icarus throughput falls at qps {}", w[1].qps));
        }
    }
    let cells: Vec<String> = base
        .iter()
        .zip(&ic)
        .map(|(b, i)| {
            format!(
                "{}: p95 {:.0}/{:.0} tput {:.3}/{:.3} ev {}/{}",
                b.qps, b.p95_latency, i.p95_latency, b.throughput, i.throughput, b.evictions, i.evictions
            )
        })
        .collect();
    Trend {
        ok: problems.is_empty(),
        detail: format!(
            "budget {:.1} MiB, first eviction at qps {:?} [baseline/icarus] {}{}",
            cfg.budget.kv_bytes as f64 / (1 << 20) as f64,
            first.map(|k| base[k].qps),
            cells.join("; "),
            if problems.is_empty() {
                String::new()
            } else {
                format!(" PROBLEMS {problems:?}")
            }
        ),
    }
}

fn react_sweep(policy: EvictionPolicy, routing: Routing) -> SimConfig {
    let mut cfg = SimConfig {
        agents: vec![8],
        ..SimConfig::default()
    };
    cfg.workload.routing = routing;
    cfg.workload.skew = SKEW;
    cfg.budget.policy = policy;
    cfg
}

#[test]
fn c07_serving_trend() {
    let t = serving_trend(&react_sweep(EvictionPolicy::Recompute, Routing::RoundRobin));
    report(7, "serving trend", t.ok, &t.detail);
}

#[test]
fn c08_swap_variant() {
    let t = serving_trend(&react_sweep(EvictionPolicy::Swap, Routing::RoundRobin));
    report(8, "swap variant", t.ok, &t.detail);
}

#[test]
fn c09_skewed_routing() {
    let cfg = react_sweep(EvictionPolicy::Recompute, Routing::RandomSkewed);
    let t = serving_trend(&cfg);
    let mut wl = WorkloadConfig {
        requests: 64,
        ..cfg.workload.clone()
    };
    let mut trace = generate_workload(&wl).unwrap();
    while trace.total_turns() < SKEW_TURNS {
        wl.requests *= 2;
        trace = generate_workload(&wl).unwrap();
    }
    let seq = trace.agent_sequence();
    let hot = seq.iter().filter(|&&a| a == 0).count() as f64 / seq.len() as f64;
    let freq_ok = (hot - SKEW).abs() <= SKEW_TOL;
    report(
        9,
        "skewed routing",
        t.ok && freq_ok,
        &format!("hot-agent share {hot:.4} over {} turns; {}", seq.len(), t.detail),
    );
}

fn run_cli(args: &[&str]) -> i32 {
    let cli = Cli::try_parse_from(std::iter::once("icarus").chain(args.iter().copied())).unwrap();
    execute(&cli, &mut std::io::sink()).unwrap()
}

/// Every output file, plus the manifest with its output directory blanked.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut m: RunManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    let mut files: Vec<(String, Vec<u8>)> = m
        .outputs
        .iter()
        .map(|a| (a.path.clone(), std::fs::read(dir.join(&a.path)).unwrap()))
        .collect();
    m.output_dir.clear();
    files.push((MANIFEST_FILE.into(), serde_json::to_vec(&m).unwrap()));
    files
}

#[test]
fn c10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut diffs = Vec::new();
    let commands: [&[&str]; 3] = [
        &["verify", "--seed", "5"],
        &["train", "--seed", "5", "--steps", DETERMINISM_TRAIN_STEPS],
        &["sim", "--seed", "5"],
    ];
    for cmd in commands {
        let mut snaps = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{}-{rep}", cmd[0]));
            let mut args = cmd.to_vec();
            args.extend(["--out", out.to_str().unwrap()]);
            assert_eq!(run_cli(&args), 0);
            snaps.push(snapshot(&out));
        }
        if snaps[0] != snaps[1] {
            diffs.push(cmd[0]);
        }
    }
    report(
        10,
        "determinism",
        diffs.is_empty(),
        &format!("verify/train/sim twice each; differing: {diffs:?}"),
    );
}

#[test]
fn accounting_and_model_engines_agree_on_the_shared_prompt() {
    // criterion 6 above runs on real KV; the sweeps run on the accounting engine
    let model = ModelConfig::default();
    let prompt: Vec<usize> = (0..SHARED_PROMPT).map(|i| i % model.vocab_size).collect();
    for mode in [CacheMode::Baseline, CacheMode::Icarus] {
        let mut m = ModelEngine::new(&model, mode, DecodePath::Fused, MemoryBudget::unlimited(), 4, 0).unwrap();
        let mut a = AccountingEngine::new(&model, mode, DecodePath::Fused, MemoryBudget::unlimited()).unwrap();
        for agent in 0..4 {
            assert_eq!(
                m.serve(agent, &prompt, &[1, 2]).unwrap(),
                a.serve(agent, &prompt, &[1, 2]).unwrap()
            );
        }
        assert_eq!(m.stats(), a.stats());
    }
}
