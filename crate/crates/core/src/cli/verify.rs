//! Self-checks run by `icarus verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheMode, MemoryBudget};
use crate::error::Result;
use crate::model::{AdapterSet, BaseWeights, ConventionalAdapters, ModelConfig};
use crate::runtime::{DecodePath, GenerationSession};
use crate::sim::{Engine, ModelEngine};
use crate::tensor::{finite_difference_grad, Precision, Tensor};
use crate::train::{icarus_loss, icarus_loss_and_grads, ToyCorpus, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random (model, adapter, prompt) triples for the KV identity suite.
    pub cases: usize,
    pub max_prompt: usize,
    /// Decode steps compared between the fused and sequential paths.
    pub decode_steps: usize,
    pub logit_tolerance: f64,
    pub grad_tolerance: f64,
    pub rank: usize,
    pub alpha: f64,
    pub b_std: f64,
    pub namespace_agents: Vec<usize>,
    pub namespace_prompt: usize,
    /// Give the "ICaRus" model key/value adapters; the KV suite must fail.
    pub inject_kv_adapter: bool,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            max_prompt: 64,
            decode_steps: 1000,
            logit_tolerance: 1e-5,
            grad_tolerance: 1e-4,
            rank: 4,
            alpha: 8.0,
            b_std: 0.2,
            namespace_agents: vec![2, 4, 8],
            namespace_prompt: 256,
            inject_kv_adapter: false,
            seed: 0,
        }
    }
}

/// Result of one suite. `detail` names the first failing check, or
/// summarises the run when everything passed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub checks: usize,
    pub detail: String,
}

impl SuiteOutcome {
    fn from(name: &'static str, checks: usize, r: std::result::Result<String, String>) -> Self {
        let passed = r.is_ok();
        let detail = r.unwrap_or_else(|e| e);
        Self {
            name,
            passed,
            checks,
            detail,
        }
    }
}

/// Run every suite in a fixed order.
pub fn run_suites(model: &ModelConfig, cfg: &VerifyConfig) -> Result<Vec<SuiteOutcome>> {
    model.validate()?;
    Ok(vec![
        kv_identity(model, cfg)?,
        fused_equivalence(model, cfg)?,
        ledger_counts(model, cfg)?,
        gradient_partition(cfg)?,
        namespace_sharing(model, cfg)?,
    ])
}

fn random_prompt(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let len = rng.random_range(1..=max_len.max(1));
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Decoding with task adapters leaves the cache bit-identical to the base
/// model fed the same tokens.
pub fn kv_identity(model: &ModelConfig, cfg: &VerifyConfig) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outcome = Ok(format!("{} caches bit-identical", cfg.cases));
    for case in 0..cfg.cases {
        let base = BaseWeights::<f32>::init(model, rng.random())?;
        let seed: u64 = rng.random();
        let prompt = random_prompt(&mut rng, model.vocab_size, cfg.max_prompt);
        let decode = rng.random_range(0..8);
        let icarus = AdapterSet::random(model, "verify", cfg.rank, cfg.alpha, seed, cfg.b_std)?;
        let conventional = ConventionalAdapters::random(model, "verify", cfg.rank, cfg.alpha, seed, cfg.b_std)?;
        let mut task = if cfg.inject_kv_adapter {
            GenerationSession::conventional(&base, &conventional, prompt.clone())
        } else {
            GenerationSession::icarus(&base, &icarus, prompt.clone())
        };
        let mut reference = GenerationSession::base(&base, prompt);
        let mut t = task.prefill()?.token;
        reference.prefill()?;
        for _ in 0..decode {
            let next = if cfg.inject_kv_adapter {
                task.decode_step_single(t)?.token
            } else {
                task.decode_step_fused(t)?.token
            };
            reference.decode_step_single(t)?;
            t = next;
        }
        if !task.cache().bitwise_eq(reference.cache()) {
            outcome = Err(format!(
                "case {case}: task KV differs from base KV over {} positions",
                reference.cache().len()
            ));
            break;
        }
    }
    Ok(SuiteOutcome::from("kv_identity", cfg.cases, outcome))
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

fn top_two_gap(row: &[f32]) -> f64 {
    let mut s: Vec<f64> = row.iter().map(|&x| x as f64).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] - s.get(1).copied().unwrap_or(f64::NEG_INFINITY)
}

/// Fused and sequential decode agree on logits; greedy tokens agree except
/// at near-ties, which are counted.
pub fn fused_equivalence(model: &ModelConfig, cfg: &VerifyConfig) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf05e);
    let base = BaseWeights::<f32>::init(model, rng.random())?;
    let mut steps = 0;
    let mut ties = 0;
    let mut worst = 0.0f64;
    let mut failure = None;
    'outer: while steps < cfg.decode_steps {
        let adapter = AdapterSet::random(model, "verify", cfg.rank, cfg.alpha, rng.random(), cfg.b_std)?;
        let prompt = random_prompt(&mut rng, model.vocab_size, cfg.max_prompt);
        let mut fused = GenerationSession::icarus(&base, &adapter, prompt.clone());
        let mut seq = GenerationSession::icarus(&base, &adapter, prompt);
        let mut t = fused.prefill()?.token;
        seq.prefill()?;
        for _ in 0..50.min(cfg.decode_steps - steps) {
            let f = fused.decode_step_fused(t)?;
            let s = seq.decode_step_sequential(t)?;
            steps += 1;
            let scale = s.logits.max_abs().abs().max(f32::MIN_POSITIVE) as f64;
            let rel = max_abs_diff(f.logits.data(), s.logits.data()) / scale;
            worst = worst.max(rel);
            if rel > cfg.logit_tolerance {
                failure = Some(format!("step {steps}: relative logit error {rel:.3e}"));
                break 'outer;
            }
            if f.token != s.token {
                if top_two_gap(s.logits.data()) / scale < cfg.logit_tolerance {
                    ties += 1;
                } else {
                    failure = Some(format!(
                        "step {steps}: fused token {} vs sequential {}",
                        f.token, s.token
                    ));
                    break 'outer;
                }
            }
            t = f.token;
        }
    }
    let outcome = match failure {
        Some(f) => Err(f),
        None => Ok(format!(
            "{steps} steps, worst relative error {worst:.3e}, {ties} near-ties"
        )),
    };
    Ok(SuiteOutcome::from("fused_equivalence", steps, outcome))
}

/// Per decode step: fused reads the base parameters once, sequential twice,
/// and both read the KV cache once.
pub fn ledger_counts(model: &ModelConfig, cfg: &VerifyConfig) -> Result<SuiteOutcome> {
    let base = BaseWeights::<f32>::init(model, cfg.seed)?;
    let adapter = AdapterSet::random(model, "verify", cfg.rank, cfg.alpha, cfg.seed, cfg.b_std)?;
    let mut s = GenerationSession::icarus(&base, &adapter, vec![1, 2, 3, 4]);
    let mut t = s.prefill()?.token;
    let mut outcome = Ok("fused 1/1, sequential 2/1 (param/KV reads per step)".to_string());
    let steps = 16;
    for i in 0..steps {
        let path = if i % 2 == 0 {
            DecodePath::Fused
        } else {
            DecodePath::Sequential
        };
        let out = s.decode_step(t, path)?;
        let want = if path == DecodePath::Fused { 1 } else { 2 };
        let (p, k) = (out.ledger.param_read_events(), out.ledger.kv_read_events());
        if p != want || k != 1 {
            outcome = Err(format!("{path} step {i}: {p} parameter reads, {k} KV reads"));
            break;
        }
        t = out.token;
    }
    Ok(SuiteOutcome::from("ledger_counts", steps, outcome))
}

/// Base gradients are exactly zero; adapter gradients match central
/// differences on a two-layer f64 model.
pub fn gradient_partition(cfg: &VerifyConfig) -> Result<SuiteOutcome> {
    let model = ModelConfig {
        precision: Precision::F64,
        ..ModelConfig::tiny()
    };
    let base = BaseWeights::<f64>::init(&model, cfg.seed)?;
    let corpus = ToyCorpus {
        samples: 2,
        seq_len: 8,
        seed: cfg.seed,
        ..ToyCorpus::default()
    };
    let batch = corpus.generate(model.vocab_size)?;
    let adapters = AdapterSet::<f64>::random(&model, "verify", 2, 4.0, cfg.seed, 0.1)?;
    let report = icarus_loss_and_grads(&base, &adapters, &batch)?;
    let mut checks = 0;
    let outcome = (|| {
        for (name, g) in &report.base {
            checks += 1;
            if g.max_abs() != 0.0 {
                return Err(format!("base gradient {name} is nonzero"));
            }
        }
        for (i, (name, g)) in report.adapter.iter().enumerate() {
            checks += 1;
            let p0 = adapters.params()[i].1.clone();
            let fd = finite_difference_grad(
                |p| {
                    let mut a = adapters.clone();
                    *a.params_mut()[i] = p.clone();
                    icarus_loss(&base, &a, &batch)
                },
                &p0,
                1e-5,
            )
            .map_err(|e| e.to_string())?;
            let rel = relative_error(g, &fd);
            if rel > cfg.grad_tolerance {
                return Err(format!("adapter gradient {name}: relative error {rel:.3e}"));
            }
        }
        Ok(format!(
            "{} base tensors zero, {} adapter tensors match",
            report.base.len(),
            report.adapter.len()
        ))
    })();
    Ok(SuiteOutcome::from("gradient_partition", checks, outcome))
}

/// `|g - fd| / |fd|` in the Euclidean norm; zero when both vanish.
pub fn relative_error(g: &Tensor<f64>, fd: &Tensor<f64>) -> f64 {
    let num: f64 = g
        .data()
        .iter()
        .zip(fd.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = fd.data().iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// N models over one identical prompt: the shared namespace stores it once,
/// per-model namespaces N times.
pub fn namespace_sharing(model: &ModelConfig, cfg: &VerifyConfig) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4e5);
    let prompt: Vec<usize> = (0..cfg.namespace_prompt)
        .map(|_| rng.random_range(0..model.vocab_size))
        .collect();
    let mut outcome = Ok(String::new());
    let mut notes = Vec::new();
    for &n in &cfg.namespace_agents {
        let run = |mode| -> Result<(u64, u64)> {
            let mut e = ModelEngine::new(model, mode, DecodePath::Fused, MemoryBudget::unlimited(), n, cfg.seed)?;
            let mut computed = 0;
            for agent in 0..n {
                computed += e.serve(agent, &prompt, &[0])?.computed_tokens;
            }
            Ok((e.stats().peak_bytes, computed))
        };
        let (base_peak, base_tokens) = run(CacheMode::Baseline)?;
        let (shared_peak, shared_tokens) = run(CacheMode::Icarus)?;
        let ratio = base_peak as f64 / shared_peak as f64;
        notes.push(format!("N={n} ratio {ratio:.3}"));
        if !(ratio >= (n - 1) as f64 && ratio <= n as f64) || base_tokens != n as u64 * shared_tokens {
            outcome = Err(format!(
                "N={n}: peak ratio {ratio:.3}, prefill tokens {base_tokens} vs {shared_tokens}"
            ));
            break;
        }
    }
    let outcome = outcome.map(|_| notes.join(", "));
    Ok(SuiteOutcome::from(
        "namespace_sharing",
        cfg.namespace_agents.len(),
        outcome,
    ))
}
