use serde::{Deserialize, Serialize};

use crate::cache::{namespace_for, BlockId, CacheMode, KvPool, Lookup, MemoryBudget, PoolStats, BLOCK_SIZE};
use crate::error::{Error, Result};
use crate::model::{AdapterSet, BaseWeights, ConventionalAdapters, ModelConfig};
use crate::runtime::{BlockKv, DecodePath, GenerationSession};

/// Work done for one turn, in the units the cost model charges.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub prompt_tokens: u64,
    pub hit_tokens: u64,
    pub computed_tokens: u64,
    /// Computed tokens whose blocks had been evicted earlier.
    pub recompute_tokens: u64,
    pub prefill_param_reads: u64,
    /// Query-key pairs scored during prefill.
    pub prefill_attention_pairs: u64,
    pub decode_steps: u64,
    pub decode_param_reads: u64,
    pub decode_kv_bytes: u64,
    pub decode_attention_pairs: u64,
    /// Bytes moved to or from swap while serving the turn.
    pub swap_bytes: u64,
    pub evictions: u64,
}

/// Something that serves turns against a KV pool.
pub trait Engine {
    fn mode(&self) -> CacheMode;
    fn stats(&self) -> PoolStats;
    /// Prefill `prompt` for `agent`, then decode `output` teacher-forced.
    fn serve(&mut self, agent: usize, prompt: &[usize], output: &[usize]) -> Result<TurnRecord>;
    /// Drop a finished workflow's cached context past its first `keep`
    /// tokens from the namespaces of `agents`.
    fn retire(&mut self, agents: &[usize], context: &[usize], keep: usize);
}

fn retire_in<P>(pool: &mut KvPool<P>, mode: CacheMode, agents: &[usize], context: &[usize], keep: usize) {
    let mut spaces: Vec<u64> = agents.iter().map(|&a| namespace_for(mode, a)).collect();
    spaces.sort_unstable();
    spaces.dedup();
    for ns in spaces {
        pool.retire(ns, context, keep);
    }
}

/// Per-step counters of the decode path, measured once from a real session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeProfile {
    pub prefill_param_reads: u64,
    pub decode_param_reads: u64,
    /// KV bytes read per attended position in one decode step.
    pub kv_bytes_per_position: u64,
}

impl DecodeProfile {
    /// Run a short prefill and one decode step of the mode's decoder on a
    /// throwaway model and read the ledgers.
    pub fn measure(config: &ModelConfig, mode: CacheMode, path: DecodePath) -> Result<Self> {
        let base = BaseWeights::<f32>::init(config, 0)?;
        let prompt = vec![1, 2, 3];
        let icarus;
        let conv;
        let mut s = match mode {
            CacheMode::Icarus => {
                icarus = AdapterSet::init(config, "probe", 1, 1.0, 0)?;
                GenerationSession::icarus(&base, &icarus, prompt.clone())
            }
            CacheMode::Baseline => {
                conv = ConventionalAdapters::init(config, "probe", 1, 1.0, 0)?;
                GenerationSession::conventional(&base, &conv, prompt.clone())
            }
        };
        let pre = s.prefill()?;
        let step = s.decode_step(pre.token, path)?;
        let positions = (prompt.len() + 1) as u64;
        Ok(Self {
            prefill_param_reads: pre.ledger.param_read_events() as u64,
            decode_param_reads: step.ledger.param_read_events() as u64,
            kv_bytes_per_position: step.ledger.kv_bytes_read() / positions,
        })
    }
}

/// Bookkeeping shared by both engines: what a turn pins and reserves.
struct TurnState {
    lookup: Lookup,
    retained: Vec<BlockId>,
    private: u64,
    before: PoolStats,
}

fn begin<P>(
    pool: &mut KvPool<P>,
    ns: u64,
    agent: usize,
    prompt: &[usize],
    output: &[usize],
    bpt: u64,
) -> Result<TurnState> {
    if prompt.is_empty() || output.is_empty() {
        return Err(Error::Config(
            "a turn needs a prompt and at least one output token".into(),
        ));
    }
    let before = pool.stats();
    let lookup = pool.lookup_prefix(ns, prompt, agent);
    let private = ((prompt.len() - lookup.matched) + (output.len() - 1)) as u64 * bpt;
    if let Err(e) = pool.reserve_private(private) {
        pool.release(&lookup.blocks);
        return Err(infeasible(e));
    }
    Ok(TurnState {
        lookup,
        retained: Vec::new(),
        private,
        before,
    })
}

fn infeasible(e: Error) -> Error {
    match e {
        Error::Capacity(m) => Error::Config(format!("memory budget infeasible for a single turn: {m}")),
        e => e,
    }
}

impl TurnState {
    /// Hand the prompt's newly filled full blocks over to the pool.
    fn prompt_committed(&mut self, prompt_len: usize, bpt: u64) -> u64 {
        let full = prompt_len / BLOCK_SIZE * BLOCK_SIZE;
        let moved = (full.saturating_sub(self.lookup.matched) as u64 * bpt).min(self.private);
        self.private -= moved;
        moved
    }

    fn finish<P>(self, pool: &mut KvPool<P>, mut rec: TurnRecord, prompt_len: usize) -> TurnRecord {
        pool.release_private(self.private);
        pool.release(&self.lookup.blocks);
        pool.release(&self.retained);
        let after = pool.stats();
        let usable = self.lookup.usable(prompt_len) as u64;
        rec.prompt_tokens = prompt_len as u64;
        rec.hit_tokens = usable;
        rec.computed_tokens = prompt_len as u64 - usable;
        rec.recompute_tokens = (self.lookup.recompute_tokens as u64).min(rec.computed_tokens);
        rec.prefill_attention_pairs = (usable..prompt_len as u64).map(|p| p + 1).sum();
        rec.swap_bytes =
            (after.swap_in_bytes + after.swap_out_bytes) - (self.before.swap_in_bytes + self.before.swap_out_bytes);
        rec.evictions = after.evictions - self.before.evictions;
        rec
    }
}

fn forced_context(prompt: &[usize], output: &[usize]) -> Vec<usize> {
    let mut ctx = prompt.to_vec();
    ctx.extend_from_slice(&output[..output.len() - 1]);
    ctx
}

/// Counts only: pool blocks carry no payload and decode counters come from
/// a measured [`DecodeProfile`].
#[derive(Debug)]
pub struct AccountingEngine {
    mode: CacheMode,
    profile: DecodeProfile,
    bytes_per_token: u64,
    max_context: usize,
    pool: KvPool<()>,
}

impl AccountingEngine {
    pub fn new(config: &ModelConfig, mode: CacheMode, path: DecodePath, budget: MemoryBudget) -> Result<Self> {
        config.validate()?;
        budget.validate()?;
        let bpt = config.kv_bytes_per_token();
        Ok(Self {
            mode,
            profile: DecodeProfile::measure(config, mode, path)?,
            bytes_per_token: bpt,
            max_context: config.max_context,
            pool: KvPool::new(budget, bpt * BLOCK_SIZE as u64),
        })
    }

    pub fn profile(&self) -> DecodeProfile {
        self.profile
    }
}

impl Engine for AccountingEngine {
    fn mode(&self) -> CacheMode {
        self.mode
    }

    fn stats(&self) -> PoolStats {
        self.pool.stats()
    }

    fn retire(&mut self, agents: &[usize], context: &[usize], keep: usize) {
        retire_in(&mut self.pool, self.mode, agents, context, keep);
    }

    fn serve(&mut self, agent: usize, prompt: &[usize], output: &[usize]) -> Result<TurnRecord> {
        let positions = prompt.len() + output.len().saturating_sub(1);
        if positions > self.max_context {
            return Err(Error::Capacity(format!(
                "turn of {positions} positions exceeds max context {}",
                self.max_context
            )));
        }
        let ns = namespace_for(self.mode, agent);
        let bpt = self.bytes_per_token;
        let mut st = begin(&mut self.pool, ns, agent, prompt, output, bpt)?;
        let mut rec = TurnRecord::default();
        let profile = self.profile;
        let pool = &mut self.pool;
        let result = (|| -> Result<()> {
            if st.lookup.usable(prompt.len()) < prompt.len() {
                rec.prefill_param_reads = profile.prefill_param_reads;
            }
            let moved = st.prompt_committed(prompt.len(), bpt);
            pool.release_private(moved);
            let c = pool
                .commit(ns, prompt, agent, Some(output[0]), |_, _| ())
                .map_err(infeasible)?;
            pool.retain(&c.blocks);
            st.retained = c.blocks;
            for i in 0..output.len() - 1 {
                let positions = (prompt.len() + i + 1) as u64;
                rec.decode_steps += 1;
                rec.decode_param_reads += profile.decode_param_reads;
                rec.decode_kv_bytes += positions * profile.kv_bytes_per_position;
                rec.decode_attention_pairs += positions;
            }
            pool.release_private(std::mem::take(&mut st.private));
            pool.commit(ns, &forced_context(prompt, output), agent, None, |_, _| ())
                .map_err(infeasible)?;
            Ok(())
        })();
        let rec = st.finish(&mut self.pool, rec, prompt.len());
        result.map(|_| rec)
    }
}

/// Runs every turn through real generation sessions; pool blocks hold the
/// actual keys and values.
#[derive(Debug)]
pub struct ModelEngine {
    mode: CacheMode,
    path: DecodePath,
    base: BaseWeights<f32>,
    tasks: Vec<AdapterSet<f32>>,
    conventional: Vec<ConventionalAdapters<f32>>,
    pool: KvPool<BlockKv<f32>>,
}

impl ModelEngine {
    /// A base model from `seed` and one randomly initialised task per agent.
    pub fn new(
        config: &ModelConfig,
        mode: CacheMode,
        path: DecodePath,
        budget: MemoryBudget,
        agents: usize,
        seed: u64,
    ) -> Result<Self> {
        budget.validate()?;
        let base = BaseWeights::init(config, seed)?;
        let (mut tasks, mut conventional) = (Vec::new(), Vec::new());
        for a in 0..agents {
            let s = seed.wrapping_add(1 + a as u64);
            let name = format!("agent{a}");
            match mode {
                CacheMode::Icarus => tasks.push(AdapterSet::random(config, &name, 4, 8.0, s, 0.02)?),
                CacheMode::Baseline => conventional.push(ConventionalAdapters::random(config, &name, 4, 8.0, s, 0.02)?),
            }
        }
        let block = config.kv_bytes_per_token() * BLOCK_SIZE as u64;
        Ok(Self {
            mode,
            path,
            base,
            tasks,
            conventional,
            pool: KvPool::new(budget, block),
        })
    }
}

impl Engine for ModelEngine {
    fn mode(&self) -> CacheMode {
        self.mode
    }

    fn stats(&self) -> PoolStats {
        self.pool.stats()
    }

    fn retire(&mut self, agents: &[usize], context: &[usize], keep: usize) {
        retire_in(&mut self.pool, self.mode, agents, context, keep);
    }

    fn serve(&mut self, agent: usize, prompt: &[usize], output: &[usize]) -> Result<TurnRecord> {
        let agents = self.tasks.len().max(self.conventional.len());
        if agent >= agents {
            return Err(Error::Index {
                what: "agent",
                index: agent,
                size: agents,
            });
        }
        let ns = namespace_for(self.mode, agent);
        let bpt = self.base.config().kv_bytes_per_token();
        let mut st = begin(&mut self.pool, ns, agent, prompt, output, bpt)?;
        let mut session = match self.mode {
            CacheMode::Icarus => GenerationSession::icarus(&self.base, &self.tasks[agent], prompt.to_vec()),
            CacheMode::Baseline => {
                GenerationSession::conventional(&self.base, &self.conventional[agent], prompt.to_vec())
            }
        };
        let mut rec = TurnRecord::default();
        let result = (|| -> Result<()> {
            let (pre, ledger) = session.prefill_from_lookup(&self.pool, &st.lookup)?;
            rec.prefill_param_reads = ledger.param_read_events() as u64;
            let moved = st.prompt_committed(prompt.len(), bpt);
            self.pool.release_private(moved);
            let c = session
                .commit_prompt(&mut self.pool, ns, agent, pre.token)
                .map_err(infeasible)?;
            self.pool.retain(&c.blocks);
            st.retained = c.blocks;
            for &t in &output[..output.len() - 1] {
                let step = session.decode_step(t, self.path)?;
                rec.decode_steps += 1;
                rec.decode_param_reads += step.ledger.param_read_events() as u64;
                rec.decode_kv_bytes += step.ledger.kv_bytes_read();
                rec.decode_attention_pairs += session.cache().len() as u64;
            }
            self.pool.release_private(std::mem::take(&mut st.private));
            let ctx = forced_context(prompt, output);
            let cache = session.cache();
            self.pool
                .commit(ns, &ctx[..cache.len()], agent, None, |s, e| cache.slice_positions(s, e))
                .map_err(infeasible)?;
            Ok(())
        })();
        let rec = st.finish(&mut self.pool, rec, prompt.len());
        result.map(|_| rec)
    }
}
