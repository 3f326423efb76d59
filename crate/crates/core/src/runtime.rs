//! Prefill and decode.
//!
//! Prefill always runs the base model alone: it fills the KV cache and emits
//! the base model's greedy token. Decode then runs the encoder and the task
//! decoder together. On the fused path both branches share every weight read
//! and one attention call over `2H` query heads; the sequential path computes
//! them as two passes and serves as the reference.
//!
//! ```
//! use icarus::model::{AdapterSet, BaseWeights, ModelConfig};
//! use icarus::runtime::{DecodePath, GenerationSession};
//!
//! let config = ModelConfig::tiny();
//! let base = BaseWeights::<f32>::init(&config, 7).unwrap();
//! let task = AdapterSet::random(&config, "task", 4, 8.0, 1, 0.1).unwrap();
//!
//! let mut fused = GenerationSession::icarus(&base, &task, vec![1, 2, 3]);
//! let mut seq = GenerationSession::icarus(&base, &task, vec![1, 2, 3]);
//! let a = fused.generate(8, DecodePath::Fused).unwrap();
//! let b = seq.generate(8, DecodePath::Sequential).unwrap();
//! assert_eq!(a, b);
//! assert_eq!(fused.cache().len(), 3 + 8);
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{CommitOutcome, KvPool, Lookup, Namespace};
use crate::error::{Error, Result};
use crate::metrics::{MetricsLedger, StepLedger};
use crate::model::{
    block_forward, block_forward_single, block_forward_two_pass, embed, lm_logits, AdapterLookup, AdapterSet,
    BaseWeights, ConventionalAdapters, KvCacheTensor, Phase,
};
use crate::tensor::{self, Scalar, Tensor};

/// Per-layer `(keys, values)` of one cached block.
pub type BlockKv<T> = Vec<(Vec<T>, Vec<T>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodePath {
    Fused,
    Sequential,
}

impl fmt::Display for DecodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodePath::Fused => "fused",
            DecodePath::Sequential => "sequential",
        })
    }
}

impl FromStr for DecodePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(DecodePath::Fused),
            "sequential" => Ok(DecodePath::Sequential),
            _ => Err(Error::Mode(format!(
                "unknown decode path {s:?} (expected fused or sequential)"
            ))),
        }
    }
}

/// The model a session decodes with.
#[derive(Debug, Clone, Copy)]
pub enum Decoder<'a, T: Scalar> {
    /// The base model alone.
    Base,
    /// Base encoder plus a task decoder; shares the base model's KV.
    Icarus(&'a AdapterSet<T>),
    /// A conventionally fine-tuned model; writes its own KV.
    Conventional(&'a ConventionalAdapters<T>),
}

/// Token chosen by one forward call, the logits it came from, and the call's
/// counters.
#[derive(Debug, Clone)]
pub struct StepOutput<T: Scalar> {
    pub token: usize,
    pub logits: Tensor<T>,
    pub ledger: StepLedger,
}

/// What a pool-backed prefill did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedPrefill {
    pub token: usize,
    /// Prompt positions reused from the pool.
    pub hit_tokens: usize,
    /// Prompt positions computed.
    pub computed: usize,
    /// The pool lookup; its blocks stay pinned until released by the caller.
    pub lookup: Lookup,
}

/// One generation: a model, its KV cache, the prompt and the tokens produced.
#[derive(Debug, Clone)]
pub struct GenerationSession<'a, T: Scalar = f32> {
    base: &'a BaseWeights<T>,
    decoder: Decoder<'a, T>,
    cache: KvCacheTensor<T>,
    prompt: Vec<usize>,
    produced: Vec<usize>,
    max_tokens: usize,
    eos: Option<usize>,
    metrics: MetricsLedger,
}

impl<'a, T: Scalar> GenerationSession<'a, T> {
    pub fn new(base: &'a BaseWeights<T>, adapter: Option<&'a AdapterSet<T>>, prompt: Vec<usize>) -> Self {
        let decoder = adapter.map_or(Decoder::Base, Decoder::Icarus);
        Self::with_decoder(base, decoder, prompt)
    }

    pub fn with_decoder(base: &'a BaseWeights<T>, decoder: Decoder<'a, T>, prompt: Vec<usize>) -> Self {
        Self {
            base,
            decoder,
            cache: KvCacheTensor::new(base.config()),
            prompt,
            produced: Vec::new(),
            max_tokens: base.config().max_context,
            eos: None,
            metrics: MetricsLedger::default(),
        }
    }

    pub fn base(base: &'a BaseWeights<T>, prompt: Vec<usize>) -> Self {
        Self::with_decoder(base, Decoder::Base, prompt)
    }

    pub fn icarus(base: &'a BaseWeights<T>, adapter: &'a AdapterSet<T>, prompt: Vec<usize>) -> Self {
        Self::with_decoder(base, Decoder::Icarus(adapter), prompt)
    }

    pub fn conventional(base: &'a BaseWeights<T>, adapter: &'a ConventionalAdapters<T>, prompt: Vec<usize>) -> Self {
        Self::with_decoder(base, Decoder::Conventional(adapter), prompt)
    }

    /// Start from KV already computed for a prefix of the prompt.
    pub fn with_cache(mut self, cache: KvCacheTensor<T>) -> Self {
        self.cache = cache;
        self
    }

    /// Cap on produced tokens (prefill token included).
    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_eos(mut self, eos: usize) -> Self {
        self.eos = Some(eos);
        self
    }

    pub fn cache(&self) -> &KvCacheTensor<T> {
        &self.cache
    }

    pub fn into_cache(self) -> KvCacheTensor<T> {
        self.cache
    }

    pub fn prompt(&self) -> &[usize] {
        &self.prompt
    }

    pub fn produced(&self) -> &[usize] {
        &self.produced
    }

    /// Prompt followed by every produced token.
    pub fn context(&self) -> Vec<usize> {
        self.prompt.iter().chain(&self.produced).copied().collect()
    }

    pub fn metrics(&self) -> &MetricsLedger {
        &self.metrics
    }

    fn conventional_lookup(&self) -> Option<&'a dyn AdapterLookup<T>> {
        match self.decoder {
            Decoder::Conventional(c) => Some(c as &dyn AdapterLookup<T>),
            _ => None,
        }
    }

    fn icarus_adapter(&self) -> Option<&'a AdapterSet<T>> {
        match self.decoder {
            Decoder::Icarus(a) => Some(a),
            _ => None,
        }
    }

    fn finish(&mut self, logits: Tensor<T>, ledger: StepLedger) -> Result<StepOutput<T>> {
        if !logits.all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let token = tensor::argmax(logits.data());
        self.produced.push(token);
        Ok(StepOutput { token, logits, ledger })
    }

    /// Fill the cache for the uncached part of the prompt and emit the first
    /// token. ICaRus and base sessions run the base model only.
    pub fn prefill(&mut self) -> Result<StepOutput<T>> {
        let config = self.base.config();
        if self.prompt.is_empty() {
            return Err(Error::Config("prefill needs a non-empty prompt".into()));
        }
        if self.prompt.len() > config.max_context {
            return Err(Error::Capacity(format!(
                "prompt of {} tokens exceeds max context {}",
                self.prompt.len(),
                config.max_context
            )));
        }
        if !self.produced.is_empty() {
            return Err(Error::State("session already prefilled".into()));
        }
        let cached = self.cache.len();
        if cached >= self.prompt.len() {
            return Err(Error::State(format!(
                "cache already holds {cached} positions of a {}-token prompt",
                self.prompt.len()
            )));
        }
        let mut ledger = StepLedger::new();
        let suffix = &self.prompt[cached..];
        ledger.record_tokens(suffix.len());
        let lookup = self.conventional_lookup();
        let mut x = embed(suffix, self.base, &mut ledger)?;
        for l in 0..config.num_layers {
            x = block_forward_single(&x, l, self.base, lookup, &mut self.cache, &mut ledger)?;
        }
        let last = x.slice_rows(x.rows() - 1, x.rows());
        let logits = lm_logits(&last, self.base, &mut ledger)?.reshape(&[config.vocab_size])?;
        self.metrics.absorb_prefill(&ledger, cached);
        self.finish(logits, ledger)
    }

    /// Prefill against a shared pool: reuse the longest cached prefix, compute
    /// the rest, and commit the prompt's full blocks together with the first
    /// token. A prompt found in full with a recorded first token computes
    /// nothing.
    pub fn prefill_shared(
        &mut self,
        pool: &mut KvPool<BlockKv<T>>,
        ns: Namespace,
        origin: usize,
    ) -> Result<SharedPrefill> {
        let lookup = pool.lookup_prefix(ns, &self.prompt, origin);
        let done = self
            .prefill_from_lookup(pool, &lookup)
            .and_then(|(out, _)| self.commit_prompt(pool, ns, origin, out.token).map(|_| out));
        match done {
            Ok(out) => Ok(SharedPrefill { lookup, ..out }),
            Err(e) => {
                pool.release(&lookup.blocks);
                Err(e)
            }
        }
    }

    /// Load the usable part of `lookup` into the session cache and compute
    /// the rest of the prompt. Nothing is committed; the returned ledger is
    /// empty when the prompt was served in full from the pool.
    pub fn prefill_from_lookup(
        &mut self,
        pool: &KvPool<BlockKv<T>>,
        lookup: &Lookup,
    ) -> Result<(SharedPrefill, StepLedger)> {
        if !self.cache.is_empty() || !self.produced.is_empty() {
            return Err(Error::State("pool prefill needs a fresh session".into()));
        }
        let config = self.base.config();
        let usable = lookup.usable(self.prompt.len());
        let w = config.kv_width();
        let mut layers: BlockKv<T> = vec![(Vec::new(), Vec::new()); config.num_layers];
        for &id in &lookup.blocks {
            let p = pool
                .payload(id)
                .ok_or_else(|| Error::State(format!("pinned block {id} has no payload")))?;
            for (dst, src) in layers.iter_mut().zip(p) {
                dst.0.extend_from_slice(&src.0);
                dst.1.extend_from_slice(&src.1);
            }
        }
        for (k, v) in &mut layers {
            k.truncate(usable * w);
            v.truncate(usable * w);
        }
        self.cache = KvCacheTensor::from_layers(config, layers)?;
        let (token, ledger) = match lookup.memo {
            Some(token) if usable == self.prompt.len() => {
                self.metrics.absorb_prefill(&StepLedger::new(), usable);
                self.produced.push(token);
                (token, StepLedger::new())
            }
            _ => {
                let out = self.prefill()?;
                (out.token, out.ledger)
            }
        };
        let out = SharedPrefill {
            token,
            hit_tokens: usable,
            computed: self.prompt.len() - usable,
            lookup: Lookup::default(),
        };
        Ok((out, ledger))
    }

    /// Commit the prompt's full blocks with `first` as the token that
    /// follows the prompt.
    pub fn commit_prompt(
        &self,
        pool: &mut KvPool<BlockKv<T>>,
        ns: Namespace,
        origin: usize,
        first: usize,
    ) -> Result<CommitOutcome> {
        let cache = &self.cache;
        pool.commit(ns, &self.prompt, origin, Some(first), |s, e| {
            cache.slice_positions(s, e)
        })
    }

    /// Commit the full blocks of everything this session has cached.
    pub fn commit_to_pool(&self, pool: &mut KvPool<BlockKv<T>>, ns: Namespace, origin: usize) -> Result<()> {
        let ctx = self.context();
        let n = self.cache.len().min(ctx.len());
        let cache = &self.cache;
        pool.commit(ns, &ctx[..n], origin, None, |s, e| cache.slice_positions(s, e))?;
        Ok(())
    }

    fn check_decode(&self) -> Result<()> {
        if self.cache.is_empty() {
            return Err(Error::State("decode before prefill: KV cache is empty".into()));
        }
        if self.produced.len() >= self.max_tokens {
            return Err(Error::Capacity(format!(
                "session already produced {} tokens",
                self.produced.len()
            )));
        }
        Ok(())
    }

    /// One decode step with encoder and decoder stacked as a pair.
    pub fn decode_step_fused(&mut self, token: usize) -> Result<StepOutput<T>> {
        if let Decoder::Conventional(_) = self.decoder {
            return Err(Error::Mode(
                "a conventional model has no separate encoder branch".into(),
            ));
        }
        self.check_decode()?;
        let config = self.base.config();
        let d = config.hidden;
        let mut ledger = StepLedger::new();
        ledger.record_tokens(1);
        let row = embed(&[token], self.base, &mut ledger)?;
        let mut x = Tensor::concat_rows(&[&row, &row])?.reshape(&[2, 1, d])?;
        let adapter = self.icarus_adapter();
        for l in 0..config.num_layers {
            x = block_forward(&x, l, self.base, adapter, &mut self.cache, Phase::Decode, &mut ledger)?;
        }
        let dec = x.reshape(&[2, d])?.slice_rows(1, 2);
        let logits = lm_logits(&dec, self.base, &mut ledger)?.reshape(&[config.vocab_size])?;
        self.metrics.absorb_decode(&ledger);
        self.finish(logits, ledger)
    }

    /// The same step as two passes over the base weights.
    pub fn decode_step_sequential(&mut self, token: usize) -> Result<StepOutput<T>> {
        if let Decoder::Conventional(_) = self.decoder {
            return Err(Error::Mode(
                "a conventional model has no separate encoder branch".into(),
            ));
        }
        self.check_decode()?;
        let config = self.base.config();
        let mut ledger = StepLedger::new();
        ledger.record_tokens(1);
        let mut enc = embed(&[token], self.base, &mut ledger)?;
        let mut dec = embed(&[token], self.base, &mut ledger)?;
        let adapter = self.icarus_adapter();
        for l in 0..config.num_layers {
            (enc, dec) = block_forward_two_pass(&enc, &dec, l, self.base, adapter, &mut self.cache, &mut ledger)?;
        }
        let logits = lm_logits(&dec, self.base, &mut ledger)?.reshape(&[config.vocab_size])?;
        self.metrics.absorb_decode(&ledger);
        self.finish(logits, ledger)
    }

    /// Single-branch step: the base model, or a conventional model with its
    /// own K/V adapters.
    pub fn decode_step_single(&mut self, token: usize) -> Result<StepOutput<T>> {
        if let Decoder::Icarus(_) = self.decoder {
            return Err(Error::Mode(
                "an ICaRus session decodes with the fused or sequential path".into(),
            ));
        }
        self.check_decode()?;
        let config = self.base.config();
        let mut ledger = StepLedger::new();
        ledger.record_tokens(1);
        let lookup = self.conventional_lookup();
        let mut x = embed(&[token], self.base, &mut ledger)?;
        for l in 0..config.num_layers {
            x = block_forward_single(&x, l, self.base, lookup, &mut self.cache, &mut ledger)?;
        }
        let logits = lm_logits(&x, self.base, &mut ledger)?.reshape(&[config.vocab_size])?;
        self.metrics.absorb_decode(&ledger);
        self.finish(logits, ledger)
    }

    /// Decode with whatever path fits the session's model.
    pub fn decode_step(&mut self, token: usize, path: DecodePath) -> Result<StepOutput<T>> {
        match (self.decoder, path) {
            (Decoder::Conventional(_), _) => self.decode_step_single(token),
            (_, DecodePath::Fused) => self.decode_step_fused(token),
            (_, DecodePath::Sequential) => self.decode_step_sequential(token),
        }
    }

    /// Prefill, then up to `max_new` decode steps. Returns the prefill token
    /// followed by every decoded token; stops early after the end token.
    pub fn generate(&mut self, max_new: usize, path: DecodePath) -> Result<Vec<usize>> {
        let mut token = self.prefill()?.token;
        let mut out = vec![token];
        for _ in 0..max_new {
            if Some(token) == self.eos {
                break;
            }
            token = self.decode_step(token, path)?.token;
            out.push(token);
        }
        Ok(out)
    }
}
