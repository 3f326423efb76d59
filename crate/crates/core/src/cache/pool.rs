use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EvictionPolicy, MemoryBudget, Namespace, BLOCK_SIZE};
use crate::error::{Error, Result};

pub type BlockId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Residency {
    Resident,
    Swapped,
    Freed,
}

/// Stable 64-bit chain hash of a full chunk under its parent.
pub fn chunk_hash(parent: u64, chunk: &[usize]) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    for &t in chunk {
        h.update((t as u64).to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug)]
struct Block<P> {
    ns: Namespace,
    hash: u64,
    parent: Option<BlockId>,
    children: Vec<BlockId>,
    depth: usize,
    tokens: Vec<usize>,
    payload: P,
    ref_count: u32,
    last_touch: u64,
    residency: Residency,
    memo: Option<usize>,
    origin: usize,
}

/// Counters of a pool since creation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub bytes_in_use: u64,
    pub peak_bytes: u64,
    pub indexed_blocks: u64,
    pub lookups: u64,
    pub hit_blocks: u64,
    pub miss_blocks: u64,
    pub hit_tokens: u64,
    pub cross_model_hits: u64,
    pub bytes_allocated: u64,
    pub dedup_bytes: u64,
    pub evictions: u64,
    pub evicted_bytes: u64,
    pub swap_outs: u64,
    pub swap_ins: u64,
    pub swap_out_bytes: u64,
    pub swap_in_bytes: u64,
    pub swap_drops: u64,
    pub recompute_tokens: u64,
    /// Blocks dropped by [`KvPool::retire`].
    pub retired_blocks: u64,
}

impl PoolStats {
    /// One JSON object on a single line.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("stats serialise")
    }
}

/// Result of a prefix lookup. The returned blocks are pinned until passed to
/// [`KvPool::release`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lookup {
    pub matched: usize,
    pub blocks: Vec<BlockId>,
    /// Greedy next token recorded when this exact prefix was last prefilled,
    /// present only when the whole query matched.
    pub memo: Option<usize>,
    /// Tokens past the match whose blocks had been evicted earlier.
    pub recompute_tokens: usize,
    pub swap_in_bytes: u64,
}

impl Lookup {
    /// Prompt positions a prefill can take from this lookup. Without a
    /// recorded first token the last prompt position is always recomputed.
    pub fn usable(&self, prompt_len: usize) -> usize {
        if self.memo.is_some() {
            self.matched
        } else {
            self.matched.min(prompt_len.saturating_sub(1))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommitOutcome {
    pub blocks: Vec<BlockId>,
    pub new_bytes: u64,
    pub dedup_bytes: u64,
    pub swap_in_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvictOutcome {
    pub freed: u64,
    pub shortfall: u64,
}

/// Reference-counted, content-addressed store of full KV blocks.
///
/// `P` is the per-block payload: real per-layer keys and values for a model
/// engine, or `()` when only the accounting matters.
#[derive(Debug)]
pub struct KvPool<P> {
    budget: MemoryBudget,
    block_bytes: u64,
    blocks: Vec<Option<Block<P>>>,
    free_ids: Vec<BlockId>,
    index: HashMap<(Namespace, u64), BlockId>,
    evicted: HashSet<(Namespace, u64)>,
    resident_bytes: u64,
    private_bytes: u64,
    swap_used: u64,
    tick: u64,
    stats: PoolStats,
}

impl<P> KvPool<P> {
    /// `block_bytes` is the KV size of one full block across all layers.
    pub fn new(budget: MemoryBudget, block_bytes: u64) -> Self {
        Self {
            budget,
            block_bytes,
            blocks: Vec::new(),
            free_ids: Vec::new(),
            index: HashMap::new(),
            evicted: HashSet::new(),
            resident_bytes: 0,
            private_bytes: 0,
            swap_used: 0,
            tick: 0,
            stats: PoolStats::default(),
        }
    }

    pub fn budget(&self) -> &MemoryBudget {
        &self.budget
    }

    pub fn block_bytes(&self) -> u64 {
        self.block_bytes
    }

    pub fn bytes_in_use(&self) -> u64 {
        self.resident_bytes + self.private_bytes
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            bytes_in_use: self.bytes_in_use(),
            indexed_blocks: self.index.len() as u64,
            ..self.stats.clone()
        }
    }

    pub fn residency(&self, id: BlockId) -> Residency {
        self.block(id).map_or(Residency::Freed, |b| b.residency)
    }

    pub fn ref_count(&self, id: BlockId) -> u32 {
        self.block(id).map_or(0, |b| b.ref_count)
    }

    pub fn payload(&self, id: BlockId) -> Option<&P> {
        self.block(id).map(|b| &b.payload)
    }

    pub fn tokens(&self, id: BlockId) -> Option<&[usize]> {
        self.block(id).map(|b| b.tokens.as_slice())
    }

    fn block(&self, id: BlockId) -> Option<&Block<P>> {
        self.blocks.get(id).and_then(|b| b.as_ref())
    }

    fn block_mut(&mut self, id: BlockId) -> &mut Block<P> {
        self.blocks[id].as_mut().expect("live block")
    }

    fn note_peak(&mut self) {
        self.stats.peak_bytes = self.stats.peak_bytes.max(self.bytes_in_use());
    }

    /// Indexed block for `chunk` under `parent`, verified token by token.
    fn find(&self, ns: Namespace, hash: u64, chunk: &[usize], parent: Option<BlockId>) -> Option<BlockId> {
        let &id = self.index.get(&(ns, hash))?;
        let b = self.block(id)?;
        (b.tokens == chunk && b.parent == parent).then_some(id)
    }

    fn pin(&mut self, id: BlockId) {
        let tick = self.tick;
        let b = self.block_mut(id);
        b.ref_count += 1;
        b.last_touch = tick;
    }

    /// Pin blocks again, e.g. the blocks of a commit that a session keeps
    /// using.
    pub fn retain(&mut self, blocks: &[BlockId]) {
        self.tick += 1;
        for &id in blocks {
            if self.block(id).is_some() {
                self.pin(id);
            }
        }
    }

    /// Unpin blocks returned by a lookup.
    pub fn release(&mut self, blocks: &[BlockId]) {
        for &id in blocks {
            if let Some(Some(b)) = self.blocks.get_mut(id) {
                debug_assert!(b.ref_count > 0, "release of an unpinned block");
                b.ref_count = b.ref_count.saturating_sub(1);
            }
        }
    }

    /// Longest cached full-block prefix of `tokens` under `ns`. Matched
    /// blocks are pinned; swapped blocks on the path are brought back.
    pub fn lookup_prefix(&mut self, ns: Namespace, tokens: &[usize], origin: usize) -> Lookup {
        self.tick += 1;
        self.stats.lookups += 1;
        let mut out = Lookup::default();
        let mut parent = None;
        let mut hash = 0u64;
        let chunks: Vec<&[usize]> = tokens.chunks_exact(BLOCK_SIZE).collect();
        let mut i = 0;
        while i < chunks.len() {
            let h = chunk_hash(hash, chunks[i]);
            let Some(id) = self.find(ns, h, chunks[i], parent) else {
                break;
            };
            if self.residency(id) == Residency::Swapped {
                match self.swap_in(id) {
                    Some(bytes) => out.swap_in_bytes += bytes,
                    None => break,
                }
            }
            self.pin(id);
            if self.block(id).map(|b| b.origin) != Some(origin) {
                self.stats.cross_model_hits += 1;
            }
            out.blocks.push(id);
            parent = Some(id);
            hash = h;
            i += 1;
        }
        out.matched = out.blocks.len() * BLOCK_SIZE;
        for chunk in &chunks[i..] {
            hash = chunk_hash(hash, chunk);
            if self.evicted.contains(&(ns, hash)) {
                out.recompute_tokens += BLOCK_SIZE;
            }
        }
        if out.matched == tokens.len() {
            out.memo = out.blocks.last().and_then(|&id| self.block(id)?.memo);
        }
        self.stats.hit_blocks += out.blocks.len() as u64;
        self.stats.miss_blocks += (chunks.len() - out.blocks.len()) as u64;
        self.stats.hit_tokens += out.matched as u64;
        self.stats.recompute_tokens += out.recompute_tokens as u64;
        out
    }

    /// Index the full blocks of `tokens` under `ns`. `payload(start, end)`
    /// supplies the KV of positions `start..end` for blocks not already
    /// present. `memo` is attached to the block ending exactly at the end of
    /// `tokens`, if there is one.
    pub fn commit(
        &mut self,
        ns: Namespace,
        tokens: &[usize],
        origin: usize,
        memo: Option<usize>,
        mut payload: impl FnMut(usize, usize) -> P,
    ) -> Result<CommitOutcome> {
        self.tick += 1;
        let mut out = CommitOutcome::default();
        let mut parent = None;
        let mut hash = 0u64;
        let mut result = Ok(());
        for (i, chunk) in tokens.chunks_exact(BLOCK_SIZE).enumerate() {
            let h = chunk_hash(hash, chunk);
            let end = (i + 1) * BLOCK_SIZE;
            let block_memo = if end == tokens.len() { memo } else { None };
            let id = match self.find(ns, h, chunk, parent) {
                Some(id) => {
                    if self.residency(id) == Residency::Swapped {
                        match self.swap_in(id) {
                            Some(bytes) => out.swap_in_bytes += bytes,
                            None => {
                                result = Err(self.capacity_error());
                                break;
                            }
                        }
                    }
                    out.dedup_bytes += self.block_bytes;
                    let b = self.block_mut(id);
                    if b.memo.is_none() {
                        b.memo = block_memo;
                    }
                    id
                }
                None if self.index.contains_key(&(ns, h)) => break,
                None => {
                    if !self.make_room(self.block_bytes) {
                        result = Err(self.capacity_error());
                        break;
                    }
                    let id = self.insert(Block {
                        ns,
                        hash: h,
                        parent,
                        children: Vec::new(),
                        depth: i,
                        tokens: chunk.to_vec(),
                        payload: payload(i * BLOCK_SIZE, end),
                        ref_count: 0,
                        last_touch: self.tick,
                        residency: Residency::Resident,
                        memo: block_memo,
                        origin,
                    });
                    out.new_bytes += self.block_bytes;
                    id
                }
            };
            self.pin(id);
            out.blocks.push(id);
            parent = Some(id);
            hash = h;
        }
        self.release(&out.blocks);
        self.stats.dedup_bytes += out.dedup_bytes;
        result.map(|_| out)
    }

    fn capacity_error(&self) -> Error {
        Error::Capacity(format!(
            "KV budget of {} bytes exhausted: {} bytes pinned or reserved",
            self.budget.kv_bytes,
            self.bytes_in_use()
        ))
    }

    fn insert(&mut self, block: Block<P>) -> BlockId {
        let (ns, hash, parent) = (block.ns, block.hash, block.parent);
        let id = match self.free_ids.pop() {
            Some(id) => {
                self.blocks[id] = Some(block);
                id
            }
            None => {
                self.blocks.push(Some(block));
                self.blocks.len() - 1
            }
        };
        if let Some(p) = parent {
            self.block_mut(p).children.push(id);
        }
        self.index.insert((ns, hash), id);
        self.evicted.remove(&(ns, hash));
        self.resident_bytes += self.block_bytes;
        self.stats.bytes_allocated += self.block_bytes;
        self.note_peak();
        id
    }

    /// Hold `bytes` of session-private KV (partial tail blocks, decode
    /// positions not yet committed) against the budget.
    pub fn reserve_private(&mut self, bytes: u64) -> Result<()> {
        if !self.make_room(bytes) {
            return Err(self.capacity_error());
        }
        self.private_bytes += bytes;
        self.note_peak();
        Ok(())
    }

    pub fn release_private(&mut self, bytes: u64) {
        self.private_bytes = self.private_bytes.saturating_sub(bytes);
    }

    fn fits(&self, extra: u64) -> bool {
        self.bytes_in_use().saturating_add(extra) <= self.budget.kv_bytes
    }

    fn make_room(&mut self, needed: u64) -> bool {
        while !self.fits(needed) {
            if self.evict_one(self.budget.policy).is_none() {
                return false;
            }
        }
        true
    }

    /// Release unpinned blocks in LRU order until `needed` bytes are freed.
    pub fn evict(&mut self, policy: EvictionPolicy, needed: u64) -> EvictOutcome {
        self.tick += 1;
        let mut freed = 0;
        while freed < needed {
            match self.evict_one(policy) {
                Some(b) => freed += b,
                None => break,
            }
        }
        EvictOutcome {
            freed,
            shortfall: needed.saturating_sub(freed),
        }
    }

    /// Least recently touched unpinned resident block with no resident
    /// children; deeper blocks go first on equal touch.
    fn victim(&self) -> Option<BlockId> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(id, b)| b.as_ref().map(|b| (id, b)))
            .filter(|(_, b)| {
                b.residency == Residency::Resident
                    && b.ref_count == 0
                    && b.children.iter().all(|&c| self.residency(c) != Residency::Resident)
            })
            .min_by_key(|(id, b)| (b.last_touch, std::cmp::Reverse(b.depth), *id))
            .map(|(id, _)| id)
    }

    fn evict_one(&mut self, policy: EvictionPolicy) -> Option<u64> {
        let id = self.victim()?;
        let bb = self.block_bytes;
        self.stats.evictions += 1;
        self.stats.evicted_bytes += bb;
        if policy == EvictionPolicy::Swap && self.swap_used + bb <= self.budget.swap_bytes {
            self.block_mut(id).residency = Residency::Swapped;
            self.resident_bytes -= bb;
            self.swap_used += bb;
            self.stats.swap_outs += 1;
            self.stats.swap_out_bytes += bb;
        } else {
            self.free_subtree(id, true);
        }
        Some(bb)
    }

    /// Returns the number of blocks freed.
    fn free_subtree(&mut self, id: BlockId, evicted: bool) -> u64 {
        let b = self.blocks[id].take().expect("live block");
        self.free_ids.push(id);
        self.index.remove(&(b.ns, b.hash));
        if evicted {
            self.evicted.insert((b.ns, b.hash));
        }
        match b.residency {
            Residency::Resident => self.resident_bytes -= self.block_bytes,
            Residency::Swapped => {
                self.swap_used -= self.block_bytes;
                self.stats.swap_drops += 1;
            }
            Residency::Freed => {}
        }
        if let Some(p) = b.parent {
            if let Some(Some(pb)) = self.blocks.get_mut(p) {
                pb.children.retain(|&c| c != id);
            }
        }
        let mut freed = 1;
        for c in b.children {
            freed += self.free_subtree(c, evicted);
        }
        freed
    }

    /// Drop the cached continuation of `tokens` under `ns` past its first
    /// `keep` tokens, as when a workflow ends and its context is no longer
    /// wanted. Blocks still pinned are left alone. Retired blocks are not
    /// evictions and are never charged as recompute.
    pub fn retire(&mut self, ns: Namespace, tokens: &[usize], keep: usize) -> u64 {
        let mut parent = None;
        let mut hash = 0u64;
        for (i, chunk) in tokens.chunks_exact(BLOCK_SIZE).enumerate() {
            let h = chunk_hash(hash, chunk);
            let Some(id) = self.find(ns, h, chunk, parent) else {
                return 0;
            };
            if (i + 1) * BLOCK_SIZE > keep {
                if self.subtree_pinned(id) {
                    return 0;
                }
                let n = self.free_subtree(id, false);
                self.stats.retired_blocks += n;
                return n;
            }
            parent = Some(id);
            hash = h;
        }
        0
    }

    fn subtree_pinned(&self, id: BlockId) -> bool {
        self.block(id)
            .is_some_and(|b| b.ref_count > 0 || b.children.iter().any(|&c| self.subtree_pinned(c)))
    }

    /// Bring a swapped block back; `None` if no room can be made.
    fn swap_in(&mut self, id: BlockId) -> Option<u64> {
        let bb = self.block_bytes;
        // keep the block (and its path) out of the victim set while making room
        self.block_mut(id).ref_count += 1;
        let ok = self.make_room(bb);
        self.block_mut(id).ref_count -= 1;
        if !ok {
            return None;
        }
        let tick = self.tick;
        let b = self.block_mut(id);
        b.residency = Residency::Resident;
        b.last_touch = tick;
        self.swap_used -= bb;
        self.resident_bytes += bb;
        self.stats.swap_ins += 1;
        self.stats.swap_in_bytes += bb;
        self.note_peak();
        Some(bb)
    }

    /// Blocks currently indexed under `ns`.
    pub fn blocks_in(&self, ns: Namespace) -> usize {
        self.index.keys().filter(|(n, _)| *n == ns).count()
    }
}
