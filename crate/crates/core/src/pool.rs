//! Per-device contiguous KV memory pool.
//!
//! Layout: the large region sits at offset 0 and holds whole blocks of
//! `large_bound` tokens. The rest of the device is cut into equal slabs; each
//! slab is carved into fixed-size blocks of one regular bucket class and its
//! free blocks sit on that class's LIFO free list.
//!
//! A bucket refresh never touches live blocks. Slabs whose block size still
//! exists in the new config are adopted as-is; fully free slabs are re-carved
//! at once; the rest drain (no new reservations) and are re-carved when their
//! last block is released. So at most two carvings are live at a time: the
//! current one and the draining one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bucket::{BucketConfig, BucketTag, TagKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("pool init: {0}")]
    Init(String),
    #[error("request {0} already holds a block")]
    AlreadyLive(u64),
    #[error("unknown request {0}")]
    UnknownRequest(u64),
    #[error("out of memory for request {id} ({tag})")]
    OutOfMemory { id: u64, tag: BucketTag },
    #[error("request {id}: prompt of {prompt} tokens exceeds a {capacity}-token block")]
    PromptTooLarge { id: u64, prompt: u32, capacity: u32 },
    #[error("request {0}: block is full")]
    BlockFull(u64),
    #[error("request {0} is not in an overflowing regular block")]
    NotOverflowing(u64),
    #[error("request {0} stalled: large region exhausted")]
    Stalled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: u32,
    pub kv_heads: u32,
    pub head_dim: u32,
    pub dtype_bytes: u32,
}

impl ModelShape {
    /// 7B-class GQA model: 28 layers, 4 KV heads of width 128, fp16.
    pub const QWEN_7B: ModelShape = ModelShape {
        layers: 28,
        kv_heads: 4,
        head_dim: 128,
        dtype_bytes: 2,
    };

    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.kv_heads == 0 || self.head_dim == 0 || self.dtype_bytes == 0 {
            return Err(format!("model shape fields must be >= 1: {self:?}"));
        }
        Ok(())
    }

    /// K and V for every layer and KV head.
    pub fn bytes_per_token(&self) -> u64 {
        2 * self.layers as u64 * self.kv_heads as u64 * self.head_dim as u64 * self.dtype_bytes as u64
    }
}

/// Where a block was carved from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    /// Regular class (1-based) of the pool's config at reservation time.
    Regular(usize),
    Large,
    /// Exact-size allocation (oracle reference pool).
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub offset: u64,
    pub size: u64,
    pub owner: u64,
    pub tag: BucketTag,
    pub tokens_written: u32,
    pub region: Region,
}

impl Block {
    pub fn end(&self) -> u64 {
        self.offset + self.size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reservation {
    pub block: Block,
    /// The first-choice class had no free block.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Migration {
    pub block: Block,
    pub old_block: Block,
    pub copied_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub bound: u32,
    pub free_blocks: usize,
    pub live_blocks: usize,
    pub useful_bytes: u64,
    pub reserved_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub classes: Vec<ClassStats>,
    /// Live blocks in slabs still carved for an older config.
    pub draining: ClassStats,
    pub large: ClassStats,
}

impl PoolStats {
    pub fn useful_bytes(&self) -> u64 {
        self.iter().map(|c| c.useful_bytes).sum()
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.iter().map(|c| c.reserved_bytes).sum()
    }

    pub fn live_blocks(&self) -> usize {
        self.iter().map(|c| c.live_blocks).sum()
    }

    fn iter(&self) -> impl Iterator<Item = &ClassStats> {
        self.classes.iter().chain([&self.draining, &self.large])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolOptions {
    /// Fraction of capacity set aside for the large region.
    pub reserve_fraction: f64,
    /// Slab size in tokens; `None` means one large block per slab.
    pub slab_tokens: Option<u32>,
    /// Refuse layouts without at least one large block.
    pub require_large: bool,
}

impl Default for PoolOptions {
    fn default() -> Self {
        Self {
            reserve_fraction: 0.1,
            slab_tokens: None,
            require_large: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlabState {
    Class { idx: usize, block_bytes: u64 },
    Draining { block_bytes: u64 },
    Unassigned,
}

#[derive(Debug, Clone)]
struct Slab {
    start: u64,
    state: SlabState,
    live: usize,
}

#[derive(Debug, Clone)]
struct Class {
    bound: u32,
    block_bytes: u64,
    free: Vec<u64>,
    target_slabs: usize,
    slabs: usize,
}

#[derive(Debug, Clone)]
pub struct PoolState {
    capacity: u64,
    bytes_per_token: u64,
    align_bytes: u64,
    large_block_bytes: u64,
    large_blocks: usize,
    large_free: Vec<u64>,
    regular_start: u64,
    slab_bytes: u64,
    slabs: Vec<Slab>,
    classes: Vec<Class>,
    config: BucketConfig,
    live: BTreeMap<u64, Block>,
    useful: u64,
    reserved: u64,
}

impl PoolState {
    /// Standard construction with equal byte shares and one-large-block slabs.
    pub fn new(
        capacity: u64,
        config: &BucketConfig,
        shape: ModelShape,
        reserve_fraction: f64,
    ) -> Result<Self, PoolError> {
        if !(reserve_fraction > 0.0 && reserve_fraction < 1.0) {
            return Err(PoolError::Init(format!(
                "reserve_fraction must be in (0, 1) (got {reserve_fraction})"
            )));
        }
        shape.validate().map_err(PoolError::Init)?;
        let shares = vec![1.0 / config.bucket_count() as f64; config.bucket_count()];
        Self::with_options(
            capacity,
            config,
            shape.bytes_per_token(),
            &shares,
            PoolOptions {
                reserve_fraction,
                ..PoolOptions::default()
            },
        )
    }

    pub fn with_options(
        capacity: u64,
        config: &BucketConfig,
        bytes_per_token: u64,
        shares: &[f64],
        opts: PoolOptions,
    ) -> Result<Self, PoolError> {
        if bytes_per_token == 0 {
            return Err(PoolError::Init("bytes_per_token must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&opts.reserve_fraction) {
            return Err(PoolError::Init(format!(
                "reserve_fraction must be in [0, 1) (got {})",
                opts.reserve_fraction
            )));
        }
        let align_bytes = config.align() as u64 * bytes_per_token;
        let large_block_bytes = config.large_bound() as u64 * bytes_per_token;
        let reserve_bytes = (capacity as f64 * opts.reserve_fraction).floor() as u64;
        let large_blocks = (reserve_bytes / large_block_bytes) as usize;
        if opts.require_large && large_blocks == 0 {
            return Err(PoolError::Init(format!(
                "capacity {capacity} with reserve_fraction {} cannot hold one large block of {large_block_bytes} bytes",
                opts.reserve_fraction
            )));
        }
        let slab_tokens = opts.slab_tokens.unwrap_or(config.large_bound());
        if slab_tokens < config.large_bound() || !slab_tokens.is_multiple_of(config.align()) {
            return Err(PoolError::Init(format!(
                "slab_tokens {slab_tokens} must be an align multiple >= large_bound {}",
                config.large_bound()
            )));
        }
        let slab_bytes = slab_tokens as u64 * bytes_per_token;
        let regular_start = large_blocks as u64 * large_block_bytes;
        let n_slabs = ((capacity - regular_start) / slab_bytes) as usize;
        if n_slabs < config.bucket_count() {
            return Err(PoolError::Init(format!(
                "capacity {capacity} leaves room for {n_slabs} slab(s) of {slab_bytes} bytes; {} bucket classes need one each",
                config.bucket_count()
            )));
        }
        // Large blocks pop from the lowest offset first.
        let large_free = (0..large_blocks as u64).rev().map(|i| i * large_block_bytes).collect();
        let slabs = (0..n_slabs as u64)
            .map(|i| Slab {
                start: regular_start + i * slab_bytes,
                state: SlabState::Unassigned,
                live: 0,
            })
            .collect();
        let mut pool = Self {
            capacity,
            bytes_per_token,
            align_bytes,
            large_block_bytes,
            large_blocks,
            large_free,
            regular_start,
            slab_bytes,
            slabs,
            classes: Vec::new(),
            config: config.clone(),
            live: BTreeMap::new(),
            useful: 0,
            reserved: 0,
        };
        pool.apply_config(config, shares);
        Ok(pool)
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn bytes_per_token(&self) -> u64 {
        self.bytes_per_token
    }

    pub fn config(&self) -> &BucketConfig {
        &self.config
    }

    pub fn large_blocks(&self) -> usize {
        self.large_blocks
    }

    pub fn large_free(&self) -> usize {
        self.large_free.len()
    }

    pub fn slab_count(&self) -> usize {
        self.slabs.len()
    }

    /// Free blocks per current regular class.
    pub fn free_blocks(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.free.len()).collect()
    }

    pub fn block(&self, id: u64) -> Option<&Block> {
        self.live.get(&id)
    }

    /// Free-list contents, regular classes then the large region, in pop
    /// order reversed (last element pops first).
    pub fn free_lists(&self) -> (Vec<Vec<u64>>, Vec<u64>) {
        (
            self.classes.iter().map(|c| c.free.clone()).collect(),
            self.large_free.clone(),
        )
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn live_blocks(&self) -> impl Iterator<Item = &Block> {
        self.live.values()
    }

    pub fn useful_bytes(&self) -> u64 {
        self.useful
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.reserved
    }

    fn blocks_per_slab(&self, block_bytes: u64) -> usize {
        (self.slab_bytes / block_bytes) as usize
    }

    fn slab_of(&self, offset: u64) -> usize {
        ((offset - self.regular_start) / self.slab_bytes) as usize
    }

    fn block_offsets(&self, slab: usize, block_bytes: u64) -> impl DoubleEndedIterator<Item = u64> {
        let start = self.slabs[slab].start;
        (0..self.blocks_per_slab(block_bytes) as u64).map(move |k| start + k * block_bytes)
    }

    /// First current class whose bound covers `tag`, or `None` for the large
    /// region.
    fn first_class(&self, tag: &BucketTag) -> Option<usize> {
        match tag.kind {
            TagKind::Large => None,
            TagKind::Regular(i) if tag.config_version == self.config.version() => {
                Some(i - 1).filter(|&k| k < self.classes.len())
            }
            TagKind::Regular(_) => {
                let k = self.classes.partition_point(|c| c.bound < tag.bound);
                (k < self.classes.len()).then_some(k)
            }
        }
    }

    /// Bytes immediately available to a reservation with `tag`, counting
    /// only its first-choice class.
    pub fn free_bytes_for(&self, tag: &BucketTag) -> u64 {
        match self.first_class(tag) {
            Some(k) => self.classes[k].free.len() as u64 * self.classes[k].block_bytes,
            None => self.large_free.len() as u64 * self.large_block_bytes,
        }
    }

    /// Installs a new bucket config for future reservations. Live blocks keep
    /// their offsets, sizes and tags.
    pub fn apply_config(&mut self, config: &BucketConfig, shares: &[f64]) {
        let targets = slab_targets(self.slabs.len(), config.bucket_count(), shares);
        let mut classes: Vec<Class> = config
            .bounds()
            .iter()
            .zip(&targets)
            .map(|(&bound, &target_slabs)| Class {
                bound,
                block_bytes: bound as u64 * self.bytes_per_token,
                free: Vec::new(),
                target_slabs,
                slabs: 0,
            })
            .collect();
        let old_classes = std::mem::take(&mut self.classes);
        let was_class: Vec<bool> = self
            .slabs
            .iter()
            .map(|s| matches!(s.state, SlabState::Class { .. }))
            .collect();

        for s in 0..self.slabs.len() {
            let bb = match self.slabs[s].state {
                SlabState::Class { block_bytes, .. } | SlabState::Draining { block_bytes } => block_bytes,
                SlabState::Unassigned => continue,
            };
            if let Some(j) = classes.iter().position(|c| c.block_bytes == bb) {
                // same carving survives: adopt, free blocks included
                self.slabs[s].state = SlabState::Class { idx: j, block_bytes: bb };
                classes[j].slabs += 1;
            } else if self.slabs[s].live == 0 {
                self.slabs[s].state = SlabState::Unassigned;
            } else {
                self.slabs[s].state = SlabState::Draining { block_bytes: bb };
            }
        }
        // Slabs that stay carved keep their free blocks in old LIFO order.
        for old in &old_classes {
            for &off in &old.free {
                if let SlabState::Class { idx, .. } = self.slabs[self.slab_of(off)].state {
                    classes[idx].free.push(off);
                }
            }
        }
        // Slabs adopted out of draining hand over every block not live.
        let live_by_slab = self.live_offsets_by_slab();
        for s in 0..self.slabs.len() {
            if let (SlabState::Class { idx, block_bytes }, false) = (self.slabs[s].state, was_class[s]) {
                let live = live_by_slab.get(&s).cloned().unwrap_or_default();
                let offs: Vec<u64> = self
                    .block_offsets(s, block_bytes)
                    .rev()
                    .filter(|o| !live.contains(o))
                    .collect();
                classes[idx].free.extend(offs);
            }
        }
        self.classes = classes;
        self.config = config.clone();

        let unassigned: Vec<usize> = (0..self.slabs.len())
            .filter(|&s| self.slabs[s].state == SlabState::Unassigned)
            .collect();
        for s in unassigned {
            self.carve(s);
        }
        self.rebalance();
    }

    fn live_offsets_by_slab(&self) -> BTreeMap<usize, Vec<u64>> {
        let mut m: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for b in self.live.values() {
            if b.region != Region::Large {
                m.entry(self.slab_of(b.offset)).or_default().push(b.offset);
            }
        }
        m
    }

    /// Carves a fully free slab for the class furthest below its target.
    fn carve(&mut self, s: usize) {
        debug_assert_eq!(self.slabs[s].live, 0);
        let j = self.neediest_class();
        self.carve_specific(s, j);
    }

    fn neediest_class(&self) -> usize {
        let deficit = |c: &Class| c.target_slabs as i64 - c.slabs as i64;
        let mut best = 0;
        for (j, c) in self.classes.iter().enumerate() {
            if deficit(c) > deficit(&self.classes[best]) {
                best = j;
            }
        }
        best
    }

    /// Moves fully free slabs from classes above target to classes below it.
    fn rebalance(&mut self) {
        loop {
            let needy = self.neediest_class();
            if self.classes[needy].slabs >= self.classes[needy].target_slabs {
                return;
            }
            let donor = (0..self.slabs.len()).find(|&s| match self.slabs[s].state {
                SlabState::Class { idx, .. } => {
                    self.slabs[s].live == 0 && self.classes[idx].slabs > self.classes[idx].target_slabs
                }
                _ => false,
            });
            let Some(s) = donor else { return };
            self.uncarve(s);
            self.carve_specific(s, needy);
        }
    }

    /// A fully free slab another class can spare for class `k`, taken from
    /// the class furthest above its target.
    fn idle_slab(&self, k: usize) -> Option<usize> {
        let surplus = |j: usize| self.classes[j].slabs as i64 - self.classes[j].target_slabs as i64;
        (0..self.slabs.len())
            .filter_map(|s| match self.slabs[s].state {
                SlabState::Class { idx, .. } if idx != k && self.slabs[s].live == 0 => {
                    Some((surplus(idx), s))
                }
                _ => None,
            })
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
            .map(|(_, s)| s)
    }

    fn uncarve(&mut self, s: usize) {
        if let SlabState::Class { idx, .. } = self.slabs[s].state {
            let (start, end) = (self.slabs[s].start, self.slabs[s].start + self.slab_bytes);
            self.classes[idx].free.retain(|&o| o < start || o >= end);
            self.classes[idx].slabs -= 1;
        }
        self.slabs[s].state = SlabState::Unassigned;
    }

    fn carve_specific(&mut self, s: usize, j: usize) {
        let bb = self.classes[j].block_bytes;
        self.slabs[s].state = SlabState::Class { idx: j, block_bytes: bb };
        self.classes[j].slabs += 1;
        let offs: Vec<u64> = self.block_offsets(s, bb).rev().collect();
        self.classes[j].free.extend(offs);
    }

    /// Pops a block for `id`. Exhausted classes fall back to the next larger
    /// class, then re-carve a fully free slab of another class, then take a
    /// large block. On failure the pool is unchanged.
    pub fn reserve(&mut self, id: u64, tag: BucketTag, prompt_len: u32) -> Result<Reservation, PoolError> {
        if self.live.contains_key(&id) {
            return Err(PoolError::AlreadyLive(id));
        }
        let first = self.first_class(&tag);
        let mut steal = None;
        let candidate = match first {
            Some(k) => (k..self.classes.len())
                .find(|&j| !self.classes[j].free.is_empty())
                .map(Some)
                .or_else(|| {
                    steal = self.idle_slab(k);
                    steal.map(|_| Some(k))
                })
                .or_else(|| (!self.large_free.is_empty()).then_some(None)),
            None => (!self.large_free.is_empty()).then_some(None),
        };
        let Some(choice) = candidate else {
            return Err(PoolError::OutOfMemory { id, tag });
        };
        let size = match choice {
            Some(j) => self.classes[j].block_bytes,
            None => self.large_block_bytes,
        };
        let capacity = (size / self.bytes_per_token) as u32;
        if prompt_len > capacity {
            return Err(PoolError::PromptTooLarge {
                id,
                prompt: prompt_len,
                capacity,
            });
        }
        if let (Some(s), Some(j)) = (steal, choice) {
            self.uncarve(s);
            self.carve_specific(s, j);
        }
        let (offset, region) = match choice {
            Some(j) => {
                let off = self.classes[j].free.pop().expect("checked non-empty");
                let s = self.slab_of(off);
                self.slabs[s].live += 1;
                (off, Region::Regular(j + 1))
            }
            None => (self.large_free.pop().expect("checked non-empty"), Region::Large),
        };
        let block = Block {
            offset,
            size,
            owner: id,
            tag,
            tokens_written: prompt_len,
            region,
        };
        self.useful += prompt_len as u64 * self.bytes_per_token;
        self.reserved += size;
        self.live.insert(id, block.clone());
        Ok(Reservation {
            block,
            fallback: choice != first,
        })
    }

    /// Records one more decoded token. Fails without change if the block is
    /// already full.
    pub fn append_token(&mut self, id: u64) -> Result<u32, PoolError> {
        let bpt = self.bytes_per_token;
        let b = self.live.get_mut(&id).ok_or(PoolError::UnknownRequest(id))?;
        if (b.tokens_written as u64 + 1) * bpt > b.size {
            return Err(PoolError::BlockFull(id));
        }
        b.tokens_written += 1;
        self.useful += bpt;
        Ok(b.tokens_written)
    }

    pub fn is_full(&self, id: u64) -> bool {
        self.live
            .get(&id)
            .is_some_and(|b| (b.tokens_written as u64 + 1) * self.bytes_per_token > b.size)
    }

    /// Returns the block to the free list of the class it was carved from.
    pub fn release(&mut self, id: u64) -> Result<Block, PoolError> {
        let block = self.live.remove(&id).ok_or(PoolError::UnknownRequest(id))?;
        self.useful -= block.tokens_written as u64 * self.bytes_per_token;
        self.reserved -= block.size;
        self.free_block(&block);
        Ok(block)
    }

    fn free_block(&mut self, block: &Block) {
        if block.region == Region::Large {
            self.large_free.push(block.offset);
            return;
        }
        let s = self.slab_of(block.offset);
        self.slabs[s].live -= 1;
        match self.slabs[s].state {
            SlabState::Class { idx, .. } => {
                self.classes[idx].free.push(block.offset);
                if self.slabs[s].live == 0 {
                    self.rebalance();
                }
            }
            SlabState::Draining { .. } => {
                if self.slabs[s].live == 0 {
                    self.slabs[s].state = SlabState::Unassigned;
                    self.carve(s);
                }
            }
            SlabState::Unassigned => unreachable!("live block in unassigned slab"),
        }
    }

    /// Moves an overflowing request into a large block: allocate, copy the
    /// written KV, swap, then free the old block. With no large block free
    /// the request stalls in place.
    pub fn migrate_to_large(&mut self, id: u64) -> Result<Migration, PoolError> {
        let old = self.live.get(&id).ok_or(PoolError::UnknownRequest(id))?;
        if old.region == Region::Large || old.size >= self.large_block_bytes || !self.is_full(id) {
            return Err(PoolError::NotOverflowing(id));
        }
        let Some(offset) = self.large_free.pop() else {
            return Err(PoolError::Stalled(id));
        };
        let old = self.live.remove(&id).expect("checked live");
        let block = Block {
            offset,
            size: self.large_block_bytes,
            owner: id,
            tag: old.tag,
            tokens_written: old.tokens_written,
            region: Region::Large,
        };
        let copied_bytes = old.tokens_written as u64 * self.bytes_per_token;
        self.reserved = self.reserved - old.size + block.size;
        self.live.insert(id, block.clone());
        self.free_block(&old);
        Ok(Migration {
            block,
            old_block: old,
            copied_bytes,
        })
    }

    pub fn stats(&self) -> PoolStats {
        let mut stats = PoolStats {
            classes: self
                .classes
                .iter()
                .map(|c| ClassStats {
                    bound: c.bound,
                    free_blocks: c.free.len(),
                    ..ClassStats::default()
                })
                .collect(),
            draining: ClassStats::default(),
            large: ClassStats {
                bound: self.config.large_bound(),
                free_blocks: self.large_free.len(),
                ..ClassStats::default()
            },
        };
        for b in self.live.values() {
            let slot = if b.region == Region::Large {
                &mut stats.large
            } else {
                match self.slabs[self.slab_of(b.offset)].state {
                    SlabState::Class { idx, .. } => &mut stats.classes[idx],
                    _ => &mut stats.draining,
                }
            };
            slot.live_blocks += 1;
            slot.useful_bytes += b.tokens_written as u64 * self.bytes_per_token;
            slot.reserved_bytes += b.size;
        }
        stats
    }

    /// Full structural check: live and free blocks pairwise disjoint and in
    /// bounds, per-region conservation, and counter consistency.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut ranges: Vec<(u64, u64, &'static str)> = Vec::new();
        for b in self.live.values() {
            if b.tokens_written as u64 * self.bytes_per_token > b.size {
                return Err(format!("block of {} overfilled", b.owner));
            }
            if b.offset % self.align_bytes != 0 || b.size % self.align_bytes != 0 {
                return Err(format!("block of {} misaligned", b.owner));
            }
            ranges.push((b.offset, b.end(), "live"));
        }
        for &o in &self.large_free {
            ranges.push((o, o + self.large_block_bytes, "large-free"));
        }
        for c in &self.classes {
            for &o in &c.free {
                ranges.push((o, o + c.block_bytes, "free"));
            }
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(format!("overlap: {:?} and {:?}", w[0], w[1]));
            }
        }
        if let Some(last) = ranges.last() {
            if last.1 > self.capacity {
                return Err(format!("range {last:?} beyond capacity {}", self.capacity));
            }
        }
        // large region conservation
        let large_live = self.live.values().filter(|b| b.region == Region::Large).count();
        if large_live + self.large_free.len() != self.large_blocks {
            return Err(format!(
                "large region: {large_live} live + {} free != {}",
                self.large_free.len(),
                self.large_blocks
            ));
        }
        // per-slab conservation
        let live_by_slab = self.live_offsets_by_slab();
        let mut free_by_slab: BTreeMap<usize, usize> = BTreeMap::new();
        for (j, c) in self.classes.iter().enumerate() {
            for &o in &c.free {
                let s = self.slab_of(o);
                match self.slabs[s].state {
                    SlabState::Class { idx, .. } if idx == j => {}
                    st => return Err(format!("class {j} free list holds offset {o} of slab {s} in {st:?}")),
                }
                *free_by_slab.entry(s).or_default() += 1;
            }
        }
        for (s, slab) in self.slabs.iter().enumerate() {
            let live = live_by_slab.get(&s).map_or(0, Vec::len);
            let free = free_by_slab.get(&s).copied().unwrap_or(0);
            if live != slab.live {
                return Err(format!("slab {s}: counter {} vs {live} live blocks", slab.live));
            }
            match slab.state {
                SlabState::Class { block_bytes, .. } => {
                    if live + free != self.blocks_per_slab(block_bytes) {
                        return Err(format!("slab {s}: {live} live + {free} free != carved blocks"));
                    }
                }
                SlabState::Draining { .. } => {
                    if free != 0 || live == 0 {
                        return Err(format!("draining slab {s}: {live} live, {free} free"));
                    }
                }
                SlabState::Unassigned => return Err(format!("slab {s} left unassigned")),
            }
        }
        for (j, c) in self.classes.iter().enumerate() {
            let n = self
                .slabs
                .iter()
                .filter(|s| matches!(s.state, SlabState::Class { idx, .. } if idx == j))
                .count();
            if n != c.slabs {
                return Err(format!("class {j}: slab counter {} vs {n}", c.slabs));
            }
        }
        let useful: u64 = self.live.values().map(|b| b.tokens_written as u64 * self.bytes_per_token).sum();
        let reserved: u64 = self.live.values().map(|b| b.size).sum();
        if useful != self.useful || reserved != self.reserved {
            return Err("byte counters out of sync".into());
        }
        Ok(())
    }
}

/// One slab per class, then the remainder by largest remainder of `shares`.
fn slab_targets(n_slabs: usize, classes: usize, shares: &[f64]) -> Vec<usize> {
    let mut targets = vec![1usize.min(n_slabs / classes.max(1)); classes];
    let rest = n_slabs.saturating_sub(targets.iter().sum());
    let total: f64 = shares.iter().take(classes).sum();
    let weights: Vec<f64> = if shares.len() == classes && total > 0.0 {
        shares.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / classes as f64; classes]
    };
    let exact: Vec<f64> = weights.iter().map(|w| w * rest as f64).collect();
    let mut given = 0;
    for (t, e) in targets.iter_mut().zip(&exact) {
        *t += e.floor() as usize;
        given += e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().take(rest - given) {
        targets[j] += 1;
    }
    targets
}

/// Exact-size first-fit pool: the oracle reference, which reserves each
/// request's true footprint rounded up to the alignment unit.
#[derive(Debug, Clone)]
pub struct ExactPool {
    capacity: u64,
    bytes_per_token: u64,
    align: u32,
    free: BTreeMap<u64, u64>,
    live: BTreeMap<u64, Block>,
    useful: u64,
    reserved: u64,
}

impl ExactPool {
    pub fn new(capacity: u64, bytes_per_token: u64, align: u32) -> Self {
        let align_bytes = align as u64 * bytes_per_token;
        let usable = capacity / align_bytes * align_bytes;
        let mut free = BTreeMap::new();
        if usable > 0 {
            free.insert(0, usable);
        }
        Self {
            capacity,
            bytes_per_token,
            align,
            free,
            live: BTreeMap::new(),
            useful: 0,
            reserved: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn useful_bytes(&self) -> u64 {
        self.useful
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.reserved
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.values().sum()
    }

    pub fn block(&self, id: u64) -> Option<&Block> {
        self.live.get(&id)
    }

    pub fn live_blocks(&self) -> impl Iterator<Item = &Block> {
        self.live.values()
    }

    pub fn reserve(&mut self, id: u64, tag: BucketTag, tokens: u32, prompt_len: u32) -> Result<Reservation, PoolError> {
        if self.live.contains_key(&id) {
            return Err(PoolError::AlreadyLive(id));
        }
        let size = tokens.max(prompt_len).max(1).div_ceil(self.align) as u64 * self.align as u64 * self.bytes_per_token;
        let Some((&off, &len)) = self.free.iter().find(|(_, &len)| len >= size) else {
            return Err(PoolError::OutOfMemory { id, tag });
        };
        self.free.remove(&off);
        if len > size {
            self.free.insert(off + size, len - size);
        }
        let block = Block {
            offset: off,
            size,
            owner: id,
            tag,
            tokens_written: prompt_len,
            region: Region::Exact,
        };
        self.useful += prompt_len as u64 * self.bytes_per_token;
        self.reserved += size;
        self.live.insert(id, block.clone());
        Ok(Reservation { block, fallback: false })
    }

    pub fn append_token(&mut self, id: u64) -> Result<u32, PoolError> {
        let bpt = self.bytes_per_token;
        let b = self.live.get_mut(&id).ok_or(PoolError::UnknownRequest(id))?;
        if (b.tokens_written as u64 + 1) * bpt > b.size {
            return Err(PoolError::BlockFull(id));
        }
        b.tokens_written += 1;
        self.useful += bpt;
        Ok(b.tokens_written)
    }

    pub fn release(&mut self, id: u64) -> Result<Block, PoolError> {
        let block = self.live.remove(&id).ok_or(PoolError::UnknownRequest(id))?;
        self.useful -= block.tokens_written as u64 * self.bytes_per_token;
        self.reserved -= block.size;
        let (mut off, mut len) = (block.offset, block.size);
        if let Some((&next_off, &next_len)) = self.free.range(off + len..).next() {
            if next_off == off + len {
                self.free.remove(&next_off);
                len += next_len;
            }
        }
        if let Some((&prev_off, &prev_len)) = self.free.range(..off).next_back() {
            if prev_off + prev_len == off {
                self.free.remove(&prev_off);
                off = prev_off;
                len += prev_len;
            }
        }
        self.free.insert(off, len);
        Ok(block)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let mut ranges: Vec<(u64, u64)> = self.live.values().map(|b| (b.offset, b.end())).collect();
        ranges.extend(self.free.iter().map(|(&o, &l)| (o, o + l)));
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(format!("overlap {:?} / {:?}", w[0], w[1]));
            }
        }
        let total: u64 = ranges.iter().map(|(a, b)| b - a).sum();
        let align_bytes = self.align as u64 * self.bytes_per_token;
        if total != self.capacity / align_bytes * align_bytes {
            return Err(format!("exact pool conservation: {total} bytes accounted"));
        }
        Ok(())
    }
}
