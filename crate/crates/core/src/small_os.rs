//! Bounded-capacity oblivious store.
//!
//! One instance holds up to `cap` items addressed by opaque u64 keys. The
//! server-side state per epoch is a single shuffled array holding three
//! entity kinds side by side under one keyed permutation: the nodes of a
//! static search tree over the items, the item slots themselves, and a
//! pool of one-shot dummy slots. A per-level append cache absorbs all
//! mutations between rebuilds; insertions live there as companion records
//! and consumptions as tombstone records, newest ordinal wins.
//!
//! Every access performs the same ritual regardless of the operation: walk
//! the `d` tree levels top down, reading the level cache and exactly one
//! array slot per level, then read exactly one item-or-dummy slot, then
//! append one two-slot record per level bottom up. A slot that is already
//! covered by the cache is replaced by the next unused dummy slot, so no
//! shuffled slot is ever read twice within an epoch.
//!
//! Rebuilds stage the previous items, the cached companions, and any
//! inflow arrays into one scratch region with a fixed copy pattern, then
//! sort, deduplicate, and re-sort obliviously before writing the fresh
//! array under a fresh permutation. Every transfer in that pipeline is a
//! function of public sizes alone. The item count of the new array is the
//! public `envelope` supplied by the caller; if the true live count
//! exceeds it the store demands a restart before touching the old epoch.

use crate::error::OsError;
use crate::params::{Params, SmallOsParams};
use crate::prims::oblivious_sort;
use crate::rng::{subkey, SlotPrp};
use crate::server::{Marker, Region, RegionLabel, SimServer};
use std::collections::HashMap;

pub const KIND_PAD: u64 = 0;
pub const KIND_INTERNAL: u64 = 1;
pub const KIND_LEAF: u64 = 2;
pub const KIND_ITEM: u64 = 3;
pub const KIND_DUMMY: u64 = 4;

pub const CLASS_REAL: u64 = 0;
pub const CLASS_ORIG: u64 = 1;

const DEAD_BIT: u64 = 1 << 5;

pub fn meta_kind(w: u64) -> u64 {
    w & 7
}

pub fn meta_class(w: u64) -> u64 {
    (w >> 3) & 3
}

pub fn meta_dead(w: u64) -> bool {
    w & DEAD_BIT != 0
}

pub fn meta_index(w: u64) -> usize {
    (w >> 32) as usize
}

pub fn make_meta(kind: u64, class: u64, level: usize, index: usize) -> u64 {
    kind | (class << 3) | ((level as u64) << 6) | ((index as u64) << 32)
}

pub fn mark_meta_dead(w: u64) -> u64 {
    w | DEAD_BIT
}

// Leaf position states, two bits per position.
const ST_ARRAY: u64 = 1;
const ST_DEAD: u64 = 3;

fn pos_state(state: u64, p: usize) -> u64 {
    (state >> (2 * p)) & 3
}

fn set_pos_state(state: u64, p: usize, v: u64) -> u64 {
    (state & !(3 << (2 * p))) | (v << (2 * p))
}

struct Geometry {
    s: Vec<usize>,
    node_base: Vec<usize>,
    item_base: usize,
    dummy_base: usize,
    total: usize,
}

fn geometry(bprime: usize, d: usize, e_slots: usize, budget: usize) -> Geometry {
    let q = bprime - 1;
    let mut s = vec![0usize; d];
    s[d - 1] = e_slots.div_ceil(q).max(1);
    for j in (0..d - 1).rev() {
        s[j] = s[j + 1].div_ceil(bprime);
    }
    assert_eq!(s[0], 1, "tree depth too small for this capacity");
    let mut node_base = vec![0usize; d];
    let mut at = 0;
    for j in 0..d {
        node_base[j] = at;
        at += s[j];
    }
    let item_base = at;
    let dummy_base = item_base + e_slots;
    let total = dummy_base + (d + 1) * budget;
    Geometry { s, node_base, item_base, dummy_base, total }
}

/// Streams sorted item keys and emits the search-tree node slots as their
/// subtrees complete. Rank `r` belongs to leaf `r / (b'-1)`.
struct TreeBuilder {
    bprime: usize,
    slot_words: usize,
    s: Vec<usize>,
    node_base: Vec<usize>,
    leaf_keys: Vec<u64>,
    emitted: Vec<usize>,
    child_max: Vec<Vec<u64>>,
}

impl TreeBuilder {
    fn new(geo: &Geometry, bprime: usize, slot_words: usize) -> TreeBuilder {
        let d = geo.s.len();
        TreeBuilder {
            bprime,
            slot_words,
            s: geo.s.clone(),
            node_base: geo.node_base.clone(),
            leaf_keys: Vec::with_capacity(bprime - 1),
            emitted: vec![0; d],
            child_max: vec![Vec::with_capacity(bprime); d],
        }
    }

    fn push_rank(&mut self, key: Option<u64>, out: &mut Vec<(usize, Vec<u64>)>) {
        self.leaf_keys.push(key.unwrap_or(u64::MAX));
        if self.leaf_keys.len() == self.bprime - 1 {
            self.emit_leaf(out);
        }
    }

    fn emit_leaf(&mut self, out: &mut Vec<(usize, Vec<u64>)>) {
        let d = self.s.len();
        let idx = self.emitted[d - 1];
        let mut slot = vec![0u64; self.slot_words];
        slot[0] = make_meta(KIND_LEAF, 0, d, idx);
        let mut state = 0u64;
        let mut maxk = u64::MAX;
        for (p, &k) in self.leaf_keys.iter().enumerate() {
            slot[1 + p] = k;
            if k != u64::MAX {
                state = set_pos_state(state, p, ST_ARRAY);
                maxk = k;
            }
        }
        for p in self.leaf_keys.len()..self.bprime - 1 {
            slot[1 + p] = u64::MAX;
        }
        slot[2 * self.bprime - 1] = state;
        out.push((self.node_base[d - 1] + idx, slot));
        self.emitted[d - 1] += 1;
        self.leaf_keys.clear();
        self.bubble(d - 1, maxk, out);
    }

    fn bubble(&mut self, child_level: usize, maxk: u64, out: &mut Vec<(usize, Vec<u64>)>) {
        if child_level == 0 {
            return;
        }
        let j = child_level - 1;
        self.child_max[j].push(maxk);
        let idx = self.emitted[j];
        let child_count = self.bprime.min(self.s[child_level] - idx * self.bprime);
        if self.child_max[j].len() < child_count {
            return;
        }
        let mut slot = vec![0u64; self.slot_words];
        slot[0] = make_meta(KIND_INTERNAL, 0, j + 1, idx);
        for t in 0..self.bprime - 1 {
            slot[1 + t] = if t + 1 < child_count { self.child_max[j][t] } else { u64::MAX };
        }
        let up = self.child_max[j][child_count - 1];
        out.push((self.node_base[j] + idx, slot));
        self.emitted[j] += 1;
        self.child_max[j].clear();
        self.bubble(j, up, out);
    }

    fn finish(&mut self, out: &mut Vec<(usize, Vec<u64>)>) {
        let d = self.s.len();
        while self.emitted[d - 1] < self.s[d - 1] {
            while self.leaf_keys.len() < self.bprime - 1 {
                self.leaf_keys.push(u64::MAX);
            }
            self.emit_leaf(out);
        }
        for j in 0..d {
            assert_eq!(self.emitted[j], self.s[j], "node stream out of balance");
        }
    }
}

/// Writes fixed-width slots into a region in block-aligned bursts.
pub(crate) struct SeqWriter {
    region: Region,
    slot_words: usize,
    per_block: usize,
    buf: Vec<u64>,
    written: usize,
}

impl SeqWriter {
    pub(crate) fn new(region: Region, slot_words: usize, b: usize) -> SeqWriter {
        let per_block = (b / slot_words).max(1);
        SeqWriter {
            region,
            slot_words,
            per_block,
            buf: Vec::with_capacity(per_block * slot_words),
            written: 0,
        }
    }

    pub(crate) fn push(&mut self, server: &mut SimServer, slot: &[u64]) -> Result<(), OsError> {
        self.buf.extend_from_slice(slot);
        if self.buf.len() == self.per_block * self.slot_words {
            self.flush(server)?;
        }
        Ok(())
    }

    pub(crate) fn flush(&mut self, server: &mut SimServer) -> Result<(), OsError> {
        if !self.buf.is_empty() {
            server.write_block(self.region.addr(self.written * self.slot_words), &self.buf)?;
            self.written += self.buf.len() / self.slot_words;
            self.buf.clear();
        }
        Ok(())
    }
}

/// Reads fixed-width slots from a region in block-aligned bursts.
pub(crate) struct SeqReader {
    region: Region,
    slot_words: usize,
    per_block: usize,
    total: usize,
    next: usize,
    buf: Vec<u64>,
    buf_at: usize,
}

impl SeqReader {
    pub(crate) fn new(region: Region, slot_words: usize, total: usize, b: usize) -> SeqReader {
        let per_block = (b / slot_words).max(1);
        SeqReader { region, slot_words, per_block, total, next: 0, buf: Vec::new(), buf_at: 0 }
    }

    pub(crate) fn next_slot(&mut self, server: &mut SimServer) -> Result<Option<&[u64]>, OsError> {
        if self.buf_at >= self.buf.len() {
            if self.next >= self.total {
                return Ok(None);
            }
            let k = self.per_block.min(self.total - self.next);
            self.buf =
                server.read_block(self.region.addr(self.next * self.slot_words), k * self.slot_words)?;
            self.buf_at = 0;
            self.next += k;
        }
        let at = self.buf_at;
        self.buf_at += self.slot_words;
        Ok(Some(&self.buf[at..at + self.slot_words]))
    }
}

/// One operation against the store. All three shapes produce identical
/// traffic. Key `u64::MAX` is reserved for padding.
pub enum Op<'a> {
    /// Consuming lookup. A found item is returned and removed.
    Get { key: u64 },
    /// Insert under a key, replacing any live item with the same key.
    Put { key: u64, payload: &'a [u64], orig_dummy: bool },
    /// Full ritual with no effect, for cover traffic.
    Touch { key: u64 },
}

impl Op<'_> {
    fn key(&self) -> u64 {
        match self {
            Op::Get { key } | Op::Touch { key } => *key,
            Op::Put { key, .. } => *key,
        }
    }
}

pub struct SmallOs {
    instance: u64,
    seed: u128,
    bprime: usize,
    m: usize,
    cap: usize,
    d: usize,
    budget: usize,
    payload_words: usize,
    slot_words: usize,
    cache_prefix: bool,
    puts_allowed: bool,
    cache_bound: usize,
    /// Test hook: caps how many insertions one epoch absorbs, below the
    /// natural budget, to provoke restarts deterministically.
    pub put_cap_override: Option<usize>,
    epoch: u64,
    prp: SlotPrp,
    e_slots: usize,
    geo: Geometry,
    array: Region,
    caches: Vec<Region>,
    a_count: usize,
    puts: usize,
    dummy_cursor: usize,
    live: usize,
}

struct CacheScan {
    node_copy: Option<Vec<u64>>,
    companion: Option<Vec<u64>>,
}

impl SmallOs {
    pub fn new(
        server: &mut SimServer,
        seed: u128,
        instance: u64,
        p: &Params,
        sp: &SmallOsParams,
        payload_words: usize,
        cache_prefix: bool,
        puts_allowed: bool,
    ) -> Result<SmallOs, OsError> {
        let slot_words = (2 * p.b_prime).max(2 + payload_words);
        if 2 * slot_words > p.b {
            return Err(OsError::ElementTooLarge { elem_words: 2 * slot_words, b: p.b });
        }
        let mut os = SmallOs {
            instance,
            seed,
            bprime: p.b_prime,
            m: p.m,
            cap: sp.cap,
            d: sp.d,
            budget: sp.rebuild_period,
            payload_words,
            slot_words,
            cache_prefix,
            puts_allowed,
            cache_bound: sp.rebuild_period,
            put_cap_override: None,
            epoch: 0,
            prp: SlotPrp::new(subkey(seed, "pi", instance, 0), 1),
            e_slots: 0,
            geo: geometry(p.b_prime, sp.d, 0, sp.rebuild_period),
            array: Region { id: 0, base: 0, words: 0 },
            caches: Vec::new(),
            a_count: 0,
            puts: 0,
            dummy_cursor: 0,
            live: 0,
        };
        let (array, caches) = os.build_epoch(server, 0, None)?;
        os.array = array;
        os.caches = caches;
        Ok(os)
    }

    pub fn live_count(&self) -> usize {
        self.live
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn access_count(&self) -> usize {
        self.a_count
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn put_count(&self) -> usize {
        self.puts
    }

    /// Caps how many cache records the next accesses read. The value must
    /// be a public quantity that upper-bounds the current access count;
    /// callers with a global clock pass the ops since this store's last
    /// rebuild. Ignored by stores reading exact public prefixes.
    pub fn set_cache_bound(&mut self, recs: usize) {
        self.cache_bound = recs.min(self.budget);
    }

    pub fn put_budget(&self) -> usize {
        if self.puts_allowed { self.put_cap() } else { 0 }
    }

    pub fn envelope(&self) -> usize {
        self.e_slots
    }

    pub fn array_region(&self) -> Region {
        self.array
    }

    pub fn slot_len(&self) -> usize {
        self.slot_words
    }

    fn put_cap(&self) -> usize {
        self.put_cap_override.map_or(self.budget, |c| c.min(self.budget))
    }

    fn read_array_slot(&self, server: &mut SimServer, logical: usize) -> Result<Vec<u64>, OsError> {
        let slot = self.prp.apply(logical as u64) as usize;
        Ok(server.read_block(self.array.addr(slot * self.slot_words), self.slot_words)?)
    }

    fn read_next_dummy(&mut self, server: &mut SimServer) -> Result<(), OsError> {
        let logical = self.geo.dummy_base + self.dummy_cursor;
        self.dummy_cursor += 1;
        debug_assert!(self.dummy_cursor <= (self.d + 1) * self.budget);
        self.read_array_slot(server, logical)?;
        Ok(())
    }

    fn cache_rec_words(&self, level0: usize) -> usize {
        if level0 == self.d - 1 { 2 * self.slot_words } else { self.slot_words }
    }

    /// Reads a level cache in block chunks and extracts the newest record
    /// for the wanted node plus, on the leaf level, the newest companion
    /// under the wanted key (tombstones included). The read length is the
    /// exact public prefix or the caller-set public bound, never the data-
    /// dependent record count.
    fn scan_cache(
        &self,
        server: &mut SimServer,
        level0: usize,
        node_idx: usize,
        key: u64,
    ) -> Result<CacheScan, OsError> {
        let region = self.caches[level0];
        let rec_words = self.cache_rec_words(level0);
        let limit = if self.cache_prefix { self.a_count } else { self.cache_bound };
        assert!(limit >= self.a_count, "cache bound fell behind the access count");
        let read_words = limit * rec_words;
        let b = server.block_words();
        let mut data = vec![0u64; read_words];
        let mut at = 0usize;
        while at < read_words {
            let k = b.min(read_words - at);
            server.read_into(region.addr(at), &mut data[at..at + k])?;
            at += k;
        }
        let want_companion = level0 == self.d - 1;
        let mut scan = CacheScan { node_copy: None, companion: None };
        for r in 0..self.a_count {
            let rec = &data[r * rec_words..(r + 1) * rec_words];
            let a = &rec[..self.slot_words];
            let kind = meta_kind(a[0]);
            if (kind == KIND_LEAF || kind == KIND_INTERNAL) && meta_index(a[0]) == node_idx {
                scan.node_copy = Some(a.to_vec());
            }
            if want_companion {
                let cb = &rec[self.slot_words..];
                if meta_kind(cb[0]) == KIND_ITEM && cb[1] == key {
                    scan.companion = Some(cb.to_vec());
                }
            }
        }
        Ok(scan)
    }

    fn pick_child(&self, content: &[u64], key: u64, level0: usize, node_idx: usize) -> usize {
        let child_count = self.bprime.min(self.geo.s[level0 + 1] - node_idx * self.bprime);
        for t in 0..child_count.saturating_sub(1) {
            if key <= content[1 + t] {
                return t;
            }
        }
        child_count - 1
    }

    pub fn access(&mut self, server: &mut SimServer, op: Op<'_>) -> Result<Option<Vec<u64>>, OsError> {
        if self.a_count >= self.budget {
            return Err(OsError::RestartRequired { context: "access budget exhausted without a rebuild" });
        }
        if matches!(op, Op::Put { .. }) {
            assert!(self.puts_allowed, "this store was configured without insertions");
            if self.puts >= self.put_cap() {
                return Err(OsError::RestartRequired {
                    context: "insertion budget exhausted for this epoch",
                });
            }
        }
        let key = op.key();
        let q = self.bprime - 1;

        let mut node_idx = 0usize;
        let mut path: Vec<Vec<u64>> = Vec::with_capacity(self.d);
        let mut companion_hit: Option<Vec<u64>> = None;
        for j0 in 0..self.d {
            let scan = self.scan_cache(server, j0, node_idx, key)?;
            let content = match scan.node_copy {
                Some(c) => {
                    self.read_next_dummy(server)?;
                    c
                }
                None => self.read_array_slot(server, self.geo.node_base[j0] + node_idx)?,
            };
            if j0 == self.d - 1 {
                companion_hit = scan.companion;
            } else {
                node_idx = node_idx * self.bprime + self.pick_child(&content, key, j0, node_idx);
            }
            path.push(content);
        }

        let leaf_idx = node_idx;
        let mut leaf = path[self.d - 1].clone();
        let state_at = 2 * self.bprime - 1;
        let mut state = leaf[state_at];

        let mut array_pos = None;
        for p in 0..q {
            if leaf[1 + p] == key && pos_state(state, p) == ST_ARRAY {
                array_pos = Some(p);
            }
        }
        let cached_live = companion_hit.as_ref().is_some_and(|c| !meta_dead(c[0]));
        debug_assert!(
            !(cached_live && array_pos.is_some()),
            "a key may not be live in the array and the cache at once"
        );

        let mut target_rank: Option<usize> = None;
        let mut companion_out: Vec<u64> = vec![0u64; self.slot_words];
        let mut result: Option<Vec<u64>> = None;
        match op {
            Op::Get { .. } => {
                if cached_live {
                    let c = companion_hit.as_ref().unwrap();
                    result = Some(c[2..2 + self.payload_words].to_vec());
                    companion_out[0] = mark_meta_dead(make_meta(KIND_ITEM, CLASS_REAL, 0, self.a_count));
                    companion_out[1] = key;
                    self.live -= 1;
                } else if let Some(p) = array_pos {
                    state = set_pos_state(state, p, ST_DEAD);
                    target_rank = Some(leaf_idx * q + p);
                    self.live -= 1;
                }
            }
            Op::Put { key, payload, orig_dummy } => {
                assert_eq!(payload.len(), self.payload_words, "payload width mismatch");
                if let Some(p) = array_pos {
                    state = set_pos_state(state, p, ST_DEAD);
                    self.live -= 1;
                }
                if cached_live {
                    self.live -= 1;
                }
                let class = if orig_dummy { CLASS_ORIG } else { CLASS_REAL };
                companion_out[0] = make_meta(KIND_ITEM, class, 0, self.a_count);
                companion_out[1] = key;
                companion_out[2..2 + self.payload_words].copy_from_slice(payload);
                self.live += 1;
                self.puts += 1;
            }
            Op::Touch { .. } => {}
        }
        leaf[state_at] = state;

        match target_rank {
            Some(rank) => {
                let slot = self.read_array_slot(server, self.geo.item_base + rank)?;
                debug_assert_eq!(meta_kind(slot[0]), KIND_ITEM);
                debug_assert_eq!(slot[1], key);
                result = Some(slot[2..2 + self.payload_words].to_vec());
            }
            None => self.read_next_dummy(server)?,
        }

        for j0 in (0..self.d).rev() {
            let rec_words = self.cache_rec_words(j0);
            let mut rec = Vec::with_capacity(rec_words);
            if j0 == self.d - 1 {
                rec.extend_from_slice(&leaf);
                rec.extend_from_slice(&companion_out);
            } else {
                rec.extend_from_slice(&path[j0]);
            }
            server.write_block(self.caches[j0].addr(self.a_count * rec_words), &rec)?;
        }
        self.a_count += 1;
        Ok(result)
    }

    /// Reads the leaf-level cache and distills the epoch's change set:
    /// ranks of array items that died, the newest companion ordinal per
    /// key, and, for stores that take insertions, a scratch region holding
    /// all `budget` companion slots in record order.
    fn gather_cache(
        &self,
        server: &mut SimServer,
    ) -> Result<(Vec<usize>, HashMap<u64, usize>, Option<Region>), OsError> {
        let q = self.bprime - 1;
        let rec_words = 2 * self.slot_words;
        let region = self.caches[self.d - 1];
        let b = server.block_words();
        let mut data = vec![0u64; region.words];
        let mut at = 0usize;
        while at < region.words {
            let k = b.min(region.words - at);
            server.read_into(region.addr(at), &mut data[at..at + k])?;
            at += k;
        }

        let mut newest_leaf: HashMap<usize, Vec<u64>> = HashMap::new();
        let mut newest: HashMap<u64, usize> = HashMap::new();
        let scratch = if self.puts_allowed {
            Some(server.alloc(self.budget * self.slot_words, RegionLabel::Scratch, self.instance))
        } else {
            None
        };
        let mut w = scratch.map(|s| SeqWriter::new(s, self.slot_words, b));
        let pad = vec![0u64; self.slot_words];
        for r in 0..self.budget {
            let rec = &data[r * rec_words..(r + 1) * rec_words];
            let (a, cb) = (&rec[..self.slot_words], &rec[self.slot_words..]);
            if r < self.a_count {
                if meta_kind(a[0]) == KIND_LEAF {
                    newest_leaf.insert(meta_index(a[0]), a.to_vec());
                }
                if meta_kind(cb[0]) == KIND_ITEM {
                    newest.insert(cb[1], meta_index(cb[0]));
                }
                if let Some(w) = w.as_mut() {
                    w.push(server, cb)?;
                }
            } else if let Some(w) = w.as_mut() {
                w.push(server, &pad)?;
            }
        }
        if let Some(w) = w.as_mut() {
            w.flush(server)?;
        }

        let mut dead_ranks = Vec::new();
        for (leaf_idx, slot) in &newest_leaf {
            let state = slot[2 * self.bprime - 1];
            for p in 0..q {
                if pos_state(state, p) == ST_DEAD {
                    dead_ranks.push(leaf_idx * q + p);
                }
            }
        }
        dead_ranks.sort_unstable();

        Ok((dead_ranks, newest, scratch))
    }

    /// Builds a fresh epoch's array and caches. `source`, when present, is
    /// a region whose first `envelope` slots hold live items in ascending
    /// key order followed by pads. On success the store state points at
    /// the new epoch; the caller frees the old regions.
    fn build_epoch(
        &mut self,
        server: &mut SimServer,
        envelope: usize,
        source: Option<Region>,
    ) -> Result<(Region, Vec<Region>), OsError> {
        let new_epoch = self.epoch + 1;
        let geo = geometry(self.bprime, self.d, envelope, self.budget);
        let prp = SlotPrp::new(subkey(self.seed, "pi", self.instance, new_epoch), geo.total as u64);
        let array = server.alloc(geo.total * self.slot_words, RegionLabel::ShuffledArray, self.instance);
        let slot_words = self.slot_words;

        let mut builder = TreeBuilder::new(&geo, self.bprime, slot_words);
        let mut nodes_out: Vec<(usize, Vec<u64>)> = Vec::new();
        let mut live = 0usize;
        let write_slot = |server: &mut SimServer, logical: usize, content: &[u64]| -> Result<(), OsError> {
            let slot = prp.apply(logical as u64) as usize;
            server.write_block(array.addr(slot * slot_words), content)?;
            Ok(())
        };

        let mut reader = source.map(|r| {
            let staged = (r.words / slot_words).min(envelope);
            SeqReader::new(r, slot_words, staged, server.block_words())
        });
        for rank in 0..envelope {
            let staged = match reader.as_mut() {
                Some(rd) => rd.next_slot(server)?.map(|s| s.to_vec()),
                None => None,
            };
            let real = staged.filter(|s| meta_kind(s[0]) == KIND_ITEM && !meta_dead(s[0]));
            match real {
                Some(mut slot) => {
                    let key = slot[1];
                    slot[0] = make_meta(KIND_ITEM, meta_class(slot[0]), 0, rank);
                    write_slot(server, geo.item_base + rank, &slot)?;
                    builder.push_rank(Some(key), &mut nodes_out);
                    live += 1;
                }
                None => {
                    let mut slot = vec![0u64; slot_words];
                    slot[0] = make_meta(KIND_PAD, 0, 0, rank);
                    slot[1] = u64::MAX;
                    write_slot(server, geo.item_base + rank, &slot)?;
                    builder.push_rank(None, &mut nodes_out);
                }
            }
            for (logical, content) in nodes_out.drain(..) {
                write_slot(server, logical, &content)?;
            }
        }
        builder.finish(&mut nodes_out);
        for (logical, content) in nodes_out.drain(..) {
            write_slot(server, logical, &content)?;
        }
        for x in 0..(self.d + 1) * self.budget {
            let mut slot = vec![0u64; slot_words];
            slot[0] = make_meta(KIND_DUMMY, 0, 0, x);
            write_slot(server, geo.dummy_base + x, &slot)?;
        }

        let caches: Vec<Region> = (0..self.d)
            .map(|j| {
                server.alloc(self.cache_rec_words(j) * self.budget, RegionLabel::Cache, self.instance)
            })
            .collect();

        self.epoch = new_epoch;
        self.prp = prp;
        self.e_slots = envelope;
        self.geo = geo;
        self.a_count = 0;
        self.puts = 0;
        self.dummy_cursor = 0;
        self.live = live;
        Ok((array, caches))
    }

    /// Stages old items, cached companions, and inflows into one scratch
    /// region with a fixed transfer pattern, then sorts by key with a
    /// recency-and-priority tiebreak, kills duplicates and dead entries in
    /// a streaming pass, and compacts survivors to the front with a second
    /// sort. Returns the staged region and the live count.
    fn stage_candidates(
        &self,
        server: &mut SimServer,
        inflows: &[Region],
    ) -> Result<(Region, usize), OsError> {
        let b = server.block_words();
        let sw = self.slot_words;
        let (dead_ranks, _, companions) = self.gather_cache(server)?;

        let inflow_slots: usize = inflows.iter().map(|r| r.words / sw).sum();
        let companion_slots = if companions.is_some() { self.budget } else { 0 };
        let c_slots = (companion_slots + inflow_slots + self.e_slots).max(1);
        let cand = server.alloc(c_slots * sw, RegionLabel::Scratch, self.instance);
        let mut w = SeqWriter::new(cand, sw, b);

        // Copy order fixes the dedup priority: among equal keys the entry
        // with the smallest staged ordinal wins. Companions are staged
        // newest first, then inflows in order, then the old array items.
        let stage = |slot: &[u64], g: usize, force_dead: bool| {
            let mut s = slot.to_vec();
            if meta_kind(s[0]) == KIND_ITEM {
                s[0] = make_meta(KIND_ITEM, meta_class(s[0]), 0, g);
                if force_dead || meta_dead(slot[0]) {
                    s[0] = mark_meta_dead(s[0]);
                }
            } else {
                s = vec![0u64; sw];
                s[1] = u64::MAX;
            }
            s
        };

        if let Some(comp) = companions {
            let mut r = 0usize;
            let mut rd = SeqReader::new(comp, sw, self.budget, b);
            while let Some(slot) = rd.next_slot(server)? {
                let staged = stage(slot, self.budget - 1 - r, false);
                w.push(server, &staged)?;
                r += 1;
            }
        }
        let mut g = self.budget;
        for inflow in inflows {
            let mut rd = SeqReader::new(*inflow, sw, inflow.words / sw, b);
            while let Some(slot) = rd.next_slot(server)? {
                let staged = stage(slot, g, false);
                w.push(server, &staged)?;
                g += 1;
            }
        }
        for rank in 0..self.e_slots {
            let slot = self.read_array_slot(server, self.geo.item_base + rank)?;
            let killed = dead_ranks.binary_search(&rank).is_ok();
            let staged = stage(&slot, g, killed);
            w.push(server, &staged)?;
            g += 1;
        }
        w.flush(server)?;
        if let Some(comp) = companions {
            server.free(comp)?;
        }

        // Dead entries must sort inside their key run so that a leading
        // tombstone shadows every older copy of the key.
        oblivious_sort(server, cand, c_slots, sw, self.m, |s| {
            if meta_kind(s[0]) == KIND_ITEM {
                (s[1], meta_index(s[0]) as u64)
            } else {
                (u64::MAX, u64::MAX)
            }
        })?;

        let mut live = 0usize;
        let mut last_key: Option<u64> = None;
        let mut rd = SeqReader::new(cand, sw, c_slots, b);
        let mut wr = SeqWriter::new(cand, sw, b);
        for _ in 0..c_slots {
            let slot = rd.next_slot(server)?.expect("staged region shorter than its slot count");
            let mut s = slot.to_vec();
            if meta_kind(s[0]) == KIND_ITEM {
                let duplicate = last_key == Some(s[1]);
                last_key = Some(s[1]);
                if duplicate || meta_dead(s[0]) {
                    s = vec![0u64; sw];
                    s[1] = u64::MAX;
                } else {
                    live += 1;
                }
            }
            wr.push(server, &s)?;
        }
        wr.flush(server)?;

        oblivious_sort(server, cand, c_slots, sw, self.m, |s| {
            if meta_kind(s[0]) == KIND_ITEM { (s[1], 0) } else { (u64::MAX, u64::MAX) }
        })?;

        Ok((cand, live))
    }

    /// Merges the current epoch into a fresh one. `inflows` are arrays of
    /// slot-shaped items with dead entries and pads tolerated anywhere;
    /// they are consumed and freed. `envelope` is the public item-slot
    /// count of the new epoch; slots beyond the staged total become pads.
    pub fn rebuild(
        &mut self,
        server: &mut SimServer,
        inflows: &[Region],
        envelope: usize,
    ) -> Result<(), OsError> {
        if envelope > self.cap {
            return Err(OsError::OverCapacity { count: envelope, cap: self.cap });
        }
        server.mark(Marker::RebuildStart { owner: self.instance, epoch: self.epoch });
        let (cand, live) = self.stage_candidates(server, inflows)?;
        if live > envelope {
            server.free(cand)?;
            return Err(OsError::RestartRequired { context: "live items exceed the public envelope" });
        }

        let old_array = self.array;
        let old_caches = std::mem::take(&mut self.caches);
        match self.build_epoch(server, envelope, Some(cand)) {
            Ok((array, caches)) => {
                self.array = array;
                self.caches = caches;
                debug_assert_eq!(self.live, live);
                server.free(old_array)?;
                for c in old_caches {
                    server.free(c)?;
                }
                server.free(cand)?;
                for r in inflows {
                    server.free(*r)?;
                }
                server.mark(Marker::RebuildDone { owner: self.instance, epoch: self.epoch });
                Ok(())
            }
            Err(e) => {
                self.caches = old_caches;
                let _ = server.free(cand);
                Err(e)
            }
        }
    }

    /// Exports the epoch content for a flush: every item slot plus every
    /// cached companion, with death applied to the item metadata, in one
    /// scratch region. The store itself is rebuilt empty with the given
    /// envelope. Returns the scratch region and its slot count.
    pub fn flush_export(
        &mut self,
        server: &mut SimServer,
        envelope_after: usize,
    ) -> Result<(Region, usize), OsError> {
        server.mark(Marker::RebuildStart { owner: self.instance, epoch: self.epoch });
        let (dead_ranks, newest, cache_scratch) = self.gather_cache(server)?;

        let b = server.block_words();
        let companion_slots = if cache_scratch.is_some() { self.budget } else { 0 };
        let export_slots = self.e_slots + companion_slots;
        let export = server.alloc(
            (export_slots * self.slot_words).max(self.slot_words),
            RegionLabel::Scratch,
            self.instance,
        );
        let mut w = SeqWriter::new(export, self.slot_words, b);

        for rank in 0..self.e_slots {
            let slot = self.read_array_slot(server, self.geo.item_base + rank)?;
            let mut s = slot;
            if meta_kind(s[0]) == KIND_ITEM && dead_ranks.binary_search(&rank).is_ok() {
                s[0] = mark_meta_dead(s[0]);
            }
            w.push(server, &s)?;
        }
        if let Some(scratch) = cache_scratch {
            let mut cached = SeqReader::new(scratch, self.slot_words, self.budget, b);
            while let Some(slot) = cached.next_slot(server)? {
                let mut s = slot.to_vec();
                if meta_kind(s[0]) == KIND_ITEM
                    && newest.get(&s[1]).is_some_and(|&ord| ord != meta_index(s[0]))
                {
                    s[0] = mark_meta_dead(s[0]);
                }
                w.push(server, &s)?;
            }
            server.free(scratch)?;
        }
        w.flush(server)?;

        let old_array = self.array;
        let old_caches = std::mem::take(&mut self.caches);
        let (array, caches) = self.build_epoch(server, envelope_after, None)?;
        self.array = array;
        self.caches = caches;
        server.free(old_array)?;
        for c in old_caches {
            server.free(c)?;
        }
        server.mark(Marker::RebuildDone { owner: self.instance, epoch: self.epoch });
        Ok((export, export_slots))
    }

    /// Collects every live item into client memory, for session restarts.
    pub fn export_live_items(
        &self,
        server: &mut SimServer,
    ) -> Result<Vec<(u64, Vec<u64>, bool)>, OsError> {
        let (dead_ranks, newest, scratch) = self.gather_cache(server)?;
        let b = server.block_words();
        let mut out = Vec::new();
        for rank in 0..self.e_slots {
            let slot = self.read_array_slot(server, self.geo.item_base + rank)?;
            if meta_kind(slot[0]) == KIND_ITEM
                && !meta_dead(slot[0])
                && dead_ranks.binary_search(&rank).is_err()
            {
                out.push((
                    slot[1],
                    slot[2..2 + self.payload_words].to_vec(),
                    meta_class(slot[0]) == CLASS_ORIG,
                ));
            }
        }
        if let Some(scratch) = scratch {
            let mut cached = SeqReader::new(scratch, self.slot_words, self.budget, b);
            while let Some(slot) = cached.next_slot(server)? {
                if meta_kind(slot[0]) == KIND_ITEM
                    && !meta_dead(slot[0])
                    && newest.get(&slot[1]).is_some_and(|&ord| ord == meta_index(slot[0]))
                {
                    out.push((
                        slot[1],
                        slot[2..2 + self.payload_words].to_vec(),
                        meta_class(slot[0]) == CLASS_ORIG,
                    ));
                }
            }
            server.free(scratch)?;
        }
        Ok(out)
    }

    /// Releases the server-side regions. The value is unusable afterwards.
    pub fn destroy(self, server: &mut SimServer) -> Result<(), OsError> {
        server.free(self.array)?;
        for c in self.caches {
            server.free(c)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{derive_params, derive_small_os_params, Config};
    use crate::server::{Dir, Recording};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    fn setup(cap: usize) -> (SimServer, SmallOs, Params) {
        let p = derive_params(&Config { n: 1 << 12, b: 256, m: 256, seed: 0 }).unwrap();
        let sp = derive_small_os_params(&p, cap).unwrap();
        let mut server = SimServer::new(p.b);
        let os = SmallOs::new(&mut server, 7, 1, &p, &sp, p.item_payload_words, false, true).unwrap();
        (server, os, p)
    }

    fn pl(p: &Params, x: u64) -> Vec<u64> {
        (0..p.item_payload_words as u64).map(|w| x * 1000 + w).collect()
    }

    #[test]
    fn put_get_round_trip_within_one_epoch() {
        let (mut server, mut os, p) = setup(64);
        for k in [10u64, 20, 30] {
            os.access(&mut server, Op::Put { key: k, payload: &pl(&p, k), orig_dummy: false }).unwrap();
        }
        assert_eq!(os.live_count(), 3);
        let got = os.access(&mut server, Op::Get { key: 20 }).unwrap();
        assert_eq!(got, Some(pl(&p, 20)));
        assert_eq!(os.live_count(), 2);
        // Consumed: a second lookup finds nothing.
        let again = os.access(&mut server, Op::Get { key: 20 }).unwrap();
        assert_eq!(again, None);
        let touched = os.access(&mut server, Op::Touch { key: 999 }).unwrap();
        assert_eq!(touched, None);
    }

    #[test]
    fn items_survive_rebuilds_and_classes_are_kept() {
        let (mut server, mut os, p) = setup(64);
        os.access(&mut server, Op::Put { key: 5, payload: &pl(&p, 5), orig_dummy: false }).unwrap();
        os.access(&mut server, Op::Put { key: 6, payload: &pl(&p, 6), orig_dummy: true }).unwrap();
        os.rebuild(&mut server, &[], 8).unwrap();
        assert_eq!(os.live_count(), 2);
        assert_eq!(os.epoch(), 2);
        let mut items = os.export_live_items(&mut server).unwrap();
        items.sort();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0], (5, pl(&p, 5), false));
        assert_eq!(items[1], (6, pl(&p, 6), true));
        assert_eq!(os.access(&mut server, Op::Get { key: 5 }).unwrap(), Some(pl(&p, 5)));
        os.rebuild(&mut server, &[], 8).unwrap();
        assert_eq!(os.live_count(), 1);
        assert_eq!(os.access(&mut server, Op::Get { key: 5 }).unwrap(), None);
        assert_eq!(os.access(&mut server, Op::Get { key: 6 }).unwrap(), Some(pl(&p, 6)));
    }

    #[test]
    fn replacing_puts_keep_one_live_copy() {
        let (mut server, mut os, p) = setup(64);
        os.access(&mut server, Op::Put { key: 9, payload: &pl(&p, 1), orig_dummy: false }).unwrap();
        os.access(&mut server, Op::Put { key: 9, payload: &pl(&p, 2), orig_dummy: false }).unwrap();
        assert_eq!(os.live_count(), 1);
        os.rebuild(&mut server, &[], 4).unwrap();
        assert_eq!(os.live_count(), 1);
        // Replacement of an item that already sits in the shuffled array.
        os.access(&mut server, Op::Put { key: 9, payload: &pl(&p, 3), orig_dummy: false }).unwrap();
        assert_eq!(os.live_count(), 1);
        assert_eq!(os.access(&mut server, Op::Get { key: 9 }).unwrap(), Some(pl(&p, 3)));
        assert_eq!(os.access(&mut server, Op::Get { key: 9 }).unwrap(), None);
        assert_eq!(os.live_count(), 0);
        os.rebuild(&mut server, &[], 4).unwrap();
        assert_eq!(os.access(&mut server, Op::Get { key: 9 }).unwrap(), None);
    }

    #[test]
    fn random_ops_match_a_map_oracle_across_many_epochs() {
        let mut rng = StdRng::seed_from_u64(0);
        let (mut server, mut os, p) = setup(256);
        let mut oracle: HashMap<u64, Vec<u64>> = HashMap::new();
        let mut next_key = 1u64;
        for step in 0..400 {
            if os.access_count() == os.budget() {
                let envelope = (oracle.len() + os.budget()).min(256);
                os.rebuild(&mut server, &[], envelope).unwrap();
            }
            match rng.gen_range(0..4) {
                0 | 3 => {
                    let k = next_key;
                    next_key += 1;
                    let v = pl(&p, k);
                    os.access(&mut server, Op::Put { key: k, payload: &v, orig_dummy: false }).unwrap();
                    oracle.insert(k, v);
                }
                1 if !oracle.is_empty() => {
                    let keys: Vec<u64> = oracle.keys().copied().collect();
                    let k = keys[rng.gen_range(0..keys.len())];
                    let got = os.access(&mut server, Op::Get { key: k }).unwrap();
                    assert_eq!(got.as_ref(), oracle.get(&k), "step {step} key {k}");
                    oracle.remove(&k);
                }
                _ => {
                    let miss = 1_000_000 + step as u64;
                    assert_eq!(os.access(&mut server, Op::Get { key: miss }).unwrap(), None);
                }
            }
            assert_eq!(os.live_count(), oracle.len(), "step {step}");
        }
        assert!(os.epoch() > 20);
    }

    #[test]
    fn budget_exhaustion_demands_a_restart() {
        let (mut server, mut os, _p) = setup(64);
        for k in 0..os.budget() as u64 {
            os.access(&mut server, Op::Touch { key: k }).unwrap();
        }
        let err = os.access(&mut server, Op::Touch { key: 777 }).unwrap_err();
        assert_eq!(
            err,
            OsError::RestartRequired { context: "access budget exhausted without a rebuild" }
        );

        let (mut server, mut os, p) = setup(64);
        os.put_cap_override = Some(1);
        os.access(&mut server, Op::Put { key: 1, payload: &pl(&p, 1), orig_dummy: false }).unwrap();
        let err = os
            .access(&mut server, Op::Put { key: 2, payload: &pl(&p, 2), orig_dummy: false })
            .unwrap_err();
        assert!(matches!(err, OsError::RestartRequired { .. }));
        // The guard fires before any traffic, so a lookup still works.
        assert_eq!(os.access(&mut server, Op::Get { key: 1 }).unwrap(), Some(pl(&p, 1)));
    }

    #[test]
    fn envelope_overflow_demands_restart_and_keeps_old_state() {
        let (mut server, mut os, p) = setup(64);
        for k in 0..3u64 {
            os.access(&mut server, Op::Put { key: k, payload: &pl(&p, k), orig_dummy: false }).unwrap();
        }
        let err = os.rebuild(&mut server, &[], 2).unwrap_err();
        assert!(matches!(err, OsError::RestartRequired { .. }));
        // The failed rebuild must leave the old epoch fully usable.
        assert_eq!(os.access(&mut server, Op::Get { key: 1 }).unwrap(), Some(pl(&p, 1)));
        let mut items = os.export_live_items(&mut server).unwrap();
        items.sort();
        assert_eq!(items.iter().map(|(k, _, _)| *k).collect::<Vec<_>>(), vec![0, 2]);

        let err = os.rebuild(&mut server, &[], 100).unwrap_err();
        assert_eq!(err, OsError::OverCapacity { count: 100, cap: 64 });
    }

    #[test]
    fn min_capacity_store_works_one_access_per_epoch() {
        let (mut server, mut os, p) = setup(1);
        assert_eq!(os.budget(), 1);
        os.access(&mut server, Op::Put { key: 42, payload: &pl(&p, 42), orig_dummy: false }).unwrap();
        os.rebuild(&mut server, &[], 1).unwrap();
        assert_eq!(os.access(&mut server, Op::Get { key: 42 }).unwrap(), Some(pl(&p, 42)));
        os.rebuild(&mut server, &[], 1).unwrap();
        assert_eq!(os.access(&mut server, Op::Get { key: 42 }).unwrap(), None);
    }

    #[test]
    fn flush_export_carries_live_items_and_leaves_the_store_empty() {
        let (mut server, mut os, p) = setup(64);
        os.access(&mut server, Op::Put { key: 11, payload: &pl(&p, 11), orig_dummy: false }).unwrap();
        os.access(&mut server, Op::Put { key: 12, payload: &pl(&p, 12), orig_dummy: true }).unwrap();
        os.rebuild(&mut server, &[], 4).unwrap();
        os.access(&mut server, Op::Put { key: 13, payload: &pl(&p, 13), orig_dummy: false }).unwrap();
        assert_eq!(os.access(&mut server, Op::Get { key: 11 }).unwrap(), Some(pl(&p, 11)));

        let sw = os.slot_len();
        let (export, slots) = os.flush_export(&mut server, 0).unwrap();
        assert_eq!(os.live_count(), 0);
        assert_eq!(os.access(&mut server, Op::Get { key: 12 }).unwrap(), None);

        let mut live = Vec::new();
        let mut r = SeqReader::new(export, sw, slots, server.block_words());
        while let Some(slot) = r.next_slot(&mut server).unwrap() {
            if meta_kind(slot[0]) == KIND_ITEM && !meta_dead(slot[0]) {
                live.push((slot[1], slot[2..2 + p.item_payload_words].to_vec(), meta_class(slot[0])));
            }
        }
        server.free(export).unwrap();
        live.sort();
        assert_eq!(live.len(), 2);
        assert_eq!(live[0], (12, pl(&p, 12), CLASS_ORIG));
        assert_eq!(live[1], (13, pl(&p, 13), CLASS_REAL));

        // The emptied store keeps working.
        os.access(&mut server, Op::Put { key: 50, payload: &pl(&p, 50), orig_dummy: false }).unwrap();
        assert_eq!(os.access(&mut server, Op::Get { key: 50 }).unwrap(), Some(pl(&p, 50)));
    }

    #[test]
    fn inflow_arrays_merge_into_the_new_epoch() {
        let (mut server, mut os, p) = setup(64);
        os.access(&mut server, Op::Put { key: 30, payload: &pl(&p, 30), orig_dummy: false }).unwrap();

        // Hand-built inflow: slot-shaped items with pads, order irrelevant.
        let sw = os.slot_len();
        let inflow = server.alloc(4 * sw, RegionLabel::Bucket, 1);
        let mut w = SeqWriter::new(inflow, sw, server.block_words());
        for (i, k) in [25u64, 7].iter().enumerate() {
            let mut slot = vec![0u64; sw];
            slot[0] = make_meta(KIND_ITEM, CLASS_REAL, 0, i);
            slot[1] = *k;
            slot[2..2 + p.item_payload_words].copy_from_slice(&pl(&p, *k));
            w.push(&mut server, &slot).unwrap();
        }
        for _ in 0..2 {
            w.push(&mut server, &vec![0u64; sw]).unwrap();
        }
        w.flush(&mut server).unwrap();

        os.rebuild(&mut server, &[inflow], 8).unwrap();
        assert_eq!(os.live_count(), 3);
        for k in [7u64, 25, 30] {
            assert_eq!(os.access(&mut server, Op::Get { key: k }).unwrap(), Some(pl(&p, k)), "key {k}");
        }
    }

    #[test]
    fn inflow_only_stores_serve_and_forward_items_without_a_companion_block() {
        let p = derive_params(&Config { n: 1 << 12, b: 256, m: 256, seed: 0 }).unwrap();
        let sp = derive_small_os_params(&p, 64).unwrap();
        let mut server = SimServer::new(p.b);
        let mut os =
            SmallOs::new(&mut server, 7, 2, &p, &sp, p.item_payload_words, true, false).unwrap();

        let sw = os.slot_len();
        let inflow = server.alloc(3 * sw, RegionLabel::Bucket, 2);
        let mut w = SeqWriter::new(inflow, sw, server.block_words());
        for (i, k) in [40u64, 41, 42].iter().enumerate() {
            let mut slot = vec![0u64; sw];
            slot[0] = make_meta(KIND_ITEM, CLASS_REAL, 0, i);
            slot[1] = *k;
            slot[2..2 + p.item_payload_words].copy_from_slice(&pl(&p, *k));
            w.push(&mut server, &slot).unwrap();
        }
        w.flush(&mut server).unwrap();
        os.rebuild(&mut server, &[inflow], 8).unwrap();
        assert_eq!(os.live_count(), 3);
        assert_eq!(os.put_budget(), 0);

        assert_eq!(os.access(&mut server, Op::Get { key: 41 }).unwrap(), Some(pl(&p, 41)));
        assert_eq!(os.access(&mut server, Op::Touch { key: 40 }).unwrap(), None);
        os.rebuild(&mut server, &[], 8).unwrap();
        assert_eq!(os.live_count(), 2);
        assert_eq!(os.access(&mut server, Op::Get { key: 41 }).unwrap(), None);

        let (export, slots) = os.flush_export(&mut server, 0).unwrap();
        let mut live = Vec::new();
        let mut r = SeqReader::new(export, sw, slots, server.block_words());
        while let Some(slot) = r.next_slot(&mut server).unwrap() {
            if meta_kind(slot[0]) == KIND_ITEM && !meta_dead(slot[0]) {
                live.push(slot[1]);
            }
        }
        server.free(export).unwrap();
        live.sort_unstable();
        assert_eq!(live, vec![40, 42]);
    }

    fn shape_of(ops: &[(u8, u64)], seed: u128) -> Vec<u32> {
        let p = derive_params(&Config { n: 1 << 12, b: 256, m: 256, seed: 0 }).unwrap();
        let sp = derive_small_os_params(&p, 256).unwrap();
        let mut server = SimServer::new(p.b);
        let mut os =
            SmallOs::new(&mut server, seed, 1, &p, &sp, p.item_payload_words, false, true).unwrap();
        server.set_recording(Recording::Shape);
        let payload = vec![1u64; p.item_payload_words];
        for (i, &(kind, key)) in ops.iter().enumerate() {
            if os.access_count() == os.budget() {
                os.rebuild(&mut server, &[], (i + os.budget()).min(256)).unwrap();
            }
            match kind {
                0 => os
                    .access(&mut server, Op::Put { key, payload: &payload, orig_dummy: false })
                    .unwrap(),
                1 => os.access(&mut server, Op::Get { key }).unwrap(),
                _ => os.access(&mut server, Op::Touch { key }).unwrap(),
            };
        }
        server.take_shape()
    }

    #[test]
    fn trace_shape_ignores_operations_keys_and_seed() {
        // Mixed workload against all-touches, different keys, different
        // permutation seed: the (direction, label, length) stream must
        // match exactly, including across rebuilds.
        let mixed: Vec<(u8, u64)> = (0..40).map(|i| ((i % 3) as u8, 100 + i as u64)).collect();
        let touches: Vec<(u8, u64)> = (0..40).map(|i| (2u8, 900_000 + i as u64)).collect();
        assert_eq!(shape_of(&mixed, 1), shape_of(&touches, 2));
    }

    #[test]
    fn no_shuffled_slot_is_read_twice_within_an_access_window() {
        let (mut server, mut os, p) = setup(64);
        server.set_recording(Recording::Full);
        let mut rng = StdRng::seed_from_u64(0);
        let mut live: Vec<u64> = Vec::new();
        let mut next_key = 1u64;
        for _ in 0..6 {
            for _ in 0..os.budget() {
                match rng.gen_range(0..3) {
                    0 => {
                        os.access(
                            &mut server,
                            Op::Put { key: next_key, payload: &pl(&p, next_key), orig_dummy: false },
                        )
                        .unwrap();
                        live.push(next_key);
                        next_key += 1;
                    }
                    1 if !live.is_empty() => {
                        let k = live.swap_remove(rng.gen_range(0..live.len()));
                        os.access(&mut server, Op::Get { key: k }).unwrap();
                    }
                    _ => {
                        os.access(&mut server, Op::Touch { key: 900_000 + next_key }).unwrap();
                    }
                }
            }
            os.rebuild(&mut server, &[], (live.len() + os.budget()).min(64)).unwrap();
        }
        let trace = server.take_trace();

        // Between a RebuildDone and the next RebuildStart, reads landing
        // in a shuffled-array region must hit pairwise distinct slots.
        let regions = server.region_log().to_vec();
        let find_region = |addr: u64| {
            *regions
                .iter()
                .find(|r| addr >= r.base && addr < r.base + r.words as u64)
                .unwrap()
        };
        let mut in_rebuild = false;
        let mut marker_at = 0usize;
        let mut seen: HashSet<(u32, u64)> = HashSet::new();
        let mut windows = 0;
        for e in &trace.events {
            while marker_at < trace.markers.len() && trace.markers[marker_at].0 <= e.seq {
                match trace.markers[marker_at].1 {
                    Marker::RebuildStart { .. } => in_rebuild = true,
                    Marker::RebuildDone { .. } => {
                        in_rebuild = false;
                        seen.clear();
                        windows += 1;
                    }
                    _ => {}
                }
                marker_at += 1;
            }
            if in_rebuild || e.dir != Dir::Read {
                continue;
            }
            let r = find_region(e.addr);
            if r.label != RegionLabel::ShuffledArray {
                continue;
            }
            let slot = (e.addr - r.base) / os.slot_len() as u64;
            assert!(seen.insert((r.id, slot)), "slot {slot} of region {} read twice", r.id);
        }
        assert!(windows >= 5, "expected several access windows, saw {windows}");
    }
}
