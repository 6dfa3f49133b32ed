//! A keyed store spread over a tree of bounded stores.
//!
//! Level `i` holds `B'^i` stores of the same shape; insertions land in the
//! root, and a fixed clock drains each level toward the leaves in padded,
//! sorted batches routed by the key's nonce bits. Every operation walks
//! exactly one store per level, and every batch size is computed from the
//! operation ordinal and the sizing, so the sequence of transfer
//! directions, lengths, and region kinds carries no information about the
//! keys or payloads.
//!
//! Keys pack a routing nonce above a caller tag: `nonce << tag_bits | tag`.
//! A stored key's nonce must be a fresh uniform draw, a key may only be
//! inserted while no live copy of it remains, and caller tags stay below
//! `1 << (tag_bits - 1)`; the top tag bit marks internally drawn decoys.
//! `get` consumes the item it returns.
//!
//! The caller also declares `live_cap`, a ceiling on how many of its items
//! are live at once. Decoys are compacted away in the batch that feeds the
//! leaves, so leaf sizes follow the declared ceiling instead of the
//! operation count.

use crate::audit::IsoChecker;
use crate::error::OsError;
use crate::params::{derive_small_os_params, derive_small_os_params_with_budget, Params};
use crate::prims::{sort_pad_partition, Route};
use crate::rng::{subkey, Prf64};
use crate::server::{Marker, Region, RegionLabel, SimServer};
use crate::small_os::{
    meta_class, meta_dead, meta_kind, Op, SeqReader, SeqWriter, SmallOs, CLASS_REAL, KIND_ITEM,
};

/// Additive headroom each partition child gets beyond its mean load.
const FAN_SLACK: usize = 64;
/// The level feeding the leaves drains this many times slower, trading a
/// fatter last internal level for rarer leaf rebuilds.
const LAST_LEVEL_STRETCH: u64 = 4;

pub struct IsoOs {
    bprime: usize,
    lb: u32,
    h: usize,
    nonce_bits: u32,
    tag_bits: u32,
    m: usize,
    payload_words: usize,
    slot_words: usize,
    bucket_cap: usize,
    leaf_cap: usize,
    live_cap: usize,
    live_real: usize,
    g0: u64,
    levels: Vec<Vec<SmallOs>>,
    last_flush: Vec<u64>,
    t: u64,
    fresh: Prf64,
    fresh_ctr: u64,
    env_boost: u32,
    fan_boost: u32,
    restarts: u64,
    checker: Option<IsoChecker>,
}

impl IsoOs {
    pub fn new(
        server: &mut SimServer,
        seed: u128,
        p: &Params,
        payload_words: usize,
        live_cap: usize,
    ) -> Result<IsoOs, OsError> {
        let bprime = p.b_prime;
        let lb = bprime.trailing_zeros();
        let h = p.h_depth;
        assert!(h >= 1, "the tree needs at least one level below the root");
        assert!(
            h as u32 * lb <= p.nonce_bits,
            "nonces are too short to route {h} levels"
        );
        assert!(live_cap >= 1, "a store that can hold nothing is useless");
        let sp_bucket = derive_small_os_params(p, p.bucket_cap)?;
        let g0 = sp_bucket.rebuild_period as u64 / 2;
        assert!(g0 >= 1, "the root store cannot absorb even one operation");
        // A leaf is rebuilt every drain of the level above it, so its
        // access budget only has to cover the walks one drain period can
        // route its way: mean period / B'^h, plus a deviation allowance.
        let stretch = if h >= 2 { LAST_LEVEL_STRETCH as usize } else { 1 };
        let mean_walks = (g0 as usize * stretch) / bprime;
        let leaf_budget = mean_walks + 6 * mean_walks.isqrt() + 16;
        let sp_leaf = derive_small_os_params_with_budget(p, p.leaf_cap, leaf_budget)?;

        let mut levels = Vec::with_capacity(h + 1);
        let mut instance = 1u64;
        for i in 0..=h {
            let sp = if i == h { &sp_leaf } else { &sp_bucket };
            let count = bprime.pow(i as u32);
            let mut row = Vec::with_capacity(count);
            for _ in 0..count {
                row.push(SmallOs::new(
                    server,
                    seed,
                    instance,
                    p,
                    sp,
                    payload_words,
                    i == 0,
                    i == 0,
                )?);
                instance += 1;
            }
            levels.push(row);
        }
        let slot_words = levels[0][0].slot_len();

        Ok(IsoOs {
            bprime,
            lb,
            h,
            nonce_bits: p.nonce_bits,
            tag_bits: 63 - p.nonce_bits,
            m: p.m,
            payload_words,
            slot_words,
            bucket_cap: p.bucket_cap,
            leaf_cap: p.leaf_cap,
            live_cap,
            live_real: 0,
            g0,
            levels,
            last_flush: vec![0; h + 1],
            t: 0,
            fresh: Prf64::new(subkey(seed, "fresh", 0, 0)),
            fresh_ctr: 0,
            env_boost: 0,
            fan_boost: 0,
            restarts: 0,
            checker: None,
        })
    }

    /// Attaches an online checker that validates every key this store is
    /// asked to serve. Purely observational; traffic is unchanged.
    pub fn attach_checker(&mut self) {
        self.checker = Some(IsoChecker::new(self.nonce_bits, self.tag_bits));
    }

    pub fn checker(&self) -> Option<&IsoChecker> {
        self.checker.as_ref()
    }

    pub fn op_count(&self) -> u64 {
        self.t
    }

    pub fn restart_count(&self) -> u64 {
        self.restarts
    }

    /// Sticky batch enlargements taken so far; stays zero on workloads
    /// that honor the fresh-nonce contract, except with tiny probability.
    pub fn boost_count(&self) -> u32 {
        self.env_boost + self.fan_boost
    }

    pub fn depth(&self) -> usize {
        self.h
    }

    pub fn nonce_bits(&self) -> u32 {
        self.nonce_bits
    }

    pub fn tag_bits(&self) -> u32 {
        self.tag_bits
    }

    pub fn payload_len(&self) -> usize {
        self.payload_words
    }

    /// Live items across every store, surviving internal decoys included.
    pub fn total_live(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|row| row.iter())
            .map(|s| s.live_count())
            .sum()
    }

    /// Caller items currently live: insertions minus consuming lookups.
    pub fn live_items(&self) -> usize {
        self.live_real
    }

    /// Test hook: lowers the root insertion budget to force restarts.
    pub fn set_root_insert_cap(&mut self, cap: Option<usize>) {
        if let Some(c) = cap {
            assert!(c >= 1, "a zero insertion budget would restart forever");
        }
        self.levels[0][0].put_cap_override = cap;
    }

    pub fn put(&mut self, server: &mut SimServer, key: u64, payload: &[u64]) -> Result<(), OsError> {
        assert!(key >> (self.nonce_bits + self.tag_bits) == 0, "keys use at most 63 bits");
        assert!(
            (key >> (self.tag_bits - 1)) & 1 == 0,
            "the top tag bit is reserved for decoys"
        );
        assert!(payload.len() <= self.payload_words, "payload too wide");
        assert!(
            self.live_real < self.live_cap,
            "the store already holds its declared ceiling of live items"
        );
        if let Some(c) = self.checker.as_mut() {
            c.on_put(key);
        }
        let cover = self.fresh_key();
        self.ensure_headroom(server, cover)?;
        let mut body = vec![0u64; self.payload_words];
        body[..payload.len()].copy_from_slice(payload);

        self.bucket_access(server, 0, 0, Op::Touch { key: cover })?;
        for i in 1..=self.h {
            let u = self.path_index(cover, i);
            self.bucket_access(server, i, u, Op::Touch { key: cover })?;
        }
        self.bucket_access(server, 0, 0, Op::Put { key, payload: &body, orig_dummy: false })?;
        self.live_real += 1;
        self.finish_op(server)
    }

    pub fn get(&mut self, server: &mut SimServer, key: u64) -> Result<Option<Vec<u64>>, OsError> {
        assert!(key >> (self.nonce_bits + self.tag_bits) == 0, "keys use at most 63 bits");
        if let Some(c) = self.checker.as_mut() {
            c.on_get(key);
        }
        let decoy = self.fresh_key();
        self.ensure_headroom(server, key)?;

        let mut found = self.bucket_access(server, 0, 0, Op::Get { key })?;
        for i in 1..=self.h {
            let u = self.path_index(key, i);
            let hit = self.bucket_access(server, i, u, Op::Get { key })?;
            if hit.is_some() {
                debug_assert!(found.is_none(), "a key may be live in one store at most");
                found = hit;
            }
        }
        if found.is_some() {
            self.live_real -= 1;
        }
        let blank = vec![0u64; self.payload_words];
        self.bucket_access(server, 0, 0, Op::Put { key: decoy, payload: &blank, orig_dummy: true })?;
        self.finish_op(server)?;
        Ok(found)
    }

    /// One fresh decoy key per operation: a uniform nonce over a tagged
    /// counter with the reserved top bit set.
    fn fresh_key(&mut self) -> u64 {
        let r = self.fresh.eval(self.fresh_ctr);
        self.fresh_ctr += 1;
        let nonce = r & ((1u64 << self.nonce_bits) - 1);
        let tag_mask = (1u64 << (self.tag_bits - 1)) - 1;
        let tag = (1u64 << (self.tag_bits - 1)) | (self.fresh_ctr & tag_mask);
        (nonce << self.tag_bits) | tag
    }

    /// Index of the level-`level` store on this key's root-to-leaf path.
    fn path_index(&self, key: u64, level: usize) -> usize {
        let nonce = key >> self.tag_bits;
        (nonce >> (self.nonce_bits - level as u32 * self.lb)) as usize
    }

    fn bucket_access(
        &mut self,
        server: &mut SimServer,
        level: usize,
        idx: usize,
        op: Op<'_>,
    ) -> Result<Option<Vec<u64>>, OsError> {
        if level > 0 {
            let since = (self.t - self.last_flush[level]) as usize;
            self.levels[level][idx].set_cache_bound(since + 1);
        }
        self.levels[level][idx].access(server, op)
    }

    /// Restarts the session when the next operation could exhaust a store
    /// on its path. The check reads only public counters, and an operation
    /// never stops halfway.
    fn ensure_headroom(&mut self, server: &mut SimServer, route_key: u64) -> Result<(), OsError> {
        let root = &self.levels[0][0];
        let mut tight = root.access_count() + 2 > root.budget()
            || root.put_count() + 1 > root.put_budget();
        if !tight {
            for i in 1..=self.h {
                let s = &self.levels[i][self.path_index(route_key, i)];
                if s.access_count() + 1 > s.budget() {
                    tight = true;
                    break;
                }
            }
        }
        if tight {
            self.restart(server)?;
        }
        Ok(())
    }

    fn restart(&mut self, server: &mut SimServer) -> Result<(), OsError> {
        server.mark(Marker::RestartStart);
        self.flush_levels(server, self.h - 1)?;
        self.restarts += 1;
        server.mark(Marker::RestartDone);
        Ok(())
    }

    fn finish_op(&mut self, server: &mut SimServer) -> Result<(), OsError> {
        self.t += 1;
        if self.t % self.g0 != 0 {
            return Ok(());
        }
        let mut imax = 0;
        for i in 1..self.h {
            if self.t % self.period(i) == 0 {
                imax = i;
            }
        }
        self.flush_levels(server, imax)
    }

    /// Ordinal period between drains of level `i`. Each period divides the
    /// next, so one cascade always covers a contiguous top segment.
    fn period(&self, i: usize) -> u64 {
        let stretch = if i + 1 == self.h && i >= 1 { LAST_LEVEL_STRETCH } else { 1 };
        self.g0 * (self.bprime as u64).pow(i as u32) * stretch
    }

    /// Slot count every partition child of a level-`i` store is padded to.
    fn fan_cap(&self, i: usize) -> usize {
        let spread = (self.bprime as u64).pow(i as u32 + 1);
        let base = (2 * self.period(i) / spread) as usize + FAN_SLACK;
        (base << self.fan_boost).min(self.leaf_cap)
    }

    /// Public slot count for a leaf rebuild: twice the per-leaf share of
    /// the declared live ceiling, plus one inbound batch and the resident
    /// fringe that has not drained past the root yet. Since decoys never
    /// reach the leaves, this stays fixed for the life of the store.
    fn leaf_envelope(&self) -> usize {
        let leaves = self.levels[self.h].len();
        let mean = self.live_cap.div_ceil(leaves);
        let base = 2 * mean + self.fan_cap(self.h - 1) + 2 * self.g0 as usize;
        (base << self.env_boost).min(self.leaf_cap)
    }

    /// Drains levels `0..=imax` top-down. A store whose own level drains
    /// this round passes inbound batches straight through; below `imax`
    /// the batches are merged into the receiving store.
    fn flush_levels(&mut self, server: &mut SimServer, imax: usize) -> Result<(), OsError> {
        debug_assert!(imax < self.h);
        server.mark(Marker::FlushStart { owner: imax as u64 });
        let sw = self.slot_words;
        let mut parked: Vec<Vec<Vec<(Region, usize)>>> = (0..=self.h)
            .map(|i| (0..self.levels[i].len()).map(|_| Vec::new()).collect())
            .collect();
        for i in 0..=imax {
            let fan_cap = self.fan_cap(i);
            for u in 0..self.levels[i].len() {
                let export = self.levels[i][u].flush_export(server, 0)?;
                let mut sources = vec![export];
                sources.append(&mut parked[i][u]);
                let (src, count) = concat_slots(server, sw, sources)?;
                let (children, cap_used) = self.partition_retry(server, src, count, i, fan_cap)?;
                for (c, region) in children.into_iter().enumerate() {
                    let child = u * self.bprime + c;
                    if i < imax {
                        parked[i + 1][child].push((region, cap_used));
                    } else {
                        self.ingest(server, i + 1, child, region)?;
                    }
                }
            }
            self.last_flush[i] = self.t;
        }
        self.last_flush[imax + 1] = self.t;
        server.mark(Marker::FlushDone { owner: imax as u64 });
        Ok(())
    }

    /// Splits `src` into `B'` padded children by the next nonce digit.
    /// Dead items and pads are dropped, and the batch that feeds the
    /// leaves also compacts out the decoys, which have served their
    /// purpose once they leave the drained levels. A child overflow
    /// enlarges the cap for good and retries with `src` untouched; the
    /// enlargement is the only thing the retry reveals.
    fn partition_retry(
        &mut self,
        server: &mut SimServer,
        src: Region,
        count: usize,
        parent_level: usize,
        mut cap: usize,
    ) -> Result<(Vec<Region>, usize), OsError> {
        let shift = self.nonce_bits - (parent_level as u32 + 1) * self.lb;
        let tag_bits = self.tag_bits;
        let bp = self.bprime as u64;
        let into_leaves = parent_level + 1 == self.h;
        loop {
            let res = sort_pad_partition(
                server,
                src,
                count,
                self.slot_words,
                self.m,
                self.bprime,
                cap,
                RegionLabel::Bucket,
                0,
                |slot| Route {
                    child: (((slot[1] >> tag_bits) >> shift) & (bp - 1)) as usize,
                    keep: meta_kind(slot[0]) == KIND_ITEM
                        && !meta_dead(slot[0])
                        && (!into_leaves || meta_class(slot[0]) == CLASS_REAL),
                    key: slot[1],
                },
                |pad| {
                    pad.fill(0);
                    pad[1] = u64::MAX;
                },
            );
            match res {
                Ok(children) => {
                    server.free(src)?;
                    return Ok((children, cap));
                }
                Err(OsError::Overflow { .. }) if cap < self.leaf_cap => {
                    self.fan_boost += 1;
                    cap = (cap * 2).min(self.leaf_cap);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Merges one inbound batch into a store. Internal stores grow their
    /// slot count by exactly the batch size, which cannot overflow; leaf
    /// rebuilds use the public envelope and double it for good on the rare
    /// miss, with the store and the batch intact across a failed try.
    fn ingest(
        &mut self,
        server: &mut SimServer,
        level: usize,
        idx: usize,
        inflow: Region,
    ) -> Result<(), OsError> {
        let inflow_slots = inflow.words / self.slot_words;
        let (cap, mut env) = if level == self.h {
            (self.leaf_cap, self.leaf_envelope())
        } else {
            (self.bucket_cap, self.levels[level][idx].envelope() + inflow_slots)
        };
        env = env.min(cap);
        loop {
            match self.levels[level][idx].rebuild(server, &[inflow], env) {
                Ok(()) => return Ok(()),
                Err(OsError::RestartRequired { .. }) if env < cap => {
                    if level == self.h {
                        self.env_boost += 1;
                    }
                    env = (env * 2).min(cap);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Concatenates slot regions into one scratch region, freeing the inputs.
/// A single source passes through untouched.
fn concat_slots(
    server: &mut SimServer,
    slot_words: usize,
    sources: Vec<(Region, usize)>,
) -> Result<(Region, usize), OsError> {
    if sources.len() == 1 {
        return Ok(sources[0]);
    }
    let total: usize = sources.iter().map(|&(_, s)| s).sum();
    let dst = server.alloc((total * slot_words).max(slot_words), RegionLabel::Scratch, 0);
    let b = server.block_words();
    let mut w = SeqWriter::new(dst, slot_words, b);
    for (r, slots) in sources {
        let mut rd = SeqReader::new(r, slot_words, slots, b);
        while let Some(slot) = rd.next_slot(server)? {
            let s = slot.to_vec();
            w.push(server, &s)?;
        }
        server.free(r)?;
    }
    w.flush(server)?;
    Ok((dst, total))
}
