//! Word-addressable memory with a hidden access pattern.
//!
//! An arity-`B'` tree covers the `n` memory words: leaves hold `B'`-word
//! sub-blocks, internal nodes hold `(nonce, id)` slots for their children,
//! and the root's slots sit in client memory. Every stored node lives in
//! the keyed hierarchy under a `nonce << tag_bits | node id` key. An
//! access fetches the root-to-leaf path with consuming lookups, then
//! reinserts the path bottom-up under fresh nonces, fixing each parent's
//! child slot before the parent itself is reinserted. Reads and writes
//! differ only in the leaf words the client copies back, so the two are
//! indistinguishable on the wire: every access costs exactly `2 * r`
//! hierarchy operations.

use crate::error::OsError;
use crate::iso_os::IsoOs;
use crate::params::Params;
use crate::rng::{subkey, Prf64};
use crate::server::SimServer;

pub struct Oram {
    iso: IsoOs,
    n: usize,
    bprime: usize,
    lb: u32,
    r: usize,
    /// Node count per stored level, `sizes[0]` for level 1 down to the
    /// leaf level; upper levels may be ragged when `n` is not a power of
    /// the branching factor.
    sizes: Vec<usize>,
    /// First node id of each stored level; ids start at 1.
    id_base: Vec<u64>,
    /// Client copy of the root: `(nonce, id)` slots for the level-1 nodes.
    root: Vec<u64>,
    nonce_prf: Prf64,
    nonce_mask: u64,
    draw_ctr: u64,
    init_puts: u64,
}

impl Oram {
    /// Builds the tree over an all-zero memory of `p.n` words, leaves
    /// first, with one hierarchy insertion per node.
    pub fn new(server: &mut SimServer, seed: u128, p: &Params) -> Result<Oram, OsError> {
        Oram::build(server, seed, p, false)
    }

    /// Like [`Oram::new`], with the online key checker attached before the
    /// first insertion so it observes the whole stream.
    pub fn new_checked(server: &mut SimServer, seed: u128, p: &Params) -> Result<Oram, OsError> {
        Oram::build(server, seed, p, true)
    }

    fn build(
        server: &mut SimServer,
        seed: u128,
        p: &Params,
        checked: bool,
    ) -> Result<Oram, OsError> {
        let bprime = p.b_prime;
        let lb = bprime.trailing_zeros();
        let r = p.r_depth;
        assert!(r >= 1, "the tree needs at least one stored level");
        let leaves = p.n / bprime;

        let mut sizes = vec![0usize; r];
        sizes[r - 1] = leaves;
        for k in (0..r - 1).rev() {
            sizes[k] = sizes[k + 1].div_ceil(bprime);
        }
        assert!(sizes[0] <= bprime, "the root slots must fit one node");
        let mut id_base = vec![0u64; r];
        let mut next = 1u64;
        for k in 0..r {
            id_base[k] = next;
            next += sizes[k] as u64;
        }
        let node_count = (next - 1) as usize;

        let mut iso = IsoOs::new(server, seed, p, p.item_payload_words, node_count)?;
        if checked {
            iso.attach_checker();
        }
        let mut oram = Oram {
            iso,
            n: p.n,
            bprime,
            lb,
            r,
            sizes,
            id_base,
            root: Vec::new(),
            nonce_prf: Prf64::new(subkey(seed, "tree", 0, 0)),
            nonce_mask: (1u64 << p.nonce_bits) - 1,
            draw_ctr: 0,
            init_puts: 0,
        };

        let payload_words = p.item_payload_words;
        for k in (0..r).rev() {
            for j in 0..oram.sizes[k] {
                let mut payload = vec![0u64; payload_words];
                if k == r - 1 {
                    payload[0] = (j * bprime) as u64;
                } else {
                    for t in 0..oram.child_count(k, j) {
                        let child_id = oram.id_base[k + 1] + (j * bprime + t) as u64;
                        payload[2 * t] = oram.init_nonce(child_id);
                        payload[2 * t + 1] = child_id;
                    }
                }
                let id = oram.id_base[k] + j as u64;
                let key = oram.node_key(oram.init_nonce(id), id);
                oram.iso.put(server, key, &payload)?;
                oram.init_puts += 1;
            }
        }
        oram.root = (0..oram.sizes[0])
            .flat_map(|t| {
                let id = oram.id_base[0] + t as u64;
                [oram.init_nonce(id), id]
            })
            .collect();
        Ok(oram)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn depth(&self) -> usize {
        self.r
    }

    pub fn init_put_count(&self) -> u64 {
        self.init_puts
    }

    pub fn engine_mut(&mut self) -> &mut IsoOs {
        &mut self.iso
    }

    pub fn engine(&self) -> &IsoOs {
        &self.iso
    }

    /// Test hook: forwards a lowered root insertion budget to the engine
    /// so restarts can be forced deterministically.
    pub fn force_restart_cap(&mut self, cap: Option<usize>) {
        self.iso.set_root_insert_cap(cap);
    }

    pub fn read(&mut self, server: &mut SimServer, i: usize) -> Result<u64, OsError> {
        self.access(server, i, None)
    }

    /// Returns the word the write replaced.
    pub fn write(&mut self, server: &mut SimServer, i: usize, v: u64) -> Result<u64, OsError> {
        self.access(server, i, Some(v))
    }

    fn access(&mut self, server: &mut SimServer, i: usize, new_v: Option<u64>) -> Result<u64, OsError> {
        if i >= self.n {
            return Err(OsError::IndexOutOfRange { index: i, n: self.n });
        }
        let leaf_path = i / self.bprime;
        let off = i % self.bprime;

        let mut fetched: Vec<Vec<u64>> = Vec::with_capacity(self.r);
        let mut slot = self.root_slot(leaf_path);
        for k in 0..self.r {
            let (nonce, id) = slot;
            debug_assert_eq!(id, self.id_base[k] + self.node_index(leaf_path, k) as u64);
            let payload = self
                .iso
                .get(server, self.node_key(nonce, id))?
                .ok_or(OsError::ItemMissing)?;
            if k + 1 < self.r {
                let d = self.child_digit(leaf_path, k);
                slot = (payload[2 * d], payload[2 * d + 1]);
            }
            fetched.push(payload);
        }

        let old = fetched[self.r - 1][1 + off];
        let mut reinserted: Option<(u64, u64)> = None;
        for k in (0..self.r).rev() {
            let mut payload = std::mem::take(&mut fetched[k]);
            if k == self.r - 1 {
                if let Some(v) = new_v {
                    payload[1 + off] = v;
                }
            } else if let Some((child_nonce, child_id)) = reinserted {
                let d = self.child_digit(leaf_path, k);
                debug_assert_eq!(payload[2 * d + 1], child_id);
                payload[2 * d] = child_nonce;
            }
            let id = self.id_base[k] + self.node_index(leaf_path, k) as u64;
            let old_nonce = if k == 0 {
                self.root[2 * self.node_index(leaf_path, 0)]
            } else {
                fetched[k - 1][2 * self.child_digit(leaf_path, k - 1)]
            };
            let nonce = self.fresh_nonce(old_nonce);
            self.iso.put(server, self.node_key(nonce, id), &payload)?;
            reinserted = Some((nonce, id));
        }
        let top = self.node_index(leaf_path, 0);
        self.root[2 * top] = reinserted.unwrap().0;
        Ok(old)
    }

    /// Index of the node on this leaf's path within stored level `k`.
    fn node_index(&self, leaf_path: usize, k: usize) -> usize {
        leaf_path >> ((self.r - 1 - k) as u32 * self.lb)
    }

    /// Which child slot of the level-`k` path node leads to the leaf.
    fn child_digit(&self, leaf_path: usize, k: usize) -> usize {
        self.node_index(leaf_path, k + 1) & (self.bprime - 1)
    }

    fn child_count(&self, k: usize, j: usize) -> usize {
        debug_assert!(k + 1 < self.r);
        self.bprime.min(self.sizes[k + 1] - j * self.bprime)
    }

    fn root_slot(&self, leaf_path: usize) -> (u64, u64) {
        let t = self.node_index(leaf_path, 0);
        (self.root[2 * t], self.root[2 * t + 1])
    }

    fn node_key(&self, nonce: u64, id: u64) -> u64 {
        (nonce << self.iso.tag_bits()) | id
    }

    fn init_nonce(&self, id: u64) -> u64 {
        self.nonce_prf.eval2(0, id) & self.nonce_mask
    }

    /// Fresh nonce for a re-keyed node, redrawn if it would collide with
    /// the node's still-live key.
    fn fresh_nonce(&mut self, current: u64) -> u64 {
        loop {
            let nonce = self.nonce_prf.eval2(1, self.draw_ctr) & self.nonce_mask;
            self.draw_ctr += 1;
            if nonce != current {
                return nonce;
            }
        }
    }
}
