//! Ordered map over a fixed key universe with order statistics.
//!
//! The map is a complete binary tree over the universe `[0, 2^d)`: one leaf
//! per possible key, internal nodes holding per-subtree counts of present
//! leaves and the nonces of their two children. Every operation walks one
//! root-to-leaf path, re-keying each node on the way back up, so insert,
//! search, remove and rank selection all cost exactly `d + 1` lookups and
//! `d + 1` insertions against the hierarchy.

use crate::error::OsError;
use crate::iso_os::IsoOs;
use crate::params::Params;
use crate::rng::{subkey, Prf64};
use crate::server::SimServer;

const PW: usize = 4;

enum LeafEdit {
    Insert(u64),
    Remove,
    Keep,
}

pub struct IsoMap {
    iso: IsoOs,
    prf: Prf64,
    ctr: u64,
    d: u32,
    root_nonce: u64,
    nonce_mask: u64,
    live: u64,
}

impl IsoMap {
    /// Builds an empty map over the universe `[0, 2^depth)`.
    pub fn new(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        depth: u32,
    ) -> Result<IsoMap, OsError> {
        IsoMap::build(server, p, seed, depth, false)
    }

    /// Like [`IsoMap::new`], with the online key checker attached before
    /// the first insertion so it observes the whole stream.
    pub fn new_checked(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        depth: u32,
    ) -> Result<IsoMap, OsError> {
        IsoMap::build(server, p, seed, depth, true)
    }

    fn build(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        depth: u32,
        checked: bool,
    ) -> Result<IsoMap, OsError> {
        let node_count = (2usize << depth) - 1;
        let mut iso = IsoOs::new(server, seed, p, PW, node_count + 1)?;
        if checked {
            iso.attach_checker();
        }
        assert!(depth >= 1, "the universe needs at least two keys");
        assert!(depth + 1 < iso.tag_bits(), "node ids must fit under the tag width");
        let mut map = IsoMap {
            prf: Prf64::new(subkey(seed, "map-nonce", 0, 0)),
            ctr: 0,
            d: depth,
            root_nonce: 0,
            nonce_mask: (1u64 << iso.nonce_bits()) - 1,
            live: 0,
            iso,
        };
        for k in 0..1u64 << depth {
            let id = (1u64 << depth) + k;
            let key = map.node_key(map.init_nonce(id), id);
            map.iso.put(server, key, &[0; PW])?;
        }
        for lvl in (0..depth).rev() {
            for idx in 0..1u64 << lvl {
                let id = (1u64 << lvl) + idx;
                let body = [map.init_nonce(2 * id), map.init_nonce(2 * id + 1), 0, 0];
                let key = map.node_key(map.init_nonce(id), id);
                map.iso.put(server, key, &body)?;
            }
        }
        map.root_nonce = map.init_nonce(1);
        Ok(map)
    }

    fn init_nonce(&self, id: u64) -> u64 {
        self.prf.eval2(0, id) & self.nonce_mask
    }

    fn fresh_nonce(&mut self, current: u64) -> u64 {
        loop {
            let x = self.prf.eval2(1, self.ctr) & self.nonce_mask;
            self.ctr += 1;
            if x != current {
                return x;
            }
        }
    }

    fn node_key(&self, nonce: u64, id: u64) -> u64 {
        (nonce << self.iso.tag_bits()) | id
    }

    /// The shared path walk. Steers by key bits, or by subtree counts when
    /// `by_rank` is set; out-of-range ranks still walk a full path so the
    /// traffic does not reveal whether the rank was valid.
    fn walk(
        &mut self,
        server: &mut SimServer,
        target: u64,
        by_rank: bool,
        edit: LeafEdit,
    ) -> Result<(u64, Option<u64>), OsError> {
        let d = self.d;
        let mut bodies: Vec<Vec<u64>> = Vec::with_capacity(d as usize);
        let mut nonces: Vec<u64> = Vec::with_capacity(d as usize + 1);
        let mut dirs: Vec<usize> = Vec::with_capacity(d as usize);

        let mut id = 1u64;
        let mut nonce = self.root_nonce;
        let mut rank = target;
        let mut leaf_key = 0u64;
        for lvl in 0..d {
            let body = self
                .iso
                .get(server, self.node_key(nonce, id))?
                .expect("a tree node vanished");
            let dir = if by_rank {
                let lc = body[2];
                if rank < lc {
                    0
                } else {
                    rank -= lc;
                    1
                }
            } else {
                ((target >> (d - 1 - lvl)) & 1) as usize
            };
            nonces.push(nonce);
            nonce = body[dir];
            id = 2 * id + dir as u64;
            leaf_key = (leaf_key << 1) | dir as u64;
            bodies.push(body);
            dirs.push(dir);
        }

        let mut leaf = self
            .iso
            .get(server, self.node_key(nonce, id))?
            .expect("a tree leaf vanished");
        let prev = (leaf[0] == 1).then(|| leaf[1]);
        let was = leaf[0] as i64;
        match edit {
            LeafEdit::Insert(v) => {
                leaf[0] = 1;
                leaf[1] = v;
            }
            LeafEdit::Remove => {
                leaf[0] = 0;
                leaf[1] = 0;
            }
            LeafEdit::Keep => {}
        }
        let delta = leaf[0] as i64 - was;

        let mut child_nonce = self.fresh_nonce(nonce);
        self.iso.put(server, self.node_key(child_nonce, id), &leaf)?;
        for lvl in (0..d).rev() {
            let mut body = bodies.pop().unwrap();
            let dir = dirs.pop().unwrap();
            let old = nonces.pop().unwrap();
            id /= 2;
            body[dir] = child_nonce;
            body[2 + dir] = (body[2 + dir] as i64 + delta) as u64;
            child_nonce = self.fresh_nonce(old);
            self.iso.put(server, self.node_key(child_nonce, id), &body)?;
            let _ = lvl;
        }
        self.root_nonce = child_nonce;
        self.live = (self.live as i64 + delta) as u64;
        Ok((leaf_key, prev))
    }

    fn check_key(&self, k: u64) -> Result<(), OsError> {
        if k >> self.d != 0 {
            return Err(OsError::IndexOutOfRange {
                index: k as usize,
                n: 1usize << self.d,
            });
        }
        Ok(())
    }

    /// Maps `k` to `v`, returning the value it replaced.
    pub fn insert(
        &mut self,
        server: &mut SimServer,
        k: u64,
        v: u64,
    ) -> Result<Option<u64>, OsError> {
        self.check_key(k)?;
        Ok(self.walk(server, k, false, LeafEdit::Insert(v))?.1)
    }

    pub fn search(&mut self, server: &mut SimServer, k: u64) -> Result<Option<u64>, OsError> {
        self.check_key(k)?;
        Ok(self.walk(server, k, false, LeafEdit::Keep)?.1)
    }

    /// Unmaps `k`, returning the value that was there.
    pub fn remove(&mut self, server: &mut SimServer, k: u64) -> Result<Option<u64>, OsError> {
        self.check_key(k)?;
        Ok(self.walk(server, k, false, LeafEdit::Remove)?.1)
    }

    /// The `rank`-th smallest mapping, counting from zero.
    pub fn rank_select(
        &mut self,
        server: &mut SimServer,
        rank: u64,
    ) -> Result<Option<(u64, u64)>, OsError> {
        let valid = rank < self.live;
        let (leaf_key, prev) = self.walk(server, rank, true, LeafEdit::Keep)?;
        if !valid {
            return Ok(None);
        }
        let v = prev.expect("counts pointed at an empty leaf");
        Ok(Some((leaf_key, v)))
    }

    pub fn len(&self) -> usize {
        self.live as usize
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn universe(&self) -> u64 {
        1u64 << self.d
    }

    pub fn engine(&self) -> &IsoOs {
        &self.iso
    }

    pub fn engine_mut(&mut self) -> &mut IsoOs {
        &mut self.iso
    }
}
