//! Bulk rewrite passes over a fixed item set.
//!
//! A scan set holds `n` items that are processed in rounds: within a round
//! every item must be touched exactly once, in any order. Each access
//! consumes the item under its current-round key and reinserts it under the
//! next round's key, so a full round is `n` lookups and `n` insertions no
//! matter how the caller orders or transforms the items.
//!
//! Round keys are recomputed from a keyed function rather than stored, which
//! keeps client state at one flag per item; the derivation walks the round
//! chain from zero, so it suits bounded sweeps rather than unbounded ones.

use crate::error::OsError;
use crate::iso_os::IsoOs;
use crate::params::Params;
use crate::rng::{subkey, Prf64};
use crate::server::SimServer;

pub struct IsoScanSet {
    iso: IsoOs,
    prf: Prf64,
    nonce_mask: u64,
    n: usize,
    round: u64,
    touched: Vec<bool>,
    touched_count: usize,
}

impl IsoScanSet {
    /// Builds a scan set of `n` zero-filled items of `payload_words` words.
    pub fn new(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        n: usize,
        payload_words: usize,
    ) -> Result<IsoScanSet, OsError> {
        IsoScanSet::build(server, p, seed, n, payload_words, false)
    }

    /// Like [`IsoScanSet::new`], with the online key checker attached
    /// before the first insertion so it observes the whole stream.
    pub fn new_checked(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        n: usize,
        payload_words: usize,
    ) -> Result<IsoScanSet, OsError> {
        IsoScanSet::build(server, p, seed, n, payload_words, true)
    }

    fn build(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        n: usize,
        payload_words: usize,
        checked: bool,
    ) -> Result<IsoScanSet, OsError> {
        let mut iso = IsoOs::new(server, seed, p, payload_words, n + 1)?;
        if checked {
            iso.attach_checker();
        }
        assert!(n >= 1, "a scan set needs at least one item");
        assert!((n as u64) < 1u64 << (iso.tag_bits() - 1), "too many items for the tag width");
        let mut set = IsoScanSet {
            prf: Prf64::new(subkey(seed, "scan-nonce", 0, 0)),
            nonce_mask: (1u64 << iso.nonce_bits()) - 1,
            n,
            round: 0,
            touched: vec![false; n],
            touched_count: 0,
            iso,
        };
        let blank = vec![0u64; payload_words];
        for i in 0..n {
            let key = set.item_key(0, i);
            set.iso.put(server, key, &blank)?;
        }
        Ok(set)
    }

    /// The nonce for item `i` in `round`, redrawn past any candidate that
    /// would repeat the previous round's nonce for the same item.
    fn nonce_for(&self, round: u64, i: usize) -> u64 {
        let mut prev = self.prf.eval2(0, i as u64) & self.nonce_mask;
        for r in 1..=round {
            let mut j = 0u64;
            loop {
                let cand = self.prf.eval2((r << 32) | j, i as u64) & self.nonce_mask;
                if cand != prev {
                    prev = cand;
                    break;
                }
                j += 1;
            }
        }
        prev
    }

    fn item_key(&self, round: u64, i: usize) -> u64 {
        (self.nonce_for(round, i) << self.iso.tag_bits()) | (i as u64 + 1)
    }

    /// Touches item `i` for the current round: hands its payload to `f` and
    /// stores the edited copy for the next round. Returns the payload as it
    /// was before the edit. Touching an item twice in one round is refused
    /// before any traffic is sent.
    pub fn access(
        &mut self,
        server: &mut SimServer,
        i: usize,
        f: impl FnOnce(&mut [u64]),
    ) -> Result<Vec<u64>, OsError> {
        if i >= self.n {
            return Err(OsError::IndexOutOfRange { index: i, n: self.n });
        }
        if self.touched[i] {
            return Err(OsError::DoubleAccess { index: i, round: self.round });
        }
        self.touched[i] = true;
        self.touched_count += 1;

        let old_key = self.item_key(self.round, i);
        let body = self.iso.get(server, old_key)?.ok_or(OsError::ItemMissing)?;
        let mut next = body.clone();
        f(&mut next);
        self.iso.put(server, self.item_key(self.round + 1, i), &next)?;
        Ok(body)
    }

    /// Closes the round. Panics if any item was left untouched, since the
    /// uniform-sweep contract is what keeps the traffic data-independent.
    pub fn finish_round(&mut self) {
        assert_eq!(
            self.touched_count, self.n,
            "round {} left items untouched",
            self.round
        );
        self.round += 1;
        self.touched.fill(false);
        self.touched_count = 0;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn engine(&self) -> &IsoOs {
        &self.iso
    }

    pub fn engine_mut(&mut self) -> &mut IsoOs {
        &mut self.iso
    }
}
