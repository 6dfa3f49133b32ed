//! FIFO queue and LIFO stack with data-independent traffic.
//!
//! Both structures keep a pool of dummy cells alongside the real ones and
//! spend exactly one lookup and one insertion per operation, whatever the
//! operation is. A rejected push or an empty pop consumes a dummy and mints
//! a new one, so the hierarchy sees the same two-op rhythm either way, and
//! the number of live cells never changes after construction.

use crate::error::OsError;
use crate::iso_os::IsoOs;
use crate::params::Params;
use crate::rng::{subkey, Prf64};
use crate::server::SimServer;

const REAL: u64 = 0;
const DUMMY: u64 = 1;

/// Keyed cell storage shared by the queue and the stack.
///
/// A cell is addressed by `(array, ordinal)`. Ordinals never repeat within
/// an array, so each cell key is inserted once and looked up once over the
/// whole run, and its nonce can be recomputed from a keyed function instead
/// of being remembered.
pub(crate) struct CellStore {
    iso: IsoOs,
    prf: Prf64,
    nonce_mask: u64,
    array_shift: u32,
}

impl CellStore {
    pub(crate) fn new(iso: IsoOs, seed: u128, instance: u64) -> CellStore {
        let nonce_mask = (1u64 << iso.nonce_bits()) - 1;
        let array_shift = iso.tag_bits() - 2;
        CellStore {
            prf: Prf64::new(subkey(seed, "cell-nonce", instance, 0)),
            nonce_mask,
            array_shift,
            iso,
        }
    }

    fn key(&self, array: u64, ordinal: u64) -> u64 {
        assert!(ordinal < 1u64 << self.array_shift, "cell ordinal overflow");
        let nonce = self.prf.eval2(array, ordinal) & self.nonce_mask;
        let tag = (array << self.array_shift) | ordinal;
        (nonce << self.iso.tag_bits()) | tag
    }

    pub(crate) fn get(
        &mut self,
        server: &mut SimServer,
        array: u64,
        ordinal: u64,
    ) -> Result<Vec<u64>, OsError> {
        let key = self.key(array, ordinal);
        self.iso.get(server, key)?.ok_or(OsError::ItemMissing)
    }

    pub(crate) fn put(
        &mut self,
        server: &mut SimServer,
        array: u64,
        ordinal: u64,
        payload: &[u64],
    ) -> Result<(), OsError> {
        let key = self.key(array, ordinal);
        self.iso.put(server, key, payload)
    }

    pub(crate) fn engine(&self) -> &IsoOs {
        &self.iso
    }

    pub(crate) fn engine_mut(&mut self) -> &mut IsoOs {
        &mut self.iso
    }
}

/// A queue operation, for driving a queue from a recorded script.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueOp {
    Enqueue(u64),
    Dequeue,
    Noop,
}

/// Bounded FIFO queue of words.
///
/// Real cells carry ever-increasing ordinals, consumed in arrival order;
/// the dummy pool holds `cap + 1` cells so a degraded operation always has
/// one to spend.
pub struct IsoQueue {
    cells: CellStore,
    cap: u64,
    head: u64,
    tail: u64,
    pool_head: u64,
    pool_tail: u64,
}

impl IsoQueue {
    pub fn new(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        cap: usize,
    ) -> Result<IsoQueue, OsError> {
        IsoQueue::build(server, p, seed, cap, false)
    }

    /// Like `new`, with the online key checker attached before the first
    /// insertion so it observes the whole stream.
    pub fn new_checked(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        cap: usize,
    ) -> Result<IsoQueue, OsError> {
        IsoQueue::build(server, p, seed, cap, true)
    }

    fn build(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        cap: usize,
        checked: bool,
    ) -> Result<IsoQueue, OsError> {
        let mut iso = IsoOs::new(server, seed, p, 1, 2 * cap + 3)?;
        if checked {
            iso.attach_checker();
        }
        let mut q = IsoQueue {
            cells: CellStore::new(iso, seed, 1),
            cap: cap as u64,
            head: 0,
            tail: 0,
            pool_head: 0,
            pool_tail: 0,
        };
        for _ in 0..=cap {
            q.mint_dummy(server)?;
        }
        Ok(q)
    }

    fn mint_dummy(&mut self, server: &mut SimServer) -> Result<(), OsError> {
        self.cells.put(server, DUMMY, self.pool_tail, &[0])?;
        self.pool_tail += 1;
        Ok(())
    }

    fn spend_dummy(&mut self, server: &mut SimServer) -> Result<(), OsError> {
        self.cells.get(server, DUMMY, self.pool_head)?;
        self.pool_head += 1;
        Ok(())
    }

    /// Appends `v`. Returns `false` when the queue was full; the operation
    /// still runs at full cost.
    pub fn enqueue(&mut self, server: &mut SimServer, v: u64) -> Result<bool, OsError> {
        if self.len() == self.cap as usize {
            self.spend_dummy(server)?;
            self.mint_dummy(server)?;
            return Ok(false);
        }
        self.spend_dummy(server)?;
        self.cells.put(server, REAL, self.tail, &[v])?;
        self.tail += 1;
        Ok(true)
    }

    /// Removes the oldest element, or `None` when empty; the operation
    /// still runs at full cost.
    pub fn dequeue(&mut self, server: &mut SimServer) -> Result<Option<u64>, OsError> {
        if self.is_empty() {
            self.spend_dummy(server)?;
            self.mint_dummy(server)?;
            return Ok(None);
        }
        let body = self.cells.get(server, REAL, self.head)?;
        self.head += 1;
        self.mint_dummy(server)?;
        Ok(Some(body[0]))
    }

    /// Burns one operation without touching the queue contents.
    pub fn noop(&mut self, server: &mut SimServer) -> Result<(), OsError> {
        self.spend_dummy(server)?;
        self.mint_dummy(server)
    }

    pub fn apply(&mut self, server: &mut SimServer, op: QueueOp) -> Result<Option<u64>, OsError> {
        match op {
            QueueOp::Enqueue(v) => self.enqueue(server, v).map(|_| None),
            QueueOp::Dequeue => self.dequeue(server),
            QueueOp::Noop => self.noop(server).map(|_| None),
        }
    }

    pub fn len(&self) -> usize {
        (self.tail - self.head) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.head == self.tail
    }

    pub fn capacity(&self) -> usize {
        self.cap as usize
    }

    pub fn engine(&self) -> &IsoOs {
        self.cells.engine()
    }

    pub fn engine_mut(&mut self) -> &mut IsoOs {
        self.cells.engine_mut()
    }
}

/// Bounded LIFO stack of words.
///
/// Cells form a chain: each one remembers the ordinal of the cell beneath
/// it, and the client holds only the top ordinal, so a pop recovers the new
/// top from the payload it just consumed.
pub struct IsoStack {
    cells: CellStore,
    cap: u64,
    depth: u64,
    top: u64,
    ctr: u64,
    pool_head: u64,
    pool_tail: u64,
}

const NO_CELL: u64 = u64::MAX;

impl IsoStack {
    pub fn new(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        cap: usize,
    ) -> Result<IsoStack, OsError> {
        IsoStack::build(server, p, seed, cap, false)
    }

    /// Like `new`, with the online key checker attached before the first
    /// insertion so it observes the whole stream.
    pub fn new_checked(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        cap: usize,
    ) -> Result<IsoStack, OsError> {
        IsoStack::build(server, p, seed, cap, true)
    }

    fn build(
        server: &mut SimServer,
        p: &Params,
        seed: u128,
        cap: usize,
        checked: bool,
    ) -> Result<IsoStack, OsError> {
        let mut iso = IsoOs::new(server, seed, p, 2, 2 * cap + 3)?;
        if checked {
            iso.attach_checker();
        }
        let mut s = IsoStack {
            cells: CellStore::new(iso, seed, 2),
            cap: cap as u64,
            depth: 0,
            top: NO_CELL,
            ctr: 0,
            pool_head: 0,
            pool_tail: 0,
        };
        for _ in 0..=cap {
            s.mint_dummy(server)?;
        }
        Ok(s)
    }

    fn mint_dummy(&mut self, server: &mut SimServer) -> Result<(), OsError> {
        self.cells.put(server, DUMMY, self.pool_tail, &[0, 0])?;
        self.pool_tail += 1;
        Ok(())
    }

    fn spend_dummy(&mut self, server: &mut SimServer) -> Result<(), OsError> {
        self.cells.get(server, DUMMY, self.pool_head)?;
        self.pool_head += 1;
        Ok(())
    }

    /// Pushes `v`. Returns `false` when the stack was full; the operation
    /// still runs at full cost.
    pub fn push(&mut self, server: &mut SimServer, v: u64) -> Result<bool, OsError> {
        if self.depth == self.cap {
            self.spend_dummy(server)?;
            self.mint_dummy(server)?;
            return Ok(false);
        }
        self.spend_dummy(server)?;
        self.cells.put(server, REAL, self.ctr, &[v, self.top])?;
        self.top = self.ctr;
        self.ctr += 1;
        self.depth += 1;
        Ok(true)
    }

    /// Pops the most recent element, or `None` when empty; the operation
    /// still runs at full cost.
    pub fn pop(&mut self, server: &mut SimServer) -> Result<Option<u64>, OsError> {
        if self.depth == 0 {
            self.spend_dummy(server)?;
            self.mint_dummy(server)?;
            return Ok(None);
        }
        let body = self.cells.get(server, REAL, self.top)?;
        self.top = body[1];
        self.depth -= 1;
        self.mint_dummy(server)?;
        Ok(Some(body[0]))
    }

    pub fn len(&self) -> usize {
        self.depth as usize
    }

    pub fn is_empty(&self) -> bool {
        self.depth == 0
    }

    pub fn engine(&self) -> &IsoOs {
        self.cells.engine()
    }

    pub fn engine_mut(&mut self) -> &mut IsoOs {
        self.cells.engine_mut()
    }
}
