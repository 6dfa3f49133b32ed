//! Simulated block server. It stores words, owns the flat address space,
//! and observes every transfer. All I/O accounting and trace capture for
//! the audit tooling happens here.
//!
//! Addresses are virtual and monotone. Each allocation gets a fresh base
//! above every earlier region, and freed bases are never reused, so an
//! address identifies one region for the lifetime of the run.

use crate::error::ServerError;

/// A block payload as moved over the wire.
pub type MessageBlock = Vec<u64>;

/// Transfer direction, from the client's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dir {
    Read,
    Write,
}

impl Dir {
    fn csv_char(self) -> char {
        match self {
            Dir::Read => 'r',
            Dir::Write => 'w',
        }
    }
}

/// Role of a region, visible to the server and recorded in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionLabel {
    ShuffledArray,
    Cache,
    DummyList,
    Bucket,
    Scratch,
}

impl RegionLabel {
    pub fn csv_name(self) -> &'static str {
        match self {
            RegionLabel::ShuffledArray => "shuffled-array",
            RegionLabel::Cache => "cache",
            RegionLabel::DummyList => "dummy-list",
            RegionLabel::Bucket => "bucket",
            RegionLabel::Scratch => "scratch",
        }
    }

    fn from_u8(x: u8) -> Option<RegionLabel> {
        Some(match x {
            0 => RegionLabel::ShuffledArray,
            1 => RegionLabel::Cache,
            2 => RegionLabel::DummyList,
            3 => RegionLabel::Bucket,
            4 => RegionLabel::Scratch,
            _ => return None,
        })
    }
}

/// How much of the traffic the server keeps.
///
/// `Off` keeps only counters. `Shape` keeps one packed word per transfer
/// with direction, region label, and length. `Full` keeps complete events
/// plus markers and per-word version tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    Off,
    Shape,
    Full,
}

/// Out-of-band annotation attached to the trace at the current sequence
/// number. Markers cost no I/O and exist only for offline audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    RebuildStart { owner: u64, epoch: u64 },
    RebuildDone { owner: u64, epoch: u64 },
    FlushStart { owner: u64 },
    FlushDone { owner: u64 },
    RestartStart,
    RestartDone,
}

/// One recorded transfer. `version` tags which write a read observed,
/// taken from the first covered word; zero means never written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessEvent {
    pub seq: u64,
    pub dir: Dir,
    pub addr: u64,
    pub len: u32,
    pub region: RegionLabel,
    pub version: u32,
}

/// Client-side handle to an allocated region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub id: u32,
    pub base: u64,
    pub words: usize,
}

impl Region {
    pub fn addr(&self, offset: usize) -> u64 {
        self.base + offset as u64
    }
}

/// Allocation record kept for the whole run, including freed regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionInfo {
    pub id: u32,
    pub base: u64,
    pub words: usize,
    pub label: RegionLabel,
    pub owner: u64,
}

/// Captured event stream with markers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub events: Vec<AccessEvent>,
    pub markers: Vec<(u64, Marker)>,
}

const BIN_RECORD_BYTES: usize = 30;

impl Trace {
    /// Renders `seq,dir,addr,len,region,version` rows under a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq,dir,addr,len,region,version\n");
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.seq,
                e.dir.csv_char(),
                e.addr,
                e.len,
                e.region.csv_name(),
                e.version
            ));
        }
        out
    }

    /// Length-prefixed little-endian encoding of the events. Markers are
    /// not serialized.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + BIN_RECORD_BYTES * self.events.len());
        out.extend_from_slice(&(self.events.len() as u64).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.seq.to_le_bytes());
            out.push(match e.dir {
                Dir::Read => 0,
                Dir::Write => 1,
            });
            out.extend_from_slice(&e.addr.to_le_bytes());
            out.extend_from_slice(&(e.len as u64).to_le_bytes());
            out.push(e.region as u8);
            out.extend_from_slice(&e.version.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Option<Trace> {
        let count = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
        let body = bytes.get(8..)?;
        if body.len() != count * BIN_RECORD_BYTES {
            return None;
        }
        let mut events = Vec::with_capacity(count);
        for rec in body.chunks_exact(BIN_RECORD_BYTES) {
            events.push(AccessEvent {
                seq: u64::from_le_bytes(rec[0..8].try_into().ok()?),
                dir: match rec[8] {
                    0 => Dir::Read,
                    1 => Dir::Write,
                    _ => return None,
                },
                addr: u64::from_le_bytes(rec[9..17].try_into().ok()?),
                len: u64::from_le_bytes(rec[17..25].try_into().ok()?) as u32,
                region: RegionLabel::from_u8(rec[25])?,
                version: u32::from_le_bytes(rec[26..30].try_into().ok()?),
            });
        }
        Some(Trace { events, markers: Vec::new() })
    }
}

struct Slab {
    base: u64,
    data: Vec<u64>,
    versions: Vec<u32>,
}

/// The server proper. One instance backs one engine session.
pub struct SimServer {
    b: usize,
    recording: Recording,
    io_count: u64,
    words_moved: u64,
    next_base: u64,
    index: Vec<(u64, u32)>,
    slabs: Vec<Option<Slab>>,
    log: Vec<RegionInfo>,
    shape: Vec<u32>,
    events: Vec<AccessEvent>,
    markers: Vec<(u64, Marker)>,
    last_hit: usize,
}

impl SimServer {
    /// `b` is the maximum words per transfer.
    pub fn new(b: usize) -> SimServer {
        SimServer {
            b,
            recording: Recording::Off,
            io_count: 0,
            words_moved: 0,
            next_base: 64,
            index: Vec::new(),
            slabs: Vec::new(),
            log: Vec::new(),
            shape: Vec::new(),
            events: Vec::new(),
            markers: Vec::new(),
            last_hit: 0,
        }
    }

    pub fn block_words(&self) -> usize {
        self.b
    }

    pub fn set_recording(&mut self, r: Recording) {
        self.recording = r;
    }

    pub fn recording(&self) -> Recording {
        self.recording
    }

    pub fn alloc(&mut self, words: usize, label: RegionLabel, owner: u64) -> Region {
        assert!(words > 0, "allocating an empty region");
        let id = self.slabs.len() as u32;
        let base = self.next_base;
        self.next_base += words as u64 + 1;
        self.slabs.push(Some(Slab { base, data: vec![0; words], versions: Vec::new() }));
        self.index.push((base, id));
        self.log.push(RegionInfo { id, base, words, label, owner });
        Region { id, base, words }
    }

    pub fn free(&mut self, region: Region) -> Result<(), ServerError> {
        let live = self
            .slabs
            .get(region.id as usize)
            .map(|s| s.is_some())
            .unwrap_or(false);
        if !live {
            return Err(ServerError::UnmappedAddress { addr: region.base });
        }
        self.slabs[region.id as usize] = None;
        let pos = self.index.partition_point(|&(b, _)| b < region.base);
        if self.index.get(pos).map(|&(b, _)| b) == Some(region.base) {
            self.index.remove(pos);
        }
        self.last_hit = 0;
        Ok(())
    }

    fn find_region(&mut self, addr: u64) -> Option<u32> {
        if let Some(&(base, id)) = self.index.get(self.last_hit) {
            let end = base + self.slabs[id as usize].as_ref()?.data.len() as u64;
            if addr >= base && addr < end {
                return Some(id);
            }
        }
        let p = self.index.partition_point(|&(b, _)| b <= addr);
        if p == 0 {
            return None;
        }
        let (base, id) = self.index[p - 1];
        let slab = self.slabs[id as usize].as_ref()?;
        if addr < base + slab.data.len() as u64 {
            self.last_hit = p - 1;
            Some(id)
        } else {
            None
        }
    }

    fn locate(&mut self, addr: u64, len: usize) -> Result<(u32, usize), ServerError> {
        if len == 0 {
            return Err(ServerError::ZeroLength { addr });
        }
        if len > self.b {
            return Err(ServerError::LengthOverBlock { len, b: self.b });
        }
        let id = self
            .find_region(addr)
            .ok_or(ServerError::UnmappedAddress { addr })?;
        let slab = self.slabs[id as usize].as_ref().unwrap();
        let end = slab.base + slab.data.len() as u64;
        if addr + len as u64 > end {
            return Err(ServerError::OutOfBounds { addr, len, end });
        }
        Ok((id, (addr - slab.base) as usize))
    }

    fn record(&mut self, dir: Dir, addr: u64, len: usize, id: u32, version: u32) {
        let seq = self.io_count;
        self.io_count += 1;
        self.words_moved += len as u64;
        if self.recording == Recording::Off {
            return;
        }
        let label = self.log[id as usize].label;
        match self.recording {
            Recording::Shape => {
                let d = if dir == Dir::Write { 1u32 } else { 0 };
                self.shape.push((d << 31) | ((label as u32) << 28) | len as u32);
            }
            Recording::Full => {
                self.events.push(AccessEvent { seq, dir, addr, len: len as u32, region: label, version });
            }
            Recording::Off => {}
        }
    }

    fn version_slot(&mut self, id: u32, offset: usize, len: usize) -> &mut [u32] {
        let slab = self.slabs[id as usize].as_mut().unwrap();
        if slab.versions.len() < slab.data.len() {
            slab.versions.resize(slab.data.len(), 0);
        }
        &mut slab.versions[offset..offset + len]
    }

    pub fn read_block(&mut self, addr: u64, len: usize) -> Result<MessageBlock, ServerError> {
        let mut buf = vec![0u64; len];
        self.read_into(addr, &mut buf)?;
        Ok(buf)
    }

    pub fn read_into(&mut self, addr: u64, buf: &mut [u64]) -> Result<(), ServerError> {
        let len = buf.len();
        let (id, offset) = self.locate(addr, len)?;
        let version = if self.recording == Recording::Full {
            self.version_slot(id, offset, 1)[0]
        } else {
            0
        };
        let slab = self.slabs[id as usize].as_ref().unwrap();
        buf.copy_from_slice(&slab.data[offset..offset + len]);
        self.record(Dir::Read, addr, len, id, version);
        Ok(())
    }

    pub fn write_block(&mut self, addr: u64, words: &[u64]) -> Result<(), ServerError> {
        let len = words.len();
        let (id, offset) = self.locate(addr, len)?;
        let tag = (self.io_count + 1) as u32;
        if self.recording == Recording::Full {
            self.version_slot(id, offset, len).fill(tag);
        }
        let slab = self.slabs[id as usize].as_mut().unwrap();
        slab.data[offset..offset + len].copy_from_slice(words);
        self.record(Dir::Write, addr, len, id, tag);
        Ok(())
    }

    pub fn mark(&mut self, marker: Marker) {
        if self.recording != Recording::Off {
            self.markers.push((self.io_count, marker));
        }
    }

    pub fn io_count(&self) -> u64 {
        self.io_count
    }

    pub fn words_moved(&self) -> u64 {
        self.words_moved
    }

    pub fn live_words(&self) -> usize {
        self.slabs
            .iter()
            .flatten()
            .map(|s| s.data.len())
            .sum()
    }

    pub fn region_log(&self) -> &[RegionInfo] {
        &self.log
    }

    pub fn shape(&self) -> &[u32] {
        &self.shape
    }

    pub fn take_shape(&mut self) -> Vec<u32> {
        std::mem::take(&mut self.shape)
    }

    pub fn trace(&self) -> Trace {
        Trace { events: self.events.clone(), markers: self.markers.clone() }
    }

    pub fn take_trace(&mut self) -> Trace {
        Trace {
            events: std::mem::take(&mut self.events),
            markers: std::mem::take(&mut self.markers),
        }
    }
}
