//! Checkers and measurement harnesses used by the test suite and the CLI.
//!
//! Everything here observes; nothing here participates in serving data.
//! The online key checker validates the discipline of the put/get stream a
//! client emits, the replay scanner validates distinct-slot behaviour from
//! a recorded trace, the security game compares traffic shapes between
//! adversarially chosen access scripts, and the bench harness measures
//! amortized I/O against the expected growth curve.

use std::collections::{HashMap, HashSet, VecDeque};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::OsError;
use crate::oram::Oram;
use crate::params::{derive_params, derive_small_os_params, Config, Params};
use crate::server::{Dir, Marker, Recording, RegionInfo, RegionLabel, SimServer, Trace};
use crate::small_os::{Op, SmallOs};

/// Online validator for a keyed put/get stream.
///
/// Three conditions are enforced: a get must target a key that was put and
/// not yet consumed, a put must not reuse a key that is still live, and the
/// nonce carried by a put must differ from the previous nonce seen for the
/// same tag. Uniformity of the nonces is a statistical property and is
/// tested separately; this checker covers the exact, per-event rules.
#[derive(Debug)]
pub struct IsoChecker {
    nonce_bits: u32,
    tag_bits: u32,
    live: HashSet<u64>,
    last_nonce: HashMap<u64, u64>,
    puts: u64,
    gets: u64,
    violation_count: u64,
    samples: Vec<String>,
}

const SAMPLE_CAP: usize = 8;

impl IsoChecker {
    pub fn new(nonce_bits: u32, tag_bits: u32) -> IsoChecker {
        IsoChecker {
            nonce_bits,
            tag_bits,
            live: HashSet::new(),
            last_nonce: HashMap::new(),
            puts: 0,
            gets: 0,
            violation_count: 0,
            samples: Vec::new(),
        }
    }

    fn flag(&mut self, msg: String) {
        self.violation_count += 1;
        if self.samples.len() < SAMPLE_CAP {
            self.samples.push(msg);
        }
    }

    pub fn on_put(&mut self, key: u64) {
        self.puts += 1;
        if key >> (self.nonce_bits + self.tag_bits) != 0 {
            self.flag(format!("put key {key:#x} is wider than nonce plus tag"));
        }
        let nonce = (key >> self.tag_bits) & ((1u64 << self.nonce_bits) - 1);
        let tag = key & ((1u64 << self.tag_bits) - 1);
        if !self.live.insert(key) {
            self.flag(format!("put reuses the live key {key:#x}"));
        }
        if self.last_nonce.insert(tag, nonce) == Some(nonce) {
            self.flag(format!("tag {tag:#x} was re-keyed with its previous nonce {nonce:#x}"));
        }
    }

    pub fn on_get(&mut self, key: u64) {
        self.gets += 1;
        if !self.live.remove(&key) {
            self.flag(format!("get of a key that is not live: {key:#x}"));
        }
    }

    pub fn violations(&self) -> u64 {
        self.violation_count
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn puts(&self) -> u64 {
        self.puts
    }

    pub fn gets(&self) -> u64 {
        self.gets
    }

    pub fn live_now(&self) -> usize {
        self.live.len()
    }
}

/// One scripted memory access: cell index, and the value to write or
/// `None` for a read.
pub type Script = Vec<(usize, Option<u64>)>;

/// Outcome of one shape comparison between two scripts.
#[derive(Debug, Clone)]
pub struct GameVerdict {
    pub name: String,
    pub len_a: usize,
    pub len_b: usize,
    pub first_divergence: Option<usize>,
}

impl GameVerdict {
    pub fn passed(&self) -> bool {
        self.first_divergence.is_none() && self.len_a == self.len_b
    }
}

/// Runs `script` on a fresh engine and returns the packed shape trace of
/// the whole run, construction included.
pub fn shape_of_run(cfg: &Config, script: &[(usize, Option<u64>)]) -> Result<Vec<u32>, OsError> {
    let p = derive_params(cfg)?;
    let mut server = SimServer::new(cfg.b);
    server.set_recording(Recording::Shape);
    let mut oram = Oram::new_checked(&mut server, cfg.seed, &p)?;
    for &(i, w) in script {
        match w {
            Some(v) => {
                oram.write(&mut server, i, v)?;
            }
            None => {
                oram.read(&mut server, i)?;
            }
        }
    }
    let checker = oram.engine().checker().expect("checked construction");
    assert_eq!(checker.violations(), 0, "{:?}", checker.samples());
    Ok(server.take_shape())
}

/// Adversarial script pairs for the indistinguishability game. Each pair
/// is chosen so that a leaky engine would produce visibly different
/// traffic: pinned against spread indices, reads against writes, sweeps
/// against hot spots.
pub fn standard_game_pairs(n: usize, ops: usize, seed: u64) -> Vec<(String, Script, Script)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut pairs = Vec::new();

    let pinned: Script = (0..ops).map(|_| (17 % n, Some(rng.gen()))).collect();
    let spread: Script = (0..ops).map(|_| (rng.gen_range(0..n), Some(rng.gen()))).collect();
    pairs.push(("pinned-index writes vs uniform writes".into(), pinned, spread));

    let sweep: Script = (0..ops).map(|i| (i % n, None)).collect();
    let random_reads: Script = (0..ops).map(|_| (rng.gen_range(0..n), None)).collect();
    pairs.push(("sweeping reads vs uniform reads".into(), sweep, random_reads));

    let idx: Vec<usize> = (0..ops).map(|_| rng.gen_range(0..n)).collect();
    let all_reads: Script = idx.iter().map(|&i| (i, None)).collect();
    let all_writes: Script = idx.iter().map(|&i| (i, Some(rng.gen()))).collect();
    pairs.push(("reads vs writes on matched indices".into(), all_reads, all_writes));

    let hot: Script = (0..ops)
        .map(|_| {
            let i = if rng.gen_bool(0.9) { rng.gen_range(0..8.min(n)) } else { rng.gen_range(0..n) };
            (i, rng.gen_bool(0.5).then(|| rng.gen()))
        })
        .collect();
    let cold: Script = (0..ops)
        .map(|_| (rng.gen_range(0..n), rng.gen_bool(0.5).then(|| rng.gen())))
        .collect();
    pairs.push(("hot-spot mix vs uniform mix".into(), hot, cold));

    let ascending: Script = (0..ops).map(|i| (i % n, Some(i as u64))).collect();
    let descending: Script = (0..ops).map(|i| (n - 1 - (i % n), None)).collect();
    pairs.push(("ascending writes vs descending reads".into(), ascending, descending));

    pairs
}

/// Plays the standard game: for every pair, both scripts run on identically
/// configured fresh engines and their shape traces must match event for
/// event in direction, length, and region kind.
pub fn play_security_game(cfg: &Config, ops: usize) -> Result<Vec<GameVerdict>, OsError> {
    let mut verdicts = Vec::new();
    for (name, a, b) in standard_game_pairs(cfg.n, ops, cfg.seed as u64) {
        let sa = shape_of_run(cfg, &a)?;
        let sb = shape_of_run(cfg, &b)?;
        let common = sa.len().min(sb.len());
        let mut fd = (0..common).find(|&i| sa[i] != sb[i]);
        if fd.is_none() && sa.len() != sb.len() {
            fd = Some(common);
        }
        verdicts.push(GameVerdict { name, len_a: sa.len(), len_b: sb.len(), first_divergence: fd });
    }
    Ok(verdicts)
}

/// Replay summary for the distinct-slot rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistinctSlotReport {
    pub epochs: u64,
    pub probes: u64,
    pub violations: u64,
}

/// Replays a recorded trace and checks that, between two rebuilds of the
/// same store, no shuffled-array address is read twice. Reads issued while
/// the owner is inside a rebuild window are the rebuild's own bulk passes
/// and are exempt.
pub fn scan_distinct_slots(trace: &Trace, regions: &[RegionInfo]) -> DistinctSlotReport {
    let mut bases: Vec<(u64, usize)> =
        regions.iter().enumerate().map(|(at, r)| (r.base, at)).collect();
    bases.sort_unstable();
    let owner_of = |addr: u64| -> Option<&RegionInfo> {
        let at = bases.partition_point(|&(b, _)| b <= addr);
        if at == 0 {
            return None;
        }
        let info = &regions[bases[at - 1].1];
        (addr < info.base + info.words as u64).then_some(info)
    };

    let mut rebuilding: HashSet<u64> = HashSet::new();
    let mut seen: HashMap<u64, HashSet<u64>> = HashMap::new();
    let mut report = DistinctSlotReport { epochs: 0, probes: 0, violations: 0 };

    let mut marks = trace.markers.iter().peekable();
    for ev in &trace.events {
        while let Some(&&(seq, m)) = marks.peek() {
            if seq > ev.seq {
                break;
            }
            match m {
                Marker::RebuildStart { owner, .. } => {
                    rebuilding.insert(owner);
                }
                Marker::RebuildDone { owner, .. } => {
                    rebuilding.remove(&owner);
                    seen.remove(&owner);
                    report.epochs += 1;
                }
                _ => {}
            }
            marks.next();
        }
        if ev.dir != Dir::Read || ev.region != RegionLabel::ShuffledArray {
            continue;
        }
        let Some(info) = owner_of(ev.addr) else { continue };
        if rebuilding.contains(&info.owner) {
            continue;
        }
        report.probes += 1;
        if !seen.entry(info.owner).or_default().insert(ev.addr) {
            report.violations += 1;
        }
    }
    for &(_, m) in marks {
        if let Marker::RebuildDone { .. } = m {
            report.epochs += 1;
        }
    }
    report
}

/// Drives one small store through `epochs` rebuild cycles of mixed traffic
/// under full recording, then replays the trace through the distinct-slot
/// scanner.
pub fn distinct_slot_probe(
    p: &Params,
    epochs: u64,
    seed: u64,
) -> Result<DistinctSlotReport, OsError> {
    let cap = 64usize;
    let sp = derive_small_os_params(p, cap)?;
    let mut server = SimServer::new(p.b);
    server.set_recording(Recording::Full);
    let mut store = SmallOs::new(&mut server, seed as u128, 1, p, &sp, 1, true, true)?;

    let mut rng = StdRng::seed_from_u64(seed);
    let mut next_key = 1u64;
    let mut alive: VecDeque<u64> = VecDeque::new();
    for _ in 0..epochs {
        let window = store.budget().saturating_sub(2);
        let put_room = store.put_budget().saturating_sub(1);
        let mut puts = 0usize;
        for j in 0..window {
            let want_put = (alive.len() < 4 || rng.gen_bool(0.4)) && puts < put_room;
            if want_put {
                store.access(&mut server, Op::Put { key: next_key, payload: &[next_key], orig_dummy: false })?;
                alive.push_back(next_key);
                next_key += 1;
                puts += 1;
            } else if j % 3 == 0 || alive.is_empty() {
                let miss = store.access(&mut server, Op::Get { key: u64::MAX - 1 - j as u64 })?;
                assert!(miss.is_none());
            } else {
                let k = alive.pop_front().unwrap();
                let hit = store.access(&mut server, Op::Get { key: k })?;
                assert_eq!(hit.unwrap()[0], k);
            }
        }
        store.rebuild(&mut server, &[], cap)?;
    }
    let trace = server.take_trace();
    Ok(scan_distinct_slots(&trace, server.region_log()))
}

/// A chi-square statistic over observed bin counts, with the acceptance
/// threshold pinned at five standard deviations above the mean of the
/// chi-square distribution with `bins - 1` degrees of freedom.
#[derive(Debug, Clone, Copy)]
pub struct ChiSquare {
    pub stat: f64,
    pub threshold: f64,
    pub bins: usize,
}

impl ChiSquare {
    pub fn passed(&self) -> bool {
        self.stat < self.threshold
    }
}

pub fn chi_square_uniform(counts: &[u64]) -> ChiSquare {
    let bins = counts.len();
    assert!(bins >= 2, "a uniformity test needs at least two bins");
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / bins as f64;
    assert!(expected > 0.0, "no observations to test");
    let stat = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let df = (bins - 1) as f64;
    ChiSquare { stat, threshold: df + 5.0 * (2.0 * df).sqrt(), bins }
}

/// The modelled per-access message cost for a memory of `n` words served
/// in `b`-word blocks.
pub fn predicted_overhead(n: usize, b: usize) -> f64 {
    let ln = n.trailing_zeros() as f64;
    let lb = b.trailing_zeros() as f64;
    (ln / lb) * (ln / lb)
}

/// One measured point of the overhead grid.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub b: usize,
    pub m: usize,
    pub ops: u64,
    pub total_io: u64,
    pub amortized_io: f64,
    pub predicted: f64,
    pub ratio: f64,
    pub restarts: u64,
    pub wall_ms: u128,
}

pub const BENCH_CSV_HEADER: &str =
    "n,B,M,N,total_io,amortized_io,predicted,ratio,restarts,wall_ms";

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3},{},{}",
            self.n,
            self.b,
            self.m,
            self.ops,
            self.total_io,
            self.amortized_io,
            self.predicted,
            self.ratio,
            self.restarts,
            self.wall_ms
        )
    }

    pub fn to_jsonl(&self) -> String {
        format!(
            "{{\"n\":{},\"b\":{},\"m\":{},\"ops\":{},\"total_io\":{},\"amortized_io\":{:.3},\"predicted\":{:.3},\"ratio\":{:.3},\"restarts\":{},\"wall_ms\":{}}}",
            self.n,
            self.b,
            self.m,
            self.ops,
            self.total_io,
            self.amortized_io,
            self.predicted,
            self.ratio,
            self.restarts,
            self.wall_ms
        )
    }
}

/// Builds a memory for `cfg`, runs `ops` mixed uniform reads and writes,
/// and reports message counts amortized per operation. Construction traffic
/// is excluded; it is a one-time cost proportional to `n`.
pub fn measure_overhead(cfg: &Config, ops: u64) -> Result<BenchRow, OsError> {
    let p = derive_params(cfg)?;
    let mut server = SimServer::new(cfg.b);
    let mut oram = Oram::new(&mut server, cfg.seed, &p)?;
    let after_init = server.io_count();

    let mut rng = StdRng::seed_from_u64(cfg.seed as u64 ^ 0x9e3779b97f4a7c15);
    let start = Instant::now();
    for k in 0..ops {
        let i = rng.gen_range(0..cfg.n);
        if k % 2 == 0 {
            oram.write(&mut server, i, rng.gen())?;
        } else {
            oram.read(&mut server, i)?;
        }
    }
    let wall_ms = start.elapsed().as_millis();

    let total_io = server.io_count() - after_init;
    let amortized_io = total_io as f64 / ops as f64;
    let predicted = predicted_overhead(cfg.n, cfg.b);
    Ok(BenchRow {
        n: cfg.n,
        b: cfg.b,
        m: cfg.m,
        ops,
        total_io,
        amortized_io,
        predicted,
        ratio: amortized_io / predicted,
        restarts: oram.engine().restart_count(),
        wall_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_checker_accepts_a_clean_stream_and_flags_each_rule() {
        let mut c = IsoChecker::new(16, 47);
        let key = |nonce: u64, tag: u64| (nonce << 47) | tag;
        c.on_put(key(5, 1));
        c.on_put(key(9, 2));
        c.on_get(key(5, 1));
        c.on_put(key(6, 1));
        assert_eq!(c.violations(), 0);
        assert_eq!(c.live_now(), 2);

        c.on_get(key(5, 1));
        assert_eq!(c.violations(), 1);
        c.on_put(key(9, 2));
        assert_eq!(c.violations(), 3, "a live re-put repeats the key and the nonce");
        c.on_get(key(9, 2));
        c.on_put(key(9, 2));
        assert_eq!(c.violations(), 4, "a consumed key may return, but not with a stale nonce");
        assert_eq!(c.samples().len(), 4);
        assert_eq!(c.puts(), 5);
        assert_eq!(c.gets(), 3);
    }

    #[test]
    fn chi_square_matches_a_hand_computation() {
        let cs = chi_square_uniform(&[30, 20, 25, 25]);
        assert!((cs.stat - 2.0).abs() < 1e-12);
        assert!((cs.threshold - (3.0 + 5.0 * 6.0f64.sqrt())).abs() < 1e-12);
        assert!(cs.passed());
        assert!(!chi_square_uniform(&[100, 0, 0, 0]).passed());
    }

    #[test]
    fn the_replay_scanner_sees_planted_repeats() {
        use crate::server::{AccessEvent, Region};

        let mut server = SimServer::new(64);
        server.set_recording(Recording::Full);
        let r: Region = server.alloc(640, RegionLabel::ShuffledArray, 7);
        server.mark(Marker::RebuildStart { owner: 7, epoch: 0 });
        server.write_block(r.addr(0), &[1; 64]).unwrap();
        server.read_block(r.addr(0), 8).unwrap();
        server.read_block(r.addr(0), 8).unwrap();
        server.mark(Marker::RebuildDone { owner: 7, epoch: 0 });
        server.read_block(r.addr(8), 8).unwrap();
        server.read_block(r.addr(16), 8).unwrap();
        server.read_block(r.addr(8), 8).unwrap();
        let trace = server.take_trace();
        let rep = scan_distinct_slots(&trace, server.region_log());
        assert_eq!(rep.epochs, 1);
        assert_eq!(rep.probes, 3);
        assert_eq!(rep.violations, 1);

        let synthetic = Trace {
            events: vec![AccessEvent {
                seq: 0,
                dir: Dir::Read,
                addr: r.addr(0),
                len: 8,
                region: RegionLabel::ShuffledArray,
                version: 1,
            }],
            markers: vec![],
        };
        let rep2 = scan_distinct_slots(&synthetic, server.region_log());
        assert_eq!(rep2.violations, 0);
        assert_eq!(rep2.probes, 1);
    }

    #[test]
    fn a_small_store_keeps_slots_distinct_across_many_epochs() {
        let cfg = Config { n: 1 << 12, b: 256, m: 1024, seed: 3 };
        let p = derive_params(&cfg).unwrap();
        let rep = distinct_slot_probe(&p, 40, 3).unwrap();
        assert!(rep.epochs >= 40, "only {} epochs", rep.epochs);
        assert!(rep.probes > 100);
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn the_game_accepts_matched_shapes_and_locates_divergence() {
        let cfg = Config { n: 1 << 10, b: 256, m: 1024, seed: 9 };
        for v in play_security_game(&cfg, 40).unwrap() {
            assert!(v.passed(), "{} diverged at {:?}", v.name, v.first_divergence);
            assert!(v.len_a > 0);
        }

        let a = vec![1u32, 2, 3];
        let b = vec![1u32, 2, 4];
        let fd = (0..3).find(|&i| a[i] != b[i]);
        assert_eq!(fd, Some(2));
    }

    #[test]
    fn an_attached_checker_stays_clean_over_a_memory_workload() {
        let cfg = Config { n: 1 << 10, b: 256, m: 1024, seed: 31 };
        let p = derive_params(&cfg).unwrap();
        let mut server = SimServer::new(cfg.b);
        let mut oram = Oram::new_checked(&mut server, cfg.seed, &p).unwrap();

        let mut rng = StdRng::seed_from_u64(31);
        for k in 0..60u64 {
            let i = rng.gen_range(0..cfg.n);
            if k % 2 == 0 {
                oram.write(&mut server, i, rng.gen()).unwrap();
            } else {
                oram.read(&mut server, i).unwrap();
            }
        }
        let depth = oram.depth();
        let init = oram.init_put_count();
        let c = oram.engine().checker().unwrap();
        assert_eq!(c.violations(), 0, "{:?}", c.samples());
        assert_eq!(c.puts() - init, c.gets());
        assert_eq!(((c.puts() - init + c.gets()) / 60) as usize, 2 * depth);
        assert_eq!(c.live_now() as u64, init);
    }

    #[test]
    fn bench_rows_render_stable_csv_and_json() {
        let row = BenchRow {
            n: 4096,
            b: 256,
            m: 1024,
            ops: 10,
            total_io: 1234,
            amortized_io: 123.4,
            predicted: 2.25,
            ratio: 54.844,
            restarts: 0,
            wall_ms: 0,
        };
        assert_eq!(row.to_csv(), "4096,256,1024,10,1234,123.400,2.250,54.844,0,0");
        assert!(row.to_jsonl().starts_with("{\"n\":4096,"));
        assert_eq!(BENCH_CSV_HEADER.split(',').count(), row.to_csv().split(',').count());
    }
}
