//! Acceptance gate for the engine: eight criteria, one test and one
//! printed pass/fail line each. Tolerances are pinned as constants here.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use bios_oram::prims::oblivious_shuffle;
use bios_oram::{
    chi_square_uniform, derive_params, distinct_slot_probe, measure_overhead,
    play_security_game, Config, IsoMap, IsoOs, IsoQueue, IsoScanSet, Oram, RegionLabel,
    SimServer,
};

const ORACLE_OPS: usize = 10_000;
const ORACLE_POINT_LIMIT_S: f64 = 60.0;
const GAME_OPS: usize = 1_000;
const GAME_PAIR_COUNT: usize = 5;
const EPOCH_TARGET: u64 = 500;
const SHUFFLE_TRIALS: u64 = 10_000;
const SHUFFLE_COUNT: usize = 8;
const BAND_LIMIT: f64 = 2.0;
const RARITY_OPS: u64 = 100_000;
const DEMO_OPS: usize = 10_000;

fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({title}): {} [{detail}]",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({title}) failed: {detail}");
}

fn cfg(n: usize, seed: u128) -> Config {
    Config { n, b: 256, m: 1024, seed }
}

#[test]
fn criterion_1_oracle_equivalence() {
    let mut detail = String::new();
    let mut pass = true;
    for (point, n_exp) in [10u32, 12, 16].iter().enumerate() {
        let c = cfg(1usize << n_exp, 100 + point as u128);
        let p = derive_params(&c).unwrap();
        let mut server = SimServer::new(c.b);
        let started = Instant::now();
        let mut oram = Oram::new_checked(&mut server, c.seed, &p).unwrap();
        let mut model = vec![0u64; c.n];
        let mut rng = StdRng::seed_from_u64(*n_exp as u64);

        let mut mismatches = 0usize;
        for k in 0..ORACLE_OPS {
            let i = rng.gen_range(0..c.n);
            if k % 2 == 0 {
                let v = rng.gen::<u64>();
                let old = oram.write(&mut server, i, v).unwrap();
                if old != model[i] {
                    mismatches += 1;
                }
                model[i] = v;
            } else if oram.read(&mut server, i).unwrap() != model[i] {
                mismatches += 1;
            }
        }
        let secs = started.elapsed().as_secs_f64();
        let checker = oram.engine().checker().unwrap();
        let ok = mismatches == 0 && secs < ORACLE_POINT_LIMIT_S && checker.violations() == 0;
        pass &= ok;
        detail.push_str(&format!(
            "n=2^{n_exp}: {mismatches} mismatches over {ORACLE_OPS} ops in {secs:.1}s; "
        ));
    }
    report(1, "oracle equivalence", pass, detail.trim_end_matches("; "));
}

#[test]
fn criterion_2_security_game_exactness() {
    let c = cfg(1 << 12, 1234);
    let verdicts = play_security_game(&c, GAME_OPS).unwrap();
    assert_eq!(verdicts.len(), GAME_PAIR_COUNT);
    let mut detail = String::new();
    let mut pass = true;
    for v in &verdicts {
        pass &= v.passed();
        detail.push_str(&format!(
            "{}: {} events, divergence {:?}; ",
            v.name, v.len_a, v.first_divergence
        ));
    }
    report(2, "security-game exactness", pass, detail.trim_end_matches("; "));
}

#[test]
fn criterion_3_distinct_slots() {
    let c = cfg(1 << 12, 33);
    let p = derive_params(&c).unwrap();
    let rep = distinct_slot_probe(&p, 520, 33).unwrap();
    let pass = rep.epochs >= EPOCH_TARGET && rep.violations == 0;
    report(
        3,
        "distinct-slot property",
        pass,
        &format!("{} epochs, {} probes, {} repeats", rep.epochs, rep.probes, rep.violations),
    );
}

#[test]
fn criterion_4_shuffle_uniformity() {
    let mut server = SimServer::new(256);
    let region = server.alloc(SHUFFLE_COUNT, RegionLabel::Scratch, 0);
    let mut rng = StdRng::seed_from_u64(4);
    let mut counts = [0u64; SHUFFLE_COUNT];
    for _ in 0..SHUFFLE_TRIALS {
        let vals: Vec<u64> = (0..SHUFFLE_COUNT as u64).collect();
        server.write_block(region.addr(0), &vals).unwrap();
        oblivious_shuffle(&mut server, region, SHUFFLE_COUNT, 1, 1024, &mut rng).unwrap();
        let mut first = [0u64; 1];
        server.read_into(region.addr(0), &mut first).unwrap();
        counts[first[0] as usize] += 1;
    }
    let cs = chi_square_uniform(&counts);
    report(
        4,
        "shuffle uniformity",
        cs.passed(),
        &format!(
            "chi-square {:.2} over {} bins vs five-sigma bound {:.2}; counts {counts:?}",
            cs.stat, cs.bins, cs.threshold
        ),
    );
}

#[test]
fn criterion_5_overhead_scaling() {
    let points: [(usize, u64); 3] = [(1 << 12, 3_000), (1 << 16, 10_000), (1 << 20, 1_000)];
    let mut rows = Vec::new();
    for (point, (n, ops)) in points.iter().enumerate() {
        let c = cfg(*n, 500 + point as u128);
        rows.push(measure_overhead(&c, *ops).unwrap());
    }
    let mut detail = String::new();
    for r in &rows {
        detail.push_str(&format!(
            "n={}: {:.0} msgs/op, ratio {:.0}; ",
            r.n, r.amortized_io, r.ratio
        ));
    }
    let lo = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.ratio).fold(0.0f64, f64::max);
    let mean = rows.iter().map(|r| r.ratio).sum::<f64>() / rows.len() as f64;
    let band = hi / lo;
    detail.push_str(&format!("constant {mean:.0}, band {band:.2}"));
    report(5, "overhead scaling", band <= BAND_LIMIT, &detail);
}

/// Client-chosen keys for driving the hierarchy directly: a fresh random
/// nonce over a counter tag.
fn client_key(p: &bios_oram::Params, rng: &mut StdRng, tag: u64) -> u64 {
    let nonce = rng.gen::<u64>() & ((1u64 << p.nonce_bits) - 1);
    let tag_bits = 63 - p.nonce_bits;
    assert!(tag < 1u64 << (tag_bits - 1));
    (nonce << tag_bits) | tag
}

#[test]
fn criterion_6_flush_overflow_rarity() {
    let c = cfg(1 << 16, 66);
    let p = derive_params(&c).unwrap();
    let mut server = SimServer::new(c.b);
    let mut iso = IsoOs::new(&mut server, c.seed, &p, 1, 8).unwrap();
    iso.attach_checker();
    let mut rng = StdRng::seed_from_u64(66);
    let mut window: VecDeque<(u64, u64)> = VecDeque::new();
    let mut tag = 1u64;
    for step in 0..RARITY_OPS {
        if step % 2 == 0 {
            let key = client_key(&p, &mut rng, tag);
            iso.put(&mut server, key, &[tag]).unwrap();
            window.push_back((key, tag));
            tag += 1;
        } else {
            let (key, want) = window.pop_front().unwrap();
            let got = iso.get(&mut server, key).unwrap().unwrap();
            assert_eq!(got[0], want);
        }
    }
    let natural_restarts = iso.restart_count();
    let checker_clean = iso.checker().unwrap().violations() == 0;

    let cd = cfg(1 << 12, 67);
    let pd = derive_params(&cd).unwrap();
    let mut server2 = SimServer::new(cd.b);
    let mut drill = IsoOs::new(&mut server2, cd.seed, &pd, 1, 128).unwrap();
    drill.attach_checker();
    drill.set_root_insert_cap(Some(1));
    let mut model: HashMap<u64, u64> = HashMap::new();
    let mut live: Vec<u64> = Vec::new();
    let mut rng2 = StdRng::seed_from_u64(67);
    let mut mismatches = 0usize;
    for t in 1..=120u64 {
        if t % 2 == 1 || live.is_empty() {
            let key = client_key(&pd, &mut rng2, t);
            drill.put(&mut server2, key, &[t]).unwrap();
            model.insert(key, t);
            live.push(key);
        } else {
            let key = live.swap_remove(rng2.gen_range(0..live.len()));
            let got = drill.get(&mut server2, key).unwrap().map(|b| b[0]);
            if got != model.remove(&key) {
                mismatches += 1;
            }
        }
    }
    for key in live {
        let got = drill.get(&mut server2, key).unwrap().map(|b| b[0]);
        if got != model.remove(&key) {
            mismatches += 1;
        }
    }
    let forced = drill.restart_count();
    let drill_clean = drill.checker().unwrap().violations() == 0;

    let pass = natural_restarts == 0
        && checker_clean
        && forced > 0
        && mismatches == 0
        && drill_clean;
    report(
        6,
        "flush-overflow rarity",
        pass,
        &format!(
            "{natural_restarts} restarts over {RARITY_OPS} ops at n=2^16; forced drill: \
             {forced} restarts, {mismatches} mismatches"
        ),
    );
}

#[test]
fn criterion_7_isogrammic_discipline() {
    let mut total_events = 0u64;
    let mut total_violations = 0u64;
    let mut runs = 0u32;

    {
        let c = cfg(1 << 10, 71);
        let p = derive_params(&c).unwrap();
        let mut server = SimServer::new(c.b);
        let mut oram = Oram::new_checked(&mut server, c.seed, &p).unwrap();
        let mut rng = StdRng::seed_from_u64(71);
        for k in 0..500usize {
            let i = rng.gen_range(0..c.n);
            if k % 2 == 0 {
                oram.write(&mut server, i, rng.gen()).unwrap();
            } else {
                oram.read(&mut server, i).unwrap();
            }
        }
        let ch = oram.engine().checker().unwrap();
        total_events += ch.puts() + ch.gets();
        total_violations += ch.violations();
        runs += 1;
    }

    {
        let c = cfg(1 << 12, 72);
        let p = derive_params(&c).unwrap();
        let mut server = SimServer::new(c.b);
        let mut q = IsoQueue::new_checked(&mut server, &p, c.seed, 24).unwrap();
        let mut rng = StdRng::seed_from_u64(72);
        for _ in 0..300usize {
            match rng.gen_range(0..3) {
                0 => {
                    q.enqueue(&mut server, rng.gen()).unwrap();
                }
                1 => {
                    q.dequeue(&mut server).unwrap();
                }
                _ => q.noop(&mut server).unwrap(),
            }
        }
        let ch = q.engine().checker().unwrap();
        total_events += ch.puts() + ch.gets();
        total_violations += ch.violations();
        runs += 1;
    }

    {
        let c = cfg(1 << 12, 73);
        let p = derive_params(&c).unwrap();
        let mut server = SimServer::new(c.b);
        let mut map = IsoMap::new_checked(&mut server, &p, c.seed, 5).unwrap();
        let mut rng = StdRng::seed_from_u64(73);
        for _ in 0..150usize {
            let k = rng.gen_range(0..map.universe());
            match rng.gen_range(0..4) {
                0 => {
                    map.insert(&mut server, k, rng.gen()).unwrap();
                }
                1 => {
                    map.search(&mut server, k).unwrap();
                }
                2 => {
                    map.remove(&mut server, k).unwrap();
                }
                _ => {
                    map.rank_select(&mut server, rng.gen_range(0..6)).unwrap();
                }
            }
        }
        let ch = map.engine().checker().unwrap();
        total_events += ch.puts() + ch.gets();
        total_violations += ch.violations();
        runs += 1;
    }

    {
        let c = cfg(1 << 12, 74);
        let p = derive_params(&c).unwrap();
        let mut server = SimServer::new(c.b);
        let mut set = IsoScanSet::new_checked(&mut server, &p, c.seed, 40, 1).unwrap();
        for round in 0..3u64 {
            for i in 0..40usize {
                set.access(&mut server, i, |w| w[0] += round).unwrap();
            }
            set.finish_round();
        }
        let ch = set.engine().checker().unwrap();
        total_events += ch.puts() + ch.gets();
        total_violations += ch.violations();
        runs += 1;
    }

    {
        let c = cfg(1 << 12, 75);
        let p = derive_params(&c).unwrap();
        let mut server = SimServer::new(c.b);
        let mut iso = IsoOs::new(&mut server, c.seed, &p, 1, 8).unwrap();
        iso.attach_checker();
        iso.set_root_insert_cap(Some(2));
        let mut rng = StdRng::seed_from_u64(75);
        let mut keys = VecDeque::new();
        for t in 1..=80u64 {
            if t % 2 == 1 {
                let key = client_key(&p, &mut rng, t);
                iso.put(&mut server, key, &[t]).unwrap();
                keys.push_back(key);
            } else {
                iso.get(&mut server, keys.pop_front().unwrap()).unwrap().unwrap();
            }
        }
        assert!(iso.restart_count() > 0, "the drill run must exercise restarts");
        let ch = iso.checker().unwrap();
        total_events += ch.puts() + ch.gets();
        total_violations += ch.violations();
        runs += 1;
    }

    report(
        7,
        "isogrammic discipline",
        total_violations == 0 && runs == 5,
        &format!(
            "{total_violations} violations over {total_events} checked events in {runs} runs \
             (criteria 1, 2, 6, 8 assert their own attached checkers as well)"
        ),
    );
}

#[test]
fn criterion_8_adapter_demos() {
    let c = cfg(1 << 12, 81);
    let p = derive_params(&c).unwrap();

    let mut server = SimServer::new(c.b);
    let cap = 64usize;
    let mut q = IsoQueue::new_checked(&mut server, &p, c.seed, cap).unwrap();
    let mut q_oracle: VecDeque<u64> = VecDeque::new();
    let mut rng = StdRng::seed_from_u64(81);
    let mut q_mismatches = 0usize;
    let engine_before = q.engine().op_count();
    for step in 0..DEMO_OPS {
        let roll = match step {
            0..=150 => 0,
            s if s > DEMO_OPS - 150 => 1,
            _ => rng.gen_range(0..10),
        };
        match roll {
            0..=4 => {
                let v = rng.gen::<u64>();
                let took = q.enqueue(&mut server, v).unwrap();
                if took != (q_oracle.len() < cap) {
                    q_mismatches += 1;
                }
                if took {
                    q_oracle.push_back(v);
                }
            }
            5..=8 => {
                if q.dequeue(&mut server).unwrap() != q_oracle.pop_front() {
                    q_mismatches += 1;
                }
            }
            _ => q.noop(&mut server).unwrap(),
        }
    }
    let queue_cost_exact = q.engine().op_count() - engine_before == 2 * DEMO_OPS as u64;
    let queue_clean = q.engine().checker().unwrap().violations() == 0;

    let d = 6u32;
    let mut server2 = SimServer::new(c.b);
    let mut map = IsoMap::new_checked(&mut server2, &p, 82, d).unwrap();
    let mut m_oracle: BTreeMap<u64, u64> = BTreeMap::new();
    let mut rng2 = StdRng::seed_from_u64(82);
    let mut m_mismatches = 0usize;
    let map_before = map.engine().op_count();
    for _ in 0..DEMO_OPS {
        let k = rng2.gen_range(0..map.universe());
        let same = match rng2.gen_range(0..8) {
            0..=2 => {
                let v = rng2.gen::<u64>();
                map.insert(&mut server2, k, v).unwrap() == m_oracle.insert(k, v)
            }
            3..=4 => map.search(&mut server2, k).unwrap() == m_oracle.get(&k).copied(),
            5..=6 => map.remove(&mut server2, k).unwrap() == m_oracle.remove(&k),
            _ => {
                let r = rng2.gen_range(0..m_oracle.len() as u64 + 2);
                map.rank_select(&mut server2, r).unwrap()
                    == m_oracle.iter().nth(r as usize).map(|(a, b)| (*a, *b))
            }
        };
        if !same {
            m_mismatches += 1;
        }
    }
    let map_cost_exact =
        map.engine().op_count() - map_before == 2 * (d as u64 + 1) * DEMO_OPS as u64;
    let map_clean = map.engine().checker().unwrap().violations() == 0;

    let mut queue_shapes = Vec::new();
    for variant in 0..3u64 {
        let mut sv = SimServer::new(c.b);
        sv.set_recording(bios_oram::Recording::Shape);
        let mut qq = IsoQueue::new(&mut sv, &p, 83, 16).unwrap();
        let mut r = StdRng::seed_from_u64(variant);
        for i in 0..250usize {
            match variant {
                0 => {
                    qq.enqueue(&mut sv, i as u64).unwrap();
                }
                1 => {
                    qq.dequeue(&mut sv).unwrap();
                }
                _ => match r.gen_range(0..3) {
                    0 => {
                        qq.enqueue(&mut sv, r.gen()).unwrap();
                    }
                    1 => {
                        qq.dequeue(&mut sv).unwrap();
                    }
                    _ => qq.noop(&mut sv).unwrap(),
                },
            }
        }
        queue_shapes.push(sv.take_shape());
    }
    let queue_shape_equal = queue_shapes[0] == queue_shapes[1] && queue_shapes[0] == queue_shapes[2];

    let mut map_shapes = Vec::new();
    for variant in 0..2u64 {
        let mut sv = SimServer::new(c.b);
        sv.set_recording(bios_oram::Recording::Shape);
        let mut mm = IsoMap::new(&mut sv, &p, 84, 5).unwrap();
        let mut r = StdRng::seed_from_u64(variant + 9);
        for i in 0..120usize {
            match variant {
                0 => {
                    mm.insert(&mut sv, 0, i as u64).unwrap();
                }
                _ => match r.gen_range(0..4) {
                    0 => {
                        mm.insert(&mut sv, r.gen_range(0..32), r.gen()).unwrap();
                    }
                    1 => {
                        mm.search(&mut sv, r.gen_range(0..32)).unwrap();
                    }
                    2 => {
                        mm.remove(&mut sv, r.gen_range(0..32)).unwrap();
                    }
                    _ => {
                        mm.rank_select(&mut sv, r.gen_range(0..8)).unwrap();
                    }
                },
            }
        }
        map_shapes.push(sv.take_shape());
    }
    let map_shape_equal = map_shapes[0] == map_shapes[1];

    let pass = q_mismatches == 0
        && m_mismatches == 0
        && queue_cost_exact
        && map_cost_exact
        && queue_clean
        && map_clean
        && queue_shape_equal
        && map_shape_equal;
    report(
        8,
        "adapter demos",
        pass,
        &format!(
            "queue: {q_mismatches} mismatches over {DEMO_OPS} ops, shapes equal {queue_shape_equal}; \
             map: {m_mismatches} mismatches over {DEMO_OPS} ops, shapes equal {map_shape_equal}"
        ),
    );
}
