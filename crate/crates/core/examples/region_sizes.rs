//! Region allocation summary after a short run: how big each store's
//! array, cache, and scratch regions actually are.

use std::collections::HashMap;

use bios_oram::{derive_params, Config, Oram, SimServer};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_exp: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(12);
    let ops: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let cfg = Config { n: 1usize << n_exp, b: 256, m: 1024, seed: 7 };
    let p = derive_params(&cfg).unwrap();
    println!(
        "b'={} h={} bucket_cap={} leaf_cap={}",
        p.b_prime, p.h_depth, p.bucket_cap, p.leaf_cap
    );
    let mut server = SimServer::new(cfg.b);
    let mut oram = Oram::new(&mut server, cfg.seed, &p).unwrap();
    let mut rng = StdRng::seed_from_u64(1);
    for k in 0..ops {
        let i = rng.gen_range(0..cfg.n);
        if k % 2 == 0 {
            oram.write(&mut server, i, rng.gen()).unwrap();
        } else {
            oram.read(&mut server, i).unwrap();
        }
    }
    let _ = oram;
    // (owner, label) -> (count, total words, max words, last words)
    let mut agg: HashMap<(u64, &str), (u64, u64, usize, usize)> = HashMap::new();
    for r in server.region_log() {
        let e = agg.entry((r.owner, r.label.csv_name())).or_insert((0, 0, 0, 0));
        e.0 += 1;
        e.1 += r.words as u64;
        e.2 = e.2.max(r.words);
        e.3 = r.words;
    }
    let mut rows: Vec<_> = agg.into_iter().collect();
    rows.sort();
    for ((owner, label), (count, total, max, last)) in rows {
        println!(
            "owner {owner:>4} {label:>14}: {count:>6} allocs, max {max:>8} w, last {last:>8} w, total {total:>12} w"
        );
    }
}
