//! Marker cadence over a run: flushes, rebuilds per store, restarts.

use std::collections::HashMap;

use bios_oram::{derive_params, Config, Marker, Oram, Recording, SimServer};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_exp: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let ops: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let cfg = Config { n: 1usize << n_exp, b: 256, m: 1024, seed: 7 };
    let p = derive_params(&cfg).unwrap();
    let mut server = SimServer::new(cfg.b);
    server.set_recording(Recording::Shape);
    let mut oram = Oram::new(&mut server, cfg.seed, &p).unwrap();
    let init_markers = server.trace().markers.len();
    let mut rng = StdRng::seed_from_u64(1);
    for k in 0..ops {
        let i = rng.gen_range(0..cfg.n);
        if k % 2 == 0 {
            oram.write(&mut server, i, rng.gen()).unwrap();
        } else {
            oram.read(&mut server, i).unwrap();
        }
    }
    println!("restarts (engine counter): {}", oram.engine().restart_count());
    let mut counts: HashMap<String, u64> = HashMap::new();
    let trace = server.trace();
    for (_, kind) in &trace.markers[init_markers..] {
        let name = match kind {
            Marker::FlushStart { owner } => format!("flush level<= {owner}"),
            Marker::FlushDone { .. } => continue,
            Marker::RebuildStart { owner, .. } => format!("rebuild store {owner}"),
            Marker::RebuildDone { .. } => continue,
            Marker::RestartStart => "restart".to_string(),
            Marker::RestartDone => continue,
        };
        *counts.entry(name).or_insert(0) += 1;
    }
    let mut rows: Vec<_> = counts.into_iter().collect();
    rows.sort();
    for (name, c) in rows {
        println!("{name}: {c}");
    }
}
