//! Per-label message and word histogram for a short run.

use bios_oram::{derive_params, Config, Oram, Recording, SimServer};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_exp: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(12);
    let ops: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let cfg = Config { n: 1usize << n_exp, b: 256, m: 1024, seed: 7 };
    let p = derive_params(&cfg).unwrap();
    let mut server = SimServer::new(cfg.b);
    let mut oram = Oram::new(&mut server, cfg.seed, &p).unwrap();
    server.set_recording(Recording::Shape);
    server.take_shape();

    let mut rng = StdRng::seed_from_u64(1);
    for k in 0..ops {
        let i = rng.gen_range(0..cfg.n);
        if k % 2 == 0 {
            oram.write(&mut server, i, rng.gen()).unwrap();
        } else {
            oram.read(&mut server, i).unwrap();
        }
    }
    let shape = server.take_shape();
    let labels = ["shuffled-array", "cache", "dummy-list", "bucket", "scratch"];
    let mut msgs = [0u64; 5];
    let mut words = [0u64; 5];
    let mut rw = [0u64; 2];
    for w in &shape {
        let label = ((w >> 28) & 0x7) as usize;
        let len = (w & 0x0fff_ffff) as u64;
        msgs[label] += 1;
        words[label] += len;
        rw[(w >> 31) as usize] += 1;
    }
    println!("n=2^{n_exp} ops={ops} total msgs={} ({:.0}/op)", shape.len(), shape.len() as f64 / ops as f64);
    for i in 0..5 {
        if msgs[i] > 0 {
            println!(
                "  {:>14}: {:>9} msgs ({:>6.0}/op)  {:>11} words ({:>8.0}/op)",
                labels[i], msgs[i], msgs[i] as f64 / ops as f64, words[i], words[i] as f64 / ops as f64
            );
        }
    }
    println!("  reads={} writes={}", rw[0], rw[1]);
}
