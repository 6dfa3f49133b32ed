//! Wall-clock and words-moved check for a mixed oracle-style run.

use std::time::Instant;

use bios_oram::{derive_params, Config, Oram, SimServer};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_exp: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let ops: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10_000);
    let cfg = Config { n: 1usize << n_exp, b: 256, m: 1024, seed: 7 };
    let p = derive_params(&cfg).unwrap();
    let mut server = SimServer::new(cfg.b);
    let t0 = Instant::now();
    let mut oram = Oram::new(&mut server, cfg.seed, &p).unwrap();
    let init_s = t0.elapsed().as_secs_f64();
    let w0 = server.words_moved();
    let mut model = vec![0u64; cfg.n];
    let mut rng = StdRng::seed_from_u64(1);
    let t1 = Instant::now();
    for step in 0..ops {
        let i = rng.gen_range(0..cfg.n);
        if rng.gen_bool(0.5) {
            let v = rng.gen();
            assert_eq!(oram.write(&mut server, i, v).unwrap(), model[i], "step {step}");
            model[i] = v;
        } else {
            assert_eq!(oram.read(&mut server, i).unwrap(), model[i], "step {step}");
        }
    }
    let run_s = t1.elapsed().as_secs_f64();
    let dw = server.words_moved() - w0;
    println!(
        "n=2^{n_exp}: init {init_s:.1}s, {ops} ops in {run_s:.1}s, {} words/op, restarts {}",
        dw / ops as u64,
        oram.engine().restart_count()
    );
}
