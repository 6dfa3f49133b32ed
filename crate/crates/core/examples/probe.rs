use bios_oram::params::{derive_params, Config};
use bios_oram::server::SimServer;
use bios_oram::Oram;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn main() {
    let n_exp: u32 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let ops: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let p = derive_params(&Config { n: 1 << n_exp, b: 256, m: 1024, seed: 0 }).unwrap();
    let mut server = SimServer::new(p.b);

    let t0 = Instant::now();
    let mut oram = Oram::new(&mut server, 7, &p).unwrap();
    let init_io = server.io_count();
    println!(
        "n=2^{n_exp} init: {} puts, {} messages, {:.1}s, live {} Mwords",
        oram.init_put_count(),
        init_io,
        t0.elapsed().as_secs_f64(),
        server.live_words() / 1_000_000
    );

    let t1 = Instant::now();
    let mut rng = StdRng::seed_from_u64(0);
    for _ in 0..ops {
        let i = rng.gen_range(0..p.n);
        if rng.gen_bool(0.5) {
            oram.write(&mut server, i, 1).unwrap();
        } else {
            oram.read(&mut server, i).unwrap();
        }
    }
    let dt = t1.elapsed().as_secs_f64();
    let io = server.io_count() - init_io;
    println!(
        "{} ops: {:.1}s ({:.2} ms/op), {} messages ({:.0}/op), ratio/pred {:.1}, restarts {}, live {} Mwords",
        ops,
        dt,
        1000.0 * dt / ops as f64,
        io,
        io as f64 / ops as f64,
        io as f64 / ops as f64 / ((n_exp as f64 / 8.0) * (n_exp as f64 / 8.0)),
        oram.engine().restart_count(),
        server.live_words() / 1_000_000
    );
}
