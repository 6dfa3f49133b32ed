//! Client-side oblivious storage engine over a simulated block server.
//!
//! The crate is organised as a stack. [`params`] derives every size and
//! schedule constant from the user-supplied `(n, B, M)` triple. [`server`]
//! is the honest-but-curious word store that records every block transfer
//! into an adversary-visible trace. [`prims`] provides data-oblivious bulk
//! operations (shuffle, sort, compaction, padded partition) whose access
//! pattern depends only on public sizes. [`small_os`] is a key-value store
//! for bounded item counts whose trace shape is a pure function of its
//! configuration and epoch position. [`iso_os`] composes one such store per
//! node of a static tree into storage for nonce-addressed access sequences,
//! and [`oram`] turns plain `read(i)`/`write(i, v)` calls into such a
//! sequence. [`adapters`] layers a queue, an ordered map, a stack, and a
//! round-based scanner on top, and [`audit`] holds the checkers and
//! measurement harness used by the test suite and the CLI.

pub mod adapters;
pub mod audit;
pub mod error;
pub mod iso_os;
pub mod oram;
pub mod params;
pub mod prims;
pub mod rng;
pub mod server;
pub mod small_os;

pub use adapters::{IsoMap, IsoQueue, IsoScanSet, IsoStack, QueueOp};
pub use audit::{
    chi_square_uniform, distinct_slot_probe, measure_overhead, play_security_game,
    predicted_overhead, scan_distinct_slots, shape_of_run, standard_game_pairs, BenchRow,
    ChiSquare, DistinctSlotReport, GameVerdict, IsoChecker, Script, BENCH_CSV_HEADER,
};
pub use error::{ConfigError, OsError, ServerError};
pub use params::{derive_params, derive_small_os_params, Config, Params, SmallOsParams};
pub use server::{AccessEvent, Dir, Marker, MessageBlock, Recording, Region, RegionLabel, SimServer, Trace};
pub use iso_os::IsoOs;
pub use oram::Oram;
pub use small_os::{Op, SmallOs};
