//! Client data structures lowered onto the keyed hierarchy.
//!
//! Each adapter emits a stream that keeps the hierarchy's usage contract:
//! fresh uniform nonces, no key reinserted while live, every lookup aimed
//! at a live key. Per-operation hierarchy op counts are constants fixed
//! at construction, so traffic shape cannot depend on the data.

pub mod queue;
pub mod scan;
pub mod tree;

pub use queue::{IsoQueue, IsoStack, QueueOp};
pub use scan::IsoScanSet;
pub use tree::IsoMap;
