//! Error types shared across the engine.

use thiserror::Error;

/// Rejection reasons for a `(n, B, M)` configuration.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("memory size {n} is not a power of two")]
    MemoryNotPowerOfTwo { n: usize },

    #[error("block size {b} is not a power of sixteen")]
    BlockNotPowerOfSixteen { b: usize },

    #[error("block size {b} is below 3*log2(n) = {min} for this memory size")]
    BlockBelowLogBound { b: usize, min: usize },

    #[error("client memory {m} holds less than one message block of {b} words")]
    ClientMemoryTooSmall { m: usize, b: usize },

    #[error("block size {b} exceeds half the memory size ({n} words)")]
    BlockTooLarge { b: usize, n: usize },

    #[error("client memory {m} exceeds the memory size ({n} words)")]
    ClientMemoryTooLarge { m: usize, n: usize },

    #[error("store capacity {cap} is outside the supported range 1..={max}")]
    CapacityOutOfRange { cap: usize, max: usize },

    #[error("config line {line} is not a key=value assignment: {text:?}")]
    MalformedConfigLine { line: usize, text: String },

    #[error("config line {line} sets the unknown key {key:?}")]
    UnknownConfigKey { line: usize, key: String },

    #[error("config line {line} gives {key} the unparsable value {value:?}")]
    BadConfigValue { line: usize, key: String, value: String },
}

/// Faults raised by the simulated block server.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServerError {
    #[error("access of {len} words at {addr} runs past the region end at {end}")]
    OutOfBounds { addr: u64, len: usize, end: u64 },

    #[error("requested {len} words but a message block carries at most {b}")]
    LengthOverBlock { len: usize, b: usize },

    #[error("zero-length access at word {addr}")]
    ZeroLength { addr: u64 },

    #[error("no live region covers word {addr}")]
    UnmappedAddress { addr: u64 },
}

/// Faults raised by the oblivious stores and the structures built on them.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OsError {
    #[error("store holds {count} live items and cannot grow past {cap}")]
    OverCapacity { count: usize, cap: usize },

    #[error("element of {elem_words} words does not fit a message block of {b} words")]
    ElementTooLarge { elem_words: usize, b: usize },

    #[error("{count} items routed to one partition slot capped at {cap}")]
    Overflow { count: usize, cap: usize },

    #[error("no live item under the requested key")]
    ItemMissing,

    #[error("cell index {index} out of range for a memory of {n} cells")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("item {index} accessed twice in round {round}")]
    DoubleAccess { index: usize, round: u64 },

    #[error("unlucky state reached ({context}), the session must restart")]
    RestartRequired { context: &'static str },

    #[error("sizing rejected: {0}")]
    Sizing(#[from] ConfigError),

    #[error("server fault: {0}")]
    Server(#[from] ServerError),
}
