//! Parameter derivation. Every size, depth, and schedule constant used by
//! the engine is computed here from the `(n, B, M)` triple, so the other
//! modules never re-derive them independently.

use crate::error::ConfigError;

/// User-facing configuration: memory size in words, message block size in
/// words, client memory in words, and the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Config {
    pub n: usize,
    pub b: usize,
    pub m: usize,
    pub seed: u128,
}

/// A partial configuration: the keys a config file or flag set actually
/// mentioned. Apply it over a baseline to get a full [`Config`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfigPatch {
    pub n: Option<usize>,
    pub b: Option<usize>,
    pub m: Option<usize>,
    pub seed: Option<u128>,
}

impl ConfigPatch {
    pub fn apply(&self, base: Config) -> Config {
        Config {
            n: self.n.unwrap_or(base.n),
            b: self.b.unwrap_or(base.b),
            m: self.m.unwrap_or(base.m),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

/// Parses `key=value` assignments, one per line. Blank lines and text after
/// `#` are ignored; keys are `n`, `b`, `m`, and `seed` (block and client
/// sizes also accept their capitalized spellings). Values are plain decimal
/// integers. The result records only the keys present; validation happens
/// when the applied config reaches [`derive_params`].
pub fn parse_config_text(text: &str) -> Result<ConfigPatch, ConfigError> {
    let mut patch = ConfigPatch::default();
    for (at, raw) in text.lines().enumerate() {
        let line = at + 1;
        let bare = raw.split('#').next().unwrap_or("").trim();
        if bare.is_empty() {
            continue;
        }
        let Some((key, value)) = bare.split_once('=') else {
            return Err(ConfigError::MalformedConfigLine { line, text: bare.to_string() });
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = |k: &str| ConfigError::BadConfigValue {
            line,
            key: k.to_string(),
            value: value.to_string(),
        };
        match key {
            "n" => patch.n = Some(value.parse().map_err(|_| bad("n"))?),
            "b" | "B" => patch.b = Some(value.parse().map_err(|_| bad("b"))?),
            "m" | "M" => patch.m = Some(value.parse().map_err(|_| bad("m"))?),
            "seed" => patch.seed = Some(value.parse().map_err(|_| bad("seed"))?),
            _ => return Err(ConfigError::UnknownConfigKey { line, key: key.to_string() }),
        }
    }
    Ok(patch)
}

/// Derived engine constants.
///
/// * `b_prime` is the tree fan-out `B^(1/4)`.
/// * `big_l` is the flush period `B^(3/2)`, also the unit of bucket sizing.
/// * `bucket_cap` (`4L`) and `leaf_cap` (`8L`) bound the live item count of
///   interior and leaf buckets.
/// * `subblock_words` is the cell grouping `B'`; `item_payload_words`
///   (`2B'`) is the default payload slot.
/// * `h_depth` and `r_depth` are the depths of the bucket tree and of the
///   memory tree; `nonce_bits` is the width of the random key component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Params {
    pub n: usize,
    pub b: usize,
    pub m: usize,
    pub b_prime: usize,
    pub big_l: usize,
    pub bucket_cap: usize,
    pub leaf_cap: usize,
    pub subblock_words: usize,
    pub item_payload_words: usize,
    pub h_depth: usize,
    pub r_depth: usize,
    pub nonce_bits: u32,
}

/// Derived constants for one bounded-capacity store instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmallOsParams {
    pub cap: usize,
    pub d: usize,
    pub cache_words: usize,
    pub dummy_len: usize,
    pub rebuild_period: usize,
}

fn is_power_of_sixteen(x: usize) -> bool {
    x.is_power_of_two() && x.trailing_zeros() % 4 == 0
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

fn ceil_sqrt(x: usize) -> usize {
    let r = x.isqrt();
    if r * r < x {
        r + 1
    } else {
        r
    }
}

/// Validates a configuration and derives the engine constants.
pub fn derive_params(cfg: &Config) -> Result<Params, ConfigError> {
    if !cfg.n.is_power_of_two() || cfg.n == 0 {
        return Err(ConfigError::MemoryNotPowerOfTwo { n: cfg.n });
    }
    if !is_power_of_sixteen(cfg.b) || cfg.b < 16 {
        return Err(ConfigError::BlockNotPowerOfSixteen { b: cfg.b });
    }
    let log2n = cfg.n.trailing_zeros() as usize;
    if cfg.b < 3 * log2n {
        return Err(ConfigError::BlockBelowLogBound { b: cfg.b, min: 3 * log2n });
    }
    if cfg.m < cfg.b {
        return Err(ConfigError::ClientMemoryTooSmall { m: cfg.m, b: cfg.b });
    }
    if cfg.b > cfg.n / 2 {
        return Err(ConfigError::BlockTooLarge { b: cfg.b, n: cfg.n });
    }
    if cfg.m > cfg.n {
        return Err(ConfigError::ClientMemoryTooLarge { m: cfg.m, n: cfg.n });
    }

    let quarter = cfg.b.trailing_zeros() / 4;
    let b_prime = 1usize << quarter;
    let big_l = 1usize << (6 * quarter);
    let lb = b_prime.trailing_zeros() as usize;
    let h_depth = ceil_div(log2n - cfg.b.trailing_zeros() as usize, lb);
    let r_depth = ceil_div(log2n - lb, lb);

    Ok(Params {
        n: cfg.n,
        b: cfg.b,
        m: cfg.m,
        b_prime,
        big_l,
        bucket_cap: 4 * big_l,
        leaf_cap: 8 * big_l,
        subblock_words: b_prime,
        item_payload_words: 2 * b_prime,
        h_depth,
        r_depth,
        nonce_bits: log2n as u32,
    })
}

/// Derives the constants for a bounded store of the given capacity.
pub fn derive_small_os_params(p: &Params, cap: usize) -> Result<SmallOsParams, ConfigError> {
    derive_small_os_params_with_budget(p, cap, ceil_sqrt(cap))
}

/// Like [`derive_small_os_params`], but with an explicit per-epoch access
/// budget instead of the standalone `ceil(sqrt(cap))` default. A store
/// that some outer clock rebuilds on a fixed period only needs a budget
/// covering the accesses one period can route to it, which can be far
/// below the standalone balance point.
pub fn derive_small_os_params_with_budget(
    p: &Params,
    cap: usize,
    budget: usize,
) -> Result<SmallOsParams, ConfigError> {
    if cap == 0 || cap > p.leaf_cap {
        return Err(ConfigError::CapacityOutOfRange { cap, max: p.leaf_cap });
    }
    let bits = if cap <= 1 { 0 } else { usize::BITS as usize - (cap - 1).leading_zeros() as usize };
    let d = 4 * ceil_div(bits, p.b.trailing_zeros() as usize).max(1);
    let slot_words = (2 * p.b_prime).max(2 + p.item_payload_words);
    Ok(SmallOsParams {
        cap,
        d,
        cache_words: 2 * slot_words * budget,
        dummy_len: d * budget,
        rebuild_period: budget,
    })
}
