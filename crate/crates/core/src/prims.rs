//! Data-independent array primitives over the block server.
//!
//! Everything here moves whole blocks in a pattern that is a pure function
//! of the public sizes (element count, element width, block size, client
//! memory). Element contents never influence which addresses are touched,
//! only what lands in them.
//!
//! The workhorse is a merging network over "units". A unit is as many
//! elements as fit in half the client memory, capped at one message block.
//! Units are sorted privately on load, then a Batcher odd-even network
//! merge-splits pairs of units until the whole array is ordered. Arrays
//! whose length is not a power of two units are handled by treating the
//! missing tail units as virtual, always-maximal units; comparators that
//! touch them are skipped because they cannot move anything.
//!
//! Sort keys are `(u64, u64)` pairs compared lexicographically. The pair
//! `(u64::MAX, u64::MAX)` is reserved for internal padding and must not be
//! produced for live elements.

use crate::error::OsError;
use crate::server::{Region, RegionLabel, SimServer};
use rand::Rng;

pub const PAD_KEY: u64 = u64::MAX;

/// Routing decision for one element of [`sort_pad_partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub child: usize,
    pub keep: bool,
    pub key: u64,
}

#[derive(Clone, Copy)]
struct Net {
    selem: usize,
    unit_elems: usize,
    unit_words: usize,
    n_units: usize,
}

fn plan(server: &SimServer, m: usize, elem_words: usize, total: usize) -> Result<Net, OsError> {
    let b = server.block_words();
    let selem = elem_words + 2;
    if selem > b {
        return Err(OsError::ElementTooLarge { elem_words, b });
    }
    let unit_elems = (b.min(m / 2) / selem).max(1);
    let n_units = total.div_ceil(unit_elems).max(1);
    Ok(Net { selem, unit_elems, unit_words: unit_elems * selem, n_units })
}

fn key_at(buf: &[u64], e: usize, selem: usize) -> (u64, u64) {
    (buf[e * selem], buf[e * selem + 1])
}

fn sort_unit(buf: &mut Vec<u64>, selem: usize, tmp: &mut Vec<u64>) {
    let n = buf.len() / selem;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&i| key_at(buf, i, selem));
    tmp.clear();
    for &i in &idx {
        tmp.extend_from_slice(&buf[i * selem..(i + 1) * selem]);
    }
    std::mem::swap(buf, tmp);
}

fn merge_split(a: &[u64], b: &[u64], selem: usize, lo: &mut Vec<u64>, hi: &mut Vec<u64>) {
    lo.clear();
    hi.clear();
    let na = a.len() / selem;
    let nb = b.len() / selem;
    let half = na;
    let (mut i, mut j) = (0usize, 0usize);
    for _ in 0..na + nb {
        let from_a = j >= nb || (i < na && key_at(a, i, selem) <= key_at(b, j, selem));
        let src = if from_a {
            let s = &a[i * selem..(i + 1) * selem];
            i += 1;
            s
        } else {
            let s = &b[j * selem..(j + 1) * selem];
            j += 1;
            s
        };
        if lo.len() < half * selem {
            lo.extend_from_slice(src);
        } else {
            hi.extend_from_slice(src);
        }
    }
}

/// Streams elements into a fresh scratch region as `[k1, k2, body]`
/// records, one sorted unit at a time. `extra` generated elements follow
/// the `count` elements read from `src`; the remainder of the last unit is
/// filled with reserved pads.
fn load_sorted_units(
    server: &mut SimServer,
    src: Region,
    count: usize,
    elem_words: usize,
    net: &Net,
    mut key_of: impl FnMut(&[u64]) -> (u64, u64),
    extra: usize,
    mut make_extra: impl FnMut(usize, &mut Vec<u64>),
) -> Result<Region, OsError> {
    let b = server.block_words();
    let scratch = server.alloc(net.n_units * net.unit_words, RegionLabel::Scratch, u64::MAX);
    let per_read = (b / elem_words.max(1)).max(1);
    let mut unit: Vec<u64> = Vec::with_capacity(net.unit_words);
    let mut tmp: Vec<u64> = Vec::with_capacity(net.unit_words);
    let mut next_unit = 0usize;

    let flush = |server: &mut SimServer, unit: &mut Vec<u64>, tmp: &mut Vec<u64>, next_unit: &mut usize| -> Result<(), OsError> {
        while unit.len() < net.unit_words {
            unit.push(PAD_KEY);
            unit.push(PAD_KEY);
            unit.extend(std::iter::repeat(0).take(elem_words));
        }
        sort_unit(unit, net.selem, tmp);
        server.write_block(scratch.addr(*next_unit * net.unit_words), unit)?;
        *next_unit += 1;
        unit.clear();
        Ok(())
    };

    let mut done = 0usize;
    while done < count {
        let k = per_read.min(count - done);
        let data = server.read_block(src.addr(done * elem_words), k * elem_words)?;
        for e in 0..k {
            let body = &data[e * elem_words..(e + 1) * elem_words];
            let (k1, k2) = key_of(body);
            unit.push(k1);
            unit.push(k2);
            unit.extend_from_slice(body);
            if unit.len() == net.unit_words {
                flush(server, &mut unit, &mut tmp, &mut next_unit)?;
            }
        }
        done += k;
    }
    for x in 0..extra {
        make_extra(x, &mut unit);
        if unit.len() == net.unit_words {
            flush(server, &mut unit, &mut tmp, &mut next_unit)?;
        }
    }
    while next_unit < net.n_units {
        flush(server, &mut unit, &mut tmp, &mut next_unit)?;
    }
    Ok(scratch)
}

fn run_network(server: &mut SimServer, scratch: Region, net: &Net) -> Result<(), OsError> {
    let np = net.n_units.next_power_of_two();
    let mut lo: Vec<u64> = Vec::with_capacity(net.unit_words);
    let mut hi: Vec<u64> = Vec::with_capacity(net.unit_words);
    let mut a_buf = vec![0u64; net.unit_words];
    let mut b_buf = vec![0u64; net.unit_words];
    let mut p = 1usize;
    while p < np {
        let mut k = p;
        while k >= 1 {
            let mut j = k % p;
            while j + k < np {
                for i in 0..k {
                    let a = i + j;
                    let bb = a + k;
                    if bb >= np {
                        break;
                    }
                    if a / (2 * p) != bb / (2 * p) || bb >= net.n_units {
                        continue;
                    }
                    server.read_into(scratch.addr(a * net.unit_words), &mut a_buf)?;
                    server.read_into(scratch.addr(bb * net.unit_words), &mut b_buf)?;
                    merge_split(&a_buf, &b_buf, net.selem, &mut lo, &mut hi);
                    server.write_block(scratch.addr(a * net.unit_words), &lo)?;
                    server.write_block(scratch.addr(bb * net.unit_words), &hi)?;
                }
                j += 2 * k;
            }
            k /= 2;
        }
        p *= 2;
    }
    Ok(())
}

/// Copies element bodies from `n` leading scratch slots back into `dst`.
fn unload(
    server: &mut SimServer,
    scratch: Region,
    net: &Net,
    dst: Region,
    dst_elem0: usize,
    first: usize,
    n: usize,
    elem_words: usize,
) -> Result<(), OsError> {
    let b = server.block_words();
    let per_chunk = (b / net.selem).max(1);
    let mut done = 0usize;
    let mut out: Vec<u64> = Vec::with_capacity(per_chunk * elem_words);
    while done < n {
        let k = per_chunk.min(n - done);
        let data = server.read_block(scratch.addr((first + done) * net.selem), k * net.selem)?;
        out.clear();
        for e in 0..k {
            out.extend_from_slice(&data[e * net.selem + 2..(e + 1) * net.selem]);
        }
        server.write_block(dst.addr((dst_elem0 + done) * elem_words), &out)?;
        done += k;
    }
    Ok(())
}

/// Sorts `count` elements of `elem_words` words in place by the key pair
/// returned from `key_of`.
pub fn oblivious_sort(
    server: &mut SimServer,
    src: Region,
    count: usize,
    elem_words: usize,
    m: usize,
    key_of: impl FnMut(&[u64]) -> (u64, u64),
) -> Result<(), OsError> {
    if count == 0 {
        return Ok(());
    }
    let net = plan(server, m, elem_words, count)?;
    let scratch = load_sorted_units(server, src, count, elem_words, &net, key_of, 0, |_, _| {})?;
    run_network(server, scratch, &net)?;
    unload(server, scratch, &net, src, 0, 0, count, elem_words)?;
    server.free(scratch)?;
    Ok(())
}

/// Permutes `count` elements in place, uniformly at random.
///
/// Small arrays that fit in one unit are permuted privately in client
/// memory. Larger arrays are sorted by fresh random keys.
pub fn oblivious_shuffle<R: Rng>(
    server: &mut SimServer,
    src: Region,
    count: usize,
    elem_words: usize,
    m: usize,
    rng: &mut R,
) -> Result<(), OsError> {
    if count <= 1 {
        return Ok(());
    }
    let net = plan(server, m, elem_words, count)?;
    if count <= net.unit_elems {
        let mut data = server.read_block(src.addr(0), count * elem_words)?;
        for i in (1..count).rev() {
            let j = rng.gen_range(0..=i);
            if i != j {
                for w in 0..elem_words {
                    data.swap(i * elem_words + w, j * elem_words + w);
                }
            }
        }
        server.write_block(src.addr(0), &data)?;
        return Ok(());
    }
    oblivious_sort(server, src, count, elem_words, m, |_| (rng.gen::<u64>() >> 1, rng.gen::<u64>()))
}

/// Moves every element selected by `keep` to the front of the array, in
/// uniformly random order, and reports how many there were. Fails with
/// `Overflow` when more than `keep_cap` elements are selected; the array
/// contents are unspecified after an error.
pub fn oblivious_compact<R: Rng>(
    server: &mut SimServer,
    src: Region,
    count: usize,
    elem_words: usize,
    m: usize,
    keep_cap: usize,
    rng: &mut R,
    mut keep: impl FnMut(&[u64]) -> bool,
) -> Result<usize, OsError> {
    if count == 0 {
        return Ok(0);
    }
    let b = server.block_words();
    let per_read = (b / elem_words.max(1)).max(1);
    let mut kept = 0usize;
    let mut done = 0usize;
    while done < count {
        let k = per_read.min(count - done);
        let data = server.read_block(src.addr(done * elem_words), k * elem_words)?;
        for e in 0..k {
            if keep(&data[e * elem_words..(e + 1) * elem_words]) {
                kept += 1;
            }
        }
        done += k;
    }
    if kept > keep_cap {
        return Err(OsError::Overflow { count: kept, cap: keep_cap });
    }
    oblivious_sort(server, src, count, elem_words, m, |body| {
        let class = if keep(body) { 0 } else { 1 };
        (class, rng.gen::<u64>())
    })?;
    Ok(kept)
}

/// Distributes elements into `fanout` fresh arrays of exactly `slot_cap`
/// elements each.
///
/// Each kept element goes to the child chosen by `route_of`, children are
/// ordered by the routing key, and unused slots are filled with elements
/// produced by `pad_fill`. Dropped elements vanish. Fails with `Overflow`
/// when any child attracts more than `slot_cap` kept elements.
#[allow(clippy::too_many_arguments)]
pub fn sort_pad_partition(
    server: &mut SimServer,
    src: Region,
    count: usize,
    elem_words: usize,
    m: usize,
    fanout: usize,
    slot_cap: usize,
    out_label: RegionLabel,
    owner: u64,
    mut route_of: impl FnMut(&[u64]) -> Route,
    pad_fill: impl Fn(&mut [u64]),
) -> Result<Vec<Region>, OsError> {
    let total = count + fanout * slot_cap;
    let net = plan(server, m, elem_words, total)?;
    let mut pad_body = vec![0u64; elem_words];
    pad_fill(&mut pad_body);

    let scratch = load_sorted_units(
        server,
        src,
        count,
        elem_words,
        &net,
        |body| {
            let r = route_of(body);
            if r.keep && r.child < fanout {
                ((r.child as u64) << 1, r.key)
            } else {
                ((fanout as u64) << 1, r.key)
            }
        },
        fanout * slot_cap,
        |x, unit| {
            let child = (x / slot_cap) as u64;
            unit.push((child << 1) | 1);
            unit.push(PAD_KEY);
            unit.extend_from_slice(&pad_body);
        },
    )?;
    run_network(server, scratch, &net)?;

    // Rank pass: walk the sorted scratch once and rewrite k1 to the final
    // slot index, or to the reserved key for everything that gets dropped.
    let mut counts = vec![0usize; fanout];
    let mut filled = vec![0usize; fanout];
    let mut unit_buf = vec![0u64; net.unit_words];
    let mut tmp = Vec::with_capacity(net.unit_words);
    for u in 0..net.n_units {
        server.read_into(scratch.addr(u * net.unit_words), &mut unit_buf)?;
        for e in 0..net.unit_elems {
            let off = e * net.selem;
            let k1 = unit_buf[off];
            let child = (k1 >> 1) as usize;
            let is_pad = k1 & 1 == 1;
            let slot = if child >= fanout {
                PAD_KEY
            } else if is_pad {
                if filled[child] < slot_cap {
                    filled[child] += 1;
                    (child * slot_cap + filled[child] - 1) as u64
                } else {
                    PAD_KEY
                }
            } else {
                counts[child] += 1;
                if filled[child] < slot_cap {
                    filled[child] += 1;
                    (child * slot_cap + filled[child] - 1) as u64
                } else {
                    PAD_KEY
                }
            };
            unit_buf[off] = slot;
        }
        // The rewrite can break the unit's internal order (dropped
        // elements jump to the reserved key), and the next network pass
        // needs sorted runs, so restore it before writing back.
        sort_unit(&mut unit_buf, net.selem, &mut tmp);
        server.write_block(scratch.addr(u * net.unit_words), &unit_buf)?;
    }
    if let Some(&worst) = counts.iter().max() {
        if worst > slot_cap {
            server.free(scratch)?;
            return Err(OsError::Overflow { count: worst, cap: slot_cap });
        }
    }

    run_network(server, scratch, &net)?;
    let mut out = Vec::with_capacity(fanout);
    for c in 0..fanout {
        let reg = server.alloc((slot_cap * elem_words).max(1), out_label, owner);
        unload(server, scratch, &net, reg, 0, c * slot_cap, slot_cap, elem_words)?;
        out.push(reg);
    }
    server.free(scratch)?;
    Ok(out)
}
