//! Random mmap/munmap/mremap traffic against an interval model of the pool.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use wali::bridge::{GuestMemory, PAGE_SIZE};
use wali::memory::{host_page_size, MmapPool, MmapRequest, ReservedMemory};

pub const OPERATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy)]
struct Live {
    len: u64,
    reserved: u64,
    tag: u8,
}

fn round_up(v: u64, to: u64) -> u64 {
    v.div_ceil(to) * to
}

fn anon(addr: u64, len: u64, fixed: bool) -> MmapRequest {
    MmapRequest {
        addr,
        len,
        prot: libc::PROT_READ | libc::PROT_WRITE,
        flags: libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | if fixed { libc::MAP_FIXED } else { 0 },
        fd: -1,
        offset: 0,
    }
}

fn overlaps(live: &BTreeMap<u64, Live>, start: u64, end: u64, except: Option<u64>) -> bool {
    live.iter()
        .any(|(&s, l)| Some(s) != except && start < s + l.reserved && s < end)
}

fn byte(mem: &ReservedMemory, at: u64) -> u8 {
    unsafe { *mem.base().add(at as usize) }
}

fn set_byte(mem: &ReservedMemory, at: u64, v: u8) {
    unsafe { *mem.base().add(at as usize) = v }
}

/// Tags the first and last byte of a mapping.
fn stamp(mem: &ReservedMemory, start: u64, l: &Live) {
    set_byte(mem, start, l.tag);
    set_byte(mem, start + l.len - 1, l.tag);
}

fn check(pool: &MmapPool, mem: &ReservedMemory, live: &BTreeMap<u64, Live>, what: &str) -> Result<(), String> {
    pool.check_invariants().map_err(|e| format!("{what}: {e}"))?;
    let ledger: Vec<(u64, u64)> = pool.mappings().map(|m| (m.start, m.len)).collect();
    let model: Vec<(u64, u64)> = live.iter().map(|(&s, l)| (s, l.len)).collect();
    if ledger != model {
        return Err(format!("{what}: ledger {ledger:x?} vs model {model:x?}"));
    }
    let mut prev_end = 0;
    for (&s, l) in live {
        if s % PAGE_SIZE != 0 || s < pool.pool_base() || s < prev_end || s + l.reserved > mem.size() {
            return Err(format!("{what}: mapping {s:#x}+{:#x} misplaced", l.reserved));
        }
        prev_end = s + l.reserved;
        if byte(mem, s) != l.tag || byte(mem, s + l.len - 1) != l.tag {
            return Err(format!("{what}: contents of {s:#x} lost"));
        }
    }
    Ok(())
}

/// Returns the number of operations checked.
pub fn fuzz(ops: usize, seed: u64) -> Result<usize, String> {
    let hp = host_page_size();
    let mut mem = ReservedMemory::new(1, 4096).map_err(|e| e.to_string())?;
    let mut pool = MmapPool::new(PAGE_SIZE);
    let mut live: BTreeMap<u64, Live> = BTreeMap::new();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut next_tag: u8 = 1;
    let mut tag = || {
        next_tag = next_tag.wrapping_add(1).max(1);
        next_tag
    };
    let window = 64 * PAGE_SIZE;

    for i in 0..ops {
        let pick = |rng: &mut StdRng, live: &BTreeMap<u64, Live>| {
            let k = rng.gen_range(0..live.len());
            live.iter().nth(k).map(|(&s, &l)| (s, l)).unwrap()
        };
        let len = if rng.gen_bool(0.7) {
            hp * rng.gen_range(1..=20)
        } else {
            rng.gen_range(1..=3 * PAGE_SIZE)
        };
        let kind = if live.is_empty() {
            0
        } else if live.len() > 48 {
            2
        } else {
            rng.gen_range(0..6)
        };
        let what;
        match kind {
            0 | 1 => {
                what = format!("op {i}: mmap {len:#x}");
                let (r, _) = pool.mmap(&mut mem, anon(0, len, false));
                if r < 0 {
                    return Err(format!("{what}: failed with {r}"));
                }
                let start = r as u64;
                let reserved = round_up(round_up(len, hp), PAGE_SIZE);
                if overlaps(&live, start, start + reserved, None) {
                    return Err(format!("{what}: {start:#x} overlaps a live mapping"));
                }
                if byte(&mem, start) != 0 {
                    return Err(format!("{what}: fresh mapping is not zeroed"));
                }
                let l = Live { len: round_up(len, hp), reserved, tag: tag() };
                stamp(&mem, start, &l);
                live.insert(start, l);
            }
            2 | 5 => {
                let (s, l) = pick(&mut rng, &live);
                if rng.gen_bool(0.2) {
                    // Wrong length or interior address.
                    let (addr, bad) = if rng.gen_bool(0.5) {
                        (s, l.len + hp)
                    } else {
                        (s + hp, l.len - hp.min(l.len))
                    };
                    what = format!("op {i}: bad munmap {addr:#x}+{bad:#x}");
                    let r = pool.munmap(&mut mem, addr as i64, bad);
                    if r != -(libc::EINVAL as i64) {
                        return Err(format!("{what}: returned {r}, want EINVAL"));
                    }
                } else {
                    what = format!("op {i}: munmap {s:#x}+{:#x}", l.len);
                    let r = pool.munmap(&mut mem, s as i64, l.len);
                    if r != 0 {
                        return Err(format!("{what}: returned {r}"));
                    }
                    live.remove(&s);
                    if byte(&mem, s) != 0 {
                        return Err(format!("{what}: unmapped range kept data"));
                    }
                }
            }
            3 => {
                let (s, l) = pick(&mut rng, &live);
                let new_len = round_up(len, hp);
                what = format!("op {i}: mremap {s:#x} {:#x} -> {new_len:#x}", l.len);
                let r = pool.mremap(&mut mem, s as i64, l.len, new_len, libc::MREMAP_MAYMOVE, 0);
                if r < 0 {
                    return Err(format!("{what}: failed with {r}"));
                }
                let dest = r as u64;
                live.remove(&s);
                let reserved = pool
                    .mappings()
                    .find(|m| m.start == dest)
                    .map(|m| m.reserved)
                    .ok_or_else(|| format!("{what}: result not in ledger"))?;
                if reserved < round_up(new_len, PAGE_SIZE) {
                    return Err(format!("{what}: reservation too small"));
                }
                if overlaps(&live, dest, dest + reserved, None) {
                    return Err(format!("{what}: {dest:#x} overlaps a live mapping"));
                }
                if byte(&mem, dest) != l.tag {
                    return Err(format!("{what}: data not carried"));
                }
                if new_len > l.len && byte(&mem, dest + l.len) != 0 {
                    return Err(format!("{what}: grown tail is not zeroed"));
                }
                let nl = Live { len: new_len, reserved, tag: tag() };
                stamp(&mem, dest, &nl);
                live.insert(dest, nl);
            }
            _ => {
                let addr = pool.pool_base() + PAGE_SIZE * rng.gen_range(0..window / PAGE_SIZE);
                let reserved = round_up(round_up(len, hp), PAGE_SIZE);
                what = format!("op {i}: fixed mmap {addr:#x}+{len:#x}");
                let (r, _) = pool.mmap(&mut mem, anon(addr, len, true));
                if overlaps(&live, addr, addr + reserved, None) {
                    if r != -(libc::EEXIST as i64) {
                        return Err(format!("{what}: returned {r} over a live mapping"));
                    }
                } else {
                    if r != addr as i64 {
                        return Err(format!("{what}: returned {r}"));
                    }
                    let l = Live { len: round_up(len, hp), reserved, tag: tag() };
                    stamp(&mem, addr, &l);
                    live.insert(addr, l);
                }
            }
        }
        check(&pool, &mem, &live, &what)?;
    }
    Ok(ops)
}
