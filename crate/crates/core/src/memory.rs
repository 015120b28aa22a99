//! Guest address translation and the mmap family over linear memory.
//!
//! Mappings are carved out of linear memory above `pool_base` and backed by
//! native `MAP_FIXED` mappings placed onto the translated host range, so the
//! guest reads them with ordinary loads.

use std::collections::BTreeMap;

use crate::bridge::{GuestMemory, PAGE_SIZE};
use crate::error::{last_errno, Abort};

/// Translates a guest range into a host pointer.
///
/// `addr` is the raw 64-bit syscall argument; anything that is not a 32-bit
/// offset with `len` bytes inside current memory is a bounds violation.
pub fn translate(mem: &dyn GuestMemory, addr: i64, len: u64) -> Result<*mut u8, Abort> {
    let size = mem.size();
    let ok = (0..=u32::MAX as i64).contains(&addr)
        && (addr as u64).checked_add(len).is_some_and(|end| end <= size);
    if !ok {
        return Err(Abort::trap(format!(
            "out-of-bounds guest access: {len} bytes at {addr:#x} (memory is {size:#x} bytes)"
        )));
    }
    // SAFETY: the range was just checked against the memory size.
    Ok(unsafe { mem.base().add(addr as usize) })
}

pub fn slice<'a>(mem: &'a dyn GuestMemory, addr: i64, len: u64) -> Result<&'a [u8], Abort> {
    let p = translate(mem, addr, len)?;
    // SAFETY: in bounds. Guest threads may race on the bytes, as with any
    // kernel access to user memory.
    Ok(unsafe { std::slice::from_raw_parts(p, len as usize) })
}

#[allow(clippy::mut_from_ref)]
pub fn slice_mut<'a>(mem: &'a dyn GuestMemory, addr: i64, len: u64) -> Result<&'a mut [u8], Abort> {
    let p = translate(mem, addr, len)?;
    // SAFETY: as in `slice`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len as usize) })
}

pub fn read_u32(mem: &dyn GuestMemory, addr: i64) -> Result<u32, Abort> {
    Ok(u32::from_le_bytes(slice(mem, addr, 4)?.try_into().unwrap()))
}

pub fn write_u32(mem: &dyn GuestMemory, addr: i64, v: u32) -> Result<(), Abort> {
    slice_mut(mem, addr, 4)?.copy_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Reads a NUL-terminated string, without the terminator.
pub fn cstring(mem: &dyn GuestMemory, addr: i64) -> Result<Vec<u8>, Abort> {
    let size = mem.size();
    if !(0..size as i64).contains(&addr) {
        return Err(Abort::trap(format!("out-of-bounds guest string at {addr:#x}")));
    }
    let tail = slice(mem, addr, size - addr as u64)?;
    match tail.iter().position(|&b| b == 0) {
        Some(n) => Ok(tail[..n].to_vec()),
        None => Err(Abort::trap(format!("unterminated guest string at {addr:#x}"))),
    }
}

/// Reads a zero-terminated array of 32-bit string pointers.
pub fn cstring_array(mem: &dyn GuestMemory, addr: i64) -> Result<Vec<Vec<u8>>, Abort> {
    let mut out = Vec::new();
    if addr == 0 {
        return Ok(out);
    }
    for i in 0.. {
        let p = read_u32(mem, addr + 4 * i)?;
        if p == 0 {
            break;
        }
        out.push(cstring(mem, p as i64)?);
    }
    Ok(out)
}

pub fn host_page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    unsafe { libc::sysconf(libc::_SC_PAGESIZE) as u64 }
}

fn round_up(v: u64, to: u64) -> u64 {
    v.div_ceil(to) * to
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backing {
    Anonymous,
    File { fd: i32, offset: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mapping {
    pub start: u64,
    /// Host-page rounded length.
    pub len: u64,
    /// Span owned in the pool (64KiB rounded, at least `len`).
    pub reserved: u64,
    pub prot: i32,
    pub backing: Backing,
}

impl Mapping {
    pub fn end(&self) -> u64 {
        self.start + self.reserved
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MmapRequest {
    pub addr: u64,
    pub len: u64,
    pub prot: i32,
    pub flags: i32,
    pub fd: i32,
    pub offset: i64,
}

/// Outcome of a pool operation that the caller may want to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoolNote {
    pub shared_degraded: bool,
}

/// Allocation-pool state: base, high-water mark, live ledger and free holes.
#[derive(Debug, Clone)]
pub struct MmapPool {
    pool_base: u64,
    high_water: u64,
    ledger: BTreeMap<u64, Mapping>,
    holes: Vec<(u64, u64)>,
    host_page: u64,
}

impl MmapPool {
    pub fn new(pool_base: u64) -> Self {
        let base = round_up(pool_base, PAGE_SIZE);
        MmapPool {
            pool_base: base,
            high_water: base,
            ledger: BTreeMap::new(),
            holes: Vec::new(),
            host_page: host_page_size(),
        }
    }

    pub fn pool_base(&self) -> u64 {
        self.pool_base
    }

    pub fn high_water(&self) -> u64 {
        self.high_water
    }

    pub fn mappings(&self) -> impl Iterator<Item = &Mapping> {
        self.ledger.values()
    }

    pub fn holes(&self) -> &[(u64, u64)] {
        &self.holes
    }

    /// Moves the pool base; only allowed before the first mapping.
    pub fn set_base(&mut self, base: u64) -> Result<(), i64> {
        if !self.ledger.is_empty() || base % PAGE_SIZE != 0 {
            return Err(-(libc::EINVAL as i64));
        }
        self.pool_base = base;
        self.high_water = base;
        self.holes.clear();
        Ok(())
    }

    /// `brk` is not emulated; the nominal break is the high-water mark.
    pub fn brk(&self, _addr: u64) -> i64 {
        self.high_water as i64
    }

    fn overlaps_ledger(&self, start: u64, end: u64) -> bool {
        self.ledger
            .values()
            .any(|m| start < m.end() && m.start < end)
    }

    /// Grows memory until `[0, end)` is addressable.
    fn ensure(mem: &mut dyn GuestMemory, end: u64) -> Result<(), i64> {
        let need = end.div_ceil(PAGE_SIZE);
        let have = mem.pages();
        if need > have {
            if need > mem.max_pages() {
                return Err(-(libc::ENOMEM as i64));
            }
            mem.grow(need - have).ok_or(-(libc::ENOMEM as i64))?;
        }
        Ok(())
    }

    fn take_hole(&mut self, reserved: u64) -> Option<u64> {
        let i = self.holes.iter().position(|&(_, len)| len >= reserved)?;
        let (start, len) = self.holes[i];
        if len == reserved {
            self.holes.remove(i);
        } else {
            self.holes[i] = (start + reserved, len - reserved);
        }
        Some(start)
    }

    fn remove_hole_range(&mut self, start: u64, end: u64) {
        let mut out = Vec::with_capacity(self.holes.len() + 1);
        for &(hs, hl) in &self.holes {
            let he = hs + hl;
            if he <= start || end <= hs {
                out.push((hs, hl));
                continue;
            }
            if hs < start {
                out.push((hs, start - hs));
            }
            if end < he {
                out.push((end, he - end));
            }
        }
        self.holes = out;
    }

    /// First free start for `reserved` bytes without touching memory.
    fn place(&mut self, mem: &dyn GuestMemory, reserved: u64) -> u64 {
        if let Some(start) = self.take_hole(reserved) {
            return start;
        }
        // The guest may have grown memory itself for its heap.
        let start = self.high_water.max(round_up(mem.size(), PAGE_SIZE));
        if start > self.high_water {
            self.holes.push((self.high_water, start - self.high_water));
        }
        self.high_water = start + reserved;
        start
    }

    pub fn mmap(&mut self, mem: &mut dyn GuestMemory, req: MmapRequest) -> (i64, PoolNote) {
        let mut note = PoolNote::default();
        let einval = -(libc::EINVAL as i64);
        if req.len == 0 || req.offset < 0 || req.offset as u64 % self.host_page != 0 {
            return (einval, note);
        }
        let len = round_up(req.len, self.host_page);
        let reserved = round_up(len, PAGE_SIZE);
        if len > u32::MAX as u64 {
            return (-(libc::ENOMEM as i64), note);
        }
        let anonymous = req.flags & libc::MAP_ANONYMOUS != 0;
        if req.flags & libc::MAP_SHARED != 0 || req.flags & libc::MAP_SHARED_VALIDATE != 0 {
            note.shared_degraded = true;
        }
        if !anonymous {
            // Validate the descriptor before any placement work.
            // SAFETY: fcntl on an arbitrary fd only reads kernel state.
            if unsafe { libc::fcntl(req.fd, libc::F_GETFL) } == -1 {
                return (-(libc::EBADF as i64), note);
            }
        }

        let fixed = req.flags & (libc::MAP_FIXED | libc::MAP_FIXED_NOREPLACE) != 0;
        let start = if fixed {
            let start = req.addr;
            let end = start + reserved;
            if start % PAGE_SIZE != 0 || start < self.pool_base || end > 1 << 32 {
                return (einval, note);
            }
            if self.overlaps_ledger(start, end) {
                return (-(libc::EEXIST as i64), note);
            }
            if let Err(e) = Self::ensure(mem, end) {
                return (e, note);
            }
            self.remove_hole_range(start, end);
            if end > self.high_water {
                if start > self.high_water {
                    self.holes.push((self.high_water, start - self.high_water));
                }
                self.high_water = end;
            }
            start
        } else {
            let saved = (self.high_water, self.holes.clone());
            let start = self.place(mem, reserved);
            if let Err(e) = Self::ensure(mem, start + reserved) {
                (self.high_water, self.holes) = saved;
                return (e, note);
            }
            start
        };

        let backing = if anonymous {
            Backing::Anonymous
        } else {
            Backing::File {
                fd: req.fd,
                offset: req.offset as u64,
            }
        };
        if let Err(e) = native_map(mem, start, len, req.prot, backing) {
            // The failed fixed mapping may have dropped the old pages.
            let _ = native_map(mem, start, len, libc::PROT_READ | libc::PROT_WRITE, Backing::Anonymous);
            self.holes.push((start, reserved));
            return (e, note);
        }
        self.ledger.insert(
            start,
            Mapping {
                start,
                len,
                reserved,
                prot: req.prot,
                backing,
            },
        );
        (start as i64, note)
    }

    pub fn munmap(&mut self, mem: &mut dyn GuestMemory, addr: i64, len: u64) -> i64 {
        let einval = -(libc::EINVAL as i64);
        if len == 0 || addr < 0 {
            return einval;
        }
        let Some(m) = self.ledger.get(&(addr as u64)).copied() else {
            return einval;
        };
        if round_up(len, self.host_page) != m.len {
            return einval;
        }
        if let Err(e) = native_map(mem, m.start, m.len, libc::PROT_READ | libc::PROT_WRITE, Backing::Anonymous) {
            return e;
        }
        self.ledger.remove(&m.start);
        self.holes.push((m.start, m.reserved));
        0
    }

    pub fn mremap(
        &mut self,
        mem: &mut dyn GuestMemory,
        old: i64,
        old_len: u64,
        new_len: u64,
        flags: i32,
        new_addr: u64,
    ) -> i64 {
        let einval = -(libc::EINVAL as i64);
        let known = libc::MREMAP_MAYMOVE | libc::MREMAP_FIXED;
        if new_len == 0 || flags & !known != 0 || old < 0 {
            return einval;
        }
        if flags & libc::MREMAP_FIXED != 0 && flags & libc::MREMAP_MAYMOVE == 0 {
            return einval;
        }
        let Some(m) = self.ledger.get(&(old as u64)).copied() else {
            return einval;
        };
        if round_up(old_len, self.host_page) != m.len {
            return einval;
        }
        let new_len = round_up(new_len, self.host_page);
        if new_len > u32::MAX as u64 {
            return -(libc::ENOMEM as i64);
        }
        let rw = libc::PROT_READ | libc::PROT_WRITE;

        if flags & libc::MREMAP_FIXED == 0 {
            if new_len <= m.len {
                if new_len < m.len {
                    if let Err(e) = native_map(mem, m.start + new_len, m.len - new_len, rw, Backing::Anonymous) {
                        return e;
                    }
                }
                self.ledger.get_mut(&m.start).unwrap().len = new_len;
                return m.start as i64;
            }
            if let Some(reserved) = self.grow_in_place(mem, &m, new_len) {
                let ext = Backing::after(m.backing, m.len);
                if let Err(e) = native_map(mem, m.start + m.len, new_len - m.len, m.prot, ext) {
                    return e;
                }
                let entry = self.ledger.get_mut(&m.start).unwrap();
                entry.len = new_len;
                entry.reserved = reserved;
                return m.start as i64;
            }
            if flags & libc::MREMAP_MAYMOVE == 0 {
                return -(libc::ENOMEM as i64);
            }
        }

        // Move: reserve the destination, then let the kernel carry the pages.
        let reserved = round_up(new_len, PAGE_SIZE);
        let dest = if flags & libc::MREMAP_FIXED != 0 {
            let end = new_addr + reserved;
            if new_addr % PAGE_SIZE != 0 || new_addr < self.pool_base || end > 1 << 32 {
                return einval;
            }
            if self.overlaps_ledger(new_addr, end) {
                return -(libc::EEXIST as i64);
            }
            if let Err(e) = Self::ensure(mem, end) {
                return e;
            }
            self.remove_hole_range(new_addr, end);
            if end > self.high_water {
                if new_addr > self.high_water {
                    self.holes.push((self.high_water, new_addr - self.high_water));
                }
                self.high_water = end;
            }
            new_addr
        } else {
            let saved = (self.high_water, self.holes.clone());
            let dest = self.place(mem, reserved);
            if let Err(e) = Self::ensure(mem, dest + reserved) {
                (self.high_water, self.holes) = saved;
                return e;
            }
            dest
        };
        let base = mem.base();
        // SAFETY: both ranges lie inside linear memory, which `ensure` made
        // addressable; MREMAP_FIXED replaces whatever was at the destination.
        let r = unsafe {
            libc::mremap(
                base.add(m.start as usize).cast(),
                m.len as usize,
                new_len as usize,
                libc::MREMAP_MAYMOVE | libc::MREMAP_FIXED,
                base.add(dest as usize),
            )
        };
        if r == libc::MAP_FAILED {
            let e = last_errno();
            self.holes.push((dest, reserved));
            return e;
        }
        // The old range is now a hole in the host address space.
        let _ = native_map(mem, m.start, m.len, rw, Backing::Anonymous);
        self.ledger.remove(&m.start);
        self.holes.push((m.start, m.reserved));
        self.ledger.insert(
            dest,
            Mapping {
                start: dest,
                len: new_len,
                reserved,
                ..m
            },
        );
        dest as i64
    }

    /// Extends `m`'s reservation to cover `new_len` when the space right
    /// after it is free. Returns the new reserved span.
    fn grow_in_place(&mut self, mem: &mut dyn GuestMemory, m: &Mapping, new_len: u64) -> Option<u64> {
        if new_len <= m.reserved {
            return Some(m.reserved);
        }
        let want = round_up(new_len, PAGE_SIZE);
        let end = m.start + want;
        if end > 1 << 32 {
            return None;
        }
        if m.end() == self.high_water {
            Self::ensure(mem, end).ok()?;
            self.high_water = end;
            return Some(want);
        }
        let covered = self
            .holes
            .iter()
            .any(|&(hs, hl)| hs == m.end() && hs + hl >= end);
        if covered && !self.overlaps_ledger(m.end(), end) {
            self.remove_hole_range(m.end(), end);
            return Some(want);
        }
        None
    }

    /// Checks the structural invariants; used by tests and debug assertions.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut prev_end = self.pool_base;
        for m in self.ledger.values() {
            if m.start % PAGE_SIZE != 0 {
                return Err(format!("mapping at {:#x} is not 64KiB aligned", m.start));
            }
            if m.len % self.host_page != 0 || m.len > m.reserved {
                return Err(format!("mapping at {:#x} has bad length", m.start));
            }
            if m.start < prev_end {
                return Err(format!("mapping at {:#x} overlaps its predecessor", m.start));
            }
            if m.end() > self.high_water {
                return Err(format!("mapping at {:#x} extends past high water", m.start));
            }
            prev_end = m.end();
        }
        for &(hs, hl) in &self.holes {
            if self.overlaps_ledger(hs, hs + hl) {
                return Err(format!("hole at {hs:#x} overlaps a live mapping"));
            }
        }
        Ok(())
    }
}

impl Backing {
    fn after(b: Backing, skip: u64) -> Backing {
        match b {
            Backing::Anonymous => Backing::Anonymous,
            Backing::File { fd, offset } => Backing::File {
                fd,
                offset: offset + skip,
            },
        }
    }
}

fn native_map(mem: &dyn GuestMemory, start: u64, len: u64, prot: i32, backing: Backing) -> Result<(), i64> {
    debug_assert!(start + len <= mem.size());
    let (flags, fd, off) = match backing {
        Backing::Anonymous => (libc::MAP_PRIVATE | libc::MAP_ANONYMOUS, -1, 0),
        Backing::File { fd, offset } => (libc::MAP_PRIVATE, fd, offset as libc::off_t),
    };
    // SAFETY: the target range is inside linear memory, which WALI owns; a
    // fixed mapping only replaces pages of that range.
    let r = unsafe {
        libc::mmap(
            mem.base().add(start as usize).cast(),
            len as usize,
            prot,
            flags | libc::MAP_FIXED,
            fd,
            off,
        )
    };
    if r == libc::MAP_FAILED {
        Err(last_errno())
    } else {
        Ok(())
    }
}

/// A standalone linear memory for tests: a 4GiB `PROT_NONE` reservation
/// with the first `pages` made accessible, mirroring how engines lay out
/// 32-bit memories.
pub struct ReservedMemory {
    base: *mut u8,
    pages: u64,
    max_pages: u64,
}

// SAFETY: the reservation is owned exclusively by this value.
unsafe impl Send for ReservedMemory {}

impl ReservedMemory {
    const RESERVATION: usize = 1 << 32;

    pub fn new(pages: u64, max_pages: u64) -> std::io::Result<Self> {
        // SAFETY: a fresh anonymous reservation at a kernel-chosen address.
        let base = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                Self::RESERVATION,
                libc::PROT_NONE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if base == libc::MAP_FAILED {
            return Err(std::io::Error::last_os_error());
        }
        let mut m = ReservedMemory {
            base: base.cast(),
            pages: 0,
            max_pages,
        };
        if pages > 0 && m.grow(pages).is_none() {
            return Err(std::io::Error::other("initial pages exceed maximum"));
        }
        Ok(m)
    }
}

impl GuestMemory for ReservedMemory {
    fn base(&self) -> *mut u8 {
        self.base
    }

    fn size(&self) -> u64 {
        self.pages * PAGE_SIZE
    }

    fn max_pages(&self) -> u64 {
        self.max_pages
    }

    fn grow(&mut self, delta: u64) -> Option<u64> {
        let old = self.pages;
        if old + delta > self.max_pages {
            return None;
        }
        if delta > 0 {
            // SAFETY: the range lies inside our own reservation.
            let r = unsafe {
                libc::mprotect(
                    self.base.add((old * PAGE_SIZE) as usize).cast(),
                    (delta * PAGE_SIZE) as usize,
                    libc::PROT_READ | libc::PROT_WRITE,
                )
            };
            if r != 0 {
                return None;
            }
        }
        self.pages += delta;
        Some(old)
    }
}

impl Drop for ReservedMemory {
    fn drop(&mut self) {
        // SAFETY: unmapping the reservation created in `new`.
        unsafe { libc::munmap(self.base.cast(), Self::RESERVATION) };
    }
}
