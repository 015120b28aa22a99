//! Guest record layouts and their conversion to host kernel layouts.
//!
//! Guest layouts come from a checked-in manifest (see
//! `scripts/gen_layout_manifest.py`). Host layouts come from the `libc`
//! definitions for the build target, so marshaling is field-by-field by name.

use std::collections::BTreeMap;
use std::mem::{offset_of, size_of};
use std::sync::OnceLock;

use crate::error::SetupError;

pub const MANIFEST_TEXT: &str = include_str!("../layout/manifest.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Field {
    pub offset: usize,
    pub size: usize,
    pub signed: bool,
}

impl Field {
    /// Reads a little-endian value, extended to 64 bits.
    pub fn read(&self, buf: &[u8]) -> u64 {
        let mut raw = [0u8; 8];
        raw[..self.size].copy_from_slice(&buf[self.offset..self.offset + self.size]);
        let v = u64::from_le_bytes(raw);
        extend(v, self.size, self.signed)
    }

    /// Writes the low `size` bytes of `v`, little-endian.
    pub fn write(&self, buf: &mut [u8], v: u64) {
        buf[self.offset..self.offset + self.size].copy_from_slice(&v.to_le_bytes()[..self.size]);
    }
}

fn extend(v: u64, size: usize, signed: bool) -> u64 {
    if size >= 8 {
        return v;
    }
    let bits = size * 8;
    let mask = (1u64 << bits) - 1;
    let v = v & mask;
    if signed && v >> (bits - 1) & 1 == 1 {
        v | !mask
    } else {
        v
    }
}

/// One record: total size plus named fields in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub size: usize,
    pub fields: Vec<(String, Field)>,
}

impl Record {
    pub fn field(&self, name: &str) -> Field {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| *f)
            .unwrap_or_else(|| panic!("record {} has no field {name}", self.name))
    }

    pub fn get(&self, buf: &[u8], name: &str) -> u64 {
        self.field(name).read(buf)
    }

    pub fn set(&self, buf: &mut [u8], name: &str, v: u64) {
        self.field(name).write(buf, v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutManifest {
    records: BTreeMap<String, Record>,
}

impl LayoutManifest {
    /// Parses `record <name> size <n>` / `field <name> <off> <size> <u|s>`.
    pub fn parse(text: &str) -> Result<Self, SetupError> {
        let mut records: BTreeMap<String, Record> = BTreeMap::new();
        let mut current: Option<Record> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |reason: &str| SetupError::Manifest {
                line: line_no,
                reason: reason.to_string(),
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            match cols.as_slice() {
                ["record", name, "size", n] => {
                    if let Some(done) = current.take() {
                        records.insert(done.name.clone(), done);
                    }
                    if records.contains_key(*name) {
                        return Err(err("duplicate record"));
                    }
                    let size = n.parse().map_err(|_| err("bad record size"))?;
                    current = Some(Record {
                        name: name.to_string(),
                        size,
                        fields: Vec::new(),
                    });
                }
                ["field", name, off, size, sign] => {
                    let rec = current.as_mut().ok_or_else(|| err("field outside record"))?;
                    let offset: usize = off.parse().map_err(|_| err("bad field offset"))?;
                    let size: usize = size.parse().map_err(|_| err("bad field size"))?;
                    let signed = match *sign {
                        "s" => true,
                        "u" => false,
                        _ => return Err(err("signedness must be u or s")),
                    };
                    if !matches!(size, 1 | 2 | 4 | 8) {
                        return Err(err("field size must be 1, 2, 4 or 8"));
                    }
                    if offset + size > rec.size {
                        return Err(err("field extends past record size"));
                    }
                    let overlaps = rec
                        .fields
                        .iter()
                        .any(|(_, f)| offset < f.offset + f.size && f.offset < offset + size);
                    if overlaps {
                        return Err(err("field overlaps an earlier field"));
                    }
                    if rec.fields.iter().any(|(n, _)| n == name) {
                        return Err(err("duplicate field"));
                    }
                    rec.fields.push((name.to_string(), Field { offset, size, signed }));
                }
                _ => return Err(err("expected `record` or `field` line")),
            }
        }
        if let Some(done) = current.take() {
            records.insert(done.name.clone(), done);
        }
        Ok(LayoutManifest { records })
    }

    pub fn builtin() -> &'static LayoutManifest {
        static M: OnceLock<LayoutManifest> = OnceLock::new();
        M.get_or_init(|| LayoutManifest::parse(MANIFEST_TEXT).expect("built-in layout manifest"))
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.get(name)
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.records.values()
    }
}

/// Shortcut for a record of the built-in manifest.
pub fn guest(name: &str) -> &'static Record {
    LayoutManifest::builtin()
        .record(name)
        .unwrap_or_else(|| panic!("no guest record {name}"))
}

trait Int {
    const SIGNED: bool;
}
macro_rules! int {
    ($($t:ty => $s:expr),*) => { $(impl Int for $t { const SIGNED: bool = $s; })* };
}
int!(i16 => true, i32 => true, i64 => true, u16 => false, u32 => false, u64 => false);

/// Native kernel layout of a record, keyed by guest field name.
#[derive(Debug, Clone)]
pub struct HostLayout {
    pub size: usize,
    pub fields: BTreeMap<&'static str, Field>,
}

fn host_field<T, F: Int>(offset: usize, _probe: fn(&T) -> &F) -> Field {
    Field {
        offset,
        size: size_of::<F>(),
        signed: F::SIGNED,
    }
}

macro_rules! host_layout {
    ($ty:ty { $($gname:literal => $($field:ident).+),* $(,)? }) => {{
        let mut fields = BTreeMap::new();
        $(
            fields.insert(
                $gname,
                host_field::<$ty, _>(offset_of!($ty, $($field).+), |r: &$ty| &r.$($field).+),
            );
        )*
        HostLayout { size: size_of::<$ty>(), fields }
    }};
}

fn build_host_layouts() -> BTreeMap<&'static str, HostLayout> {
    let mut m = BTreeMap::new();
    m.insert(
        "kstat",
        host_layout!(libc::stat {
            "dev" => st_dev, "ino" => st_ino, "mode" => st_mode, "nlink" => st_nlink,
            "uid" => st_uid, "gid" => st_gid, "rdev" => st_rdev, "size" => st_size,
            "blksize" => st_blksize, "blocks" => st_blocks,
            "atime_sec" => st_atime, "atime_nsec" => st_atime_nsec,
            "mtime_sec" => st_mtime, "mtime_nsec" => st_mtime_nsec,
            "ctime_sec" => st_ctime, "ctime_nsec" => st_ctime_nsec,
        }),
    );
    m.insert("timespec", host_layout!(libc::timespec { "sec" => tv_sec, "nsec" => tv_nsec }));
    m.insert("timeval", host_layout!(libc::timeval { "sec" => tv_sec, "usec" => tv_usec }));
    m.insert(
        "rusage",
        host_layout!(libc::rusage {
            "utime_sec" => ru_utime.tv_sec, "utime_usec" => ru_utime.tv_usec,
            "stime_sec" => ru_stime.tv_sec, "stime_usec" => ru_stime.tv_usec,
            "maxrss" => ru_maxrss, "ixrss" => ru_ixrss, "idrss" => ru_idrss,
            "isrss" => ru_isrss, "minflt" => ru_minflt, "majflt" => ru_majflt,
            "nswap" => ru_nswap, "inblock" => ru_inblock, "oublock" => ru_oublock,
            "msgsnd" => ru_msgsnd, "msgrcv" => ru_msgrcv, "nsignals" => ru_nsignals,
            "nvcsw" => ru_nvcsw, "nivcsw" => ru_nivcsw,
        }),
    );
    m.insert("rlimit", host_layout!(libc::rlimit64 { "cur" => rlim_cur, "max" => rlim_max }));
    m.insert(
        "pollfd",
        host_layout!(libc::pollfd { "fd" => fd, "events" => events, "revents" => revents }),
    );
    // The kernel sigset for rt_* calls is a single 64-bit word.
    m.insert("sigset", HostLayout {
        size: 8,
        fields: BTreeMap::from([("bits", Field { offset: 0, size: 8, signed: false })]),
    });
    m
}

pub fn host_layouts() -> &'static BTreeMap<&'static str, HostLayout> {
    static H: OnceLock<BTreeMap<&'static str, HostLayout>> = OnceLock::new();
    H.get_or_init(build_host_layouts)
}

pub fn host(name: &str) -> &'static HostLayout {
    host_layouts().get(name).unwrap_or_else(|| panic!("no host layout for {name}"))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("buffer of {got} bytes for record `{record}` of {want} bytes")]
    Size {
        record: String,
        got: usize,
        want: usize,
    },
}

fn check(record: &str, got: usize, want: usize) -> Result<(), LayoutError> {
    if got < want {
        return Err(LayoutError::Size {
            record: record.to_string(),
            got,
            want,
        });
    }
    Ok(())
}

fn pair(name: &str) -> Result<(&'static Record, &'static HostLayout), LayoutError> {
    let g = LayoutManifest::builtin()
        .record(name)
        .ok_or_else(|| LayoutError::UnknownRecord(name.to_string()))?;
    let h = host_layouts()
        .get(name)
        .ok_or_else(|| LayoutError::UnknownRecord(name.to_string()))?;
    Ok((g, h))
}

/// Guest bytes to a host record. Host fields with no guest counterpart are
/// zeroed.
pub fn marshal_in(name: &str, guest: &[u8], host: &mut [u8]) -> Result<(), LayoutError> {
    let (g, h) = pair(name)?;
    check(name, guest.len(), g.size)?;
    check(name, host.len(), h.size)?;
    host[..h.size].fill(0);
    for (fname, gf) in &g.fields {
        if let Some(hf) = h.fields.get(fname.as_str()) {
            write_ne(hf, host, gf.read(guest));
        }
    }
    Ok(())
}

/// Host record to guest bytes. Guest fields with no host counterpart and all
/// padding are zeroed.
pub fn marshal_out(name: &str, host: &[u8], guest: &mut [u8]) -> Result<(), LayoutError> {
    let (g, h) = pair(name)?;
    check(name, guest.len(), g.size)?;
    check(name, host.len(), h.size)?;
    guest[..g.size].fill(0);
    for (fname, gf) in &g.fields {
        if let Some(hf) = h.fields.get(fname.as_str()) {
            gf.write(guest, read_ne(hf, host));
        }
    }
    Ok(())
}

fn read_ne(f: &Field, buf: &[u8]) -> u64 {
    let mut raw = [0u8; 8];
    let bytes = &buf[f.offset..f.offset + f.size];
    let v = if cfg!(target_endian = "little") {
        raw[..f.size].copy_from_slice(bytes);
        u64::from_le_bytes(raw)
    } else {
        raw[8 - f.size..].copy_from_slice(bytes);
        u64::from_be_bytes(raw)
    };
    extend(v, f.size, f.signed)
}

fn write_ne(f: &Field, buf: &mut [u8], v: u64) {
    let dst = &mut buf[f.offset..f.offset + f.size];
    if cfg!(target_endian = "little") {
        dst.copy_from_slice(&v.to_le_bytes()[..f.size]);
    } else {
        dst.copy_from_slice(&v.to_be_bytes()[8 - f.size..]);
    }
}

/// Views a plain-old-data host record as bytes.
pub fn bytes_of<T: Copy>(v: &T) -> &[u8] {
    // SAFETY: only used with libc records, which have no invalid bit patterns.
    unsafe { std::slice::from_raw_parts(v as *const T as *const u8, size_of::<T>()) }
}

pub fn bytes_of_mut<T: Copy>(v: &mut T) -> &mut [u8] {
    // SAFETY: as above; every byte pattern is a valid libc record.
    unsafe { std::slice::from_raw_parts_mut(v as *mut T as *mut u8, size_of::<T>()) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlagDomain {
    FileStatus,
    MmapProt,
    MmapFlags,
    SigactionFlags,
    CloneFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToHost,
    ToCanonical,
}

/// A permutation of single-bit flags between canonical and host encodings.
/// Bits not listed pass through unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagMap {
    pub domain: FlagDomain,
    pairs: Vec<(u32, u32)>,
    moved: u32,
}

impl FlagMap {
    pub fn identity(domain: FlagDomain) -> Self {
        FlagMap {
            domain,
            pairs: Vec::new(),
            moved: 0,
        }
    }

    /// `pairs` are `(canonical bit, host bit)`. The canonical and host bit
    /// sets must coincide so the map stays a bijection on all values.
    pub fn new(domain: FlagDomain, pairs: &[(u32, u32)]) -> Result<Self, String> {
        let mut canon = 0u32;
        let mut host = 0u32;
        for &(c, h) in pairs {
            if c.count_ones() != 1 || h.count_ones() != 1 {
                return Err(format!("{c:#x} <-> {h:#x} is not a single-bit pair"));
            }
            if canon & c != 0 || host & h != 0 {
                return Err(format!("bit listed twice in {c:#x} <-> {h:#x}"));
            }
            canon |= c;
            host |= h;
        }
        if canon != host {
            return Err("canonical and host bit sets differ".into());
        }
        Ok(FlagMap {
            domain,
            pairs: pairs.to_vec(),
            moved: canon,
        })
    }

    pub fn to_host(&self, v: u32) -> u32 {
        self.apply(v, Direction::ToHost)
    }

    pub fn to_canonical(&self, v: u32) -> u32 {
        self.apply(v, Direction::ToCanonical)
    }

    pub fn apply(&self, v: u32, dir: Direction) -> u32 {
        if self.moved == 0 {
            return v;
        }
        let mut out = v & !self.moved;
        for &(c, h) in &self.pairs {
            let (from, to) = match dir {
                Direction::ToHost => (c, h),
                Direction::ToCanonical => (h, c),
            };
            if v & from != 0 {
                out |= to;
            }
        }
        out
    }
}

// Canonical values are the x86-64 encodings.
pub const CANON_O_DIRECT: u32 = 0o40000;
pub const CANON_O_LARGEFILE: u32 = 0o100000;
pub const CANON_O_DIRECTORY: u32 = 0o200000;
pub const CANON_O_NOFOLLOW: u32 = 0o400000;

/// File-status flags of an aarch64 host.
pub fn aarch64_file_status() -> FlagMap {
    FlagMap::new(
        FlagDomain::FileStatus,
        &[
            (CANON_O_DIRECTORY, 0o40000),
            (CANON_O_NOFOLLOW, 0o100000),
            (CANON_O_DIRECT, 0o200000),
            (CANON_O_LARGEFILE, 0o400000),
        ],
    )
    .expect("aarch64 file-status map")
}

/// Flag map for the architecture this crate was built for.
pub fn host_flag_map(domain: FlagDomain) -> &'static FlagMap {
    static MAPS: OnceLock<Vec<FlagMap>> = OnceLock::new();
    let maps = MAPS.get_or_init(|| {
        let file_status = if cfg!(target_arch = "aarch64") {
            aarch64_file_status()
        } else {
            FlagMap::identity(FlagDomain::FileStatus)
        };
        vec![
            file_status,
            FlagMap::identity(FlagDomain::MmapProt),
            FlagMap::identity(FlagDomain::MmapFlags),
            FlagMap::identity(FlagDomain::SigactionFlags),
            FlagMap::identity(FlagDomain::CloneFlags),
        ]
    });
    maps.iter().find(|m| m.domain == domain).expect("flag domain")
}

pub fn remap_flags(domain: FlagDomain, v: u32, dir: Direction) -> u32 {
    host_flag_map(domain).apply(v, dir)
}
