//! Command-line arguments and environment handed to the guest.
//!
//! The guest asks for the count and the packed byte length, allocates, then
//! has the host copy `NUL`-terminated strings plus an array of 32-bit guest
//! offsets, one per string.

use crate::bridge::GuestMemory;
use crate::error::{Abort, SetupError};
use crate::memory;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StartupArgs {
    pub argv: Vec<Vec<u8>>,
    /// `KEY=VALUE` entries; never inherited from the host environment.
    pub env: Vec<Vec<u8>>,
}

impl StartupArgs {
    pub fn new(argv: Vec<Vec<u8>>, env: Vec<Vec<u8>>) -> Result<Self, SetupError> {
        if argv.is_empty() {
            return Err(SetupError::Argument("argv must contain at least argv[0]".into()));
        }
        for s in argv.iter().chain(&env) {
            if s.contains(&0) {
                return Err(SetupError::Argument(format!(
                    "argument {:?} contains a NUL byte",
                    String::from_utf8_lossy(s)
                )));
            }
        }
        for e in &env {
            if !e.contains(&b'=') {
                return Err(SetupError::Argument(format!(
                    "environment entry {:?} is not KEY=VALUE",
                    String::from_utf8_lossy(e)
                )));
            }
        }
        Ok(StartupArgs { argv, env })
    }
}

/// Sum of string lengths plus one terminator each.
pub fn packed_len(list: &[Vec<u8>]) -> u64 {
    list.iter().map(|s| s.len() as u64 + 1).sum()
}

/// Copies `list` into guest memory; returns the entry count.
pub fn copy_packed(
    mem: &dyn GuestMemory,
    list: &[Vec<u8>],
    offsets: i64,
    buf: i64,
) -> Result<i32, Abort> {
    let total = packed_len(list);
    // Both ranges are checked up front so a bad pointer writes nothing.
    memory::translate(mem, offsets, 4 * list.len() as u64)?;
    memory::translate(mem, buf, total)?;
    let mut at = buf;
    for (i, s) in list.iter().enumerate() {
        let dst = memory::slice_mut(mem, at, s.len() as u64 + 1)?;
        dst[..s.len()].copy_from_slice(s);
        dst[s.len()] = 0;
        memory::write_u32(mem, offsets + 4 * i as i64, at as u32)?;
        at += s.len() as i64 + 1;
    }
    Ok(list.len() as i32)
}

/// Merges `KEY=VALUE` overrides into `base`: matching keys are replaced in
/// place, new keys are appended in order.
pub fn merge_env(base: &[Vec<u8>], overrides: &[Vec<u8>]) -> Vec<Vec<u8>> {
    fn key(e: &[u8]) -> &[u8] {
        match e.iter().position(|&b| b == b'=') {
            Some(i) => &e[..i],
            None => e,
        }
    }
    let mut out: Vec<Vec<u8>> = base.to_vec();
    for o in overrides {
        match out.iter_mut().find(|e| key(e) == key(o)) {
            Some(slot) => *slot = o.clone(),
            None => out.push(o.clone()),
        }
    }
    out
}
