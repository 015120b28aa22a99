//! Kernel syscall tables vendored for offline use.
//!
//! See `tables/README.md` for the snapshot these were taken from.

use crate::{parse_syscall_tbl, AbiFilter, ArchSyscallTable, AtlasError, Result};

pub const X86_64: &str = include_str!("../tables/x86_64.tbl");
pub const ARM64: &str = include_str!("../tables/arm64.tbl");
pub const RISCV64: &str = include_str!("../tables/riscv64.tbl");

/// Architecture names with a vendored table.
pub const ARCHES: [&str; 3] = ["x86_64", "arm64", "riscv64"];

pub fn source(arch: &str) -> Option<&'static str> {
    match arch {
        "x86_64" | "x86-64" => Some(X86_64),
        "arm64" | "aarch64" => Some(ARM64),
        "riscv64" => Some(RISCV64),
        _ => None,
    }
}

pub fn table(arch: &str) -> Result<ArchSyscallTable> {
    let text = source(arch).ok_or_else(|| AtlasError::UnknownArch(arch.to_string()))?;
    let canonical = match arch {
        "x86-64" => "x86_64",
        "aarch64" => "arm64",
        a => a,
    };
    parse_syscall_tbl(canonical, text, &AbiFilter::Any)
}
