//! Syscall scoping analysis.
//!
//! Ingests per-architecture kernel syscall tables and `strace -c` summaries,
//! and produces cross-architecture similarity matrices, log-normalized
//! frequency profiles, and coverage reports against a syscall registry.

mod error;
pub mod pinned;
mod profile;
mod similarity;
mod table;

pub use error::{AtlasError, Result};
pub use profile::{parse_strace_summary, profile_report, AppProfile, AppRow, ProfileReport};
pub use similarity::{jaccard, similarity_matrix, SimilarityMatrix};
pub use table::{parse_syscall_tbl, AbiFilter, ArchSyscallTable};
