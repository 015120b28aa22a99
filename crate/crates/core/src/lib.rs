//! WALI: a Linux syscall interface for WebAssembly modules.
//!
//! Guests import syscalls by name from the `wali` namespace. Each WALI
//! process is a native Linux process; each WALI thread a native thread.

pub mod bridge;
pub mod context;
pub mod error;
pub mod layout;
pub mod memory;
pub mod policy;
pub mod process;
pub mod registry;
pub mod runtime;
pub mod signals;
pub mod startup;
pub mod syscalls;
pub mod trace;

pub use error::{Abort, SetupError};
pub use policy::{Action, Policy};
pub use registry::Registry;
pub use runtime::{run, Outcome, RunConfig};
