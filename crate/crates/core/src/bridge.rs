//! The narrow contract between WALI and a Wasm engine.
//!
//! Everything outside [`crate::runtime`] talks to the engine only through
//! these traits, so syscall handlers can be exercised against test doubles.

use crate::error::Abort;
use crate::signals::DeferralStack;

pub const PAGE_SIZE: u64 = 65536;
/// Page limit of a 32-bit linear memory.
pub const MAX_PAGES_32: u64 = 65536;

/// A linear memory whose base address never moves.
pub trait GuestMemory {
    fn base(&self) -> *mut u8;
    /// Current size in bytes.
    fn size(&self) -> u64;
    /// Highest page count growth may reach.
    fn max_pages(&self) -> u64;
    /// Grows by `delta` pages, returning the old page count, or `None`
    /// (with the memory unchanged) when the limit would be exceeded.
    fn grow(&mut self, delta: u64) -> Option<u64>;

    fn pages(&self) -> u64 {
        self.size() / PAGE_SIZE
    }
}

/// Per-thread state owned by the execution context of one WALI thread.
#[derive(Debug, Default)]
pub struct ThreadState {
    pub tid: i32,
    pub main: bool,
    /// Guest address cleared and woken on thread exit (`set_tid_address`).
    pub clear_child_tid: u32,
    pub deferral: DeferralStack,
}

/// Arguments of a thread-creating `clone`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadSpawn {
    pub flags: u64,
    pub stack: u32,
    pub parent_tid: u32,
    pub tls: u32,
    pub child_tid: u32,
}

/// The executing guest as seen from inside a host call.
pub trait Guest: GuestMemory {
    /// Whether the function-table slot holds a `(i32) -> ()` function.
    fn handler_ok(&mut self, slot: u32) -> bool;
    /// Re-enters the guest at a function-table slot.
    fn call_handler(&mut self, slot: u32, signum: i32) -> Result<(), Abort>;
    fn thread(&mut self) -> &mut ThreadState;
    /// Starts a new WALI thread over the same linear memory.
    fn spawn_thread(&mut self, req: ThreadSpawn) -> Result<i64, Abort>;
}
