use std::ffi::{CString, OsString};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use parking_lot::Mutex;

use crate::bridge::{Guest, GuestMemory};
use crate::error::Abort;
use crate::memory::{self, MmapPool};
use crate::policy::{Action, Policy};
use crate::registry::Registry;
use crate::signals::SigTable;
use crate::startup::StartupArgs;
use crate::trace::Tracer;

/// How an `execve` of a Wasm image re-enters the runner.
#[derive(Debug, Clone, Default)]
pub struct ExecConfig {
    /// Runner executable; `None` uses the current executable.
    pub runner: Option<PathBuf>,
    /// Options passed to `run` ahead of the module path.
    pub forward: Vec<OsString>,
}

/// Per-WALI-process state, shared by all of its threads.
pub struct Process {
    pub registry: &'static Registry,
    pub policy: Policy,
    pub actions: Vec<Action>,
    pub tracer: Tracer,
    pub startup: StartupArgs,
    pub pool: Mutex<MmapPool>,
    pub sigtable: Mutex<SigTable>,
    pub exec: ExecConfig,
    /// Live threads besides the main one.
    pub threads: AtomicUsize,
    /// Set in the child after `fork`.
    pub forked: AtomicBool,
    /// Host descriptors the guest may not close or replace.
    pub reserved_fds: Vec<i32>,
}

impl Process {
    pub fn new(
        registry: &'static Registry,
        policy: Policy,
        tracer: Tracer,
        startup: StartupArgs,
        pool_base: u64,
        exec: ExecConfig,
    ) -> Self {
        let actions = policy.compile(registry);
        let reserved_fds = tracer.fd().into_iter().collect();
        Process {
            registry,
            policy,
            actions,
            tracer,
            startup,
            pool: Mutex::new(MmapPool::new(pool_base)),
            sigtable: Mutex::new(SigTable::default()),
            exec,
            threads: AtomicUsize::new(0),
            forked: AtomicBool::new(false),
            reserved_fds,
        }
    }

    pub fn is_forked(&self) -> bool {
        self.forked.load(Ordering::Relaxed)
    }

    pub fn live_threads(&self) -> usize {
        self.threads.load(Ordering::Acquire)
    }
}

/// A host call in progress.
pub struct Ctx<'a> {
    pub proc: &'a Process,
    pub guest: &'a mut dyn Guest,
    warning: Option<String>,
}

impl<'a> Ctx<'a> {
    pub fn new(proc: &'a Process, guest: &'a mut dyn Guest) -> Self {
        Ctx {
            proc,
            guest,
            warning: None,
        }
    }

    pub fn mem(&self) -> &dyn GuestMemory {
        &*self.guest
    }

    pub fn mem_mut(&mut self) -> &mut dyn GuestMemory {
        &mut *self.guest
    }

    pub fn ptr(&self, addr: i64, len: u64) -> Result<*mut u8, Abort> {
        memory::translate(self.mem(), addr, len)
    }

    /// Like `ptr`, but guest 0 stands for a null host pointer.
    pub fn opt_ptr(&self, addr: i64, len: u64) -> Result<*mut u8, Abort> {
        if addr == 0 {
            Ok(std::ptr::null_mut())
        } else {
            self.ptr(addr, len)
        }
    }

    pub fn path(&self, addr: i64) -> Result<CString, Abort> {
        let bytes = memory::cstring(self.mem(), addr)?;
        Ok(CString::new(bytes).expect("no interior NUL by construction"))
    }

    /// Attaches a warning to this call's trace record.
    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warning = Some(msg.into());
    }

    pub fn take_warning(&mut self) -> Option<String> {
        self.warning.take()
    }
}
