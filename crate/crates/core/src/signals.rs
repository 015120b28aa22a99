//! Virtual asynchronous signals.
//!
//! Native signals are caught by a trampoline that only records them (pending
//! bit plus a per-signal queue entry stamped with a generation number).
//! Guest handlers run later, at safepoints, when the guest calls `sigcheck`
//! or returns from any WALI syscall. The signal mask is the native thread
//! mask, used as is.
//!
//! Pending state is process-global: one native process hosts exactly one
//! WALI process.

use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::bridge::Guest;
use crate::context::Ctx;
use crate::error::{last_errno, Abort};
use crate::layout::guest;
use crate::memory;

pub const NSIG: usize = 64;
/// Queue depth for real-time signals; standard signals coalesce to one.
pub const RT_QUEUE_CAP: u32 = 32;
pub const SIGRTMIN: i32 = 32;

pub const SIG_DFL: u32 = 0;
pub const SIG_IGN: u32 = 1;

// Canonical sigaction flag bits.
pub const SA_RESTART: u32 = 0x1000_0000;
pub const SA_NODEFER: u32 = 0x4000_0000;
pub const SA_RESETHAND: u32 = 0x8000_0000;
pub const SA_SIGINFO: u32 = 0x0000_0004;

fn bit(sig: i32) -> u64 {
    1u64 << (sig - 1)
}

fn cap(sig: i32) -> u32 {
    if sig >= SIGRTMIN {
        RT_QUEUE_CAP
    } else {
        1
    }
}

struct Queue {
    len: AtomicU32,
    head: AtomicU32,
    tail: AtomicU32,
    /// Generation numbers; 0 marks an empty or not-yet-published slot.
    ring: [AtomicU64; RT_QUEUE_CAP as usize],
}

impl Queue {
    const fn new() -> Self {
        Queue {
            len: AtomicU32::new(0),
            head: AtomicU32::new(0),
            tail: AtomicU32::new(0),
            ring: [const { AtomicU64::new(0) }; RT_QUEUE_CAP as usize],
        }
    }
}

static PENDING: AtomicU64 = AtomicU64::new(0);
static GENERATION: AtomicU64 = AtomicU64::new(0);
static OVERFLOW: AtomicU64 = AtomicU64::new(0);
static QUEUES: [Queue; NSIG + 1] = [const { Queue::new() }; NSIG + 1];
/// Serializes consumers; never taken in trampoline context.
static CONSUMER: Mutex<()> = Mutex::new(());
/// Word read by instrumented safepoints: nonzero while anything is pending.
static WORD: AtomicPtr<AtomicU32> = AtomicPtr::new(std::ptr::null_mut());

/// Publishes pending state into `word` from now on.
///
/// # Safety
/// `word` must stay valid and 4-byte aligned for the rest of the process.
pub unsafe fn publish_pending_word(word: *mut AtomicU32) {
    WORD.store(word, Ordering::SeqCst);
    sync_word();
}

fn raise_word() {
    let w = WORD.load(Ordering::Relaxed);
    if !w.is_null() {
        // SAFETY: guaranteed by `publish_pending_word`.
        unsafe { (*w).store(1, Ordering::SeqCst) };
    }
}

/// Clears the word unless something is still pending. A producer racing
/// with this sets the word again after its own `PENDING` update.
fn sync_word() {
    let w = WORD.load(Ordering::Relaxed);
    if w.is_null() {
        return;
    }
    // SAFETY: guaranteed by `publish_pending_word`.
    unsafe {
        (*w).store(0, Ordering::SeqCst);
        if PENDING.load(Ordering::SeqCst) != 0 {
            (*w).store(1, Ordering::SeqCst);
        }
    }
}

/// Records a native signal. Async-signal-safe: atomics only.
pub fn generate(sig: i32) {
    if !(1..=NSIG as i32).contains(&sig) {
        return;
    }
    let q = &QUEUES[sig as usize];
    let cap = cap(sig);
    let mut n = q.len.load(Ordering::Relaxed);
    loop {
        if n >= cap {
            OVERFLOW.fetch_add(1, Ordering::Relaxed);
            return;
        }
        match q.len.compare_exchange_weak(n, n + 1, Ordering::AcqRel, Ordering::Relaxed) {
            Ok(_) => break,
            Err(cur) => n = cur,
        }
    }
    let stamp = GENERATION.fetch_add(1, Ordering::Relaxed) + 1;
    let slot = q.tail.fetch_add(1, Ordering::AcqRel) % cap;
    q.ring[slot as usize].store(stamp, Ordering::Release);
    PENDING.fetch_or(bit(sig), Ordering::SeqCst);
    raise_word();
}

extern "C" fn trampoline(sig: libc::c_int) {
    let saved = unsafe { *libc::__errno_location() };
    generate(sig);
    unsafe { *libc::__errno_location() = saved };
}

/// Generation number at the head of `sig`'s queue, if published.
fn peek(sig: i32) -> Option<u64> {
    let q = &QUEUES[sig as usize];
    if q.len.load(Ordering::Acquire) == 0 {
        return None;
    }
    let slot = q.head.load(Ordering::Relaxed) % cap(sig);
    match q.ring[slot as usize].load(Ordering::Acquire) {
        0 => None,
        g => Some(g),
    }
}

/// Removes the head entry. Caller holds `CONSUMER`.
fn pop(sig: i32) -> Option<u64> {
    let q = &QUEUES[sig as usize];
    let g = peek(sig)?;
    let slot = q.head.load(Ordering::Relaxed) % cap(sig);
    q.ring[slot as usize].store(0, Ordering::Release);
    q.head.fetch_add(1, Ordering::Relaxed);
    if q.len.fetch_sub(1, Ordering::AcqRel) == 1 {
        PENDING.fetch_and(!bit(sig), Ordering::AcqRel);
        // A producer may have slipped in between.
        if q.len.load(Ordering::Acquire) > 0 {
            PENDING.fetch_or(bit(sig), Ordering::AcqRel);
        }
        sync_word();
    }
    Some(g)
}

fn discard(sig: i32) {
    let _g = CONSUMER.lock();
    while pop(sig).is_some() {}
}

pub fn pending_mask() -> u64 {
    PENDING.load(Ordering::Acquire)
}

pub fn queued(sig: i32) -> u32 {
    QUEUES[sig as usize].len.load(Ordering::Acquire)
}

pub fn overflow_count() -> u64 {
    OVERFLOW.load(Ordering::Relaxed)
}

/// Clears all pending state; a forked child starts with none.
pub fn reset_pending() {
    let _g = CONSUMER.lock();
    for sig in 1..=NSIG as i32 {
        while pop(sig).is_some() {}
    }
    PENDING.store(0, Ordering::Release);
    sync_word();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Disposition {
    #[default]
    Default,
    Ignore,
    /// Function-table index of a `(i32) -> ()` handler.
    Handler(u32),
}

impl Disposition {
    pub fn from_canonical(v: u32) -> Self {
        match v {
            SIG_DFL => Disposition::Default,
            SIG_IGN => Disposition::Ignore,
            idx => Disposition::Handler(idx),
        }
    }

    pub fn canonical(self) -> u32 {
        match self {
            Disposition::Default => SIG_DFL,
            Disposition::Ignore => SIG_IGN,
            Disposition::Handler(i) => i,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SigEntry {
    pub disposition: Disposition,
    pub flags: u32,
    pub mask: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefaultAction {
    Terminate,
    Ignore,
    Stop,
    Continue,
}

pub fn default_action(sig: i32) -> DefaultAction {
    match sig {
        libc::SIGCHLD | libc::SIGURG | libc::SIGWINCH => DefaultAction::Ignore,
        libc::SIGCONT => DefaultAction::Continue,
        libc::SIGSTOP | libc::SIGTSTP | libc::SIGTTIN | libc::SIGTTOU => DefaultAction::Stop,
        _ => DefaultAction::Terminate,
    }
}

pub fn signal_name(sig: i32) -> String {
    let name = match sig {
        libc::SIGHUP => "SIGHUP",
        libc::SIGINT => "SIGINT",
        libc::SIGQUIT => "SIGQUIT",
        libc::SIGILL => "SIGILL",
        libc::SIGTRAP => "SIGTRAP",
        libc::SIGABRT => "SIGABRT",
        libc::SIGBUS => "SIGBUS",
        libc::SIGFPE => "SIGFPE",
        libc::SIGKILL => "SIGKILL",
        libc::SIGUSR1 => "SIGUSR1",
        libc::SIGSEGV => "SIGSEGV",
        libc::SIGUSR2 => "SIGUSR2",
        libc::SIGPIPE => "SIGPIPE",
        libc::SIGALRM => "SIGALRM",
        libc::SIGTERM => "SIGTERM",
        libc::SIGCHLD => "SIGCHLD",
        libc::SIGCONT => "SIGCONT",
        libc::SIGSTOP => "SIGSTOP",
        libc::SIGTSTP => "SIGTSTP",
        libc::SIGTTIN => "SIGTTIN",
        libc::SIGTTOU => "SIGTTOU",
        libc::SIGURG => "SIGURG",
        libc::SIGXCPU => "SIGXCPU",
        libc::SIGXFSZ => "SIGXFSZ",
        libc::SIGVTALRM => "SIGVTALRM",
        libc::SIGPROF => "SIGPROF",
        libc::SIGWINCH => "SIGWINCH",
        libc::SIGIO => "SIGIO",
        libc::SIGPWR => "SIGPWR",
        libc::SIGSYS => "SIGSYS",
        s if (SIGRTMIN..=NSIG as i32).contains(&s) => return format!("SIGRTMIN+{}", s - SIGRTMIN),
        s => return format!("signal {s}"),
    };
    name.to_string()
}

/// Signals the guest may not register: immutable ones and those the engine
/// needs for its own fault handling.
pub fn reserved(sig: i32) -> bool {
    matches!(
        sig,
        libc::SIGKILL | libc::SIGSTOP | libc::SIGSEGV | libc::SIGBUS | libc::SIGFPE | libc::SIGILL
    )
}

/// Per-process virtual sigtable.
#[derive(Debug, Clone)]
pub struct SigTable {
    entries: [SigEntry; NSIG + 1],
}

impl Default for SigTable {
    fn default() -> Self {
        SigTable {
            entries: [SigEntry::default(); NSIG + 1],
        }
    }
}

impl SigTable {
    pub fn get(&self, sig: i32) -> SigEntry {
        self.entries[sig as usize]
    }

    /// Installs `entry` virtually and natively, returning the previous entry.
    pub fn install(&mut self, sig: i32, entry: SigEntry) -> Result<SigEntry, i64> {
        if !(1..=NSIG as i32).contains(&sig) || reserved(sig) {
            return Err(-(libc::EINVAL as i64));
        }
        install_native(sig, entry)?;
        let old = std::mem::replace(&mut self.entries[sig as usize], entry);
        let drops = match entry.disposition {
            Disposition::Ignore => true,
            Disposition::Default => default_action(sig) == DefaultAction::Ignore,
            Disposition::Handler(_) => false,
        };
        if drops {
            discard(sig);
        }
        Ok(old)
    }
}

fn install_native(sig: i32, entry: SigEntry) -> Result<(), i64> {
    // SAFETY: sigaction with a zeroed struct and a handler that only touches
    // atomics.
    unsafe {
        let mut sa: libc::sigaction = std::mem::zeroed();
        sa.sa_sigaction = match entry.disposition {
            Disposition::Default => libc::SIG_DFL,
            Disposition::Ignore => libc::SIG_IGN,
            Disposition::Handler(_) => trampoline as extern "C" fn(libc::c_int) as usize,
        };
        if entry.flags & SA_RESTART != 0 {
            sa.sa_flags |= libc::SA_RESTART;
        }
        libc::sigemptyset(&mut sa.sa_mask);
        if libc::sigaction(sig, &sa, std::ptr::null_mut()) != 0 {
            return Err(last_errno());
        }
    }
    Ok(())
}

/// In-progress handler frames of one thread.
#[derive(Debug, Default, Clone)]
pub struct DeferralStack {
    frames: Vec<(i32, bool)>,
}

impl DeferralStack {
    pub fn push(&mut self, sig: i32, nodefer: bool) {
        self.frames.push((sig, nodefer));
    }

    pub fn pop(&mut self) -> Option<(i32, bool)> {
        self.frames.pop()
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// Signals that must wait until an active frame returns.
    pub fn deferred_mask(&self) -> u64 {
        self.frames
            .iter()
            .filter(|(_, nodefer)| !nodefer)
            .fold(0, |m, (s, _)| m | bit(*s))
    }
}

/// Blocked mask of the calling thread, as the kernel's 64-bit sigset.
pub fn native_blocked() -> u64 {
    let mut old = 0u64;
    // SAFETY: a null new-set only queries; the kernel writes 8 bytes.
    unsafe {
        libc::syscall(
            libc::SYS_rt_sigprocmask,
            libc::SIG_BLOCK,
            std::ptr::null::<u64>(),
            &mut old as *mut u64,
            8usize,
        )
    };
    old
}

/// Raw `rt_sigprocmask` on the calling thread; returns 0 or -errno.
pub fn native_sigprocmask(how: i32, set: Option<u64>, old: Option<&mut u64>) -> i64 {
    let set_ptr = set.as_ref().map_or(std::ptr::null(), |s| s as *const u64);
    let old_ptr = old.map_or(std::ptr::null_mut(), |o| o as *mut u64);
    // SAFETY: both pointers are null or point at 8-byte locals.
    let r = unsafe { libc::syscall(libc::SYS_rt_sigprocmask, how, set_ptr, old_ptr, 8usize) };
    if r == -1 {
        last_errno()
    } else {
        0
    }
}

/// The safepoint poll. One atomic load when nothing is pending.
#[inline]
pub fn sigcheck(table: &Mutex<SigTable>, guest: &mut dyn Guest) -> Result<(), Abort> {
    if PENDING.load(Ordering::Relaxed) == 0 {
        return Ok(());
    }
    deliver(table, guest)
}

fn next_eligible(eligible: u64) -> Option<i32> {
    let mut best: Option<(u64, i32)> = None;
    let mut bits = eligible;
    while bits != 0 {
        let sig = bits.trailing_zeros() as i32 + 1;
        bits &= bits - 1;
        if let Some(g) = peek(sig) {
            if best.map_or(true, |(bg, _)| g < bg) {
                best = Some((g, sig));
            }
        }
    }
    best.map(|(_, s)| s)
}

#[cold]
fn deliver(table: &Mutex<SigTable>, guest: &mut dyn Guest) -> Result<(), Abort> {
    loop {
        let pending = PENDING.load(Ordering::Acquire);
        if pending == 0 {
            return Ok(());
        }
        let eligible = pending & !native_blocked() & !guest.thread().deferral.deferred_mask();
        if eligible == 0 {
            return Ok(());
        }
        let sig = {
            let _g = CONSUMER.lock();
            match next_eligible(eligible) {
                Some(sig) => {
                    pop(sig);
                    sig
                }
                None => {
                    // Published bit but the entry is still being written, or
                    // another thread drained it.
                    drop(_g);
                    std::thread::yield_now();
                    continue;
                }
            }
        };
        let entry = table.lock().get(sig);
        match entry.disposition {
            Disposition::Ignore => {}
            Disposition::Default => match default_action(sig) {
                DefaultAction::Terminate => {
                    return Err(Abort::trap(format!("terminated by {}", signal_name(sig))))
                }
                DefaultAction::Stop => unsafe {
                    libc::kill(libc::getpid(), libc::SIGSTOP);
                },
                DefaultAction::Ignore | DefaultAction::Continue => {}
            },
            Disposition::Handler(idx) => run_handler(table, guest, sig, idx, entry)?,
        }
    }
}

fn run_handler(
    table: &Mutex<SigTable>,
    guest: &mut dyn Guest,
    sig: i32,
    idx: u32,
    entry: SigEntry,
) -> Result<(), Abort> {
    let nodefer = entry.flags & SA_NODEFER != 0;
    let mut block = entry.mask;
    if !nodefer {
        block |= bit(sig);
    }
    let mut saved = 0u64;
    native_sigprocmask(libc::SIG_BLOCK, Some(block), Some(&mut saved));
    if entry.flags & SA_RESETHAND != 0 {
        let _ = table.lock().install(sig, SigEntry::default());
    }
    guest.thread().deferral.push(sig, nodefer);
    let r = guest.call_handler(idx, sig);
    guest.thread().deferral.pop();
    native_sigprocmask(libc::SIG_SETMASK, Some(saved), None);
    r
}

/// `rt_sigaction(signum, act, oldact, sigsetsize)`.
pub fn sys_rt_sigaction(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let (sig, act, oact, setsize) = (a[0] as i32, a[1], a[2], a[3]);
    let einval = Ok(-(libc::EINVAL as i64));
    if !(1..=NSIG as i32).contains(&sig) || setsize != 8 {
        return einval;
    }
    let rec = guest("ksigaction");
    let new = if act != 0 {
        if reserved(sig) {
            return einval;
        }
        let bytes = memory::slice(ctx.mem(), act, rec.size as u64)?;
        let handler = rec.get(bytes, "handler") as u32;
        let entry = SigEntry {
            disposition: Disposition::from_canonical(handler),
            flags: rec.get(bytes, "flags") as u32,
            mask: rec.get(bytes, "mask"),
        };
        if let Disposition::Handler(i) = entry.disposition {
            if !ctx.guest.handler_ok(i) {
                return einval;
            }
        }
        Some(entry)
    } else {
        None
    };
    if oact != 0 {
        // Check the output range before changing any state.
        memory::translate(ctx.mem(), oact, rec.size as u64)?;
    }
    let mut table = ctx.proc.sigtable.lock();
    let old = match new {
        Some(entry) => match table.install(sig, entry) {
            Ok(old) => old,
            Err(e) => return Ok(e),
        },
        None => table.get(sig),
    };
    drop(table);
    if oact != 0 {
        let out = memory::slice_mut(ctx.mem(), oact, rec.size as u64)?;
        out.fill(0);
        rec.set(out, "handler", old.disposition.canonical() as u64);
        rec.set(out, "flags", old.flags as u64);
        rec.set(out, "mask", old.mask);
    }
    Ok(0)
}

/// `rt_sigprocmask(how, set, oldset, sigsetsize)`, followed by a safepoint.
pub fn sys_rt_sigprocmask(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let (how, set, oset, setsize) = (a[0] as i32, a[1], a[2], a[3]);
    if setsize != 8 {
        return Ok(-(libc::EINVAL as i64));
    }
    let new = if set != 0 {
        if !matches!(how, libc::SIG_BLOCK | libc::SIG_UNBLOCK | libc::SIG_SETMASK) {
            return Ok(-(libc::EINVAL as i64));
        }
        let s = memory::slice(ctx.mem(), set, 8)?;
        Some(u64::from_le_bytes(s.try_into().unwrap()))
    } else {
        None
    };
    if oset != 0 {
        memory::translate(ctx.mem(), oset, 8)?;
    }
    let mut old = 0u64;
    let r = native_sigprocmask(how, new, Some(&mut old));
    if r < 0 {
        return Ok(r);
    }
    if oset != 0 {
        memory::slice_mut(ctx.mem(), oset, 8)?.copy_from_slice(&old.to_le_bytes());
    }
    sigcheck(&ctx.proc.sigtable, ctx.guest)?;
    Ok(0)
}
