//! Host implementations of the supported syscalls.
//!
//! Handlers receive the raw 64-bit arguments and return the kernel
//! convention (`>= 0` or `-errno`). Guest pointers go through
//! [`Ctx::ptr`], which traps on anything outside linear memory.

use std::mem::zeroed;

use crate::context::Ctx;
use crate::error::{cvt, Abort};
use crate::layout::{self, bytes_of, bytes_of_mut, guest, Direction, FlagDomain};
use crate::memory::{self, host_page_size, MmapRequest};
use crate::process;
use crate::registry::{arg, buf, ArgDescriptor, ArgKind::*, Behavior, Behavior::*, Handler, Implementation};
use crate::signals;

const fn imp(
    name: &'static str,
    behavior: Behavior,
    args: &'static [ArgDescriptor],
    handler: Handler,
) -> Implementation {
    Implementation {
        name,
        behavior,
        args,
        handler,
    }
}

const FD: ArgDescriptor = arg(Scalar32);
const I32: ArgDescriptor = arg(Scalar32);
const I64: ArgDescriptor = arg(Scalar64);
const PATH: ArgDescriptor = arg(CString);

pub static IMPLEMENTED: &[Implementation] = &[
    // Files and descriptors.
    imp("read", Passthrough, &[FD, buf(AddrOut, 2), I64], sys_read),
    imp("write", Passthrough, &[FD, buf(AddrIn, 2), I64], sys_write),
    imp("pread64", Passthrough, &[FD, buf(AddrOut, 2), I64, I64], sys_pread64),
    imp("pwrite64", Passthrough, &[FD, buf(AddrIn, 2), I64, I64], sys_pwrite64),
    imp("readv", TranslatedRecord, &[FD, arg(RecordIn("iovec")), I32], sys_readv),
    imp("writev", TranslatedRecord, &[FD, arg(RecordIn("iovec")), I32], sys_writev),
    imp("open", Passthrough, &[PATH, I32, I32], sys_open),
    imp("openat", Passthrough, &[FD, PATH, I32, I32], sys_openat),
    imp("close", Passthrough, &[FD], sys_close),
    imp("lseek", Passthrough, &[FD, I64, I32], sys_lseek),
    imp("fstat", TranslatedRecord, &[FD, arg(RecordOut("kstat"))], sys_fstat),
    imp("stat", TranslatedRecord, &[PATH, arg(RecordOut("kstat"))], sys_stat),
    imp("lstat", TranslatedRecord, &[PATH, arg(RecordOut("kstat"))], sys_lstat),
    imp("newfstatat", TranslatedRecord, &[FD, PATH, arg(RecordOut("kstat")), I32], sys_newfstatat),
    imp("access", Passthrough, &[PATH, I32], sys_access),
    imp("fcntl", Passthrough, &[FD, I32, I64], sys_fcntl),
    imp("ioctl", Passthrough, &[FD, I32, arg(AddrInOut)], sys_ioctl),
    imp("poll", TranslatedRecord, &[arg(RecordIn("pollfd")), I32, I32], sys_poll),
    imp("dup", Passthrough, &[FD], sys_dup),
    imp("dup2", Passthrough, &[FD, FD], sys_dup2),
    imp("dup3", Passthrough, &[FD, FD, I32], sys_dup3),
    imp("pipe", Passthrough, &[arg(AddrOut)], sys_pipe),
    imp("pipe2", Passthrough, &[arg(AddrOut), I32], sys_pipe2),
    imp("getcwd", Passthrough, &[buf(AddrOut, 1), I64], sys_getcwd),
    imp("chdir", Passthrough, &[PATH], sys_chdir),
    imp("mkdir", Passthrough, &[PATH, I32], sys_mkdir),
    imp("rmdir", Passthrough, &[PATH], sys_rmdir),
    imp("unlink", Passthrough, &[PATH], sys_unlink),
    imp("rename", Passthrough, &[PATH, PATH], sys_rename),
    // Sockets.
    imp("socket", Passthrough, &[I32, I32, I32], sys_socket),
    imp("bind", Passthrough, &[FD, buf(AddrIn, 2), I32], sys_bind),
    imp("connect", Passthrough, &[FD, buf(AddrIn, 2), I32], sys_connect),
    imp("sendto", Passthrough, &[FD, buf(AddrIn, 2), I64, I32, buf(AddrIn, 5), I32], sys_sendto),
    imp("recvfrom", Passthrough, &[FD, buf(AddrOut, 2), I64, I32, arg(AddrOut), arg(AddrInOut)], sys_recvfrom),
    // Identity, time, resources.
    imp("getpid", Passthrough, &[], sys_getpid),
    imp("getppid", Passthrough, &[], sys_getppid),
    imp("gettid", Passthrough, &[], sys_gettid),
    imp("getuid", Passthrough, &[], sys_getuid),
    imp("geteuid", Passthrough, &[], sys_geteuid),
    imp("getgid", Passthrough, &[], sys_getgid),
    imp("getegid", Passthrough, &[], sys_getegid),
    imp("getrusage", TranslatedRecord, &[I32, arg(RecordOut("rusage"))], sys_getrusage),
    imp("prlimit64", TranslatedRecord, &[I32, I32, arg(RecordIn("rlimit")), arg(RecordOut("rlimit"))], sys_prlimit64),
    imp("clock_gettime", TranslatedRecord, &[I32, arg(RecordOut("timespec"))], sys_clock_gettime),
    imp("nanosleep", TranslatedRecord, &[arg(RecordIn("timespec")), arg(RecordOut("timespec"))], sys_nanosleep),
    imp("sched_yield", Passthrough, &[], sys_sched_yield),
    imp("getrandom", Passthrough, &[buf(AddrOut, 1), I64, I32], sys_getrandom),
    // Memory.
    imp("mmap", Stateful, &[I64, I64, I32, I32, FD, I64], sys_mmap),
    imp("munmap", Stateful, &[I64, I64], sys_munmap),
    imp("mremap", Stateful, &[I64, I64, I64, I32, I64], sys_mremap),
    imp("mprotect", Passthrough, &[I64, I64, I32], sys_mprotect),
    imp("brk", EmulatedNop, &[I64], sys_brk),
    // Synchronization.
    imp("futex", TranslatedRecord, &[arg(AddrInOut), I32, I32, arg(RecordIn("timespec")), arg(AddrInOut), I32], sys_futex),
    // Signals.
    imp("rt_sigaction", Stateful, &[I32, arg(RecordIn("ksigaction")), arg(RecordOut("ksigaction")), I64], signals::sys_rt_sigaction),
    imp("rt_sigprocmask", Stateful, &[I32, arg(RecordIn("sigset")), arg(RecordOut("sigset")), I64], signals::sys_rt_sigprocmask),
    imp("rt_sigreturn", EmulatedNop, &[], sys_rt_sigreturn),
    imp("kill", Passthrough, &[I32, I32], sys_kill),
    imp("tkill", Passthrough, &[I32, I32], sys_tkill),
    imp("tgkill", Passthrough, &[I32, I32, I32], sys_tgkill),
    // Processes and threads.
    imp("fork", Stateful, &[], process::sys_fork),
    imp("clone", Stateful, &[I64, arg(AddrIn), arg(AddrOut), I32, arg(AddrOut)], process::sys_clone),
    imp("execve", Stateful, &[PATH, arg(AddrArray), arg(AddrArray)], process::sys_execve),
    imp("wait4", TranslatedRecord, &[I32, arg(AddrOut), I32, arg(RecordOut("rusage"))], process::sys_wait4),
    imp("exit", Stateful, &[I32], process::sys_exit),
    imp("exit_group", Stateful, &[I32], process::sys_exit_group),
    imp("set_tid_address", Stateful, &[arg(AddrOut)], process::sys_set_tid_address),
];

fn ret(v: impl Into<i64>) -> Result<i64, Abort> {
    Ok(cvt(v.into()))
}

fn einval() -> Result<i64, Abort> {
    Ok(-(libc::EINVAL as i64))
}

fn layout_trap(e: layout::LayoutError) -> Abort {
    Abort::trap(format!("record conversion failed: {e}"))
}

fn open_flags(v: i64) -> i32 {
    layout::remap_flags(FlagDomain::FileStatus, v as u32, Direction::ToHost) as i32
}

fn reserved_fd(ctx: &Ctx<'_>, fd: i64) -> bool {
    ctx.proc.reserved_fds.contains(&(fd as i32))
}

/// Writes a host record to guest memory through the manifest.
fn record_out<T: Copy>(ctx: &Ctx<'_>, name: &str, addr: i64, host: &T) -> Result<(), Abort> {
    let out = memory::slice_mut(ctx.mem(), addr, guest(name).size as u64)?;
    layout::marshal_out(name, bytes_of(host), out).map_err(layout_trap)
}

fn record_in<T: Copy>(ctx: &Ctx<'_>, name: &str, addr: i64) -> Result<T, Abort> {
    let bytes = memory::slice(ctx.mem(), addr, guest(name).size as u64)?;
    // SAFETY: libc records are plain data; marshal_in overwrites them.
    let mut host: T = unsafe { zeroed() };
    layout::marshal_in(name, bytes, bytes_of_mut(&mut host)).map_err(layout_trap)?;
    Ok(host)
}

fn check_out(ctx: &Ctx<'_>, name: &str, addr: i64) -> Result<(), Abort> {
    memory::translate(ctx.mem(), addr, guest(name).size as u64).map(|_| ())
}

fn sys_read(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let p = ctx.ptr(a[1], a[2] as u64)?;
    ret(unsafe { libc::read(a[0] as i32, p.cast(), a[2] as usize) } as i64)
}

fn sys_write(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let p = ctx.ptr(a[1], a[2] as u64)?;
    ret(unsafe { libc::write(a[0] as i32, p.cast(), a[2] as usize) } as i64)
}

fn sys_pread64(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let p = ctx.ptr(a[1], a[2] as u64)?;
    ret(unsafe { libc::pread(a[0] as i32, p.cast(), a[2] as usize, a[3]) } as i64)
}

fn sys_pwrite64(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let p = ctx.ptr(a[1], a[2] as u64)?;
    ret(unsafe { libc::pwrite(a[0] as i32, p.cast(), a[2] as usize, a[3]) } as i64)
}

/// Translates a guest iovec array into host iovecs.
fn iovecs(ctx: &Ctx<'_>, addr: i64, count: i64) -> Result<Option<Vec<libc::iovec>>, Abort> {
    if !(0..=libc::UIO_MAXIOV as i64).contains(&count) {
        return Ok(None);
    }
    let rec = guest("iovec");
    let raw = memory::slice(ctx.mem(), addr, rec.size as u64 * count as u64)?;
    let mut out = Vec::with_capacity(count as usize);
    for chunk in raw.chunks_exact(rec.size) {
        let base = rec.get(chunk, "base") as i64;
        let len = rec.get(chunk, "len");
        let p = if len == 0 {
            std::ptr::null_mut()
        } else {
            ctx.ptr(base, len)?
        };
        out.push(libc::iovec {
            iov_base: p.cast(),
            iov_len: len as usize,
        });
    }
    Ok(Some(out))
}

fn sys_readv(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let Some(iov) = iovecs(ctx, a[1], a[2])? else { return einval() };
    ret(unsafe { libc::readv(a[0] as i32, iov.as_ptr(), iov.len() as i32) } as i64)
}

fn sys_writev(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let Some(iov) = iovecs(ctx, a[1], a[2])? else { return einval() };
    ret(unsafe { libc::writev(a[0] as i32, iov.as_ptr(), iov.len() as i32) } as i64)
}

fn sys_open(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[0])?;
    ret(unsafe { libc::open(path.as_ptr(), open_flags(a[1]), a[2] as libc::c_uint) })
}

fn sys_openat(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[1])?;
    ret(unsafe { libc::openat(a[0] as i32, path.as_ptr(), open_flags(a[2]), a[3] as libc::c_uint) })
}

fn sys_close(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    if reserved_fd(ctx, a[0]) {
        return Ok(-(libc::EBADF as i64));
    }
    ret(unsafe { libc::close(a[0] as i32) })
}

fn sys_lseek(_ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    ret(unsafe { libc::lseek(a[0] as i32, a[1], a[2] as i32) })
}

fn stat_result(ctx: &Ctx<'_>, r: i32, st: &libc::stat, out: i64) -> Result<i64, Abort> {
    if r != 0 {
        return ret(r);
    }
    record_out(ctx, "kstat", out, st)?;
    Ok(0)
}

fn sys_fstat(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    check_out(ctx, "kstat", a[1])?;
    let mut st: libc::stat = unsafe { zeroed() };
    let r = unsafe { libc::fstat(a[0] as i32, &mut st) };
    stat_result(ctx, r, &st, a[1])
}

fn sys_stat(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[0])?;
    check_out(ctx, "kstat", a[1])?;
    let mut st: libc::stat = unsafe { zeroed() };
    let r = unsafe { libc::stat(path.as_ptr(), &mut st) };
    stat_result(ctx, r, &st, a[1])
}

fn sys_lstat(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[0])?;
    check_out(ctx, "kstat", a[1])?;
    let mut st: libc::stat = unsafe { zeroed() };
    let r = unsafe { libc::lstat(path.as_ptr(), &mut st) };
    stat_result(ctx, r, &st, a[1])
}

fn sys_newfstatat(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[1])?;
    check_out(ctx, "kstat", a[2])?;
    let mut st: libc::stat = unsafe { zeroed() };
    let r = unsafe { libc::fstatat(a[0] as i32, path.as_ptr(), &mut st, a[3] as i32) };
    stat_result(ctx, r, &st, a[2])
}

fn sys_access(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[0])?;
    ret(unsafe { libc::access(path.as_ptr(), a[1] as i32) })
}

fn sys_fcntl(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let (fd, cmd) = (a[0] as i32, a[1] as i32);
    match cmd {
        libc::F_DUPFD | libc::F_DUPFD_CLOEXEC | libc::F_GETFD | libc::F_SETFD | libc::F_GETOWN
        | libc::F_SETOWN | libc::F_GETPIPE_SZ | libc::F_SETPIPE_SZ | libc::F_GET_SEALS
        | libc::F_ADD_SEALS => ret(unsafe { libc::fcntl(fd, cmd, a[2] as libc::c_int) }),
        libc::F_GETFL => {
            let r = cvt(unsafe { libc::fcntl(fd, cmd) } as i64);
            if r < 0 {
                return Ok(r);
            }
            Ok(layout::remap_flags(FlagDomain::FileStatus, r as u32, Direction::ToCanonical) as i64)
        }
        libc::F_SETFL => ret(unsafe { libc::fcntl(fd, cmd, open_flags(a[2])) }),
        _ => {
            ctx.warn(format!("fcntl command {cmd} not supported"));
            einval()
        }
    }
}

// Request numbers shared by the asm-generic and x86 ioctl sets.
const TCGETS: u64 = 0x5401;
const TIOCGWINSZ: u64 = 0x5413;
const FIONREAD: u64 = 0x541B;
const FIONBIO: u64 = 0x5421;
const FIONCLEX: u64 = 0x5450;
const FIOCLEX: u64 = 0x5451;
/// Kernel `struct termios` (not the libc one): 4 flag words, line, 19 cc.
const KTERMIOS_SIZE: u64 = 36;

/// Byte-buffer ioctls only; anything needing structure knowledge is
/// `-ENOTTY`.
fn sys_ioctl(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let (fd, req) = (a[0] as i32, a[1] as u32 as u64);
    let size = match req {
        FIOCLEX | FIONCLEX => 0,
        FIONREAD | FIONBIO => 4,
        TIOCGWINSZ => 8,
        TCGETS => KTERMIOS_SIZE,
        _ => {
            ctx.warn(format!("ioctl request {req:#x} not supported"));
            return Ok(-(libc::ENOTTY as i64));
        }
    };
    let p = if size == 0 {
        std::ptr::null_mut()
    } else {
        ctx.ptr(a[2], size)?
    };
    ret(unsafe { libc::syscall(libc::SYS_ioctl, fd, req, p) })
}

fn sys_poll(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let n = a[1];
    if !(0..=65536).contains(&n) {
        return einval();
    }
    let rec = guest("pollfd");
    let size = rec.size as u64;
    let mut fds: Vec<libc::pollfd> = Vec::with_capacity(n as usize);
    for i in 0..n {
        fds.push(record_in(ctx, "pollfd", a[0] + i * size as i64)?);
    }
    let r = cvt(unsafe { libc::poll(fds.as_mut_ptr(), n as libc::nfds_t, a[2] as i32) } as i64);
    if r >= 0 {
        for (i, p) in fds.iter().enumerate() {
            record_out(ctx, "pollfd", a[0] + i as i64 * size as i64, p)?;
        }
    }
    Ok(r)
}

fn sys_dup(_ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    ret(unsafe { libc::dup(a[0] as i32) })
}

fn sys_dup2(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    if reserved_fd(ctx, a[1]) {
        return Ok(-(libc::EBADF as i64));
    }
    ret(unsafe { libc::dup2(a[0] as i32, a[1] as i32) })
}

fn sys_dup3(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    if reserved_fd(ctx, a[1]) {
        return Ok(-(libc::EBADF as i64));
    }
    ret(unsafe { libc::dup3(a[0] as i32, a[1] as i32, open_flags(a[2])) })
}

fn pipe_out(ctx: &Ctx<'_>, addr: i64, r: i32, fds: [i32; 2]) -> Result<i64, Abort> {
    if r != 0 {
        return ret(r);
    }
    memory::write_u32(ctx.mem(), addr, fds[0] as u32)?;
    memory::write_u32(ctx.mem(), addr + 4, fds[1] as u32)?;
    Ok(0)
}

fn sys_pipe(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    ctx.ptr(a[0], 8)?;
    let mut fds = [0i32; 2];
    let r = unsafe { libc::pipe(fds.as_mut_ptr()) };
    pipe_out(ctx, a[0], r, fds)
}

fn sys_pipe2(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    ctx.ptr(a[0], 8)?;
    let mut fds = [0i32; 2];
    let r = unsafe { libc::pipe2(fds.as_mut_ptr(), open_flags(a[1])) };
    pipe_out(ctx, a[0], r, fds)
}

fn sys_getcwd(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let p = ctx.ptr(a[0], a[1] as u64)?;
    ret(unsafe { libc::syscall(libc::SYS_getcwd, p, a[1] as usize) })
}

fn sys_chdir(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[0])?;
    ret(unsafe { libc::chdir(path.as_ptr()) })
}

fn sys_mkdir(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[0])?;
    ret(unsafe { libc::mkdir(path.as_ptr(), a[1] as libc::mode_t) })
}

fn sys_rmdir(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[0])?;
    ret(unsafe { libc::rmdir(path.as_ptr()) })
}

fn sys_unlink(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path = ctx.path(a[0])?;
    ret(unsafe { libc::unlink(path.as_ptr()) })
}

fn sys_rename(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let from = ctx.path(a[0])?;
    let to = ctx.path(a[1])?;
    ret(unsafe { libc::rename(from.as_ptr(), to.as_ptr()) })
}

fn sys_socket(_ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    ret(unsafe { libc::socket(a[0] as i32, a[1] as i32, a[2] as i32) })
}

// Socket addresses have the same byte layout on every supported
// architecture, so they pass through as buffers.
fn sockaddr(ctx: &Ctx<'_>, addr: i64, len: i64) -> Result<*const libc::sockaddr, Abort> {
    Ok(ctx.opt_ptr(addr, len as u32 as u64)? as *const libc::sockaddr)
}

fn sys_bind(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let sa = sockaddr(ctx, a[1], a[2])?;
    ret(unsafe { libc::bind(a[0] as i32, sa, a[2] as libc::socklen_t) })
}

fn sys_connect(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let sa = sockaddr(ctx, a[1], a[2])?;
    ret(unsafe { libc::connect(a[0] as i32, sa, a[2] as libc::socklen_t) })
}

fn sys_sendto(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let p = ctx.ptr(a[1], a[2] as u64)?;
    let sa = sockaddr(ctx, a[4], a[5])?;
    ret(unsafe {
        libc::sendto(a[0] as i32, p.cast(), a[2] as usize, a[3] as i32, sa, a[5] as libc::socklen_t)
    } as i64)
}

fn sys_recvfrom(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let p = ctx.ptr(a[1], a[2] as u64)?;
    let (src, mut len) = if a[4] != 0 && a[5] != 0 {
        let len = memory::read_u32(ctx.mem(), a[5])?;
        (ctx.ptr(a[4], len as u64)? as *mut libc::sockaddr, len)
    } else {
        (std::ptr::null_mut(), 0)
    };
    let lenp = if src.is_null() {
        std::ptr::null_mut()
    } else {
        &mut len as *mut libc::socklen_t
    };
    let r = cvt(unsafe { libc::recvfrom(a[0] as i32, p.cast(), a[2] as usize, a[3] as i32, src, lenp) } as i64);
    if r >= 0 && !src.is_null() {
        memory::write_u32(ctx.mem(), a[5], len)?;
    }
    Ok(r)
}

fn sys_getpid(_ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    Ok(unsafe { libc::getpid() } as i64)
}

fn sys_getppid(_ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    Ok(unsafe { libc::getppid() } as i64)
}

fn sys_gettid(_ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    Ok(unsafe { libc::gettid() } as i64)
}

fn sys_getuid(_ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    Ok(unsafe { libc::getuid() } as i64)
}

fn sys_geteuid(_ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    Ok(unsafe { libc::geteuid() } as i64)
}

fn sys_getgid(_ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    Ok(unsafe { libc::getgid() } as i64)
}

fn sys_getegid(_ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    Ok(unsafe { libc::getegid() } as i64)
}

fn sys_getrusage(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    check_out(ctx, "rusage", a[1])?;
    let mut ru: libc::rusage = unsafe { zeroed() };
    let r = unsafe { libc::getrusage(a[0] as i32, &mut ru) };
    if r != 0 {
        return ret(r);
    }
    record_out(ctx, "rusage", a[1], &ru)?;
    Ok(0)
}

fn sys_prlimit64(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let new: Option<libc::rlimit64> = if a[2] != 0 {
        Some(record_in(ctx, "rlimit", a[2])?)
    } else {
        None
    };
    if a[3] != 0 {
        check_out(ctx, "rlimit", a[3])?;
    }
    let mut old: libc::rlimit64 = unsafe { zeroed() };
    let r = unsafe {
        libc::syscall(
            libc::SYS_prlimit64,
            a[0] as i32,
            a[1] as i32,
            new.as_ref().map_or(std::ptr::null(), |n| n as *const libc::rlimit64),
            if a[3] != 0 { &mut old as *mut libc::rlimit64 } else { std::ptr::null_mut() },
        )
    };
    if r != 0 {
        return ret(r);
    }
    if a[3] != 0 {
        record_out(ctx, "rlimit", a[3], &old)?;
    }
    Ok(0)
}

fn sys_clock_gettime(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    check_out(ctx, "timespec", a[1])?;
    let mut ts: libc::timespec = unsafe { zeroed() };
    let r = unsafe { libc::clock_gettime(a[0] as libc::clockid_t, &mut ts) };
    if r != 0 {
        return ret(r);
    }
    record_out(ctx, "timespec", a[1], &ts)?;
    Ok(0)
}

fn sys_nanosleep(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let req: libc::timespec = record_in(ctx, "timespec", a[0])?;
    if a[1] != 0 {
        check_out(ctx, "timespec", a[1])?;
    }
    let mut rem: libc::timespec = unsafe { zeroed() };
    let r = cvt(unsafe { libc::nanosleep(&req, &mut rem) } as i64);
    if r == -(libc::EINTR as i64) && a[1] != 0 {
        record_out(ctx, "timespec", a[1], &rem)?;
    }
    Ok(r)
}

fn sys_sched_yield(_ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    ret(unsafe { libc::sched_yield() })
}

fn sys_getrandom(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let p = ctx.ptr(a[0], a[1] as u64)?;
    ret(unsafe { libc::getrandom(p.cast(), a[1] as usize, a[2] as u32) } as i64)
}

fn mmap_request(a: &[i64]) -> MmapRequest {
    MmapRequest {
        addr: a[0] as u64,
        len: a[1] as u64,
        prot: layout::remap_flags(FlagDomain::MmapProt, a[2] as u32, Direction::ToHost) as i32,
        flags: layout::remap_flags(FlagDomain::MmapFlags, a[3] as u32, Direction::ToHost) as i32,
        fd: a[4] as i32,
        offset: a[5],
    }
}

fn sys_mmap(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let proc = ctx.proc;
    let (r, note) = proc.pool.lock().mmap(ctx.mem_mut(), mmap_request(a));
    if note.shared_degraded {
        ctx.warn("MAP_SHARED mapped privately");
    }
    Ok(r)
}

fn sys_munmap(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let proc = ctx.proc;
    let r = proc.pool.lock().munmap(ctx.mem_mut(), a[0], a[1] as u64);
    Ok(r)
}

fn sys_mremap(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let proc = ctx.proc;
    let r = proc
        .pool
        .lock()
        .mremap(ctx.mem_mut(), a[0], a[1] as u64, a[2] as u64, a[3] as i32, a[4] as u64);
    Ok(r)
}

/// Changes host page protections inside linear memory only.
fn sys_mprotect(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let page = host_page_size();
    let (addr, len) = (a[0], a[1] as u64);
    if addr < 0 || addr as u64 % page != 0 {
        return einval();
    }
    let len = len.div_ceil(page) * page;
    let size = ctx.mem().size();
    if (addr as u64).checked_add(len).is_none_or(|end| end > size) {
        return Ok(-(libc::ENOMEM as i64));
    }
    if len == 0 {
        return Ok(0);
    }
    let p = ctx.ptr(addr, len)?;
    let prot = layout::remap_flags(FlagDomain::MmapProt, a[2] as u32, Direction::ToHost) as i32;
    ret(unsafe { libc::mprotect(p.cast(), len as usize, prot) })
}

fn sys_brk(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    Ok(ctx.proc.pool.lock().brk(a[0] as u64))
}

const FUTEX_CMD_MASK: i32 = !(libc::FUTEX_PRIVATE_FLAG | libc::FUTEX_CLOCK_REALTIME);

fn sys_futex(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let op = a[1] as i32;
    let uaddr = ctx.ptr(a[0], 4)?;
    let (arg4, uaddr2): (usize, *mut u8) = match op & FUTEX_CMD_MASK {
        libc::FUTEX_WAIT | libc::FUTEX_WAIT_BITSET => {
            let ts = if a[3] != 0 {
                Some(record_in::<libc::timespec>(ctx, "timespec", a[3])?)
            } else {
                None
            };
            let r = unsafe {
                libc::syscall(
                    libc::SYS_futex,
                    uaddr,
                    op,
                    a[2] as u32,
                    ts.as_ref().map_or(std::ptr::null(), |t| t as *const libc::timespec),
                    std::ptr::null::<u32>(),
                    a[5] as u32,
                )
            };
            return ret(r);
        }
        libc::FUTEX_WAKE | libc::FUTEX_WAKE_BITSET => (0, std::ptr::null_mut()),
        libc::FUTEX_REQUEUE | libc::FUTEX_CMP_REQUEUE | libc::FUTEX_WAKE_OP => {
            (a[3] as u32 as usize, ctx.ptr(a[4], 4)?)
        }
        _ => return Ok(-(libc::ENOSYS as i64)),
    };
    ret(unsafe { libc::syscall(libc::SYS_futex, uaddr, op, a[2] as u32, arg4, uaddr2, a[5] as u32) })
}

fn sys_rt_sigreturn(_ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    // Guest handlers return normally; there is no signal frame to unwind.
    Ok(0)
}

fn sys_kill(_ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    ret(unsafe { libc::kill(a[0] as i32, a[1] as i32) })
}

fn sys_tkill(_ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    ret(unsafe { libc::syscall(libc::SYS_tkill, a[0] as i32, a[1] as i32) })
}

fn sys_tgkill(_ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    ret(unsafe { libc::syscall(libc::SYS_tgkill, a[0] as i32, a[1] as i32, a[2] as i32) })
}
