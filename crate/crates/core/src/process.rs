//! 1-to-1 process model: every WALI process is one native process, every
//! WALI thread one native thread.

use std::ffi::{CString, OsString};
use std::fs::File;
use std::io::{Read, Write};
use std::os::fd::FromRawFd;
use std::os::unix::ffi::{OsStrExt, OsStringExt};
use std::path::Path;
use std::sync::atomic::Ordering;

use crate::bridge::ThreadSpawn;
use crate::context::Ctx;
use crate::error::{cvt, Abort};
use crate::layout::{bytes_of, guest};
use crate::memory;
use crate::signals;
use crate::startup::merge_env;

/// Hidden runner flag telling a re-executed runner to consume the segment.
pub const ENV_HANDOFF_FLAG: &str = "--env-handoff";

pub fn env_segment_name(pid: i32) -> String {
    format!("/wali.env.{pid}")
}

/// Little-endian u32 length prefixes, a zero length terminates.
pub fn encode_env(entries: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in entries {
        out.extend_from_slice(&(e.len() as u32).to_le_bytes());
        out.extend_from_slice(e);
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out
}

pub fn decode_env(bytes: &[u8]) -> Result<Vec<Vec<u8>>, String> {
    let mut out = Vec::new();
    let mut at = 0usize;
    loop {
        let Some(prefix) = bytes.get(at..at + 4) else {
            return Err(format!("truncated length prefix at byte {at}"));
        };
        let len = u32::from_le_bytes(prefix.try_into().unwrap()) as usize;
        at += 4;
        if len == 0 {
            break;
        }
        let Some(entry) = bytes.get(at..at + len) else {
            return Err(format!("entry at byte {at} overruns the segment"));
        };
        out.push(entry.to_vec());
        at += len;
    }
    if at != bytes.len() {
        return Err(format!("{} trailing bytes after terminator", bytes.len() - at));
    }
    Ok(out)
}

fn shm_open(name: &str, flags: i32, mode: libc::mode_t) -> std::io::Result<File> {
    let c = CString::new(name).expect("segment name");
    let fd = unsafe { libc::shm_open(c.as_ptr(), flags, mode) };
    if fd < 0 {
        return Err(std::io::Error::last_os_error());
    }
    // SAFETY: fresh descriptor owned by the returned File.
    Ok(unsafe { File::from_raw_fd(fd) })
}

pub fn unlink_env_segment(pid: i32) {
    let c = CString::new(env_segment_name(pid)).expect("segment name");
    unsafe { libc::shm_unlink(c.as_ptr()) };
}

pub fn write_env_segment(pid: i32, entries: &[Vec<u8>]) -> std::io::Result<()> {
    let name = env_segment_name(pid);
    let flags = libc::O_CREAT | libc::O_EXCL | libc::O_RDWR | libc::O_CLOEXEC;
    let mut f = match shm_open(&name, flags, 0o600) {
        Err(e) if e.raw_os_error() == Some(libc::EEXIST) => {
            // Left behind by an earlier process that had this pid.
            unlink_env_segment(pid);
            shm_open(&name, flags, 0o600)?
        }
        r => r?,
    };
    f.write_all(&encode_env(entries))
}

/// Reads and unlinks this process's segment. `None` when there is none.
pub fn take_env_segment(pid: i32) -> std::io::Result<Option<Vec<Vec<u8>>>> {
    let mut f = match shm_open(&env_segment_name(pid), libc::O_RDONLY | libc::O_CLOEXEC, 0) {
        Err(e) if e.raw_os_error() == Some(libc::ENOENT) => return Ok(None),
        r => r?,
    };
    unlink_env_segment(pid);
    let mut st: libc::stat = unsafe { std::mem::zeroed() };
    use std::os::fd::AsRawFd;
    if unsafe { libc::fstat(f.as_raw_fd(), &mut st) } != 0 {
        return Err(std::io::Error::last_os_error());
    }
    if st.st_uid != unsafe { libc::getuid() } {
        return Err(std::io::Error::other("environment segment owned by another user"));
    }
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    decode_env(&bytes).map(Some).map_err(std::io::Error::other)
}

/// Whether `path` holds a module the runner can execute.
pub fn is_wasm_image(path: &Path) -> std::io::Result<bool> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    let n = f.read(&mut magic)?;
    if n == 4 && &magic == b"\0asm" {
        return Ok(true);
    }
    Ok(path.extension().is_some_and(|e| e == "wat"))
}

/// Runner command line for an `execve` of a module.
pub fn runner_argv(runner: &Path, forward: &[OsString], module: &Path, argv: &[Vec<u8>]) -> Vec<OsString> {
    let argv0 = argv
        .first()
        .cloned()
        .unwrap_or_else(|| module.as_os_str().as_bytes().to_vec());
    let mut arg0 = OsString::from("--argv0=");
    arg0.push(OsString::from_vec(argv0));
    let mut out = vec![runner.as_os_str().to_owned(), "run".into()];
    out.extend(forward.iter().cloned());
    out.push(ENV_HANDOFF_FLAG.into());
    out.push(arg0);
    out.push(module.as_os_str().to_owned());
    out.push("--".into());
    out.extend(argv.iter().skip(1).map(|a| OsString::from_vec(a.clone())));
    out
}

fn cstrings<I: IntoIterator<Item = Vec<u8>>>(items: I) -> Vec<CString> {
    items
        .into_iter()
        .map(|s| CString::new(s).expect("no interior NUL"))
        .collect()
}

fn exec(path: &CString, argv: &[CString], envp: &[CString]) -> i64 {
    let mut av: Vec<*const libc::c_char> = argv.iter().map(|s| s.as_ptr()).collect();
    av.push(std::ptr::null());
    let mut ev: Vec<*const libc::c_char> = envp.iter().map(|s| s.as_ptr()).collect();
    ev.push(std::ptr::null());
    unsafe { libc::execve(path.as_ptr(), av.as_ptr(), ev.as_ptr()) };
    crate::error::last_errno()
}

pub fn sys_execve(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let path_bytes = memory::cstring(ctx.mem(), a[0])?;
    let argv = memory::cstring_array(ctx.mem(), a[1])?;
    let envp = memory::cstring_array(ctx.mem(), a[2])?;
    let path = Path::new(std::ffi::OsStr::from_bytes(&path_bytes)).to_path_buf();
    let wasm = match is_wasm_image(&path) {
        Ok(w) => w,
        Err(e) => return Ok(-(e.raw_os_error().unwrap_or(libc::ENOENT) as i64)),
    };
    if !wasm {
        // Native targets get exactly what the guest passed.
        let c_path = CString::new(path_bytes).expect("no interior NUL");
        return Ok(exec(&c_path, &cstrings(argv), &cstrings(envp)));
    }

    let runner = match &ctx.proc.exec.runner {
        Some(r) => r.clone(),
        None => match std::env::current_exe() {
            Ok(p) => p,
            Err(e) => return Ok(-(e.raw_os_error().unwrap_or(libc::ENOEXEC) as i64)),
        },
    };
    let pid = unsafe { libc::getpid() };
    let env = merge_env(&ctx.proc.startup.env, &envp);
    if let Err(e) = write_env_segment(pid, &env) {
        return Err(Abort::trap(format!("cannot write environment segment: {e}")));
    }
    let args = runner_argv(&runner, &ctx.proc.exec.forward, &path, &argv);
    let host_env: Vec<Vec<u8>> = std::env::vars_os()
        .map(|(k, v)| {
            let mut e = k.into_vec();
            e.push(b'=');
            e.extend(v.into_vec());
            e
        })
        .collect();
    let c_runner = CString::new(runner.into_os_string().into_vec()).expect("runner path");
    let r = exec(
        &c_runner,
        &cstrings(args.into_iter().map(OsString::into_vec)),
        &cstrings(host_env),
    );
    unlink_env_segment(pid);
    Ok(r)
}

pub fn sys_fork(ctx: &mut Ctx<'_>, _a: &[i64]) -> Result<i64, Abort> {
    if ctx.proc.live_threads() > 0 {
        ctx.warn("fork refused: guest has live threads");
        return Ok(-(libc::ENOSYS as i64));
    }
    let pid = unsafe { libc::fork() };
    if pid == 0 {
        ctx.proc.forked.store(true, Ordering::Relaxed);
        signals::reset_pending();
        ctx.guest.thread().tid = unsafe { libc::gettid() };
    }
    Ok(cvt(pid as i64))
}

pub fn sys_wait4(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let (status, ru) = (a[1], a[3]);
    if status != 0 {
        ctx.ptr(status, 4)?;
    }
    if ru != 0 {
        ctx.ptr(ru, guest("rusage").size as u64)?;
    }
    let mut st = 0i32;
    let mut hru: libc::rusage = unsafe { std::mem::zeroed() };
    let r = cvt(unsafe {
        libc::wait4(
            a[0] as i32,
            &mut st,
            a[2] as i32,
            if ru != 0 { &mut hru } else { std::ptr::null_mut() },
        )
    } as i64);
    if r > 0 {
        if status != 0 {
            memory::write_u32(ctx.mem(), status, st as u32)?;
        }
        if ru != 0 {
            let out = memory::slice_mut(ctx.mem(), ru, guest("rusage").size as u64)?;
            crate::layout::marshal_out("rusage", bytes_of(&hru), out)
                .map_err(|e| Abort::trap(e.to_string()))?;
        }
    }
    Ok(r)
}

pub fn sys_exit_group(_ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    Err(Abort::Exit((a[0] & 0xff) as i32))
}

pub fn sys_exit(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    if !ctx.guest.thread().main {
        return Err(Abort::ThreadExit);
    }
    // The process lives on until its last thread exits.
    while ctx.proc.live_threads() > 0 {
        std::thread::sleep(std::time::Duration::from_millis(1));
    }
    Err(Abort::Exit((a[0] & 0xff) as i32))
}

pub fn sys_set_tid_address(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    if a[0] != 0 {
        ctx.ptr(a[0], 4)?;
    }
    ctx.guest.thread().clear_child_tid = a[0] as u32;
    Ok(unsafe { libc::gettid() } as i64)
}

const THREAD_REQUIRED: u64 = (libc::CLONE_VM | libc::CLONE_THREAD | libc::CLONE_SIGHAND) as u64;
const THREAD_ALLOWED: u64 = THREAD_REQUIRED
    | (libc::CLONE_FS
        | libc::CLONE_FILES
        | libc::CLONE_SYSVSEM
        | libc::CLONE_SETTLS
        | libc::CLONE_PARENT_SETTID
        | libc::CLONE_CHILD_SETTID
        | libc::CLONE_CHILD_CLEARTID
        | libc::CLONE_DETACHED) as u64;

/// `clone(flags, stack, parent_tid, tls, child_tid)`; threads only.
pub fn sys_clone(ctx: &mut Ctx<'_>, a: &[i64]) -> Result<i64, Abort> {
    let flags = a[0] as u64;
    if flags & THREAD_REQUIRED != THREAD_REQUIRED || flags & !THREAD_ALLOWED != 0 {
        ctx.warn(format!("clone flags {flags:#x} are not a thread combination"));
        return Ok(-(libc::ENOSYS as i64));
    }
    let addr = |v: i64| -> Result<u32, Abort> {
        u32::try_from(v).map_err(|_| Abort::trap(format!("clone argument {v:#x} is not a guest address")))
    };
    let req = ThreadSpawn {
        flags,
        stack: addr(a[1])?,
        parent_tid: addr(a[2])?,
        tls: addr(a[3])?,
        child_tid: addr(a[4])?,
    };
    if flags & libc::CLONE_PARENT_SETTID as u64 != 0 {
        ctx.ptr(req.parent_tid as i64, 4)?;
    }
    if flags & (libc::CLONE_CHILD_SETTID | libc::CLONE_CHILD_CLEARTID) as u64 != 0 {
        ctx.ptr(req.child_tid as i64, 4)?;
    }
    ctx.guest.spawn_thread(req)
}
