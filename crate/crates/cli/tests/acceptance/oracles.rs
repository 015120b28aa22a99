//! Native counterparts of the fixtures. Each case issues the same syscalls
//! as its fixture and prints the same keys. Output goes straight to fd 1 so
//! forked children never replay buffered text.

use std::ffi::CString;
use std::mem::zeroed;
use std::ptr::{null, null_mut};
use std::sync::atomic::{AtomicI32, AtomicU32, Ordering};

use libc::c_long;

fn out(s: &str) {
    let b = s.as_bytes();
    let mut off = 0;
    while off < b.len() {
        let n = unsafe { libc::write(1, b[off..].as_ptr().cast(), b.len() - off) };
        assert!(n > 0, "oracle write failed");
        off += n as usize;
    }
}

fn kv(k: &str, v: i64) {
    out(&format!("{k}={v}\n"));
}

fn kvs(k: &str, v: &[u8]) {
    out(&format!("{k}={}\n", String::from_utf8_lossy(v)));
}

fn errno() -> i64 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0) as i64
}

/// Raw syscall result in kernel convention: `-errno` on failure.
fn sys(r: c_long) -> i64 {
    if r == -1 {
        -errno()
    } else {
        r as i64
    }
}

macro_rules! sc {
    ($nr:expr $(, $a:expr)* $(,)?) => {
        {
            #[allow(unused_unsafe)]
            let r = unsafe { libc::syscall($nr $(, $a as c_long)*) };
            sys(r)
        }
    };
}

fn cs(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn quit(code: i32) -> ! {
    unsafe { libc::_exit(code) }
}

pub fn run(case: &str) -> ! {
    match case {
        "files" => files(),
        "ids" => ids(),
        "memory" => memory(),
        "signals" => signals(),
        "sockets" => sockets(),
        "futex_clone" => futex_clone(),
        "fork" => fork(),
        "sig_nest" => sig_nest(),
        "sig_queue" => sig_queue(),
        "exec_parent" => exec_parent(),
        "getpid_loop" => getpid_loop(),
        "sigfuzz" => crate::sigfuzz::run(),
        other => {
            eprintln!("unknown oracle case {other}");
            quit(2)
        }
    }
    quit(0)
}

fn files() {
    use libc::*;
    let f = cs("f.txt");
    let g = cs("g.txt");
    let missing = cs("missing");
    let mut st: stat = unsafe { zeroed() };
    let is_dir = |st: &stat| ((st.st_mode & S_IFMT) == S_IFDIR) as i64;

    let fd = sc!(SYS_open, f.as_ptr(), 577, 420);
    kv("create_ok", (fd >= 3) as i64);
    kv("nd_fd", fd);
    kv("write", sc!(SYS_write, fd, b"hello world\n".as_ptr(), 12));
    kv("close", sc!(SYS_close, fd));

    kv("stat", sc!(SYS_stat, f.as_ptr(), &mut st as *mut stat));
    kv("stat_size", st.st_size);
    kv("stat_mode", st.st_mode as i64);
    kv("stat_nlink", st.st_nlink as i64);
    kv("lstat", sc!(SYS_lstat, cs(".").as_ptr(), &mut st as *mut stat));
    kv("lstat_dir", is_dir(&st));
    kv("stat_missing", sc!(SYS_stat, missing.as_ptr(), &mut st as *mut stat));
    kv("lstat_missing", sc!(SYS_lstat, missing.as_ptr(), &mut st as *mut stat));
    kv("access_r", sc!(SYS_access, f.as_ptr(), 4));
    kv("access_x", sc!(SYS_access, f.as_ptr(), 1));
    kv("access_missing", sc!(SYS_access, missing.as_ptr(), 0));

    let fd = sc!(SYS_open, f.as_ptr(), 0, 0);
    kv("fstat", sc!(SYS_fstat, fd, &mut st as *mut stat));
    kv("fstat_size", st.st_size);
    kv("fstat_dir", is_dir(&st));
    let mut buf = [0u8; 64];
    let r = sc!(SYS_read, fd, buf.as_mut_ptr(), 5);
    kv("read", r);
    kvs("read_data", &buf[..r as usize]);
    kv("lseek_end", sc!(SYS_lseek, fd, 0, 2));
    kv("lseek_set", sc!(SYS_lseek, fd, 6, 0));
    kv("lseek_cur", sc!(SYS_lseek, fd, 0, 1));
    kv("lseek_bad", sc!(SYS_lseek, fd, 0, 99));
    let r = sc!(SYS_read, fd, buf.as_mut_ptr(), 5);
    kvs("read2_data", &buf[..r as usize]);
    let r = sc!(SYS_pread64, fd, buf.as_mut_ptr(), 5, 0);
    kv("pread", r);
    kvs("pread_data", &buf[..r as usize]);
    kv("pread_eof", sc!(SYS_pread64, fd, buf.as_mut_ptr(), 5, 100));
    kv("pread_einval", sc!(SYS_pread64, fd, buf.as_mut_ptr(), 5, -1i64));
    kv("pos_after_pread", sc!(SYS_lseek, fd, 0, 1));
    kv("write_rdonly", sc!(SYS_write, fd, b"x".as_ptr(), 1));

    kv("getfd", sc!(SYS_fcntl, fd, 1, 0));
    kv("setfd", sc!(SYS_fcntl, fd, 2, 1));
    kv("getfd_after", sc!(SYS_fcntl, fd, 1, 0));
    kv("getfl_acc", sc!(SYS_fcntl, fd, 3, 0) & 3);
    kv("fcntl_badfd", sc!(SYS_fcntl, 999, 1, 0));

    let mut n: c_int = 0;
    kv("fionread", sc!(SYS_ioctl, fd, 0x541B, &mut n as *mut c_int));
    kv("fionread_n", n as i64);
    let mut tio = [0u8; 64];
    kv("tcgets", sc!(SYS_ioctl, fd, 0x5401, tio.as_mut_ptr()));
    kv("ioctl_badfd", sc!(SYS_ioctl, 999, 0x541B, &mut n as *mut c_int));

    let mut fds = [
        pollfd { fd: fd as c_int, events: 1, revents: 0 },
        pollfd { fd: 999, events: 1, revents: 0 },
    ];
    kv("poll", sc!(SYS_poll, fds.as_mut_ptr(), 2, 0));
    kv("poll_revents", fds[0].revents as i64);
    kv("poll_nval", fds[1].revents as i64);

    kv("close2", sc!(SYS_close, fd));
    kv("close_again", sc!(SYS_close, fd));

    let fd = sc!(SYS_open, g.as_ptr(), 577, 384);
    let parts: [&[u8]; 3] = [b"abc", b"de", b"fghi"];
    let iov: Vec<iovec> = parts
        .iter()
        .map(|p| iovec { iov_base: p.as_ptr() as *mut c_void, iov_len: p.len() })
        .collect();
    kv("writev", sc!(SYS_writev, fd, iov.as_ptr(), 3));
    kv("writev_zero", sc!(SYS_writev, fd, iov.as_ptr(), 0));
    kv("writev_neg", sc!(SYS_writev, fd, iov.as_ptr(), -1i64));
    sc!(SYS_close, fd);
    let fd = sc!(SYS_open, g.as_ptr(), 0, 0);
    let r = sc!(SYS_read, fd, buf.as_mut_ptr(), 64);
    kvs("writev_data", &buf[..r as usize]);
    kv("read_eof", sc!(SYS_read, fd, buf.as_mut_ptr(), 64));
    sc!(SYS_close, fd);

    kv("open_missing", sc!(SYS_open, cs("nope/x").as_ptr(), 0, 0));
    kv("open_excl", sc!(SYS_open, f.as_ptr(), 193, 420));
}

fn ids() {
    use libc::*;
    kv("pid", sc!(SYS_getpid));
    kv("uid", sc!(SYS_getuid));
    kv("euid", sc!(SYS_geteuid));
    kv("gid", sc!(SYS_getgid));
    kv("egid", sc!(SYS_getegid));

    let mut ru: rusage = unsafe { zeroed() };
    kv("rusage", sc!(SYS_getrusage, 0, &mut ru as *mut rusage));
    kv("rusage_maxrss_pos", (ru.ru_maxrss > 0) as i64);
    kv("rusage_usec_ok", (ru.ru_utime.tv_usec < 1_000_000) as i64);
    kv("rusage_children", sc!(SYS_getrusage, -1i64, &mut ru as *mut rusage));
    kv("rusage_bad", sc!(SYS_getrusage, 99, &mut ru as *mut rusage));

    let mut old: rlimit64 = unsafe { zeroed() };
    kv("prlimit_get", sc!(SYS_prlimit64, 0, 7, 0, &mut old as *mut rlimit64));
    kv("nofile_cur", old.rlim_cur as i64);
    kv("nofile_max", old.rlim_max as i64);
    sc!(SYS_prlimit64, 0, 4, 0, &mut old as *mut rlimit64);
    let max = old.rlim_max;
    let new = rlimit64 { rlim_cur: 0, rlim_max: max };
    kv("prlimit_set", sc!(SYS_prlimit64, 0, 4, &new as *const rlimit64, &mut old as *mut rlimit64));
    kv("prlimit_reget", sc!(SYS_prlimit64, 0, 4, 0, &mut old as *mut rlimit64));
    kv("core_cur", old.rlim_cur as i64);
    kv("core_max_kept", (old.rlim_max == max) as i64);
    kv("prlimit_bad", sc!(SYS_prlimit64, 0, 99, 0, &mut old as *mut rlimit64));
}

fn memory() {
    use libc::*;
    let p = sc!(SYS_mmap, 0, 8192, 3, 0x22, -1i64, 0);
    kv("mmap_ok", (p > 0 && p % 4096 == 0) as i64);
    kv("nd_mmap", p);
    let at = |off: i64| (p + off) as *mut u32;
    unsafe {
        kv("anon_zero", (at(4100).read_unaligned() == 0) as i64);
        at(0).write(0x12345678);
        kv("anon_rw", at(0).read() as i64);
        kv("mprotect", sc!(SYS_mprotect, p, 4096, 1));
        kv("still_readable", at(0).read() as i64);
        kv("mprotect_unaligned", sc!(SYS_mprotect, p + 1, 4096, 3));
        kv("mprotect_rw", sc!(SYS_mprotect, p, 4096, 3));
        at(0).write(7);
        kv("rw_again", at(0).read() as i64);
    }
    kv("munmap_unaligned", sc!(SYS_munmap, p + 1, 8192));
    kv("munmap", sc!(SYS_munmap, p, 8192));

    kv("mmap_zero_len", sc!(SYS_mmap, 0, 0, 3, 0x22, -1i64, 0));
    kv("mmap_badfd", sc!(SYS_mmap, 0, 4096, 1, 2, 999, 0));
    kv("mmap_badoff", sc!(SYS_mmap, 0, 4096, 3, 0x22, -1i64, 100));

    let fd = sc!(SYS_open, cs("map.dat").as_ptr(), 578, 420);
    sc!(SYS_write, fd, b"mapped bytes from a file".as_ptr(), 24);
    let q = sc!(SYS_mmap, 0, 4096, 1, 2, fd, 0);
    kv("file_map_ok", (q > 0) as i64);
    let data = unsafe { std::slice::from_raw_parts(q as *const u8, 25) };
    kvs("file_data", &data[..24]);
    kv("file_tail_zero", (data[24] == 0) as i64);
    sc!(SYS_close, fd);
    kv("map_survives_close", data[0] as i64);
    kv("munmap_file", sc!(SYS_munmap, q, 4096));
}

static COUNT: AtomicU32 = AtomicU32::new(0);
static LAST_SIG: AtomicI32 = AtomicI32::new(0);

extern "C" fn count_handler(sig: i32) {
    COUNT.fetch_add(1, Ordering::SeqCst);
    LAST_SIG.store(sig, Ordering::SeqCst);
}

fn install(sig: i32, handler: usize, flags: i32, mask: &[i32]) -> i64 {
    unsafe {
        let mut act: libc::sigaction = zeroed();
        act.sa_sigaction = handler;
        act.sa_flags = flags;
        libc::sigemptyset(&mut act.sa_mask);
        for &s in mask {
            libc::sigaddset(&mut act.sa_mask, s);
        }
        sys(libc::sigaction(sig, &act, null_mut()) as c_long)
    }
}

fn sigset(sigs: &[i32]) -> u64 {
    sigs.iter().fold(0, |m, s| m | 1 << (s - 1))
}

fn signals() {
    use libc::*;
    let pid = sc!(SYS_getpid);
    let count = || COUNT.load(Ordering::SeqCst) as i64;
    let mut old: sigaction = unsafe { zeroed() };

    kv("sigaction", install(10, count_handler as *const () as usize, 0, &[]));
    kv("sigaction_query", sys(unsafe { sigaction(10, null(), &mut old) } as c_long));
    kv("old_is_handler", (old.sa_sigaction > 1) as i64);
    kv("kill", sc!(SYS_kill, pid, 10));
    kv("count_after_kill", count());
    kv("handler_sig", LAST_SIG.load(Ordering::SeqCst) as i64);

    let set = sigset(&[10]);
    let mut cur = 0u64;
    kv("block", sc!(SYS_rt_sigprocmask, 0, &set as *const u64, 0, 8));
    kv("kill_blocked", sc!(SYS_kill, pid, 10));
    kv("count_blocked", count());
    kv("mask_query", sc!(SYS_rt_sigprocmask, 0, 0, &mut cur as *mut u64, 8));
    kv("usr1_in_mask", ((cur >> 9) & 1) as i64);
    kv("unblock", sc!(SYS_rt_sigprocmask, 1, &set as *const u64, 0, 8));
    kv("count_unblocked", count());
    kv("sigprocmask_badhow", sc!(SYS_rt_sigprocmask, 9, &set as *const u64, 0, 8));
    kv("sigprocmask_badsize", sc!(SYS_rt_sigprocmask, 0, &set as *const u64, 0, 4));

    let mut act: sigaction = unsafe { zeroed() };
    act.sa_sigaction = SIG_IGN;
    kv("ignore", sys(unsafe { sigaction(10, &act, &mut old) } as c_long));
    kv("prev_was_handler", (old.sa_sigaction > 1) as i64);
    kv("kill_ignored", sc!(SYS_kill, pid, 10));
    kv("count_ignored", count());
    let mut raw = [0u64; 4];
    kv("sigaction_badsize", sc!(SYS_rt_sigaction, 10, 0, raw.as_mut_ptr(), 4));
    kv("sigaction_badsig", sc!(SYS_rt_sigaction, 0, 0, raw.as_mut_ptr(), 8));
    act.sa_sigaction = count_handler as *const () as usize;
    kv("sigaction_sigkill", sys(unsafe { sigaction(9, &act, null_mut()) } as c_long));
    kv("kill_badsig", sc!(SYS_kill, pid, 99));
    kv("kill_probe", sc!(SYS_kill, pid, 0));
}

fn sockets() {
    use libc::*;
    fn sun(path: &str) -> sockaddr_un {
        let mut a: sockaddr_un = unsafe { zeroed() };
        a.sun_family = AF_UNIX as u16;
        for (d, s) in a.sun_path.iter_mut().zip(path.bytes()) {
            *d = s as c_char;
        }
        a
    }
    let addr = sun("s.sock");
    let ap = &addr as *const sockaddr_un;
    let mut buf = [0u8; 64];
    let mut src: sockaddr_un = unsafe { zeroed() };
    let mut len: u32 = 110;

    let fd = sc!(SYS_socket, 1, 2, 0);
    kv("socket_ok", (fd >= 3) as i64);
    kv("bind", sc!(SYS_bind, fd, ap, 9));
    kv("bind_again", sc!(SYS_bind, fd, ap, 9));
    kv("sendto", sc!(SYS_sendto, fd, b"ping".as_ptr(), 4, 0, ap, 9));
    let r = sc!(SYS_recvfrom, fd, buf.as_mut_ptr(), 64, 0, &mut src as *mut sockaddr_un, &mut len as *mut u32);
    kv("recvfrom", r);
    kvs("recv_data", &buf[..r as usize]);
    kv("src_len", len as i64);
    kv("src_family", src.sun_family as i64);
    let path: Vec<u8> = src.sun_path.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    kvs("src_path", &path);
    kv("recv_empty", sc!(SYS_recvfrom, fd, buf.as_mut_ptr(), 64, 0x40, 0, 0));

    let fd2 = sc!(SYS_socket, 1, 2, 0);
    kv("sendto_anon", sc!(SYS_sendto, fd2, b"hi".as_ptr(), 2, 0, ap, 9));
    len = 110;
    kv("recv_anon", sc!(SYS_recvfrom, fd, buf.as_mut_ptr(), 64, 0, &mut src as *mut sockaddr_un, &mut len as *mut u32));
    kv("anon_src_len", len as i64);
    kv("sendto_abc", sc!(SYS_sendto, fd2, b"abc".as_ptr(), 3, 0, ap, 9));
    kv("recv_trunc", sc!(SYS_recvfrom, fd, buf.as_mut_ptr(), 2, 0, 0, 0));
    let nope = sun("nope.sock");
    kv("connect_missing", sc!(SYS_connect, fd2, &nope as *const sockaddr_un, 12));
    kv("socket_badfamily", sc!(SYS_socket, 9999, 2, 0));
    kv("close", sc!(SYS_close, fd));
    kv("close2", sc!(SYS_close, fd2));
}

// Words shared with the cloned thread, as in the fixture's linear memory.
static WORD: AtomicU32 = AtomicU32::new(0);
static PTID: AtomicU32 = AtomicU32::new(0);
static CTID: AtomicU32 = AtomicU32::new(0);
static SEEN_TID: AtomicU32 = AtomicU32::new(0);
static SEEN_CTID: AtomicU32 = AtomicU32::new(0);
static SPARE: AtomicU32 = AtomicU32::new(0);

// Runs on a bare stack without its own TLS, so only raw syscalls.
extern "C" fn thread_main(_: *mut libc::c_void) -> i32 {
    unsafe {
        SEEN_TID.store(libc::syscall(libc::SYS_gettid) as u32, Ordering::SeqCst);
        SEEN_CTID.store(CTID.load(Ordering::SeqCst), Ordering::SeqCst);
        WORD.store(42, Ordering::SeqCst);
        libc::syscall(libc::SYS_futex, WORD.as_ptr(), 1, 1, 0, 0, 0);
        libc::syscall(libc::SYS_exit, 0);
    }
    0
}

fn futex_clone() {
    use libc::*;
    let futex = |w: &AtomicU32, op: i64, val: i64, ts: *const timespec| sc!(SYS_futex, w.as_ptr(), op, val, ts, 0, 0);
    let mut stack = vec![0u8; 1 << 16];
    let top = unsafe { stack.as_mut_ptr().add(stack.len()) } as usize & !15;
    let flags = 0x1350F00;
    let tid = unsafe {
        sys(clone(
            thread_main,
            top as *mut c_void,
            flags,
            null_mut(),
            PTID.as_ptr(),
            null_mut::<c_void>(),
            CTID.as_ptr(),
        ) as c_long)
    };
    kv("clone_ok", (tid > 0) as i64);
    while WORD.load(Ordering::SeqCst) == 0 {
        futex(&WORD, 0, 0, null());
    }
    kv("word", WORD.load(Ordering::SeqCst) as i64);
    loop {
        let v = CTID.load(Ordering::SeqCst);
        if v == 0 {
            break;
        }
        futex(&CTID, 0, v as i64, null());
    }
    kv("ctid_cleared", CTID.load(Ordering::SeqCst) as i64);
    kv("ptid_match", (PTID.load(Ordering::SeqCst) as i64 == tid) as i64);
    kv("child_tid_match", (SEEN_TID.load(Ordering::SeqCst) as i64 == tid) as i64);
    kv("child_settid_match", (SEEN_CTID.load(Ordering::SeqCst) as i64 == tid) as i64);
    kv("tid_not_pid", (tid != sc!(SYS_getpid)) as i64);
    kv("futex_eagain", futex(&WORD, 0, 7, null()));
    kv("futex_wake_none", futex(&WORD, 1, 1, null()));
    let ts = timespec { tv_sec: 0, tv_nsec: 2_000_000 };
    kv("futex_timeout", futex(&SPARE, 0, 0, &ts));
    kv("futex_private_wake", futex(&WORD, 129, 1, null()));
    kv("futex_badop", futex(&WORD, 99, 0, null()));
    drop(stack);
}

fn fork() {
    use libc::*;
    let mut cell: u32 = 1;
    let cellp = &mut cell as *mut u32;
    let pid = sc!(SYS_fork);
    if pid == 0 {
        unsafe { cellp.write_volatile(2) };
        if sc!(SYS_getppid) == 1 {
            quit(99);
        }
        quit(7);
    }
    kv("fork_ok", (pid > 0) as i64);
    let mut st: c_int = 0;
    let r = sc!(SYS_wait4, pid, &mut st as *mut c_int, 0, 0);
    kv("wait_match", (r == pid) as i64);
    kv("exited_normally", (st & 0x7f == 0) as i64);
    kv("exit_status", ((st >> 8) & 0xff) as i64);
    kv("parent_copy", unsafe { cellp.read_volatile() } as i64);
    kv("wait_none", sc!(SYS_wait4, -1i64, &mut st as *mut c_int, 0, 0));

    let pid = sc!(SYS_fork);
    if pid == 0 {
        sc!(SYS_kill, sc!(SYS_getpid), 15);
        quit(1);
    }
    sc!(SYS_wait4, pid, &mut st as *mut c_int, 0, 0);
    kv("term_signal", (st & 0x7f) as i64);
}

// sig_nest counters, named after the fixture's words.
static DEPTH: AtomicU32 = AtomicU32::new(0);
static ENTRIES: AtomicU32 = AtomicU32::new(0);
static REENTRIES: AtomicU32 = AtomicU32::new(0);
static INNER: AtomicU32 = AtomicU32::new(0);
static USR2: AtomicU32 = AtomicU32::new(0);
static USR2_INSIDE: AtomicU32 = AtomicU32::new(0);
static URG: AtomicU32 = AtomicU32::new(0);

fn raise_self(sig: i64) {
    sc!(libc::SYS_kill, sc!(libc::SYS_getpid), sig);
}

extern "C" fn nest_usr1(_: i32) {
    DEPTH.fetch_add(1, Ordering::SeqCst);
    let entries = ENTRIES.fetch_add(1, Ordering::SeqCst) + 1;
    if DEPTH.load(Ordering::SeqCst) > 1 {
        REENTRIES.fetch_add(1, Ordering::SeqCst);
    }
    if entries == 1 {
        raise_self(10);
        INNER.store(ENTRIES.load(Ordering::SeqCst), Ordering::SeqCst);
        raise_self(12);
        USR2_INSIDE.store(USR2.load(Ordering::SeqCst), Ordering::SeqCst);
    }
    DEPTH.fetch_sub(1, Ordering::SeqCst);
}

extern "C" fn nest_usr2(_: i32) {
    USR2.fetch_add(1, Ordering::SeqCst);
}

extern "C" fn nest_urg(_: i32) {
    URG.fetch_add(1, Ordering::SeqCst);
}

fn sig_nest() {
    let get = |a: &AtomicU32| a.load(Ordering::SeqCst) as i64;
    let reset = || {
        for a in [&DEPTH, &ENTRIES, &REENTRIES, &INNER, &USR2, &USR2_INSIDE] {
            a.store(0, Ordering::SeqCst);
        }
    };
    const NODEFER: i32 = 0x40000000;
    const RESETHAND: i32 = 0x80000000u32 as i32;
    install(12, nest_usr2 as *const () as usize, 0, &[]);

    kv("act_defer", install(10, nest_usr1 as *const () as usize, 0, &[]));
    raise_self(10);
    kv("defer_entries", get(&ENTRIES));
    kv("defer_reentries", get(&REENTRIES));
    kv("defer_inner", get(&INNER));
    kv("defer_usr2_inside", get(&USR2_INSIDE));
    kv("defer_usr2_total", get(&USR2));

    reset();
    kv("act_nodefer", install(10, nest_usr1 as *const () as usize, NODEFER, &[]));
    raise_self(10);
    kv("nodefer_entries", get(&ENTRIES));
    kv("nodefer_reentries", get(&REENTRIES));
    kv("nodefer_inner", get(&INNER));

    reset();
    kv("act_masked", install(10, nest_usr1 as *const () as usize, NODEFER, &[12]));
    raise_self(10);
    kv("masked_usr2_inside", get(&USR2_INSIDE));
    kv("masked_usr2_total", get(&USR2));

    kv("act_resethand", install(23, nest_urg as *const () as usize, RESETHAND, &[]));
    raise_self(23);
    raise_self(23);
    kv("resethand_count", get(&URG));
    let mut old: libc::sigaction = unsafe { zeroed() };
    unsafe { libc::sigaction(23, null(), &mut old) };
    kv("resethand_now_default", old.sa_sigaction as i64);
}

static LOG_LEN: AtomicU32 = AtomicU32::new(0);
static LOG: [AtomicU32; 64] = [const { AtomicU32::new(0) }; 64];
static PER_SIG: [AtomicU32; 65] = [const { AtomicU32::new(0) }; 65];

extern "C" fn queue_log(sig: i32) {
    PER_SIG[sig as usize].fetch_add(1, Ordering::SeqCst);
    let n = LOG_LEN.fetch_add(1, Ordering::SeqCst);
    LOG[n as usize].store(sig as u32, Ordering::SeqCst);
}

fn sig_queue() {
    for s in [12, 10, 34, 35] {
        install(s, queue_log as *const () as usize, 0, &[]);
    }
    let set: u64 = 0x600000a00;
    sc!(libc::SYS_rt_sigprocmask, 0, &set as *const u64, 0, 8);
    for (sig, n) in [(35, 2), (12, 3), (34, 3), (10, 1)] {
        for _ in 0..n {
            raise_self(sig);
        }
    }
    kv("while_blocked", LOG_LEN.load(Ordering::SeqCst) as i64);
    sc!(libc::SYS_rt_sigprocmask, 1, &set as *const u64, 0, 8);
    let n = LOG_LEN.load(Ordering::SeqCst);
    kv("delivered", n as i64);
    for (k, s) in [("count_usr1", 10), ("count_usr2", 12), ("count_rt2", 34), ("count_rt3", 35)] {
        kv(k, PER_SIG[s].load(Ordering::SeqCst) as i64);
    }
    for e in &LOG[..n as usize] {
        kv("nd_order", e.load(Ordering::SeqCst) as i64);
    }
}

fn spawn_exec(path: &str, argv: &[&str]) -> i64 {
    let path = cs(path);
    let args: Vec<CString> = argv.iter().map(|a| cs(a)).collect();
    let mut ptrs: Vec<*const libc::c_char> = args.iter().map(|a| a.as_ptr()).collect();
    ptrs.push(null());
    let env = [null::<libc::c_char>()];
    let pid = sc!(libc::SYS_fork);
    if pid == 0 {
        sc!(libc::SYS_execve, path.as_ptr(), ptrs.as_ptr(), env.as_ptr());
        quit(127);
    }
    pid
}

fn status(pid: i64) -> i64 {
    let mut st: i32 = 0;
    sc!(libc::SYS_wait4, pid, &mut st as *mut i32, 0, 0);
    ((st >> 8) & 0xff) as i64
}

fn exec_parent() {
    kv("child_status", status(spawn_exec("/bin/sh", &["sh", "-c", "exit 3"])));
    kv("native_status", status(spawn_exec("/bin/sh", &["sh", "-c", "exit 5"])));
    let missing = cs("/nonexistent/prog");
    let argv = [null::<libc::c_char>()];
    kv("execve_missing", sc!(libc::SYS_execve, missing.as_ptr(), argv.as_ptr(), argv.as_ptr()));
}

fn getpid_loop() {
    let n: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100_000);
    let t = std::time::Instant::now();
    let mut acc: i64 = 0;
    for _ in 0..n {
        acc = acc.wrapping_add(sc!(libc::SYS_getpid));
    }
    let elapsed = t.elapsed().as_nanos() as i64;
    kv("calls", n as i64);
    kv("pid_sum_ok", (acc == n as i64 * sc!(libc::SYS_getpid)) as i64);
    kv("nd_elapsed_ns", elapsed);
}
