//! Fixture toolkit shared by the CLI tests and the acceptance suite.
//!
//! Fixtures are WAT files under `tests/fixtures` with a few extensions that
//! [`expand`] rewrites into plain WAT:
//!
//! * `;;@imports` becomes an import for every `$SYS_<name>` the file calls,
//!   typed from the registry, plus the prelude's own imports.
//! * `;;@prelude` becomes the prelude functions and the string pool.
//! * `(str "s")` / `(str64 "s")` become the address of a NUL-terminated copy.
//! * `(print "s")` writes `s` to stdout.
//! * `(kv "key" <i64>)` prints `key=<decimal>\n`; `(kvs "key" <ptr> <len>)`
//!   prints `key=<bytes>\n`.
//!
//! Keys starting with `nd_` carry nondeterministic values and are masked by
//! [`compare`].

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
pub const RUNNER: &str = env!("CARGO_BIN_EXE_wali");

/// First byte of the string pool; fixtures keep their own data above
/// `POOL_END`.
const POOL_START: u32 = 0x800;
const POOL_END: u32 = 0x4000;

const PRELUDE_IMPORTS: &str = r#"
  (import "wali" "write" (func $__write (param i64 i64 i64) (result i64)))
  (import "wali" "exit_group" (func $__exit_group (param i64) (result i64)))
  (import "wali" "get_argc" (func $__argc (result i32)))
  (import "wali" "get_argv_len" (func $__argv_len (result i32)))
  (import "wali" "copy_argv" (func $__copy_argv (param i32 i32) (result i32)))
"#;

// Scratch: digits at 0x40..0x60, "=\n" at 0x70, argv offsets at 0x400,
// argv bytes at 0x480..0x800.
const PRELUDE: &str = r#"
  (data (i32.const 0x70) "=\n")
  (func $print_buf (param $p i32) (param $n i32)
    (drop (call $__write (i64.const 1) (i64.extend_i32_u (local.get $p)) (i64.extend_i32_u (local.get $n)))))
  (func $print_i64 (param $v i64) (local $p i32) (local $neg i32) (local $u i64)
    (local.set $p (i32.const 0x60))
    (local.set $neg (i64.lt_s (local.get $v) (i64.const 0)))
    (local.set $u (if (result i64) (local.get $neg)
      (then (i64.sub (i64.const 0) (local.get $v))) (else (local.get $v))))
    (loop $d
      (local.set $p (i32.sub (local.get $p) (i32.const 1)))
      (i32.store8 (local.get $p)
        (i32.add (i32.const 48) (i32.wrap_i64 (i64.rem_u (local.get $u) (i64.const 10)))))
      (local.set $u (i64.div_u (local.get $u) (i64.const 10)))
      (br_if $d (i64.ne (local.get $u) (i64.const 0))))
    (if (local.get $neg) (then
      (local.set $p (i32.sub (local.get $p) (i32.const 1)))
      (i32.store8 (local.get $p) (i32.const 45))))
    (call $print_buf (local.get $p) (i32.sub (i32.const 0x60) (local.get $p))))
  (func $kv (param $k i32) (param $kl i32) (param $v i64)
    (call $print_buf (local.get $k) (local.get $kl))
    (call $print_buf (i32.const 0x70) (i32.const 1))
    (call $print_i64 (local.get $v))
    (call $print_buf (i32.const 0x71) (i32.const 1)))
  (func $kvs (param $k i32) (param $kl i32) (param $p i32) (param $n i32)
    (call $print_buf (local.get $k) (local.get $kl))
    (call $print_buf (i32.const 0x70) (i32.const 1))
    (call $print_buf (local.get $p) (local.get $n))
    (call $print_buf (i32.const 0x71) (i32.const 1)))
  (func $strlen (param $p i32) (result i32) (local $n i32)
    (block $done (loop $l
      (br_if $done (i32.eqz (i32.load8_u (i32.add (local.get $p) (local.get $n)))))
      (local.set $n (i32.add (local.get $n) (i32.const 1)))
      (br $l)))
    (local.get $n))
  (func $exit (param $code i32)
    (drop (call $__exit_group (i64.extend_i32_s (local.get $code))))
    unreachable)
  ;; Address of argv[i] (argv copied on first use).
  (func $arg (param $i i32) (result i32)
    (if (i32.eqz (i32.load (i32.const 0x400))) (then
      (if (i32.gt_u (call $__argv_len) (i32.const 0x380)) (then unreachable))
      (drop (call $__copy_argv (i32.const 0x400) (i32.const 0x480)))))
    (i32.load (i32.add (i32.const 0x400) (i32.mul (local.get $i) (i32.const 4)))))
"#;

/// Decoded byte length of a WAT string literal body.
fn literal_len(body: &str) -> u32 {
    let b = body.as_bytes();
    let (mut i, mut n) = (0, 0);
    while i < b.len() {
        if b[i] == b'\\' {
            i += match b.get(i + 1) {
                Some(c) if c.is_ascii_hexdigit() => 3,
                _ => 2,
            };
        } else {
            i += 1;
        }
        n += 1;
    }
    n
}

struct Pool {
    next: u32,
    strings: BTreeMap<String, u32>,
    data: String,
}

impl Pool {
    fn intern(&mut self, body: &str) -> u32 {
        if let Some(&a) = self.strings.get(body) {
            return a;
        }
        let addr = self.next;
        self.next += literal_len(body) + 1;
        assert!(self.next <= POOL_END, "fixture string pool overflow");
        self.strings.insert(body.to_string(), addr);
        self.data
            .push_str(&format!("  (data (i32.const {addr}) \"{body}\\00\")\n"));
        addr
    }
}

/// Reads a `"..."` literal starting at `s[0] == '"'`; returns body and rest.
fn take_literal(s: &str) -> (&str, &str) {
    let b = s.as_bytes();
    assert_eq!(b[0], b'"');
    let mut i = 1;
    while b[i] != b'"' {
        i += if b[i] == b'\\' { 2 } else { 1 };
    }
    (&s[1..i], &s[i + 1..])
}

fn syscall_arity(name: &str) -> usize {
    let spec = wali::Registry::builtin()
        .lookup(name)
        .unwrap_or_else(|| panic!("fixture calls unknown syscall {name}"));
    spec.args.len()
}

/// Expands the fixture dialect into plain WAT.
pub fn expand(src: &str) -> String {
    let mut pool = Pool {
        next: POOL_START,
        strings: BTreeMap::new(),
        data: String::new(),
    };
    let mut out = String::with_capacity(src.len() * 2);
    let mut rest = src;
    while let Some(i) = rest.find('(') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        let mut matched = false;
        for (head, kind) in [("(str64 \"", 0), ("(str \"", 1), ("(print \"", 2), ("(kvs \"", 3), ("(kv \"", 4)] {
            if let Some(after) = tail.strip_prefix(&head[..head.len() - 1]) {
                let (body, after) = take_literal(after);
                let addr = pool.intern(body);
                let len = literal_len(body);
                match kind {
                    0 | 1 => {
                        let after = after.trim_start().strip_prefix(')').expect("(str \"..\") takes one literal");
                        out.push_str(&format!("({} {addr})", if kind == 0 { "i64.const" } else { "i32.const" }));
                        rest = after;
                    }
                    2 => {
                        let after = after.trim_start().strip_prefix(')').expect("(print \"..\") takes one literal");
                        out.push_str(&format!("(call $print_buf (i32.const {addr}) (i32.const {len}))"));
                        rest = after;
                    }
                    3 => {
                        out.push_str(&format!("(call $kvs (i32.const {addr}) (i32.const {len})"));
                        rest = after;
                    }
                    _ => {
                        out.push_str(&format!("(call $kv (i32.const {addr}) (i32.const {len})"));
                        rest = after;
                    }
                }
                matched = true;
                break;
            }
        }
        if !matched {
            out.push('(');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);

    let mut syscalls = BTreeSet::new();
    let mut scan = src;
    while let Some(i) = scan.find("$SYS_") {
        let name: String = scan[i + 5..]
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
            .collect();
        syscalls.insert(name);
        scan = &scan[i + 5..];
    }
    let mut imports = String::from(PRELUDE_IMPORTS);
    for name in &syscalls {
        let params = " i64".repeat(syscall_arity(name));
        imports.push_str(&format!(
            "  (import \"wali\" \"{name}\" (func $SYS_{name} (param{params}) (result i64)))\n"
        ));
    }
    let prelude = format!("{PRELUDE}{}", pool.data);
    assert!(out.contains(";;@imports") && out.contains(";;@prelude"), "fixture lacks markers");
    out.replacen(";;@imports", &imports, 1)
        .replacen(";;@prelude", &prelude, 1)
}

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(FIXTURES).join(format!("{name}.wat"))
}

pub fn all_fixtures() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(FIXTURES)
        .expect("fixture directory")
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "wat").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names
}

/// Expanded module text of a fixture.
pub fn fixture_text(name: &str) -> String {
    let src = std::fs::read_to_string(fixture_path(name))
        .unwrap_or_else(|e| panic!("reading fixture {name}: {e}"));
    expand(&src)
}

/// Binary module of a fixture, uninstrumented.
pub fn fixture_wasm(name: &str) -> Vec<u8> {
    wat::parse_str(fixture_text(name)).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

/// Writes the expanded fixture into `dir` as `<name>.wat`.
pub fn materialize(name: &str, dir: &Path) -> PathBuf {
    let p = dir.join(format!("{name}.wat"));
    std::fs::write(&p, fixture_text(name)).unwrap();
    p
}

#[derive(Debug, Clone)]
pub struct Run {
    pub status: Option<i32>,
    pub signal: Option<i32>,
    pub pid: u32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn lines(&self) -> Vec<(String, String)> {
        parse_kv(&self.stdout)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.lines().into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }
}

fn finish(child: std::process::Child) -> Run {
    use std::os::unix::process::ExitStatusExt;
    let pid = child.id();
    let Output { status, stdout, stderr } = child.wait_with_output().expect("wait");
    Run {
        status: status.code(),
        signal: status.signal(),
        pid,
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

/// Options for one runner invocation.
#[derive(Debug, Clone, Default)]
pub struct RunOpts {
    pub scheme: Option<&'static str>,
    pub trace: Option<PathBuf>,
    pub env: Vec<String>,
    pub args: Vec<String>,
    pub extra: Vec<String>,
    pub cwd: Option<PathBuf>,
}

pub fn runner_command(module: &Path, o: &RunOpts) -> Command {
    let mut c = Command::new(RUNNER);
    c.arg("run");
    if let Some(s) = o.scheme {
        c.args(["--safepoint-scheme", s]);
    }
    if let Some(t) = &o.trace {
        c.arg("--trace").arg(t);
    }
    for e in &o.env {
        c.args(["--env", e]);
    }
    c.args(&o.extra);
    c.arg(module);
    if !o.args.is_empty() {
        c.arg("--").args(&o.args);
    }
    if let Some(d) = &o.cwd {
        c.current_dir(d);
    }
    c.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped());
    c
}

pub fn run_module(module: &Path, o: &RunOpts) -> Run {
    finish(runner_command(module, o).spawn().expect("spawn runner"))
}

/// Runs a fixture through the CLI runner.
pub fn run_fixture(name: &str, o: &RunOpts) -> Run {
    let dir = tempfile::tempdir().unwrap();
    run_module(&materialize(name, dir.path()), o)
}

/// Runs `f` as an oracle in a child copy of the current test binary.
pub fn run_oracle(case: &str, cwd: &Path, args: &[String]) -> Run {
    let child = Command::new(std::env::current_exe().unwrap())
        .env("WALI_ORACLE_CASE", case)
        .args(args)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn oracle");
    finish(child)
}

pub fn parse_kv(s: &str) -> Vec<(String, String)> {
    s.lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Line-by-line comparison with `nd_` keys masked. `pid` values must equal
/// the process id of their own run.
pub fn compare(wali: &Run, oracle: &Run) -> Result<(), String> {
    let (a, b) = (wali.lines(), oracle.lines());
    if a.len() != b.len() {
        return Err(format!(
            "{} lines vs {} oracle lines\n--- wali\n{}--- oracle\n{}",
            a.len(),
            b.len(),
            wali.stdout,
            oracle.stdout
        ));
    }
    for ((ka, va), (kb, vb)) in a.iter().zip(&b) {
        if ka != kb {
            return Err(format!("key {ka} vs oracle key {kb}"));
        }
        if ka.starts_with("nd_") {
            continue;
        }
        if ka == "pid" {
            if va != &wali.pid.to_string() || vb != &oracle.pid.to_string() {
                return Err(format!("pid {va} (runner {}) / {vb} (oracle {})", wali.pid, oracle.pid));
            }
            continue;
        }
        if va != vb {
            return Err(format!("{ka}: wali {va} vs oracle {vb}"));
        }
    }
    Ok(())
}

/// Syscall names in a trace file, in order.
pub fn trace_names(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    text.lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).expect("trace line is JSON");
            v["name"].as_str().expect("name").to_string()
        })
        .collect()
}
