//! JSON-lines syscall trace.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::policy::Action;

#[derive(Debug, Serialize)]
pub struct TraceRecord<'a> {
    pub timestamp_ns: u64,
    pub name: &'a str,
    pub args: &'a [i64],
    /// `None` when the call did not return (trap or exit).
    pub ret: Option<i64>,
    pub duration_ns: u64,
    pub tid: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Where trace records go. `--trace` captures every syscall; policy `trace`
/// rules add records for single names, to stderr when no file is given.
#[derive(Debug, Default)]
pub struct Tracer {
    file: Option<File>,
    /// Whether any policy rule asks for tracing.
    rule_driven: bool,
}

impl Tracer {
    pub fn new(path: Option<&Path>, rule_driven: bool) -> std::io::Result<Self> {
        let file = match path {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        Ok(Tracer { file, rule_driven })
    }

    pub fn disabled() -> Self {
        Tracer::default()
    }

    pub fn wants(&self, action: Action) -> bool {
        self.file.is_some() || (self.rule_driven && action == Action::Trace)
    }

    pub fn is_enabled(&self) -> bool {
        self.file.is_some() || self.rule_driven
    }

    pub fn record(&self, action: Action, rec: &TraceRecord<'_>) {
        let mut line = match serde_json::to_vec(rec) {
            Ok(l) => l,
            Err(_) => return,
        };
        line.push(b'\n');
        // One write per line keeps records whole across forked writers.
        match &self.file {
            Some(f) => {
                let _ = (&*f).write_all(&line);
            }
            None if action == Action::Trace => {
                let _ = std::io::stderr().write_all(&line);
            }
            None => {}
        }
    }

    /// Raw file descriptor of the trace file, which guests may not close.
    pub fn fd(&self) -> Option<i32> {
        use std::os::fd::AsRawFd;
        self.file.as_ref().map(|f| f.as_raw_fd())
    }
}
