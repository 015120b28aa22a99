//! Name-bound virtual syscall table and dispatch.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;
use std::time::Instant;

use wali_atlas::pinned;

use crate::context::Ctx;
use crate::error::{Abort, SetupError};
use crate::layout::LayoutManifest;
use crate::policy::Action;
use crate::signals;
use crate::syscalls;
use crate::trace::TraceRecord;

/// How a syscall is realized on the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Behavior {
    /// Forwarded after address translation only.
    Passthrough,
    /// Forwarded with structured arguments converted through the layout module.
    TranslatedRecord,
    /// Backed by WALI-side state (memory pool, sigtable, threads).
    Stateful,
    /// Accepted and ignored.
    EmulatedNop,
    /// Known Linux syscall that WALI cannot execute faithfully.
    Unsupported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    Scalar32,
    Scalar64,
    AddrIn,
    AddrOut,
    AddrInOut,
    CString,
    RecordIn(&'static str),
    RecordOut(&'static str),
    AddrArray,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArgDescriptor {
    pub kind: ArgKind,
    /// Index of the argument carrying this buffer's byte length.
    pub length_from: Option<u8>,
}

pub const fn arg(kind: ArgKind) -> ArgDescriptor {
    ArgDescriptor {
        kind,
        length_from: None,
    }
}

pub const fn buf(kind: ArgKind, length_from: u8) -> ArgDescriptor {
    ArgDescriptor {
        kind,
        length_from: Some(length_from),
    }
}

pub type Handler = fn(&mut Ctx<'_>, &[i64]) -> Result<i64, Abort>;

/// A syscall the host can execute.
#[derive(Clone, Copy)]
pub struct Implementation {
    pub name: &'static str,
    pub behavior: Behavior,
    pub args: &'static [ArgDescriptor],
    pub handler: Handler,
}

#[derive(Clone)]
pub struct VirtualSyscallSpec {
    pub name: String,
    pub canonical: u32,
    pub args: &'static [ArgDescriptor],
    pub behavior: Behavior,
    /// Architecture name to native number, for architectures that have it.
    pub native: BTreeMap<String, u32>,
    pub handler: Option<Handler>,
}

impl std::fmt::Debug for VirtualSyscallSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VirtualSyscallSpec")
            .field("name", &self.name)
            .field("canonical", &self.canonical)
            .field("args", &self.args)
            .field("behavior", &self.behavior)
            .field("native", &self.native)
            .finish()
    }
}

/// First canonical number handed to syscalls absent from x86-64.
pub const FRESH_NUMBER_BASE: u32 = 1024;

#[derive(Debug)]
pub struct Registry {
    specs: Vec<VirtualSyscallSpec>,
    by_name: HashMap<String, usize>,
}

impl Registry {
    /// Builds the registry over the union of the pinned architecture tables.
    pub fn load() -> Result<Registry, SetupError> {
        let mut tables = Vec::new();
        for arch in pinned::ARCHES {
            tables.push(pinned::table(arch).map_err(|e| SetupError::Registry(e.to_string()))?);
        }
        Registry::from_tables(&tables, syscalls::IMPLEMENTED)
    }

    pub fn from_tables(
        tables: &[wali_atlas::ArchSyscallTable],
        implemented: &[Implementation],
    ) -> Result<Registry, SetupError> {
        let anchor = tables
            .iter()
            .find(|t| t.arch() == "x86_64")
            .ok_or_else(|| SetupError::Registry("x86_64 table is required".into()))?;
        let names: BTreeSet<&str> = tables.iter().flat_map(|t| t.names()).collect();

        let mut impls: HashMap<&str, &Implementation> = HashMap::new();
        for i in implemented {
            if impls.insert(i.name, i).is_some() {
                return Err(SetupError::Registry(format!("{} implemented twice", i.name)));
            }
            if !names.contains(i.name) {
                return Err(SetupError::Registry(format!(
                    "{} is implemented but absent from every architecture",
                    i.name
                )));
            }
            if i.args.len() > 6 {
                return Err(SetupError::Registry(format!("{} takes more than 6 arguments", i.name)));
            }
        }

        let mut specs = Vec::with_capacity(names.len());
        let mut by_name = HashMap::new();
        let mut numbers = BTreeSet::new();
        let mut fresh = FRESH_NUMBER_BASE;
        for name in names {
            let canonical = match anchor.number_of(name) {
                Some(n) => n,
                None => {
                    fresh += 1;
                    fresh - 1
                }
            };
            if !numbers.insert(canonical) {
                return Err(SetupError::Registry(format!("duplicate canonical number {canonical}")));
            }
            let native = tables
                .iter()
                .filter_map(|t| t.number_of(name).map(|n| (t.arch().to_string(), n)))
                .collect();
            let (behavior, args, handler) = match impls.get(name) {
                Some(i) => (i.behavior, i.args, Some(i.handler)),
                None => (Behavior::Unsupported, &[][..], None),
            };
            by_name.insert(name.to_string(), specs.len());
            specs.push(VirtualSyscallSpec {
                name: name.to_string(),
                canonical,
                args,
                behavior,
                native,
                handler,
            });
        }
        Ok(Registry { specs, by_name })
    }

    pub fn builtin() -> &'static Registry {
        static R: OnceLock<Registry> = OnceLock::new();
        R.get_or_init(|| Registry::load().expect("built-in syscall registry"))
    }

    pub fn lookup(&self, name: &str) -> Option<&VirtualSyscallSpec> {
        self.index_of(name).map(|i| &self.specs[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, idx: usize) -> &VirtualSyscallSpec {
        &self.specs[idx]
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[VirtualSyscallSpec] {
        &self.specs
    }

    pub fn implemented(&self) -> impl Iterator<Item = &VirtualSyscallSpec> {
        self.specs.iter().filter(|s| s.handler.is_some())
    }

    pub fn is_implemented(&self, name: &str) -> bool {
        self.lookup(name).is_some_and(|s| s.handler.is_some())
    }

    /// Every record named by an argument exists in the layout manifest, and
    /// translated-record syscalls name at least one record.
    pub fn check_layouts(&self, manifest: &LayoutManifest) -> Result<(), String> {
        for s in &self.specs {
            let mut has_record = false;
            for a in s.args {
                if let ArgKind::RecordIn(r) | ArgKind::RecordOut(r) = a.kind {
                    has_record = true;
                    if manifest.record(r).is_none() {
                        return Err(format!("{} names unknown record {r}", s.name));
                    }
                }
                if let Some(l) = a.length_from {
                    if l as usize >= s.args.len() {
                        return Err(format!("{} length index out of range", s.name));
                    }
                }
            }
            if s.behavior == Behavior::TranslatedRecord && !has_record {
                return Err(format!("{} is translated-record without a record argument", s.name));
            }
        }
        Ok(())
    }
}

fn now_ns() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

/// Runs one guest syscall: policy, handler, trace, then a signal safepoint.
pub fn dispatch(ctx: &mut Ctx<'_>, idx: usize, args: &[i64]) -> Result<i64, Abort> {
    let proc = ctx.proc;
    let spec = proc.registry.get(idx);
    let action = proc.actions[idx];
    let traced = proc.tracer.wants(action);
    let started = traced.then(|| (now_ns(), Instant::now()));

    let result = match action {
        Action::Deny(errno) => Ok(-(errno as i64)),
        Action::Trap => Err(Abort::trap(format!("syscall {} is forbidden by policy", spec.name))),
        Action::Allow | Action::Trace => match spec.handler {
            Some(h) => h(ctx, args),
            None => Err(Abort::trap(format!("unimplemented syscall: {}", spec.name))),
        },
    };

    if let Some((ts, t0)) = started {
        let ret = match &result {
            Ok(v) => Some(*v),
            Err(_) => None,
        };
        proc.tracer.record(
            action,
            &TraceRecord {
                timestamp_ns: ts,
                name: &spec.name,
                args,
                ret,
                duration_ns: t0.elapsed().as_nanos() as u64,
                tid: ctx.guest.thread().tid,
                warning: ctx.take_warning(),
            },
        );
    }
    let ret = result?;
    debug_assert!(ret >= -4095, "{} returned {ret}", spec.name);
    signals::sigcheck(&proc.sigtable, ctx.guest)?;
    Ok(ret)
}
