//! The wasmtime adapter: the only module that touches the engine.

use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::{mpsc, Arc, Once};

use wasmtime::{
    Caller, Config, Engine, Extern, ExternType, FuncType, Instance, Linker, Memory, MemoryType,
    Module, Ref, SharedMemory, Store, StoreLimits, StoreLimitsBuilder, Table, Val, ValType,
};

use crate::bridge::{Guest, GuestMemory, ThreadSpawn, ThreadState, MAX_PAGES_32, PAGE_SIZE};
use crate::context::{Ctx, ExecConfig, Process};
use crate::error::{Abort, SetupError};
use crate::policy::{Action, Policy};
use crate::process;
use crate::registry::{dispatch, Registry};
use crate::signals;
use crate::startup::{copy_packed, merge_env, packed_len, StartupArgs};
use crate::trace::Tracer;

pub const NAMESPACE: &str = "wali";
/// Export a module must provide to support `clone`.
pub const THREAD_START: &str = "wali_thread_start";
pub const TLS_GLOBAL: &str = "__tls_base";
const STACK_GLOBAL: &str = "__stack_pointer";
const TABLE_EXPORT: &str = "__indirect_function_table";
/// One shared page whose first word instrumented safepoints poll.
pub const PENDING_IMPORT: &str = "sigpending";

const STARTUP_IMPORTS: &[&str] = &[
    "get_argc",
    "get_argv_len",
    "copy_argv",
    "get_envc",
    "get_env_len",
    "copy_env",
    "set_mmap_base",
    "sigcheck",
    PENDING_IMPORT,
];

fn is_pending_import(module: &str, name: &str) -> bool {
    module == NAMESPACE && name == PENDING_IMPORT
}

/// Everything needed to run one module as a WALI process.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Binary or text module.
    pub module: Vec<u8>,
    pub argv: Vec<Vec<u8>>,
    pub env: Vec<Vec<u8>>,
    pub policy: Policy,
    pub trace: Option<PathBuf>,
    /// Extra cap on linear-memory pages.
    pub max_pages: Option<u64>,
    /// Consume the environment segment left by a parent's `execve`.
    pub env_handoff: bool,
    pub exec: ExecConfig,
}

impl RunConfig {
    pub fn new(module: Vec<u8>, argv: Vec<Vec<u8>>) -> Self {
        RunConfig {
            module,
            argv,
            env: Vec::new(),
            policy: Policy::default(),
            trace: None,
            max_pages: None,
            env_handoff: false,
            exec: ExecConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Exit(i32),
    Trap(String),
}

impl Outcome {
    /// Runner exit code: the guest's status, or 134 after a trap.
    pub fn code(&self) -> i32 {
        match self {
            Outcome::Exit(c) => *c,
            Outcome::Trap(_) => 134,
        }
    }
}

/// Process-wide setup, done once.
pub fn init() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        // The Rust runtime ignores SIGPIPE; guests expect the kernel default.
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    });
}

pub fn engine() -> Result<Engine, SetupError> {
    let mut c = Config::new();
    c.wasm_threads(true);
    c.shared_memory(true);
    c.wasm_multi_memory(true);
    // Mappings are placed at fixed host addresses inside linear memory, so
    // the base must never move.
    c.memory_reservation(1 << 32);
    c.memory_may_move(false);
    c.memory_init_cow(false);
    Engine::new(&c).map_err(|e| SetupError::Instantiate(format!("{e:#}")))
}

#[derive(Clone)]
enum LinearMemory {
    Own(Memory),
    Shared(SharedMemory),
}

struct Image {
    engine: Engine,
    module: Module,
    linker: Linker<WaliState>,
    max_pages: u64,
}

pub struct WaliState {
    proc: Arc<Process>,
    image: Option<Arc<Image>>,
    thread: ThreadState,
    memory: Option<LinearMemory>,
    table: Option<Table>,
    limits: StoreLimits,
    max_pages: u64,
}

impl WaliState {
    fn new(proc: Arc<Process>, max_pages: u64, memory: Option<LinearMemory>, thread: ThreadState) -> Self {
        WaliState {
            proc,
            image: None,
            thread,
            memory,
            table: None,
            limits: StoreLimitsBuilder::new()
                .memory_size((max_pages * PAGE_SIZE) as usize)
                .build(),
            max_pages,
        }
    }
}

fn to_abort(e: wasmtime::Error) -> Abort {
    match e.downcast_ref::<Abort>() {
        Some(a) => a.clone(),
        None => Abort::Trap(format!("{e:#}")),
    }
}

/// A guest seen through a host-call `Caller`.
struct CallerGuest<'a, 'b> {
    caller: &'a mut Caller<'b, WaliState>,
    mem: Option<LinearMemory>,
}

impl<'a, 'b> CallerGuest<'a, 'b> {
    fn new(caller: &'a mut Caller<'b, WaliState>) -> Self {
        let mem = match &caller.data().memory {
            Some(m) => Some(m.clone()),
            None => {
                let found = match caller.get_export("memory") {
                    Some(Extern::Memory(m)) => Some(LinearMemory::Own(m)),
                    Some(Extern::SharedMemory(s)) => Some(LinearMemory::Shared(s)),
                    _ => None,
                };
                caller.data_mut().memory = found.clone();
                found
            }
        };
        CallerGuest { caller, mem }
    }

    fn table(&mut self) -> Option<Table> {
        if let Some(t) = self.caller.data().table {
            return Some(t);
        }
        let t = match self.caller.get_export(TABLE_EXPORT) {
            Some(Extern::Table(t)) => Some(t),
            _ => {
                // Fall back to the first exported table.
                let image = self.caller.data().image.clone()?;
                let name = image
                    .module
                    .exports()
                    .find(|e| matches!(e.ty(), ExternType::Table(_)))
                    .map(|e| e.name().to_string())?;
                match self.caller.get_export(&name) {
                    Some(Extern::Table(t)) => Some(t),
                    _ => None,
                }
            }
        };
        self.caller.data_mut().table = t;
        t
    }

    fn handler(&mut self, slot: u32) -> Option<wasmtime::TypedFunc<i32, ()>> {
        let table = self.table()?;
        match table.get(&mut *self.caller, slot as u64)? {
            Ref::Func(Some(f)) => f.typed::<i32, ()>(&*self.caller).ok(),
            _ => None,
        }
    }
}

impl GuestMemory for CallerGuest<'_, '_> {
    fn base(&self) -> *mut u8 {
        match &self.mem {
            Some(LinearMemory::Own(m)) => m.data_ptr(&*self.caller),
            Some(LinearMemory::Shared(s)) => s.data().as_ptr() as *mut u8,
            None => std::ptr::null_mut(),
        }
    }

    fn size(&self) -> u64 {
        match &self.mem {
            Some(LinearMemory::Own(m)) => m.data_size(&*self.caller) as u64,
            Some(LinearMemory::Shared(s)) => s.data_size() as u64,
            None => 0,
        }
    }

    fn max_pages(&self) -> u64 {
        self.caller.data().max_pages
    }

    fn grow(&mut self, delta: u64) -> Option<u64> {
        if self.pages() + delta > self.max_pages() {
            return None;
        }
        match &self.mem {
            Some(LinearMemory::Own(m)) => m.grow(&mut *self.caller, delta).ok(),
            Some(LinearMemory::Shared(s)) => s.grow(delta).ok(),
            None => None,
        }
    }
}

impl Guest for CallerGuest<'_, '_> {
    fn handler_ok(&mut self, slot: u32) -> bool {
        self.handler(slot).is_some()
    }

    fn call_handler(&mut self, slot: u32, signum: i32) -> Result<(), Abort> {
        let f = self
            .handler(slot)
            .ok_or_else(|| Abort::trap(format!("signal handler slot {slot} is not a (i32) -> () function")))?;
        f.call(&mut *self.caller, signum).map_err(to_abort)
    }

    fn thread(&mut self) -> &mut ThreadState {
        &mut self.caller.data_mut().thread
    }

    fn spawn_thread(&mut self, req: ThreadSpawn) -> Result<i64, Abort> {
        let enosys = Ok(-(libc::ENOSYS as i64));
        let (Some(LinearMemory::Shared(shared)), Some(image)) =
            (self.mem.clone(), self.caller.data().image.clone())
        else {
            return enosys;
        };
        if !matches!(image.module.get_export(THREAD_START), Some(ExternType::Func(_))) {
            return enosys;
        }
        let proc = self.caller.data().proc.clone();
        let (tid_tx, tid_rx) = mpsc::channel::<i32>();
        let (go_tx, go_rx) = mpsc::channel::<()>();
        proc.threads.fetch_add(1, Ordering::AcqRel);
        let spawned = {
            let proc = proc.clone();
            std::thread::Builder::new()
                .name("wali-thread".into())
                .spawn(move || thread_main(image, proc, shared, req, tid_tx, go_rx))
        };
        if spawned.is_err() {
            proc.threads.fetch_sub(1, Ordering::AcqRel);
            return Ok(-(libc::EAGAIN as i64));
        }
        let tid = tid_rx
            .recv()
            .map_err(|_| Abort::trap("thread exited before reporting its tid"))?;
        // Both tid stores happen before the child runs any guest code.
        if req.flags & libc::CLONE_PARENT_SETTID as u64 != 0 {
            crate::memory::write_u32(self, req.parent_tid as i64, tid as u32)?;
        }
        if req.flags & libc::CLONE_CHILD_SETTID as u64 != 0 {
            crate::memory::write_u32(self, req.child_tid as i64, tid as u32)?;
        }
        let _ = go_tx.send(());
        Ok(tid as i64)
    }
}

fn thread_main(
    image: Arc<Image>,
    proc: Arc<Process>,
    shared: SharedMemory,
    req: ThreadSpawn,
    tid_tx: mpsc::Sender<i32>,
    go_rx: mpsc::Receiver<()>,
) {
    let tid = unsafe { libc::gettid() };
    let _ = tid_tx.send(tid);
    let _ = go_rx.recv();
    let clear = if req.flags & libc::CLONE_CHILD_CLEARTID as u64 != 0 {
        req.child_tid
    } else {
        0
    };
    let thread = ThreadState {
        tid,
        main: false,
        clear_child_tid: clear,
        ..Default::default()
    };
    let mut state = WaliState::new(
        proc.clone(),
        image.max_pages,
        Some(LinearMemory::Shared(shared.clone())),
        thread,
    );
    state.image = Some(image.clone());
    let mut store = Store::new(&image.engine, state);
    store.limiter(|s| &mut s.limits);

    let result = (|| -> Result<(), Abort> {
        let instance = image.linker.instantiate(&mut store, &image.module).map_err(to_abort)?;
        if req.flags & libc::CLONE_SETTLS as u64 != 0 {
            set_global(&mut store, &instance, TLS_GLOBAL, req.tls)?;
        }
        if req.stack != 0 {
            let _ = set_global(&mut store, &instance, STACK_GLOBAL, req.stack);
        }
        let start = instance
            .get_typed_func::<(i32, i32), ()>(&mut store, THREAD_START)
            .map_err(to_abort)?;
        start.call(&mut store, (tid, req.stack as i32)).map_err(to_abort)
    })();

    match result {
        Ok(()) | Err(Abort::ThreadExit) => {}
        Err(Abort::Exit(code)) => unsafe { libc::_exit(code) },
        Err(Abort::Trap(msg)) => {
            eprintln!("wali: trap in thread {tid}: {msg}");
            unsafe { libc::_exit(134) }
        }
    }
    let clear = store.data().thread.clear_child_tid;
    if clear != 0 && (clear as usize) + 4 <= shared.data_size() {
        let cell = &shared.data()[clear as usize];
        // SAFETY: in-bounds, 4-byte aligned by futex contract; shared
        // memory is only accessed atomically here.
        unsafe {
            let word = &*(cell.get() as *const std::sync::atomic::AtomicU32);
            word.store(0, Ordering::SeqCst);
            libc::syscall(
                libc::SYS_futex,
                cell.get() as *mut u32,
                libc::FUTEX_WAKE,
                i32::MAX,
                std::ptr::null::<libc::timespec>(),
                std::ptr::null::<u32>(),
                0u32,
            );
        }
    }
    drop(store);
    proc.threads.fetch_sub(1, Ordering::AcqRel);
}

fn set_global(store: &mut Store<WaliState>, instance: &Instance, name: &str, v: u32) -> Result<(), Abort> {
    let g = instance
        .get_global(&mut *store, name)
        .ok_or_else(|| Abort::trap(format!("module has no `{name}` global")))?;
    g.set(&mut *store, Val::I32(v as i32)).map_err(to_abort)
}

fn arg_i64(v: &Val) -> i64 {
    match v {
        Val::I64(x) => *x,
        Val::I32(x) => *x as i64,
        _ => 0,
    }
}

fn wali_import_error(name: &str, reason: &str) -> SetupError {
    SetupError::Instantiate(format!("import `{NAMESPACE}.{name}`: {reason}"))
}

/// Defines the syscall imports the module actually uses.
fn define_syscalls(linker: &mut Linker<WaliState>, module: &Module, registry: &'static Registry) -> Result<(), SetupError> {
    let mut defined = std::collections::HashSet::new();
    for import in module.imports() {
        if import.module() != NAMESPACE || STARTUP_IMPORTS.contains(&import.name()) {
            continue;
        }
        let name = import.name();
        let Some(idx) = registry.index_of(name) else {
            return Err(wali_import_error(name, "unknown WALI import"));
        };
        let ExternType::Func(found) = import.ty() else {
            return Err(wali_import_error(name, "not a function"));
        };
        let spec = registry.get(idx);
        let ty = if spec.handler.is_some() {
            let want = FuncType::new(module.engine(), vec![ValType::I64; spec.args.len()], [ValType::I64]);
            if !FuncType::eq(&found, &want) {
                return Err(wali_import_error(
                    name,
                    &format!("signature mismatch: expected {want}, found {found}"),
                ));
            }
            want
        } else {
            // Unsupported names bind with whatever shape the guest declares
            // and trap when called.
            if found.params().len() > 6 {
                return Err(wali_import_error(name, "more than 6 parameters"));
            }
            found
        };
        // A module may import the same name more than once.
        if !defined.insert(name) {
            continue;
        }
        let result_ty = ty.results().next();
        linker
            .func_new(NAMESPACE, name, ty, move |mut caller, params, results| {
                let mut args = [0i64; 6];
                for (slot, p) in args.iter_mut().zip(params) {
                    *slot = arg_i64(p);
                }
                let proc = caller.data().proc.clone();
                let mut guest = CallerGuest::new(&mut caller);
                let mut ctx = Ctx::new(&proc, &mut guest);
                let v = dispatch(&mut ctx, idx, &args[..params.len()])?;
                if let Some(r) = results.first_mut() {
                    *r = match result_ty {
                        Some(ValType::I32) => Val::I32(v as i32),
                        _ => Val::I64(v),
                    };
                }
                Ok(())
            })
            .map_err(|e| wali_import_error(name, &format!("{e:#}")))?;
    }
    Ok(())
}

fn define_startup(linker: &mut Linker<WaliState>) -> Result<(), SetupError> {
    let err = |e: wasmtime::Error| SetupError::Instantiate(format!("{e:#}"));
    fn argv<'a>(c: &'a Caller<'_, WaliState>) -> &'a [Vec<u8>] {
        &c.data().proc.startup.argv
    }
    fn env<'a>(c: &'a Caller<'_, WaliState>) -> &'a [Vec<u8>] {
        &c.data().proc.startup.env
    }
    linker
        .func_wrap(NAMESPACE, "get_argc", |c: Caller<'_, WaliState>| argv(&c).len() as i32)
        .map_err(err)?;
    linker
        .func_wrap(NAMESPACE, "get_argv_len", |c: Caller<'_, WaliState>| packed_len(argv(&c)) as i32)
        .map_err(err)?;
    linker
        .func_wrap(NAMESPACE, "get_envc", |c: Caller<'_, WaliState>| env(&c).len() as i32)
        .map_err(err)?;
    linker
        .func_wrap(NAMESPACE, "get_env_len", |c: Caller<'_, WaliState>| packed_len(env(&c)) as i32)
        .map_err(err)?;
    linker
        .func_wrap(
            NAMESPACE,
            "copy_argv",
            |mut c: Caller<'_, WaliState>, offsets: i32, buf: i32| -> wasmtime::Result<i32> {
                let proc = c.data().proc.clone();
                let g = CallerGuest::new(&mut c);
                Ok(copy_packed(&g, &proc.startup.argv, offsets as u32 as i64, buf as u32 as i64)?)
            },
        )
        .map_err(err)?;
    linker
        .func_wrap(
            NAMESPACE,
            "copy_env",
            |mut c: Caller<'_, WaliState>, offsets: i32, buf: i32| -> wasmtime::Result<i32> {
                let proc = c.data().proc.clone();
                let g = CallerGuest::new(&mut c);
                Ok(copy_packed(&g, &proc.startup.env, offsets as u32 as i64, buf as u32 as i64)?)
            },
        )
        .map_err(err)?;
    linker
        .func_wrap(NAMESPACE, "set_mmap_base", |c: Caller<'_, WaliState>, base: i32| -> i32 {
            match c.data().proc.pool.lock().set_base(base as u32 as u64) {
                Ok(()) => 0,
                Err(e) => e as i32,
            }
        })
        .map_err(err)?;
    linker
        .func_wrap(NAMESPACE, "sigcheck", |mut c: Caller<'_, WaliState>| -> wasmtime::Result<()> {
            if signals::pending_mask() == 0 {
                return Ok(());
            }
            let proc = c.data().proc.clone();
            let mut g = CallerGuest::new(&mut c);
            signals::sigcheck(&proc.sigtable, &mut g)?;
            Ok(())
        })
        .map_err(err)?;
    Ok(())
}

/// Declared memory limits of memory 0, wherever it comes from.
fn memory_type(module: &Module) -> Option<(MemoryType, bool)> {
    for i in module.imports() {
        if let ExternType::Memory(m) = i.ty() {
            if !is_pending_import(i.module(), i.name()) {
                return Some((m, true));
            }
        }
    }
    for e in module.exports() {
        if let ExternType::Memory(m) = e.ty() {
            return Some((m, false));
        }
    }
    None
}

/// Compiles a binary or text module.
pub fn compile(engine: &Engine, bytes: &[u8]) -> Result<Module, SetupError> {
    let binary = wat::parse_bytes(bytes).map_err(|e| SetupError::Instantiate(e.to_string()))?;
    Module::new(engine, &binary).map_err(|e| SetupError::Instantiate(format!("{e:#}")))
}

/// Runs a module to completion as the WALI process of this native process.
pub fn run(cfg: RunConfig) -> Result<Outcome, SetupError> {
    init();
    let registry = Registry::builtin();
    let engine = engine()?;
    let module = compile(&engine, &cfg.module)?;

    let mut env = cfg.env.clone();
    if cfg.env_handoff {
        if let Some(seg) = process::take_env_segment(unsafe { libc::getpid() })? {
            env = merge_env(&seg, &cfg.env);
        }
    }
    let startup = StartupArgs::new(cfg.argv.clone(), env)?;

    let (mem_ty, imported) = match memory_type(&module) {
        Some((t, i)) => (Some(t), i),
        None => (None, false),
    };
    let mut max_pages = mem_ty
        .as_ref()
        .and_then(|t| t.maximum())
        .unwrap_or(MAX_PAGES_32)
        .min(MAX_PAGES_32);
    if let Some(cap) = cfg.max_pages {
        max_pages = max_pages.min(cap);
    }
    let initial = mem_ty.as_ref().map_or(0, |t| t.minimum());
    if initial > max_pages {
        return Err(SetupError::Instantiate(format!(
            "initial memory of {initial} pages exceeds the cap of {max_pages}"
        )));
    }

    let traced_by_rule = cfg.policy.rules.values().any(|a| *a == Action::Trace)
        || cfg.policy.default_action == Action::Trace;
    let tracer = Tracer::new(cfg.trace.as_deref(), traced_by_rule)?;
    let proc = Arc::new(Process::new(
        registry,
        cfg.policy.clone(),
        tracer,
        startup,
        initial * PAGE_SIZE,
        cfg.exec.clone(),
    ));

    let mut linker: Linker<WaliState> = Linker::new(&engine);
    define_startup(&mut linker)?;
    define_syscalls(&mut linker, &module, registry)?;

    let thread = ThreadState {
        tid: unsafe { libc::gettid() },
        main: true,
        ..Default::default()
    };
    let mut store = Store::new(&engine, WaliState::new(proc.clone(), max_pages, None, thread));
    store.limiter(|s| &mut s.limits);

    if let (Some(t), true) = (&mem_ty, imported) {
        if t.is_shared() {
            let ty = MemoryType::shared(initial as u32, max_pages as u32);
            let s = SharedMemory::new(&engine, ty).map_err(|e| SetupError::Instantiate(format!("{e:#}")))?;
            let import = module
                .imports()
                .find(|i| matches!(i.ty(), ExternType::Memory(_)) && !is_pending_import(i.module(), i.name()))
                .expect("memory import");
            linker
                .define(&store, import.module(), import.name(), s.clone())
                .map_err(|e| SetupError::Instantiate(format!("{e:#}")))?;
            store.data_mut().memory = Some(LinearMemory::Shared(s));
        }
    }

    if let Some(import) = module.imports().find(|i| is_pending_import(i.module(), i.name())) {
        let ExternType::Memory(t) = import.ty() else {
            return Err(wali_import_error(PENDING_IMPORT, "not a memory"));
        };
        if !t.is_shared() || t.is_64() || t.minimum() > 1 || t.maximum().is_some_and(|m| m < 1) {
            return Err(wali_import_error(PENDING_IMPORT, "must be `(memory 1 1 shared)`"));
        }
        let page = SharedMemory::new(&engine, MemoryType::shared(1, 1))
            .map_err(|e| SetupError::Instantiate(format!("{e:#}")))?;
        linker
            .define(&store, NAMESPACE, PENDING_IMPORT, page.clone())
            .map_err(|e| SetupError::Instantiate(format!("{e:#}")))?;
        let word = page.data().as_ptr() as *mut std::sync::atomic::AtomicU32;
        // The word is written from signal context for the life of the
        // process, so the page is never freed.
        std::mem::forget(page);
        // SAFETY: page-aligned and leaked above.
        unsafe { signals::publish_pending_word(word) };
    }

    let image = Arc::new(Image {
        engine: engine.clone(),
        module: module.clone(),
        linker,
        max_pages,
    });
    store.data_mut().image = Some(image.clone());

    let outcome = match image.linker.instantiate(&mut store, &module) {
        Ok(instance) => {
            let start = instance
                .get_typed_func::<(), ()>(&mut store, "_start")
                .map_err(|e| SetupError::Instantiate(format!("module has no `_start() -> ()` export: {e:#}")))?;
            match start.call(&mut store, ()) {
                Ok(()) => Outcome::Exit(0),
                Err(e) => abort_outcome(to_abort(e)),
            }
        }
        Err(e) => {
            // The start function trapped or exited; anything else is a link error.
            if e.downcast_ref::<Abort>().is_some() || e.downcast_ref::<wasmtime::Trap>().is_some() {
                abort_outcome(to_abort(e))
            } else {
                return Err(SetupError::Instantiate(format!("{e:#}")));
            }
        }
    };
    if proc.is_forked() {
        // A forked child never returns into the embedding program.
        if let Outcome::Trap(msg) = &outcome {
            eprintln!("wali: trap: {msg}");
        }
        unsafe { libc::_exit(outcome.code()) };
    }
    Ok(outcome)
}

fn abort_outcome(a: Abort) -> Outcome {
    match a {
        Abort::Exit(c) => Outcome::Exit(c),
        Abort::ThreadExit => Outcome::Exit(0),
        Abort::Trap(m) => Outcome::Trap(m),
    }
}
