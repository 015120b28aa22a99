use std::ffi::OsString;
use std::fs;
use std::os::unix::ffi::OsStringExt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wali::context::ExecConfig;
use wali::{Outcome, Policy, Registry, RunConfig, SetupError};
use wali_atlas::{pinned, AbiFilter, ArchSyscallTable};
use wali_instrument::SafepointScheme;

/// Exit code for setup failures (bad module, bad flags, link errors).
const SETUP_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "wali", version, about = "Run WebAssembly modules against a Linux syscall interface")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a module as a native process.
    Run(RunArgs),
    /// Insert signal safepoints into a module.
    Instrument {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "loop")]
        scheme: SafepointScheme,
    },
    /// Syscall-table and strace-profile analysis.
    #[command(subcommand)]
    Atlas(AtlasCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Module to run (binary or text format).
    module: PathBuf,
    /// Guest arguments after `--`.
    #[arg(last = true)]
    args: Vec<OsString>,
    /// Guest environment entry; the host environment is never inherited.
    #[arg(long = "env", value_name = "KEY=VALUE")]
    env: Vec<OsString>,
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Append one JSON line per syscall to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// `loop`, `function`, `all`, or `off` for no safepoints.
    #[arg(long, default_value = "loop", value_parser = parse_scheme)]
    safepoint_scheme: SchemeChoice,
    /// Cap linear memory at this many 64KiB pages.
    #[arg(long)]
    max_pages: Option<u64>,
    #[arg(long, hide = true)]
    argv0: Option<OsString>,
    #[arg(long, hide = true)]
    env_handoff: bool,
}

#[derive(Debug, Clone, Copy)]
struct SchemeChoice(Option<SafepointScheme>);

fn parse_scheme(s: &str) -> Result<SchemeChoice, String> {
    if s == "off" {
        return Ok(SchemeChoice(None));
    }
    s.parse()
        .map(|s| SchemeChoice(Some(s)))
        .map_err(|e: wali_instrument::InstrumentError| e.to_string())
}

#[derive(Subcommand)]
enum AtlasCommand {
    /// Jaccard similarity of syscall-name sets.
    Similarity {
        /// `syscall.tbl` files, or names of the pinned tables.
        #[arg(required = true, num_args = 2..)]
        tables: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Frequency and coverage report over `strace -c` summaries.
    Profile {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long, default_value = "builtin")]
        registry: String,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => return run(args),
        Command::Instrument { input, output, scheme } => instrument(&input, &output, scheme),
        Command::Atlas(cmd) => atlas(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wali: {e:#}");
            ExitCode::from(SETUP_FAILURE)
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn load_module(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(wat::parse_bytes(&bytes)
        .with_context(|| format!("parsing {}", path.display()))?
        .into_owned())
}

fn prepare(args: &RunArgs) -> Result<RunConfig> {
    let mut module = load_module(&args.module)?;
    if let Some(scheme) = args.safepoint_scheme.0 {
        // Modules that already carry safepoints run as they are.
        if wali_instrument::marker(&module)?.is_none() {
            module = wali_instrument::instrument_module(&module, scheme)?;
        }
    }
    let argv0 = args
        .argv0
        .clone()
        .unwrap_or_else(|| args.module.clone().into_os_string());
    let argv = std::iter::once(argv0)
        .chain(args.args.iter().cloned())
        .map(OsString::into_vec)
        .collect();
    let env = args.env.iter().cloned().map(OsString::into_vec).collect();
    let policy = match &args.policy {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Policy::parse(&text, Registry::builtin())?
        }
        None => Policy::default(),
    };

    // Options an exec'd module inherits.
    let mut forward: Vec<OsString> = Vec::new();
    if let Some(p) = &args.policy {
        forward.extend(["--policy".into(), absolute(p).into_os_string()]);
    }
    if let Some(t) = &args.trace {
        forward.extend(["--trace".into(), absolute(t).into_os_string()]);
    }
    let scheme = args.safepoint_scheme.0.map_or("off".to_string(), |s| s.to_string());
    forward.extend(["--safepoint-scheme".into(), scheme.into()]);
    if let Some(n) = args.max_pages {
        forward.extend(["--max-pages".into(), n.to_string().into()]);
    }

    let mut cfg = RunConfig::new(module, argv);
    cfg.env = env;
    cfg.policy = policy;
    cfg.trace = args.trace.clone();
    cfg.max_pages = args.max_pages;
    cfg.env_handoff = args.env_handoff;
    cfg.exec = ExecConfig { runner: None, forward };
    Ok(cfg)
}

fn run(args: RunArgs) -> ExitCode {
    let cfg = match prepare(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("wali: {e:#}");
            return ExitCode::from(SETUP_FAILURE);
        }
    };
    match wali::run(cfg) {
        Ok(Outcome::Exit(code)) => ExitCode::from(code as u8),
        Ok(Outcome::Trap(msg)) => {
            eprintln!("wali: trap: {msg}");
            ExitCode::from(134)
        }
        Err(e @ SetupError::Instantiate(_)) => {
            eprintln!("wali: instantiation failed: {e}");
            ExitCode::from(SETUP_FAILURE)
        }
        Err(e) => {
            eprintln!("wali: {e}");
            ExitCode::from(SETUP_FAILURE)
        }
    }
}

fn instrument(input: &Path, output: &Path, scheme: SafepointScheme) -> Result<()> {
    let module = load_module(input)?;
    let out = wali_instrument::instrument_module(&module, scheme)?;
    fs::write(output, &out).with_context(|| format!("writing {}", output.display()))?;
    let sites: u32 = wali_instrument::count_safepoints(&out)?.iter().sum();
    println!("{}: {sites} safepoints ({scheme})", output.display());
    Ok(())
}

fn load_table(spec: &str) -> Result<ArchSyscallTable> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Ok(t) = pinned::table(spec) {
            return Ok(t);
        }
        bail!("{spec}: no such file or pinned table (pinned: {})", pinned::ARCHES.join(", "));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
    let arch = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    Ok(wali_atlas::parse_syscall_tbl(&arch, &text, &AbiFilter::Any)?)
}

fn atlas(cmd: AtlasCommand) -> Result<()> {
    match cmd {
        AtlasCommand::Similarity { tables, csv } => {
            let tables = tables.iter().map(|t| load_table(t)).collect::<Result<Vec<_>>>()?;
            let m = wali_atlas::similarity_matrix(&tables);
            m.write_csv(std::io::stdout().lock())?;
            if let Some(p) = csv {
                m.write_csv(fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?)?;
            }
        }
        AtlasCommand::Profile { summaries, registry, csv } => {
            if registry != "builtin" {
                bail!("unknown registry `{registry}` (only `builtin` is available)");
            }
            let mut profiles = Vec::new();
            for p in &summaries {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let app = p.file_stem().map_or("app".into(), |s| s.to_string_lossy().into_owned());
                profiles.push(wali_atlas::parse_strace_summary(&app, &text)?);
            }
            let reg = Registry::builtin();
            let report = wali_atlas::profile_report(&profiles, |n| reg.is_implemented(n));
            for row in &report.apps {
                println!(
                    "{}: {} distinct syscalls, coverage {:.3}{}",
                    row.app,
                    row.distinct,
                    row.coverage,
                    if row.missing.is_empty() {
                        String::new()
                    } else {
                        format!(", missing {}", row.missing.join(" "))
                    }
                );
            }
            if let Some(p) = csv {
                report.write_csv(fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?)?;
            }
        }
    }
    Ok(())
}
