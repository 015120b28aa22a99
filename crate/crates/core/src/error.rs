use thiserror::Error;

/// Ways a host call can leave guest execution instead of returning a value.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum Abort {
    /// Unrecoverable fault; the runner reports the reason and exits 134.
    #[error("{0}")]
    Trap(String),
    /// `exit_group` (or `exit` of the last thread).
    #[error("guest exited with status {0}")]
    Exit(i32),
    /// `exit` of a non-main thread.
    #[error("thread exited")]
    ThreadExit,
}

impl Abort {
    pub fn trap(reason: impl Into<String>) -> Self {
        Abort::Trap(reason.into())
    }
}

/// Errors raised while setting up a runtime, before any guest code runs.
#[derive(Debug, Error)]
pub enum SetupError {
    #[error("policy line {line}: {reason}")]
    Policy { line: usize, reason: String },

    #[error("layout manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("syscall table: {0}")]
    Registry(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{0}")]
    Instantiate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Negative errno from the current `errno`.
pub(crate) fn last_errno() -> i64 {
    -(std::io::Error::last_os_error().raw_os_error().unwrap_or(libc::EIO) as i64)
}

/// Maps a `-1`-on-failure libc return into the kernel convention.
pub(crate) fn cvt(ret: i64) -> i64 {
    if ret == -1 {
        last_errno()
    } else {
        ret
    }
}
