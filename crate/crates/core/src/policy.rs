//! User-space syscall filtering.
//!
//! ```text
//! # comment
//! default deny
//! allow read
//! deny socket EACCES
//! trap ptrace
//! trace openat
//! ```
//!
//! Later lines override earlier ones for the same name.

use std::collections::BTreeMap;

use crate::error::SetupError;
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Allow,
    /// Fail with this (positive) errno without running the syscall.
    Deny(i32),
    Trap,
    /// Allow and emit a trace record.
    Trace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub default_action: Action,
    pub rules: BTreeMap<String, Action>,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            default_action: Action::Allow,
            rules: BTreeMap::new(),
        }
    }
}

const ERRNO_NAMES: &[(&str, i32)] = &[
    ("EPERM", libc::EPERM),
    ("ENOENT", libc::ENOENT),
    ("EIO", libc::EIO),
    ("EBADF", libc::EBADF),
    ("EAGAIN", libc::EAGAIN),
    ("ENOMEM", libc::ENOMEM),
    ("EACCES", libc::EACCES),
    ("EFAULT", libc::EFAULT),
    ("EBUSY", libc::EBUSY),
    ("EEXIST", libc::EEXIST),
    ("EINVAL", libc::EINVAL),
    ("ENOSPC", libc::ENOSPC),
    ("EROFS", libc::EROFS),
    ("ENOSYS", libc::ENOSYS),
    ("ENOTSUP", libc::ENOTSUP),
    ("EOPNOTSUPP", libc::EOPNOTSUPP),
    ("ECONNREFUSED", libc::ECONNREFUSED),
    ("ENETUNREACH", libc::ENETUNREACH),
];

pub fn parse_errno(s: &str) -> Option<i32> {
    if let Ok(n) = s.parse::<i32>() {
        return (1..=4095).contains(&n).then_some(n);
    }
    ERRNO_NAMES.iter().find(|(n, _)| *n == s).map(|(_, v)| *v)
}

impl Policy {
    pub fn parse(text: &str, registry: &Registry) -> Result<Policy, SetupError> {
        let mut policy = Policy::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |reason: String| SetupError::Policy {
                line: line_no,
                reason,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let known = |name: &str| {
                if registry.lookup(name).is_some() {
                    Ok(name.to_string())
                } else {
                    Err(err(format!("unknown syscall `{name}`")))
                }
            };
            match cols.as_slice() {
                ["default", "allow"] => policy.default_action = Action::Allow,
                ["default", "deny"] => policy.default_action = Action::Deny(libc::EPERM),
                ["default", "deny", e] => {
                    let e = parse_errno(e).ok_or_else(|| err(format!("bad errno `{e}`")))?;
                    policy.default_action = Action::Deny(e);
                }
                ["default", "trap"] => policy.default_action = Action::Trap,
                ["allow", names @ ..] if !names.is_empty() => {
                    for n in names {
                        policy.rules.insert(known(n)?, Action::Allow);
                    }
                }
                ["trap", names @ ..] if !names.is_empty() => {
                    for n in names {
                        policy.rules.insert(known(n)?, Action::Trap);
                    }
                }
                ["trace", names @ ..] if !names.is_empty() => {
                    for n in names {
                        policy.rules.insert(known(n)?, Action::Trace);
                    }
                }
                ["deny", name] => {
                    policy.rules.insert(known(name)?, Action::Deny(libc::EPERM));
                }
                ["deny", name, e] => {
                    let e = parse_errno(e).ok_or_else(|| err(format!("bad errno `{e}`")))?;
                    policy.rules.insert(known(name)?, Action::Deny(e));
                }
                _ => return Err(err(format!("cannot parse `{line}`"))),
            }
        }
        Ok(policy)
    }

    /// Pure function of the policy and the name.
    pub fn apply(&self, name: &str) -> Action {
        self.rules.get(name).copied().unwrap_or(self.default_action)
    }

    /// Per-registry-index action table used by dispatch.
    pub fn compile(&self, registry: &Registry) -> Vec<Action> {
        registry.specs().iter().map(|s| self.apply(&s.name)).collect()
    }
}
