use std::collections::{BTreeMap, BTreeSet};

use crate::{AtlasError, Result};

/// Which ABI column values to keep when reading a kernel `syscall.tbl`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum AbiFilter {
    #[default]
    Any,
    Only(Vec<String>),
}

impl AbiFilter {
    pub fn only<I, S>(abis: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        AbiFilter::Only(abis.into_iter().map(Into::into).collect())
    }

    fn accepts(&self, abi: &str) -> bool {
        match self {
            AbiFilter::Any => true,
            AbiFilter::Only(list) => list.iter().any(|a| a == abi),
        }
    }
}

/// The syscalls one architecture exposes, by number and name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSyscallTable {
    arch: String,
    by_number: BTreeMap<u32, String>,
    by_name: BTreeMap<String, u32>,
}

impl ArchSyscallTable {
    pub fn new(arch: impl Into<String>) -> Self {
        ArchSyscallTable {
            arch: arch.into(),
            by_number: BTreeMap::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Builds a table from `(number, name)` pairs; later duplicates of a name
    /// are rejected.
    pub fn from_entries<I, S>(arch: impl Into<String>, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, S)>,
        S: Into<String>,
    {
        let mut table = Self::new(arch);
        for (idx, (nr, name)) in entries.into_iter().enumerate() {
            table.insert(nr, name.into()).map_err(|reason| AtlasError::Parse {
                line: idx + 1,
                reason,
            })?;
        }
        Ok(table)
    }

    fn insert(&mut self, nr: u32, name: String) -> std::result::Result<(), String> {
        if let Some(prev) = self.by_name.get(&name) {
            return Err(format!("duplicate syscall name `{name}` (already number {prev})"));
        }
        if let Some(prev) = self.by_number.get(&nr) {
            return Err(format!("duplicate syscall number {nr} (already `{prev}`)"));
        }
        self.by_name.insert(name.clone(), nr);
        self.by_number.insert(nr, name);
        Ok(())
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.by_number.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_number.is_empty()
    }

    pub fn number_of(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn name_of(&self, nr: u32) -> Option<&str> {
        self.by_number.get(&nr).map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    /// Entries in ascending syscall-number order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, &str)> {
        self.by_number.iter().map(|(nr, name)| (*nr, name.as_str()))
    }

    pub fn names(&self) -> BTreeSet<&str> {
        self.by_name.keys().map(String::as_str).collect()
    }
}

/// Parses a kernel `syscall.tbl` (`<number> <abi> <name> [<entry> ...]`), or
/// the generic two-column `<number> <name>` form.
///
/// `#` starts a comment; blank lines are skipped. Rows whose ABI is rejected
/// by `abis` are dropped. Two-column rows carry no ABI and are always kept.
pub fn parse_syscall_tbl(arch: &str, text: &str, abis: &AbiFilter) -> Result<ArchSyscallTable> {
    let mut table = ArchSyscallTable::new(arch);
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |reason: String| AtlasError::Parse {
            line: line_no,
            reason,
        };
        let nr: u32 = cols[0]
            .parse()
            .map_err(|_| parse_err(format!("syscall number `{}` is not an integer", cols[0])))?;
        let name = match cols.len() {
            1 => return Err(parse_err("missing syscall name".into())),
            2 => cols[1],
            _ => {
                if !abis.accepts(cols[1]) {
                    continue;
                }
                cols[2]
            }
        };
        if !is_identifier(name) {
            return Err(parse_err(format!("`{name}` is not a valid syscall name")));
        }
        table.insert(nr, name.to_string()).map_err(parse_err)?;
    }
    Ok(table)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
