use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::{AtlasError, Result};

/// Per-application syscall invocation counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppProfile {
    pub app: String,
    /// Only syscalls with at least one call are present.
    pub counts: BTreeMap<String, u64>,
}

impl AppProfile {
    pub fn new(app: impl Into<String>) -> Self {
        AppProfile {
            app: app.into(),
            counts: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, name: impl Into<String>, calls: u64) {
        if calls > 0 {
            *self.counts.entry(name.into()).or_insert(0) += calls;
        }
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    fn max_count(&self) -> u64 {
        self.counts.values().copied().max().unwrap_or(0)
    }

    /// `ln(1 + n) / ln(1 + max)`, in `[0, 1]`.
    pub fn log_normalized(&self, name: &str) -> f64 {
        let max = self.max_count();
        match self.counts.get(name) {
            Some(&n) if max > 0 => (n as f64).ln_1p() / (max as f64).ln_1p(),
            _ => 0.0,
        }
    }
}

/// Parses the summary table printed by `strace -c` (optionally with `-f`).
///
/// Column positions come from the header row, so width drift between strace
/// versions and a blank `errors` column are both tolerated. Lines that are not
/// table rows (attach notices, program output) are ignored.
pub fn parse_strace_summary(app: &str, text: &str) -> Result<AppProfile> {
    let mut lines = text.lines();
    let calls_col = lines
        .by_ref()
        .find_map(header_calls_column)
        .ok_or_else(|| AtlasError::MissingHeader {
            app: app.to_string(),
        })?;

    let mut profile = AppProfile::new(app);
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let Some((&name, numbers)) = tokens.split_last() else {
            continue;
        };
        if name == "total" || numbers.len() <= calls_col {
            continue;
        }
        if !numbers.iter().all(|t| t.parse::<f64>().is_ok()) {
            continue;
        }
        if let Ok(calls) = numbers[calls_col].parse::<u64>() {
            profile.record(name, calls);
        }
    }
    Ok(profile)
}

fn header_calls_column(line: &str) -> Option<usize> {
    let line = line.trim_start();
    let line = line.strip_prefix("% time").unwrap_or(line);
    let mut cols = vec!["time"];
    cols.extend(line.split_whitespace());
    if !cols.contains(&"syscall") {
        return None;
    }
    cols.iter().position(|c| *c == "calls")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppRow {
    pub app: String,
    /// Log-normalized frequency per syscall, in `ProfileReport::order`.
    pub frequencies: Vec<f64>,
    /// Fraction of this app's distinct syscalls that the registry implements.
    pub coverage: f64,
    pub distinct: usize,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    /// Syscalls sorted by aggregate frequency, most frequent first.
    pub order: Vec<String>,
    /// Aggregate score per syscall: sum of per-app log-normalized frequencies.
    pub aggregate: Vec<f64>,
    pub apps: Vec<AppRow>,
}

impl ProfileReport {
    /// 1-based rank in the aggregate ordering.
    pub fn rank(&self, name: &str) -> Option<usize> {
        self.order.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn app(&self, app: &str) -> Option<&AppRow> {
        self.apps.iter().find(|r| r.app == app)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["app".to_string(), "coverage".into(), "distinct".into()];
        header.extend(self.order.iter().cloned());
        w.write_record(&header)?;

        let mut agg = vec!["aggregate".to_string(), String::new(), self.order.len().to_string()];
        agg.extend(self.aggregate.iter().map(|v| format!("{v:.6}")));
        w.write_record(&agg)?;

        for row in &self.apps {
            let mut rec = vec![
                row.app.clone(),
                format!("{:.6}", row.coverage),
                row.distinct.to_string(),
            ];
            rec.extend(row.frequencies.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds the frequency/coverage report. `implemented` says whether the
/// registry can execute a syscall by name.
pub fn profile_report<F>(profiles: &[AppProfile], implemented: F) -> ProfileReport
where
    F: Fn(&str) -> bool,
{
    let names: BTreeSet<&str> = profiles
        .iter()
        .flat_map(|p| p.counts.keys().map(String::as_str))
        .collect();

    let mut scored: Vec<(&str, f64)> = names
        .iter()
        .map(|&n| (n, profiles.iter().map(|p| p.log_normalized(n)).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let order: Vec<String> = scored.iter().map(|(n, _)| n.to_string()).collect();
    let aggregate = scored.iter().map(|(_, s)| *s).collect();

    let apps = profiles
        .iter()
        .map(|p| {
            let missing: Vec<String> =
                p.counts.keys().filter(|n| !implemented(n.as_str())).cloned().collect();
            let coverage = if p.counts.is_empty() {
                1.0
            } else {
                (p.distinct() - missing.len()) as f64 / p.distinct() as f64
            };
            AppRow {
                app: p.app.clone(),
                frequencies: order.iter().map(|n| p.log_normalized(n)).collect(),
                coverage,
                distinct: p.distinct(),
                missing,
            }
        })
        .collect();

    ProfileReport {
        order,
        aggregate,
        apps,
    }
}
