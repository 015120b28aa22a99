use std::collections::BTreeSet;
use std::io::Write;

use crate::{ArchSyscallTable, Result};

/// Jaccard index `|A ∩ B| / |A ∪ B|`. Two empty sets are identical (1.0).
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Pairwise Jaccard similarity over syscall-name sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub arches: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.arches.iter().position(|x| x == a)?;
        let j = self.arches.iter().position(|x| x == b)?;
        Some(self.values[i][j])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["arch".to_string()];
        header.extend(self.arches.iter().cloned());
        w.write_record(&header)?;
        for (arch, row) in self.arches.iter().zip(&self.values) {
            let mut rec = vec![arch.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn similarity_matrix(tables: &[ArchSyscallTable]) -> SimilarityMatrix {
    let sets: Vec<BTreeSet<&str>> = tables.iter().map(ArchSyscallTable::names).collect();
    let n = sets.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        for j in (i + 1)..n {
            let v = jaccard(&sets[i], &sets[j]);
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    SimilarityMatrix {
        arches: tables.iter().map(|t| t.arch().to_string()).collect(),
        values,
    }
}
