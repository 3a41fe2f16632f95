//! Privacy tables as CSV.

use std::io::Write;

use dpfed_core::accountant::{build_privacy_table, MomentsAccountant, TableEntry, TableRow, TABLE_CHECKPOINTS};
use serde::Serialize;

use crate::error::{DpfedError, Result};

/// Population sizes, expected users per round and noise scales tabulated by default.
pub const DEFAULT_ROWS: [TableRow; 6] = [
    TableRow { users: 100_000, expected_users: 100, z: 1.0 },
    TableRow { users: 1_000_000, expected_users: 10, z: 1.0 },
    TableRow { users: 1_000_000, expected_users: 1_000, z: 1.0 },
    TableRow { users: 1_000_000, expected_users: 10_000, z: 1.0 },
    TableRow { users: 1_000_000, expected_users: 1_000, z: 3.0 },
    TableRow { users: 1_000_000_000, expected_users: 1_000, z: 1.0 },
];

pub fn default_checkpoints() -> Vec<u64> {
    TABLE_CHECKPOINTS.to_vec()
}

/// Parses `K,C,z`.
pub fn parse_row(s: &str) -> Result<TableRow> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || DpfedError::config(format!("row {s:?}: expected K,C,z (e.g. 1000000,1000,1)"));
    let [k, c, z] = parts.as_slice() else {
        return Err(bad());
    };
    let num = |t: &str| t.parse::<f64>().ok().filter(|v| v.is_finite() && *v > 0.0);
    let (k, c, z) = (num(k).ok_or_else(bad)?, num(c).ok_or_else(bad)?, num(z).ok_or_else(bad)?);
    if k.fract() != 0.0 || c.fract() != 0.0 {
        return Err(bad());
    }
    Ok(TableRow {
        users: k as u64,
        expected_users: c as u64,
        z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CsvEntry {
    pub users: u64,
    pub expected_users: u64,
    pub q: f64,
    pub z: f64,
    pub rounds: u64,
    pub delta: f64,
    pub epsilon: f64,
}

/// Epsilon for every row and checkpoint; `delta` overrides the default `K^-1.1`.
pub fn table(rows: &[TableRow], checkpoints: &[u64], delta: Option<f64>) -> Result<Vec<CsvEntry>> {
    let entries: Vec<TableEntry> = match delta {
        None => build_privacy_table(rows, checkpoints)?,
        Some(d) => {
            if !(d > 0.0 && d < 1.0) {
                return Err(DpfedError::config(format!("delta must lie in (0, 1), got {d}")));
            }
            let mut cps = checkpoints.to_vec();
            cps.sort_unstable();
            cps.dedup();
            let mut out = Vec::new();
            for row in rows {
                if row.expected_users == 0 || row.expected_users > row.users {
                    return Err(DpfedError::config("expected users per round must lie in 1..=K"));
                }
                let mut acc = MomentsAccountant::new(row.expected_users as f64 / row.users as f64)?;
                let mut done = 0;
                for &rounds in &cps {
                    acc.accum_priv_spending(row.z, rounds - done)?;
                    done = rounds;
                    out.push(TableEntry {
                        users: row.users,
                        expected_users: row.expected_users,
                        z: row.z,
                        rounds,
                        delta: d,
                        epsilon: acc.get_privacy_spent(d)?,
                    });
                }
            }
            out
        }
    };
    Ok(entries
        .into_iter()
        .map(|e| CsvEntry {
            users: e.users,
            expected_users: e.expected_users,
            q: e.expected_users as f64 / e.users as f64,
            z: e.z,
            rounds: e.rounds,
            delta: e.delta,
            epsilon: e.epsilon,
        })
        .collect())
}

pub fn write_csv<W: Write>(entries: &[CsvEntry], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_parsing() {
        assert_eq!(
            parse_row("763430, 5000, 1").unwrap(),
            TableRow {
                users: 763_430,
                expected_users: 5000,
                z: 1.0
            }
        );
        for bad in ["1,2", "1,2,x", "1.5,2,1", "10,2,-1"] {
            assert!(parse_row(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn explicit_delta_matches_default_when_equal() {
        let row = [DEFAULT_ROWS[0]];
        let a = table(&row, &[1, 100], None).unwrap();
        let b = table(&row, &[1, 100], Some(a[0].delta)).unwrap();
        assert_eq!(a, b);
    }
}
