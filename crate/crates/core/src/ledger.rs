//! Per-round records and their CSV form.
//!
//! ```text
//! # config_hash=<hash>
//! round,accuracy,up_bytes,down_bytes,cum_bytes,wall_ms
//! 1,0.532100,6272000,1051360,7323360,5123
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_COLUMNS: &str = "round,accuracy,up_bytes,down_bytes,cum_bytes,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    /// 1-based.
    pub round: usize,
    /// Test accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub cum_bytes: u64,
    pub wall_ms: u64,
}

impl RoundLedger {
    /// Equality on every field except wall-clock time.
    pub fn same_outcome(&self, other: &RoundLedger) -> bool {
        RoundLedger {
            wall_ms: 0,
            ..self.clone()
        } == RoundLedger {
            wall_ms: 0,
            ..other.clone()
        }
    }
}

pub fn write_csv(mut w: impl Write, config_hash: &str, rows: &[RoundLedger]) -> Result<()> {
    writeln!(w, "# config_hash={config_hash}")?;
    writeln!(w, "{CSV_COLUMNS}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{},{},{},{}",
            r.round, r.accuracy, r.up_bytes, r.down_bytes, r.cum_bytes, r.wall_ms
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a ledger CSV, returning the config hash and the rows.
pub fn read_csv(r: impl BufRead) -> Result<(String, Vec<RoundLedger>)> {
    let mut lines = r.lines();
    let hash = lines
        .next()
        .transpose()?
        .and_then(|l| l.strip_prefix("# config_hash=").map(str::to_owned))
        .ok_or_else(|| Error::format("ledger: missing config hash line"))?;
    match lines.next().transpose()? {
        Some(h) if h == CSV_COLUMNS => {}
        _ => return Err(Error::format("ledger: bad column header")),
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::format(format!("ledger: bad row {line:?}")));
        }
        let bad = || Error::format(format!("ledger: bad row {line:?}"));
        rows.push(RoundLedger {
            round: f[0].parse().map_err(|_| bad())?,
            accuracy: f[1].parse().map_err(|_| bad())?,
            up_bytes: f[2].parse().map_err(|_| bad())?,
            down_bytes: f[3].parse().map_err(|_| bad())?,
            cum_bytes: f[4].parse().map_err(|_| bad())?,
            wall_ms: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok((hash, rows))
}
