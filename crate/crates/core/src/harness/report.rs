//! CSV and plain-text rendering of success tables.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::selection::PolicyTag;

use super::{SuccessRow, SuccessTable};

pub fn write_csv<W: Write>(table: &SuccessTable, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in table.rows() {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<SuccessTable> {
    let mut rd = csv::Reader::from_reader(r);
    let rows = rd.deserialize().collect::<std::result::Result<Vec<SuccessRow>, _>>()?;
    SuccessTable::from_rows(rows)
}

/// One line per (size, policy) with a column per (target, tolerance). A `*`
/// marks EE/RND cells at or above the baseline's rate for the same key.
pub fn render_text(table: &SuccessTable) -> String {
    let rows = table.rows();
    let mut lines: Vec<(usize, PolicyTag)> = rows.iter().map(|r| (r.size, r.policy)).collect();
    lines.sort();
    lines.dedup();
    let mut cols: Vec<(u64, u64)> = rows.iter().map(|r| (r.target_g.to_bits(), r.tol.to_bits())).collect();
    cols.sort();
    cols.dedup();

    let mut out = String::new();
    let _ = write!(out, "{:>6} {:<8}", "size", "policy");
    for &(tb, lb) in &cols {
        let head = format!("{:.1}g@{:.0}%", f64::from_bits(tb), 100.0 * f64::from_bits(lb));
        let _ = write!(out, " {head:>12}");
    }
    out.push('\n');
    for (size, policy) in lines {
        let _ = write!(out, "{size:>6} {:<8}", policy.as_str());
        for &(tb, lb) in &cols {
            let (target, tol) = (f64::from_bits(tb), f64::from_bits(lb));
            match table.get(size, policy, target, tol) {
                Some(r) => {
                    let base = table.get(size, PolicyTag::Baseline, target, tol).map(|b| b.rate);
                    let star = policy.uses_uncertainty() && base.is_some_and(|b| r.rate >= b);
                    let _ = write!(out, " {:>11.3}{}", r.rate, if star { "*" } else { " " });
                }
                None => {
                    let _ = write!(out, " {:>12}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Writes the CSV to `path` and returns the text rendering.
pub fn report(table: &SuccessTable, path: &Path) -> Result<String> {
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidPath(path.to_path_buf()));
    }
    let file = std::fs::File::create(path).map_err(|_| Error::InvalidPath(path.to_path_buf()))?;
    write_csv(table, std::io::BufWriter::new(file))?;
    Ok(render_text(table))
}
