use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::structure::Complex;

/// `(chain, residue number)` → RMSF in Å.
pub type RmsfTable = BTreeMap<(char, i32), f64>;

/// Reads `chain<TAB>resseq<TAB>rmsf` rows. A header row starting with
/// `chain`, blank lines and `#` comments are skipped.
pub fn load_rmsf(text: &str) -> Result<RmsfTable> {
    let mut table = RmsfTable::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || (i == 0 && t.starts_with("chain")) {
            continue;
        }
        let err = |reason: String| Error::Parse { line: line_no, reason };
        let fields: Vec<&str> = t.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let mut chain = fields[0].chars();
        let (Some(c), None) = (chain.next(), chain.next()) else {
            return Err(err(format!("bad chain id {:?}", fields[0])));
        };
        let seq: i32 = fields[1].parse().map_err(|_| err(format!("bad residue number {:?}", fields[1])))?;
        let v: f64 = fields[2].parse().map_err(|_| err(format!("bad RMSF value {:?}", fields[2])))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(err(format!("RMSF must be a non-negative number, got {v}")));
        }
        if table.insert((c, seq), v).is_some() {
            return Err(err(format!("duplicate entry for {c}{seq}")));
        }
    }
    Ok(table)
}

pub fn write_rmsf(table: &RmsfTable) -> String {
    let mut out = String::from("chain\tresseq\trmsf\n");
    for ((c, s), v) in table {
        let _ = writeln!(out, "{c}\t{s}\t{v}");
    }
    out
}

/// Per-residue values in complex order; every residue must be covered.
pub fn rmsf_for_complex(table: &RmsfTable, c: &Complex) -> Result<Vec<f64>> {
    c.residues()
        .iter()
        .map(|r| table.get(&(r.chain_id, r.seq_number)).copied().ok_or_else(|| Error::Dataset(format!("no RMSF value for residue {}", r.id()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines_and_round_trip() {
        let t = load_rmsf("A\t1\t0.5\nB\t7\t1.25\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[&('B', 7)], 1.25);
        assert_eq!(load_rmsf(&write_rmsf(&t)).unwrap(), t);
        let odd = RmsfTable::from([(('A', -3), 0.1 + 0.2), (('Z', 9999), 1e-17)]);
        assert_eq!(load_rmsf(&write_rmsf(&odd)).unwrap(), odd);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(matches!(load_rmsf("A\t1\t0.5\nA\t1\t0.7\n"), Err(Error::Parse { line: 2, .. })));
        assert!(load_rmsf("A\t1\t-0.5\n").is_err());
        assert!(load_rmsf("A\t1\n").is_err());
        assert!(load_rmsf("AB\t1\t0.1\n").is_err());
    }
}
