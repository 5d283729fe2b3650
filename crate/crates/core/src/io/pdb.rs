use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::structure::{AminoAcid, BackboneAtom, Complex, Group, Residue, ResidueAtoms};

#[derive(Clone, Debug)]
pub struct ParsedPdb {
    pub complex: Complex,
    pub warnings: Vec<String>,
}

fn column(line: &str, range: std::ops::Range<usize>) -> &str {
    line.get(range.start..range.end.min(line.len())).unwrap_or("")
}

fn coordinate(line: &str, range: std::ops::Range<usize>, line_no: usize) -> Result<f64> {
    let text = column(line, range.clone()).trim();
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse { line: line_no, reason: format!("bad coordinate {text:?} in columns {}-{}", range.start + 1, range.end) })
}

struct Pending {
    chain: char,
    seq: i32,
    icode: Option<char>,
    resname: String,
    atoms: ResidueAtoms,
}

/// Backbone atoms of the first model's ATOM records for chains in `groups`.
///
/// Columns follow the fixed PDB layout: atom name 13–16, residue name 18–20,
/// chain 22, residue number 23–26, insertion code 27 and x, y, z in 31–54.
/// The first record of each atom name wins, which keeps the first listed
/// alternate location. Unknown residue names and residues missing N, CA, C
/// or O are dropped with a warning.
pub fn parse_pdb(text: &str, groups: &BTreeMap<char, Group>) -> Result<ParsedPdb> {
    let mut warnings = Vec::new();
    let mut pending: Vec<Pending> = Vec::new();
    let mut index: BTreeMap<(char, i32, Option<char>), usize> = BTreeMap::new();
    let mut skipped_chains = std::collections::BTreeSet::new();

    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        let chain = column(line, 21..22).chars().next().unwrap_or(' ');
        if !groups.contains_key(&chain) {
            skipped_chains.insert(chain);
            continue;
        }
        let seq_text = column(line, 22..26).trim();
        let seq: i32 = seq_text.parse().map_err(|_| Error::Parse { line: line_no, reason: format!("bad residue number {seq_text:?}") })?;
        let icode = column(line, 26..27).chars().next().filter(|c| *c != ' ');
        let resname = column(line, 17..20).trim().to_string();
        let key = (chain, seq, icode);
        let slot = *index.entry(key).or_insert_with(|| {
            pending.push(Pending { chain, seq, icode, resname: resname.clone(), atoms: [None; 5] });
            pending.len() - 1
        });
        let Some(atom) = BackboneAtom::from_name(column(line, 12..16).trim()) else {
            continue;
        };
        let xyz = Vec3::new(coordinate(line, 30..38, line_no)?, coordinate(line, 38..46, line_no)?, coordinate(line, 46..54, line_no)?);
        let entry = &mut pending[slot].atoms[atom.index()];
        if entry.is_none() {
            *entry = Some(xyz);
        }
    }
    for c in skipped_chains {
        warnings.push(format!("chain {c:?} is not in the partner grouping; skipped"));
    }

    // keep chains contiguous in order of first appearance
    let mut chain_order: Vec<char> = Vec::new();
    for p in &pending {
        if !chain_order.contains(&p.chain) {
            chain_order.push(p.chain);
        }
    }
    let mut residues = Vec::new();
    for chain in chain_order {
        for p in pending.iter().filter(|p| p.chain == chain) {
            let label = format!("{}{}{}{}", p.resname, p.chain, p.seq, p.icode.map(String::from).unwrap_or_default());
            let Some(aa) = AminoAcid::from_three_letter(&p.resname) else {
                warnings.push(format!("residue {label}: non-canonical type skipped"));
                continue;
            };
            let r = Residue { chain_id: p.chain, seq_number: p.seq, insertion_code: p.icode, aa, atoms: p.atoms };
            if !r.is_usable() {
                let missing: Vec<&str> = BackboneAtom::ALL[..4].iter().filter(|a| r.atom(**a).is_none()).map(|a| a.name()).collect();
                warnings.push(format!("residue {label}: missing {} ; dropped", missing.join(",")));
                continue;
            }
            residues.push(r);
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ParsedPdb { complex: Complex::new(residues, groups.clone())?, warnings })
}

/// ATOM records of every present backbone atom, one TER per chain.
pub fn serialize_pdb(c: &Complex) -> String {
    let mut out = String::new();
    let mut serial = 1;
    let mut last_chain = None;
    for r in c.residues() {
        if last_chain.is_some_and(|ch| ch != r.chain_id) {
            let _ = writeln!(out, "TER");
        }
        last_chain = Some(r.chain_id);
        for atom in BackboneAtom::ALL {
            let Some(p) = r.atom(atom) else { continue };
            let element = &atom.name()[..1];
            let _ = writeln!(
                out,
                "ATOM  {serial:>5} {:<4}{:1}{:>3} {}{:>4}{}   {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {:>2}",
                format!(" {}", atom.name()),
                ' ',
                r.aa.three_letter(),
                r.chain_id,
                r.seq_number,
                r.insertion_code.unwrap_or(' '),
                p.x,
                p.y,
                p.z,
                1.0,
                0.0,
                element
            );
            serial += 1;
        }
    }
    out.push_str("TER\nEND\n");
    out
}
