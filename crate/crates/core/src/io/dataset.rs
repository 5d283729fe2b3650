use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::structure::{AminoAcid, Group, Mutation};

pub const DATASET_HEADER: &str = "pdb\tligand_chains\treceptor_chains\tmutations\tddg";

/// One labelled mutation set on a structure.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    /// Structure identifier or file name, resolved against a structure directory.
    pub pdb: String,
    pub ligand_chains: Vec<char>,
    pub receptor_chains: Vec<char>,
    pub mutations: Vec<Mutation>,
    /// kcal/mol, positive when binding is weakened.
    pub ddg: f64,
}

impl DatasetEntry {
    pub fn groups(&self) -> BTreeMap<char, Group> {
        let lig = self.ligand_chains.iter().map(|&c| (c, Group::Ligand));
        lig.chain(self.receptor_chains.iter().map(|&c| (c, Group::Receptor))).collect()
    }

    pub fn mutation_string(&self) -> String {
        self.mutations.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn bad_token(token: &str, reason: impl Into<String>) -> Error {
    Error::Mutation { token: token.to_string(), reason: reason.into() }
}

fn parse_token(token: &str) -> Result<Mutation> {
    let chars: Vec<char> = token.chars().collect();
    if chars.len() < 4 {
        return Err(bad_token(token, "expected <wt><chain><position>[icode]<mt>"));
    }
    let wt = AminoAcid::from_one_letter(chars[0]).ok_or_else(|| bad_token(token, format!("unknown amino acid {:?}", chars[0])))?;
    let chain = chars[1];
    if !chain.is_ascii_alphanumeric() {
        return Err(bad_token(token, format!("bad chain id {chain:?}")));
    }
    let mt_char = chars[chars.len() - 1];
    let mt = AminoAcid::from_one_letter(mt_char).ok_or_else(|| bad_token(token, format!("unknown amino acid {mt_char:?}")))?;
    let mut middle: &[char] = &chars[2..chars.len() - 1];
    let mut icode = None;
    if let Some(&last) = middle.last() {
        if last.is_ascii_alphabetic() {
            icode = Some(last);
            middle = &middle[..middle.len() - 1];
        }
    }
    let digits: String = middle.iter().collect();
    let seq: i32 = digits.parse().map_err(|_| bad_token(token, format!("bad position {digits:?}")))?;
    Mutation::new(wt, chain, seq, icode, mt)
}

/// Comma-separated substitutions such as `TI38A,RC106K`.
pub fn parse_mutation(s: &str) -> Result<Vec<Mutation>> {
    if s.trim().is_empty() {
        return Err(bad_token(s, "empty mutation string"));
    }
    let muts = s.split(',').map(|t| parse_token(t.trim())).collect::<Result<Vec<_>>>()?;
    let mut sites = BTreeSet::new();
    for m in &muts {
        if !sites.insert(m.site()) {
            return Err(bad_token(s, format!("site {} mutated twice", m.site())));
        }
    }
    Ok(muts)
}

fn parse_chains(field: &str) -> Vec<char> {
    field.chars().filter(|c| c.is_ascii_alphanumeric()).collect()
}

/// Reads the tab-separated dataset; blank lines and `#` comments are ignored.
pub fn parse_dataset(text: &str) -> Result<Vec<DatasetEntry>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, h)) if h.trim_end() == DATASET_HEADER => {}
        Some((i, _)) => return Err(Error::Parse { line: i + 1, reason: format!("expected header {DATASET_HEADER:?}") }),
        None => return Err(Error::Dataset("empty dataset".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let err = |reason: String| Error::Parse { line: i + 1, reason };
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let (lig, rec) = (parse_chains(fields[1]), parse_chains(fields[2]));
        if lig.is_empty() || rec.is_empty() {
            return Err(err("both chain groups must be non-empty".into()));
        }
        if lig.iter().any(|c| rec.contains(c)) {
            return Err(err("ligand and receptor chains overlap".into()));
        }
        let mutations = parse_mutation(fields[3]).map_err(|e| err(e.to_string()))?;
        let ddg: f64 = fields[4].trim().parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| err(format!("bad ddg {:?}", fields[4])))?;
        let pdb = fields[0].trim().to_string();
        if pdb.is_empty() {
            return Err(err("empty structure id".into()));
        }
        out.push(DatasetEntry { pdb, ligand_chains: lig, receptor_chains: rec, mutations, ddg });
    }
    Ok(out)
}

pub fn write_dataset(entries: &[DatasetEntry]) -> String {
    let mut out = format!("{DATASET_HEADER}\n");
    for e in entries {
        let chains = |v: &[char]| v.iter().collect::<String>();
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", e.pdb, chains(&e.ligand_chains), chains(&e.receptor_chains), e.mutation_string(), e.ddg);
    }
    out
}

/// Structure id → fold index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, structure: &str) -> Option<usize> {
        self.folds.get(structure).copied()
    }

    pub fn structures_in(&self, fold: usize) -> BTreeSet<&str> {
        self.folds.iter().filter(|(_, &f)| f == fold).map(|(s, _)| s.as_str()).collect()
    }
}

/// Shuffles the distinct structures with `seed` and deals them round-robin into folds.
pub fn split_folds(entries: &[DatasetEntry], n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    let mut structures: Vec<&str> = entries.iter().map(|e| e.pdb.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if n_folds == 0 || structures.len() < n_folds {
        return Err(Error::Dataset(format!("{} distinct structures cannot fill {n_folds} folds", structures.len())));
    }
    structures.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = structures.into_iter().enumerate().map(|(i, s)| (s.to_string(), i % n_folds)).collect();
    Ok(FoldAssignment { n_folds, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutation_strings() {
        let m = parse_mutation("TI38A").unwrap();
        assert_eq!(m, vec![Mutation::new(AminoAcid::Thr, 'I', 38, None, AminoAcid::Ala).unwrap()]);
        assert_eq!(parse_mutation("TI38A,RC106K").unwrap().len(), 2);
        assert_eq!(parse_mutation("LI38aG").unwrap()[0].icode, Some('a'));
        assert_eq!(parse_mutation("LI-2G").unwrap()[0].seq, -2);
        for bad in ["TI38T", "XI38A", "TI3#A", "TI", "", "TI38A,TI38G"] {
            let e = parse_mutation(bad).unwrap_err();
            assert!(matches!(e, Error::Mutation { .. }), "{bad}");
        }
        let e = parse_mutation("TI38A,ZZ1A").unwrap_err();
        assert!(e.to_string().contains("ZZ1A"));
        assert_eq!(m[0].to_string(), "TI38A");
    }

    #[test]
    fn dataset_round_trip() {
        let text = format!("{DATASET_HEADER}\n1abc\tA\tBC\tTA38A,RB10K\t1.25\n# comment\n2xyz\tH,L\tE\tGE5W\t-0.5\n");
        let d = parse_dataset(&text).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].receptor_chains, vec!['B', 'C']);
        assert_eq!(d[1].ligand_chains, vec!['H', 'L']);
        assert_eq!(parse_dataset(&write_dataset(&d)).unwrap(), d);
        assert!(matches!(parse_dataset("pdb\tx\n"), Err(Error::Parse { line: 1, .. })));
        let overlap = format!("{DATASET_HEADER}\n1abc\tA\tA\tTA38A\t1.0\n");
        assert!(matches!(parse_dataset(&overlap), Err(Error::Parse { line: 2, .. })));
        let nan = format!("{DATASET_HEADER}\n1abc\tA\tB\tTA38A\tnan\n");
        assert!(parse_dataset(&nan).is_err());
    }

    fn entries(structures: &[&str], per: usize) -> Vec<DatasetEntry> {
        let m = parse_mutation("TA1G").unwrap();
        structures
            .iter()
            .flat_map(|s| {
                (0..per).map(|k| DatasetEntry {
                    pdb: s.to_string(),
                    ligand_chains: vec!['A'],
                    receptor_chains: vec!['B'],
                    mutations: m.clone(),
                    ddg: k as f64,
                })
            })
            .collect()
    }

    #[test]
    fn folds() {
        let e = entries(&["a", "b", "c", "d", "e", "f"], 3);
        let f = split_folds(&e, 3, 7).unwrap();
        for k in 0..3 {
            assert_eq!(f.structures_in(k).len(), 2);
        }
        assert_eq!(f, split_folds(&e, 3, 7).unwrap());
        assert!(e.iter().all(|x| f.fold_of(&x.pdb).is_some()));
        assert!(split_folds(&entries(&["a", "b"], 2), 3, 0).is_err());
        let seeds_differ = (0..20).any(|s| split_folds(&e, 3, s).unwrap() != f);
        assert!(seeds_differ);
    }
}
