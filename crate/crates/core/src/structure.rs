//! Residue-level complex representation, graph connectivity and interface
//! detection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Mat3, RigidMotion, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AminoAcid {
    Ala,
    Arg,
    Asn,
    Asp,
    Cys,
    Gln,
    Glu,
    Gly,
    His,
    Ile,
    Leu,
    Lys,
    Met,
    Phe,
    Pro,
    Ser,
    Thr,
    Trp,
    Tyr,
    Val,
}

pub const NUM_AMINO_ACIDS: usize = 20;

impl AminoAcid {
    pub const ALL: [AminoAcid; NUM_AMINO_ACIDS] = [
        AminoAcid::Ala,
        AminoAcid::Arg,
        AminoAcid::Asn,
        AminoAcid::Asp,
        AminoAcid::Cys,
        AminoAcid::Gln,
        AminoAcid::Glu,
        AminoAcid::Gly,
        AminoAcid::His,
        AminoAcid::Ile,
        AminoAcid::Leu,
        AminoAcid::Lys,
        AminoAcid::Met,
        AminoAcid::Phe,
        AminoAcid::Pro,
        AminoAcid::Ser,
        AminoAcid::Thr,
        AminoAcid::Trp,
        AminoAcid::Tyr,
        AminoAcid::Val,
    ];

    const CODES: [(char, &'static str); NUM_AMINO_ACIDS] = [
        ('A', "ALA"),
        ('R', "ARG"),
        ('N', "ASN"),
        ('D', "ASP"),
        ('C', "CYS"),
        ('Q', "GLN"),
        ('E', "GLU"),
        ('G', "GLY"),
        ('H', "HIS"),
        ('I', "ILE"),
        ('L', "LEU"),
        ('K', "LYS"),
        ('M', "MET"),
        ('F', "PHE"),
        ('P', "PRO"),
        ('S', "SER"),
        ('T', "THR"),
        ('W', "TRP"),
        ('Y', "TYR"),
        ('V', "VAL"),
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<AminoAcid> {
        AminoAcid::ALL.get(i).copied()
    }

    pub fn one_letter(self) -> char {
        AminoAcid::CODES[self.index()].0
    }

    pub fn three_letter(self) -> &'static str {
        AminoAcid::CODES[self.index()].1
    }

    pub fn from_one_letter(c: char) -> Option<AminoAcid> {
        AminoAcid::CODES.iter().position(|(l, _)| *l == c.to_ascii_uppercase()).map(|i| AminoAcid::ALL[i])
    }

    pub fn from_three_letter(s: &str) -> Option<AminoAcid> {
        let s = s.trim().to_ascii_uppercase();
        AminoAcid::CODES.iter().position(|(_, t)| *t == s).map(|i| AminoAcid::ALL[i])
    }

    /// Kyte–Doolittle hydropathy index.
    pub fn hydropathy(self) -> f64 {
        use AminoAcid::*;
        match self {
            Ile => 4.5,
            Val => 4.2,
            Leu => 3.8,
            Phe => 2.8,
            Cys => 2.5,
            Met => 1.9,
            Ala => 1.8,
            Gly => -0.4,
            Thr => -0.7,
            Ser => -0.8,
            Trp => -0.9,
            Tyr => -1.3,
            Pro => -1.6,
            His => -3.2,
            Glu | Gln | Asp | Asn => -3.5,
            Lys => -3.9,
            Arg => -4.5,
        }
    }
}

impl fmt::Display for AminoAcid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.one_letter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneAtom {
    N,
    CA,
    C,
    O,
    CB,
}

pub const NUM_BACKBONE_ATOMS: usize = 5;

impl BackboneAtom {
    pub const ALL: [BackboneAtom; NUM_BACKBONE_ATOMS] =
        [BackboneAtom::N, BackboneAtom::CA, BackboneAtom::C, BackboneAtom::O, BackboneAtom::CB];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BackboneAtom::N => "N",
            BackboneAtom::CA => "CA",
            BackboneAtom::C => "C",
            BackboneAtom::O => "O",
            BackboneAtom::CB => "CB",
        }
    }

    pub fn from_name(s: &str) -> Option<BackboneAtom> {
        BackboneAtom::ALL.iter().copied().find(|a| a.name() == s.trim())
    }
}

pub type ResidueAtoms = [Option<Vec3>; NUM_BACKBONE_ATOMS];

/// Orthonormal frame with columns along CA→C, the N direction orthogonalized
/// against it, and their cross product. `None` when N, CA or C is missing or
/// the three atoms are collinear.
pub fn backbone_frame(row: &ResidueAtoms) -> Option<Mat3> {
    let (n, ca, c) = (row[BackboneAtom::N.index()]?, row[BackboneAtom::CA.index()]?, row[BackboneAtom::C.index()]?);
    let e1 = (c - ca).try_normalize(1e-9)?;
    let u = n - ca;
    let e2 = (u - e1 * e1.dot(&u)).try_normalize(1e-9)?;
    Some(Mat3::from_columns(&[e1, e2, e1.cross(&e2)]))
}

/// Per-residue backbone coordinates, indexed like [`Complex::residues`].
pub type BackboneCoords = Vec<ResidueAtoms>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Ligand,
    Receptor,
}

impl Group {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResidueId {
    pub chain: char,
    pub seq: i32,
    pub icode: Option<char>,
}

impl fmt::Display for ResidueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.chain, self.seq)?;
        if let Some(c) = self.icode {
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residue {
    pub chain_id: char,
    pub seq_number: i32,
    pub insertion_code: Option<char>,
    pub aa: AminoAcid,
    pub atoms: ResidueAtoms,
}

impl Residue {
    pub fn id(&self) -> ResidueId {
        ResidueId { chain: self.chain_id, seq: self.seq_number, icode: self.insertion_code }
    }

    pub fn atom(&self, a: BackboneAtom) -> Option<Vec3> {
        self.atoms[a.index()]
    }

    /// N, CA, C and O all present.
    pub fn is_usable(&self) -> bool {
        self.atoms[..4].iter().all(Option::is_some)
    }

    pub fn ca(&self) -> Vec3 {
        self.atoms[BackboneAtom::CA.index()].expect("usable residue has CA")
    }
}

/// Two-partner complex with residues stored chain by chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Complex {
    residues: Vec<Residue>,
    group_of_chain: BTreeMap<char, Group>,
    chain_ranges: BTreeMap<char, Range<usize>>,
}

impl Complex {
    pub fn new(residues: Vec<Residue>, group_of_chain: BTreeMap<char, Group>) -> Result<Self> {
        let mut chain_ranges: BTreeMap<char, Range<usize>> = BTreeMap::new();
        let mut present = BTreeSet::new();
        for (i, r) in residues.iter().enumerate() {
            if !r.is_usable() {
                return Err(Error::Structure(format!("residue {} lacks backbone atoms", r.id())));
            }
            let group = group_of_chain
                .get(&r.chain_id)
                .ok_or_else(|| Error::Structure(format!("chain {} has no partner group", r.chain_id)))?;
            present.insert(*group);
            match chain_ranges.get_mut(&r.chain_id) {
                Some(range) if range.end == i => range.end = i + 1,
                Some(_) => return Err(Error::Structure(format!("chain {} is not contiguous", r.chain_id))),
                None => {
                    chain_ranges.insert(r.chain_id, i..i + 1);
                }
            }
        }
        if present.len() != 2 {
            return Err(Error::Structure("both ligand and receptor need at least one residue".into()));
        }
        Ok(Complex { residues, group_of_chain, chain_ranges })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn residues(&self) -> &[Residue] {
        &self.residues
    }

    pub fn residue(&self, i: usize) -> &Residue {
        &self.residues[i]
    }

    pub fn group_of_chain(&self) -> &BTreeMap<char, Group> {
        &self.group_of_chain
    }

    pub fn group(&self, i: usize) -> Group {
        self.group_of_chain[&self.residues[i].chain_id]
    }

    pub fn groups(&self) -> Vec<Group> {
        (0..self.len()).map(|i| self.group(i)).collect()
    }

    pub fn types(&self) -> Vec<AminoAcid> {
        self.residues.iter().map(|r| r.aa).collect()
    }

    pub fn chains(&self) -> impl Iterator<Item = (char, Range<usize>)> + '_ {
        self.chain_ranges.iter().map(|(c, r)| (*c, r.clone()))
    }

    /// Index range of the chain containing residue `i`.
    pub fn chain_range(&self, i: usize) -> Range<usize> {
        self.chain_ranges[&self.residues[i].chain_id].clone()
    }

    pub fn find(&self, id: &ResidueId) -> Option<usize> {
        let range = self.chain_ranges.get(&id.chain)?;
        range.clone().find(|&i| {
            let r = &self.residues[i];
            r.seq_number == id.seq && r.insertion_code == id.icode
        })
    }

    pub fn ca_positions(&self) -> Vec<Vec3> {
        self.residues.iter().map(Residue::ca).collect()
    }

    pub fn coords(&self) -> BackboneCoords {
        self.residues.iter().map(|r| r.atoms).collect()
    }

    /// Same residues with replaced coordinates.
    pub fn with_coords(&self, coords: &BackboneCoords) -> Result<Complex> {
        if coords.len() != self.len() {
            return Err(Error::Structure(format!("{} coordinate rows for {} residues", coords.len(), self.len())));
        }
        let mut out = self.clone();
        for (r, c) in out.residues.iter_mut().zip(coords) {
            r.atoms = *c;
            if !r.is_usable() {
                return Err(Error::Structure(format!("residue {} lost backbone atoms", r.id())));
            }
        }
        Ok(out)
    }

    pub fn with_types(&self, types: &[AminoAcid]) -> Result<Complex> {
        if types.len() != self.len() {
            return Err(Error::Structure("type list length differs from residue count".into()));
        }
        let mut out = self.clone();
        for (r, t) in out.residues.iter_mut().zip(types) {
            r.aa = *t;
        }
        Ok(out)
    }

    pub fn transformed(&self, motion: &RigidMotion) -> Complex {
        let mut out = self.clone();
        for r in &mut out.residues {
            for a in r.atoms.iter_mut().flatten() {
                *a = motion.apply(a);
            }
        }
        out
    }
}

/// Single substitution at a residue of the complex.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mutation {
    pub wt: AminoAcid,
    pub mt: AminoAcid,
    pub chain: char,
    pub seq: i32,
    pub icode: Option<char>,
}

impl Mutation {
    pub fn new(wt: AminoAcid, chain: char, seq: i32, icode: Option<char>, mt: AminoAcid) -> Result<Self> {
        let m = Mutation { wt, mt, chain, seq, icode };
        if wt == mt {
            return Err(Error::Mutation { token: m.to_string(), reason: "wild-type and mutant types are equal".into() });
        }
        Ok(m)
    }

    pub fn site(&self) -> ResidueId {
        ResidueId { chain: self.chain, seq: self.seq, icode: self.icode }
    }

    /// Residue index of the site, checking the wild-type identity.
    pub fn resolve(&self, c: &Complex) -> Result<usize> {
        let i = c
            .find(&self.site())
            .ok_or_else(|| Error::Mutation { token: self.to_string(), reason: "site not found in structure".into() })?;
        let found = c.residue(i).aa;
        if found != self.wt {
            return Err(Error::Mutation {
                token: self.to_string(),
                reason: format!("structure has {} at this site", found.three_letter()),
            });
        }
        Ok(i)
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.wt, self.chain, self.seq)?;
        if let Some(c) = self.icode {
            write!(f, "{c}")?;
        }
        write!(f, "{}", self.mt)
    }
}

/// Types of the complex with every mutation applied.
pub fn mutant_types(c: &Complex, muts: &[Mutation]) -> Result<Vec<AminoAcid>> {
    let mut types = c.types();
    for m in muts {
        types[m.resolve(c)?] = m.mt;
    }
    Ok(types)
}

/// Directed residue pairs `(i, j)`, read as "j is a neighbour of i",
/// partitioned by partner membership. Each list is closed under reversal.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSet {
    pub internal_l: Vec<(usize, usize)>,
    pub internal_r: Vec<(usize, usize)>,
    pub cross_lr: Vec<(usize, usize)>,
}

impl EdgeSet {
    pub fn all(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.internal_l.iter().chain(&self.internal_r).chain(&self.cross_lr).copied()
    }

    pub fn num_directed(&self) -> usize {
        self.internal_l.len() + self.internal_r.len() + self.cross_lr.len()
    }

    pub fn num_undirected(&self) -> usize {
        self.num_directed() / 2
    }

    pub fn degree(&self, i: usize) -> usize {
        self.all().filter(|&(a, _)| a == i).count()
    }

    pub fn is_empty(&self) -> bool {
        self.num_directed() == 0
    }
}

/// Relative tolerance under which two neighbour distances count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

/// Indices of the `k` points nearest to `points[i]`; near-equal distances
/// resolve to the lower index so the choice survives rounding under rigid motions.
fn nearest(points: &[Vec3], i: usize, k: usize) -> Vec<usize> {
    let d2: Vec<f64> = points.iter().map(|p| (p - points[i]).norm_squared()).collect();
    let mut taken = vec![false; points.len()];
    taken[i] = true;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(points.len() - 1) {
        let dmin = (0..points.len()).filter(|&j| !taken[j]).map(|j| d2[j]).fold(f64::INFINITY, f64::min);
        let tol = TIE_TOLERANCE * dmin.max(1.0);
        let j = (0..points.len()).find(|&j| !taken[j] && d2[j] <= dmin + tol).expect("candidate exists");
        taken[j] = true;
        out.push(j);
    }
    out
}

/// Symmetrized kNN graph over arbitrary points with their partner groups.
pub fn build_edges_from_points(points: &[Vec3], groups: &[Group], k: usize) -> Result<EdgeSet> {
    if points.len() < 2 {
        return Err(Error::Structure("edge construction needs at least two residues".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let mut pairs = BTreeSet::new();
    for i in 0..points.len() {
        for j in nearest(points, i, k) {
            pairs.insert((i, j));
            pairs.insert((j, i));
        }
    }
    let mut edges = EdgeSet::default();
    for (i, j) in pairs {
        let list = match (groups[i], groups[j]) {
            (Group::Ligand, Group::Ligand) => &mut edges.internal_l,
            (Group::Receptor, Group::Receptor) => &mut edges.internal_r,
            _ => &mut edges.cross_lr,
        };
        list.push((i, j));
    }
    Ok(edges)
}

/// kNN connectivity on CA positions, default `k = 8`.
pub fn build_edges(c: &Complex, k: usize) -> Result<EdgeSet> {
    build_edges_from_points(&c.ca_positions(), &c.groups(), k)
}

pub const DEFAULT_KNN: usize = 8;
pub const DEFAULT_INTERFACE_CUTOFF: f64 = 8.0;

/// Residues whose CA lies within `cutoff` Å of a CA in the other partner.
pub fn interface_residues(c: &Complex, cutoff: f64) -> BTreeSet<usize> {
    let ca = c.ca_positions();
    let groups = c.groups();
    let cut2 = cutoff * cutoff;
    (0..c.len())
        .filter(|&i| (0..c.len()).any(|j| groups[j] != groups[i] && (ca[i] - ca[j]).norm_squared() <= cut2))
        .collect()
}

/// Width of the fixed part of the node features: type one-hot, group one-hot, mask flag.
pub const FIXED_FEATURE_WIDTH: usize = NUM_AMINO_ACIDS + 2 + 1;

/// Fixed, coordinate-free node features. Rows of residues in `hidden` get a
/// zero type one-hot.
pub fn fixed_features(types: &[AminoAcid], groups: &[Group], masked: &BTreeSet<usize>, hidden: &BTreeSet<usize>) -> Vec<[f64; FIXED_FEATURE_WIDTH]> {
    types
        .iter()
        .zip(groups)
        .enumerate()
        .map(|(i, (aa, g))| {
            let mut row = [0.0; FIXED_FEATURE_WIDTH];
            if !hidden.contains(&i) {
                row[aa.index()] = 1.0;
            }
            row[NUM_AMINO_ACIDS + g.index()] = 1.0;
            if masked.contains(&i) {
                row[NUM_AMINO_ACIDS + 2] = 1.0;
            }
            row
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;

    pub fn residue(chain: char, seq: i32, aa: AminoAcid, ca: Vec3) -> Residue {
        let off = |x: f64, y: f64, z: f64| Some(ca + Vec3::new(x, y, z));
        Residue {
            chain_id: chain,
            seq_number: seq,
            insertion_code: None,
            aa,
            atoms: [off(-1.2, 0.6, 0.3), Some(ca), off(1.3, 0.5, -0.2), off(1.9, 1.4, 0.4), off(0.2, -1.1, 1.0)],
        }
    }

    /// Random two-chain complex, chain A ligand and chain B receptor.
    pub fn random_complex<R: Rng>(rng: &mut R, n_a: usize, n_b: usize) -> Complex {
        let mut residues = Vec::new();
        for (chain, n, x0) in [('A', n_a, 0.0), ('B', n_b, 9.0)] {
            for k in 0..n {
                let ca = Vec3::new(x0 + rng.random_range(-2.0..2.0), 3.8 * k as f64 + rng.random_range(-0.5..0.5), rng.random_range(-2.0..2.0));
                let aa = AminoAcid::ALL[rng.random_range(0..NUM_AMINO_ACIDS)];
                residues.push(residue(chain, k as i32 + 1, aa, ca));
            }
        }
        Complex::new(residues, BTreeMap::from([('A', Group::Ligand), ('B', Group::Receptor)])).unwrap()
    }
}
