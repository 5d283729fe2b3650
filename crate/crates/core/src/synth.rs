//! Synthetic helical complexes with analytic ΔΔG labels and RMSF targets,
//! used for desk-scale training runs and self-checks.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geom::{random_rotation_with, Mat3, RigidMotion, Rotation, Vec3};
use crate::pipeline::TrainSample;
use crate::structure::{AminoAcid, Complex, Group, Mutation, Residue};

const BOND_N_CA: f64 = 1.458;
const BOND_CA_C: f64 = 1.525;
const BOND_C_N: f64 = 1.329;
const BOND_C_O: f64 = 1.231;
const ANGLE_N_CA_C: f64 = 111.2;
const ANGLE_CA_C_N: f64 = 116.2;
const ANGLE_C_N_CA: f64 = 121.7;
const ANGLE_CA_C_O: f64 = 120.5;
const HELIX_PHI: f64 = -57.0;
const HELIX_PSI: f64 = -47.0;
const OMEGA: f64 = 180.0;

/// CA–CA distance under which two residues count as in contact.
pub const CONTACT_CUTOFF: f64 = 10.0;

/// Places atom `d` given the three preceding atoms, the `c–d` bond length,
/// the `b–c–d` angle and the `a–b–c–d` torsion (degrees).
fn place(a: Vec3, b: Vec3, c: Vec3, bond: f64, angle: f64, torsion: f64) -> Vec3 {
    let (angle, torsion) = (angle.to_radians(), torsion.to_radians());
    let bc = (c - b).normalize();
    let n = (b - a).cross(&bc).normalize();
    let m = Mat3::from_columns(&[bc, n.cross(&bc), n]);
    let d = Vec3::new(-bond * angle.cos(), bond * angle.sin() * torsion.cos(), bond * angle.sin() * torsion.sin());
    c + m * d
}

/// Virtual CB from the backbone, using the standard ideal-geometry coefficients.
fn ideal_cb(n: Vec3, ca: Vec3, c: Vec3) -> Vec3 {
    let b = ca - n;
    let cc = c - ca;
    let a = b.cross(&cc);
    -0.58273431 * a + 0.56802827 * b - 0.54067466 * cc + ca
}

/// Ideal α-helix backbone (N, CA, C, O, CB) in an arbitrary frame.
pub fn helix_backbone(types: &[AminoAcid]) -> Vec<[Option<Vec3>; 5]> {
    let n_res = types.len();
    let mut n = Vec::with_capacity(n_res);
    let mut ca = Vec::with_capacity(n_res);
    let mut c = Vec::with_capacity(n_res);
    let t = (180.0 - ANGLE_N_CA_C).to_radians();
    n.push(Vec3::zeros());
    ca.push(Vec3::new(BOND_N_CA, 0.0, 0.0));
    c.push(ca[0] + BOND_CA_C * Vec3::new(t.cos(), t.sin(), 0.0));
    for i in 1..n_res {
        n.push(place(n[i - 1], ca[i - 1], c[i - 1], BOND_C_N, ANGLE_CA_C_N, HELIX_PSI));
        ca.push(place(ca[i - 1], c[i - 1], n[i], BOND_N_CA, ANGLE_C_N_CA, OMEGA));
        c.push(place(c[i - 1], n[i], ca[i], BOND_CA_C, ANGLE_N_CA_C, HELIX_PHI));
    }
    (0..n_res)
        .map(|i| {
            let o = if i + 1 < n_res {
                place(n[i + 1], ca[i], c[i], BOND_C_O, ANGLE_CA_C_O, 180.0)
            } else {
                place(n[i], ca[i], c[i], BOND_C_O, ANGLE_CA_C_O, HELIX_PSI + 180.0)
            };
            let cb = (types[i] != AminoAcid::Gly).then(|| ideal_cb(n[i], ca[i], c[i]));
            [Some(n[i]), Some(ca[i]), Some(c[i]), Some(o), cb]
        })
        .collect()
}

/// Motion putting the helix centroid at the origin with its axis along z.
fn axis_frame(atoms: &[[Option<Vec3>; 5]]) -> RigidMotion {
    let cas: Vec<Vec3> = atoms.iter().map(|a| a[1].expect("CA placed")).collect();
    let centroid = cas.iter().sum::<Vec3>() / cas.len() as f64;
    let turn = 4.min(cas.len());
    let head = cas[..turn].iter().sum::<Vec3>() / turn as f64;
    let tail = cas[cas.len() - turn..].iter().sum::<Vec3>() / turn as f64;
    let z = (tail - head).try_normalize(1e-9).unwrap_or_else(Vec3::z);
    let helper = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let x = (helper - z * z.dot(&helper)).normalize();
    let basis = Mat3::from_columns(&[x, z.cross(&x), z]);
    let rot = Rotation::from_matrix(basis.transpose()).expect("orthonormal basis");
    RigidMotion::new(rot.clone(), -rot.apply(&centroid))
}

fn spin(theta: f64, flip: bool) -> Rotation {
    let (s, c) = theta.sin_cos();
    let rz = Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let fx = if flip { Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0) } else { Mat3::identity() };
    Rotation::from_matrix(fx * rz).expect("proper rotation")
}

fn helix_residues(chain: char, types: &[AminoAcid], place_at: &RigidMotion) -> Vec<Residue> {
    let atoms = helix_backbone(types);
    let centre = axis_frame(&atoms);
    atoms
        .iter()
        .zip(types)
        .enumerate()
        .map(|(i, (a, &aa))| Residue {
            chain_id: chain,
            seq_number: i as i32 + 1,
            insertion_code: None,
            aa,
            atoms: a.map(|p| p.map(|p| place_at.apply(&centre.apply(&p)))),
        })
        .collect()
}

fn random_types<R: Rng>(rng: &mut R, n: usize) -> Vec<AminoAcid> {
    (0..n).map(|_| AminoAcid::ALL[rng.random_range(0..AminoAcid::ALL.len())]).collect()
}

/// Two packed ideal helices: chain A (ligand) and chain B (receptor) with
/// random sequences, axis separation, register, orientation and global pose.
pub fn helix_pair<R: Rng>(rng: &mut R, n_a: usize, n_b: usize) -> Result<Complex> {
    let a_pose = RigidMotion::new(spin(rng.random_range(0.0..std::f64::consts::TAU), false), Vec3::zeros());
    let flip = rng.random_bool(0.5);
    let offset = Vec3::new(rng.random_range(8.5..10.5), 0.0, rng.random_range(-3.0..3.0));
    let b_pose = RigidMotion::new(spin(rng.random_range(0.0..std::f64::consts::TAU), flip), offset);
    let mut residues = helix_residues('A', &random_types(rng, n_a), &a_pose);
    residues.extend(helix_residues('B', &random_types(rng, n_b), &b_pose));
    let groups = BTreeMap::from([('A', Group::Ligand), ('B', Group::Receptor)]);
    let global = RigidMotion::new(random_rotation_with(rng), Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)));
    Ok(Complex::new(residues, groups)?.transformed(&global))
}

/// Loosely packed random two-chain complex: each chain is a 3.8 Å random
/// walk and every residue carries a randomly oriented backbone.
pub fn random_complex<R: Rng>(rng: &mut R, n_a: usize, n_b: usize) -> Result<Complex> {
    let template = helix_backbone(&[AminoAcid::Ala]);
    let ca0 = template[0][1].expect("CA placed");
    let mut residues = Vec::with_capacity(n_a + n_b);
    for (chain, n, start) in [('A', n_a, Vec3::zeros()), ('B', n_b, Vec3::new(9.0, 0.0, 0.0))] {
        let mut ca = start;
        for k in 0..n {
            if k > 0 {
                let step = Vec3::new(rng.random_range(-1.0..1.0), 1.5, rng.random_range(-1.0..1.0)).normalize();
                ca += 3.8 * step;
            }
            let rot = random_rotation_with(rng);
            let aa = AminoAcid::ALL[rng.random_range(0..AminoAcid::ALL.len())];
            let atoms = template[0].map(|p| p.map(|p| ca + rot.apply(&(p - ca0))));
            let atoms = if aa == AminoAcid::Gly { [atoms[0], atoms[1], atoms[2], atoms[3], None] } else { atoms };
            residues.push(Residue { chain_id: chain, seq_number: k as i32 + 1, insertion_code: None, aa, atoms });
        }
    }
    Complex::new(residues, BTreeMap::from([('A', Group::Ligand), ('B', Group::Receptor)]))
}

/// Number of CA atoms within `cutoff` of residue `i`, restricted to the
/// opposite partner when `cross_only`.
pub fn contact_count(c: &Complex, i: usize, cutoff: f64, cross_only: bool) -> usize {
    let ca = c.residue(i).ca();
    (0..c.len())
        .filter(|&j| j != i && (!cross_only || c.group(j) != c.group(i)))
        .filter(|&j| (c.residue(j).ca() - ca).norm() <= cutoff)
        .count()
}

/// Analytic label: each substitution contributes its hydropathy loss scaled
/// by how many partner residues surround the site.
pub fn ddg_label(c: &Complex, muts: &[Mutation]) -> Result<f64> {
    let mut total = 0.0;
    for m in muts {
        let i = m.resolve(c)?;
        let contacts = contact_count(c, i, CONTACT_CUTOFF, true) as f64;
        total += (0.4 + 0.3 * contacts) * (m.wt.hydropathy() - m.mt.hydropathy()) / 3.0;
    }
    Ok(total)
}

/// Weighted contact number `Σ_j 1/d_ij²` over CA atoms, a packing-density measure.
pub fn weighted_contact_number(c: &Complex, i: usize) -> f64 {
    let ca = c.residue(i).ca();
    (0..c.len()).filter(|&j| j != i).map(|j| 1.0 / (c.residue(j).ca() - ca).norm_squared()).sum()
}

/// Flexibility target inversely proportional to packing density.
pub fn rmsf_pattern(c: &Complex) -> Vec<f64> {
    (0..c.len()).map(|i| 1.0 + 1.0 / weighted_contact_number(c, i)).collect()
}

/// Labelled synthetic benchmark.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub complexes: Vec<(String, Arc<Complex>)>,
    pub samples: Vec<TrainSample>,
}

/// `n_complexes` helix pairs of `len_range` residues per chain, each with
/// `mutations_per_complex` single substitutions; half of them sit at the interface.
pub fn benchmark(n_complexes: usize, len_range: std::ops::RangeInclusive<usize>, mutations_per_complex: usize, seed: u64) -> Result<SyntheticSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut complexes = Vec::with_capacity(n_complexes);
    let mut samples = Vec::new();
    for k in 0..n_complexes {
        let name = format!("syn{k:03}");
        let (n_a, n_b) = (rng.random_range(len_range.clone()), rng.random_range(len_range.clone()));
        let c = Arc::new(helix_pair(&mut rng, n_a, n_b)?);
        let iface: Vec<usize> = (0..c.len()).filter(|&i| contact_count(&c, i, CONTACT_CUTOFF, true) > 0).collect();
        let mut used = std::collections::BTreeSet::new();
        for m in 0..mutations_per_complex {
            let pool: Vec<usize> = if m % 2 == 0 && !iface.is_empty() { iface.clone() } else { (0..c.len()).collect() };
            let mut site = pool[rng.random_range(0..pool.len())];
            for _ in 0..20 {
                if !used.contains(&site) {
                    break;
                }
                site = pool[rng.random_range(0..pool.len())];
            }
            used.insert(site);
            let r = c.residue(site);
            let mt = loop {
                let t = AminoAcid::ALL[rng.random_range(0..AminoAcid::ALL.len())];
                if t != r.aa {
                    break t;
                }
            };
            let muts = vec![Mutation::new(r.aa, r.chain_id, r.seq_number, r.insertion_code, mt)?];
            let ddg = ddg_label(&c, &muts)?;
            samples.push(TrainSample { structure: name.clone(), complex: c.clone(), mutations: muts, ddg, rmsf: None });
        }
        complexes.push((name, c));
    }
    Ok(SyntheticSet { complexes, samples })
}
