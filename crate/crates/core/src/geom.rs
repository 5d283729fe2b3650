//! Vector and rotation algebra plus the Gaussian positional-distribution
//! calculus used by the network: differences of independent Gaussians,
//! closed-form moments of the squared distance, Monte Carlo estimators and
//! the action of rigid motions on a distribution.

use nalgebra::{Matrix3, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Eigenvalues down to this (negative) value are accepted as PSD and clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-10;
const SYMMETRY_TOLERANCE: f64 = 1e-12;
const ROTATION_TOLERANCE: f64 = 1e-12;
const MIN_MC_SAMPLES: usize = 10_000;
const MC_SHARDS: u64 = 64;

/// Proper rotation matrix (orthogonal, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let dev = (m.transpose() * m - Mat3::identity()).abs().max();
        if !dev.is_finite() || dev > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!("|QtQ - I| = {dev:e}")));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!("det = {det}")));
        }
        Ok(Rotation(m))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }
}

/// Uniform (Haar) sample from SO(3), deterministic per seed.
pub fn random_rotation(seed: u64) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

/// Shoemake's subgroup algorithm on unit quaternions.
pub fn random_rotation_with<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = Quaternion::new(b * (tau * u3).cos(), a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin());
    let m = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    Rotation(m)
}

/// x ↦ Q·x + g
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidMotion {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidMotion {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        RigidMotion { rotation, translation }
    }

    pub fn identity() -> Self {
        RigidMotion::new(Rotation::identity(), Vec3::zeros())
    }

    /// Random rotation plus a translation with components uniform in ±`max_shift`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_shift: f64) -> Self {
        let rotation = random_rotation_with(rng);
        let translation = Vec3::from_fn(|_, _| rng.random_range(-max_shift..=max_shift));
        RigidMotion { rotation, translation }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation.apply(x) + self.translation
    }

    pub fn apply_pdc(&self, p: &GaussianPdc) -> GaussianPdc {
        transform_pdc(p, &self.rotation, &self.translation)
    }
}

/// Gaussian positional distribution N(mean, cov).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPdc {
    pub mean: Vec3,
    pub cov: Mat3,
}

impl GaussianPdc {
    pub fn new(mean: Vec3, cov: Mat3) -> Result<Self> {
        let p = GaussianPdc { mean, cov };
        p.validate()?;
        Ok(p)
    }

    pub fn point(mean: Vec3) -> Self {
        GaussianPdc { mean, cov: Mat3::zeros() }
    }

    pub fn isotropic(mean: Vec3, variance: f64) -> Self {
        GaussianPdc { mean, cov: Mat3::identity() * variance }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidPdc("non-finite entry".into()));
        }
        let asym = (self.cov - self.cov.transpose()).abs().max();
        let scale = self.cov.abs().max().max(1.0);
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(Error::InvalidPdc(format!("covariance not symmetric (|S - St| = {asym:e})")));
        }
        let min_eig = min_eigenvalue(&self.cov);
        if min_eig < -PSD_TOLERANCE {
            return Err(Error::InvalidPdc(format!("covariance not PSD (min eigenvalue {min_eig:e})")));
        }
        Ok(())
    }

    /// Matrix factor `L` with `L·Lᵀ = cov`, after clamping tolerated negative eigenvalues.
    fn sampling_factor(&self) -> Result<Mat3> {
        self.validate()?;
        let eig = SymmetricEigen::new(symmetrize(&self.cov));
        let mut factor = eig.eigenvectors;
        for (k, lambda) in eig.eigenvalues.iter().enumerate() {
            let s = lambda.max(0.0).sqrt();
            factor.column_mut(k).scale_mut(s);
        }
        Ok(factor)
    }
}

pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Mat3) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Symmetrize and clamp eigenvalues at zero.
pub fn clamp_psd(m: &Mat3) -> Mat3 {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = eig.eigenvectors;
    symmetrize(&(v * Mat3::from_diagonal(&clamped) * v.transpose()))
}

/// Distribution of `x_a − x_b` for independent `x_a ~ a`, `x_b ~ b`.
pub fn pdc_difference(a: &GaussianPdc, b: &GaussianPdc) -> GaussianPdc {
    GaussianPdc { mean: a.mean - b.mean, cov: a.cov + b.cov }
}

/// Which variance expression to use for the squared distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentFormula {
    /// `2·tr(S) + 4·mᵀSm`, the expression as printed in the source derivation.
    PaperLiteral,
    /// `2·tr(S²) + 4·mᵀSm`, the exact variance of a Gaussian's squared norm.
    #[default]
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceMoments {
    /// Å²
    pub mean: f64,
    /// Å⁴
    pub variance: f64,
}

/// Mean and variance of `‖x_a − x_b‖²`.
pub fn squared_distance_moments(a: &GaussianPdc, b: &GaussianPdc, formula: MomentFormula) -> DistanceMoments {
    let diff = pdc_difference(a, b);
    let (m, s) = (diff.mean, diff.cov);
    let quad = m.dot(&(s * m));
    let mean = s.trace() + m.norm_squared();
    let spread = match formula {
        MomentFormula::PaperLiteral => 2.0 * s.trace(),
        MomentFormula::Standard => 2.0 * (s * s).trace(),
    };
    DistanceMoments { mean, variance: spread + 4.0 * quad }
}

/// Monte Carlo moment estimate with standard errors taken from the same run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn moments(&self) -> DistanceMoments {
        DistanceMoments { mean: self.mean, variance: self.variance }
    }
}

/// Shifted power sums Σ(y−c)^p, p = 1..4.
#[derive(Clone, Copy, Default)]
struct PowerSums {
    n: usize,
    s: [f64; 4],
}

impl PowerSums {
    fn push(&mut self, y: f64) {
        let y2 = y * y;
        self.n += 1;
        self.s[0] += y;
        self.s[1] += y2;
        self.s[2] += y2 * y;
        self.s[3] += y2 * y2;
    }

    fn merge(mut self, other: &PowerSums) -> PowerSums {
        self.n += other.n;
        for (a, b) in self.s.iter_mut().zip(other.s.iter()) {
            *a += b;
        }
        self
    }

    fn estimate(&self, shift: f64) -> McEstimate {
        let n = self.n as f64;
        let [s1, s2, s3, s4] = self.s.map(|v| v / n);
        let d = s1;
        let m2 = (s2 - d * d).max(0.0);
        let m4 = (s4 - 4.0 * d * s3 + 6.0 * d * d * s2 - 3.0 * d.powi(4)).max(0.0);
        let variance = m2 * n / (n - 1.0);
        McEstimate {
            mean: shift + d,
            variance,
            mean_se: (variance / n).sqrt(),
            variance_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
            n: self.n,
        }
    }
}

fn shard_sizes(n: usize) -> Vec<(u64, usize)> {
    let base = n / MC_SHARDS as usize;
    let extra = n % MC_SHARDS as usize;
    (0..MC_SHARDS).map(|s| (s, base + usize::from((s as usize) < extra))).collect()
}

fn shard_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw(rng: &mut ChaCha8Rng, mean: &Vec3, factor: &Mat3) -> Vec3 {
    let z = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    mean + factor * z
}

fn check_sample_count(n_samples: usize) -> Result<()> {
    if n_samples < MIN_MC_SAMPLES {
        return Err(Error::Config(format!("Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {n_samples}")));
    }
    Ok(())
}

/// Sample mean and unbiased variance of `‖x_a − x_b‖²` with independent draws.
///
/// Samples are split over a fixed number of shards, each with its own
/// ChaCha stream, and reduced in shard order, so the result is bit-identical
/// for a given seed regardless of thread count.
pub fn mc_squared_distance_moments(a: &GaussianPdc, b: &GaussianPdc, n_samples: usize, seed: u64) -> Result<McEstimate> {
    check_sample_count(n_samples)?;
    let (fa, fb) = (a.sampling_factor()?, b.sampling_factor()?);
    let sample = |rng: &mut ChaCha8Rng| (draw(rng, &a.mean, &fa) - draw(rng, &b.mean, &fb)).norm_squared();

    // pilot draws from a separate stream centre the power sums
    let mut pilot = shard_rng(seed, u64::MAX);
    let shift = (0..256).map(|_| sample(&mut pilot)).sum::<f64>() / 256.0;

    let sums: Vec<PowerSums> = shard_sizes(n_samples)
        .into_par_iter()
        .map(|(stream, count)| {
            let mut rng = shard_rng(seed, stream);
            let mut acc = PowerSums::default();
            for _ in 0..count {
                acc.push(sample(&mut rng) - shift);
            }
            acc
        })
        .collect();
    let total = sums.iter().fold(PowerSums::default(), |acc, s| acc.merge(s));
    Ok(total.estimate(shift))
}

/// How the angle at the middle particle is read off the two bond vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AngleConvention {
    /// Angle between `x_a − x_b` and `x_c − x_b`: π for a straight chain.
    #[default]
    Interior,
    /// arccos of `(x_a − x_b)·(x_b − x_c)` over the norms: 0 for a straight chain.
    PrintedRatio,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleMoments {
    /// radians, in [0, π]
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleEstimate {
    pub moments: AngleMoments,
    pub mean_se: f64,
    pub n: usize,
}

const BOND_EPS: f64 = 1e-9;

fn coincident(p: &GaussianPdc, q: &GaussianPdc) -> bool {
    p.cov.abs().max() == 0.0 && q.cov.abs().max() == 0.0 && (p.mean - q.mean).norm() < BOND_EPS
}

/// Monte Carlo moments of the angle at `b` for triplets drawn from `a`, `b`, `c`.
pub fn mc_angle_moments(a: &GaussianPdc, b: &GaussianPdc, c: &GaussianPdc, n_samples: usize, seed: u64) -> Result<AngleEstimate> {
    mc_angle_moments_with(a, b, c, n_samples, seed, AngleConvention::Interior)
}

pub fn mc_angle_moments_with(
    a: &GaussianPdc,
    b: &GaussianPdc,
    c: &GaussianPdc,
    n_samples: usize,
    seed: u64,
    convention: AngleConvention,
) -> Result<AngleEstimate> {
    check_sample_count(n_samples)?;
    if coincident(a, b) || coincident(b, c) {
        return Err(Error::UndefinedAngle("two deterministic particles share a position".into()));
    }
    let (fa, fb, fc) = (a.sampling_factor()?, b.sampling_factor()?, c.sampling_factor()?);
    let max_rejections = 10 * n_samples;
    let orient = |u: Vec3, v: Vec3| match convention {
        AngleConvention::Interior => (u, v),
        AngleConvention::PrintedRatio => (u, -v),
    };
    // Sums are taken around the angle between the means to avoid cancellation.
    let pivot = {
        let (u, v) = orient(a.mean - b.mean, c.mean - b.mean);
        let (nu, nv) = (u.norm(), v.norm());
        if nu < BOND_EPS || nv < BOND_EPS { 0.0 } else { (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0).acos() }
    };

    let shards: Vec<Result<(f64, f64, usize)>> = shard_sizes(n_samples)
        .into_par_iter()
        .map(|(stream, count)| {
            let mut rng = shard_rng(seed, stream);
            let (mut s1, mut s2, mut rejected) = (0.0, 0.0, 0usize);
            let mut accepted = 0;
            while accepted < count {
                let xa = draw(&mut rng, &a.mean, &fa);
                let xb = draw(&mut rng, &b.mean, &fb);
                let xc = draw(&mut rng, &c.mean, &fc);
                let (u, v) = orient(xa - xb, xc - xb);
                let (nu, nv) = (u.norm(), v.norm());
                if nu < BOND_EPS || nv < BOND_EPS {
                    rejected += 1;
                    if rejected > max_rejections {
                        return Err(Error::UndefinedAngle("too many degenerate samples".into()));
                    }
                    continue;
                }
                let d = (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0).acos() - pivot;
                s1 += d;
                s2 += d * d;
                accepted += 1;
            }
            Ok((s1, s2, accepted))
        })
        .collect();

    let (mut s1, mut s2, mut n) = (0.0, 0.0, 0usize);
    for shard in shards {
        let (a1, a2, k) = shard?;
        s1 += a1;
        s2 += a2;
        n += k;
    }
    let nf = n as f64;
    let offset = s1 / nf;
    let variance = ((s2 - nf * offset * offset) / (nf - 1.0)).max(0.0);
    Ok(AngleEstimate { moments: AngleMoments { mean: pivot + offset, variance }, mean_se: (variance / nf).sqrt(), n })
}

/// Push a distribution through `x ↦ Q·x + g`: mean `Q·μ + g`, covariance `Q·Σ·Qᵀ`.
pub fn transform_pdc(p: &GaussianPdc, q: &Rotation, g: &Vec3) -> GaussianPdc {
    let m = q.matrix();
    GaussianPdc { mean: m * p.mean + g, cov: m * p.cov * m.transpose() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_pdc(rng: &mut ChaCha8Rng) -> GaussianPdc {
        let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let mean = Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        GaussianPdc::new(mean, a * a.transpose()).unwrap()
    }

    #[test]
    fn difference_examples() {
        let n01 = GaussianPdc::isotropic(Vec3::zeros(), 1.0);
        let d = pdc_difference(&n01, &n01);
        assert_eq!(d.mean, Vec3::zeros());
        assert_eq!(d.cov, Mat3::identity() * 2.0);

        let d = pdc_difference(&GaussianPdc::point(Vec3::x()), &GaussianPdc::point(Vec3::zeros()));
        assert_eq!(d.mean, Vec3::x());
        assert_eq!(d.cov, Mat3::zeros());

        let m = Vec3::new(1.0, 2.0, 3.0);
        let d = pdc_difference(&GaussianPdc::isotropic(m, 1.0), &GaussianPdc::isotropic(m, 2.0));
        assert_eq!(d.mean, Vec3::zeros());
        assert_eq!(d.cov, Mat3::identity() * 3.0);
    }

    #[test]
    fn closed_form_examples() {
        let a = GaussianPdc::point(Vec3::x());
        let b = GaussianPdc::point(Vec3::zeros());
        for f in [MomentFormula::Standard, MomentFormula::PaperLiteral] {
            let m = squared_distance_moments(&a, &b, f);
            assert_eq!((m.mean, m.variance), (1.0, 0.0));
        }

        let a = GaussianPdc::isotropic(Vec3::zeros(), 1.0);
        let std = squared_distance_moments(&a, &a, MomentFormula::Standard);
        let lit = squared_distance_moments(&a, &a, MomentFormula::PaperLiteral);
        assert_abs_diff_eq!(std.mean, 6.0);
        assert_abs_diff_eq!(std.variance, 24.0);
        assert_abs_diff_eq!(lit.variance, 12.0);

        let shifted = GaussianPdc::isotropic(Vec3::x(), 1.0);
        let std = squared_distance_moments(&shifted, &a, MomentFormula::Standard);
        let lit = squared_distance_moments(&shifted, &a, MomentFormula::PaperLiteral);
        assert_abs_diff_eq!(std.mean, 7.0);
        assert_abs_diff_eq!(std.variance, 32.0);
        assert_abs_diff_eq!(lit.variance, 20.0);
    }

    #[test]
    fn mc_oracle_decides_the_variance_formula() {
        // Σ_a = Σ_b = I, equal means: Standard predicts 24, literal 12.
        let a = GaussianPdc::isotropic(Vec3::zeros(), 1.0);
        let est = mc_squared_distance_moments(&a, &a, 1_000_000, 11).unwrap();
        assert!((est.mean - 6.0).abs() < 3.0 * est.mean_se, "{est:?}");
        assert!((est.variance - 24.0).abs() < 4.0 * est.variance_se, "{est:?}");
        assert!((est.variance - 12.0).abs() > 20.0 * est.variance_se);

        let b = GaussianPdc::isotropic(Vec3::x(), 1.0);
        let est = mc_squared_distance_moments(&b, &a, 1_000_000, 12).unwrap();
        assert!((est.mean - 7.0).abs() < 4.0 * est.mean_se);
        assert!((est.variance - 32.0).abs() < 4.0 * est.variance_se, "{est:?}");
    }

    #[test]
    fn mc_degenerate_is_exact_and_deterministic() {
        let a = GaussianPdc::point(Vec3::new(1.0, 2.0, 2.0));
        let b = GaussianPdc::point(Vec3::zeros());
        let est = mc_squared_distance_moments(&a, &b, 10_000, 3).unwrap();
        assert_eq!(est.mean, 9.0);
        assert_eq!(est.variance, 0.0);

        let c = GaussianPdc::isotropic(Vec3::zeros(), 0.7);
        let x = mc_squared_distance_moments(&c, &b, 20_000, 99).unwrap();
        let y = mc_squared_distance_moments(&c, &b, 20_000, 99).unwrap();
        assert_eq!(x.mean.to_bits(), y.mean.to_bits());
        assert_eq!(x.variance.to_bits(), y.variance.to_bits());
    }

    #[test]
    fn mc_rejects_non_psd() {
        let bad = GaussianPdc { mean: Vec3::zeros(), cov: Mat3::from_diagonal(&Vec3::new(1.0, -0.5, 1.0)) };
        let ok = GaussianPdc::point(Vec3::zeros());
        assert!(matches!(mc_squared_distance_moments(&bad, &ok, 10_000, 0), Err(Error::InvalidPdc(_))));
        assert!(mc_squared_distance_moments(&ok, &ok, 100, 0).is_err());
    }

    #[test]
    fn angle_examples() {
        let p = |x: f64, y: f64| GaussianPdc::point(Vec3::new(x, y, 0.0));
        let straight = mc_angle_moments(&p(0.0, 0.0), &p(1.0, 0.0), &p(2.0, 0.0), 10_000, 1).unwrap();
        assert_abs_diff_eq!(straight.moments.mean, std::f64::consts::PI, epsilon = 1e-12);
        assert_abs_diff_eq!(straight.moments.variance, 0.0, epsilon = 1e-20);

        let printed =
            mc_angle_moments_with(&p(0.0, 0.0), &p(1.0, 0.0), &p(2.0, 0.0), 10_000, 1, AngleConvention::PrintedRatio).unwrap();
        assert_abs_diff_eq!(printed.moments.mean, 0.0, epsilon = 1e-12);

        let right = mc_angle_moments(&p(1.0, 0.0), &p(0.0, 0.0), &p(0.0, 1.0), 10_000, 1).unwrap();
        assert_abs_diff_eq!(right.moments.mean, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(right.moments.variance, 0.0, epsilon = 1e-20);

        let fuzzy = |x: f64, y: f64| GaussianPdc::isotropic(Vec3::new(x, y, 0.0), 0.01);
        let est = mc_angle_moments(&fuzzy(1.0, 0.0), &fuzzy(0.0, 0.0), &fuzzy(0.0, 1.0), 200_000, 5).unwrap();
        // independent naive sampler: std-normal offsets scaled by sqrt(0.01)
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand::rngs::StdRng::seed_from_u64(77);
        let mut jitter = |p: Vec3| p + Vec3::from_fn(|_, _| { let z: f64 = StandardNormal.sample(&mut rng); 0.1 * z });
        let n = 200_000;
        let oracle: f64 = (0..n)
            .map(|_| {
                let (xa, xb, xc) = (jitter(Vec3::x()), jitter(Vec3::zeros()), jitter(Vec3::y()));
                (xa - xb).angle(&(xc - xb))
            })
            .sum::<f64>()
            / n as f64;
        let se = (est.mean_se.powi(2) + est.moments.variance / n as f64).sqrt();
        assert!((est.moments.mean - oracle).abs() < 4.0 * se, "{est:?} vs {oracle}");
        assert!(est.moments.variance <= std::f64::consts::PI.powi(2) / 4.0);
    }

    #[test]
    fn angle_undefined_for_coincident_points() {
        let o = GaussianPdc::point(Vec3::zeros());
        let x = GaussianPdc::point(Vec3::x());
        assert!(matches!(mc_angle_moments(&o, &o, &x, 10_000, 0), Err(Error::UndefinedAngle(_))));
    }

    #[test]
    fn transform_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pdc(&mut rng);
        assert_eq!(transform_pdc(&p, &Rotation::identity(), &Vec3::zeros()), p);

        let iso = GaussianPdc::isotropic(Vec3::new(0.5, 1.0, -2.0), 2.5);
        let q = random_rotation(8);
        let t = transform_pdc(&iso, &q, &Vec3::zeros());
        assert!((t.cov - iso.cov).abs().max() < 1e-14);
    }

    #[test]
    fn moments_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let (a, b) = (random_pdc(&mut rng), random_pdc(&mut rng));
            for _ in 0..100 {
                let motion = RigidMotion::random(&mut rng, 50.0);
                let (ta, tb) = (motion.apply_pdc(&a), motion.apply_pdc(&b));
                for f in [MomentFormula::Standard, MomentFormula::PaperLiteral] {
                    let (x, y) = (squared_distance_moments(&a, &b, f), squared_distance_moments(&ta, &tb, f));
                    assert!((x.mean - y.mean).abs() < 1e-9);
                    assert!((x.variance - y.variance).abs() < 1e-9);
                }
                ta.validate().unwrap();
                assert!(min_eigenvalue(&ta.cov) >= -PSD_TOLERANCE);
            }
        }
    }

    #[test]
    fn random_rotation_properties() {
        let q = random_rotation(1);
        Rotation::from_matrix(*q.matrix()).unwrap();
        assert_ne!(random_rotation(1), random_rotation(2));
        assert_eq!(random_rotation(3), random_rotation(3));
    }

    /// Independent sampler: Gram–Schmidt on a Gaussian matrix with sign fixes.
    fn gaussian_qr_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let g = Mat3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = g.qr();
        let (mut q, r) = (qr.q(), qr.r());
        for k in 0..3 {
            if r[(k, k)] < 0.0 {
                q.column_mut(k).neg_mut();
            }
        }
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        q
    }

    #[test]
    fn haar_trace_mean() {
        let n = 100_000;
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(1234);
        let oracle: Vec<f64> = (0..n).map(|_| gaussian_qr_rotation(&mut oracle_rng).trace()).collect();
        let oracle_mean = oracle.iter().sum::<f64>() / n as f64;
        // brute-force oracle agrees with the Haar value ∫tr = 0
        assert!(oracle_mean.abs() < 0.02, "oracle mean {oracle_mean}");

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let traces: Vec<f64> = (0..n).map(|_| random_rotation_with(&mut rng).matrix().trace()).collect();
        let mean = traces.iter().sum::<f64>() / n as f64;
        let var = traces.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - oracle_mean).abs() < 3.0 * se * 2f64.sqrt(), "mean {mean} oracle {oracle_mean} se {se}");
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn clamp_psd_removes_negative_directions() {
        let m = Mat3::from_diagonal(&Vec3::new(2.0, -1.0, 0.5));
        let q = random_rotation(5);
        let rotated = q.matrix() * m * q.matrix().transpose();
        let c = clamp_psd(&rotated);
        assert!(min_eigenvalue(&c) >= -1e-14);
        assert!((c.trace() - 2.5).abs() < 1e-12);
    }
}
