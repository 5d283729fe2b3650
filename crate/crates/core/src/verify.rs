//! Self-check suites: rigid-motion equivariance of the layer stack, the
//! squared-distance moments against Monte Carlo, finite-difference gradients
//! of every trainable path and covariance positivity under deep stacks.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{check_gradients, FD_STEP};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{mc_squared_distance_moments, symmetrize, squared_distance_moments, GaussianPdc, Mat3, MomentFormula, RigidMotion, Vec3, PSD_TOLERANCE};
use crate::mmm::{self, MaskRegion};
use crate::model::{self, ModelConfig, ModelParams};
use crate::pdc::{pdc_layer, LayerOptions, NodeState, PdcLayerParams, VarianceRule};
use crate::pipeline::{self, TrainConfig, TrainSample};
use crate::structure::{build_edges, Complex, Mutation};
use crate::synth;

fn random_cov<R: Rng>(rng: &mut R, scale: f64) -> Mat3 {
    let a = Mat3::from_fn(|_, _| rng.random_range(-scale..scale));
    a * a.transpose()
}

fn initial_states<R: Rng>(rng: &mut R, c: &Complex, width: usize) -> Vec<NodeState> {
    c.ca_positions()
        .into_iter()
        .map(|ca| NodeState { h: (0..width).map(|_| rng.random_range(-1.0..1.0)).collect(), pdc: GaussianPdc { mean: ca, cov: random_cov(rng, 0.8) } })
        .collect()
}

/// Applies layers one by one, calling `inspect` after each.
fn run_layers(states: &[NodeState], c: &Complex, k: usize, layers: &[PdcLayerParams], opts: LayerOptions, mut inspect: impl FnMut(&[NodeState])) -> Result<Vec<NodeState>> {
    let edges = build_edges(c, k)?;
    let mut cur = states.to_vec();
    for layer in layers {
        cur = pdc_layer(&cur, &edges, layer, opts)?;
        inspect(&cur);
    }
    Ok(cur)
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivarianceReport {
    pub rule: VarianceRule,
    pub complexes: usize,
    pub motions: usize,
    pub max_h_deviation: f64,
    pub max_mean_deviation: f64,
    pub max_cov_deviation: f64,
    pub seconds: f64,
}

impl EquivarianceReport {
    pub fn max_deviation(&self) -> f64 {
        self.max_h_deviation.max(self.max_mean_deviation).max(self.max_cov_deviation)
    }
}

/// Compares a `layers`-deep stack on each complex with the stack on
/// `motions` rigidly moved copies; edges are rebuilt from the moved coordinates.
pub fn equivariance_suite(rule: VarianceRule, complexes: usize, motions: usize, layers: usize, seed: u64) -> Result<EquivarianceReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = LayerOptions { rule, ..Default::default() };
    let width = 16;
    let (mut dh, mut dm, mut dc) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..complexes {
        let (n_a, n_b) = (rng.random_range(6..=12), rng.random_range(6..=12));
        let c = synth::random_complex(&mut rng, n_a, n_b)?;
        let stack: Vec<PdcLayerParams> = (0..layers).map(|_| PdcLayerParams::random(width, &mut rng)).collect();
        let states = initial_states(&mut rng, &c, width);
        let base = run_layers(&states, &c, 6, &stack, opts, |_| {})?;
        for _ in 0..motions {
            let m = RigidMotion::random(&mut rng, 50.0);
            let moved: Vec<NodeState> = states.iter().map(|s| NodeState { h: s.h.clone(), pdc: m.apply_pdc(&s.pdc) }).collect();
            let out = run_layers(&moved, &c.transformed(&m), 6, &stack, opts, |_| {})?;
            for (o, b) in out.iter().zip(&base) {
                let want = m.apply_pdc(&b.pdc);
                dh = o.h.iter().zip(&b.h).map(|(x, y)| (x - y).abs()).fold(dh, f64::max);
                dm = dm.max((o.pdc.mean - want.mean).amax());
                dc = dc.max((o.pdc.cov - want.cov).amax());
            }
        }
    }
    Ok(EquivarianceReport {
        rule,
        complexes,
        motions,
        max_h_deviation: dh,
        max_mean_deviation: dm,
        max_cov_deviation: dc,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One PDC pair of the moments suite.
#[derive(Clone, Debug, Serialize)]
pub struct MomentCase {
    pub mc_mean: f64,
    pub mc_variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
    pub closed_mean: f64,
    pub standard_variance: f64,
    pub paper_literal_variance: f64,
    /// Standard errors between closed form and Monte Carlo.
    pub z_mean: f64,
    pub z_standard: f64,
    pub z_paper_literal: f64,
    pub z_perturbed: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentsReport {
    pub samples_per_pair: usize,
    pub tolerance_se: f64,
    pub cases: Vec<MomentCase>,
    pub standard_matches: bool,
    pub paper_literal_matches: bool,
    /// Whether a deliberately wrong variance (cross term with flipped sign) is rejected.
    pub perturbed_rejected: bool,
    pub seconds: f64,
}

/// Closed-form squared-distance moments versus `samples` Monte Carlo draws per pair.
pub fn moments_suite(pairs: usize, samples: usize, tolerance_se: f64, seed: u64) -> Result<MomentsReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let a = GaussianPdc::new(Vec3::from_fn(|_, _| rng.random_range(-4.0..4.0)), random_cov(&mut rng, 1.0))?;
        let b = GaussianPdc::new(Vec3::from_fn(|_, _| rng.random_range(-4.0..4.0)), random_cov(&mut rng, 1.0))?;
        let mc = mc_squared_distance_moments(&a, &b, samples, seed.wrapping_add(k as u64 + 1))?;
        let std = squared_distance_moments(&a, &b, MomentFormula::Standard);
        let lit = squared_distance_moments(&a, &b, MomentFormula::PaperLiteral);
        let s = a.cov + b.cov;
        let m = a.mean - b.mean;
        let perturbed = 2.0 * (s * s).trace() - 4.0 * (m.transpose() * s * m)[(0, 0)];
        let z = |v: f64| (v - mc.variance) / mc.variance_se;
        cases.push(MomentCase {
            mc_mean: mc.mean,
            mc_variance: mc.variance,
            mean_se: mc.mean_se,
            variance_se: mc.variance_se,
            closed_mean: std.mean,
            standard_variance: std.variance,
            paper_literal_variance: lit.variance,
            z_mean: (std.mean - mc.mean) / mc.mean_se,
            z_standard: z(std.variance),
            z_paper_literal: z(lit.variance),
            z_perturbed: z(perturbed),
        });
    }
    let within = |z: f64| z.abs() < tolerance_se;
    Ok(MomentsReport {
        samples_per_pair: samples,
        tolerance_se,
        standard_matches: cases.iter().all(|c| within(c.z_mean) && within(c.z_standard)),
        paper_literal_matches: cases.iter().all(|c| within(c.z_paper_literal)),
        perturbed_rejected: cases.iter().any(|c| !within(c.z_perturbed)),
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientPathReport {
    pub path: &'static str,
    pub instances: usize,
    pub parameters: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst_parameter: Option<String>,
    /// Analytic and numeric derivative of the worst entry.
    pub worst_values: Option<(f64, f64)>,
}

fn tiny_model(seed: u64) -> Result<ModelParams> {
    // a pooling map is present because pool_width differs from width
    ModelParams::init(ModelConfig { width: 26, pool_width: 6, knn: 4, ..Default::default() }, seed)
}

fn instance(rng: &mut ChaCha8Rng) -> Result<(Arc<Complex>, Vec<Mutation>)> {
    let c = synth::random_complex(rng, 6, 5)?;
    let i = rng.random_range(1..5);
    let r = c.residue(i);
    let mt = crate::structure::AminoAcid::ALL.into_iter().find(|&a| a != r.aa).expect("twenty types");
    Ok((Arc::new(c.clone()), vec![Mutation::new(r.aa, r.chain_id, r.seq_number, r.insertion_code, mt)?]))
}

/// Finite-difference check of `loss` with every model parameter as input.
fn check_path<F>(path: &'static str, instances: usize, seed: u64, per_param: usize, loss: F) -> Result<GradientPathReport>
where
    F: Fn(&mut Graph, &ModelParams, &Complex, &[Mutation]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, None, None);
    let (mut checked, mut parameters) = (0, 0);
    for _ in 0..instances {
        let params = tiny_model(rng.random())?;
        let (c, muts) = instance(&mut rng)?;
        let names: Vec<String> = params.store.names().cloned().collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| params.store.get(n).cloned()).collect::<Result<_>>()?;
        let f = |g: &mut Graph, vars: &[Var]| {
            g.bind_params(names.iter().cloned().zip(vars.iter().copied()));
            loss(g, &params, &c, &muts)
        };
        let rep = check_gradients(&inputs, f, FD_STEP, Some(per_param), &mut rng)?;
        checked += rep.checked;
        parameters = names.len();
        if rep.max_rel_error >= worst.0 {
            worst = (rep.max_rel_error, rep.worst.map(|w| names[w.0].clone()), rep.worst.map(|w| (w.2, w.3)));
        }
    }
    Ok(GradientPathReport { path, instances, parameters, entries_checked: checked, max_rel_error: worst.0, worst_parameter: worst.1, worst_values: worst.2 })
}

/// Gradient checks through the encoder, the refiner, the prediction head and
/// the learnable variance embedding, `instances` random cases each.
pub fn gradient_suite(instances: usize, per_param: usize, seed: u64) -> Result<Vec<GradientPathReport>> {
    let cfg = TrainConfig { k_recycles: 2, l: 1, r: 1, ..Default::default() };
    let encoder = |g: &mut Graph, p: &ModelParams, c: &Complex, _: &[Mutation]| {
        let ca = g.constant(model::ca_tensor(c)?);
        let s = model::encode_graph(g, p, c, &BTreeSet::from([1, 2]), ca, None)?;
        let a = g.sum(s.h);
        // displacement rather than absolute position keeps the loss small
        // enough for central differences to resolve
        let moved = g.sub(s.mu, ca)?;
        let b = g.sq_norm(moved);
        let cov = g.sq_norm(s.cov);
        let ab = g.add(a, b)?;
        g.add(ab, cov)
    };
    let refiner = |g: &mut Graph, p: &ModelParams, c: &Complex, muts: &[Mutation]| {
        let region = mmm::select_mask_region(c, muts, cfg.l, cfg.r)?;
        let corrupted = mmm::corrupt(&c.coords(), c, &region, cfg.corruption_mode(), 0)?;
        pipeline::refine_only_loss(g, p, c, &region, &corrupted, &cfg)
    };
    // finite differences see the mutant refinement, so the check needs it on the tape
    let full = TrainConfig { stop_gradient: false, ..cfg.clone() };
    let head = |g: &mut Graph, p: &ModelParams, c: &Complex, muts: &[Mutation]| {
        let sample = TrainSample { structure: "x".into(), complex: Arc::new(c.clone()), mutations: muts.to_vec(), ddg: 1.3, rmsf: None };
        Ok(pipeline::sample_loss_graph(g, p, &sample, &full, 0)?.total)
    };
    let variance = |g: &mut Graph, p: &ModelParams, c: &Complex, _: &[Mutation]| {
        let target: Vec<f64> = (0..c.len()).map(|i| 2.0 + 0.1 * i as f64).collect();
        pipeline::uncertainty_loss_graph(g, p, c, &target)
    };
    Ok(vec![
        check_path("encoder", instances, seed, per_param, encoder)?,
        check_path("refiner", instances, seed.wrapping_add(1), per_param, refiner)?,
        check_path("head", instances, seed.wrapping_add(2), per_param, head)?,
        check_path("variance_embedding", instances, seed.wrapping_add(3), per_param, variance)?,
    ])
}

#[derive(Clone, Debug, Serialize)]
pub struct PsdReport {
    pub rule: VarianceRule,
    pub layers: usize,
    /// Smallest eigenvalue of any covariance after any layer; the stack
    /// counts as PSD when it is at least `-1e-10·max(1, largest eigenvalue)`,
    /// the resolution of a double-precision eigendecomposition.
    pub min_eigenvalue: f64,
    /// Largest eigenvalue seen, for scale.
    pub max_eigenvalue: f64,
    pub psd: bool,
}

/// Deep stacks with randomly initialized, then jittered, weights on
/// shared inputs, tracking the smallest covariance eigenvalue.
/// `negate_sigma_update` runs the suite against a deliberately broken `Eq5` rule.
pub fn psd_suite(layers: usize, complexes: usize, seed: u64, negate_sigma_update: bool) -> Result<Vec<PsdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 12;
    let mut cases = Vec::new();
    for _ in 0..complexes {
        let c = synth::random_complex(&mut rng, 8, 8)?;
        let stack: Vec<PdcLayerParams> = (0..layers)
            .map(|_| {
                let mut p = PdcLayerParams::random(width, &mut rng);
                let names: Vec<String> = p.store.names().cloned().collect();
                for n in names {
                    if let Some(t) = p.store.get_mut(&n) {
                        t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
                    }
                }
                p
            })
            .collect();
        cases.push((c.clone(), initial_states(&mut rng, &c, width), stack));
    }
    [VarianceRule::Eq5, VarianceRule::AppendixVariant]
        .into_iter()
        .map(|rule| {
            let (mut min_eig, mut max_eig) = (f64::INFINITY, f64::NEG_INFINITY);
            for (c, states, stack) in &cases {
                let run = run_layers(states, c, 6, stack, LayerOptions { rule, negate_sigma_update, ..Default::default() }, |cur| {
                    for s in cur {
                        let e = SymmetricEigen::new(symmetrize(&s.pdc.cov)).eigenvalues;
                        min_eig = min_eig.min(e.min());
                        max_eig = max_eig.max(e.max());
                    }
                });
                // the next layer refuses a non-PSD input; the offending eigenvalue is already recorded
                match run {
                    Ok(_) | Err(Error::InvalidPdc(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(PsdReport { rule, layers, min_eigenvalue: min_eig, max_eigenvalue: max_eig, psd: min_eig >= -PSD_TOLERANCE * max_eig.max(1.0) })
        })
        .collect()
}

/// Chain A of a small complex with every atom of residue `k` placed at
/// `(xs[k], 0, 0)`, interpolated over `masked`; returns the x coordinates of
/// the masked rows when every atom of each row agrees on a point of the x axis.
fn interpolate_on_line(xs: &[f64], masked: &[usize]) -> Result<Vec<Option<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = synth::random_complex(&mut rng, xs.len(), 3)?;
    let mut coords = c.coords();
    for (row, &x) in coords.iter_mut().zip(xs) {
        for a in row.iter_mut().flatten() {
            *a = Vec3::new(x, 0.0, 0.0);
        }
    }
    let c = c.with_coords(&coords)?;
    let region = MaskRegion::from_indices(&c, masked.iter().copied().collect())?;
    let out = mmm::corrupt_interpolate(&coords, &c, &region)?;
    Ok(masked
        .iter()
        .map(|&i| {
            let first = out[i].iter().flatten().next().copied()?;
            let same = out[i].iter().flatten().all(|p| *p == first);
            (same && first.y == 0.0 && first.z == 0.0).then_some(first.x)
        })
        .collect())
}

/// Hand-computed linear initializations of masked residues: an interior
/// midpoint, even thirds, and one-sided extrapolation at either chain end.
/// Comparisons are exact.
pub fn interpolation_golden() -> Result<Vec<(&'static str, bool)>> {
    let nan = f64::NAN;
    let cases: [(&'static str, Vec<f64>, Vec<usize>, Vec<f64>); 4] = [
        ("midpoint between anchors", vec![0.0, nan, 2.0], vec![1], vec![1.0]),
        ("even thirds between anchors", vec![0.0, nan, nan, 3.0], vec![1, 2], vec![1.0, 2.0]),
        ("backward extrapolation at the N terminus", vec![nan, 0.0, 1.0], vec![0], vec![-1.0]),
        ("forward extrapolation at the C terminus", vec![-1.0, 0.0, nan], vec![2], vec![1.0]),
    ];
    cases
        .into_iter()
        .map(|(name, xs, masked, want)| {
            // masked rows start off the line so a pass cannot come from untouched input
            let xs: Vec<f64> = xs.iter().map(|x| if x.is_nan() { 7.5 } else { *x }).collect();
            let got = interpolate_on_line(&xs, &masked)?;
            Ok((name, got.iter().zip(&want).all(|(g, w)| *g == Some(*w))))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_equivariance_run() {
        for rule in [VarianceRule::Eq5, VarianceRule::AppendixVariant] {
            let r = equivariance_suite(rule, 2, 5, 2, 1).unwrap();
            assert!(r.max_deviation() < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn small_moments_run() {
        let r = moments_suite(3, 200_000, 4.0, 2).unwrap();
        assert!(r.standard_matches, "{r:?}");
        assert!(!r.paper_literal_matches);
        assert!(r.perturbed_rejected);
    }

    #[test]
    fn small_gradient_run() {
        for r in gradient_suite(1, 2, 3).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
            assert!(r.entries_checked > 0);
        }
    }

    #[test]
    fn small_psd_run() {
        for r in psd_suite(10, 2, 4, false).unwrap() {
            assert!(r.psd, "{r:?}");
        }
        assert!(interpolation_golden().unwrap().iter().all(|c| c.1));
        let broken = psd_suite(10, 2, 4, true).unwrap();
        assert!(!broken[0].psd, "{:?}", broken[0]);
    }
}
