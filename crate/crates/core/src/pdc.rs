//! Message passing over Gaussian positional distributions.
//!
//! Every node carries invariant features `h`, a mean position `μ` and a full
//! 3×3 covariance `Σ`. A layer builds messages from the two endpoint features
//! and the moments of the squared distance between the endpoint distributions,
//! then updates `h` from the summed messages, `μ` from a weighted mean of
//! relative positions and `Σ` from a weighted mean of covariance sums.

use std::sync::{Arc, LazyLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{GaussianPdc, Mat3, MomentFormula, Vec3};
use crate::structure::{AminoAcid, EdgeSet, NUM_AMINO_ACIDS};

/// Covariance update rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRule {
    /// `Σ_i + mean_j (Σ_i + Σ_j)·φ_σ(m_ji)` with `φ_σ ≥ 0`.
    #[default]
    Eq5,
    /// `(1 + mean_j φ_μ)²·Σ_i + mean_j φ_μ·Σ_j`, then symmetrized and clamped to PSD.
    AppendixVariant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOptions {
    pub rule: VarianceRule,
    pub formula: MomentFormula,
    /// Fault injection for the verification suites: subtracts the `Eq5`
    /// covariance increment instead of adding it. Never set in a model config.
    #[serde(skip)]
    pub negate_sigma_update: bool,
}

const MLP_NAMES: [&str; 4] = ["phi_e", "phi_h", "phi_mu", "phi_sigma"];
const MLP_DEPTH: usize = 3;

/// Initial bias of the last `φ_σ` unit; softplus(−3) ≈ 0.05 keeps early covariance growth small.
const SIGMA_OUTPUT_BIAS: f64 = -3.0;
/// Output scale of the last `φ_μ` unit, so fresh layers barely move the means.
const MU_OUTPUT_GAIN: f64 = 1e-3;

fn mlp_dims(name: &str, width: usize) -> [usize; MLP_DEPTH + 1] {
    match name {
        "phi_e" => [2 * width + 2, width, width, width],
        "phi_h" => [2 * width, width, width, width],
        _ => [width, width, width, 1],
    }
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

/// Adds the weights of one layer (four 2-hidden-layer MLPs) under `prefix`.
pub fn init_layer_params<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) {
    for name in MLP_NAMES {
        let dims = mlp_dims(name, width);
        for k in 0..MLP_DEPTH {
            let last = k + 1 == MLP_DEPTH;
            let gain = if last && name == "phi_mu" { MU_OUTPUT_GAIN } else { 1.0 };
            store.insert(format!("{prefix}{name}.w{k}"), xavier(rng, dims[k], dims[k + 1], gain));
            let bias = if last && name == "phi_sigma" { SIGMA_OUTPUT_BIAS } else { 0.0 };
            store.insert(format!("{prefix}{name}.b{k}"), Tensor::full(&[dims[k + 1]], bias));
        }
    }
}

/// Weights of a single layer, keyed without prefix (`phi_e.w0`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct PdcLayerParams {
    pub width: usize,
    pub store: ParamStore,
}

impl PdcLayerParams {
    pub fn random<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        init_layer_params(&mut store, "", width, rng);
        PdcLayerParams { width, store }
    }

    pub fn zeros(width: usize) -> Self {
        let mut store = ParamStore::new();
        for name in MLP_NAMES {
            let dims = mlp_dims(name, width);
            for k in 0..MLP_DEPTH {
                store.insert(format!("{name}.w{k}"), Tensor::zeros(&[dims[k], dims[k + 1]]));
                store.insert(format!("{name}.b{k}"), Tensor::zeros(&[dims[k + 1]]));
            }
        }
        PdcLayerParams { width, store }
    }
}

/// Linear → SiLU → Linear → SiLU → Linear.
pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let mut y = x;
    for k in 0..MLP_DEPTH {
        let w = g.param(&format!("{prefix}.w{k}"), store.get(&format!("{prefix}.w{k}"))?);
        let b = g.param(&format!("{prefix}.b{k}"), store.get(&format!("{prefix}.b{k}"))?);
        let z = g.matmul(y, w)?;
        y = g.add_row(z, b)?;
        if k + 1 < MLP_DEPTH {
            y = g.silu(y);
        }
    }
    Ok(y)
}

/// Directed neighbour lists in gather/scatter form.
#[derive(Clone, Debug)]
pub struct Adjacency {
    n: usize,
    dst: Arc<[usize]>,
    src: Arc<[usize]>,
    inv_deg: Tensor,
    isolated: Tensor,
    connected: Tensor,
}

impl Adjacency {
    pub fn new(edges: &EdgeSet, n: usize) -> Result<Self> {
        let mut dst = Vec::with_capacity(edges.num_directed());
        let mut src = Vec::with_capacity(edges.num_directed());
        let mut deg = vec![0usize; n];
        for (i, j) in edges.all() {
            if i >= n || j >= n {
                return Err(Error::Structure(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            dst.push(i);
            src.push(j);
            deg[i] += 1;
        }
        let col = |f: &dyn Fn(usize) -> f64| Tensor::matrix(n, 1, deg.iter().map(|&d| f(d)).collect());
        Ok(Adjacency {
            n,
            dst: dst.into(),
            src: src.into(),
            inv_deg: col(&|d| if d > 0 { 1.0 / d as f64 } else { 0.0 })?,
            isolated: col(&|d| if d == 0 { 1.0 } else { 0.0 })?,
            connected: col(&|d| if d > 0 { 1.0 } else { 0.0 })?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.dst.len()
    }
}

/// Node states inside a graph: `h [n, w]`, `μ [n, 3]`, `Σ [n, 9]` (row-major 3×3).
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    pub h: Var,
    pub mu: Var,
    pub cov: Var,
}

fn cols(idx: &[usize]) -> Arc<[usize]> {
    idx.to_vec().into()
}

static TRACE_COLS: LazyLock<Arc<[usize]>> = LazyLock::new(|| cols(&[0, 4, 8]));
static OUTER_LEFT: LazyLock<Arc<[usize]>> = LazyLock::new(|| cols(&[0, 0, 0, 1, 1, 1, 2, 2, 2]));
static OUTER_RIGHT: LazyLock<Arc<[usize]>> = LazyLock::new(|| cols(&[0, 1, 2, 0, 1, 2, 0, 1, 2]));
static TRANSPOSE: LazyLock<Arc<[usize]>> = LazyLock::new(|| cols(&[0, 3, 6, 1, 4, 7, 2, 5, 8]));

/// Per-edge mean and variance of `‖x_i − x_j‖²`, each `[E, 1]`.
pub fn edge_distance_moments(g: &mut Graph, mu: Var, cov: Var, adj: &Adjacency, formula: MomentFormula) -> Result<(Var, Var)> {
    let (mi, mj) = (g.gather_rows(mu, &adj.dst)?, g.gather_rows(mu, &adj.src)?);
    let m = g.sub(mi, mj)?;
    let (si, sj) = (g.gather_rows(cov, &adj.dst)?, g.gather_rows(cov, &adj.src)?);
    let s = g.add(si, sj)?;

    let diag = g.gather_cols(s, &TRACE_COLS)?;
    let tr = g.row_sum(diag)?;
    let m2 = g.mul(m, m)?;
    let norm2 = g.row_sum(m2)?;
    let mean = g.add(tr, norm2)?;

    let (ml, mr) = (g.gather_cols(m, &OUTER_LEFT)?, g.gather_cols(m, &OUTER_RIGHT)?);
    let outer = g.mul(ml, mr)?;
    let weighted = g.mul(outer, s)?;
    let quad = g.row_sum(weighted)?;
    let spread = match formula {
        MomentFormula::PaperLiteral => g.scale(tr, 2.0),
        MomentFormula::Standard => {
            let st = g.gather_cols(s, &TRANSPOSE)?;
            let ss = g.mul(s, st)?;
            let tr_ss = g.row_sum(ss)?;
            g.scale(tr_ss, 2.0)
        }
    };
    let quad4 = g.scale(quad, 4.0);
    let variance = g.add(spread, quad4)?;
    Ok((mean, variance))
}

/// One message-passing layer with weights under `prefix`.
pub fn pdc_layer_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    state: &GraphState,
    adj: &Adjacency,
    opts: LayerOptions,
) -> Result<GraphState> {
    if adj.num_edges() == 0 {
        return Ok(*state);
    }
    let n = adj.n;
    let isolated = g.constant(adj.isolated.clone());
    let connected = g.constant(adj.connected.clone());
    let inv_deg = g.constant(adj.inv_deg.clone());

    let (mean_d, var_d) = edge_distance_moments(g, state.mu, state.cov, adj, opts.formula)?;
    let (lm, lv) = (g.log1p(mean_d)?, g.log1p(var_d)?);
    let (hi, hj) = (g.gather_rows(state.h, &adj.dst)?, g.gather_rows(state.h, &adj.src)?);
    let edge_in = g.concat(&[hi, hj, lm, lv])?;
    let msg = mlp(g, store, &format!("{prefix}phi_e"), edge_in)?;

    let agg = g.scatter_add_rows(msg, &adj.dst, n)?;
    let node_in = g.concat(&[state.h, agg])?;
    let h_upd = mlp(g, store, &format!("{prefix}phi_h"), node_in)?;
    let keep_h = g.mul_col(state.h, isolated)?;
    let new_h = g.mul_col(h_upd, connected)?;
    let h = g.add(keep_h, new_h)?;

    let w_mu = mlp(g, store, &format!("{prefix}phi_mu"), msg)?;
    let (mi, mj) = (g.gather_rows(state.mu, &adj.dst)?, g.gather_rows(state.mu, &adj.src)?);
    let rel = g.sub(mi, mj)?;
    let rel_w = g.mul_col(rel, w_mu)?;
    let shift = g.scatter_add_rows(rel_w, &adj.dst, n)?;
    let shift = g.mul_col(shift, inv_deg)?;
    let mu = g.add(state.mu, shift)?;

    let cov = match opts.rule {
        VarianceRule::Eq5 => {
            let raw = mlp(g, store, &format!("{prefix}phi_sigma"), msg)?;
            let w_sigma = g.softplus(raw);
            let (si, sj) = (g.gather_rows(state.cov, &adj.dst)?, g.gather_rows(state.cov, &adj.src)?);
            let s = g.add(si, sj)?;
            let sw = g.mul_col(s, w_sigma)?;
            let acc = g.scatter_add_rows(sw, &adj.dst, n)?;
            let acc = g.mul_col(acc, inv_deg)?;
            if opts.negate_sigma_update {
                g.sub(state.cov, acc)?
            } else {
                g.add(state.cov, acc)?
            }
        }
        VarianceRule::AppendixVariant => {
            let wsum = g.scatter_add_rows(w_mu, &adj.dst, n)?;
            let wmean = g.mul_col(wsum, inv_deg)?;
            let one_plus = g.shift(wmean, 1.0);
            let coef = g.mul(one_plus, one_plus)?;
            let own = g.mul_col(state.cov, coef)?;
            let sj = g.gather_rows(state.cov, &adj.src)?;
            let sjw = g.mul_col(sj, w_mu)?;
            let acc = g.scatter_add_rows(sjw, &adj.dst, n)?;
            let acc = g.mul_col(acc, inv_deg)?;
            let raw = g.add(own, acc)?;
            let clamped = g.psd_clamp(raw)?;
            let keep = g.mul_col(state.cov, isolated)?;
            let upd = g.mul_col(clamped, connected)?;
            g.add(keep, upd)?
        }
    };
    Ok(GraphState { h, mu, cov })
}

/// `n_layers` consecutive layers named `{prefix}l{k}.`.
pub fn pdc_stack_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    n_layers: usize,
    state: GraphState,
    adj: &Adjacency,
    opts: LayerOptions,
) -> Result<GraphState> {
    let mut s = state;
    for k in 0..n_layers {
        s = pdc_layer_graph(g, store, &format!("{prefix}l{k}."), &s, adj, opts)?;
    }
    Ok(s)
}

/// Per-residue invariant features paired with a positional distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub h: Vec<f64>,
    pub pdc: GaussianPdc,
}

pub(crate) fn pdcs_to_tensors(pdcs: impl Iterator<Item = GaussianPdc>) -> (Vec<f64>, Vec<f64>) {
    let (mut mu, mut cov) = (Vec::new(), Vec::new());
    for p in pdcs {
        mu.extend(p.mean.iter());
        for i in 0..3 {
            for j in 0..3 {
                cov.push(p.cov[(i, j)]);
            }
        }
    }
    (mu, cov)
}

pub(crate) fn tensors_to_pdcs(mu: &Tensor, cov: &Tensor) -> Vec<GaussianPdc> {
    (0..mu.rows())
        .map(|i| GaussianPdc { mean: Vec3::from_row_slice(mu.row(i)), cov: Mat3::from_row_slice(cov.row(i)) })
        .collect()
}

fn states_to_graph(g: &mut Graph, states: &[NodeState]) -> Result<GraphState> {
    let n = states.len();
    let w = states.first().map(|s| s.h.len()).unwrap_or(0);
    let h = Tensor::matrix(n, w, states.iter().flat_map(|s| s.h.iter().copied()).collect())?;
    let (mu, cov) = pdcs_to_tensors(states.iter().map(|s| s.pdc));
    Ok(GraphState { h: g.constant(h), mu: g.constant(Tensor::matrix(n, 3, mu)?), cov: g.constant(Tensor::matrix(n, 9, cov)?) })
}

fn graph_to_states(g: &Graph, s: &GraphState) -> Vec<NodeState> {
    let h = g.value(s.h);
    tensors_to_pdcs(g.value(s.mu), g.value(s.cov))
        .into_iter()
        .enumerate()
        .map(|(i, pdc)| NodeState { h: h.row(i).to_vec(), pdc })
        .collect()
}

/// Applies one layer to explicit node states.
pub fn pdc_layer(states: &[NodeState], edges: &EdgeSet, params: &PdcLayerParams, opts: LayerOptions) -> Result<Vec<NodeState>> {
    pdc_stack(states, edges, std::slice::from_ref(params), opts)
}

/// Applies layers in order to explicit node states.
pub fn pdc_stack(states: &[NodeState], edges: &EdgeSet, layers: &[PdcLayerParams], opts: LayerOptions) -> Result<Vec<NodeState>> {
    for s in states {
        s.pdc.validate()?;
        if let Some(l) = layers.first() {
            if s.h.len() != l.width {
                return Err(Error::Shape { op: "pdc_layer", detail: format!("feature width {} vs layer width {}", s.h.len(), l.width) });
            }
        }
    }
    let adj = Adjacency::new(edges, states.len())?;
    let mut current = states.to_vec();
    // one graph per layer: the layers share parameter names
    for l in layers {
        let mut g = Graph::no_grad();
        let s = states_to_graph(&mut g, &current)?;
        let s = pdc_layer_graph(&mut g, &l.store, "", &s, &adj, opts)?;
        current = graph_to_states(&g, &s);
    }
    Ok(current)
}

/// Covariance initialization strategy.
#[derive(Clone, Debug, PartialEq)]
pub enum VarianceInit {
    Identity,
    /// Per-residue fluctuation in Å; realized as `rmsf²·I`.
    FromRmsf(Vec<f64>),
    /// `[20, 3]` pre-softplus diagonal entries indexed by residue type, along
    /// the axes of each residue's backbone frame.
    Learnable(Tensor),
}

pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Embedding table whose realized covariances all start at the identity.
pub fn identity_variance_embedding() -> Tensor {
    Tensor::full(&[NUM_AMINO_ACIDS, 3], softplus_inverse(1.0))
}

/// Initial covariance of each residue. `Learnable` entries are the diagonal
/// in the residue's own backbone frame; the model rotates them into place.
pub fn init_variance(strategy: &VarianceInit, types: &[AminoAcid]) -> Result<Vec<Mat3>> {
    match strategy {
        VarianceInit::Identity => Ok(vec![Mat3::identity(); types.len()]),
        VarianceInit::FromRmsf(values) => {
            if values.len() != types.len() {
                return Err(Error::Config(format!("{} RMSF values for {} residues", values.len(), types.len())));
            }
            if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::Config(format!("RMSF value {v} is negative")));
            }
            Ok(values.iter().map(|r| Mat3::identity() * (r * r)).collect())
        }
        VarianceInit::Learnable(table) => {
            if table.shape() != [NUM_AMINO_ACIDS, 3] {
                return Err(Error::Shape { op: "init_variance", detail: format!("embedding shape {:?}", table.shape()) });
            }
            let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
            Ok(types.iter().map(|aa| Mat3::from_diagonal(&Vec3::from_iterator(table.row(aa.index()).iter().map(|&x| sp(x))))).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, FD_STEP};
    use crate::geom::{min_eigenvalue, squared_distance_moments, RigidMotion, PSD_TOLERANCE};
    use crate::structure::{build_edges_from_points, Group};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_states(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Vec<NodeState> {
        (0..n)
            .map(|_| {
                let a = Mat3::from_fn(|_, _| rng.random_range(-0.7..0.7));
                NodeState {
                    h: (0..w).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    pdc: GaussianPdc { mean: Vec3::from_fn(|_, _| rng.random_range(-6.0..6.0)), cov: a * a.transpose() },
                }
            })
            .collect()
    }

    fn knn(states: &[NodeState], k: usize) -> EdgeSet {
        let pts: Vec<Vec3> = states.iter().map(|s| s.pdc.mean).collect();
        let groups: Vec<Group> = (0..pts.len()).map(|i| if i % 2 == 0 { Group::Ligand } else { Group::Receptor }).collect();
        build_edges_from_points(&pts, &groups, k).unwrap()
    }

    #[test]
    fn zeroed_weights_follow_hand_evaluation() {
        let w = 4;
        let states = vec![
            NodeState { h: vec![0.3; w], pdc: GaussianPdc::isotropic(Vec3::zeros(), 1.0) },
            NodeState { h: vec![-0.2; w], pdc: GaussianPdc::isotropic(Vec3::new(2.0, 0.0, 0.0), 1.0) },
        ];
        let edges = EdgeSet { cross_lr: vec![(0, 1), (1, 0)], ..Default::default() };
        let out = pdc_layer(&states, &edges, &PdcLayerParams::zeros(w), LayerOptions::default()).unwrap();
        let expected = 1.0 + 2.0 * std::f64::consts::LN_2;
        for (s, o) in states.iter().zip(&out) {
            assert_eq!(o.pdc.mean, s.pdc.mean);
            assert!((o.pdc.cov - Mat3::identity() * expected).abs().max() < 1e-12);
        }
        assert!((expected - 2.386).abs() < 1e-3);
    }

    #[test]
    fn isolated_node_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = random_states(&mut rng, 1, 6);
        let params = PdcLayerParams::random(6, &mut rng);
        for rule in [VarianceRule::Eq5, VarianceRule::AppendixVariant] {
            let out = pdc_layer(&states, &EdgeSet::default(), &params, LayerOptions { rule, ..Default::default() }).unwrap();
            assert_eq!(out, states);
        }
        // isolated node next to a connected pair
        let mut three = random_states(&mut rng, 3, 6);
        three[2].pdc.mean += Vec3::new(100.0, 0.0, 0.0);
        let edges = EdgeSet { internal_l: vec![(0, 1), (1, 0)], ..Default::default() };
        for rule in [VarianceRule::Eq5, VarianceRule::AppendixVariant] {
            let out = pdc_layer(&three, &edges, &params, LayerOptions { rule, ..Default::default() }).unwrap();
            assert_eq!(out[2], three[2]);
        }
    }

    #[test]
    fn graph_moments_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states = random_states(&mut rng, 6, 2);
        let edges = knn(&states, 3);
        let adj = Adjacency::new(&edges, states.len()).unwrap();
        for formula in [MomentFormula::Standard, MomentFormula::PaperLiteral] {
            let mut g = Graph::no_grad();
            let s = states_to_graph(&mut g, &states).unwrap();
            let (m, v) = edge_distance_moments(&mut g, s.mu, s.cov, &adj, formula).unwrap();
            for (k, (i, j)) in edges.all().enumerate() {
                let closed = squared_distance_moments(&states[i].pdc, &states[j].pdc, formula);
                assert!((g.value(m).data()[k] - closed.mean).abs() < 1e-10);
                assert!((g.value(v).data()[k] - closed.variance).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = 8;
        let states = random_states(&mut rng, 10, w);
        let edges = knn(&states, 4);
        let params = PdcLayerParams::random(w, &mut rng);
        for rule in [VarianceRule::Eq5, VarianceRule::AppendixVariant] {
            let opts = LayerOptions { rule, ..Default::default() };
            let base = pdc_layer(&states, &edges, &params, opts).unwrap();
            for _ in 0..100 {
                let motion = RigidMotion::random(&mut rng, 20.0);
                let moved: Vec<NodeState> = states.iter().map(|s| NodeState { h: s.h.clone(), pdc: motion.apply_pdc(&s.pdc) }).collect();
                let out = pdc_layer(&moved, &edges, &params, opts).unwrap();
                for (o, b) in out.iter().zip(&base) {
                    let expect = motion.apply_pdc(&b.pdc);
                    assert!((o.pdc.mean - expect.mean).abs().max() < 1e-9);
                    assert!((o.pdc.cov - expect.cov).abs().max() < 1e-9);
                    assert!(o.h.iter().zip(&b.h).all(|(x, y)| (x - y).abs() < 1e-9));
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states = random_states(&mut rng, 7, 5);
        let edges = knn(&states, 3);
        let params = PdcLayerParams::random(5, &mut rng);
        let base = pdc_layer(&states, &edges, &params, LayerOptions::default()).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let permuted: Vec<NodeState> = perm.iter().map(|&p| states[p].clone()).collect();
        let mut inv = [0; 7];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let map = |(i, j): (usize, usize)| (inv[i], inv[j]);
        let pedges = EdgeSet {
            internal_l: edges.internal_l.iter().copied().map(map).collect(),
            internal_r: edges.internal_r.iter().copied().map(map).collect(),
            cross_lr: edges.cross_lr.iter().copied().map(map).collect(),
        };
        let out = pdc_layer(&permuted, &pedges, &params, LayerOptions::default()).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((out[new].pdc.mean - base[old].pdc.mean).abs().max() < 1e-12);
            assert!((out[new].pdc.cov - base[old].pdc.cov).abs().max() < 1e-12);
            assert!(out[new].h.iter().zip(&base[old].h).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn eq5_stack_stays_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states = random_states(&mut rng, 12, 6);
        let edges = knn(&states, 4);
        let layers: Vec<_> = (0..10).map(|_| PdcLayerParams::random(6, &mut rng)).collect();
        let out = pdc_stack(&states, &edges, &layers, LayerOptions::default()).unwrap();
        for s in out {
            assert!(min_eigenvalue(&s.pdc.cov) >= -PSD_TOLERANCE);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = 4;
        for rule in [VarianceRule::Eq5, VarianceRule::AppendixVariant] {
            let states = random_states(&mut rng, 5, w);
            let edges = knn(&states, 2);
            let adj = Adjacency::new(&edges, 5).unwrap();
            let params = PdcLayerParams::random(w, &mut rng);
            let names: Vec<String> = params.store.names().cloned().collect();
            let mut inputs: Vec<Tensor> = names.iter().map(|n| params.store.get(n).unwrap().clone()).collect();
            let (mu, cov) = pdcs_to_tensors(states.iter().map(|s| s.pdc));
            inputs.push(Tensor::matrix(5, 3, mu).unwrap());
            let h = Tensor::matrix(5, w, states.iter().flat_map(|s| s.h.clone()).collect()).unwrap();
            let cov = Tensor::matrix(5, 9, cov).unwrap();
            let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
                let st = GraphState { h: g.constant(h.clone()), mu: vars[names.len()], cov: g.constant(cov.clone()) };
                let out = pdc_layer_graph_with(g, &names, vars, &st, &adj, LayerOptions { rule, ..Default::default() })?;
                let a = g.sum(out.h);
                let b = g.sq_norm(out.mu);
                let c = g.sq_norm(out.cov);
                let ab = g.add(a, b)?;
                g.add(ab, c)
            };
            let rep = check_gradients(&inputs, f, FD_STEP, Some(6), &mut rng).unwrap();
            assert!(rep.max_rel_error < 1e-4, "{rule:?}: {rep:?}");
        }
    }

    /// Layer evaluation whose weights are the given graph variables.
    fn pdc_layer_graph_with(g: &mut Graph, names: &[String], vars: &[Var], st: &GraphState, adj: &Adjacency, opts: LayerOptions) -> Result<GraphState> {
        let mut store = ParamStore::new();
        for (k, n) in names.iter().enumerate() {
            store.insert(n.clone(), g.value(vars[k]).clone());
        }
        g.bind_params(names.iter().cloned().zip(vars.iter().copied()));
        pdc_layer_graph(g, &store, "", st, adj, opts)
    }

    #[test]
    fn variance_init_strategies() {
        let types = [AminoAcid::Ala, AminoAcid::Gly, AminoAcid::Ala];
        assert!(init_variance(&VarianceInit::Identity, &types).unwrap().iter().all(|m| *m == Mat3::identity()));
        let r = init_variance(&VarianceInit::FromRmsf(vec![0.0, 2.0, 1.0]), &types).unwrap();
        assert_eq!(r[0], Mat3::zeros());
        assert_eq!(r[1], Mat3::identity() * 4.0);
        assert!(init_variance(&VarianceInit::FromRmsf(vec![1.0]), &types).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = Tensor::matrix(20, 3, (0..60).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let l = init_variance(&VarianceInit::Learnable(table), &types).unwrap();
        assert_eq!(l[0], l[2]);
        assert!(l.iter().all(|m| m.diagonal().iter().all(|&d| d > 0.0)));
        let id = init_variance(&VarianceInit::Learnable(identity_variance_embedding()), &types).unwrap();
        assert!(id.iter().all(|m| (m - Mat3::identity()).abs().max() < 1e-15));
    }
}
