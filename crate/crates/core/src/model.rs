//! Learnable weights and the differentiable forward passes of the encoder,
//! the coordinate refiner, pooling and the prediction head.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{Mat3, MomentFormula, Vec3};
use crate::mmm::MaskRegion;
use crate::pdc::{self, Adjacency, GraphState, LayerOptions, NodeState, VarianceRule};
use crate::structure::{backbone_frame, build_edges_from_points, fixed_features, BackboneAtom, BackboneCoords, Complex, FIXED_FEATURE_WIDTH, NUM_AMINO_ACIDS};

/// Where the initial covariances come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceInitKind {
    Identity,
    /// Per-residue RMSF values supplied with each structure.
    Rmsf,
    #[default]
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Node feature width of every layer.
    pub width: usize,
    /// Width of the pooled representation fed to the head; a linear map is
    /// inserted before pooling when it differs from `width`.
    pub pool_width: usize,
    pub encoder_layers: usize,
    pub refiner_layers: usize,
    pub knn: usize,
    pub variance_rule: VarianceRule,
    pub moment_formula: MomentFormula,
    pub variance_init: VarianceInitKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            pool_width: 32,
            encoder_layers: 1,
            refiner_layers: 2,
            knn: crate::structure::DEFAULT_KNN,
            variance_rule: VarianceRule::Eq5,
            moment_formula: MomentFormula::Standard,
            variance_init: VarianceInitKind::Learnable,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width <= FIXED_FEATURE_WIDTH {
            return Err(Error::Config(format!("width must exceed {FIXED_FEATURE_WIDTH}, got {}", self.width)));
        }
        if self.pool_width == 0 || self.knn == 0 || self.encoder_layers == 0 || self.refiner_layers == 0 {
            return Err(Error::Config("pool_width, knn and layer counts must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_options(&self) -> LayerOptions {
        LayerOptions { rule: self.variance_rule, formula: self.moment_formula, negate_sigma_update: false }
    }
}

pub const ENCODER_PREFIX: &str = "enc.";
pub const REFINER_PREFIX: &str = "ref.";
pub const HEAD_PREFIX: &str = "head.";
const TYPE_EMBEDDING: &str = "embed.aa";
const VARIANCE_EMBEDDING: &str = "var.aa";
const POOL_MAP: &str = "pool.w";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let embed = (0..NUM_AMINO_ACIDS * (w - FIXED_FEATURE_WIDTH))
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.1 * z
            })
            .collect();
        store.insert(TYPE_EMBEDDING, Tensor::matrix(NUM_AMINO_ACIDS, w - FIXED_FEATURE_WIDTH, embed)?);
        store.insert(VARIANCE_EMBEDDING, pdc::identity_variance_embedding());
        for k in 0..config.encoder_layers {
            pdc::init_layer_params(&mut store, &format!("{ENCODER_PREFIX}l{k}."), w, &mut rng);
        }
        for k in 0..config.refiner_layers {
            pdc::init_layer_params(&mut store, &format!("{REFINER_PREFIX}l{k}."), w, &mut rng);
        }
        if config.pool_width != w {
            let a = (6.0 / (w + config.pool_width) as f64).sqrt();
            let data = (0..w * config.pool_width).map(|_| rng.random_range(-a..a)).collect();
            store.insert(POOL_MAP, Tensor::matrix(w, config.pool_width, data)?);
        }
        let a = (6.0 / (2 * config.pool_width + 1) as f64).sqrt();
        let head = (0..2 * config.pool_width).map(|_| rng.random_range(-a..a)).collect();
        store.insert(format!("{HEAD_PREFIX}w"), Tensor::matrix(2 * config.pool_width, 1, head)?);
        store.insert(format!("{HEAD_PREFIX}b"), Tensor::zeros(&[1]));
        Ok(ModelParams { config, store })
    }

    /// Weights of layer `k` of the encoder (`enc.`) or refiner (`ref.`) as a standalone layer.
    pub fn layer(&self, prefix: &str, k: usize) -> Result<pdc::PdcLayerParams> {
        let full = format!("{prefix}l{k}.");
        let mut store = ParamStore::new();
        for (name, t) in self.store.iter().filter(|(n, _)| n.starts_with(&full)) {
            store.insert(&name[full.len()..], t.clone());
        }
        if store.is_empty() {
            return Err(Error::Config(format!("no layer {full}")));
        }
        Ok(pdc::PdcLayerParams { width: self.config.width, store })
    }

    pub fn to_json(&self, metadata: serde_json::Value) -> Result<String> {
        let mut meta = serde_json::json!({ "model_config": self.config });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), metadata) {
            m.extend(extra);
        }
        self.store.to_json(meta)
    }

    pub fn from_json(text: &str) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::from_json(text)?;
        let config: ModelConfig = serde_json::from_value(meta.get("model_config").cloned().ok_or_else(|| Error::Checkpoint("missing model_config".into()))?)?;
        let params = ModelParams { config, store };
        params.check_layout()?;
        Ok((params, meta))
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_json(metadata)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        ModelParams::from_json(&std::fs::read_to_string(path)?)
    }

    /// Confirms every tensor expected from the config is present with the right shape.
    fn check_layout(&self) -> Result<()> {
        self.config.validate()?;
        let fresh = ModelParams::init(self.config.clone(), 0)?;
        for (name, t) in fresh.store.iter() {
            let have = self.store.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter {name} has shape {:?}, expected {:?}", have.shape(), t.shape())));
            }
        }
        if !self.store.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(())
    }

    fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(name, self.store.get(name)?))
    }
}

static AXES: std::sync::LazyLock<[Arc<[usize]>; 3]> = std::sync::LazyLock::new(|| [vec![0].into(), vec![1].into(), vec![2].into()]);

/// For each frame axis `k`, the row-major `e_k e_kᵀ` of every residue, so that
/// `Σ_i = Σ_k d_ik e_k e_kᵀ` puts the learned diagonal in the residue's own
/// backbone frame and rotates with the structure. Residues without a frame
/// get `I/3` per axis, the isotropic mean of the diagonal.
fn frame_projectors(c: &Complex) -> Result<[Tensor; 3]> {
    let n = c.len();
    let mut out = [vec![0.0; n * 9], vec![0.0; n * 9], vec![0.0; n * 9]];
    for (i, r) in c.residues().iter().enumerate() {
        let frame = backbone_frame(&r.atoms);
        for (k, data) in out.iter_mut().enumerate() {
            let m = match frame {
                Some(f) => {
                    let e = f.column(k);
                    e * e.transpose()
                }
                None => Mat3::identity() / 3.0,
            };
            for a in 0..3 {
                for b in 0..3 {
                    data[i * 9 + 3 * a + b] = m[(a, b)];
                }
            }
        }
    }
    let [a, b, d] = out;
    Ok([Tensor::matrix(n, 9, a)?, Tensor::matrix(n, 9, b)?, Tensor::matrix(n, 9, d)?])
}

fn type_index(c: &Complex) -> Arc<[usize]> {
    c.residues().iter().map(|r| r.aa.index()).collect::<Vec<_>>().into()
}

/// Initial node features and covariances of a complex.
fn initial_state(g: &mut Graph, params: &ModelParams, c: &Complex, masked: &BTreeSet<usize>, ca: Var, rmsf: Option<&[f64]>) -> Result<GraphState> {
    let n = c.len();
    let fixed = fixed_features(&c.types(), &c.groups(), masked, &BTreeSet::new());
    let fixed = g.constant(Tensor::from_rows(&fixed)?);
    let types = type_index(c);
    let table = params.var(g, TYPE_EMBEDDING)?;
    let learned = g.gather_rows(table, &types)?;
    let h = g.concat(&[fixed, learned])?;
    let cov = match params.config.variance_init {
        VarianceInitKind::Identity | VarianceInitKind::Rmsf => {
            let strategy = match (params.config.variance_init, rmsf) {
                (VarianceInitKind::Rmsf, Some(v)) => pdc::VarianceInit::FromRmsf(v.to_vec()),
                (VarianceInitKind::Rmsf, None) => return Err(Error::Config("RMSF variance init needs per-residue RMSF values".into())),
                _ => pdc::VarianceInit::Identity,
            };
            let mats = pdc::init_variance(&strategy, &c.types())?;
            let data = mats.iter().flat_map(|m| m.transpose().iter().copied().collect::<Vec<_>>()).collect();
            g.constant(Tensor::matrix(n, 9, data)?)
        }
        VarianceInitKind::Learnable => {
            let table = params.var(g, VARIANCE_EMBEDDING)?;
            let raw = g.gather_rows(table, &types)?;
            let diag = g.softplus(raw);
            let mut cov: Option<Var> = None;
            for (k, proj) in frame_projectors(c)?.into_iter().enumerate() {
                let d = g.gather_cols(diag, &AXES[k])?;
                let p = g.constant(proj);
                let term = g.mul_col(p, d)?;
                cov = Some(match cov {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            cov.expect("three axes")
        }
    };
    Ok(GraphState { h, mu: ca, cov })
}

/// kNN adjacency of the current CA positions.
pub fn adjacency_for(g: &Graph, c: &Complex, ca: Var, k: usize) -> Result<Adjacency> {
    let points: Vec<Vec3> = g.value(ca).data().chunks(3).map(Vec3::from_column_slice).collect();
    let edges = build_edges_from_points(&points, &c.groups(), k)?;
    Adjacency::new(&edges, c.len())
}

/// Encoder pass given an adjacency built from `ca`.
pub fn encode_with_adjacency(
    g: &mut Graph,
    params: &ModelParams,
    c: &Complex,
    masked: &BTreeSet<usize>,
    ca: Var,
    adj: &Adjacency,
    rmsf: Option<&[f64]>,
) -> Result<GraphState> {
    let init = initial_state(g, params, c, masked, ca, rmsf)?;
    pdc::pdc_stack_graph(g, &params.store, ENCODER_PREFIX, params.config.encoder_layers, init, adj, params.config.layer_options())
}

/// Encoder pass on the complex with CA positions `ca` (`[n, 3]`).
pub fn encode_graph(g: &mut Graph, params: &ModelParams, c: &Complex, masked: &BTreeSet<usize>, ca: Var, rmsf: Option<&[f64]>) -> Result<GraphState> {
    let adj = adjacency_for(g, c, ca, params.config.knn)?;
    encode_with_adjacency(g, params, c, masked, ca, &adj, rmsf)
}

pub fn ca_tensor(c: &Complex) -> Result<Tensor> {
    Tensor::matrix(c.len(), 3, c.ca_positions().iter().flat_map(|p| p.iter().copied()).collect())
}

fn mask_columns(n: usize, region: &MaskRegion) -> Result<(Tensor, Tensor)> {
    let masked: Vec<f64> = (0..n).map(|i| if region.contains(i) { 1.0 } else { 0.0 }).collect();
    let kept = masked.iter().map(|m| 1.0 - m).collect();
    Ok((Tensor::matrix(n, 1, masked)?, Tensor::matrix(n, 1, kept)?))
}

/// `k` recycles of encode then refine; returns the final CA positions `[n, 3]`.
///
/// Each recycle rebuilds the neighbour graph from the current positions. The
/// refiner starts from the encoder's features and covariances with the
/// current CA positions as means, and only masked rows take its output means.
pub fn refine_graph(g: &mut Graph, params: &ModelParams, corrupted: &Complex, region: &MaskRegion, k: usize, rmsf: Option<&[f64]>) -> Result<Var> {
    if k == 0 {
        return Err(Error::Config("at least one recycle is required".into()));
    }
    let (masked, kept) = mask_columns(corrupted.len(), region)?;
    let masked = g.constant(masked);
    let kept = g.constant(kept);
    let mut ca = g.constant(ca_tensor(corrupted)?);
    for _ in 0..k {
        let adj = adjacency_for(g, corrupted, ca, params.config.knn)?;
        let enc = encode_with_adjacency(g, params, corrupted, region.indices(), ca, &adj, rmsf)?;
        let start = GraphState { h: enc.h, mu: ca, cov: enc.cov };
        let out = pdc::pdc_stack_graph(g, &params.store, REFINER_PREFIX, params.config.refiner_layers, start, &adj, params.config.layer_options())?;
        let moved = g.mul_col(out.mu, masked)?;
        let fixed = g.mul_col(ca, kept)?;
        ca = g.add(fixed, moved)?;
    }
    Ok(ca)
}

/// Backbone coordinates after moving every atom of a masked residue by its CA displacement.
pub fn displaced_coords(corrupted: &BackboneCoords, region: &MaskRegion, ca_start: &Tensor, ca_end: &Tensor) -> BackboneCoords {
    let mut out = corrupted.clone();
    for &i in region.indices() {
        let shift = Vec3::from_row_slice(ca_end.row(i)) - Vec3::from_row_slice(ca_start.row(i));
        for a in out[i].iter_mut().flatten() {
            *a += shift;
        }
    }
    out
}

/// Differentiable refinement loss for the atoms of `region` after moving them by the CA displacement.
pub fn refine_loss_graph(
    g: &mut Graph,
    corrupted: &BackboneCoords,
    truth: &BackboneCoords,
    region: &MaskRegion,
    ca_start: &Tensor,
    ca_end: Var,
    delta: f64,
) -> Result<Var> {
    let mut offsets = Vec::new();
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for &i in region.indices() {
        let pairs: Vec<(Vec3, Vec3)> = corrupted[i].iter().zip(&truth[i]).filter_map(|(p, t)| Some(((*p)?, (*t)?))).collect();
        if pairs.is_empty() {
            return Err(Error::Mask(format!("residue {i} has no comparable atoms")));
        }
        let w = 1.0 / (pairs.len() * region.len()) as f64;
        for (p, t) in pairs {
            offsets.extend((p - t).iter().copied());
            rows.push(i);
            weights.push(w);
        }
    }
    let a = rows.len();
    let start = g.constant(ca_start.clone());
    let shift = g.sub(ca_end, start)?;
    let rows: Arc<[usize]> = rows.into();
    let per_atom = g.gather_rows(shift, &rows)?;
    let offsets = g.constant(Tensor::matrix(a, 3, offsets)?);
    let residual = g.add(offsets, per_atom)?;
    let norms = g.row_norm(residual)?;
    let losses = g.huber(norms, delta);
    let weights = g.constant(Tensor::matrix(a, 1, weights)?);
    let weighted = g.mul_col(losses, weights)?;
    Ok(g.sum(weighted))
}

/// Column mean of `[n, w]` features after the optional pooling map; `[1, pool_width]`.
pub fn pool_graph(g: &mut Graph, params: &ModelParams, z: Var) -> Result<Var> {
    let z = if params.store.contains(POOL_MAP) {
        let w = params.var(g, POOL_MAP)?;
        g.matmul(z, w)?
    } else {
        z
    };
    let n = g.value(z).rows();
    let avg = g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    g.matmul(avg, z)
}

/// Linear head on `[H_wt ‖ H_mt]`; `[1, 1]`.
pub fn head_graph(g: &mut Graph, params: &ModelParams, wt: Var, mt: Var) -> Result<Var> {
    let x = g.concat(&[wt, mt])?;
    let w = params.var(g, &format!("{HEAD_PREFIX}w"))?;
    let b = params.var(g, &format!("{HEAD_PREFIX}b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Final node states of the encoder.
pub fn encode(c: &Complex, masked: &BTreeSet<usize>, params: &ModelParams, rmsf: Option<&[f64]>) -> Result<Vec<NodeState>> {
    let mut g = Graph::no_grad();
    let ca = g.constant(ca_tensor(c)?);
    let s = encode_graph(&mut g, params, c, masked, ca, rmsf)?;
    let h = g.value(s.h);
    Ok(pdc::tensors_to_pdcs(g.value(s.mu), g.value(s.cov))
        .into_iter()
        .enumerate()
        .map(|(i, pdc)| NodeState { h: h.row(i).to_vec(), pdc })
        .collect())
}

/// Refined backbone of `corrupted`; rows outside `region` are copied unchanged.
pub fn refine(corrupted: &Complex, region: &MaskRegion, params: &ModelParams, k: usize, rmsf: Option<&[f64]>) -> Result<BackboneCoords> {
    let mut g = Graph::no_grad();
    let ca = refine_graph(&mut g, params, corrupted, region, k, rmsf)?;
    Ok(displaced_coords(&corrupted.coords(), region, &ca_tensor(corrupted)?, g.value(ca)))
}

/// Column-wise mean of feature rows.
pub fn pool(z: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = z.first().ok_or_else(|| Error::Shape { op: "pool", detail: "no rows".into() })?;
    let mut out = vec![0.0; first.len()];
    for row in z {
        if row.len() != out.len() {
            return Err(Error::Shape { op: "pool", detail: "ragged rows".into() });
        }
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = z.len() as f64;
    Ok(out.into_iter().map(|v| v / n).collect())
}

/// CA coordinates of backbone rows.
pub fn ca_of(coords: &BackboneCoords) -> Vec<Vec3> {
    coords.iter().map(|r| r[BackboneAtom::CA.index()].expect("usable residue has CA")).collect()
}
