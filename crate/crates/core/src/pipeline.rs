//! Joint refinement and ΔΔG training, inference, masked-window pretraining
//! and the covariance-versus-RMSF auxiliary task.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics;
use crate::mmm::{self, CorruptionMode, MaskRegion};
use crate::model::{self, ModelConfig, ModelParams, HEAD_PREFIX};
use crate::structure::{interface_residues, mutant_types, Complex, Mutation};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Noise,
    #[default]
    Interpolate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k_recycles: usize,
    pub lambda: f64,
    /// Residues masked before each mutation site.
    pub l: usize,
    /// Residues masked after each mutation site.
    pub r: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub corruption: CorruptionKind,
    /// Per-axis noise std in Å for `noise` corruption.
    pub alpha: f64,
    pub huber_delta: f64,
    pub seed: u64,
    /// Iterations between validation passes; 0 disables validation.
    pub validation_every: usize,
    pub patience: usize,
    pub min_lr: f64,
    /// Run the mutant refinement without recording gradients.
    pub stop_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_recycles: 3,
            lambda: 1.0,
            l: mmm::DEFAULT_FLANK,
            r: mmm::DEFAULT_FLANK,
            lr: 1e-4,
            batch_size: 64,
            max_iterations: 1000,
            corruption: CorruptionKind::Interpolate,
            alpha: mmm::DEFAULT_NOISE_STD,
            huber_delta: mmm::DEFAULT_HUBER_DELTA,
            seed: 0,
            validation_every: 50,
            patience: 10,
            min_lr: 1e-6,
            stop_gradient: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_recycles == 0 {
            return Err(Error::Config("k_recycles must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.min_lr > 0.0 && self.huber_delta > 0.0 && self.alpha > 0.0) {
            return Err(Error::Config("lr, min_lr, huber_delta and alpha must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn corruption_mode(&self) -> CorruptionMode {
        match self.corruption {
            CorruptionKind::Noise => CorruptionMode::Noise(self.alpha),
            CorruptionKind::Interpolate => CorruptionMode::Interpolate,
        }
    }
}

/// Model and training settings as read from one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// One labelled mutation set on a loaded structure.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub structure: String,
    pub complex: Arc<Complex>,
    pub mutations: Vec<Mutation>,
    pub ddg: f64,
    pub rmsf: Option<Vec<f64>>,
}

/// Independent stream for (base seed, a, b), via the splitmix64 finalizer.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Forward {
    prediction: Var,
    loss_refine: Var,
    mutant_ca: Tensor,
    mutant: Complex,
    region: MaskRegion,
}

/// Builds the whole computation for one sample on `g`.
fn forward(g: &mut Graph, params: &ModelParams, wt: &Complex, muts: &[Mutation], rmsf: Option<&[f64]>, cfg: &TrainConfig, seed: u64) -> Result<Forward> {
    let k = cfg.k_recycles;
    let region = mmm::select_mask_region(wt, muts, cfg.l, cfg.r)?;
    let truth = wt.coords();
    let corrupted_coords = mmm::corrupt(&truth, wt, &region, cfg.corruption_mode(), seed)?;
    let corrupted = wt.with_coords(&corrupted_coords)?;
    let start = model::ca_tensor(&corrupted)?;

    let wt_ca = model::refine_graph(g, params, &corrupted, &region, k, rmsf)?;
    let loss_refine = model::refine_loss_graph(g, &corrupted_coords, &truth, &region, &start, wt_ca, cfg.huber_delta)?;

    let mutant = corrupted.with_types(&mutant_types(wt, muts)?)?;
    let mt_ca = if cfg.stop_gradient {
        g.with_no_grad(|g| model::refine_graph(g, params, &mutant, &region, k, rmsf))?
    } else {
        model::refine_graph(g, params, &mutant, &region, k, rmsf)?
    };

    let none = BTreeSet::new();
    let true_ca = g.constant(model::ca_tensor(wt)?);
    let z_wt = model::encode_graph(g, params, wt, &none, true_ca, rmsf)?;
    let z_mt = model::encode_graph(g, params, &mutant, &none, mt_ca, rmsf)?;
    let h_wt = model::pool_graph(g, params, z_wt.h)?;
    let h_mt = model::pool_graph(g, params, z_mt.h)?;
    let prediction = model::head_graph(g, params, h_wt, h_mt)?;
    let mutant_ca = g.value(mt_ca).clone();
    Ok(Forward { prediction, loss_refine, mutant_ca, mutant, region })
}

/// Losses of one sample or the mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub ddg: f64,
    pub refine: f64,
}

#[derive(Clone, Debug)]
pub struct SampleGradients {
    pub losses: StepLosses,
    pub prediction: f64,
    pub grads: Vec<(String, Tensor)>,
}

/// Graph nodes of one sample's losses and prediction.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub ddg: Var,
    pub refine: Var,
    pub prediction: Var,
}

/// Builds `(ŷ − y)² + λ·L_refine` for one sample on `g`.
pub fn sample_loss_graph(g: &mut Graph, params: &ModelParams, sample: &TrainSample, cfg: &TrainConfig, seed: u64) -> Result<SampleLoss> {
    let f = forward(g, params, &sample.complex, &sample.mutations, sample.rmsf.as_deref(), cfg, seed)?;
    let y = g.constant(Tensor::matrix(1, 1, vec![sample.ddg])?);
    let diff = g.sub(f.prediction, y)?;
    let sq = g.mul(diff, diff)?;
    let ddg = g.sum(sq);
    let weighted = g.scale(f.loss_refine, cfg.lambda);
    let total = g.add(ddg, weighted)?;
    Ok(SampleLoss { total, ddg, refine: f.loss_refine, prediction: f.prediction })
}

/// Loss and parameter gradients of a single sample.
pub fn sample_gradients(params: &ModelParams, sample: &TrainSample, cfg: &TrainConfig, seed: u64) -> Result<SampleGradients> {
    let mut g = Graph::new();
    let l = sample_loss_graph(&mut g, params, sample, cfg, seed)?;
    let ddg = g.value(l.ddg).item();
    let refine = g.value(l.refine).item();
    let prediction = g.value(l.prediction).item();
    g.backward(l.total)?;
    Ok(SampleGradients { losses: StepLosses { total: ddg + cfg.lambda * refine, ddg, refine }, prediction, grads: g.param_grads() })
}

/// Element-wise mean of per-sample gradient lists, in sample order.
fn mean_gradients(parts: &[Vec<(String, Tensor)>]) -> Vec<(String, Tensor)> {
    let mut acc: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
    for grads in parts {
        for (name, t) in grads {
            match acc.get_mut(name) {
                Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x += y),
                None => {
                    acc.insert(name.clone(), t.clone());
                }
            }
        }
    }
    let n = parts.len() as f64;
    acc.into_iter()
        .map(|(name, mut t)| {
            t.data_mut().iter_mut().for_each(|x| *x /= n);
            (name, t)
        })
        .collect()
}

fn mean_losses(ls: impl Iterator<Item = StepLosses>) -> StepLosses {
    let (mut acc, mut n) = (StepLosses::default(), 0.0);
    for l in ls {
        acc.total += l.total;
        acc.ddg += l.ddg;
        acc.refine += l.refine;
        n += 1.0;
    }
    StepLosses { total: acc.total / n, ddg: acc.ddg / n, refine: acc.refine / n }
}

/// One optimizer update on the mean gradient of `batch`.
///
/// Samples are evaluated in parallel; gradients are reduced in batch order so
/// the result does not depend on scheduling.
pub fn train_step(params: &mut ModelParams, adam: &mut Adam, batch: &[&TrainSample], cfg: &TrainConfig, iteration: u64) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Dataset("empty training batch".into()));
    }
    let results: Vec<SampleGradients> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_gradients(params, s, cfg, derive_seed(cfg.seed, iteration, i as u64)))
        .collect::<Result<_>>()?;
    let grads: Vec<_> = results.iter().map(|r| r.grads.clone()).collect();
    adam.step(&mut params.store, &mean_gradients(&grads));
    Ok(mean_losses(results.iter().map(|r| r.losses)))
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub ddg: f64,
    /// Mutant complex with the refined backbone in the mask region.
    pub refined_mutant: Complex,
    pub region: MaskRegion,
}

/// Predicted ΔΔG of `muts` on `wt`; noise corruption draws from `cfg.seed`.
pub fn predict_ddg(wt: &Complex, muts: &[Mutation], params: &ModelParams, cfg: &TrainConfig, rmsf: Option<&[f64]>) -> Result<Prediction> {
    let mut g = Graph::no_grad();
    let f = forward(&mut g, params, wt, muts, rmsf, cfg, cfg.seed)?;
    let start = model::ca_tensor(&f.mutant)?;
    let coords = model::displaced_coords(&f.mutant.coords(), &f.region, &start, &f.mutant_ca);
    Ok(Prediction { ddg: g.value(f.prediction).item(), refined_mutant: f.mutant.with_coords(&coords)?, region: f.region })
}

/// Mean ΔΔG squared error and losses over `samples` without updating anything.
pub fn evaluate_losses(params: &ModelParams, samples: &[TrainSample], cfg: &TrainConfig) -> Result<(StepLosses, Vec<f64>)> {
    let out: Vec<(StepLosses, f64)> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::no_grad();
            let f = forward(&mut g, params, &s.complex, &s.mutations, s.rmsf.as_deref(), cfg, cfg.seed)?;
            let pred = g.value(f.prediction).item();
            let refine = g.value(f.loss_refine).item();
            let ddg = (pred - s.ddg).powi(2);
            Ok((StepLosses { total: ddg + cfg.lambda * refine, ddg, refine }, pred))
        })
        .collect::<Result<_>>()?;
    Ok((mean_losses(out.iter().map(|o| o.0)), out.into_iter().map(|o| o.1).collect()))
}

/// Halves the learning rate after `patience` validations without improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler { lr, patience, min_lr, best: f64::INFINITY, stale: 0 }
    }

    /// Records a validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.lr = (self.lr * 0.5).max(self.min_lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_ddg: f64,
    pub loss_refine: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<LogRecord>,
    pub validation: Vec<(usize, f64)>,
}

/// Runs `cfg.max_iterations` steps over shuffled batches of `samples`,
/// writing one JSON record per step to `log` when given.
pub fn train(
    params: &mut ModelParams,
    samples: &[TrainSample],
    validation: Option<&[TrainSample]>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.patience, cfg.min_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX, 0));
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.max_iterations);
    let mut val_history = Vec::new();
    let bs = cfg.batch_size.min(samples.len());
    for it in 0..cfg.max_iterations {
        if order.len() < bs {
            let mut fresh: Vec<usize> = (0..samples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<&TrainSample> = order.drain(..bs).map(|i| &samples[i]).collect();
        let losses = train_step(params, &mut adam, &batch, cfg, it as u64)?;
        if !losses.total.is_finite() {
            return Err(Error::Config(format!("non-finite loss at iteration {it}")));
        }
        let rec = LogRecord { iteration: it + 1, loss_total: losses.total, loss_ddg: losses.ddg, loss_refine: losses.refine, lr: adam.config.lr };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        history.push(rec);
        if let Some(val) = validation.filter(|v| !v.is_empty() && cfg.validation_every > 0) {
            if (it + 1) % cfg.validation_every == 0 {
                let (v, _) = evaluate_losses(params, val, cfg)?;
                val_history.push((it + 1, v.ddg));
                let lr = sched.observe(v.ddg);
                if lr != adam.config.lr {
                    log::info!("iteration {}: learning rate reduced to {lr:e}", it + 1);
                    adam.set_lr(lr);
                }
            }
        }
    }
    Ok(TrainSummary { history, validation: val_history })
}

/// A structure for masked-window pretraining with the residues allowed as window centres.
#[derive(Clone, Debug)]
pub struct PretrainItem {
    pub complex: Arc<Complex>,
    /// Allowed seed residues; empty means every residue.
    pub centers: Vec<usize>,
}

const WINDOW_ATTEMPTS: usize = 20;

/// Random window for one structure: a chain, then a seed residue on it.
fn pretrain_window(item: &PretrainItem, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(MaskRegion, Vec<crate::structure::ResidueAtoms>)> {
    let c = &item.complex;
    let chains: Vec<std::ops::Range<usize>> = c.chains().map(|(_, r)| r).collect();
    let mut last_err = None;
    for _ in 0..WINDOW_ATTEMPTS {
        let candidates: Vec<usize> = if item.centers.is_empty() {
            chains[rng.random_range(0..chains.len())].clone().collect()
        } else {
            let chain = c.chain_range(item.centers[rng.random_range(0..item.centers.len())]);
            item.centers.iter().copied().filter(|i| chain.contains(i)).collect()
        };
        let center = candidates[rng.random_range(0..candidates.len())];
        let region = MaskRegion::from_indices(c, mmm::window(c, center, cfg.l, cfg.r))?;
        match mmm::corrupt(&c.coords(), c, &region, cfg.corruption_mode(), rng.random()) {
            Ok(coords) => return Ok((region, coords)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Mask("no usable window".into())))
}

/// Refinement loss of one masked window on `g`, without the ΔΔG branch.
pub fn refine_only_loss(g: &mut Graph, params: &ModelParams, c: &Complex, region: &MaskRegion, corrupted: &crate::structure::BackboneCoords, cfg: &TrainConfig) -> Result<Var> {
    let corrupted_c = c.with_coords(corrupted)?;
    let start = model::ca_tensor(&corrupted_c)?;
    let ca = model::refine_graph(g, params, &corrupted_c, region, cfg.k_recycles, None)?;
    model::refine_loss_graph(g, corrupted, &c.coords(), region, &start, ca, cfg.huber_delta)
}

/// One update of the encoder and refiner on random masked windows; returns the mean refinement loss.
pub fn mmm_pretrain_step(params: &mut ModelParams, adam: &mut Adam, items: &[PretrainItem], cfg: &TrainConfig, iteration: u64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Dataset("no pretraining structures".into()));
    }
    let results: Vec<(f64, Vec<(String, Tensor)>)> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, iteration, i as u64));
            let (region, corrupted) = pretrain_window(item, cfg, &mut rng)?;
            let mut g = Graph::new();
            let loss = refine_only_loss(&mut g, params, &item.complex, &region, &corrupted, cfg)?;
            let value = g.value(loss).item();
            g.backward(loss)?;
            let grads = g.param_grads().into_iter().filter(|(n, _)| !n.starts_with(HEAD_PREFIX) && !n.starts_with("pool.")).collect();
            Ok((value, grads))
        })
        .collect::<Result<_>>()?;
    let grads: Vec<_> = results.iter().map(|r| r.1.clone()).collect();
    adam.step(&mut params.store, &mean_gradients(&grads));
    Ok(results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64)
}

/// Mean masked CA error before and after refinement over fixed windows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub windows: usize,
    pub initial_ca_error: f64,
    pub refined_ca_error: f64,
}

/// Evaluates refinement on windows centred at each `(structure index, centre)` pair.
pub fn mmm_recovery(params: &ModelParams, items: &[PretrainItem], windows: &[(usize, usize)], cfg: &TrainConfig) -> Result<RecoveryReport> {
    if windows.is_empty() {
        return Err(Error::Mask("no evaluation windows".into()));
    }
    let errs: Vec<(f64, f64)> = windows
        .par_iter()
        .map(|&(s, center)| {
            let c = &items.get(s).ok_or_else(|| Error::Mask(format!("no structure {s}")))?.complex;
            let region = MaskRegion::from_indices(c, mmm::window(c, center, cfg.l, cfg.r))?;
            let truth = c.coords();
            let corrupted = mmm::corrupt(&truth, c, &region, cfg.corruption_mode(), derive_seed(cfg.seed, s as u64, center as u64))?;
            let refined = model::refine(&c.with_coords(&corrupted)?, &region, params, cfg.k_recycles, None)?;
            Ok((mmm::ca_error(&corrupted, &truth, &region), mmm::ca_error(&refined, &truth, &region)))
        })
        .collect::<Result<_>>()?;
    let n = errs.len() as f64;
    Ok(RecoveryReport {
        windows: errs.len(),
        initial_ca_error: errs.iter().map(|e| e.0).sum::<f64>() / n,
        refined_ca_error: errs.iter().map(|e| e.1).sum::<f64>() / n,
    })
}

/// Squared Frobenius norm of every encoder output covariance, `[n, 1]`.
fn sigma_norms(g: &mut Graph, params: &ModelParams, c: &Complex) -> Result<Var> {
    let ca = g.constant(model::ca_tensor(c)?);
    let state = model::encode_graph(g, params, c, &BTreeSet::new(), ca, None)?;
    let sq = g.mul(state.cov, state.cov)?;
    g.row_sum(sq)
}

/// Builds the covariance-norm regression loss on `g`.
pub fn uncertainty_loss_graph(g: &mut Graph, params: &ModelParams, c: &Complex, rmsf: &[f64]) -> Result<Var> {
    if rmsf.len() != c.len() {
        return Err(Error::Dataset(format!("{} RMSF values for {} residues", rmsf.len(), c.len())));
    }
    let norms = sigma_norms(g, params, c)?;
    let target = g.constant(Tensor::matrix(c.len(), 1, rmsf.to_vec())?);
    let diff = g.sub(norms, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Mean over residues of `(‖Σ_i‖_F² − RMSF_i)²`.
pub fn uncertainty_loss(params: &ModelParams, c: &Complex, rmsf: &[f64]) -> Result<f64> {
    let mut g = Graph::no_grad();
    let loss = uncertainty_loss_graph(&mut g, params, c, rmsf)?;
    Ok(g.value(loss).item())
}

/// Per-residue `‖Σ_i‖_F²` after the encoder.
pub fn sigma_sq_norms(params: &ModelParams, c: &Complex) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let v = sigma_norms(&mut g, params, c)?;
    Ok(g.value(v).data().to_vec())
}

/// One update fitting covariance norms to RMSF; returns the loss before the update.
pub fn uncertainty_train_step(params: &mut ModelParams, adam: &mut Adam, items: &[(Arc<Complex>, Vec<f64>)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Dataset("no structures with RMSF".into()));
    }
    let results: Vec<(f64, Vec<(String, Tensor)>)> = items
        .par_iter()
        .map(|(c, rmsf)| {
            let mut g = Graph::new();
            let loss = uncertainty_loss_graph(&mut g, params, c, rmsf)?;
            let v = g.value(loss).item();
            g.backward(loss)?;
            Ok((v, g.param_grads()))
        })
        .collect::<Result<_>>()?;
    let grads: Vec<_> = results.iter().map(|r| r.1.clone()).collect();
    adam.step(&mut params.store, &mean_gradients(&grads));
    Ok(results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GroupMeans {
    pub n: usize,
    pub mean_sigma_sq: f64,
    pub mean_rmsf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub n: usize,
    pub pearson: f64,
    pub interface: GroupMeans,
    pub non_interface: GroupMeans,
}

/// Compares learned covariance norms with RMSF overall and split by interface membership.
pub fn correlate_uncertainty(params: &ModelParams, c: &Complex, rmsf: &[f64], cutoff: f64) -> Result<UncertaintyReport> {
    if rmsf.len() != c.len() {
        return Err(Error::Dataset(format!("{} RMSF values for {} residues", rmsf.len(), c.len())));
    }
    let sigma = sigma_sq_norms(params, c)?;
    let pearson = metrics::pearson(&sigma, rmsf)?;
    let iface = interface_residues(c, cutoff);
    let means = |inside: bool| {
        let idx: Vec<usize> = (0..c.len()).filter(|i| iface.contains(i) == inside).collect();
        let n = idx.len();
        let avg = |v: &[f64]| if n == 0 { f64::NAN } else { idx.iter().map(|&i| v[i]).sum::<f64>() / n as f64 };
        GroupMeans { n, mean_sigma_sq: avg(&sigma), mean_rmsf: avg(rmsf) }
    };
    Ok(UncertaintyReport { n: c.len(), pearson, interface: means(true), non_interface: means(false) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::RigidMotion;
    use crate::structure::test_support::random_complex;
    use crate::structure::AminoAcid;

    fn small_model() -> ModelConfig {
        ModelConfig { width: 26, pool_width: 26, knn: 4, ..Default::default() }
    }

    fn cfg() -> TrainConfig {
        TrainConfig { k_recycles: 2, l: 2, r: 2, lr: 1e-3, batch_size: 2, ..Default::default() }
    }

    fn sample(seed: u64, ddg: f64) -> TrainSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_complex(&mut rng, 9, 8);
        let r = c.residue(4);
        let mt = if r.aa == AminoAcid::Trp { AminoAcid::Ala } else { AminoAcid::Trp };
        let m = Mutation::new(r.aa, r.chain_id, r.seq_number, r.insertion_code, mt).unwrap();
        TrainSample { structure: format!("s{seed}"), complex: Arc::new(c), mutations: vec![m], ddg, rmsf: None }
    }

    #[test]
    fn zero_lambda_total_equals_ddg() {
        let params = ModelParams::init(small_model(), 1).unwrap();
        let s = sample(1, 1.5);
        let out = sample_gradients(&params, &s, &TrainConfig { lambda: 0.0, ..cfg() }, 3).unwrap();
        assert_eq!(out.losses.total, out.losses.ddg);
        assert!(out.losses.refine > 0.0);
        let out = sample_gradients(&params, &s, &TrainConfig { lambda: 0.7, ..cfg() }, 3).unwrap();
        assert_eq!(out.losses.total, out.losses.ddg + 0.7 * out.losses.refine);
    }

    #[test]
    fn stop_gradient_blocks_refiner() {
        let params = ModelParams::init(small_model(), 2).unwrap();
        let s = sample(2, -0.8);
        let base = TrainConfig { lambda: 0.0, ..cfg() };
        let blocked = sample_gradients(&params, &s, &base, 5).unwrap();
        let refiner: Vec<_> = blocked.grads.iter().filter(|(n, _)| n.starts_with(model::REFINER_PREFIX)).collect();
        assert!(!refiner.is_empty());
        assert!(refiner.iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
        assert!(blocked.grads.iter().any(|(n, t)| n.starts_with(HEAD_PREFIX) && t.data().iter().any(|&x| x != 0.0)));

        let open = sample_gradients(&params, &s, &TrainConfig { stop_gradient: false, ..base }, 5).unwrap();
        assert!(open.grads.iter().any(|(n, t)| n.starts_with(model::REFINER_PREFIX) && t.data().iter().any(|&x| x != 0.0)));
        assert_eq!(open.prediction, blocked.prediction);
    }

    #[test]
    fn prediction_is_deterministic_and_invariant() {
        let params = ModelParams::init(small_model(), 3).unwrap();
        let s = sample(3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [CorruptionKind::Interpolate, CorruptionKind::Noise] {
            let c = TrainConfig { corruption: kind, ..cfg() };
            let a = predict_ddg(&s.complex, &s.mutations, &params, &c, None).unwrap();
            let b = predict_ddg(&s.complex, &s.mutations, &params, &c, None).unwrap();
            assert_eq!(a.ddg, b.ddg);
            for _ in 0..5 {
                let motion = RigidMotion::random(&mut rng, 30.0);
                let moved = predict_ddg(&s.complex.transformed(&motion), &s.mutations, &params, &c, None).unwrap();
                assert!((moved.ddg - a.ddg).abs() < 1e-9, "{kind:?}");
            }
            // unmasked coordinates are untouched
            for i in (0..s.complex.len()).filter(|i| !a.region.contains(*i)) {
                assert_eq!(a.refined_mutant.residue(i).atoms, s.complex.residue(i).atoms);
            }
        }
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let samples = vec![sample(4, 1.0), sample(5, -1.0)];
        let c = TrainConfig { max_iterations: 40, lr: 3e-3, ..cfg() };
        let run = || {
            let mut params = ModelParams::init(small_model(), 4).unwrap();
            let mut log = Vec::new();
            let summary = train(&mut params, &samples, None, &c, Some(&mut log)).unwrap();
            (summary.history, String::from_utf8(log).unwrap())
        };
        let (h1, log1) = run();
        let (h2, log2) = run();
        assert_eq!(h1, h2);
        assert_eq!(log1, log2);
        assert_eq!(log1.lines().count(), 40);
        let first: LogRecord = serde_json::from_str(log1.lines().next().unwrap()).unwrap();
        assert_eq!(first.iteration, 1);
        assert!(h1.last().unwrap().loss_total < h1[0].loss_total);
    }

    #[test]
    fn plateau_halving() {
        let mut s = PlateauScheduler::new(1e-3, 2, 3e-4);
        assert_eq!(s.observe(1.0), 1e-3);
        assert_eq!(s.observe(1.0), 1e-3);
        assert_eq!(s.observe(2.0), 1e-3);
        assert_eq!(s.observe(1.5), 5e-4);
        for _ in 0..3 {
            s.observe(9.0);
        }
        assert_eq!(s.lr, 3e-4);
        for _ in 0..10 {
            s.observe(9.0);
        }
        assert_eq!(s.lr, 3e-4);
    }

    #[test]
    fn pretrain_step_is_finite_and_skips_head() {
        let mut params = ModelParams::init(small_model(), 5).unwrap();
        let head_before = params.store.get("head.w").unwrap().clone();
        let items: Vec<PretrainItem> = (0..2)
            .map(|s| PretrainItem { complex: sample(10 + s, 0.0).complex, centers: Vec::new() })
            .collect();
        let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
        let loss = mmm_pretrain_step(&mut params, &mut adam, &items, &cfg(), 0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(params.store.get("head.w").unwrap(), &head_before);
    }

    #[test]
    fn uncertainty_loss_properties() {
        let params = ModelParams::init(small_model(), 6).unwrap();
        let s = sample(6, 0.0);
        let exact = sigma_sq_norms(&params, &s.complex).unwrap();
        assert!(uncertainty_loss(&params, &s.complex, &exact).unwrap() < 1e-20);
        let target: Vec<f64> = (0..s.complex.len()).map(|i| 1.0 + 0.1 * i as f64).collect();
        let base = uncertainty_loss(&params, &s.complex, &target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let moved = s.complex.transformed(&RigidMotion::random(&mut rng, 10.0));
            assert!((uncertainty_loss(&params, &moved, &target).unwrap() - base).abs() < 1e-9);
        }
        assert!(uncertainty_loss(&params, &s.complex, &target[1..]).is_err());
        assert!(correlate_uncertainty(&params, &s.complex, &vec![1.0; s.complex.len()], 8.0).is_err());
    }

    #[test]
    fn config_round_trip() {
        let text = r#"{"model": {"width": 30}, "train": {"lambda": 0.5, "corruption": "noise"}}"#;
        let rc: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(rc.model.width, 30);
        assert_eq!(rc.train.corruption_mode(), CorruptionMode::Noise(0.5));
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lamda": 1}}"#).is_err());
        assert!(TrainConfig { k_recycles: 0, ..Default::default() }.validate().is_err());
    }
}
