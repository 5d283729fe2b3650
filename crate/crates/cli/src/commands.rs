use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pdc_refine::autodiff::{Adam, AdamConfig};
use pdc_refine::io::{self, DatasetEntry, RmsfTable};
use pdc_refine::metrics::{self, EvalRecord};
use pdc_refine::mmm::{self, CorruptionMode};
use pdc_refine::model::{ModelConfig, ModelParams, VarianceInitKind};
use pdc_refine::pipeline::{self, CorruptionKind, PretrainItem, TrainConfig};
use pdc_refine::structure::Complex;
use pdc_refine::synth;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{CliConfig, DataConfig, OutputConfig};
use crate::data::{self, Checkpoint};
use crate::error::{CliError, CliResult, Context};
use crate::{CorrelateArgs, CorruptionArg, EvalArgs, MaskInitArgs, PredictArgs, PretrainArgs, SynthArgs, TrainArgs, TrainUncertaintyArgs};

fn open_log(path: Option<&Path>) -> CliResult<Option<BufWriter<File>>> {
    let Some(p) = path else { return Ok(None) };
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).ctx(format!("creating {}", dir.display()))?;
    }
    Ok(Some(BufWriter::new(File::create(p).ctx(format!("creating log {}", p.display()))?)))
}

/// Fresh parameters from `model`, or those of `init` when given.
fn initial_params(model: &ModelConfig, seed: u64, init: Option<&Path>) -> CliResult<ModelParams> {
    match init {
        Some(p) => {
            let ck = data::load_checkpoint(p)?;
            if &ck.params.config != model {
                log::warn!("{}: using the checkpoint's model settings instead of the config's", p.display());
            }
            Ok(ck.params)
        }
        None => Ok(ModelParams::init(model.clone(), seed)?),
    }
}

/// Loads a run config and applies the shared command-line overrides.
fn run_config(path: &Path, overrides: &crate::Overrides, fold: Option<usize>, out: &Option<PathBuf>, log: &Option<PathBuf>) -> CliResult<CliConfig> {
    let mut cfg = CliConfig::load(path)?;
    cfg.apply(overrides);
    if let Some(f) = fold {
        cfg.data.fold = f;
    }
    if out.is_some() {
        cfg.output.checkpoint.clone_from(out);
    }
    if log.is_some() {
        cfg.output.log.clone_from(log);
    }
    cfg.validate()?;
    if cfg.model.variance_init == VarianceInitKind::Rmsf && cfg.data.rmsf_dir.is_none() {
        return Err(CliError::usage("variance_init \"rmsf\" needs data.rmsf_dir or --rmsf-dir"));
    }
    Ok(cfg)
}

fn checkpoint_path(cfg: &CliConfig) -> CliResult<PathBuf> {
    cfg.output.checkpoint.clone().ok_or_else(|| CliError::usage("no checkpoint path (set output.checkpoint or pass --out)"))
}

fn select<'a>(entries: &'a [DatasetEntry], structures: &BTreeSet<String>) -> Vec<&'a DatasetEntry> {
    entries.iter().filter(|e| structures.contains(&e.pdb)).collect()
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = run_config(&a.config, &a.overrides, a.fold, &a.out, &a.log)?;
    let out = checkpoint_path(&cfg)?;
    let entries = data::load_dataset(cfg.dataset()?)?;
    let d = &cfg.data;
    let (train_s, val_s) = data::split_train_validation(&entries, d.n_folds, d.fold, d.fold_seed, d.validation_fraction)?;
    let dir = cfg.structures_dir()?;
    let samples = data::load_samples(&select(&entries, &train_s), &dir, d.rmsf_dir.as_deref())?;
    let validation = data::load_samples(&select(&entries, &val_s), &dir, d.rmsf_dir.as_deref())?;
    log::info!("{} training samples on {} structures, {} validation samples", samples.len(), train_s.len(), validation.len());

    let mut params = initial_params(&cfg.model, cfg.train.seed, a.init.as_deref())?;
    let mut log = open_log(cfg.output.log.as_deref())?;
    let val = (!validation.is_empty()).then_some(validation.as_slice());
    let summary = pipeline::train(&mut params, &samples, val, &cfg.train, log.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    let last = summary.history.last().copied();
    let meta = json!({
        "train_config": cfg.train,
        "data": {
            "n_folds": d.n_folds,
            "fold": d.fold,
            "fold_seed": d.fold_seed,
            "structures": std::fs::canonicalize(&dir).unwrap_or_else(|_| dir.clone()),
            "train_structures": train_s,
            "validation_structures": val_s,
        },
        "final": last,
        "validation": summary.validation,
    });
    params.save(&out, meta).ctx(format!("writing checkpoint {}", out.display()))?;
    if let Some(r) = last {
        println!(
            "trained {} iterations on {} samples: loss {:.6} (ddG {:.6}, refine {:.6}), lr {:e}",
            r.iteration,
            samples.len(),
            r.loss_total,
            r.loss_ddg,
            r.loss_refine,
            r.lr
        );
    }
    if let Some((it, v)) = summary.validation.last() {
        println!("validation ddG loss at iteration {it}: {v:.6}");
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn with_seed(ck: &Checkpoint, seed: Option<u64>) -> TrainConfig {
    let mut t = ck.train.clone();
    if let Some(s) = seed {
        t.seed = s;
    }
    t
}

pub fn predict(a: PredictArgs) -> CliResult<()> {
    let ck = data::load_checkpoint(&a.ckpt)?;
    let cfg = with_seed(&ck, a.seed);
    let groups = data::chain_groups(&a.structure.ligand_chains, &a.structure.receptor_chains)?;
    let c = data::load_complex(&a.structure.pdb, &groups)?;
    let muts = io::parse_mutation(&a.mutations)?;
    let rmsf = a.rmsf.as_deref().map(|p| data::load_rmsf_for(p, &c)).transpose()?;
    let pred = pipeline::predict_ddg(&c, &muts, &ck.params, &cfg, rmsf.as_deref())?;
    println!("{:.6} kcal/mol", pred.ddg);
    if let Some(p) = &a.out_pdb {
        data::write(p, &io::serialize_pdb(&pred.refined_mutant))?;
        log::info!("refined mutant written to {}", p.display());
    }
    Ok(())
}

fn stored_usize(meta: &serde_json::Value, key: &str) -> Option<usize> {
    meta.get("data")?.get(key)?.as_u64().map(|v| v as usize)
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let ck = data::load_checkpoint(&a.ckpt)?;
    let cfg = with_seed(&ck, a.seed);
    let entries = data::load_dataset(&a.dataset)?;
    let selected: Vec<&DatasetEntry> = match a.fold {
        Some(f) => {
            let n_folds = a.n_folds.or(stored_usize(&ck.meta, "n_folds")).unwrap_or(DataConfig::default().n_folds);
            let fold_seed = a.fold_seed.or(stored_usize(&ck.meta, "fold_seed").map(|v| v as u64)).unwrap_or(0);
            select(&entries, &data::fold_structures(&entries, n_folds, f, fold_seed)?)
        }
        None => entries.iter().collect(),
    };
    if selected.len() < 2 {
        return Err(CliError::data(format!("{} entries selected; at least 2 are needed for metrics", selected.len())));
    }
    let stored = ck.meta.get("data").and_then(|d| d.get("structures")).and_then(|v| v.as_str()).map(PathBuf::from).filter(|p| p.is_dir());
    let dir = a.structures.clone().or(stored).unwrap_or_else(|| a.dataset.parent().unwrap_or(Path::new(".")).to_path_buf());
    let samples = data::load_samples(&selected, &dir, a.rmsf_dir.as_deref())?;
    let (_, preds) = pipeline::evaluate_losses(&ck.params, &samples, &cfg)?;
    let records: Vec<EvalRecord> = samples.iter().zip(&preds).map(|(s, &p)| EvalRecord { structure: s.structure.clone(), y_true: s.ddg, y_pred: p }).collect();
    let report = metrics::evaluate(&records).ctx("computing metrics")?;
    let tsv = report.to_tsv();
    match &a.out {
        Some(p) => data::write(p, &tsv)?,
        None => print!("{tsv}"),
    }
    if let Some(p) = &a.predictions {
        let mut text = String::from("pdb\tmutations\tddg\tpredicted\n");
        for (e, pred) in selected.iter().zip(&preds) {
            text.push_str(&format!("{}\t{}\t{}\t{}\n", e.pdb, e.mutation_string(), e.ddg, pred));
        }
        data::write(p, &text)?;
    }
    Ok(())
}

pub fn correlate_uncertainty(a: CorrelateArgs) -> CliResult<()> {
    let ck = data::load_checkpoint(&a.ckpt)?;
    let groups = data::chain_groups(&a.structure.ligand_chains, &a.structure.receptor_chains)?;
    let c = data::load_complex(&a.structure.pdb, &groups)?;
    let rmsf = data::load_rmsf_for(&a.rmsf, &c)?;
    let r = pipeline::correlate_uncertainty(&ck.params, &c, &rmsf, a.cutoff).ctx("correlating covariance norms with RMSF")?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!("residues\t{}", r.n);
        println!("pearson\t{}", r.pearson);
        for (name, g) in [("interface", r.interface), ("non_interface", r.non_interface)] {
            println!("{name}_residues\t{}", g.n);
            println!("{name}_mean_sigma_sq\t{}", g.mean_sigma_sq);
            println!("{name}_mean_rmsf\t{}", g.mean_rmsf);
        }
    }
    Ok(())
}

pub fn mask_init(a: MaskInitArgs) -> CliResult<()> {
    let groups = data::chain_groups(&a.structure.ligand_chains, &a.structure.receptor_chains)?;
    let c = data::load_complex(&a.structure.pdb, &groups)?;
    let muts = io::parse_mutation(&a.mutations)?;
    let region = mmm::select_mask_region(&c, &muts, a.l, a.r)?;
    let mode = match a.mode {
        CorruptionArg::Noise if !(a.alpha > 0.0 && a.alpha.is_finite()) => return Err(CliError::usage("--alpha must be positive")),
        CorruptionArg::Noise => CorruptionMode::Noise(a.alpha),
        CorruptionArg::Interpolate => CorruptionMode::Interpolate,
    };
    let corrupted = c.with_coords(&mmm::corrupt(&c.coords(), &c, &region, mode, a.seed)?)?;
    let pdb = io::serialize_pdb(&corrupted);
    let masked: Vec<String> = region.indices().iter().map(|&i| c.residue(i).id().to_string()).collect();
    match &a.out {
        Some(p) => {
            data::write(p, &pdb)?;
            println!("masked {} residues: {}", masked.len(), masked.join(" "));
        }
        None => print!("{pdb}"),
    }
    Ok(())
}

/// Distinct complexes of `samples` in first-seen order.
fn distinct_complexes(samples: &[pipeline::TrainSample]) -> Vec<Arc<Complex>> {
    let mut out: Vec<Arc<Complex>> = Vec::new();
    for s in samples {
        if !out.iter().any(|c| Arc::ptr_eq(c, &s.complex)) {
            out.push(s.complex.clone());
        }
    }
    out
}

pub fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let cfg = run_config(&a.config, &a.overrides, a.fold, &a.out, &a.log)?;
    let out = checkpoint_path(&cfg)?;
    let entries = data::load_dataset(cfg.dataset()?)?;
    let d = &cfg.data;
    let (train_s, _) = data::split_train_validation(&entries, d.n_folds, d.fold, d.fold_seed, 0.0)?;
    let samples = data::load_samples(&select(&entries, &train_s), &cfg.structures_dir()?, d.rmsf_dir.as_deref())?;
    let items: Vec<PretrainItem> = distinct_complexes(&samples).into_iter().map(|complex| PretrainItem { complex, centers: Vec::new() }).collect();

    let mut params = initial_params(&cfg.model, cfg.train.seed, a.init.as_deref())?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.train.lr, ..Default::default() });
    let mut log = open_log(cfg.output.log.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(pipeline::derive_seed(cfg.train.seed, u64::MAX, 1));
    let bs = cfg.train.batch_size.min(items.len());
    let mut order: Vec<usize> = Vec::new();
    let mut last = f64::NAN;
    for it in 0..cfg.train.max_iterations {
        if order.len() < bs {
            let mut fresh: Vec<usize> = (0..items.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<PretrainItem> = order.drain(..bs).map(|i| items[i].clone()).collect();
        last = pipeline::mmm_pretrain_step(&mut params, &mut adam, &batch, &cfg.train, it as u64)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", json!({ "iteration": it + 1, "loss_refine": last, "lr": adam.config.lr }))?;
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let meta = json!({ "train_config": cfg.train, "pretrain": { "structures": train_s, "iterations": cfg.train.max_iterations, "final_loss_refine": last } });
    params.save(&out, meta).ctx(format!("writing checkpoint {}", out.display()))?;
    println!("pretrained the refiner for {} iterations on {} structures: refine loss {last:.6}", cfg.train.max_iterations, items.len());
    println!("checkpoint written to {}", out.display());
    Ok(())
}

pub fn train_uncertainty(a: TrainUncertaintyArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    cfg.apply(&a.overrides);
    cfg.model.validate()?;
    cfg.train.validate()?;
    if a.pdb.len() != a.rmsf.len() {
        return Err(CliError::usage(format!("{} --pdb files but {} --rmsf files", a.pdb.len(), a.rmsf.len())));
    }
    let groups = data::chain_groups(&a.ligand_chains, &a.receptor_chains)?;
    let mut items = Vec::with_capacity(a.pdb.len());
    for (pdb, rmsf) in a.pdb.iter().zip(&a.rmsf) {
        let c = data::load_complex(pdb, &groups)?;
        let r = data::load_rmsf_for(rmsf, &c)?;
        items.push((Arc::new(c), r));
    }
    let mut params = initial_params(&cfg.model, cfg.train.seed, a.init.as_deref())?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.train.lr, ..Default::default() });
    let mut log = open_log(a.log.as_deref())?;
    let initial = items.iter().map(|(c, r)| pipeline::uncertainty_loss(&params, c, r)).sum::<pdc_refine::Result<f64>>()? / items.len() as f64;
    let mut last = initial;
    for it in 0..cfg.train.max_iterations {
        last = pipeline::uncertainty_train_step(&mut params, &mut adam, &items)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", json!({ "iteration": it + 1, "loss_uncertainty": last }))?;
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let fin = items.iter().map(|(c, r)| pipeline::uncertainty_loss(&params, c, r)).sum::<pdc_refine::Result<f64>>()? / items.len() as f64;
    params.save(&a.out, json!({ "train_config": cfg.train, "uncertainty": { "initial_loss": initial, "final_loss": fin } })).ctx(format!("writing checkpoint {}", a.out.display()))?;
    println!("uncertainty loss {initial:.6} -> {fin:.6} after {} iterations (last step {last:.6})", cfg.train.max_iterations);
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

/// Settings written into the synthetic dataset's config: small enough for a laptop run.
fn synth_config() -> CliConfig {
    CliConfig {
        model: ModelConfig { width: 32, pool_width: 32, knn: 8, ..Default::default() },
        train: TrainConfig {
            k_recycles: 2,
            l: 2,
            r: 2,
            lr: 2e-3,
            batch_size: 2,
            max_iterations: 200,
            corruption: CorruptionKind::Noise,
            alpha: 0.25,
            validation_every: 20,
            patience: 2,
            min_lr: 1e-5,
            ..Default::default()
        },
        data: DataConfig { dataset: Some("dataset.tsv".into()), structures: Some("structures".into()), ..Default::default() },
        output: OutputConfig { checkpoint: Some("model.json".into()), log: Some("train.jsonl".into()) },
    }
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    if a.complexes == 0 || a.mutations == 0 {
        return Err(CliError::usage("--complexes and --mutations must be positive"));
    }
    if a.min_len < 3 || a.min_len > a.max_len {
        return Err(CliError::usage(format!("need 3 <= --min-len <= --max-len, got {}..{}", a.min_len, a.max_len)));
    }
    let set = synth::benchmark(a.complexes, a.min_len..=a.max_len, a.mutations, a.seed)?;
    for (name, c) in &set.complexes {
        data::write(&a.out.join("structures").join(format!("{name}.pdb")), &io::serialize_pdb(c))?;
        let table: RmsfTable = c.residues().iter().zip(synth::rmsf_pattern(c)).map(|(r, v)| ((r.chain_id, r.seq_number), v)).collect();
        data::write(&a.out.join("rmsf").join(format!("{name}.tsv")), &io::write_rmsf(&table))?;
    }
    let entries: Vec<DatasetEntry> = set
        .samples
        .iter()
        .map(|s| DatasetEntry { pdb: s.structure.clone(), ligand_chains: vec!['A'], receptor_chains: vec!['B'], mutations: s.mutations.clone(), ddg: s.ddg })
        .collect();
    data::write(&a.out.join("dataset.tsv"), &io::write_dataset(&entries))?;
    data::write(&a.out.join("config.json"), &serde_json::to_string_pretty(&synth_config())?)?;
    println!("wrote {} structures and {} labelled mutations to {}", set.complexes.len(), entries.len(), a.out.display());
    Ok(())
}
