//! Loading structures, datasets and RMSF tables from disk.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pdc_refine::io::{self, DatasetEntry};
use pdc_refine::model::ModelParams;
use pdc_refine::pipeline::{TrainConfig, TrainSample};
use pdc_refine::structure::{Complex, Group};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult, Context};

pub fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).ctx(format!("reading {}", path.display()))
}

pub fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).ctx(format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).ctx(format!("writing {}", path.display()))
}

/// Chain ids from strings such as `A`, `HL` or `H,L`.
pub fn chain_groups(ligand: &str, receptor: &str) -> CliResult<BTreeMap<char, Group>> {
    let parse = |s: &str| -> Vec<char> { s.chars().filter(|c| c.is_ascii_alphanumeric()).collect() };
    let (lig, rec) = (parse(ligand), parse(receptor));
    if lig.is_empty() || rec.is_empty() {
        return Err(CliError::usage("both --ligand-chains and --receptor-chains need at least one chain id"));
    }
    if lig.iter().any(|c| rec.contains(c)) {
        return Err(CliError::usage("ligand and receptor chains overlap"));
    }
    Ok(lig.into_iter().map(|c| (c, Group::Ligand)).chain(rec.into_iter().map(|c| (c, Group::Receptor))).collect())
}

pub fn load_complex(path: &Path, groups: &BTreeMap<char, Group>) -> CliResult<Complex> {
    let parsed = io::parse_pdb(&read(path)?, groups).ctx(format!("parsing {}", path.display()))?;
    for w in &parsed.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(parsed.complex)
}

pub fn load_rmsf_for(path: &Path, c: &Complex) -> CliResult<Vec<f64>> {
    let table = io::load_rmsf(&read(path)?).ctx(format!("parsing {}", path.display()))?;
    io::rmsf_for_complex(&table, c).ctx(format!("matching {} to the structure", path.display()))
}

/// `dir/<id>` if it exists, otherwise `dir/<id>.pdb`.
fn structure_path(dir: &Path, id: &str) -> PathBuf {
    let plain = dir.join(id);
    if plain.is_file() {
        plain
    } else {
        dir.join(format!("{id}.pdb"))
    }
}

pub fn load_dataset(path: &Path) -> CliResult<Vec<DatasetEntry>> {
    io::parse_dataset(&read(path)?).ctx(format!("parsing {}", path.display()))
}

/// Loads every structure referenced by `entries` once and pairs it with its labels.
pub fn load_samples(entries: &[&DatasetEntry], structures: &Path, rmsf_dir: Option<&Path>) -> CliResult<Vec<TrainSample>> {
    let mut cache: BTreeMap<(String, Vec<char>, Vec<char>), (Arc<Complex>, Option<Arc<Vec<f64>>>)> = BTreeMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let key = (e.pdb.clone(), e.ligand_chains.clone(), e.receptor_chains.clone());
        if !cache.contains_key(&key) {
            let c = load_complex(&structure_path(structures, &e.pdb), &e.groups())?;
            let rmsf = match rmsf_dir {
                Some(dir) => Some(Arc::new(load_rmsf_for(&dir.join(format!("{}.tsv", e.pdb)), &c)?)),
                None => None,
            };
            cache.insert(key.clone(), (Arc::new(c), rmsf));
        }
        let (c, rmsf) = &cache[&key];
        for m in &e.mutations {
            c.find(&m.site()).ok_or_else(|| CliError::data(format!("{}: mutation {m} names a residue missing from the structure", e.pdb)))?;
        }
        out.push(TrainSample {
            structure: e.pdb.clone(),
            complex: c.clone(),
            mutations: e.mutations.clone(),
            ddg: e.ddg,
            rmsf: rmsf.as_ref().map(|r| r.to_vec()),
        });
    }
    Ok(out)
}

/// Training and validation structures after removing `fold`: a seeded share of
/// the remaining structures is held out for validation.
pub fn split_train_validation(
    entries: &[DatasetEntry],
    n_folds: usize,
    fold: usize,
    fold_seed: u64,
    validation_fraction: f64,
) -> CliResult<(BTreeSet<String>, BTreeSet<String>)> {
    let folds = io::split_folds(entries, n_folds, fold_seed)?;
    let mut pool: Vec<String> = folds.folds.iter().filter(|(_, &f)| f != fold).map(|(s, _)| s.clone()).collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(fold_seed ^ 0x5eed));
    let n_val = if pool.len() >= 2 && validation_fraction > 0.0 { ((validation_fraction * pool.len() as f64).round() as usize).clamp(1, pool.len() - 1) } else { 0 };
    let val = pool.split_off(pool.len() - n_val);
    Ok((pool.into_iter().collect(), val.into_iter().collect()))
}

/// Structures assigned to `fold`.
pub fn fold_structures(entries: &[DatasetEntry], n_folds: usize, fold: usize, fold_seed: u64) -> CliResult<BTreeSet<String>> {
    if fold >= n_folds {
        return Err(CliError::usage(format!("fold {fold} is outside 0..{n_folds}")));
    }
    let folds = io::split_folds(entries, n_folds, fold_seed)?;
    Ok(folds.structures_in(fold).into_iter().map(str::to_string).collect())
}

/// Parameters, stored training settings and metadata of a checkpoint.
pub struct Checkpoint {
    pub params: ModelParams,
    pub train: TrainConfig,
    pub meta: serde_json::Value,
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let (params, meta) = ModelParams::from_json(&read(path)?).ctx(format!("loading checkpoint {}", path.display()))?;
    let train = match meta.get("train_config") {
        Some(v) => serde_json::from_value(v.clone()).ctx(format!("{}: bad train_config", path.display()))?,
        None => TrainConfig::default(),
    };
    Ok(Checkpoint { params, train, meta })
}
