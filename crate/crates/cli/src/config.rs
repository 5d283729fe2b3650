//! The JSON run configuration and its command-line overrides.

use std::path::{Path, PathBuf};

use pdc_refine::geom::MomentFormula;
use pdc_refine::model::{ModelConfig, VarianceInitKind};
use pdc_refine::pdc::VarianceRule;
use pdc_refine::pipeline::{CorruptionKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};
use crate::{CorruptionArg, MomentFormulaArg, Overrides, VarianceInitArg, VarianceRuleArg};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    /// Directory of PDB files; defaults to the dataset's directory.
    pub structures: Option<PathBuf>,
    /// Directory of `<pdb>.tsv` RMSF tables.
    pub rmsf_dir: Option<PathBuf>,
    pub n_folds: usize,
    /// Fold held out from training.
    pub fold: usize,
    pub fold_seed: u64,
    /// Share of training structures kept aside for validation.
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dataset: None, structures: None, rmsf_dir: None, n_folds: 3, fold: 0, fold_seed: 0, validation_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl CliConfig {
    /// Reads a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).ctx(format!("reading config {}", path.display()))?;
        let mut cfg: CliConfig = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.dataset, &mut cfg.data.structures, &mut cfg.data.rmsf_dir, &mut cfg.output.checkpoint, &mut cfg.output.log]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let t = &mut self.train;
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.max_iterations {
            t.max_iterations = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.k_recycles {
            t.k_recycles = v;
        }
        if let Some(v) = o.lambda {
            t.lambda = v;
        }
        if let Some(v) = o.corruption {
            t.corruption = match v {
                CorruptionArg::Noise => CorruptionKind::Noise,
                CorruptionArg::Interpolate => CorruptionKind::Interpolate,
            };
        }
        let m = &mut self.model;
        if let Some(v) = o.variance_rule {
            m.variance_rule = match v {
                VarianceRuleArg::Eq5 => VarianceRule::Eq5,
                VarianceRuleArg::AppendixVariant => VarianceRule::AppendixVariant,
            };
        }
        if let Some(v) = o.moment_formula {
            m.moment_formula = match v {
                MomentFormulaArg::Standard => MomentFormula::Standard,
                MomentFormulaArg::PaperLiteral => MomentFormula::PaperLiteral,
            };
        }
        if let Some(v) = o.variance_init {
            m.variance_init = match v {
                VarianceInitArg::Identity => VarianceInitKind::Identity,
                VarianceInitArg::Rmsf => VarianceInitKind::Rmsf,
                VarianceInitArg::Learnable => VarianceInitKind::Learnable,
            };
        }
        let d = &mut self.data;
        if o.dataset.is_some() {
            d.dataset.clone_from(&o.dataset);
        }
        if o.structures.is_some() {
            d.structures.clone_from(&o.structures);
        }
        if o.rmsf_dir.is_some() {
            d.rmsf_dir.clone_from(&o.rmsf_dir);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.n_folds == 0 || d.fold >= d.n_folds {
            return Err(CliError::usage(format!("fold {} is outside 0..{}", d.fold, d.n_folds)));
        }
        if !(0.0..1.0).contains(&d.validation_fraction) {
            return Err(CliError::usage(format!("validation_fraction must lie in [0, 1), got {}", d.validation_fraction)));
        }
        for p in [&d.dataset, &d.structures, &d.rmsf_dir].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::usage(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> CliResult<&Path> {
        self.data.dataset.as_deref().ok_or_else(|| CliError::usage("no dataset given (set data.dataset or pass --dataset)"))
    }

    pub fn structures_dir(&self) -> CliResult<PathBuf> {
        match &self.data.structures {
            Some(d) => Ok(d.clone()),
            None => Ok(self.dataset()?.parent().unwrap_or(Path::new(".")).to_path_buf()),
        }
    }
}
