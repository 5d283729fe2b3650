//! `pdc-refine` command-line tool.

mod check;
mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "pdc-refine", version, about = "Masked backbone refinement and PDC message passing for binding ddG prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Jointly train refinement and ddG prediction on every fold except --fold.
    Train(TrainArgs),
    /// Predict ddG for one mutation set on one structure.
    Predict(PredictArgs),
    /// Score a checkpoint on a dataset fold and write the metrics TSV.
    Eval(EvalArgs),
    /// Run the property and Monte Carlo verification suites.
    Check(CheckArgs),
    /// Compare learned covariance norms with per-residue RMSF.
    CorrelateUncertainty(CorrelateArgs),
    /// Write the corrupted starting structure for a mutation set.
    MaskInit(MaskInitArgs),
    /// Train only the refiner on randomly placed masked windows.
    Pretrain(PretrainArgs),
    /// Fit the learnable variance embedding to RMSF targets.
    TrainUncertainty(TrainUncertaintyArgs),
    /// Write a synthetic helix-pair dataset with structures, labels and RMSF files.
    Synth(SynthArgs),
}

/// Flags that override values from the config file.
#[derive(Args, Debug, Default, Clone)]
struct Overrides {
    /// Base seed for initialization, shuffling and corruption noise.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    k_recycles: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    corruption: Option<CorruptionArg>,
    #[arg(long, value_enum)]
    variance_rule: Option<VarianceRuleArg>,
    #[arg(long, value_enum)]
    moment_formula: Option<MomentFormulaArg>,
    #[arg(long, value_enum)]
    variance_init: Option<VarianceInitArg>,
    /// Dataset TSV (overrides `data.dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory holding the PDB files named in the dataset.
    #[arg(long)]
    structures: Option<PathBuf>,
    /// Directory of `<pdb>.tsv` RMSF tables.
    #[arg(long)]
    rmsf_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum CorruptionArg {
    Noise,
    Interpolate,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VarianceRuleArg {
    Eq5,
    AppendixVariant,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MomentFormulaArg {
    Standard,
    PaperLiteral,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VarianceInitArg {
    Identity,
    Rmsf,
    Learnable,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Held-out fold; training uses all others.
    #[arg(long)]
    fold: Option<usize>,
    /// Checkpoint path (overrides `output.checkpoint`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Line-delimited JSON training log (overrides `output.log`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Start from the parameters of an existing checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// A structure file with its partner assignment.
#[derive(Args, Debug, Clone)]
struct StructureArgs {
    #[arg(long)]
    pdb: PathBuf,
    /// Ligand chain ids, e.g. `A` or `HL`.
    #[arg(long)]
    ligand_chains: String,
    /// Receptor chain ids.
    #[arg(long)]
    receptor_chains: String,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    structure: StructureArgs,
    /// Comma-separated substitutions such as `TI38A,RC106K`.
    #[arg(long)]
    mutations: String,
    /// RMSF table for RMSF-initialized models.
    #[arg(long)]
    rmsf: Option<PathBuf>,
    /// Write the mutant complex with its refined backbone here.
    #[arg(long)]
    out_pdb: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding the PDB files; defaults to the one used for training,
    /// then to the dataset's directory.
    #[arg(long)]
    structures: Option<PathBuf>,
    #[arg(long)]
    rmsf_dir: Option<PathBuf>,
    /// Fold to score; every entry is scored when omitted.
    #[arg(long)]
    fold: Option<usize>,
    /// Fold count; defaults to the value stored in the checkpoint.
    #[arg(long)]
    n_folds: Option<usize>,
    /// Fold shuffling seed; defaults to the value stored in the checkpoint.
    #[arg(long)]
    fold_seed: Option<u64>,
    /// Metrics TSV path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-entry predictions TSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Equivariance,
    Moments,
    Gradients,
    Psd,
    Golden,
    All,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    /// Smaller instance counts for a fast smoke run.
    #[arg(long)]
    quick: bool,
    /// Replace every suite seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Negate the additive covariance increment in the PSD suite; the suite must then fail.
    #[arg(long)]
    inject_sign_flip: bool,
    /// Write the full reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    structure: StructureArgs,
    /// RMSF table (`chain<TAB>resseq<TAB>rmsf`).
    #[arg(long)]
    rmsf: PathBuf,
    /// CA distance to the other partner that defines interface residues (Å).
    #[arg(long, default_value_t = pdc_refine::structure::DEFAULT_INTERFACE_CUTOFF)]
    cutoff: f64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct MaskInitArgs {
    #[command(flatten)]
    structure: StructureArgs,
    #[arg(long)]
    mutations: String,
    #[arg(long, value_enum, default_value = "interpolate")]
    mode: CorruptionArg,
    /// Per-axis noise standard deviation (Å) for `--mode noise`.
    #[arg(long, default_value_t = pdc_refine::mmm::DEFAULT_NOISE_STD)]
    alpha: f64,
    /// Residues masked before each mutation site.
    #[arg(long, default_value_t = pdc_refine::mmm::DEFAULT_FLANK)]
    l: usize,
    /// Residues masked after each mutation site.
    #[arg(long, default_value_t = pdc_refine::mmm::DEFAULT_FLANK)]
    r: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PDB; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Structures of this fold are left out.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainUncertaintyArgs {
    /// Model and optimizer settings; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Structure files, paired in order with --rmsf.
    #[arg(long, required = true, num_args = 1..)]
    pdb: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    rmsf: Vec<PathBuf>,
    #[arg(long)]
    ligand_chains: String,
    #[arg(long)]
    receptor_chains: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    complexes: usize,
    #[arg(long, default_value_t = 6)]
    mutations: usize,
    #[arg(long, default_value_t = 12)]
    min_len: usize,
    #[arg(long, default_value_t = 18)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Check(a) => check::run(a),
        Command::CorrelateUncertainty(a) => commands::correlate_uncertainty(a),
        Command::MaskInit(a) => commands::mask_init(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::TrainUncertainty(a) => commands::train_uncertainty(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(error::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
