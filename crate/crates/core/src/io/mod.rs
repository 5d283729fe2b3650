//! File formats: PDB backbone records, mutation strings, the dataset TSV and RMSF tables.

mod dataset;
mod pdb;
mod rmsf;

pub use dataset::{parse_dataset, parse_mutation, split_folds, write_dataset, DatasetEntry, FoldAssignment, DATASET_HEADER};
pub use pdb::{parse_pdb, serialize_pdb, ParsedPdb};
pub use rmsf::{load_rmsf, rmsf_for_complex, write_rmsf, RmsfTable};
