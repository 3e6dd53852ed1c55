//! Domain types, tensor-series file I/O, phenotype parsing, and dataset
//! split construction.

mod container;
mod phenotype;
mod splits;
mod types;

pub use container::{
    load_atlas_labels, load_latent_sequence, load_volume_series, save_atlas_labels,
    save_latent_sequence, save_volume_series,
};
pub use phenotype::{load_phenotype_table, save_phenotype_table};
pub use splits::{make_kfold_splits, make_loso_splits};
pub use types::{
    site_count, Fold, FoldAssignment, LatentSequence, SplitKind, SubjectRecord, VolumeSeries,
};
