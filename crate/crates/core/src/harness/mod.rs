//! Configuration, datasets, training and the experiment entry points used
//! by the command-line tool.

pub mod augment;
pub mod config;
pub mod data;
pub mod run;
pub mod toy;
pub mod train;

pub use config::{ExperimentConfig, ToyConfig, TrainConfig};
pub use data::{fewshot_count, ingest_dataset, subsample_fewshot, Dataset, DatasetSpec, Sample, Split};
pub use run::{
    adapt, evaluate, export_maps, fewshot_sweep, gen_toy, load_model, predict, run_experiment, save_model, RunManifest,
};
pub use toy::{generate_toy_data, Domain};
pub use train::{prepare, train, Prepared};
