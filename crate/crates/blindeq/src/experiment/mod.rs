//! Configuration, sweeps, seeded parallel runs and result files.

mod config;
mod recipes;
mod runner;

pub use config::{
    EqualizerConfig, EqualizerKind, ExperimentConfig, ModulationConfig, RunConfig, SweepConfig, SweepPoint,
};
pub use recipes::{recipe, DESK_N_IND, FIG10_DRIFTS, RECIPES};
pub use runner::{
    csv_string, equalize, run_experiment, run_seed, simulate, variant_seed, write_outputs, ExperimentResult, Manifest,
    RawRow, RunData, SummaryRow, VariantRun, MMSE_FIT_SYMBOLS,
};
