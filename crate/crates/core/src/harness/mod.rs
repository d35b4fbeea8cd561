//! Config-driven experiment runs, removal experiments and overlays.

mod config;
mod eval;
mod overlay;
mod run;

pub use config::{DataSource, Dtype, ExperimentConfig, Removal, RemovalTarget};
pub use eval::evaluate;
pub use overlay::{emit_overlays, render_overlay, structure_color};
pub use run::{
    apply_removal, configure_threads, flag_removal, load_corpus, removal_center, rerun_snapshot, run_experiment,
    run_removal_suite, split_centers, RemovalSuite, RunArtifact, SNAPSHOT_FILE,
};
