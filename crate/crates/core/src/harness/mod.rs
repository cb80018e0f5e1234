//! Experiment runner: supervised and leave-one-out runs, loss and layer
//! ablations, metrics, embedding projections and result files.

mod config;
mod metrics;
mod projection;
mod results;
mod runner;

pub use config::{ExperimentConfig, Mode};
pub use metrics::{auc, compute_metrics, Metrics};
pub use projection::{project_embeddings, Projection};
pub use results::{
    mean_std, read_results, render_summary, summarize, write_projection_csv, write_results, SummaryRow, RESULTS_CSV,
    RESULTS_JSON,
};
pub use runner::{
    audit_split, centroid_geometry, embedding_centroids, load_or_generate, run_experiment, run_from_config,
    run_layer_ablation, run_leave_one_out, run_loss_ablation, run_supervised, run_variants, run_variants_with,
    split_hash, train_variant, DomainSimilarity, ExperimentOutput, GeometryRecord, MetricsRecord, OnRun, RunKey,
    SplitAudit, TrainedRun, Variant,
};
