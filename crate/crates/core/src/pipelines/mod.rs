//! End-to-end training and evaluation runs.

mod config;
mod data;
mod eval;
mod report;
mod train;
mod trainer;

pub use config::{ClusterSubset, RunConfig};
pub use data::{apply_split, held_out_section, load_dataset, prepare_dataset, Dataset, EMBED_CHUNK};
pub use eval::{
    cluster_eval, cluster_points, encoder_prefix, evaluate_fewshot, evaluate_with, network_for, run_episodes, subset_records,
    summarize, Embedder, EpisodeHead, EpisodeLog, EvalOutcome, TableEmbedder,
};
pub use report::{
    mean_and_ci95, AccuracySummary, ClassF1, ClusterSummary, F1Summary, MetricsReport, PairDistanceSummary, REPORT_VERSION,
};
pub use train::{
    episode_forward, held_out_pair_distances, init_matching, init_siamese, run_rng, train_matching, train_siamese, train_ssm,
    EpisodeSampler, TrainOutcome,
};
