//! Evaluation protocol: metrics, statistics, experiments and reports.

pub mod experiments;
pub mod metrics;
pub mod report;
pub mod stats;

pub use experiments::{
    perturbation_roc_experiment, randomization_sanity_check, PerturbationConfig, PerturbationReport,
    RandomizationConfig, RandomizationReport,
};
pub use metrics::{
    area_ratio, connected_component_boxes, hausdorff, percentile_threshold, roc_auc, weak_localization, BoundingBox,
    IouRule, Localization,
};
pub use report::{build_comparison_report, ImageRecord, Method, MetricsReport};
pub use stats::wilcoxon_signed_rank;
