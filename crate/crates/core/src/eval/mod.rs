//! Metrics and experiments.

pub mod experiments;
pub mod metrics;
pub mod omp;

pub use experiments::{ablate, cose, promote, AblationReport, MatrixChoice, PromotionResult, StageResult};
pub use metrics::{auc, evaluate_maps, f_measure, mor, pr_curve, CurveKind, CurveSeries, MetricReport, PrfScore};
pub use omp::{adapted_omp, cose_curve, nnls, OmpResult};
