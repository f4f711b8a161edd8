//! Statistical and data-workflow toolkit for multi-grader screening studies
//! of optic disc photographs.
//!
//! The crate turns raw grade logs into adjudicated reference standards,
//! evaluates screening scores against them (ROC/AUC with bootstrap
//! intervals, operating points, grader comparisons), measures inter-grader
//! agreement, ranks optic nerve head features by logistic-regression odds
//! ratios, aggregates model outputs to patient level, and normalizes fundus
//! photographs to a fixed disc diameter.
//!
//! A seeded cohort simulator ([`synth`]) produces data with known ground
//! truth, and [`pipeline`] wires everything into the report-producing
//! subcommands used by the `discgrade` binary.

pub mod adjudication;
pub mod agreement;
pub mod error;
pub mod fundus;
pub mod grade;
pub mod io;
pub mod logistic;
pub mod pipeline;
pub mod report;
pub mod roc;
pub mod scores;
pub mod stats;
pub mod synth;

pub use adjudication::{
    adjudicate, method_agreement, ordinal_median3, resolve_image, MedianPolicy,
    MethodAgreementMatrix, ReferenceStandard, Resolution, ResolveMode,
};
pub use agreement::{krippendorff_alpha, DistanceMetric, ReliabilityMatrix};
pub use error::{Error, Result};
pub use grade::{
    binarize_feature, binarize_gon, Assessment, BinaryLabelSet, FeatureGrade, FeatureId,
    GonRisk, Gradability, GradeRecord, GraderRole, Item, Round,
};
pub use logistic::{fit_logistic, rank_features, DesignMatrix, FitOptions, RegressionReport};
pub use roc::{roc, OperatingPoint, RocCurve, ScoredCase};
pub use scores::{ensemble_average, referable_score, ModelOutput};
pub use stats::{BinomialCI, BootstrapConfig, BootstrapResult, CiMethod, PairedOutcome};
