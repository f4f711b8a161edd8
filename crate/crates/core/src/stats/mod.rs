//! Exact and resampling inference: Clopper-Pearson intervals, McNemar's
//! test, the two-sample Kolmogorov-Smirnov test and the bootstrap engine.

mod binomial;
pub mod bootstrap;
mod ks;
mod mcnemar;

pub use binomial::{clopper_pearson, BinomialCI};
pub use bootstrap::{bootstrap_ci, BootstrapConfig, BootstrapResult, CiMethod};
pub use ks::{kolmogorov_survival, ks_two_sample, KsMethod, KsResult};
pub use mcnemar::{mcnemar, mcnemar_chi2_corrected, mcnemar_two_tailed, McNemarVariant, PairedOutcome};
