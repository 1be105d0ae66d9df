//! Similarity-based adversarial attacks against feature-embedding
//! authentication, with a synthetic identity benchmark.
//!
//! The crate is organized bottom-up:
//!
//! * [`data`] — synthetic identity datasets and 16-bit PNM image I/O;
//! * [`embedding`] — the differentiable reference embedder and its
//!   exact input-gradient (vector-Jacobian product), plus a
//!   finite-difference oracle;
//! * [`authsys`] — template enrollment, verification, EER threshold
//!   calibration, and ROC/AUC;
//! * [`attacks`] — FGSM, PGD, and the similarity-driven iterative attack
//!   with convergence/settlement stopping;
//! * [`metrics`] — dissimilarity, success rates, L-infinity, SSIM;
//! * [`harness`] — experiment orchestration (white-box and gray-box
//!   suites), deterministic parallel execution, and report rendering.

pub mod attacks;
pub mod authsys;
pub mod data;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod metrics;

pub use attacks::{
    cbce_loss, fgsm_attack, pgd_attack, sgadv_attack, sgadv_loss, AttackConfig, AttackResult,
    Objective, StopReason,
};
pub use authsys::{auc, calibrate_threshold, roc, AuthSystem, ScoreSets};
pub use data::{generate_dataset, load_dataset, save_dataset, IdentityDataset, Image};
pub use embedding::{EmbeddingModel, FeatureVector, GradientImage, ReferenceEmbedder};
pub use error::{Error, Result};
pub use harness::{
    run_bench, run_s1, run_s2, BenchResults, Experiment, ExperimentConfig, Scenario, Technique,
};
pub use metrics::{dissimilarity, linf_distance, ssim, MetricReport};
