//! Differentially private estimation of conditional average treatment
//! effects with Neyman-orthogonal two-stage meta-learners.
//!
//! The pipeline: stage 1 fits privatized nuisance models (outcome μ̂ and
//! clipped propensity π̂) on one data split; stage 2 regresses orthogonal
//! pseudo-outcomes on the disjoint split. Estimates are released either at
//! finitely many query points, with Gaussian noise calibrated through the
//! second stage's influence function, or as a whole function, with a
//! Gaussian-process path calibrated through an RKHS sensitivity bound. The
//! functional release also supports iterative querying through a stateful
//! posterior sampler.

pub mod data;
pub mod error;
pub mod eval;
pub mod finite_mech;
pub mod functional_mech;
pub mod kernel;
pub mod ledger;
pub mod nuisance;
pub mod optim;
pub mod privacy;
pub mod pseudo;
pub mod secondstage;

pub use data::{Dataset, DomainBounds, Sample, SyntheticConfig, TrueCate};
pub use error::{Error, Result};
pub use finite_mech::{calibration_c, release_finite, FiniteReleaseReport};
pub use functional_mech::{
    calibration_r, iterative_init, iterative_query, release_function_batch, sample_gp_batch,
    FunctionalCalibration, GpMode, GpNoiseState,
};
pub use kernel::KernelSpec;
pub use ledger::Ledger;
pub use nuisance::{FitMethod, NuisanceHyper, NuisancePair};
pub use privacy::{dp_composition_budget, BudgetPlan, PrivacyBudget};
pub use pseudo::{build_targets, pseudo_outcome, rho_weight, LearnerKind, WeightedTarget};
pub use secondstage::{fit_krr, fit_linear_basis, BasisSpec, KrrModel, LinearBasisModel, SecondStageModel};
