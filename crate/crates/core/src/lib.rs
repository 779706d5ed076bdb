//! Sparse Bayesian learning (SBL) for direction-of-arrival estimation.
//!
//! The crate covers the full simulation chain for plane-wave beamforming on a
//! uniform linear array:
//!
//! * [`model`] builds steering dictionaries, synthetic scenes and snapshot data,
//!   including multiplicatively perturbed arrays for mismatch studies.
//! * [`solver`] implements evidence maximization with sensing-matrix and
//!   weight-vector uncertainty (SBL, SBL-A, SBL-x) and the two multi-dictionary
//!   variants (SBL-MC and SBL-CC), plus the stochastic maximum likelihood noise
//!   estimate and the Gaussian posterior.
//! * [`baselines`] holds the classical spectra (CBF, MVDR, MUSIC) and the
//!   exhaustive support search.
//! * [`experiments`] is the Monte-Carlo harness producing RMSE, percentile and
//!   histogram metrics.
//! * [`formats`] reads and writes the on-disk JSON and CSV documents.

pub mod baselines;
pub mod experiments;
pub mod formats;
mod linalg;
pub mod model;
pub mod rng;
pub mod solver;

pub use nalgebra::Complex;

/// Double precision complex scalar used throughout.
pub type Complex64 = Complex<f64>;
/// Dense complex matrix (column major).
pub type CMatrix = nalgebra::DMatrix<Complex64>;
/// Dense complex column vector.
pub type CVector = nalgebra::DVector<Complex64>;

pub use baselines::{
    cbf_spectrum, exhaustive_search, music_spectrum, mvdr_spectrum, BaselineError,
    ExhaustiveOutcome, Spectrum,
};
pub use experiments::{
    percentile_band, rmse_weakest, run_experiment, ExperimentConfig, ExperimentError, MethodKind,
    MethodSpec, MetricsRow, MetricsTable,
};
pub use model::{
    apply_multiplicative_perturbation, build_dictionary, sample_covariance, steering_vector,
    synthesize_snapshots, AmplitudeModel, ArraySpec, Dictionary, ModelError, SceneSpec,
    SnapshotSet, SourceSpec, UncertaintyModel,
};
pub use solver::{
    assemble_data_covariance, assemble_noise_covariance, estimate_noise, find_local_peaks,
    gamma_update_step, log_evidence, posterior, run_sbl, run_sbl_cc, run_sbl_mc, DataCovariance,
    Posterior, SblProblem, SblResult, SolverError, SolverOptions,
};
