//! Exit probabilities, ladder-time laws and limiting velocity for random walks
//! on the integers with jumps in {-2, -1, 1, 2}.
//!
//! The walk is analysed through the multitype branching process formed by its
//! excursions below the starting level. Every analytic quantity has an
//! independent numerical counterpart: the [`oracle`] module solves finite
//! absorbing chains directly, and the [`simulator`] and [`decomposer`] modules
//! measure the same quantities on sampled paths.

pub mod branching;
pub mod decomposer;
pub mod environment;
mod error;
pub mod hitting;
pub mod oracle;
pub mod rwre;
pub mod simulator;

pub use branching::{
    excursion_indices, expected_t1, expected_tally, mean_matrix, offspring_scalars, BranchingModel,
    ExcursionIndices, ExcursionTally, ImmigrationLaw, MeanMatrix, OffspringLaw, OffspringScalars,
    T1Series, WEIGHTS,
};
pub use decomposer::{
    decompose, tally_ensemble, verify_identity, Decomposition, IdentityReport, OnlineDecomposer,
    TallyStats,
};
pub use environment::{
    local_drift, sample_environment, shift, EnvLaw, EnvSpec, Environment, SiteLaw,
};
pub use error::{Error, Result};
pub use hitting::{
    build_step_matrix, exit_probabilities, hit_from_below, homogeneous_root, ExitProbTable,
    HitProfile, HomogeneousRoot, StepMatrix,
};
pub use rwre::{
    invariant_density, normalizer, velocity, velocity_with, DensityReport, RatioEstimate,
    VelocityOptions, VelocityReport,
};
pub use simulator::{
    replica_seed, run_ensemble, run_horizon, run_to_ladder, EnsembleStats, HorizonSummary, Moments,
    WalkPath,
};
