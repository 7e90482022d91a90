//! Fixtures shared by the benchmarks in `benches/`.

use ladderwalk_core::{EnvLaw, Environment, SiteLaw};

/// Row 1 of the overshoot table: drift 0.39.
pub fn fast_law() -> SiteLaw {
    SiteLaw::new(0.08, 0.36, 0.21, 0.35).unwrap()
}

/// Row 3 of the overshoot table: drift 0.0012, long ladder times.
pub fn slow_law() -> SiteLaw {
    SiteLaw::new(0.3199, 0.1801, 0.1789, 0.3211).unwrap()
}

pub fn dirichlet_law() -> EnvLaw {
    EnvLaw::dirichlet([2.0, 2.0, 4.0, 4.0], 1e-6).unwrap()
}

/// A fixed draw from [`dirichlet_law`].
pub fn iid_env() -> Environment {
    Environment::iid(dirichlet_law(), 7)
}
