use crate::simulator::WalkPath;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid site law: {0}")]
    InvalidLaw(String),

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("site {} is not matrix-admissible (q2 = {q2:e})", site.map_or("?".to_string(), |s| s.to_string()))]
    NotAdmissible { site: Option<i64>, q2: f64 },

    #[error("degenerate exit system on [{a}, {b}]: {detail}")]
    DegenerateSystem { a: i64, b: i64, detail: String },

    #[error("hitting probabilities did not converge by depth {depth}: last iterates {last:?} and {prev:?}")]
    NotConverged {
        depth: usize,
        last: (f64, f64),
        prev: (f64, f64),
    },

    #[error("local drift {0} is negative")]
    DriftNegative(f64),

    #[error("singular absorbing system (residual {residual:e})")]
    SingularSystem { residual: f64 },

    #[error("degenerate denominator in {0}")]
    DegenerateDenominator(&'static str),

    #[error("series diverges after {levels} levels (partial sum {partial})")]
    Diverging { levels: usize, partial: f64 },

    #[error("series not converged after {levels} levels (partial sum {partial}, last term {last_term:e})")]
    SeriesNotConverged {
        levels: usize,
        partial: f64,
        last_term: f64,
    },

    #[error("step cap reached after {} steps without a ladder time", .0.steps())]
    CapReached(Box<WalkPath>),

    #[error("malformed path: {0}")]
    MalformedPath(String),
}
