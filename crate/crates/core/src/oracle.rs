//! Direct linear solves on the finite absorbing chain, used as ground truth for
//! the transfer-matrix and branching routes.

use nalgebra::{DMatrix, DVector};

use crate::environment::Environment;
use crate::{Error, Result};

const ROW_TOL: f64 = 1e-12;
const RESIDUAL_TOL: f64 = 1e-9;

/// The walk killed on leaving `[a+1, b-1]`; absorbing sites are
/// `{a-1, a, b, b+1}`.
#[derive(Debug, Clone)]
pub struct AbsorbingSystem {
    pub a: i64,
    pub b: i64,
    /// `I - P` restricted to the interior.
    generator: DMatrix<f64>,
    /// One-step probabilities into `a-1, a, b, b+1`, per interior site.
    exits: DMatrix<f64>,
}

impl AbsorbingSystem {
    pub fn new(env: &Environment, a: i64, b: i64) -> Result<Self> {
        if b < a + 2 {
            return Err(Error::InvalidEnvironment(format!(
                "interval [{a}+1, {b}-1] is empty"
            )));
        }
        let n = (b - a - 1) as usize;
        let mut generator = DMatrix::identity(n, n);
        let mut exits = DMatrix::zeros(n, 4);
        for r in 0..n {
            let k = a + 1 + r as i64;
            let law = env.law_at(k);
            let total: f64 = law.as_array().iter().sum();
            assert!((total - 1.0).abs() <= ROW_TOL, "row {k} sums to {total}");
            for l in [-2i64, -1, 1, 2] {
                let t = k + l;
                let p = law.jump(l);
                if t > a && t < b {
                    generator[(r, (t - a - 1) as usize)] -= p;
                } else {
                    let col = if t < a {
                        0
                    } else if t == a {
                        1
                    } else {
                        2 + (t - b) as usize
                    };
                    exits[(r, col)] += p;
                }
            }
        }
        Ok(AbsorbingSystem {
            a,
            b,
            generator,
            exits,
        })
    }

    pub fn interior(&self) -> std::ops::RangeInclusive<i64> {
        self.a + 1..=self.b - 1
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let lu = self.generator.clone().lu();
        let x = lu.solve(rhs).ok_or(Error::SingularSystem {
            residual: f64::INFINITY,
        })?;
        let residual = (&self.generator * &x - rhs).amax();
        if !residual.is_finite() || residual > RESIDUAL_TOL {
            return Err(Error::SingularSystem { residual });
        }
        Ok(x)
    }

    /// `P_k(target)` for every interior `k`, for each of the four absorbing
    /// sites (columns in the order `a-1, a, b, b+1`).
    pub fn exit_matrix(&self) -> Result<DMatrix<f64>> {
        self.solve(&self.exits)
    }

    /// `E_k[T]` for every interior `k`, `T` the exit time.
    pub fn exit_times(&self) -> Result<DVector<f64>> {
        let n = self.generator.nrows();
        let x = self.solve(&DMatrix::from_element(n, 1, 1.0))?;
        Ok(x.column(0).into_owned())
    }

    /// `E_k[T; X_T = target]` for every interior `k`.
    pub fn exit_times_on(&self, target: i64) -> Result<DVector<f64>> {
        let col = self.target_column(target)?;
        let probs = self.exit_matrix()?;
        let x = self.solve(&DMatrix::from_column_slice(
            probs.nrows(),
            1,
            probs.column(col).as_slice(),
        ))?;
        Ok(x.column(0).into_owned())
    }

    fn target_column(&self, target: i64) -> Result<usize> {
        [self.a - 1, self.a, self.b, self.b + 1]
            .iter()
            .position(|t| *t == target)
            .ok_or_else(|| Error::InvalidEnvironment(format!("{target} is not an absorbing site")))
    }

    fn row(&self, start: i64) -> Result<usize> {
        if self.interior().contains(&start) {
            Ok((start - self.a - 1) as usize)
        } else {
            Err(Error::InvalidEnvironment(format!(
                "start {start} is not interior"
            )))
        }
    }
}

/// `P_start(X_T = target)` for the walk killed on leaving `[a+1, b-1]`.
pub fn solve_exit(env: &Environment, a: i64, b: i64, start: i64, target: i64) -> Result<f64> {
    let sys = AbsorbingSystem::new(env, a, b)?;
    let row = sys.row(start)?;
    let col = sys.target_column(target)?;
    Ok(sys.exit_matrix()?[(row, col)])
}

/// `E_start[T]` for the walk killed on leaving `[a+1, b-1]`.
pub fn solve_expected_exit_time(env: &Environment, a: i64, b: i64, start: i64) -> Result<f64> {
    let sys = AbsorbingSystem::new(env, a, b)?;
    let row = sys.row(start)?;
    Ok(sys.exit_times()?[row])
}

/// `E_start[T; X_T = target]`.
pub fn solve_exit_time_on(
    env: &Environment,
    a: i64,
    b: i64,
    start: i64,
    target: i64,
) -> Result<f64> {
    let sys = AbsorbingSystem::new(env, a, b)?;
    let row = sys.row(start)?;
    Ok(sys.exit_times_on(target)?[row])
}
