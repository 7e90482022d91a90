//! The environment seen from the particle: invariant density, its normalizer
//! and the limiting velocity.

use rayon::prelude::*;
use serde::Serialize;

use crate::branching::{
    dot, downward_series, reject_driftless, weights_f64, BranchingModel, ImmigrationLaw, SeriesSum,
};
use crate::environment::{EnvLaw, Environment};
use crate::hitting::{DEFAULT_MAX_DEPTH, DEFAULT_TOL};
use crate::simulator::replica_seed;
use crate::{Error, Result};

/// Ones on the types closed by a step ending one level up: `A1, A2, B1, B2, C1, C2`.
const V2: [f64; 9] = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
/// Ones on the types counted from the level above: `A·, C·`.
const V1: [f64; 9] = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];

pub const DEFAULT_WINDOW: usize = 100_000;
pub const DEFAULT_MARGIN: usize = 20_000;
/// Level cap for the series of a point-mass environment law.
pub const DEFAULT_MAX_LEVELS: usize = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityReport {
    pub pi: f64,
    pub d: f64,
    pub levels_pi: usize,
    pub levels_d: usize,
    pub converged_pi: bool,
    pub converged_d: bool,
}

/// `Π(ω) = 2 + Σ_{j>=0} ρ_{1+j} Q_j ⋯ Q_0 v2 + Σ_{j>=1} ρ_{1+j} Q_j ⋯ Q_1 v1`.
fn density_series(env: &Environment, tol: f64, max_levels: usize) -> Result<(f64, usize, bool)> {
    reject_driftless(env)?;
    let max_levels = max_levels.min(i64::MAX as usize - 2);
    let mut span = if env.is_homogeneous() {
        max_levels
    } else {
        1024usize.min(max_levels.max(1))
    };
    loop {
        let hi = if env.is_homogeneous() {
            1
        } else {
            span as i64 + 1
        };
        let model = BranchingModel::build(env, 0, hi, DEFAULT_TOL, DEFAULT_MAX_DEPTH)?;
        let mut series = SeriesSum::new(2.0);
        let (mut c, mut cp) = (V2, V1);
        for j in 0..span as i64 {
            let sc = model.level(j).scalars();
            c = sc.right_mul(&c);
            let mut col = c;
            if j >= 1 {
                cp = sc.right_mul(&cp);
                for k in 0..9 {
                    col[k] += cp[k];
                }
            }
            let term = dot(&model.level(j + 1).immigration.rho(), &col);
            if series.add(term, tol)? {
                let out = series.finish(true);
                return Ok((out.value, out.levels, true));
            }
        }
        if span >= max_levels {
            let out = series.finish(false);
            return Ok((out.value, out.levels, false));
        }
        span = (span * 4).min(max_levels);
    }
}

/// `Π(ω)` and `D(ω)` at the origin of `env`.
pub fn invariant_density(env: &Environment, tol: f64, max_levels: usize) -> Result<DensityReport> {
    let (pi, levels_pi, converged_pi) = density_series(env, tol, max_levels)?;
    let d = downward_series(env, 2.0, ImmigrationLaw::rho, tol, max_levels)?;
    Ok(DensityReport {
        pi,
        d: d.value,
        levels_pi,
        levels_d: d.levels,
        converged_pi,
        converged_d: d.converged,
    })
}

/// `D(ω) = 2 + ρ_1 Σ_{i<=0} Q_0 ⋯ Q_i w`.
pub fn normalizer(env: &Environment, tol: f64, max_levels: usize) -> Result<f64> {
    let d = downward_series(env, 2.0, ImmigrationLaw::rho, tol, max_levels)?;
    if d.converged {
        Ok(d.value)
    } else {
        Err(Error::SeriesNotConverged {
            levels: d.levels,
            partial: d.value,
            last_term: d.last_term,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VelocityOptions {
    /// Shifts averaged per environment draw.
    pub window: usize,
    /// Levels beyond each end of the window used to settle the series.
    pub margin: usize,
    pub workers: usize,
}

impl Default for VelocityOptions {
    fn default() -> Self {
        VelocityOptions {
            window: DEFAULT_WINDOW,
            margin: DEFAULT_MARGIN,
            workers: 1,
        }
    }
}

/// Ratio estimate with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioEstimate {
    pub value: f64,
    pub std_error: f64,
    pub numerator: f64,
    pub numerator_se: f64,
    pub denominator: f64,
    pub denominator_se: f64,
}

impl RatioEstimate {
    fn from_samples(num: &[f64], den: &[f64]) -> RatioEstimate {
        let n = num.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        let (mn, md) = (mean(num), mean(den));
        let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
            if num.len() < 2 {
                0.0
            } else {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - ma) * (y - mb))
                    .sum::<f64>()
                    / (n - 1.0)
            }
        };
        let (vn, vd, c) = (
            cov(num, mn, num, mn),
            cov(den, md, den, md),
            cov(num, mn, den, md),
        );
        let r = mn / md;
        let var_r = (vn - 2.0 * r * c + r * r * vd) / (md * md * n);
        RatioEstimate {
            value: r,
            std_error: var_r.max(0.0).sqrt(),
            numerator: mn,
            numerator_se: (vn / n).sqrt(),
            denominator: md,
            denominator_se: (vd / n).sqrt(),
        }
    }
}

/// Velocity estimates from the invariant density.
///
/// `drift` uses the numerator factor `E_ω X_1`, `abs` the factor
/// `2ω(-2) + ω(-1) + ω(1) + 2ω(2)`; both share the denominator `E D`.
/// `ladder` weights each shift by the probability that it is a ladder point of
/// the walk, which is the density of the environment seen from the particle
/// when the environment is genuinely random.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityReport {
    pub drift: RatioEstimate,
    pub abs: RatioEstimate,
    pub ladder: RatioEstimate,
    pub samples: usize,
    pub converged_samples: usize,
    pub divergent_fraction: f64,
    pub tol: f64,
    pub window: usize,
    pub margin: usize,
}

impl VelocityReport {
    /// The drift-factor velocity `V_P`.
    pub fn v_p(&self) -> f64 {
        self.drift.value
    }
}

/// Per-draw averages over a window of shifts.
#[derive(Debug, Clone, Copy, PartialEq)]
struct WindowAverages {
    pi_drift: f64,
    pi_abs: f64,
    d: f64,
    ladder_drift: f64,
    ladder: f64,
    converged: bool,
}

fn window_averages(env: &Environment, opts: &VelocityOptions, tol: f64) -> Result<WindowAverages> {
    let (lo, hi) = (0i64, opts.window as i64 - 1);
    let m = opts.margin as i64;
    let (first, last) = (lo - m, hi + m);
    let model = BranchingModel::build(env, first, last + 1, DEFAULT_TOL, DEFAULT_MAX_DEPTH)?;
    let w = weights_f64();
    let n = (hi - lo + 2) as usize;

    // Ladder-point probabilities, started at `first`.
    let mut ladder = vec![0.0; (last - first + 2) as usize];
    let ell = |v: &Vec<f64>, y: i64| {
        if y < first {
            0.0
        } else {
            v[(y - first) as usize]
        }
    };
    ladder[0] = 1.0;
    for y in first + 1..=last {
        let v = ell(&ladder, y - 1) * model.f_top(y - 1)
            + ell(&ladder, y - 2) * (1.0 - model.f_top(y - 2));
        ladder[(y - first) as usize] = v;
    }

    // Backward sums over levels above each shift, kept for `lo ..= hi + 1`.
    let mut y_pi = vec![[0.0; 9]; n];
    let mut y_ladder = vec![[0.0; 9]; n];
    let (mut acc, mut acc_l) = ([0.0; 9], [0.0; 9]);
    for x in (lo..=last).rev() {
        let upper = model.level(x + 1).immigration;
        let sc = model.level(x).scalars();
        let rho = upper.rho();
        let u = upper.mean();
        let l = ladder[(x - first) as usize];
        let mut a = acc;
        let mut b = acc_l;
        for k in 0..9 {
            a[k] += rho[k];
            b[k] += l * u[k];
        }
        acc = sc.left_mul(&a);
        acc_l = sc.left_mul(&b);
        if x <= hi + 1 {
            y_pi[(x - lo) as usize] = acc;
            y_ladder[(x - lo) as usize] = acc_l;
        }
    }

    // Forward sums over levels below each shift.
    let mut t = [0.0; 9];
    let mut sums = [0.0; 5];
    for x in first..=hi {
        let sc = model.level(x).scalars();
        let mut col = t;
        for k in 0..9 {
            col[k] += w[k];
        }
        t = sc.right_mul(&col);
        if x < lo {
            continue;
        }
        let j = (x - lo) as usize;
        let law = env.law_at(x);
        let (drift, abs) = (law.drift(), law.mean_abs_jump());
        assert!(
            (1.0 - 1e-12..=2.0 + 1e-12).contains(&abs),
            "mean jump size {abs} outside [1, 2]"
        );
        let pi = 2.0 + dot(&y_pi[j], &V2) + dot(&y_pi[j + 1], &V1);
        let d = 2.0 + dot(&model.level(x + 1).immigration.rho(), &t);
        let g = ladder[(x - first) as usize] + dot(&y_ladder[j], &V2) + dot(&y_ladder[j + 1], &V1);
        debug_assert!(pi >= 2.0 - 1e-9 && d >= 2.0 - 1e-9);
        sums[0] += pi * drift;
        sums[1] += pi * abs;
        sums[2] += d;
        sums[3] += g * drift;
        sums[4] += g;
    }
    let count = opts.window as f64;

    // The series are cut `margin` levels from the window; check that products of
    // that many mean matrices are negligible.
    let mut row = [1.0; 9];
    for x in lo..(lo + m).min(last) {
        row = model.level(x).scalars().left_mul(&row);
    }
    let decay = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    Ok(WindowAverages {
        pi_drift: sums[0] / count,
        pi_abs: sums[1] / count,
        d: sums[2] / count,
        ladder_drift: sums[3] / count,
        ladder: sums[4] / count,
        converged: decay < tol,
    })
}

pub fn velocity(
    env_law: &EnvLaw,
    env_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<VelocityReport> {
    velocity_with(env_law, env_samples, tol, seed, &VelocityOptions::default())
}

/// Estimates `V_P = E_P(Π d) / E_P(D)`.
///
/// A point mass is evaluated exactly at one site. Otherwise each of the
/// `env_samples` draws is an independent iid environment averaged over
/// `opts.window` shifts; draws whose series fail to settle are excluded.
pub fn velocity_with(
    env_law: &EnvLaw,
    env_samples: usize,
    tol: f64,
    seed: u64,
    opts: &VelocityOptions,
) -> Result<VelocityReport> {
    if let EnvLaw::PointMass(law) = env_law {
        let env = Environment::homogeneous(*law);
        let rep = invariant_density(&env, tol, DEFAULT_MAX_LEVELS)?;
        let one = |num: f64, den: f64| RatioEstimate::from_samples(&[num], &[den]);
        return Ok(VelocityReport {
            drift: one(rep.pi * law.drift(), rep.d),
            abs: one(rep.pi * law.mean_abs_jump(), rep.d),
            ladder: one(law.drift(), 1.0),
            samples: 1,
            converged_samples: (rep.converged_pi && rep.converged_d) as usize,
            divergent_fraction: 0.0,
            tol,
            window: 1,
            margin: 0,
        });
    }
    assert!(env_samples >= 1, "at least one environment sample");
    let eval = |s: usize| {
        let env = Environment::iid(env_law.clone(), replica_seed(seed, s as u64));
        window_averages(&env, opts, tol)
    };
    let results: Vec<Result<WindowAverages>> = if opts.workers <= 1 {
        (0..env_samples).map(eval).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .expect("worker pool")
            .install(|| (0..env_samples).into_par_iter().map(eval).collect())
    };
    let mut kept = Vec::new();
    let mut divergent = 0usize;
    for r in results {
        match r {
            Ok(a) if a.converged => kept.push(a),
            Ok(_) | Err(Error::Diverging { .. }) | Err(Error::NotConverged { .. }) => {
                divergent += 1
            }
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::Diverging {
            levels: opts.window + 2 * opts.margin,
            partial: f64::NAN,
        });
    }
    let col = |f: fn(&WindowAverages) -> f64| kept.iter().map(f).collect::<Vec<_>>();
    let d = col(|a| a.d);
    Ok(VelocityReport {
        drift: RatioEstimate::from_samples(&col(|a| a.pi_drift), &d),
        abs: RatioEstimate::from_samples(&col(|a| a.pi_abs), &d),
        ladder: RatioEstimate::from_samples(&col(|a| a.ladder_drift), &col(|a| a.ladder)),
        samples: env_samples,
        converged_samples: kept.len(),
        divergent_fraction: divergent as f64 / env_samples as f64,
        tol,
        window: opts.window,
        margin: opts.margin,
    })
}
