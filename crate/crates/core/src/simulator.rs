//! Seeded Monte Carlo simulation of the walk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::environment::{Environment, SiteLaw, SiteWindow};
use crate::{Error, Result};

pub const DEFAULT_STEP_CAP: u64 = 100_000_000;

/// Replicas handled by one task; fixed so that results do not depend on the
/// number of workers.
pub(crate) const BLOCK: usize = 1024;

const BIAS_WARNING_RATE: f64 = 1e-4;

/// A trajectory from `X_0 = 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WalkPath {
    pub positions: Vec<i64>,
    /// Whether the path ends at its ladder time `T_1`.
    pub stopped: bool,
}

impl WalkPath {
    pub fn steps(&self) -> usize {
        self.positions.len().saturating_sub(1)
    }

    /// `T_1`, if the path is stopped.
    pub fn t1(&self) -> Option<u64> {
        self.stopped.then(|| self.steps() as u64)
    }

    /// `X_{T_1}`, if the path is stopped.
    pub fn overshoot(&self) -> Option<i64> {
        self.stopped.then(|| *self.positions.last().unwrap())
    }
}

/// Cumulative thresholds `(q2, q2 + q1, 1 - p2)` for inverse-CDF sampling.
fn thresholds(law: &SiteLaw) -> [f64; 3] {
    [law.q2, law.q2 + law.q1, 1.0 - law.p2]
}

/// Samples steps of the walk in a fixed environment.
pub(crate) struct Stepper<'a> {
    window: SiteWindow<'a, [f64; 3]>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(env: &'a Environment) -> Self {
        Stepper {
            window: SiteWindow::new(env, thresholds),
        }
    }

    #[inline]
    pub(crate) fn step<R: Rng>(&mut self, x: i64, rng: &mut R) -> i64 {
        let c = self.window.get(x);
        let u: f64 = rng.random();
        if u < c[0] {
            x - 2
        } else if u < c[1] {
            x - 1
        } else if u < c[2] {
            x + 1
        } else {
            x + 2
        }
    }

    /// Walks from 0 until the position is positive or `cap` steps are made,
    /// calling `on_step(from, to)` for every step. Returns `(stopped, steps, position)`.
    #[inline]
    pub(crate) fn walk_to_ladder<R: Rng, F: FnMut(i64, i64)>(
        &mut self,
        rng: &mut R,
        cap: u64,
        mut on_step: F,
    ) -> (bool, u64, i64) {
        let mut x = 0i64;
        let mut n = 0u64;
        while n < cap {
            let y = self.step(x, rng);
            on_step(x, y);
            n += 1;
            x = y;
            if x > 0 {
                return (true, n, x);
            }
        }
        (false, n, x)
    }
}

/// Seed of replica `r` in an ensemble with master seed `master`.
pub fn replica_seed(master: u64, r: u64) -> u64 {
    splitmix64(master ^ splitmix64(r.wrapping_add(0x632b_e59b_d9b4_e019)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs `f` on consecutive blocks of replica indices on `workers` threads and
/// returns the block results in block order.
pub(crate) fn par_blocks<A, F>(replicas: u64, workers: usize, f: F) -> Vec<A>
where
    A: Send,
    F: Fn(std::ops::Range<u64>) -> A + Sync,
{
    let blocks = replicas.div_ceil(BLOCK as u64);
    let run = || {
        (0..blocks)
            .into_par_iter()
            .map(|b| f(b * BLOCK as u64..((b + 1) * BLOCK as u64).min(replicas)))
            .collect::<Vec<_>>()
    };
    if workers <= 1 {
        return (0..blocks)
            .map(|b| f(b * BLOCK as u64..((b + 1) * BLOCK as u64).min(replicas)))
            .collect();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("worker pool")
        .install(run)
}

/// Simulates from `X_0 = 0` until `X_n > 0`. A path that reaches `step_cap`
/// steps first is returned inside [`Error::CapReached`].
pub fn run_to_ladder(env: &Environment, seed: u64, step_cap: u64) -> Result<WalkPath> {
    let mut rng = rng_for(seed);
    let mut stepper = Stepper::new(env);
    let mut positions = vec![0i64];
    let (stopped, _, _) = stepper.walk_to_ladder(&mut rng, step_cap, |_, y| positions.push(y));
    let path = WalkPath { positions, stopped };
    if stopped {
        Ok(path)
    } else {
        Err(Error::CapReached(Box::new(path)))
    }
}

/// Exact integer sums over a set of replicas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Sums {
    replicas: u64,
    stopped: u64,
    t: u128,
    t2: u128,
    x: u128,
    x2: u128,
    hist: [u64; 2],
}

impl Sums {
    fn merge(mut self, o: Sums) -> Sums {
        self.replicas += o.replicas;
        self.stopped += o.stopped;
        self.t += o.t;
        self.t2 += o.t2;
        self.x += o.x;
        self.x2 += o.x2;
        self.hist[0] += o.hist[0];
        self.hist[1] += o.hist[1];
        self
    }
}

/// Mean, sample variance and standard error of a quantity from exact sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

impl Moments {
    pub(crate) fn from_sums(n: u64, sum: u128, sum_sq: u128) -> Moments {
        if n == 0 {
            return Moments {
                mean: f64::NAN,
                variance: f64::NAN,
                std_error: f64::NAN,
            };
        }
        let nn = n as u128;
        let mean = sum as f64 / n as f64;
        let variance = if n > 1 {
            // n Σx² - (Σx)² is exact in integers.
            (nn * sum_sq - sum * sum) as f64 / (n as f64 * (n - 1) as f64)
        } else {
            0.0
        };
        Moments {
            mean,
            variance,
            std_error: (variance / n as f64).sqrt(),
        }
    }
}

/// Summary of an ensemble of ladder-time replicas. Abandoned (capped) paths are
/// excluded from the moments and counted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub replicas: u64,
    pub stopped: u64,
    pub abandoned: u64,
    pub t1: Moments,
    pub overshoot: Moments,
    /// Counts of `X_{T_1} = 1` and `X_{T_1} = 2`.
    pub overshoot_hist: [u64; 2],
    /// Set when more than 1e-4 of the paths were abandoned.
    pub bias_warning: bool,
}

pub fn run_ensemble(
    env: &Environment,
    master_seed: u64,
    replicas: u64,
    workers: usize,
    step_cap: u64,
) -> EnsembleStats {
    assert!(replicas >= 1, "an ensemble needs at least one replica");
    let blocks = par_blocks(replicas, workers, |range| {
        let mut stepper = Stepper::new(env);
        let mut sums = Sums::default();
        for r in range {
            let mut rng = rng_for(replica_seed(master_seed, r));
            let (stopped, n, x) = stepper.walk_to_ladder(&mut rng, step_cap, |_, _| {});
            sums.replicas += 1;
            if stopped {
                sums.stopped += 1;
                let (n, x) = (n as u128, x as u128);
                sums.t += n;
                sums.t2 += n * n;
                sums.x += x;
                sums.x2 += x * x;
                sums.hist[(x - 1) as usize] += 1;
            }
        }
        sums
    });
    let s = blocks.into_iter().fold(Sums::default(), Sums::merge);
    let abandoned = s.replicas - s.stopped;
    EnsembleStats {
        replicas: s.replicas,
        stopped: s.stopped,
        abandoned,
        t1: Moments::from_sums(s.stopped, s.t, s.t2),
        overshoot: Moments::from_sums(s.stopped, s.x, s.x2),
        overshoot_hist: s.hist,
        bias_warning: abandoned as f64 > BIAS_WARNING_RATE * s.replicas as f64,
    }
}

/// Endpoint of a fixed-length trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonSummary {
    pub steps: u64,
    pub final_position: i64,
    /// `X_n / n`.
    pub drift: f64,
    pub min_position: i64,
    pub max_position: i64,
}

pub fn run_horizon(env: &Environment, seed: u64, n_steps: u64) -> HorizonSummary {
    let mut rng = rng_for(seed);
    let mut stepper = Stepper::new(env);
    let (mut x, mut lo, mut hi) = (0i64, 0i64, 0i64);
    for _ in 0..n_steps {
        x = stepper.step(x, &mut rng);
        lo = lo.min(x);
        hi = hi.max(x);
    }
    HorizonSummary {
        steps: n_steps,
        final_position: x,
        drift: if n_steps > 0 {
            x as f64 / n_steps as f64
        } else {
            0.0
        },
        min_position: lo,
        max_position: hi,
    }
}
