//! The nine-type branching process of excursions below the starting level.
//!
//! Types are ordered `A1, A2, A3, B1, B2, B3, C1, C2, C3`. A particle at level
//! `i + 1` gives birth to the excursions it contains at level `i`; the mean
//! matrix `Q_i` holds the expected offspring of each type.

use std::sync::OnceLock;

use rand::Rng;
use serde::Serialize;

use crate::environment::{Environment, SiteLaw};
use crate::hitting::{self, LadderProfile, DEFAULT_MAX_DEPTH};
use crate::{Error, Result};

/// Steps contributed to `T_1` by one excursion of each type.
pub const WEIGHTS: [u64; 9] = [2, 2, 1, 1, 1, 0, 2, 2, 1];

pub const DEFAULT_MAX_LEVELS: usize = 100_000;

const DENOM_TOL: f64 = 1e-14;
const SLACK: f64 = 1e-10;
const DIVERGENCE_RUN: usize = 50;

/// Probabilities that an excursion at level `i` is of type A, B or C and
/// closes with sub-type 1, 2 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExcursionIndices {
    pub level: i64,
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub gamma: [f64; 3],
}

impl ExcursionIndices {
    /// `below`, `here`, `above` are the laws at `i - 1`, `i`, `i + 1`;
    /// `f1 = f_{i-2}(i-2, i-1)` and `f2 = f_{i-3}(i-2, i-1)`.
    pub fn from_laws(
        level: i64,
        below: &SiteLaw,
        here: &SiteLaw,
        above: &SiteLaw,
        f1: f64,
        f2: f64,
    ) -> Result<Self> {
        let den = return_denominator(below, f1, f2)?;
        let (u1, u2) = (below.p1 / den, below.p2 / den);
        let split = |total: f64, first: f64, third: f64| -> [f64; 3] {
            let second = total - first - third;
            [
                first,
                if second > -1e-12 {
                    second.max(0.0)
                } else {
                    second
                },
                third,
            ]
        };
        Ok(ExcursionIndices {
            level,
            alpha: split(here.q1, here.q1 * u1, here.q1 * u2),
            beta: split(here.q2, here.q2 * f1 * u1, here.q2 * f1 * u2),
            gamma: split(above.q2, above.q2 * u1, above.q2 * u2),
        })
    }

    /// The nine entries in type order.
    pub fn as_array(&self) -> [f64; 9] {
        let (a, b, g) = (self.alpha, self.beta, self.gamma);
        [a[0], a[1], a[2], b[0], b[1], b[2], g[0], g[1], g[2]]
    }
}

/// `1 - ω_{i-1}(-1) f_{i-2}(i-2,i-1) - ω_{i-1}(-2) f_{i-3}(i-2,i-1)`, the
/// normalizer shared by all indices at level `i`.
fn return_denominator(below: &SiteLaw, f1: f64, f2: f64) -> Result<f64> {
    let den = 1.0 - below.q1 * f1 - below.q2 * f2;
    if den > DENOM_TOL {
        Ok(den)
    } else {
        Err(Error::DegenerateDenominator("excursion indices"))
    }
}

pub fn excursion_indices(env: &Environment, i: i64, tol: f64) -> Result<ExcursionIndices> {
    let f1 = hitting::hit_from_below(env, i - 2, i - 2, tol, DEFAULT_MAX_DEPTH)?.f1;
    let f2 = hitting::hit_from_below(env, i - 3, i - 2, tol, DEFAULT_MAX_DEPTH)?.f1;
    ExcursionIndices::from_laws(
        i,
        &env.law_at(i - 1),
        &env.law_at(i),
        &env.law_at(i + 1),
        f1,
        f2,
    )
}

/// Parameters of the offspring laws at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OffspringScalars {
    pub level: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub s: f64,
    pub t: f64,
    pub v: f64,
}

pub fn offspring_scalars(idx: &ExcursionIndices, beta2_next: f64) -> Result<OffspringScalars> {
    let [a1, a2, a3] = idx.alpha;
    let [b1, b2, b3] = idx.beta;
    let [g1, g2, g3] = idx.gamma;
    let stop = 1.0 - a1 - a2 - b1 - b2;
    if stop <= DENOM_TOL {
        return Err(Error::DegenerateDenominator("stop probability"));
    }
    if a3 + b3 <= DENOM_TOL {
        return Err(Error::DegenerateDenominator("s (alpha3 + beta3)"));
    }
    if g1 + g2 <= DENOM_TOL {
        return Err(Error::DegenerateDenominator("t (gamma1 + gamma2)"));
    }
    if beta2_next <= DENOM_TOL {
        return Err(Error::DegenerateDenominator("v (beta2 at the next level)"));
    }
    let v = 1.0 - g3 / beta2_next;
    if !(-SLACK..=1.0 + SLACK).contains(&v) {
        return Err(Error::DegenerateDenominator("v outside [0, 1]"));
    }
    Ok(OffspringScalars {
        level: idx.level,
        x: a1 / stop,
        y: a2 / stop,
        z: b1 / stop,
        w: b2 / stop,
        s: a3 / (a3 + b3),
        t: g1 / (g1 + g2),
        v: v.clamp(0.0, 1.0),
    })
}

impl OffspringScalars {
    /// `u Q` for a row vector `u`.
    pub fn left_mul(&self, u: &[f64; 9]) -> [f64; 9] {
        let v4 = self.v * u[4];
        let total = u.iter().sum::<f64>() - u[4] + v4;
        let ab = u[1] + u[7] + v4;
        let c = u[3] + u[5] + v4;
        [
            total * self.x,
            total * self.y,
            ab * self.s,
            total * self.z,
            total * self.w,
            ab * (1.0 - self.s),
            c * self.t,
            c * (1.0 - self.t),
            (1.0 - self.v) * u[4],
        ]
    }

    /// `Q c` for a column vector `c`.
    pub fn right_mul(&self, c: &[f64; 9]) -> [f64; 9] {
        let base = self.x * c[0] + self.y * c[1] + self.z * c[3] + self.w * c[4];
        let ab = self.s * c[2] + (1.0 - self.s) * c[5];
        let cc = self.t * c[6] + (1.0 - self.t) * c[7];
        let r5 = self.v * (base + ab + cc) + (1.0 - self.v) * c[8];
        [
            base,
            base + ab,
            base,
            base + cc,
            r5,
            base + cc,
            base,
            base + ab,
            base,
        ]
    }
}

/// The nine excursion counts at one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ExcursionTally {
    pub level: i64,
    pub counts: [u64; 9],
}

impl ExcursionTally {
    pub fn weight(&self) -> u64 {
        self.counts.iter().zip(WEIGHTS).map(|(c, w)| c * w).sum()
    }
}

/// Offspring law of a particle at level `i + 1` (children at level `i`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OffspringLaw {
    pub indices: ExcursionIndices,
    pub scalars: OffspringScalars,
}

impl OffspringLaw {
    pub fn new(indices: ExcursionIndices, beta2_next: f64) -> Result<Self> {
        Ok(OffspringLaw {
            indices,
            scalars: offspring_scalars(&indices, beta2_next)?,
        })
    }

    fn stop(&self) -> f64 {
        let [a1, a2, _] = self.indices.alpha;
        let [b1, b2, _] = self.indices.beta;
        1.0 - a1 - a2 - b1 - b2
    }

    /// `P(A1 = a, A2 = b, B1 = c, B2 = d)` for the negative-multinomial part.
    fn negative_multinomial(&self, counts: [u64; 4]) -> f64 {
        let [a1, a2, _] = self.indices.alpha;
        let [b1, b2, _] = self.indices.beta;
        let mut log_p = self.stop().ln() + ln_multinomial(&counts);
        for (n, p) in counts.iter().zip([a1, a2, b1, b2]) {
            if *n > 0 {
                if p <= 0.0 {
                    return 0.0;
                }
                log_p += *n as f64 * p.ln();
            }
        }
        log_p.exp()
    }

    /// Exact probability that a parent of type `parent` (1 to 9) has the
    /// given children.
    pub fn pmf(&self, parent: usize, child: &[u64; 9]) -> f64 {
        assert!((1..=9).contains(&parent), "parent type must be 1..=9");
        let sc = &self.scalars;
        let [_, _, a3, _, _, b3, c1, c2, c3] = *child;
        let nm = || self.negative_multinomial([child[0], child[1], child[3], child[4]]);
        let s_split = match (a3, b3) {
            (1, 0) => Some(sc.s),
            (0, 1) => Some(1.0 - sc.s),
            _ => None,
        };
        let t_split = match (c1, c2) {
            (1, 0) => Some(sc.t),
            (0, 1) => Some(1.0 - sc.t),
            _ => None,
        };
        match parent {
            1 | 3 | 7 | 9 => {
                if a3 + b3 + c1 + c2 + c3 == 0 {
                    nm()
                } else {
                    0.0
                }
            }
            2 | 8 => match s_split {
                Some(p) if c1 + c2 + c3 == 0 => p * nm(),
                _ => 0.0,
            },
            4 | 6 => match t_split {
                Some(p) if a3 + b3 + c3 == 0 => p * nm(),
                _ => 0.0,
            },
            _ => {
                let mut unit_c3 = [0u64; 9];
                unit_c3[8] = 1;
                if *child == unit_c3 {
                    return 1.0 - sc.v;
                }
                match (s_split, t_split) {
                    (Some(ps), Some(pt)) if c3 == 0 => sc.v * ps * pt * nm(),
                    _ => 0.0,
                }
            }
        }
    }

    /// Draws the children of a parent of type `parent` (1 to 9).
    pub fn sample<R: Rng + ?Sized>(&self, parent: usize, rng: &mut R) -> ExcursionTally {
        assert!((1..=9).contains(&parent), "parent type must be 1..=9");
        let sc = &self.scalars;
        let mut counts = [0u64; 9];
        let nm = |counts: &mut [u64; 9], rng: &mut R| {
            let [a1, a2, _] = self.indices.alpha;
            let [b1, b2, _] = self.indices.beta;
            let cum = [a1, a1 + a2, a1 + a2 + b1, a1 + a2 + b1 + b2];
            loop {
                let u: f64 = rng.random();
                match cum.iter().position(|c| u < *c) {
                    Some(0) => counts[0] += 1,
                    Some(1) => counts[1] += 1,
                    Some(2) => counts[3] += 1,
                    Some(_) => counts[4] += 1,
                    None => break,
                }
            }
        };
        let s_split = |counts: &mut [u64; 9], rng: &mut R| {
            if rng.random::<f64>() < sc.s {
                counts[2] = 1;
            } else {
                counts[5] = 1;
            }
        };
        let t_split = |counts: &mut [u64; 9], rng: &mut R| {
            if rng.random::<f64>() < sc.t {
                counts[6] = 1;
            } else {
                counts[7] = 1;
            }
        };
        match parent {
            1 | 3 | 7 | 9 => nm(&mut counts, rng),
            2 | 8 => {
                s_split(&mut counts, rng);
                nm(&mut counts, rng);
            }
            4 | 6 => {
                t_split(&mut counts, rng);
                nm(&mut counts, rng);
            }
            _ => {
                if rng.random::<f64>() < sc.v {
                    s_split(&mut counts, rng);
                    t_split(&mut counts, rng);
                    nm(&mut counts, rng);
                } else {
                    counts[8] = 1;
                }
            }
        }
        ExcursionTally {
            level: self.indices.level,
            counts,
        }
    }
}

fn ln_multinomial(counts: &[u64; 4]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut out = ln_factorial(n);
    for c in counts {
        out -= ln_factorial(*c);
    }
    out
}

fn ln_factorial(n: u64) -> f64 {
    const CACHED: usize = 256;
    static TABLE: OnceLock<[f64; CACHED]> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0.0; CACHED];
        for k in 2..CACHED {
            t[k] = t[k - 1] + (k as f64).ln();
        }
        t
    });
    match table.get(n as usize) {
        Some(v) => *v,
        None => table[CACHED - 1] + (CACHED as u64..=n).map(|k| (k as f64).ln()).sum::<f64>(),
    }
}

/// The 9×9 mean offspring matrix `Q_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanMatrix {
    pub level: i64,
    pub rows: [[f64; 9]; 9],
}

pub fn mean_matrix(sc: &OffspringScalars) -> MeanMatrix {
    let base = [sc.x, sc.y, 0.0, sc.z, sc.w, 0.0, 0.0, 0.0, 0.0];
    let mut rows = [base; 9];
    for r in [1, 7] {
        rows[r][2] = sc.s;
        rows[r][5] = 1.0 - sc.s;
    }
    for r in [3, 5] {
        rows[r][6] = sc.t;
        rows[r][7] = 1.0 - sc.t;
    }
    let mut r5 = [
        sc.x,
        sc.y,
        sc.s,
        sc.z,
        sc.w,
        1.0 - sc.s,
        sc.t,
        1.0 - sc.t,
        0.0,
    ]
    .map(|e| e * sc.v);
    r5[8] = 1.0 - sc.v;
    rows[4] = r5;
    MeanMatrix {
        level: sc.level,
        rows,
    }
}

/// Law of the immigrant's type at level `i`: types A1, A2, A3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImmigrationLaw {
    pub level: i64,
    pub pi: [f64; 3],
}

impl ImmigrationLaw {
    /// `below` is the law at `i - 1`; the probabilities equal
    /// `α_{i,j} / ω_i(-1)` but stay defined when `ω_i(-1) = 0`.
    pub fn from_laws(level: i64, below: &SiteLaw, f1: f64, f2: f64) -> Result<Self> {
        let den = return_denominator(below, f1, f2)?;
        let (p1, p3) = (below.p1 / den, below.p2 / den);
        Ok(ImmigrationLaw {
            level,
            pi: [p1, (1.0 - p1 - p3).max(0.0), p3],
        })
    }

    /// `E U_i` for the immigrant: `(π1, π2, π3, 0, …, 0)`.
    pub fn mean(&self) -> [f64; 9] {
        let mut u = [0.0; 9];
        u[..3].copy_from_slice(&self.pi);
        u
    }

    /// The immigrant's type law conditioned on `A1 ∪ A2`, with unit weight on `A3`.
    pub fn rho(&self) -> [f64; 9] {
        let [p1, p2, _] = self.pi;
        let mut r = [0.0; 9];
        if p1 + p2 > 0.0 {
            r[0] = p1 / (p1 + p2);
            r[1] = p2 / (p1 + p2);
        }
        r[2] = 1.0;
        r
    }
}

/// Everything the branching process needs at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BranchLevel {
    pub law: OffspringLaw,
    pub immigration: ImmigrationLaw,
}

impl BranchLevel {
    pub fn scalars(&self) -> &OffspringScalars {
        &self.law.scalars
    }

    pub fn mean_matrix(&self) -> MeanMatrix {
        mean_matrix(&self.law.scalars)
    }
}

#[derive(Debug, Clone)]
enum Storage {
    Constant {
        level: BranchLevel,
        f_top: f64,
    },
    Window {
        lo: i64,
        levels: Vec<BranchLevel>,
        profile: LadderProfile,
    },
}

/// Branching data for a range of levels (all levels for homogeneous environments).
#[derive(Debug, Clone)]
pub struct BranchingModel {
    storage: Storage,
    pub depth: usize,
}

impl BranchingModel {
    /// Builds levels `lo..=hi`. Homogeneous environments are computed once.
    pub fn build(env: &Environment, lo: i64, hi: i64, tol: f64, max_depth: usize) -> Result<Self> {
        if let Some(law) = env.as_homogeneous() {
            let top = hitting::hit_from_below(env, 0, 0, tol, max_depth)?;
            let below = hitting::hit_from_below(env, -1, 0, tol, max_depth)?;
            let idx = ExcursionIndices::from_laws(0, &law, &law, &law, top.f1, below.f1)?;
            let level = BranchLevel {
                law: OffspringLaw::new(idx, idx.beta[1])?,
                immigration: ImmigrationLaw::from_laws(0, &law, top.f1, below.f1)?,
            };
            return Ok(BranchingModel {
                storage: Storage::Constant {
                    level,
                    f_top: top.f1,
                },
                depth: top.depth.max(below.depth),
            });
        }
        assert!(lo <= hi, "empty level range");
        // Level j needs f at threshold j - 2; the v scalar of level hi needs level hi + 1.
        let profile = hitting::ladder_profile(env, lo - 2, hi - 1, tol, max_depth)?;
        let laws = env.laws(lo - 1, hi + 2);
        let at = |i: i64| &laws[(i - lo + 1) as usize];
        let mut indices = Vec::with_capacity((hi - lo + 2) as usize);
        let mut immigration = Vec::with_capacity(indices.capacity());
        for i in lo..=hi + 1 {
            let (f1, f2) = (profile.top(i - 2), profile.below(i - 2));
            indices.push(ExcursionIndices::from_laws(
                i,
                at(i - 1),
                at(i),
                at(i + 1),
                f1,
                f2,
            )?);
            immigration.push(ImmigrationLaw::from_laws(i, at(i - 1), f1, f2)?);
        }
        let levels = (0..indices.len() - 1)
            .map(|j| {
                Ok(BranchLevel {
                    law: OffspringLaw::new(indices[j], indices[j + 1].beta[1])?,
                    immigration: immigration[j],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let depth = profile.depth;
        Ok(BranchingModel {
            storage: Storage::Window {
                lo,
                levels,
                profile,
            },
            depth,
        })
    }

    /// Data at level `i`; panics outside the built window.
    pub fn level(&self, i: i64) -> &BranchLevel {
        match &self.storage {
            Storage::Constant { level, .. } => level,
            Storage::Window { lo, levels, .. } => {
                let j = i - lo;
                assert!(
                    j >= 0 && (j as usize) < levels.len(),
                    "level {i} outside the model window"
                );
                &levels[j as usize]
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.storage, Storage::Constant { .. })
    }

    /// `f_i(i, i+1)`, available for `i` from `lo - 2` to `hi - 1`.
    pub fn f_top(&self, i: i64) -> f64 {
        match &self.storage {
            Storage::Constant { f_top, .. } => *f_top,
            Storage::Window { profile, .. } => profile.top(i),
        }
    }

    /// `E U_i = u_1 Q_0 Q_{-1} ⋯ Q_i` for `i <= 0`.
    pub fn expected_tally(&self, i: i64) -> [f64; 9] {
        assert!(i <= 0, "tallies live at levels <= 0");
        let mut u = self.level(1).immigration.mean();
        for j in (i..=0).rev() {
            u = self.level(j).scalars().left_mul(&u);
        }
        u
    }
}

/// Expected tally at level `i <= 0`.
pub fn expected_tally(env: &Environment, i: i64, tol: f64) -> Result<[f64; 9]> {
    Ok(BranchingModel::build(env, i, 1, tol, DEFAULT_MAX_DEPTH)?.expected_tally(i))
}

/// Partial sum of the `E[T_1]` series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct T1Series {
    pub value: f64,
    /// Number of levels summed.
    pub levels: usize,
    pub last_term: f64,
    pub converged: bool,
}

pub(crate) struct SeriesSum {
    sum: f64,
    prev: f64,
    run: usize,
    levels: usize,
}

impl SeriesSum {
    pub(crate) fn new(start: f64) -> Self {
        SeriesSum {
            sum: start,
            prev: f64::INFINITY,
            run: 0,
            levels: 0,
        }
    }

    /// Adds a term; returns `Ok(true)` once the term drops below `tol`.
    pub(crate) fn add(&mut self, term: f64, tol: f64) -> Result<bool> {
        debug_assert!(term >= -1e-12, "negative series term {term}");
        self.sum += term;
        self.levels += 1;
        self.run = if term >= self.prev { self.run + 1 } else { 0 };
        self.prev = term;
        if self.run >= DIVERGENCE_RUN {
            return Err(Error::Diverging {
                levels: self.levels,
                partial: self.sum,
            });
        }
        Ok(term.abs() < tol)
    }

    pub(crate) fn finish(&self, converged: bool) -> T1Series {
        T1Series {
            value: self.sum,
            levels: self.levels,
            last_term: self.prev,
            converged,
        }
    }
}

pub(crate) fn weights_f64() -> [f64; 9] {
    WEIGHTS.map(|w| w as f64)
}

pub(crate) fn dot(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E[T_1] = 1 + Σ_{i<=0} u_1 Q_0 ⋯ Q_i w`, summed until a term falls below
/// `tol` or `max_levels` levels are used.
pub fn expected_t1(env: &Environment, tol: f64, max_levels: usize) -> Result<T1Series> {
    downward_series(env, 1.0, ImmigrationLaw::mean, tol, max_levels)
}

/// Homogeneous walks without positive drift have infinite ladder-time mean;
/// their series terms tend to a constant that the run detector can miss.
pub(crate) fn reject_driftless(env: &Environment) -> Result<()> {
    match env.as_homogeneous() {
        Some(law) if law.drift() <= 0.0 => Err(Error::Diverging {
            levels: 0,
            partial: f64::INFINITY,
        }),
        _ => Ok(()),
    }
}

/// `base + Σ_{i<=0} start(u at level 1) Q_0 ⋯ Q_i w`.
pub(crate) fn downward_series(
    env: &Environment,
    base: f64,
    start: fn(&ImmigrationLaw) -> [f64; 9],
    tol: f64,
    max_levels: usize,
) -> Result<T1Series> {
    reject_driftless(env)?;
    let w = weights_f64();
    let max_levels = max_levels.min(i64::MAX as usize - 2);
    let mut span = if env.is_homogeneous() {
        max_levels
    } else {
        1024usize.min(max_levels.max(1))
    };
    loop {
        let lo = if env.is_homogeneous() {
            0
        } else {
            1 - span as i64
        };
        let model = BranchingModel::build(env, lo, 1, hitting::DEFAULT_TOL, DEFAULT_MAX_DEPTH)?;
        let mut u = start(&model.level(1).immigration);
        let mut series = SeriesSum::new(base);
        for j in 0..span as i64 {
            u = model.level(-j).scalars().left_mul(&u);
            if series.add(dot(&u, &w), tol)? {
                return Ok(series.finish(true));
            }
        }
        if span >= max_levels {
            return Ok(series.finish(false));
        }
        span = (span * 4).min(max_levels);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row1() -> SiteLaw {
        SiteLaw::new(0.08, 0.36, 0.21, 0.35).unwrap()
    }

    fn row1_level() -> BranchLevel {
        let env = Environment::homogeneous(row1());
        *BranchingModel::build(&env, 0, 0, 1e-13, DEFAULT_MAX_DEPTH)
            .unwrap()
            .level(0)
    }

    #[test]
    fn structured_products_match_dense() {
        let lvl = row1_level();
        let q = lvl.mean_matrix().rows;
        let u = [0.3, 1.0, -0.2, 0.7, 2.0, 0.1, -1.0, 0.4, 0.9];
        let left = lvl.scalars().left_mul(&u);
        let right = lvl.scalars().right_mul(&u);
        for j in 0..9 {
            let l: f64 = (0..9).map(|r| u[r] * q[r][j]).sum();
            let r: f64 = (0..9).map(|c| q[j][c] * u[c]).sum();
            assert!((left[j] - l).abs() < 1e-14);
            assert!((right[j] - r).abs() < 1e-14);
        }
    }

    #[test]
    fn mean_matrix_layout() {
        let lvl = row1_level();
        let sc = lvl.scalars();
        let q = lvl.mean_matrix().rows;
        assert_eq!(q[0], [sc.x, sc.y, 0.0, sc.z, sc.w, 0.0, 0.0, 0.0, 0.0]);
        for r in [2, 6, 8] {
            assert_eq!(q[r], q[0]);
        }
        assert_eq!(q[1], q[7]);
        assert_eq!(q[3], q[5]);
        assert_eq!(q[4][8], 1.0 - sc.v);
    }

    #[test]
    fn index_sums() {
        let idx = row1_level().law.indices;
        let law = row1();
        assert!((idx.alpha.iter().sum::<f64>() - law.q1).abs() < 1e-12);
        assert!((idx.beta.iter().sum::<f64>() - law.q2).abs() < 1e-12);
        assert!((idx.gamma.iter().sum::<f64>() - law.q2).abs() < 1e-12);
    }

    #[test]
    fn no_upward_exit_below() {
        let below = SiteLaw::new(0.5, 0.5, 0.0, 0.0).unwrap();
        let idx = ExcursionIndices::from_laws(0, &below, &row1(), &row1(), 0.3, 0.2).unwrap();
        assert_eq!(idx.alpha, [0.0, row1().q1, 0.0]);
    }

    #[test]
    fn sampler_degenerate_stop() {
        let idx = ExcursionIndices {
            level: 0,
            alpha: [0.0, 0.0, 0.3],
            beta: [0.0, 0.0, 0.2],
            gamma: [0.1, 0.1, 0.1],
        };
        let law = OffspringLaw::new(idx, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(law.sample(1, &mut rng).counts, [0; 9]);
        }
        assert_eq!(law.pmf(1, &[0; 9]), 1.0);
    }

    #[test]
    fn zero_alpha_gives_zero_x() {
        let idx = ExcursionIndices {
            level: 0,
            alpha: [0.0, 0.1, 0.3],
            beta: [0.1, 0.1, 0.2],
            gamma: [0.1, 0.1, 0.1],
        };
        assert_eq!(offspring_scalars(&idx, 0.2).unwrap().x, 0.0);
        let mut bad = idx;
        bad.alpha[2] = 0.0;
        bad.beta[2] = 0.0;
        assert!(matches!(
            offspring_scalars(&bad, 0.2),
            Err(Error::DegenerateDenominator(_))
        ));
    }

    #[test]
    fn zero_drift_diverges() {
        let env = Environment::homogeneous(SiteLaw::new(0.2, 0.3, 0.3, 0.2).unwrap());
        assert!(matches!(
            expected_t1(&env, 1e-12, 1000),
            Err(Error::Diverging { .. })
        ));
    }
}
