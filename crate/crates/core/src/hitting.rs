//! Exit probabilities from finite intervals by transfer matrices, their limits
//! as the lower end recedes, and the homogeneous spectral shortcut.
//!
//! With `Π = M_{a+1} ⋯ M_{b-1}`, the closed forms for the exit probabilities
//! at `b` and `b + 1` are ratios of 2×2 minors built from the rows
//! `R = e1 Π` and `S = Σ_l e1 M_l ⋯ M_{b-1}`. Both rows grow geometrically and
//! become nearly parallel, so the minors are computed from their exterior
//! product `W = R ∧ S`, which is propagated with the second compound matrix of
//! each step matrix instead of being formed by subtraction.

use serde::Serialize;

use crate::environment::{Environment, SiteLaw, DEFAULT_ELLIPTICITY};
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_DEPTH: usize = 1 << 20;
const FIRST_DEPTH: usize = 16;
const SLACK: f64 = 1e-10;
const DET_TOL: f64 = 1e-13;

/// The 3×3 step matrix `M_k`; rows 2 and 3 are `(1,0,0)` and `(0,1,0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMatrix {
    pub rows: [[f64; 3]; 3],
}

impl StepMatrix {
    pub fn first_row(&self) -> [f64; 3] {
        self.rows[0]
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.rows;
        [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
    }
}

pub fn build_step_matrix(law: &SiteLaw) -> Result<StepMatrix> {
    if !law.is_admissible(DEFAULT_ELLIPTICITY) {
        return Err(Error::NotAdmissible {
            site: None,
            q2: law.q2,
        });
    }
    Ok(StepMatrix {
        rows: [first_row(law), [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    })
}

#[inline]
fn first_row(law: &SiteLaw) -> [f64; 3] {
    [
        -(law.q1 + law.q2) / law.q2,
        (law.p1 + law.p2) / law.q2,
        law.p2 / law.q2,
    ]
}

/// Boundary exit probabilities of `[a+1, b-1]`:
/// `[P_{b-1}(b), P_{b-2}(b), P_{b-1}(b+1), P_{b-2}(b+1)]`.
type Boundary = [f64; 4];

/// Upward sweep over `b` for a fixed lower end `a`.
///
/// `R` and `S` share the log scale `lr`; `W` carries its own scale `lw`.
struct Sweep {
    a: i64,
    b: i64,
    r: [f64; 3],
    s: [f64; 3],
    w: [f64; 3],
    lr: f64,
    lw: f64,
}

impl Sweep {
    fn new(a: i64) -> Self {
        Sweep {
            a,
            b: a + 1,
            r: [0.0; 3],
            s: [0.0; 3],
            w: [0.0; 3],
            lr: 0.0,
            lw: 0.0,
        }
    }

    /// Feeds the law at site `b` (the current upper end) and moves the upper
    /// end to `b + 1`, returning the boundary probabilities for the new interval.
    fn push(&mut self, law: &SiteLaw) -> Result<Boundary> {
        let site = self.b;
        if !law.is_admissible(DEFAULT_ELLIPTICITY) {
            return Err(Error::NotAdmissible {
                site: Some(site),
                q2: law.q2,
            });
        }
        let m0 = first_row(law);
        if self.b == self.a + 1 {
            self.r = m0;
            self.s = m0;
        } else {
            // W <- (W + R ∧ e1) C2(M), R <- R M, S <- (S + e1) M.
            let k = (self.lr - self.lw).exp();
            let x = [
                self.w[0] - self.r[1] * k,
                self.w[1] - self.r[2] * k,
                self.w[2],
            ];
            self.w = wedge_step(x, &m0);
            self.r = row_step(self.r, &m0);
            let e = (-self.lr).exp();
            self.s = row_step([self.s[0] + e, self.s[1], self.s[2]], &m0);
        }
        self.b += 1;

        let scale = self.r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale > 0.0 && scale.is_finite() {
            for v in self.r.iter_mut().chain(self.s.iter_mut()) {
                *v /= scale;
            }
            self.lr += scale.ln();
        }
        let wscale = self.w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if wscale > 0.0 && wscale.is_finite() {
            for v in self.w.iter_mut() {
                *v /= wscale;
            }
            self.lw += wscale.ln();
        }
        self.boundary()
    }

    fn boundary(&self) -> Result<Boundary> {
        let k = (self.lr - self.lw).exp();
        let [r1, r2, r3] = self.r.map(|v| v * k);
        let [w12, w13, w23] = self.w;
        let det = -(r1 - r2) - w12;
        let size = r1.abs().max(r2.abs()).max(w12.abs());
        if !det.is_finite() || det.abs() <= DET_TOL * size {
            return Err(self.degenerate(format!("determinant {det:e}")));
        }
        let raw = [
            ((r2 - r3) - w12 + w13) / det,
            (-w12 + w13 - w23) / det,
            (r3 - w13) / det,
            (w23 - w13) / det,
        ];
        let mut out = [0.0; 4];
        for (o, v) in out.iter_mut().zip(raw) {
            *o = clamp_probability(v)
                .ok_or_else(|| self.degenerate(format!("probability {v} out of range")))?;
        }
        Ok(out)
    }

    fn degenerate(&self, detail: String) -> Error {
        Error::DegenerateSystem {
            a: self.a,
            b: self.b,
            detail,
        }
    }
}

#[inline]
fn row_step(v: [f64; 3], m0: &[f64; 3]) -> [f64; 3] {
    [v[0] * m0[0] + v[1], v[0] * m0[1] + v[2], v[0] * m0[2]]
}

/// `x ↦ x C2(M)` on wedge coordinates `(12, 13, 23)`, specialised to the
/// companion structure of `M`.
#[inline]
fn wedge_step(x: [f64; 3], m0: &[f64; 3]) -> [f64; 3] {
    // Rows of C2(M) for the pairs (1,2), (1,3), (2,3).
    // (1,2): (-m0[1], -m0[2], 0); (1,3): (m0[0], 0, -m0[2]); (2,3): (1, 0, 0).
    [
        -x[0] * m0[1] + x[1] * m0[0] + x[2],
        -x[0] * m0[2],
        -x[1] * m0[2],
    ]
}

fn clamp_probability(v: f64) -> Option<f64> {
    if v.is_finite() && (-SLACK..=1.0 + SLACK).contains(&v) {
        Some(v.clamp(0.0, 1.0))
    } else {
        None
    }
}

/// Exit probabilities of the interval `[a+1, b-1]` at `b` and `b + 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitProbTable {
    pub a: i64,
    pub b: i64,
    /// `P_k(b)` for `k = a+1 ..= b-1`.
    pub to_b: Vec<f64>,
    /// `P_k(b+1)` for `k = a+1 ..= b-1`.
    pub to_b1: Vec<f64>,
}

impl ExitProbTable {
    /// `P_k(target)` for `k` in `[a-1, b+1]` and `target` in `{b, b+1}`;
    /// boundary sites are absorbing.
    pub fn prob(&self, k: i64, target: i64) -> f64 {
        assert!(
            target == self.b || target == self.b + 1,
            "target must be b or b+1"
        );
        if k <= self.a || k >= self.b {
            return (k == target) as u8 as f64;
        }
        let j = (k - self.a - 1) as usize;
        if target == self.b {
            self.to_b[j]
        } else {
            self.to_b1[j]
        }
    }

    /// Probability of leaving through `{a-1, a}`.
    pub fn below(&self, k: i64) -> f64 {
        (1.0 - self.prob(k, self.b) - self.prob(k, self.b + 1)).clamp(0.0, 1.0)
    }
}

pub fn exit_probabilities(env: &Environment, a: i64, b: i64) -> Result<ExitProbTable> {
    if b < a + 2 {
        return Err(Error::InvalidEnvironment(format!(
            "interval [{a}+1, {b}-1] is empty"
        )));
    }
    let n = (b - a - 1) as usize;
    // coef[j] = (P_k(a,k+2,k+2), P_k(a,k+2,k+3)) for k = a+1+j.
    let mut coef = Vec::with_capacity(n);
    let mut sweep = Sweep::new(a);
    let mut last = [0.0; 4];
    for site in a + 1..b {
        last = sweep.push(&env.law_at(site))?;
        if site >= a + 2 {
            coef.push((last[1], last[3]));
        }
    }
    let mut to_b = vec![0.0; n];
    let mut to_b1 = vec![0.0; n];
    to_b[n - 1] = last[0];
    to_b1[n - 1] = last[2];
    if n >= 2 {
        to_b[n - 2] = last[1];
        to_b1[n - 2] = last[3];
    }
    // P_k = A_k P_{k+2} + B_k P_{k+3}, with P_b = (1, 0) and P_{b+1} = (0, 1).
    for j in (0..n.saturating_sub(2)).rev() {
        let (ak, bk) = coef[j];
        let (b2, b21) = (to_b[j + 2], to_b1[j + 2]);
        let (b3, b31) = if j + 3 < n {
            (to_b[j + 3], to_b1[j + 3])
        } else {
            (1.0, 0.0)
        };
        to_b[j] = (ak * b2 + bk * b3).clamp(0.0, 1.0);
        to_b1[j] = (ak * b21 + bk * b31).clamp(0.0, 1.0);
    }
    Ok(ExitProbTable { a, b, to_b, to_b1 })
}

/// `f_k(i, i+1)` and `f_k(i, i+2)`: probabilities that the walk started at `k`
/// first enters `(i, ∞)` at `i + 1`, resp. `i + 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HitProfile {
    pub k: i64,
    pub i: i64,
    pub f1: f64,
    pub f2: f64,
    /// Final value of `i - a`.
    pub depth: usize,
    pub converged: bool,
}

fn hit_at_depth(env: &Environment, k: i64, i: i64, depth: usize) -> Result<(f64, f64)> {
    let a = i - depth as i64;
    let b = i + 1;
    if k >= i - 1 {
        let mut sweep = Sweep::new(a);
        let mut last = [0.0; 4];
        for site in a + 1..b {
            last = sweep.push(&env.law_at(site))?;
        }
        return Ok(if k == i {
            (last[0], last[2])
        } else {
            (last[1], last[3])
        });
    }
    let table = exit_probabilities(env, a, b)?;
    Ok((table.prob(k, b), table.prob(k, b + 1)))
}

/// Like [`hit_from_below`], but reports non-convergence through the
/// `converged` flag instead of an error.
pub fn probe_from_below(
    env: &Environment,
    k: i64,
    i: i64,
    tol: f64,
    max_depth: usize,
) -> Result<HitProfile> {
    if k > i {
        return Err(Error::InvalidEnvironment(format!(
            "start {k} lies above threshold {i}"
        )));
    }
    let mut depth = FIRST_DEPTH;
    while depth < (i - k + 2) as usize {
        depth *= 2;
    }
    let mut prev = hit_at_depth(env, k, i, depth)?;
    loop {
        if depth * 2 > max_depth.max(FIRST_DEPTH) {
            return Ok(HitProfile {
                k,
                i,
                f1: prev.0,
                f2: prev.1,
                depth,
                converged: false,
            });
        }
        depth *= 2;
        let next = hit_at_depth(env, k, i, depth)?;
        if (next.0 - prev.0).abs() < tol && (next.1 - prev.1).abs() < tol {
            return Ok(HitProfile {
                k,
                i,
                f1: next.0,
                f2: next.1,
                depth,
                converged: true,
            });
        }
        prev = next;
    }
}

/// The `a → -∞` limit of the exit probabilities, by doubling `i - a` from 16
/// until successive values agree within `tol`.
pub fn hit_from_below(
    env: &Environment,
    k: i64,
    i: i64,
    tol: f64,
    max_depth: usize,
) -> Result<HitProfile> {
    let profile = probe_from_below(env, k, i, tol, max_depth)?;
    if profile.converged {
        return Ok(profile);
    }
    let half = hit_at_depth(env, k, i, profile.depth / 2)?;
    Err(Error::NotConverged {
        depth: profile.depth,
        last: (profile.f1, profile.f2),
        prev: half,
    })
}

/// `f_i(i, i+1)` and `f_{i-1}(i, i+1)` for every level `i` of a window.
#[derive(Debug, Clone)]
pub struct LadderProfile {
    pub lo: i64,
    /// `f_i(i, i+1)` for `i = lo ..= hi`.
    pub top: Vec<f64>,
    /// `f_{i-1}(i, i+1)` for `i = lo ..= hi`.
    pub below: Vec<f64>,
    pub depth: usize,
}

impl LadderProfile {
    pub fn hi(&self) -> i64 {
        self.lo + self.top.len() as i64 - 1
    }

    pub fn top(&self, i: i64) -> f64 {
        self.top[(i - self.lo) as usize]
    }

    pub fn below(&self, i: i64) -> f64 {
        self.below[(i - self.lo) as usize]
    }
}

/// Computes the limits for all levels in `lo..=hi` with one sweep, from the
/// depth at which level `lo` converges.
pub fn ladder_profile(
    env: &Environment,
    lo: i64,
    hi: i64,
    tol: f64,
    max_depth: usize,
) -> Result<LadderProfile> {
    let depth = hit_from_below(env, lo, lo, tol, max_depth)?.depth;
    let a = lo - depth as i64;
    let mut sweep = Sweep::new(a);
    let n = (hi - lo + 1).max(0) as usize;
    let mut top = Vec::with_capacity(n);
    let mut below = Vec::with_capacity(n);
    for site in a + 1..=hi {
        let out = sweep.push(&env.law_at(site))?;
        if site >= lo {
            top.push(out[0]);
            below.push(out[1]);
        }
    }
    Ok(LadderProfile {
        lo,
        top,
        below,
        depth,
    })
}

/// The root of the homogeneous characteristic cubic in `[-1, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomogeneousRoot {
    pub h: f64,
    /// Whether both remaining roots have modulus at least 1.
    pub g_abs_ge_1: bool,
    /// `F(h)`.
    pub residual: f64,
}

impl HomogeneousRoot {
    /// `P^0(X_{T_1} = 1)`.
    pub fn f1(&self) -> f64 {
        1.0 + self.h
    }

    /// `P^0(X_{T_1} = 2)`.
    pub fn f2(&self) -> f64 {
        -self.h
    }

    /// `E^0 X_{T_1} = 1 - h`.
    pub fn mean_overshoot(&self) -> f64 {
        1.0 - self.h
    }
}

/// Coefficients `(A, B, C)` of `F(λ) = λ³ + Aλ² + Bλ + C`.
fn cubic(law: &SiteLaw) -> (f64, f64, f64) {
    (
        (law.q1 + law.q2) / law.q2,
        -(law.p1 + law.p2) / law.q2,
        -law.p2 / law.q2,
    )
}

pub fn homogeneous_root(law: &SiteLaw) -> Result<HomogeneousRoot> {
    if !law.is_admissible(DEFAULT_ELLIPTICITY) {
        return Err(Error::NotAdmissible {
            site: None,
            q2: law.q2,
        });
    }
    let drift = law.drift();
    if drift < 0.0 {
        return Err(Error::DriftNegative(drift));
    }
    let (ca, cb, cc) = cubic(law);
    let f = |x: f64| ((x + ca) * x + cb) * x + cc;
    // F(-1) = (q1 + p1)/q2 >= 0 and F(0) = -p2/q2 <= 0.
    let (mut lo, mut hi) = (-1.0f64, 0.0f64);
    if f(hi) == 0.0 {
        lo = hi;
    } else if f(lo) == 0.0 {
        hi = lo;
    }
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let h = 0.5 * (lo + hi);
    // F(λ) = (λ - h)(λ² + c1 λ + c0).
    let c1 = ca + h;
    let c0 = cb + h * c1;
    let disc = c1 * c1 - 4.0 * c0;
    let min_modulus = if disc >= 0.0 {
        let sq = disc.sqrt();
        ((-c1 + sq) / 2.0).abs().min(((-c1 - sq) / 2.0).abs())
    } else {
        c0.sqrt()
    };
    Ok(HomogeneousRoot {
        h,
        g_abs_ge_1: min_modulus >= 1.0 - 1e-9,
        residual: f(h),
    })
}
