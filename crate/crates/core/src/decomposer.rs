//! Splits a stopped path into excursions and checks the ladder-time identity
//! `T_1 = 1 + Σ_{i<=0} U_i · w`.
//!
//! Every down step opens excursions: `i → i-1` an A at `i`, `i → i-2` a B at
//! `i` and a C at `i-1`. An excursion at level `m` closes at the first step
//! landing at or above `m`, with sub-type 1, 2 or 3 for the closing steps
//! `m-1 → m`, `m-2 → m` and `m-1 → m+1`. Before `T_1` every level in
//! `(X_n, 1]` holds exactly one open excursion, so the open excursions form a
//! stack indexed by level. The virtual step `1 → 0` opens the immigrant A at
//! level 1.

use serde::Serialize;

use crate::branching::{ExcursionTally, WEIGHTS};
use crate::environment::Environment;
use crate::simulator::{par_blocks, replica_seed, rng_for, Moments, Stepper, WalkPath};
use crate::{Error, Result};

const A: u8 = 0;
const B: u8 = 1;
const C: u8 = 2;

/// Streaming decomposition of a path fed one step at a time.
#[derive(Debug, Clone)]
pub struct OnlineDecomposer {
    pos: i64,
    /// Type of the open excursion at level `1 - j`.
    open: Vec<u8>,
    /// Tally at level `-j`.
    tallies: Vec<[u64; 9]>,
    /// Deepest tally index touched since the last reset.
    used: usize,
    immigration: Option<usize>,
    steps: u64,
    weighted: u64,
}

impl Default for OnlineDecomposer {
    fn default() -> Self {
        Self::new()
    }
}

impl OnlineDecomposer {
    pub fn new() -> Self {
        OnlineDecomposer {
            pos: 0,
            open: vec![A],
            tallies: Vec::new(),
            used: 0,
            immigration: None,
            steps: 0,
            weighted: 0,
        }
    }

    pub fn reset(&mut self) {
        for t in &mut self.tallies[..self.used] {
            *t = [0; 9];
        }
        self.pos = 0;
        self.open.clear();
        self.open.push(A);
        self.used = 0;
        self.immigration = None;
        self.steps = 0;
        self.weighted = 0;
    }

    pub fn is_done(&self) -> bool {
        self.immigration.is_some()
    }

    fn close(&mut self, level: i64, sub: usize) {
        let kind = self
            .open
            .pop()
            .expect("open excursion at every level below 1");
        debug_assert_eq!(self.open.len() as i64, 1 - level);
        if level == 1 {
            debug_assert_eq!(kind, A);
            self.immigration = Some(sub);
            return;
        }
        assert!(level <= 0, "excursion at level {level} above the immigrant");
        let j = (-level) as usize;
        if j >= self.tallies.len() {
            self.tallies.resize(j + 1, [0; 9]);
        }
        self.used = self.used.max(j + 1);
        let ty = 3 * kind as usize + sub - 1;
        self.tallies[j][ty] += 1;
        self.weighted += WEIGHTS[ty];
    }

    pub fn step(&mut self, to: i64) -> Result<()> {
        if self.is_done() {
            return Err(Error::MalformedPath(format!(
                "step to {to} after the ladder time"
            )));
        }
        let x = self.pos;
        match to - x {
            -1 => self.open.push(A),
            -2 => {
                self.open.push(B);
                self.open.push(C);
            }
            1 => self.close(x + 1, 1),
            2 => {
                self.close(x + 1, 3);
                if x + 2 <= 1 {
                    self.close(x + 2, 2);
                }
            }
            d => return Err(Error::MalformedPath(format!("increment {d} from {x}"))),
        }
        self.pos = to;
        self.steps += 1;
        Ok(())
    }

    /// `1 + Σ U_i · w` over the excursions closed so far.
    pub fn weighted_total(&self) -> u64 {
        1 + self.weighted
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Tally at level `i <= 0`.
    pub fn tally(&self, i: i64) -> [u64; 9] {
        self.tallies
            .get((-i) as usize)
            .filter(|_| (-i as usize) < self.used)
            .copied()
            .unwrap_or([0; 9])
    }

    pub fn finish(&self) -> Result<Decomposition> {
        let immigration = self
            .immigration
            .ok_or_else(|| Error::MalformedPath("path is not stopped".into()))?;
        Ok(Decomposition {
            tallies: self.tallies[..self.used].to_vec(),
            immigration,
        })
    }
}

/// Per-level excursion tallies of one stopped path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decomposition {
    /// `tallies[j]` is `U_{-j}`.
    pub tallies: Vec<[u64; 9]>,
    /// Sub-type (1, 2 or 3) of the immigrant at level 1.
    pub immigration: usize,
}

impl Decomposition {
    pub fn tally(&self, i: i64) -> ExcursionTally {
        assert!(i <= 0, "tallies live at levels <= 0");
        ExcursionTally {
            level: i,
            counts: self.tallies.get((-i) as usize).copied().unwrap_or([0; 9]),
        }
    }

    /// `U_1` as a 3-vector.
    pub fn immigration_vector(&self) -> [u64; 3] {
        let mut u = [0; 3];
        u[self.immigration - 1] = 1;
        u
    }

    /// Levels with at least one excursion, from 0 downward.
    pub fn depth(&self) -> usize {
        self.tallies.len()
    }

    /// `1 + Σ_{i<=0} U_i · w`.
    pub fn weighted_total(&self) -> u64 {
        1 + self
            .tallies
            .iter()
            .flat_map(|t| t.iter().zip(WEIGHTS).map(|(c, w)| c * w))
            .sum::<u64>()
    }
}

pub fn decompose(path: &WalkPath) -> Result<Decomposition> {
    if !path.stopped {
        return Err(Error::MalformedPath("path is not stopped".into()));
    }
    if path.positions.first() != Some(&0) {
        return Err(Error::MalformedPath("path does not start at 0".into()));
    }
    let mut d = OnlineDecomposer::new();
    for &y in &path.positions[1..] {
        d.step(y)?;
    }
    d.finish()
}

/// Outcome of [`verify_identity`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IdentityReport {
    pub holds: bool,
    pub t1: u64,
    /// `1 + Σ U_i · w`.
    pub weighted_total: u64,
    /// `1 + Σ (D_{i,1} + V_{i,1} + V_{i,2})` from the tallies.
    pub dv_total: u64,
    /// Highest level where the tally-derived `D`, `V` disagree with step counts.
    pub first_discrepant_level: Option<i64>,
}

/// Checks both forms of the ladder-time identity and compares the tally
/// derived `D_{i,1}`, `V_{i,1}`, `V_{i,2}` with direct step counts.
pub fn verify_identity(dec: &Decomposition, path: &WalkPath) -> IdentityReport {
    let t1 = path.steps() as u64;
    let depth = dec
        .tallies
        .len()
        .max((1 - path.positions.iter().copied().min().unwrap_or(0)) as usize);
    // Direct counts per level -j: steps landing at i-1 from above, i-1 -> i, i-2 -> i.
    let mut direct = vec![[0u64; 3]; depth + 1];
    for s in path.positions.windows(2) {
        let (x, y) = (s[0], s[1]);
        if y < x {
            let level = y + 1;
            if level <= 0 {
                direct[(-level) as usize][0] += 1;
            }
        } else if y <= 0 {
            direct[(-y) as usize][(y - x) as usize] += 1;
        }
    }
    let mut dv_total = 1u64;
    let mut first = None;
    for (j, want) in direct.iter().enumerate() {
        let u = dec.tallies.get(j).copied().unwrap_or([0; 9]);
        let d = u[0] + u[1] + u[2] + u[6] + u[7] + u[8];
        let v1 = u[0] + u[3] + u[6];
        let v2 = u[1] + u[4] + u[7];
        dv_total += d + v1 + v2;
        if first.is_none() && [d, v1, v2] != *want {
            first = Some(-(j as i64));
        }
    }
    let weighted_total = dec.weighted_total();
    IdentityReport {
        holds: first.is_none() && weighted_total == t1 && dv_total == t1,
        t1,
        weighted_total,
        dv_total,
        first_discrepant_level: first,
    }
}

/// Ensemble averages of tallies at levels `0, -1, …, -(levels-1)` and of the
/// immigrant's sub-type, with the identity checked on every path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TallyStats {
    pub replicas: u64,
    pub stopped: u64,
    pub abandoned: u64,
    pub identity_failures: u64,
    pub t1: Moments,
    /// `tallies[j][k]`: moments of coordinate `k` of `U_{-j}`.
    pub tallies: Vec<[Moments; 9]>,
    /// Moments of the indicators `U_1 = e_1, e_2, e_3`.
    pub immigration: [Moments; 3],
}

#[derive(Clone)]
struct TallySums {
    replicas: u64,
    stopped: u64,
    failures: u64,
    t: u128,
    t2: u128,
    sum: Vec<[u128; 9]>,
    sum_sq: Vec<[u128; 9]>,
    imm: [u64; 3],
}

impl TallySums {
    fn new(levels: usize) -> Self {
        TallySums {
            replicas: 0,
            stopped: 0,
            failures: 0,
            t: 0,
            t2: 0,
            sum: vec![[0; 9]; levels],
            sum_sq: vec![[0; 9]; levels],
            imm: [0; 3],
        }
    }

    fn merge(mut self, o: TallySums) -> Self {
        self.replicas += o.replicas;
        self.stopped += o.stopped;
        self.failures += o.failures;
        self.t += o.t;
        self.t2 += o.t2;
        for (a, b) in self.sum.iter_mut().zip(&o.sum) {
            for k in 0..9 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&o.sum_sq) {
            for k in 0..9 {
                a[k] += b[k];
            }
        }
        for k in 0..3 {
            self.imm[k] += o.imm[k];
        }
        self
    }
}

/// Simulates `replicas` paths (replica seeds as in [`crate::run_ensemble`]),
/// decomposes each and accumulates tally moments.
pub fn tally_ensemble(
    env: &Environment,
    master_seed: u64,
    replicas: u64,
    workers: usize,
    step_cap: u64,
    levels: usize,
) -> TallyStats {
    let blocks = par_blocks(replicas, workers, |range| {
        let mut stepper = Stepper::new(env);
        let mut dec = OnlineDecomposer::new();
        let mut sums = TallySums::new(levels);
        let mut positions = Vec::new();
        for r in range {
            let mut rng = rng_for(replica_seed(master_seed, r));
            dec.reset();
            positions.clear();
            positions.push(0);
            let mut malformed = false;
            let (stopped, n, _) = stepper.walk_to_ladder(&mut rng, step_cap, |_, y| {
                positions.push(y);
                malformed |= dec.step(y).is_err();
            });
            sums.replicas += 1;
            if !stopped {
                continue;
            }
            sums.stopped += 1;
            sums.t += n as u128;
            sums.t2 += (n as u128) * (n as u128);
            let path = WalkPath {
                positions: std::mem::take(&mut positions),
                stopped: true,
            };
            let holds = !malformed && dec.finish().is_ok_and(|d| verify_identity(&d, &path).holds);
            positions = path.positions;
            if !holds {
                sums.failures += 1;
            }
            for (j, (sum, sum_sq)) in sums.sum.iter_mut().zip(&mut sums.sum_sq).enumerate() {
                for ((a, b), c) in sum
                    .iter_mut()
                    .zip(sum_sq.iter_mut())
                    .zip(dec.tally(-(j as i64)))
                {
                    *a += c as u128;
                    *b += (c as u128) * (c as u128);
                }
            }
            if let Some(sub) = dec.immigration {
                sums.imm[sub - 1] += 1;
            }
        }
        sums
    });
    let s = blocks
        .into_iter()
        .fold(TallySums::new(levels), TallySums::merge);
    let n = s.stopped;
    TallyStats {
        replicas: s.replicas,
        stopped: n,
        abandoned: s.replicas - n,
        identity_failures: s.failures,
        t1: Moments::from_sums(n, s.t, s.t2),
        tallies: (0..levels)
            .map(|j| std::array::from_fn(|k| Moments::from_sums(n, s.sum[j][k], s.sum_sq[j][k])))
            .collect(),
        immigration: std::array::from_fn(|k| {
            Moments::from_sums(n, s.imm[k] as u128, s.imm[k] as u128)
        }),
    }
}
