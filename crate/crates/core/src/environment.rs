//! Site laws, environments and environment laws.

use std::ops::RangeInclusive;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default floor on `q2` below which a site cannot enter a step matrix.
pub const DEFAULT_ELLIPTICITY: f64 = 1e-12;

/// Default distance kept between Dirichlet draws and the simplex boundary.
pub const DEFAULT_MARGIN: f64 = 1e-6;

const SUM_TOL: f64 = 1e-12;

/// Jump probabilities at one site, `(q2, q1, p1, p2)` for jumps `-2, -1, +1, +2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLaw")]
pub struct SiteLaw {
    pub q2: f64,
    pub q1: f64,
    pub p1: f64,
    pub p2: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLaw {
    q2: f64,
    q1: f64,
    p1: f64,
    p2: f64,
}

impl TryFrom<RawLaw> for SiteLaw {
    type Error = Error;

    fn try_from(raw: RawLaw) -> Result<Self> {
        SiteLaw::new(raw.q2, raw.q1, raw.p1, raw.p2)
    }
}

impl SiteLaw {
    pub fn new(q2: f64, q1: f64, p1: f64, p2: f64) -> Result<Self> {
        let law = SiteLaw { q2, q1, p1, p2 };
        let parts = law.as_array();
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidLaw(format!(
                "negative or non-finite entry in {parts:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidLaw(format!("entries sum to {total}, not 1")));
        }
        Ok(law)
    }

    /// Builds a law from `(q2, q1, p1, p2)`.
    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.q2, self.q1, self.p1, self.p2]
    }

    /// Probability of the jump `l`; zero outside `{-2, -1, 1, 2}`.
    pub fn jump(&self, l: i64) -> f64 {
        match l {
            -2 => self.q2,
            -1 => self.q1,
            1 => self.p1,
            2 => self.p2,
            _ => 0.0,
        }
    }

    pub fn drift(&self) -> f64 {
        (self.p1 - self.q1) + 2.0 * (self.p2 - self.q2)
    }

    /// Expected absolute jump size, `2 q2 + q1 + p1 + 2 p2`.
    pub fn mean_abs_jump(&self) -> f64 {
        2.0 * self.q2 + self.q1 + self.p1 + 2.0 * self.p2
    }

    pub fn is_admissible(&self, eps: f64) -> bool {
        self.q2 >= eps
    }
}

pub fn local_drift(law: &SiteLaw) -> f64 {
    law.drift()
}

/// Distribution of a single site law; sites of an iid environment are
/// independent draws from it.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvLaw {
    PointMass(SiteLaw),
    /// Dirichlet over `(q2, q1, p1, p2)`, clamped to at least `margin` per
    /// coordinate and renormalized.
    Dirichlet {
        alpha: [f64; 4],
        margin: f64,
    },
    Mixture {
        laws: Vec<SiteLaw>,
        weights: Vec<f64>,
    },
}

impl EnvLaw {
    pub fn dirichlet(alpha: [f64; 4], margin: f64) -> Result<Self> {
        if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidLaw(format!(
                "Dirichlet parameters must be positive: {alpha:?}"
            )));
        }
        if !(0.0..0.25).contains(&margin) {
            return Err(Error::InvalidLaw(format!(
                "margin {margin} outside [0, 0.25)"
            )));
        }
        Ok(EnvLaw::Dirichlet { alpha, margin })
    }

    pub fn mixture(laws: Vec<SiteLaw>, weights: Vec<f64>) -> Result<Self> {
        if laws.is_empty() || laws.len() != weights.len() {
            return Err(Error::InvalidLaw("mixture needs one weight per law".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidLaw(
                "mixture weights must be nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidLaw("mixture weights sum to zero".into()));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(EnvLaw::Mixture { laws, weights })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SiteLaw> {
        match self {
            EnvLaw::PointMass(law) => Ok(*law),
            EnvLaw::Dirichlet { alpha, margin } => {
                let dist = Dirichlet::new(*alpha)
                    .map_err(|e| Error::InvalidLaw(format!("Dirichlet: {e}")))?;
                let mut x: [f64; 4] = dist.sample(rng);
                for v in x.iter_mut() {
                    *v = v.max(*margin);
                }
                let total: f64 = x.iter().sum();
                for v in x.iter_mut() {
                    *v /= total;
                }
                SiteLaw::from_array(x)
            }
            EnvLaw::Mixture { laws, weights } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (law, w) in laws.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return Ok(*law);
                    }
                }
                Ok(*laws.last().unwrap())
            }
        }
    }

    /// Reads an environment-law description from the environment file format.
    ///
    /// `homogeneous` files give a point mass; `iid` files give a Dirichlet law
    /// (`dirichlet_alpha`) or a mixture of the listed laws. Returns the file's
    /// seed alongside, if any.
    pub fn from_spec(spec: &EnvSpec) -> Result<(EnvLaw, Option<u64>)> {
        match spec.kind {
            EnvKindTag::Homogeneous => {
                let env = Environment::from_spec(spec)?;
                Ok((EnvLaw::PointMass(env.law_at(0)), spec.seed))
            }
            EnvKindTag::Iid => Ok((iid_law(spec)?, spec.seed)),
            _ => Err(Error::InvalidEnvironment(
                "an environment law must be of kind homogeneous or iid".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Homogeneous(SiteLaw),
    Periodic(Arc<[SiteLaw]>),
    Explicit {
        lo: i64,
        laws: Arc<[SiteLaw]>,
        default: SiteLaw,
    },
    Iid {
        law: EnvLaw,
        seed: u64,
        // Pre-drawn sites; values are identical to on-demand draws.
        table: Option<(i64, Arc<[SiteLaw]>)>,
    },
}

/// A site law for every integer. Cheap to clone; immutable.
#[derive(Debug, Clone)]
pub struct Environment {
    kind: Kind,
    offset: i64,
}

impl Environment {
    pub fn homogeneous(law: SiteLaw) -> Self {
        Self::from_kind(Kind::Homogeneous(law))
    }

    /// `law_at(i) = laws[i mod laws.len()]`.
    pub fn periodic(laws: Vec<SiteLaw>) -> Result<Self> {
        if laws.is_empty() {
            return Err(Error::InvalidEnvironment(
                "periodic environment needs at least one law".into(),
            ));
        }
        Ok(Self::from_kind(Kind::Periodic(laws.into())))
    }

    /// `laws[j]` sits at site `lo + j`; every other site carries `default`.
    pub fn explicit(lo: i64, laws: Vec<SiteLaw>, default: SiteLaw) -> Self {
        Self::from_kind(Kind::Explicit {
            lo,
            laws: laws.into(),
            default,
        })
    }

    /// Independent draws from `law` at every site, reproducible from `seed`.
    pub fn iid(law: EnvLaw, seed: u64) -> Self {
        if let EnvLaw::PointMass(l) = law {
            return Self::homogeneous(l);
        }
        Self::from_kind(Kind::Iid {
            law,
            seed,
            table: None,
        })
    }

    fn from_kind(kind: Kind) -> Self {
        Environment { kind, offset: 0 }
    }

    pub fn law_at(&self, i: i64) -> SiteLaw {
        let j = i + self.offset;
        match &self.kind {
            Kind::Homogeneous(law) => *law,
            Kind::Periodic(laws) => laws[j.rem_euclid(laws.len() as i64) as usize],
            Kind::Explicit { lo, laws, default } => {
                if j >= *lo && j - lo < laws.len() as i64 {
                    laws[(j - lo) as usize]
                } else {
                    *default
                }
            }
            Kind::Iid { law, seed, table } => {
                if let Some((lo, laws)) = table {
                    if j >= *lo && j - lo < laws.len() as i64 {
                        return laws[(j - lo) as usize];
                    }
                }
                draw_site(law, *seed, j)
            }
        }
    }

    /// The constant law, if the environment is homogeneous.
    pub fn as_homogeneous(&self) -> Option<SiteLaw> {
        match self.kind {
            Kind::Homogeneous(law) => Some(law),
            _ => None,
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        self.as_homogeneous().is_some()
    }

    /// Laws at `lo..=hi`.
    pub fn laws(&self, lo: i64, hi: i64) -> Vec<SiteLaw> {
        (lo..=hi).map(|i| self.law_at(i)).collect()
    }

    /// Returns the first site in `lo..=hi` with `q2 < eps`.
    pub fn first_inadmissible(&self, lo: i64, hi: i64, eps: f64) -> Option<(i64, f64)> {
        match self.kind {
            Kind::Homogeneous(law) if lo <= hi => (!law.is_admissible(eps)).then_some((lo, law.q2)),
            _ => (lo..=hi)
                .map(|i| (i, self.law_at(i).q2))
                .find(|(_, q2)| *q2 < eps),
        }
    }

    pub fn from_spec(spec: &EnvSpec) -> Result<Self> {
        let n = spec.laws.len();
        match spec.kind {
            EnvKindTag::Homogeneous => {
                if n != 1 {
                    return Err(Error::InvalidEnvironment(format!(
                        "homogeneous environment needs exactly one law, got {n}"
                    )));
                }
                Ok(Self::homogeneous(spec.laws[0]))
            }
            EnvKindTag::Periodic => {
                if let Some(p) = spec.period {
                    if p != n {
                        return Err(Error::InvalidEnvironment(format!(
                            "period {p} does not match {n} laws"
                        )));
                    }
                }
                Self::periodic(spec.laws.clone())
            }
            EnvKindTag::Explicit => {
                let [lo, hi] = spec.range.ok_or_else(|| {
                    Error::InvalidEnvironment("explicit environment needs a range".into())
                })?;
                let default = spec.default.ok_or_else(|| {
                    Error::InvalidEnvironment("explicit environment needs a default law".into())
                })?;
                if hi < lo || (hi - lo + 1) as usize != n {
                    return Err(Error::InvalidEnvironment(format!(
                        "range [{lo}, {hi}] does not match {n} laws"
                    )));
                }
                Ok(Self::explicit(lo, spec.laws.clone(), default))
            }
            EnvKindTag::Iid => {
                let seed = spec.seed.ok_or_else(|| {
                    Error::InvalidEnvironment("iid environment needs a seed".into())
                })?;
                Ok(Self::iid(iid_law(spec)?, seed))
            }
        }
    }

    /// Describes the environment in the file format. Shifted iid environments
    /// have no file representation.
    pub fn to_spec(&self) -> Option<EnvSpec> {
        let mut spec = EnvSpec::empty(EnvKindTag::Homogeneous);
        match &self.kind {
            Kind::Homogeneous(law) => spec.laws = vec![*law],
            Kind::Periodic(laws) => {
                let p = laws.len() as i64;
                spec.kind = EnvKindTag::Periodic;
                spec.period = Some(laws.len());
                spec.laws = (0..p).map(|i| self.law_at(i)).collect();
            }
            Kind::Explicit { lo, laws, default } => {
                spec.kind = EnvKindTag::Explicit;
                let lo = lo - self.offset;
                spec.range = Some([lo, lo + laws.len() as i64 - 1]);
                spec.laws = laws.to_vec();
                spec.default = Some(*default);
            }
            Kind::Iid { law, seed, .. } => {
                if self.offset != 0 {
                    return None;
                }
                spec.kind = EnvKindTag::Iid;
                spec.seed = Some(*seed);
                match law {
                    EnvLaw::PointMass(l) => spec.laws = vec![*l],
                    EnvLaw::Dirichlet { alpha, margin } => {
                        spec.dirichlet_alpha = Some(*alpha);
                        if *margin != DEFAULT_MARGIN {
                            spec.margin = Some(*margin);
                        }
                    }
                    EnvLaw::Mixture { laws, weights } => {
                        spec.laws = laws.clone();
                        spec.weights = Some(weights.clone());
                    }
                }
            }
        }
        Some(spec)
    }
}

fn draw_site(law: &EnvLaw, seed: u64, site: i64) -> SiteLaw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site as u64);
    // EnvLaw constructors validate parameters, so a draw cannot fail.
    law.sample(&mut rng).expect("validated environment law")
}

fn iid_law(spec: &EnvSpec) -> Result<EnvLaw> {
    let margin = spec.margin.unwrap_or(DEFAULT_MARGIN);
    match (spec.dirichlet_alpha, spec.laws.len()) {
        (Some(alpha), 0) => EnvLaw::dirichlet(alpha, margin),
        (Some(_), _) => Err(Error::InvalidEnvironment(
            "iid environment takes either dirichlet_alpha or laws, not both".into(),
        )),
        (None, 0) => Err(Error::InvalidEnvironment(
            "iid environment needs dirichlet_alpha or laws".into(),
        )),
        (None, 1) if spec.weights.is_none() => Ok(EnvLaw::PointMass(spec.laws[0])),
        (None, n) => {
            let weights = spec.weights.clone().unwrap_or_else(|| vec![1.0; n]);
            EnvLaw::mixture(spec.laws.clone(), weights)
        }
    }
}

/// `shift(env, k).law_at(i) == env.law_at(i + k)`.
pub fn shift(env: &Environment, k: i64) -> Environment {
    Environment {
        kind: env.kind.clone(),
        offset: env.offset + k,
    }
}

/// Draws an environment from `env_law`. Sites in `site_range` are drawn
/// eagerly; sites outside it are drawn on demand with the same per-site
/// streams, so the result does not depend on the range.
pub fn sample_environment(
    env_law: &EnvLaw,
    site_range: RangeInclusive<i64>,
    seed: u64,
) -> Result<Environment> {
    let (lo, hi) = (*site_range.start(), *site_range.end());
    if hi < lo {
        return Err(Error::InvalidEnvironment(format!(
            "empty site range {lo}..={hi}"
        )));
    }
    if let EnvLaw::PointMass(law) = env_law {
        return Ok(Environment::homogeneous(*law));
    }
    let laws = (lo..=hi)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            env_law.sample(&mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Environment::from_kind(Kind::Iid {
        law: env_law.clone(),
        seed,
        table: Some((lo, laws.into())),
    }))
}

/// Per-computation cache of a mapped site law over a growing window of sites.
pub(crate) struct SiteWindow<'a, T: Copy> {
    env: &'a Environment,
    map: fn(&SiteLaw) -> T,
    constant: Option<T>,
    lo: i64,
    data: Vec<T>,
}

impl<'a, T: Copy> SiteWindow<'a, T> {
    pub(crate) fn new(env: &'a Environment, map: fn(&SiteLaw) -> T) -> Self {
        SiteWindow {
            env,
            map,
            constant: env.as_homogeneous().map(|l| map(&l)),
            lo: 0,
            data: Vec::new(),
        }
    }

    #[inline]
    pub(crate) fn get(&mut self, i: i64) -> T {
        if let Some(c) = self.constant {
            return c;
        }
        let j = i.wrapping_sub(self.lo);
        if j >= 0 && (j as usize) < self.data.len() {
            return self.data[j as usize];
        }
        self.grow(i);
        self.data[(i - self.lo) as usize]
    }

    #[cold]
    fn grow(&mut self, i: i64) {
        if self.data.is_empty() {
            self.lo = i - 512;
            self.data = (self.lo..self.lo + 1024)
                .map(|k| (self.map)(&self.env.law_at(k)))
                .collect();
            return;
        }
        let len = self.data.len() as i64;
        let hi = self.lo + len;
        if i < self.lo {
            let new_lo = i.min(self.lo - len);
            let mut front: Vec<T> = (new_lo..self.lo)
                .map(|k| (self.map)(&self.env.law_at(k)))
                .collect();
            front.append(&mut self.data);
            self.data = front;
            self.lo = new_lo;
        } else {
            let new_hi = (i + 1).max(hi + len);
            self.data
                .extend((hi..new_hi).map(|k| (self.map)(&self.env.law_at(k))));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKindTag {
    Homogeneous,
    Periodic,
    Explicit,
    Iid,
}

/// The JSON environment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKindTag,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub laws: Vec<SiteLaw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[i64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<SiteLaw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirichlet_alpha: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

impl EnvSpec {
    fn empty(kind: EnvKindTag) -> Self {
        EnvSpec {
            kind,
            laws: Vec::new(),
            period: None,
            range: None,
            default: None,
            seed: None,
            dirichlet_alpha: None,
            weights: None,
            margin: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidEnvironment(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("environment spec serializes")
    }
}
