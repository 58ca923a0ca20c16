//! The specification space: named input ranges, query regions inside it and
//! experimental designs over it.
//!
//! All coordinates handed across the public API are on the raw scale. The
//! emulator works in unit-scaled coordinates where every dimension maps
//! affinely onto `[-1, 1]`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, substream};

/// Proposals tried by the half-ellipsoid rejection sampler before giving up
/// on an apparently empty region.
pub const MAX_REJECTION_PROPOSALS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimKind {
    PriorHyper,
    Likelihood,
    Structural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub kind: DimKind,
}

impl Dim {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64, kind: DimKind) -> Self {
        Dim {
            name: name.into(),
            lower,
            upper,
            kind,
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// The space `X` of prior/likelihood specifications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecSpace {
    dims: Vec<Dim>,
}

impl<'de> Deserialize<'de> for SpecSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            dims: Vec<Dim>,
        }
        let raw = Raw::deserialize(d)?;
        SpecSpace::new(raw.dims).map_err(serde::de::Error::custom)
    }
}

impl SpecSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidSpace("no dimensions".into()));
        }
        for (i, d) in dims.iter().enumerate() {
            if !(d.lower.is_finite() && d.upper.is_finite() && d.lower < d.upper) {
                return Err(Error::InvalidSpace(format!(
                    "dimension `{}` needs lower < upper, got [{}, {}]",
                    d.name, d.lower, d.upper
                )));
            }
            if dims[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::InvalidSpace(format!("duplicate dimension `{}`", d.name)));
            }
        }
        Ok(SpecSpace { dims })
    }

    /// Prior SD `nu` and likelihood contamination `eps` of the contaminated
    /// exponential model.
    pub fn toy() -> Self {
        SpecSpace::new(vec![
            Dim::new("nu", 0.3, 2.0, DimKind::PriorHyper),
            Dim::new("eps", 0.0, 1.0, DimKind::Likelihood),
        ])
        .expect("static space")
    }

    /// Hyperparameters of the extended river-flow analysis.
    pub fn river() -> Self {
        SpecSpace::new(vec![
            Dim::new("mu0", 500.0, 2000.0, DimKind::PriorHyper),
            Dim::new("n0", 0.5, 30.0, DimKind::PriorHyper),
            Dim::new("alpha", 100.0, 500.0, DimKind::PriorHyper),
            Dim::new("beta", 0.0, 30.0, DimKind::PriorHyper),
            Dim::new("phi", -0.2, 0.5, DimKind::Likelihood),
            Dim::new("eps", 0.0, 1.0, DimKind::Structural),
        ])
        .expect("static space")
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.dims.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Errors with the first offending coordinate, named.
    pub fn check(&self, x: &[f64]) -> Result<()> {
        self.check_dim(x)?;
        for (d, &v) in self.dims.iter().zip(x) {
            if !(v >= d.lower && v <= d.upper) {
                return Err(Error::OutOfRange {
                    field: d.name.clone(),
                    value: v,
                    lower: d.lower,
                    upper: d.upper,
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.check(x).is_ok()
    }

    pub fn scale_to_unit(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.scale_to_unit_unchecked(x))
    }

    /// Affine map onto `[-1, 1]` without range checks (extrapolation allowed).
    pub fn scale_to_unit_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(x)
            .map(|(d, &v)| 2.0 * (v - d.lower) / d.width() - 1.0)
            .collect()
    }

    pub fn scale_from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(u)
            .map(|(d, &s)| d.lower + (s + 1.0) * 0.5 * d.width())
            .collect()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.dims.iter().map(|d| 0.5 * (d.lower + d.upper)).collect()
    }

    /// Full factorial grid, endpoints included. The first dimension varies
    /// slowest.
    pub fn lattice_design(&self, levels: &[usize]) -> Result<Design> {
        if levels.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: levels.len(),
            });
        }
        if let Some(bad) = levels.iter().find(|&&l| l < 2) {
            return Err(Error::BadLevels(format!("every dimension needs at least 2 levels, got {bad}")));
        }
        let axes: Vec<Vec<f64>> = self
            .dims
            .iter()
            .zip(levels)
            .map(|(d, &l)| {
                (0..l)
                    .map(|i| {
                        if i == l - 1 {
                            d.upper
                        } else {
                            d.lower + d.width() * i as f64 / (l - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let n: usize = levels.iter().product();
        let mut points = Vec::with_capacity(n);
        for flat in 0..n {
            let mut rem = flat;
            let mut p = vec![0.0; self.dim()];
            for k in (0..self.dim()).rev() {
                p[k] = axes[k][rem % levels[k]];
                rem /= levels[k];
            }
            points.push(p);
        }
        Design::new(self.clone(), points, Provenance::Lattice, 0)
    }

    /// Random-restart maximin Latin hypercube.
    pub fn maximin_lhs(&self, n: usize, restarts: usize, seed: u64) -> Result<Design> {
        Ok(self.maximin_lhs_traced(n, restarts, seed)?.0)
    }

    /// As [`SpecSpace::maximin_lhs`], also returning the minimum pairwise
    /// scaled distance of every candidate that was drawn.
    pub fn maximin_lhs_traced(&self, n: usize, restarts: usize, seed: u64) -> Result<(Design, Vec<f64>)> {
        if n < 2 {
            return Err(Error::InvalidConfig("a Latin hypercube needs n >= 2".into()));
        }
        let restarts = restarts.max(1);
        let d = self.dim();
        let mut rng = seeded(seed);
        let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
        let mut trace = Vec::with_capacity(restarts);
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..restarts {
            let mut unit = vec![vec![0.0; d]; n];
            for k in 0..d {
                perm.shuffle(&mut rng);
                for (i, &stratum) in perm.iter().enumerate() {
                    let u: f64 = rng.random();
                    unit[i][k] = 2.0 * (stratum as f64 + u) / n as f64 - 1.0;
                }
            }
            let score = min_pairwise_distance(&unit);
            trace.push(score);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, unit));
            }
        }
        let (_, unit) = best.expect("at least one restart");
        let points = unit
            .iter()
            .map(|u| {
                let mut p = self.scale_from_unit(u);
                // guard against round-off pushing a coordinate past the boundary
                for (v, dim) in p.iter_mut().zip(&self.dims) {
                    *v = v.clamp(dim.lower, dim.upper);
                }
                p
            })
            .collect();
        Ok((Design::new(self.clone(), points, Provenance::MaximinLhs, seed)?, trace))
    }
}

pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d2: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d2);
        }
    }
    best.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Lattice,
    MaximinLhs,
    Manual,
}

/// A set of training inputs over a [`SpecSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub space: SpecSpace,
    pub provenance: Provenance,
    pub seed: u64,
    pub points: Vec<Vec<f64>>,
    /// Indices of manually added rows that lie outside the space.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub out_of_range: Vec<usize>,
}

impl Design {
    pub fn new(space: SpecSpace, points: Vec<Vec<f64>>, provenance: Provenance, seed: u64) -> Result<Self> {
        for p in &points {
            space.check(p)?;
        }
        let design = Design {
            space,
            provenance,
            seed,
            points,
            out_of_range: Vec::new(),
        };
        design.check_duplicates()?;
        Ok(design)
    }

    /// Appends a hand-specified point. Points outside the space are accepted
    /// with a warning and remembered in `out_of_range`.
    pub fn push_manual(&mut self, x: Vec<f64>) -> Result<()> {
        self.space.check_dim(&x)?;
        if let Err(e) = self.space.check(&x) {
            log::warn!("manual design point outside the space accepted: {e}");
            self.out_of_range.push(self.points.len());
        }
        self.points.push(x);
        self.check_duplicates()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scaled(&self) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|p| self.space.scale_to_unit_unchecked(p))
            .collect()
    }

    fn check_duplicates(&self) -> Result<()> {
        let scaled = self.scaled();
        for i in 1..scaled.len() {
            for j in 0..i {
                let dist = scaled[i]
                    .iter()
                    .zip(&scaled[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if dist < 1e-12 {
                    return Err(Error::DuplicatePoint(i));
                }
            }
        }
        Ok(())
    }
}

/// A closed interval of one dimension; `lo == hi` pins the dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }
}

/// A query region `X_k` inside a specification space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Region {
    Point {
        x: Vec<f64>,
    },
    Box {
        intervals: Vec<Interval>,
    },
    /// `sum((x - center)^2 / axes^2) < 1` and `x[positive_dim] > center[positive_dim]`.
    HalfEllipsoid {
        center: Vec<f64>,
        semi_axes: Vec<f64>,
        positive_dim: usize,
    },
    PointList {
        points: Vec<Vec<f64>>,
    },
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Point { x } => x.len(),
            Region::Box { intervals } => intervals.len(),
            Region::HalfEllipsoid { center, .. } => center.len(),
            Region::PointList { points } => points.first().map_or(0, Vec::len),
        }
    }

    /// Checks internal consistency and containment in `space`.
    pub fn validate(&self, space: &SpecSpace) -> Result<()> {
        if self.dim() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                got: self.dim(),
            });
        }
        match self {
            Region::Point { x } => space.check(x),
            Region::Box { intervals } => {
                for (iv, d) in intervals.iter().zip(space.dims()) {
                    if !(iv.lo <= iv.hi) {
                        return Err(Error::InvalidRegion(format!(
                            "interval for `{}` has lo > hi ({} > {})",
                            d.name, iv.lo, iv.hi
                        )));
                    }
                }
                let (lo, hi): (Vec<f64>, Vec<f64>) = intervals.iter().map(|iv| (iv.lo, iv.hi)).unzip();
                space.check(&lo)?;
                space.check(&hi)
            }
            Region::HalfEllipsoid {
                center,
                semi_axes,
                positive_dim,
            } => {
                if semi_axes.len() != center.len() {
                    return Err(Error::InvalidRegion("semi_axes and center differ in length".into()));
                }
                if *positive_dim >= center.len() {
                    return Err(Error::InvalidRegion(format!("positive_dim {positive_dim} out of bounds")));
                }
                if semi_axes.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                    return Err(Error::InvalidRegion("semi-axes must be strictly positive".into()));
                }
                let (lo, hi) = self.bounding_box();
                space.check(&lo)?;
                space.check(&hi)
            }
            Region::PointList { points } => {
                if points.is_empty() {
                    return Err(Error::InvalidRegion("empty point list".into()));
                }
                points.iter().try_for_each(|p| space.check(p))
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(match self {
            Region::Point { x: p } => p.as_slice() == x,
            Region::Box { intervals } => intervals.iter().zip(x).all(|(iv, &v)| v >= iv.lo && v <= iv.hi),
            Region::HalfEllipsoid {
                center,
                semi_axes,
                positive_dim,
            } => {
                let q: f64 = x
                    .iter()
                    .zip(center)
                    .zip(semi_axes)
                    .map(|((v, c), a)| ((v - c) / a).powi(2))
                    .sum();
                q < 1.0 && x[*positive_dim] > center[*positive_dim]
            }
            Region::PointList { points } => points.iter().any(|p| p.as_slice() == x),
        })
    }

    /// Axis-aligned bounding box `(lower corner, upper corner)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Region::Point { x } => (x.clone(), x.clone()),
            Region::Box { intervals } => intervals.iter().map(|iv| (iv.lo, iv.hi)).unzip(),
            Region::HalfEllipsoid {
                center,
                semi_axes,
                positive_dim,
            } => center
                .iter()
                .zip(semi_axes)
                .enumerate()
                .map(|(k, (&c, &a))| if k == *positive_dim { (c, c + a) } else { (c - a, c + a) })
                .unzip(),
            Region::PointList { points } => {
                let d = self.dim();
                let mut lo = vec![f64::INFINITY; d];
                let mut hi = vec![f64::NEG_INFINITY; d];
                for p in points {
                    for k in 0..d {
                        lo[k] = lo[k].min(p[k]);
                        hi[k] = hi[k].max(p[k]);
                    }
                }
                (lo, hi)
            }
        }
    }

    /// Representative central point used for the midpoint prediction.
    pub fn midpoint(&self) -> Vec<f64> {
        match self {
            Region::Point { x } => x.clone(),
            Region::PointList { points } => {
                let n = points.len() as f64;
                (0..self.dim())
                    .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n)
                    .collect()
            }
            _ => {
                let (lo, hi) = self.bounding_box();
                lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect()
            }
        }
    }

    /// Points `x_E` spanning the region. Every returned point satisfies
    /// [`Region::contains`].
    pub fn grid(&self, n_e: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        match self {
            Region::Point { x } => Ok(vec![x.clone()]),
            Region::PointList { points } => Ok(points.clone()),
            _ if n_e < 2 => Err(Error::InvalidRegion(format!("n_E must be >= 2, got {n_e}"))),
            Region::Box { intervals } => {
                let free: Vec<usize> = (0..intervals.len()).filter(|&k| intervals[k].hi > intervals[k].lo).collect();
                let base: Vec<f64> = intervals.iter().map(|iv| iv.lo).collect();
                match free.len() {
                    0 => Ok(vec![base]),
                    1 => {
                        let k = free[0];
                        let iv = intervals[k];
                        Ok((0..n_e)
                            .map(|i| {
                                let mut p = base.clone();
                                p[k] = if i == n_e - 1 {
                                    iv.hi
                                } else {
                                    iv.lo + (iv.hi - iv.lo) * i as f64 / (n_e - 1) as f64
                                };
                                p
                            })
                            .collect())
                    }
                    _ => {
                        let mut rng = seeded(seed);
                        let shift: Vec<f64> = free.iter().map(|_| rng.random()).collect();
                        Ok((0..n_e)
                            .map(|i| {
                                let mut p = base.clone();
                                for (j, &k) in free.iter().enumerate() {
                                    let u = (halton(i as u64 + 1, PRIMES[j % PRIMES.len()]) + shift[j]).fract();
                                    p[k] = intervals[k].lo + u * (intervals[k].hi - intervals[k].lo);
                                }
                                p
                            })
                            .collect())
                    }
                }
            }
            Region::HalfEllipsoid { .. } => {
                let (lo, hi) = self.bounding_box();
                let mut rng = seeded(substream(seed, 0xE11));
                let mut out = Vec::with_capacity(n_e);
                let mut tried = 0usize;
                let cap = MAX_REJECTION_PROPOSALS + 10_000 * n_e;
                while out.len() < n_e {
                    if tried >= cap || (tried >= MAX_REJECTION_PROPOSALS && out.is_empty()) {
                        return Err(Error::EmptyRegion(tried));
                    }
                    tried += 1;
                    let p: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a + (b - a) * rng.random::<f64>()).collect();
                    if self.contains(&p)? {
                        out.push(p);
                    }
                }
                Ok(out)
            }
        }
    }
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn halton(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}
