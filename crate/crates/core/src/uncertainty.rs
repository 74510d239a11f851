//! Non-convex uncertainty sets as finite unions of disjoint closed intervals,
//! and the law-dependent ambiguity map `mu -> U_{g(mu)}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;

/// Sorted union of strictly disjoint closed intervals. Degenerate intervals
/// (`lo == hi`) are points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct IntervalUnion {
    intervals: Vec<(f64, f64)>,
}

/// Nearest member of a set to a reference point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point: f64,
    /// Another member was equally close (across a gap); `point` is the smaller.
    pub tie: bool,
}

impl IntervalUnion {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::Config("interval union must contain at least one interval".into()));
        }
        for (i, &(lo, hi)) in intervals.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("interval {i} has a non-finite endpoint")));
            }
            if lo > hi {
                return Err(Error::Config(format!("interval {i} has lo {lo} > hi {hi}")));
            }
        }
        for (i, w) in intervals.windows(2).enumerate() {
            if w[0].1 >= w[1].0 {
                return Err(Error::Config(format!(
                    "intervals {i} and {} are not sorted and strictly disjoint ({} >= {})",
                    i + 1,
                    w[0].1,
                    w[1].0
                )));
            }
        }
        Ok(Self { intervals })
    }

    pub fn single(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![(lo, hi)])
    }

    pub fn point(value: f64) -> Result<Self> {
        Self::new(vec![(value, value)])
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn min(&self) -> f64 {
        self.intervals[0].0
    }

    pub fn max(&self) -> f64 {
        self.intervals[self.intervals.len() - 1].1
    }

    pub fn contains(&self, a: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= a && a <= hi)
    }

    /// Distance from `w` to the set.
    pub fn distance(&self, w: f64) -> f64 {
        (self.project(w).point - w).abs()
    }

    /// Nearest member to `w`, ties broken toward the smaller value.
    pub fn project(&self, w: f64) -> Projection {
        let mut best = f64::NAN;
        let mut best_dist = f64::INFINITY;
        let mut tie = false;
        for &(lo, hi) in &self.intervals {
            let candidate = w.clamp(lo, hi);
            let dist = (candidate - w).abs();
            if dist < best_dist {
                best = candidate;
                best_dist = dist;
                tie = false;
            } else if dist == best_dist && candidate != best {
                // candidates arrive in ascending order, so the incumbent is smaller
                tie = true;
            }
        }
        Projection { point: best, tie }
    }

    /// Exact Hausdorff distance.
    pub fn hausdorff(&self, other: &Self) -> f64 {
        self.directed_hausdorff(other).max(other.directed_hausdorff(self))
    }

    /// `sup_{a in self} d(a, other)`. The distance to `other` is piecewise
    /// linear on each interval of `self`, so its maximum sits at an endpoint
    /// of `self` or at the midpoint of a gap of `other`.
    fn directed_hausdorff(&self, other: &Self) -> f64 {
        let endpoints = self.intervals.iter().flat_map(|&(lo, hi)| [lo, hi]);
        let gap_midpoints = other.intervals.windows(2).map(|w| 0.5 * (w[0].1 + w[1].0)).filter(|&m| self.contains(m));
        endpoints.chain(gap_midpoints).map(|p| other.distance(p)).fold(0.0, f64::max)
    }

    pub fn convex_hull(&self) -> Self {
        Self { intervals: vec![(self.min(), self.max())] }
    }

    /// Splits into the parts below and above `c` (both keep `c` if it is a member).
    pub fn split_at(&self, c: f64) -> (Option<Self>, Option<Self>) {
        let below: Vec<_> =
            self.intervals.iter().filter(|&&(lo, _)| lo <= c).map(|&(lo, hi)| (lo, hi.min(c))).collect();
        let above: Vec<_> =
            self.intervals.iter().filter(|&&(_, hi)| hi >= c).map(|&(lo, hi)| (lo.max(c), hi)).collect();
        let wrap = |v: Vec<(f64, f64)>| (!v.is_empty()).then_some(Self { intervals: v });
        (wrap(below), wrap(above))
    }
}

impl TryFrom<Vec<(f64, f64)>> for IntervalUnion {
    type Error = Error;

    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<IntervalUnion> for Vec<(f64, f64)> {
    fn from(u: IntervalUnion) -> Self {
        u.intervals
    }
}

/// How the ambiguity parameter is read off the law of the value process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaRule {
    Constant {
        theta0: f64,
    },
    /// `alpha * mean + beta * stddev`, clamped to the theta bounds.
    AffineMoments {
        alpha: f64,
        beta: f64,
    },
}

/// The map `mu -> U_{g(mu)}`: a parameter rule `g` on a compact range and a
/// base set whose endpoints move affinely in the parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AmbiguityConfig", into = "AmbiguityConfig")]
pub struct AmbiguityMap {
    base: IntervalUnion,
    shifts: Vec<(f64, f64)>,
    rule: ThetaRule,
    theta_bounds: (f64, f64),
}

/// Structured-text form of [`AmbiguityMap`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbiguityConfig {
    pub intervals: IntervalUnion,
    #[serde(default = "default_rule")]
    pub theta_rule: ThetaRule,
    #[serde(default)]
    pub endpoint_shifts: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub theta_bounds: Option<(f64, f64)>,
}

fn default_rule() -> ThetaRule {
    ThetaRule::Constant { theta0: 0.0 }
}

impl AmbiguityMap {
    /// Law-independent set.
    pub fn fixed(set: IntervalUnion) -> Self {
        let n = set.intervals.len();
        Self {
            base: set,
            shifts: vec![(0.0, 0.0); n],
            rule: ThetaRule::Constant { theta0: 0.0 },
            theta_bounds: (0.0, 0.0),
        }
    }

    pub fn new(
        base: IntervalUnion,
        shifts: Vec<(f64, f64)>,
        rule: ThetaRule,
        theta_bounds: (f64, f64),
    ) -> Result<Self> {
        let (tmin, tmax) = theta_bounds;
        if !(tmin.is_finite() && tmax.is_finite() && tmin <= tmax) {
            return Err(Error::Config(format!("invalid theta bounds [{tmin}, {tmax}]")));
        }
        if shifts.len() != base.intervals.len() {
            return Err(Error::Config(format!(
                "{} endpoint shifts given for {} intervals",
                shifts.len(),
                base.intervals.len()
            )));
        }
        let map = Self { base, shifts, rule, theta_bounds };
        // endpoint constraints are affine in theta: valid at both bounds implies valid between
        map.set_at(tmin)?;
        map.set_at(tmax)?;
        Ok(map)
    }

    pub fn base(&self) -> &IntervalUnion {
        &self.base
    }

    pub fn rule(&self) -> ThetaRule {
        self.rule
    }

    pub fn theta_bounds(&self) -> (f64, f64) {
        self.theta_bounds
    }

    /// True when the realized set never depends on the law.
    pub fn is_static(&self) -> bool {
        matches!(self.rule, ThetaRule::Constant { .. }) || self.shifts.iter().all(|&(a, b)| a == 0.0 && b == 0.0)
    }

    /// `g(mu)`, clamped to the compact parameter range.
    pub fn theta(&self, law: &EmpiricalMeasure) -> f64 {
        let raw = match self.rule {
            ThetaRule::Constant { theta0 } => theta0,
            ThetaRule::AffineMoments { alpha, beta } => {
                let (mean, sd) = law.moments();
                alpha * mean + beta * sd
            }
        };
        raw.clamp(self.theta_bounds.0, self.theta_bounds.1)
    }

    /// `U_theta`.
    pub fn set_at(&self, theta: f64) -> Result<IntervalUnion> {
        let intervals = self
            .base
            .intervals
            .iter()
            .zip(&self.shifts)
            .map(|(&(lo, hi), &(slo, shi))| (lo + slo * theta, hi + shi * theta))
            .collect();
        IntervalUnion::new(intervals)
            .map_err(|e| Error::Config(format!("realized set at theta = {theta} is invalid: {e}")))
    }

    /// `U_{g(mu)}`.
    pub fn realize_set(&self, law: &EmpiricalMeasure) -> Result<IntervalUnion> {
        self.set_at(self.theta(law))
    }

    /// Realized sets at the two ends of the parameter range. Every endpoint of
    /// every realized set lies between its values at these two sets.
    pub fn extreme_sets(&self) -> Result<[IntervalUnion; 2]> {
        Ok([self.set_at(self.theta_bounds.0)?, self.set_at(self.theta_bounds.1)?])
    }

    /// The same map with every set replaced by its convex hull.
    pub fn convexified(&self) -> Self {
        let n = self.base.intervals.len();
        let hull = self.base.convex_hull();
        Self {
            base: hull,
            shifts: vec![(self.shifts[0].0, self.shifts[n - 1].1)],
            rule: self.rule,
            theta_bounds: self.theta_bounds,
        }
    }
}

impl TryFrom<AmbiguityConfig> for AmbiguityMap {
    type Error = Error;

    fn try_from(c: AmbiguityConfig) -> Result<Self> {
        let n = c.intervals.intervals.len();
        let shifts = c.endpoint_shifts.unwrap_or_else(|| vec![(0.0, 0.0); n]);
        let bounds = match (c.theta_bounds, c.theta_rule) {
            (Some(b), _) => b,
            (None, ThetaRule::Constant { theta0 }) => (theta0, theta0),
            (None, ThetaRule::AffineMoments { .. }) => {
                return Err(Error::Config("affine_moments theta rule requires theta_bounds".into()))
            }
        };
        Self::new(c.intervals, shifts, c.theta_rule, bounds)
    }
}

impl From<AmbiguityMap> for AmbiguityConfig {
    fn from(m: AmbiguityMap) -> Self {
        Self {
            intervals: m.base,
            theta_rule: m.rule,
            endpoint_shifts: Some(m.shifts),
            theta_bounds: Some(m.theta_bounds),
        }
    }
}
