//! Pointwise maximization of a strongly concave driver over an interval union.
//!
//! On each interval the control derivative `dF/da` is strictly decreasing, so
//! the constrained maximizer is either the unique stationary point or the
//! endpoint toward which the derivative points. The stationary point is found
//! by Newton's method safeguarded by a bisection bracket. The global maximizer
//! is the best per-interval candidate. KKT multipliers never appear
//! explicitly: a clamped endpoint with an outward-pointing derivative is the
//! same statement for interval constraints.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::uncertainty::{AmbiguityMap, IntervalUnion};

/// Candidate values closer than this are ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

const MAX_NEWTON_ITERATIONS: usize = 200;

/// Arguments of the driver other than the control.
#[derive(Debug, Clone, Copy)]
pub struct StatePoint<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    pub law: &'a EmpiricalMeasure,
}

/// The `f0(y)` part of the quadratic-penalty driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseValue {
    Zero,
    Linear {
        lambda0: f64,
    },
    /// Piecewise-linear interpolation through `(y, f0(y))` nodes, extended
    /// linearly beyond the outermost segments.
    Table {
        points: Vec<(f64, f64)>,
    },
}

impl BaseValue {
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            BaseValue::Zero => 0.0,
            BaseValue::Linear { lambda0 } => lambda0 * y,
            BaseValue::Table { points } => {
                if points.len() == 1 {
                    return points[0].1;
                }
                let seg = points.windows(2).position(|w| y <= w[1].0).unwrap_or(points.len() - 2);
                let (y0, v0) = points[seg];
                let (y1, v1) = points[seg + 1];
                v0 + (v1 - v0) * (y - y0) / (y1 - y0)
            }
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            BaseValue::Zero => 0.0,
            BaseValue::Linear { lambda0 } => lambda0.abs(),
            BaseValue::Table { points } => {
                points.windows(2).map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs()).fold(0.0, f64::max)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, BaseValue::Zero)
    }

    fn validate(&self) -> Result<()> {
        if let BaseValue::Table { points } = self {
            if points.is_empty() {
                return Err(Error::Config("f0 table needs at least one point".into()));
            }
            if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::Config("f0 table abscissae must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

pub type DriverFn = Arc<dyn Fn(&StatePoint<'_>, f64) -> f64 + Send + Sync>;

/// User-supplied driver with its first two control derivatives.
#[derive(Clone)]
pub struct GenericDriver {
    pub value: DriverFn,
    pub da: DriverFn,
    pub daa: DriverFn,
    /// Declared strong-concavity modulus.
    pub kappa: f64,
    /// Whether the value depends on `y`; drives the translation-invariance check.
    pub depends_on_y: bool,
}

impl fmt::Debug for GenericDriver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericDriver").field("kappa", &self.kappa).finish_non_exhaustive()
    }
}

/// The running objective `F(t, x, y, z, a, mu)` of the backward equation.
#[derive(Debug, Clone)]
pub enum DriverFunction {
    /// `f0(y) - kappa/2 (a - w0)^2`.
    QuadraticPenalty {
        kappa: f64,
        w0: f64,
        f0: BaseValue,
    },
    /// `gamma/4 - gamma/4 (a^2 - 1)^2 - lambda/2 (a - y)^2`, with `lambda > gamma > 0`.
    Quartic {
        lambda: f64,
        gamma: f64,
    },
    Generic(GenericDriver),
}

/// Structured-text form of the built-in driver families.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    QuadraticPenalty {
        kappa: f64,
        w0: f64,
        #[serde(default = "zero_base")]
        f0: BaseValue,
    },
    Quartic {
        lambda: f64,
        gamma: f64,
    },
}

fn zero_base() -> BaseValue {
    BaseValue::Zero
}

impl TryFrom<DriverConfig> for DriverFunction {
    type Error = Error;

    fn try_from(c: DriverConfig) -> Result<Self> {
        match c {
            DriverConfig::QuadraticPenalty { kappa, w0, f0 } => Self::quadratic_penalty(kappa, w0, f0),
            DriverConfig::Quartic { lambda, gamma } => Self::quartic(lambda, gamma),
        }
    }
}

impl DriverFunction {
    pub fn quadratic_penalty(kappa: f64, w0: f64, f0: BaseValue) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Parameter(format!("penalty kappa must be positive, got {kappa}")));
        }
        if !w0.is_finite() {
            return Err(Error::Parameter("reference control w0 must be finite".into()));
        }
        f0.validate()?;
        Ok(Self::QuadraticPenalty { kappa, w0, f0 })
    }

    pub fn quartic(lambda: f64, gamma: f64) -> Result<Self> {
        check_quartic(lambda, gamma)?;
        Ok(Self::Quartic { lambda, gamma })
    }

    /// Driver that vanishes at its optimum whenever `0` is an admissible control.
    pub fn null() -> Self {
        Self::QuadraticPenalty { kappa: 1.0, w0: 0.0, f0: BaseValue::Zero }
    }

    pub fn value(&self, p: &StatePoint<'_>, a: f64) -> f64 {
        match self {
            Self::QuadraticPenalty { kappa, w0, f0 } => f0.eval(p.y) - 0.5 * kappa * (a - w0).powi(2),
            Self::Quartic { lambda, gamma } => {
                gamma / 4.0 - gamma / 4.0 * (a * a - 1.0).powi(2) - lambda / 2.0 * (a - p.y).powi(2)
            }
            Self::Generic(g) => (g.value)(p, a),
        }
    }

    pub fn da(&self, p: &StatePoint<'_>, a: f64) -> f64 {
        match self {
            Self::QuadraticPenalty { kappa, w0, .. } => -kappa * (a - w0),
            Self::Quartic { lambda, gamma } => -gamma * a * (a * a - 1.0) - lambda * (a - p.y),
            Self::Generic(g) => (g.da)(p, a),
        }
    }

    pub fn daa(&self, p: &StatePoint<'_>, a: f64) -> f64 {
        match self {
            Self::QuadraticPenalty { kappa, .. } => -kappa,
            Self::Quartic { lambda, gamma } => -gamma * (3.0 * a * a - 1.0) - lambda,
            Self::Generic(g) => (g.daa)(p, a),
        }
    }

    /// Declared strong-concavity modulus.
    pub fn kappa(&self) -> f64 {
        match self {
            Self::QuadraticPenalty { kappa, .. } => *kappa,
            Self::Quartic { lambda, gamma } => lambda - gamma,
            Self::Generic(g) => g.kappa,
        }
    }

    pub fn depends_on_y(&self) -> bool {
        match self {
            Self::QuadraticPenalty { f0, .. } => !f0.is_zero(),
            Self::Quartic { .. } => true,
            Self::Generic(g) => g.depends_on_y,
        }
    }

    /// Whether the driver ignores `t`, `x`, `z` and the law, so the backward
    /// equation collapses to an ODE in `y` when there is no noise.
    pub fn is_state_free(&self) -> bool {
        !matches!(self, Self::Generic(_))
    }
}

fn check_quartic(lambda: f64, gamma: f64) -> Result<()> {
    if !(lambda > gamma && gamma > 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!(
            "quartic driver needs lambda > gamma > 0, got lambda = {lambda}, gamma = {gamma}"
        )));
    }
    Ok(())
}

/// Which constraint binds at the maximizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveBoundary {
    Interior,
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerResult {
    pub a_star: f64,
    /// `F(p, a_star)`.
    pub value: f64,
    pub active: ActiveBoundary,
    pub tie: bool,
    /// Index of the interval holding `a_star`.
    pub component: usize,
}

/// A smooth, strongly concave function of the scalar control.
pub trait ControlObjective {
    fn value(&self, a: f64) -> f64;
    fn da(&self, a: f64) -> f64;
    fn daa(&self, a: f64) -> f64;
}

struct DriverAt<'a, 'p> {
    driver: &'a DriverFunction,
    p: &'a StatePoint<'p>,
}

impl ControlObjective for DriverAt<'_, '_> {
    fn value(&self, a: f64) -> f64 {
        self.driver.value(self.p, a)
    }

    fn da(&self, a: f64) -> f64 {
        self.driver.da(self.p, a)
    }

    fn daa(&self, a: f64) -> f64 {
        self.driver.daa(self.p, a)
    }
}

/// Maximizer of `a -> F(p, a)` over the set.
pub fn maximize_over(set: &IntervalUnion, driver: &DriverFunction, p: &StatePoint<'_>) -> Result<OptimizerResult> {
    maximize_objective(set, &DriverAt { driver, p })
}

/// Maximizer of an arbitrary strongly concave objective over the set.
pub fn maximize_objective<O: ControlObjective + ?Sized>(set: &IntervalUnion, objective: &O) -> Result<OptimizerResult> {
    let mut best: Option<OptimizerResult> = None;
    for (component, &(lo, hi)) in set.intervals().iter().enumerate() {
        let (a, active) = maximize_on_interval(lo, hi, objective)?;
        let value = objective.value(a);
        let candidate = OptimizerResult { a_star: a, value, active, tie: false, component };
        best = Some(match best {
            None => candidate,
            Some(incumbent) if value > incumbent.value + TIE_TOLERANCE => candidate,
            Some(incumbent) if (value - incumbent.value).abs() <= TIE_TOLERANCE => {
                OptimizerResult { tie: true, ..incumbent }
            }
            Some(incumbent) => incumbent,
        });
    }
    Ok(best.expect("interval unions are non-empty"))
}

/// `G(p) = sup_{a in U} F(p, a)`.
pub fn driver_g(set: &IntervalUnion, driver: &DriverFunction, p: &StatePoint<'_>) -> Result<f64> {
    maximize_over(set, driver, p).map(|r| r.value)
}

fn curvature_checked<O: ControlObjective + ?Sized>(objective: &O, a: f64) -> Result<f64> {
    let h = objective.daa(a);
    if h >= 0.0 || h.is_nan() {
        return Err(Error::Concavity { a, second_derivative: h });
    }
    Ok(h)
}

fn maximize_on_interval<O: ControlObjective + ?Sized>(lo: f64, hi: f64, f: &O) -> Result<(f64, ActiveBoundary)> {
    curvature_checked(f, lo)?;
    if lo == hi {
        return Ok((lo, ActiveBoundary::Lower));
    }
    if f.da(lo) <= 0.0 {
        return Ok((lo, ActiveBoundary::Lower));
    }
    curvature_checked(f, hi)?;
    if f.da(hi) >= 0.0 {
        return Ok((hi, ActiveBoundary::Upper));
    }

    // da(left) > 0 > da(right)
    let (mut left, mut right) = (lo, hi);
    let mut a = 0.5 * (lo + hi);
    for _ in 0..MAX_NEWTON_ITERATIONS {
        let g = f.da(a);
        if g == 0.0 {
            break;
        }
        let h = curvature_checked(f, a)?;
        if g > 0.0 {
            left = a;
        } else {
            right = a;
        }
        let newton = a - g / h;
        let next = if newton > left && newton < right { newton } else { 0.5 * (left + right) };
        if next == a || right - left <= f64::EPSILON * a.abs().max(1.0) {
            break;
        }
        a = next;
    }
    Ok((a, ActiveBoundary::Interior))
}

/// Unconstrained maximizer of the quartic driver at `y`: the real root of
/// `gamma a^3 + (lambda - gamma) a - lambda y = 0`.
pub fn quartic_maximizer(lambda: f64, gamma: f64, y: f64) -> Result<OptimizerResult> {
    check_quartic(lambda, gamma)?;
    // |a| (gamma a^2 + lambda - gamma) = lambda |y| bounds the root
    let radius = lambda * y.abs() / (lambda - gamma) + 1.0;
    let set = IntervalUnion::single(-radius, radius)?;
    let law = EmpiricalMeasure::dirac(y);
    let p = StatePoint { t: 0.0, x: &[], y, z: &[], law: &law };
    maximize_over(&set, &DriverFunction::Quartic { lambda, gamma }, &p)
}

/// `G(y)` for the unconstrained quartic driver.
pub fn quartic_g(lambda: f64, gamma: f64, y: f64) -> Result<f64> {
    quartic_maximizer(lambda, gamma, y).map(|r| r.value)
}

/// Envelope derivative `G'(y) = lambda (a*(y) - y)` of the unconstrained quartic driver.
pub fn envelope_dg_dy(driver: &DriverFunction, y: f64) -> Result<f64> {
    match *driver {
        DriverFunction::Quartic { lambda, gamma } => Ok(lambda * (quartic_maximizer(lambda, gamma, y)?.a_star - y)),
        _ => Err(Error::Unsupported("envelope derivative is implemented for the quartic family only".into())),
    }
}

/// `G''(0)` of the unconstrained quartic driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvatureAtZero {
    /// `lambda gamma / (lambda - gamma)`.
    pub analytic: f64,
    /// Central second difference of `G` with step `h`.
    pub numeric: f64,
    pub h: f64,
}

impl CurvatureAtZero {
    pub fn relative_error(&self) -> f64 {
        ((self.numeric - self.analytic) / self.analytic).abs()
    }
}

pub fn second_derivative_at_zero(driver: &DriverFunction, h: f64) -> Result<CurvatureAtZero> {
    let DriverFunction::Quartic { lambda, gamma } = *driver else {
        return Err(Error::Unsupported("G''(0) is implemented for the quartic family only".into()));
    };
    check_quartic(lambda, gamma)?;
    let g = |y| quartic_g(lambda, gamma, y);
    let numeric = (g(h)? - 2.0 * g(0.0)? + g(-h)?) / (h * h);
    Ok(CurvatureAtZero { analytic: lambda * gamma / (lambda - gamma), numeric, h })
}

/// Box of states and controls sampled by [`concavity_audit`].
#[derive(Debug, Clone)]
pub struct AuditRanges {
    pub t: (f64, f64),
    pub x: Vec<(f64, f64)>,
    pub y: (f64, f64),
    pub z: Vec<(f64, f64)>,
    pub a: (f64, f64),
}

impl AuditRanges {
    /// Scalar ranges for one-dimensional state and noise.
    pub fn scalar(y: (f64, f64), a: (f64, f64)) -> Self {
        Self { t: (0.0, 1.0), x: vec![(-3.0, 3.0)], y, z: vec![(-3.0, 3.0)], a }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditWitness {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: f64,
    pub z: Vec<f64>,
    pub a: f64,
    pub second_derivative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    /// Smallest observed `-d2F/da2`.
    pub min_curvature: f64,
    pub declared_kappa: f64,
    pub pass: bool,
    /// Worst sampled point, reported on failure.
    pub witness: Option<AuditWitness>,
}

/// Samples states and controls and checks `d2F/da2 <= -kappa` everywhere.
pub fn concavity_audit(driver: &DriverFunction, samples: usize, ranges: &AuditRanges, seed: u64) -> AuditReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let kappa = driver.kappa();
    let mut worst: Option<AuditWitness> = None;
    for _ in 0..samples.max(1) {
        let t = draw(&mut rng, ranges.t);
        let x: Vec<f64> = ranges.x.iter().map(|&r| draw(&mut rng, r)).collect();
        let y = draw(&mut rng, ranges.y);
        let z: Vec<f64> = ranges.z.iter().map(|&r| draw(&mut rng, r)).collect();
        let a = draw(&mut rng, ranges.a);
        let law = EmpiricalMeasure::dirac(y);
        let second_derivative = driver.daa(&StatePoint { t, x: &x, y, z: &z, law: &law }, a);
        if worst.as_ref().is_none_or(|w| second_derivative > w.second_derivative) {
            worst = Some(AuditWitness { t, x, y, z, a, second_derivative });
        }
    }
    let worst = worst.expect("at least one sample");
    let min_curvature = -worst.second_derivative;
    let pass = min_curvature >= kappa * (1.0 - 1e-12) && kappa > 0.0;
    AuditReport { min_curvature, declared_kappa: kappa, pass, witness: (!pass).then_some(worst) }
}

/// One optimizer parameter `(t, x, y, z, mu)`.
#[derive(Debug, Clone)]
pub struct ProbeParams {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: f64,
    pub z: Vec<f64>,
    pub law: EmpiricalMeasure,
}

impl ProbeParams {
    fn point(&self) -> StatePoint<'_> {
        StatePoint { t: self.t, x: &self.x, y: self.y, z: &self.z, law: &self.law }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub max_ratio: f64,
    pub evaluated: usize,
    /// Pairs dropped for a zero denominator, a tie flag, or a switch of the
    /// maximizing interval between the two parameters.
    pub excluded: usize,
}

/// Empirical Lipschitz constant of the maximizer map `p -> a*(p)`.
pub fn lipschitz_probe<S>(
    map: &AmbiguityMap,
    driver: &DriverFunction,
    mut sampler: S,
    pairs: usize,
    seed: u64,
) -> Result<ProbeReport>
where
    S: FnMut(&mut ChaCha8Rng) -> (ProbeParams, ProbeParams),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ProbeReport { max_ratio: 0.0, evaluated: 0, excluded: 0 };
    for _ in 0..pairs {
        let (p1, p2) = sampler(&mut rng);
        let norm = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let denom = norm(&p1.x, &p2.x) + (p1.y - p2.y).abs() + norm(&p1.z, &p2.z) + p1.law.w2(&p2.law)?;
        let r1 = maximize_over(&map.realize_set(&p1.law)?, driver, &p1.point())?;
        let r2 = maximize_over(&map.realize_set(&p2.law)?, driver, &p2.point())?;
        if denom == 0.0 || r1.tie || r2.tie || r1.component != r2.component {
            report.excluded += 1;
            continue;
        }
        report.evaluated += 1;
        report.max_ratio = report.max_ratio.max((r1.a_star - r2.a_star).abs() / denom);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn at(y: f64, law: &EmpiricalMeasure) -> StatePoint<'_> {
        StatePoint { t: 0.0, x: &[], y, z: &[], law }
    }

    fn two_regimes() -> IntervalUnion {
        IntervalUnion::new(vec![(-2.0, -1.0), (1.0, 2.0)]).unwrap()
    }

    /// Root of `gamma a^3 + (lambda - gamma) a - lambda y` by plain bisection.
    fn cubic_root_bisection(lambda: f64, gamma: f64, y: f64) -> f64 {
        let f = |a: f64| gamma * a.powi(3) + (lambda - gamma) * a - lambda * y;
        let (mut lo, mut hi) = (-100.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quartic_maximizer_at_zero() {
        let law = EmpiricalMeasure::dirac(0.0);
        let set = IntervalUnion::single(-10.0, 10.0).unwrap();
        let r = maximize_over(&set, &DriverFunction::quartic(2.0, 1.0).unwrap(), &at(0.0, &law)).unwrap();
        assert_eq!(r.a_star, 0.0);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.active, ActiveBoundary::Interior);
    }

    #[test]
    fn quadratic_penalty_reduces_to_projection() {
        let law = EmpiricalMeasure::dirac(0.3);
        let driver = DriverFunction::quadratic_penalty(1.0, 0.6, BaseValue::Linear { lambda0: 0.5 }).unwrap();
        let r = maximize_over(&two_regimes(), &driver, &at(0.3, &law)).unwrap();
        assert_eq!(r.a_star, 1.0);
        assert_eq!(r.active, ActiveBoundary::Lower);
        assert!(!r.tie);
    }

    #[test]
    fn quartic_maximizer_off_zero() {
        // lambda=2, gamma=1 at y=0.1: a^3 + a = 0.2
        let oracle = cubic_root_bisection(2.0, 1.0, 0.1);
        assert!((oracle - 0.192_830).abs() < 1e-6);
        let law = EmpiricalMeasure::dirac(0.1);
        let set = IntervalUnion::single(-10.0, 10.0).unwrap();
        let r = maximize_over(&set, &DriverFunction::quartic(2.0, 1.0).unwrap(), &at(0.1, &law)).unwrap();
        assert!((r.a_star - oracle).abs() < 1e-10);
    }

    #[test]
    fn g_examples() {
        let law = EmpiricalMeasure::dirac(0.0);
        assert_eq!(quartic_g(2.0, 1.0, 0.0).unwrap(), 0.0);
        let inside = DriverFunction::quadratic_penalty(1.0, 1.5, BaseValue::Zero).unwrap();
        assert_eq!(driver_g(&two_regimes(), &inside, &at(0.0, &law)).unwrap(), 0.0);
        let gap = DriverFunction::quadratic_penalty(1.0, 0.6, BaseValue::Zero).unwrap();
        let g = driver_g(&two_regimes(), &gap, &at(0.0, &law)).unwrap();
        assert!((g + 0.08).abs() < 1e-15, "{g}");
    }

    #[test]
    fn envelope_derivative() {
        let d = DriverFunction::quartic(2.0, 1.0).unwrap();
        assert_eq!(envelope_dg_dy(&d, 0.0).unwrap(), 0.0);
        let h = 1e-4;
        let fd = (quartic_g(2.0, 1.0, h).unwrap() - quartic_g(2.0, 1.0, -h).unwrap()) / (2.0 * h);
        assert!(fd.abs() < 1e-6);
        let expected = 2.0 * (cubic_root_bisection(2.0, 1.0, 0.1) - 0.1);
        assert!((envelope_dg_dy(&d, 0.1).unwrap() - expected).abs() < 1e-10);
        assert!((expected - 0.185_660).abs() < 1e-5);
        assert!(matches!(envelope_dg_dy(&DriverFunction::null(), 0.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn envelope_matches_central_difference_away_from_zero() {
        let d = DriverFunction::quartic(3.0, 1.0).unwrap();
        for y in [-0.4, 0.05, 0.3] {
            let h = 1e-5;
            let fd = (quartic_g(3.0, 1.0, y + h).unwrap() - quartic_g(3.0, 1.0, y - h).unwrap()) / (2.0 * h);
            assert!((envelope_dg_dy(&d, y).unwrap() - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn curvature_at_zero() {
        for (lambda, gamma, expected) in [(2.0, 1.0, 2.0), (3.0, 1.0, 1.5)] {
            let c = second_derivative_at_zero(&DriverFunction::quartic(lambda, gamma).unwrap(), 1e-3).unwrap();
            assert_eq!(c.analytic, expected);
            assert!(c.relative_error() < 1e-4, "{c:?}");
        }
        let bad = DriverFunction::Quartic { lambda: 1.0, gamma: 1.0 };
        assert!(matches!(second_derivative_at_zero(&bad, 1e-3), Err(Error::Parameter(_))));
        assert!(DriverFunction::quartic(1.0, 2.0).is_err());
    }

    #[test]
    fn audit_examples() {
        let quad = concavity_audit(&DriverFunction::null(), 500, &AuditRanges::scalar((-1.0, 1.0), (-3.0, 3.0)), 1);
        assert!(quad.pass);
        assert_eq!(quad.min_curvature, 1.0);

        let quartic = DriverFunction::quartic(2.0, 1.0).unwrap();
        let r = concavity_audit(&quartic, 2000, &AuditRanges::scalar((-1.0, 1.0), (-3.0, 3.0)), 2);
        assert!(r.pass);
        assert!(r.min_curvature >= 1.0);

        let convex_patch = DriverFunction::Generic(GenericDriver {
            value: Arc::new(|_, a| a.powi(4) - 3.0 * a * a),
            da: Arc::new(|_, a| 4.0 * a.powi(3) - 6.0 * a),
            daa: Arc::new(|_, a| 12.0 * a * a - 6.0),
            kappa: 1.0,
            depends_on_y: false,
        });
        let r = concavity_audit(&convex_patch, 2000, &AuditRanges::scalar((0.0, 0.0), (-2.0, 2.0)), 3);
        assert!(!r.pass);
        let w = r.witness.unwrap();
        assert!(w.second_derivative > -1.0 && w.a.abs() > 0.5);
    }

    #[test]
    fn non_concave_driver_is_rejected_by_the_optimizer() {
        let convex = DriverFunction::Generic(GenericDriver {
            value: Arc::new(|_, a| a * a),
            da: Arc::new(|_, a| 2.0 * a),
            daa: Arc::new(|_, _| 2.0),
            kappa: 1.0,
            depends_on_y: false,
        });
        let law = EmpiricalMeasure::dirac(0.0);
        let err = maximize_over(&two_regimes(), &convex, &at(0.0, &law)).unwrap_err();
        assert!(matches!(err, Error::Concavity { .. }));
    }

    #[test]
    fn tie_is_flagged_and_broken_low() {
        let law = EmpiricalMeasure::dirac(0.0);
        let d = DriverFunction::quadratic_penalty(1.0, 0.0, BaseValue::Zero).unwrap();
        let r = maximize_over(&two_regimes(), &d, &at(0.0, &law)).unwrap();
        assert!(r.tie);
        assert_eq!(r.a_star, -1.0);
    }

    #[test]
    fn probe_single_interval_projection_is_nonexpansive() {
        use crate::uncertainty::ThetaRule;
        let map = AmbiguityMap::new(
            IntervalUnion::single(-1.0, 1.0).unwrap(),
            vec![(1.0, 1.0)],
            ThetaRule::AffineMoments { alpha: 1.0, beta: 0.0 },
            (-3.0, 3.0),
        )
        .unwrap();
        let driver = DriverFunction::quadratic_penalty(1.0, 0.6, BaseValue::Zero).unwrap();
        let sampler = |rng: &mut ChaCha8Rng| {
            let cloud = |rng: &mut ChaCha8Rng| {
                EmpiricalMeasure::new((0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
            };
            let mk = |law| ProbeParams { t: 0.0, x: vec![0.0], y: 0.0, z: vec![0.0], law };
            (mk(cloud(rng)), mk(cloud(rng)))
        };
        let r = lipschitz_probe(&map, &driver, sampler, 2000, 7).unwrap();
        assert!(r.evaluated > 1000);
        assert!(r.max_ratio <= 1.0 + 1e-9 && r.max_ratio > 0.5, "{r:?}");
    }

    #[test]
    fn probe_identical_pair_is_excluded() {
        let map = AmbiguityMap::fixed(two_regimes());
        let p = ProbeParams { t: 0.0, x: vec![], y: 0.2, z: vec![], law: EmpiricalMeasure::dirac(0.2) };
        let r = lipschitz_probe(&map, &DriverFunction::null(), |_| (p.clone(), p.clone()), 5, 0).unwrap();
        assert_eq!(r.evaluated, 0);
        assert_eq!(r.excluded, 5);
    }

    #[test]
    fn probe_quartic_near_zero_recovers_slope() {
        let map = AmbiguityMap::fixed(IntervalUnion::single(-10.0, 10.0).unwrap());
        let driver = DriverFunction::quartic(2.0, 1.0).unwrap();
        let sampler = |rng: &mut ChaCha8Rng| {
            let mk = |y: f64| ProbeParams { t: 0.0, x: vec![], y, z: vec![], law: EmpiricalMeasure::dirac(0.0) };
            let y = rng.gen_range(-1e-3..1e-3);
            (mk(y), mk(y + rng.gen_range(-1e-4..1e-4)))
        };
        let r = lipschitz_probe(&map, &driver, sampler, 500, 11).unwrap();
        assert!((r.max_ratio - 2.0).abs() < 1e-3, "{r:?}");
    }

    #[test]
    fn table_base_value_interpolates() {
        let f0 = BaseValue::Table { points: vec![(0.0, 0.0), (1.0, 2.0), (2.0, 2.0)] };
        assert_eq!(f0.eval(0.5), 1.0);
        assert_eq!(f0.eval(1.5), 2.0);
        assert_eq!(f0.eval(-1.0), -2.0);
        assert_eq!(f0.lipschitz(), 2.0);
    }

    fn union_strategy() -> impl Strategy<Value = IntervalUnion> {
        prop::collection::vec((0.0f64..1.5, 0.05f64..1.0), 1..=4).prop_map(|parts| {
            let mut cursor = -3.0;
            let mut out = Vec::new();
            for (len, gap) in parts {
                out.push((cursor, cursor + len));
                cursor += len + gap;
            }
            IntervalUnion::new(out).unwrap()
        })
    }

    fn driver_strategy() -> impl Strategy<Value = DriverFunction> {
        prop_oneof![
            (0.1f64..5.0, -4.0f64..4.0, -1.0f64..1.0).prop_map(|(k, w0, l)| {
                DriverFunction::quadratic_penalty(k, w0, BaseValue::Linear { lambda0: l }).unwrap()
            }),
            (0.1f64..3.0, 0.05f64..3.0).prop_map(|(g, gap)| DriverFunction::quartic(g + gap, g).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn optimality_conditions(set in union_strategy(), driver in driver_strategy(), y in -2.0f64..2.0, seed in any::<u64>()) {
            let law = EmpiricalMeasure::dirac(y);
            let p = at(y, &law);
            let r = maximize_over(&set, &driver, &p).unwrap();
            prop_assert!(set.contains(r.a_star));
            prop_assert_eq!(r.value, driver.value(&p, r.a_star));
            let slope = driver.da(&p, r.a_star);
            match r.active {
                ActiveBoundary::Interior => prop_assert!(slope.abs() <= 1e-10, "residual {}", slope),
                ActiveBoundary::Lower => prop_assert!(slope <= 0.0 || set.intervals()[r.component].0 == set.intervals()[r.component].1),
                ActiveBoundary::Upper => prop_assert!(slope >= 0.0),
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                let (lo, hi) = set.intervals()[rng.gen_range(0..set.intervals().len())];
                let u = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
                prop_assert!(r.value >= driver.value(&p, u) - 1e-10);
            }
        }

        #[test]
        fn enlarging_the_set_never_lowers_g(set in union_strategy(), driver in driver_strategy(), y in -2.0f64..2.0) {
            let law = EmpiricalMeasure::dirac(y);
            let p = at(y, &law);
            let small = driver_g(&set, &driver, &p).unwrap();
            prop_assert!(driver_g(&set.convex_hull(), &driver, &p).unwrap() >= small - 1e-12);
            let wider = IntervalUnion::single(set.min() - 1.0, set.max() + 1.0).unwrap();
            prop_assert!(driver_g(&wider, &driver, &p).unwrap() >= small - 1e-12);
        }

        #[test]
        fn quartic_foc_residual(g in 0.1f64..3.0, gap in 0.05f64..3.0, y in -3.0f64..3.0) {
            let lambda = g + gap;
            let a = quartic_maximizer(lambda, g, y).unwrap().a_star;
            prop_assert!((g * a.powi(3) + (lambda - g) * a - lambda * y).abs() <= 1e-10);
            prop_assert!((a - cubic_root_bisection(lambda, g, y)).abs() <= 1e-9);
        }
    }
}
