//! The Θ-Expectation `E[xi] = Y_0` and checkers for its structural properties.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bsde::{solve_deterministic_ode, standard_error, OdePath, PolynomialRegression};
use crate::coupling::{picard_solve, PicardOptions, PicardSolution};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::optimizer::{driver_g, DriverFunction, StatePoint};
use crate::sde::{Diffusion, Drift, ProblemSpec, SolutionPaths, Terminal, TimeGrid};
use crate::uncertainty::{AmbiguityMap, IntervalUnion};

/// Radius of the `|y|` neighborhood where the quartic family is trusted to
/// have a convex `G`.
pub const CONVEXITY_GUARD: f64 = 0.5;

/// Deterministic checks are exact up to the integrator.
pub const DETERMINISTIC_TOLERANCE: f64 = 1e-8;

/// Number of combined standard errors allowed in stochastic checks.
pub const SE_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Time steps on `[0, T]`.
    pub n_steps: usize,
    pub picard: PicardOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_steps: 100, picard: PicardOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub enum ThetaSolution {
    Ode(OdePath),
    Picard(Box<PicardSolution>),
}

#[derive(Debug, Clone)]
pub struct ThetaValue {
    pub y0: f64,
    /// Zero in the deterministic reduction.
    pub std_error: f64,
    pub solution: ThetaSolution,
}

/// `G(y)` along a deterministic solution, where the law of `Y` is `delta_y`.
pub fn deterministic_g(spec: &ProblemSpec, y: f64) -> Result<f64> {
    let law = EmpiricalMeasure::dirac(y);
    let set = spec.ambiguity.realize_set(&law)?;
    let z = vec![0.0; spec.noise_dim];
    driver_g(&set, &spec.driver, &StatePoint { t: 0.0, x: &spec.x0, y, z: &z, law: &law })
}

/// `E[Phi(X_T)]` for the configured terminal.
pub fn theta_expectation(spec: &ProblemSpec, opts: &EvalOptions) -> Result<ThetaValue> {
    if let (true, Some(xi)) = (spec.is_deterministic(), spec.terminal.constant_value()) {
        let path = solve_deterministic_ode(|y| deterministic_g(spec, y), xi, spec.horizon, opts.n_steps)?;
        return Ok(ThetaValue { y0: path.initial(), std_error: 0.0, solution: ThetaSolution::Ode(path) });
    }
    let grid = TimeGrid::new(spec.horizon, opts.n_steps)?;
    let sol = picard_solve(spec, &grid, &opts.picard)?;
    Ok(ThetaValue { y0: sol.y0(), std_error: sol.y0_std_error, solution: ThetaSolution::Picard(Box::new(sol)) })
}

/// Deterministic spec with the quartic driver and constant terminal `xi`.
pub fn quartic_spec(lambda: f64, gamma: f64, horizon: f64, xi: f64) -> Result<ProblemSpec> {
    let driver = DriverFunction::quartic(lambda, gamma)?;
    // wide enough to contain every unconstrained maximizer inside the guard
    let radius = lambda * 10.0 / (lambda - gamma) + 1.0;
    Ok(ProblemSpec {
        state_dim: 1,
        noise_dim: 1,
        horizon,
        x0: vec![0.0],
        drift: Drift::Affine { constant: vec![0.0], state: DMatrix::zeros(1, 1), control: vec![0.0] },
        diffusion: Diffusion::Constant(DMatrix::zeros(1, 1)),
        driver,
        terminal: Terminal::Constant(xi),
        ambiguity: AmbiguityMap::fixed(IntervalUnion::single(-radius, radius)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub direct: f64,
    pub composed: f64,
    pub discrepancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|E[E[xi | F_t]] - E[xi]|`: solve on `[t, T]`, then on `[0, t]` with the
/// intermediate value as terminal data.
pub fn check_dynamic_consistency(spec: &ProblemSpec, opts: &EvalOptions, split: f64) -> Result<ConsistencyReport> {
    let horizon = spec.horizon;
    if !(split > 0.0 && split < horizon) {
        return Err(Error::Usage(format!("split time must lie in (0, {horizon}), got {split}")));
    }
    let head = ((opts.n_steps as f64) * split / horizon).round() as usize;
    if head == 0 || head >= opts.n_steps {
        return Err(Error::Usage(format!("split time {split} falls outside the {} step grid", opts.n_steps)));
    }
    let tail = opts.n_steps - head;

    if let (true, Some(xi)) = (spec.is_deterministic(), spec.terminal.constant_value()) {
        let g = |y| deterministic_g(spec, y);
        let direct = solve_deterministic_ode(g, xi, horizon, opts.n_steps)?.initial();
        let mid = solve_deterministic_ode(g, xi, horizon - split, tail)?.initial();
        let composed = solve_deterministic_ode(g, mid, split, head)?.initial();
        let discrepancy = (composed - direct).abs();
        return Ok(ConsistencyReport {
            direct,
            composed,
            discrepancy,
            tolerance: DETERMINISTIC_TOLERANCE,
            pass: discrepancy <= DETERMINISTIC_TOLERANCE,
        });
    }

    let full = theta_expectation(spec, opts)?;
    let ThetaSolution::Picard(sol) = &full.solution else { unreachable!("stochastic spec") };
    // E[xi | F_t] as a function of X_t, read off the converged solution
    let xs = sol.paths.x.node(head);
    let ys = sol.paths.y.node(head);
    let reg = Arc::new(PolynomialRegression::fit(head, xs, spec.state_dim, &[ys], opts.picard.backward.degree)?);
    let inner = spec.with_horizon(split).with_terminal(Terminal::Generic(Arc::new(move |x: &[f64]| reg.predict(x, 0))));
    let inner_opts =
        EvalOptions { n_steps: head, picard: PicardOptions { seed: opts.picard.seed.wrapping_add(1), ..opts.picard } };
    let composed = theta_expectation(&inner, &inner_opts)?;
    let discrepancy = (composed.y0 - full.y0).abs();
    let tolerance = SE_MULTIPLIER * full.std_error.hypot(composed.std_error);
    Ok(ConsistencyReport {
        direct: full.y0,
        composed: composed.y0,
        discrepancy,
        tolerance,
        pass: discrepancy <= tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub upper: f64,
    pub lower: f64,
    /// `E[xi1] - E[xi2]`; negative values are violations.
    pub margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Ordering of two terminals, checked on constants exactly and otherwise on
/// random states around `x0`.
fn terminals_ordered(spec: &ProblemSpec, upper: &Terminal, lower: &Terminal) -> bool {
    if let (Some(u), Some(l)) = (upper.constant_value(), lower.constant_value()) {
        return u >= l;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f6e6f);
    let mut x = spec.x0.clone();
    (0..1000).all(|_| {
        for (xi, &c) in x.iter_mut().zip(&spec.x0) {
            *xi = c + rng.gen_range(-10.0..=10.0);
        }
        upper.eval(&x) >= lower.eval(&x) - 1e-12
    })
}

/// Compares `E[xi1]` with `E[xi2]` for `xi1 >= xi2`.
pub fn check_monotonicity(
    spec: &ProblemSpec,
    opts: &EvalOptions,
    upper: &Terminal,
    lower: &Terminal,
) -> Result<MonotonicityReport> {
    if !terminals_ordered(spec, upper, lower) {
        return Err(Error::Usage("monotonicity check needs xi1 >= xi2 pointwise".into()));
    }
    let a = theta_expectation(&spec.with_terminal(upper.clone()), opts)?;
    let b = theta_expectation(&spec.with_terminal(lower.clone()), opts)?;
    let margin = a.y0 - b.y0;
    let tolerance = SE_MULTIPLIER * a.std_error.hypot(b.std_error);
    Ok(MonotonicityReport { upper: a.y0, lower: b.y0, margin, tolerance, pass: margin >= -tolerance })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubadditivityReport {
    /// `E[c + (-c)] = E[0]`.
    pub e_zero: f64,
    pub e_plus: f64,
    pub e_minus: f64,
    /// `E[c] + E[-c]`.
    pub split_sum: f64,
    /// `split_sum - e_zero`; positive values violate sub-additivity.
    pub gap: f64,
}

fn guarded_path(lambda: f64, gamma: f64, horizon: f64, xi: f64, n_steps: usize) -> Result<OdePath> {
    let spec = quartic_spec(lambda, gamma, horizon, xi)?;
    let path = solve_deterministic_ode(|y| deterministic_g(&spec, y), xi, horizon, n_steps)?;
    if let Some(y) = path.values.iter().find(|y| y.abs() > CONVEXITY_GUARD) {
        return Err(Error::Parameter(format!(
            "|y| reached {:.4} > {CONVEXITY_GUARD} for terminal {xi}; choose a smaller c or T",
            y.abs()
        )));
    }
    Ok(path)
}

/// Sub-additivity test `E[c + (-c)]` against `E[c] + E[-c]` for the quartic family.
pub fn check_subadditivity(
    lambda: f64,
    gamma: f64,
    c: f64,
    horizon: f64,
    n_steps: usize,
) -> Result<SubadditivityReport> {
    let e_zero = guarded_path(lambda, gamma, horizon, 0.0, n_steps)?.initial();
    let e_plus = guarded_path(lambda, gamma, horizon, c, n_steps)?.initial();
    let e_minus = guarded_path(lambda, gamma, horizon, -c, n_steps)?.initial();
    let split_sum = e_plus + e_minus;
    Ok(SubadditivityReport { e_zero, e_plus, e_minus, split_sum, gap: split_sum - e_zero })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TranslationReport {
    pub base: f64,
    pub shifted: f64,
    /// `E[xi + c] - (E[xi] + c)`.
    pub defect: f64,
    pub tolerance: f64,
}

pub fn check_translation_invariance(spec: &ProblemSpec, opts: &EvalOptions, c: f64) -> Result<TranslationReport> {
    let base = theta_expectation(spec, opts)?;
    let shifted = theta_expectation(&spec.with_terminal(spec.terminal.shifted(c)), opts)?;
    let tolerance = if base.std_error == 0.0 && shifted.std_error == 0.0 {
        DETERMINISTIC_TOLERANCE
    } else {
        SE_MULTIPLIER * base.std_error.hypot(shifted.std_error)
    };
    Ok(TranslationReport { base: base.y0, shifted: shifted.y0, defect: shifted.y0 - (base.y0 + c), tolerance })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub max_abs_driver: f64,
    /// Per-step z-scores of the increments of `Y`.
    pub y_zscores: Vec<f64>,
    /// Per-step z-scores of the increments of `M_i = Y_i + sum_{j<i} F_j dt`.
    pub m_zscores: Vec<f64>,
    /// Share of `m_zscores` inside `[-3, 3]`.
    pub m_within: f64,
    pub y_within: f64,
}

fn zscore(increments: &[f64]) -> f64 {
    let n = increments.len() as f64;
    let mean = increments.iter().sum::<f64>() / n;
    let se = standard_error(increments);
    if se == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(mean)
        }
    } else {
        mean / se
    }
}

fn share_within(z: &[f64], bound: f64) -> f64 {
    if z.is_empty() {
        return 1.0;
    }
    z.iter().filter(|v| v.abs() <= bound).count() as f64 / z.len() as f64
}

pub fn martingale_diagnostics(paths: &SolutionPaths) -> MartingaleReport {
    let n = paths.n_particles();
    let dt = paths.grid.dt();
    let steps = paths.grid.n_steps;
    let max_abs_driver = paths.driver.as_slice().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut y_inc = vec![0.0; n];
    let mut m_inc = vec![0.0; n];
    let mut y_zscores = Vec::with_capacity(steps);
    let mut m_zscores = Vec::with_capacity(steps);
    for i in 0..steps {
        for p in 0..n {
            y_inc[p] = paths.y.scalar(i + 1, p) - paths.y.scalar(i, p);
            m_inc[p] = y_inc[p] + paths.driver.scalar(i, p) * dt;
        }
        y_zscores.push(zscore(&y_inc));
        m_zscores.push(zscore(&m_inc));
    }
    MartingaleReport {
        max_abs_driver,
        m_within: share_within(&m_zscores, SE_MULTIPLIER),
        y_within: share_within(&y_zscores, SE_MULTIPLIER),
        y_zscores,
        m_zscores,
    }
}

/// `max_t |M_t - M_0|` for `M_t = y(t) + int_0^t G(y) ds`, trapezoid rule.
pub fn ode_martingale_defect<G>(path: &OdePath, g: G) -> Result<f64>
where
    G: Fn(f64) -> Result<f64>,
{
    let gs = path.values.iter().map(|&y| g(y)).collect::<Result<Vec<_>>>()?;
    let mut integral = 0.0;
    let mut worst = 0.0_f64;
    let m0 = path.values[0];
    for i in 1..path.values.len() {
        integral += 0.5 * (gs[i] + gs[i - 1]) * (path.times[i] - path.times[i - 1]);
        worst = worst.max((path.values[i] + integral - m0).abs());
    }
    Ok(worst)
}

/// One line of a property report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PropertyReport {
    pub checks: Vec<PropertyCheck>,
}

impl PropertyReport {
    pub fn push(&mut self, name: &str, value: f64, tolerance: f64, pass: bool) {
        self.checks.push(PropertyCheck { name: name.into(), value, tolerance, pass });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Property suite on a configured spec: dynamic consistency at `T/2`,
/// monotonicity against `xi - 1`, translation by `0.1` and the martingale
/// decomposition. The translation check only passes when the driver's
/// dependence on `y` matches what the defect shows.
pub fn run_property_suite(spec: &ProblemSpec, opts: &EvalOptions) -> Result<PropertyReport> {
    let mut report = PropertyReport::default();
    let dc = check_dynamic_consistency(spec, opts, 0.5 * spec.horizon)?;
    report.push("dynamic_consistency", dc.discrepancy, dc.tolerance, dc.pass);
    let mono = check_monotonicity(spec, opts, &spec.terminal, &spec.terminal.shifted(-1.0))?;
    report.push("monotonicity", mono.margin, mono.tolerance, mono.pass);
    let tr = check_translation_invariance(spec, opts, 0.1)?;
    let invariant = tr.defect.abs() <= tr.tolerance;
    let expect_invariant = !spec.driver.depends_on_y();
    let translation_pass = if expect_invariant { invariant } else { tr.defect != 0.0 };
    report.push("translation_defect", tr.defect, tr.tolerance, translation_pass);
    match theta_expectation(spec, opts)?.solution {
        ThetaSolution::Picard(sol) => {
            let m = martingale_diagnostics(&sol.paths);
            report.push("m_decomposition_within_3se", m.m_within, 0.95, m.m_within >= 0.95);
        }
        ThetaSolution::Ode(path) => {
            let defect = ode_martingale_defect(&path, |y| deterministic_g(spec, y))?;
            report.push("m_decomposition_defect", defect, DETERMINISTIC_TOLERANCE, defect <= DETERMINISTIC_TOLERANCE);
        }
    }
    Ok(report)
}
