//! Turnkey runs: the quartic sub-additivity counterexample and the ambiguous
//! linear system compared with its convexified counterpart.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::coupling::{picard_solve, PicardSolution};
use crate::error::{Error, Result};
use crate::optimizer::{
    concavity_audit, second_derivative_at_zero, AuditRanges, AuditReport, BaseValue, CurvatureAtZero, DriverFunction,
};
use crate::properties::{check_subadditivity, check_translation_invariance, quartic_spec, EvalOptions};
use crate::sde::{Diffusion, Drift, ProblemSpec, SolutionPaths, TerminalConfig, TimeGrid};
use crate::uncertainty::{AmbiguityMap, IntervalUnion};

/// Step for the central second difference of `G` at zero.
pub const CURVATURE_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub lambda: f64,
    pub gamma: f64,
    pub c: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub curvature: CurvatureAtZero,
    pub e_zero: f64,
    pub e_plus: f64,
    pub e_minus: f64,
    /// `E[c] + E[-c] - E[0]`.
    pub gap: f64,
    /// `E[0 + c] - (E[0] + c)`.
    pub translation_defect: f64,
    pub audit: AuditReport,
}

pub fn run_counterexample(
    lambda: f64,
    gamma: f64,
    c: f64,
    horizon: f64,
    n_steps: usize,
) -> Result<CounterexampleReport> {
    let driver = DriverFunction::quartic(lambda, gamma)?;
    let curvature = second_derivative_at_zero(&driver, CURVATURE_STEP)?;
    let sub = check_subadditivity(lambda, gamma, c, horizon, n_steps)?;
    let opts = EvalOptions { n_steps, ..Default::default() };
    let translation = check_translation_invariance(&quartic_spec(lambda, gamma, horizon, 0.0)?, &opts, c)?;
    let audit = concavity_audit(&driver, 10_000, &AuditRanges::scalar((-1.0, 1.0), (-3.0, 3.0)), 0);
    Ok(CounterexampleReport {
        lambda,
        gamma,
        c,
        horizon,
        n_steps,
        curvature,
        e_zero: sub.e_zero,
        e_plus: sub.e_plus,
        e_minus: sub.e_minus,
        gap: sub.gap,
        translation_defect: translation.defect,
        audit,
    })
}

/// Coefficients of the ambiguous linear system with drift `C0 - (1 + 3w) C1 x`
/// and driver `f0(y) - kappa/2 (w - w0)^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationConfig {
    pub c0: Vec<f64>,
    pub c1: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub kappa: f64,
    pub w0: f64,
    #[serde(default = "zero_base")]
    pub f0: BaseValue,
    pub ambiguity: AmbiguityMap,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Defaults to `Phi(x) = sum_j x_j`.
    #[serde(default)]
    pub terminal: Option<TerminalConfig>,
}

fn zero_base() -> BaseValue {
    BaseValue::Zero
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || c == 0 || rows.iter().any(|r| r.len() != c) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), c, rows.iter().flatten().copied()))
}

impl ApplicationConfig {
    /// One-dimensional configuration with the closed-form value
    /// `Y_0 = e^{-1/2} - 0.16 (e^{1/2} - 1)`.
    pub fn reference() -> Self {
        Self {
            c0: vec![0.0],
            c1: vec![vec![0.25]],
            sigma: vec![vec![0.3]],
            kappa: 1.0,
            w0: 0.6,
            f0: BaseValue::Linear { lambda0: 0.5 },
            ambiguity: AmbiguityMap::fixed(IntervalUnion::new(vec![(-2.0, -1.0), (1.0, 2.0)]).expect("valid set")),
            x0: vec![1.0],
            horizon: 1.0,
            terminal: None,
        }
    }

    pub fn spec(&self) -> Result<ProblemSpec> {
        let k = self.x0.len();
        let sigma = to_matrix(&self.sigma, "sigma")?;
        let spec = ProblemSpec {
            state_dim: k,
            noise_dim: sigma.ncols(),
            horizon: self.horizon,
            x0: self.x0.clone(),
            drift: Drift::Application { c0: self.c0.clone(), c1: to_matrix(&self.c1, "c1")? },
            diffusion: Diffusion::Constant(sigma),
            driver: DriverFunction::quadratic_penalty(self.kappa, self.w0, self.f0.clone())?,
            terminal: self
                .terminal
                .clone()
                .unwrap_or(TerminalConfig::Linear { coeffs: vec![1.0; k], offset: 0.0 })
                .build(k),
            ambiguity: self.ambiguity.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Controls and drift multipliers of the static regimes, in exact arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeControls {
    pub theta_control: f64,
    pub convexified_control: f64,
    pub theta_multiplier: f64,
    pub convexified_multiplier: f64,
}

/// With a static set the optimal control of the quadratic penalty is the
/// projection of `w0`, on `U` and on its convex hull respectively.
pub fn regime_controls(set: &IntervalUnion, w0: f64) -> RegimeControls {
    let theta_control = set.project(w0).point;
    let convexified_control = set.convex_hull().project(w0).point;
    RegimeControls {
        theta_control,
        convexified_control,
        theta_multiplier: 1.0 + 3.0 * theta_control,
        convexified_multiplier: 1.0 + 3.0 * convexified_control,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeReport {
    /// Set realized from the law of `Y_0`.
    pub initial_set: IntervalUnion,
    /// Projection of `w0` when the ambiguity is static.
    pub static_control: Option<f64>,
    pub drift_multiplier: Option<f64>,
    pub y0: f64,
    pub y0_std_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub control_mean: f64,
    pub control_min: f64,
    pub control_max: f64,
    /// Mean and standard deviation of the first state component at `T`.
    pub terminal_mean: f64,
    pub terminal_std: f64,
}

fn regime_report(spec: &ProblemSpec, w0: f64, sol: &PicardSolution) -> Result<RegimeReport> {
    let paths = &sol.paths;
    let a = paths.a.as_slice();
    let n = paths.n_particles();
    let last = paths.grid.n_steps;
    let xt: Vec<f64> = (0..n).map(|p| paths.x.get(last, p)[0]).collect();
    let mean = xt.iter().sum::<f64>() / n as f64;
    let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let static_control = spec.ambiguity.is_static().then(|| spec.ambiguity.base().project(w0).point);
    Ok(RegimeReport {
        initial_set: spec.ambiguity.realize_set(&paths.laws[0])?,
        static_control,
        drift_multiplier: static_control.and_then(|w| spec.drift.application_multiplier(w)),
        y0: sol.y0(),
        y0_std_error: sol.y0_std_error,
        iterations: sol.report.iterations,
        converged: sol.report.converged,
        control_mean: a.iter().sum::<f64>() / a.len() as f64,
        control_min: a.iter().copied().fold(f64::INFINITY, f64::min),
        control_max: a.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        terminal_mean: mean,
        terminal_std: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApplicationReport {
    pub theta: RegimeReport,
    pub convexified: RegimeReport,
    pub assumptions: AssumptionLedger,
}

#[derive(Debug, Clone)]
pub struct ApplicationRun {
    pub report: ApplicationReport,
    pub theta_paths: SolutionPaths,
    pub convexified_paths: SolutionPaths,
}

/// Solves the system on `U` and on the convexified map with the same noise.
pub fn run_application(config: &ApplicationConfig, opts: &EvalOptions) -> Result<ApplicationRun> {
    let spec = config.spec()?;
    let convex = ProblemSpec { ambiguity: spec.ambiguity.convexified(), ..spec.clone() };
    let grid = TimeGrid::new(spec.horizon, opts.n_steps)?;
    let theta = picard_solve(&spec, &grid, &opts.picard)?;
    let hull = picard_solve(&convex, &grid, &opts.picard)?;
    let assumptions =
        verify_global_assumptions(&to_matrix(&config.c1, "c1")?, &spec.ambiguity, config.kappa, config.f0.lipschitz());
    Ok(ApplicationRun {
        report: ApplicationReport {
            theta: regime_report(&spec, config.w0, &theta)?,
            convexified: regime_report(&convex, config.w0, &hull)?,
            assumptions,
        },
        theta_paths: theta.paths,
        convexified_paths: hull.paths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionLedger {
    pub checks: Vec<AssumptionCheck>,
    /// `1 + 3 min w` over every realizable set.
    pub delta: f64,
    pub pass: bool,
}

/// Verifiable hypotheses of global well-posedness for the application family.
pub fn verify_global_assumptions(
    c1: &DMatrix<f64>,
    map: &AmbiguityMap,
    kappa: f64,
    f0_lipschitz: f64,
) -> AssumptionLedger {
    let mut checks = Vec::new();
    let mut push =
        |name: &str, pass: bool, detail: String| checks.push(AssumptionCheck { name: name.into(), pass, detail });

    let square = c1.is_square();
    let asym = if square { (c1 - c1.transpose()).amax() } else { f64::INFINITY };
    let symmetric = square && asym <= 1e-12 * c1.amax().max(1.0);
    push("c1_symmetric", symmetric, format!("max |C1 - C1^T| = {asym:e}"));
    if symmetric {
        let min_eig = SymmetricEigen::new(c1.clone()).eigenvalues.min();
        push("c1_positive_definite", min_eig > 0.0, format!("smallest eigenvalue {min_eig}"));
    } else {
        push("c1_positive_definite", false, "not checked: C1 is not symmetric".into());
    }

    let w_min = match map.extreme_sets() {
        Ok([lo, hi]) => lo.min().min(hi.min()),
        Err(_) => f64::NEG_INFINITY,
    };
    let delta = 1.0 + 3.0 * w_min;
    push("drift_multiplier_positive", delta > 0.0, format!("min over realized sets of 1 + 3w = {delta}"));
    push("kappa_positive", kappa > 0.0, format!("kappa = {kappa}"));
    push("f0_lipschitz_finite", f0_lipschitz.is_finite(), format!("Lipschitz bound {f0_lipschitz}"));
    let pass = checks.iter().all(|c| c.pass);
    AssumptionLedger { checks, delta, pass }
}
