//! Backward solve for `(Y, Z)`.
//!
//! Stochastic case: least-squares Monte Carlo. Stepping from node `i+1` to
//! `i`, the continuation `E[Y_{i+1} | X_i]` and `E[Y_{i+1} dB_i | X_i] / dt`
//! are regressed on polynomials in the standardized state, and
//! `Y_i = C_i + F(t_i, X_i, C_i, Z_i, A_i, mu_i) dt`.
//!
//! Deterministic case: `y' = -G(y)` integrated backward from `y(T)` with
//! classical RK4.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::optimizer::StatePoint;
use crate::sde::{BrownianIncrements, NodeArray, ProblemSpec, TimeGrid};

/// Largest admissible condition number of the standardized design matrix.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackwardOptions {
    /// Total degree of the polynomial regression basis, 1 to 5.
    pub degree: usize,
    /// Re-evaluate the driver once at the updated `Y_i`.
    pub fixed_point_correction: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { degree: 3, fixed_point_correction: false }
    }
}

/// Least-squares fit of several targets on a polynomial basis of the state.
///
/// State components are centred and scaled by their sample standard
/// deviation; components that are constant across particles are dropped,
/// since they are collinear with the intercept.
#[derive(Debug, Clone)]
pub struct PolynomialRegression {
    mean: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<usize>,
    exponents: Vec<Vec<u32>>,
    /// One coefficient vector per target.
    coefficients: Vec<Vec<f64>>,
}

fn monomial_exponents(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    for total in 1..=degree {
        let mut current = vec![0u32; vars];
        push_compositions(total as u32, 0, &mut current, &mut out);
    }
    out
}

fn push_compositions(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_compositions(remaining - e, pos + 1, current, out);
    }
    current[pos] = 0;
}

impl PolynomialRegression {
    /// Fits `targets[j]` (one value per particle) on the states `xs`
    /// (particle-major, `dim` values each).
    pub fn fit(node: usize, xs: &[f64], dim: usize, targets: &[&[f64]], degree: usize) -> Result<Self> {
        if !(1..=5).contains(&degree) {
            return Err(Error::Usage(format!("regression degree must be in 1..=5, got {degree}")));
        }
        let n = xs.len() / dim;
        let mut mean = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        let mut active = Vec::new();
        for c in 0..dim {
            let m = (0..n).map(|p| xs[p * dim + c]).sum::<f64>() / n as f64;
            let var = (0..n).map(|p| (xs[p * dim + c] - m).powi(2)).sum::<f64>() / n as f64;
            mean[c] = m;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                scale[c] = sd;
                active.push(c);
            }
        }
        let exponents = if active.is_empty() { vec![vec![]] } else { monomial_exponents(active.len(), degree) };
        let mut reg = Self { mean, scale, active, exponents, coefficients: Vec::new() };
        let p = reg.exponents.len();

        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = vec![DVector::<f64>::zeros(p); targets.len()];
        let mut phi = vec![0.0; p];
        for i in 0..n {
            reg.features(&xs[i * dim..(i + 1) * dim], &mut phi);
            for r in 0..p {
                for c in r..p {
                    gram[(r, c)] += phi[r] * phi[c];
                }
                for (b, target) in rhs.iter_mut().zip(targets) {
                    b[r] += phi[r] * target[i];
                }
            }
        }
        for r in 0..p {
            for c in 0..r {
                gram[(r, c)] = gram[(c, r)];
            }
        }
        let eig = SymmetricEigen::new(gram);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let condition = if min > 0.0 { (max / min).sqrt() } else { f64::INFINITY };
        if condition > MAX_CONDITION || !condition.is_finite() {
            return Err(Error::Basis { node, condition });
        }
        let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
        let pinv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
        reg.coefficients = rhs.iter().map(|b| (&pinv * b).iter().copied().collect()).collect();
        Ok(reg)
    }

    fn features(&self, x: &[f64], out: &mut [f64]) {
        let std: Vec<f64> = self.active.iter().map(|&c| (x[c] - self.mean[c]) / self.scale[c]).collect();
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(&std).map(|(&k, v)| v.powi(k as i32)).product();
        }
    }

    pub fn n_basis(&self) -> usize {
        self.exponents.len()
    }

    pub fn n_targets(&self) -> usize {
        self.coefficients.len()
    }

    /// Fitted value of target `j` at state `x`.
    pub fn predict(&self, x: &[f64], j: usize) -> f64 {
        let mut phi = vec![0.0; self.n_basis()];
        self.features(x, &mut phi);
        phi.iter().zip(&self.coefficients[j]).map(|(a, b)| a * b).sum()
    }

    /// Fitted values of every target at state `x`.
    pub fn predict_all(&self, x: &[f64], out: &mut [f64]) {
        let mut phi = vec![0.0; self.n_basis()];
        self.features(x, &mut phi);
        for (o, coef) in out.iter_mut().zip(&self.coefficients) {
            *o = phi.iter().zip(coef).map(|(a, b)| a * b).sum();
        }
    }
}

/// Output of [`solve_backward`].
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub y: NodeArray,
    pub z: NodeArray,
    /// `F` evaluated at each `(node, particle)` in the sweep.
    pub driver: NodeArray,
    /// Standard error of the pathwise estimator `Phi(X_T) + sum_i F_i dt` of `Y_0`.
    pub y0_std_error: f64,
}

/// Least-squares Monte Carlo sweep for `(Y, Z)` along fixed forward paths.
#[allow(clippy::too_many_arguments)]
pub fn solve_backward(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x: &NodeArray,
    controls: &NodeArray,
    laws: &[EmpiricalMeasure],
    noise: &BrownianIncrements,
    opts: &BackwardOptions,
) -> Result<BackwardSolution> {
    let (k, d) = (spec.state_dim, spec.noise_dim);
    let n = x.n_particles();
    let last = grid.n_steps;
    if x.n_nodes() != grid.n_nodes() || controls.n_particles() != n || noise.n_particles() != n {
        return Err(Error::Usage("forward paths, controls and noise must share the grid and particle count".into()));
    }
    let dt = grid.dt();
    let mut y = NodeArray::zeros(grid.n_nodes(), n, 1);
    let mut z = NodeArray::zeros(grid.n_nodes(), n, d);
    let mut driver = NodeArray::zeros(grid.n_nodes(), n, 1);

    for p in 0..n {
        y.get_mut(last, p)[0] = spec.terminal.eval(x.get(last, p));
    }

    let mut targets: Vec<Vec<f64>> = vec![vec![0.0; n]; d];
    for i in (0..last).rev() {
        let t = grid.time(i);
        let next_y = y.node(i + 1);
        let xs = x.node(i);
        let cont = PolynomialRegression::fit(i, xs, k, &[next_y], opts.degree)?;
        // centering by the continuation value keeps the estimator unbiased
        // and removes most of its variance
        for p in 0..n {
            let resid = next_y[p] - cont.predict(&xs[p * k..(p + 1) * k], 0);
            for j in 0..d {
                targets[j][p] = resid * noise.get(i, p)[j] / dt;
            }
        }
        let refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
        let zreg = PolynomialRegression::fit(i, xs, k, &refs, opts.degree)?;
        let law = &laws[i];

        let rows: Vec<(f64, Vec<f64>, f64)> = (0..n)
            .into_par_iter()
            .map(|p| {
                let xp = &xs[p * k..(p + 1) * k];
                let continuation = cont.predict(xp, 0);
                let mut zp = vec![0.0; d];
                zreg.predict_all(xp, &mut zp);
                let a = controls.scalar(i, p);
                let at = |yv| StatePoint { t, x: xp, y: yv, z: &zp, law };
                let mut f = spec.driver.value(&at(continuation), a);
                let mut yp = continuation + f * dt;
                if opts.fixed_point_correction {
                    f = spec.driver.value(&at(yp), a);
                    yp = continuation + f * dt;
                }
                (yp, zp, f)
            })
            .collect();
        for (p, (yp, zp, f)) in rows.into_iter().enumerate() {
            if !yp.is_finite() {
                return Err(Error::Divergence { node: i });
            }
            y.get_mut(i, p)[0] = yp;
            z.get_mut(i, p).copy_from_slice(&zp);
            driver.get_mut(i, p)[0] = f;
        }
    }

    // no fresh information at T
    for p in 0..n {
        let zp = z.get(last - 1, p).to_vec();
        z.get_mut(last, p).copy_from_slice(&zp);
        let point = StatePoint { t: grid.horizon, x: x.get(last, p), y: y.scalar(last, p), z: &zp, law: &laws[last] };
        driver.get_mut(last, p)[0] = spec.driver.value(&point, controls.scalar(last, p));
    }

    let pathwise: Vec<f64> =
        (0..n).map(|p| y.scalar(last, p) + (0..last).map(|i| driver.scalar(i, p)).sum::<f64>() * dt).collect();
    Ok(BackwardSolution { y, z, driver, y0_std_error: standard_error(&pathwise) })
}

/// Sample standard deviation over `sqrt(n)`; zero for a single sample.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Backward ODE solution on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdePath {
    pub times: Vec<f64>,
    /// `values[i] = y(times[i])`.
    pub values: Vec<f64>,
}

impl OdePath {
    pub fn initial(&self) -> f64 {
        self.values[0]
    }
}

/// RK4 for `y' = -G(y)`, `y(T) = terminal`, stepping from `T` down to `0`.
pub fn solve_deterministic_ode<G>(g: G, terminal: f64, horizon: f64, n_steps: usize) -> Result<OdePath>
where
    G: Fn(f64) -> Result<f64>,
{
    let grid = TimeGrid::new(horizon, n_steps)?;
    let h = grid.dt();
    let mut values = vec![0.0; n_steps + 1];
    values[n_steps] = terminal;
    // in reversed time s = T - t the equation reads dy/ds = G(y)
    for i in (0..n_steps).rev() {
        let y = values[i + 1];
        let k1 = g(y)?;
        let k2 = g(y + 0.5 * h * k1)?;
        let k3 = g(y + 0.5 * h * k2)?;
        let k4 = g(y + h * k3)?;
        let next = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !next.is_finite() {
            return Err(Error::Divergence { node: i });
        }
        values[i] = next;
    }
    Ok(OdePath { times: (0..=n_steps).map(|i| grid.time(i)).collect(), values })
}
