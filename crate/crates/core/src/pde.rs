//! Explicit upwind finite differences for the one-dimensional HJB equation
//!
//! `-v_t = sup_a { b(a) v_x + 1/2 sigma^2 v_xx + F(t, x, v, sigma v_x, a, mu_t) }`
//!
//! with a frozen measure flow `mu_t`, used to cross-check the particle solver.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::optimizer::{
    maximize_objective, maximize_over, ControlObjective, DriverFunction, OptimizerResult, StatePoint,
};
use crate::sde::{Diffusion, ProblemSpec, SolutionPaths};
use crate::uncertainty::IntervalUnion;

/// Largest admissible `sigma^2 dt / dx^2`.
pub const CFL_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid1D {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub nt: usize,
    pub horizon: f64,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, nx: usize, nt: usize, horizon: f64) -> Result<Self> {
        if !(x_min < x_max) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::Grid(format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if nx < 3 || nt == 0 {
            return Err(Error::Grid(format!("need nx >= 3 and nt >= 1, got nx = {nx}, nt = {nt}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Grid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { x_min, x_max, nx, nt, horizon })
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn cfl(&self, sigma: f64) -> f64 {
        sigma * sigma * self.dt() / (self.dx() * self.dx())
    }

    /// Grid covering `x0 +- 6 sigma sqrt(T)` and the zeros of the drift at the
    /// extreme controls, with `nt` large enough for the diffusive CFL bound
    /// and the upwind drift bound `dt (|b| / dx + sigma^2 / dx^2) <= 1`.
    pub fn covering(spec: &ProblemSpec, nx: usize) -> Result<Self> {
        let (sigma, set) = scalar_parts(spec)?;
        let x0 = spec.x0[0];
        let half = 6.0 * sigma * spec.horizon.sqrt();
        let (mut lo, mut hi) = (x0 - half.max(1e-3), x0 + half.max(1e-3));
        let controls = [set.min(), set.max()];
        for a in controls {
            if let Some(root) = drift_zero(spec, a) {
                lo = lo.min(root - 0.1 * half);
                hi = hi.max(root + 0.1 * half);
            }
        }
        let dx = (hi - lo) / (nx.max(3) - 1) as f64;
        let b_max = [lo, hi]
            .iter()
            .flat_map(|&x| controls.map(|a| drift_parts(spec, x).map_or(0.0, |(b0, b1)| (b0 + b1 * a).abs())))
            .fold(0.0_f64, f64::max);
        let diffusive = sigma * sigma / (dx * dx);
        let dt_max = (CFL_LIMIT / diffusive.max(1e-300)).min(1.0 / (b_max / dx + diffusive));
        let nt = (spec.horizon / dt_max).ceil().max(1.0) as usize;
        Self::new(lo, hi, nx, nt, spec.horizon)
    }
}

fn scalar_parts(spec: &ProblemSpec) -> Result<(f64, IntervalUnion)> {
    if spec.state_dim != 1 || spec.noise_dim != 1 {
        return Err(Error::Unsupported("the finite-difference solver handles k = d = 1 only".into()));
    }
    let Diffusion::Constant(s) = &spec.diffusion else {
        return Err(Error::Unsupported("the finite-difference solver needs a constant diffusion".into()));
    };
    if drift_parts(spec, spec.x0[0]).is_none() {
        return Err(Error::Unsupported("the finite-difference solver needs a drift affine in the control".into()));
    }
    let [lo, hi] = spec.ambiguity.extreme_sets()?;
    let hull = IntervalUnion::single(lo.min().min(hi.min()), lo.max().max(hi.max()))?;
    Ok((s[(0, 0)].abs(), hull))
}

fn drift_parts(spec: &ProblemSpec, x: f64) -> Option<(f64, f64)> {
    spec.drift.affine_in_control(&[x]).map(|(b0, b1)| (b0[0], b1[0]))
}

/// Zero of the (affine in `x`) drift at fixed control `a`.
fn drift_zero(spec: &ProblemSpec, a: f64) -> Option<f64> {
    let b = |x| drift_parts(spec, x).map(|(b0, b1)| b0 + b1 * a);
    let (f0, f1) = (b(0.0)?, b(1.0)?);
    let slope = f1 - f0;
    (slope != 0.0).then(|| -f0 / slope).filter(|r| r.is_finite())
}

/// The law fed to the driver and the ambiguity map at each time.
#[derive(Debug, Clone)]
pub enum MeasureFlow {
    Constant(EmpiricalMeasure),
    /// Laws on a uniform time grid, looked up at the nearest node.
    Nodes {
        horizon: f64,
        laws: Vec<EmpiricalMeasure>,
    },
}

impl MeasureFlow {
    pub fn from_paths(paths: &SolutionPaths) -> Self {
        MeasureFlow::Nodes { horizon: paths.grid.horizon, laws: paths.laws.clone() }
    }

    pub fn at(&self, t: f64) -> &EmpiricalMeasure {
        match self {
            MeasureFlow::Constant(m) => m,
            MeasureFlow::Nodes { horizon, laws } => {
                let steps = (laws.len() - 1) as f64;
                let i = (t / horizon * steps).round().clamp(0.0, steps) as usize;
                &laws[i]
            }
        }
    }
}

/// Value surface `v(t_n, x_j)`, layer `n` at time `n dt`.
#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub grid: Grid1D,
    pub values: Vec<Vec<f64>>,
}

impl HjbSolution {
    /// Linear interpolation of layer `n` at `x`, clamped to the domain.
    pub fn value_at(&self, n: usize, x: f64) -> f64 {
        let g = &self.grid;
        let s = ((x - g.x_min) / g.dx()).clamp(0.0, (g.nx - 1) as f64);
        let j = (s.floor() as usize).min(g.nx - 2);
        let w = s - j as f64;
        let layer = &self.values[n];
        (1.0 - w) * layer[j] + w * layer[j + 1]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,x,v")?;
        for (n, layer) in self.values.iter().enumerate() {
            let t = self.grid.t(n);
            for (j, v) in layer.iter().enumerate() {
                writeln!(w, "{t},{},{v}", self.grid.x(j))?;
            }
        }
        Ok(())
    }
}

/// `F + (b0 + b1 a) p` restricted to controls where the drift has one sign.
struct Hamiltonian<'a, 'p> {
    driver: &'a DriverFunction,
    point: &'a StatePoint<'p>,
    b0: f64,
    b1: f64,
    p: f64,
}

impl ControlObjective for Hamiltonian<'_, '_> {
    fn value(&self, a: f64) -> f64 {
        self.driver.value(self.point, a) + (self.b0 + self.b1 * a) * self.p
    }

    fn da(&self, a: f64) -> f64 {
        self.driver.da(self.point, a) + self.b1 * self.p
    }

    fn daa(&self, a: f64) -> f64 {
        self.driver.daa(self.point, a)
    }
}

impl Hamiltonian<'_, '_> {
    fn evaluated(&self, r: OptimizerResult) -> OptimizerResult {
        OptimizerResult { value: self.value(r.a_star), ..r }
    }
}

fn better(a: Option<OptimizerResult>, b: Option<OptimizerResult>) -> Option<OptimizerResult> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.value > x.value { y } else { x }),
        (x, y) => x.or(y),
    }
}

/// How the control entering the generator is chosen at each node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSelection {
    /// `a* = argmax_a F` by [`maximize_over`], the pointwise optimality
    /// condition of the particle system; the generator is evaluated at `a*`.
    #[default]
    Driver,
    /// `sup_a { b(a) v_x + F(a) }` over the whole set.
    Hamiltonian,
}

/// Backward explicit time stepping from `v(T, x) = Phi(x)`.
///
/// The scheme is monotone under the CFL bound as long as the drift points
/// into the domain at both ends; at an outflow boundary the one-sided
/// difference is downwind.
pub fn solve_hjb(
    spec: &ProblemSpec,
    grid: &Grid1D,
    flow: &MeasureFlow,
    selection: ControlSelection,
) -> Result<HjbSolution> {
    let (sigma, _) = scalar_parts(spec)?;
    let cfl = grid.cfl(sigma);
    if cfl > CFL_LIMIT {
        return Err(Error::Grid(format!(
            "CFL number sigma^2 dt / dx^2 = {cfl:.4} exceeds {CFL_LIMIT}; refine nt or coarsen nx"
        )));
    }
    let (nx, dx, dt) = (grid.nx, grid.dx(), grid.dt());
    let mut values = vec![vec![0.0; nx]; grid.nt + 1];
    for (j, v) in values[grid.nt].iter_mut().enumerate() {
        *v = spec.terminal.eval(&[grid.x(j)]);
    }
    for n in (0..grid.nt).rev() {
        let t = grid.t(n);
        let law = flow.at(t);
        let set = spec.ambiguity.realize_set(law)?;
        let next = &values[n + 1];
        let layer: Vec<Result<f64>> = (0..nx)
            .into_par_iter()
            .map(|j| {
                let x = [grid.x(j)];
                let v = next[j];
                let (fwd, bwd, d2) = match j {
                    0 => {
                        let d = (next[1] - v) / dx;
                        (d, d, 0.0)
                    }
                    j if j == nx - 1 => {
                        let d = (v - next[j - 1]) / dx;
                        (d, d, 0.0)
                    }
                    _ => (
                        (next[j + 1] - v) / dx,
                        (v - next[j - 1]) / dx,
                        (next[j + 1] - 2.0 * v + next[j - 1]) / (dx * dx),
                    ),
                };
                let z = [0.5 * (fwd + bwd) * sigma];
                let point = StatePoint { t, x: &x, y: v, z: &z, law };
                let (b0, b1) = drift_parts(spec, x[0]).expect("checked affine drift");
                let h = |p| Hamiltonian { driver: &spec.driver, point: &point, b0, b1, p };
                let best = match selection {
                    ControlSelection::Driver => {
                        let r = maximize_over(&set, &spec.driver, &point)?;
                        let b = b0 + b1 * r.a_star;
                        Some(h(if b >= 0.0 { fwd } else { bwd }).evaluated(r))
                    }
                    ControlSelection::Hamiltonian if b1 == 0.0 => {
                        Some(maximize_objective(&set, &h(if b0 >= 0.0 { fwd } else { bwd }))?)
                    }
                    ControlSelection::Hamiltonian => {
                        // b >= 0 on one side of the root a0, b <= 0 on the other
                        let (left, right) = set.split_at(-b0 / b1);
                        let (up, down) = if b1 > 0.0 { (right, left) } else { (left, right) };
                        let up = up.map(|s| maximize_objective(&s, &h(fwd))).transpose()?;
                        let down = down.map(|s| maximize_objective(&s, &h(bwd))).transpose()?;
                        better(up, down)
                    }
                };
                let ham = best.expect("non-empty set").value + 0.5 * sigma * sigma * d2;
                let out = v + dt * ham;
                if out.is_finite() {
                    Ok(out)
                } else {
                    Err(Error::Divergence { node: n })
                }
            })
            .collect();
        for (slot, r) in values[n].iter_mut().zip(layer) {
            *slot = r?;
        }
    }
    Ok(HjbSolution { grid: *grid, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeynmanKacReport {
    pub pde_value: f64,
    pub fbsde_value: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
}

/// Solves the HJB equation with the measure flow of a converged particle run
/// and compares `v(0, x0)` with `Y_0`.
pub fn feynman_kac_check(
    spec: &ProblemSpec,
    grid: &Grid1D,
    paths: &SolutionPaths,
    selection: ControlSelection,
) -> Result<(FeynmanKacReport, HjbSolution)> {
    let sol = solve_hjb(spec, grid, &MeasureFlow::from_paths(paths), selection)?;
    let pde_value = sol.value_at(0, spec.x0[0]);
    let fbsde_value = paths.y0();
    let abs_gap = (pde_value - fbsde_value).abs();
    let rel_gap = abs_gap / fbsde_value.abs().max(f64::MIN_POSITIVE);
    Ok((FeynmanKacReport { pde_value, fbsde_value, abs_gap, rel_gap }, sol))
}
