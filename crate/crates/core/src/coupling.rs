//! Picard fixed-point engine for the fully coupled system.
//!
//! One application of the solution map takes the current triple `(X, Y, Z)`
//! and, in order:
//!
//! 1. forms the empirical law of `Y` at each node, realizes the uncertainty
//!    set and computes the pointwise-optimal controls `A`;
//! 2. solves the backward equation along the *previous* `X` with the fresh
//!    controls and laws;
//! 3. re-simulates `X` with the fresh controls and laws on the same noise.
//!
//! Successive iterates are compared in the discrete weighted norm
//! `sup_i E|dX_i|^2 + beta (sup_i E|dY_i|^2 + sum_i E|dZ_i|^2 dt)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_backward, BackwardOptions};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::optimizer::{maximize_over, StatePoint};
use crate::sde::{simulate_forward, BrownianIncrements, NodeArray, ProblemSpec, SolutionPaths, TimeGrid};

/// Consecutive non-contracting iterations tolerated before giving up.
const NON_CONTRACTION_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PicardOptions {
    pub n_particles: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub beta: f64,
    pub damping: f64,
    pub backward: BackwardOptions,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            seed: 0,
            tol: 1e-6,
            max_iter: 50,
            beta: 1.0,
            damping: 1.0,
            backward: BackwardOptions::default(),
        }
    }
}

impl PicardOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Usage(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Usage("max_iter must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Usage(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Usage(format!("beta must be positive, got {}", self.beta)));
        }
        if self.n_particles == 0 {
            return Err(Error::Usage("need at least one particle".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardReport {
    pub iterations: usize,
    /// Weighted-norm distance between successive iterates.
    pub deltas: Vec<f64>,
    /// `deltas[j] / deltas[j - 1]`, from the second iteration on.
    pub ratios: Vec<f64>,
    pub beta: f64,
    pub converged: bool,
    /// Optimizer tie flags raised over all iterations.
    pub tie_events: usize,
}

/// The triple the solution map acts on.
#[derive(Debug, Clone)]
pub struct PicardState {
    pub x: NodeArray,
    pub y: NodeArray,
    pub z: NodeArray,
}

/// Controls and laws derived from a state in stage one of the map.
#[derive(Debug, Clone)]
pub struct ControlStage {
    pub a: NodeArray,
    pub laws: Vec<EmpiricalMeasure>,
    pub ties: usize,
}

/// Laws of `Y`, realized sets and optimal controls at every `(node, particle)`.
pub fn optimal_controls(spec: &ProblemSpec, grid: &TimeGrid, state: &PicardState) -> Result<ControlStage> {
    let n = state.y.n_particles();
    let (k, d) = (spec.state_dim, spec.noise_dim);
    let mut a = NodeArray::zeros(grid.n_nodes(), n, 1);
    let mut laws = Vec::with_capacity(grid.n_nodes());
    let mut ties = 0;
    for i in 0..grid.n_nodes() {
        let law = EmpiricalMeasure::new(state.y.node(i).to_vec()).map_err(|_| Error::Divergence { node: i })?;
        let set = spec.ambiguity.realize_set(&law)?;
        let t = grid.time(i);
        let (xs, ys, zs) = (state.x.node(i), state.y.node(i), state.z.node(i));
        let results: Vec<_> = (0..n)
            .into_par_iter()
            .map(|p| {
                let point =
                    StatePoint { t, x: &xs[p * k..(p + 1) * k], y: ys[p], z: &zs[p * d..(p + 1) * d], law: &law };
                maximize_over(&set, &spec.driver, &point)
            })
            .collect();
        for (slot, r) in a.node_mut(i).iter_mut().zip(results) {
            let r = r?;
            *slot = r.a_star;
            ties += r.tie as usize;
        }
        laws.push(law);
    }
    Ok(ControlStage { a, laws, ties })
}

/// One application of the solution map. Returns the image and the control
/// stage it was built from.
pub fn apply_map(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    state: &PicardState,
    noise: &BrownianIncrements,
    backward: &BackwardOptions,
) -> Result<(PicardState, ControlStage, f64)> {
    let stage = optimal_controls(spec, grid, state)?;
    let back = solve_backward(spec, grid, &state.x, &stage.a, &stage.laws, noise, backward)?;
    let x = simulate_forward(spec, grid, &stage.a, &stage.laws, noise)?;
    Ok((PicardState { x, y: back.y, z: back.z }, stage, back.y0_std_error))
}

/// Discrete weighted norm of `a - b`.
pub fn weighted_distance(grid: &TimeGrid, a: &PicardState, b: &PicardState, beta: f64) -> f64 {
    let mean_sq = |u: &NodeArray, v: &NodeArray, i: usize| {
        let n = u.n_particles() as f64;
        u.node(i).iter().zip(v.node(i)).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n
    };
    let nodes = grid.n_nodes();
    let sup_x = (0..nodes).map(|i| mean_sq(&a.x, &b.x, i)).fold(0.0, f64::max);
    let sup_y = (0..nodes).map(|i| mean_sq(&a.y, &b.y, i)).fold(0.0, f64::max);
    let int_z: f64 = (0..grid.n_steps).map(|i| mean_sq(&a.z, &b.z, i)).sum::<f64>() * grid.dt();
    (sup_x + beta * (sup_y + int_z)).sqrt()
}

fn relax(old: &NodeArray, new: NodeArray, damping: f64) -> NodeArray {
    if damping == 1.0 {
        return new;
    }
    let mut out = new;
    for (o, &prev) in out.as_mut_slice().iter_mut().zip(old.as_slice()) {
        *o = (1.0 - damping) * prev + damping * *o;
    }
    out
}

/// Initial iterate: controls optimal against the Dirac law at `Phi(x0)`,
/// forward paths under those controls, `Y = Phi(X)` node by node, `Z = 0`.
pub fn initial_state(spec: &ProblemSpec, grid: &TimeGrid, noise: &BrownianIncrements) -> Result<PicardState> {
    let n = noise.n_particles();
    let y_start = spec.terminal.eval(&spec.x0);
    let law = EmpiricalMeasure::new(vec![y_start]).map_err(|_| Error::Divergence { node: 0 })?;
    let set = spec.ambiguity.realize_set(&law)?;
    let zero_z = vec![0.0; spec.noise_dim];
    let mut a = NodeArray::zeros(grid.n_nodes(), n, 1);
    for i in 0..grid.n_nodes() {
        let point = StatePoint { t: grid.time(i), x: &spec.x0, y: y_start, z: &zero_z, law: &law };
        let a_ref = maximize_over(&set, &spec.driver, &point)?.a_star;
        a.node_mut(i).fill(a_ref);
    }
    let laws = vec![law; grid.n_nodes()];
    let x = simulate_forward(spec, grid, &a, &laws, noise)?;
    let mut y = NodeArray::zeros(grid.n_nodes(), n, 1);
    for i in 0..grid.n_nodes() {
        for p in 0..n {
            y.get_mut(i, p)[0] = spec.terminal.eval(x.get(i, p));
        }
    }
    Ok(PicardState { x, y, z: NodeArray::zeros(grid.n_nodes(), n, spec.noise_dim) })
}

/// Converged solve together with what produced it.
#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub paths: SolutionPaths,
    pub report: PicardReport,
    pub state: PicardState,
    pub noise: BrownianIncrements,
    /// Standard error of the `Y_0` estimate from the last backward sweep.
    pub y0_std_error: f64,
}

impl PicardSolution {
    pub fn y0(&self) -> f64 {
        self.paths.y0()
    }
}

/// Iterates the solution map to a fixed point.
pub fn picard_solve(spec: &ProblemSpec, grid: &TimeGrid, opts: &PicardOptions) -> Result<PicardSolution> {
    opts.validate()?;
    spec.validate()?;
    let noise = BrownianIncrements::generate(opts.seed, grid, opts.n_particles, spec.noise_dim);
    let mut state = initial_state(spec, grid, &noise)?;
    let mut report = PicardReport {
        iterations: 0,
        deltas: Vec::new(),
        ratios: Vec::new(),
        beta: opts.beta,
        converged: false,
        tie_events: 0,
    };
    let mut streak = 0;
    let mut y0_std_error = 0.0;
    let mut last_driver = None;

    while report.iterations < opts.max_iter {
        let stage = optimal_controls(spec, grid, &state)?;
        let back = solve_backward(spec, grid, &state.x, &stage.a, &stage.laws, &noise, &opts.backward)?;
        let x_new = simulate_forward(spec, grid, &stage.a, &stage.laws, &noise)?;
        report.tie_events += stage.ties;
        y0_std_error = back.y0_std_error;

        let next = PicardState {
            x: relax(&state.x, x_new, opts.damping),
            y: relax(&state.y, back.y, opts.damping),
            z: relax(&state.z, back.z, opts.damping),
        };
        last_driver = Some(back.driver);
        let delta = weighted_distance(grid, &next, &state, opts.beta);
        state = next;
        report.iterations += 1;
        if let Some(&prev) = report.deltas.last() {
            let ratio = if prev > 0.0 { delta / prev } else { 0.0 };
            report.ratios.push(ratio);
            streak = if ratio >= 1.0 { streak + 1 } else { 0 };
        }
        report.deltas.push(delta);
        if !delta.is_finite() {
            return Err(Error::NonContraction { report: Box::new(report) });
        }
        if delta < opts.tol {
            report.converged = true;
            break;
        }
        if streak >= NON_CONTRACTION_WINDOW {
            return Err(Error::NonContraction { report: Box::new(report) });
        }
    }
    if !report.converged {
        return Err(Error::NoConvergence { report: Box::new(report) });
    }

    // controls and laws consistent with the converged triple
    let stage = optimal_controls(spec, grid, &state)?;
    let paths = SolutionPaths {
        grid: *grid,
        x: state.x.clone(),
        y: state.y.clone(),
        z: state.z.clone(),
        a: stage.a,
        driver: last_driver.expect("at least one iteration"),
        laws: stage.laws,
    };
    Ok(PicardSolution { paths, report, state, noise, y0_std_error })
}
