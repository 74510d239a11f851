//! Problem description and forward particle simulation.
//!
//! The state equation is discretized with Euler–Maruyama on a uniform grid.
//! Brownian increments come from a counter-based stream keyed by
//! `(seed, particle, step)`, so serial and parallel runs agree bit for bit
//! and the backward solve can reuse the exact increments that drove `X`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::optimizer::{DriverConfig, DriverFunction};
use crate::uncertainty::AmbiguityMap;

/// `b(t, x, a, mu)` written into `out`.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], f64, &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
/// `sigma(t, x, a, mu)` written row-major (`k x d`) into `out`.
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], f64, &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Drift {
    /// `C0 - (1 + 3a) C1 x`.
    Application {
        c0: Vec<f64>,
        c1: DMatrix<f64>,
    },
    /// `m + M x + v a`.
    Affine {
        constant: Vec<f64>,
        state: DMatrix<f64>,
        control: Vec<f64>,
    },
    Generic(DriftFn),
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Application { c0, c1 } => f.debug_struct("Application").field("c0", c0).field("c1", c1).finish(),
            Drift::Affine { constant, state, control } => f
                .debug_struct("Affine")
                .field("constant", constant)
                .field("state", state)
                .field("control", control)
                .finish(),
            Drift::Generic(_) => f.write_str("Generic(..)"),
        }
    }
}

impl Drift {
    pub fn eval(&self, t: f64, x: &[f64], a: f64, law: &EmpiricalMeasure, out: &mut [f64]) {
        match self {
            Drift::Application { c0, c1 } => {
                let m = 1.0 + 3.0 * a;
                for (i, o) in out.iter_mut().enumerate() {
                    let cx: f64 = (0..x.len()).map(|j| c1[(i, j)] * x[j]).sum();
                    *o = c0[i] - m * cx;
                }
            }
            Drift::Affine { constant, state, control } => {
                for (i, o) in out.iter_mut().enumerate() {
                    let mx: f64 = (0..x.len()).map(|j| state[(i, j)] * x[j]).sum();
                    *o = constant[i] + mx + control[i] * a;
                }
            }
            Drift::Generic(f) => f(t, x, a, law, out),
        }
    }

    /// `(b0, b1)` with `b = b0 + b1 a`, when the drift is affine in the control.
    pub fn affine_in_control(&self, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let k = x.len();
        match self {
            Drift::Application { c0, c1 } => {
                let cx: Vec<f64> = (0..k).map(|i| (0..k).map(|j| c1[(i, j)] * x[j]).sum()).collect();
                Some((c0.iter().zip(&cx).map(|(c, v)| c - v).collect(), cx.iter().map(|v| -3.0 * v).collect()))
            }
            Drift::Affine { constant, state, control } => {
                let b0 = (0..k).map(|i| constant[i] + (0..k).map(|j| state[(i, j)] * x[j]).sum::<f64>()).collect();
                Some((b0, control.clone()))
            }
            Drift::Generic(_) => None,
        }
    }

    /// Effective multiplier `1 + 3a` of `C1 x` in the application family.
    pub fn application_multiplier(&self, a: f64) -> Option<f64> {
        matches!(self, Drift::Application { .. }).then_some(1.0 + 3.0 * a)
    }
}

#[derive(Clone)]
pub enum Diffusion {
    Constant(DMatrix<f64>),
    Generic(DiffusionFn),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Diffusion::Generic(_) => f.write_str("Generic(..)"),
        }
    }
}

impl Diffusion {
    pub fn eval(&self, t: f64, x: &[f64], a: f64, law: &EmpiricalMeasure, out: &mut [f64]) {
        match self {
            Diffusion::Constant(m) => {
                let d = m.ncols();
                for i in 0..m.nrows() {
                    for j in 0..d {
                        out[i * d + j] = m[(i, j)];
                    }
                }
            }
            Diffusion::Generic(f) => f(t, x, a, law, out),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Diffusion::Constant(m) if m.iter().all(|&v| v == 0.0))
    }
}

/// Terminal condition `Phi(x)`.
#[derive(Clone)]
pub enum Terminal {
    /// `c . x + offset`.
    Linear {
        coeffs: Vec<f64>,
        offset: f64,
    },
    /// `sum_j q_j x_j^2 + c . x + offset`.
    Quadratic {
        diag: Vec<f64>,
        linear: Vec<f64>,
        offset: f64,
    },
    Constant(f64),
    Generic(TerminalFn),
}

impl fmt::Debug for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminal::Linear { coeffs, offset } => {
                f.debug_struct("Linear").field("coeffs", coeffs).field("offset", offset).finish()
            }
            Terminal::Quadratic { diag, linear, offset } => {
                f.debug_struct("Quadratic").field("diag", diag).field("linear", linear).field("offset", offset).finish()
            }
            Terminal::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Terminal::Generic(_) => f.write_str("Generic(..)"),
        }
    }
}

impl Terminal {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let dot = |c: &[f64]| c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        match self {
            Terminal::Linear { coeffs, offset } => dot(coeffs) + offset,
            Terminal::Quadratic { diag, linear, offset } => {
                diag.iter().zip(x).map(|(q, v)| q * v * v).sum::<f64>() + dot(linear) + offset
            }
            Terminal::Constant(c) => *c,
            Terminal::Generic(f) => f(x),
        }
    }

    /// `Phi + c`.
    pub fn shifted(&self, c: f64) -> Self {
        match self {
            Terminal::Linear { coeffs, offset } => Terminal::Linear { coeffs: coeffs.clone(), offset: offset + c },
            Terminal::Quadratic { diag, linear, offset } => {
                Terminal::Quadratic { diag: diag.clone(), linear: linear.clone(), offset: offset + c }
            }
            Terminal::Constant(v) => Terminal::Constant(v + c),
            Terminal::Generic(f) => {
                let f = Arc::clone(f);
                Terminal::Generic(Arc::new(move |x| f(x) + c))
            }
        }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self {
            Terminal::Constant(c) => Some(*c),
            _ => None,
        }
    }
}

/// Full coefficient bundle of the coupled system.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub driver: DriverFunction,
    pub terminal: Terminal,
    pub ambiguity: AmbiguityMap,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let (k, d) = (self.state_dim, self.noise_dim);
        if k == 0 || d == 0 {
            return Err(Error::Config("state and noise dimensions must be at least 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.x0.len() != k || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("x0 must hold {k} finite values")));
        }
        match &self.drift {
            Drift::Application { c0, c1 } => {
                if c0.len() != k || c1.shape() != (k, k) {
                    return Err(Error::Config(format!(
                        "application drift needs c0 of length {k} and c1 of shape {k}x{k}"
                    )));
                }
                if (c1 - c1.transpose()).abs().max() > 1e-12 {
                    return Err(Error::Config("application drift requires a symmetric c1".into()));
                }
            }
            Drift::Affine { constant, state, control } => {
                if constant.len() != k || control.len() != k || state.shape() != (k, k) {
                    return Err(Error::Config(format!("affine drift dimensions must match state dimension {k}")));
                }
            }
            Drift::Generic(_) => {}
        }
        if let Diffusion::Constant(m) = &self.diffusion {
            if m.shape() != (k, d) {
                return Err(Error::Config(format!("sigma must be {k}x{d}, got {}x{}", m.nrows(), m.ncols())));
            }
        }
        match &self.terminal {
            Terminal::Linear { coeffs, .. } if coeffs.len() != k => {
                Err(Error::Config(format!("linear terminal needs {k} coefficients")))
            }
            Terminal::Quadratic { diag, linear, .. } if diag.len() != k || linear.len() != k => {
                Err(Error::Config(format!("quadratic terminal needs {k} diagonal and {k} linear coefficients")))
            }
            _ => Ok(()),
        }
    }

    /// No noise, constant terminal value and a driver that only sees `y`:
    /// the backward equation is the ODE `y' = -G(y)`.
    pub fn is_deterministic(&self) -> bool {
        self.diffusion.is_zero() && self.terminal.constant_value().is_some() && self.driver.is_state_free()
    }

    pub fn with_terminal(&self, terminal: Terminal) -> Self {
        Self { terminal, ..self.clone() }
    }

    pub fn with_horizon(&self, horizon: f64) -> Self {
        Self { horizon, ..self.clone() }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftConfig {
    Application { c0: Vec<f64>, c1: Vec<Vec<f64>> },
    Affine { constant: Vec<f64>, state: Vec<Vec<f64>>, control: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionConfig {
    Constant { sigma: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Linear {
        coeffs: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    Quadratic {
        diag: Vec<f64>,
        #[serde(default)]
        linear: Option<Vec<f64>>,
        #[serde(default)]
        offset: f64,
    },
    Constant {
        value: f64,
    },
}

impl TerminalConfig {
    pub fn build(self, k: usize) -> Terminal {
        match self {
            TerminalConfig::Linear { coeffs, offset } => Terminal::Linear { coeffs, offset },
            TerminalConfig::Quadratic { diag, linear, offset } => {
                Terminal::Quadratic { diag, linear: linear.unwrap_or_else(|| vec![0.0; k]), offset }
            }
            TerminalConfig::Constant { value } => Terminal::Constant(value),
        }
    }
}

/// Structured-text form of [`ProblemSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub drift: DriftConfig,
    pub diffusion: DiffusionConfig,
    pub driver: DriverConfig,
    pub terminal: TerminalConfig,
    pub ambiguity: AmbiguityMap,
}

impl TryFrom<ProblemConfig> for ProblemSpec {
    type Error = Error;

    fn try_from(c: ProblemConfig) -> Result<Self> {
        let drift = match c.drift {
            DriftConfig::Application { c0, c1 } => Drift::Application { c0, c1: matrix(&c1, "c1")? },
            DriftConfig::Affine { constant, state, control } => {
                Drift::Affine { constant, state: matrix(&state, "drift state matrix")?, control }
            }
        };
        let diffusion = match c.diffusion {
            DiffusionConfig::Constant { sigma } => Diffusion::Constant(matrix(&sigma, "sigma")?),
        };
        let spec = ProblemSpec {
            state_dim: c.state_dim,
            noise_dim: c.noise_dim,
            horizon: c.horizon,
            x0: c.x0,
            drift,
            diffusion,
            driver: c.driver.try_into()?,
            terminal: c.terminal.build(c.state_dim),
            ambiguity: c.ambiguity,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Uniform time grid `t_i = i T / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Usage("time grid needs at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Usage(format!("time grid horizon must be positive, got {horizon}")));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }
}

/// Values indexed by `(time node, particle)`, each a vector of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeArray {
    n_nodes: usize,
    n_particles: usize,
    dim: usize,
    data: Vec<f64>,
}

impl NodeArray {
    pub fn zeros(n_nodes: usize, n_particles: usize, dim: usize) -> Self {
        Self { n_nodes, n_particles, dim, data: vec![0.0; n_nodes * n_particles * dim] }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, node: usize, particle: usize) -> &[f64] {
        let start = (node * self.n_particles + particle) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn get_mut(&mut self, node: usize, particle: usize) -> &mut [f64] {
        let start = (node * self.n_particles + particle) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// All particles at one node, particle-major.
    pub fn node(&self, node: usize) -> &[f64] {
        let len = self.n_particles * self.dim;
        &self.data[node * len..(node + 1) * len]
    }

    pub fn node_mut(&mut self, node: usize) -> &mut [f64] {
        let len = self.n_particles * self.dim;
        &mut self.data[node * len..(node + 1) * len]
    }

    /// Scalar value of a `dim == 1` array.
    pub fn scalar(&self, node: usize, particle: usize) -> f64 {
        self.data[node * self.n_particles + particle]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.n_nodes, self.n_particles, self.dim) == (other.n_nodes, other.n_particles, other.dim)
    }
}

/// Brownian increments `Delta B` for every `(step, particle)`.
#[derive(Debug, Clone)]
pub struct BrownianIncrements {
    seed: u64,
    increments: NodeArray,
}

impl BrownianIncrements {
    /// Draws `N(0, dt I_d)` increments. Particle `p` reads ChaCha stream `p`
    /// under key `seed`, and step `i` starts at word `i << 32` of that stream.
    pub fn generate(seed: u64, grid: &TimeGrid, n_particles: usize, noise_dim: usize) -> Self {
        let sqrt_dt = grid.dt().sqrt();
        let mut increments = NodeArray::zeros(grid.n_steps, n_particles, noise_dim);
        for step in 0..grid.n_steps {
            increments.node_mut(step).par_chunks_mut(noise_dim).enumerate().for_each(|(p, out)| {
                let mut rng = Self::stream(seed, p, step);
                for v in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = sqrt_dt * z;
                }
            });
        }
        Self { seed, increments }
    }

    fn stream(seed: u64, particle: usize, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(particle as u64);
        rng.set_word_pos((step as u128) << 32);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_particles(&self) -> usize {
        self.increments.n_particles
    }

    pub fn n_steps(&self) -> usize {
        self.increments.n_nodes
    }

    pub fn noise_dim(&self) -> usize {
        self.increments.dim
    }

    pub fn get(&self, step: usize, particle: usize) -> &[f64] {
        self.increments.get(step, particle)
    }
}

/// Euler–Maruyama paths of the state under the given controls and law flow.
pub fn simulate_forward(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    controls: &NodeArray,
    laws: &[EmpiricalMeasure],
    noise: &BrownianIncrements,
) -> Result<NodeArray> {
    let (k, d) = (spec.state_dim, spec.noise_dim);
    let n = noise.n_particles();
    if noise.n_steps() != grid.n_steps || noise.noise_dim() != d {
        return Err(Error::Usage("noise increments do not match the grid or noise dimension".into()));
    }
    if controls.n_nodes() != grid.n_nodes() || controls.n_particles() != n || laws.len() != grid.n_nodes() {
        return Err(Error::Usage("controls and laws must be defined at every node for every particle".into()));
    }
    let dt = grid.dt();
    let mut x = NodeArray::zeros(grid.n_nodes(), n, k);
    for p in 0..n {
        x.get_mut(0, p).copy_from_slice(&spec.x0);
    }
    let stride = n * k;
    for i in 0..grid.n_steps {
        let t = grid.time(i);
        let law = &laws[i];
        let (done, rest) = x.as_mut_slice().split_at_mut((i + 1) * stride);
        let prev = &done[i * stride..];
        let next = &mut rest[..stride];
        next.par_chunks_mut(k).enumerate().for_each_init(
            || (vec![0.0; k], vec![0.0; k * d]),
            |(b, s), (p, out)| {
                let xp = &prev[p * k..(p + 1) * k];
                let a = controls.scalar(i, p);
                spec.drift.eval(t, xp, a, law, b);
                spec.diffusion.eval(t, xp, a, law, s);
                let db = noise.get(i, p);
                for r in 0..k {
                    let noise_term: f64 = (0..d).map(|c| s[r * d + c] * db[c]).sum();
                    out[r] = xp[r] + b[r] * dt + noise_term;
                }
            },
        );
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { node: i + 1 });
        }
    }
    Ok(x)
}

/// Time-grid x particle arrays of a solved system.
#[derive(Debug, Clone)]
pub struct SolutionPaths {
    pub grid: TimeGrid,
    pub x: NodeArray,
    pub y: NodeArray,
    pub z: NodeArray,
    pub a: NodeArray,
    /// Driver `F` evaluated along the solution.
    pub driver: NodeArray,
    /// Empirical law of `Y` at each node.
    pub laws: Vec<EmpiricalMeasure>,
}

impl SolutionPaths {
    pub fn n_particles(&self) -> usize {
        self.y.n_particles()
    }

    pub fn y0(&self) -> f64 {
        self.laws[0].mean()
    }

    /// Writes `t,particle,X1..Xk,Y,Z1..Zd,A`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (k, d) = (self.x.dim(), self.z.dim());
        let mut header = vec!["t".to_string(), "particle".to_string()];
        header.extend((1..=k).map(|i| format!("X{i}")));
        header.push("Y".into());
        header.extend((1..=d).map(|i| format!("Z{i}")));
        header.push("A".into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.grid.n_nodes() {
            let t = self.grid.time(i);
            for p in 0..self.n_particles() {
                write!(w, "{t},{p}")?;
                for v in self.x.get(i, p) {
                    write!(w, ",{v}")?;
                }
                write!(w, ",{}", self.y.scalar(i, p))?;
                for v in self.z.get(i, p) {
                    write!(w, ",{v}")?;
                }
                writeln!(w, ",{}", self.a.scalar(i, p))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::IntervalUnion;

    fn spec(drift: Drift, sigma: f64) -> ProblemSpec {
        ProblemSpec {
            state_dim: 1,
            noise_dim: 1,
            horizon: 1.0,
            x0: vec![1.0],
            drift,
            diffusion: Diffusion::Constant(DMatrix::from_element(1, 1, sigma)),
            driver: DriverFunction::null(),
            terminal: Terminal::Linear { coeffs: vec![1.0], offset: 0.0 },
            ambiguity: AmbiguityMap::fixed(IntervalUnion::single(-1.0, 1.0).unwrap()),
        }
    }

    fn constant_drift(c: f64) -> Drift {
        Drift::Affine { constant: vec![c], state: DMatrix::zeros(1, 1), control: vec![0.0] }
    }

    fn run(spec: &ProblemSpec, grid: &TimeGrid, n: usize, seed: u64, control: f64) -> NodeArray {
        let mut a = NodeArray::zeros(grid.n_nodes(), n, 1);
        a.as_mut_slice().fill(control);
        let laws = vec![EmpiricalMeasure::dirac(0.0); grid.n_nodes()];
        let noise = BrownianIncrements::generate(seed, grid, n, spec.noise_dim);
        simulate_forward(spec, grid, &a, &laws, &noise).unwrap()
    }

    #[test]
    fn frozen_dynamics() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let x = run(&spec(constant_drift(0.0), 0.0), &grid, 5, 0, 0.0);
        assert!(x.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_drift_is_exact() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let x = run(&spec(constant_drift(0.5), 0.0), &grid, 3, 0, 0.0);
        for p in 0..3 {
            assert_eq!(x.scalar(8, p), 1.5);
        }
    }

    #[test]
    fn degenerate_cloud_without_noise() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let drift = Drift::Application { c0: vec![0.1], c1: DMatrix::from_element(1, 1, 0.25) };
        let x = run(&spec(drift, 0.0), &grid, 7, 3, 1.0);
        for i in 0..grid.n_nodes() {
            assert!(x.node(i).iter().all(|&v| v == x.scalar(i, 0)));
        }
    }

    #[test]
    fn ou_mean_matches_closed_form() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let n = 10_000;
        let drift = Drift::Application { c0: vec![0.0], c1: DMatrix::from_element(1, 1, 0.25) };
        let x = run(&spec(drift, 0.3), &grid, n, 42, 1.0);
        let terminal = x.node(100);
        let mean = terminal.iter().sum::<f64>() / n as f64;
        let sd = (terminal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let exact = (-1.0f64).exp();
        assert!((mean - exact).abs() < 3.0 * sd / (n as f64).sqrt() + 0.002, "mean {mean}");
    }

    #[test]
    fn deterministic_given_seed() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let s = spec(Drift::Application { c0: vec![0.0], c1: DMatrix::from_element(1, 1, 0.25) }, 0.3);
        assert_eq!(run(&s, &grid, 50, 9, 1.0), run(&s, &grid, 50, 9, 1.0));
        assert_ne!(run(&s, &grid, 50, 9, 1.0), run(&s, &grid, 50, 10, 1.0));
    }

    #[test]
    fn increments_are_keyed_by_particle_and_step() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let small = BrownianIncrements::generate(5, &grid, 3, 2);
        let large = BrownianIncrements::generate(5, &grid, 10, 2);
        for step in 0..4 {
            for p in 0..3 {
                assert_eq!(small.get(step, p), large.get(step, p));
            }
        }
    }

    #[test]
    fn divergence_reports_node() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let blowup: DriftFn = Arc::new(|_, x, _, _, out| out[0] = 1e308 * x[0].abs().max(1.0) * 10.0);
        let s = spec(Drift::Generic(blowup), 0.0);
        let a = NodeArray::zeros(11, 2, 1);
        let laws = vec![EmpiricalMeasure::dirac(0.0); 11];
        let noise = BrownianIncrements::generate(0, &grid, 2, 1);
        let err = simulate_forward(&s, &grid, &a, &laws, &noise).unwrap_err();
        assert!(matches!(err, Error::Divergence { node: 1 }), "{err}");
    }

    #[test]
    fn validation_rejects_asymmetric_c1() {
        let mut s = spec(
            Drift::Application { c0: vec![0.0, 0.0], c1: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]) },
            0.0,
        );
        s.state_dim = 2;
        s.x0 = vec![0.0, 0.0];
        s.diffusion = Diffusion::Constant(DMatrix::zeros(2, 1));
        s.terminal = Terminal::Linear { coeffs: vec![1.0, 1.0], offset: 0.0 };
        assert!(s.validate().unwrap_err().to_string().contains("symmetric"));
    }

    #[test]
    fn config_round_trip_fields() {
        let cfg: ProblemConfig = serde_json::from_str(
            r#"{"state_dim":1,"noise_dim":1,"horizon":1.0,"x0":[1.0],
                "drift":{"family":"application","c0":[0.0],"c1":[[0.25]]},
                "diffusion":{"family":"constant","sigma":[[0.3]]},
                "driver":{"family":"quadratic_penalty","kappa":1.0,"w0":0.6,"f0":{"kind":"linear","lambda0":0.5}},
                "terminal":{"kind":"linear","coeffs":[1.0]},
                "ambiguity":{"intervals":[[-2,-1],[1,2]]}}"#,
        )
        .unwrap();
        let spec = ProblemSpec::try_from(cfg).unwrap();
        assert_eq!(spec.terminal.eval(&[2.0]), 2.0);
        let bad = r#"{"state_dim":1,"noise_dim":1,"horizon":1.0,"x0":[1.0],"typo":1,
                "drift":{"family":"application","c0":[0.0],"c1":[[0.25]]},
                "diffusion":{"family":"constant","sigma":[[0.3]]},
                "driver":{"family":"quartic","lambda":2,"gamma":1},
                "terminal":{"kind":"constant","value":0},
                "ambiguity":{"intervals":[[-2,-1],[1,2]]}}"#;
        let err = serde_json::from_str::<ProblemConfig>(bad).unwrap_err();
        assert!(err.to_string().contains("typo"));
    }

    #[test]
    fn csv_header_and_rows() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let paths = SolutionPaths {
            grid,
            x: NodeArray::zeros(2, 1, 1),
            y: NodeArray::zeros(2, 1, 1),
            z: NodeArray::zeros(2, 1, 2),
            a: NodeArray::zeros(2, 1, 1),
            driver: NodeArray::zeros(2, 1, 1),
            laws: vec![EmpiricalMeasure::dirac(0.0); 2],
        };
        let mut buf = Vec::new();
        paths.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,particle,X1,Y,Z1,Z2,A");
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().nth(2).unwrap(), "1,0,0,0,0,0,0");
    }
}
