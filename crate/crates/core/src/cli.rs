//! Command-line front end.
//!
//! Every subcommand reads an optional JSON config file, lets flags override
//! its `run` section, writes artifacts under `--out` and prints one summary
//! line. Exit codes: 0 success, 1 usage/config/io, 2 numerical failure,
//! 3 failed property check.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bsde::BackwardOptions;
use crate::coupling::{picard_solve, PicardOptions};
use crate::error::{Error, Result};
use crate::pde::{feynman_kac_check, ControlSelection, Grid1D};
use crate::properties::{quartic_spec, run_property_suite, EvalOptions};
use crate::scenarios::{run_application, run_counterexample, ApplicationConfig};
use crate::sde::{ProblemConfig, ProblemSpec, SolutionPaths, TimeGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_PROPERTY: i32 = 3;

/// Largest relative Feynman–Kac gap accepted by `pde-check`.
pub const PDE_GAP_LIMIT: f64 = 0.05;

#[derive(Debug, Parser)]
#[command(name = "theta-fbsde", version, about = "Mean-field FBSDE solver with endogenous non-convex ambiguity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the coupled system of a `problem` or `application` config.
    Solve(RunArgs),
    /// Quartic counterexample: curvature of G, sub-additivity gap, translation defect.
    Counterexample(CounterexampleArgs),
    /// Ambiguous system on U against its convexified counterpart.
    Application(RunArgs),
    /// Finite-difference HJB value against the particle solution at (0, x0).
    PdeCheck(PdeArgs),
    /// Property suite of the valuation operator.
    Properties(RunArgs),
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
    /// Worker threads; defaults to the hardware count.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct CounterexampleArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long = "T")]
    horizon: Option<f64>,
}

#[derive(Debug, Clone, Args)]
struct PdeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
}

/// Config-file equivalents of the numeric flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub threads: Option<usize>,
    pub beta: Option<f64>,
    pub damping: Option<f64>,
    pub degree: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleParams {
    pub lambda: f64,
    pub gamma: f64,
    pub c: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSettings {
    pub nx: Option<usize>,
    pub nt: Option<usize>,
    #[serde(default)]
    pub control: ControlSelection,
}

/// Structured-text config. Each subcommand reads the sections it needs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: Option<ProblemConfig>,
    pub application: Option<ApplicationConfig>,
    pub counterexample: Option<CounterexampleParams>,
    pub pde: Option<PdeSettings>,
    #[serde(default)]
    pub run: RunSettings,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn spec(&self) -> Result<ProblemSpec> {
        match (&self.problem, &self.application) {
            (Some(p), None) => p.clone().try_into(),
            (None, Some(a)) => a.spec(),
            (Some(_), Some(_)) => {
                Err(Error::Config("give either a problem or an application section, not both".into()))
            }
            (None, None) => Err(Error::Config("config needs a problem or an application section".into())),
        }
    }
}

/// Flags merged over file values over defaults.
#[derive(Debug, Clone)]
struct Resolved {
    seed: u64,
    steps: usize,
    out: PathBuf,
    picard: PicardOptions,
}

impl Resolved {
    fn eval(&self) -> EvalOptions {
        EvalOptions { n_steps: self.steps, picard: self.picard }
    }
}

fn resolve(args: &RunArgs, file: &RunSettings, default_steps: usize) -> Resolved {
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let defaults = PicardOptions::default();
    let backward =
        BackwardOptions { degree: file.degree.unwrap_or(BackwardOptions::default().degree), ..Default::default() };
    Resolved {
        seed,
        steps: args.steps.or(file.steps).unwrap_or(default_steps),
        out: args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
        picard: PicardOptions {
            n_particles: args.particles.or(file.particles).unwrap_or(defaults.n_particles),
            seed,
            tol: args.tol.or(file.tol).unwrap_or(defaults.tol),
            max_iter: args.max_iter.or(file.max_iter).unwrap_or(defaults.max_iter),
            beta: file.beta.unwrap_or(defaults.beta),
            damping: file.damping.unwrap_or(defaults.damping),
            backward,
        },
    }
}

fn load(args: &RunArgs) -> Result<ConfigFile> {
    args.config.as_deref().map(ConfigFile::load).transpose().map(Option::unwrap_or_default)
}

#[derive(Debug, Serialize)]
struct Summary {
    #[serde(rename = "Y0")]
    y0: f64,
    iterations: usize,
    converged: bool,
    seed: u64,
    wall_time_s: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_paths(path: &Path, paths: &SolutionPaths) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    paths.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

struct Outcome {
    out: PathBuf,
    summary: Summary,
    line: String,
    property_failed: bool,
}

fn finish(outcome: Outcome) -> Result<i32> {
    write_json(&outcome.out.join("summary.json"), &outcome.summary)?;
    println!("{}", outcome.line);
    Ok(if outcome.property_failed { EXIT_PROPERTY } else { EXIT_OK })
}

fn cmd_solve(args: &RunArgs, start: Instant) -> Result<Outcome> {
    let file = load(args)?;
    let r = resolve(args, &file.run, 100);
    let spec = file.spec()?;
    fs::create_dir_all(&r.out)?;
    let grid = TimeGrid::new(spec.horizon, r.steps)?;
    let sol = picard_solve(&spec, &grid, &r.picard)?;
    write_paths(&r.out.join("paths.csv"), &sol.paths)?;
    #[derive(Serialize)]
    struct Report<'a> {
        y0: f64,
        y0_std_error: f64,
        picard: &'a crate::coupling::PicardReport,
    }
    write_json(
        &r.out.join("report.json"),
        &Report { y0: sol.y0(), y0_std_error: sol.y0_std_error, picard: &sol.report },
    )?;
    Ok(Outcome {
        out: r.out.clone(),
        line: format!(
            "solve: Y0 = {:.6} (se {:.2e}), {} iterations, final delta {:.3e}",
            sol.y0(),
            sol.y0_std_error,
            sol.report.iterations,
            sol.report.deltas.last().copied().unwrap_or(0.0)
        ),
        summary: Summary {
            y0: sol.y0(),
            iterations: sol.report.iterations,
            converged: sol.report.converged,
            seed: r.seed,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        property_failed: false,
    })
}

fn cmd_counterexample(args: &CounterexampleArgs, start: Instant) -> Result<Outcome> {
    let file = load(&args.run)?;
    let r = resolve(&args.run, &file.run, 1000);
    let base = file.counterexample.unwrap_or(CounterexampleParams { lambda: 2.0, gamma: 1.0, c: 0.1, horizon: 1.0 });
    let lambda = args.lambda.unwrap_or(base.lambda);
    let gamma = args.gamma.unwrap_or(base.gamma);
    let c = args.c.unwrap_or(base.c);
    let horizon = args.horizon.unwrap_or(base.horizon);
    let report = run_counterexample(lambda, gamma, c, horizon, r.steps)?;
    fs::create_dir_all(&r.out)?;
    write_json(&r.out.join("report.json"), &report)?;
    Ok(Outcome {
        out: r.out.clone(),
        line: format!(
            "counterexample: G''(0) = {:.6} (analytic {:.6}), E[c] + E[-c] = {:+.6}, E[0] = {:.1e}, gap = {:+.6}, translation defect = {:+.6}",
            report.curvature.numeric,
            report.curvature.analytic,
            report.e_plus + report.e_minus,
            report.e_zero,
            report.gap,
            report.translation_defect
        ),
        summary: Summary {
            y0: report.e_plus,
            iterations: 0,
            converged: true,
            seed: r.seed,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        property_failed: !(report.gap > 0.0 && report.audit.pass),
    })
}

fn cmd_application(args: &RunArgs, start: Instant) -> Result<Outcome> {
    let file = load(args)?;
    let r = resolve(args, &file.run, 100);
    let config = file.application.unwrap_or_else(ApplicationConfig::reference);
    let run = run_application(&config, &r.eval())?;
    fs::create_dir_all(&r.out)?;
    write_paths(&r.out.join("paths_theta.csv"), &run.theta_paths)?;
    write_paths(&r.out.join("paths_convexified.csv"), &run.convexified_paths)?;
    write_json(&r.out.join("report.json"), &run.report)?;
    let rep = &run.report;
    let show = |v: Option<f64>| v.map_or_else(|| "dynamic".to_string(), |v| format!("{v}"));
    Ok(Outcome {
        out: r.out.clone(),
        line: format!(
            "application: controls {} vs {} (multipliers {} vs {}), Y0 = {:.6} vs {:.6}",
            show(rep.theta.static_control),
            show(rep.convexified.static_control),
            show(rep.theta.drift_multiplier),
            show(rep.convexified.drift_multiplier),
            rep.theta.y0,
            rep.convexified.y0
        ),
        summary: Summary {
            y0: rep.theta.y0,
            iterations: rep.theta.iterations,
            converged: rep.theta.converged && rep.convexified.converged,
            seed: r.seed,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        property_failed: false,
    })
}

fn cmd_pde_check(args: &PdeArgs, start: Instant) -> Result<Outcome> {
    let file = load(&args.run)?;
    let r = resolve(&args.run, &file.run, 100);
    let spec = if file.problem.is_none() && file.application.is_none() {
        ApplicationConfig::reference().spec()?
    } else {
        file.spec()?
    };
    let pde = file.pde.unwrap_or_default();
    let nx = args.nx.or(pde.nx).unwrap_or(201);
    let mut grid = Grid1D::covering(&spec, nx)?;
    if let Some(nt) = args.nt.or(pde.nt) {
        grid = Grid1D::new(grid.x_min, grid.x_max, nx, nt, grid.horizon)?;
    }
    let sol = picard_solve(&spec, &TimeGrid::new(spec.horizon, r.steps)?, &r.picard)?;
    let (report, surface) = feynman_kac_check(&spec, &grid, &sol.paths, pde.control)?;
    fs::create_dir_all(&r.out)?;
    write_paths(&r.out.join("paths.csv"), &sol.paths)?;
    let mut w = BufWriter::new(File::create(r.out.join("value.csv"))?);
    surface.write_csv(&mut w)?;
    w.flush()?;
    #[derive(Serialize)]
    struct Report {
        grid: Grid1D,
        control: ControlSelection,
        check: crate::pde::FeynmanKacReport,
        y0_std_error: f64,
        pass: bool,
    }
    let pass = report.rel_gap <= PDE_GAP_LIMIT;
    write_json(
        &r.out.join("report.json"),
        &Report { grid, control: pde.control, check: report, y0_std_error: sol.y0_std_error, pass },
    )?;
    Ok(Outcome {
        out: r.out.clone(),
        line: format!(
            "pde-check: v(0, x0) = {:.6}, Y0 = {:.6}, relative gap {:.3}%",
            report.pde_value,
            report.fbsde_value,
            100.0 * report.rel_gap
        ),
        summary: Summary {
            y0: sol.y0(),
            iterations: sol.report.iterations,
            converged: sol.report.converged,
            seed: r.seed,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        property_failed: !pass,
    })
}

fn cmd_properties(args: &RunArgs, start: Instant) -> Result<Outcome> {
    let file = load(args)?;
    let builtin = file.problem.is_none() && file.application.is_none();
    let r = resolve(args, &file.run, if builtin { 1000 } else { 100 });
    let spec = if builtin { quartic_spec(2.0, 1.0, 1.0, 0.1)? } else { file.spec()? };
    let report = run_property_suite(&spec, &r.eval())?;
    fs::create_dir_all(&r.out)?;
    write_json(&r.out.join("report.json"), &report)?;
    let passed = report.checks.iter().filter(|c| c.pass).count();
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    Ok(Outcome {
        out: r.out.clone(),
        line: if failed.is_empty() {
            format!("properties: {passed}/{} checks passed", report.checks.len())
        } else {
            format!("properties: {passed}/{} checks passed; failed: {}", report.checks.len(), failed.join(", "))
        },
        summary: Summary {
            y0: f64::NAN,
            iterations: 0,
            converged: true,
            seed: r.seed,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        property_failed: !failed.is_empty(),
    })
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn dispatch(command: &Command) -> Result<i32> {
    let start = Instant::now();
    let outcome = match command {
        Command::Solve(a) => cmd_solve(a, start),
        Command::Counterexample(a) => cmd_counterexample(a, start),
        Command::Application(a) => cmd_application(a, start),
        Command::PdeCheck(a) => cmd_pde_check(a, start),
        Command::Properties(a) => cmd_properties(a, start),
    }?;
    finish(outcome)
}

fn run_args(command: &Command) -> &RunArgs {
    match command {
        Command::Solve(a) | Command::Application(a) | Command::Properties(a) => a,
        Command::Counterexample(a) => &a.run,
        Command::PdeCheck(a) => &a.run,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = load(run_args(&cli.command)).ok().and_then(|f| run_args(&cli.command).threads.or(f.run.threads));
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonContraction { report } | Error::NoConvergence { report } = &e {
                eprintln!("deltas: {:?}", report.deltas);
            }
            exit_code(&e)
        }
    }
}
