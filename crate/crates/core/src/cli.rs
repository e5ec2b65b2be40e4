//! Command-line entry points. Exit codes: 0 success, 1 solver or I/O error,
//! 2 configuration error, 3 failed check (`check` only).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adjoint::adjoint_pde_residual;
use crate::config::{parse_config, RunSpec, Setup};
use crate::error::{Error, Result};
use crate::io::{time_records, write_control, write_snapshot, write_text, write_timeseries, write_triple};
use crate::optimize::{cost_and_gradient, projected_gradient_descent, stationarity_residual, tracking_derivative};
use crate::sensitivity::{solve_linearized, trajectory_norm};
use crate::verify::{default_manufactured_control, manufactured_problem, reports_to_string, run_suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "tumor-control", version, about = "Optimal control of a relaxed Cahn-Hilliard tumor growth model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward solve: snapshots and a CSV time series.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write a state snapshot every this many steps (0 = only ends).
        #[arg(long, default_value_t = 0)]
        every: usize,
    },
    /// Sensitivity solve in the configured direction `control.direction`.
    Linearize(Common),
    /// Backward adjoint solve, terminal record and reduced gradient.
    Adjoint(Common),
    /// Projected gradient descent from `control.initial`.
    Optimize(Common),
    /// Runs every verification check and reports one line per check.
    Check(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and maps the
/// outcome to an exit code. Messages go to stdout, errors to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok((code, text)) => {
            print!("{text}");
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_configuration() {
                EXIT_CONFIG
            } else {
                EXIT_SOLVER
            }
        }
    }
}

struct Context {
    spec: RunSpec,
    setup: Setup,
    out: PathBuf,
}

fn load(common: &Common) -> Result<Context> {
    let mut spec = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let setup = spec.build()?;
    let out = common.out.clone().unwrap_or_else(|| spec.output_path());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(Context { spec, setup, out })
}

fn execute(command: Command) -> Result<(i32, String)> {
    let mut text = String::new();
    let code = match command {
        Command::Simulate { common, every } => simulate(&load(&common)?, every, &mut text)?,
        Command::Linearize(common) => linearize(&load(&common)?, &mut text)?,
        Command::Adjoint(common) => adjoint(&load(&common)?, &mut text)?,
        Command::Optimize(common) => optimize(&load(&common)?, &mut text)?,
        Command::Check(common) => check(&load(&common)?, &mut text)?,
    };
    Ok((code, text))
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn simulate(ctx: &Context, every: usize, text: &mut String) -> Result<i32> {
    let p = &ctx.setup.problem;
    let u = &ctx.setup.initial_control;
    let traj = p.solve_state(u)?;
    let records = time_records(&traj, u, &p.cost)?;
    write_timeseries(&records, path(&ctx.out, "timeseries.csv"))?;
    write_triple(path(&ctx.out, "state_initial.chcf"), &traj.states[0])?;
    write_triple(path(&ctx.out, "state_final.chcf"), traj.final_state())?;
    write_control(path(&ctx.out, "control.chcf"), u)?;
    if every > 0 {
        for n in (every..=p.nt()).step_by(every) {
            write_triple(path(&ctx.out, &format!("state_{n:05}.chcf")), &traj.states[n])?;
        }
    }
    let last = records.last().expect("at least one node");
    let _ = writeln!(text, "steps={} final_cost={:e}", p.nt(), last.j_total);
    let _ = writeln!(
        text,
        "mass_initial={:e} mass_final={:e} min_margin={:e}",
        records[0].mass,
        last.mass,
        records.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min)
    );
    let _ = writeln!(text, "output={}", ctx.out.display());
    Ok(EXIT_OK)
}

fn linearize(ctx: &Context, text: &mut String) -> Result<i32> {
    let p = &ctx.setup.problem;
    let (u, h) = (&ctx.setup.initial_control, &ctx.setup.direction);
    let traj = p.solve_state(u)?;
    let lin = solve_linearized(&traj, h, &p.solver)?;
    let nt = p.nt();
    write_snapshot(path(&ctx.out, "linearized_final.chcf"), &[&lin.eta[nt], &lin.theta[nt], &lin.rho[nt]])?;
    let mut csv = String::from("t,eta_l2,theta_l2,rho_l2\n");
    for n in 0..=nt {
        let _ = writeln!(
            csv,
            "{:e},{:e},{:e},{:e}",
            p.params.time(n),
            lin.eta[n].norm(),
            lin.theta[n].norm(),
            lin.rho[n].norm()
        );
    }
    write_text(path(&ctx.out, "linearized.csv"), &csv)?;
    let derivative = tracking_derivative(&traj, &lin, &p.cost)? + p.cost.b0 * u.inner(h)?;
    let dt = p.dt();
    let _ = writeln!(text, "directional_derivative={derivative:e}");
    let _ = writeln!(
        text,
        "norm_eta={:e} norm_theta={:e} norm_rho={:e}",
        trajectory_norm(&lin.eta, dt),
        trajectory_norm(&lin.theta, dt),
        trajectory_norm(&lin.rho, dt)
    );
    let _ = writeln!(text, "output={}", ctx.out.display());
    Ok(EXIT_OK)
}

fn adjoint(ctx: &Context, text: &mut String) -> Result<i32> {
    let p = &ctx.setup.problem;
    let u = &ctx.setup.initial_control;
    let eval = cost_and_gradient(u, p)?;
    let adj = &eval.adjoint;
    let t = &adj.terminal;
    write_snapshot(path(&ctx.out, "adjoint_initial.chcf"), &[&adj.q[0], &adj.p[0], &adj.r[0]])?;
    write_snapshot(
        path(&ctx.out, "terminal_continuous.chcf"),
        &[&t.continuous.q, &t.continuous.p, &t.continuous.r],
    )?;
    write_snapshot(path(&ctx.out, "terminal_discrete.chcf"), &[&t.discrete.q, &t.discrete.p, &t.discrete.r])?;
    write_control(path(&ctx.out, "gradient.chcf"), &eval.gradient)?;
    let residual = adjoint_pde_residual(adj, &eval.trajectory, &p.cost, false)?;
    let _ = writeln!(text, "cost={:e} gradient_norm={:e}", eval.cost.total(), eval.gradient.norm());
    let _ = writeln!(
        text,
        "terminal_continuous q={:e} p={:e} r={:e}",
        t.continuous.q.norm(),
        t.continuous.p.norm(),
        t.continuous.r.norm()
    );
    let _ = writeln!(
        text,
        "terminal_discrete q={:e} p={:e} r={:e}",
        t.discrete.q.norm(),
        t.discrete.p.norm(),
        t.discrete.r.norm()
    );
    let _ = writeln!(text, "adjoint_pde_residual={:e}", residual.total());
    let _ = writeln!(text, "output={}", ctx.out.display());
    Ok(EXIT_OK)
}

fn optimize(ctx: &Context, text: &mut String) -> Result<i32> {
    let p = &ctx.setup.problem;
    let result = projected_gradient_descent(&ctx.setup.initial_control, p, &ctx.spec.optimizer)?;
    write_control(path(&ctx.out, "u_opt.chcf"), &result.u_opt)?;
    let mut csv = String::from("iteration,cost,stationarity\n");
    for (k, (c, s)) in result.cost_history.iter().zip(&result.stationarity_history).enumerate() {
        let _ = writeln!(csv, "{k},{c:e},{s:e}");
    }
    write_text(path(&ctx.out, "optimization.csv"), &csv)?;
    let traj = p.solve_state(&result.u_opt)?;
    write_timeseries(&time_records(&traj, &result.u_opt, &p.cost)?, path(&ctx.out, "timeseries.csv"))?;
    let g = cost_and_gradient(&result.u_opt, p)?.gradient;
    let _ = writeln!(
        text,
        "termination={:?} iterations={} final_cost={:e} final_stationarity={:e}",
        result.termination,
        result.iterations,
        result.final_cost(),
        stationarity_residual(&result.u_opt, &g, &p.bounds)?
    );
    if let Some(reference) = &ctx.setup.reference_control {
        let _ = writeln!(text, "distance_to_reference={:e}", result.u_opt.axpy(-1.0, reference)?.norm());
    }
    for note in &result.notes {
        let _ = writeln!(text, "note: {note}");
    }
    let _ = writeln!(text, "output={}", ctx.out.display());
    Ok(EXIT_OK)
}

fn check(ctx: &Context, text: &mut String) -> Result<i32> {
    let p = &ctx.setup.problem;
    let (manufactured, reference) = match &ctx.setup.reference_control {
        Some(u) => (p.clone(), u.clone()),
        None => {
            let u = default_manufactured_control(&p.grid, p.nt(), p.params.t_final);
            (manufactured_problem(p, &u)?, u)
        }
    };
    let reports = run_suite(p, &manufactured, &reference, &ctx.spec.optimizer, ctx.spec.seed);
    let body = reports_to_string(&reports);
    write_text(path(&ctx.out, "checks.txt"), &body)?;
    text.push_str(&body);
    let failed = reports.iter().filter(|r| !r.passed()).count();
    let _ = writeln!(text, "checks={} failed={failed}", reports.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}
