//! Command-line entry points: formulation benchmark, scenario runner, and
//! the self-verification suite.
//!
//! Exit codes: 0 success, 1 check/verification failure, 2 configuration
//! error.

use crate::config::{self, CheckSection};
use crate::ocp::{Formulation, TaskCommand};
use crate::runtime::MpcSettings;
use crate::sim::{self, CommandSchedule, DelayModel, Scenario};
use crate::verify;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "wbmpc", version, about = "Whole-body inverse-dynamics MPC toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark the six dynamics formulations in closed loop.
    Benchmark(BenchmarkArgs),
    /// Run a closed-loop scenario from a config file.
    Run(RunArgs),
    /// Run the numerical self-verification suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Scenario config supplying the model and gait (defaults bundled).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Formulations to run (repeatable); default: all six.
    #[arg(long)]
    formulation: Vec<String>,
    #[arg(long, default_value_t = 15)]
    nodes: usize,
    #[arg(long, default_value_t = 0.01)]
    dt0: f64,
    /// Geometric step ratio; default 10^(1/13).
    #[arg(long)]
    gamma: Option<f64>,
    /// Closed-loop MPC steps per formulation (the first 10 are warm-up).
    #[arg(long, default_value_t = 150)]
    steps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Exit nonzero if the scenario's [check] thresholds fail.
    #[arg(long)]
    check: bool,
    /// Override the solve-delay model (milliseconds).
    #[arg(long)]
    delay_ms: Option<f64>,
    /// Override the formulation.
    #[arg(long)]
    formulation: Option<String>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    dt0: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Log the seed (runs are deterministic in lockstep mode).
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the full time-series log as CSV (on by default).
    #[arg(long, default_value_t = true)]
    csv: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Also emit the report rows as CSV on stdout.
    #[arg(long)]
    csv: bool,
}

/// One benchmark table row.
pub struct BenchmarkRow {
    pub formulation: Formulation,
    pub state_dim: usize,
    pub input_dim: usize,
    pub decision_variables: usize,
    pub solve_time_mean_ms: f64,
    pub solve_time_std_ms: f64,
    pub iterations_mean: f64,
    pub convergence_rate: f64,
    pub failure: Option<String>,
}

pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub cpu: String,
    pub steps: usize,
}

pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match cli.command {
        Command::Benchmark(args) => cmd_benchmark(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Verify(args) => cmd_verify(&args),
    }
}

fn out_dir_or_default(cli: Option<&PathBuf>) -> PathBuf {
    cli.cloned()
        .or_else(|| std::env::var("WBMPC_OUT_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn cpu_description() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .map(|l| l.split(':').nth(1).unwrap_or("").trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into())
}

fn cmd_benchmark(args: &BenchmarkArgs) -> i32 {
    let (tree, gait) = match &args.config {
        Some(path) => match config::load_scenario_file(path)
            .and_then(|f| config::resolve(&f, path.parent().unwrap_or(Path::new("."))))
        {
            Ok(resolved) => (resolved.tree, resolved.scenario.gait),
            Err(e) => {
                eprintln!("config error: {}", e);
                return 2;
            }
        },
        None => (
            std::sync::Arc::new(crate::assets::benchmark_tree()),
            crate::ocp::gait::GaitSchedule::trot(0.8, 0.08),
        ),
    };
    let formulations: Vec<Formulation> = if args.formulation.is_empty() {
        Formulation::ALL.to_vec()
    } else {
        match args.formulation.iter().map(|s| Formulation::parse(s)).collect() {
            Ok(v) => v,
            Err(e) => {
                eprintln!("config error: {}", e);
                return 2;
            }
        }
    };
    let gamma = args.gamma.unwrap_or_else(|| 10f64.powf(1.0 / 13.0));

    let mut rows = Vec::new();
    for f in formulations {
        let mut mpc = MpcSettings::default_for(f);
        mpc.nodes = args.nodes;
        mpc.dt0 = args.dt0;
        mpc.gamma = gamma;
        let duration = args.steps as f64 * 0.0125;
        let mut scenario = Scenario::new(
            mpc,
            gait.clone(),
            CommandSchedule::constant(TaskCommand::default()),
            duration.max(0.5),
        );
        scenario.delay = DelayModel::None;

        // Layout numbers are independent of the run outcome.
        let nominal = crate::assets::nominal_configuration(&tree);
        let state = crate::model::RobotState {
            q: nominal.clone(),
            v: nalgebra::DVector::zeros(tree.nv()),
        };
        let grid = crate::ocp::make_time_grid(args.nodes, args.dt0, gamma).unwrap();
        let problem = crate::ocp::build_ocp(
            f,
            &tree,
            grid,
            &gait,
            &TaskCommand::default(),
            &Default::default(),
            0.7,
            &nominal,
            &state,
            0.0,
        )
        .unwrap();
        let count = problem.decision_variable_count();
        let cross = verify::count_via_solver_dims(&problem);
        if count != cross {
            eprintln!("internal error: variable counts disagree ({} vs {})", count, cross);
            return 1;
        }
        let layout = problem.layout((crate::ocp::TORQUE_NODE_LIMIT + 1).min(args.nodes - 2));
        let state_dim = problem.state_dimension();
        let input_dim = layout.dim;

        let row = match sim::run_closed_loop(&tree, &scenario) {
            Ok(res) => {
                let warm: Vec<f64> = res.log.solve_times.iter().skip(10).copied().collect();
                let n = warm.len().max(1);
                let mean = warm.iter().sum::<f64>() / n as f64;
                let var = warm.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
                let iters: Vec<usize> = res.log.solve_iterations.iter().skip(10).copied().collect();
                let iter_mean = iters.iter().sum::<usize>() as f64 / iters.len().max(1) as f64;
                let converged = res
                    .log
                    .rows
                    .iter()
                    .filter(|r| r.kkt_residual.is_finite() && r.kkt_residual <= 1e-3)
                    .count() as f64
                    / res.log.rows.len().max(1) as f64;
                BenchmarkRow {
                    formulation: f,
                    state_dim,
                    input_dim,
                    decision_variables: count,
                    solve_time_mean_ms: mean * 1e3,
                    solve_time_std_ms: var.sqrt() * 1e3,
                    iterations_mean: iter_mean,
                    convergence_rate: converged,
                    failure: None,
                }
            }
            Err(e) => BenchmarkRow {
                formulation: f,
                state_dim,
                input_dim,
                decision_variables: count,
                solve_time_mean_ms: f64::NAN,
                solve_time_std_ms: f64::NAN,
                iterations_mean: f64::NAN,
                convergence_rate: 0.0,
                failure: Some(e.to_string()),
            },
        };
        rows.push(row);
    }

    let report = BenchmarkReport { rows, cpu: cpu_description(), steps: args.steps };
    print_benchmark(&report);
    if args.csv {
        let dir = out_dir_or_default(args.out_dir.as_ref());
        if let Err(e) = std::fs::create_dir_all(&dir) {
            eprintln!("cannot create {}: {}", dir.display(), e);
            return 1;
        }
        let path = dir.join("benchmark.csv");
        if let Err(e) = std::fs::write(&path, benchmark_csv(&report)) {
            eprintln!("cannot write {}: {}", path.display(), e);
            return 1;
        }
        println!("\nwrote {}", path.display());
    }
    0
}

fn print_benchmark(report: &BenchmarkReport) {
    println!("cpu: {}   mpc steps: {} (first 10 excluded)", report.cpu, report.steps);
    println!(
        "{:<20} {:>6} {:>6} {:>10} {:>16} {:>10} {:>9}  {}",
        "formulation", "nx", "nu", "dec. vars", "solve ms (std)", "iters", "conv", "status"
    );
    for r in &report.rows {
        let status = r.failure.clone().unwrap_or_else(|| "ok".into());
        println!(
            "{:<20} {:>6} {:>6} {:>10} {:>9.2} ({:>4.2}) {:>10.1} {:>8.0}%  {}",
            r.formulation.name(),
            r.state_dim,
            r.input_dim,
            r.decision_variables,
            r.solve_time_mean_ms,
            r.solve_time_std_ms,
            r.iterations_mean,
            r.convergence_rate * 100.0,
            status
        );
    }
}

/// Stable benchmark CSV schema (version 1).
pub fn benchmark_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from(
        "formulation,state_dim,input_dim,decision_variables,solve_time_mean_ms,solve_time_std_ms,iterations_mean,convergence_rate,status\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.2},{:.3},{}\n",
            r.formulation.name(),
            r.state_dim,
            r.input_dim,
            r.decision_variables,
            r.solve_time_mean_ms,
            r.solve_time_std_ms,
            r.iterations_mean,
            r.convergence_rate,
            r.failure.clone().unwrap_or_else(|| "ok".into())
        ));
    }
    out
}

fn cmd_run(args: &RunArgs) -> i32 {
    let file = match config::load_scenario_file(&args.config) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("config error: {}", e);
            return 2;
        }
    };
    let dir = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut resolved = match config::resolve(&file, &dir) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("config error: {}", e);
            return 2;
        }
    };
    if let Some(ms) = args.delay_ms {
        resolved.scenario.delay =
            if ms <= 0.0 { DelayModel::None } else { DelayModel::Fixed(ms * 1e-3) };
    }
    if let Some(f) = &args.formulation {
        match Formulation::parse(f) {
            Ok(f) => resolved.scenario.mpc.formulation = f,
            Err(e) => {
                eprintln!("config error: {}", e);
                return 2;
            }
        }
    }
    if let Some(n) = args.nodes {
        resolved.scenario.mpc.nodes = n;
    }
    if let Some(dt0) = args.dt0 {
        resolved.scenario.mpc.dt0 = dt0;
    }
    if let Some(g) = args.gamma {
        resolved.scenario.mpc.gamma = g;
    }

    let out_dir = out_dir_or_default(args.out_dir.as_ref());
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("cannot create {}: {}", out_dir.display(), e);
        return 1;
    }

    println!(
        "running {} for {:.1} s (formulation {}, seed {})",
        args.config.display(),
        resolved.scenario.duration,
        resolved.scenario.mpc.formulation.name(),
        args.seed
    );
    let result = match sim::run_closed_loop(&resolved.tree, &resolved.scenario) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("scenario failed: {}", e);
            return 1;
        }
    };

    if args.csv {
        let log_path = out_dir.join("log.csv");
        if let Err(e) = sim::write_log_csv(&resolved.tree, &result.log, &log_path) {
            eprintln!("cannot write {}: {}", log_path.display(), e);
            return 1;
        }
        println!("wrote {}", log_path.display());
    }
    let m = &result.metrics;
    let metrics_csv = format!(
        "drift,base_displacement,slip_max,ee_rms,peak_torque,adhesion_events,mean_solve_time,mean_iterations\n{:.6},{:.6},{:.6},{:.6},{:.3},{},{:.6},{:.2}\n",
        m.drift, m.base_displacement, m.slip_max, m.ee_rms, m.peak_torque, m.adhesion_events,
        m.mean_solve_time, m.mean_iterations
    );
    let metrics_path = out_dir.join("metrics.csv");
    if let Err(e) = std::fs::write(&metrics_path, metrics_csv) {
        eprintln!("cannot write {}: {}", metrics_path.display(), e);
        return 1;
    }
    println!(
        "metrics: drift {:.4} m/s, slip {:.4} m, ee rms {:.4} m, peak torque {:.1} N m, mean solve {:.1} ms ({:.1} iters)",
        m.drift, m.slip_max, m.ee_rms, m.peak_torque, m.mean_solve_time * 1e3, m.mean_iterations
    );

    if args.check {
        let check = resolved.check.clone().unwrap_or_default();
        if let Some(reason) = check_failures(&check, m) {
            eprintln!("check failed: {}", reason);
            return 1;
        }
        println!("checks passed");
    }
    0
}

fn check_failures(check: &CheckSection, m: &sim::SimMetrics) -> Option<String> {
    if let Some(v) = check.max_drift {
        if m.drift > v {
            return Some(format!("drift {:.4} > {:.4}", m.drift, v));
        }
    }
    if let Some(v) = check.max_slip {
        if m.slip_max > v {
            return Some(format!("slip {:.4} > {:.4}", m.slip_max, v));
        }
    }
    if let Some(v) = check.max_peak_torque {
        if m.peak_torque > v {
            return Some(format!("peak torque {:.1} > {:.1}", m.peak_torque, v));
        }
    }
    if let Some(v) = check.max_ee_rms {
        if m.ee_rms > v {
            return Some(format!("ee rms {:.4} > {:.4}", m.ee_rms, v));
        }
    }
    None
}

fn cmd_verify(args: &VerifyArgs) -> i32 {
    let tree = std::sync::Arc::new(crate::assets::benchmark_tree());
    println!("verification suites (seed {})", args.seed);
    let report = verify::run_suites(&tree, args.seed);
    println!("{:<26} {:>8} {:>12} {:>12} {:>8}", "suite", "samples", "worst", "tolerance", "result");
    for row in &report.rows {
        println!(
            "{:<26} {:>8} {:>12.3e} {:>12.1e} {:>8}",
            row.name,
            row.samples,
            row.worst,
            row.tolerance,
            if row.passed { "pass" } else { "FAIL" }
        );
    }
    if args.csv {
        println!("\nsuite,samples,worst,tolerance,passed");
        for row in &report.rows {
            println!(
                "{},{},{:.6e},{:.1e},{}",
                row.name, row.samples, row.worst, row.tolerance, row.passed
            );
        }
    }
    if report.all_passed() {
        0
    } else {
        1
    }
}
