use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sqpgs::{SolverParams, Status, Trace};
use sssc_core::dae::OperatingPoint;
use sssc_core::nlp::{default_solver_params, SsscOpf};
use sssc_core::smallsignal::{analyze_point, finite_difference_gradient, spectral_abscissa_gradient, ModalReport};
use sssc_core::tdsim::{self, Disturbance, SimConfig, SpeedReference};
use sssc_core::{resolve_case, NetworkCase};

#[derive(Parser)]
#[command(name = "sssc", version, about = "Small-signal-stability-constrained optimal power flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Modal analysis at an operating point.
    Analyze(AnalyzeArgs),
    /// Standard OPF (no stability constraint).
    Opf(SolveArgs),
    /// OPF with the spectral-abscissa constraint.
    #[command(name = "sssc-opf")]
    SsscOpf(SsscArgs),
    /// Load-step simulation from an operating point.
    Simulate(SimulateArgs),
    /// Closed-form vs finite-difference gradient of the spectral abscissa.
    SensitivityCheck(SensitivityArgs),
}

#[derive(Args, Clone)]
struct CaseArgs {
    /// Case file, or the name of a bundled case.
    #[arg(long, default_value = "wscc9")]
    case: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SolveArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Gradient samples for the spectral constraint.
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    nu_in: Option<f64>,
    #[arg(long)]
    nu_s: Option<f64>,
    /// Initial penalty parameter.
    #[arg(long)]
    rho: Option<f64>,
    /// Initial sampling radius.
    #[arg(long)]
    eps: Option<f64>,
    /// Armijo constant of the line search.
    #[arg(long)]
    varpi: Option<f64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Record the four most critical modes per iteration.
    #[arg(long)]
    log_modes: bool,
    /// Record per-phase timings per iteration.
    #[arg(long)]
    profile: bool,
}

#[derive(Args)]
struct SsscArgs {
    #[arg(long, allow_hyphen_values = true)]
    eta_bar: f64,
    #[command(flatten)]
    solve: SolveArgs,
}

#[derive(Args)]
struct PointArgs {
    /// Start from a solution.json written by `opf` or `sssc-opf`.
    #[arg(long, conflicts_with_all = ["dispatch", "vset"])]
    solution: Option<PathBuf>,
    /// Generator outputs in MW (the reference machine is rebalanced).
    #[arg(long, value_delimiter = ',', requires = "vset")]
    dispatch: Option<Vec<f64>>,
    /// Generator voltage setpoints in p.u.
    #[arg(long, value_delimiter = ',')]
    vset: Option<Vec<f64>>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    point: PointArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    point: PointArgs,
    /// Bus id of the load step.
    #[arg(long, default_value_t = 2)]
    bus: usize,
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    delta_mw: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    delta_mvar: f64,
    /// Time of the load step (s).
    #[arg(long, default_value_t = 1.0)]
    at: f64,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Start of the decay-fit window (s); the window ends at the horizon.
    #[arg(long, default_value_t = 2.0)]
    window_start: f64,
}

#[derive(Args)]
struct SensitivityArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Minimum gap between the critical real part and the next one.
    #[arg(long, default_value_t = 1e-3)]
    margin: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Solution {
    case: String,
    eta_bar: Option<f64>,
    status: Status,
    iterations: usize,
    cost: f64,
    eta: Option<f64>,
    sigma_max: f64,
    dispatch_mw: Vec<f64>,
    reactive_mvar: Vec<f64>,
    voltage: Vec<f64>,
    x: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct PointCheck {
    eta: f64,
    margin: f64,
    grad_norm: f64,
    max_abs_error: f64,
    max_rel_error: f64,
}

#[derive(Debug, Serialize)]
struct SensitivityReport {
    case: String,
    seed: u64,
    step: f64,
    points: Vec<PointCheck>,
    rejected: usize,
    max_rel_error: f64,
    pass: bool,
    elapsed_s: f64,
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    eta: f64,
    disturbance: Disturbance,
    decay_rate: Option<f64>,
    max_speed_deviation: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Opf(a) => optimize(a, None),
        Command::SsscOpf(a) => optimize(a.solve, Some(a.eta_bar)),
        Command::Simulate(a) => simulate(a),
        Command::SensitivityCheck(a) => sensitivity(a),
    };
    match run {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load(args: &CaseArgs) -> Result<NetworkCase> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    resolve_case(&args.case).with_context(|| format!("loading case {}", args.case))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn emit_trace(trace: &Trace, dir: &Path) -> Result<()> {
    if trace.is_empty() {
        bail!("empty trace");
    }
    let mut w = create(dir, "trace.jsonl")?;
    trace.write_jsonl(&mut w)?;
    w.flush()?;
    let mut w = create(dir, "trace.csv")?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn solver_params(a: &SolveArgs) -> Result<SolverParams> {
    let d = default_solver_params();
    let p = SolverParams {
        p: a.p,
        seed: a.seed,
        k_max: a.max_iter.unwrap_or(d.k_max),
        nu_in: a.nu_in.unwrap_or(d.nu_in),
        nu_s: a.nu_s.unwrap_or(d.nu_s),
        rho0: a.rho.unwrap_or(d.rho0),
        eps0: a.eps.unwrap_or(d.eps0),
        varpi: a.varpi.unwrap_or(d.varpi),
        threads: a.threads.max(1),
        log_modes: a.log_modes,
        profile: a.profile,
        ..d
    };
    p.validate()?;
    Ok(p)
}

fn optimize(a: SolveArgs, eta_bar: Option<f64>) -> Result<bool> {
    if let Some(e) = eta_bar {
        if !e.is_finite() {
            bail!("--eta-bar must be finite");
        }
    }
    let case = load(&a.case)?;
    let params = solver_params(&a)?;
    let opf = SsscOpf::new(&case, eta_bar);
    let started = Instant::now();
    let result = match sqpgs::solve(&opf, &opf.flat_start(), &params) {
        Ok(r) => r,
        Err(e) => {
            if let Some(t) = e.partial_trace().filter(|t| !t.is_empty()) {
                emit_trace(t, &a.case.out)?;
            }
            return Err(e.into());
        }
    };
    let elapsed = started.elapsed().as_secs_f64();
    emit_trace(&result.trace, &a.case.out)?;
    let l = &opf.layout;
    let x = &result.x;
    let base = case.base_mva;
    let solution = Solution {
        case: a.case.case.clone(),
        eta_bar,
        status: result.status,
        iterations: result.trace.len(),
        cost: opf.cost(x),
        eta: opf.modal(x).ok().map(|m| m.eta),
        sigma_max: result.sigma_max,
        dispatch_mw: x[l.pg.clone()].iter().map(|p| p * base).collect(),
        reactive_mvar: x[l.qg.clone()].iter().map(|q| q * base).collect(),
        voltage: x[l.v.clone()].to_vec(),
        x: x.clone(),
    };
    write_json(&a.case.out, "solution.json", &solution)?;
    let eta = solution.eta.map_or("n/a".to_string(), |e| format!("{e:.5}"));
    println!(
        "{:?} after {} iterations in {elapsed:.1} s: cost {:.2} $/h, eta {eta}, max infeasibility {:.2e}",
        solution.status, solution.iterations, solution.cost, solution.sigma_max
    );
    Ok(result.status == Status::Converged)
}

/// Equilibrium at the requested point. Solutions are re-solved by a power
/// flow at their generator outputs and terminal voltages.
fn operating_point(case: &NetworkCase, point: &PointArgs) -> Result<(SsscOpf, Vec<f64>)> {
    let opf = SsscOpf::new(case, None);
    let gen_buses = case.generator_buses();
    let (pg, vset): (Vec<f64>, Vec<f64>) = match (&point.solution, &point.dispatch, &point.vset) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let s: Solution = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let pg = s.dispatch_mw.iter().map(|p| p / case.base_mva).collect();
            let v = gen_buses.iter().map(|&b| s.voltage[b]).collect();
            (pg, v)
        }
        (None, Some(d), Some(v)) => (d.iter().map(|p| p / case.base_mva).collect(), v.clone()),
        _ => bail!("give --solution or both --dispatch and --vset"),
    };
    let g = case.num_generators();
    if pg.len() != g || vset.len() != g {
        bail!("expected {g} generator values, got {} outputs and {} setpoints", pg.len(), vset.len());
    }
    let x = opf.feasible_point(&pg, &vset).context("power flow did not converge at the requested point")?;
    Ok((opf, x))
}

fn analyze(a: AnalyzeArgs) -> Result<bool> {
    let case = load(&a.case)?;
    let (opf, x) = operating_point(&case, &a.point)?;
    let modal = opf.modal(&x)?;
    let report = ModalReport::from(&modal);
    write_json(&a.case.out, "modal_report.json", &report)?;
    println!("eta {:.6}, critical mode {:.6} {:+.6}i, margin {:.3e}", modal.eta, modal.lambda.re, modal.lambda.im, modal.margin);
    for w in &modal.warnings {
        eprintln!("warning: {w}");
    }
    Ok(true)
}

fn simulate(a: SimulateArgs) -> Result<bool> {
    let case = load(&a.case)?;
    let (opf, x) = operating_point(&case, &a.point)?;
    let eta = opf.modal(&x)?.eta;
    let op: OperatingPoint = opf.operating_point(&x);
    let disturbance = Disturbance {
        bus: a.bus,
        delta_pl: a.delta_mw / case.base_mva,
        delta_ql: a.delta_mvar / case.base_mva,
        time: a.at,
    };
    let d = SimConfig::default();
    let config = SimConfig {
        horizon: a.horizon.unwrap_or(d.horizon),
        dt: a.dt.unwrap_or(d.dt),
        disturbance: Some(disturbance),
        ..d
    };
    let traj = match tdsim::simulate(&case, &op, &config) {
        Ok(t) => t,
        Err(tdsim::SimError::StepFailure { time, source, partial }) => {
            let mut w = create(&a.case.out, "trajectory.csv")?;
            partial.write_csv(&mut w)?;
            w.flush()?;
            bail!("step failed at t = {time}: {source}");
        }
        Err(e) => return Err(e.into()),
    };
    let mut w = create(&a.case.out, "trajectory.csv")?;
    traj.write_csv(&mut w)?;
    w.flush()?;
    let decay = tdsim::decay_rate_estimate(&traj, (a.window_start, config.horizon), SpeedReference::default());
    if let Err(e) = &decay {
        eprintln!("warning: decay rate not available: {e}");
    }
    let summary = SimulationSummary {
        eta,
        disturbance,
        decay_rate: decay.ok(),
        max_speed_deviation: tdsim::max_speed_deviation(&traj),
    };
    write_json(&a.case.out, "simulation.json", &summary)?;
    let rate = summary.decay_rate.map_or("n/a".to_string(), |r| format!("{r:.4}"));
    println!("eta {eta:.4}, envelope decay rate {rate} 1/s");
    Ok(true)
}

fn sensitivity(a: SensitivityArgs) -> Result<bool> {
    let case = load(&a.case)?;
    let opf = SsscOpf::new(&case, None);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let started = Instant::now();
    let mut points = Vec::new();
    let mut rejected = 0;
    while points.len() < a.points {
        if rejected > 100 * a.points.max(1) {
            bail!("could not find {} points with margin above {}", a.points, a.margin);
        }
        let Some(x) = opf.random_feasible_point(&mut rng) else {
            rejected += 1;
            continue;
        };
        let z = opf.dae_point(&x);
        let Ok((sm, modal)) = analyze_point(&opf.model, &z, &opf.modal_options) else {
            rejected += 1;
            continue;
        };
        if modal.margin <= a.margin {
            rejected += 1;
            continue;
        }
        let closed = spectral_abscissa_gradient(&opf.model, &z, &sm, &modal);
        let idx: Vec<usize> = (0..z.len()).collect();
        let fd = finite_difference_gradient(&opf.model, &z, &idx, a.step, &opf.modal_options)?;
        let grad_norm = closed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_abs_error = closed.iter().zip(&fd).fold(0.0f64, |m, (c, f)| m.max((c - f).abs()));
        points.push(PointCheck {
            eta: modal.eta,
            margin: modal.margin,
            grad_norm,
            max_abs_error,
            max_rel_error: max_abs_error / grad_norm.max(f64::MIN_POSITIVE),
        });
    }
    let max_rel_error = points.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    let report = SensitivityReport {
        case: a.case.case.clone(),
        seed: a.seed,
        step: a.step,
        points,
        rejected,
        max_rel_error,
        pass: max_rel_error <= a.tol,
        elapsed_s: started.elapsed().as_secs_f64(),
    };
    write_json(&a.case.out, "sensitivity_report.json", &report)?;
    println!(
        "{} points, max relative error {:.3e} ({}), {:.1} s",
        report.points.len(),
        max_rel_error,
        if report.pass { "pass" } else { "fail" },
        report.elapsed_s
    );
    Ok(report.pass)
}
