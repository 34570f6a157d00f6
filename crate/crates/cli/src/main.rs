//! `fademac`: outage probabilities and outage-aware multicast allocation.
//!
//! Exit codes: 0 success, 1 input error, 2 non-convergence.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fademac::allocation::{solve_centralized, AllocationProblem, KktResiduals, Tolerances};
use fademac::curve::{compute_curve, write_curve_csv, CurveRequest, SweepVariable};
use fademac::distributed::{self, RunStatus, StepSizes, StopCriterion};
use fademac::io::{load_network, LinkRate, RatesFile};
use fademac::monte_carlo::McConfig;
use fademac::network::{network_outage, NetworkOutage, NetworkSpec, OutageMethod};
use fademac::Error;

const DEFAULT_SEED: u64 = 0x0fad_e3ac;

#[derive(Parser)]
#[command(name = "fademac", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-node and network outage of a rate assignment.
    Outage {
        network: PathBuf,
        /// JSON `{"rates": [{"tail", "head", "rate"}]}`; `solve` output works too.
        rates: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Upper)]
        method: MethodArg,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long, env = "FADEMAC_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Minimize the outage-bound objective at the file's multicast rate.
    Solve {
        network: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Centralized)]
        mode: Mode,
        /// Per-round trace CSV (distributed mode).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        max_rounds: u64,
        /// Seed for the random step sizes (distributed mode).
        #[arg(long, env = "FADEMAC_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        primal_step: f64,
        #[arg(long, default_value_t = 0.01)]
        dual_step: f64,
    },
    /// Sweep the multicast rate or SNR, re-solving at each point.
    Curve {
        network: PathBuf,
        #[arg(long, value_enum)]
        sweep: SweepArg,
        #[arg(long, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long)]
        step: f64,
        /// Any of lower, upper, mc.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "lower,upper,mc")]
        methods: Vec<CurveMethod>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, env = "FADEMAC_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Exact,
    Lower,
    Upper,
    Weak,
    Mc,
    LowerDistinct,
}

impl From<MethodArg> for OutageMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Exact => OutageMethod::Exact,
            MethodArg::Lower => OutageMethod::Lower,
            MethodArg::Upper => OutageMethod::Upper,
            MethodArg::Weak => OutageMethod::Weak,
            MethodArg::Mc => OutageMethod::MonteCarlo,
            MethodArg::LowerDistinct => OutageMethod::LowerDistinct,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Centralized,
    Distributed,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    MulticastRate,
    /// dB
    Snr,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CurveMethod {
    Lower,
    Upper,
    Mc,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::NotConverged(_)) => 2,
            _ => 1,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Outage { network, rates, method, trials, seed, json } => {
            cmd_outage(&network, &rates, method.into(), McConfig::new(trials, seed), json)
        }
        Command::Solve { network, mode, out, max_rounds, seed, primal_step, dual_step } => {
            cmd_solve(&network, mode, out.as_deref(), max_rounds, seed, primal_step, dual_step)
        }
        Command::Curve { network, sweep, lo, hi, step, methods, trials, seed, out } => {
            let sweep = match sweep {
                SweepArg::MulticastRate => SweepVariable::MulticastRate,
                SweepArg::Snr => SweepVariable::Snr,
            };
            cmd_curve(&network, sweep, lo, hi, step, &methods, McConfig::new(trials, seed), out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn read_network(path: &Path) -> Result<NetworkSpec, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(load_network(&text).with_context(|| format!("loading {}", path.display()))?)
}

fn cmd_outage(
    network: &Path,
    rates: &Path,
    method: OutageMethod,
    mc: McConfig,
    json: bool,
) -> Result<(), Failure> {
    let net = read_network(network)?;
    let text = fs::read_to_string(rates).with_context(|| format!("reading {}", rates.display()))?;
    let r = RatesFile::from_json(&text)
        .and_then(|f| f.to_vector(&net))
        .with_context(|| format!("loading {}", rates.display()))?;
    let report = network_outage(&net, &r, method, &mc)?;
    let mut out = io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut out, &report).context("writing JSON")?;
        writeln!(out).context("writing output")?;
    } else {
        print_outage(&mut out, &report).context("writing output")?;
    }
    Ok(())
}

fn print_outage(out: &mut impl Write, report: &NetworkOutage) -> io::Result<()> {
    let fmt = |e: &fademac::mac::OutageEstimate| match e.half_width {
        Some(h) => format!(
            "{:.6} +/- {:.6} [{}]{}",
            e.value,
            h,
            e.method,
            if e.low_confidence { " (low confidence)" } else { "" }
        ),
        None => format!("{:.6} [{}]", e.value, e.method),
    };
    for node in &report.per_node {
        writeln!(out, "node {} ({} links): {}", node.node, node.links, fmt(&node.outage))?;
    }
    writeln!(out, "network: {}", fmt(&report.total))
}

#[derive(Serialize)]
struct FlowEntry {
    destination: u32,
    tail: u32,
    head: u32,
    flow: f64,
}

#[derive(Serialize)]
struct SolveOutput {
    mode: &'static str,
    converged: bool,
    objective: f64,
    rates: Vec<LinkRate>,
    flows: Vec<FlowEntry>,
    residuals: KktResiduals,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<RunStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rounds: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    messages: Option<u64>,
}

fn cmd_solve(
    network: &Path,
    mode: Mode,
    out: Option<&Path>,
    max_rounds: u64,
    seed: u64,
    primal: f64,
    dual: f64,
) -> Result<(), Failure> {
    let net = read_network(network)?;
    let prob = AllocationProblem::new(net.clone());
    let (state, output) = match mode {
        Mode::Centralized => {
            let sol = solve_centralized(&prob, &Tolerances::default())?;
            let output = SolveOutput {
                mode: "centralized",
                converged: sol.report.converged,
                objective: sol.report.objective,
                rates: Vec::new(),
                flows: Vec::new(),
                residuals: sol.report.residuals,
                status: None,
                rounds: None,
                messages: None,
            };
            (sol.state, output)
        }
        Mode::Distributed => {
            let steps = StepSizes::random(&prob, seed, primal, dual)?;
            let stop = StopCriterion { max_rounds, ..StopCriterion::default() };
            let rep = distributed::run(&prob, &steps, &stop)?;
            if let Some(path) = out {
                let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                distributed::write_trace_csv(&rep.trace, io::BufWriter::new(file))?;
            }
            let output = SolveOutput {
                mode: "distributed",
                converged: rep.status == RunStatus::Converged,
                objective: rep.objective,
                rates: Vec::new(),
                flows: Vec::new(),
                residuals: fademac::allocation::kkt_residuals(&prob, &rep.state),
                status: Some(rep.status),
                rounds: Some(rep.rounds),
                messages: Some(rep.messages),
            };
            (rep.state, output)
        }
    };
    let flows = net
        .destinations()
        .iter()
        .enumerate()
        .flat_map(|(d, &dest)| {
            net.links().iter().zip(&state.f[d]).map(move |(l, &flow)| FlowEntry {
                destination: dest,
                tail: l.tail,
                head: l.head,
                flow,
            })
        })
        .collect();
    // negative rounding residue would make the report unusable as a rates file
    let rates: Vec<f64> = state.r.iter().map(|r| r.max(0.0)).collect();
    let output = SolveOutput {
        rates: RatesFile::from_vector(&net, &rates).rates,
        flows,
        ..output
    };
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &output).context("writing JSON")?;
    writeln!(stdout).context("writing output")?;
    if output.converged {
        Ok(())
    } else {
        Err(Error::NotConverged(format!("{} solve did not meet its stopping criterion", output.mode)).into())
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_curve(
    network: &Path,
    sweep: SweepVariable,
    lo: f64,
    hi: f64,
    step: f64,
    methods: &[CurveMethod],
    mc: McConfig,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let net = read_network(network)?;
    let mut req = CurveRequest::new(sweep, lo, hi, step, mc)?;
    req.lower = methods.contains(&CurveMethod::Lower);
    req.upper = methods.contains(&CurveMethod::Upper);
    req.monte_carlo = methods.contains(&CurveMethod::Mc);
    let rows = compute_curve(&net, &req)?;
    match out {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_curve_csv(&rows, io::BufWriter::new(file))?;
        }
        None => write_curve_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}
