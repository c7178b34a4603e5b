//! `psdp`: solve, decide, generate and check positive SDP instances.
//!
//! Exit codes: 0 success, 1 verification failure, 2 parse or usage error,
//! 3 numerical failure.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psdp_core::decision::{
    decide_with_sink, covering_from_density, DecisionOutcome, NullSink, SolverParams, TraceSink,
};
use psdp_core::expdot::{ExpEngineConfig, ExpMode};
use psdp_core::io::{
    check_certificate, gen_instance, instance_hash, parse_certificate, parse_instance, read_trace,
    trace_gain_sequences, write_instance, CertificateFile, GenKind, JsonlTraceWriter,
};
use psdp_core::linalg::lambda_max;
use psdp_core::mmwu_check::MmwuReplay;
use psdp_core::normalize::{normalize_instance, scale_instance, NormalizedInstance, RawInstance};
use psdp_core::optimizer::{approx_psdp_with_sink, PACKING_TOL};
use psdp_core::PsdpError;

#[derive(Parser)]
#[command(name = "psdp", version, about = "Approximate solver for positive semidefinite programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Approximate the packing optimum and write a packing certificate.
    Solve {
        instance: PathBuf,
        #[command(flatten)]
        opts: SolveOpts,
    },
    /// Decide whether the packing optimum reaches GOAL.
    Decide {
        instance: PathBuf,
        #[arg(long)]
        goal: f64,
        #[command(flatten)]
        opts: SolveOpts,
    },
    /// Write a generated instance.
    Gen {
        #[arg(long)]
        kind: GenKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Verify a certificate against an instance.
    CheckCert {
        instance: PathBuf,
        certificate: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Replay the gain matrices of a trace through the MMWU regret bound.
    ReplayMmwu {
        trace: PathBuf,
        /// Defaults to the accuracy recorded in the trace.
        #[arg(long)]
        eps0: Option<f64>,
    },
}

#[derive(Args)]
struct SolveOpts {
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    #[arg(long, default_value = "exact")]
    exp_mode: ExpMode,
    /// Accuracy of the Taylor truncation and sketch; defaults to --eps.
    #[arg(long)]
    exp_eps: Option<f64>,
    #[arg(long)]
    jl_rows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    cert: Option<PathBuf>,
}

impl SolveOpts {
    fn exp_config(&self) -> ExpEngineConfig {
        let mut cfg = ExpEngineConfig::with_mode(self.exp_mode, self.exp_eps.unwrap_or(self.eps), self.seed);
        cfg.jl_rows = self.jl_rows;
        cfg
    }
}

enum Failure {
    Verification(String),
    Core(PsdpError),
}

impl From<PsdpError> for Failure {
    fn from(e: PsdpError) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(PsdpError::Io(e))
    }
}

fn exit_code(e: &PsdpError) -> u8 {
    match e {
        PsdpError::CertificateMismatch(_) | PsdpError::HypothesisViolated { .. } => 1,
        PsdpError::EigenFailure { .. }
        | PsdpError::NonFinite { .. }
        | PsdpError::MaxItersExceeded { .. }
        | PsdpError::KappaExceeded { .. }
        | PsdpError::EmptyBracket { .. } => 3,
        _ => 2,
    }
}

fn read_to_string(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| {
        Failure::Core(PsdpError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

fn load(path: &Path) -> Result<(RawInstance, NormalizedInstance), Failure> {
    let raw = parse_instance(&read_to_string(path)?)?;
    let norm = normalize_instance(&raw)?;
    Ok((raw, norm))
}

/// Runs `f` with a JSONL writer on `path`, or with a null sink.
fn with_trace<T>(
    path: Option<&Path>,
    f: impl FnOnce(&mut dyn TraceSink) -> Result<T, Failure>,
) -> Result<T, Failure> {
    match path {
        None => f(&mut NullSink),
        Some(p) => {
            let mut w = JsonlTraceWriter::new(BufWriter::new(File::create(p)?));
            let out = f(&mut w)?;
            w.finish()?;
            Ok(out)
        }
    }
}

fn write_cert(path: Option<&Path>, cert: &CertificateFile) -> Result<(), Failure> {
    if let Some(p) = path {
        fs::write(p, cert.to_json())?;
    }
    Ok(())
}

fn solve(instance: &Path, opts: &SolveOpts) -> Result<(), Failure> {
    let (raw, norm) = load(instance)?;
    let cfg = opts.exp_config();
    let result = with_trace(opts.trace.as_deref(), |sink| {
        Ok(approx_psdp_with_sink(&norm, opts.eps, &cfg, sink)?)
    })?;
    println!("objective: {}", result.best_objective);
    println!("upper_bound: {}", result.upper_bound);
    println!("probes: {}", result.probes);
    println!("iterations: {}", result.total_iterations);
    write_cert(
        opts.cert.as_deref(),
        &CertificateFile::packing(&raw, opts.eps, result.best_x),
    )
}

fn decide(instance: &Path, goal: f64, opts: &SolveOpts) -> Result<(), Failure> {
    let (raw, norm) = load(instance)?;
    let scaled = scale_instance(&norm, goal)?;
    let mut params = SolverParams::new(opts.eps, norm.dim())?;
    params.exp_cfg = opts.exp_config();
    let run = with_trace(opts.trace.as_deref(), |sink| {
        Ok(decide_with_sink(&scaled, &params, sink)?)
    })?;
    let cert = match run.outcome {
        DecisionOutcome::Feasible { x, .. } => {
            let lmax = lambda_max(&scaled.weighted_sum(&x)?)?;
            let mut x: Vec<f64> = x.iter().map(|v| goal * v / lmax).collect();
            let check = psdp_core::decision::verify_packing(&norm, &x, PACKING_TOL)?;
            if check.violation > 0.0 {
                x.iter_mut().for_each(|v| *v /= 1.0 + check.violation);
            }
            let cert = CertificateFile::packing(&raw, opts.eps, x);
            println!("FEASIBLE");
            println!("objective: {}", cert.objective);
            cert
        }
        DecisionOutcome::Infeasible { p } => {
            let y = covering_from_density(&norm, &p)?;
            let cert = CertificateFile::covering(&raw, opts.eps, &y);
            println!("INFEASIBLE");
            println!("upper_bound: {}", cert.objective);
            cert
        }
    };
    println!("iterations: {}", run.iterations);
    println!("phases: {}", run.phases);
    write_cert(opts.cert.as_deref(), &cert)
}

fn check_cert(instance: &Path, certificate: &Path, tol: f64) -> Result<(), Failure> {
    let (raw, norm) = load(instance)?;
    let cert = parse_certificate(&read_to_string(certificate)?)?;
    let check = check_certificate(&raw, &norm, &cert, tol)?;
    println!("kind: {}", check.kind);
    println!("objective: {}", check.objective);
    println!("margin: {}", check.margin);
    match check.reason {
        None => {
            println!("OK");
            Ok(())
        }
        Some(r) => Err(Failure::Verification(r)),
    }
}

fn replay(trace: &Path, eps0: Option<f64>) -> Result<(), Failure> {
    let lines = read_trace(&read_to_string(trace)?)?;
    let runs = trace_gain_sequences(&lines)?;
    if runs.is_empty() {
        return Err(PsdpError::InvalidParameter("trace has no iterations".into()).into());
    }
    let recorded_eps = lines.first().map_or(0.1, |l| l.eps);
    let mut failed = 0;
    for (i, (n, gains)) in runs.iter().enumerate() {
        let mut r = MmwuReplay::new(*n, eps0.unwrap_or(recorded_eps))?;
        for g in gains {
            r.observe(g)?;
        }
        let rep = r.finish()?;
        println!(
            "run {i}: steps {} lhs {} rhs {} slack {} {}",
            rep.steps,
            rep.lhs,
            rep.rhs,
            rep.slack,
            if rep.holds { "holds" } else { "VIOLATED" }
        );
        if !rep.holds {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} run(s) violate the regret bound")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve { instance, opts } => solve(&instance, &opts),
        Command::Decide { instance, goal, opts } => decide(&instance, goal, &opts),
        Command::Gen {
            kind,
            n,
            m,
            seed,
            output,
        } => {
            let raw = gen_instance(kind, n, m, seed)?;
            fs::write(&output, write_instance(&raw))?;
            println!("hash: {}", instance_hash(&raw));
            Ok(())
        }
        Command::CheckCert {
            instance,
            certificate,
            tol,
        } => check_cert(&instance, &certificate, tol),
        Command::ReplayMmwu { trace, eps0 } => replay(&trace, eps0),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&PsdpError::CertificateMismatch("x".into())), 1);
        assert_eq!(exit_code(&PsdpError::MaxItersExceeded { limit: 1 }), 3);
        assert_eq!(exit_code(&PsdpError::KappaExceeded { estimate: 2.0, bound: 1.0 }), 3);
        assert_eq!(exit_code(&PsdpError::EmptyBracket { lo: 2.0, hi: 1.0 }), 3);
        assert_eq!(exit_code(&PsdpError::InvalidParameter("x".into())), 2);
    }
}
