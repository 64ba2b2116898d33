//! Operator entry point: generate topologies, run cooperative probing
//! experiments, compute the exhaustive baseline, decode message logs, and
//! render reports.

mod artifacts;
mod decode;
mod errors;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use doubletree::topo::{generate, GeneratorParams};

use crate::errors::{emit, Fail, Problems, EXIT_OK, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "doubletree", version, about = "Cooperative topology discovery testbed")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a simulated topology and write it as a text file
    Generate {
        /// Interior routers
        #[arg(long, default_value_t = 40)]
        routers: u32,
        /// Monitor count
        #[arg(long, default_value_t = 5)]
        monitors: u32,
        /// Destination count
        #[arg(long, default_value_t = 50)]
        destinations: u32,
        /// Extra interior links beyond the spanning tree
        #[arg(long, default_value_t = 8)]
        extra_links: u32,
        /// Fraction of interior routers that never answer
        #[arg(long, default_value_t = 0.0)]
        non_responder_fraction: f64,
        /// Fastest hop RTT, microseconds
        #[arg(long, default_value_t = 5_000)]
        rtt_min_us: u32,
        /// Slowest hop RTT, microseconds
        #[arg(long, default_value_t = 50_000)]
        rtt_max_us: u32,
        /// Generator seed; the same seed reproduces the file exactly
        #[arg(long)]
        seed: u64,
        /// Output topology file
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment described by a spec file
    Run {
        spec: PathBuf,
        /// Output directory (overrides the spec's `output`)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Force the deterministic round-robin scheduler
        #[arg(long)]
        sequential: bool,
    },
    /// Probe every destination exhaustively and write the baseline
    Oracle {
        spec: PathBuf,
        /// Output directory (overrides the spec's `output`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute and print the report for a run directory
    Report { run_dir: PathBuf },
    /// Pretty-print a message log (`<sender> <hex>` lines)
    Decode { file: PathBuf },
}

fn fail_lines(fails: &[Fail]) -> i32 {
    for f in fails {
        eprintln!("{f}");
    }
    fails.iter().map(|f| f.exit).max().unwrap_or(EXIT_VALIDATION)
}

fn cmd_generate(params: GeneratorParams, seed: u64, out: &PathBuf) -> Result<i32, Vec<Fail>> {
    let mut problems = Problems::default();
    if params.routers == 0 {
        problems.push("E117", "routers must be nonzero");
    }
    if params.monitors == 0 {
        problems.push("E117", "monitors must be nonzero");
    }
    if params.destinations == 0 {
        problems.push("E117", "destinations must be nonzero");
    }
    if !(0.0..=1.0).contains(&params.non_responder_fraction) || params.non_responder_fraction.is_nan() {
        problems.push("E117", format!("non_responder_fraction is {}; it must lie in [0, 1]", params.non_responder_fraction));
    }
    if params.rtt_range_us.0 > params.rtt_range_us.1 {
        problems.push("E117", format!("rtt range {}..{} is inverted", params.rtt_range_us.0, params.rtt_range_us.1));
    }
    problems.into_result()?;
    let topo = generate(&params, seed).map_err(|e| vec![Fail::invalid("E117", e.to_string())])?;
    std::fs::write(out, topo.render())
        .map_err(|e| vec![Fail::io(format!("cannot write {}: {e}", out.display()))])?;
    emit(format_args!(
        "wrote {} ({} monitors, {} destinations, seed {seed})\n",
        out.display(),
        params.monitors,
        params.destinations
    ))
    .map_err(|e| vec![e])?;
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli) -> Result<i32, Vec<Fail>> {
    match cli.cmd {
        Cmd::Generate {
            routers,
            monitors,
            destinations,
            extra_links,
            non_responder_fraction,
            rtt_min_us,
            rtt_max_us,
            seed,
            out,
        } => {
            let params = GeneratorParams {
                routers,
                monitors,
                destinations,
                extra_links,
                non_responder_fraction,
                rtt_range_us: (rtt_min_us, rtt_max_us),
            };
            cmd_generate(params, seed, &out)
        }
        Cmd::Run { spec: spec_path, out, sequential } => {
            let file = spec::load_spec(&spec_path).map_err(|e| vec![e])?;
            let spec_text = std::fs::read_to_string(&spec_path)
                .map_err(|e| vec![Fail::io(format!("cannot read spec {}: {e}", spec_path.display()))])?;
            let spec_dir = spec_path.parent().unwrap_or_else(|| std::path::Path::new("."));
            let resolved = spec::resolve(&file, spec_dir)?;
            let out_dir = artifacts::pick_out_dir(out, resolved.output.clone(), &spec_path);
            artifacts::cmd_run(&resolved, &spec_text, &out_dir, sequential).map_err(|e| vec![e])
        }
        Cmd::Oracle { spec: spec_path, out } => {
            let file = spec::load_spec(&spec_path).map_err(|e| vec![e])?;
            let spec_dir = spec_path.parent().unwrap_or_else(|| std::path::Path::new("."));
            let resolved = spec::resolve(&file, spec_dir)?;
            let out_dir = artifacts::pick_out_dir(out, resolved.output.clone(), &spec_path);
            artifacts::cmd_oracle(&resolved, &out_dir).map_err(|e| vec![e])
        }
        Cmd::Report { run_dir } => {
            let report = artifacts::cmd_report(&run_dir).map_err(|e| vec![e])?;
            emit(&report).map_err(|e| vec![e])?;
            Ok(EXIT_OK)
        }
        Cmd::Decode { file } => {
            let dump = decode::cmd_decode(&file).map_err(|e| vec![e])?;
            emit(&dump).map_err(|e| vec![e])?;
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = emit(&e);
            return ExitCode::from(0);
        }
        Err(e) => {
            // First line only: the error contract is one line per problem.
            let first = e.to_string().lines().next().unwrap_or("bad arguments").to_string();
            eprintln!("error[E000]: {first}");
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    };
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(fails) => fail_lines(&fails),
    };
    ExitCode::from(code as u8)
}
