//! `gridcurb` command line: pf / lindex / opf / study subcommands.
//!
//! Exit codes: 0 success, 1 solver non-convergence or infeasibility,
//! 2 input errors. Diagnostics go to standard error; results go to
//! standard output or `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::caseio::{self, Format, Report, ReportOptions, Units};
use crate::curtailopf::{self, OpfOptions};
use crate::lindex::{self, LcritMap};
use crate::netmodel::{parse_branch_pair, Network};
use crate::powerflow::{solve_power_flow, PowerFlowOptions};
use crate::study;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "gridcurb", version, about = "Power flow, stability indices and curtailment studies", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UnitsArg {
    Pu,
    Mw,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Case file to load.
    #[arg(long)]
    case: PathBuf,
    /// Write the result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
    /// Display unit for power columns.
    #[arg(long, value_enum, default_value = "pu")]
    units: UnitsArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short, default_value_t = false)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the AC power flow and print voltages and branch flows.
    Pf {
        #[command(flatten)]
        common: CommonArgs,
        /// Take this branch out of service first, e.g. 4-9.
        #[arg(long)]
        outage: Option<String>,
    },
    /// Evaluate the voltage-stability index at every load bus.
    Lindex {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        outage: Option<String>,
    },
    /// Minimize total load curtailment under stability margins.
    Opf {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        outage: Option<String>,
        /// Stability thresholds, e.g. 5=0.1,7=0.3,9=0.3,default=1.0.
        #[arg(long)]
        lcrit: Option<String>,
        /// Print the constraint activity table after the result.
        #[arg(long, default_value_t = false)]
        kkt: bool,
    },
    /// Run the scenarios of a study file.
    Study {
        #[command(flatten)]
        common: CommonArgs,
        /// Study definition file.
        #[arg(long)]
        spec: PathBuf,
    },
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own help/version through this path
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Pf { common, outage } => run_pf(&common, outage.as_deref()),
        Command::Lindex { common, outage } => run_lindex(&common, outage.as_deref()),
        Command::Opf { common, outage, lcrit, kkt } => {
            run_opf(&common, outage.as_deref(), lcrit.as_deref(), kkt)
        }
        Command::Study { common, spec } => run_study_cmd(&common, &spec),
    }
}

fn report_options(common: &CommonArgs, base_mva: f64) -> ReportOptions {
    ReportOptions {
        format: match common.format {
            FormatArg::Table => Format::Table,
            FormatArg::Csv => Format::Csv,
        },
        units: match common.units {
            UnitsArg::Pu => Units::PerUnit,
            UnitsArg::Mw => Units::Mw,
        },
        base_mva,
    }
}

fn load_case(path: &Path) -> Result<(Network, Option<study::StudySpec>), String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read case file {}: {e}", path.display()))?;
    caseio::parse_case(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn apply_outage_arg(net: Network, outage: Option<&str>) -> Result<Network, String> {
    match outage {
        None => Ok(net),
        Some(spec) => {
            let (a, b) = parse_branch_pair(spec).map_err(|e| e.to_string())?;
            net.apply_outage(a, b).map_err(|e| e.to_string())
        }
    }
}

fn write_out(common: &CommonArgs, text: &str) -> Result<(), String> {
    match &common.out {
        None => {
            print!("{text}");
            Ok(())
        }
        Some(path) => {
            fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
        }
    }
}

fn fail_input(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    EXIT_INPUT
}

fn fail_solver(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    EXIT_SOLVER
}

fn run_pf(common: &CommonArgs, outage: Option<&str>) -> i32 {
    let (net, _) = match load_case(&common.case) {
        Ok(v) => v,
        Err(e) => return fail_input(&e),
    };
    let net = match apply_outage_arg(net, outage) {
        Ok(n) => n,
        Err(e) => return fail_input(&e),
    };
    let sol = match solve_power_flow(&net, &PowerFlowOptions::default()) {
        Ok(s) => s,
        Err(e) => return fail_solver(&e.to_string()),
    };
    if common.verbose {
        eprintln!(
            "converged in {} iterations, mismatch {:.3e}, slack P {:.4} Q {:.4}",
            sol.iterations, sol.final_mismatch, sol.slack_p, sol.slack_q
        );
    }
    let text = caseio::emit_report(Report::PowerFlow(&sol), &report_options(common, net.base_mva));
    match write_out(common, &text) {
        Ok(()) => EXIT_OK,
        Err(e) => fail_input(&e),
    }
}

fn run_lindex(common: &CommonArgs, outage: Option<&str>) -> i32 {
    let (net, _) = match load_case(&common.case) {
        Ok(v) => v,
        Err(e) => return fail_input(&e),
    };
    let net = match apply_outage_arg(net, outage) {
        Ok(n) => n,
        Err(e) => return fail_input(&e),
    };
    let sol = match solve_power_flow(&net, &PowerFlowOptions::default()) {
        Ok(s) => s,
        Err(e) => return fail_solver(&e.to_string()),
    };
    let party = match crate::admittance::partition(&crate::admittance::build_ybus(&net), &net) {
        Ok(p) => p,
        Err(e) => return fail_input(&e.to_string()),
    };
    let report = match lindex::compute_l_index(&party, &sol) {
        Ok(r) => r,
        Err(e) => return fail_solver(&e.to_string()),
    };
    if common.verbose {
        eprintln!("max index {:.4}", report.max_l());
    }
    let text = caseio::emit_report(Report::Stability(&report), &report_options(common, net.base_mva));
    match write_out(common, &text) {
        Ok(()) => EXIT_OK,
        Err(e) => fail_input(&e),
    }
}

fn run_opf(common: &CommonArgs, outage: Option<&str>, lcrit: Option<&str>, kkt: bool) -> i32 {
    let (net, _) = match load_case(&common.case) {
        Ok(v) => v,
        Err(e) => return fail_input(&e),
    };
    let net = match apply_outage_arg(net, outage) {
        Ok(n) => n,
        Err(e) => return fail_input(&e),
    };
    let lcrit = match lcrit {
        Some(spec) => match LcritMap::parse(spec) {
            Ok(m) => m,
            Err(e) => return fail_input(&e),
        },
        None => LcritMap::default(),
    };
    let opts = OpfOptions { seed: common.seed, ..OpfOptions::default() };
    let result = match curtailopf::solve_curtailment(&net, &lcrit, &opts) {
        Ok(r) => r,
        Err(e) => return fail_solver(&e.to_string()),
    };
    if common.verbose {
        eprintln!(
            "curtailment {:.4} pu after {} iterations (start {}, feas {:.2e})",
            result.objective, result.iterations, result.multistart_index, result.feascond
        );
    }
    let mut text =
        caseio::emit_report(Report::Curtailment(&result), &report_options(common, net.base_mva));
    if kkt {
        text.push('\n');
        text.push_str(&curtailopf::kkt_report(&result));
    }
    match write_out(common, &text) {
        Ok(()) => EXIT_OK,
        Err(e) => fail_input(&e),
    }
}

fn threads_from_env() -> Option<usize> {
    std::env::var("GRIDCURB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
}

fn run_study_cmd(common: &CommonArgs, spec_path: &Path) -> i32 {
    let (net, _) = match load_case(&common.case) {
        Ok(v) => v,
        Err(e) => return fail_input(&e),
    };
    let spec_text = match fs::read_to_string(spec_path) {
        Ok(t) => t,
        Err(e) => return fail_input(&format!("cannot read study file {}: {e}", spec_path.display())),
    };
    let spec = match caseio::parse_case(&spec_text) {
        // a study file may be a full case document with a [study] section
        Ok((_, Some(spec))) => spec,
        Ok((_, None)) => return fail_input("study file has no [study] section"),
        Err(caseio::CaseError::Invalid(_)) | Err(caseio::CaseError::Parse { .. }) => {
            // or a bare [study] document without network sections
            match parse_bare_study(&spec_text) {
                Ok(s) => s,
                Err(e) => return fail_input(&e),
            }
        }
        Err(e) => return fail_input(&e.to_string()),
    };
    let result = study::run_study(&net, &spec, common.seed, threads_from_env());
    let failures: Vec<&study::SweepCell> = result
        .cells
        .iter()
        .filter(|c| matches!(c.outcome, study::CellOutcome::Failed(_)))
        .collect();
    if common.verbose || !failures.is_empty() {
        for c in &failures {
            if let study::CellOutcome::Failed(msg) = &c.outcome {
                eprintln!("scenario {}: {msg}", c.scenario);
            }
        }
    }
    let opts = report_options(common, net.base_mva);
    let text = caseio::emit_report(Report::Sweep(&result), &opts);
    let status = if failures.len() == result.cells.len() && !result.cells.is_empty() {
        EXIT_SOLVER
    } else {
        EXIT_OK
    };
    match &common.out {
        None => {
            print!("{text}");
            status
        }
        Some(path) => {
            let target = if path.extension().is_some() {
                path.clone()
            } else {
                if let Err(e) = fs::create_dir_all(path) {
                    return fail_input(&format!("cannot create {}: {e}", path.display()));
                }
                path.join(format!("{}.csv", result.study_name))
            };
            match fs::write(&target, &text) {
                Ok(()) => status,
                Err(e) => fail_input(&format!("cannot write {}: {e}", target.display())),
            }
        }
    }
}

/// Parse a document containing only a `[study]` section.
fn parse_bare_study(text: &str) -> Result<study::StudySpec, String> {
    let mut lines = Vec::new();
    let mut in_study = false;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            in_study = name.trim_end_matches(']').trim().eq_ignore_ascii_case("study");
            continue;
        }
        if in_study {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", no + 1))?;
            lines.push((no + 1, k.trim().to_string(), v.trim().to_string()));
        }
    }
    if lines.is_empty() {
        return Err("study file has no [study] section".to_string());
    }
    study::StudySpec::from_lines(&lines).map_err(|e| e.to_string())
}
