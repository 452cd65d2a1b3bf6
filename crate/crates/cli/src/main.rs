use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graftsim::contract::validate_tree;
use graftsim::description::ContractDescription;
use graftsim::harness::{bo3_demo, compare, load_scenario, Mode, ScenarioError};
use graftsim::trace::{Outcome, Trace};
use graftsim::{run, Report};

const OK: u8 = 0;
const INVALID: u8 = 1;
const IO: u8 = 2;
const STUCK: u8 = 3;

#[derive(Parser)]
#[command(name = "graftsim", about = "Simulate tree contracts on-chain or through off-chain grafts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a contract description.
    Validate { file: PathBuf },
    /// Run a scenario and print its report.
    Run {
        scenario: PathBuf,
        /// Write the trace (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an off-chain scenario against its on-chain baseline.
    Compare { offchain: PathBuf, onchain: PathBuf },
    /// Run the bundled best-of-three bet in both modes.
    Demo,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { file } => validate(&file),
        Command::Run { scenario, trace, report, seed } => run_scenario(&scenario, trace.as_deref(), report.as_deref(), seed),
        Command::Compare { offchain, onchain } => compare_scenarios(&offchain, &onchain),
        Command::Demo => demo(),
    };
    ExitCode::from(code)
}

fn fail(e: &ScenarioError) -> u8 {
    eprintln!("error: {e}");
    match e {
        ScenarioError::Io { .. } | ScenarioError::Parse { .. } => IO,
        _ => INVALID,
    }
}

fn write(path: &Path, text: &str) -> Result<(), u8> {
    std::fs::write(path, text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        IO
    })
}

fn validate(file: &Path) -> u8 {
    let text = match std::fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return IO;
        }
    };
    let desc = match ContractDescription::parse(&text) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return IO;
        }
    };
    let tree = match desc.build(0) {
        Ok((tree, _)) => tree,
        Err(e) => {
            eprintln!("{}: {e}", file.display());
            return INVALID;
        }
    };
    let errors = validate_tree(&tree);
    if errors.is_empty() {
        println!("{}: ok ({} nodes, {} leaves)", file.display(), tree.nodes.len(), tree.leaves().len());
        OK
    } else {
        for e in &errors {
            println!("{}: {e}", file.display());
        }
        INVALID
    }
}

fn exit_for(outcome: &Outcome) -> u8 {
    match outcome {
        Outcome::HeightCapExceeded => STUCK,
        _ => OK,
    }
}

fn report_json(r: &Report) -> String {
    serde_json::to_string_pretty(r).expect("report serializes") + "\n"
}

fn run_scenario(path: &Path, trace_out: Option<&Path>, report_out: Option<&Path>, seed: Option<u64>) -> u8 {
    let scenario = match load_scenario(path, seed) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let trace = match run(&scenario) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    let report = Report::from_trace(&scenario, &trace);
    if let Some(p) = trace_out {
        if let Err(code) = write(p, &trace.to_jsonl()) {
            return code;
        }
    }
    match report_out {
        Some(p) => {
            if let Err(code) = write(p, &report_json(&report)) {
                return code;
            }
        }
        None => print!("{}", report_json(&report)),
    }
    exit_for(&report.outcome)
}

fn compare_scenarios(off: &Path, on: &Path) -> u8 {
    let (off, on) = match (load_scenario(off, None), load_scenario(on, None)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return fail(&e),
    };
    match compare(&off, &on) {
        Ok(r) => {
            print!("{}", report_json(&r));
            exit_for(&r.outcome)
        }
        Err(e) => fail(&e),
    }
}

fn column(trace: &Trace) -> Vec<String> {
    trace.appends().filter(|(_, tx, _)| !tx.is_deposit()).map(|(e, tx, _)| format!("{:>3}  {}", e.height, tx.name)).collect()
}

fn demo() -> u8 {
    let off = bo3_demo(Mode::Offchain, 1);
    let on = bo3_demo(Mode::Onchain, 1);
    let (Ok(toff), Ok(ton)) = (run(&off), run(&on)) else {
        eprintln!("error: bundled demo failed to run");
        return INVALID;
    };
    let (roff, ron) = (Report::from_trace(&off, &toff), Report::from_trace(&on, &ton));
    println!("best-of-three bet, oracle reveals L1@1 W2@3 L3@5, t = 1, fee = {}", roff.fee);
    println!();
    println!("{:<24}{}", "off-chain", "on-chain");
    let (a, b) = (column(&toff), column(&ton));
    for i in 0..a.len().max(b.len()) {
        println!("{:<24}{}", a.get(i).map(String::as_str).unwrap_or(""), b.get(i).map(String::as_str).unwrap_or(""));
    }
    println!();
    let row = |label: &str, x: String, y: String| println!("{label:<18}{x:>6}{y:>10}");
    println!("{:<18}{:>6}{:>10}", "", "off", "on");
    row("transactions", roff.onchain_tx_count.to_string(), ron.onchain_tx_count.to_string());
    row("fees paid", roff.fees_paid.to_string(), ron.fees_paid.to_string());
    row("completed at", fmt_opt(roff.completion_height), fmt_opt(ron.completion_height));
    row("signatures sent", roff.message_count.to_string(), ron.message_count.to_string());
    for (p, v) in &roff.payouts {
        row(&format!("payout {p}"), v.to_string(), ron.payouts.get(p).copied().unwrap_or(0).to_string());
    }
    OK
}

fn fmt_opt(h: Option<u64>) -> String {
    h.map(|h| h.to_string()).unwrap_or_else(|| "-".into())
}
