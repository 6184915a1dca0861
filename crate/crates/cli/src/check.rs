use clap::{Args, ValueEnum};
use fdgan_core::gradcheck::{run_suite, Fault};

use crate::{CmdResult, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InjectedFault {
    AddinBackward,
}

#[derive(Debug, Args)]
pub struct CheckGradsArgs {
    /// Probe seeds for the layer checks; the worst error is reported.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Test fixture: replace a backward pass with a wrong one.
    #[arg(long, hide = true)]
    pub inject_fault: Option<InjectedFault>,
}

pub fn run(args: CheckGradsArgs) -> CmdResult {
    let fault = match args.inject_fault {
        Some(InjectedFault::AddinBackward) => Fault::AddInBackward,
        None => Fault::None,
    };
    let report = run_suite(&args.seeds, fault)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    } else {
        println!("{:<34} {:>14} {:>10}  result", "check", "max rel error", "tolerance");
        for e in &report.entries {
            println!("{:<34} {:>14.3e} {:>10.0e}  {}", e.name, e.max_relative_error, e.tolerance, if e.passed { "PASS" } else { "FAIL" });
        }
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}
