use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vhj_cli::compare::compare;
use vhj_cli::config::{ExperimentConfig, OracleKind, Overrides, Preset, Stage};
use vhj_cli::pipeline::{run, write_outputs, Report};

#[derive(Parser)]
#[command(name = "vhj", version, about = "BSDE solver for viscous Hamilton-Jacobi equations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured pipeline and write report.json and summary.csv.
    Run(RunArgs),
    /// Per-metric deltas between two reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write the comparison as JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Registry name (kpz, lq, power_utility, exp_utility) or `custom`.
    #[arg(long)]
    problem: Option<String>,
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    oracle: Option<OracleKind>,
    #[arg(long, value_enum, value_delimiter = ',')]
    stages: Option<Vec<Stage>>,
    /// Also write each simulated bundle as paths_<i>.bin.
    #[arg(long)]
    dump_paths: bool,
}

fn run_cmd(args: RunArgs) -> Result<i32> {
    let ov = Overrides {
        problem: args.problem,
        preset: args.preset,
        seed: args.seed,
        out: args.out,
        oracle: args.oracle,
        stages: args.stages,
        dump_paths: args.dump_paths,
    };
    let cfg = ExperimentConfig::load(args.config.as_deref(), &ov)?;
    let rep = run(cfg)?;
    write_outputs(&rep)?;
    for v in &rep.verdicts {
        println!("{} {}{}", if v.pass { "PASS" } else { "FAIL" }, v.name, if v.detail.is_empty() { String::new() } else { format!(": {}", v.detail) });
    }
    println!("report written to {}", rep.config.out.join("report.json").display());
    Ok(rep.exit_code)
}

fn read_report(p: &PathBuf) -> Result<Report> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // usage errors exit 1; 2 and 3 are verdicts
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.cmd {
        Cmd::Run(args) => run_cmd(args),
        Cmd::Compare { a, b, out } => (|| {
            let c = compare(&read_report(&a)?, &read_report(&b)?)?;
            let json = serde_json::to_string_pretty(&c)?;
            match out {
                Some(p) => std::fs::write(&p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
            Ok(0)
        })(),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
