//! `ckptf`: run checkpointed workloads over the simulated fabric, or apply
//! the checkpoint fill-time law to system specs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ckptf_core::coordinator::Topology;
use ckptf_core::filltime::{self, parse_quantity, FillTimeLaw};
use ckptf_core::harness::{self, Injection, RunConfig, RunReport, Trigger, WorkloadKind, WorkloadSpec};
use ckptf_core::virt::ResolvePolicy;

#[derive(Parser)]
#[command(name = "ckptf", version, about = "Coordinated checkpoint-restart over a simulated fabric")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Launch a workload, optionally checkpoint, kill and restart it.
    Run(RunArgs),
    /// Predict ideal checkpoint times from storage and memory sizes.
    Filltime(FillArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Virtual,
    Wall,
}

#[derive(Clone, Copy, ValueEnum)]
enum Resolve {
    PerSend,
    Cached,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_parser = parse_kind)]
    workload: WorkloadKind,
    #[arg(long)]
    ranks: u32,
    #[arg(long)]
    nodes: u32,
    #[arg(long = "iters")]
    iterations: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Bytes per point-to-point message.
    #[arg(long, default_value_t = 64)]
    payload: usize,
    /// Route ranks through one sub-coordinator per node.
    #[arg(long)]
    tree: bool,
    /// Request a checkpoint when rank 0 reaches this iteration (repeatable).
    #[arg(long = "ckpt-at")]
    ckpt_at: Vec<u32>,
    /// Kill every rank after each checkpoint and restart from the images.
    #[arg(long)]
    kill_and_restart: bool,
    #[arg(long)]
    lazy_restart: bool,
    #[arg(long, value_enum, default_value_t = Clock::Virtual)]
    clock: Clock,
    #[arg(long, value_enum, default_value_t = Resolve::Cached)]
    resolve: Resolve,
    /// Image directory; a temporary one is used when omitted.
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    /// Append the JSON report line to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["spec", "table1"]))]
struct FillArgs {
    /// `key=value` spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// The built-in reference machines.
    #[arg(long)]
    table1: bool,
    /// Emit one JSON object per row instead of a table.
    #[arg(long)]
    json: bool,
    /// Also print the time to dump this many bytes (e.g. `3GB`) per spec.
    #[arg(long, value_parser = |s: &str| parse_quantity(s, false))]
    dump: Option<f64>,
}

fn parse_kind(s: &str) -> Result<WorkloadKind, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(&args),
        Command::Filltime(args) => fill(&args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn config(args: &RunArgs, dir: &Path, injections: Vec<Injection>) -> RunConfig {
    let mut spec = WorkloadSpec::new(args.workload, args.ranks, args.nodes, args.iterations, args.seed);
    spec.payload_bytes = args.payload;
    let mut c = RunConfig::new(spec, dir);
    if matches!(args.clock, Clock::Wall) {
        c = c.wall();
    }
    if args.tree {
        c.topology = Topology::Tree;
    }
    c.resolve = match args.resolve {
        Resolve::PerSend => ResolvePolicy::PerSend,
        Resolve::Cached => ResolvePolicy::GenerationCached,
    };
    c.lazy_restart = args.lazy_restart;
    c.injections = injections;
    c
}

fn run(args: &RunArgs) -> Result<bool, Box<dyn std::error::Error>> {
    let injections: Vec<Injection> = args
        .ckpt_at
        .iter()
        .map(|&i| Injection { trigger: Trigger::Iteration(i), kill_and_restart: args.kill_and_restart })
        .collect();
    let scratch = tempfile::tempdir()?;
    let dir = args.ckpt_dir.clone().unwrap_or_else(|| scratch.path().join("images"));
    let cfg = config(args, &dir, injections);
    cfg.validate()?;
    let outcome = harness::run(&cfg)?;
    let report = outcome.report;
    print!("{}", report.render());
    let mut ok = report.invariants_ok;

    if !cfg.injections.is_empty() {
        let reference = harness::run(&config(args, &scratch.path().join("reference"), Vec::new()))?;
        let matches = reference.report.final_checksum == report.final_checksum;
        println!(
            "reference checksum {} {}",
            reference.report.final_checksum,
            if matches { "matches" } else { "DIFFERS" }
        );
        ok &= matches;
    }
    if let Some(path) = &args.report {
        append_report(path, &report)?;
    }
    Ok(ok)
}

fn append_report(path: &Path, report: &RunReport) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", report.to_json_line())
}

fn fill(args: &FillArgs) -> Result<bool, Box<dyn std::error::Error>> {
    let (table, specs) = if args.table1 {
        let machines = filltime::table1();
        let specs = machines.iter().map(|m| m.spec.clone()).collect::<Vec<_>>();
        (filltime::render_reference_table(&machines), specs)
    } else {
        let path = args.spec.as_ref().expect("clap requires --spec or --table1");
        let specs = filltime::parse_spec_file(&fs::read_to_string(path)?)?;
        (filltime::render_table(&specs), specs)
    };
    if args.json {
        print!("{}", table.json_lines());
    } else {
        print!("{}", table.text);
    }
    if let Some(bytes) = args.dump {
        let law = FillTimeLaw::default();
        for spec in &specs {
            match filltime::partial_dump_time(spec, bytes) {
                Ok(min) => println!(
                    "{}: dump {} bytes in {:.2} min ({:.1} s), ideal full dump {}",
                    spec.name,
                    bytes,
                    min,
                    min * 60.0,
                    law.predict(spec).map_or("??".into(), |p| format!("{:.2} min", p.ideal_ckpt_time))
                ),
                Err(e) => println!("{}: {e}", spec.name),
            }
        }
    }
    Ok(table.rows.iter().all(|r| r.error.is_none()))
}
