use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use luckchain::ledger::{diagnose, Block, Chain, Linked, ValidationContext};
use luckchain::luckstats::persistence_table;
use luckchain::primitives::luck_measurement;
use luckchain::scenario::{Consensus, Scenario};
use luckchain::simnet::{run, SimOutcome};
use luckchain::superblock::SuperBlock;
use luckchain::tee::{RegistrySnapshot, VendorRegistry};

/// Proof-of-luck simulator and tools.
#[derive(Debug, Parser)]
#[command(name = "luckchain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its trace, summary and chain snapshots.
    Run(RunArgs),
    /// Estimate fork persistence by Monte Carlo with the Chernoff bound.
    Persistence(PersistenceArgs),
    /// Check a chain snapshot against a vendor key file.
    Verify(VerifyArgs),
    /// Print the effective configuration, defaults included.
    DumpConfig {
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory; overrides `outputs.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PersistenceArgs {
    /// Majority population M.
    #[arg(long = "majority", short = 'M')]
    majority: u32,
    /// Minority population m.
    #[arg(long = "minority", short = 'm')]
    minority: u32,
    /// Depths, as a list (1,5,10) or a range (1..30).
    #[arg(long, default_value = "1")]
    h: String,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    chain: PathBuf,
    /// Vendor key file; defaults to vendor_keys.json next to the chain.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Super-block size for super-block snapshots; defaults to the member
    /// count of the first block.
    #[arg(long)]
    m: Option<usize>,
}

/// Exit 1: a chain or run failed a check. Exit 2: bad input.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Input(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Input(_) => 2,
        }
    }
}

fn input(msg: impl std::fmt::Display) -> Failure {
    Failure::Input(msg.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Persistence(args) => cmd_persistence(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::DumpConfig { config } => load_scenario(&config).map(|s| out(&s.to_toml_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Write to stdout, tolerating a closed pipe.
fn out(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let mut scenario = Scenario::from_toml_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    scenario.apply_env().map_err(input)?;
    Ok(scenario)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Check(format!("writing {}: {e}", path.display())))
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let mut scenario = load_scenario(&args.config)?;
    scenario.outputs.events = true;
    let dir = args
        .out
        .clone()
        .or_else(|| scenario.outputs.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| Failure::Check(format!("creating {}: {e}", dir.display())))?;
    info!("running {} participants to height {} (seed {})", scenario.participants.count, scenario.horizon, scenario.seed);
    let outcome = run(&scenario).map_err(input)?;
    check_outcome(&scenario, &outcome)?;
    let trace = &outcome.trace;
    write(&dir.join("trace.jsonl"), trace.to_jsonl())?;
    if scenario.consensus.builds_chain() {
        write(&dir.join("summary.csv"), trace.summary_csv())?;
        for (i, node) in outcome.nodes.iter().enumerate() {
            write(&dir.join(format!("node-{i:02}.chain")), node.snapshot())?;
        }
    } else {
        write(&dir.join("summary.csv"), trace.primitive_csv())?;
    }
    let keys = serde_json::to_string_pretty(&outcome.registry.snapshot()).expect("registry serializes");
    write(&dir.join("vendor_keys.json"), keys)?;
    let report = serde_json::to_string_pretty(trace).expect("trace serializes");
    write(&dir.join("report.json"), report)?;
    out(&format!("trace digest {}\noutputs in {}\n", trace.digest, dir.display()));
    Ok(())
}

/// Honest participants must end with valid chains no longer than the horizon.
fn check_outcome(scenario: &Scenario, outcome: &SimOutcome) -> Result<(), Failure> {
    let validator_m = (scenario.consensus == Consensus::Superblock).then(|| scenario.m.unwrap_or(1));
    let ctx = ValidationContext {
        registry: &outcome.registry,
        measurement: luck_measurement(),
        superblock_size: validator_m,
    };
    for f in outcome.trace.finals.iter().filter(|f| f.honest) {
        let node = &outcome.nodes[f.node];
        let verdict = match (node.base_chain(), node.super_chain()) {
            (Some(c), _) => diagnose(c, &ctx),
            (_, Some(c)) => diagnose(c, &ctx),
            _ => Ok(()),
        };
        if let Err(fault) = verdict {
            return Err(Failure::Check(format!("participant {} holds an invalid chain: {fault}", f.node)));
        }
        if f.height > scenario.horizon {
            return Err(Failure::Check(format!("participant {} passed the horizon", f.node)));
        }
    }
    if scenario.consensus.builds_chain() && !outcome.trace.honest_converged() {
        warn!("honest participants ended on different tips");
    }
    Ok(())
}

fn parse_depths(spec: &str) -> Result<Vec<u32>, Failure> {
    let bad = || input(format!("cannot parse depths {spec:?}"));
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_persistence(args: &PersistenceArgs) -> Result<(), Failure> {
    let hs = parse_depths(&args.h)?;
    let rows = persistence_table(args.majority, args.minority, &hs, args.trials, args.seed, args.threads).map_err(input)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).expect("rows serialize");
    }
    let bytes = w.into_inner().expect("in-memory writer");
    match &args.out {
        Some(path) => write(path, bytes),
        None => {
            out(&String::from_utf8(bytes).expect("csv is utf-8"));
            Ok(())
        }
    }
}

fn load_registry(args: &VerifyArgs) -> Result<VendorRegistry, Failure> {
    let path = args.registry.clone().unwrap_or_else(|| {
        args.chain
            .parent()
            .unwrap_or(Path::new("."))
            .join("vendor_keys.json")
    });
    let text = fs::read_to_string(&path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let snapshot: RegistrySnapshot =
        serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    VendorRegistry::from_snapshot(&snapshot).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn report<B: Linked>(chain: &Chain<B>, ctx: &ValidationContext<'_>) -> Result<(), Failure> {
    match diagnose(chain, ctx) {
        Ok(()) => {
            out(&format!("valid: {} blocks, luck {}\n", chain.len(), chain.luck()));
            Ok(())
        }
        Err(fault) => Err(Failure::Check(format!("invalid: block {}: {}", fault.index, fault.kind))),
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let bytes = fs::read(&args.chain).map_err(|e| input(format!("{}: {e}", args.chain.display())))?;
    if bytes.is_empty() {
        out("valid: empty chain\n");
        return Ok(());
    }
    let registry = load_registry(args)?;
    let mut ctx = ValidationContext::new(&registry, luck_measurement());
    let corrupt = |e: &dyn std::fmt::Display| input(format!("{}: corrupt snapshot: {e}", args.chain.display()));
    if bytes.starts_with(&SuperBlock::SNAPSHOT_MAGIC) {
        let chain = Chain::<SuperBlock>::decode(&bytes).map_err(|e| corrupt(&e))?;
        ctx.superblock_size = Some(args.m.unwrap_or_else(|| chain.at_height(1).map_or(1, |b| b.members().len())));
        report(&chain, &ctx)
    } else {
        let chain = Chain::<Block>::decode(&bytes).map_err(|e| corrupt(&e))?;
        report(&chain, &ctx)
    }
}
