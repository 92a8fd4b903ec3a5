//! `roaguard`: batch front end over the library pipelines. Every command
//! writes CSV.
//!
//! Exit codes: 0 on success, 1 on bad input or invocation, 2 on internal
//! failure.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::inputs::InputError;

#[derive(Parser, Debug)]
#[command(name = "roaguard", version, about = "RPKI coverage and RPKI-aware guard selection for Tor")]
struct Cli {
    /// Worker threads for runs and dates (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// ROA and ROV coverage of relays and guards.
    Coverage(CoverageArgs),
    /// Monte-Carlo guard selection with discounted non-ROA weights.
    DiscountSim(DiscountSimArgs),
    /// Monte-Carlo guard selection with optimized matching weights.
    MatchingSim(MatchingSimArgs),
    /// Matched rate over a daily series, with and without client churn.
    ChurnSim(ChurnSimArgs),
    /// Solve for matching weights and write them per relay.
    OptimizeWeights(OptimizeArgs),
    /// Expected matched rate over a grid of load and reward parameters.
    Sweep(SweepArgs),
    /// Expected bandwidth utilization over a load x discount grid.
    UtilizationGrid(UtilizationArgs),
    /// Smallest discount keeping full utilization, per date and load.
    OptimalDiscount(OptimalDiscountArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct RpkiArgs {
    /// ROA export, `asn,prefix,max_length` rows.
    #[arg(long)]
    pub roa: Option<PathBuf>,
    /// Route table, `prefix,origin_asn` rows.
    #[arg(long)]
    pub routes: Option<PathBuf>,
    /// ROV enforcement list, `asn[,score]` rows. Repeatable.
    #[arg(long)]
    pub rov: Vec<PathBuf>,
    /// Source of the matching --rov file: rov-monitor, manrs-case1, rovista,
    /// hlavacek, manrs-case2 or custom. Repeatable.
    #[arg(long)]
    pub rov_source: Vec<String>,
    /// Minimum score for an AS to count as enforcing.
    #[arg(long)]
    pub rov_threshold: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GuardArgs {
    /// Consensus document; guards are resolved against --roa/--routes/--rov.
    #[arg(long, conflicts_with = "guards")]
    pub consensus: Option<PathBuf>,
    /// Pre-resolved guard table, `relay_id,category,bandwidth` rows.
    #[arg(long)]
    pub guards: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ClientArgs {
    /// Client category mix as `roa,rov,both,neither` fractions.
    #[arg(long, conflicts_with_all = ["country_users", "country_asns"])]
    pub client_mix: Option<String>,
    /// Tor users per country, `country,fraction` rows.
    #[arg(long, requires = "country_asns")]
    pub country_users: Option<PathBuf>,
    /// ASes per country, `country,asn` rows.
    #[arg(long, requires = "country_users")]
    pub country_asns: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct LpArgs {
    /// Load factor l.
    #[arg(long, default_value_t = 0.8)]
    pub load: f64,
    /// Cap on a relay's weight relative to its bandwidth share.
    #[arg(long, default_value_t = 5.0)]
    pub theta: f64,
    /// Unit reward for a ROA-only party.
    #[arg(long, default_value_t = 0.9)]
    pub d1: f64,
    /// Unit reward for a ROV-only party.
    #[arg(long, default_value_t = 0.7)]
    pub d2: f64,
    /// Matched-pair bonus B.
    #[arg(long, default_value_t = 1.5)]
    pub bonus: f64,
    /// How client categories enter the objective: weighted or literal.
    #[arg(long, default_value = "weighted")]
    pub objective_mode: String,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Clients per run.
    #[arg(long, default_value_t = 100_000)]
    pub clients: usize,
    /// Independent runs.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Master seed; a random one is chosen and printed when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reselection attempts before a saturated guard is accepted anyway.
    #[arg(long, default_value_t = roaguard::discount::DEFAULT_MAX_RETRIES)]
    pub max_retries: u32,
    /// Output CSV (default stdout).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Also write per-guard client counts of every run here.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CoverageArgs {
    #[arg(long, conflicts_with = "manifest")]
    pub consensus: Option<PathBuf>,
    /// Time series manifest with columns date,consensus,roa,routes. Paths
    /// are relative to the manifest; --rov lists apply to every date.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub rpki: RpkiArgs,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiscountSimArgs {
    #[command(flatten)]
    pub guards: GuardArgs,
    #[command(flatten)]
    pub rpki: RpkiArgs,
    #[command(flatten)]
    pub clients: ClientArgs,
    /// Discount factor d for non-ROA guards (1 is vanilla selection).
    #[arg(long, default_value_t = 0.5)]
    pub discount: f64,
    /// Load factor l.
    #[arg(long, default_value_t = 0.8)]
    pub load: f64,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct MatchingSimArgs {
    #[command(flatten)]
    pub guards: GuardArgs,
    #[command(flatten)]
    pub rpki: RpkiArgs,
    #[command(flatten)]
    pub clients: ClientArgs,
    #[command(flatten)]
    pub lp: LpArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct ChurnSimArgs {
    /// Daily series with columns date,guards,roa,rov,both,neither. `guards`
    /// is a guard table (.csv) or a consensus resolved with the RPKI flags.
    #[arg(long)]
    pub series: Option<PathBuf>,
    #[command(flatten)]
    pub rpki: RpkiArgs,
    #[command(flatten)]
    pub lp: LpArgs,
    /// Population size.
    #[arg(long, default_value_t = 100_000)]
    pub clients: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = roaguard::discount::DEFAULT_MAX_RETRIES)]
    pub max_retries: u32,
    /// Days before a client abandons its guard and reselects.
    #[arg(long, default_value_t = roaguard::clients::DEFAULT_GUARD_LIFETIME_DAYS)]
    pub guard_lifetime: u32,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub guards: GuardArgs,
    #[command(flatten)]
    pub rpki: RpkiArgs,
    #[command(flatten)]
    pub clients: ClientArgs,
    #[command(flatten)]
    pub lp: LpArgs,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Parameter grid with columns l,d1,d2,B.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[command(flatten)]
    pub guards: GuardArgs,
    #[command(flatten)]
    pub rpki: RpkiArgs,
    #[command(flatten)]
    pub clients: ClientArgs,
    #[arg(long, default_value_t = 5.0)]
    pub theta: f64,
    #[arg(long, default_value = "weighted")]
    pub objective_mode: String,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct UtilizationArgs {
    /// ROA-covered fraction of guard bandwidth. Repeatable; taken from the
    /// guards when omitted.
    #[arg(long, value_delimiter = ',')]
    pub coverage: Vec<f64>,
    #[command(flatten)]
    pub guards: GuardArgs,
    #[command(flatten)]
    pub rpki: RpkiArgs,
    /// Grid points for l over [0, 1].
    #[arg(long, default_value_t = 101)]
    pub load_steps: usize,
    /// Grid points for d over [0, 1].
    #[arg(long, default_value_t = 101)]
    pub discount_steps: usize,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OptimalDiscountArgs {
    /// Load factors to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9,1.0")]
    pub loads: Vec<f64>,
    /// ROA-covered fraction of guard bandwidth. Repeatable.
    #[arg(long, value_delimiter = ',')]
    pub coverage: Vec<f64>,
    /// Dated manifest with columns date,consensus,roa,routes.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub guards: GuardArgs,
    #[command(flatten)]
    pub rpki: RpkiArgs,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InputError>() || cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<roaguard::Error>() {
            return match e {
                roaguard::Error::Lp(_) => 2,
                _ => 1,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Coverage(a) => commands::coverage(a),
        Command::DiscountSim(a) => commands::discount_sim(a),
        Command::MatchingSim(a) => commands::matching_sim(a),
        Command::ChurnSim(a) => commands::churn_sim(a),
        Command::OptimizeWeights(a) => commands::optimize(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::UtilizationGrid(a) => commands::utilization_grid(a),
        Command::OptimalDiscount(a) => commands::optimal_discount(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
