use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use abacus_core::budget::{compute_budget, BudgetSpec, ComputedBudget};
use abacus_core::gate::{DeploymentPlan, Verdict};
use abacus_core::ingest::read_feed;
use abacus_core::service::{Abacus, Clock, Config, ScenarioConfig, SimClock, SystemClock};
use anyhow::Context;
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::api::{parse_period, AppState, BreachQuery, ChargebackReport};
use crate::server::{ctrl_c, serve, Monitor};

#[derive(Debug, Parser)]
#[command(
    name = "abacus",
    version,
    about = "Cloud budget computation, monitoring, and enforcement"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Service config file (TOML).
    #[arg(long, env = "ABACUS_CONFIG", global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's data_dir.
    #[arg(long, env = "ABACUS_DATA_DIR", global = true)]
    pub data_dir: Option<PathBuf>,
    /// Runs in simulated time starting at this RFC 3339 instant.
    #[arg(long, env = "ABACUS_SIM_TIME", global = true)]
    pub sim_time: Option<DateTime<Utc>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API with a background monitor.
    Serve(ServeArgs),
    /// Compute a budget from a spec file (JSON, or TOML by extension).
    ComputeBudget {
        spec: PathBuf,
        /// Print the full result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Ingest a tab-separated billing feed.
    Ingest { feed: PathBuf },
    /// Run (or resume) a deterministic scenario from a TOML file.
    Simulate { scenario: PathBuf },
    /// Check a deployment plan. Exit status 0 allow, 1 deny, 2 input error.
    CheckPlan { plan: PathBuf },
    /// Breach audit records.
    Breaches {
        #[command(subcommand)]
        command: BreachesCommand,
    },
    /// Reports.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "ABACUS_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "ABACUS_BIND", default_value = "127.0.0.1")]
    pub bind: String,
    /// Bearer token; overrides the config's token.
    #[arg(long, env = "ABACUS_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Wall-clock milliseconds between monitor passes. Defaults to the
    /// config's monitor interval, or one second in simulated time.
    #[arg(long)]
    pub tick_ms: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum BreachesCommand {
    List {
        #[arg(long)]
        account: Option<String>,
        /// Period label such as 2024-01 or 2024-Q1.
        #[arg(long)]
        period: Option<String>,
        #[arg(long)]
        action: Option<String>,
        #[arg(long)]
        offset: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    Chargeback {
        #[arg(long)]
        period: String,
    },
}

impl Global {
    pub fn load_config(&self) -> anyhow::Result<Config> {
        let mut config = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::new("abacus-data"),
        };
        if let Some(dir) = &self.data_dir {
            config.data_dir = dir.clone();
        }
        Ok(config)
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.sim_time.unwrap_or_else(Utc::now)
    }

    fn open(&self) -> anyhow::Result<Abacus> {
        let config = self.load_config()?;
        let dir = config.data_dir.display().to_string();
        Abacus::open(config).with_context(|| format!("opening data directory {dir}"))
    }
}

/// Prints `value` as JSON. A closed stdout (as when piped into `head`) is
/// not an error.
fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    let written = serde_json::to_writer_pretty(&mut out, value)
        .map_err(std::io::Error::from)
        .and_then(|()| writeln!(out));
    match written {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn read_spec(path: &Path) -> anyhow::Result<BudgetSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text)?
    } else {
        serde_json::from_str(&text)?
    };
    Ok(spec)
}

pub fn format_budget(b: &ComputedBudget) -> String {
    let mut out = format!(
        "target          {}\nperiod          {}\nadjusted spend  {}\nv used          {}\nCRB             {}\n",
        b.spec.target_id,
        b.spec.period.label(),
        b.adjusted_spend.to_grouped_string(),
        b.v_used,
        b.crb.to_grouped_string(),
    );
    for w in &b.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

fn read_plan(path: &Path) -> anyhow::Result<DeploymentPlan> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_plan(global: &Global, path: &Path) -> anyhow::Result<ExitCode> {
    let plan = read_plan(path)?;
    let mut engine = global.open()?;
    let decision = engine.check_plan(&plan, global.now())?;
    print_json(&decision)?;
    Ok(match decision.verdict {
        Verdict::Allow => ExitCode::SUCCESS,
        Verdict::Deny => ExitCode::from(1),
    })
}

async fn serve_command(global: &Global, args: &ServeArgs) -> anyhow::Result<()> {
    let mut config = global.load_config()?;
    if let Some(token) = &args.token {
        config.token = Some(token.clone()).filter(|t| !t.is_empty());
    }
    let interval = Duration::from_secs(config.monitor_interval_secs.max(1));
    let (clock, monitor): (Arc<dyn Clock>, Monitor) = match global.sim_time {
        Some(start) => {
            let sim = Arc::new(SimClock::new(start));
            let step = chrono::Duration::from_std(interval)?;
            let tick = Duration::from_millis(args.tick_ms.unwrap_or(1000));
            (
                sim.clone(),
                Monitor {
                    tick,
                    sim: Some((sim, step)),
                },
            )
        }
        None => {
            let tick = args.tick_ms.map_or(interval, Duration::from_millis);
            (Arc::new(SystemClock), Monitor { tick, sim: None })
        }
    };
    if config.token.is_none() {
        tracing::warn!("no bearer token configured; the API is unauthenticated");
    }
    let engine = tokio::task::spawn_blocking(move || Abacus::open(config)).await??;
    let listener = tokio::net::TcpListener::bind((args.bind.as_str(), args.port)).await?;
    serve(AppState::new(engine, clock), listener, monitor, ctrl_c()).await?;
    Ok(())
}

fn run_inner(cli: &Cli) -> anyhow::Result<ExitCode> {
    let global = &cli.global;
    let done: anyhow::Result<()> = match &cli.command {
        Command::Serve(args) => {
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve_command(global, args))
        }
        Command::ComputeBudget { spec, json } => {
            let budget = compute_budget(&read_spec(spec)?, global.now())?;
            if *json {
                print_json(&budget)
            } else {
                let mut out = std::io::stdout().lock();
                match out.write_all(format_budget(&budget).as_bytes()) {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                    _ => Ok(()),
                }
            }
        }
        Command::Ingest { feed } => {
            let file = File::open(feed).with_context(|| format!("opening {}", feed.display()))?;
            let mut engine = global.open()?;
            let report = engine.ingest(read_feed(BufReader::new(file)))?;
            print_json(&report)
        }
        Command::Simulate { scenario } => {
            let text = std::fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let scenario = ScenarioConfig::from_toml(&text)?;
            let mut engine = global.open()?;
            let summary = engine.simulate(&scenario)?;
            print_json(&summary)
        }
        Command::CheckPlan { plan } => return check_plan(global, plan),
        Command::Breaches {
            command:
                BreachesCommand::List {
                    account,
                    period,
                    action,
                    offset,
                    limit,
                },
        } => {
            let query = BreachQuery {
                account: account.clone(),
                period: period.clone(),
                action: action.clone(),
                offset: *offset,
                limit: *limit,
            };
            let filter = query.filter()?;
            let (offset, limit) = query.page();
            let engine = global.open()?;
            print_json(&engine.query_breaches(&filter, offset, limit))
        }
        Command::Report {
            command: ReportCommand::Chargeback { period },
        } => {
            let period = parse_period(period)?;
            let engine = global.open()?;
            print_json(&ChargebackReport::build(&engine, &period)?)
        }
    };
    done.map(|()| ExitCode::SUCCESS)
}

/// Runs one command and maps the outcome to a process exit status. A
/// failed plan check exits 2 so CI can tell it from a denial.
pub fn run(cli: Cli) -> ExitCode {
    match run_inner(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            match cli.command {
                Command::CheckPlan { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
