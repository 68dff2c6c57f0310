//! `cloudnet`: run provider and broker daemons, drive CloudNets through a
//! broker, and run the canned scenarios.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;

use cloudnet_core::clock::{Clock, SystemClock};
use cloudnet_core::codec::{read_graph_file, serialize_graph};
use cloudnet_core::config::{load_pipd, load_vnpd};
use cloudnet_core::pip::PipService;
use cloudnet_core::scenario;
use cloudnet_core::solver::{ObjectiveMode, ObjectiveSpec};
use cloudnet_core::vnp::{plans_from_envelope, VnpService};
use cloudnet_core::wire::{call, CallError, Envelope, Handler, Server};

const EXIT_SCENARIO: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;
const EXIT_PIPELINE: u8 = 4;

#[derive(Parser)]
#[command(name = "cloudnet", version, about = "CloudNet provider and broker tooling")]
struct Cli {
    /// Daemon config file (TOML). Client commands read the broker's listen
    /// address from it when --vnp is not given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Also write the machine-readable reply to this file.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Per-call timeout in milliseconds.
    #[arg(long, global = true, default_value_t = 10_000)]
    timeout: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a provider daemon.
    Pipd(Daemon),
    /// Run a broker daemon.
    Vnpd(Daemon),
    /// Submit a CloudNet request graph.
    Submit {
        graph: PathBuf,
        #[command(flatten)]
        vnp: VnpAddr,
    },
    /// Show a CloudNet's state, placement and console tokens.
    Status {
        id: String,
        #[command(flatten)]
        vnp: VnpAddr,
    },
    /// Delete a CloudNet at every provider.
    Delete {
        id: String,
        #[command(flatten)]
        vnp: VnpAddr,
    },
    /// Ask providers for a re-embedding plan.
    MigrateAnalyze {
        id: String,
        #[command(flatten)]
        vnp: VnpAddr,
        #[arg(long, default_value = "compact")]
        objective: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Apply the plan instead of only reporting it.
        #[arg(long)]
        apply: bool,
    },
    /// Run a canned scenario on loopback.
    Scenario {
        /// One of star13, rollback, expiry, compaction20, or "all".
        name: String,
    },
}

#[derive(Args)]
struct Daemon {
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Args)]
struct VnpAddr {
    /// Broker address (host:port).
    #[arg(long)]
    vnp: Option<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

impl From<CallError> for Failure {
    fn from(e: CallError) -> Self {
        let code = if e.is_transport() { EXIT_TRANSPORT } else { EXIT_PIPELINE };
        Failure::new(code, e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    let timeout = Duration::from_millis(cli.timeout);
    match &cli.cmd {
        Cmd::Pipd(d) => pipd(cli, d),
        Cmd::Vnpd(d) => vnpd(cli, d, timeout),
        Cmd::Submit { graph, vnp } => submit(cli, graph, &broker(cli, vnp)?, timeout),
        Cmd::Status { id, vnp } => status(cli, id, &broker(cli, vnp)?, timeout),
        Cmd::Delete { id, vnp } => {
            let env = Envelope::new().field("id", id);
            let reply = rpc(&broker(cli, vnp)?, "cloudnet_delete", env, timeout)?;
            println!("{id} deleted");
            write_output(cli, &reply)
        }
        Cmd::MigrateAnalyze {
            id,
            vnp,
            objective,
            alpha,
            beta,
            apply,
        } => {
            let mode: ObjectiveMode = objective.parse().map_err(|e| Failure::new(EXIT_PARSE, e))?;
            let mut spec = match mode {
                ObjectiveMode::MinCongestion => ObjectiveSpec::min_congestion(),
                ObjectiveMode::Compact => ObjectiveSpec::compact(),
                ObjectiveMode::MigrationAware => ObjectiveSpec::migration_aware(1.0, 1.0),
            };
            spec.alpha = alpha.unwrap_or(spec.alpha);
            spec.beta = beta.unwrap_or(spec.beta);
            migrate(cli, id, &broker(cli, vnp)?, spec, *apply, timeout)
        }
        Cmd::Scenario { name } => run_scenarios(name),
    }
}

fn broker(cli: &Cli, vnp: &VnpAddr) -> Result<String, Failure> {
    if let Some(a) = &vnp.vnp {
        return Ok(a.clone());
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::new(EXIT_PARSE, "no broker address: pass --vnp or --config"))?;
    let loaded = load_vnpd(path).map_err(|e| Failure::new(EXIT_PARSE, e))?;
    loaded
        .listen
        .ok_or_else(|| Failure::new(EXIT_PARSE, format!("{} names no listen address", path.display())))
}

fn rpc(addr: &str, method: &str, req: Envelope, timeout: Duration) -> Result<Envelope, Failure> {
    let body = call(addr, method, req.encode(), timeout)?;
    Envelope::decode(&body).map_err(|e| Failure::new(EXIT_TRANSPORT, format!("bad reply: {e}")))
}

fn write_output(cli: &Cli, reply: &Envelope) -> CmdResult {
    if let Some(path) = &cli.output {
        std::fs::write(path, reply.encode())
            .map_err(|e| Failure::new(EXIT_PARSE, format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn config_path(cli: &Cli) -> Result<&Path, Failure> {
    cli.config
        .as_deref()
        .ok_or_else(|| Failure::new(EXIT_PARSE, "daemons need --config"))
}

fn serve(listen: &str, handler: Arc<dyn Handler>) -> CmdResult {
    let server = Server::bind(listen, handler).map_err(|e| Failure::new(EXIT_TRANSPORT, format!("{listen}: {e}")))?;
    info!("listening on {}", server.local_addr());
    println!("listening on {}", server.local_addr());
    server.join();
    Ok(())
}

fn pipd(cli: &Cli, d: &Daemon) -> CmdResult {
    let loaded = load_pipd(config_path(cli)?).map_err(|e| Failure::new(EXIT_PARSE, e))?;
    let listen = d.listen.clone().or(loaded.listen).unwrap_or_else(|| "127.0.0.1:7000".into());
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let svc = match &loaded.journal {
        Some(dir) => PipService::with_journal(loaded.config, clock, dir),
        None => PipService::new(loaded.config, clock),
    }
    .map_err(|e| Failure::new(EXIT_PARSE, e))?;
    serve(&listen, Arc::new(svc))
}

fn vnpd(cli: &Cli, d: &Daemon, timeout: Duration) -> CmdResult {
    let mut loaded = load_vnpd(config_path(cli)?).map_err(|e| Failure::new(EXIT_PARSE, e))?;
    let listen = d.listen.clone().or(loaded.listen).unwrap_or_else(|| "127.0.0.1:7100".into());
    loaded.config.timeout = timeout;
    let mut svc = VnpService::new(loaded.config, Arc::new(SystemClock)).map_err(|e| Failure::new(EXIT_PARSE, e))?;
    if let Some(dir) = &loaded.journal {
        svc = svc.with_journal(dir).map_err(|e| Failure::new(EXIT_PARSE, e))?;
    }
    serve(&listen, Arc::new(svc))
}

fn print_placement(reply: &Envelope) {
    let mut per_pip: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, pip) in reply.prefixed("placement.") {
        *per_pip.entry(pip).or_insert(0) += 1;
    }
    let summary: Vec<String> = per_pip.iter().map(|(p, n)| format!("{p}={n}")).collect();
    println!("placement {}", summary.join(" "));
    for (vnode, token) in reply.prefixed("token.") {
        println!("token {vnode} {token}");
    }
}

fn submit(cli: &Cli, graph: &Path, addr: &str, timeout: Duration) -> CmdResult {
    let g = read_graph_file(graph).map_err(|e| Failure::new(EXIT_PARSE, e))?;
    let doc = serialize_graph(&g).map_err(|e| Failure::new(EXIT_PARSE, e))?;
    let reply = rpc(addr, "submit_cloudnet", Envelope::new().doc("request", doc), timeout)?;
    println!(
        "{} {}",
        reply.get("id").unwrap_or("?"),
        reply.get("state").unwrap_or("?")
    );
    print_placement(&reply);
    write_output(cli, &reply)
}

fn status(cli: &Cli, id: &str, addr: &str, timeout: Duration) -> CmdResult {
    let reply = rpc(addr, "cloudnet_status", Envelope::new().field("id", id), timeout)?;
    println!("{id} {}", reply.get("state").unwrap_or("?"));
    if let Some(f) = reply.get("failure") {
        println!("failure {f}");
    }
    for (pip, c) in reply.prefixed("contract.") {
        println!("contract {pip} {c}");
    }
    for (link, tag) in reply.prefixed("tag.") {
        println!("transit {link} vlan {tag}");
    }
    print_placement(&reply);
    write_output(cli, &reply)
}

fn migrate(cli: &Cli, id: &str, addr: &str, spec: ObjectiveSpec, apply: bool, timeout: Duration) -> CmdResult {
    let req = Envelope::new()
        .field("id", id)
        .field("mode", if apply { "apply" } else { "analyze" })
        .field("objective", spec.mode.as_str())
        .field("alpha", spec.alpha)
        .field("beta", spec.beta);
    let reply = rpc(addr, "migrate_analyze", req, timeout)?;
    let plans = plans_from_envelope(&reply).map_err(|e| Failure::new(EXIT_TRANSPORT, format!("bad reply: {e}")))?;
    for p in &plans {
        let freed: Vec<String> = p.freed.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!(
            "{} contract {} {}: moves {} remaps {} migration_cost {} hosts {} -> {} freed {}",
            p.pip,
            p.contract,
            if p.applied { "applied" } else { "analysis" },
            p.moves.len(),
            p.remaps,
            p.cost,
            p.hosts_before,
            p.hosts_after,
            if freed.is_empty() { "none".to_string() } else { freed.join(" ") }
        );
        for (v, from, to) in &p.moves {
            println!("  move {v} {from} -> {to}");
        }
    }
    write_output(cli, &reply)
}

fn run_scenarios(name: &str) -> CmdResult {
    let names: Vec<&str> = if name == "all" {
        scenario::SCENARIOS.to_vec()
    } else {
        vec![name]
    };
    for n in names {
        let report = scenario::run(n).map_err(|e| Failure::new(EXIT_SCENARIO, format!("{n}: {e}")))?;
        for c in &report.checks {
            let detail = if c.detail.is_empty() {
                String::new()
            } else {
                format!(" ({})", c.detail)
            };
            println!("{n}: {} {}{detail}", if c.ok { "PASS" } else { "FAIL" }, c.what);
        }
        if let Some(c) = report.first_failure() {
            return Err(Failure::new(EXIT_SCENARIO, format!("{n}: {} failed: {}", c.what, c.detail)));
        }
    }
    Ok(())
}
