use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stratus_core::execution::JobState;
use stratus_core::governance::{Action, GovernanceConfig, ResourceRef};
use stratus_core::workflow::WorkflowTemplate;
use stratus_core::Money;
use stratus_gateway::cli::{parse_run_command, ParseError, TemplateRef, DEFAULT_WORKSPACE};
use stratus_gateway::client::{Client, ClientError};
use stratus_gateway::config::{addr_from_env, GatewayConfig, ADDR_ENV, DEFAULT_ADDR};
use stratus_gateway::http;
use stratus_gateway::service::{Gateway, JobView, StatusEvent, Submission};

const RUN_USAGE: &str = "usage: stratus run [--setup CMD] (RUN_COMMAND | --template NAME[:VERSION])
                  [--gpu N] [--ram GIB] [--vcpus N] [--cloud PROVIDER]
                  [--num-nodes K] [--instance-type TYPE] [--param NAME=VALUE]...
                  [--backend simulated|local] [--workspace ID] [--dry-run] [--wait]";

/// Exit codes, one per error class.
mod exit {
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const PERMISSION: u8 = 3;
    pub const BUDGET: u8 = 4;
    pub const INFEASIBLE: u8 = 5;
    pub const NOT_FOUND: u8 = 6;
    pub const INVALID: u8 = 7;
    pub const UNREACHABLE: u8 = 8;
    pub const CONFLICT: u8 = 9;
    pub const JOB_FAILED: u8 = 10;
    pub const JOB_CANCELLED: u8 = 11;
}

#[derive(Parser)]
#[command(
    name = "stratus",
    version,
    about = "Launch and track scientific workflows on simulated or local compute"
)]
struct Cli {
    /// Service configuration file.
    #[arg(long, global = true, env = "STRATUS_CONFIG")]
    config: Option<PathBuf>,
    /// Gateway address; without it commands run against an embedded gateway.
    #[arg(long, global = true, env = ADDR_ENV)]
    addr: Option<String>,
    /// Acting user.
    #[arg(long, global = true, env = "STRATUS_USER")]
    user: Option<String>,
    /// Print JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Submit a job (see `stratus run --help`).
    #[command(disable_help_flag = true)]
    Run {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
        args: Vec<String>,
    },
    /// Inspect and control jobs.
    #[command(subcommand)]
    Jobs(JobsCmd),
    /// Manage workflow templates.
    #[command(subcommand)]
    Templates(TemplatesCmd),
    /// Show the instance catalog.
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Show budgets.
    #[command(subcommand)]
    Budget(BudgetCmd),
    /// Edit the governance document (takes effect when the gateway restarts).
    #[command(subcommand)]
    Admin(AdminCmd),
    /// Run the HTTP gateway.
    Serve {
        /// Listen address; defaults to STRATUS_ADDR or 127.0.0.1:8470.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Subcommand)]
enum JobsCmd {
    List {
        #[arg(long)]
        workspace: Option<String>,
    },
    Status {
        id: String,
    },
    /// Stream status until the job finishes.
    Watch {
        id: String,
    },
    Cancel {
        id: String,
    },
    Logs {
        id: String,
    },
    /// Show the provenance record of a finished job.
    Record {
        id: String,
    },
}

#[derive(Subcommand)]
enum TemplatesCmd {
    List,
    Show {
        template: String,
    },
    /// Register a template from a TOML file as a new version.
    Register {
        file: PathBuf,
        #[arg(long, default_value = DEFAULT_WORKSPACE)]
        workspace: String,
    },
}

#[derive(Subcommand)]
enum CatalogCmd {
    Show,
}

#[derive(Subcommand)]
enum BudgetCmd {
    Show { id: Option<String> },
}

#[derive(Subcommand)]
enum AdminCmd {
    GroupCreate { group: String },
    AddMember { group: String, user: String },
    Grant(GrantArgs),
    SetAllocation { budget: String, usd: f64 },
}

#[derive(Args)]
struct GrantArgs {
    #[arg(long, default_value = DEFAULT_WORKSPACE)]
    workspace: String,
    #[arg(long)]
    group: String,
    /// `kind:id`, e.g. `workflow:pism-greenland` or `compute:*`.
    resource: String,
    /// read, run, write or admin.
    #[arg(required = true)]
    actions: Vec<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let code = match e.kind() {
            "permission_denied" | "unauthenticated" => exit::PERMISSION,
            "budget_exhausted" => exit::BUDGET,
            "no_feasible_instance" | "invalid_plan" => exit::INFEASIBLE,
            "not_found" => exit::NOT_FOUND,
            "invalid_request" => exit::INVALID,
            "conflict" | "immutable" => exit::CONFLICT,
            "transport" => exit::UNREACHABLE,
            _ => exit::INTERNAL,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<ParseError> for Failure {
    fn from(e: ParseError) -> Self {
        Failure::new(exit::USAGE, format!("{e}\n{RUN_USAGE}"))
    }
}

fn default_user() -> String {
    std::env::var("USER")
        .ok()
        .filter(|u| !u.is_empty())
        .unwrap_or_else(|| "local".into())
}

fn load_config(path: Option<&PathBuf>) -> Result<GatewayConfig, Failure> {
    match path {
        Some(p) => GatewayConfig::load(p).map_err(|e| Failure::new(exit::USAGE, e.to_string())),
        None => Ok(GatewayConfig::default()),
    }
}

/// A client for the configured gateway, or for one embedded in this process
/// and bound to an ephemeral local port.
struct Session {
    client: Client,
    _embedded: Option<(tokio::runtime::Runtime, tokio::sync::oneshot::Sender<()>)>,
}

fn session(cli: &Cli, user: &str) -> Result<Session, Failure> {
    if let Some(addr) = cli.addr.clone().or_else(addr_from_env) {
        return Ok(Session {
            client: Client::new(&addr, user),
            _embedded: None,
        });
    }
    let config = load_config(cli.config.as_ref())?;
    let rt =
        tokio::runtime::Runtime::new().map_err(|e| Failure::new(exit::INTERNAL, e.to_string()))?;
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let addr = rt.block_on(async {
        let gw = Gateway::from_config(&config, user)
            .map_err(|e| Failure::new(exit::INTERNAL, e.to_string()))?;
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .map_err(|e| Failure::new(exit::INTERNAL, e.to_string()))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Failure::new(exit::INTERNAL, e.to_string()))?;
        tokio::spawn(http::serve(gw, listener, async {
            let _ = stop_rx.await;
        }));
        Ok::<_, Failure>(addr)
    })?;
    Ok(Session {
        client: Client::new(&addr.to_string(), user),
        _embedded: Some((rt, stop_tx)),
    })
}

fn print_json<T: Serialize>(v: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("responses serialize")
    );
}

fn print_event(ev: &StatusEvent) {
    println!(
        "{}  {:<12} {}",
        ev.at.format("%H:%M:%S%.3f"),
        ev.state.to_string(),
        ev.log_lines.first().map_or("", String::as_str)
    );
    for line in ev.log_lines.iter().skip(1) {
        println!("{:26}{line}", "");
    }
}

fn summary_line(v: &JobView) -> String {
    let wall = v
        .wall_time_hours
        .map_or("-".to_string(), |h| format!("{h:.4} h"));
    let cost = v.cost.map_or("-".to_string(), |c: Money| c.to_string());
    let mut s = format!("{} {}: wall {wall}, cost {cost}", v.id, v.state);
    if let Some(r) = &v.record_id {
        s.push_str(&format!(", record {r}"));
    }
    if let Some(e) = &v.error {
        s.push_str(&format!(", error: {e}"));
    }
    s
}

fn final_code(v: &JobView) -> u8 {
    match v.state {
        JobState::Failed => exit::JOB_FAILED,
        JobState::Cancelled => exit::JOB_CANCELLED,
        _ => 0,
    }
}

fn cmd_run(cli: &Cli, args: &[String], user: &str) -> Result<u8, Failure> {
    if args.iter().any(|a| a == "--help" || a == "-h") {
        println!("{RUN_USAGE}");
        return Ok(0);
    }
    let argv: Vec<&str> = std::iter::once("run")
        .chain(args.iter().map(String::as_str))
        .collect();
    let req = parse_run_command(&argv)?;
    let embedded = cli.addr.is_none() && addr_from_env().is_none();
    let s = session(cli, user)?;
    match s.client.submit(&req)? {
        Submission::DryRun(report) => {
            if cli.json {
                print_json(&report);
            } else {
                println!("template   {}", report.template_version);
                if let Some(setup) = &report.commands.setup {
                    println!("setup      {setup}");
                }
                println!("run        {}", report.commands.run);
                println!(
                    "instance   {} x {} ({} {})",
                    report.plan.num_nodes,
                    report.plan.instance.name,
                    report.plan.instance.provider,
                    report.plan.instance.region
                );
                println!("why        {}", report.plan.rationale);
                if let Some(m) = &report.mpi {
                    println!(
                        "mpi        np={} grid={} slots={:?}",
                        m.np, m.grid, m.slots_per_node
                    );
                }
                println!(
                    "estimate   {:.4} h, {} (budget {})",
                    report.estimated_hours, report.estimate, report.budget
                );
            }
            Ok(0)
        }
        Submission::Queued { job_id, .. } => {
            if cli.json && !(req.wait || embedded) {
                print_json(&serde_json::json!({ "job_id": job_id }));
                return Ok(0);
            }
            println!("{job_id}");
            if !(req.wait || embedded) {
                return Ok(0);
            }
            let view = s.client.follow(&job_id.0, |ev| {
                if !cli.json {
                    print_event(ev)
                }
            })?;
            if cli.json {
                print_json(&view);
            } else {
                println!("{}", summary_line(&view));
            }
            Ok(final_code(&view))
        }
    }
}

fn cmd_jobs(cli: &Cli, cmd: &JobsCmd, user: &str) -> Result<u8, Failure> {
    let s = session(cli, user)?;
    let c = &s.client;
    match cmd {
        JobsCmd::List { workspace } => {
            let jobs = c.jobs(workspace.as_deref())?;
            if cli.json {
                print_json(&jobs);
            } else {
                for j in jobs {
                    println!(
                        "{}  {:<11} {:<28} {:>2} x {:<18} {:<9} {}",
                        j.id,
                        j.state.to_string(),
                        j.template_version.to_string(),
                        j.num_nodes,
                        j.instance,
                        j.backend.to_string(),
                        j.cost.map_or("-".into(), |m| m.to_string())
                    );
                }
            }
        }
        JobsCmd::Status { id } => {
            let v = c.job(id)?;
            if cli.json {
                print_json(&v);
            } else {
                for ev in &v.events {
                    print_event(ev);
                }
                println!("{}", summary_line(&v));
            }
        }
        JobsCmd::Watch { id } => {
            let v = c.follow(id, |ev| {
                if cli.json {
                    println!("{}", serde_json::to_string(ev).expect("events serialize"));
                } else {
                    print_event(ev);
                }
            })?;
            if !cli.json {
                println!("{}", summary_line(&v));
            }
            return Ok(final_code(&v));
        }
        JobsCmd::Cancel { id } => {
            let v = c.cancel(id)?;
            if cli.json {
                print_json(&v);
            } else {
                println!("{} {}", v.id, v.state);
            }
        }
        JobsCmd::Logs { id } => print!("{}", c.logs(id)?),
        JobsCmd::Record { id } => print_json(&c.record(id)?),
    }
    Ok(0)
}

fn cmd_templates(cli: &Cli, cmd: &TemplatesCmd, user: &str) -> Result<u8, Failure> {
    let s = session(cli, user)?;
    match cmd {
        TemplatesCmd::List => {
            let list = s.client.templates()?;
            if cli.json {
                print_json(&list);
            } else {
                for t in list {
                    println!("{t}");
                }
            }
        }
        TemplatesCmd::Show { template } => {
            let r: TemplateRef = template
                .parse()
                .map_err(|e: String| Failure::new(exit::USAGE, e))?;
            let t = s.client.template(&r.name, r.version)?;
            if cli.json {
                print_json(&t);
            } else {
                print!("{}", t.to_toml());
            }
        }
        TemplatesCmd::Register { file, workspace } => {
            let text = std::fs::read_to_string(file)
                .map_err(|e| Failure::new(exit::USAGE, format!("{}: {e}", file.display())))?;
            let t = WorkflowTemplate::from_toml(&text)
                .map_err(|e| Failure::new(exit::INVALID, e.to_string()))?;
            let v = s.client.register_template(&t, workspace)?;
            println!("{v}");
        }
    }
    Ok(0)
}

fn cmd_catalog(cli: &Cli, user: &str) -> Result<u8, Failure> {
    let s = session(cli, user)?;
    let cat = s.client.catalog()?;
    if cli.json {
        print_json(&cat);
        return Ok(0);
    }
    println!(
        "snapshot {} ({})",
        cat["snapshot_date"].as_str().unwrap_or("?"),
        cat["source_label"].as_str().unwrap_or("")
    );
    println!(
        "{:<7} {:<13} {:<22} {:>5} {:>8} {:>4} {:<10} {:>10}",
        "cloud", "region", "instance", "vcpu", "mem_gib", "gpu", "class", "usd/h"
    );
    for e in cat["entries"].as_array().into_iter().flatten() {
        println!(
            "{:<7} {:<13} {:<22} {:>5} {:>8} {:>4} {:<10} {:>10.4}",
            e["provider"].as_str().unwrap_or(""),
            e["region"].as_str().unwrap_or(""),
            e["name"].as_str().unwrap_or(""),
            e["vcpus"].to_string(),
            e["memory_gib"].to_string(),
            e["gpus"].to_string(),
            e["family_class"].as_str().unwrap_or(""),
            e["price_per_hour"].as_f64().unwrap_or(0.0)
        );
    }
    Ok(0)
}

fn cmd_budget(cli: &Cli, id: Option<&str>, user: &str) -> Result<u8, Failure> {
    let s = session(cli, user)?;
    let budgets = match id {
        Some(id) => vec![s.client.budget(id)?],
        None => s.client.budgets()?,
    };
    if cli.json {
        print_json(&budgets);
    } else {
        for b in budgets {
            println!(
                "{:<16} allocation {}  spent {}  reserved {}  headroom {}",
                b.id,
                b.allocation,
                b.spent,
                b.reserved,
                b.headroom()
            );
            for o in &b.overages {
                println!(
                    "  overage on {}: estimate {}, actual {}, uncharged {}",
                    o.reservation, o.estimate, o.actual, o.uncharged
                );
            }
        }
    }
    Ok(0)
}

fn cmd_admin(cli: &Cli, cmd: &AdminCmd, user: &str) -> Result<u8, Failure> {
    let config = load_config(cli.config.as_ref())?;
    let path = config.governance_file();
    let mut doc: GovernanceConfig = config
        .governance(user)
        .map_err(|e| Failure::new(exit::INVALID, e.to_string()))?;
    let invalid =
        |e: stratus_core::governance::GovernanceError| Failure::new(exit::INVALID, e.to_string());
    match cmd {
        AdminCmd::GroupCreate { group } => doc.create_group(group).map_err(invalid)?,
        AdminCmd::AddMember { group, user } => doc.add_member(group, user).map_err(invalid)?,
        AdminCmd::Grant(g) => {
            let resource: ResourceRef = g
                .resource
                .parse()
                .map_err(|e: String| Failure::new(exit::USAGE, e))?;
            let actions = g
                .actions
                .iter()
                .map(|a| {
                    a.parse::<Action>()
                        .map_err(|e: String| Failure::new(exit::USAGE, e))
                })
                .collect::<Result<Vec<_>, _>>()?;
            for action in actions {
                doc.grant(&g.workspace, resource.clone(), &g.group, action)
                    .map_err(invalid)?;
            }
        }
        AdminCmd::SetAllocation { budget, usd } => {
            if !usd.is_finite() || *usd < 0.0 {
                return Err(Failure::new(
                    exit::USAGE,
                    "allocation must be a non-negative amount",
                ));
            }
            doc.set_allocation(budget, Money::from_usd(*usd))
                .map_err(invalid)?
        }
    }
    std::fs::write(&path, doc.to_toml())
        .map_err(|e| Failure::new(exit::INTERNAL, e.to_string()))?;
    println!("updated {}", path.display());
    Ok(0)
}

fn cmd_serve(cli: &Cli, listen: Option<&str>, user: &str) -> Result<u8, Failure> {
    let config = load_config(cli.config.as_ref())?;
    let addr = listen
        .map(str::to_string)
        .or_else(|| cli.addr.clone())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string());
    let rt =
        tokio::runtime::Runtime::new().map_err(|e| Failure::new(exit::INTERNAL, e.to_string()))?;
    rt.block_on(async {
        let gw = Gateway::from_config(&config, user)
            .map_err(|e| Failure::new(exit::INTERNAL, e.to_string()))?;
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::new(exit::UNREACHABLE, format!("{addr}: {e}")))?;
        eprintln!(
            "stratus gateway listening on http://{}",
            listener
                .local_addr()
                .map_err(|e| Failure::new(exit::INTERNAL, e.to_string()))?
        );
        http::serve(gw, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Failure::new(exit::INTERNAL, e.to_string()))
    })?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let user = cli.user.clone().unwrap_or_else(default_user);
    let result = match &cli.command {
        Command::Run { args } => cmd_run(&cli, args, &user),
        Command::Jobs(cmd) => cmd_jobs(&cli, cmd, &user),
        Command::Templates(cmd) => cmd_templates(&cli, cmd, &user),
        Command::Catalog(CatalogCmd::Show) => cmd_catalog(&cli, &user),
        Command::Budget(BudgetCmd::Show { id }) => cmd_budget(&cli, id.as_deref(), &user),
        Command::Admin(cmd) => cmd_admin(&cli, cmd, &user),
        Command::Serve { listen } => cmd_serve(&cli, listen.as_deref(), &user),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("stratus: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
