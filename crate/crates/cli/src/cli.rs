//! Argument parsing and dispatch for the `mgvo`, `mgvo-node` and
//! `mgvo-central` commands.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use mgvo_core::analysis::AlgorithmId;
use mgvo_core::collab::{parse_region, Label};
use mgvo_core::net::{NodeInfo, TcpTransport, Transport};
use mgvo_core::node::{Client, ClientError};
use mgvo_core::query::ResultSet;
use mgvo_core::security::{issue_token, Role};

use crate::config::{load_central_config, load_node_config, ConfigError};
use crate::daemon::{start_central, start_node, wait_for_signal, DaemonError};
use crate::output::{canonical, record, table, Format};

#[derive(Debug, Parser)]
#[command(name = "mgvo", version, about = "Mammography grid client")]
pub struct Cli {
    /// Entry Grid-box address.
    #[arg(long, global = true, env = "MGVO_NODE", default_value = "127.0.0.1:7101")]
    pub node: String,
    #[arg(long, global = true, env = "MGVO_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Anonymize and store one MGIF file at the entry node.
    Ingest { file: PathBuf },
    /// Run a federated query.
    Query { ql: String },
    #[command(subcommand)]
    Job(JobCmd),
    #[command(subcommand)]
    Catalogue(CatalogueCmd),
    /// Retrieve an image blob by logical file name.
    Fetch {
        lfn: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Second-opinion workflow.
    #[command(subcommand)]
    So(SoCmd),
    #[command(subcommand)]
    Admin(AdminCmd),
}

#[derive(Debug, Subcommand)]
pub enum JobCmd {
    /// Apply an algorithm where the selected images live.
    Submit {
        #[arg(long)]
        algorithm: AlgorithmId,
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, String)>,
        #[arg(long = "where")]
        filter: String,
    },
    /// Status of a job at the entry node.
    Status { job_id: String },
}

#[derive(Debug, Subcommand)]
pub enum CatalogueCmd {
    Ls {
        #[arg(default_value = "/mgvo/")]
        prefix: String,
    },
    Whereis { guid: String },
    Lookup { lfn: String },
    Verify { guid: String },
    /// Copy a blob held at the entry node to another node.
    Replicate {
        guid: String,
        #[arg(long)]
        to: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum SoCmd {
    Request {
        #[arg(long)]
        image: String,
        #[arg(long)]
        site: String,
    },
    List,
    Show {
        #[arg(long)]
        case: String,
    },
    Annotate {
        #[arg(long)]
        case: String,
        #[arg(long)]
        label: Label,
        /// Polygon as `x,y;x,y;...`.
        #[arg(long)]
        region: String,
        #[arg(long, default_value = "")]
        note: String,
    },
    Report {
        #[arg(long)]
        case: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum AdminCmd {
    /// Admit a node to the VO.
    AddNode {
        #[arg(long)]
        central: String,
        #[arg(long)]
        node_id: String,
        #[arg(long)]
        site: String,
        #[arg(long)]
        address: String,
    },
    /// List VO members and their liveness.
    Nodes {
        #[arg(long)]
        central: String,
    },
    /// Sign a credential offline.
    IssueToken {
        #[arg(long)]
        subject: String,
        #[arg(long, value_delimiter = ',', required = true)]
        roles: Vec<Role>,
        /// Expiry, seconds since the epoch.
        #[arg(long)]
        expires: u64,
        #[arg(long, env = "MGVO_CENTRAL_SECRET", hide_env_values = true)]
        secret: String,
    },
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("`{s}` is not k=v"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Client(#[from] ClientError),
    #[error("{0}")]
    Other(String),
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn result_set(rs: &ResultSet, format: Format) -> String {
    match format {
        Format::Json => canonical(rs) + "\n",
        Format::Table => {
            let mut s = table(&rs.rows);
            s += &format!("({} rows{})\n", rs.row_count, if rs.partial { ", partial" } else { "" });
            for (node, status) in rs.per_node_status.iter().filter(|(_, s)| !s.is_ok()) {
                s += &format!("  {node}: {}\n", canonical(status));
            }
            s
        }
    }
}

fn render<T: serde::Serialize>(v: &T, format: Format) -> String {
    match format {
        Format::Json => canonical(v) + "\n",
        Format::Table => {
            let value = serde_json::to_value(v).expect("serializable");
            match value {
                Value::Array(rows) => table(&rows),
                other => record(&other),
            }
        }
    }
}

fn execute(cli: Cli, net: &dyn Transport) -> Result<String, CliError> {
    let f = cli.format;
    let token = || {
        cli.token
            .clone()
            .ok_or_else(|| CliError::Usage("a token is required (--token or MGVO_TOKEN)".into()))
    };
    let client = |t: String| Client::new(net, &cli.node, &t);
    Ok(match &cli.command {
        Command::Ingest { file } => {
            let bytes = std::fs::read(file).map_err(|e| CliError::Other(format!("{}: {e}", file.display())))?;
            render(&client(token()?).ingest(&bytes)?, f)
        }
        Command::Query { ql } => result_set(&client(token()?).query(ql)?, f),
        Command::Job(JobCmd::Submit {
            algorithm,
            params,
            filter,
        }) => {
            let params: BTreeMap<String, String> = params.iter().cloned().collect();
            result_set(&client(token()?).job_submit(*algorithm, &params, filter)?, f)
        }
        Command::Job(JobCmd::Status { job_id }) => render(&client(token()?).job_status(job_id)?, f),
        Command::Catalogue(cmd) => {
            let c = client(token()?);
            match cmd {
                CatalogueCmd::Ls { prefix } => render(&c.ls(prefix)?, f),
                CatalogueCmd::Whereis { guid } => render(&c.whereis(guid)?, f),
                CatalogueCmd::Lookup { lfn } => render(&c.lookup(lfn)?, f),
                CatalogueCmd::Verify { guid } => render(&c.verify(guid)?, f),
                CatalogueCmd::Replicate { guid, to } => render(&c.replicate(guid, to)?, f),
            }
        }
        Command::Fetch { lfn, out } => {
            let img = client(token()?).fetch(lfn)?;
            std::fs::write(out, &img.data).map_err(|e| CliError::Other(format!("{}: {e}", out.display())))?;
            render(
                &json!({
                    "lfn": img.lfn,
                    "guid": img.guid,
                    "checksum": img.checksum,
                    "bytes": img.data.len(),
                    "chunks": img.chunks,
                }),
                f,
            )
        }
        Command::So(cmd) => {
            let c = client(token()?);
            match cmd {
                SoCmd::Request { image, site } => render(&c.so_request(image, site)?, f),
                SoCmd::List => render(&c.so_list()?, f),
                SoCmd::Show { case } => render(&c.so_get(case)?, f),
                SoCmd::Annotate {
                    case,
                    label,
                    region,
                    note,
                } => {
                    let region = parse_region(region).map_err(|e| CliError::Usage(format!("--region: {e}")))?;
                    render(&c.annotate(case, *label, region, note)?, f)
                }
                SoCmd::Report { case } => render(&c.so_report(case)?, f),
            }
        }
        Command::Admin(AdminCmd::AddNode {
            central,
            node_id,
            site,
            address,
        }) => {
            let info = NodeInfo {
                node_id: node_id.clone(),
                site_id: site.clone(),
                address: address.clone(),
                algorithms: [AlgorithmId::Density, AlgorithmId::Cade]
                    .iter()
                    .map(|a| a.as_str().to_string())
                    .collect(),
            };
            render(&Client::new(net, central, &token()?).add_node(info)?.nodes, f)
        }
        Command::Admin(AdminCmd::Nodes { central }) => {
            render(&Client::new(net, central, &token()?).discover()?.nodes, f)
        }
        Command::Admin(AdminCmd::IssueToken {
            subject,
            roles,
            expires,
            secret,
        }) => {
            let roles: BTreeSet<Role> = roles.iter().copied().collect();
            let cred = issue_token(subject, &roles, *expires, secret.as_bytes(), now_secs())
                .map_err(|e| CliError::Other(e.to_string()))?;
            match f {
                Format::Json => canonical(&json!({"subject": subject, "token": cred.to_wire()})) + "\n",
                Format::Table => cred.to_wire() + "\n",
            }
        }
    })
}

/// Runs `mgvo` with `args` (program name first) over `net`; returns the exit
/// code: 0 success, 1 operational error, 2 usage error.
pub fn run(args: Vec<String>, net: &dyn Transport, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, net) {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

pub fn mgvo_main() -> i32 {
    let net = TcpTransport::new();
    run(std::env::args().collect(), &net, &mut std::io::stdout(), &mut std::io::stderr())
}

#[derive(Debug, Parser)]
struct DaemonCli {
    #[command(subcommand)]
    command: DaemonCmd,
}

#[derive(Debug, Subcommand)]
enum DaemonCmd {
    /// Run until SIGTERM or SIGINT.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Error)]
enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Daemon(#[from] DaemonError),
    #[error("signal handling: {0}")]
    Signal(#[from] std::io::Error),
}

fn daemon_main(name: &str, args: Vec<String>, body: impl FnOnce(PathBuf) -> Result<(), ServeError>) -> i32 {
    let cli = match DaemonCli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let DaemonCmd::Serve { config } = cli.command;
    match body(config) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{name}: {e}");
            1
        }
    }
}

pub fn node_main(args: Vec<String>) -> i32 {
    daemon_main("mgvo-node", args, |path| {
        let node = start_node(&load_node_config(&path)?)?;
        wait_for_signal()?;
        node.shutdown();
        Ok(())
    })
}

pub fn central_main(args: Vec<String>) -> i32 {
    daemon_main("mgvo-central", args, |path| {
        let central = start_central(&load_central_config(&path)?)?;
        wait_for_signal()?;
        central.shutdown();
        Ok(())
    })
}
