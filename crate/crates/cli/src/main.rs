//! `relaymon` command line: live monitoring, capture replay, simulation,
//! meter comparison and reporting.
//!
//! Every flag can also be set through an environment variable named
//! `RELAYMON_<FLAG>`, e.g. `RELAYMON_TIMEOUT_MS=5000`. Exit status is 0 on
//! success, 1 for usage errors and 2 for runtime failures.

mod commands;

use std::fmt;
use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const ENV_PREFIX: &str = "RELAYMON_";

#[derive(Debug, Parser)]
#[command(name = "relaymon", version, about = "Per-app network performance monitor over a user-space relay")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Label stored with every sample, e.g. wifi or 4g.
    #[arg(long, global = true, env = "RELAYMON_NETWORK_TAG", default_value = "unlabeled")]
    pub network_tag: String,
    /// Outbound connect timeout in milliseconds.
    #[arg(long, global = true, env = "RELAYMON_TIMEOUT_MS", default_value_t = 3000, value_parser = clap::value_parser!(u64).range(1..))]
    pub timeout_ms: u64,
    /// JSONL event log: appended to by `run` and `simulate`, read by `report`.
    #[arg(long, global = true, env = "RELAYMON_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, global = true, env = "RELAYMON_FORMAT", value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Flow attribution: platform, none, or map:<file.json>.
    #[arg(long, global = true, env = "RELAYMON_RESOLVER", default_value = "platform")]
    pub resolver: ResolverSpec,
    /// Ignore packets with bad checksums when pairing handshakes.
    #[arg(long, global = true, env = "RELAYMON_STRICT_CHECKSUMS")]
    pub strict_checksums: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResolverSpec {
    Platform,
    None,
    Map(PathBuf),
}

impl FromStr for ResolverSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "platform" => Ok(ResolverSpec::Platform),
            "none" => Ok(ResolverSpec::None),
            _ => match s.strip_prefix("map:") {
                Some(p) if !p.is_empty() => Ok(ResolverSpec::Map(p.into())),
                _ => Err(format!("expected platform, none or map:<path>, got {s:?}")),
            },
        }
    }
}

impl fmt::Display for ResolverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResolverSpec::Platform => f.write_str("platform"),
            ResolverSpec::None => f.write_str("none"),
            ResolverSpec::Map(p) => write!(f, "map:{}", p.display()),
        }
    }
}

/// `a.b.c.d/len`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cidr {
    pub addr: Ipv4Addr,
    pub prefix: u8,
}

impl FromStr for Cidr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, p) = s.split_once('/').ok_or_else(|| format!("expected address/prefix, got {s:?}"))?;
        let addr = a.parse().map_err(|e| format!("{a:?}: {e}"))?;
        let prefix = p.parse().ok().filter(|p| *p <= 32).ok_or_else(|| format!("bad prefix length {p:?}"))?;
        Ok(Cidr { addr, prefix })
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix)
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Relay traffic arriving on a tunnel device and record RTTs until interrupted.
    Run(RunArgs),
    /// Pair SYN/SYN-ACK packets in a capture file.
    Replay(ReplayArgs),
    /// Run a scenario under the virtual clock and write its trace bundle.
    Simulate(SimulateArgs),
    /// Compare the direct meter with the coarse baseline over a scenario's endpoints.
    Compare(CompareArgs),
    /// Render per-app views or a CDF from an event log.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, env = "RELAYMON_TUNNEL", default_value = "relaymon0")]
    pub tunnel: String,
    /// Address and prefix assigned to the tunnel interface.
    #[arg(long, env = "RELAYMON_TUN_ADDR", default_value = "10.0.0.1/24")]
    pub tun_addr: Cidr,
    #[arg(long, env = "RELAYMON_MTU", default_value_t = 1500)]
    pub mtu: usize,
    /// Interface outbound sockets bind to, so relayed traffic bypasses the tunnel.
    #[arg(long, env = "RELAYMON_BIND_DEVICE")]
    pub bind_device: Option<String>,
    /// Seconds between all-app views; 0 prints only the final one.
    #[arg(long, env = "RELAYMON_REPORT_INTERVAL", default_value_t = 10)]
    pub report_interval: u64,
    #[arg(long, env = "RELAYMON_MAX_FLOWS", default_value_t = 4096)]
    pub max_flows: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Capture file (classic pcap).
    #[arg(env = "RELAYMON_CAPTURE")]
    pub capture: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, env = "RELAYMON_SCENARIO")]
    pub scenario: PathBuf,
    /// Write the trace bundle as JSONL here.
    #[arg(long, env = "RELAYMON_OUT")]
    pub out: Option<PathBuf>,
    /// Write the tunnel-side packets as a capture file here.
    #[arg(long, env = "RELAYMON_PCAP")]
    pub pcap: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long, env = "RELAYMON_SCENARIO")]
    pub scenario: PathBuf,
    #[arg(long, env = "RELAYMON_RUNS", default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: u64,
    /// Connection-manager work the baseline meter includes before connecting.
    #[arg(long, env = "RELAYMON_PRE_CONNECT_MS", default_value_t = 12)]
    pub pre_connect_ms: u64,
    /// Use local listeners and the real clock instead of the virtual clock.
    #[arg(long, env = "RELAYMON_LOOPBACK")]
    pub loopback: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Individual-app view for this app.
    #[arg(long, env = "RELAYMON_APP")]
    pub app: Option<String>,
    /// Export the RTT CDF instead of a view.
    #[arg(long, env = "RELAYMON_CDF")]
    pub cdf: bool,
    /// Restrict the CDF to one network tag.
    #[arg(long, env = "RELAYMON_TAG")]
    pub tag: Option<String>,
    /// Write the output here instead of stdout.
    #[arg(long, env = "RELAYMON_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl Cli {
    pub fn command_name(&self) -> &'static str {
        match self.command {
            Command::Run(_) => "run",
            Command::Replay(_) => "replay",
            Command::Simulate(_) => "simulate",
            Command::Compare(_) => "compare",
            Command::Report(_) => "report",
        }
    }

    /// Checks that need more than one flag; runs before anything is opened.
    pub fn validate(&self) -> Result<(), CliError> {
        let need_store = |what: &str| {
            if self.common.store.is_none() {
                return Err(CliError::Usage(format!("{what} needs --store (or {ENV_PREFIX}STORE)")));
            }
            Ok(())
        };
        match &self.command {
            Command::Run(a) => {
                need_store("run")?;
                if a.mtu < 576 || a.mtu > 65535 {
                    return Err(CliError::Usage(format!("--mtu {} outside 576..=65535", a.mtu)));
                }
            }
            Command::Report(a) => {
                need_store("report")?;
                if a.tag.is_some() && !a.cdf {
                    return Err(CliError::Usage("--tag only applies with --cdf".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Effective settings, defaults included, as one line.
    pub fn describe(&self) -> String {
        let c = &self.common;
        let store = c.store.as_ref().map_or_else(|| "-".into(), |p| p.display().to_string());
        let mut s = format!(
            "relaymon {}: network_tag={} timeout_ms={} store={} format={} resolver={} strict_checksums={}",
            self.command_name(),
            c.network_tag,
            c.timeout_ms,
            store,
            c.format.to_possible_value().expect("no skipped variants").get_name(),
            c.resolver,
            c.strict_checksums
        );
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "-".into(), |p| p.display().to_string());
        let extra = match &self.command {
            Command::Run(a) => format!(
                "tunnel={} tun_addr={} mtu={} bind_device={} report_interval={} max_flows={}",
                a.tunnel,
                a.tun_addr,
                a.mtu,
                a.bind_device.as_deref().unwrap_or("-"),
                a.report_interval,
                a.max_flows
            ),
            Command::Replay(a) => format!("capture={}", a.capture.display()),
            Command::Simulate(a) => format!("scenario={} out={} pcap={}", a.scenario.display(), opt(&a.out), opt(&a.pcap)),
            Command::Compare(a) => format!(
                "scenario={} runs={} pre_connect_ms={} loopback={}",
                a.scenario.display(),
                a.runs,
                a.pre_connect_ms,
                a.loopback
            ),
            Command::Report(a) => format!(
                "app={} cdf={} tag={} out={}",
                a.app.as_deref().unwrap_or("-"),
                a.cdf,
                a.tag.as_deref().unwrap_or("-"),
                opt(&a.out)
            ),
        };
        s.push(' ');
        s.push_str(&extra);
        s
    }
}

/// A closed stdout (`relaymon ... | head`) is not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = cli.validate().and_then(|()| {
        eprintln!("{}", cli.describe());
        commands::dispatch(&cli)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
