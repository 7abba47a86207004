//! `chap`: run chaos experiments against the simulated mesh, locally or
//! through a running server.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | runtime error |
//! | 2 | invalid input or configuration |
//! | 3 | rejected by safety checks |
//! | 4 | conflict or unknown experiment |
//! | 5 | an experiment finished without passing |

mod backend;
mod output;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use chap_core::api::{PlatformService, RecordStore, ServiceOptions};
use chap_core::config::PlatformConfig;
use chap_core::fit::{ExperimentId, FaultRule, InjectionKind, InjectionPoint};
use chap_core::orchestrator::ExperimentDefinition;
use chap_core::safety::{FixedClock, SystemClock, WallClock};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};

use backend::Backend;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_SAFETY: u8 = 3;
pub const EXIT_CONFLICT: u8 = 4;
pub const EXIT_NOT_PASSED: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(EXIT_INVALID, message)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "chap",
    version,
    about = "Chaos experiments on a simulated microservice mesh"
)]
struct Cli {
    /// Platform configuration (TOML).
    #[arg(long, short, global = true, env = "CHAP_CONFIG")]
    config: Option<PathBuf>,
    /// Directory holding experiment records.
    #[arg(long, global = true, env = "CHAP_STORE")]
    store: Option<PathBuf>,
    /// Overrides the configured simulation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pins the wall clock to an RFC 3339 instant instead of the system time.
    #[arg(long, global = true, value_name = "RFC3339")]
    at: Option<String>,
    /// Talk to a running `chap serve` at this base URL instead of simulating
    /// in-process.
    #[arg(long, global = true, env = "CHAP_SERVER")]
    server: Option<String>,
    /// Print JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Virtual seconds per wall-clock second; 0 pauses the clock.
        #[arg(long, default_value_t = 1.0)]
        accel: f64,
        /// Virtual seconds simulated before accepting requests.
        #[arg(long, default_value_t = 0)]
        warmup: u64,
    },
    /// Create an experiment, optionally starting it.
    Create {
        #[command(flatten)]
        def: DefinitionArgs,
        #[arg(long)]
        start: bool,
    },
    /// Run an experiment to the end and report its verdict.
    Run {
        /// A previously created experiment; otherwise one is created from
        /// the definition flags.
        id: Option<String>,
        #[command(flatten)]
        def: DefinitionArgs,
        #[arg(long, default_value_t = 0)]
        warmup: u64,
    },
    Abort {
        id: String,
    },
    /// Show generated experiments and resilience warnings.
    Plan {
        /// Observed cluster; every cluster when omitted.
        cluster: Option<String>,
        #[arg(long, default_value_t = 300)]
        warmup: u64,
        /// Show the runnable queue rather than per-cluster plans.
        #[arg(long)]
        queue: bool,
    },
    /// Show one experiment, or all of them.
    Report {
        id: Option<String>,
    },
    /// Run the scheduler's best experiments.
    Auto {
        #[arg(long)]
        cluster: Option<String>,
        #[arg(long, default_value_t = 1)]
        limit: usize,
        #[arg(long)]
        duration_secs: Option<u64>,
        #[arg(long, default_value_t = 300)]
        warmup: u64,
    },
}

#[derive(Args, Default)]
struct DefinitionArgs {
    /// JSON experiment definition; the other definition flags override it.
    #[arg(long, value_name = "FILE")]
    file: Option<PathBuf>,
    /// Cluster whose traffic is split into baseline and canary.
    #[arg(long)]
    cluster: Option<String>,
    /// Injection point as `rpc_client:NAME` or `command:NAME`.
    #[arg(long)]
    point: Option<String>,
    /// Inject this much latency instead of failing the call.
    #[arg(long)]
    latency_ms: Option<u64>,
    /// Percentage of users in each of the two groups.
    #[arg(long)]
    sampling_pct: Option<f64>,
    #[arg(long)]
    duration_secs: Option<u64>,
    #[arg(long)]
    region: Option<String>,
}

impl DefinitionArgs {
    fn given(&self) -> bool {
        self.file.is_some() || self.cluster.is_some() || self.point.is_some()
    }

    fn build(&self, config: Option<&PlatformConfig>) -> Outcome<ExperimentDefinition> {
        let mut def = match &self.file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::invalid(format!("reading {}: {e}", path.display())))?;
                serde_json::from_str::<ExperimentDefinition>(&text)
                    .map_err(|e| Failure::invalid(format!("parsing {}: {e}", path.display())))?
            }
            None => {
                let cluster = self
                    .cluster
                    .clone()
                    .ok_or_else(|| Failure::invalid("--cluster is required"))?;
                let point = self
                    .point
                    .as_deref()
                    .ok_or_else(|| Failure::invalid("--point is required"))?;
                let defaults = config.map(|c| c.orchestrator.clone()).unwrap_or_default();
                ExperimentDefinition {
                    fault: FaultRule::fail(parse_point(point)?),
                    observed_cluster: cluster,
                    sampling_pct: defaults.default_sampling_pct,
                    duration_secs: defaults.default_duration_secs,
                    region: None,
                }
            }
        };
        if let Some(c) = &self.cluster {
            def.observed_cluster = c.clone();
        }
        if let Some(p) = &self.point {
            def.fault.injection_point = parse_point(p)?;
        }
        if let Some(ms) = self.latency_ms {
            def.fault = FaultRule::latency(def.fault.injection_point, ms);
        }
        if let Some(pct) = self.sampling_pct {
            def.sampling_pct = pct;
        }
        if let Some(d) = self.duration_secs {
            def.duration_secs = d;
        }
        if self.region.is_some() {
            def.region = self.region.clone();
        }
        Ok(def)
    }
}

fn parse_point(s: &str) -> Outcome<InjectionPoint> {
    let (kind, name) = s
        .split_once(':')
        .ok_or_else(|| Failure::invalid(format!("injection point {s:?} is not KIND:NAME")))?;
    let kind = match kind {
        "rpc_client" => InjectionKind::RpcClient,
        "command" => InjectionKind::Command,
        other => {
            return Err(Failure::invalid(format!(
                "unknown injection kind {other:?}"
            )))
        }
    };
    if name.is_empty() {
        return Err(Failure::invalid("injection point name is empty"));
    }
    Ok(InjectionPoint {
        kind,
        name: name.to_string(),
    })
}

struct Context {
    config: Option<PathBuf>,
    store: Option<PathBuf>,
    seed: Option<u64>,
    clock: Arc<dyn WallClock>,
    server: Option<String>,
}

impl Context {
    fn config(&self) -> Outcome<PlatformConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                PlatformConfig::load(path).map_err(|e| Failure::invalid(e.to_string()))?
            }
            None => return Err(Failure::invalid("no platform configuration; pass --config")),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.topology()
            .map_err(|e| Failure::invalid(e.to_string()))?;
        Ok(cfg)
    }

    fn service(&self, options: ServiceOptions) -> Outcome<PlatformService> {
        let cfg = self.config()?;
        let store = match &self.store {
            Some(dir) => Some(RecordStore::open(dir).map_err(|e| {
                Failure::new(
                    EXIT_RUNTIME,
                    format!("opening store {}: {e}", dir.display()),
                )
            })?),
            None => None,
        };
        let svc = PlatformService::start(cfg, store, self.clock.clone(), options)
            .map_err(|e| Failure::new(EXIT_RUNTIME, e.to_string()))?;
        for id in &svc.recovered {
            log::warn!("{id} was interrupted by a restart and marked Failed");
        }
        for path in &svc.quarantined {
            log::warn!("quarantined unreadable record {}", path.display());
        }
        Ok(svc)
    }

    fn backend(&self, warmup_secs: u64) -> Outcome<Backend> {
        match &self.server {
            Some(url) => Ok(Backend::remote(url)),
            None => Ok(Backend::Local(self.service(ServiceOptions {
                acceleration: 0.0,
                warmup_secs,
            })?)),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("chap: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let clock: Arc<dyn WallClock> = match &cli.at {
        Some(s) => {
            let at = DateTime::parse_from_rfc3339(s)
                .map_err(|e| Failure::invalid(format!("--at {s:?}: {e}")))?;
            Arc::new(FixedClock::new(at.with_timezone(&Utc)))
        }
        None => Arc::new(SystemClock),
    };
    let ctx = Context {
        config: cli.config,
        store: cli.store,
        seed: cli.seed,
        clock,
        server: cli.server,
    };
    let out = output::Printer { json: cli.json };
    match cli.command {
        Command::Serve {
            bind,
            accel,
            warmup,
        } => serve(&ctx, bind, accel, warmup),
        Command::Create { def, start } => {
            let def = def.build(ctx.config().ok().as_ref())?;
            let b = ctx.backend(0)?;
            let exp = b.create(def, start)?;
            out.experiment(&exp);
            Ok(())
        }
        Command::Run { id, def, warmup } => {
            let b = ctx.backend(warmup)?;
            let id = match id {
                Some(id) => {
                    if def.given() {
                        return Err(Failure::invalid(
                            "give either an experiment id or a definition, not both",
                        ));
                    }
                    let id = ExperimentId::new(id);
                    b.start(&id)?;
                    id
                }
                None => {
                    let def = def.build(ctx.config().ok().as_ref())?;
                    b.create(def, true)?.id
                }
            };
            let exp = b.wait(&id)?;
            out.experiment(&exp);
            output::require_pass(std::slice::from_ref(&exp))
        }
        Command::Abort { id } => {
            let exp = ctx.backend(0)?.abort(&ExperimentId::new(id))?;
            out.experiment(&exp);
            Ok(())
        }
        Command::Plan {
            cluster,
            warmup,
            queue,
        } => {
            let b = ctx.backend(warmup)?;
            if queue {
                out.queue(&b.schedule(cluster.as_deref())?);
                return Ok(());
            }
            let clusters = match cluster {
                Some(c) => vec![c],
                None => b.clusters()?,
            };
            let mut plans = Vec::new();
            for c in clusters {
                let (plan, warnings) = b.plan(&c)?;
                plans.push((c, plan, warnings));
            }
            out.plans(&plans);
            Ok(())
        }
        Command::Report { id } => {
            let b = ctx.backend(0)?;
            match id {
                Some(id) => out.experiment(&b.get(&ExperimentId::new(id))?),
                None => out.experiments(&b.list()?),
            }
            Ok(())
        }
        Command::Auto {
            cluster,
            limit,
            duration_secs,
            warmup,
        } => {
            let b = ctx.backend(warmup)?;
            let run = b.run_schedule(cluster.as_deref(), limit, duration_secs)?;
            let mut done = Vec::new();
            for id in &run.started {
                done.push(b.wait(id)?);
            }
            out.schedule_run(&run, &done);
            output::require_pass(&done)
        }
    }
}

fn serve(ctx: &Context, bind: SocketAddr, accel: f64, warmup: u64) -> Outcome {
    if ctx.server.is_some() {
        return Err(Failure::invalid(
            "serve runs the platform itself; drop --server",
        ));
    }
    if !(accel >= 0.0 && accel.is_finite()) {
        return Err(Failure::invalid(
            "--accel must be a finite, non-negative number",
        ));
    }
    let svc = ctx.service(ServiceOptions {
        acceleration: accel,
        warmup_secs: warmup,
    })?;
    let rt =
        tokio::runtime::Runtime::new().map_err(|e| Failure::new(EXIT_RUNTIME, e.to_string()))?;
    let handle = svc.handle();
    let result = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        // tests and scripts read the address from the first line
        println!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        chap_core::api::serve(listener, handle, shutdown).await
    });
    svc.shutdown();
    result.map_err(|e| Failure::new(EXIT_RUNTIME, format!("serving on {bind}: {e}")))
}
