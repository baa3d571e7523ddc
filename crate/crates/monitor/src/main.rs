use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use shm_core::model::StructuralModel;
use shm_core::scenario::{ColumnAngles, Scenario};
use shm_monitor::client::{self, AdminClient};
use shm_monitor::clock::Clock;
use shm_monitor::engine::{Engine, EngineConfig};
use shm_monitor::gateway;
use shm_monitor::registry::Registry;
use shm_monitor::sim::{self, HttpTransport, SimulationPlan};
use shm_monitor::wire::{BindingBody, ThresholdsBody};

/// Structural health monitoring server and operator tools.
#[derive(Parser, Debug)]
#[command(name = "shm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Target {
    /// Server root URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    target: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the monitoring server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        publish_period_ms: u64,
        /// Frames are computed this far behind the clock.
        #[arg(long, default_value_t = 0)]
        alignment_lag_ms: i64,
        #[arg(long, default_value_t = shm_core::frame::DEFAULT_STALENESS_WINDOW_MS)]
        staleness_window_ms: i64,
    },
    /// Structural model documents.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
    /// Bind a device to a node.
    Bind {
        structure_id: String,
        device_id: String,
        node_id: String,
        /// Move the device off its current node.
        #[arg(long)]
        replace: bool,
        /// Record the binding as inactive.
        #[arg(long)]
        inactive: bool,
        #[command(flatten)]
        target: Target,
    },
    /// Set per-axis displacement limits (meters).
    Thresholds {
        structure_id: String,
        #[arg(long)]
        max_dx: f64,
        #[arg(long)]
        max_dy: f64,
        #[arg(long)]
        max_dz: f64,
        #[command(flatten)]
        target: Target,
    },
    /// Stream scenario displacements from simulated devices.
    Simulate {
        #[arg(long, default_value = "s1")]
        structure: String,
        #[arg(long, default_value_t = 8)]
        devices: usize,
        #[arg(long, default_value_t = 20.0)]
        rate_hz: f64,
        #[arg(long, default_value_t = 60.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 10)]
        batch_size: usize,
        /// `harmonic`, `step`, or a scenario JSON file.
        #[arg(long, default_value = "harmonic")]
        scenario: String,
        #[arg(long, default_value_t = 0.1)]
        amplitude_rad: f64,
        #[arg(long, default_value_t = 1.0)]
        freq_hz: f64,
        #[command(flatten)]
        target: Target,
    },
    /// Print live pose updates and warnings.
    Tail {
        structure_id: String,
        #[command(flatten)]
        target: Target,
    },
    /// Write recorded snapshots as JSON lines.
    Export {
        structure_id: String,
        #[arg(long)]
        from_ms: Option<i64>,
        #[arg(long)]
        to_ms: Option<i64>,
        /// Output file; stdout if omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        target: Target,
    },
}

#[derive(Subcommand, Debug)]
enum ModelCommand {
    /// Upload a structural model file.
    Apply {
        file: PathBuf,
        #[command(flatten)]
        target: Target,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().command).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

async fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Serve { addr, data_dir, publish_period_ms, alignment_lag_ms, staleness_window_ms } => {
            if publish_period_ms == 0 {
                bail!("publish period must be positive");
            }
            let registry = Arc::new(Registry::open(&data_dir)?);
            let config = EngineConfig {
                publish_period: Duration::from_millis(publish_period_ms),
                alignment_lag_ms,
                staleness_window_ms,
                ..EngineConfig::default()
            };
            let engine = Arc::new(Engine::with_registry(registry, config, Clock::system()));
            let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
            tracing::info!("listening on {}", listener.local_addr()?);
            gateway::serve(listener, engine, async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        }
        Command::Model { command: ModelCommand::Apply { file, target } } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let model: StructuralModel =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
            model.validate().with_context(|| format!("validating {}", file.display()))?;
            let version = AdminClient::new(&target.target).apply_model(&model).await?;
            println!("config_version {version}");
        }
        Command::Bind { structure_id, device_id, node_id, replace, inactive, target } => {
            let body = BindingBody { node_id, active: !inactive, replace };
            let version = AdminClient::new(&target.target).bind(&structure_id, &device_id, &body).await?;
            println!("config_version {version}");
        }
        Command::Thresholds { structure_id, max_dx, max_dy, max_dz, target } => {
            let body = ThresholdsBody { max_dx_m: max_dx, max_dy_m: max_dy, max_dz_m: max_dz };
            let version = AdminClient::new(&target.target).thresholds(&structure_id, &body).await?;
            println!("config_version {version}");
        }
        Command::Simulate {
            structure,
            devices,
            rate_hz,
            duration_s,
            batch_size,
            scenario,
            amplitude_rad,
            freq_hz,
            target,
        } => {
            let scenario = load_scenario(&scenario, amplitude_rad, freq_hz)?;
            let config = AdminClient::new(&target.target).runtime_config(&structure).await?;
            let plan = SimulationPlan::new(sim::bound_devices(&config, devices)?, rate_hz, duration_s, batch_size, scenario);
            plan.validate()?;
            let report =
                sim::run_simulation(HttpTransport::new(&target.target), Arc::new(config), plan.clone(), Clock::system())
                    .await?;
            println!("{report}");
            if !report.is_complete(&plan) {
                println!("run INCOMPLETE");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Tail { structure_id, target } => {
            let url = client::stream_url(&target.target);
            let mut stdout = std::io::stdout();
            tokio::select! {
                r = client::tail(&url, &structure_id, &mut stdout, None) => r?,
                _ = tokio::signal::ctrl_c() => {}
            }
        }
        Command::Export { structure_id, from_ms, to_ms, out, target } => {
            let body = AdminClient::new(&target.target).export(&structure_id, from_ms, to_ms).await?;
            match out {
                Some(path) => std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{body}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_scenario(arg: &str, amplitude_rad: f64, freq_hz: f64) -> anyhow::Result<Scenario> {
    let scenario = match arg {
        "harmonic" => Scenario::harmonic(amplitude_rad, freq_hz),
        "step" => Scenario::Step {
            step_time_s: 1.0,
            default: ColumnAngles { r_y: amplitude_rad, t_x: amplitude_rad / 2.0 },
            per_column: Default::default(),
        },
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {path}"))?
        }
    };
    scenario.validate()?;
    Ok(scenario)
}
