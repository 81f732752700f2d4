use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mtctl::{CliError, RunOptions, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK};
use mtctl_service::{demo_document, serve, Pacing, ServeOptions, TOKEN_ENV};

#[derive(Parser)]
#[command(
    name = "mtctl",
    version,
    about = "Multi-station materials-testing controller"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured station to completion or for a fixed number of ticks.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        duration_ticks: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides every test's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write a CSV export next to each log.
        #[arg(long)]
        csv: bool,
        /// Run only these station indices.
        #[arg(long, value_delimiter = ',')]
        stations: Option<Vec<usize>>,
    },
    /// Measure achieved loop rate with synthetic closed-loop stations.
    Bench {
        #[arg(long, default_value_t = 1)]
        stations: usize,
        #[arg(long, default_value_t = 1_000_000)]
        ticks: u64,
    },
    /// Print one waveform segment as tick,setpoint CSV.
    Render {
        /// Segment as JSON, e.g. '{"kind":"sine","amplitude":1,"mean":0,"frequency_hz":1,"cycles":1}'.
        #[arg(long)]
        segment: String,
        #[arg(long)]
        ticks: u64,
        #[arg(long, default_value_t = 100_000.0)]
        tick_rate_hz: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a configuration document and list every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a binary log to CSV on stdout.
    Export {
        #[arg(long)]
        log: PathBuf,
    },
    /// Serve the WebSocket API (token from MTCTL_TOKEN).
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: std::net::IpAddr,
        /// Machine and tests; defaults to a 16-station demo machine.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also accept newline-delimited JSON on this TCP port.
        #[arg(long)]
        tcp_port: Option<u16>,
    },
}

fn report(e: &CliError) {
    eprintln!("error: {e}");
    if let CliError::Config(_, violations) = e {
        for v in violations {
            eprintln!("  {v}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Run {
            config,
            duration_ticks,
            out,
            seed,
            csv,
            stations,
        } => {
            let doc = mtctl::load_config(&config)?;
            let summary = mtctl::run(
                &doc,
                &out,
                &RunOptions {
                    duration_ticks,
                    seed,
                    csv,
                    only: stations,
                },
            )?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            Ok(summary.exit_code)
        }
        Command::Bench { stations, ticks } => {
            let r = mtctl::bench(stations, ticks)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&r).expect("report serializes")
            );
            Ok(EXIT_OK)
        }
        Command::Render {
            segment,
            ticks,
            tick_rate_hz,
            seed,
        } => {
            print!(
                "{}",
                mtctl::render_csv(&segment, ticks, tick_rate_hz, seed)?
            );
            Ok(EXIT_OK)
        }
        Command::Validate { config } => match mtctl::load_config(&config) {
            Ok(doc) => {
                println!("ok: {} station(s)", doc.machine.station_count);
                Ok(EXIT_OK)
            }
            Err(e) => {
                report(&e);
                Ok(EXIT_CONFIG)
            }
        },
        Command::Export { log } => {
            let bytes = std::fs::read(log)?;
            let csv = mtctl_core::acquisition::export_csv(&bytes)
                .map_err(|e| CliError::Other(e.to_string()))?;
            print!("{csv}");
            Ok(EXIT_OK)
        }
        Command::Serve {
            port,
            bind,
            config,
            tcp_port,
        } => {
            let doc = match config {
                Some(p) => mtctl::load_config(&p)?,
                None => demo_document(16),
            };
            tracing_subscriber::fmt()
                .with_writer(std::io::stderr)
                .init();
            let opts = ServeOptions {
                addr: SocketAddr::new(bind, port),
                tcp_addr: tcp_port.map(|p| SocketAddr::new(bind, p)),
                token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
                pacing: Pacing::Realtime,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let handle = serve(doc, opts).await?;
                eprintln!("listening on ws://{}/ws", handle.addr);
                handle.wait().await;
                Ok::<_, CliError>(())
            })?;
            Ok(EXIT_FAILURE)
        }
    }
}
