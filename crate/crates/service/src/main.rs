use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use textcav_service::AppState;

#[derive(Debug, Parser)]
#[command(name = "textcav-server", version, about = "Serve TextCAV workspaces over HTTP")]
struct Args {
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, env = "TEXTCAV_PORT", default_value_t = 8080)]
    port: u16,
    /// Directory whose subdirectories are workspaces.
    #[arg(long, env = "TEXTCAV_DATA_DIR")]
    data_dir: PathBuf,
    /// Base URL of the embedding sidecar (POST {url}/embed).
    #[arg(long, env = "TEXTCAV_EMBEDDER_URL")]
    embedder_url: Option<String>,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    let state = match AppState::load(&args.data_dir, args.embedder_url.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot read data dir {}: {e}", args.data_dir.display());
            return ExitCode::from(2);
        }
    };
    for (id, reason) in &state.skipped {
        eprintln!("warning: skipping workspace {id}: {reason}");
    }
    eprintln!("loaded {} workspace(s) from {}", state.slots.len(), args.data_dir.display());
    match textcav_service::run(SocketAddr::new(args.host, args.port), Arc::new(state)).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
