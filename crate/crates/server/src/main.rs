use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use evaug_core::orchestrator::store::CHECKPOINT_ROOT_ENV;
use evaug_core::orchestrator::RunStore;
use evaug_server::{serve, AppState};

#[derive(Parser)]
#[command(version, about = "Serve the augmentation pipeline over HTTP/JSON")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Where pretrained states and runs are kept.
    #[arg(long, env = CHECKPOINT_ROOT_ENV, default_value = "checkpoints")]
    checkpoint_root: PathBuf,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    serve(listener, AppState::new(RunStore::new(args.checkpoint_root)), shutdown).await
}
