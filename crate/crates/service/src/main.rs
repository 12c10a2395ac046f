use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;

use recipecrit_service::{run, ServeOptions};

/// Serves interactive critiquing sessions over HTTP.
#[derive(Parser)]
#[command(name = "recipecrit-service", version)]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Stage-2 model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Ingredient vocabulary TSV; must match the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Directory for append-only recipe and session logs.
    #[arg(long)]
    persist_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .context("invalid listen address")?;
    run(ServeOptions {
        addr,
        checkpoint: args.checkpoint,
        vocab: args.vocab,
        persist_dir: args.persist_dir,
    })
    .await
}
