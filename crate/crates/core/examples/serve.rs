//! Serve a checkpoint over HTTP on 127.0.0.1, optionally with a dataset
//! whose test split backs `/examples`.
//!
//! ```text
//! cargo run --release --example serve -- MODEL.tdck [DATA_DIR] [PORT]
//! curl -s localhost:8080/health
//! ```

use std::net::{Ipv4Addr, SocketAddr};

use textdet::service::{serve, AppState};
use textdet::shapegen::DatasetManifest;
use textdet::trainer::load_checkpoint;

#[tokio::main]
async fn main() -> textdet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let Some(ckpt) = args.next() else {
        eprintln!("usage: serve MODEL.tdck [DATA_DIR] [PORT]");
        std::process::exit(2);
    };
    let dataset = args.next().map(DatasetManifest::load).transpose()?;
    let port = args.next().and_then(|p| p.parse().ok()).unwrap_or(8080);
    let (model, metadata) = load_checkpoint(&ckpt)?;
    let state = AppState {
        model,
        metadata,
        dataset,
    };
    serve(state, SocketAddr::from((Ipv4Addr::LOCALHOST, port))).await
}
