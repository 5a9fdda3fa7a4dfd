use std::net::SocketAddr;
use std::time::Duration;

use clap::Parser;

use flowtrace_core::NodeId;
use flowtrace_middleware::{Middleware, MiddlewareConfig, PeerSpec};

/// Per-node traceability daemon.
#[derive(Parser)]
#[command(name = "flowtraced", version)]
struct Args {
    /// Node identity, unique within the deployment.
    #[arg(long)]
    node: String,

    /// Address for the process-facing listener.
    #[arg(long, default_value = "127.0.0.1:50051")]
    p2m: SocketAddr,

    /// Address for the peer-facing listener.
    #[arg(long, default_value = "127.0.0.1:50052")]
    m2m: SocketAddr,

    /// Reservation timeout in milliseconds.
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,

    /// Static peer entry: <peer-socket>=<node>@<m2m-endpoint>.
    /// Repeatable. Sockets not covered by any entry are treated as
    /// external endpoints.
    #[arg(long = "peer", value_parser = parse_peer)]
    peers: Vec<PeerSpec>,
}

fn parse_peer(text: &str) -> Result<PeerSpec, String> {
    let (socket, rest) = text
        .split_once('=')
        .ok_or("expected <peer-socket>=<node>@<m2m-endpoint>")?;
    let (node, endpoint) = rest
        .split_once('@')
        .ok_or("expected <node>@<m2m-endpoint> after '='")?;
    Ok(PeerSpec {
        peer_socket: socket.parse().map_err(|e| format!("peer socket: {e}"))?,
        node: NodeId::new(node).map_err(|e| e.to_string())?,
        m2m_endpoint: endpoint.parse().map_err(|e| format!("m2m endpoint: {e}"))?,
    })
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();

    let args = Args::parse();
    let node = match NodeId::new(&args.node) {
        Ok(node) => node,
        Err(e) => {
            eprintln!("invalid --node: {e}");
            std::process::exit(2);
        }
    };

    let mut config = MiddlewareConfig::new(node);
    config.p2m_addr = args.p2m;
    config.m2m_addr = args.m2m;
    config.reservation_timeout = Duration::from_millis(args.timeout_ms);
    config.peers = args.peers;

    let middleware = Middleware::start(config).await?;
    // Easy to scrape when launched with port 0.
    println!("node={}", middleware.node());
    println!("p2m={}", middleware.p2m_addr());
    println!("m2m={}", middleware.m2m_addr());
    tracing::info!(
        node = %middleware.node(),
        p2m = %middleware.p2m_addr(),
        m2m = %middleware.m2m_addr(),
        "listening"
    );

    tokio::signal::ctrl_c().await?;
    tracing::info!("shutting down");
    middleware.shutdown().await;
    Ok(())
}
