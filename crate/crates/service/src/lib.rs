//! Blend service: `/blend`, plan management, attribution reports, what-if
//! evaluation and a server-sent metrics stream over one shared state.

pub mod api;
pub mod live;
pub mod state;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::router;
pub use state::{DecisionRecord, Mode, PlanOverride, ServiceConfig, ServiceError, ServiceState, TickMessage};

/// Bind `config.port` on all interfaces and serve until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let state = ServiceState::open(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    serve_on(listener, state.clone(), async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    state.flush()
}

/// Serve an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<ServiceState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}
