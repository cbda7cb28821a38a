//! Human review queue for classified memes: durable event log, leases,
//! exactly-once decisions, and an HTTP API.

pub mod api;
pub mod queue;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

pub use api::{router, AppState};
pub use queue::{Clock, DecisionRequest, ManualClock, ModerationService, Ordering, ServiceConfig, ServiceError, Stats, SystemClock};
pub use store::{Decision, Durability, Event, EventStore, QueueItem, QueueState, Status, Verdict};

/// Serves the API until the process is stopped, retrying failed items in the
/// background every `retry_every`.
pub async fn serve(addr: SocketAddr, state: AppState, retry_every: Duration) -> std::io::Result<()> {
    let service = state.service.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(retry_every);
        loop {
            tick.tick().await;
            let s = service.clone();
            match tokio::task::spawn_blocking(move || s.retry_failed()).await {
                Ok(Ok(n)) if n > 0 => log::info!("reprocessed {n} item(s)"),
                Ok(Err(e)) => log::warn!("retry pass failed: {e}"),
                _ => {}
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

pub fn shared(service: ModerationService) -> Arc<ModerationService> {
    Arc::new(service)
}
