//! Serving: the HTTP listener plus a background monitor that sweeps and
//! drains the enforcement queue on every tick.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use abacus_core::service::{Abacus, ServiceError, SimClock};
use tokio::net::TcpListener;

use crate::api::{router, AppState};

#[derive(Clone)]
pub struct Monitor {
    /// Wall-clock time between sweeps.
    pub tick: Duration,
    /// In simulated-time mode, how far the clock moves per tick.
    pub sim: Option<(Arc<SimClock>, chrono::Duration)>,
}

/// One monitor pass: advance simulated time if enabled, sweep, drain.
/// A storage failure poisons the engine; it is reopened from disk, which
/// runs recovery, and the pass is retried on the next tick.
pub fn tick_once(state: &AppState, monitor: &Monitor) {
    if let Some((clock, step)) = &monitor.sim {
        clock.advance(*step);
    }
    let now = state.now();
    let mut engine = match state.engine().lock() {
        Ok(e) => e,
        Err(_) => {
            tracing::error!("engine lock poisoned; monitor stopped");
            return;
        }
    };
    let result = engine.sweep(now).and_then(|report| {
        let enforced = engine.drain(now)?;
        Ok((report, enforced))
    });
    match result {
        Ok((report, enforced)) => {
            if !report.events.is_empty() || !enforced.is_empty() {
                tracing::info!(
                    events = report.events.len(),
                    enforced = enforced.len(),
                    rolled_over = report.rolled_over.len(),
                    "monitor pass"
                );
            }
        }
        Err(err @ (ServiceError::Store(_) | ServiceError::Poisoned)) => {
            tracing::error!(%err, "monitor pass failed; reopening stores");
            match Abacus::open(engine.config().clone()) {
                Ok(fresh) => *engine = fresh,
                Err(err) => tracing::error!(%err, "reopen failed"),
            }
        }
        Err(err) => tracing::warn!(%err, "monitor pass failed"),
    }
}

/// Serves until `shutdown` resolves, then stops the monitor and drains
/// whatever is still queued.
pub async fn serve(
    state: AppState,
    listener: TcpListener,
    monitor: Monitor,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let ticker = {
        let state = state.clone();
        let monitor = monitor.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(monitor.tick);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            interval.tick().await;
            loop {
                interval.tick().await;
                let (state, monitor) = (state.clone(), monitor.clone());
                if tokio::task::spawn_blocking(move || tick_once(&state, &monitor))
                    .await
                    .is_err()
                {
                    tracing::error!("monitor pass panicked");
                }
            }
        })
    };
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let served = axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await;
    ticker.abort();
    let _ = ticker.await;
    let drained = tokio::task::spawn_blocking(move || {
        let now = state.now();
        state
            .engine()
            .lock()
            .map_err(|_| "engine lock poisoned".to_string())
            .and_then(|mut e| e.drain(now).map_err(|e| e.to_string()))
    })
    .await;
    match drained {
        Ok(Ok(done)) => tracing::info!(enforced = done.len(), "queue drained on shutdown"),
        Ok(Err(err)) => tracing::error!(%err, "drain on shutdown failed"),
        Err(err) => tracing::error!(%err, "drain on shutdown panicked"),
    }
    served
}

pub async fn ctrl_c() {
    if let Err(err) = tokio::signal::ctrl_c().await {
        tracing::error!(%err, "cannot listen for shutdown signal");
        std::future::pending::<()>().await;
    }
}
