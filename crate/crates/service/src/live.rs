//! Background traffic: the live simulation and log replay.

use std::sync::Arc;
use std::time::Duration;

use crate::state::{Mode, ServiceState};

const LIVE_TICK: Duration = Duration::from_millis(50);

/// Switch mode, stopping whatever background task was running.
pub fn set_mode(state: &Arc<ServiceState>, mode: Mode) {
    if let Some(task) = state.task.lock().take() {
        task.abort();
    }
    state.set_mode_flag(mode);
    let handle = match mode {
        Mode::Idle => return,
        Mode::LiveSim => tokio::spawn(live_loop(state.clone())),
        Mode::Replay => tokio::spawn(replay_loop(state.clone())),
    };
    *state.task.lock() = Some(handle);
}

async fn live_loop(state: Arc<ServiceState>) {
    let per_tick = state.config().live_rps.max(0.0) * LIVE_TICK.as_secs_f64();
    let mut interval = tokio::time::interval(LIVE_TICK);
    let mut owed = 0.0;
    loop {
        interval.tick().await;
        owed += per_tick;
        while owed >= 1.0 {
            owed -= 1.0;
            if let Err(e) = state.serve_simulated() {
                eprintln!("live simulation: {e}");
            }
        }
        tokio::task::yield_now().await;
    }
}

async fn replay_loop(state: Arc<ServiceState>) {
    let pause = Duration::from_millis(state.config().replay_interval_ms);
    let s = state.clone();
    let closed = tokio::task::spawn_blocking(move || s.closed_windows()).await.unwrap_or(0);
    for wid in 0..closed {
        let s = state.clone();
        match tokio::task::spawn_blocking(move || s.replay_message(wid)).await {
            Ok(Ok(msg)) => state.publish(msg),
            Ok(Err(e)) => eprintln!("replaying window {wid}: {e}"),
            Err(e) => eprintln!("replaying window {wid}: {e}"),
        }
        tokio::time::sleep(pause).await;
    }
    state.set_mode_flag(Mode::Idle);
}
