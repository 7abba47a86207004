//! The platform actor: a dedicated thread owns the simulated world and
//! applies requests between virtual seconds. Readers see the last published
//! snapshot without waiting on the actor.

use std::collections::BTreeMap;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use super::store::RecordStore;
use crate::config::PlatformConfig;
use crate::fit::ExperimentId;
use crate::orchestrator::{Experiment, Platform, PlatformEvent};
use crate::safety::{Regions, WallClock};

/// Runs against the platform and returns the reply, which is sent only
/// after the resulting state has been published.
type Job = Box<dyn FnOnce(&mut Platform) -> Reply + Send>;
type Reply = Box<dyn FnOnce() + Send>;

enum Message {
    Call(Job),
    Shutdown,
    Kill,
}

/// State readable without going through the actor.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Snapshot {
    pub virtual_second: u64,
    pub wall_clock: Option<DateTime<Utc>>,
    pub experiments: BTreeMap<ExperimentId, Experiment>,
    pub regions: Regions,
    pub clusters: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceOptions {
    /// Virtual seconds per wall-clock second; 0 leaves the clock paused
    /// until advanced explicitly.
    pub acceleration: f64,
    /// Virtual seconds simulated before accepting requests, so the
    /// dependency snapshots have traffic to look at.
    pub warmup_secs: u64,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            acceleration: 1.0,
            warmup_secs: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("platform thread is not running")]
    Gone,
    #[error(transparent)]
    Startup(#[from] crate::Error),
}

/// Cloneable handle to a running platform actor.
#[derive(Clone)]
pub struct PlatformHandle {
    tx: mpsc::Sender<Message>,
    snapshot: Arc<RwLock<Arc<Snapshot>>>,
    events: broadcast::Sender<PlatformEvent>,
}

pub struct PlatformService {
    handle: PlatformHandle,
    thread: Option<JoinHandle<()>>,
    /// Ids failed during crash recovery at startup.
    pub recovered: Vec<ExperimentId>,
    /// Records quarantined at startup.
    pub quarantined: Vec<std::path::PathBuf>,
}

struct Actor {
    platform: Platform,
    store: Option<RecordStore>,
    snapshot: Arc<RwLock<Arc<Snapshot>>>,
    events: broadcast::Sender<PlatformEvent>,
}

impl Actor {
    fn publish(&mut self) {
        for exp in self.platform.take_dirty() {
            if let Some(store) = &self.store {
                if let Err(e) = store.save(&exp) {
                    log::error!("persisting {}: {e}", exp.id);
                }
            }
        }
        if self.platform.take_history_dirty() {
            if let Some(store) = &self.store {
                if let Err(e) = store.save_history(self.platform.history()) {
                    log::error!("persisting scheduler history: {e}");
                }
            }
        }
        for ev in self.platform.take_events() {
            // no subscribers is fine
            let _ = self.events.send(ev);
        }
        let snap = Snapshot {
            virtual_second: self.platform.now_sec(),
            wall_clock: Some(self.platform.wall_clock()),
            experiments: self
                .platform
                .experiments()
                .map(|e| (e.id.clone(), e.clone()))
                .collect(),
            regions: self.platform.regions().clone(),
            clusters: self.platform.observed_clusters(),
        };
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(snap);
    }
}

impl PlatformService {
    /// Starts the actor thread. With a store, persisted records are loaded,
    /// interrupted experiments are failed and corrupt files quarantined.
    pub fn start(
        config: PlatformConfig,
        store: Option<RecordStore>,
        clock: Arc<dyn WallClock>,
        options: ServiceOptions,
    ) -> Result<Self, ServiceError> {
        let (tx, rx) = mpsc::channel::<Message>();
        let (events, _) = broadcast::channel(4096);
        let snapshot = Arc::new(RwLock::new(Arc::new(Snapshot::default())));
        let (ready_tx, ready_rx) = mpsc::channel();
        let thread = {
            let snapshot = snapshot.clone();
            let events = events.clone();
            std::thread::Builder::new()
                .name("platform".into())
                .spawn(move || {
                    let platform = match Platform::new(config, clock) {
                        Ok(p) => p,
                        Err(e) => {
                            let _ = ready_tx.send(Err(crate::Error::from(e)));
                            return;
                        }
                    };
                    let mut actor = Actor {
                        platform,
                        store,
                        snapshot,
                        events,
                    };
                    let mut recovered = Vec::new();
                    let mut quarantined = Vec::new();
                    if let Some(store) = &actor.store {
                        match store.load() {
                            Ok(report) => {
                                if let Some(h) = report.history {
                                    actor.platform.set_history(h);
                                }
                                recovered = actor.platform.restore(report.experiments);
                                quarantined = report.quarantined;
                            }
                            Err(e) => {
                                let _ = ready_tx.send(Err(e.into()));
                                return;
                            }
                        }
                    }
                    actor.platform.run_for(options.warmup_secs);
                    actor.publish();
                    let _ = ready_tx.send(Ok((recovered, quarantined)));
                    run_actor(actor, rx, options.acceleration);
                })
                .expect("spawning platform thread")
        };
        let (recovered, quarantined) = ready_rx.recv().map_err(|_| ServiceError::Gone)??;
        Ok(Self {
            handle: PlatformHandle {
                tx,
                snapshot,
                events,
            },
            thread: Some(thread),
            recovered,
            quarantined,
        })
    }

    pub fn handle(&self) -> PlatformHandle {
        self.handle.clone()
    }

    /// Stops the actor after flushing state.
    pub fn shutdown(mut self) {
        let _ = self.handle.tx.send(Message::Shutdown);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Stops the actor abruptly, leaving persisted records as they are, the
    /// way a crashed process would.
    pub fn kill(mut self) {
        let _ = self.handle.tx.send(Message::Kill);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for PlatformService {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = self.handle.tx.send(Message::Shutdown);
            let _ = t.join();
        }
    }
}

fn run_actor(mut actor: Actor, rx: mpsc::Receiver<Message>, acceleration: f64) {
    let period = (acceleration > 0.0).then(|| Duration::from_secs_f64(1.0 / acceleration));
    let mut next_tick = period.map(|p| Instant::now() + p);
    loop {
        let msg = match next_tick {
            Some(at) => match rx.recv_timeout(at.saturating_duration_since(Instant::now())) {
                Ok(m) => Some(m),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => return,
            },
            None => match rx.recv() {
                Ok(m) => Some(m),
                Err(_) => return,
            },
        };
        match msg {
            Some(Message::Call(job)) => {
                let reply = job(&mut actor.platform);
                actor.publish();
                reply();
            }
            Some(Message::Shutdown) => {
                actor.publish();
                return;
            }
            Some(Message::Kill) => return,
            None => {
                actor.platform.tick();
                actor.publish();
                if let (Some(p), Some(at)) = (period, next_tick.as_mut()) {
                    *at += p;
                    // fall back to real time rather than racing to catch up
                    let now = Instant::now();
                    if *at < now {
                        *at = now + p;
                    }
                }
            }
        }
    }
}

impl PlatformHandle {
    /// Runs `f` on the actor thread and waits for its result.
    pub async fn call<R, F>(&self, f: F) -> Result<R, ServiceError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Platform) -> R + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        let job: Job = Box::new(move |p| {
            let r = f(p);
            Box::new(move || {
                let _ = tx.send(r);
            })
        });
        self.tx
            .send(Message::Call(job))
            .map_err(|_| ServiceError::Gone)?;
        rx.await.map_err(|_| ServiceError::Gone)
    }

    /// Blocking form of [`call`](Self::call) for non-async callers.
    pub fn call_blocking<R, F>(&self, f: F) -> Result<R, ServiceError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Platform) -> R + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        let job: Job = Box::new(move |p| {
            let r = f(p);
            Box::new(move || {
                let _ = tx.send(r);
            })
        });
        self.tx
            .send(Message::Call(job))
            .map_err(|_| ServiceError::Gone)?;
        rx.blocking_recv().map_err(|_| ServiceError::Gone)
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot
            .read()
            .expect("snapshot lock poisoned")
            .clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<PlatformEvent> {
        self.events.subscribe()
    }
}
