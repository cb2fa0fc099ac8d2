//! Shared service state: the registered clients, run bookkeeping, and the
//! single gateway every run bills usage to.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::AtomicUsize;
use std::sync::{Arc, Mutex, RwLock};

use colm_core::config::{ColmConfig, ServiceConfig};
use colm_core::orchestrator::{RoundProgress, Runner};
use colm_core::store::Store;
use colm_core::types::{ClientProfile, RunConfig};
use tokio::sync::Semaphore;

/// Lifecycle of one submitted query.
pub enum RunState {
    /// Accepted; possibly still waiting for a concurrency permit.
    Running { progress: RoundProgress },
    /// Finished and persisted; the canonical transcript bytes are frozen so
    /// every fetch returns the identical body.
    Done { body: Arc<String> },
    /// The pipeline or persistence failed.
    Failed { message: String },
}

pub struct AppState {
    /// One runner (and one gateway) for the whole process, so `/v1/usage`
    /// reports totals across every run since start.
    pub runner: Runner,
    pub store: Arc<Store>,
    pub run_config: RunConfig,
    pub limits: ServiceConfig,
    pub clients: RwLock<BTreeMap<String, ClientProfile>>,
    pub runs: Mutex<HashMap<String, RunState>>,
    /// Bounds how many accepted queries execute at once.
    pub permits: Arc<Semaphore>,
    /// Accepted queries not yet finished (running or queued), for the
    /// admission cap.
    pub active: AtomicUsize,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn shared(config: &ColmConfig, store: Store) -> SharedState {
        let clients = config
            .clients
            .iter()
            .map(|p| (p.name.clone(), p.clone()))
            .collect();
        Arc::new(AppState {
            runner: config.runner(),
            store: Arc::new(store),
            run_config: config.run.clone(),
            limits: config.service,
            clients: RwLock::new(clients),
            runs: Mutex::new(HashMap::new()),
            permits: Arc::new(Semaphore::new(config.service.max_concurrent_runs)),
            active: AtomicUsize::new(0),
        })
    }

    /// Hard cap on accepted-but-unfinished queries.
    pub fn admission_cap(&self) -> usize {
        self.limits.max_concurrent_runs + self.limits.max_queued_runs
    }
}
