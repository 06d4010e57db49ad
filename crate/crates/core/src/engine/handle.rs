//! Shared access to an engine from several threads.
//!
//! The model calls of a tick run without the engine lock held, so readers
//! (HTTP handlers, event streams) are not blocked by slow backends.

use std::sync::{Arc, Mutex, MutexGuard};

use super::{call_all, Engine, EventLog, Result, TickSummary};
use crate::workspace::Workspace;

pub struct ProjectHandle {
    engine: Mutex<Engine>,
    tick_lock: Mutex<()>,
    events: Arc<EventLog>,
    workspace: Arc<Workspace>,
}

impl ProjectHandle {
    pub fn new(engine: Engine) -> Arc<Self> {
        Arc::new(Self {
            events: engine.events().clone(),
            workspace: engine.workspace().clone(),
            engine: Mutex::new(engine),
            tick_lock: Mutex::new(()),
        })
    }

    pub fn lock(&self) -> MutexGuard<'_, Engine> {
        self.engine.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn events(&self) -> &Arc<EventLog> {
        &self.events
    }

    pub fn workspace(&self) -> &Arc<Workspace> {
        &self.workspace
    }

    /// Runs one tick; concurrent callers are serialized.
    pub fn tick(&self) -> Result<TickSummary> {
        let _tick = self.tick_lock.lock().unwrap_or_else(|p| p.into_inner());
        let (steps, gateway) = {
            let mut engine = self.lock();
            (engine.plan_tick()?, engine.gateway().clone())
        };
        if steps.is_empty() {
            let engine = self.lock();
            return Ok(TickSummary {
                tick: engine.ticks(),
                stepped: Vec::new(),
                records: 0,
            });
        }
        let results = call_all(&gateway, steps);
        self.lock().apply_tick(results)
    }

    pub fn run_until_idle(&self, max_ticks: u64) -> Result<u64> {
        let mut n = 0;
        while n < max_ticks {
            if self.tick()?.is_idle() {
                break;
            }
            n += 1;
        }
        Ok(n)
    }
}
