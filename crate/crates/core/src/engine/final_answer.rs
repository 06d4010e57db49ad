//! Final-answer mode: a one-shot run with a wall-clock deadline.
//!
//! The engine runs on a worker thread. At `deadline - grace` the project
//! coordinator is instructed to answer now; the caller gets a result no
//! later than `deadline + grace` even if the worker is stuck in a call.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use super::{Engine, EngineConfig, FinalAnswer, Result};
use crate::model::ModelBackend;
use crate::tools::Toolbox;

/// Grace period for a deadline: 1% of it, at least 5 s, at most half.
pub fn grace_for(deadline: Duration) -> Duration {
    let grace = (deadline / 100).max(Duration::from_secs(5));
    grace.min(deadline / 2)
}

#[derive(Debug, Clone)]
pub struct FinalAnswerOptions {
    pub dir: PathBuf,
    pub project_id: String,
    pub config: EngineConfig,
    pub deadline: Duration,
}

fn no_answer(at: u64, why: &str) -> FinalAnswer {
    FinalAnswer {
        text: String::new(),
        produced_at: at,
        forced: true,
        error: Some(format!("NoAnswer: {why}")),
    }
}

/// Solves `problem` and returns the coordinator's final answer.
pub fn run_final_answer_mode(
    options: FinalAnswerOptions,
    backend: Arc<dyn ModelBackend>,
    tools: Arc<Toolbox>,
    problem: &str,
) -> Result<FinalAnswer> {
    let start = Instant::now();
    let deadline = options.deadline;
    let grace = grace_for(deadline);
    let mut engine = Engine::create(&options.dir, &options.project_id, options.config, backend, tools)?;
    engine.start_final_answer(problem)?;
    let clock = engine.workspace().clock().clone();

    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let worker_stop = stop.clone();
    std::thread::spawn(move || {
        let outcome = (|| -> Result<FinalAnswer> {
            loop {
                if worker_stop.load(Ordering::SeqCst) {
                    return Ok(no_answer(engine.workspace().clock().current(), "stopped"));
                }
                if let Some(a) = &engine.project().final_answer {
                    return Ok(a.clone());
                }
                if !engine.project().forced && start.elapsed() + grace >= deadline {
                    engine.force_answer()?;
                }
                let summary = engine.tick()?;
                if summary.is_idle() && engine.project().final_answer.is_none() {
                    if engine.project().forced {
                        let at = engine.workspace().clock().current();
                        return Ok(no_answer(at, "the coordinator gave no answer when instructed"));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
            }
        })();
        let _ = tx.send(outcome);
    });

    let hard = (deadline + grace).saturating_sub(start.elapsed());
    match rx.recv_timeout(hard) {
        Ok(outcome) => outcome,
        Err(_) => {
            stop.store(true, Ordering::SeqCst);
            Ok(no_answer(clock.current(), "deadline passed"))
        }
    }
}
