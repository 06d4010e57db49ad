//! End-to-end checks shared by the test suites and the acceptance run.
//! Each panics on the first violated expectation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use workbench_core::agent::{ActionRecord, Entry};
use workbench_core::bus::{AgentId, Bus, BusError, Message, MessageKind, Outgoing};
use workbench_core::clock::Clock;
use workbench_core::engine::{load_project, Engine, EngineConfig, WorkstreamStatus, EVENTS_PATH};
use workbench_core::report::{
    has_blocking, render, report_path, validate_as_final, ProvenanceKind, RenderFormat, Report, ReportStatus, Severity,
};
use workbench_core::review::{
    review_path, IssueDraft, ReviewConfig, ReviewSession, SessionStatus, Severity as IssueSeverity, Verdict,
};
use workbench_core::scenario::UserStep;
use workbench_core::workspace::Workspace;

use super::build::*;
use super::gate::scenario;
use super::reports::{clean_report, files, plant, seed};

pub fn label(r: &ActionRecord) -> String {
    match &r.entry {
        Entry::Action { action } => action.label(),
        Entry::Received { message } => format!("received:{:?}", message.kind),
        Entry::Invalid { .. } => "invalid".into(),
    }
}

/// The literature workstream's expected trajectory.
pub const LITERATURE_TRAJECTORY: [&str; 8] = [
    "call_tool:search_literature",
    "update_report",
    "call_tool:fetch_document",
    "update_report",
    "received:Instruction",
    "update_report",
    "submit_for_review",
    "mark_complete",
];

pub fn literature_walkthrough() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let engine = super::run_sofa(dir.path());
    assert!(started.elapsed().as_secs() < 10);

    let traj = engine.trajectory("ws1").unwrap();
    let labels: Vec<String> = traj.iter().map(label).collect();
    assert_eq!(labels, LITERATURE_TRAJECTORY);
    assert!(traj.iter().all(|r| r.accepted));
    assert!(traj.iter().enumerate().all(|(i, r)| r.index == i as u64));

    let ws1 = engine.workstream("ws1").unwrap();
    assert_eq!(ws1.status, WorkstreamStatus::Completed);
    let versions = engine.workspace().history(&report_path("ws1")).unwrap();
    assert_eq!(versions.len(), 5);
    assert!(versions.iter().all(|v| v.author == "ws1.coordinator"));

    let report = engine.load_report("ws1").unwrap();
    assert_eq!(report.status, ReportStatus::Final);
    let user_note = report
        .annotations
        .iter()
        .find(|n| n.provenance.kind == ProvenanceKind::UserSuggestion)
        .expect("user suggestion note");
    assert!(user_note
        .text
        .starts_with("Pruning heuristic derived from user suggestion"));
    assert_eq!(user_note.provenance.locator, "chat/log.jsonl");
    assert!(user_note.provenance.version.is_some());
    assert!(engine.workspace().exists("ws/ws1/code/prune.py"));

    let session = &engine.reviews()[&ws1.sessions[0]];
    assert_eq!(session.status, SessionStatus::Approved);
    assert_eq!(session.rounds.len(), 1);
}

pub fn byte_identical_reruns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ea = super::run_sofa(a.path());
    let eb = super::run_sofa(b.path());
    for path in [report_path("ws1"), report_path("ws2"), EVENTS_PATH.to_string()] {
        assert_eq!(
            ea.workspace().read_file(&path, None).unwrap(),
            eb.workspace().read_file(&path, None).unwrap(),
            "{path}"
        );
    }
}

/// Engine state files plus the reports, review and event log.
pub fn terminal_state(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for name in ["project.json", "agents.json", "reviews.json", "bus.json"] {
        out.push((name.to_string(), std::fs::read(dir.join("state").join(name)).unwrap()));
    }
    let ws = Workspace::open(dir, Arc::new(Clock::logical())).unwrap();
    for p in [
        "ws/ws1/report.json",
        "ws/ws2/report.json",
        "ws/ws2/review.json",
        EVENTS_PATH,
    ] {
        out.push((p.to_string(), ws.read_file(p, None).unwrap()));
    }
    out
}

pub fn assert_same_state(a: &Path, b: &Path) {
    let (a, b) = (terminal_state(a), terminal_state(b));
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{name} differs");
    }
}

pub fn crash_restart_equivalence() {
    let straight = tempfile::tempdir().unwrap();
    drop(super::run_sofa(straight.path()));

    let crashy = tempfile::tempdir().unwrap();
    let reopen = |dir: &Path| {
        Engine::open(
            dir,
            super::scripted("sofa.fixture.json"),
            super::toolbox(Some("sofa.toolfix.json")),
        )
        .unwrap()
    };
    let run_to_idle = |dir: &Path| loop {
        // A fresh process for every tick.
        let mut engine = reopen(dir);
        if engine.tick().unwrap().is_idle() {
            break;
        }
    };
    let script = super::sofa_script();
    {
        let mut engine = super::sofa_engine(crashy.path());
        engine.start(&script.brief, &[]).unwrap();
    }
    run_to_idle(crashy.path());
    for step in &script.steps {
        {
            let mut engine = reopen(crashy.path());
            match step {
                UserStep::Say(text) => {
                    engine.handle_user_message(text, &[]).unwrap();
                }
                UserStep::Approve(sel) => {
                    let d = sel.decisions(engine.project());
                    engine.approve_goals(&AgentId::user(), &d).unwrap();
                }
            }
        }
        run_to_idle(crashy.path());
    }
    assert_same_state(straight.path(), crashy.path());
}

pub fn premature_completion_rejected(scenarios: u64) {
    for seed in 0..scenarios {
        let mut rng = StdRng::seed_from_u64(seed);
        let n_reviewers = rng.gen_range(1..=3);
        let (kind, entries) = scenario(&mut rng, n_reviewers);
        let config = EngineConfig {
            review: ReviewConfig {
                n_reviewers,
                ..ReviewConfig::default()
            },
            ..EngineConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let engine = super::one_workstream_engine(dir.path(), config, &fixture(entries));

        let traj = engine.trajectory("ws1").unwrap();
        let marks: Vec<_> = traj
            .iter()
            .filter(|r| matches!(&r.entry, Entry::Action { action } if action.label() == "mark_complete"))
            .collect();
        assert!(
            !marks.is_empty(),
            "seed {seed} ({kind:?}): no completion attempt recorded"
        );
        for m in marks {
            assert!(!m.accepted, "seed {seed} ({kind:?})");
            assert!(m.outcome.contains("GateViolation"), "seed {seed}: {}", m.outcome);
        }
        let ws = engine.workstream("ws1").unwrap();
        assert_ne!(ws.status, WorkstreamStatus::Completed, "seed {seed} ({kind:?})");
        assert!(ws.transitions.iter().all(|t| t.to != WorkstreamStatus::Completed));
        assert_ne!(engine.load_report("ws1").unwrap().status, ReportStatus::Final);
    }
}

pub fn perpetual_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = std::fs::read(super::fixture("perpetual_reject.fixture.json")).unwrap();
    let engine = super::one_workstream_engine(dir.path(), EngineConfig::default(), &bytes);

    let ws = engine.workstream("ws1").unwrap();
    assert_eq!(ws.status, WorkstreamStatus::Unfinished);
    assert_eq!(ws.sessions.len(), 1);
    let session = &engine.reviews()[&ws.sessions[0]];
    assert_eq!(session.status, SessionStatus::Stalled);
    assert_eq!(session.rounds.len(), 5);
    assert!(session.escalation.is_some());
    assert!(ws.warnings.iter().any(|w| w.contains("5 round(s)")));

    assert_eq!(engine.project().alerts.len(), 1);
    let alerts = engine
        .bus()
        .log()
        .unwrap()
        .into_iter()
        .filter(|m| m.kind == MessageKind::Alert)
        .count();
    assert_eq!(alerts, 1);

    // The review file carries the whole history.
    let review: serde_json::Value =
        serde_json::from_slice(&engine.workspace().read_file(&review_path("ws1"), None).unwrap()).unwrap();
    assert_eq!(review["sessions"][0]["rounds"].as_array().unwrap().len(), 5);
    // Nothing stepped after the stall.
    assert!(engine.agents()[&AgentId::new("ws1.coordinator")].is_terminated());
}

/// Verdict alphabet: approve, a reject whose issue is new every round,
/// and a malformed reject that falls back to the no-verdict issue.
fn verdict(choice: u32, round: u32) -> Verdict {
    match choice {
        0 => Verdict::Approve,
        1 => Verdict::Reject {
            issues: vec![IssueDraft {
                severity: IssueSeverity::Blocking,
                location: "b1".into(),
                text: format!("objection {round}"),
            }],
        },
        _ => Verdict::Reject { issues: Vec::new() },
    }
}

/// Every verdict sequence for 2 reviewers over 3 rounds ends the session.
pub fn short_verdict_sequences() {
    let config = ReviewConfig {
        n_reviewers: 2,
        max_rounds: 3,
        stall_window: 2,
    };
    let reviewers = vec![AgentId::new("r1"), AgentId::new("r2")];
    let slots = (config.n_reviewers as u32) * config.max_rounds;
    let total = 3u32.pow(slots);
    assert_eq!(total, 729);
    let (mut approved, mut stalled) = (0, 0);
    for code in 0..total {
        let digits: Vec<u32> = (0..slots).map(|i| (code / 3u32.pow(i)) % 3).collect();
        let mut s = ReviewSession::open("s", "ws", reviewers.clone(), &config).unwrap();
        for round in 0..config.max_rounds {
            if s.is_terminal() {
                break;
            }
            let mut k = 0;
            s.run_round(round + 1, |_| {
                let v = verdict(digits[(round * 2 + k) as usize], round);
                k += 1;
                v
            })
            .unwrap();
        }
        assert!(s.rounds.len() as u32 <= config.max_rounds);
        match s.status {
            SessionStatus::Approved => {
                approved += 1;
                assert!(s.latest_round().unwrap().unanimous());
            }
            SessionStatus::Stalled => stalled += 1,
            SessionStatus::Open => panic!("sequence {digits:?} left the session open"),
        }
    }
    assert_eq!(approved + stalled, total);
    assert!(approved > 0 && stalled > 0);
}

pub fn abandoned(dir: &Path) -> Engine {
    let bytes = std::fs::read(super::fixture("abandon.fixture.json")).unwrap();
    super::one_workstream_engine(dir, EngineConfig::default(), &bytes)
}

pub fn failed_workstream_readable() {
    let dir = tempfile::tempdir().unwrap();
    let engine = abandoned(dir.path());
    let ws = engine.workstream("ws1").unwrap().clone();
    assert_eq!(ws.status, WorkstreamStatus::Failed);
    assert_eq!(
        ws.summary.as_deref(),
        Some("The kernel diverges on every input; no usable result.")
    );
    drop(engine);

    // A fresh reader sees the same files and trajectory.
    let engine = Engine::open(
        dir.path(),
        super::scripted("abandon.fixture.json"),
        super::toolbox(None),
    )
    .unwrap();
    assert_eq!(engine.workstream("ws1").unwrap(), &ws);
    let report = engine.load_report("ws1").unwrap();
    assert_eq!(report.blocks.len(), 2);
    let run: serde_json::Value =
        serde_json::from_slice(&engine.workspace().read_file("ws/ws1/runs/1.json", None).unwrap()).unwrap();
    assert_eq!(run["exit_code"], 3);
    assert_eq!(run["stdout"], "kernel diverges\n");
    let labels: Vec<String> = engine
        .trajectory("ws1")
        .unwrap()
        .iter()
        .filter_map(|r| match &r.entry {
            Entry::Action { action } => Some(action.label()),
            _ => None,
        })
        .collect();
    assert_eq!(
        labels,
        ["update_report", "call_tool:execute_code", "update_report", "abandon"]
    );

    let update = engine
        .bus()
        .log()
        .unwrap()
        .into_iter()
        .find(|m| m.kind == MessageKind::StatusUpdate && m.sender == AgentId::new("ws1.coordinator"))
        .unwrap();
    assert!(update.body.contains("Failed"));
    assert!(load_project(dir.path()).is_ok());
}

pub const WORKSTREAMS: usize = 8;
const TOTAL: usize = 1000;

fn id(s: &str) -> AgentId {
    AgentId::new(s)
}

/// user -> pc -> ws{k} -> {ws{k}.a, ws{k}.b}
pub fn bus(dir: &Path) -> Bus {
    let ws = Arc::new(Workspace::open(dir, Arc::new(Clock::logical())).unwrap());
    let bus = Bus::new(ws);
    bus.register(id("pc"), AgentId::user()).unwrap();
    for k in 0..WORKSTREAMS {
        let c = format!("ws{k}");
        bus.register(id(&c), id("pc")).unwrap();
        bus.register(id(&format!("{c}.a")), id(&c)).unwrap();
        bus.register(id(&format!("{c}.b")), id(&c)).unwrap();
    }
    bus
}

/// Legal (sender, recipient, kind) edges inside workstream `k`.
fn edges(k: usize) -> Vec<(AgentId, AgentId, MessageKind)> {
    let c = id(&format!("ws{k}"));
    let a = id(&format!("ws{k}.a"));
    let b = id(&format!("ws{k}.b"));
    vec![
        (c.clone(), a.clone(), MessageKind::Instruction),
        (c.clone(), b.clone(), MessageKind::Instruction),
        (a.clone(), c.clone(), MessageKind::StatusUpdate),
        (b.clone(), c.clone(), MessageKind::StatusUpdate),
        (c.clone(), id("pc"), MessageKind::StatusUpdate),
        (a, id("pc"), MessageKind::Escalation),
        (b, id("pc"), MessageKind::Escalation),
    ]
}

/// Eight workstreams send 1000 messages concurrently while two pollers drain.
pub fn concurrent_bus_load() {
    let dir = tempfile::tempdir().unwrap();
    let bus = Arc::new(bus(dir.path()));
    let received: Mutex<Vec<Message>> = Mutex::new(Vec::new());
    let sent: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let done = AtomicBool::new(false);
    let recipients: Vec<AgentId> = bus.chart().agents().cloned().collect();

    std::thread::scope(|s| {
        // Pollers drain mailboxes while senders are still running.
        for half in 0..2 {
            let (bus, received, done, recipients) = (&bus, &received, &done, &recipients);
            s.spawn(move || loop {
                let finished = done.load(Ordering::SeqCst);
                let max = if finished { usize::MAX } else { 7 };
                for r in recipients.iter().skip(half).step_by(2) {
                    let got = bus.poll(r, max).unwrap();
                    received.lock().unwrap().extend(got);
                }
                if finished {
                    break;
                }
            });
        }
        let senders: Vec<_> = (0..WORKSTREAMS)
            .map(|k| {
                let (bus, sent) = (&bus, &sent);
                s.spawn(move || {
                    let mut rng = StdRng::seed_from_u64(k as u64);
                    let edges = edges(k);
                    for i in 0..TOTAL / WORKSTREAMS {
                        let (from, to, kind) = &edges[rng.gen_range(0..edges.len())];
                        let m = bus
                            .send(from, Outgoing::new(to.clone(), *kind, format!("{k}:{i}")))
                            .unwrap();
                        sent.lock().unwrap().push(m);
                    }
                })
            })
            .collect();
        for h in senders {
            h.join().unwrap();
        }
        done.store(true, Ordering::SeqCst);
    });

    let received = received.into_inner().unwrap();
    let sent: BTreeSet<String> = sent.into_inner().unwrap().into_iter().collect();
    assert_eq!(sent.len(), TOTAL);
    let got: BTreeSet<String> = received.iter().map(|m| m.id.clone()).collect();
    assert_eq!(received.len(), TOTAL, "duplicates or losses");
    assert_eq!(got, sent);
    assert_eq!(bus.total_pending(), 0);

    // Per (sender, recipient): delivered in send order with gap-free seqs.
    let mut by_pair: BTreeMap<(AgentId, AgentId), Vec<&Message>> = BTreeMap::new();
    for m in &received {
        by_pair
            .entry((m.sender.clone(), m.recipient.clone()))
            .or_default()
            .push(m);
    }
    let mut recipient_order: BTreeMap<AgentId, Vec<&Message>> = BTreeMap::new();
    for m in &received {
        recipient_order.entry(m.recipient.clone()).or_default().push(m);
    }
    for msgs in recipient_order.values() {
        let mut last: BTreeMap<&AgentId, u64> = BTreeMap::new();
        for m in msgs {
            let prev = last.insert(&m.sender, m.seq).unwrap_or(0);
            assert_eq!(m.seq, prev + 1, "{} -> {} out of order", m.sender, m.recipient);
        }
    }
    for ((from, _), msgs) in &by_pair {
        let counters: Vec<usize> = msgs
            .iter()
            .map(|m| m.body.split(':').nth(1).unwrap().parse().unwrap())
            .collect();
        let mut sorted = counters.clone();
        sorted.sort();
        assert_eq!(counters, sorted, "{from}");
    }
    assert_eq!(bus.log().unwrap().len(), TOTAL);
}

pub fn escalations_reach_ancestors() {
    let dir = tempfile::tempdir().unwrap();
    let bus = bus(dir.path());
    let chart = bus.chart();
    let agents: Vec<AgentId> = chart.agents().cloned().collect();
    for from in &agents {
        for to in agents.iter().chain([&AgentId::user()]) {
            let r = bus.send(from, Outgoing::new(to.clone(), MessageKind::Escalation, "help"));
            if chart.is_ancestor(to, from) {
                assert!(r.is_ok(), "{from} -> {to}");
            } else {
                assert!(
                    matches!(r, Err(BusError::RoutingViolation { .. })),
                    "{from} -> {to}: {r:?}"
                );
            }
        }
        // escalate() always goes one level up.
        let m = bus.escalate(from, "up", Vec::new()).unwrap();
        let log = bus.log().unwrap();
        let sent = log.iter().find(|x| x.id == m).unwrap();
        assert_eq!(Some(&sent.recipient), chart.parent(from));
    }
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

/// Render, parse and re-render `cases` generated reports.
pub fn structured_round_trip(cases: u32) {
    runner(cases)
        .run(&clean_report(), |report| {
            let bytes = render(&report, RenderFormat::Structured);
            assert_eq!(bytes, report.to_json());
            let back = Report::from_json(&bytes).unwrap();
            assert_eq!(back, report);
            assert_eq!(back.to_json(), bytes);
            Ok(())
        })
        .unwrap();
}

/// Plants one defect in each of `cases` clean reports; blocking classes
/// must never be missed.
pub fn defect_corpus(cases: u32) {
    runner(cases)
        .run(&(clean_report(), seed()), |(report, seed)| {
            let files = files();
            let lookup = move |p: &str| files.get(p).copied();
            assert_eq!(validate_as_final(&report, &lookup), vec![]);

            let mut bad = report.clone();
            let (kind, blocking) = plant(&mut bad, seed);
            let defects = validate_as_final(&bad, &lookup);
            let found = defects.iter().find(|d| d.kind == kind);
            assert!(found.is_some(), "{seed:?} missed: {defects:?}");
            let expected = if blocking { Severity::Blocking } else { Severity::Minor };
            assert_eq!(found.unwrap().severity, expected);
            assert_eq!(has_blocking(&defects), blocking);
            Ok(())
        })
        .unwrap();
}
