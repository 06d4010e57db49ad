#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use workbench_core::engine::{Engine, EngineConfig};
use workbench_core::model::load_script;
use workbench_core::model::ModelBackend;
use workbench_core::scenario::{drive, UserScript};
use workbench_core::tools::{Toolbox, ToolsConfig};

pub mod checks;
pub mod gate;
pub mod reports;

/// Resolves against the core crate from any crate in the workspace.
pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

pub fn scripted(name: &str) -> Arc<dyn ModelBackend> {
    Arc::new(load_script(&std::fs::read(fixture(name)).unwrap()).unwrap())
}

pub fn toolbox(toolfix: Option<&str>) -> Arc<Toolbox> {
    let config = ToolsConfig {
        fixture: toolfix.map(fixture),
        ..ToolsConfig::default()
    };
    Arc::new(Toolbox::from_config(&config).unwrap())
}

pub fn sofa_engine(dir: &Path) -> Engine {
    Engine::create(
        dir,
        "p1",
        EngineConfig::default(),
        scripted("sofa.fixture.json"),
        toolbox(Some("sofa.toolfix.json")),
    )
    .unwrap()
}

pub fn sofa_script() -> UserScript {
    UserScript::parse(&std::fs::read(fixture("sofa.user.json")).unwrap()).unwrap()
}

/// Runs the sofa walkthrough to completion in `dir`.
pub fn run_sofa(dir: &Path) -> Engine {
    let mut engine = sofa_engine(dir);
    drive(&mut engine, &sofa_script(), 200).unwrap();
    engine
}

pub mod build {
    //! Small builders for generated fixtures.

    use serde_json::{json, Value};

    pub fn call(name: &str, args: Value) -> Value {
        json!({ "name": name, "arguments": args })
    }

    pub fn entry(role: &str, agent: &str, contains: Option<&str>, calls: Vec<Value>) -> Value {
        let mut m = json!({ "agent_role": role, "agent": agent });
        if let Some(c) = contains {
            m["contains"] = json!(c);
        }
        json!({ "match": m, "respond": { "tool_calls": calls } })
    }

    pub fn text_entry(role: &str, agent: &str, contains: Option<&str>, text: &str) -> Value {
        let mut m = json!({ "agent_role": role, "agent": agent });
        if let Some(c) = contains {
            m["contains"] = json!(c);
        }
        json!({ "match": m, "respond": { "text": text } })
    }

    pub fn ws(contains: Option<&str>, calls: Vec<Value>) -> Value {
        entry("workstream_coordinator", "ws1.coordinator", contains, calls)
    }

    pub fn reviewer(session: &str, i: usize, contains: &str, text: &str) -> Value {
        text_entry("reviewer", &format!("ws1.{session}.rev{i}"), Some(contains), text)
    }

    /// Project coordinator that proposes one goal and opens ws1 for it.
    pub fn one_workstream_prelude() -> Vec<Value> {
        vec![
            entry(
                "project_coordinator",
                "coordinator",
                None,
                vec![call(
                    "propose_goals",
                    json!({ "question": "Does the kernel work?", "goals": ["Test the kernel"] }),
                )],
            ),
            entry(
                "project_coordinator",
                "coordinator",
                Some("Goals approved"),
                vec![call(
                    "create_workstream",
                    json!({ "goal": "g1", "instructions": "Test it." }),
                )],
            ),
        ]
    }

    pub fn exposition(text: &str) -> Value {
        call(
            "update_report",
            json!({ "title": "Kernel", "ops": [{ "op": "append", "kind": "exposition", "text": text }] }),
        )
    }

    pub fn paragraph(text: &str) -> Value {
        call(
            "update_report",
            json!({ "ops": [{ "op": "append", "kind": "paragraph", "text": text }] }),
        )
    }

    pub fn submit() -> Value {
        call("submit_for_review", json!({}))
    }

    pub fn mark_complete() -> Value {
        call("mark_complete", json!({}))
    }

    pub fn fixture(entries: Vec<Value>) -> Vec<u8> {
        serde_json::to_vec(&json!({ "strict": false, "entries": entries })).unwrap()
    }
}

/// Engine on a generated fixture, started and approved through one goal.
pub fn one_workstream_engine(dir: &Path, config: EngineConfig, fixture: &[u8]) -> Engine {
    let backend: Arc<dyn ModelBackend> = Arc::new(load_script(fixture).unwrap());
    let mut engine = Engine::create(dir, "p1", config, backend, toolbox(None)).unwrap();
    let script = UserScript {
        brief: "Please test the kernel.".into(),
        steps: vec![workbench_core::scenario::UserStep::Approve(
            workbench_core::scenario::GoalSelection::All("all".into()),
        )],
    };
    drive(&mut engine, &script, 200).unwrap();
    engine
}
