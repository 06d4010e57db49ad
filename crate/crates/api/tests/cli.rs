mod support;

use std::io::Write;
use std::process::Stdio;
use std::time::Duration;

use support::{bench, common, core_fixture, workbench};
use workbench_core::scenario::{GoalSelection, UserScript, UserStep};

fn code(args: &[&str]) -> i32 {
    workbench()
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .unwrap()
        .code()
        .unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(
        code(&[
            "bench",
            "--problem",
            "p",
            "--backend",
            "wire",
            "--out",
            "o",
            "--time-limit",
            "soon"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "bench",
            "--problem",
            "p",
            "--backend",
            "wire",
            "--out",
            "o",
            "--time-limit",
            "0s"
        ]),
        2
    );
    assert_eq!(
        code(&["bench", "--problem", "p", "--backend", "carrier-pigeon", "--out", "o"]),
        2
    );
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["inspect", dir.path().to_str().unwrap()]), 1);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&["serve", "--config", missing.to_str().unwrap()]), 1);
}

#[test]
fn bench_help_documents_the_time_limit() {
    let out = workbench().args(["bench", "--help"]).output().unwrap();
    let help = String::from_utf8(out.stdout).unwrap();
    assert!(help.contains("[default: 24h]"), "{help}");
    assert!(help.contains("48h"));
}

#[test]
fn quick_solve_is_not_forced() {
    let (code, answer, elapsed) = bench("fa_quick.fixture.json", "30s");
    assert_eq!(code, 0);
    assert_eq!(answer["forced"], false);
    assert!(answer["answer"].as_str().unwrap().contains("5050"));
    assert!(elapsed < Duration::from_secs(10));
}

#[test]
fn stalling_solver_gets_a_forced_answer() {
    let (code, answer, elapsed) = bench("fa_stall.fixture.json", "4s");
    assert_eq!(code, 0, "{answer}");
    assert_eq!(answer["forced"], true);
    assert!(answer["answer"].as_str().unwrap().starts_with("Best available answer"));
    assert!(elapsed < Duration::from_secs(4 + 2 + 1));
}

#[test]
fn interactive_run_matches_the_scripted_run() {
    let script = UserScript::parse(&std::fs::read(core_fixture("sofa.user.json")).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("brief.txt"), &script.brief).unwrap();
    let project = dir.path().join("project");
    let mut child = workbench()
        .arg("run")
        .arg("--brief")
        .arg(dir.path().join("brief.txt"))
        .arg("--backend")
        .arg(format!("scripted:{}", core_fixture("sofa.fixture.json").display()))
        .arg("--tools-fixture")
        .arg(core_fixture("sofa.toolfix.json"))
        .arg("--dir")
        .arg(&project)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        for step in &script.steps {
            match step {
                UserStep::Say(text) => writeln!(stdin, "{text}").unwrap(),
                UserStep::Approve(GoalSelection::All(_)) => writeln!(stdin, "/approve all").unwrap(),
                UserStep::Approve(GoalSelection::Ids(ids)) => writeln!(stdin, "/approve {}", ids.join(" ")).unwrap(),
            }
        }
        writeln!(stdin, "/quit").unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("[coordinator] "), "{stdout}");
    assert_eq!(stdout.matches("[ALERT] ").count(), 1, "{stdout}");

    let local = tempfile::tempdir().unwrap();
    drop(common::run_sofa(local.path()));
    common::checks::assert_same_state(&project, local.path());

    let inspect = workbench().arg("inspect").arg(&project).output().unwrap();
    assert!(inspect.status.success());
    let summary = String::from_utf8(inspect.stdout).unwrap();
    assert!(summary.contains("workstream ws1 [Completed]"), "{summary}");
    assert!(summary.contains("workstream ws2 [Unfinished]"), "{summary}");
}
