//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use workbench_core::bus::AgentId;
use workbench_core::engine::{
    is_project_dir, load_project, run_final_answer_mode, Engine, EngineConfig, FinalAnswerOptions, GoalDecision,
    GoalStatus,
};
use workbench_core::tools::{Toolbox, ToolsConfig};

use crate::config::{ApiConfig, BackendConfig};

/// Production time limit for final-answer runs; internal evaluations used
/// 24 h, and 48 h is the longer setting.
pub const DEFAULT_TIME_LIMIT: &str = "24h";

#[derive(Debug, Parser)]
#[command(name = "workbench", version, about = "Hierarchical multi-agent research workbench")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an interactive project; chat on stdin, replies on stdout.
    ///
    /// Lines are sent to the project coordinator as chat, except
    /// `/approve all|<goal ids>`, `/edit <goal id> <new wording>`,
    /// `/status` and `/quit`.
    Run {
        #[arg(long)]
        brief: PathBuf,
        /// `scripted:<fixture>`, `wire` or `wire:<dialect>`.
        #[arg(long)]
        backend: String,
        /// Project directory; an existing project there is resumed.
        #[arg(long, default_value = "workbench-project")]
        dir: PathBuf,
        /// `.toolfix.json` to use for literature search and fetch.
        #[arg(long)]
        tools_fixture: Option<PathBuf>,
    },
    /// Solve one problem in final-answer mode and write the answer JSON.
    Bench {
        #[arg(long)]
        problem: PathBuf,
        /// Wall-clock limit such as `30s`, `24h` or `48h`.
        #[arg(long, default_value = DEFAULT_TIME_LIMIT, value_parser = parse_limit)]
        time_limit: Duration,
        #[arg(long)]
        backend: String,
        #[arg(long)]
        out: PathBuf,
        /// Project directory; defaults to a fresh directory under the system temp dir.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        tools_fixture: Option<PathBuf>,
    },
    /// Print a summary of a project directory.
    Inspect { project_dir: PathBuf },
}

fn parse_limit(s: &str) -> Result<Duration, String> {
    let d = humantime::parse_duration(s).map_err(|e| e.to_string())?;
    if d.is_zero() {
        return Err("time limit must be positive".into());
    }
    Ok(d)
}

/// Parses `args` and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    let backend = |spec: &str| match BackendConfig::from_spec(spec) {
        Ok(b) => Ok(b),
        Err(e) => {
            eprintln!("error: --backend: {e}");
            Err(ExitCode::from(2))
        }
    };
    let result = match cli.command {
        Command::Serve { config } => serve(&config),
        Command::Run {
            brief,
            backend: spec,
            dir,
            tools_fixture,
        } => match backend(&spec) {
            Ok(b) => run(&brief, b, &dir, tools_fixture),
            Err(code) => return code,
        },
        Command::Bench {
            problem,
            time_limit,
            backend: spec,
            out,
            dir,
            tools_fixture,
        } => match backend(&spec) {
            Ok(b) => bench(&problem, time_limit, b, &out, dir, tools_fixture),
            Err(code) => return code,
        },
        Command::Inspect { project_dir } => inspect(&project_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn serve(config: &Path) -> anyhow::Result<()> {
    let config = ApiConfig::load(config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let server = crate::server::serve(config).await?;
        eprintln!("listening on {}", server.url());
        tokio::signal::ctrl_c().await?;
        eprintln!("shutting down");
        server.shutdown().await?;
        Ok(())
    })
}

fn toolbox(fixture: Option<PathBuf>) -> anyhow::Result<std::sync::Arc<Toolbox>> {
    let config = ToolsConfig {
        fixture,
        ..ToolsConfig::default()
    };
    Ok(std::sync::Arc::new(Toolbox::from_config(&config)?))
}

fn run(brief: &Path, backend: BackendConfig, dir: &Path, tools_fixture: Option<PathBuf>) -> anyhow::Result<()> {
    let brief = std::fs::read_to_string(brief).with_context(|| format!("reading {}", brief.display()))?;
    let model = backend.build()?;
    let tools = toolbox(tools_fixture)?;
    let mut engine = if is_project_dir(dir) {
        Engine::open(dir, model, tools)?
    } else {
        let mut e = Engine::create(dir, "p1", EngineConfig::default(), model, tools)?;
        e.start(&brief, &[])?;
        e
    };
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    let (mut shown_chat, mut shown_alerts) = (0, 0);
    loop {
        engine.run_until_idle(10_000)?;
        let p = engine.project();
        for c in &p.chat[shown_chat..] {
            if c.to.is_user() {
                writeln!(stdout, "[{}] {}", c.from, c.text)?;
            }
        }
        for a in &p.alerts[shown_alerts..] {
            writeln!(stdout, "[ALERT] {}", a.body)?;
        }
        (shown_chat, shown_alerts) = (p.chat.len(), p.alerts.len());
        write!(stdout, "> ")?;
        stdout.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            return Ok(());
        }
        let line = line.trim();
        let mut words = line.split_whitespace();
        let outcome = match words.next() {
            None => continue,
            Some("/quit") => return Ok(()),
            Some("/status") => {
                print_summary(engine.dir(), &mut stdout)?;
                continue;
            }
            Some("/approve") => {
                let ids: Vec<String> = match words.next() {
                    Some("all") | None => engine
                        .project()
                        .goals
                        .iter()
                        .filter(|g| g.status == GoalStatus::Proposed)
                        .map(|g| g.id.clone())
                        .collect(),
                    Some(first) => std::iter::once(first).chain(words).map(str::to_string).collect(),
                };
                let d = ids.into_iter().map(|i| (i, GoalDecision::Approve)).collect();
                engine.approve_goals(&AgentId::user(), &d).map(|_| ())
            }
            Some("/edit") => match (words.next(), line.splitn(3, ' ').nth(2)) {
                (Some(id), Some(text)) => {
                    let d = BTreeMap::from([(id.to_string(), GoalDecision::Edit(text.to_string()))]);
                    engine.approve_goals(&AgentId::user(), &d).map(|_| ())
                }
                _ => {
                    writeln!(stdout, "usage: /edit <goal id> <new wording>")?;
                    continue;
                }
            },
            Some(_) => engine.handle_user_message(line, &[]).map(|_| ()),
        };
        if let Err(e) = outcome {
            writeln!(stdout, "! {e}")?;
        }
    }
}

fn bench(
    problem: &Path,
    limit: Duration,
    backend: BackendConfig,
    out: &Path,
    dir: Option<PathBuf>,
    tools_fixture: Option<PathBuf>,
) -> anyhow::Result<()> {
    let started = Instant::now();
    let text = std::fs::read_to_string(problem).with_context(|| format!("reading {}", problem.display()))?;
    if text.trim().is_empty() {
        bail!("{} is empty", problem.display());
    }
    let dir = match dir {
        Some(d) => d,
        None => tempfile::Builder::new().prefix("workbench-bench-").tempdir()?.keep(),
    };
    eprintln!("project directory: {}", dir.display());
    let options = FinalAnswerOptions {
        dir: dir.clone(),
        project_id: "bench".into(),
        config: EngineConfig {
            clock: workbench_core::clock::ClockMode::Wall,
            ..EngineConfig::default()
        },
        deadline: limit,
    };
    let answer = run_final_answer_mode(options, backend.build()?, toolbox(tools_fixture)?, &text)?;
    let doc = json!({
        "answer": answer.text,
        "forced": answer.forced,
        "produced_at": answer.produced_at,
        "error": answer.error,
        "time_limit_seconds": limit.as_secs_f64(),
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "project_dir": dir,
    });
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    std::fs::write(out, bytes).with_context(|| format!("writing {}", out.display()))?;
    if let Some(e) = answer.error {
        bail!("{e}");
    }
    Ok(())
}

fn print_summary(dir: &Path, out: &mut impl Write) -> anyhow::Result<()> {
    let (p, workstreams) = load_project(dir)?;
    writeln!(out, "project {} ({:?}, {:?})", p.id, p.mode, p.state)?;
    if !p.research_question.is_empty() {
        writeln!(out, "question: {}", p.research_question)?;
    }
    for g in &p.goals {
        writeln!(out, "goal {} [{:?}] {}", g.id, g.status, g.text)?;
    }
    for w in workstreams.values() {
        writeln!(out, "workstream {} [{:?}] goal {}", w.id, w.status, w.goal)?;
        for warning in &w.warnings {
            writeln!(out, "  warning: {warning}")?;
        }
    }
    writeln!(out, "chat messages: {}, alerts: {}", p.chat.len(), p.alerts.len())?;
    if let Some(a) = &p.final_answer {
        writeln!(out, "final answer (forced: {}): {}", a.forced, a.text)?;
    }
    Ok(())
}

fn inspect(dir: &Path) -> anyhow::Result<()> {
    if !is_project_dir(dir) {
        bail!("{} is not a project directory", dir.display());
    }
    print_summary(dir, &mut std::io::stdout())
}
