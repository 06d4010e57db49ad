//! How agent actions change the project.

use serde_json::{json, Value};

use super::{
    default_tools, Engine, EngineError, Goal, GoalStatus, ProjectMode, ProjectPhase, Workstream, WorkstreamStatus,
};
use crate::agent::{clip, spawn_agent, Action, ActionExecutor, AgentRole, AgentSpec, Executed, REVIEWER_TOOLS};
use crate::bus::{AgentId, MessageKind, Outgoing};
use crate::report::{
    has_blocking, report_path, validate_as_final, validate_report, ProvenanceKind, Reference, Report, ReportDelta,
    ReportStatus,
};
use crate::review::{RecordedVerdict, ReviewSession, SessionStatus, Verdict};
use crate::tools::CAPABILITY_TOOLS;
use crate::workspace::normalize_path;

type Outcome = Result<Executed, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl ActionExecutor for Engine {
    fn execute(&mut self, agent: &AgentSpec, action: &Action) -> Outcome {
        match action {
            Action::CallTool { name, args } => self.call_tool(agent, name, args),
            Action::SendMessage(out) => self.send_message(agent, out),
            Action::UpdateReport(delta) => self.update_report(agent, delta),
            Action::SpawnSubAgent(req) => self.spawn_sub_agent(agent, req),
            Action::SubmitForReview { report_version } => self.submit_for_review(agent, *report_version),
            Action::MarkComplete => self.mark_complete(agent),
            Action::Escalate { body, attachments } => {
                let id = self
                    .bus
                    .escalate(&agent.id, body.clone(), attachments.clone())
                    .map_err(err)?;
                Ok(Executed::quiet(format!("escalated as {id}")))
            }
            Action::GiveFinalAnswer { text } => self.give_final_answer(agent, text),
            Action::ProposeGoals { question, goals } => self.propose_goals(agent, question, goals),
            Action::CreateWorkstream { goal, instructions } => self.create_workstream(agent, goal, instructions),
            Action::Abandon { summary } => {
                let ws = workstream_of(agent)?;
                self.conclude_workstream(&ws, WorkstreamStatus::Failed, summary)
                    .map_err(err)?;
                Ok(Executed::quiet(format!("workstream {ws} failed")))
            }
            Action::Wait => Ok(Executed::quiet("waiting")),
        }
    }

    fn concluded(&self, agent: &AgentId) -> bool {
        self.concluded.contains(agent)
    }
}

fn workstream_of(agent: &AgentSpec) -> Result<String, String> {
    agent
        .workstream
        .clone()
        .ok_or_else(|| format!("{} does not belong to a workstream", agent.id))
}

impl Engine {
    fn call_tool(&mut self, agent: &AgentSpec, name: &str, args: &Value) -> Outcome {
        let scope = match &agent.workstream {
            Some(ws) => format!("ws/{ws}"),
            None => format!("agents/{}", agent.id),
        };
        let mut value = self
            .tools
            .invoke(&self.workspace, &agent.id, &scope, name, args)
            .map_err(err)?;
        if name == "fetch_document" {
            if let Some(uri) = args.get("uri").and_then(Value::as_str) {
                self.fetched.insert(uri.to_string());
            }
        }
        let saved = value
            .get("saved_to")
            .and_then(Value::as_str)
            .map(|p| format!("; saved to {p}"))
            .unwrap_or_default();
        let summary = match value.get("exit_code").and_then(Value::as_i64) {
            Some(code) => format!("{name} exited {code}{saved}"),
            None => format!("{name} ok{saved}"),
        };
        // Resource usage varies run to run; keep it out of the transcript.
        strip_usage(&mut value);
        let feedback = clip(&serde_json::to_string(&value).expect("json"), 6000);
        Ok(Executed::with_feedback(summary, feedback))
    }

    fn send_message(&mut self, agent: &AgentSpec, out: &Outgoing) -> Outcome {
        match out.kind {
            MessageKind::FinalAnswer => return Err("use give_final_answer for the final answer".into()),
            MessageKind::ReviewRequest => return Err("review requests are issued by submit_for_review".into()),
            MessageKind::Alert => return Err("use escalate to alert the user".into()),
            _ => {}
        }
        if let Some(st) = self.agents.get(&out.recipient) {
            if st.is_terminated() {
                return Err(format!(
                    "{} has concluded and no longer receives messages",
                    out.recipient
                ));
            }
        }
        if out.kind == MessageKind::ReviewVerdict {
            self.take_verdict(agent, &out.body)?;
        }
        let id = self.bus.send(&agent.id, out.clone()).map_err(err)?;
        Ok(Executed::quiet(format!(
            "sent {:?} {id} to {}",
            out.kind, out.recipient
        )))
    }

    fn take_verdict(&mut self, agent: &AgentSpec, body: &str) -> Result<(), String> {
        let verdict = Verdict::from_body(body)
            .or_else(|| Verdict::parse_text(body))
            .ok_or("a verdict must be APPROVE or REJECT with issues")?;
        verdict.check()?;
        let session = self
            .reviews
            .values_mut()
            .find(|s| s.awaiting().contains(&agent.id))
            .ok_or("no review round is waiting for your verdict")?;
        session
            .record_verdict(&agent.id, RecordedVerdict::from(&verdict))
            .map_err(err)?;
        self.reviewer_idle.remove(&agent.id);
        Ok(())
    }

    fn running_workstream(&self, agent: &AgentSpec) -> Result<String, String> {
        let ws = workstream_of(agent)?;
        let status = self
            .workstreams
            .get(&ws)
            .map(|w| w.status)
            .ok_or("unknown workstream")?;
        match status {
            WorkstreamStatus::Running => Ok(ws),
            WorkstreamStatus::InReview => Err("the report is under review; wait for the verdicts".into()),
            s => Err(format!("workstream {ws} is {s:?}")),
        }
    }

    fn update_report(&mut self, agent: &AgentSpec, delta: &ReportDelta) -> Outcome {
        let ws = self.running_workstream(agent)?;
        let path = report_path(&ws);
        let latest = self.workspace.latest_version(&path).ok_or("report missing")?;
        let mut report = self.load_report(&ws).map_err(err)?;

        let mut attachments = Vec::new();
        for (rel, content) in &delta.attachments {
            let p = normalize_path(&format!("ws/{ws}/{rel}")).map_err(err)?;
            if p == path || p.starts_with(&format!("ws/{ws}/review")) {
                return Err(format!("attachment {rel} would overwrite a managed file"));
            }
            attachments.push((p, content));
        }
        // Dry run so a bad delta leaves no stray attachments behind.
        {
            let workspace = self.workspace.clone();
            let pending: Vec<&String> = attachments.iter().map(|(p, _)| p).collect();
            let lookup = move |p: &str| {
                let v = workspace.latest_version(p);
                if pending.iter().any(|q| q.as_str() == p) {
                    Some(v.unwrap_or(0) + 1)
                } else {
                    v
                }
            };
            report.clone().apply(delta, &lookup).map_err(err)?;
        }
        for (p, content) in &attachments {
            self.workspace
                .write_file(p, content.as_bytes(), agent.id.as_str(), None)
                .map_err(err)?;
        }
        let workspace = self.workspace.clone();
        let lookup = move |p: &str| workspace.latest_version(p);
        report.apply(delta, &lookup).map_err(err)?;
        for r in report.references.iter_mut() {
            if let Reference::External { uri, verified, .. } = r {
                *verified = *verified || self.fetched.contains(uri);
            }
        }
        let v = self
            .workspace
            .write_file(&path, &report.to_json(), agent.id.as_str(), Some(latest))
            .map_err(err)?;
        self.events
            .emit(
                super::EventKind::ReportUpdated,
                json!({"workstream": ws, "version": v.version, "status": report.status}),
            )
            .map_err(err)?;
        let defects = validate_report(&report, &lookup);
        let mut feedback = format!(
            "Report updated to version {} ({} blocks).",
            v.version,
            report.blocks.len()
        );
        for d in &defects {
            feedback.push_str(&format!("\n- {:?} at {}: {}", d.kind, d.location, d.detail));
        }
        Ok(Executed::with_feedback(
            format!("report version {}", v.version),
            feedback,
        ))
    }

    fn spawn_sub_agent(&mut self, agent: &AgentSpec, req: &crate::agent::SpawnRequest) -> Outcome {
        if !matches!(
            req.role,
            AgentRole::LiteratureAgent | AgentRole::CodingAgent | AgentRole::ProverAgent
        ) {
            return Err(format!(
                "SpawnDenied: {} agents are created by the engine",
                req.role.tag()
            ));
        }
        if let Some(t) = req
            .tool_allowlist
            .iter()
            .find(|t| !CAPABILITY_TOOLS.contains(&t.as_str()))
        {
            return Err(format!("unknown tool {t}"));
        }
        let prefix = match &agent.workstream {
            Some(ws) => format!("{ws}.{}", req.role.short()),
            None => req.role.short().to_string(),
        };
        let n = self
            .agents
            .keys()
            .filter(|id| {
                id.as_str()
                    .strip_prefix(&prefix)
                    .is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit()) && !rest.is_empty())
            })
            .count()
            + 1;
        let tools = if req.tool_allowlist.is_empty() {
            default_tools(req.role)
        } else {
            req.tool_allowlist.iter().cloned().collect()
        };
        let spec = AgentSpec {
            id: AgentId::new(format!("{prefix}{n}")),
            role: req.role,
            prompt_profile: req.prompt_profile.clone().unwrap_or_else(|| req.role.tag().to_string()),
            tool_allowlist: tools,
            parent: agent.id.clone(),
            backend_binding: req.backend_binding.clone(),
            instructions: req.instructions.clone(),
            workstream: agent.workstream.clone(),
        };
        let id = spawn_agent(&mut self.agents, &self.bus, spec).map_err(err)?;
        Ok(Executed::with_feedback(
            format!("spawned {id}"),
            format!("Spawned {id}."),
        ))
    }

    fn submit_for_review(&mut self, agent: &AgentSpec, version: Option<u32>) -> Outcome {
        let ws = self.running_workstream(agent)?;
        let path = report_path(&ws);
        let latest = self.workspace.latest_version(&path).ok_or("report missing")?;
        if version.is_some_and(|v| v != latest) {
            return Err(format!("only the latest report version ({latest}) can be submitted"));
        }
        let report = self.load_report(&ws).map_err(err)?;
        let workspace = self.workspace.clone();
        let defects = validate_as_final(&report, &move |p: &str| workspace.latest_version(p));
        if has_blocking(&defects) {
            let list: Vec<String> = defects
                .iter()
                .filter(|d| d.severity == crate::report::Severity::Blocking)
                .map(|d| format!("{:?} at {}", d.kind, d.location))
                .collect();
            return Err(format!("the report has blocking defects: {}", list.join(", ")));
        }

        let open = self.workstreams[&ws]
            .sessions
            .last()
            .filter(|s| self.reviews.get(*s).is_some_and(|s| !s.is_terminal()))
            .cloned();
        let sid = match open {
            Some(sid) => sid,
            None => self.open_session(agent, &ws)?,
        };
        let session = self.reviews.get_mut(&sid).expect("session exists");
        session.begin_round(latest).map_err(err)?;
        let round = session.rounds.len() + 1;
        let reviewers = session.reviewers.clone();
        self.transition(&ws, WorkstreamStatus::InReview).map_err(err)?;
        for r in &reviewers {
            self.reviewer_idle.remove(r);
            let body = format!(
                "Please review the working paper of workstream {ws} (round {round}, version {latest}) at {path}. \
Answer APPROVE, or REJECT with one issue per line as `- [blocking|minor] <block id>: <problem>`."
            );
            self.bus
                .send(
                    &agent.id,
                    Outgoing::new(r.clone(), MessageKind::ReviewRequest, body).with_attachments(vec![path.clone()]),
                )
                .map_err(err)?;
        }
        self.write_review_file(&ws).map_err(err)?;
        Ok(Executed::quiet(format!(
            "review round {round} of {sid} on version {latest}"
        )))
    }

    fn open_session(&mut self, agent: &AgentSpec, ws: &str) -> Result<String, String> {
        let k = self.workstreams[ws].sessions.len() + 1;
        let sid = format!("{ws}.s{k}");
        let goal = self.workstreams[ws].goal.clone();
        let mut reviewers = Vec::new();
        for i in 1..=self.config.review.n_reviewers {
            let spec = AgentSpec {
                id: AgentId::new(format!("{sid}.rev{i}")),
                role: AgentRole::Reviewer,
                prompt_profile: AgentRole::Reviewer.tag().into(),
                tool_allowlist: REVIEWER_TOOLS.iter().map(|s| s.to_string()).collect(),
                parent: agent.id.clone(),
                backend_binding: None,
                instructions: format!("Review the working paper of workstream {ws} (goal: {goal})."),
                workstream: Some(ws.to_string()),
            };
            reviewers.push(spawn_agent(&mut self.agents, &self.bus, spec).map_err(err)?);
        }
        let session = ReviewSession::open(sid.clone(), ws, reviewers, &self.config.review).map_err(err)?;
        self.reviews.insert(sid.clone(), session);
        self.workstreams.get_mut(ws).expect("exists").sessions.push(sid.clone());
        Ok(sid)
    }

    fn mark_complete(&mut self, agent: &AgentSpec) -> Outcome {
        let ws = workstream_of(agent)?;
        let w = self.workstreams.get(&ws).ok_or("unknown workstream")?.clone();
        let path = report_path(&ws);
        let latest = self.workspace.latest_version(&path).ok_or("report missing")?;
        let approved = w.sessions.last().and_then(|s| self.reviews.get(s)).is_some_and(|s| {
            s.status == SessionStatus::Approved && s.latest_round().is_some_and(|r| r.report_version == latest)
        });
        if w.status != WorkstreamStatus::InReview || !approved {
            return Err("GateViolation: the review session has not approved the latest report".into());
        }
        let mut report: Report = self.load_report(&ws).map_err(err)?;
        report.status = ReportStatus::Final;
        for n in report.annotations.iter_mut() {
            if n.provenance.kind == ProvenanceKind::Reviewer {
                n.superseded = true;
            }
        }
        let workspace = self.workspace.clone();
        let defects = validate_report(&report, &move |p: &str| workspace.latest_version(p));
        if has_blocking(&defects) {
            return Err("GateViolation: the final report has blocking defects".into());
        }
        let v = self
            .workspace
            .write_file(&path, &report.to_json(), agent.id.as_str(), Some(latest))
            .map_err(err)?;
        self.events
            .emit(
                super::EventKind::ReportUpdated,
                json!({"workstream": ws, "version": v.version, "status": report.status}),
            )
            .map_err(err)?;
        self.write_review_file(&ws).map_err(err)?;
        self.conclude_workstream(
            &ws,
            WorkstreamStatus::Completed,
            &format!("final report {path} version {}", v.version),
        )
        .map_err(err)?;
        Ok(Executed::quiet(format!(
            "workstream {ws} completed (report version {})",
            v.version
        )))
    }

    fn give_final_answer(&mut self, agent: &AgentSpec, text: &str) -> Outcome {
        if self.project.final_answer.is_some() {
            return Err("the final answer was already given".into());
        }
        if text.trim().is_empty() {
            return Err("the final answer is empty".into());
        }
        let id = self
            .bus
            .send(
                &agent.id,
                Outgoing::new(AgentId::user(), MessageKind::FinalAnswer, text),
            )
            .map_err(err)?;
        Ok(Executed::quiet(format!("final answer sent as {id}")))
    }

    fn propose_goals(&mut self, agent: &AgentSpec, question: &str, goals: &[String]) -> Outcome {
        if self.project.mode == ProjectMode::FinalAnswer {
            return Err("goals are fixed in final-answer mode".into());
        }
        let goals: Vec<&str> = goals.iter().map(|g| g.trim()).filter(|g| !g.is_empty()).collect();
        if goals.is_empty() {
            return Err("propose at least one goal".into());
        }
        if !question.trim().is_empty() {
            self.project.research_question = question.trim().to_string();
        }
        match self.project.state {
            ProjectPhase::Onboarding | ProjectPhase::GoalsProposed => {
                self.project.goals.retain(|g| g.status == GoalStatus::Approved);
                self.project.state = ProjectPhase::GoalsProposed;
            }
            ProjectPhase::Active => {}
        }
        let start = self.project.goals.len();
        let mut listed = Vec::new();
        for (i, text) in goals.iter().enumerate() {
            let goal = Goal {
                id: format!("g{}", start + i + 1),
                text: text.to_string(),
                status: GoalStatus::Proposed,
                workstreams: Vec::new(),
            };
            listed.push(format!("- {}: {}", goal.id, goal.text));
            self.project.goals.push(goal);
        }
        self.emit_goals().map_err(err)?;
        let body = format!(
            "Proposed research question: {}\nProposed goals:\n{}\nPlease approve, edit or discuss them.",
            self.project.research_question,
            listed.join("\n")
        );
        let id = self
            .bus
            .send(&agent.id, Outgoing::new(AgentId::user(), MessageKind::UserChat, body))
            .map_err(err)?;
        Ok(Executed::quiet(format!("proposed {} goal(s) in {id}", goals.len())))
    }

    fn create_workstream(&mut self, agent: &AgentSpec, goal: &str, instructions: &str) -> Outcome {
        if self.project.state != ProjectPhase::Active {
            return Err("workstreams can be created once goals are approved".into());
        }
        let key = goal.trim();
        let g = self
            .project
            .goals
            .iter()
            .find(|g| g.id == key || g.text.eq_ignore_ascii_case(key))
            .cloned()
            .ok_or_else(|| format!("unknown goal {key}"))?;
        if g.status != GoalStatus::Approved {
            return Err(EngineError::GoalNotApproved(g.id).to_string());
        }
        let ws = format!("ws{}", self.workstreams.len() + 1);
        let coordinator = AgentId::new(format!("{ws}.coordinator"));
        let assignment = format!(
            "Research question: {}\nGoal {}: {}\nInstructions: {}",
            self.project.research_question,
            g.id,
            g.text,
            instructions.trim()
        );
        let spec = AgentSpec {
            id: coordinator.clone(),
            role: AgentRole::WorkstreamCoordinator,
            prompt_profile: AgentRole::WorkstreamCoordinator.tag().into(),
            tool_allowlist: default_tools(AgentRole::WorkstreamCoordinator),
            parent: agent.id.clone(),
            backend_binding: None,
            instructions: assignment,
            workstream: Some(ws.clone()),
        };
        spawn_agent(&mut self.agents, &self.bus, spec).map_err(err)?;
        let path = report_path(&ws);
        self.workspace
            .write_file(
                &path,
                &Report::new(&ws, &g.text).to_json(),
                coordinator.as_str(),
                Some(0),
            )
            .map_err(err)?;
        self.workstreams.insert(
            ws.clone(),
            Workstream {
                id: ws.clone(),
                goal: g.id.clone(),
                coordinator: coordinator.clone(),
                instructions: instructions.trim().to_string(),
                status: WorkstreamStatus::Pending,
                report_path: path,
                warnings: Vec::new(),
                sessions: Vec::new(),
                summary: None,
                transitions: Vec::new(),
            },
        );
        self.project.workstreams.push(ws.clone());
        if let Some(goal) = self.project.goals.iter_mut().find(|x| x.id == g.id) {
            goal.workstreams.push(ws.clone());
        }
        self.events
            .emit(
                super::EventKind::WorkstreamStatus,
                json!({"workstream": ws, "status": WorkstreamStatus::Pending, "warnings": []}),
            )
            .map_err(err)?;
        Ok(Executed::with_feedback(
            format!("created {ws}"),
            format!("Created workstream {ws} led by {coordinator}."),
        ))
    }
}

fn strip_usage(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("usage");
            m.values_mut().for_each(strip_usage);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_usage),
        _ => {}
    }
}
