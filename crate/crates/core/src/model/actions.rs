//! Mapping model output onto agent actions.
//!
//! Structured tool calls are the primary channel. Protocol verbs such as
//! `update_report` or `mark_complete` are exposed to the model as tools and
//! turned into the matching [`Action`]; every other tool name must be in the
//! agent's allowlist and becomes [`Action::CallTool`].
//!
//! Plain text is accepted as a fallback. Any fenced block tagged `action`
//! holding `{"tool": <name>, "args": {...}}` is parsed exactly like a tool
//! call. Text without such blocks is interpreted by role: reviewers must start
//! with `APPROVE` or `REJECT`, the project coordinator is talking to the user,
//! and everyone else is reporting to their parent.

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Finish, ModelResponse, ToolCall, ToolSchema};
use crate::agent::{Action, AgentRole, SpawnRequest};
use crate::bus::{AgentId, MessageKind, Outgoing};
use crate::report::ReportDelta;
use crate::review::Verdict;

/// Tool names that map to protocol actions rather than capabilities.
pub const PROTOCOL_TOOLS: &[&str] = &[
    "send_message",
    "reply",
    "update_report",
    "spawn_agent",
    "submit_for_review",
    "mark_complete",
    "escalate",
    "give_final_answer",
    "propose_goals",
    "create_workstream",
    "abandon",
    "submit_verdict",
    "wait",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("tool {0:?} is not in the agent's allowlist")]
    DisallowedTool(String),
    #[error("unparseable action: {0}")]
    UnparseableAction(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedActions {
    pub actions: Vec<Action>,
    /// The model declined to answer; the agent loop decides what follows.
    pub refused: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FencedCall {
    tool: String,
    #[serde(default)]
    args: Value,
}

#[derive(Deserialize)]
struct TextArgs {
    text: String,
    #[serde(default)]
    attachments: Vec<String>,
}

#[derive(Deserialize)]
struct BodyArgs {
    body: String,
    #[serde(default)]
    attachments: Vec<String>,
}

#[derive(Deserialize)]
struct SubmitArgs {
    #[serde(default)]
    report_version: Option<u32>,
}

#[derive(Deserialize)]
struct GoalsArgs {
    question: String,
    goals: Vec<String>,
}

#[derive(Deserialize)]
struct WorkstreamArgs {
    goal: String,
    #[serde(default)]
    instructions: String,
}

#[derive(Deserialize)]
struct SummaryArgs {
    summary: String,
}

fn args<T: DeserializeOwned>(call: &ToolCall) -> Result<T, ParseError> {
    let v = if call.arguments.is_null() {
        json!({})
    } else {
        call.arguments.clone()
    };
    serde_json::from_value(v).map_err(|e| ParseError::UnparseableAction(format!("{}: {e}", call.name)))
}

/// Default outbound message for free text from an agent of `role`.
fn text_message(role: AgentRole, parent: &AgentId, text: String, attachments: Vec<String>) -> Action {
    let kind = if role == AgentRole::ProjectCoordinator {
        MessageKind::UserChat
    } else {
        MessageKind::StatusUpdate
    };
    Action::SendMessage(Outgoing::new(parent.clone(), kind, text).with_attachments(attachments))
}

fn verdict_message(parent: &AgentId, verdict: &Verdict) -> Action {
    Action::SendMessage(Outgoing::new(
        parent.clone(),
        MessageKind::ReviewVerdict,
        verdict.to_body(),
    ))
}

fn map_call(
    call: &ToolCall,
    role: AgentRole,
    parent: &AgentId,
    allowed: &BTreeSet<String>,
) -> Result<Action, ParseError> {
    let action = match call.name.as_str() {
        "send_message" => Action::SendMessage(args::<Outgoing>(call)?),
        "reply" => {
            let a: TextArgs = args(call)?;
            text_message(role, parent, a.text, a.attachments)
        }
        "update_report" => Action::UpdateReport(args::<ReportDelta>(call)?),
        "spawn_agent" => Action::SpawnSubAgent(args::<SpawnRequest>(call)?),
        "submit_for_review" => Action::SubmitForReview {
            report_version: args::<SubmitArgs>(call)?.report_version,
        },
        "mark_complete" => Action::MarkComplete,
        "escalate" => {
            let a: BodyArgs = args(call)?;
            Action::Escalate {
                body: a.body,
                attachments: a.attachments,
            }
        }
        "give_final_answer" => Action::GiveFinalAnswer {
            text: args::<TextArgs>(call)?.text,
        },
        "propose_goals" => {
            let a: GoalsArgs = args(call)?;
            if a.goals.is_empty() || a.goals.iter().any(|g| g.trim().is_empty()) {
                return Err(ParseError::UnparseableAction(
                    "propose_goals needs at least one non-empty goal".into(),
                ));
            }
            Action::ProposeGoals {
                question: a.question,
                goals: a.goals,
            }
        }
        "create_workstream" => {
            let a: WorkstreamArgs = args(call)?;
            Action::CreateWorkstream {
                goal: a.goal,
                instructions: a.instructions,
            }
        }
        "abandon" => Action::Abandon {
            summary: args::<SummaryArgs>(call)?.summary,
        },
        "submit_verdict" => {
            let v: Verdict = args(call)?;
            v.check().map_err(ParseError::UnparseableAction)?;
            verdict_message(parent, &v)
        }
        "wait" => Action::Wait,
        other if allowed.contains(other) => Action::CallTool {
            name: other.to_string(),
            args: call.arguments.clone(),
        },
        other => return Err(ParseError::DisallowedTool(other.to_string())),
    };
    Ok(action)
}

/// Extracts the bodies of fenced blocks whose info string is `action`.
fn fenced_blocks(text: &str) -> Result<Vec<&str>, ParseError> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```action") {
        let after = &rest[start + "```action".len()..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        let end = body
            .find("```")
            .ok_or_else(|| ParseError::UnparseableAction("unterminated action block".into()))?;
        out.push(body[..end].trim());
        rest = &body[end + 3..];
    }
    Ok(out)
}

pub fn parse_actions(
    response: &ModelResponse,
    role: AgentRole,
    parent: &AgentId,
    allowed: &BTreeSet<String>,
) -> Result<ParsedActions, ParseError> {
    if !response.is_well_formed() {
        return Err(ParseError::UnparseableAction(
            "tool_calls present without finish=tool_call (or the reverse)".into(),
        ));
    }
    match response.finish {
        Finish::Refusal => Ok(ParsedActions {
            actions: Vec::new(),
            refused: true,
        }),
        Finish::Length => Err(ParseError::UnparseableAction(
            "response truncated at the output limit".into(),
        )),
        Finish::ToolCall => {
            let actions = response
                .tool_calls
                .iter()
                .map(|c| map_call(c, role, parent, allowed))
                .collect::<Result<_, _>>()?;
            Ok(ParsedActions {
                actions,
                refused: false,
            })
        }
        Finish::Stop => {
            let blocks = fenced_blocks(&response.text)?;
            if !blocks.is_empty() {
                let mut actions = Vec::with_capacity(blocks.len());
                for (i, b) in blocks.into_iter().enumerate() {
                    let fc: FencedCall = serde_json::from_str(b)
                        .map_err(|e| ParseError::UnparseableAction(format!("action block {i}: {e}")))?;
                    let call = ToolCall {
                        name: fc.tool,
                        arguments: fc.args,
                    };
                    actions.push(map_call(&call, role, parent, allowed)?);
                }
                return Ok(ParsedActions {
                    actions,
                    refused: false,
                });
            }
            let text = response.text.trim();
            if text.is_empty() {
                return Ok(ParsedActions {
                    actions: vec![Action::Wait],
                    refused: false,
                });
            }
            let action = if role == AgentRole::Reviewer {
                let v = Verdict::parse_text(text).ok_or_else(|| {
                    ParseError::UnparseableAction("reviewer text must start with APPROVE or REJECT".into())
                })?;
                verdict_message(parent, &v)
            } else {
                text_message(role, parent, text.to_string(), Vec::new())
            };
            Ok(ParsedActions {
                actions: vec![action],
                refused: false,
            })
        }
    }
}

fn schema(name: &str, description: &str, parameters: Value) -> ToolSchema {
    ToolSchema {
        name: name.into(),
        description: description.into(),
        parameters,
    }
}

/// Protocol verbs a role may use, as tool schemas for the model.
pub fn protocol_tool_schemas(role: AgentRole) -> Vec<ToolSchema> {
    let obj = |props: Value, required: &[&str]| json!({"type": "object", "properties": props, "required": required});
    let mut out = vec![
        schema(
            "reply",
            "Send free text to your parent (or the user, for the project coordinator).",
            obj(
                json!({"text": {"type": "string"}, "attachments": {"type": "array", "items": {"type": "string"}}}),
                &["text"],
            ),
        ),
        schema(
            "send_message",
            "Send a typed message to an adjacent agent.",
            obj(
                json!({"recipient": {"type": "string"}, "kind": {"type": "string"}, "body": {"type": "string"},
                "attachments": {"type": "array", "items": {"type": "string"}}}),
                &["recipient", "kind", "body"],
            ),
        ),
        schema(
            "escalate",
            "Escalate a roadblock to your parent.",
            obj(
                json!({"body": {"type": "string"}, "attachments": {"type": "array", "items": {"type": "string"}}}),
                &["body"],
            ),
        ),
        schema("wait", "Do nothing until a new message arrives.", obj(json!({}), &[])),
    ];
    if role.is_coordinator() {
        out.push(schema("spawn_agent", "Create a sub-agent under you.",
            obj(json!({"role": {"type": "string"}, "instructions": {"type": "string"},
                "tool_allowlist": {"type": "array", "items": {"type": "string"}}, "prompt_profile": {"type": "string"}}), &["role", "instructions"])));
    }
    match role {
        AgentRole::ProjectCoordinator => {
            out.push(schema(
                "propose_goals",
                "Present the research question and goals to the user.",
                obj(
                    json!({"question": {"type": "string"}, "goals": {"type": "array", "items": {"type": "string"}}}),
                    &["question", "goals"],
                ),
            ));
            out.push(schema(
                "create_workstream",
                "Start a workstream on an approved goal.",
                obj(
                    json!({"goal": {"type": "string"}, "instructions": {"type": "string"}}),
                    &["goal"],
                ),
            ));
            out.push(schema(
                "give_final_answer",
                "Give the final answer to the user.",
                obj(json!({"text": {"type": "string"}}), &["text"]),
            ));
        }
        AgentRole::WorkstreamCoordinator => {
            out.push(schema(
                "update_report",
                "Apply a delta to the workstream report.",
                obj(
                    json!({"ops": {"type": "array"}, "annotations": {"type": "array"},
                    "references": {"type": "array"}, "attachments": {"type": "object"}}),
                    &[],
                ),
            ));
            out.push(schema(
                "submit_for_review",
                "Submit the latest report to the reviewers.",
                obj(json!({"report_version": {"type": "integer"}}), &[]),
            ));
            out.push(schema(
                "mark_complete",
                "Mark the workstream complete (requires approval).",
                obj(json!({}), &[]),
            ));
            out.push(schema(
                "abandon",
                "Conclude the workstream as failed.",
                obj(json!({"summary": {"type": "string"}}), &["summary"]),
            ));
        }
        AgentRole::Reviewer => {
            out.push(schema(
                "submit_verdict",
                "Approve or reject the report under review.",
                obj(
                    json!({"verdict": {"enum": ["approve", "reject"]}, "issues": {"type": "array"}}),
                    &["verdict"],
                ),
            ));
        }
        _ => {}
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allow(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn call(name: &str, arguments: Value) -> ToolCall {
        ToolCall {
            name: name.into(),
            arguments,
        }
    }

    #[test]
    fn capability_call_becomes_call_tool() {
        let r = ModelResponse::tools(vec![call("search_literature", json!({"query": "moving sofa"}))]);
        let p = parse_actions(
            &r,
            AgentRole::LiteratureAgent,
            &"wsc".into(),
            &allow(&["search_literature"]),
        )
        .unwrap();
        assert_eq!(
            p.actions,
            [Action::CallTool {
                name: "search_literature".into(),
                args: json!({"query": "moving sofa"})
            }]
        );
    }

    #[test]
    fn tool_outside_allowlist_is_rejected() {
        let r = ModelResponse::tools(vec![call("execute_code", json!({}))]);
        assert_eq!(
            parse_actions(
                &r,
                AgentRole::LiteratureAgent,
                &"wsc".into(),
                &allow(&["search_literature"])
            ),
            Err(ParseError::DisallowedTool("execute_code".into()))
        );
    }

    #[test]
    fn refusal_yields_no_actions() {
        let r = ModelResponse {
            text: "no".into(),
            tool_calls: vec![],
            finish: Finish::Refusal,
        };
        let p = parse_actions(&r, AgentRole::CodingAgent, &"wsc".into(), &allow(&[])).unwrap();
        assert!(p.actions.is_empty() && p.refused);
    }

    #[test]
    fn reviewer_text_maps_to_verdict() {
        let p = parse_actions(
            &ModelResponse::text("APPROVE"),
            AgentRole::Reviewer,
            &"wsc".into(),
            &allow(&[]),
        )
        .unwrap();
        match &p.actions[..] {
            [Action::SendMessage(m)] => {
                assert_eq!(m.kind, MessageKind::ReviewVerdict);
                assert_eq!(Verdict::from_body(&m.body).unwrap(), Verdict::Approve);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_actions(
                &ModelResponse::text("looks fine"),
                AgentRole::Reviewer,
                &"wsc".into(),
                &allow(&[])
            ),
            Err(ParseError::UnparseableAction(_))
        ));
    }

    #[test]
    fn plain_text_follows_role_policy() {
        let p = parse_actions(
            &ModelResponse::text("Which variant?"),
            AgentRole::ProjectCoordinator,
            &AgentId::user(),
            &allow(&[]),
        )
        .unwrap();
        assert!(
            matches!(&p.actions[..], [Action::SendMessage(m)] if m.kind == MessageKind::UserChat && m.recipient.is_user())
        );
        let p = parse_actions(
            &ModelResponse::text("tests fail"),
            AgentRole::CodingAgent,
            &"wsc".into(),
            &allow(&[]),
        )
        .unwrap();
        assert!(matches!(&p.actions[..], [Action::SendMessage(m)] if m.kind == MessageKind::StatusUpdate));
        let p = parse_actions(
            &ModelResponse::text("  "),
            AgentRole::CodingAgent,
            &"wsc".into(),
            &allow(&[]),
        )
        .unwrap();
        assert_eq!(p.actions, [Action::Wait]);
    }

    #[test]
    fn fenced_blocks_are_tool_calls() {
        let text = "thinking...\n```action\n{\"tool\": \"mark_complete\", \"args\": {}}\n```\n";
        let p = parse_actions(
            &ModelResponse::text(text),
            AgentRole::WorkstreamCoordinator,
            &"pc".into(),
            &allow(&[]),
        )
        .unwrap();
        assert_eq!(p.actions, [Action::MarkComplete]);
        let garbage = "```action\n{not json\n```";
        assert!(matches!(
            parse_actions(
                &ModelResponse::text(garbage),
                AgentRole::WorkstreamCoordinator,
                &"pc".into(),
                &allow(&[])
            ),
            Err(ParseError::UnparseableAction(_))
        ));
    }

    #[test]
    fn truncated_and_inconsistent_responses_are_unparseable() {
        let r = ModelResponse {
            text: "half".into(),
            tool_calls: vec![],
            finish: Finish::Length,
        };
        assert!(parse_actions(&r, AgentRole::CodingAgent, &"w".into(), &allow(&[])).is_err());
        let r = ModelResponse {
            text: String::new(),
            tool_calls: vec![call("wait", json!({}))],
            finish: Finish::Stop,
        };
        assert!(parse_actions(&r, AgentRole::CodingAgent, &"w".into(), &allow(&[])).is_err());
    }

    #[test]
    fn empty_goal_proposal_is_malformed() {
        let r = ModelResponse::tools(vec![call("propose_goals", json!({"question": "q", "goals": []}))]);
        assert!(matches!(
            parse_actions(&r, AgentRole::ProjectCoordinator, &AgentId::user(), &allow(&[])),
            Err(ParseError::UnparseableAction(_))
        ));
    }
}
