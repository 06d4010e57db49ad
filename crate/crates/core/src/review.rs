//! Multi-reviewer approval loop with stall detection.
//!
//! A session owns a fixed reviewer set. Each round collects one verdict per
//! reviewer; a unanimous approve closes the session as Approved. The session
//! stalls when it runs out of rounds, or when the set of open issues did not
//! shrink across the last `stall_window` rounds (the same complaints keep
//! coming back). Issue ids hash `(location, normalized text)` so a repeated
//! complaint keeps its identity across rounds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bus::AgentId;
pub use crate::report::Severity;

pub fn review_path(workstream: &str) -> String {
    format!("ws/{workstream}/review.json")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueDraft {
    #[serde(default = "blocking")]
    pub severity: Severity,
    #[serde(default = "global")]
    pub location: String,
    pub text: String,
}

fn blocking() -> Severity {
    Severity::Blocking
}

fn global() -> String {
    "global".into()
}

/// A reviewer's decision as produced by the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Reject { issues: Vec<IssueDraft> },
}

impl Verdict {
    pub fn check(&self) -> Result<(), String> {
        match self {
            Verdict::Reject { issues } if issues.is_empty() => Err("a reject verdict needs at least one issue".into()),
            _ => Ok(()),
        }
    }

    /// Message body carrying this verdict.
    pub fn to_body(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }

    pub fn from_body(body: &str) -> Option<Verdict> {
        let v: Verdict = serde_json::from_str(body).ok()?;
        v.check().ok().map(|_| v)
    }

    /// Reads the plain-text convention: `APPROVE`, or `REJECT` followed by
    /// issue lines `- [blocking|minor] <location>: <text>`. Lines without a
    /// bracketed severity count as blocking; without a location, as global.
    pub fn parse_text(text: &str) -> Option<Verdict> {
        let mut lines = text.trim().lines();
        let head = lines.next()?.trim();
        let word = head
            .split(|c: char| !c.is_ascii_alphabetic())
            .next()?
            .to_ascii_uppercase();
        match word.as_str() {
            "APPROVE" => Some(Verdict::Approve),
            "REJECT" => {
                let mut issues = Vec::new();
                let rest_of_head = head[word.len()..].trim_start_matches([':', ' ', '-']).trim();
                if !rest_of_head.is_empty() {
                    issues.push(parse_issue_line(rest_of_head));
                }
                for line in lines {
                    let line = line.trim();
                    let Some(item) = line.strip_prefix('-').or_else(|| line.strip_prefix('*')) else {
                        continue;
                    };
                    let item = item.trim();
                    if !item.is_empty() {
                        issues.push(parse_issue_line(item));
                    }
                }
                if issues.is_empty() {
                    issues.push(IssueDraft {
                        severity: Severity::Blocking,
                        location: global(),
                        text: "rejected without stated reasons".into(),
                    });
                }
                Some(Verdict::Reject { issues })
            }
            _ => None,
        }
    }
}

fn parse_issue_line(item: &str) -> IssueDraft {
    let (severity, rest) = if let Some(r) = item.strip_prefix("[minor]") {
        (Severity::Minor, r.trim())
    } else if let Some(r) = item.strip_prefix("[blocking]") {
        (Severity::Blocking, r.trim())
    } else {
        (Severity::Blocking, item)
    };
    match rest.split_once(':') {
        Some((loc, text)) if !loc.trim().is_empty() && !loc.contains(' ') => IssueDraft {
            severity,
            location: loc.trim().to_string(),
            text: text.trim().to_string(),
        },
        _ => IssueDraft {
            severity,
            location: global(),
            text: rest.to_string(),
        },
    }
}

/// Stable issue id from location and case/whitespace-normalized text.
pub fn issue_id(location: &str, text: &str) -> String {
    let norm = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let mut h = Sha256::new();
    h.update(location.trim().as_bytes());
    h.update([0]);
    h.update(norm.as_bytes());
    format!("i{}", &hex::encode(h.finalize())[..12])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub id: String,
    pub severity: Severity,
    pub location: String,
    pub text: String,
}

impl From<&IssueDraft> for Issue {
    fn from(d: &IssueDraft) -> Self {
        Issue {
            id: issue_id(&d.location, &d.text),
            severity: d.severity,
            location: d.location.clone(),
            text: d.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum RecordedVerdict {
    Approve,
    Reject { issues: Vec<Issue> },
}

impl RecordedVerdict {
    pub fn is_approve(&self) -> bool {
        matches!(self, RecordedVerdict::Approve)
    }
}

impl From<&Verdict> for RecordedVerdict {
    fn from(v: &Verdict) -> Self {
        match v {
            Verdict::Approve => RecordedVerdict::Approve,
            Verdict::Reject { issues } => RecordedVerdict::Reject {
                issues: issues.iter().map(Issue::from).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRound {
    pub index: u32,
    pub report_version: u32,
    pub verdicts: BTreeMap<AgentId, RecordedVerdict>,
    pub open_issues: BTreeSet<String>,
}

impl ReviewRound {
    pub fn unanimous(&self) -> bool {
        !self.verdicts.is_empty() && self.verdicts.values().all(RecordedVerdict::is_approve)
    }

    pub fn issues(&self) -> BTreeMap<String, Issue> {
        let mut out = BTreeMap::new();
        for v in self.verdicts.values() {
            if let RecordedVerdict::Reject { issues } = v {
                for i in issues {
                    out.entry(i.id.clone()).or_insert_with(|| i.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    Open,
    Approved,
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewConfig {
    pub n_reviewers: usize,
    pub max_rounds: u32,
    pub stall_window: u32,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            n_reviewers: 3,
            max_rounds: 5,
            stall_window: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReviewError {
    #[error("report for workstream {0} not found")]
    ReportNotFound(String),
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("session {0} has not stalled")]
    NotStalled(String),
    #[error("a round is already in progress in session {0}")]
    RoundInProgress(String),
    #[error("no round in progress in session {0}")]
    NoRound(String),
    #[error("{0} is not a reviewer in this session")]
    NotAReviewer(AgentId),
    #[error("report version {got} is older than the last reviewed version {last}")]
    StaleVersion { got: u32, last: u32 },
    #[error("invalid review configuration: {0}")]
    Config(String),
}

/// A round whose verdicts are still being collected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRound {
    pub report_version: u32,
    pub verdicts: BTreeMap<AgentId, RecordedVerdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub id: String,
    pub workstream: String,
    pub reviewers: Vec<AgentId>,
    pub rounds: Vec<ReviewRound>,
    pub status: SessionStatus,
    pub max_rounds: u32,
    pub stall_window: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<PendingRound>,
    /// Escalation message id once the stalled session was surfaced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escalation: Option<String>,
}

impl ReviewSession {
    pub fn open(
        id: impl Into<String>,
        workstream: impl Into<String>,
        reviewers: Vec<AgentId>,
        config: &ReviewConfig,
    ) -> Result<Self, ReviewError> {
        let unique: BTreeSet<_> = reviewers.iter().collect();
        if reviewers.is_empty() || unique.len() != reviewers.len() {
            return Err(ReviewError::Config("reviewers must be a non-empty set".into()));
        }
        if config.max_rounds == 0 || config.stall_window < 2 {
            return Err(ReviewError::Config(
                "max_rounds >= 1 and stall_window >= 2 required".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            workstream: workstream.into(),
            reviewers,
            rounds: Vec::new(),
            status: SessionStatus::Open,
            max_rounds: config.max_rounds,
            stall_window: config.stall_window,
            pending: None,
            escalation: None,
        })
    }

    pub fn is_terminal(&self) -> bool {
        self.status != SessionStatus::Open
    }

    pub fn latest_round(&self) -> Option<&ReviewRound> {
        self.rounds.last()
    }

    pub fn begin_round(&mut self, report_version: u32) -> Result<(), ReviewError> {
        if self.is_terminal() {
            return Err(ReviewError::SessionClosed(self.id.clone()));
        }
        if self.pending.is_some() {
            return Err(ReviewError::RoundInProgress(self.id.clone()));
        }
        if let Some(last) = self.rounds.last() {
            if report_version < last.report_version {
                return Err(ReviewError::StaleVersion {
                    got: report_version,
                    last: last.report_version,
                });
            }
        }
        self.pending = Some(PendingRound {
            report_version,
            verdicts: BTreeMap::new(),
        });
        Ok(())
    }

    /// Records a verdict for the current round. A reviewer's first verdict
    /// in a round counts; later ones are ignored. Returns true when every
    /// reviewer has answered.
    pub fn record_verdict(&mut self, reviewer: &AgentId, verdict: RecordedVerdict) -> Result<bool, ReviewError> {
        if !self.reviewers.contains(reviewer) {
            return Err(ReviewError::NotAReviewer(reviewer.clone()));
        }
        let n = self.reviewers.len();
        let pending = self
            .pending
            .as_mut()
            .ok_or_else(|| ReviewError::NoRound(self.id.clone()))?;
        pending.verdicts.entry(reviewer.clone()).or_insert(verdict);
        Ok(pending.verdicts.len() == n)
    }

    pub fn awaiting(&self) -> Vec<AgentId> {
        match &self.pending {
            Some(p) => self
                .reviewers
                .iter()
                .filter(|r| !p.verdicts.contains_key(*r))
                .cloned()
                .collect(),
            None => Vec::new(),
        }
    }

    /// Closes the pending round once complete and recomputes the status.
    pub fn finish_round(&mut self) -> Result<&ReviewRound, ReviewError> {
        if !self.awaiting().is_empty() {
            return Err(ReviewError::RoundInProgress(self.id.clone()));
        }
        let pending = self
            .pending
            .take()
            .ok_or_else(|| ReviewError::NoRound(self.id.clone()))?;
        let mut round = ReviewRound {
            index: self.rounds.len() as u32 + 1,
            report_version: pending.report_version,
            verdicts: pending.verdicts,
            open_issues: BTreeSet::new(),
        };
        round.open_issues = round.issues().into_keys().collect();
        let approved = round.unanimous();
        self.rounds.push(round);
        self.status = if approved {
            SessionStatus::Approved
        } else if self.detect_stall() {
            SessionStatus::Stalled
        } else {
            SessionStatus::Open
        };
        Ok(self.rounds.last().expect("round just pushed"))
    }

    /// Runs a complete round, asking `verdict_of` for each reviewer in order.
    pub fn run_round(
        &mut self,
        report_version: u32,
        mut verdict_of: impl FnMut(&AgentId) -> Verdict,
    ) -> Result<&ReviewRound, ReviewError> {
        self.begin_round(report_version)?;
        for r in self.reviewers.clone() {
            let v = verdict_of(&r);
            let recorded = match v.check() {
                Ok(()) => RecordedVerdict::from(&v),
                Err(_) => RecordedVerdict::from(&no_verdict_reject()),
            };
            self.record_verdict(&r, recorded)?;
        }
        self.finish_round()
    }

    /// True when the loop should stop without approval.
    pub fn detect_stall(&self) -> bool {
        let Some(last) = self.rounds.last() else {
            return false;
        };
        if last.unanimous() {
            return false;
        }
        if self.rounds.len() as u32 >= self.max_rounds {
            return true;
        }
        let w = self.stall_window as usize;
        if self.rounds.len() < w {
            return false;
        }
        let window = &self.rounds[self.rounds.len() - w..];
        window.windows(2).all(|p| p[0].open_issues.is_subset(&p[1].open_issues))
    }

    /// Issues raised in the latest round that were not raised before it.
    pub fn issue_diff(&self) -> (Vec<String>, Vec<String>) {
        let n = self.rounds.len();
        if n == 0 {
            return (Vec::new(), Vec::new());
        }
        let cur = &self.rounds[n - 1].open_issues;
        let empty = BTreeSet::new();
        let prev = if n >= 2 {
            &self.rounds[n - 2].open_issues
        } else {
            &empty
        };
        (
            cur.difference(prev).cloned().collect(),
            prev.difference(cur).cloned().collect(),
        )
    }

    /// Marks a stalled session as surfaced by `escalation_id`.
    pub fn close_as_escalated(&mut self, escalation_id: impl Into<String>) -> Result<(), ReviewError> {
        if self.status != SessionStatus::Stalled || self.escalation.is_some() {
            return Err(ReviewError::NotStalled(self.id.clone()));
        }
        self.escalation = Some(escalation_id.into());
        Ok(())
    }

    /// Human-readable issue list for the escalation body.
    pub fn issue_summary(&self) -> String {
        let Some(last) = self.rounds.last() else {
            return String::new();
        };
        let mut s = format!(
            "Review session {} for workstream {} stalled after {} round(s). Open issues:\n",
            self.id,
            self.workstream,
            self.rounds.len()
        );
        for i in last.issues().values() {
            s.push_str(&format!("- [{:?}] {}: {} ({})\n", i.severity, i.location, i.text, i.id));
        }
        s
    }
}

/// Verdict substituted for a reviewer that never produced one.
pub fn no_verdict_reject() -> Verdict {
    Verdict::Reject {
        issues: vec![IssueDraft {
            severity: Severity::Blocking,
            location: global(),
            text: "reviewer produced no verdict".into(),
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reviewers(n: usize) -> Vec<AgentId> {
        (1..=n).map(|i| AgentId::new(format!("rev{i}"))).collect()
    }

    fn reject(texts: &[&str]) -> Verdict {
        Verdict::Reject {
            issues: texts
                .iter()
                .map(|t| IssueDraft {
                    severity: Severity::Blocking,
                    location: "global".into(),
                    text: t.to_string(),
                })
                .collect(),
        }
    }

    fn session(n: usize) -> ReviewSession {
        ReviewSession::open("s1", "ws1", reviewers(n), &ReviewConfig::default()).unwrap()
    }

    #[test]
    fn unanimous_first_round() {
        let mut s = session(3);
        s.run_round(1, |_| Verdict::Approve).unwrap();
        assert_eq!(s.status, SessionStatus::Approved);
    }

    #[test]
    fn converging_rounds() {
        let mut s = session(3);
        let plan = [
            vec![reject(&["a", "b"]), reject(&["a"]), Verdict::Approve],
            vec![reject(&["a"]), Verdict::Approve, Verdict::Approve],
            vec![Verdict::Approve, Verdict::Approve, Verdict::Approve],
        ];
        let mut counts = Vec::new();
        for (i, round) in plan.iter().enumerate() {
            let mut it = round.iter().cloned();
            s.run_round(i as u32 + 1, |_| it.next().unwrap()).unwrap();
            counts.push(s.latest_round().unwrap().open_issues.len());
        }
        assert_eq!(s.status, SessionStatus::Approved);
        assert_eq!(s.rounds.len(), 3);
        assert!(counts.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn stall_rules() {
        let mut s = session(1);
        s.run_round(1, |_| reject(&["a", "b"])).unwrap();
        s.run_round(1, |_| reject(&["a"])).unwrap();
        assert!(!s.detect_stall());

        let mut s = session(1);
        s.run_round(1, |_| reject(&["a"])).unwrap();
        s.run_round(1, |_| reject(&["a", "c"])).unwrap();
        assert!(s.detect_stall());
        assert_eq!(s.status, SessionStatus::Stalled);

        let mut s = session(2);
        for i in 1..=5u32 {
            assert_eq!(s.status, SessionStatus::Open);
            let t = format!("fresh issue {i}");
            s.run_round(i, |_| reject(&[&t])).unwrap();
        }
        assert_eq!(s.status, SessionStatus::Stalled);
        assert_eq!(s.rounds.len(), 5);
    }

    #[test]
    fn closing_requires_stall() {
        let mut s = session(1);
        s.run_round(1, |_| Verdict::Approve).unwrap();
        assert_eq!(s.close_as_escalated("m1"), Err(ReviewError::NotStalled("s1".into())));
        assert!(matches!(
            s.run_round(2, |_| Verdict::Approve),
            Err(ReviewError::SessionClosed(_))
        ));
    }

    #[test]
    fn issue_identity_ignores_case_and_spacing() {
        assert_eq!(issue_id("b2", "Tests  fail"), issue_id("b2", "tests fail "));
        assert_ne!(issue_id("b2", "tests fail"), issue_id("b3", "tests fail"));
    }

    #[test]
    fn text_verdicts() {
        assert_eq!(Verdict::parse_text("APPROVE\nnice work"), Some(Verdict::Approve));
        let v = Verdict::parse_text("REJECT\n- [blocking] b2: tests fail\n- [minor] typo in intro").unwrap();
        assert_eq!(
            v,
            Verdict::Reject {
                issues: vec![
                    IssueDraft {
                        severity: Severity::Blocking,
                        location: "b2".into(),
                        text: "tests fail".into()
                    },
                    IssueDraft {
                        severity: Severity::Minor,
                        location: "global".into(),
                        text: "typo in intro".into()
                    },
                ]
            }
        );
        assert_eq!(Verdict::parse_text("maybe"), None);
        assert!(Verdict::from_body(&v.to_body()).is_some());
        assert!(Verdict::from_body(r#"{"verdict":"reject","issues":[]}"#).is_none());
    }

    #[test]
    fn verdicts_arrive_incrementally() {
        let mut s = session(2);
        s.begin_round(3).unwrap();
        assert!(!s.record_verdict(&"rev1".into(), RecordedVerdict::Approve).unwrap());
        assert_eq!(s.awaiting(), vec![AgentId::new("rev2")]);
        assert!(s.finish_round().is_err());
        assert!(s.record_verdict(&"rev2".into(), RecordedVerdict::Approve).unwrap());
        s.finish_round().unwrap();
        assert_eq!(s.status, SessionStatus::Approved);
        assert!(matches!(
            s.record_verdict(&"x".into(), RecordedVerdict::Approve),
            Err(ReviewError::NotAReviewer(_))
        ));
    }
}
