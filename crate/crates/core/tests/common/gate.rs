//! Randomized premature-completion scenarios for one workstream.

use rand::rngs::StdRng;
use rand::Rng;
use serde_json::Value;

use super::build::*;

#[derive(Debug, Clone, Copy)]
pub enum Premature {
    NeverSubmitted,
    BeforeVerdicts,
    AfterRejection,
    DuringResubmission,
}

pub fn scenario(rng: &mut StdRng, n_reviewers: usize) -> (Premature, Vec<Value>) {
    let kind = match rng.gen_range(0..4) {
        0 => Premature::NeverSubmitted,
        1 => Premature::BeforeVerdicts,
        2 => Premature::AfterRejection,
        _ => Premature::DuringResubmission,
    };
    let mut e = one_workstream_prelude();
    let mut first = vec![exposition("Process: we test the kernel.")];
    for i in 0..rng.gen_range(0..3) {
        first.push(paragraph(&format!("Finding {i}.")));
    }
    let approve_all = |e: &mut Vec<Value>, session: &str, round: &str| {
        for r in 1..=n_reviewers {
            e.push(reviewer(session, r, round, "APPROVE"));
        }
    };
    let one_rejects = |rng: &mut StdRng, e: &mut Vec<Value>, round: &str| {
        let bad = rng.gen_range(1..=n_reviewers);
        for r in 1..=n_reviewers {
            let text = if r == bad {
                "REJECT\n- [blocking] b1: the claim is unsupported"
            } else {
                "APPROVE"
            };
            e.push(reviewer("s1", r, round, text));
        }
    };
    match kind {
        Premature::NeverSubmitted => {
            if rng.gen_bool(0.5) {
                first.push(mark_complete());
                e.push(ws(None, first));
            } else {
                e.push(ws(None, first));
                e.push(ws(None, vec![mark_complete()]));
            }
        }
        Premature::BeforeVerdicts => {
            first.push(submit());
            first.push(mark_complete());
            e.push(ws(None, first));
            approve_all(&mut e, "s1", "round 1");
        }
        Premature::AfterRejection => {
            first.push(submit());
            e.push(ws(None, first));
            e.push(ws(Some("ReviewVerdict"), vec![mark_complete()]));
            one_rejects(rng, &mut e, "round 1");
        }
        Premature::DuringResubmission => {
            first.push(submit());
            e.push(ws(None, first));
            e.push(ws(
                Some("ReviewVerdict"),
                vec![paragraph("Support for the claim."), submit(), mark_complete()],
            ));
            one_rejects(rng, &mut e, "round 1");
            approve_all(&mut e, "s1", "round 2");
        }
    }
    (kind, e)
}
