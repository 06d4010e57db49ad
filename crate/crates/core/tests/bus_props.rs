mod common;

use common::checks::{self, bus, WORKSTREAMS};
use proptest::prelude::*;
use workbench_core::bus::{AgentId, MessageKind, Outgoing};

fn id(s: &str) -> AgentId {
    AgentId::new(s)
}

#[test]
fn concurrent_workstreams_lose_nothing_and_keep_pair_order() {
    checks::concurrent_bus_load();
}

#[test]
fn escalations_only_reach_ancestors() {
    checks::escalations_reach_ancestors();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_mailbox_is_fifo(plan in proptest::collection::vec((0..WORKSTREAMS, 1..4usize), 1..60)) {
        let dir = tempfile::tempdir().unwrap();
        let bus = bus(dir.path());
        let mut expected = Vec::new();
        for (n, (k, polls)) in plan.iter().enumerate() {
            let from = id(&format!("ws{k}"));
            let body = format!("{n}");
            bus.send(&from, Outgoing::new(id("pc"), MessageKind::StatusUpdate, body.clone())).unwrap();
            expected.push(body);
            if n % polls == 0 {
                let got: Vec<String> = bus.poll(&id("pc"), *polls).unwrap().into_iter().map(|m| m.body).collect();
                let head: Vec<String> = expected.drain(..got.len()).collect();
                prop_assert_eq!(got, head);
            }
        }
        let rest: Vec<String> = bus.poll(&id("pc"), usize::MAX).unwrap().into_iter().map(|m| m.body).collect();
        prop_assert_eq!(rest, expected);
    }
}
