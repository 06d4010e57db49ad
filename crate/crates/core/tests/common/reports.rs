//! Report generators and defect seeding shared by property tests.

use std::collections::BTreeMap;

use proptest::prelude::*;
use workbench_core::report::{
    normalize_text, Anchor, Block, BlockKind, DefectKind, MarginNote, Provenance, ProvenanceKind, Reference, Report,
    ReportStatus, Span,
};

pub fn block_kind() -> impl Strategy<Value = BlockKind> {
    prop_oneof![
        Just(BlockKind::Heading),
        Just(BlockKind::Paragraph),
        Just(BlockKind::Theorem),
        Just(BlockKind::Proof),
        Just(BlockKind::Code),
        Just(BlockKind::AttachmentRef),
        Just(BlockKind::Exposition),
    ]
}

pub fn provenance_kind() -> impl Strategy<Value = ProvenanceKind> {
    prop_oneof![
        Just(ProvenanceKind::UserSuggestion),
        Just(ProvenanceKind::ExternalLiterature),
        Just(ProvenanceKind::InternalFile),
        Just(ProvenanceKind::Computation),
        Just(ProvenanceKind::Reviewer),
    ]
}

/// Workspace the generated references point into.
pub fn files() -> BTreeMap<String, u32> {
    [
        ("ws/ws1/code/a.py", 2),
        ("ws/ws1/runs/1.json", 1),
        ("chat/log.jsonl", 7),
    ]
    .into_iter()
    .map(|(p, v)| (p.to_string(), v))
    .collect()
}

prop_compose! {
    /// A report that satisfies every output criterion.
    pub fn clean_report()(
        texts in proptest::collection::vec((block_kind(), "[a-zA-Z0-9 ,.;:()\\n\\t\u{e9}\u{3b1}-]{1,60}"), 1..8),
        expo in "[a-z ]{5,40}",
        notes in proptest::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>(), provenance_kind(), "[a-z ]{1,30}", 0..3usize), 0..6),
        refs in proptest::collection::vec((any::<bool>(), 0..3usize, "[a-z]{1,10}"), 0..5),
        title in "\\PC{0,30}",
        final_ in any::<bool>(),
    ) -> Report {
        let mut blocks: Vec<Block> = vec![Block { id: "b1".into(), kind: BlockKind::Exposition, text: expo }];
        for (kind, text) in texts {
            let text = if normalize_text(&text).is_empty() { "x".to_string() } else { text };
            blocks.push(Block { id: format!("b{}", blocks.len() + 1), kind, text });
        }
        let files: Vec<(String, u32)> = files().into_iter().collect();
        let annotations = notes
            .into_iter()
            .enumerate()
            .map(|(i, (bi, si, kind, text, fi))| {
                let b = &blocks[bi.index(blocks.len())];
                let len = normalize_text(&b.text).chars().count();
                let start = si.index(len + 1);
                let (locator, version) = match kind {
                    ProvenanceKind::ExternalLiterature => ("https://example.org/paper".to_string(), None),
                    _ => (files[fi].0.clone(), Some(files[fi].1)),
                };
                MarginNote {
                    id: format!("n{}", i + 1),
                    anchor: Anchor { block: b.id.clone(), span: Span { start, end: len } },
                    text,
                    provenance: Provenance { kind, locator, version },
                    dangling: false,
                    superseded: false,
                }
            })
            .collect::<Vec<_>>();
        let references = refs
            .into_iter()
            .map(|(internal, fi, slug)| {
                if internal {
                    Reference::Internal { path: files[fi].0.clone(), version: files[fi].1 }
                } else {
                    Reference::External { uri: format!("https://arxiv.org/abs/{slug}"), title: slug, verified: true }
                }
            })
            .collect();
        Report {
            workstream: "ws1".into(),
            title,
            next_block: blocks.len() as u64,
            next_note: annotations.len() as u64,
            blocks,
            annotations,
            references,
            status: if final_ { ReportStatus::Final } else { ReportStatus::Incremental },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Seed {
    NoExposition,
    MissingFile,
    FutureVersion,
    NoteOnDeletedBlock,
    NoteBeyondText,
    NoteFlaggedDangling,
    UnfetchedCitation,
    EmptyProof,
}

pub fn seed() -> impl Strategy<Value = Seed> {
    prop_oneof![
        Just(Seed::NoExposition),
        Just(Seed::MissingFile),
        Just(Seed::FutureVersion),
        Just(Seed::NoteOnDeletedBlock),
        Just(Seed::NoteBeyondText),
        Just(Seed::NoteFlaggedDangling),
        Just(Seed::UnfetchedCitation),
        Just(Seed::EmptyProof),
    ]
}

pub fn note(report: &Report, block: &str, end: usize) -> MarginNote {
    MarginNote {
        id: format!("n{}", report.annotations.len() + 100),
        anchor: Anchor {
            block: block.into(),
            span: Span { start: 0, end },
        },
        text: "seeded".into(),
        provenance: Provenance {
            kind: ProvenanceKind::Computation,
            locator: "ws/ws1/runs/1.json".into(),
            version: Some(1),
        },
        dangling: false,
        superseded: false,
    }
}

/// Plants one defect; returns its class and whether it must block.
pub fn plant(report: &mut Report, seed: Seed) -> (DefectKind, bool) {
    match seed {
        Seed::NoExposition => {
            for b in report.blocks.iter_mut().filter(|b| b.kind == BlockKind::Exposition) {
                b.kind = BlockKind::Paragraph;
            }
            (DefectKind::MissingExposition, true)
        }
        Seed::MissingFile => {
            report.references.push(Reference::Internal {
                path: "ws/ws1/gone.txt".into(),
                version: 1,
            });
            (DefectKind::DanglingInternalRef, true)
        }
        Seed::FutureVersion => {
            report.references.push(Reference::Internal {
                path: "ws/ws1/code/a.py".into(),
                version: 3,
            });
            (DefectKind::DanglingInternalRef, true)
        }
        Seed::NoteOnDeletedBlock => {
            let n = note(report, "b999", 0);
            report.annotations.push(n);
            (DefectKind::DanglingAnnotation, true)
        }
        Seed::NoteBeyondText => {
            let len = normalize_text(&report.blocks[0].text).chars().count();
            let n = note(report, "b1", len + 1);
            report.annotations.push(n);
            (DefectKind::DanglingAnnotation, true)
        }
        Seed::NoteFlaggedDangling => {
            let mut n = note(report, "b1", 1);
            n.dangling = true;
            report.annotations.push(n);
            (DefectKind::DanglingAnnotation, true)
        }
        Seed::UnfetchedCitation => {
            report.references.push(Reference::External {
                uri: "https://example.org/unread".into(),
                title: "Unread".into(),
                verified: false,
            });
            (DefectKind::UnverifiedExternalRef, false)
        }
        Seed::EmptyProof => {
            report.blocks.push(Block {
                id: "b998".into(),
                kind: BlockKind::Proof,
                text: " \n ".into(),
            });
            (DefectKind::EmptyProof, false)
        }
    }
}
