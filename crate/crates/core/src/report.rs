//! The working paper each workstream maintains.
//!
//! Canonical storage is structured JSON at `ws/<id>/report.json`; markdown and
//! LaTeX are projections of it. Margin notes anchor to a character span of a
//! block's *normalized* text (trimmed, runs of whitespace collapsed to one
//! space) so cosmetic edits do not move them. Notes whose anchor stops
//! resolving are flagged `dangling` rather than dropped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub fn report_path(workstream: &str) -> String {
    format!("ws/{workstream}/report.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Heading,
    Paragraph,
    Theorem,
    Proof,
    Code,
    AttachmentRef,
    Exposition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub kind: BlockKind,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceKind {
    UserSuggestion,
    ExternalLiterature,
    InternalFile,
    Computation,
    Reviewer,
}

impl ProvenanceKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::UserSuggestion => "user_suggestion",
            Self::ExternalLiterature => "external_literature",
            Self::InternalFile => "internal_file",
            Self::Computation => "computation",
            Self::Reviewer => "reviewer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: ProvenanceKind,
    /// Absolute URI or workspace path.
    pub locator: String,
    /// Pinned version when the locator is a workspace path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub block: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginNote {
    pub id: String,
    pub anchor: Anchor,
    pub text: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub dangling: bool,
    #[serde(default)]
    pub superseded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reference {
    Internal {
        path: String,
        version: u32,
    },
    External {
        uri: String,
        title: String,
        #[serde(default)]
        verified: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Incremental,
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub workstream: String,
    pub title: String,
    pub blocks: Vec<Block>,
    pub annotations: Vec<MarginNote>,
    pub references: Vec<Reference>,
    pub status: ReportStatus,
    /// Counters for stable id allocation; ids are never reused.
    pub next_block: u64,
    pub next_note: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("anchor {block}[{start}..{end}] does not resolve")]
    DanglingAnchor { block: String, start: usize, end: usize },
    #[error("bad locator {0:?}")]
    BadLocator(String),
    #[error("report is final and can no longer change")]
    Finalized,
    #[error("malformed report: {0}")]
    Malformed(String),
}

/// Collapses whitespace runs and trims, the basis for anchor spans.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Where a delta inserts or changes blocks. `block` ids of the form `@N`
/// refer to the N-th block created by the same delta.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BlockOp {
    Append {
        kind: BlockKind,
        text: String,
    },
    Insert {
        #[serde(default)]
        after: Option<String>,
        kind: BlockKind,
        text: String,
    },
    Edit {
        block: String,
        text: String,
        #[serde(default)]
        kind: Option<BlockKind>,
    },
    Delete {
        block: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorDraft {
    pub block: String,
    #[serde(default)]
    pub start: Option<usize>,
    #[serde(default)]
    pub end: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteDraft {
    pub anchor: AnchorDraft,
    pub text: String,
    pub provenance: ProvenanceDraft,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceDraft {
    pub kind: ProvenanceKind,
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDelta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ops: Vec<BlockOp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotations: Vec<NoteDraft>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<Reference>,
    /// Files to commit alongside the report, keyed by path relative to the
    /// workstream directory.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attachments: BTreeMap<String, String>,
}

/// Resolves a workspace path to its latest version, if it exists.
pub type PathLookup<'a> = &'a dyn Fn(&str) -> Option<u32>;

fn is_uri(s: &str) -> bool {
    url::Url::parse(s).is_ok_and(|u| u.has_host() || u.scheme() == "urn")
}

/// Checks a locator and pins the version of workspace paths.
pub fn resolve_locator(locator: &str, lookup: PathLookup<'_>) -> Result<Option<u32>, ReportError> {
    if locator.trim().is_empty() {
        return Err(ReportError::BadLocator(locator.to_string()));
    }
    if is_uri(locator) {
        return Ok(None);
    }
    lookup(locator)
        .map(Some)
        .ok_or_else(|| ReportError::BadLocator(locator.to_string()))
}

impl Report {
    pub fn new(workstream: impl Into<String>, title: impl Into<String>) -> Self {
        Self {
            workstream: workstream.into(),
            title: title.into(),
            blocks: Vec::new(),
            annotations: Vec::new(),
            references: Vec::new(),
            status: ReportStatus::Incremental,
            next_block: 1,
            next_note: 1,
        }
    }

    pub fn block(&self, id: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.id == id)
    }

    fn alloc_block(&mut self) -> String {
        let id = format!("b{}", self.next_block);
        self.next_block += 1;
        id
    }

    fn position(&self, id: &str) -> Result<usize, ReportError> {
        self.blocks
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| ReportError::UnknownBlock(id.to_string()))
    }

    fn anchor_resolves(&self, anchor: &Anchor) -> bool {
        self.block(&anchor.block).is_some_and(|b| {
            let len = normalize_text(&b.text).chars().count();
            anchor.span.start <= anchor.span.end && anchor.span.end <= len
        })
    }

    /// Re-flags notes after the blocks changed.
    fn reflag(&mut self) {
        let flags: Vec<bool> = self
            .annotations
            .iter()
            .map(|n| !self.anchor_resolves(&n.anchor))
            .collect();
        for (n, dangling) in self.annotations.iter_mut().zip(flags) {
            n.dangling = n.dangling || dangling;
        }
    }

    /// Adds a margin note; the anchor and locator must resolve now.
    pub fn annotate(
        &mut self,
        anchor: Anchor,
        text: impl Into<String>,
        kind: ProvenanceKind,
        locator: &str,
        lookup: PathLookup<'_>,
    ) -> Result<String, ReportError> {
        if !self.anchor_resolves(&anchor) {
            return Err(ReportError::DanglingAnchor {
                block: anchor.block,
                start: anchor.span.start,
                end: anchor.span.end,
            });
        }
        let version = resolve_locator(locator, lookup)?;
        let id = format!("n{}", self.next_note);
        self.next_note += 1;
        self.annotations.push(MarginNote {
            id: id.clone(),
            anchor,
            text: text.into(),
            provenance: Provenance {
                kind,
                locator: locator.to_string(),
                version,
            },
            dangling: false,
            superseded: false,
        });
        Ok(id)
    }

    /// Applies a delta. On error the report is left unchanged.
    pub fn apply(&mut self, delta: &ReportDelta, lookup: PathLookup<'_>) -> Result<(), ReportError> {
        if self.status == ReportStatus::Final {
            return Err(ReportError::Finalized);
        }
        let mut next = self.clone();
        let mut created: Vec<String> = Vec::new();
        let resolve = |created: &[String], id: &str| -> Result<String, ReportError> {
            match id.strip_prefix('@') {
                Some(n) => n
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| created.get(i.checked_sub(1)?).cloned())
                    .ok_or_else(|| ReportError::UnknownBlock(id.to_string())),
                None => Ok(id.to_string()),
            }
        };
        if let Some(t) = &delta.title {
            next.title = t.clone();
        }
        for op in &delta.ops {
            match op {
                BlockOp::Append { kind, text } => {
                    let id = next.alloc_block();
                    next.blocks.push(Block {
                        id: id.clone(),
                        kind: *kind,
                        text: text.clone(),
                    });
                    created.push(id);
                }
                BlockOp::Insert { after, kind, text } => {
                    let at = match after {
                        Some(a) => next.position(&resolve(&created, a)?)? + 1,
                        None => 0,
                    };
                    let id = next.alloc_block();
                    next.blocks.insert(
                        at,
                        Block {
                            id: id.clone(),
                            kind: *kind,
                            text: text.clone(),
                        },
                    );
                    created.push(id);
                }
                BlockOp::Edit { block, text, kind } => {
                    let i = next.position(&resolve(&created, block)?)?;
                    next.blocks[i].text = text.clone();
                    if let Some(k) = kind {
                        next.blocks[i].kind = *k;
                    }
                }
                BlockOp::Delete { block } => {
                    let i = next.position(&resolve(&created, block)?)?;
                    next.blocks.remove(i);
                }
            }
        }
        next.reflag();
        for draft in &delta.annotations {
            let block = resolve(&created, &draft.anchor.block)?;
            let len = next
                .block(&block)
                .map(|b| normalize_text(&b.text).chars().count())
                .ok_or_else(|| ReportError::DanglingAnchor {
                    block: block.clone(),
                    start: draft.anchor.start.unwrap_or(0),
                    end: draft.anchor.end.unwrap_or(0),
                })?;
            let anchor = Anchor {
                block,
                span: Span {
                    start: draft.anchor.start.unwrap_or(0),
                    end: draft.anchor.end.unwrap_or(len),
                },
            };
            next.annotate(
                anchor,
                draft.text.clone(),
                draft.provenance.kind,
                &draft.provenance.locator,
                lookup,
            )?;
        }
        for r in &delta.references {
            let r = match r {
                Reference::Internal { path, .. } => {
                    let version = lookup(path).ok_or_else(|| ReportError::BadLocator(path.clone()))?;
                    Reference::Internal {
                        path: path.clone(),
                        version,
                    }
                }
                Reference::External { uri, .. } if !is_uri(uri) => {
                    return Err(ReportError::BadLocator(uri.clone()));
                }
                other => other.clone(),
            };
            if !next.references.contains(&r) {
                next.references.push(r);
            }
        }
        *self = next;
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        render(self, RenderFormat::Structured)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ReportError> {
        serde_json::from_slice(bytes).map_err(|e| ReportError::Malformed(e.to_string()))
    }

    /// A short plain-text view used in agent context.
    pub fn digest(&self, max_chars: usize) -> String {
        let mut s = format!(
            "Report \"{}\" ({:?}, {} blocks)\n",
            self.title,
            self.status,
            self.blocks.len()
        );
        for b in &self.blocks {
            let _ = writeln!(s, "[{} {:?}] {}", b.id, b.kind, normalize_text(&b.text));
        }
        if s.chars().count() > max_chars {
            s = s.chars().take(max_chars).collect::<String>() + "…";
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Blocking,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    MissingExposition,
    DanglingInternalRef,
    DanglingAnnotation,
    UnverifiedExternalRef,
    EmptyProof,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Defect {
    pub kind: DefectKind,
    pub severity: Severity,
    pub location: String,
    pub detail: String,
}

/// Checks the output criteria. Missing exposition only blocks a Final report.
pub fn validate_report(report: &Report, lookup: PathLookup<'_>) -> Vec<Defect> {
    let mut out = Vec::new();
    let mut push = |kind, severity, location: &str, detail: String| {
        out.push(Defect {
            kind,
            severity,
            location: location.to_string(),
            detail,
        })
    };
    if !report.blocks.iter().any(|b| b.kind == BlockKind::Exposition) {
        let sev = if report.status == ReportStatus::Final {
            Severity::Blocking
        } else {
            Severity::Minor
        };
        push(
            DefectKind::MissingExposition,
            sev,
            "global",
            "no exposition of the research process".into(),
        );
    }
    for r in &report.references {
        match r {
            Reference::Internal { path, version } => {
                if lookup(path).is_none_or(|latest| *version > latest || *version == 0) {
                    push(
                        DefectKind::DanglingInternalRef,
                        Severity::Blocking,
                        path,
                        format!("{path} v{version} does not exist in the workspace"),
                    );
                }
            }
            Reference::External { uri, verified, .. } => {
                if !verified {
                    push(
                        DefectKind::UnverifiedExternalRef,
                        Severity::Minor,
                        uri,
                        format!("{uri} was never fetched"),
                    );
                }
            }
        }
    }
    for n in &report.annotations {
        let resolves = report.block(&n.anchor.block).is_some_and(|b| {
            let len = normalize_text(&b.text).chars().count();
            n.anchor.span.start <= n.anchor.span.end && n.anchor.span.end <= len
        });
        if n.dangling || !resolves {
            push(
                DefectKind::DanglingAnnotation,
                Severity::Blocking,
                &n.id,
                format!("note {} no longer anchors to {}", n.id, n.anchor.block),
            );
        }
    }
    for b in &report.blocks {
        if b.kind == BlockKind::Proof && b.text.trim().is_empty() {
            push(
                DefectKind::EmptyProof,
                Severity::Minor,
                &b.id,
                "proof block is empty".into(),
            );
        }
    }
    out
}

/// Validates `report` as if it were being finalized.
pub fn validate_as_final(report: &Report, lookup: PathLookup<'_>) -> Vec<Defect> {
    let mut r = report.clone();
    r.status = ReportStatus::Final;
    validate_report(&r, lookup)
}

pub fn has_blocking(defects: &[Defect]) -> bool {
    defects.iter().any(|d| d.severity == Severity::Blocking)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderFormat {
    Structured,
    Markdown,
    Latex,
}

impl RenderFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            Self::Structured => "application/json",
            Self::Markdown => "text/markdown; charset=utf-8",
            Self::Latex => "application/x-latex",
        }
    }
}

impl std::str::FromStr for RenderFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "structured" | "json" => Ok(Self::Structured),
            "markdown" | "md" => Ok(Self::Markdown),
            "latex" | "tex" => Ok(Self::Latex),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

pub fn render(report: &Report, format: RenderFormat) -> Vec<u8> {
    match format {
        RenderFormat::Structured => {
            let mut v = serde_json::to_vec_pretty(report).expect("report serializes");
            v.push(b'\n');
            v
        }
        RenderFormat::Markdown => render_markdown(report).into_bytes(),
        RenderFormat::Latex => render_latex(report).into_bytes(),
    }
}

fn locator_label(p: &Provenance) -> String {
    match p.version {
        Some(v) => format!("{}@v{v}", p.locator),
        None => p.locator.clone(),
    }
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn render_markdown(r: &Report) -> String {
    let mut s = format!("# {}\n", r.title);
    for b in &r.blocks {
        s.push('\n');
        match b.kind {
            BlockKind::Heading => {
                let _ = writeln!(s, "## {}", b.text.trim());
            }
            BlockKind::Paragraph | BlockKind::Exposition => {
                let _ = writeln!(s, "{}", b.text.trim());
            }
            BlockKind::Theorem => {
                let _ = writeln!(s, "**Theorem.** {}", b.text.trim());
            }
            BlockKind::Proof => {
                let _ = writeln!(s, "*Proof.* {} ∎", b.text.trim());
            }
            BlockKind::Code => {
                let _ = writeln!(s, "```\n{}\n```", b.text.trim_end());
            }
            BlockKind::AttachmentRef => {
                let p = b.text.trim();
                let _ = writeln!(s, "Attachment: [{p}]({p})");
            }
        }
        for n in r.annotations.iter().filter(|n| n.anchor.block == b.id) {
            let mut class = String::from("margin-note");
            if n.dangling || n.superseded {
                class.push_str(" superseded");
            }
            let _ = writeln!(
                s,
                "<aside class=\"{class}\" id=\"{}\" data-anchor=\"{}:{}-{}\" data-provenance=\"{}\">{} <cite>{}</cite></aside>",
                n.id,
                n.anchor.block,
                n.anchor.span.start,
                n.anchor.span.end,
                n.provenance.kind.as_str(),
                html_escape(&n.text),
                html_escape(&locator_label(&n.provenance)),
            );
        }
    }
    if !r.references.is_empty() {
        s.push_str("\n## References\n\n");
        for reference in &r.references {
            match reference {
                Reference::Internal { path, version } => {
                    let _ = writeln!(s, "- [{path}]({path}) (version {version})");
                }
                Reference::External { uri, title, verified } => {
                    let mark = if *verified { "" } else { " (unverified)" };
                    let _ = writeln!(s, "- [{title}]({uri}){mark}");
                }
            }
        }
    }
    s
}

fn tex_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\textbackslash{}"),
            '&' | '%' | '$' | '#' | '_' | '{' | '}' => {
                out.push('\\');
                out.push(c);
            }
            '~' => out.push_str("\\textasciitilde{}"),
            '^' => out.push_str("\\textasciicircum{}"),
            _ => out.push(c),
        }
    }
    out
}

fn render_latex(r: &Report) -> String {
    let mut s = String::new();
    s.push_str(
        "\\documentclass{article}\n\\usepackage[utf8]{inputenc}\n\\usepackage{amsthm}\n\\usepackage{hyperref}\n",
    );
    s.push_str("\\newtheorem{theorem}{Theorem}\n");
    let _ = writeln!(s, "\\title{{{}}}", tex_escape(&r.title));
    s.push_str("\\date{}\n\\begin{document}\n\\maketitle\n");
    for b in &r.blocks {
        s.push('\n');
        let text = tex_escape(b.text.trim());
        match b.kind {
            BlockKind::Heading => {
                let _ = writeln!(s, "\\section*{{{text}}}");
            }
            BlockKind::Paragraph | BlockKind::Exposition => {
                let _ = writeln!(s, "{text}");
            }
            BlockKind::Theorem => {
                let _ = writeln!(s, "\\begin{{theorem}}\n{text}\n\\end{{theorem}}");
            }
            BlockKind::Proof => {
                let _ = writeln!(s, "\\begin{{proof}}\n{text}\n\\end{{proof}}");
            }
            BlockKind::Code => {
                let _ = writeln!(s, "\\begin{{verbatim}}\n{}\n\\end{{verbatim}}", b.text.trim_end());
            }
            BlockKind::AttachmentRef => {
                let _ = writeln!(s, "Attachment: \\texttt{{{text}}}");
            }
        }
        for n in r.annotations.iter().filter(|n| n.anchor.block == b.id) {
            let loc = &n.provenance.locator;
            let source = if is_uri(loc) {
                format!("\\href{{{loc}}}{{source}}")
            } else {
                format!("\\texttt{{{}}}", tex_escape(&locator_label(&n.provenance)))
            };
            let _ = writeln!(s, "\\marginpar{{\\footnotesize {} ({source})}}", tex_escape(&n.text));
        }
    }
    if !r.references.is_empty() {
        s.push_str("\n\\section*{References}\n\\begin{itemize}\n");
        for reference in &r.references {
            match reference {
                Reference::Internal { path, version } => {
                    let _ = writeln!(s, "\\item \\texttt{{{}}} (version {version})", tex_escape(path));
                }
                Reference::External { uri, title, .. } => {
                    let _ = writeln!(s, "\\item \\href{{{uri}}}{{{}}}", tex_escape(title));
                }
            }
        }
        s.push_str("\\end{itemize}\n");
    }
    s.push_str("\\end{document}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none(_: &str) -> Option<u32> {
        None
    }

    fn para(text: &str) -> ReportDelta {
        ReportDelta {
            ops: vec![BlockOp::Append {
                kind: BlockKind::Paragraph,
                text: text.into(),
            }],
            ..Default::default()
        }
    }

    #[test]
    fn append_to_empty_report() {
        let mut r = Report::new("ws1", "Sofa");
        r.apply(&para("hello"), &none).unwrap();
        assert_eq!(r.blocks.len(), 1);
        assert_eq!(r.blocks[0].id, "b1");
    }

    #[test]
    fn deleting_annotated_block_flags_note() {
        let mut r = Report::new("ws1", "Sofa");
        r.apply(&para("the method"), &none).unwrap();
        let anchor = Anchor {
            block: "b1".into(),
            span: Span { start: 0, end: 3 },
        };
        r.annotate(
            anchor,
            "note",
            ProvenanceKind::ExternalLiterature,
            "https://arxiv.org/abs/1",
            &none,
        )
        .unwrap();
        r.apply(
            &ReportDelta {
                ops: vec![BlockOp::Delete { block: "b1".into() }],
                ..Default::default()
            },
            &none,
        )
        .unwrap();
        assert_eq!(r.annotations.len(), 1);
        assert!(r.annotations[0].dangling);
        let defects = validate_report(&r, &none);
        assert!(defects
            .iter()
            .any(|d| d.kind == DefectKind::DanglingAnnotation && d.severity == Severity::Blocking));
    }

    #[test]
    fn unknown_block_leaves_report_unchanged() {
        let mut r = Report::new("ws1", "t");
        r.apply(&para("a"), &none).unwrap();
        let before = r.clone();
        let bad = ReportDelta {
            ops: vec![
                BlockOp::Append {
                    kind: BlockKind::Paragraph,
                    text: "b".into(),
                },
                BlockOp::Edit {
                    block: "b9".into(),
                    text: "x".into(),
                    kind: None,
                },
            ],
            ..Default::default()
        };
        assert_eq!(r.apply(&bad, &none), Err(ReportError::UnknownBlock("b9".into())));
        assert_eq!(r, before);
    }

    #[test]
    fn annotation_checks() {
        let mut r = Report::new("ws1", "t");
        r.apply(&para("  Prune   rotations early "), &none).unwrap();
        let lookup = |p: &str| (p == "chat/log.jsonl").then_some(4);
        let missing = Anchor {
            block: "b7".into(),
            span: Span { start: 0, end: 1 },
        };
        assert!(matches!(
            r.annotate(missing, "x", ProvenanceKind::Reviewer, "chat/log.jsonl", &lookup),
            Err(ReportError::DanglingAnchor { .. })
        ));
        // normalized text is "Prune rotations early" (21 chars)
        let whole = Anchor {
            block: "b1".into(),
            span: Span { start: 0, end: 21 },
        };
        let too_long = Anchor {
            block: "b1".into(),
            span: Span { start: 0, end: 22 },
        };
        assert!(r
            .annotate(too_long, "x", ProvenanceKind::Reviewer, "chat/log.jsonl", &lookup)
            .is_err());
        assert_eq!(
            r.annotate(whole.clone(), "x", ProvenanceKind::InternalFile, "nope.txt", &lookup),
            Err(ReportError::BadLocator("nope.txt".into()))
        );
        r.annotate(
            whole,
            "Pruning heuristic derived from user suggestion",
            ProvenanceKind::UserSuggestion,
            "chat/log.jsonl",
            &lookup,
        )
        .unwrap();
        assert_eq!(r.annotations[0].provenance.version, Some(4));
    }

    #[test]
    fn same_delta_anchor_references() {
        let mut r = Report::new("ws1", "t");
        let delta = ReportDelta {
            ops: vec![BlockOp::Append {
                kind: BlockKind::Paragraph,
                text: "new claim".into(),
            }],
            annotations: vec![NoteDraft {
                anchor: AnchorDraft {
                    block: "@1".into(),
                    start: None,
                    end: None,
                },
                text: "from the literature".into(),
                provenance: ProvenanceDraft {
                    kind: ProvenanceKind::ExternalLiterature,
                    locator: "https://example.org/paper".into(),
                },
            }],
            ..Default::default()
        };
        r.apply(&delta, &none).unwrap();
        assert_eq!(r.annotations[0].anchor.block, "b1");
        assert_eq!(r.annotations[0].anchor.span, Span { start: 0, end: 9 });
    }

    #[test]
    fn validation_classes() {
        let empty = Report::new("ws1", "t");
        assert!(!has_blocking(&validate_report(&empty, &none)));
        assert!(validate_as_final(&empty, &none)
            .iter()
            .any(|d| d.kind == DefectKind::MissingExposition && d.severity == Severity::Blocking));

        let mut r = Report::new("ws1", "t");
        r.references.push(Reference::Internal {
            path: "ws1/never.txt".into(),
            version: 1,
        });
        r.references.push(Reference::External {
            uri: "https://example.org".into(),
            title: "x".into(),
            verified: false,
        });
        r.blocks.push(Block {
            id: "b1".into(),
            kind: BlockKind::Proof,
            text: " ".into(),
        });
        let kinds: Vec<_> = validate_report(&r, &none)
            .into_iter()
            .map(|d| (d.kind, d.severity))
            .collect();
        assert!(kinds.contains(&(DefectKind::DanglingInternalRef, Severity::Blocking)));
        assert!(kinds.contains(&(DefectKind::UnverifiedExternalRef, Severity::Minor)));
        assert!(kinds.contains(&(DefectKind::EmptyProof, Severity::Minor)));
    }

    #[test]
    fn renders() {
        let r = Report::new("ws1", "Moving sofa");
        assert_eq!(render(&r, RenderFormat::Markdown), b"# Moving sofa\n");
        let back = Report::from_json(&render(&r, RenderFormat::Structured)).unwrap();
        assert_eq!(back, r);

        let mut r = Report::new("ws1", "A_b");
        r.apply(&para("50% done"), &none).unwrap();
        r.annotate(
            Anchor {
                block: "b1".into(),
                span: Span { start: 0, end: 3 },
            },
            "see paper",
            ProvenanceKind::ExternalLiterature,
            "https://arxiv.org/abs/2411.19826",
            &none,
        )
        .unwrap();
        let md = String::from_utf8(render(&r, RenderFormat::Markdown)).unwrap();
        assert!(md.contains("<aside class=\"margin-note\" id=\"n1\""));
        let tex = String::from_utf8(render(&r, RenderFormat::Latex)).unwrap();
        assert!(tex.contains("50\\% done"));
        assert!(tex.contains("\\marginpar{"));
        assert!(tex.contains("\\title{A\\_b}"));
    }
}
