//! Event-stream framing and resumable streams over a project's event log.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use futures::Stream;
use tokio::sync::mpsc;
use workbench_core::engine::{EventLog, ProjectEvent};

const KEEP_ALIVE: Duration = Duration::from_secs(15);

/// One server-sent-events frame: `id`, `event` and a single-line JSON `data`
/// carrying the whole event.
pub fn encode_event(e: &ProjectEvent) -> Vec<u8> {
    let data = serde_json::to_string(e).expect("event serializes");
    format!("id: {}\nevent: {}\ndata: {}\n\n", e.event_id, e.kind.as_str(), data).into_bytes()
}

struct Cursor {
    backlog: VecDeque<ProjectEvent>,
    live: mpsc::UnboundedReceiver<ProjectEvent>,
    last: u64,
}

/// Every event after `after`, then live events as they are emitted, each
/// exactly once and in id order.
pub fn event_stream(log: Arc<EventLog>, after: u64) -> impl Stream<Item = Result<Bytes, std::io::Error>> {
    // Subscribe before reading the backlog so nothing falls in between;
    // duplicates from the overlap are dropped by id.
    let (tx, live) = mpsc::unbounded_channel();
    log.subscribe(move |e| tx.send(e.clone()).is_ok());
    let cursor = Cursor {
        backlog: log.after(after).into(),
        live,
        last: after,
    };
    futures::stream::unfold(cursor, |mut c| async move {
        loop {
            let next = match c.backlog.pop_front() {
                Some(e) => Some(e),
                None => match tokio::time::timeout(KEEP_ALIVE, c.live.recv()).await {
                    Ok(Some(e)) => Some(e),
                    Ok(None) => return None,
                    Err(_) => return Some((Ok(Bytes::from_static(b": keep-alive\n\n")), c)),
                },
            };
            if let Some(e) = next {
                if e.event_id > c.last {
                    c.last = e.event_id;
                    let frame = Bytes::from(encode_event(&e));
                    return Some((Ok(frame), c));
                }
            }
        }
    })
}

/// Parses frames back into `(id, kind, data)`, ignoring comments. Returns
/// the parsed frames and any trailing partial frame.
pub fn decode_frames(buf: &str) -> (Vec<(u64, String, String)>, String) {
    let mut out = Vec::new();
    let mut rest = buf;
    while let Some(end) = rest.find("\n\n") {
        let frame = &rest[..end];
        rest = &rest[end + 2..];
        let (mut id, mut kind, mut data) = (None, String::new(), String::new());
        for line in frame.lines() {
            if let Some(v) = line.strip_prefix("id: ") {
                id = v.parse().ok();
            } else if let Some(v) = line.strip_prefix("event: ") {
                kind = v.to_string();
            } else if let Some(v) = line.strip_prefix("data: ") {
                data = v.to_string();
            }
        }
        if let Some(id) = id {
            out.push((id, kind, data));
        }
    }
    (out, rest.to_string())
}
