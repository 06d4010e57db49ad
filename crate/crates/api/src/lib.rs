//! HTTP, event-stream and command-line front end for the research workbench.
//!
//! The server exposes each project's chat, goals, workstreams, reports,
//! trajectories, reviews and files as JSON routes, plus a resumable
//! server-sent-events stream of project events.

pub mod cli;
pub mod config;
pub mod events;
pub mod server;

pub use config::{ApiConfig, BackendConfig, ConfigError};
pub use events::{decode_frames, encode_event, event_stream};
pub use server::{router, serve, serve_with_token, ServeError, Server};
