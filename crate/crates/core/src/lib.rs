//! Core of the research workbench: the versioned workspace, the agent message
//! bus, the model boundary, tools, agents, reports, reviews and the project
//! engine that ties them together.

pub mod agent;
pub mod bus;
pub mod clock;
pub mod engine;
pub mod model;
pub mod report;
pub mod review;
pub mod scenario;
pub mod tools;
pub mod workspace;
