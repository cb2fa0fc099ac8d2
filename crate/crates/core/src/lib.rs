//! Collaboration engine for pools of specialized language-model clients.
//!
//! A query is routed to the `k` most relevant clients, each answers
//! independently, a server model synthesizes the answers into a guidance
//! summary, and every client then refines its own answer against that
//! guidance — optionally over several rounds. Vision-language queries use a
//! two-step peer-feedback variant with no server. Every run produces a
//! canonical-JSON transcript that can be persisted and replayed bit-for-bit
//! against scripted mock backends.

pub mod backend;
pub mod canonical;
pub mod config;
pub mod eval;
pub mod orchestrator;
pub mod router;
pub mod store;
pub mod template;
pub mod types;
pub mod vlm;
