//! Probing the ideological malleability of chat-completion models.
//!
//! The pipeline elicits answers to the 62 political-compass statements from a
//! model endpoint, once per persona description, scores each answer sheet into
//! a point on the economic/social plane, and compares conditions (plain
//! personas vs. personas carrying an injected ideological descriptor) with
//! spatial and paired statistics. A deterministic planted-ideology mock
//! endpoint ([`mocknet`]) gives every stage an analytic ground truth, so the
//! whole pipeline is testable without a GPU in the loop.
//!
//! Orientation: positive economic = right, positive social = authoritarian;
//! both axes span [-10, 10].

pub mod cluster;
pub mod corpus;
pub mod elicit;
pub mod error;
pub mod mocknet;
pub mod pct;
pub mod report;
pub mod stats;

pub use error::{Error, Result};

pub use corpus::{Condition, ConditionedPersona, Persona};
pub use pct::{AnswerChoice, AnswerSheet, CompassPoint, ScoringMatrix, Statement};
pub use stats::{GridHistogram, GridSpec};
