//! Outcome-mapped workplace-based assessment.
//!
//! Observations of students on clinical workflow items, exam questions and
//! teaching units are all mapped onto learning outcomes. On top of that this
//! crate provides session capture with an idempotent sync protocol, sessional
//! consistency analytics, exam blueprinting and practice-slot scheduling, and
//! a synthetic cohort generator for exercising all of it.

pub mod analytics;
pub mod capture;
pub mod ids;
pub mod mapping;
pub mod model;
pub mod registry;
pub mod report;
pub mod scheduler;
pub mod synth;

pub use ids::*;
pub use model::*;
pub use registry::{validate_observation, EntityKind, Registry, RegistryDocument, RegistryError, ValidationError};
