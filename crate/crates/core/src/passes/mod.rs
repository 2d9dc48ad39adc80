//! The optimization pipeline and its transformations.

mod cleanup;
mod clone;
mod inline;
mod pipeline;
mod unroll;

pub use cleanup::{cleanup_function, cleanup_module};
pub use inline::{apply_inline, inline_legality, remove_dead_functions, InlineError};
pub use pipeline::*;
pub use unroll::{
    apply_unroll, unroll_legality, UnrollDecision, UnrollError, UnrollType, UNROLL_SIZE_CAP,
};

/// Outcome of a legality check; legal when there are no reasons.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LegalityReport {
    pub reasons: Vec<String>,
}

impl LegalityReport {
    pub fn illegal(reason: &str) -> Self {
        LegalityReport {
            reasons: vec![reason.to_string()],
        }
    }

    pub fn is_legal(&self) -> bool {
        self.reasons.is_empty()
    }
}
