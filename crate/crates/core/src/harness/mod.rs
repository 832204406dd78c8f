//! Acceptance suite, ablations and the stage runners they share.

pub mod ablate;
pub mod accept;
pub mod oracle;
pub mod pipeline;

use std::fmt;

use serde::Serialize;

pub use ablate::{run_ablation, AblationRow, AblationTable, ABLATIONS};
pub use accept::{acceptance_config, run_acceptance, AcceptOptions, ACCEPTANCE_SEED, CRITERIA};
pub use pipeline::MetricsSink;

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:>2} {}: {}", self.id, self.name, self.detail)
    }
}
