//! Risk-based test selection and commit-level defect prediction.
//!
//! Two workflows share this crate. Test selection scores every test case by
//! risk exposure (probability × time × impact) from weighted, normalized
//! criteria, ranks the catalogue and cuts it to a budget while retiring
//! stale tests. Defect prevention labels bug-inducing commits with the SZZ
//! heuristic, extracts commit features, trains a gradient-boosted classifier
//! and explains each prediction with additive per-feature contributions.

pub mod codemetrics;
pub mod expr;
pub mod features;
pub mod learn;
pub mod model;
pub mod pipeline;
pub mod risk;
pub mod select;
pub mod synth;
pub mod szz;
