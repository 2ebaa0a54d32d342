//! Phantom cohorts, dataset label rules, splitting, preprocessing and the
//! experiment runner.

pub mod experiment;
pub mod labels;
pub mod phantom;
pub mod preprocess;
