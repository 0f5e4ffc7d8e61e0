//! Batch front end for the `umaxent` solver: problem files, synthetic
//! ground truth, solving, verification reports and trace export.

pub mod commands;
pub mod problem;
pub mod report;
pub mod synth;
