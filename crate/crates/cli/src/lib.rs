//! Library side of the `quarry` command: headless sessions, the evaluation
//! harness and the scale smoke test.

pub mod eval;
pub mod harness;
pub mod run;
pub mod scale;
