//! Shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

pub mod checks;
pub mod oracle;
