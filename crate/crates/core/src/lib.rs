// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod backend;
pub mod corpus;
pub mod digest;
pub mod error;
pub mod error_ablation;
pub mod mechanism;
pub mod oracle;
pub mod prompting;
pub mod runner;
pub mod scoring;

pub use error::{Error, Result};
