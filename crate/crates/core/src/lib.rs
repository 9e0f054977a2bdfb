// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod anonymizer;
pub mod audit;
pub mod baselines;
pub mod container;
pub mod corpus;
pub mod drift;
pub mod error;
pub mod flops;
pub mod forget;
pub mod lm;
pub mod metrics;
pub mod numeric;
pub mod optim;
pub mod pipeline;
pub mod projector;
pub mod sqs;

pub use error::{NspuError, Result};
