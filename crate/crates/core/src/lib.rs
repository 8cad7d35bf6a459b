//! Low-rank query/key attention with a two-tier KV cache.
//!
//! At prefill, the prompt's query and key matrices of one head are jointly
//! factorized to rank `r` ([`prefill`]). During decode each new token is
//! compressed against the running projections ([`decode`]), the compact
//! proxies rank the history, and only the selected full-precision rows are
//! attended over ([`cache`], [`session`]). [`oracle`] holds the exact
//! attention every approximation is measured against.

pub mod cache;
pub mod cli;
pub mod decode;
pub mod error;
pub mod matrix;
pub mod oracle;
pub mod prefill;
pub mod session;
pub mod workload;

pub use error::{LrqkError, Result};
pub use matrix::Matrix;
