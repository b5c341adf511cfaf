//! Nonstationary policy optimization over episodic low-rank MDPs.

// Index loops mirror the (h, s, a) table layout throughout.
#![allow(clippy::needless_range_loop)]

pub mod ada_portal;
pub mod env;
pub mod harness;
pub mod learning;
pub mod mdp;
pub mod metrics;
pub mod portal;
pub mod random;

#[cfg(test)]
pub(crate) mod testutil;
