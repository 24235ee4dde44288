//! Tomographic reconstruction by centralised gradient descent and by a
//! decentralised ADMM whose nodes exchange quantised image segments.

pub mod comm;
pub mod error;
pub mod experiments;
pub mod projector;
pub mod quantizers;
pub mod solvers;

pub use error::{Error, Result};
